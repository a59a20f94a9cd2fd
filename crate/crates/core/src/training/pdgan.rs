use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::log::{write_csv, EpochRecord, Phase, StepRecord, TrainLog};
use super::{critic_loss, generator_loss, TrainConfig, TrainError};
use crate::models::{ArchConfig, Critic, Ctx, Generator, Mode, Network};
use crate::rng::{derive_seed, substream};
use crate::synth::{Batch, Dataset, Label};
use crate::tensor::{read_pdt, write_pdt, AdamState, Graph, SgdState, Tensor};

const TAG_GENERATOR: u64 = 1;
const TAG_CRITIC: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_AUGMENT: u64 = 4;

/// Step counters; persisted with checkpoints so training can resume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epochs_done: usize,
    /// All generator steps, warmup included.
    pub gen_steps: u64,
    /// Generator steps taken in the adversarial phase; drives the critic
    /// schedule.
    pub adv_steps: u64,
    pub critic_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerFile {
    config: TrainConfig,
    state: TrainerState,
}

/// Warmup + adversarial pseudo-depth training of a generator and critic.
pub struct PdganTrainer {
    pub generator: Generator,
    pub critic: Critic,
    pub config: TrainConfig,
    pub state: TrainerState,
    pub log: TrainLog,
    gen_opt: AdamState,
    critic_opt: SgdState,
}

impl PdganTrainer {
    pub fn new(arch: ArchConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            generator: Generator::new(arch, derive_seed(config.seed, TAG_GENERATOR))?,
            critic: Critic::new(arch, derive_seed(config.seed, TAG_CRITIC))?,
            gen_opt: AdamState::new(config.gen_adam),
            critic_opt: SgdState::new(config.critic_sgd),
            config,
            state: TrainerState::default(),
            log: TrainLog::default(),
        })
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Adversarial
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_done >= self.config.total_pdgan_epochs
    }

    /// Runs the remaining epochs. `on_epoch` sees the trainer after every
    /// epoch (e.g. to checkpoint it).
    pub fn run<F>(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self) -> Result<(), TrainError>,
    {
        while !self.is_finished() {
            self.run_epoch(train, val)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// One epoch of whichever phase is current, followed by validation.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord, TrainError> {
        let epoch = self.state.epochs_done;
        let phase = self.phase_of(epoch);
        let steps = match phase {
            Phase::Warmup => self.warmup_epoch(train)?,
            Phase::Adversarial => self.pdgan_epoch(train)?,
        };
        let train_l1 = steps.iter().map(|s| s.loss_l1).sum::<f64>() / steps.len() as f64;
        let mut rec = EpochRecord {
            epoch,
            phase,
            train_l1,
            val_l1: None,
            val_live_mean: None,
            val_spoof_mean: None,
        };
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let v = depth_report(&self.generator, val, self.config.batch_size)?;
            rec.val_l1 = Some(v.l1);
            rec.val_live_mean = v.live_mean;
            rec.val_spoof_mean = v.spoof_mean;
        }
        self.log.epochs.push(rec.clone());
        Ok(rec)
    }

    fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if !data.has_both_labels() {
            return Err(TrainError::SingleClass);
        }
        if data.size != self.generator.arch().image_size {
            return Err(TrainError::Config(format!(
                "dataset images are {0}×{0} but the networks expect {1}×{1}",
                data.size,
                self.generator.arch().image_size
            )));
        }
        Ok(())
    }

    fn epoch_batches(&self, data: &Dataset) -> Result<Vec<Batch>, TrainError> {
        let epoch = self.state.epochs_done as u64;
        let min_batch = self.generator.arch().min_train_batch();
        let mut shuffle = substream(derive_seed(self.config.seed, TAG_SHUFFLE), epoch);
        let order = data.epoch_order(self.config.batch_size, min_batch, &mut shuffle);
        let mut aug_rng = substream(derive_seed(derive_seed(self.config.seed, TAG_AUGMENT), self.config.augment.seed), epoch);
        order
            .iter()
            .map(|idx| Ok(data.batch(idx, Some((&self.config.augment, &mut aug_rng)))?))
            .collect()
    }

    /// Generator-only epoch on the L1 loss; the critic is not touched.
    pub fn warmup_epoch(&mut self, data: &Dataset) -> Result<Vec<StepRecord>, TrainError> {
        self.check_data(data)?;
        if self.state.epochs_done >= self.config.warmup_epochs {
            return Err(TrainError::Config(format!(
                "epoch {} is past the {} warmup epochs",
                self.state.epochs_done, self.config.warmup_epochs
            )));
        }
        let mut records = Vec::new();
        for batch in self.epoch_batches(data)? {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, self.generator.store(), Mode::Train);
            let x = ctx.graph.constant(batch.rgb);
            let y = self.generator.forward(&mut ctx, x)?;
            let binding = ctx.finish();
            let target = g.constant(batch.depth);
            let l1 = g.l1_loss(y, target)?;
            let total = g.scale(l1, self.config.lambda_l)?;
            g.backward(total)?;
            let store = self.generator.store_mut();
            store.collect_grads(&g, &binding);
            store.update_running_stats(&g, &binding);
            self.gen_opt.step(store.trainable_mut())?;
            self.state.gen_steps += 1;
            records.push(StepRecord {
                epoch: self.state.epochs_done,
                step: self.state.gen_steps,
                phase: Phase::Warmup,
                loss_total: g.value(total).item(),
                loss_l1: g.value(l1).item(),
                loss_adv: None,
                loss_aux: None,
                critic_total: None,
                critic_adv: None,
                critic_aux: None,
            });
        }
        self.state.epochs_done += 1;
        self.log.steps.extend_from_slice(&records);
        Ok(records)
    }

    /// Adversarial epoch: a generator step on every batch, plus a critic
    /// step after every `critic_interval`-th one.
    pub fn pdgan_epoch(&mut self, data: &Dataset) -> Result<Vec<StepRecord>, TrainError> {
        self.check_data(data)?;
        if self.state.epochs_done < self.config.warmup_epochs {
            return Err(TrainError::Config(format!(
                "epoch {} is still inside the {} warmup epochs",
                self.state.epochs_done, self.config.warmup_epochs
            )));
        }
        let mut records = Vec::new();
        for batch in self.epoch_batches(data)? {
            let live = batch.liveness();
            let (mut rec, fake) = self.generator_step(&batch, &live)?;
            if self.state.adv_steps % self.config.critic_interval == 0 {
                let (t, a, c) = self.critic_step(&batch, &live, fake)?;
                rec.critic_total = Some(t);
                rec.critic_adv = Some(a);
                rec.critic_aux = Some(c);
            }
            records.push(rec);
        }
        self.state.epochs_done += 1;
        self.log.steps.extend_from_slice(&records);
        Ok(records)
    }

    /// Returns the step record and the generated depth, detached.
    fn generator_step(&mut self, batch: &Batch, live: &[f64]) -> Result<(StepRecord, Tensor), TrainError> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, self.generator.store(), Mode::Train);
        let x = ctx.graph.constant(batch.rgb.clone());
        let y = self.generator.forward(&mut ctx, x)?;
        let gen_binding = ctx.finish();
        // the critic judges but does not learn here
        let mut cctx = Ctx::new(&mut g, self.critic.store(), Mode::Train).frozen();
        let out = self.critic.forward(&mut cctx, y)?;
        drop(cctx);
        let target = g.constant(batch.depth.clone());
        let loss = generator_loss(&mut g, out.adv, out.class_live, live, y, target, &self.config)?;
        g.backward(loss.total)?;
        let store = self.generator.store_mut();
        store.collect_grads(&g, &gen_binding);
        store.update_running_stats(&g, &gen_binding);
        self.gen_opt.step(store.trainable_mut())?;
        self.state.gen_steps += 1;
        self.state.adv_steps += 1;
        let rec = StepRecord {
            epoch: self.state.epochs_done,
            step: self.state.gen_steps,
            phase: Phase::Adversarial,
            loss_total: g.value(loss.total).item(),
            loss_l1: g.value(loss.l1).item(),
            loss_adv: Some(g.value(loss.adv).item()),
            loss_aux: Some(g.value(loss.aux).item()),
            critic_total: None,
            critic_adv: None,
            critic_aux: None,
        };
        Ok((rec, g.value(y).clone()))
    }

    pub(super) fn critic_step(&mut self, batch: &Batch, live: &[f64], fake: Tensor) -> Result<(f64, f64, f64), TrainError> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, self.critic.store(), Mode::Train);
        let real = ctx.graph.constant(batch.depth.clone());
        let fake = ctx.graph.constant(fake);
        let on_real = self.critic.forward(&mut ctx, real)?;
        let on_fake = self.critic.forward(&mut ctx, fake)?;
        let binding = ctx.finish();
        let loss = critic_loss(
            &mut g,
            on_real.adv,
            on_fake.adv,
            on_real.class_live,
            on_fake.class_live,
            live,
            &self.config,
        )?;
        g.backward(loss.total)?;
        let store = self.critic.store_mut();
        store.collect_grads(&g, &binding);
        store.update_running_stats(&g, &binding);
        self.critic_opt.step(store.trainable_mut())?;
        self.state.critic_steps += 1;
        Ok((g.value(loss.total).item(), g.value(loss.adv).item(), g.value(loss.aux).item()))
    }

    /// Key/value pairs describing the run, written above the step log.
    pub fn log_header(&self) -> Vec<(&'static str, String)> {
        let c = &self.config;
        vec![
            ("lambda_l", c.lambda_l.to_string()),
            ("lambda_g", c.lambda_g.to_string()),
            ("lambda_cg", c.lambda_cg.to_string()),
            ("lambda_d", c.lambda_d.to_string()),
            ("lambda_cd", c.lambda_cd.to_string()),
            ("warmup_epochs", c.warmup_epochs.to_string()),
            ("total_epochs", c.total_pdgan_epochs.to_string()),
            ("critic_interval", c.critic_interval.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("seed", c.seed.to_string()),
        ]
    }

    /// Writes `generator/`, `critic/`, optimizer state, counters and logs.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir.join("optim"))?;
        let epochs = self.state.epochs_done;
        self.generator.save(
            &dir.join("generator"),
            &self.generator.checkpoint_meta(epochs, self.state.gen_steps),
        )?;
        self.critic
            .save(&dir.join("critic"), &self.critic.checkpoint_meta(epochs, self.state.critic_steps))?;
        let (m, v) = self.gen_opt.moments();
        save_buffers(&dir.join("optim/gen_adam_m.pdt"), m)?;
        save_buffers(&dir.join("optim/gen_adam_v.pdt"), v)?;
        save_buffers(&dir.join("optim/critic_sgd_v.pdt"), self.critic_opt.velocity())?;
        let file = TrainerFile {
            config: self.config.clone(),
            state: self.state,
        };
        fs::write(dir.join("trainer.json"), serde_json::to_string_pretty(&file)? + "\n")?;
        write_csv(&dir.join("train_log.csv"), &self.log_header(), &self.log.steps)?;
        write_csv(&dir.join("epoch_log.csv"), &[], &self.log.epochs)?;
        Ok(())
    }

    /// Restores a trainer written by [`PdganTrainer::save`].
    pub fn resume(dir: &Path) -> Result<Self, TrainError> {
        let file: TrainerFile = serde_json::from_str(&fs::read_to_string(dir.join("trainer.json"))?)?;
        let (generator, _) = Generator::load(&dir.join("generator"))?;
        let (critic, _) = Critic::load(&dir.join("critic"))?;
        let mut gen_opt = AdamState::new(file.config.gen_adam);
        let gen_sizes = trainable_sizes(generator.store());
        gen_opt.restore(
            load_buffers(&dir.join("optim/gen_adam_m.pdt"), &gen_sizes)?,
            load_buffers(&dir.join("optim/gen_adam_v.pdt"), &gen_sizes)?,
            file.state.gen_steps,
        );
        let mut critic_opt = SgdState::new(file.config.critic_sgd);
        critic_opt.restore(load_buffers(
            &dir.join("optim/critic_sgd_v.pdt"),
            &trainable_sizes(critic.store()),
        )?);
        let log = TrainLog {
            steps: super::log::read_csv(&dir.join("train_log.csv"))?,
            epochs: super::log::read_csv(&dir.join("epoch_log.csv"))?,
        };
        Ok(Self {
            generator,
            critic,
            config: file.config,
            state: file.state,
            log,
            gen_opt,
            critic_opt,
        })
    }
}

fn trainable_sizes(store: &crate::models::ParamStore) -> Vec<usize> {
    store
        .entries()
        .iter()
        .filter(|e| e.kind == crate::models::ParamKind::Trainable)
        .map(|e| e.tensor.numel())
        .collect()
}

/// Concatenates optimizer buffers into one rank-1 file; an empty buffer
/// list (optimizer never stepped) is stored as a single NaN marker.
fn save_buffers(path: &Path, bufs: &[Vec<f64>]) -> Result<(), TrainError> {
    let flat: Vec<f64> = if bufs.is_empty() {
        vec![f64::NAN]
    } else {
        bufs.concat()
    };
    write_pdt(path, &Tensor::new(&[flat.len()], flat)?)?;
    Ok(())
}

fn load_buffers(path: &Path, sizes: &[usize]) -> Result<Vec<Vec<f64>>, TrainError> {
    let t = read_pdt(path)?;
    if t.numel() == 1 && t.data()[0].is_nan() {
        return Ok(Vec::new());
    }
    if t.numel() != sizes.iter().sum::<usize>() {
        return Err(TrainError::Config(format!(
            "{} holds {} values, parameters need {}",
            path.display(),
            t.numel(),
            sizes.iter().sum::<usize>()
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut rest = t.data();
    for &n in sizes {
        let (head, tail) = rest.split_at(n);
        out.push(head.to_vec());
        rest = tail;
    }
    Ok(out)
}

/// Eval-mode depth predictions for every sample of `data`, in order.
pub fn predict_depths(generator: &Generator, data: &Dataset, batch_size: usize) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<crate::rng::Rng>(chunk, None)?;
        let pred = generator.predict(&batch.rgb)?;
        out.extend((0..chunk.len()).map(|i| pred.index_outer(i)));
    }
    Ok(out)
}

/// Depth quality on a labelled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthReport {
    /// Mean absolute error over every pixel of every sample.
    pub l1: f64,
    /// L1 restricted to live samples.
    pub live_l1: Option<f64>,
    /// Mean generated pixel value on live / spoof samples.
    pub live_mean: Option<f64>,
    pub spoof_mean: Option<f64>,
}

pub fn depth_report(generator: &Generator, data: &Dataset, batch_size: usize) -> Result<DepthReport, TrainError> {
    let preds = predict_depths(generator, data, batch_size)?;
    let (mut l1, mut live_l1, mut live_sum, mut spoof_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut n_live, mut n_spoof) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(&data.samples) {
        let err = p.data().iter().zip(s.depth_target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64;
        l1 += err;
        match s.label {
            Label::Live => {
                live_l1 += err;
                live_sum += p.mean();
                n_live += 1;
            }
            Label::Spoof => {
                spoof_sum += p.mean();
                n_spoof += 1;
            }
        }
    }
    let avg = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    Ok(DepthReport {
        l1: l1 / preds.len().max(1) as f64,
        live_l1: avg(live_l1, n_live),
        live_mean: avg(live_sum, n_live),
        spoof_mean: avg(spoof_sum, n_spoof),
    })
}
