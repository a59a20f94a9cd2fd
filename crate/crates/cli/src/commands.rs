use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pdgan::eval::{pca_2d, sweep_threshold, write_projection, write_scores, EvalError, MetricsReport};
use pdgan::models::{read_index, ArchConfig, Classifier, Generator, Network};
use pdgan::synth::{make_dataset, ClassCounts, Dataset, DatasetSpec, Label};
use pdgan::training::{
    build_classifier, embed_dataset, epoch_budget, finetune_classifier, predict_depths, score_dataset, write_csv,
    BackboneSource, PdganTrainer, TrainError,
};
use pdgan::Tensor;
use serde::Serialize;

use crate::config::RunConfig;
use crate::Usage;

const DEFAULT_SIZE: usize = 32;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn not_found(msg: String) -> anyhow::Error {
    std::io::Error::new(std::io::ErrorKind::NotFound, msg).into()
}

fn load_dataset(path: Option<&Path>, flag: &str) -> Result<Dataset> {
    let path = path.ok_or_else(|| usage(format!("{flag} is required")))?;
    if !path.exists() {
        return Err(not_found(format!("{} does not exist", path.display())));
    }
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Accepts a checkpoint directory, or a training/fine-tuning output
/// directory holding one under one of `subs`.
fn checkpoint_dir(path: &Path, subs: &[&str]) -> Result<PathBuf> {
    if path.join("index.json").exists() {
        return Ok(path.to_path_buf());
    }
    subs.iter()
        .map(|s| path.join(s))
        .find(|p| p.join("index.json").exists())
        .ok_or_else(|| not_found(format!("no checkpoint found at {}", path.display())))
}

fn write_pgm(path: &Path, depth: &Tensor) -> Result<()> {
    let s = depth.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(depth.data().iter().map(|&d| (255.0 * d).round().clamp(0.0, 255.0) as u8));
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn synth_data(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let s = &cfg.synth;
    let counts = ClassCounts {
        live: s.live,
        print: s.print,
        screen: s.screen,
        mask: s.mask,
    };
    if counts.total() == 0 {
        return Err(usage("no samples requested; set --live/--print/--screen/--mask"));
    }
    let size = *cfg.image_size.get_or_insert(DEFAULT_SIZE);
    let spec = DatasetSpec {
        name: s.name.clone(),
        counts,
        size,
        seed: cfg.train.seed,
    };
    let manifest = make_dataset(&spec, &out)?;
    cfg.echo(&out)?;
    println!(
        "synth-data: {} samples (live {}, print {}, screen {}, mask {}) at {size}×{size}, seed {} → {}",
        manifest.samples,
        counts.live,
        counts.print,
        counts.screen,
        counts.mask,
        spec.seed,
        out.display()
    );
    Ok(())
}

pub fn train_pdgan(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let train = load_dataset(cfg.data.train.as_deref(), "--train")?;
    let explicit_val = cfg.data.val.as_deref().map(|p| load_dataset(Some(p), "--val")).transpose()?;
    let held_out;
    let (fit, val) = match &explicit_val {
        Some(v) => (&train, Some(v)),
        None if cfg.train.val_fraction > 0.0 => {
            held_out = train.split(cfg.train.val_fraction, cfg.train.seed);
            (&held_out.0, Some(&held_out.1))
        }
        None => (&train, None),
    };

    let mut trainer = if cfg.resume && out.join("trainer.json").exists() {
        let t = PdganTrainer::resume(&out).with_context(|| format!("resuming from {}", out.display()))?;
        cfg.train = t.config.clone();
        t
    } else {
        let arch = cfg.arch(train.size);
        cfg.image_size = Some(arch.image_size);
        let t = PdganTrainer::new(arch, cfg.train.clone())?;
        t.save(&out)?;
        t
    };
    cfg.echo(&out)?;

    let total = trainer.config.total_pdgan_epochs;
    while !trainer.is_finished() {
        let rec = match trainer.run_epoch(fit, val) {
            Ok(rec) => rec,
            Err(e @ TrainError::NonFinite { .. }) => {
                let kept = trainer.state.epochs_done;
                return Err(anyhow::Error::new(e).context(format!(
                    "training diverged; the checkpoint after epoch {kept} is kept in {}",
                    out.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        trainer.save(&out)?;
        let val_part = match (rec.val_l1, rec.val_live_mean, rec.val_spoof_mean) {
            (Some(l1), Some(live), Some(spoof)) => format!("  val_l1 {l1:.4}  live {live:.4}  spoof {spoof:.4}"),
            (Some(l1), ..) => format!("  val_l1 {l1:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {}/{total} {:<11} train_l1 {:.4}{val_part}",
            rec.epoch + 1,
            format!("{:?}", rec.phase).to_lowercase(),
            rec.train_l1
        );
    }

    if cfg.dump_depths {
        let dir = out.join("depths");
        fs::create_dir_all(&dir)?;
        let depths = predict_depths(&trainer.generator, &train, trainer.config.batch_size)?;
        for (i, (d, s)) in depths.iter().zip(&train.samples).enumerate() {
            let tag = match s.label {
                Label::Live => "live",
                Label::Spoof => s.spoof_class.as_str(),
            };
            write_pgm(&dir.join(format!("{i:05}_{tag}.pgm")), d)?;
        }
    }
    println!(
        "train-pdgan: {} epochs ({} warmup), {} generator / {} critic steps, lambda_l {} → {}",
        trainer.state.epochs_done,
        trainer.config.warmup_epochs,
        trainer.state.gen_steps,
        trainer.state.critic_steps,
        trainer.config.lambda_l,
        out.display()
    );
    Ok(())
}

/// A `--backbone` / `--source` value.
enum Source {
    He,
    Pdgan(PathBuf),
    Ckpt(PathBuf),
}

impl Source {
    fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "he" => Ok(Source::He),
            Some(("pdgan", p)) if !p.is_empty() => Ok(Source::Pdgan(p.into())),
            Some(("ckpt", p)) if !p.is_empty() => Ok(Source::Ckpt(p.into())),
            _ => Err(usage(format!("backbone {s:?} is not one of he, pdgan:PATH, ckpt:PATH"))),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Source::He => "he",
            Source::Pdgan(_) => "pdgan",
            Source::Ckpt(_) => "ckpt",
        }
    }
}

/// A loaded backbone: the architecture it implies and its own epoch count.
struct Backbone {
    arch: ArchConfig,
    epochs: usize,
    generator: Option<Generator>,
    checkpoint: Option<PathBuf>,
}

impl Backbone {
    fn load(src: &Source, cfg: &RunConfig, size: usize) -> Result<Self> {
        let b = match src {
            Source::He => Backbone {
                arch: cfg.arch(size),
                epochs: 0,
                generator: None,
                checkpoint: None,
            },
            Source::Pdgan(p) => {
                let dir = checkpoint_dir(p, &["generator"])?;
                let (g, meta) = Generator::load(&dir).with_context(|| format!("loading generator {}", dir.display()))?;
                Backbone {
                    arch: *g.arch(),
                    epochs: meta.epochs,
                    generator: Some(g),
                    checkpoint: None,
                }
            }
            Source::Ckpt(p) => {
                let dir = checkpoint_dir(p, &["generator", "classifier"])?;
                let meta = read_index(&dir).with_context(|| format!("reading {}", dir.display()))?.meta;
                Backbone {
                    arch: ArchConfig {
                        width: meta.width,
                        blocks_per_stage: meta.blocks_per_stage,
                        critic_blocks_per_stage: cfg.critic_blocks_per_stage,
                        image_size: meta.image_size,
                    },
                    epochs: meta.epochs,
                    generator: None,
                    checkpoint: Some(dir),
                }
            }
        };
        if b.arch.image_size != size {
            return Err(usage(format!(
                "backbone expects {0}×{0} inputs but the dataset holds {size}×{size} images",
                b.arch.image_size
            )));
        }
        Ok(b)
    }

    fn source(&self) -> BackboneSource<'_> {
        match (&self.generator, &self.checkpoint) {
            (Some(g), _) => BackboneSource::Pdgan(g),
            (None, Some(p)) => BackboneSource::Checkpoint(p.clone()),
            (None, None) => BackboneSource::He,
        }
    }
}

fn adopt_arch(cfg: &mut RunConfig, arch: &ArchConfig) {
    cfg.width = arch.width;
    cfg.blocks_per_stage = arch.blocks_per_stage;
    cfg.image_size = Some(arch.image_size);
}

pub fn finetune(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let train = load_dataset(cfg.data.train.as_deref(), "--train")?;
    let spec = cfg.backbone.get_or_insert_with(|| "he".into()).clone();
    let src = Source::parse(&spec)?;
    let backbone = Backbone::load(&src, &cfg, train.size)?;
    adopt_arch(&mut cfg, &backbone.arch);

    let epochs = match (cfg.epochs, cfg.epoch_normalize) {
        (Some(_), Some(_)) => return Err(usage("set either epochs or epoch_normalize, not both")),
        (Some(n), None) => n,
        (None, budget) => {
            let b = *cfg.epoch_normalize.get_or_insert(budget.unwrap_or(cfg.train.baseline_classifier_epochs));
            epoch_budget(b, backbone.epochs).map_err(|e| usage(e.to_string()))?
        }
    };
    let tag = src.tag();
    let mut clf = build_classifier(backbone.arch, cfg.train.seed, cfg.multihead, &backbone.source())?;
    cfg.echo(&out)?;
    let log = finetune_classifier(&mut clf, &train, epochs, cfg.multihead, tag, &cfg.train)?;

    let mut meta = clf.checkpoint_meta(epochs, log.len() as u64);
    meta.extra = BTreeMap::from([
        ("backbone".to_string(), tag.to_string()),
        ("backbone_epochs".to_string(), backbone.epochs.to_string()),
    ]);
    clf.save(&out.join("classifier"), &meta)?;
    let header = [
        ("backbone", tag.to_string()),
        ("backbone_epochs", backbone.epochs.to_string()),
        ("epochs", epochs.to_string()),
        ("multihead", cfg.multihead.to_string()),
        ("batch_size", cfg.train.batch_size.to_string()),
        ("seed", cfg.train.seed.to_string()),
    ];
    write_csv(&out.join("classifier_log.csv"), &header, &log)?;
    println!(
        "finetune: backbone {tag} ({} epochs), {epochs} classifier epochs, {} steps{} → {}",
        backbone.epochs,
        log.len(),
        if cfg.multihead { ", multihead" } else { "" },
        out.join("classifier").display()
    );
    Ok(())
}

pub fn evaluate(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let path = cfg.classifier.clone().ok_or_else(|| usage("--classifier is required"))?;
    let dir = checkpoint_dir(&path, &["classifier"])?;
    let (clf, _) = Classifier::load(&dir).with_context(|| format!("loading classifier {}", dir.display()))?;
    let test = load_dataset(cfg.data.test.as_deref(), "--test")?;
    if test.is_empty() {
        return Err(EvalError::Empty.into());
    }
    if !test.has_both_labels() {
        return Err(EvalError::SingleClass.into());
    }
    adopt_arch(&mut cfg, clf.arch());
    cfg.echo(&out)?;

    let set = score_dataset(&clf, &test, cfg.train.batch_size)?;
    let report = sweep_threshold(&set)?;
    write_scores(&out.join("scores.csv"), &set)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("# F1 treats live as the positive class");
    println!("{}", MetricsReport::TABLE_HEADER);
    println!("{}", report.table_row());
    Ok(())
}

#[derive(Serialize)]
struct Projected {
    source: String,
    file: String,
    separation: f64,
    explained_variance: [f64; 2],
}

pub fn embed_pca(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let data = load_dataset(cfg.data.test.as_deref(), "--data")?;
    if cfg.sources.is_empty() {
        cfg.sources.push("he".into());
    }
    let sources = cfg.sources.iter().map(|s| Source::parse(s)).collect::<Result<Vec<_>>>()?;
    cfg.echo(&out)?;

    let labels = data.labels();
    let mut seen = BTreeMap::<&str, usize>::new();
    let mut summary = Vec::new();
    for (spec, src) in cfg.sources.iter().zip(&sources) {
        let backbone = Backbone::load(src, &cfg, data.size)?;
        let clf = build_classifier(backbone.arch, cfg.train.seed, false, &backbone.source())?;
        let rows = embed_dataset(&clf, &data, cfg.train.batch_size)?;
        let proj = pca_2d(&rows, &labels, true).with_context(|| format!("projecting {spec}"))?;
        let separation = proj.class_separation().with_context(|| format!("separating {spec}"))?;

        let n = seen.entry(src.tag()).or_default();
        *n += 1;
        let file = match *n {
            1 => format!("pca_{}.csv", src.tag()),
            k => format!("pca_{}_{k}.csv", src.tag()),
        };
        write_projection(&out.join(&file), &proj)?;
        println!("embed-pca: {spec}: separation {separation:.4} → {}", out.join(&file).display());
        summary.push(Projected {
            source: spec.clone(),
            file,
            separation,
            explained_variance: proj.explained_variance,
        });
    }
    fs::write(out.join("pca_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}
