use std::path::{Path, PathBuf};

use super::log::ClassifierRecord;
use super::{TrainConfig, TrainError};
use crate::eval::ScoredSet;
use crate::models::{embed_batch, read_index, ArchConfig, Classifier, Ctx, Generator, Mode, Network};
use crate::rng::{derive_seed, substream};
use crate::synth::Dataset;
use crate::tensor::{AdamState, Graph, Tensor};

const TAG_CLASSIFIER: u64 = 11;
const TAG_SHUFFLE: u64 = 12;
const TAG_AUGMENT: u64 = 13;

/// Where the classifier's encoder weights come from.
#[derive(Clone, Debug)]
pub enum BackboneSource<'a> {
    /// Fresh He-normal initialization.
    He,
    /// The encoder of a trained depth generator.
    Pdgan(&'a Generator),
    /// The `enc.` tensors of any generator or classifier checkpoint.
    Checkpoint(PathBuf),
}

impl BackboneSource<'_> {
    /// Short tag used in logs and file names.
    pub fn tag(&self) -> &'static str {
        match self {
            BackboneSource::He => "he",
            BackboneSource::Pdgan(_) => "pdgan",
            BackboneSource::Checkpoint(_) => "ckpt",
        }
    }
}

/// A classifier initialized from `source`; everything outside the encoder
/// is He-initialized from `seed`.
pub fn build_classifier(
    arch: ArchConfig,
    seed: u64,
    multihead: bool,
    source: &BackboneSource<'_>,
) -> Result<Classifier, TrainError> {
    let mut clf = Classifier::new(arch, derive_seed(seed, TAG_CLASSIFIER), multihead)?;
    match source {
        BackboneSource::He => {}
        BackboneSource::Pdgan(g) => clf.transfer_backbone(g)?,
        BackboneSource::Checkpoint(dir) => transfer_from_checkpoint(&mut clf, dir)?,
    }
    Ok(clf)
}

fn transfer_from_checkpoint(clf: &mut Classifier, dir: &Path) -> Result<(), TrainError> {
    let index = read_index(dir)?;
    let store = match index.meta.arch.as_str() {
        "generator" => Generator::load(dir)?.0.store().clone(),
        "classifier" => Classifier::load(dir)?.0.store().clone(),
        other => {
            return Err(TrainError::Config(format!(
                "checkpoint at {} holds a {other}, which has no image encoder",
                dir.display()
            )))
        }
    };
    if index.meta.width != clf.arch().width
        || index.meta.blocks_per_stage != clf.arch().blocks_per_stage
        || index.meta.image_size != clf.arch().image_size
    {
        return Err(TrainError::Config(format!(
            "checkpoint architecture (width {}, {} blocks, {}px) does not match the classifier",
            index.meta.width, index.meta.blocks_per_stage, index.meta.image_size
        )));
    }
    clf.store_mut().copy_prefix_from(&store, "enc.")?;
    Ok(())
}

/// Trains every classifier weight (backbone included) with Adam on
/// liveness BCE, plus softmax cross-entropy over the spoof classes when
/// `multihead` is set.
pub fn finetune_classifier(
    clf: &mut Classifier,
    data: &Dataset,
    epochs: usize,
    multihead: bool,
    backbone_tag: &str,
    cfg: &TrainConfig,
) -> Result<Vec<ClassifierRecord>, TrainError> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !data.has_both_labels() {
        return Err(TrainError::SingleClass);
    }
    if multihead && !clf.is_multihead() {
        return Err(TrainError::Config("multihead training needs a classifier with a class head".into()));
    }
    let mut opt = AdamState::new(cfg.clf_adam);
    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut shuffle = substream(derive_seed(cfg.seed, TAG_SHUFFLE), epoch as u64);
        let order = data.epoch_order(cfg.batch_size, clf.arch().min_train_batch(), &mut shuffle);
        let mut aug_rng = substream(derive_seed(derive_seed(cfg.seed, TAG_AUGMENT), cfg.augment.seed), epoch as u64);
        for idx in order {
            let batch = data.batch(&idx, Some((&cfg.augment, &mut aug_rng)))?;
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, clf.store(), Mode::Train);
            let x = ctx.graph.constant(batch.rgb.clone());
            let out = clf.forward(&mut ctx, x, multihead)?;
            let binding = ctx.finish();
            let bce = g.bce(out.liveness, &batch.liveness())?;
            let (total, class) = match out.class_logits {
                Some(logits) if multihead => {
                    let ce = g.softmax_cross_entropy(logits, &batch.class_indices())?;
                    (g.add(bce, ce)?, Some(ce))
                }
                _ => (bce, None),
            };
            g.backward(total)?;
            let store = clf.store_mut();
            store.collect_grads(&g, &binding);
            store.update_running_stats(&g, &binding);
            opt.step(store.trainable_mut())?;
            step += 1;
            records.push(ClassifierRecord {
                epoch,
                step,
                backbone: backbone_tag.to_string(),
                loss_total: g.value(total).item(),
                loss_bce: g.value(bce).item(),
                loss_class: class.map(|c| g.value(c).item()),
            });
        }
    }
    Ok(records)
}

/// Eval-mode liveness scores for every sample of `data`.
pub fn score_dataset(clf: &Classifier, data: &Dataset, batch_size: usize) -> Result<ScoredSet, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<crate::rng::Rng>(chunk, None)?;
        scores.extend(clf.predict(&batch.rgb)?);
    }
    Ok(ScoredSet::new(scores, data.labels())?)
}

/// Backbone embeddings (`N × embedding_dim`), one row per sample.
pub fn embed_dataset(clf: &Classifier, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<crate::rng::Rng>(chunk, None)?;
        let e: Tensor = embed_batch(clf.store(), &batch.rgb, |ctx, x| clf.embed(ctx, x))?;
        rows.extend((0..chunk.len()).map(|i| e.index_outer(i).into_data()));
    }
    Ok(rows)
}
