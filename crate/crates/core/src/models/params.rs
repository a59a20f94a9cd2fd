use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{read_pdt, write_pdt, BatchNormStats, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Trainable,
    /// State that forward passes update (batchnorm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named parameter collection of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_trainable(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(true), ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(false), ParamKind::Buffer)
    }

    fn push(&mut self, name: String, tensor: Tensor, kind: ParamKind) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Trainable tensors in registration order, for the optimizers.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries
            .iter_mut()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| &mut e.tensor)
    }

    pub fn zero_grads(&mut self) {
        self.trainable_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradients from a finished backward pass into the tensors'
    /// gradient buffers. Parameters that were not bound or not reached get
    /// a zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, binding: &Binding) {
        for (i, entry) in self.entries.iter_mut().enumerate() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let src = binding.vars.get(i).copied().flatten().and_then(|v| graph.grad(v));
            let dst = entry.tensor.grad_mut().expect("trainable tensors carry a gradient");
            match src {
                Some(g) => dst.copy_from_slice(g),
                None => dst.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }

    /// Folds the batch statistics observed by train-mode batchnorm layers
    /// into their running buffers (momentum 0.1).
    pub fn update_running_stats(&mut self, graph: &Graph, binding: &Binding) {
        for rec in &binding.bn {
            let Some(stats) = graph.batch_stats(rec.output) else {
                continue;
            };
            let BatchNormStats { mean, var_unbiased } = stats;
            blend(self.get_mut(rec.running_mean).data_mut(), mean);
            blend(self.get_mut(rec.running_var).data_mut(), var_unbiased);
        }
    }

    /// Overwrites every entry whose name starts with `prefix` by the entry
    /// of the same name in `src`. Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, src: &ParamStore, prefix: &str) -> Result<usize, ModelError> {
        let mut copied = 0;
        for entry in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let other = src
                .by_name(&entry.name)
                .ok_or_else(|| ModelError::Incompatible(format!("source lacks parameter {}", entry.name)))?;
            if other.shape() != entry.tensor.shape() {
                return Err(ModelError::Incompatible(format!(
                    "{}: shape {:?} vs {:?}",
                    entry.name,
                    other.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor.data_mut().copy_from_slice(other.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Writes one `PDT1` file per entry plus `index.json`.
    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let mut index = CheckpointIndex {
            meta: meta.clone(),
            names: Vec::new(),
            shapes: Vec::new(),
            kinds: Vec::new(),
        };
        for e in &self.entries {
            write_pdt(dir.join(format!("{}.pdt", e.name)), &e.tensor)?;
            index.names.push(e.name.clone());
            index.shapes.push(e.tensor.shape().to_vec());
            index.kinds.push(e.kind);
        }
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    /// Overwrites every entry from a checkpoint directory written by
    /// [`ParamStore::save`]. Names and shapes must match exactly.
    pub fn load_from(&mut self, dir: &Path) -> Result<CheckpointMeta, ModelError> {
        let index = read_index(dir)?;
        if index.names.len() != self.entries.len() {
            return Err(ModelError::Incompatible(format!(
                "checkpoint has {} tensors, model has {}",
                index.names.len(),
                self.entries.len()
            )));
        }
        for (name, shape) in index.names.iter().zip(&index.shapes) {
            let id = self
                .find(name)
                .ok_or_else(|| ModelError::Incompatible(format!("unknown parameter {name}")))?;
            let t = read_pdt(dir.join(format!("{name}.pdt")))?;
            if t.shape() != shape.as_slice() || t.shape() != self.get(id).shape() {
                return Err(ModelError::Incompatible(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(index.meta)
    }
}

fn blend(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Free-form metadata stored in a checkpoint's `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub width: f64,
    pub blocks_per_stage: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointIndex {
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub kinds: Vec<ParamKind>,
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex, ModelError> {
    let text = fs::read_to_string(dir.join("index.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Graph handles of a network's parameters for one forward pass, plus the
/// batchnorm nodes whose statistics may be folded back afterwards.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    bn: Vec<BnRecord>,
}

#[derive(Clone, Copy, Debug)]
struct BnRecord {
    output: Var,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: lazily binds parameters into the graph the first
/// time a layer touches them.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    pub mode: Mode,
    frozen: bool,
    binding: Binding,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            frozen: false,
            binding: Binding {
                vars: vec![None; store.len()],
                bn: Vec::new(),
            },
        }
    }

    /// Parameters are bound as constants: gradients flow through the
    /// network to its input but never reach its weights.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.binding.vars[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.frozen {
            self.graph.frozen(t)
        } else {
            self.graph.param(t)
        };
        self.binding.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub(crate) fn record_bn(&mut self, output: Var, running_mean: ParamId, running_var: ParamId) {
        self.binding.bn.push(BnRecord {
            output,
            running_mean,
            running_var,
        });
    }

    pub fn finish(self) -> Binding {
        self.binding
    }
}

/// He-normal initializer (std = √(2 / fan_in)).
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}
