//! The three networks: a residual encoder–decoder that maps RGB faces to
//! pseudo-depth, a critic with an auxiliary live/spoof head that judges
//! depth maps, and a liveness classifier that reuses the generator's
//! encoder as its backbone.

mod layers;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{stage_widths, Activation, BatchNorm, Conv, Dense, Encoder, ResBlock};
pub use params::{
    he_normal, read_index, Binding, CheckpointIndex, CheckpointMeta, Ctx, Mode, ParamEntry, ParamId,
    ParamKind, ParamStore, BN_MOMENTUM,
};

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error("input shape {got:?} does not fit the network (expected {expected})")]
    Input { got: Vec<usize>, expected: String },
    #[error("multihead output requested but the classifier has no class head")]
    NoClassHead,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Classifier head hidden widths.
pub const HIDDEN_WIDTHS: (usize, usize) = (128, 32);
/// Classes predicted by the multihead variant: live, print, screen, mask.
pub const NUM_CLASSES: usize = 4;
pub const CRITIC_LEAK: f64 = 0.2;

/// Architecture hyper-parameters shared by all three networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel multiplier relative to ResNet-18 (0.25 gives 16/32/64/128).
    pub width: f64,
    /// Residual blocks per encoder stage (ResNet-18 uses 2).
    pub blocks_per_stage: usize,
    /// Residual blocks per critic trunk stage.
    pub critic_blocks_per_stage: usize,
    /// Input side length; must be a positive multiple of 16.
    pub image_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 0.25,
            blocks_per_stage: 2,
            critic_blocks_per_stage: 1,
            image_size: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(ModelError::InvalidArch(format!("width {} outside (0, 1]", self.width)));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(ModelError::InvalidArch(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.blocks_per_stage == 0 || self.critic_blocks_per_stage == 0 {
            return Err(ModelError::InvalidArch("blocks per stage must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 4] {
        stage_widths(self.width)
    }

    /// Smallest training batch for which batch norm still sees two values
    /// per channel at the 1/16-resolution bottleneck.
    pub fn min_train_batch(&self) -> usize {
        let cells = (self.image_size / 16).pow(2).max(1);
        2usize.div_ceil(cells)
    }

    /// Flattened encoder output length for one image.
    pub fn embedding_dim(&self) -> usize {
        let cells = self.image_size / 16;
        self.widths()[3] * cells * cells
    }

    fn check_input(&self, t: &Tensor, channels: usize) -> Result<()> {
        let s = t.shape();
        let ok = s.len() == 4 && s[1] == channels && s[2] == self.image_size && s[3] == self.image_size;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Input {
                got: s.to_vec(),
                expected: format!("N×{channels}×{0}×{0}", self.image_size),
            })
        }
    }
}

/// Standard deviation of the He-normal initializer.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Common surface of the three networks.
pub trait Network {
    const ARCH: &'static str;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn arch(&self) -> &ArchConfig;
    fn seed(&self) -> u64;

    fn num_params(&self) -> usize {
        self.store().num_trainable()
    }

    fn checkpoint_meta(&self, epochs: usize, step: u64) -> CheckpointMeta {
        let arch = self.arch();
        CheckpointMeta {
            arch: Self::ARCH.to_string(),
            width: arch.width,
            blocks_per_stage: arch.blocks_per_stage,
            image_size: arch.image_size,
            seed: self.seed(),
            epochs,
            step,
            extra: Default::default(),
        }
    }

    fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.store().save(dir, meta)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Residual encoder–decoder mapping `N×3×S×S` RGB to `N×1×S×S` depth in
/// (0, 1).
#[derive(Clone, Debug)]
pub struct Generator {
    store: ParamStore,
    arch: ArchConfig,
    seed: u64,
    encoder: Encoder,
    decoder: Vec<ResBlock>,
    head: Conv,
}

impl Generator {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            "enc",
            3,
            arch.width,
            arch.blocks_per_stage,
            Activation::Relu,
        );
        let w = arch.widths();
        let plan = [(w[3], w[2]), (w[2], w[1]), (w[1], w[0]), (w[0], w[0])];
        let decoder = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                ResBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("dec.block{}", i + 1),
                    cin,
                    cout,
                    1,
                    true,
                    Activation::Relu,
                )
            })
            .collect();
        let head = Conv::new(&mut store, &mut rng, "head", w[0], 1, 3, 1, true);
        Ok(Self {
            store,
            arch,
            seed,
            encoder,
            decoder,
            head,
        })
    }

    /// Loads a generator checkpoint, rebuilding the architecture from its index.
    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let index = read_index(dir)?;
        expect_arch(&index.meta, Self::ARCH)?;
        let mut g = Self::new(arch_from_meta(&index.meta, None), index.meta.seed)?;
        let meta = g.store.load_from(dir)?;
        Ok((g, meta))
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var) -> Result<Var> {
        self.arch.check_input(ctx.graph.value(rgb), 3)?;
        let mut h = self.encoder.forward(ctx, rgb)?;
        for block in &self.decoder {
            h = block.forward(ctx, h)?;
        }
        let h = self.head.forward(ctx, h)?;
        Ok(ctx.graph.sigmoid(h)?)
    }

    /// Flattened final encoder feature map (`N × embedding_dim`).
    pub fn embed(&self, ctx: &mut Ctx<'_>, rgb: Var) -> Result<Var> {
        self.arch.check_input(ctx.graph.value(rgb), 3)?;
        let h = self.encoder.forward(ctx, rgb)?;
        Ok(ctx.graph.flatten(h)?)
    }

    /// Eval-mode depth prediction for a batch, outside any training graph.
    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Eval).frozen();
        let x = ctx.graph.constant(rgb.clone());
        let y = self.forward(&mut ctx, x)?;
        Ok(g.value(y).clone())
    }
}

impl Network for Generator {
    const ARCH: &'static str = "generator";

    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

/// Critic scores for a batch of depth maps.
#[derive(Clone, Copy, Debug)]
pub struct CriticOutput {
    /// D(·): probability the map is a ground-truth depth, `N×1`.
    pub adv: Var,
    /// Auxiliary p(live | ·), `N×1`.
    pub class_live: Var,
}

/// Residual trunk over `N×1×S×S` depth maps, global average pooling, and
/// two sigmoid heads sharing the pooled embedding.
#[derive(Clone, Debug)]
pub struct Critic {
    store: ParamStore,
    arch: ArchConfig,
    seed: u64,
    trunk: Encoder,
    adv_head: Dense,
    aux_head: Dense,
}

impl Critic {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let trunk = Encoder::new(
            &mut store,
            &mut rng,
            "trunk",
            1,
            arch.width,
            arch.critic_blocks_per_stage,
            Activation::LeakyRelu(CRITIC_LEAK),
        );
        let c = trunk.out_channels();
        let adv_head = Dense::new(&mut store, &mut rng, "adv_head", c, 1);
        let aux_head = Dense::new(&mut store, &mut rng, "aux_head", c, 1);
        Ok(Self {
            store,
            arch,
            seed,
            trunk,
            adv_head,
            aux_head,
        })
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let index = read_index(dir)?;
        expect_arch(&index.meta, Self::ARCH)?;
        let blocks = index
            .meta
            .extra
            .get("critic_blocks_per_stage")
            .and_then(|v| v.parse().ok());
        let mut c = Self::new(arch_from_meta(&index.meta, blocks), index.meta.seed)?;
        let meta = c.store.load_from(dir)?;
        Ok((c, meta))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, depth: Var) -> Result<CriticOutput> {
        self.arch.check_input(ctx.graph.value(depth), 1)?;
        let h = self.trunk.forward(ctx, depth)?;
        let pooled = ctx.graph.global_avg_pool(h)?;
        let a = self.adv_head.forward(ctx, pooled)?;
        let adv = ctx.graph.sigmoid(a)?;
        let c = self.aux_head.forward(ctx, pooled)?;
        let class_live = ctx.graph.sigmoid(c)?;
        Ok(CriticOutput { adv, class_live })
    }
}

impl Network for Critic {
    const ARCH: &'static str = "critic";

    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn checkpoint_meta(&self, epochs: usize, step: u64) -> CheckpointMeta {
        let mut meta = CheckpointMeta {
            arch: Self::ARCH.to_string(),
            width: self.arch.width,
            blocks_per_stage: self.arch.blocks_per_stage,
            image_size: self.arch.image_size,
            seed: self.seed,
            epochs,
            step,
            extra: Default::default(),
        };
        meta.extra.insert(
            "critic_blocks_per_stage".into(),
            self.arch.critic_blocks_per_stage.to_string(),
        );
        meta
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// Liveness probability, `N×1`.
    pub liveness: Var,
    /// Multihead class logits and their softmax, `N×4`.
    pub class_logits: Option<Var>,
    pub class_probs: Option<Var>,
}

/// Generator-style encoder, flatten, two hidden layers and a sigmoid
/// liveness output; optionally a 4-way class head on the last hidden layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    store: ParamStore,
    arch: ArchConfig,
    seed: u64,
    encoder: Encoder,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
    class_head: Option<Dense>,
}

impl Classifier {
    /// He-initialized classifier. The encoder is drawn first from the seed
    /// stream, exactly as in [`Generator::new`].
    pub fn new(arch: ArchConfig, seed: u64, multihead: bool) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            "enc",
            3,
            arch.width,
            arch.blocks_per_stage,
            Activation::Relu,
        );
        let (h1, h2) = HIDDEN_WIDTHS;
        let fc1 = Dense::new(&mut store, &mut rng, "fc1", arch.embedding_dim(), h1);
        let fc2 = Dense::new(&mut store, &mut rng, "fc2", h1, h2);
        let out = Dense::new(&mut store, &mut rng, "out", h2, 1);
        let class_head = multihead.then(|| Dense::new(&mut store, &mut rng, "class_head", h2, NUM_CLASSES));
        Ok(Self {
            store,
            arch,
            seed,
            encoder,
            fc1,
            fc2,
            out,
            class_head,
        })
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let index = read_index(dir)?;
        expect_arch(&index.meta, Self::ARCH)?;
        let multihead = index.names.iter().any(|n| n.starts_with("class_head."));
        let mut c = Self::new(arch_from_meta(&index.meta, None), index.meta.seed, multihead)?;
        let meta = c.store.load_from(dir)?;
        Ok((c, meta))
    }

    pub fn is_multihead(&self) -> bool {
        self.class_head.is_some()
    }

    /// Copies the encoder weights (and running statistics) of `generator`
    /// into this classifier's backbone.
    pub fn transfer_backbone(&mut self, generator: &Generator) -> Result<()> {
        if generator.arch().width != self.arch.width
            || generator.arch().blocks_per_stage != self.arch.blocks_per_stage
        {
            return Err(ModelError::Incompatible(format!(
                "generator arch {:?} vs classifier arch {:?}",
                generator.arch(),
                self.arch
            )));
        }
        self.store.copy_prefix_from(generator.store(), "enc.")?;
        Ok(())
    }

    /// Backbone only: flattened encoder output.
    pub fn embed(&self, ctx: &mut Ctx<'_>, rgb: Var) -> Result<Var> {
        self.arch.check_input(ctx.graph.value(rgb), 3)?;
        let h = self.encoder.forward(ctx, rgb)?;
        Ok(ctx.graph.flatten(h)?)
    }

    /// Head only, on an embedding batch.
    pub fn head(&self, ctx: &mut Ctx<'_>, embedding: Var, multihead: bool) -> Result<ClassifierOutput> {
        if multihead && self.class_head.is_none() {
            return Err(ModelError::NoClassHead);
        }
        let h = self.fc1.forward(ctx, embedding)?;
        let h = ctx.graph.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        let h = ctx.graph.relu(h)?;
        let o = self.out.forward(ctx, h)?;
        let liveness = ctx.graph.sigmoid(o)?;
        let (class_logits, class_probs) = match (&self.class_head, multihead) {
            (Some(head), true) => {
                let logits = head.forward(ctx, h)?;
                let probs = ctx.graph.softmax(logits)?;
                (Some(logits), Some(probs))
            }
            _ => (None, None),
        };
        Ok(ClassifierOutput {
            liveness,
            class_logits,
            class_probs,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var, multihead: bool) -> Result<ClassifierOutput> {
        if multihead && self.class_head.is_none() {
            return Err(ModelError::NoClassHead);
        }
        let e = self.embed(ctx, rgb)?;
        self.head(ctx, e, multihead)
    }

    /// Eval-mode liveness probabilities for a batch.
    pub fn predict(&self, rgb: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Eval).frozen();
        let x = ctx.graph.constant(rgb.clone());
        let out = self.forward(&mut ctx, x, false)?;
        Ok(g.value(out.liveness).data().to_vec())
    }
}

impl Network for Classifier {
    const ARCH: &'static str = "classifier";

    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

/// Eval-mode embeddings (`N × embedding_dim`) from any generator-style
/// encoder stored under the `enc.` prefix.
pub fn embed_batch<F>(store: &ParamStore, rgb: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval).frozen();
    let x = ctx.graph.constant(rgb.clone());
    let e = f(&mut ctx, x)?;
    Ok(g.value(e).clone())
}

fn expect_arch(meta: &CheckpointMeta, want: &str) -> Result<()> {
    if meta.arch != want {
        return Err(ModelError::Incompatible(format!(
            "checkpoint holds a {} but a {want} was expected",
            meta.arch
        )));
    }
    Ok(())
}

fn arch_from_meta(meta: &CheckpointMeta, critic_blocks: Option<usize>) -> ArchConfig {
    ArchConfig {
        width: meta.width,
        blocks_per_stage: meta.blocks_per_stage,
        critic_blocks_per_stage: critic_blocks.unwrap_or(ArchConfig::default().critic_blocks_per_stage),
        image_size: meta.image_size,
    }
}
