use rand::Rng;

use super::params::{he_normal, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{NormMode, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => ctx.graph.relu(x),
            Activation::LeakyRelu(slope) => ctx.graph.leaky_relu(x, slope),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add_trainable(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        let bias = bias.then(|| store.add_trainable(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_trainable(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let y = ctx.graph.batchnorm2d(x, gamma, beta, NormMode::Train)?;
                ctx.record_bn(y, self.running_mean, self.running_var);
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.get(self.running_mean).data();
                let var = store.get(self.running_var).data();
                ctx.graph.batchnorm2d(x, gamma, beta, NormMode::Eval { mean, var })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add_trainable(format!("{name}.weight"), he_normal(rng, &[fan_in, fan_out], fan_in)),
            bias: store.add_trainable(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, Some(b))
    }
}

/// Residual block: `conv-bn-act-conv-bn + skip`, then `act`.
///
/// Encoder blocks downsample with a strided first conv; decoder blocks
/// upsample (nearest 2×) before the first conv. The skip path gets a 1×1
/// conv + bn whenever the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Option<(Conv, BatchNorm)>,
    upsample: bool,
    act: Activation,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        upsample: bool,
        act: Activation,
    ) -> Self {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, false);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, false);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), cout);
        let skip = (cin != cout || stride != 1).then(|| {
            (
                Conv::new(store, rng, &format!("{name}.skip"), cin, cout, 1, stride, false),
                BatchNorm::new(store, &format!("{name}.skip_bn"), cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
            upsample,
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x = if self.upsample { ctx.graph.upsample_nearest2x(x)? } else { x };
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = self.act.apply(ctx, h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let s = match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.graph.add(h, s)?;
        self.act.apply(ctx, y)
    }
}

/// Stage widths for a width multiplier: ResNet-18's (64, 128, 256, 512)
/// scaled by `width`, with the base rounded to the nearest integer.
pub fn stage_widths(width: f64) -> [usize; 4] {
    let base = ((64.0 * width).round() as usize).max(1);
    [base, 2 * base, 4 * base, 8 * base]
}

/// Stem conv + four downsampling stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<ResBlock>,
    act: Activation,
    out_channels: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        width: f64,
        blocks_per_stage: usize,
        act: Activation,
    ) -> Self {
        let widths = stage_widths(width);
        let stem = Conv::new(store, rng, &format!("{prefix}.stem"), in_channels, widths[0], 3, 1, false);
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem_bn"), widths[0]);
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (s, &cout) in widths.iter().enumerate() {
            for b in 0..blocks_per_stage.max(1) {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(ResBlock::new(store, rng, &name, cin, cout, stride, false, act));
                cin = cout;
            }
        }
        Self {
            stem,
            stem_bn,
            blocks,
            act,
            out_channels: widths[3],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Final feature map, `N × C × H/16 × W/16`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.stem.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let mut h = self.act.apply(ctx, h)?;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        Ok(h)
    }
}
