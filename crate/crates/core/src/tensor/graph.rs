use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the current batch's per-channel statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed by a train-mode batchnorm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    Upsample2x(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the
/// append order is a topological order and backward simply walks it in
/// reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bn_stats: Vec<(Var, BatchNormStats)>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a constant (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push_raw(t, false, Op::Leaf)
    }

    /// Binds a parameter tensor by copy. It receives a gradient iff the
    /// tensor itself requires one.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let requires = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push_raw(value, requires, Op::Leaf)
    }

    /// Binds a parameter tensor as a constant regardless of its flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push_raw(value, false, Op::Leaf)
    }

    /// Copies a value out of the graph as a fresh constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// was reachable and tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Statistics recorded by a train-mode batchnorm whose output is `v`.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchNormStats> {
        self.bn_stats.iter().find(|(k, _)| *k == v).map(|(_, s)| s)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires { op } else { Op::Leaf };
        Ok(self.push_raw(value, requires, op))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ----- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        self.push(name, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, out, &[a], op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push("mean", Tensor::scalar(m), &[a], Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.push("reshape", t, &[a], Op::Reshape(a))
    }

    /// Flattens `N×…` to `N×F`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let f = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, &[n, f])
    }

    // ----- layers --------------------------------------------------------

    /// Direct cross-correlation of an `N×C×H×W` input with an `O×C×K×K`
    /// kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: format!("need NCHW input and OIKK kernel, got {xs:?} and {ks:?}"),
            });
        }
        if xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ks,
            });
        }
        if stride == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ks[0], ks[2]);
        let out_dim = |len: usize| -> Option<usize> {
            let padded = len + 2 * pad;
            (padded >= k).then(|| (padded - k) / stride + 1)
        };
        let (out_h, out_w) = match (out_dim(h), out_dim(w)) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(TensorError::Geometry {
                    op: "conv2d",
                    reason: format!("kernel {k} with pad {pad} does not fit {h}×{w}"),
                })
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![o],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * o * cols];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        {
            let x = self.value(input).data();
            let kd = self.value(kernel).data();
            let bd = bias.map(|b| self.value(b).data());
            for img in 0..n {
                let src = &x[img * c * h * w..(img + 1) * c * h * w];
                let dst = &mut out[img * o * cols..(img + 1) * o * cols];
                if let Some(bd) = bd {
                    for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bd[oc]);
                    }
                }
                let colm: &[f64] = if geom.is_pointwise() {
                    src
                } else {
                    kernels::im2col(src, &geom, &mut col);
                    &col
                };
                kernels::gemm_nn(o, cols, rows, kd, colm, dst);
            }
        }
        let value = Tensor::new(&[n, o, out_h, out_w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: n,
                out_channels: o,
            },
        )
    }

    /// Nearest-neighbour 2× spatial upsampling of an `N×C×H×W` tensor.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Geometry {
                op: "upsample_nearest2x",
                reason: format!("need rank 4, got {s:?}"),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let base = 2 * y * 2 * w + 2 * xx;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        self.push("upsample_nearest2x", value, &[input], Op::Upsample2x(input))
    }

    /// Affine map of `N×F` rows by an `F×G` weight and optional length-`G`
    /// bias.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [g] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: vec![g],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; n * g];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm_nn(n, g, f, self.value(input).data(), self.value(weight).data(), &mut out);
        let value = Tensor::new(&[n, g], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, &inputs, Op::Linear { input, weight, bias })
    }

    /// Per-channel batch normalization of an `N×C×H×W` tensor (ε = 1e-5).
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Geometry {
                op: "batchnorm2d",
                reason: format!("need rank 4, got {s:?}"),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    left: vec![c],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let m = n * hw;
        let train = matches!(mode, NormMode::Train);
        if train && m < 2 {
            return Err(TensorError::Geometry {
                op: "batchnorm2d",
                reason: "train mode needs at least two values per channel".into(),
            });
        }
        let x = self.value(input).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for img in 0..n {
                        let off = (img * c + ch) * hw;
                        acc += x[off..off + hw].iter().sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0;
                    for img in 0..n {
                        let off = (img * c + ch) * hw;
                        sq += x[off..off + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                (mean, var)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batchnorm2d running stats",
                        left: vec![c],
                        right: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * hw;
                for i in off..off + hw {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        let v = self.push(
            "batchnorm2d",
            value,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        if train {
            let scale = m as f64 / (m as f64 - 1.0);
            self.bn_stats.push((
                v,
                BatchNormStats {
                    mean,
                    var_unbiased: var.iter().map(|v| v * scale).collect(),
                },
            ));
        }
        Ok(v)
    }

    /// Spatial mean of `N×C×H×W`, giving `N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Geometry {
                op: "global_avg_pool",
                reason: format!("need rank 4, got {s:?}"),
            });
        }
        let hw = s[2] * s[3];
        let out = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.push("global_avg_pool", value, &[input], Op::GlobalAvgPool(input))
    }

    /// Row-wise softmax of an `N×K` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Geometry {
                op: "softmax",
                reason: format!("need rank 2, got {s:?}"),
            });
        }
        let out = softmax_rows(self.value(input).data(), s[1]);
        let value = Tensor::new(&s, out)?;
        self.push("softmax", value, &[input], Op::Softmax(input))
    }

    // ----- losses --------------------------------------------------------

    /// Mean binary cross-entropy; predictions are clamped to
    /// `[1e-7, 1 − 1e-7]` and targets must be 0 or 1.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                left: p.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        if let Some(&bad) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Domain { op: "bce target", value: bad });
        }
        let n = target.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            "bce",
            Tensor::scalar(loss),
            &[pred],
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l1_loss",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64;
        self.push("l1_loss", Tensor::scalar(loss), &[pred, target], Op::L1 { pred, target })
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s,
                right: vec![targets.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Domain {
                op: "softmax_cross_entropy target",
                value: bad as f64,
            });
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let r = &x[row * k..(row + 1) * k];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - r[t];
        }
        loss /= targets.len() as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Signed distance to the kink of every piecewise-linear input on the
    /// tape: relu, leaky relu and abs inputs, L1 residuals, and BCE
    /// predictions relative to the clamp. Two evaluations whose distances
    /// agree in sign are joined by a differentiable path, which is what
    /// finite-difference checks need. Must be read before `backward`, which
    /// consumes the tape.
    pub fn kink_distances(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => out.extend_from_slice(self.value(*a).data()),
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    out.extend(p.iter().zip(t).map(|(a, b)| a - b));
                }
                Op::Bce { pred, .. } => out.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .map(|&p| (p - BCE_CLAMP).min(1.0 - BCE_CLAMP - p)),
                ),
                _ => {}
            }
        }
        out
    }

    // ----- backward ------------------------------------------------------

    /// Accumulates `d loss / d node` into every tracked node reachable from
    /// `loss`. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            if rest[0].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut rest[0].op, Op::Leaf);
            let node = &rest[0];
            backprop(before, &op, &node.value, node.grad.as_deref().unwrap_or(&[]));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Gradient buffer of an input node, allocated on first contribution.
/// Returns `None` for untracked inputs.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn value(nodes: &[Node], v: Var) -> &[f64] {
    nodes[v.0].value.data()
}

/// Accumulates an elementwise contribution, summing over the broadcast
/// axis when the target is a scalar.
fn accumulate(nodes: &mut [Node], v: Var, contrib: impl Fn(usize) -> f64, len: usize) {
    let is_scalar = nodes[v.0].value.numel() == 1 && len != 1;
    if let Some(g) = slot(nodes, v) {
        if is_scalar {
            g[0] += (0..len).map(&contrib).sum::<f64>();
        } else {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += contrib(i);
            }
        }
    }
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, gout: &[f64]) {
    let len = gout.len();
    let at = |data: &[f64], i: usize| if data.len() == 1 { data[0] } else { data[i] };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, |i| gout[i], len);
            accumulate(nodes, *b, |i| gout[i], len);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, |i| gout[i], len);
            accumulate(nodes, *b, |i| -gout[i], len);
        }
        Op::Mul(a, b) => {
            let va = value(nodes, *a).to_vec();
            let vb = value(nodes, *b).to_vec();
            accumulate(nodes, *a, |i| gout[i] * at(&vb, i), len);
            accumulate(nodes, *b, |i| gout[i] * at(&va, i), len);
        }
        Op::Scale(a, s) => accumulate(nodes, *a, |i| gout[i] * s, len),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, *a, |i| gout[i], len),
        Op::Relu(a) => {
            let x = value(nodes, *a).to_vec();
            accumulate(nodes, *a, |i| if x[i] > 0.0 { gout[i] } else { 0.0 }, len);
        }
        Op::LeakyRelu(a, slope) => {
            let x = value(nodes, *a).to_vec();
            accumulate(nodes, *a, |i| if x[i] > 0.0 { gout[i] } else { slope * gout[i] }, len);
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(nodes, *a, |i| gout[i] * y[i] * (1.0 - y[i]), len);
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(nodes, *a, |i| gout[i] * (1.0 - y[i] * y[i]), len);
        }
        Op::Log(a) => {
            let x = value(nodes, *a).to_vec();
            accumulate(nodes, *a, |i| gout[i] / x[i], len);
        }
        Op::Abs(a) => {
            let x = value(nodes, *a).to_vec();
            accumulate(nodes, *a, |i| gout[i] * sign(x[i]), len);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            let g = gout[0] / n as f64;
            accumulate(nodes, *a, |_| g, n);
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, *a, |_| gout[0], n);
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            batch,
            out_channels,
        } => conv2d_backward(nodes, *input, *kernel, *bias, geom, *batch, *out_channels, gout),
        Op::Upsample2x(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            if let Some(g) = slot(nodes, *a) {
                for p in 0..nc {
                    let src = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let base = 2 * y * 2 * w + 2 * x;
                            dst[y * w + x] += src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
                        }
                    }
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let xs = nodes[input.0].value.shape().to_vec();
            let g = nodes[weight.0].value.shape()[1];
            let (n, f) = (xs[0], xs[1]);
            if nodes[input.0].requires_grad {
                let w = value(nodes, *weight).to_vec();
                let gx = slot(nodes, *input).expect("tracked");
                kernels::gemm_nt(n, f, g, gout, &w, gx);
            }
            if nodes[weight.0].requires_grad {
                let x = value(nodes, *input).to_vec();
                let gw = slot(nodes, *weight).expect("tracked");
                kernels::gemm_tn(f, g, n, &x, gout, gw);
            }
            if let Some(b) = bias {
                if let Some(gb) = slot(nodes, *b) {
                    for row in gout.chunks(g) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = nodes[input.0].value.shape().to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m = (n * hw) as f64;
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for img in 0..n {
                for ch in 0..c {
                    let off = (img * c + ch) * hw;
                    for i in off..off + hw {
                        sum_dy[ch] += gout[i];
                        sum_dy_xhat[ch] += gout[i] * xhat[i];
                    }
                }
            }
            let gam = value(nodes, *gamma).to_vec();
            if let Some(gi) = slot(nodes, *input) {
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for i in off..off + hw {
                            gi[i] += if *train {
                                k / m * (m * gout[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                            } else {
                                k * gout[i]
                            };
                        }
                    }
                }
            }
            if let Some(gg) = slot(nodes, *gamma) {
                for (a, b) in gg.iter_mut().zip(&sum_dy_xhat) {
                    *a += b;
                }
            }
            if let Some(gb) = slot(nodes, *beta) {
                for (a, b) in gb.iter_mut().zip(&sum_dy) {
                    *a += b;
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let hw = s[2] * s[3];
            if let Some(g) = slot(nodes, *a) {
                for (p, chunk) in g.chunks_mut(hw).enumerate() {
                    let v = gout[p] / hw as f64;
                    chunk.iter_mut().for_each(|x| *x += v);
                }
            }
        }
        Op::Softmax(a) => {
            let k = out.shape()[1];
            let y = out.data();
            if let Some(g) = slot(nodes, *a) {
                for r in 0..y.len() / k {
                    let row = r * k..(r + 1) * k;
                    let dot: f64 = gout[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        g[i] += y[i] * (gout[i] - dot);
                    }
                }
            }
        }
        Op::Bce { pred, target } => {
            let p = value(nodes, *pred).to_vec();
            let n = target.len() as f64;
            let g0 = gout[0];
            accumulate(
                nodes,
                *pred,
                |i| {
                    let pi = p[i];
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                        return 0.0;
                    }
                    let t = target[i];
                    g0 * (-t / pi + (1.0 - t) / (1.0 - pi)) / n
                },
                target.len(),
            );
        }
        Op::L1 { pred, target } => {
            let d: Vec<f64> = value(nodes, *pred)
                .iter()
                .zip(value(nodes, *target))
                .map(|(a, b)| sign(a - b))
                .collect();
            let k = gout[0] / d.len() as f64;
            accumulate(nodes, *pred, |i| k * d[i], d.len());
            accumulate(nodes, *target, |i| -k * d[i], d.len());
        }
        Op::SoftmaxCrossEntropy { logits, targets, probs } => {
            let k = probs.len() / targets.len();
            let scale = gout[0] / targets.len() as f64;
            accumulate(
                nodes,
                *logits,
                |i| {
                    let onehot = if targets[i / k] == i % k { 1.0 } else { 0.0 };
                    scale * (probs[i] - onehot)
                },
                probs.len(),
            );
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &mut [Node],
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    batch: usize,
    o: usize,
    gout: &[f64],
) {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let img_len = geom.channels * geom.height * geom.width;
    if let Some(b) = bias {
        if let Some(gb) = slot(nodes, b) {
            for img in 0..batch {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    let off = (img * o + oc) * cols;
                    *acc += gout[off..off + cols].iter().sum::<f64>();
                }
            }
        }
    }
    let need_x = nodes[input.0].requires_grad;
    let need_k = nodes[kernel.0].requires_grad;
    if need_k {
        let x = value(nodes, input).to_vec();
        let gk = slot(nodes, kernel).expect("tracked");
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols }];
        for img in 0..batch {
            let src = &x[img * img_len..(img + 1) * img_len];
            let colm: &[f64] = if geom.is_pointwise() {
                src
            } else {
                kernels::im2col(src, geom, &mut col);
                &col
            };
            kernels::gemm_nt(o, rows, cols, &gout[img * o * cols..(img + 1) * o * cols], colm, gk);
        }
    }
    if need_x {
        let k = value(nodes, kernel).to_vec();
        let gx = slot(nodes, input).expect("tracked");
        let mut dcol = vec![0.0; rows * cols];
        for img in 0..batch {
            let dst = &mut gx[img * img_len..(img + 1) * img_len];
            let g_img = &gout[img * o * cols..(img + 1) * o * cols];
            if geom.is_pointwise() {
                kernels::gemm_tn(rows, cols, o, &k, g_img, dst);
            } else {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                kernels::gemm_tn(rows, cols, o, &k, g_img, &mut dcol);
                kernels::col2im(&dcol, geom, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn sigmoid_and_mean_values() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[-1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn abs_and_l1_have_zero_subgradient_at_ties() {
        let mut g = Graph::new();
        let p = g.param(&t(&[3], &[0.0, 1.0, -2.0]).with_requires_grad(true));
        let target = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let l = g.l1_loss(p, target).unwrap();
        g.backward(l).unwrap();
        close(g.grad(p).unwrap(), &[0.0, 1.0 / 3.0, -1.0 / 3.0], 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn binary_ops_check_shapes_but_broadcast_scalars() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(10.0));
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0]);
    }

    #[test]
    fn conv2d_pointwise_scaling() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_is_cross_correlation() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(TensorError::Geometry { .. })));
        let k2 = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(g.conv2d(x, k2, None, 1, 0).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut g = Graph::new();
        let x = g.param(&t(&[1, 1, 1, 1], &[5.0]).with_requires_grad(true));
        let y = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);

        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 1], &[1.0, 2.0]));
        let y = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let x = g.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let bad = g.constant(Tensor::ones(&[3, 1]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // per channel: values ±1 have mean 0 and biased variance 1
        let data = [1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0];
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1, 2], &data));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.batchnorm2d(x, gamma, beta, NormMode::Train).unwrap();
        close(g.value(y).data(), &data, 1e-5);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 1, 2, 2], 4.2));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(t(&[1], &[0.7]));
        let y = g.batchnorm2d(x, gamma, beta, NormMode::Train).unwrap();
        close(g.value(y).data(), &[0.7; 12], 1e-12);
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(g.batchnorm2d(x, gamma, beta, NormMode::Train).is_err());
        let ok = g.batchnorm2d(
            x,
            gamma,
            beta,
            NormMode::Eval {
                mean: &[0.0, 0.0],
                var: &[1.0, 1.0],
            },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.constant(t(&[2], &[0.9, 0.1]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 0.105_360_515_657_826_3).abs() < 1e-12);

        let p = g.constant(t(&[2], &[1.0, 0.0]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).item() < 1e-6);

        assert!(g.bce(p, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn l1_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        let l = g.l1_loss(a, z).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
        let l = g.l1_loss(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn backward_mean_square() {
        let mut g = Graph::new();
        let theta = g.param(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = g.mul(theta, theta).unwrap();
        let l = g.mean(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::new();
        let theta = g.param(&Tensor::scalar(0.3).with_requires_grad(true));
        let y = g.add(theta, theta).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[2.0]);
    }

    #[test]
    fn detached_parameter_gets_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(2.0).with_requires_grad(true));
        let d = g.detach(p);
        let frozen = g.frozen(&Tensor::scalar(1.0).with_requires_grad(true));
        let y = g.mul(d, frozen).unwrap();
        let y = g.add(y, p).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(d).is_none());
        assert!(g.grad(frozen).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::GraphConsumed)));
        assert!(matches!(g.sum(p), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 700.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_log_k() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.softmax_cross_entropy(x, &[0, 2, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(g.softmax_cross_entropy(x, &[0, 4, 1]).is_err());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[2, 2, 4, 4], (0..64).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
            let k = g.constant(Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap());
            let y = g.conv2d(x, k, None, 2, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
