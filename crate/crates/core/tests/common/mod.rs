//! Central finite-difference gradient checking shared by the gradient and
//! acceptance test targets.

#![allow(dead_code)]

use pdgan::models::{ArchConfig, Classifier, Critic, Ctx, Generator, Mode, ModelError, Network};
use pdgan::rng::{substream, Rng};
use pdgan::tensor::{NormMode, Result};
use pdgan::training::{critic_loss, generator_loss, TrainConfig};
use pdgan::{Graph, Tensor, Var};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
pub const TOL_BN: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the plain difference norm when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Worst relative error, over all inputs, between the tape gradient of the
/// scalar built by `f` and its central difference.
pub fn check(inputs: &[Tensor], f: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs).expect("forward");
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += H;
            let up = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * H;
            let down = eval(&ts);
            *slot = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_error(&analytic[k], &numeric));
    }
    worst
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.05, 1]: kinks at zero are rejected by construction.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces a tensor to a scalar through a fixed random weighting so that
/// every output element contributes a distinct amount.
pub fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = uniform(&mut substream(rng_seed, 99), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// One randomized instance of a gradient check; returns the worst error.
pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn(u64) -> f64,
}

fn unary(seed: u64, shape: &[usize], kinked: bool, op: fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let mut rng = substream(seed, 1);
    let x = if kinked {
        away_from_zero(&mut rng, shape)
    } else {
        uniform(&mut rng, shape, -2.0, 2.0)
    };
    check(&[x], &move |g, v| {
        let y = op(g, v[0])?;
        project(g, y, seed)
    })
}

fn binary(seed: u64, op: fn(&mut Graph, Var, Var) -> Result<Var>, scalar_rhs: bool) -> f64 {
    let mut rng = substream(seed, 2);
    let a = uniform(&mut rng, &[2, 3], -2.0, 2.0);
    let b = if scalar_rhs {
        uniform(&mut rng, &[1], -2.0, 2.0)
    } else {
        uniform(&mut rng, &[2, 3], -2.0, 2.0)
    };
    check(&[a, b], &move |g, v| {
        let y = op(g, v[0], v[1])?;
        project(g, y, seed)
    })
}

fn conv_case(seed: u64, stride: usize, pad: usize, bias: bool) -> f64 {
    let mut rng = substream(seed, 3);
    let x = uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let mut inputs = vec![x, k];
    if bias {
        inputs.push(b);
    }
    check(&inputs, &move |g, v| {
        let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
        project(g, y, seed)
    })
}

fn batchnorm_case(seed: u64, train: bool) -> f64 {
    let mut rng = substream(seed, 4);
    let x = uniform(&mut rng, &[3, 2, 2, 3], -2.0, 2.0);
    let gamma = uniform(&mut rng, &[2], 0.5, 1.5);
    let beta = uniform(&mut rng, &[2], -0.5, 0.5);
    let mean = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let var = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    check(&[x, gamma, beta], &move |g, v| {
        let mode = if train {
            NormMode::Train
        } else {
            NormMode::Eval { mean: &mean, var: &var }
        };
        let y = g.batchnorm2d(v[0], v[1], v[2], mode)?;
        project(g, y, seed)
    })
}

fn linear_case(seed: u64, bias: bool) -> f64 {
    let mut rng = substream(seed, 5);
    let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let b = uniform(&mut rng, &[2], -1.0, 1.0);
    let mut inputs = vec![x, w];
    if bias {
        inputs.push(b);
    }
    check(&inputs, &move |g, v| {
        let y = g.linear(v[0], v[1], v.get(2).copied())?;
        project(g, y, seed)
    })
}

fn bce_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 6);
    let p = uniform(&mut rng, &[5, 1], 0.05, 0.95);
    let t: Vec<f64> = (0..5).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    check(&[p], &move |g, v| g.bce(v[0], &t))
}

fn l1_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 7);
    let target = uniform(&mut rng, &[2, 1, 3, 3], 0.0, 1.0);
    let offset = away_from_zero(&mut rng, &[2, 1, 3, 3]);
    let mut pred = target.clone();
    pred.data_mut().iter_mut().zip(offset.data()).for_each(|(p, o)| *p += 0.5 * o);
    check(&[pred, target], &|g, v| g.l1_loss(v[0], v[1]))
}

fn softmax_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 8);
    let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    check(&[x], &move |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, seed)
    })
}

fn cross_entropy_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 9);
    let x = uniform(&mut rng, &[4, 4], -2.0, 2.0);
    let t: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();
    check(&[x], &move |g, v| g.softmax_cross_entropy(v[0], &t))
}

fn shape_ops_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 10);
    let x = uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
    check(&[x], &move |g, v| {
        let up = g.upsample_nearest2x(v[0])?;
        let pooled = g.global_avg_pool(up)?;
        let flat = g.flatten(v[0])?;
        let r = g.reshape(flat, &[4, 4])?;
        let a = project(g, pooled, seed)?;
        let b = project(g, r, seed + 1)?;
        let s = g.add(a, b)?;
        let m = g.mean(up)?;
        g.add(s, m)
    })
}

fn generator_loss_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 11);
    let n = 3;
    let adv = uniform(&mut rng, &[n, 1], 0.05, 0.95);
    let class = uniform(&mut rng, &[n, 1], 0.05, 0.95);
    let gt = uniform(&mut rng, &[n, 1, 2, 2], 0.0, 1.0);
    let offset = away_from_zero(&mut rng, &[n, 1, 2, 2]);
    let mut gen = gt.clone();
    gen.data_mut().iter_mut().zip(offset.data()).for_each(|(p, o)| *p += 0.3 * o);
    let live: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
    let cfg = TrainConfig::default();
    check(&[adv, class, gen, gt], &move |g, v| {
        Ok(generator_loss(g, v[0], v[1], &live, v[2], v[3], &cfg)?.total)
    })
}

fn critic_loss_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 12);
    let n = 4;
    let ps: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[n, 1], 0.05, 0.95)).collect();
    let live: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let cfg = TrainConfig::default();
    check(&ps, &move |g, v| Ok(critic_loss(g, v[0], v[1], v[2], v[3], &live, &cfg)?.total))
}

fn multihead_sum_case(seed: u64) -> f64 {
    let mut rng = substream(seed, 13);
    let p = uniform(&mut rng, &[4, 1], 0.05, 0.95);
    let logits = uniform(&mut rng, &[4, 4], -2.0, 2.0);
    let classes: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();
    let live: Vec<f64> = classes.iter().map(|&c| f64::from(u8::from(c == 0))).collect();
    check(&[p, logits], &move |g, v| {
        let bce = g.bce(v[0], &live)?;
        let ce = g.softmax_cross_entropy(v[1], &classes)?;
        g.add(bce, ce)
    })
}

pub fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "add", tol: TOL, run: |s| binary(s, Graph::add, false) },
        Case { name: "add_scalar_broadcast", tol: TOL, run: |s| binary(s, Graph::add, true) },
        Case { name: "sub", tol: TOL, run: |s| binary(s, Graph::sub, false) },
        Case { name: "mul", tol: TOL, run: |s| binary(s, Graph::mul, false) },
        Case { name: "mul_scalar_broadcast", tol: TOL, run: |s| binary(s, Graph::mul, true) },
        Case { name: "scale", tol: TOL, run: |s| unary(s, &[2, 3], false, |g, x| g.scale(x, -1.7)) },
        Case { name: "add_scalar", tol: TOL, run: |s| unary(s, &[2, 3], false, |g, x| g.add_scalar(x, 0.3)) },
        Case { name: "relu", tol: TOL, run: |s| unary(s, &[2, 3], true, Graph::relu) },
        Case { name: "leaky_relu", tol: TOL, run: |s| unary(s, &[2, 3], true, |g, x| g.leaky_relu(x, 0.2)) },
        Case { name: "sigmoid", tol: TOL, run: |s| unary(s, &[2, 3], false, Graph::sigmoid) },
        Case { name: "tanh", tol: TOL, run: |s| unary(s, &[2, 3], false, Graph::tanh) },
        Case {
            name: "log",
            tol: TOL,
            run: |s| unary(s, &[2, 3], false, |g, x| {
                let y = g.sigmoid(x)?;
                g.log(y)
            }),
        },
        Case { name: "abs", tol: TOL, run: |s| unary(s, &[2, 3], true, Graph::abs) },
        Case { name: "mean", tol: TOL, run: |s| unary(s, &[2, 3], false, Graph::mean) },
        Case { name: "sum", tol: TOL, run: |s| unary(s, &[2, 3], false, Graph::sum) },
        Case { name: "conv2d", tol: TOL, run: |s| conv_case(s, 1, 1, true) },
        Case { name: "conv2d_strided", tol: TOL, run: |s| conv_case(s, 2, 1, false) },
        Case { name: "conv2d_valid", tol: TOL, run: |s| conv_case(s, 1, 0, true) },
        Case { name: "linear", tol: TOL, run: |s| linear_case(s, true) },
        Case { name: "linear_no_bias", tol: TOL, run: |s| linear_case(s, false) },
        Case { name: "batchnorm_train", tol: TOL_BN, run: |s| batchnorm_case(s, true) },
        Case { name: "batchnorm_eval", tol: TOL_BN, run: |s| batchnorm_case(s, false) },
        Case { name: "shape_ops", tol: TOL, run: shape_ops_case },
        Case { name: "softmax", tol: TOL, run: softmax_case },
        Case { name: "softmax_cross_entropy", tol: TOL, run: cross_entropy_case },
        Case { name: "bce", tol: TOL, run: bce_case },
        Case { name: "l1_loss", tol: TOL, run: l1_case },
        Case { name: "generator_loss", tol: TOL, run: generator_loss_case },
        Case { name: "critic_loss", tol: TOL, run: critic_loss_case },
        Case { name: "multihead_sum", tol: TOL, run: multihead_sum_case },
    ]
}

// ----- whole networks ------------------------------------------------------

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        width: 0.125,
        blocks_per_stage: 1,
        critic_blocks_per_stage: 1,
        image_size: 16,
    }
}

/// Gradient of a network loss with respect to `coords` randomly chosen
/// trainable coordinates and `coords` input pixels, compared against
/// central differences. Batchnorm runs in train mode throughout.
///
/// A coordinate whose ±h perturbation moves any relu/abs input across its
/// kink is rejected and redrawn: the difference quotient is meaningless
/// there.
pub fn network_check<N, F>(net: &N, input: &Tensor, coords: usize, seed: u64, loss: F) -> f64
where
    N: Network + Clone,
    F: Fn(&N, &mut Ctx<'_>, Var) -> Result<Var, ModelError>,
{
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, net.store(), Mode::Train);
    let x = ctx.graph.param(&input.clone().with_requires_grad(true));
    let out = loss(net, &mut ctx, x).expect("forward");
    let binding = ctx.finish();
    let base = g.kink_distances();
    g.backward(out).expect("backward");
    let input_grad = g.grad(x).expect("input reached").to_vec();
    let mut with_grads = net.clone();
    with_grads.store_mut().collect_grads(&g, &binding);

    let eval = |n: &N, inp: &Tensor| -> (f64, bool) {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, n.store(), Mode::Train);
        let x = ctx.graph.param(&inp.clone().with_requires_grad(true));
        let out = loss(n, &mut ctx, x).expect("forward");
        let kd = g.kink_distances();
        (g.value(out).item(), same_side(&base, &kd))
    };
    // Central difference at the first step in STEPS whose stencil stays on
    // one side of every kink; None when even the smallest step straddles.
    let quotient = |probe: &dyn Fn(f64) -> (f64, bool)| {
        STEPS.iter().find_map(|&h| {
            let (up, down) = (probe(h), probe(-h));
            (up.1 && down.1).then(|| (up.0 - down.0) / (2.0 * h))
        })
    };

    let mut rng = substream(seed, 21);
    let trainable: Vec<(String, usize)> = net
        .store()
        .entries()
        .iter()
        .filter(|e| e.tensor.requires_grad())
        .map(|e| (e.name.clone(), e.tensor.numel()))
        .collect();
    let max_draws = coords * 20;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..max_draws {
        if numeric.len() == coords {
            break;
        }
        let (name, len) = &trainable[rng.gen_range(0..trainable.len())];
        let i = rng.gen_range(0..*len);
        let id = net.store().find(name).unwrap();
        let probe = |h: f64| {
            let mut n = net.clone();
            n.store_mut().get_mut(id).data_mut()[i] += h;
            eval(&n, input)
        };
        if let Some(q) = quotient(&probe) {
            analytic.push(with_grads.store().get(id).grad().unwrap()[i]);
            numeric.push(q);
        }
    }
    assert_eq!(numeric.len(), coords, "too many parameter draws straddled a kink");
    let param_err = rel_error(&analytic, &numeric);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..max_draws {
        if numeric.len() == coords {
            break;
        }
        let i = rng.gen_range(0..input.numel());
        let probe = |h: f64| {
            let mut t = input.clone();
            t.data_mut()[i] += h;
            eval(net, &t)
        };
        if let Some(q) = quotient(&probe) {
            analytic.push(input_grad[i]);
            numeric.push(q);
        }
    }
    assert_eq!(numeric.len(), coords, "too many input draws straddled a kink");
    param_err.max(rel_error(&analytic, &numeric))
}

/// Kink inputs closer than this to zero move the loss by a negligible
/// amount when they change side, so they do not invalidate a stencil.
const KINK_SLACK: f64 = 1e-12;

fn same_side(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| {
            (x.abs() <= KINK_SLACK && y.abs() <= KINK_SLACK) || (x > 0.0) == (y > 0.0)
        })
}

const NET_COORDS: usize = 12;

/// Step sizes tried in order for network stencils. Train-mode batch norm
/// lets one input pixel move every unit in the batch, so a unit lying
/// within a step of its kink would otherwise veto nearly every input draw.
const STEPS: [f64; 3] = [H, H / 10.0, H / 100.0];

fn live_of(n: usize) -> Vec<f64> {
    (0..n).map(|i| f64::from(u8::from(i % 2 == 0))).collect()
}

/// Generator objective through the generator and a frozen critic.
pub fn generator_network_case(seed: u64) -> f64 {
    let arch = tiny_arch();
    let gen = Generator::new(arch, seed).unwrap();
    let critic = Critic::new(arch, seed + 1000).unwrap();
    let mut rng = substream(seed, 22);
    let rgb = uniform(&mut rng, &[4, 3, 16, 16], 0.0, 1.0);
    let gt = uniform(&mut rng, &[4, 1, 16, 16], 0.0, 1.0);
    let cfg = TrainConfig::default();
    network_check(&gen, &rgb, NET_COORDS, seed, |gen, ctx, x| {
        let depth = gen.forward(ctx, x)?;
        let mut cctx = Ctx::new(ctx.graph, critic.store(), Mode::Train).frozen();
        let out = critic.forward(&mut cctx, depth)?;
        let gt = ctx.graph.constant(gt.clone());
        Ok(generator_loss(ctx.graph, out.adv, out.class_live, &live_of(4), depth, gt, &cfg)?.total)
    })
}

/// Critic objective on a real and a detached fake depth batch.
pub fn critic_network_case(seed: u64) -> f64 {
    let arch = tiny_arch();
    let critic = Critic::new(arch, seed).unwrap();
    let mut rng = substream(seed, 23);
    let real = uniform(&mut rng, &[4, 1, 16, 16], 0.0, 1.0);
    let fake = uniform(&mut rng, &[4, 1, 16, 16], 0.0, 1.0);
    let cfg = TrainConfig::default();
    network_check(&critic, &real, NET_COORDS, seed, |critic, ctx, x| {
        let r = critic.forward(ctx, x)?;
        let f = ctx.graph.constant(fake.clone());
        let f = critic.forward(ctx, f)?;
        Ok(critic_loss(ctx.graph, r.adv, f.adv, r.class_live, f.class_live, &live_of(4), &cfg)?.total)
    })
}

/// Liveness BCE plus spoof-class cross-entropy through the classifier.
pub fn classifier_network_case(seed: u64) -> f64 {
    let clf = Classifier::new(tiny_arch(), seed, true).unwrap();
    let mut rng = substream(seed, 24);
    let rgb = uniform(&mut rng, &[4, 3, 16, 16], 0.0, 1.0);
    let classes = vec![0, 1, 2, 3];
    network_check(&clf, &rgb, NET_COORDS, seed, |clf, ctx, x| {
        let out = clf.forward(ctx, x, true)?;
        let bce = ctx.graph.bce(out.liveness, &[1.0, 0.0, 0.0, 0.0])?;
        let ce = ctx.graph.softmax_cross_entropy(out.class_logits.unwrap(), &classes)?;
        Ok(ctx.graph.add(bce, ce)?)
    })
}

pub fn network_cases() -> Vec<Case> {
    vec![
        Case { name: "generator_network", tol: TOL_BN, run: generator_network_case },
        Case { name: "critic_network", tol: TOL_BN, run: critic_network_case },
        Case { name: "classifier_network", tol: TOL_BN, run: classifier_network_case },
    ]
}
