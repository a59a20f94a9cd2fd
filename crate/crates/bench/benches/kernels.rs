use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use pdgan::eval::{pca_2d, sweep_threshold, ScoredSet};
use pdgan::models::{ArchConfig, Classifier};
use pdgan::synth::{ClassCounts, Dataset, DatasetSpec, Label};
use pdgan::training::{PdganTrainer, TrainConfig};
use pdgan::{Graph, Tensor};

/// Deterministic filler in [0, 1) without pulling in an RNG.
fn filler(shape: &[usize], salt: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as f64 + salt) * 0.618_033_988_7).fract()).collect()).unwrap()
}

fn dataset(n: usize, size: usize) -> Dataset {
    Dataset::generate(&DatasetSpec {
        name: "bench".into(),
        counts: ClassCounts::balanced(n),
        size,
        seed: 1,
    })
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let x = filler(&[16, 16, 32, 32], 0.0);
    let w = filler(&[32, 16, 3, 3], 0.5).with_requires_grad(true);
    c.bench_function("conv2d 16x16x32x32 -> 32, forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(&w);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let loss = g.mean(y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(wv).is_some())
        })
    });
}

fn training(c: &mut Criterion) {
    let data = dataset(16, 32);
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    c.bench_function("generator warmup step, batch 16 at 32px", |b| {
        b.iter_batched(
            || PdganTrainer::new(ArchConfig::default(), cfg.clone()).unwrap(),
            |mut t| black_box(t.warmup_epoch(&data).unwrap()),
            BatchSize::LargeInput,
        )
    });

    let clf = Classifier::new(ArchConfig::default(), 0, false).unwrap();
    let rgb = filler(&[64, 3, 32, 32], 0.25);
    c.bench_function("classifier inference, batch 64 at 32px", |b| {
        b.iter(|| black_box(clf.predict(&rgb).unwrap()))
    });
}

fn synthesis(c: &mut Criterion) {
    c.bench_function("synthesize 64 samples at 32px", |b| b.iter(|| black_box(dataset(64, 32))));
}

fn evaluation(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.754_877_666).fract()).collect();
    let labels: Vec<Label> = (0..n).map(|i| if i % 3 == 0 { Label::Spoof } else { Label::Live }).collect();
    let set = ScoredSet::new(scores, labels.clone()).unwrap();
    c.bench_function("threshold sweep, 10k scores", |b| b.iter(|| black_box(sweep_threshold(&set).unwrap())));

    let rows: Vec<Vec<f64>> = (0..256).map(|i| filler(&[512], i as f64 * 0.37).into_data()).collect();
    c.bench_function("pca_2d, 256 x 512", |b| {
        b.iter(|| black_box(pca_2d(&rows, &labels[..256], true).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, training, synthesis, evaluation
}
criterion_main!(benches);
