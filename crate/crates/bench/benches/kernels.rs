use std::hint::black_box;

use camcal::camc::{camc_forward, camc_score_batch, ClassCalibration};
use camcal::data::{make_longtailed, synth_shapes, SamplerKind};
use camcal::model::{ClassifierHead, Stage};
use camcal::tensor::conv2d;
use camcal::train::{train_stage1, TrainConfig};
use camcal::{Backbone, BackboneConfig, CamcBlock, HeadKind, Tape, Tensor, Threshold};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        channels: vec![16, 32, 64],
        pool_after: vec![true, true, false],
        ..BackboneConfig::default()
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::uniform(&[64, 16, 8, 8], -1.0, 1.0, &mut rng);
    let kernel = Tensor::uniform(&[32, 16, 3, 3], -0.1, 0.1, &mut rng);
    c.bench_function("conv2d 64x16x8x8 -> 32", |b| {
        b.iter(|| conv2d(black_box(&input), black_box(&kernel), 1, 1).unwrap())
    });
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let x = tape.param(input.clone());
            let k = tape.param(kernel.clone());
            let y = tape.conv2d(x, k, 1, 1).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(k).is_some())
        })
    });
}

fn camc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, ch, k) = (10, 64, 5);
    let mut block = CamcBlock::empty(Threshold::Count(100), k);
    for class in 5..n {
        let protos = Tensor::uniform(&[k, ch], -1.0, 1.0, &mut rng);
        block.banks.insert(class, ClassCalibration::from_prototypes(protos).unwrap());
    }
    let fmaps = Tensor::uniform(&[128, ch, 4, 4], 0.0, 1.0, &mut rng);
    let embs = Tensor::uniform(&[128, ch], 0.0, 1.0, &mut rng);
    let head = ClassifierHead::new(HeadKind::NormFc, n, ch, 16.0, &mut rng);
    let one = fmaps.index_axis0(0);
    c.bench_function("camc_forward single map", |b| {
        b.iter(|| camc_forward(black_box(&one), &block, 7).unwrap())
    });
    c.bench_function("camc scores, batch 128", |b| {
        b.iter(|| camc_score_batch(black_box(&fmaps), &embs, &block, &head).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let backbone = Backbone::new(small_backbone(), &mut rng).unwrap();
    let head = ClassifierHead::new(HeadKind::Linear, 10, backbone.feature_dim(), 1.0, &mut rng);
    let images = Tensor::uniform(&[64, 3, 16, 16], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    c.bench_function("train step, batch 64", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let params = backbone.bind(&mut tape, true);
            let hv = head.bind(&mut tape, true);
            let x = tape.constant(images.clone());
            let (_, emb) = backbone.forward(&mut tape, &params, x).unwrap();
            let logits = head.scores(&mut tape, &hv, emb, Stage::Representation).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).item())
        })
    });

    let counts = make_longtailed(60, 10, 10.0).unwrap();
    let ds = synth_shapes(10, &counts, 16, 3).unwrap();
    let config = TrainConfig {
        epochs: 1,
        sampler: SamplerKind::InstanceBalanced,
        backbone: small_backbone(),
        ..TrainConfig::representation()
    };
    let mut group = c.benchmark_group("epoch");
    group.sample_size(10);
    group.bench_function("stage-1 epoch, 198 images", |b| {
        b.iter(|| train_stage1(&ds, None, &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, camc, training);
criterion_main!(benches);
