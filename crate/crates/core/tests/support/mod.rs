//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use camcal::{Real, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

/// Builds the same graph on an f32 and an f64 tape.
macro_rules! grad_check {
    ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        $crate::support::check_gradients(
            &$inputs,
            |$t: &mut camcal::Tape<f32>, $v: &[camcal::Var]| -> camcal::Result<camcal::Var> { $body },
            |$t: &mut camcal::Tape<f64>, $v: &[camcal::Var]| -> camcal::Result<camcal::Var> { $body },
        )
    };
}

/// Fixed readout so non-scalar outputs reduce to a loss with a rich gradient.
fn readout<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::from_f64_lossy((1.7 * i as f64 + 0.3).cos()))
}

fn reduce<T: Real>(tape: &mut Tape<T>, out: Var) -> Result<Var> {
    let r = tape.constant(readout(tape.shape(out)));
    let weighted = tape.mul(out, r)?;
    Ok(tape.sum(weighted))
}

fn loss64(inputs: &[Tensor<f64>], f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Worst relative error between f32 analytic gradients and f64 central
/// differences, over every element of every input.
pub fn check_gradients(
    inputs: &[Tensor<f32>],
    f32_graph: impl Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
    f64_graph: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f32_graph(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    tape.backward(loss)?;

    let base: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let n = (loss64(&plus, &f64_graph)? - loss64(&minus, &f64_graph)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, n));
        }
    }
    Ok(worst)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform values pushed at least `gap` away from zero, so relu kinks sit
/// outside the finite-difference stencil.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        (if rng.random_bool(0.5) { m } else { -m }) as f32
    })
}

/// Distinct values spaced 0.01 apart in random order; pooling windows never tie.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Worst error per op family over `instances` random instances each.
pub fn gradient_suite(instances: usize) -> Result<Vec<(&'static str, f64)>> {
    use camcal::camc::{calibrated_embedding, CalibrationVars};
    use camcal::model::{HeadVars, Stage};
    use camcal::{ClassifierHead, HeadKind};
    use rand::SeedableRng;

    let mut worst = vec![
        ("conv2d", 0.0f64),
        ("global_avg_pool", 0.0),
        ("sigmoid", 0.0),
        ("l2_normalize", 0.0),
        ("matmul", 0.0),
        ("softmax_cross_entropy", 0.0),
        ("camc_forward", 0.0),
        ("head_score", 0.0),
    ];
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut record = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);

        let (b, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let inputs = [uniform(&[b, c, h, w], -1.0, 1.0, &mut rng), uniform(&[o, c, k, k], -1.0, 1.0, &mut rng)];
        record(0, grad_check!(inputs, |t, v| t.conv2d(v[0], v[1], stride, pad))?);

        let inputs = [uniform(&[b, c, h, w], -1.0, 1.0, &mut rng)];
        record(1, grad_check!(inputs, |t, v| t.global_avg_pool(v[0]))?);

        let n = rng.random_range(1..12);
        let inputs = [uniform(&[n], -4.0, 4.0, &mut rng)];
        record(2, grad_check!(inputs, |t, v| Ok(t.sigmoid(v[0])))?);

        let d = rng.random_range(1..9);
        let inputs = [uniform(&[b, d], -1.0, 1.0, &mut rng)];
        record(3, grad_check!(inputs, |t, v| Ok(t.l2_normalize(v[0], 1e-12)))?);

        let (m, kk, nn) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [uniform(&[m, kk], -1.0, 1.0, &mut rng), uniform(&[kk, nn], -1.0, 1.0, &mut rng)];
        record(4, grad_check!(inputs, |t, v| t.matmul(v[0], v[1]))?);

        let classes = rng.random_range(2..7);
        let labels: Vec<usize> = (0..b + 1).map(|_| rng.random_range(0..classes)).collect();
        let inputs = [uniform(&[b + 1, classes], -3.0, 3.0, &mut rng)];
        record(5, grad_check!(inputs, |t, v| t.softmax_cross_entropy(v[0], &labels))?);

        let kp = rng.random_range(1..4);
        let inputs = [
            uniform(&[b, c, h, w], 0.0, 1.0, &mut rng),
            uniform(&[kp, c], -0.5, 0.5, &mut rng),
            uniform(&[1, kp, 1, 1], -1.0, 1.0, &mut rng),
            uniform(&[1], -0.5, 0.5, &mut rng),
        ];
        record(
            6,
            grad_check!(inputs, |t, v| {
                let vars = CalibrationVars {
                    prototypes: v[1],
                    fusion_weight: v[2],
                    fusion_bias: v[3],
                };
                calibrated_embedding(t, &vars, v[0])
            })?,
        );

        let kind = [HeadKind::WeightNorm, HeadKind::WeightNormSharedG, HeadKind::NormFc][seed as usize % 3];
        let stage = if rng.random_bool(0.5) { Stage::Classifier } else { Stage::Representation };
        let (classes, dim) = (rng.random_range(2..6), rng.random_range(1..7));
        let g_len = if kind == HeadKind::WeightNorm { classes } else { 1 };
        let head = ClassifierHead::from_weight(kind, Tensor::zeros(&[classes, dim]), 1.0)?;
        let inputs = [
            uniform(&[classes, dim], -1.0, 1.0, &mut rng),
            uniform(&[g_len], 0.5, 4.0, &mut rng),
            uniform(&[b, dim], -1.0, 1.0, &mut rng),
        ];
        record(
            7,
            grad_check!(inputs, |t, v| {
                let vars = HeadVars {
                    weight: v[0],
                    bias: None,
                    magnitude: Some(v[1]),
                };
                head.scores(t, &vars, v[2], stage)
            })?,
        );
    }
    Ok(worst)
}
