//! Analytic gradients (f32) against central differences (f64).

#[macro_use]
mod support;

use std::collections::BTreeMap;

use camcal::camc::{score_all, CalibrationVars};
use camcal::model::{HeadVars, Stage};
use camcal::{Backbone, BackboneConfig, ClassifierHead, HeadKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{away_from_zero, distinct, uniform, GRAD_TOL};

fn assert_close(name: &str, worst: f64) {
    assert!(worst < GRAD_TOL, "{name}: worst relative error {worst:.3e}");
}

#[test]
fn core_ops_over_twenty_instances() {
    for (name, worst) in support::gradient_suite(20).unwrap() {
        assert_close(name, worst);
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let two = [uniform(&[r, c], -1.0, 1.0, &mut rng), uniform(&[r, c], -1.0, 1.0, &mut rng)];
        assert_close("add", grad_check!(two, |t, v| t.add(v[0], v[1])).unwrap());
        assert_close("sub", grad_check!(two, |t, v| t.sub(v[0], v[1])).unwrap());
        assert_close("mul", grad_check!(two, |t, v| t.mul(v[0], v[1])).unwrap());
        let one = [two[0].clone()];
        assert_close("add_scalar", grad_check!(one, |t, v| Ok(t.add_scalar(v[0], 0.7))).unwrap());
        assert_close("mul_scalar", grad_check!(one, |t, v| Ok(t.mul_scalar(v[0], -1.3))).unwrap());
        assert_close("sum", grad_check!(one, |t, v| Ok(t.sum(v[0]))).unwrap());
        assert_close("transpose", grad_check!(one, |t, v| t.transpose(v[0])).unwrap());
        assert_close("reshape", grad_check!(one, |t, v| t.reshape(v[0], &[c, r])).unwrap());

        let s = [two[0].clone(), uniform(&[1], -2.0, 2.0, &mut rng)];
        assert_close("scale", grad_check!(s, |t, v| t.scale(v[0], v[1])).unwrap());
        let rows = [two[0].clone(), uniform(&[r], -2.0, 2.0, &mut rng)];
        assert_close("mul_rows", grad_check!(rows, |t, v| t.mul_rows(v[0], v[1])).unwrap());
        let bias = [two[0].clone(), uniform(&[c], -1.0, 1.0, &mut rng)];
        assert_close("add_row_bias", grad_check!(bias, |t, v| t.add_row_bias(v[0], v[1])).unwrap());

        let maps = [uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng), uniform(&[c], -1.0, 1.0, &mut rng)];
        assert_close("add_channel_bias", grad_check!(maps, |t, v| t.add_channel_bias(v[0], v[1])).unwrap());
        let gate = [uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng), uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng)];
        assert_close("mul_spatial", grad_check!(gate, |t, v| t.mul_spatial(v[0], v[1])).unwrap());

        let bt = [uniform(&[r, c], -1.0, 1.0, &mut rng), uniform(&[r + 1, c], -1.0, 1.0, &mut rng)];
        assert_close("matmul_bt", grad_check!(bt, |t, v| t.matmul_bt(v[0], v[1])).unwrap());
    }
}

#[test]
fn piecewise_ops_away_from_kinks() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = [away_from_zero(&[2, 3, 4], 0.05, &mut rng)];
        assert_close("relu", grad_check!(x, |t, v| Ok(t.relu(v[0]))).unwrap());
        let x = [distinct(&[2, 2, 4, 6], &mut rng)];
        assert_close("max_pool2d", grad_check!(x, |t, v| t.max_pool2d(v[0], 2)).unwrap());
    }
}

#[test]
fn gather_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let x = [uniform(&[4, 5], -1.0, 1.0, &mut rng)];
    // repeated indices accumulate
    assert_close("select_rows", grad_check!(x, |t, v| t.select_rows(v[0], &[3, 0, 3])).unwrap());
    assert_close("select_cols", grad_check!(x, |t, v| t.select_cols(v[0], &[1, 1, 4])).unwrap());
    let parts = [uniform(&[3, 2], -1.0, 1.0, &mut rng), uniform(&[3, 1], -1.0, 1.0, &mut rng)];
    assert_close("concat_cols", grad_check!(parts, |t, v| t.concat_cols(&[v[1], v[0], v[1]])).unwrap());
}

#[test]
fn cross_entropy_of_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let logits = [uniform(&[1, 7], -2.0, 2.0, &mut rng)];
    assert_close("ce", grad_check!(logits, |t, v| t.softmax_cross_entropy(v[0], &[4])).unwrap());
}

#[test]
fn backbone_and_head_end_to_end() {
    let config = BackboneConfig {
        in_channels: 2,
        image_size: 6,
        channels: vec![3, 4],
        pool_after: vec![true, false],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let backbone = Backbone::new(config.clone(), &mut rng).unwrap();
    let mut inputs: Vec<Tensor> = backbone.params().into_iter().cloned().collect();
    // positive biases keep every relu comfortably active or inactive
    for i in (1..inputs.len()).step_by(2) {
        inputs[i] = Tensor::full(inputs[i].shape(), 0.3);
    }
    let n_params = inputs.len();
    inputs.push(uniform(&[3, 4], -1.0, 1.0, &mut rng));
    inputs.push(uniform(&[3], -0.5, 0.5, &mut rng));
    inputs.push(distinct(&[2, 2, 6, 6], &mut rng).map(|x| x.abs()));
    let head = ClassifierHead::new(HeadKind::Linear, 3, 4, 1.0, &mut rng);
    let worst = grad_check!(inputs, |t, v| {
        let (_, emb) = backbone.forward(t, &v[..n_params], v[n_params + 2])?;
        let vars = HeadVars {
            weight: v[n_params],
            bias: Some(v[n_params + 1]),
            magnitude: None,
        };
        let logits = head.scores(t, &vars, emb, Stage::Representation)?;
        t.softmax_cross_entropy(logits, &[0, 2])
    })
    .unwrap();
    assert_close("backbone + linear head", worst);
}

#[test]
fn calibrated_scoring_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let (n, c) = (4, 3);
    let head = ClassifierHead::new(HeadKind::NormFc, n, c, 4.0, &mut rng);
    let inputs = [
        uniform(&[n, c], -1.0, 1.0, &mut rng),
        uniform(&[1], 2.0, 4.0, &mut rng),
        uniform(&[2, c, 3, 3], 0.0, 1.0, &mut rng),
        uniform(&[2, c], 0.0, 1.0, &mut rng),
        uniform(&[2, c], -0.5, 0.5, &mut rng),
        uniform(&[1, 2, 1, 1], -1.0, 1.0, &mut rng),
        uniform(&[1], -0.5, 0.5, &mut rng),
    ];
    let worst = grad_check!(inputs, |t, v| {
        let hv = HeadVars {
            weight: v[0],
            bias: None,
            magnitude: Some(v[1]),
        };
        let mut calib = BTreeMap::new();
        calib.insert(
            2,
            CalibrationVars {
                prototypes: v[4],
                fusion_weight: v[5],
                fusion_bias: v[6],
            },
        );
        let s = score_all(t, &head, &hv, &calib, v[2], v[3])?;
        t.softmax_cross_entropy(s, &[2, 1])
    })
    .unwrap();
    assert_close("camc score_all", worst);
}
