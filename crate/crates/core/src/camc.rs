//! Class activation maps and the prototype-based calibration block.
//!
//! For a tail class `c` the block convolves the feature map with `K` cached
//! prototype vectors, fuses the `K` response maps into one map with a 1x1
//! convolution, and reweights the features by `1 + sigmoid(map)` before global
//! average pooling. The calibrated embedding is what class `c` is scored on;
//! every other class keeps the plain embedding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{shuffled_class_members, LongTailedDataset};
use crate::error::{Error, Result};
use crate::model::{Backbone, ClassifierHead, HeadKind, HeadVars, NORM_EPS};
use crate::tensor::{self, Real, Tensor};

/// Activation map of one class over the spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    pub class: usize,
    /// `[H',W']`
    pub values: Tensor,
}

fn check_fmap(feature_map: &Tensor, dim: usize) -> Result<()> {
    if feature_map.ndim() != 3 || feature_map.shape()[0] != dim {
        return Err(Error::invalid(format!(
            "feature map {:?} does not have {dim} channels",
            feature_map.shape()
        )));
    }
    Ok(())
}

/// Weighted sum of the channel response maps, bias omitted.
pub fn compute_cam_weighted_sum(feature_map: &Tensor, class: usize, w_c: &Tensor) -> Result<Cam> {
    if w_c.ndim() != 1 {
        return Err(Error::invalid(format!("class weight must be [C], got {:?}", w_c.shape())));
    }
    check_fmap(feature_map, w_c.len())?;
    let (h, w) = (feature_map.shape()[1], feature_map.shape()[2]);
    let spatial = h * w;
    let mut values = vec![0f32; spatial];
    for (i, &wi) in w_c.data().iter().enumerate() {
        let channel = &feature_map.data()[i * spatial..][..spatial];
        for (v, &f) in values.iter_mut().zip(channel) {
            *v += wi * f;
        }
    }
    Ok(Cam {
        class,
        values: Tensor::new(vec![h, w], values)?,
    })
}

/// All class maps at once: the classifier applied densely as a 1x1
/// convolution. `weights` is `[N,C]`; the result is `[N,H',W']`.
pub fn compute_cam_conv(feature_map: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if weights.ndim() != 2 {
        return Err(Error::invalid(format!("classifier weights must be [N,C], got {:?}", weights.shape())));
    }
    let (n, c) = (weights.shape()[0], weights.shape()[1]);
    check_fmap(feature_map, c)?;
    let (h, w) = (feature_map.shape()[1], feature_map.shape()[2]);
    let input = feature_map.clone().reshape(&[1, c, h, w])?;
    let kernel = weights.clone().reshape(&[n, c, 1, 1])?;
    tensor::conv2d(&input, &kernel, 1, 0)?.reshape(&[n, h, w])
}

/// Count threshold below which a class is calibrated. `Infinite` calibrates
/// every class. Serialized as a bare integer or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Threshold {
    Count(usize),
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Count(usize),
    Word(String),
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Threshold::Count(n) => ThresholdRepr::Count(n),
            Threshold::Infinite => ThresholdRepr::Word("inf".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match ThresholdRepr::deserialize(d)? {
            ThresholdRepr::Count(n) => Ok(Threshold::Count(n)),
            ThresholdRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinite" => Ok(Threshold::Infinite),
            _ => s
                .parse()
                .map(Threshold::Count)
                .map_err(|_| Error::invalid(format!("threshold must be a count or \"inf\", got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Count(n) => write!(f, "{n}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl Threshold {
    pub fn admits(self, count: usize) -> bool {
        match self {
            Threshold::Count(t) => count < t,
            Threshold::Infinite => true,
        }
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Count(0)
    }
}

/// Classes whose training count falls below the threshold.
pub fn tail_classes(class_counts: &[usize], tau: Threshold) -> Vec<usize> {
    (0..class_counts.len()).filter(|&c| tau.admits(class_counts[c])).collect()
}

/// Parameters calibrating one tail class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCalibration {
    /// `[K,C]`
    pub prototypes: Tensor,
    /// `[1,K,1,1]`
    pub fusion_weight: Tensor,
    /// `[1]`
    pub fusion_bias: Tensor,
}

impl ClassCalibration {
    /// Uniform `1/K` fusion and zero bias.
    pub fn from_prototypes(prototypes: Tensor) -> Result<Self> {
        if prototypes.ndim() != 2 || prototypes.shape()[0] == 0 {
            return Err(Error::invalid(format!("prototypes must be [K,C] with K >= 1, got {:?}", prototypes.shape())));
        }
        let k = prototypes.shape()[0];
        Ok(ClassCalibration {
            prototypes,
            fusion_weight: Tensor::full(&[1, k, 1, 1], 1.0 / k as f32),
            fusion_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.prototypes, &self.fusion_weight, &self.fusion_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.prototypes, &mut self.fusion_weight, &mut self.fusion_bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamcBlock {
    pub tau: Threshold,
    pub k: usize,
    /// keyed by class index
    pub banks: BTreeMap<usize, ClassCalibration>,
}

/// Tape handles of one bound class calibration.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationVars {
    pub prototypes: Var,
    pub fusion_weight: Var,
    pub fusion_bias: Var,
}

impl CamcBlock {
    pub fn empty(tau: Threshold, k: usize) -> Self {
        CamcBlock {
            tau,
            k,
            banks: BTreeMap::new(),
        }
    }

    pub fn tail_classes(&self) -> Vec<usize> {
        self.banks.keys().copied().collect()
    }

    pub fn is_tail(&self, class: usize) -> bool {
        self.banks.contains_key(&class)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.banks
            .keys()
            .flat_map(|c| {
                [
                    format!("camc.class{c}.prototypes"),
                    format!("camc.class{c}.fusion.weight"),
                    format!("camc.class{c}.fusion.bias"),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.banks.values().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.banks.values_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<usize, CalibrationVars> {
        self.banks
            .iter()
            .map(|(&c, b)| {
                (
                    c,
                    CalibrationVars {
                        prototypes: tape.leaf(b.prototypes.cast(), trainable),
                        fusion_weight: tape.leaf(b.fusion_weight.cast(), trainable),
                        fusion_bias: tape.leaf(b.fusion_bias.cast(), trainable),
                    },
                )
            })
            .collect()
    }
}

/// Builds prototype banks for every class with fewer than `tau` training
/// images, from backbone embeddings of `k` of its images picked by a seeded
/// per-class shuffle. Classes with fewer than `k` images repeat cyclically.
pub fn init_prototypes(
    backbone: &Backbone,
    dataset: &LongTailedDataset,
    tau: Threshold,
    k: usize,
    seed: u64,
) -> Result<CamcBlock> {
    if k == 0 {
        return Err(Error::invalid("the number of prototypes must be at least 1"));
    }
    let mut block = CamcBlock::empty(tau, k);
    for class in tail_classes(dataset.class_counts(), tau) {
        let members = shuffled_class_members(dataset, class, seed);
        if members.is_empty() {
            return Err(Error::invalid(format!(
                "class {class} falls under the calibration threshold but has no training images"
            )));
        }
        let picks: Vec<usize> = (0..k).map(|j| members[j % members.len()]).collect();
        let images: Vec<&Tensor> = picks.iter().map(|&i| dataset.image(i)).collect();
        let (_, embeddings) = backbone.encode_all(&images, 64)?;
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let prototypes = Tensor::stack(&refs)?;
        block.banks.insert(class, ClassCalibration::from_prototypes(prototypes)?);
    }
    Ok(block)
}

/// Calibrated embeddings `[B,C]` of one class for a `[B,C,H,W]` feature map.
pub fn calibrated_embedding<T: Real>(tape: &mut Tape<T>, vars: &CalibrationVars, feature_map: Var) -> Result<Var> {
    let proto_shape = tape.shape(vars.prototypes).to_vec();
    if proto_shape.len() != 2 {
        return Err(Error::invalid(format!("prototypes must be [K,C], got {proto_shape:?}")));
    }
    let filters = tape.reshape(vars.prototypes, &[proto_shape[0], proto_shape[1], 1, 1])?;
    let responses = tape.conv2d(feature_map, filters, 1, 0)?;
    let fused = tape.conv2d(responses, vars.fusion_weight, 1, 0)?;
    let fused = tape.add_channel_bias(fused, vars.fusion_bias)?;
    let gate = tape.sigmoid(fused);
    let gate = tape.add_scalar(gate, T::one());
    let refined = tape.mul_spatial(feature_map, gate)?;
    tape.global_avg_pool(refined)
}

/// Stage-2 logits `[B,N]`: tail classes scored on their calibrated
/// embedding, all others on the plain embedding, both cosine-normalized.
pub fn score_all<T: Real>(
    tape: &mut Tape<T>,
    head: &ClassifierHead,
    head_vars: &HeadVars,
    calibrations: &BTreeMap<usize, CalibrationVars>,
    feature_map: Var,
    embedding: Var,
) -> Result<Var> {
    if head.kind() != HeadKind::NormFc {
        return Err(Error::invalid(format!(
            "calibrated scoring needs a norm_fc head, got {:?}",
            head.kind()
        )));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let directions = head.scaled_directions(tape, head_vars)?;
    let plain_x = tape.l2_normalize(embedding, eps);
    let plain = tape.matmul_bt(plain_x, directions)?;
    if calibrations.is_empty() {
        return Ok(plain);
    }
    let n = head.num_classes();
    let mut columns = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for c in 0..n {
        match calibrations.get(&c) {
            None => run.push(c),
            Some(vars) => {
                if !run.is_empty() {
                    columns.push(tape.select_cols(plain, &run)?);
                    run.clear();
                }
                let x_c = calibrated_embedding(tape, vars, feature_map)?;
                let x_c = tape.l2_normalize(x_c, eps);
                let dir = tape.select_rows(directions, &[c])?;
                columns.push(tape.matmul_bt(x_c, dir)?);
            }
        }
    }
    if !run.is_empty() {
        columns.push(tape.select_cols(plain, &run)?);
    }
    tape.concat_cols(&columns)
}

fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

/// Calibrated embedding `[C]` of a tail class for one `[C,H',W']` map.
pub fn camc_forward(feature_map: &Tensor, block: &CamcBlock, class: usize) -> Result<Tensor> {
    let bank = block.banks.get(&class).ok_or_else(|| {
        Error::invalid(format!("class {class} has no prototype bank; use the plain embedding"))
    })?;
    check_fmap(feature_map, bank.prototypes.shape()[1])?;
    let mut tape = Tape::<f32>::new();
    let vars = CalibrationVars {
        prototypes: tape.constant(bank.prototypes.clone()),
        fusion_weight: tape.constant(bank.fusion_weight.clone()),
        fusion_bias: tape.constant(bank.fusion_bias.clone()),
    };
    let f = tape.constant(batch_of_one(feature_map)?);
    let x = calibrated_embedding(&mut tape, &vars, f)?;
    Ok(tape.value(x).index_axis0(0))
}

/// Scores `[N]` for one image from its feature map and plain embedding.
pub fn camc_score_all(feature_map: &Tensor, embedding: &Tensor, block: &CamcBlock, head: &ClassifierHead) -> Result<Tensor> {
    check_fmap(feature_map, head.dim())?;
    let mut tape = Tape::<f32>::new();
    let head_vars = head.bind(&mut tape, false);
    let calib = block.bind(&mut tape, false);
    let f = tape.constant(batch_of_one(feature_map)?);
    let e = tape.constant(batch_of_one(embedding)?);
    let s = score_all(&mut tape, head, &head_vars, &calib, f, e)?;
    Ok(tape.value(s).index_axis0(0))
}

/// Batched form of [`camc_score_all`] over `[B,C,H,W]` maps and `[B,C]`
/// embeddings.
pub fn camc_score_batch(feature_maps: &Tensor, embeddings: &Tensor, block: &CamcBlock, head: &ClassifierHead) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let head_vars = head.bind(&mut tape, false);
    let calib = block.bind(&mut tape, false);
    let f = tape.constant(feature_maps.clone());
    let e = tape.constant(embeddings.clone());
    let s = score_all(&mut tape, head, &head_vars, &calib, f, e)?;
    Ok(tape.value(s).clone())
}

/// Class map after calibration: the class weight applied densely to the
/// reweighted feature map of a tail class.
pub fn calibrated_cam(feature_map: &Tensor, w_c: &Tensor, block: &CamcBlock, class: usize) -> Result<Cam> {
    let bank = block
        .banks
        .get(&class)
        .ok_or_else(|| Error::invalid(format!("class {class} has no prototype bank")))?;
    check_fmap(feature_map, bank.prototypes.shape()[1])?;
    let (c, h, w) = (feature_map.shape()[0], feature_map.shape()[1], feature_map.shape()[2]);
    let mut tape = Tape::<f32>::new();
    let f = tape.constant(batch_of_one(feature_map)?);
    let p = tape.constant(bank.prototypes.clone().reshape(&[bank.k(), c, 1, 1])?);
    let fw = tape.constant(bank.fusion_weight.clone());
    let fb = tape.constant(bank.fusion_bias.clone());
    let r = tape.conv2d(f, p, 1, 0)?;
    let m = tape.conv2d(r, fw, 1, 0)?;
    let m = tape.add_channel_bias(m, fb)?;
    let gate = tape.sigmoid(m);
    let gate = tape.add_scalar(gate, 1.0);
    let refined = tape.mul_spatial(f, gate)?;
    let refined = tape.value(refined).clone().reshape(&[c, h, w])?;
    compute_cam_weighted_sum(&refined, class, w_c)
}

impl ClassCalibration {
    pub fn k(&self) -> usize {
        self.prototypes.shape()[0]
    }
}

/// One sliding window, half-open pixel ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// `M x M` raw-size windows centered on a regular grid, clipped to the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropGrid {
    pub m: usize,
    /// row-major
    pub windows: Vec<Window>,
}

impl CropGrid {
    pub fn new(height: usize, width: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("crop grid side M must be at least 1"));
        }
        let span = |center: f64, size: usize| -> (usize, usize) {
            let lo = (center - size as f64 / 2.0).round().max(0.0) as usize;
            let hi = ((center + size as f64 / 2.0).round() as usize).min(size);
            (lo.min(size - 1), hi.max(lo + 1))
        };
        let mut windows = Vec::with_capacity(m * m);
        for i in 0..m {
            let (y0, y1) = span((i as f64 + 0.5) / m as f64 * height as f64, height);
            for j in 0..m {
                let (x0, x1) = span((j as f64 + 0.5) / m as f64 * width as f64, width);
                windows.push(Window { y0, y1, x0, x1 });
            }
        }
        Ok(CropGrid { m, windows })
    }
}

/// The `M*M` clipped patches of an image, each resized back to the input size.
pub fn camcpp_patches(image: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    if image.ndim() != 3 {
        return Err(Error::invalid(format!("expected a [C,H,W] image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = CropGrid::new(h, w, m)?;
    grid.windows
        .iter()
        .map(|win| {
            let patch = tensor::crop(image, win.y0, win.y1, win.x0, win.x1)?;
            tensor::resize_bilinear(&patch, h, w)
        })
        .collect()
}

/// Dense `[C,M,M]` map whose cell `(i,j)` is the backbone embedding of the
/// window centered at grid point `(i,j)`.
pub fn camcpp_feature_grid(image: &Tensor, backbone: &Backbone, m: usize) -> Result<Tensor> {
    let patches = camcpp_patches(image, m)?;
    let refs: Vec<&Tensor> = patches.iter().collect();
    let (_, embeddings) = backbone.encode_batch(&Tensor::stack(&refs)?)?;
    // embeddings: [M*M, C] -> [C, M, M]
    let c = backbone.feature_dim();
    let cells = m * m;
    let mut out = vec![0f32; c * cells];
    for cell in 0..cells {
        for ch in 0..c {
            out[ch * cells + cell] = embeddings.data()[cell * c + ch];
        }
    }
    Tensor::new(vec![c, m, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::uniform(&[4, 3, 3], 0.0, 1.0, &mut rng);
        let e2 = Tensor::from_fn(&[4], |i| if i == 2 { 1.0 } else { 0.0 });
        let cam = compute_cam_weighted_sum(&f, 0, &e2).unwrap();
        assert_eq!(cam.values.data(), &f.data()[18..27]);
        let zero = compute_cam_weighted_sum(&f, 0, &Tensor::zeros(&[4])).unwrap();
        assert!(zero.values.data().iter().all(|&v| v == 0.0));
        assert!(compute_cam_weighted_sum(&f, 0, &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn identity_weights_reproduce_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let m = compute_cam_conv(&f, &eye).unwrap();
        assert!(m.max_abs_diff(&f) < 1e-7);
    }

    #[test]
    fn thresholds() {
        let counts = [500, 60, 19, 3];
        assert!(tail_classes(&counts, Threshold::Count(0)).is_empty());
        assert_eq!(tail_classes(&counts, Threshold::Count(20)), vec![2, 3]);
        assert_eq!(tail_classes(&counts, Threshold::Infinite), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_fusion_gives_one_and_a_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[5, 3, 3], 0.0, 1.0, &mut rng);
        let mut bank = ClassCalibration::from_prototypes(Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng)).unwrap();
        bank.fusion_weight = Tensor::zeros(&[1, 2, 1, 1]);
        let mut block = CamcBlock::empty(Threshold::Count(10), 2);
        block.banks.insert(1, bank.clone());
        let x = camc_forward(&f, &block, 1).unwrap();
        let gap = tensor::global_avg_pool(&f.clone().reshape(&[1, 5, 3, 3]).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(gap.data()) {
            assert!((a - 1.5 * b).abs() < 1e-6);
        }
        // saturated gate doubles the features
        bank.fusion_bias = Tensor::full(&[1], 60.0);
        block.banks.insert(1, bank);
        let x = camc_forward(&f, &block, 1).unwrap();
        for (a, b) in x.data().iter().zip(gap.data()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
        assert!(camc_forward(&f, &block, 0).is_err());
    }

    #[test]
    fn grid_geometry() {
        let g = CropGrid::new(16, 16, 1).unwrap();
        assert_eq!(g.windows, vec![Window { y0: 0, y1: 16, x0: 0, x1: 16 }]);
        let g = CropGrid::new(16, 16, 2).unwrap();
        assert_eq!(g.windows[0], Window { y0: 0, y1: 12, x0: 0, x1: 12 });
        assert_eq!(g.windows[3], Window { y0: 4, y1: 16, x0: 4, x1: 16 });
        let g = CropGrid::new(10, 10, 5).unwrap();
        assert!(g.windows.iter().all(|w| w.y0 < w.y1 && w.x0 < w.x1 && w.y1 <= 10));
        assert!(CropGrid::new(4, 4, 0).is_err());
    }

    #[test]
    fn threshold_serde() {
        assert_eq!(serde_json::to_string(&Threshold::Count(20)).unwrap(), "20");
        assert_eq!(serde_json::to_string(&Threshold::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<Threshold>("\"inf\"").unwrap(), Threshold::Infinite);
        assert_eq!(serde_json::from_str::<Threshold>("7").unwrap(), Threshold::Count(7));
        assert!(serde_json::from_str::<Threshold>("\"lots\"").is_err());
    }
}
