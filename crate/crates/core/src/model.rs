//! The small convolutional backbone, the classifier head family and the
//! nearest-class-mean evaluator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};

/// Guard used wherever a vector is normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Layout of the convolutional backbone: 3x3 convolutions (padding 1) with
/// bias and relu, each optionally followed by 2x2 max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub pool_after: Vec<bool>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            image_size: 32,
            channels: vec![32, 64, 128, 256],
            pool_after: vec![true, true, true, false],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("backbone needs at least one conv stage"));
        }
        if self.pool_after.len() != self.channels.len() {
            return Err(Error::invalid(format!(
                "pool_after has {} entries for {} conv stages",
                self.pool_after.len(),
                self.channels.len()
            )));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.feature_size() == 0 {
            return Err(Error::invalid(format!(
                "image_size {} pooled {} times leaves no spatial extent",
                self.image_size,
                self.pool_after.iter().filter(|&&p| p).count()
            )));
        }
        Ok(())
    }

    /// Side of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.pool_after
            .iter()
            .filter(|&&p| p)
            .fold(self.image_size, |s, _| s / 2)
    }

    /// Channel count of the final feature map.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

/// Kaiming-uniform (fan-in) initialization bound.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = config.in_channels;
        for &c_out in &config.channels {
            let bound = kaiming_bound(c_in * 9);
            weights.push(Tensor::uniform(&[c_out, c_in, 3, 3], -bound, bound, rng));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Ok(Backbone { config, weights, biases })
    }

    /// Backbone with every weight and bias set to zero.
    pub fn zeroed(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &c_out in &config.channels {
            weights.push(Tensor::zeros(&[c_out, c_in, 3, 3]));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Ok(Backbone { config, weights, biases })
    }

    /// Rebuilds a backbone from tensors ordered as [`Backbone::params`].
    pub fn from_params(config: BackboneConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Backbone::zeroed(config.clone())?;
        if params.len() != template.params().len() {
            return Err(Error::invalid(format!(
                "backbone needs {} tensors, got {}",
                template.params().len(),
                params.len()
            )));
        }
        for (p, t) in params.iter().zip(template.params()) {
            if p.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "backbone tensor shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, p) in params.into_iter().enumerate() {
            if i % 2 == 0 {
                weights.push(p);
            } else {
                biases.push(p);
            }
        }
        Ok(Backbone { config, weights, biases })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|i| [format!("backbone.conv{i}.weight"), format!("backbone.conv{i}.bias")])
            .collect()
    }

    /// `[w0, b0, w1, b1, ...]`, matching [`Backbone::param_names`].
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.cast(), trainable)).collect()
    }

    /// Records the backbone on `tape`. `input` is `[B,C,H,W]`; returns the
    /// final feature map `[B,C',H',W']` and its global average `[B,C']`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(input);
        let expected = [self.config.in_channels, self.config.image_size, self.config.image_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::invalid(format!(
                "backbone expects [B,{},{},{}] input, got {:?}",
                expected[0], expected[1], expected[2], shape
            )));
        }
        if params.len() != 2 * self.weights.len() {
            return Err(Error::invalid("backbone parameter binding has the wrong length"));
        }
        let mut x = input;
        for (stage, pair) in params.chunks_exact(2).enumerate() {
            x = tape.conv2d(x, pair[0], 1, 1)?;
            x = tape.add_channel_bias(x, pair[1])?;
            x = tape.relu(x);
            if self.config.pool_after[stage] {
                x = tape.max_pool2d(x, 2)?;
            }
        }
        let embedding = tape.global_avg_pool(x)?;
        Ok((x, embedding))
    }

    /// Inference over a `[B,C,H,W]` batch without recording gradients.
    pub fn encode_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::<f32>::new();
        let params = self.bind(&mut tape, false);
        let input = tape.constant(images.clone());
        let (fmap, emb) = self.forward(&mut tape, &params, input)?;
        Ok((tape.value(fmap).clone(), tape.value(emb).clone()))
    }

    /// Feature map `[C,H',W']` and embedding `[C]` of a single `[C,H,W]` image.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        if image.ndim() != 3 {
            return Err(Error::invalid(format!("expected a [C,H,W] image, got {:?}", image.shape())));
        }
        let batch = Tensor::stack(&[image])?;
        let (fmap, emb) = self.encode_batch(&batch)?;
        Ok((fmap.index_axis0(0), emb.index_axis0(0)))
    }

    /// Encodes many images in chunks of `chunk`; returns per-image feature
    /// maps and embeddings.
    pub fn encode_all(&self, images: &[&Tensor], chunk: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut fmaps = Vec::with_capacity(images.len());
        let mut embs = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = Tensor::stack(part)?;
            let (f, e) = self.encode_batch(&batch)?;
            for i in 0..part.len() {
                fmaps.push(f.index_axis0(i));
                embs.push(e.index_axis0(i));
            }
        }
        Ok((fmaps, embs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// learnable per-class magnitude `g_c`
    WeightNorm,
    /// one learnable magnitude shared by all classes
    WeightNormSharedG,
    /// fixed magnitude `g`
    NormFc,
}

/// Which score equation a normalized head uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `s_c = <x, g w_c/|w_c|>`
    Representation,
    /// `s_c = <x/|x|, g w_c/|w_c|>`
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    kind: HeadKind,
    weight: Tensor,
    bias: Option<Tensor>,
    /// `[1]` for norm_fc and the shared variant, `[N]` for weight_norm.
    magnitude: Option<Tensor>,
}

/// Tape handles of a bound head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub magnitude: Option<Var>,
}

impl ClassifierHead {
    /// Kaiming-uniform weights, zero bias, magnitude `g` for norm_fc and 1
    /// for the learnable variants.
    pub fn new<R: Rng + ?Sized>(kind: HeadKind, num_classes: usize, dim: usize, g: f32, rng: &mut R) -> Self {
        let bound = kaiming_bound(dim);
        let weight = Tensor::uniform(&[num_classes, dim], -bound, bound, rng);
        Self::from_weight(kind, weight, g).expect("weight is 2-d")
    }

    pub fn from_weight(kind: HeadKind, weight: Tensor, g: f32) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::invalid(format!("head weight must be [N,C], got {:?}", weight.shape())));
        }
        let n = weight.shape()[0];
        let (bias, magnitude) = match kind {
            HeadKind::Linear => (Some(Tensor::zeros(&[n])), None),
            HeadKind::WeightNorm => (None, Some(Tensor::full(&[n], 1.0))),
            HeadKind::WeightNormSharedG => (None, Some(Tensor::full(&[1], 1.0))),
            HeadKind::NormFc => (None, Some(Tensor::full(&[1], g))),
        };
        Ok(ClassifierHead { kind, weight, bias, magnitude })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn magnitude(&self) -> Option<&Tensor> {
        self.magnitude.as_ref()
    }

    pub fn set_bias(&mut self, bias: Tensor) -> Result<()> {
        if self.kind != HeadKind::Linear || bias.shape() != [self.num_classes()] {
            return Err(Error::invalid("only a linear head carries an [N] bias"));
        }
        self.bias = Some(bias);
        Ok(())
    }

    pub fn set_magnitude(&mut self, magnitude: Tensor) -> Result<()> {
        match &self.magnitude {
            Some(m) if m.shape() == magnitude.shape() => {
                self.magnitude = Some(magnitude);
                Ok(())
            }
            _ => Err(Error::invalid("magnitude shape does not fit this head kind")),
        }
    }

    /// Whether the magnitude is a trained parameter.
    pub fn magnitude_learnable(&self) -> bool {
        matches!(self.kind, HeadKind::WeightNorm | HeadKind::WeightNormSharedG)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["head.weight".to_string()];
        if self.bias.is_some() {
            names.push("head.bias".into());
        }
        if self.magnitude.is_some() {
            names.push("head.g".into());
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .chain(self.magnitude.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .chain(self.magnitude.as_mut())
            .collect()
    }

    /// Which entries of [`ClassifierHead::params`] receive gradients.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true];
        if self.bias.is_some() {
            mask.push(true);
        }
        if self.magnitude.is_some() {
            mask.push(self.magnitude_learnable());
        }
        mask
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        let weight = tape.leaf(self.weight.cast(), trainable);
        let bias = self.bias.as_ref().map(|b| tape.leaf(b.cast(), trainable));
        let magnitude = self
            .magnitude
            .as_ref()
            .map(|m| tape.leaf(m.cast(), trainable && self.magnitude_learnable()));
        HeadVars { weight, bias, magnitude }
    }

    /// `g * w_c / |w_c|` for every class, `[N,C]` (normalized kinds only).
    pub fn scaled_directions<T: Real>(&self, tape: &mut Tape<T>, vars: &HeadVars) -> Result<Var> {
        let unit = tape.l2_normalize(vars.weight, T::from_f64_lossy(NORM_EPS));
        let g = vars
            .magnitude
            .ok_or_else(|| Error::invalid("linear head has no normalized directions"))?;
        match self.kind {
            HeadKind::WeightNorm => tape.mul_rows(unit, g),
            _ => tape.scale(unit, g),
        }
    }

    /// Scores `[B,N]` for embeddings `[B,C]`.
    pub fn scores<T: Real>(&self, tape: &mut Tape<T>, vars: &HeadVars, embedding: Var, stage: Stage) -> Result<Var> {
        let shape = tape.shape(embedding);
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::invalid(format!(
                "head expects [B,{}] embeddings, got {:?}",
                self.dim(),
                shape
            )));
        }
        if self.kind == HeadKind::Linear {
            let s = tape.matmul_bt(embedding, vars.weight)?;
            return match vars.bias {
                Some(b) => tape.add_row_bias(s, b),
                None => Ok(s),
            };
        }
        let directions = self.scaled_directions(tape, vars)?;
        let x = match stage {
            Stage::Representation => embedding,
            Stage::Classifier => tape.l2_normalize(embedding, T::from_f64_lossy(NORM_EPS)),
        };
        tape.matmul_bt(x, directions)
    }
}

/// Scores of a single `[C]` embedding or a `[B,C]` batch, without gradients.
pub fn head_score(embedding: &Tensor, head: &ClassifierHead, stage: Stage) -> Result<Tensor> {
    let single = embedding.ndim() == 1;
    let batch = if single {
        embedding.clone().reshape(&[1, embedding.len()])?
    } else {
        embedding.clone()
    };
    let mut tape = Tape::<f32>::new();
    let vars = head.bind(&mut tape, false);
    let x = tape.constant(batch);
    let s = head.scores(&mut tape, &vars, x, stage)?;
    let out = tape.value(s).clone();
    if single {
        let n = out.len();
        out.reshape(&[n])
    } else {
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Nearest-class-mean classifier scored by cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct NcmClassifier {
    pub class_means: Tensor,
}

pub fn ncm_fit(per_class: &[Vec<Tensor>]) -> Result<NcmClassifier> {
    let dim = per_class
        .iter()
        .flat_map(|v| v.first())
        .map(|t| t.len())
        .next()
        .ok_or_else(|| Error::invalid("ncm_fit needs at least one embedding"))?;
    let mut means = Vec::with_capacity(per_class.len() * dim);
    for (c, items) in per_class.iter().enumerate() {
        if items.is_empty() {
            return Err(Error::invalid(format!("class {c} has no embeddings")));
        }
        let mut acc = vec![0f64; dim];
        for e in items {
            if e.len() != dim {
                return Err(Error::invalid(format!("embedding of length {} in class {c}, expected {dim}", e.len())));
            }
            for (a, &v) in acc.iter_mut().zip(e.data()) {
                *a += v as f64;
            }
        }
        means.extend(acc.iter().map(|&a| (a / items.len() as f64) as f32));
    }
    Ok(NcmClassifier {
        class_means: Tensor::new(vec![per_class.len(), dim], means)?,
    })
}

impl NcmClassifier {
    /// Cosine similarity to every class mean.
    pub fn similarities(&self, embedding: &Tensor) -> Vec<f32> {
        let x = tensor::l2_normalize(embedding, NORM_EPS as f32);
        let means = tensor::l2_normalize(&self.class_means, NORM_EPS as f32);
        let n = self.class_means.shape()[0];
        (0..n)
            .map(|c| means.row(c).iter().zip(x.data()).map(|(&a, &b)| a * b).sum())
            .collect()
    }
}

pub fn ncm_predict(embedding: &Tensor, ncm: &NcmClassifier) -> usize {
    argmax(&ncm.similarities(embedding))
}
