//! Two-stage decoupled training: representation learning with a selectable
//! head over instance-balanced batches, then classifier re-training on a
//! frozen backbone with class-balanced batches and optional calibration.

mod checkpoint;
mod optim;

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CamcEntry, Checkpoint, Manifest, TensorEntry,
    FORMAT_VERSION,
};
pub use optim::{cosine_lr, sgd_step};

use crate::autodiff::{Tape, Var};
use crate::camc::{self, Threshold};
use crate::data::{LongTailedDataset, Sampler, SamplerKind, SamplerSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Averaging, SplitReport};
use crate::model::{argmax, Backbone, BackboneConfig, ClassifierHead, HeadKind, Stage, NORM_EPS};
use crate::tensor::Tensor;

// keeps the sampler stream apart from the initialization stream
const SAMPLER_SALT: u64 = 0x5a17_c0de_0000_0001;
const PROTOTYPE_SALT: u64 = 0x5a17_c0de_0000_0002;
const ENCODE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamcVariant {
    #[default]
    None,
    Camc,
    Camcpp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub head: HeadKind,
    pub g: f32,
    pub lr_max: f64,
    pub momentum: f64,
    /// applied to backbone and head weights and biases, never to magnitudes
    /// or calibration parameters
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub tau: Threshold,
    pub k: usize,
    pub camc: CamcVariant,
    pub m: usize,
    /// stage 2 only: fresh head instead of the renormalized stage-1 weights
    pub cold_start: bool,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::representation()
    }
}

impl TrainConfig {
    pub fn representation() -> Self {
        TrainConfig {
            stage: Stage::Representation,
            head: HeadKind::Linear,
            g: 0.5,
            lr_max: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 30,
            sampler: SamplerKind::InstanceBalanced,
            seed: 0,
            tau: Threshold::Count(0),
            k: 5,
            camc: CamcVariant::None,
            m: 2,
            cold_start: false,
            backbone: BackboneConfig::default(),
        }
    }

    pub fn classifier() -> Self {
        TrainConfig {
            stage: Stage::Classifier,
            head: HeadKind::NormFc,
            g: 16.0,
            lr_max: 0.1,
            epochs: 10,
            sampler: SamplerKind::ClassBalanced,
            ..TrainConfig::representation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    /// Every invalid field, each message starting with the field name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |field: &str, why: &str| out.push(format!("{field}: {why}"));
        if self.batch_size == 0 {
            bad("batch_size", "must be positive");
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            bad("lr_max", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad("weight_decay", "must be finite and non-negative");
        }
        if !(self.g.is_finite() && self.g > 0.0) {
            bad("g", "must be finite and positive");
        }
        if self.k == 0 {
            bad("k", "must be at least 1");
        }
        if self.camc == CamcVariant::Camcpp && self.m == 0 {
            bad("m", "must be at least 1");
        }
        match self.stage {
            Stage::Representation => {
                if self.camc != CamcVariant::None {
                    bad("camc", "calibration only runs in the classifier stage");
                }
            }
            Stage::Classifier => {
                if self.sampler != SamplerKind::ClassBalanced {
                    bad("sampler", "the classifier stage samples class-balanced");
                }
                if self.camc != CamcVariant::None && self.head != HeadKind::NormFc {
                    bad("head", "calibration needs a norm_fc head");
                }
            }
        }
        if let Err(e) = self.backbone.validate() {
            bad("backbone", &e.to_string());
        }
        out
    }
}

/// Per-epoch record; one JSON line each in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// mean batch loss
    pub loss: f64,
    pub lr: f64,
    pub batch_losses: Vec<f32>,
    /// training labels drawn this epoch, per class
    pub labels_seen: Vec<usize>,
    pub val: Option<ValAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub low: Option<f64>,
    pub all: f64,
}

impl From<&SplitReport> for ValAccuracy {
    fn from(r: &SplitReport) -> Self {
        ValAccuracy {
            many: r.top1_many,
            medium: r.top1_medium,
            low: r.top1_low,
            all: r.top1_all,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

pub fn write_metrics_jsonl(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for m in history {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Per-image inputs of the scoring path.
#[derive(Clone, Debug)]
pub struct Features {
    /// backbone maps `[C,H',W']`, CAMC++ grids `[C,M,M]`, or empty when the
    /// model does not calibrate
    pub maps: Vec<Tensor>,
    pub embeddings: Vec<Tensor>,
}

impl Features {
    fn batch(&self, indices: &[usize]) -> Result<(Option<Tensor>, Tensor)> {
        let emb: Vec<&Tensor> = indices.iter().map(|&i| &self.embeddings[i]).collect();
        let maps = if self.maps.is_empty() {
            None
        } else {
            let m: Vec<&Tensor> = indices.iter().map(|&i| &self.maps[i]).collect();
            Some(Tensor::stack(&m)?)
        };
        Ok((maps, Tensor::stack(&emb)?))
    }
}

impl Checkpoint {
    fn calibrates(&self) -> bool {
        self.stage == Stage::Classifier && self.camc.is_some()
    }

    /// Backbone features for a set of images, chunked and encoded in parallel.
    pub fn features(&self, images: &[&Tensor]) -> Result<Features> {
        let calibrates = self.calibrates();
        let variant = self.config.camc;
        let m = self.config.m;
        let parts: Vec<(Vec<Tensor>, Vec<Tensor>)> = images
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
                let (fmaps, embs) = self.backbone.encode_all(chunk, ENCODE_CHUNK)?;
                let maps = match (calibrates, variant) {
                    (false, _) | (_, CamcVariant::None) => Vec::new(),
                    (true, CamcVariant::Camc) => fmaps,
                    (true, CamcVariant::Camcpp) => chunk
                        .iter()
                        .map(|im| camc::camcpp_feature_grid(im, &self.backbone, m))
                        .collect::<Result<_>>()?,
                };
                Ok((maps, embs))
            })
            .collect::<Result<_>>()?;
        let mut out = Features {
            maps: Vec::with_capacity(images.len()),
            embeddings: Vec::with_capacity(images.len()),
        };
        for (maps, embs) in parts {
            out.maps.extend(maps);
            out.embeddings.extend(embs);
        }
        Ok(out)
    }

    /// Logits `[B,N]` from precomputed features.
    pub fn logits_from(&self, maps: Option<&Tensor>, embeddings: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let hv = self.head.bind(&mut tape, false);
        let e = tape.constant(embeddings.clone());
        let s = match (self.calibrates(), maps) {
            (true, Some(maps)) => {
                let block = self.camc.as_ref().expect("calibrating model has a block");
                let calib = block.bind(&mut tape, false);
                let f = tape.constant(maps.clone());
                camc::score_all(&mut tape, &self.head, &hv, &calib, f, e)?
            }
            (true, None) => return Err(Error::invalid("calibrated scoring needs feature maps")),
            (false, _) => self.head.scores(&mut tape, &hv, e, self.stage)?,
        };
        Ok(tape.value(s).clone())
    }

    pub fn logits(&self, images: &[&Tensor]) -> Result<Tensor> {
        let features = self.features(images)?;
        let idx: Vec<usize> = (0..images.len()).collect();
        let (maps, emb) = features.batch(&idx)?;
        self.logits_from(maps.as_ref(), &emb)
    }

    pub fn predict_features(&self, features: &Features) -> Result<Vec<usize>> {
        let n = features.embeddings.len();
        let idx: Vec<usize> = (0..n).collect();
        let mut preds = Vec::with_capacity(n);
        for chunk in idx.chunks(ENCODE_CHUNK) {
            let (maps, emb) = features.batch(chunk)?;
            let logits = self.logits_from(maps.as_ref(), &emb)?;
            let classes = logits.shape()[1];
            preds.extend(logits.data().chunks_exact(classes).map(argmax));
        }
        Ok(preds)
    }

    pub fn predict(&self, dataset: &LongTailedDataset) -> Result<Vec<usize>> {
        let images: Vec<&Tensor> = dataset.images().iter().collect();
        self.predict_features(&self.features(&images)?)
    }

    /// Backbone embeddings of every image, grouped by class.
    pub fn class_embeddings(&self, dataset: &LongTailedDataset) -> Result<Vec<Vec<Tensor>>> {
        let images: Vec<&Tensor> = dataset.images().iter().collect();
        let (_, embs) = self.backbone.encode_all(&images, ENCODE_CHUNK)?;
        let mut out = vec![Vec::new(); dataset.num_classes()];
        for (e, &l) in embs.into_iter().zip(dataset.labels()) {
            out[l].push(e);
        }
        Ok(out)
    }
}

/// Validation set plus the training-count split tags it is scored under.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub dataset: &'a LongTailedDataset,
    pub class_splits: &'a [Split],
}

fn check_finite(loss: f32, epoch: usize, batch: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            epoch,
            batch,
            lr,
            message: format!("training loss became {loss}"),
        })
    }
}

fn grad_of(tape: &mut Tape<f32>, v: Var, shape: &[usize]) -> Tensor {
    tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(shape))
}

/// One SGD update of the trainable entries of `params`, with weight decay
/// added to the gradients flagged in `decay`.
#[allow(clippy::too_many_arguments)]
fn update(
    tape: &mut Tape<f32>,
    params: Vec<&mut Tensor>,
    vars: &[Var],
    trainable: &[bool],
    decay: &[bool],
    velocity: &mut [Tensor],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let wd = config.weight_decay as f32;
    for (i, p) in params.into_iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let mut g = grad_of(tape, vars[i], p.shape());
        if decay[i] && wd > 0.0 {
            for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
                *gi += wd * pi;
            }
        }
        sgd_step(&mut [p], &[&g], lr, config.momentum, std::slice::from_mut(&mut velocity[i]))?;
    }
    Ok(())
}

/// Weight decay flags for [`ClassifierHead::params`]: never on the magnitude.
fn head_decay(head: &ClassifierHead) -> Vec<bool> {
    head.param_names().iter().map(|n| n != "head.g").collect()
}

fn batches_per_epoch(len: usize, batch: usize) -> usize {
    len.div_ceil(batch)
}

fn validation_metrics(model: &Checkpoint, val: Option<(&Validation<'_>, &Features)>) -> Result<Option<ValAccuracy>> {
    let Some((v, features)) = val else {
        return Ok(None);
    };
    let preds = model.predict_features(features)?;
    let report = eval::evaluate_predictions(v.dataset.labels(), &preds, v.class_splits, Averaging::Instance)?;
    Ok(Some(ValAccuracy::from(&report)))
}

/// Fresh stage-1 model for `config` on a dataset with `num_classes` classes.
pub fn initialize(config: &TrainConfig, num_classes: usize) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
    let head = ClassifierHead::new(config.head, num_classes, backbone.feature_dim(), config.g, &mut rng);
    Ok(Checkpoint {
        stage: Stage::Representation,
        epoch: 0,
        config: config.clone(),
        backbone,
        head,
        camc: None,
    })
}

fn check_images(dataset: &LongTailedDataset, config: &BackboneConfig) -> Result<()> {
    let expected = [config.in_channels, config.image_size, config.image_size];
    match dataset.image_shape() {
        Some(s) if s == expected => Ok(()),
        other => Err(Error::invalid(format!(
            "dataset images are {other:?}, backbone expects {expected:?}"
        ))),
    }
}

/// Representation learning: backbone and head trained jointly on
/// instance-balanced batches with the representation-stage scores.
pub fn train_stage1(dataset: &LongTailedDataset, val: Option<Validation<'_>>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Representation {
        return Err(Error::invalid("stage: train_stage1 needs the representation stage"));
    }
    check_images(dataset, &config.backbone)?;
    let mut model = initialize(config, dataset.num_classes())?;
    let mut sampler = Sampler::new(
        dataset,
        SamplerSpec {
            kind: config.sampler,
            seed: config.seed ^ SAMPLER_SALT,
            batch_size: config.batch_size,
        },
    )?;
    let val_images: Option<Vec<&Tensor>> = val.as_ref().map(|v| v.dataset.images().iter().collect());
    let num_batches = batches_per_epoch(dataset.len(), config.batch_size);

    let mut trainable = vec![true; model.backbone.params().len()];
    trainable.extend(model.head.trainable_mask());
    let mut decay = vec![true; model.backbone.params().len()];
    decay.extend(head_decay(&model.head));
    let mut velocity: Vec<Tensor> = model
        .backbone
        .params()
        .into_iter()
        .chain(model.head.params())
        .map(|p| Tensor::zeros(p.shape()))
        .collect();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_max);
        let mut batch_losses = Vec::with_capacity(num_batches);
        let mut labels_seen = vec![0usize; dataset.num_classes()];
        for b in 0..num_batches {
            let idx = sampler.next_batch();
            let (x, y) = dataset.batch(&idx)?;
            for &l in &y {
                labels_seen[l] += 1;
            }
            let mut tape = Tape::<f32>::new();
            let bvars = model.backbone.bind(&mut tape, true);
            let hv = model.head.bind(&mut tape, true);
            let input = tape.constant(x);
            let (_, emb) = model.backbone.forward(&mut tape, &bvars, input)?;
            let s = model.head.scores(&mut tape, &hv, emb, Stage::Representation)?;
            let loss = tape.softmax_cross_entropy(s, &y)?;
            let loss_value = tape.value(loss).item();
            check_finite(loss_value, epoch, b, lr)?;
            batch_losses.push(loss_value);
            tape.backward(loss)?;

            let mut vars = bvars;
            vars.push(hv.weight);
            vars.extend(hv.bias);
            vars.extend(hv.magnitude);
            let mut params: Vec<&mut Tensor> = model.backbone.params_mut();
            params.extend(model.head.params_mut());
            update(&mut tape, params, &vars, &trainable, &decay, &mut velocity, lr, config)?;
        }
        model.epoch = epoch + 1;
        let val_features = match (&val, &val_images) {
            (Some(_), Some(images)) => Some(model.features(images)?),
            _ => None,
        };
        let val_acc = validation_metrics(&model, val.as_ref().zip(val_features.as_ref()))?;
        history.push(EpochMetrics {
            epoch,
            loss: batch_losses.iter().map(|&l| l as f64).sum::<f64>() / batch_losses.len().max(1) as f64,
            lr,
            batch_losses,
            labels_seen,
            val: val_acc,
        });
    }
    Ok(TrainOutcome {
        checkpoint: model,
        history,
    })
}

/// Stage-1 head rows rescaled to unit length, as the warm start of stage 2.
fn renormalized_weight(head: &ClassifierHead) -> Result<Tensor> {
    let (n, c) = (head.num_classes(), head.dim());
    let mut data = head.weight().data().to_vec();
    for row in data.chunks_exact_mut(c) {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let div = if norm > NORM_EPS { norm } else { NORM_EPS };
        for v in row.iter_mut() {
            *v = (*v as f64 / div) as f32;
        }
    }
    Tensor::new(vec![n, c], data)
}

/// Classifier re-training on the frozen stage-1 backbone. Only the head and
/// the calibration block are updated.
pub fn train_stage2(
    stage1: &Checkpoint,
    dataset: &LongTailedDataset,
    val: Option<Validation<'_>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Classifier {
        return Err(Error::invalid("stage: train_stage2 needs the classifier stage"));
    }
    if config.backbone != stage1.config.backbone {
        return Err(Error::invalid("backbone: configuration differs from the stage-1 checkpoint"));
    }
    check_images(dataset, &config.backbone)?;
    if stage1.head.num_classes() != dataset.num_classes() {
        return Err(Error::invalid("stage-1 head and dataset disagree on the class count"));
    }
    let backbone = stage1.backbone.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let head = if config.cold_start {
        ClassifierHead::new(config.head, dataset.num_classes(), backbone.feature_dim(), config.g, &mut rng)
    } else {
        ClassifierHead::from_weight(config.head, renormalized_weight(&stage1.head)?, config.g)?
    };
    let camc = match config.camc {
        CamcVariant::None => None,
        CamcVariant::Camc | CamcVariant::Camcpp => Some(camc::init_prototypes(
            &backbone,
            dataset,
            config.tau,
            config.k,
            config.seed ^ PROTOTYPE_SALT,
        )?),
    };
    let mut model = Checkpoint {
        stage: Stage::Classifier,
        epoch: 0,
        config: config.clone(),
        backbone,
        head,
        camc,
    };

    let train_images: Vec<&Tensor> = dataset.images().iter().collect();
    let features = model.features(&train_images)?;
    let val_features = match &val {
        Some(v) => {
            let images: Vec<&Tensor> = v.dataset.images().iter().collect();
            Some(model.features(&images)?)
        }
        None => None,
    };
    let mut sampler = Sampler::new(
        dataset,
        SamplerSpec {
            kind: config.sampler,
            seed: config.seed ^ SAMPLER_SALT,
            batch_size: config.batch_size,
        },
    )?;
    let num_batches = batches_per_epoch(dataset.len(), config.batch_size);
    let head_mask = model.head.trainable_mask();
    let head_decay = head_decay(&model.head);
    let mut head_velocity: Vec<Tensor> = model.head.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut camc_velocity: Vec<Tensor> = model
        .camc
        .as_ref()
        .map(|b| b.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .unwrap_or_default();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_max);
        let mut batch_losses = Vec::with_capacity(num_batches);
        let mut labels_seen = vec![0usize; dataset.num_classes()];
        for b in 0..num_batches {
            let idx = sampler.next_batch();
            let y: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
            for &l in &y {
                labels_seen[l] += 1;
            }
            let (maps, emb) = features.batch(&idx)?;
            let mut tape = Tape::<f32>::new();
            let hv = model.head.bind(&mut tape, true);
            let e = tape.constant(emb);
            let (s, calib) = match (&model.camc, maps) {
                (Some(block), Some(maps)) => {
                    let calib = block.bind(&mut tape, true);
                    let f = tape.constant(maps);
                    (camc::score_all(&mut tape, &model.head, &hv, &calib, f, e)?, Some(calib))
                }
                _ => (model.head.scores(&mut tape, &hv, e, Stage::Classifier)?, None),
            };
            let loss = tape.softmax_cross_entropy(s, &y)?;
            let loss_value = tape.value(loss).item();
            check_finite(loss_value, epoch, b, lr)?;
            batch_losses.push(loss_value);
            tape.backward(loss)?;

            let mut hvars = vec![hv.weight];
            hvars.extend(hv.bias);
            hvars.extend(hv.magnitude);
            update(
                &mut tape,
                model.head.params_mut(),
                &hvars,
                &head_mask,
                &head_decay,
                &mut head_velocity,
                lr,
                config,
            )?;

            if let (Some(block), Some(calib)) = (model.camc.as_mut(), calib) {
                let cvars: Vec<Var> = calib
                    .values()
                    .flat_map(|c| [c.prototypes, c.fusion_weight, c.fusion_bias])
                    .collect();
                let flags = vec![true; cvars.len()];
                let no_decay = vec![false; cvars.len()];
                update(
                    &mut tape,
                    block.params_mut(),
                    &cvars,
                    &flags,
                    &no_decay,
                    &mut camc_velocity,
                    lr,
                    config,
                )?;
            }
        }
        model.epoch = epoch + 1;
        let val_acc = validation_metrics(&model, val.as_ref().zip(val_features.as_ref()))?;
        history.push(EpochMetrics {
            epoch,
            loss: batch_losses.iter().map(|&l| l as f64).sum::<f64>() / batch_losses.len().max(1) as f64,
            lr,
            batch_losses,
            labels_seen,
            val: val_acc,
        });
    }
    Ok(TrainOutcome {
        checkpoint: model,
        history,
    })
}

/// The default magnitude grid `2^-5 .. 2^5`.
pub fn default_g_grid() -> Vec<f32> {
    (-5..=5).map(|e| 2f32.powi(e)).collect()
}

#[derive(Debug)]
pub struct SweepRun {
    pub g: f32,
    pub outcome: Result<TrainOutcome>,
}

/// Stage-1 training once per magnitude, all runs sharing `config.seed`.
/// A failed run is recorded and the sweep continues.
pub fn sweep_g(
    dataset: &LongTailedDataset,
    val: Option<Validation<'_>>,
    g_values: &[f32],
    config: &TrainConfig,
) -> Result<Vec<SweepRun>> {
    if g_values.is_empty() {
        return Err(Error::invalid("g_values must not be empty"));
    }
    Ok(g_values
        .par_iter()
        .map(|&g| {
            let cfg = TrainConfig { g, ..config.clone() };
            SweepRun {
                g,
                outcome: train_stage1(dataset, val, &cfg),
            }
        })
        .collect())
}

/// Index of the run with the highest final validation accuracy; ties go to
/// the earlier run. Failed or unvalidated runs are skipped.
pub fn select_best(runs: &[SweepRun]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, run) in runs.iter().enumerate() {
        let Ok(outcome) = &run.outcome else { continue };
        let Some(acc) = outcome.history.last().and_then(|m| m.val.as_ref()).map(|v| v.all) else {
            continue;
        };
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i, acc));
        }
    }
    best.map(|(i, _)| i)
}
