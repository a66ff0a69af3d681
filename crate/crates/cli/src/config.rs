//! Run configuration: a JSON document with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use camcal::camc::Threshold;
use camcal::data::{SamplerKind, SplitThresholds};
use camcal::eval::Averaging;
use camcal::model::{BackboneConfig, HeadKind, Stage};
use camcal::train::{CamcVariant, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    pub rho: f64,
    /// images in the largest class; 0 means the source's natural size
    pub base_per_class: usize,
    /// 0 means the source's class count
    pub num_classes: usize,
    pub image_size: usize,
    /// CIFAR training batch file
    pub path: Option<PathBuf>,
    /// CIFAR test batch file
    pub test_path: Option<PathBuf>,
    /// a directory written by `make-dataset`, used as the training set
    pub dir: Option<PathBuf>,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl DatasetSpec {
    pub fn new(source: Source) -> Self {
        DatasetSpec {
            source,
            rho: 100.0,
            base_per_class: 0,
            num_classes: 0,
            image_size: 32,
            path: None,
            test_path: None,
            dir: None,
            val_per_class: 20,
            test_per_class: 50,
        }
    }

    pub fn resolved_num_classes(&self) -> usize {
        match (self.num_classes, self.source) {
            (0, Source::Synthetic | Source::Cifar10) => 10,
            (0, Source::Cifar100) => 100,
            (n, _) => n,
        }
    }

    pub fn resolved_base(&self) -> usize {
        match (self.base_per_class, self.source) {
            (0, Source::Synthetic) => 1000,
            (0, Source::Cifar10) => 5000,
            (0, Source::Cifar100) => 500,
            (n, _) => n,
        }
    }
}

/// The per-stage part of [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub head: HeadKind,
    pub g: f32,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sampler: SamplerKind,
    pub tau: Threshold,
    pub k: usize,
    pub camc: CamcVariant,
    pub m: usize,
    pub cold_start: bool,
}

impl StageConfig {
    fn from_train(c: &TrainConfig) -> Self {
        StageConfig {
            head: c.head,
            g: c.g,
            lr_max: c.lr_max,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            epochs: c.epochs,
            sampler: c.sampler,
            tau: c.tau,
            k: c.k,
            camc: c.camc,
            m: c.m,
            cold_start: c.cold_start,
        }
    }

    pub fn stage1() -> Self {
        Self::from_train(&TrainConfig::representation())
    }

    pub fn stage2() -> Self {
        Self::from_train(&TrainConfig::classifier())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub averaging: Averaging,
    pub thresholds: SplitThresholds,
    pub groups: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            averaging: Averaging::Instance,
            thresholds: SplitThresholds::default(),
            groups: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// concurrent sweep runs; 0 = one per worker thread
    pub jobs: usize,
}

impl RunConfig {
    pub fn new(source: Source) -> Self {
        RunConfig {
            dataset: DatasetSpec::new(source),
            backbone: BackboneConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            eval: EvalOptions::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            jobs: 0,
        }
    }

    /// Parses a possibly partial document: absent fields take their
    /// defaults, unknown fields are errors, `dataset.source` is required.
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let user: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        if user.pointer("/dataset/source").is_none() {
            return Err(CliError::Config("dataset.source: required (synthetic, cifar10 or cifar100)".into()));
        }
        let mut merged = serde_json::to_value(RunConfig::new(Source::Synthetic)).expect("config serializes");
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = match stage {
            Stage::Representation => &self.stage1,
            Stage::Classifier => &self.stage2,
        };
        TrainConfig {
            stage,
            head: s.head,
            g: s.g,
            lr_max: s.lr_max,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            epochs: s.epochs,
            sampler: s.sampler,
            seed: self.seed,
            tau: s.tau,
            k: s.k,
            camc: s.camc,
            m: s.m,
            cold_start: s.cold_start,
            backbone: self.backbone.clone(),
        }
    }

    /// Every problem, one line per field.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let d = &self.dataset;
        if !(d.rho.is_finite() && d.rho >= 1.0) {
            problems.push(format!("dataset.rho: must be >= 1, got {}", d.rho));
        }
        if d.source != Source::Synthetic && d.image_size != 32 {
            problems.push(format!("dataset.image_size: CIFAR images are 32x32, got {}", d.image_size));
        }
        if d.source == Source::Synthetic && d.image_size < 16 {
            problems.push(format!("dataset.image_size: synthetic images need >= 16, got {}", d.image_size));
        }
        if d.val_per_class == 0 {
            problems.push("dataset.val_per_class: must be positive".into());
        }
        if d.test_per_class == 0 {
            problems.push("dataset.test_per_class: must be positive".into());
        }
        if self.backbone.image_size != d.image_size {
            problems.push(format!(
                "backbone.image_size: {} differs from dataset.image_size {}",
                self.backbone.image_size, d.image_size
            ));
        }
        if self.backbone.in_channels != 3 {
            problems.push(format!("backbone.in_channels: images have 3 channels, got {}", self.backbone.in_channels));
        }
        if let Err(e) = self.backbone.validate() {
            problems.push(format!("backbone: {e}"));
        } else if self.backbone.feature_size() < 2 {
            problems.push(format!(
                "backbone.pool_after: final feature map is {0}x{0}, activation maps need at least 2x2",
                self.backbone.feature_size()
            ));
        }
        if self.eval.groups == 0 {
            problems.push("eval.groups: must be positive".into());
        }
        if self.eval.thresholds.low_below > self.eval.thresholds.many_above + 1 {
            problems.push("eval.thresholds: low_below must not exceed many_above + 1".into());
        }
        for (name, stage) in [("stage1", Stage::Representation), ("stage2", Stage::Classifier)] {
            for msg in self.train_config(stage).problems() {
                if !msg.starts_with("backbone") {
                    problems.push(format!("{name}.{msg}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("\n")))
        }
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Dotted paths of every leaf field of a JSON document.
pub fn leaf_paths(value: &serde_json::Value) -> Vec<String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_source_is_required() {
        let c = RunConfig::from_json_str(r#"{"dataset":{"source":"synthetic"}}"#).unwrap();
        assert_eq!(c, RunConfig::new(Source::Synthetic));
        assert!(RunConfig::from_json_str(r#"{"dataset":{}}"#).is_err());
        assert!(RunConfig::from_json_str("{}").is_err());
        let c = RunConfig::from_json_str(r#"{"dataset":{"source":"cifar10"},"stage2":{"epochs":3}}"#).unwrap();
        assert_eq!(c.stage2.epochs, 3);
        assert_eq!(c.stage2.g, 16.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"dataset":{"source":"synthetic"},"stage1":{"lr":0.1}}"#;
        assert!(RunConfig::from_json_str(bad).is_err());
        let bad = r#"{"dataset":{"source":"synthetic","colour":true}}"#;
        assert!(RunConfig::from_json_str(bad).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::new(Source::Synthetic);
        c.dataset.rho = 0.5;
        c.stage1.momentum = 2.0;
        c.dataset.image_size = 16;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("dataset.rho"), "{msg}");
        assert!(msg.contains("stage1.momentum"), "{msg}");
        assert!(msg.contains("backbone.image_size"), "{msg}");
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::new(Source::Synthetic).validate().unwrap();
    }
}
