//! Command-line front end: dataset construction, both training stages,
//! magnitude sweeps, evaluation and heatmap export.

pub mod config;
mod datasets;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use camcal::camc::Threshold;
use camcal::data::{save_dataset_dir, SamplerKind};
use camcal::eval::{self, Averaging, CamRequest};
use camcal::model::{ncm_fit, ncm_predict, BackboneConfig, HeadKind, Stage};
use camcal::train::{self, CamcVariant, Validation};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use config::{RunConfig, Source, StageConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] camcal::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 I/O or file format, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                camcal::Error::InvalidArgument(_) | camcal::Error::Json(_) => 2,
                camcal::Error::Io { .. } | camcal::Error::Format { .. } => 3,
                camcal::Error::Numerical { .. } => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "camcal", version, about = "Long-tailed classification with activation map calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the long-tailed training set and write it as a dataset directory
    MakeDataset(Common),
    /// Stage 1: learn the representation with the configured head
    Train(Common),
    /// Stage 2: re-train the classifier (and calibration) on a frozen backbone
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on the held-out test set
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also score a nearest-class-mean classifier on the checkpoint's backbone
        #[arg(long)]
        ncm: bool,
    },
    /// Stage 1 once per magnitude g, written as one CSV row each
    SweepG {
        #[command(flatten)]
        common: Common,
        /// Comma-separated magnitudes (default 2^-5 .. 2^5)
        #[arg(long, value_delimiter = ',')]
        g_values: Option<Vec<f32>>,
    },
    /// Vanilla and calibrated heatmaps for tail-class test images
    CamDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of calibrated-class test images to export
        #[arg(long, default_value_t = 5)]
        images: usize,
        /// Also write PPM overlays blended with the image
        #[arg(long)]
        overlay: bool,
    },
}

fn parse_json_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    s.parse().map_err(|e: camcal::Error| e.to_string())
}

/// Options shared by every command. Each flag overrides the config key in
/// brackets. Stage flags apply to the stage the command trains.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Data source: synthetic, cifar10 or cifar100 [dataset.source]
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    /// Imbalance ratio max/min class count [dataset.rho]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Images in the largest class, 0 for the source default [dataset.base_per_class]
    #[arg(long)]
    pub base_per_class: Option<usize>,
    /// Number of classes, 0 for the source default [dataset.num_classes]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Image side in pixels; also sets the backbone input size [dataset.image_size]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// CIFAR training batch file [dataset.path]
    #[arg(long)]
    pub path: Option<PathBuf>,
    /// CIFAR test batch file [dataset.test_path]
    #[arg(long)]
    pub test_path: Option<PathBuf>,
    /// Dataset directory from make-dataset to train on [dataset.dir]
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    /// Validation images per class [dataset.val_per_class]
    #[arg(long)]
    pub val_per_class: Option<usize>,
    /// Test images per class [dataset.test_per_class]
    #[arg(long)]
    pub test_per_class: Option<usize>,

    /// Image channels [backbone.in_channels]
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Backbone input side [backbone.image_size]
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Comma-separated conv stage widths [backbone.channels]
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Comma-separated 2x2 pooling flags per stage [backbone.pool_after]
    #[arg(long, value_delimiter = ',')]
    pub pool_after: Option<Vec<bool>>,

    /// Head kind: linear, weight_norm, weight_norm_shared_g, norm_fc [stage1.head, stage2.head]
    #[arg(long, value_parser = parse_json_enum::<HeadKind>)]
    pub head: Option<HeadKind>,
    /// Magnitude g of normalized heads [stage1.g, stage2.g]
    #[arg(long)]
    pub g: Option<f32>,
    /// Peak learning rate of the cosine schedule [stage1.lr_max, stage2.lr_max]
    #[arg(long)]
    pub lr_max: Option<f64>,
    /// SGD momentum [stage1.momentum, stage2.momentum]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay on backbone and head weights [stage1.weight_decay, stage2.weight_decay]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Batch size [stage1.batch_size, stage2.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training epochs [stage1.epochs, stage2.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sampler: instance_balanced or class_balanced [stage1.sampler, stage2.sampler]
    #[arg(long, value_parser = parse_json_enum::<SamplerKind>)]
    pub sampler: Option<SamplerKind>,
    /// Calibrate classes with fewer training images than this; "inf" for all [stage1.tau, stage2.tau]
    #[arg(long, value_parser = parse_threshold)]
    pub tau: Option<Threshold>,
    /// Prototypes per calibrated class [stage1.k, stage2.k]
    #[arg(long)]
    pub k: Option<usize>,
    /// Calibration: none, camc or camcpp; bare --camc means camc [stage1.camc, stage2.camc]
    #[arg(long, num_args = 0..=1, default_missing_value = "camc", value_parser = parse_json_enum::<CamcVariant>)]
    pub camc: Option<CamcVariant>,
    /// Crop grid side for camcpp [stage1.m, stage2.m]
    #[arg(long)]
    pub m: Option<usize>,
    /// Fresh stage-2 head instead of the renormalized stage-1 weights [stage1.cold_start, stage2.cold_start]
    #[arg(long)]
    pub cold_start: bool,

    /// Split accuracy pooling: instance or class [eval.averaging]
    #[arg(long, value_parser = parse_json_enum::<Averaging>)]
    pub averaging: Option<Averaging>,
    /// Classes with more training images are many-shot [eval.thresholds.many_above]
    #[arg(long)]
    pub many_above: Option<usize>,
    /// Classes with fewer training images are low-shot [eval.thresholds.low_below]
    #[arg(long)]
    pub low_below: Option<usize>,
    /// Class groups for the gain report [eval.groups]
    #[arg(long)]
    pub groups: Option<usize>,

    /// Output directory [output_dir]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data, initialization and sampling [seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent sweep runs, 0 for one per worker thread [jobs]
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    /// Loads the config file (if any) and applies the flags. `stage` picks
    /// which stage section the stage flags land in.
    pub fn resolve(&self, stage: Option<Stage>) -> CliResult<RunConfig> {
        let mut cfg = match (&self.config, self.source) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(source)) => RunConfig::new(source),
            (None, None) => {
                return Err(CliError::Config(
                    "dataset.source: required; pass --source or a --config file".into(),
                ))
            }
        };
        let d = &mut cfg.dataset;
        set(&mut d.source, self.source);
        set(&mut d.rho, self.rho);
        set(&mut d.base_per_class, self.base_per_class);
        set(&mut d.num_classes, self.num_classes);
        if let Some(size) = self.image_size {
            d.image_size = size;
            cfg.backbone.image_size = size;
        }
        if self.path.is_some() {
            d.path = self.path.clone();
        }
        if self.test_path.is_some() {
            d.test_path = self.test_path.clone();
        }
        if self.dataset_dir.is_some() {
            d.dir = self.dataset_dir.clone();
        }
        set(&mut d.val_per_class, self.val_per_class);
        set(&mut d.test_per_class, self.test_per_class);

        let b: &mut BackboneConfig = &mut cfg.backbone;
        set(&mut b.in_channels, self.in_channels);
        set(&mut b.image_size, self.input_size);
        set(&mut b.channels, self.channels.clone());
        set(&mut b.pool_after, self.pool_after.clone());

        if let Some(stage) = stage {
            let s: &mut StageConfig = match stage {
                Stage::Representation => &mut cfg.stage1,
                Stage::Classifier => &mut cfg.stage2,
            };
            set(&mut s.head, self.head);
            set(&mut s.g, self.g);
            set(&mut s.lr_max, self.lr_max);
            set(&mut s.momentum, self.momentum);
            set(&mut s.weight_decay, self.weight_decay);
            set(&mut s.batch_size, self.batch_size);
            set(&mut s.epochs, self.epochs);
            set(&mut s.sampler, self.sampler);
            set(&mut s.tau, self.tau);
            set(&mut s.k, self.k);
            set(&mut s.camc, self.camc);
            set(&mut s.m, self.m);
            if self.cold_start {
                s.cold_start = true;
            }
        }

        set(&mut cfg.eval.averaging, self.averaging);
        set(&mut cfg.eval.thresholds.many_above, self.many_above);
        set(&mut cfg.eval.thresholds.low_below, self.low_below);
        set(&mut cfg.eval.groups, self.groups);
        set(&mut cfg.output_dir, self.out.clone());
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.jobs, self.jobs);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(camcal::Error::from)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeDataset(common) => cmd_make_dataset(&common.resolve(None)?),
        Command::Train(common) => cmd_train(&common.resolve(Some(Stage::Representation))?),
        Command::Retrain { common, checkpoint } => cmd_retrain(&common.resolve(Some(Stage::Classifier))?, &checkpoint),
        Command::Eval { common, checkpoint, ncm } => cmd_eval(&common.resolve(None)?, &checkpoint, ncm),
        Command::SweepG { common, g_values } => cmd_sweep_g(&common.resolve(Some(Stage::Representation))?, g_values),
        Command::CamDump {
            common,
            checkpoint,
            images,
            overlay,
        } => cmd_cam_dump(&common.resolve(None)?, &checkpoint, images, overlay),
    }
}

pub fn cmd_make_dataset(cfg: &RunConfig) -> CliResult<()> {
    let ds = datasets::train_set(cfg)?;
    let dir = cfg.output_dir.join("dataset");
    let manifest = save_dataset_dir(&ds, &dir)?;
    let mut out = String::new();
    for (c, n) in manifest.class_counts.iter().enumerate() {
        let name = manifest.class_names.get(c).map(String::as_str).unwrap_or("");
        writeln!(out, "class {c:>3} {name:<20} {n}").unwrap();
    }
    print!("{out}");
    println!("wrote {} images to {}", manifest.num_images, dir.display());
    Ok(())
}

fn validation<'a>(val: &'a camcal::LongTailedDataset, splits: &'a [camcal::Split]) -> Validation<'a> {
    Validation {
        dataset: val,
        class_splits: splits,
    }
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let train_set = datasets::train_set(cfg)?;
    let (val, _) = datasets::holdout_sets(cfg, train_set.num_classes())?;
    let splits = cfg.eval.thresholds.assign(train_set.class_counts());
    let tc = cfg.train_config(Stage::Representation);
    let out = train::train_stage1(&train_set, Some(validation(&val, &splits)), &tc)?;
    create_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("stage1.ckpt");
    train::write_checkpoint(&ckpt, &out.checkpoint)?;
    train::write_metrics_jsonl(&out.history, &cfg.output_dir.join("stage1_metrics.jsonl"))?;
    report_history(&out.history);
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn report_history(history: &[train::EpochMetrics]) {
    for m in history {
        let (all, low) = m.val.as_ref().map(|v| (Some(v.all), v.low)).unwrap_or((None, None));
        println!(
            "epoch {:>3} lr {:.5} loss {:.4} val all {} low {}",
            m.epoch,
            m.lr,
            m.loss,
            fmt_opt(all),
            fmt_opt(low)
        );
    }
}

pub fn cmd_retrain(cfg: &RunConfig, checkpoint: &Path) -> CliResult<()> {
    let stage1 = train::read_checkpoint(checkpoint)?;
    let train_set = datasets::train_set(cfg)?;
    let (val, _) = datasets::holdout_sets(cfg, train_set.num_classes())?;
    let splits = cfg.eval.thresholds.assign(train_set.class_counts());
    let mut tc = cfg.train_config(Stage::Classifier);
    // the frozen backbone brings its own layout
    tc.backbone = stage1.config.backbone.clone();
    let out = train::train_stage2(&stage1, &train_set, Some(validation(&val, &splits)), &tc)?;
    create_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("stage2.ckpt");
    train::write_checkpoint(&ckpt, &out.checkpoint)?;
    train::write_metrics_jsonl(&out.history, &cfg.output_dir.join("stage2_metrics.jsonl"))?;
    report_history(&out.history);
    println!("wrote {}", ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    seed: u64,
    checkpoint_stage: Stage,
    report: eval::SplitReport,
    weight_magnitudes: eval::MagnitudeReport,
    ncm: Option<eval::SplitReport>,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, ncm: bool) -> CliResult<()> {
    let model = train::read_checkpoint(checkpoint)?;
    let counts = datasets::train_counts(cfg)?;
    let (_, test) = datasets::holdout_sets(cfg, counts.len())?;
    let report = eval::evaluate(&model, &test, &counts, cfg.eval.thresholds, cfg.eval.averaging)?;
    let ncm_report = if ncm {
        let train_set = datasets::train_set(cfg)?;
        let classifier = ncm_fit(&model.class_embeddings(&train_set)?)?;
        let images: Vec<&camcal::Tensor> = test.images().iter().collect();
        let features = model.features(&images)?;
        let preds: Vec<usize> = features.embeddings.iter().map(|e| ncm_predict(e, &classifier)).collect();
        let splits = cfg.eval.thresholds.assign(&counts);
        Some(eval::evaluate_predictions(test.labels(), &preds, &splits, cfg.eval.averaging)?)
    } else {
        None
    };
    let output = EvalOutput {
        seed: cfg.seed,
        checkpoint_stage: model.stage,
        weight_magnitudes: eval::weight_magnitude_report(&model.head, &counts)?,
        report,
        ncm: ncm_report,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval_report.json"), &output)?;
    eval::export_confusion_csv(&output.report, &cfg.output_dir.join("confusion.csv"))?;
    let r = &output.report;
    println!(
        "top1 all {:.2} many {} medium {} low {}",
        r.top1_all,
        fmt_opt(r.top1_many),
        fmt_opt(r.top1_medium),
        fmt_opt(r.top1_low)
    );
    if let Some(n) = &output.ncm {
        println!("ncm  all {:.2} low {}", n.top1_all, fmt_opt(n.top1_low));
    }
    println!("magnitude/count spearman {:.3}", output.weight_magnitudes.spearman);
    Ok(())
}

pub fn cmd_sweep_g(cfg: &RunConfig, g_values: Option<Vec<f32>>) -> CliResult<()> {
    let g_values = g_values.unwrap_or_else(train::default_g_grid);
    let train_set = datasets::train_set(cfg)?;
    let (val, test) = datasets::holdout_sets(cfg, train_set.num_classes())?;
    let splits = cfg.eval.thresholds.assign(train_set.class_counts());
    let tc = cfg.train_config(Stage::Representation);
    if tc.head == HeadKind::Linear {
        return Err(CliError::Config("stage1.head: a magnitude sweep needs a normalized head".into()));
    }
    let threads = rayon::current_num_threads();
    let jobs = if cfg.jobs == 0 { threads } else { cfg.jobs.min(threads) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("jobs: {e}")))?;
    let runs = pool.install(|| train::sweep_g(&train_set, Some(validation(&val, &splits)), &g_values, &tc))?;

    create_dir(&cfg.output_dir)?;
    let mut csv = String::from("g,status,final_loss,val_all,val_many,val_medium,val_low,test_all,test_many,test_medium,test_low\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (i, run) in runs.iter().enumerate() {
        match &run.outcome {
            Ok(outcome) => {
                let report = eval::evaluate(
                    &outcome.checkpoint,
                    &test,
                    train_set.class_counts(),
                    cfg.eval.thresholds,
                    cfg.eval.averaging,
                )?;
                let last = outcome.history.last();
                let val = last.and_then(|m| m.val.clone());
                writeln!(
                    csv,
                    "{},ok,{},{},{},{},{},{},{},{},{}",
                    run.g,
                    cell(last.map(|m| m.loss)),
                    cell(val.as_ref().map(|v| v.all)),
                    cell(val.as_ref().and_then(|v| v.many)),
                    cell(val.as_ref().and_then(|v| v.medium)),
                    cell(val.as_ref().and_then(|v| v.low)),
                    report.top1_all,
                    cell(report.top1_many),
                    cell(report.top1_medium),
                    cell(report.top1_low),
                )
                .unwrap();
                train::write_metrics_jsonl(&outcome.history, &cfg.output_dir.join(format!("sweep_{i:02}.jsonl")))?;
            }
            Err(e) => {
                let reason = e.to_string().replace([',', '\n'], " ");
                writeln!(csv, "{},failed: {reason},,,,,,,,,", run.g).unwrap();
                eprintln!("g = {}: {e}", run.g);
            }
        }
    }
    write_file(&cfg.output_dir.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    if let Some(best) = train::select_best(&runs) {
        println!("best g on validation: {}", runs[best].g);
    }
    Ok(())
}

pub fn cmd_cam_dump(cfg: &RunConfig, checkpoint: &Path, images: usize, overlay: bool) -> CliResult<()> {
    let model = train::read_checkpoint(checkpoint)?;
    let block = model
        .camc
        .as_ref()
        .filter(|b| !b.banks.is_empty())
        .ok_or_else(|| CliError::Config("checkpoint calibrates no class; retrain with --camc and a positive --tau".into()))?;
    let counts = datasets::train_counts(cfg)?;
    let (_, test) = datasets::holdout_sets(cfg, counts.len())?;
    let requests: Vec<CamRequest<'_>> = (0..test.len())
        .filter(|&i| block.is_tail(test.label(i)))
        .take(images)
        .map(|i| CamRequest {
            image_id: format!("{i:05}"),
            image: test.image(i),
            class: test.label(i),
        })
        .collect();
    let dir = cfg.output_dir.join("cams");
    let written = eval::export_cam_heatmaps(&model, &requests, &dir, overlay)?;
    println!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}
