//! Training, validation and test sets as described by a [`RunConfig`].

use std::path::PathBuf;

use camcal::data::{
    load_cifar_binary, load_dataset_dir, make_longtailed, synth_shapes, truncate_longtailed, CifarRecord, CifarVariant,
    DatasetMeta,
};
use camcal::{LongTailedDataset, Tensor};

use crate::config::{RunConfig, Source};
use crate::{CliError, CliResult};

const CIFAR10_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

// held-out draws use their own seeds so they never repeat training images
const VAL_SEED_OFFSET: u64 = 1;
const TEST_SEED_OFFSET: u64 = 2;

fn variant(source: Source) -> Option<CifarVariant> {
    match source {
        Source::Synthetic => None,
        Source::Cifar10 => Some(CifarVariant::Cifar10),
        Source::Cifar100 => Some(CifarVariant::Cifar100),
    }
}

fn required(path: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
    path.clone()
        .ok_or_else(|| CliError::Config(format!("{key}: required for CIFAR sources")))
}

fn check_num_classes(cfg: &RunConfig, variant: CifarVariant) -> CliResult<usize> {
    let n = cfg.dataset.resolved_num_classes();
    if n > variant.num_classes() {
        return Err(CliError::Config(format!(
            "dataset.num_classes: {n} exceeds the {} classes in the files",
            variant.num_classes()
        )));
    }
    Ok(n)
}

fn class_names(source: Source, n: usize) -> Vec<String> {
    match source {
        Source::Cifar10 => CIFAR10_NAMES[..n].iter().map(|s| s.to_string()).collect(),
        _ => (0..n).map(|c| format!("class{c}")).collect(),
    }
}

/// The long-tailed per-class counts, without building any images.
pub fn train_counts(cfg: &RunConfig) -> CliResult<Vec<usize>> {
    if let Some(dir) = &cfg.dataset.dir {
        return Ok(load_dataset_dir(dir)?.class_counts().to_vec());
    }
    let d = &cfg.dataset;
    Ok(make_longtailed(d.resolved_base(), d.resolved_num_classes(), d.rho)?)
}

pub fn train_set(cfg: &RunConfig) -> CliResult<LongTailedDataset> {
    let d = &cfg.dataset;
    let mut ds = if let Some(dir) = &d.dir {
        load_dataset_dir(dir)?
    } else {
        let counts = train_counts(cfg)?;
        let n = counts.len();
        match variant(d.source) {
            None => synth_shapes(n, &counts, d.image_size, cfg.seed)?,
            Some(v) => {
                let n = check_num_classes(cfg, v)?;
                let path = required(&d.path, "dataset.path")?;
                let records = load_cifar_binary(&path, v)?;
                let mut ds = truncate_longtailed(&records, n, &counts, cfg.eval.thresholds)?;
                ds.meta = DatasetMeta {
                    source: format!("{:?}", d.source).to_lowercase(),
                    seed: cfg.seed,
                    rho: None,
                    class_names: class_names(d.source, n),
                };
                ds
            }
        }
    };
    if d.dir.is_none() {
        ds.meta.rho = Some(d.rho);
    }
    ds.set_thresholds(cfg.eval.thresholds);
    Ok(ds)
}

/// Balanced validation and test sets.
pub fn holdout_sets(cfg: &RunConfig, num_classes: usize) -> CliResult<(LongTailedDataset, LongTailedDataset)> {
    let d = &cfg.dataset;
    match variant(d.source) {
        None => {
            let val = synth_shapes(
                num_classes,
                &vec![d.val_per_class; num_classes],
                d.image_size,
                cfg.seed.wrapping_add(VAL_SEED_OFFSET),
            )?;
            let test = synth_shapes(
                num_classes,
                &vec![d.test_per_class; num_classes],
                d.image_size,
                cfg.seed.wrapping_add(TEST_SEED_OFFSET),
            )?;
            Ok((val, test))
        }
        Some(v) => {
            let path = required(&d.test_path, "dataset.test_path")?;
            let records = load_cifar_binary(&path, v)?;
            split_holdout(&records, num_classes, d.val_per_class, d.test_per_class, cfg)
        }
    }
}

/// The first `val` images of each class go to validation, the next `test`
/// to the test set.
fn split_holdout(
    records: &[CifarRecord],
    num_classes: usize,
    val: usize,
    test: usize,
    cfg: &RunConfig,
) -> CliResult<(LongTailedDataset, LongTailedDataset)> {
    let mut seen = vec![0usize; num_classes];
    let (mut vi, mut vl, mut ti, mut tl): (Vec<Tensor>, Vec<usize>, Vec<Tensor>, Vec<usize>) = Default::default();
    for r in records.iter().filter(|r| r.label < num_classes) {
        let k = seen[r.label];
        if k < val {
            vi.push(r.image.clone());
            vl.push(r.label);
        } else if k < val + test {
            ti.push(r.image.clone());
            tl.push(r.label);
        }
        seen[r.label] += 1;
    }
    if let Some(c) = (0..num_classes).find(|&c| seen[c] < val + test) {
        return Err(CliError::Config(format!(
            "dataset.test_per_class: class {c} has {} test-file images, {} needed for validation plus test",
            seen[c],
            val + test
        )));
    }
    let val = LongTailedDataset::new(vi, vl, num_classes, cfg.eval.thresholds)?;
    let test = LongTailedDataset::new(ti, tl, num_classes, cfg.eval.thresholds)?;
    Ok((val, test))
}
