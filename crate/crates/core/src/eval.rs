//! Split accuracies, confusion matrices, weight-magnitude statistics,
//! per-group gains and the CSV / heatmap exporters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camc;
use crate::data::{LongTailedDataset, Split, SplitThresholds};
use crate::error::{Error, Result};
use crate::model::ClassifierHead;
use crate::tensor::{self, Tensor};
use crate::train::{CamcVariant, Checkpoint};

/// How accuracies inside one split are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// correct / total over the split's test items
    #[default]
    Instance,
    /// mean of the split's per-class accuracies
    Class,
}

/// Top-1 accuracies in percent. A split with no test items is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub top1_many: Option<f64>,
    pub top1_medium: Option<f64>,
    pub top1_low: Option<f64>,
    /// always instance-weighted
    pub top1_all: f64,
    pub per_class_acc: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub class_splits: Vec<Split>,
    pub averaging: Averaging,
}

impl SplitReport {
    /// Derives every accuracy from the confusion matrix alone.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, class_splits: Vec<Split>, averaging: Averaging) -> Result<Self> {
        let n = confusion.len();
        if class_splits.len() != n || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be N x N with one split tag per class"));
        }
        let totals: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let correct: Vec<u64> = (0..n).map(|c| confusion[c][c]).collect();
        let all_total: u64 = totals.iter().sum();
        if all_total == 0 {
            return Err(Error::invalid("cannot evaluate on an empty test set"));
        }
        let pct = |num: u64, den: u64| 100.0 * num as f64 / den as f64;
        let per_class_acc: Vec<Option<f64>> = (0..n)
            .map(|c| (totals[c] > 0).then(|| pct(correct[c], totals[c])))
            .collect();
        let split_acc = |split: Split| -> Option<f64> {
            let members: Vec<usize> = (0..n).filter(|&c| class_splits[c] == split && totals[c] > 0).collect();
            if members.is_empty() {
                return None;
            }
            match averaging {
                Averaging::Instance => {
                    let num: u64 = members.iter().map(|&c| correct[c]).sum();
                    let den: u64 = members.iter().map(|&c| totals[c]).sum();
                    Some(pct(num, den))
                }
                Averaging::Class => {
                    let sum: f64 = members.iter().map(|&c| per_class_acc[c].unwrap_or(0.0)).sum();
                    Some(sum / members.len() as f64)
                }
            }
        };
        Ok(SplitReport {
            top1_many: split_acc(Split::Many),
            top1_medium: split_acc(Split::Medium),
            top1_low: split_acc(Split::Low),
            top1_all: pct(correct.iter().sum(), all_total),
            per_class_acc,
            confusion,
            class_splits,
            averaging,
        })
    }

    pub fn split(&self, split: Split) -> Option<f64> {
        match split {
            Split::Many => self.top1_many,
            Split::Medium => self.top1_medium,
            Split::Low => self.top1_low,
        }
    }

    /// Fraction of the test items of `from`-split classes predicted as some
    /// class of the `to` split.
    pub fn confusion_mass(&self, from: Split, to: Split) -> Option<f64> {
        let n = self.confusion.len();
        let mut total = 0u64;
        let mut hit = 0u64;
        for t in (0..n).filter(|&c| self.class_splits[c] == from) {
            total += self.confusion[t].iter().sum::<u64>();
            hit += (0..n)
                .filter(|&p| self.class_splits[p] == to)
                .map(|p| self.confusion[t][p])
                .sum::<u64>();
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Elementwise sum of confusion matrices from disjoint test shards.
pub fn merge_confusion(a: &[Vec<u64>], b: &[Vec<u64>]) -> Result<Vec<Vec<u64>>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::invalid("confusion matrices differ in shape"));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect())
}

pub fn confusion_matrix(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return Err(Error::invalid("labels and predictions differ in length"));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!("class index out of range [0, {num_classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn evaluate_predictions(
    labels: &[usize],
    predictions: &[usize],
    class_splits: &[Split],
    averaging: Averaging,
) -> Result<SplitReport> {
    let m = confusion_matrix(labels, predictions, class_splits.len())?;
    SplitReport::from_confusion(m, class_splits.to_vec(), averaging)
}

/// Evaluates a model on `test`, tagging classes by their training counts.
pub fn evaluate(
    model: &Checkpoint,
    test: &LongTailedDataset,
    train_counts: &[usize],
    thresholds: SplitThresholds,
    averaging: Averaging,
) -> Result<SplitReport> {
    if train_counts.len() != test.num_classes() || model.head.num_classes() != test.num_classes() {
        return Err(Error::invalid("model, test set and training counts disagree on the class count"));
    }
    let predictions = model.predict(test)?;
    evaluate_predictions(test.labels(), &predictions, &thresholds.assign(train_counts), averaging)
}

// ---------------------------------------------------------------------------
// Weight magnitudes

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("spearman needs equal-length inputs"));
    }
    if x.len() < 2 {
        return Ok(0.0);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub class: usize,
    pub count: usize,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    /// sorted by training count, largest first
    pub rows: Vec<MagnitudeRow>,
    pub spearman: f64,
}

pub fn weight_magnitude_report(head: &ClassifierHead, class_counts: &[usize]) -> Result<MagnitudeReport> {
    let n = head.num_classes();
    if class_counts.len() != n {
        return Err(Error::invalid(format!("{} counts for a {n}-class head", class_counts.len())));
    }
    let norms: Vec<f64> = (0..n)
        .map(|c| head.weight().row(c).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    let counts: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    let mut rows: Vec<MagnitudeRow> = (0..n)
        .map(|c| MagnitudeRow {
            class: c,
            count: class_counts[c],
            norm: norms[c],
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.class.cmp(&b.class)));
    Ok(MagnitudeReport {
        rows,
        spearman: spearman(&norms, &counts)?,
    })
}

// ---------------------------------------------------------------------------
// Group gains

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGain {
    pub classes: Vec<usize>,
    /// mean per-class accuracy of `b` minus that of `a`, in points
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGainReport {
    pub groups: Vec<GroupGain>,
}

/// Sorts classes by training count (largest first) into `groups` contiguous
/// groups whose sizes differ by at most one. Classes without test items are
/// left out of the means.
pub fn group_gains(a: &SplitReport, b: &SplitReport, class_counts: &[usize], groups: usize) -> Result<GroupGainReport> {
    let n = class_counts.len();
    if a.per_class_acc.len() != n || b.per_class_acc.len() != n {
        return Err(Error::invalid("reports and class counts cover different class sets"));
    }
    if groups == 0 || groups > n {
        return Err(Error::invalid(format!("cannot split {n} classes into {groups} groups")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| class_counts[y].cmp(&class_counts[x]).then(x.cmp(&y)));
    let (base, extra) = (n / groups, n % groups);
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        let classes = order[start..start + size].to_vec();
        start += size;
        let diffs: Vec<f64> = classes
            .iter()
            .filter_map(|&c| Some(b.per_class_acc[c]? - a.per_class_acc[c]?))
            .collect();
        let gain = (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);
        out.push(GroupGain { classes, gain });
    }
    Ok(GroupGainReport { groups: out })
}

// ---------------------------------------------------------------------------
// Exports

/// Header `class,0,1,...`, then one LF-terminated row per true class.
pub fn confusion_csv(report: &SplitReport) -> String {
    let n = report.confusion.len();
    let mut s = String::from("class");
    for c in 0..n {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        write!(s, "{t}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn export_confusion_csv(report: &SplitReport, path: &Path) -> Result<()> {
    fs::write(path, confusion_csv(report)).map_err(|e| Error::io(path, e))
}

/// Min-max normalization to bytes; a constant map becomes all zeros.
pub fn normalize_to_u8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary grayscale PGM of an `[H,W]` map.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.ndim() != 2 {
        return Err(Error::invalid(format!("heatmap must be [H,W], got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_to_u8(map.data()));
    Ok(out)
}

/// Fixed blue-cyan-yellow-red ramp.
pub fn color_ramp(level: u8) -> [u8; 3] {
    let t = level as f64 / 255.0;
    let channel = |center: f64| (1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0);
    let to_u8 = |x: f64| (255.0 * x).round() as u8;
    [to_u8(channel(3.0)), to_u8(channel(2.0)), to_u8(channel(1.0))]
}

/// Binary PPM blending the colored heatmap with a `[3,H,W]` image at 0.5.
pub fn encode_overlay_ppm(map: &Tensor, image: &Tensor) -> Result<Vec<u8>> {
    if map.ndim() != 2 || image.ndim() != 3 || image.shape()[0] != 3 || image.shape()[1..] != *map.shape() {
        return Err(Error::invalid(format!(
            "overlay needs an [H,W] map and a [3,H,W] image, got {:?} and {:?}",
            map.shape(),
            image.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let levels = normalize_to_u8(map.data());
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (p, &level) in levels.iter().enumerate() {
        let color = color_ramp(level);
        for (ch, &c) in color.iter().enumerate() {
            let px = (image.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0) as f64;
            out.push((0.5 * c as f64 + 0.5 * px).round() as u8);
        }
    }
    Ok(out)
}

/// One requested heatmap pair.
#[derive(Clone, Debug)]
pub struct CamRequest<'a> {
    pub image_id: String,
    pub image: &'a Tensor,
    pub class: usize,
}

fn upsample(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let up = tensor::resize_bilinear(&map.clone().reshape(&[1, mh, mw])?, h, w)?;
    up.reshape(&[h, w])
}

/// Writes `cam_<id>_<class>_vanilla.pgm` and `cam_<id>_<class>_camc.pgm`
/// for every request, plus `.ppm` overlays when `overlay` is set. Classes
/// must be calibrated by the model.
pub fn export_cam_heatmaps(model: &Checkpoint, requests: &[CamRequest<'_>], dir: &Path, overlay: bool) -> Result<Vec<PathBuf>> {
    let block = model
        .camc
        .as_ref()
        .ok_or_else(|| Error::invalid("model carries no calibration block"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for req in requests {
        if !block.is_tail(req.class) {
            return Err(Error::invalid(format!("class {} is not calibrated by this model", req.class)));
        }
        let (h, w) = (req.image.shape()[1], req.image.shape()[2]);
        let (fmap, _) = model.backbone.backbone_forward(req.image)?;
        let w_c = Tensor::new(vec![model.head.dim()], model.head.weight().row(req.class).to_vec())?;
        let vanilla = camc::compute_cam_weighted_sum(&fmap, req.class, &w_c)?;
        let calib_map = match model.config.camc {
            CamcVariant::Camcpp => camc::camcpp_feature_grid(req.image, &model.backbone, model.config.m)?,
            _ => fmap,
        };
        let calibrated = camc::calibrated_cam(&calib_map, &w_c, block, req.class)?;
        for (tag, cam) in [("vanilla", vanilla), ("camc", calibrated)] {
            let map = upsample(&cam.values, h, w)?;
            let stem = format!("cam_{}_{}_{}", req.image_id, req.class, tag);
            let pgm = dir.join(format!("{stem}.pgm"));
            fs::write(&pgm, encode_pgm(&map)?).map_err(|e| Error::io(&pgm, e))?;
            written.push(pgm);
            if overlay {
                let ppm = dir.join(format!("{stem}.ppm"));
                fs::write(&ppm, encode_overlay_ppm(&map, req.image)?).map_err(|e| Error::io(&ppm, e))?;
                written.push(ppm);
            }
        }
    }
    Ok(written)
}
