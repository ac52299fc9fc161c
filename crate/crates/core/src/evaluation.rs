//! Confusion matrices, the IoU family and pixel-pooled precision-recall curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLegend, SegmentationMask, IGNORE};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::{Scalar, Tensor};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes)
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one frame; ground-truth pixels equal to [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        pred.ensure_same_dims(gt, "confusion (prediction vs ground truth)")?;
        let k = self.num_classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Validation(format!(
                    "label pair (gt {g}, pred {p}) outside a {k}-class confusion matrix"
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                "confusion merge",
                &[self.num_classes],
                &[other.num_classes],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let denom = tp + self.false_positives(c) + self.false_negatives(c);
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::AllClassesAbsent);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// IoU averaged with the training class frequencies as weights,
    /// renormalized over the defined classes.
    pub fn weighted_miou(&self, train_freqs: &[f64]) -> Result<f64> {
        if train_freqs.len() != self.num_classes {
            return Err(Error::shape(
                "weighted_miou frequencies",
                &[train_freqs.len()],
                &[self.num_classes],
            ));
        }
        let (mut num, mut den) = (0.0, 0.0);
        let mut any = false;
        for (iou, &f) in self.iou().into_iter().zip(train_freqs) {
            if let Some(v) = iou {
                any = true;
                num += f * v;
                den += f;
            }
        }
        if !any {
            return Err(Error::AllClassesAbsent);
        }
        if den <= 0.0 {
            return Err(Error::Validation(
                "training frequencies of all defined classes are zero".into(),
            ));
        }
        Ok(num / den)
    }
}

pub fn confusion(pred: &SegmentationMask, gt: &SegmentationMask, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// `0.00, 0.01, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: u8,
    /// Ordered by descending threshold.
    pub points: Vec<PrPoint>,
    /// Set when the class never occurs in the ground truth; recall is then
    /// reported as 0.
    pub absent_in_gt: bool,
}

impl PrCurve {
    pub fn recall_is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].recall >= w[0].recall)
    }
}

/// Pixel-pooled score histograms for precision-recall curves.
///
/// Each pixel is binned by how many thresholds its score reaches, so any
/// number of frames folds into `O(K * thresholds)` counters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrAccumulator {
    thresholds: Vec<f64>,
    /// `[class][bin]`: ground-truth positives / negatives reaching exactly
    /// `bin` thresholds (ascending order).
    positives: Vec<Vec<u64>>,
    negatives: Vec<Vec<u64>>,
}

impl PrAccumulator {
    pub fn new(num_classes: usize, thresholds: &[f64]) -> Result<Self> {
        if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation("thresholds must be finite and non-empty".into()));
        }
        let mut sorted = thresholds.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let bins = sorted.len() + 1;
        Ok(Self {
            thresholds: sorted,
            positives: vec![vec![0; bins]; num_classes],
            negatives: vec![vec![0; bins]; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.positives.len()
    }

    /// Adds the scores of one class for one frame (`scores` in row-major
    /// pixel order, same length as `gt`).
    pub fn add_class_scores<S: Scalar>(&mut self, class: u8, scores: &[S], gt: &[u8]) -> Result<()> {
        if scores.len() != gt.len() {
            return Err(Error::shape("pr scores vs ground truth", &[scores.len()], &[gt.len()]));
        }
        let c = class as usize;
        if c >= self.num_classes() {
            return Err(Error::Validation(format!("class {class} out of range")));
        }
        for (&s, &g) in scores.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let s = s.as_f64();
            let bin = self.thresholds.partition_point(|&t| t <= s);
            if g == class {
                self.positives[c][bin] += 1;
            } else {
                self.negatives[c][bin] += 1;
            }
        }
        Ok(())
    }

    /// Adds a `1 x K x H x W` (or `K x H x W` item) probability map.
    pub fn add<S: Scalar>(&mut self, probs: &Tensor<S>, gt: &SegmentationMask) -> Result<()> {
        let [b, k, h, w] = probs.shape();
        if b != 1 || k != self.num_classes() || (w, h) != gt.dims() {
            return Err(Error::shape(
                "pr probabilities vs ground truth",
                &probs.shape(),
                &[1, self.num_classes(), gt.height(), gt.width()],
            ));
        }
        for c in 0..k {
            self.add_class_scores(c as u8, probs.plane(0, c), gt.labels())?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.thresholds != self.thresholds || other.num_classes() != self.num_classes() {
            return Err(Error::Validation("cannot merge differently configured PR accumulators".into()));
        }
        for (a, b) in self
            .positives
            .iter_mut()
            .chain(self.negatives.iter_mut())
            .zip(other.positives.iter().chain(&other.negatives))
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn curve(&self, class: u8) -> PrCurve {
        let c = class as usize;
        let pos = &self.positives[c];
        let neg = &self.negatives[c];
        let total_pos: u64 = pos.iter().sum();
        let n = self.thresholds.len();
        // Pixels reaching threshold j are those in bins j+1..=n.
        let mut points = Vec::with_capacity(n);
        let (mut tp, mut fp) = (0u64, 0u64);
        for j in (0..n).rev() {
            tp += pos[j + 1];
            fp += neg[j + 1];
            let precision = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = if total_pos == 0 {
                0.0
            } else {
                tp as f64 / total_pos as f64
            };
            points.push(PrPoint {
                threshold: self.thresholds[j],
                precision,
                recall,
            });
        }
        PrCurve {
            class_id: class,
            points,
            absent_in_gt: total_pos == 0,
        }
    }

    pub fn curves(&self) -> Vec<PrCurve> {
        (0..self.num_classes()).map(|c| self.curve(c as u8)).collect()
    }
}

/// One class's curve over `(scores, gt)` frames of per-pixel class scores.
pub fn pr_curve<'a, S: Scalar + 'a>(
    frames: impl IntoIterator<Item = (&'a [S], &'a [u8])>,
    class_id: u8,
    thresholds: &[f64],
) -> Result<PrCurve> {
    let mut acc = PrAccumulator::new(class_id as usize + 1, thresholds)?;
    for (scores, gt) in frames {
        acc.add_class_scores(class_id, scores, gt)?;
    }
    Ok(acc.curve(class_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub miou: f64,
    pub weighted_miou: Option<f64>,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub pixels: u64,
}

impl EvaluationSummary {
    pub fn new(cm: &ConfusionMatrix, legend: &ClassLegend, train_freqs: Option<&[f64]>) -> Result<Self> {
        let ious = cm.iou();
        Ok(Self {
            miou: cm.miou()?,
            weighted_miou: train_freqs.map(|f| cm.weighted_miou(f)).transpose()?,
            per_class_iou: legend
                .names()
                .into_iter()
                .zip(ious)
                .map(|(n, v)| (n.to_string(), v))
                .collect(),
            confusion: cm.rows(),
            pixels: cm.total(),
        })
    }
}

/// `class,iou` rows; absent classes get an empty IoU cell.
pub fn iou_csv(cm: &ConfusionMatrix, legend: &ClassLegend) -> String {
    let mut out = String::from("class,iou\n");
    for (name, iou) in legend.names().into_iter().zip(cm.iou()) {
        match iou {
            Some(v) => writeln!(out, "{name},{v}").unwrap(),
            None => writeln!(out, "{name},").unwrap(),
        }
    }
    out
}

pub fn pr_csv(curves: &[PrCurve], legend: &ClassLegend) -> String {
    let mut out = String::from("class,threshold,precision,recall\n");
    for c in curves {
        let name = legend.name(c.class_id).unwrap_or("?");
        for p in &c.points {
            writeln!(out, "{name},{},{},{}", p.threshold, p.precision, p.recall).unwrap();
        }
    }
    out
}

/// Writes `iou.csv`, `summary.json` and (when given) `pr.csv` into `dir`.
pub fn write_reports(
    dir: &Path,
    cm: &ConfusionMatrix,
    legend: &ClassLegend,
    train_freqs: Option<&[f64]>,
    curves: Option<&[PrCurve]>,
) -> Result<EvaluationSummary> {
    let summary = EvaluationSummary::new(cm, legend, train_freqs)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fsio::write_atomic(&dir.join("iou.csv"), iou_csv(cm, legend).as_bytes())?;
    fsio::write_json(&dir.join("summary.json"), &summary)?;
    if let Some(curves) = curves {
        fsio::write_atomic(&dir.join("pr.csv"), pr_csv(curves, legend).as_bytes())?;
    }
    Ok(summary)
}
