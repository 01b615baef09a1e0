//! Localization and segmentation metrics: IoU, Fβ, cIoU and AUC over a
//! threshold sweep, and pixel-wise average precision.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ApMode, EvalConfig};
use crate::dataset::SampleSource;
use crate::error::{Error, Result};
use crate::model::AvSam;
use crate::seg_head::{GroundTruthMask, PromptSet};
use crate::Scalar;

fn check_pair(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.iter().chain(gt.iter()).any(|&v| v > 1) {
        return Err(Error::Contract("masks must be binary (0/1)".into()));
    }
    Ok(())
}

/// `(TP, FP, FN)` pixel counts.
fn confusion(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
        (1, 1) => tp += 1,
        (1, _) => fp += 1,
        (_, 1) => fneg += 1,
        _ => {}
    });
    (tp, fp, fneg)
}

/// `|pred ∧ gt| / |pred ∨ gt|`, 1 when both are empty.
pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (tp, fp, fneg) = confusion(pred, gt);
    let union = tp + fp + fneg;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// `(1 + β²)·P·R / (β²·P + R)`, 0 when the denominator is 0.
pub fn f_score(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, beta_sq: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let (tp, fp, fneg) = confusion(pred, gt);
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let denom = beta_sq * precision + recall;
    Ok(if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    })
}

/// Fraction of samples whose IoU exceeds each threshold `0, 0.05, …, 0.95`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    pub success_ratio: Vec<f64>,
}

impl ThresholdCurve {
    pub fn thresholds() -> Vec<f64> {
        (0..20).map(|k| k as f64 / 20.0).collect()
    }

    pub fn from_ious(ious: &[f64]) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("no IoU values".into()));
        }
        if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("IoU {v} outside [0, 1]")));
        }
        let thresholds = Self::thresholds();
        let n = ious.len() as f64;
        let success_ratio = thresholds
            .iter()
            .map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / n)
            .collect();
        Ok(Self {
            thresholds,
            success_ratio,
        })
    }

    pub fn auc(&self) -> f64 {
        self.success_ratio.iter().sum::<f64>() / self.success_ratio.len() as f64
    }
}

/// `(cIoU, AUC)`: fraction with IoU > 0.5, and the mean success ratio.
pub fn ciou_auc(ious: &[f64]) -> Result<(f64, f64)> {
    let curve = ThresholdCurve::from_ious(ious)?;
    let ciou = ious.iter().filter(|&&v| v > 0.5).count() as f64 / ious.len() as f64;
    Ok((ciou, curve.auc()))
}

/// Average precision of a ranking: `Σ (R_k − R_{k−1})·P_k` over distinct
/// score thresholds, highest first. Tied scores enter together, so a
/// constant score gives AP equal to the positive fraction.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision with no positive pixels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pixel AP over a set of score maps. Pooled ranks all pixels together;
/// per-image averages AP over images with at least one positive pixel.
pub fn pixel_ap(scores: &[ArrayView2<'_, f64>], gts: &[ArrayView2<'_, u8>], mode: ApMode) -> Result<f64> {
    if scores.len() != gts.len() {
        return Err(Error::Shape(format!("{} score maps vs {} masks", scores.len(), gts.len())));
    }
    for (s, g) in scores.iter().zip(gts) {
        if s.dim() != g.dim() {
            return Err(Error::Shape(format!("scores {:?} vs mask {:?}", s.dim(), g.dim())));
        }
    }
    match mode {
        ApMode::Pooled => {
            let s: Vec<f64> = scores.iter().flat_map(|m| m.iter().copied()).collect();
            let l: Vec<u8> = gts.iter().flat_map(|m| m.iter().copied()).collect();
            average_precision(&s, &l)
        }
        ApMode::PerImage => {
            let mut aps = Vec::new();
            for (s, g) in scores.iter().zip(gts) {
                if g.iter().any(|&v| v == 1) {
                    let sv: Vec<f64> = s.iter().copied().collect();
                    let gv: Vec<u8> = g.iter().copied().collect();
                    aps.push(average_precision(&sv, &gv)?);
                }
            }
            if aps.is_empty() {
                return Err(Error::UndefinedMetric("average precision with no positive pixels".into()));
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub iou: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub fscore: f64,
    pub beta_sq: f64,
    pub ap: f64,
    pub ciou: f64,
    pub auc: f64,
    pub threshold: f64,
    pub ap_mode: ApMode,
    pub audio_ablated: bool,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One scored sample: foreground probabilities and the reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub probs: Array2<f64>,
    pub gt: GroundTruthMask,
}

/// Binarizes `probs > threshold` and computes every metric. Per-sample rows
/// are ordered by id.
pub fn evaluate_predictions(preds: &[Prediction], cfg: &EvalConfig, audio_ablated: bool) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(preds.len());
    for p in preds {
        let bin = p.probs.mapv(|v| u8::from(v > cfg.threshold));
        per_sample.push(SampleMetrics {
            id: p.id.clone(),
            iou: iou(bin.view(), p.gt.values())?,
            fscore: f_score(bin.view(), p.gt.values(), cfg.beta_sq)?,
        });
    }
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_sample.len() as f64;
    let ious: Vec<f64> = per_sample.iter().map(|s| s.iou).collect();
    let (ciou, auc) = ciou_auc(&ious)?;
    let scores: Vec<_> = preds.iter().map(|p| p.probs.view()).collect();
    let gts: Vec<_> = preds.iter().map(|p| p.gt.values()).collect();
    Ok(MetricReport {
        miou: ious.iter().sum::<f64>() / n,
        fscore: per_sample.iter().map(|s| s.fscore).sum::<f64>() / n,
        beta_sq: cfg.beta_sq,
        ap: pixel_ap(&scores, &gts, cfg.ap_mode)?,
        ciou,
        auc,
        threshold: cfg.threshold,
        ap_mode: cfg.ap_mode,
        audio_ablated,
        per_sample,
    })
}

/// Runs the model with an empty prompt on every sample of `source`.
pub fn predict_dataset<T, S>(model: &AvSam<T>, source: &S, ablate_audio: bool) -> Result<Vec<Prediction>>
where
    T: Scalar,
    S: SampleSource<T> + ?Sized,
{
    (0..source.len())
        .into_par_iter()
        .map(|i| {
            let s = source.get(i)?;
            let gt = s
                .mask
                .ok_or_else(|| Error::Contract(format!("sample {} has no ground-truth mask", s.id)))?;
            let logits = model.predict(&s.image, &s.spectrogram, &PromptSet::empty(), ablate_audio)?;
            if logits.values.dim() != gt.shape() {
                return Err(Error::Shape(format!(
                    "sample {}: prediction {:?} vs mask {:?}",
                    s.id,
                    logits.values.dim(),
                    gt.shape()
                )));
            }
            Ok(Prediction {
                id: s.id,
                probs: logits.probabilities().mapv(|v| v.as_f64()),
                gt,
            })
        })
        .collect()
}

pub fn evaluate_dataset<T, S>(model: &AvSam<T>, source: &S, cfg: &EvalConfig, ablate_audio: bool) -> Result<MetricReport>
where
    T: Scalar,
    S: SampleSource<T> + ?Sized,
{
    evaluate_predictions(&predict_dataset(model, source, ablate_audio)?, cfg, ablate_audio)
}
