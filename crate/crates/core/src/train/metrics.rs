//! Saliency metrics: MAE on probabilities, and F-measure, E-measure and IoU on
//! masks binarized at a threshold.

use crate::error::{Error, Result};

/// β² weighting precision over recall.
pub const F_BETA2: f64 = 0.3;
/// Keeps the per-point alignment finite.
pub const E_MEASURE_EPS: f64 = 1e-12;

fn check_lengths(p: &[f64], labels: &[bool]) -> Result<()> {
    if p.len() != labels.len() {
        return Err(Error::Dimension {
            op: "metric inputs",
            lhs: vec![p.len()],
            rhs: vec![labels.len()],
        });
    }
    if p.is_empty() {
        return Err(Error::contract("metrics need at least one point"));
    }
    Ok(())
}

fn binarize(p: &[f64], threshold: f64) -> impl Iterator<Item = bool> + '_ {
    p.iter().map(move |&v| v > threshold)
}

/// Mean absolute error between probabilities and 0/1 labels.
pub fn mae(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probabilities, labels)?;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - if l { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn confusion(p: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (pred, &gt) in binarize(p, threshold).zip(labels) {
        match (pred, gt) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// `(1+β²)PR / (β²P + R)` with β² = 0.3. Both masks empty counts as a perfect match.
pub fn f_measure(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(probabilities, labels)?;
    let c = confusion(probabilities, labels, threshold);
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(1.0);
    }
    let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + F_BETA2) * precision * recall / (F_BETA2 * precision + recall))
}

/// Enhanced-alignment measure of the binarized prediction against the labels.
/// When the labels are all one class the score is 1 for an exact match and 0 otherwise.
pub fn e_measure(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(probabilities, labels)?;
    let pred: Vec<f64> = binarize(probabilities, threshold).map(|b| if b { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n = gt.len() as f64;
    if labels.iter().all(|&b| b == labels[0]) {
        return Ok(if pred == gt { 1.0 } else { 0.0 });
    }
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_g = gt.iter().sum::<f64>() / n;
    let total: f64 = pred
        .iter()
        .zip(&gt)
        .map(|(&p, &g)| {
            let (a, b) = (p - mean_p, g - mean_g);
            let xi = 2.0 * a * b / (a * a + b * b + E_MEASURE_EPS);
            (1.0 + xi).powi(2) / 4.0
        })
        .sum();
    Ok(total / n)
}

/// `|pred ∧ gt| / |pred ∨ gt|`; 1 when both are empty.
pub fn iou(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(probabilities, labels)?;
    let c = confusion(probabilities, labels, threshold);
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

/// `min(2 × mean probability, 1)`.
pub fn adaptive_threshold(probabilities: &[f64]) -> f64 {
    let mean = probabilities.iter().sum::<f64>() / probabilities.len().max(1) as f64;
    (2.0 * mean).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub iou: f64,
    pub threshold: f64,
    pub samples: usize,
}

impl MetricsReport {
    /// All four metrics on one view.
    pub fn single(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        Ok(MetricsReport {
            mae: mae(probabilities, labels)?,
            f_measure: f_measure(probabilities, labels, threshold)?,
            e_measure: e_measure(probabilities, labels, threshold)?,
            iou: iou(probabilities, labels, threshold)?,
            threshold,
            samples: 1,
        })
    }

    /// Unweighted mean over views.
    pub fn average(views: &[MetricsReport]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::contract("cannot average zero metric reports"));
        }
        let n = views.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| views.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            mae: avg(|r| r.mae),
            f_measure: avg(|r| r.f_measure),
            e_measure: avg(|r| r.e_measure),
            iou: avg(|r| r.iou),
            threshold: avg(|r| r.threshold),
            samples: views.iter().map(|r| r.samples).sum(),
        })
    }
}
