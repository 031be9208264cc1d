//! Evaluation criteria: interocular-normalized landmark error, and
//! per-AU F1 and ROC AUC with positive-frequency weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{interocular_distance, AuLabels, AuProbs, FaceShape};

/// Mean point-to-point error divided by the ground-truth interocular distance.
pub fn normalized_error(pred: &FaceShape, gt: &FaceShape, eyes: (usize, usize)) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "predicted shape has {} landmarks, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.frame() != gt.frame() {
        return Err(Error::WrongFrame {
            expected: gt.frame(),
            found: pred.frame(),
        });
    }
    let iod = interocular_distance(gt, eyes.0, eyes.1)?;
    if !(iod > 0.0) {
        return Err(Error::DegenerateGroundTruth(
            "ground-truth eye landmarks coincide".into(),
        ));
    }
    let total: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| p.distance(g))
        .sum();
    Ok(total / pred.len() as f64 / iod)
}

fn check_aligned(probs: &[AuProbs], gt: &[AuLabels]) -> Result<usize> {
    if probs.is_empty() || gt.is_empty() {
        return Err(Error::Empty("AU evaluation set"));
    }
    if probs.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth label vectors",
            probs.len(),
            gt.len()
        )));
    }
    let n = gt[0].len();
    if probs.iter().any(|p| p.len() != n) || gt.iter().any(|g| g.len() != n) {
        return Err(Error::DimensionMismatch(
            "AU vectors differ in length".into(),
        ));
    }
    Ok(n)
}

fn positive_counts(gt: &[AuLabels], n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| gt.iter().filter(|g| g.is_active(i)).count())
        .collect()
}

/// Frequency-weighted mean over AUs with a defined score and at least one
/// positive instance.
fn weighted_mean(scores: &[Option<f64>], freq: &[usize]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, &f) in scores.iter().zip(freq) {
        if let (Some(s), true) = (s, f > 0) {
            num += f as f64 * s;
            den += f as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_au: Vec<f64>,
    /// Positive-instance-weighted mean; `None` if no AU has any positive.
    pub weighted: Option<f64>,
}

/// F1 per AU with predictions `p ≥ threshold`. An empty denominator scores 0.
pub fn f1_scores(probs: &[AuProbs], gt: &[AuLabels], threshold: f64) -> Result<F1Scores> {
    let n = check_aligned(probs, gt)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "decision threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut per_au = Vec::with_capacity(n);
    for i in 0..n {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, g) in probs.iter().zip(gt) {
            let pred = p.as_slice()[i] >= threshold;
            match (pred, g.is_active(i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        per_au.push(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        });
    }
    let freq = positive_counts(gt, n);
    let scores: Vec<Option<f64>> = per_au.iter().map(|&s| Some(s)).collect();
    Ok(F1Scores {
        weighted: weighted_mean(&scores, &freq),
        per_au,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucScores {
    /// `None` where the AU lacks positives or negatives.
    pub per_au: Vec<Option<f64>>,
    pub weighted: Option<f64>,
}

/// Mann–Whitney AUC of `scores` against binary `labels`, ties counted ½.
/// `None` unless both classes are present.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn auc_scores(probs: &[AuProbs], gt: &[AuLabels]) -> Result<AucScores> {
    let n = check_aligned(probs, gt)?;
    let per_au: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let s: Vec<f64> = probs.iter().map(|p| p.as_slice()[i]).collect();
            let l: Vec<bool> = gt.iter().map(|g| g.is_active(i)).collect();
            mann_whitney_auc(&s, &l)
        })
        .collect();
    let freq = positive_counts(gt, n);
    Ok(AucScores {
        weighted: weighted_mean(&per_au, &freq),
        per_au,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mean_normalized_error: f64,
    pub per_au_f1: Vec<f64>,
    pub weighted_f1: Option<f64>,
    pub per_au_auc: Vec<Option<f64>>,
    pub weighted_auc: Option<f64>,
    /// Mean error of `x⁰, x¹, …, x^T` when per-stage shapes are available.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_stage_error: Vec<f64>,
    pub threshold: f64,
    /// Model variant, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub conventions: String,
}

pub const REPORT_CONVENTIONS: &str = "F1 is 0 when precision+recall is undefined; AUC ties count 1/2; \
AUs without positives are excluded from weighted scores and AUs lacking either class have undefined AUC; \
weights are positive-instance counts";

/// Per-sample prediction for evaluation.
pub struct Prediction<'a> {
    pub shape: &'a FaceShape,
    pub probs: &'a AuProbs,
    /// Optional per-stage shapes `x⁰..x^T` in the same frame as `shape`.
    pub stages: Option<&'a [FaceShape]>,
}

pub struct GroundTruth<'a> {
    pub shape: &'a FaceShape,
    pub labels: &'a AuLabels,
}

pub fn evaluate(
    preds: &[Prediction<'_>],
    truth: &[GroundTruth<'_>],
    eyes: (usize, usize),
    threshold: f64,
) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth samples",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut err_sum = 0.0;
    for (p, g) in preds.iter().zip(truth) {
        err_sum += normalized_error(p.shape, g.shape, eyes)?;
    }
    let probs: Vec<AuProbs> = preds.iter().map(|p| p.probs.clone()).collect();
    let labels: Vec<AuLabels> = truth.iter().map(|g| g.labels.clone()).collect();
    let f1 = f1_scores(&probs, &labels, threshold)?;
    let auc = auc_scores(&probs, &labels)?;

    let mut per_stage_error = Vec::new();
    if preds.iter().all(|p| p.stages.is_some()) {
        let n_stages = preds[0].stages.map_or(0, <[FaceShape]>::len);
        if preds
            .iter()
            .any(|p| p.stages.map_or(0, <[FaceShape]>::len) != n_stages)
        {
            return Err(Error::DimensionMismatch(
                "per-stage traces have different lengths".into(),
            ));
        }
        for t in 0..n_stages {
            let mut s = 0.0;
            for (p, g) in preds.iter().zip(truth) {
                s += normalized_error(&p.stages.unwrap()[t], g.shape, eyes)?;
            }
            per_stage_error.push(s / preds.len() as f64);
        }
    }

    Ok(EvalReport {
        n_samples: preds.len(),
        mean_normalized_error: err_sum / preds.len() as f64,
        per_au_f1: f1.per_au,
        weighted_f1: f1.weighted,
        per_au_auc: auc.per_au,
        weighted_auc: auc.weighted,
        per_stage_error,
        threshold,
        variant: None,
        conventions: REPORT_CONVENTIONS.to_string(),
    })
}

impl EvalReport {
    /// Summary in the units of the usual results table: error as a
    /// percentage of the interocular distance, F1 and AUC as percentages,
    /// each to two decimals.
    pub fn summary(&self) -> String {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        if let Some(v) = &self.variant {
            s.push_str(&format!("variant: {v}\n"));
        }
        s.push_str(&format!("samples: {}\n", self.n_samples));
        s.push_str(&format!(
            "mean error (% interocular): {:.2}\n",
            100.0 * self.mean_normalized_error
        ));
        s.push_str(&format!("weighted F1 (%): {}\n", pct(self.weighted_f1)));
        s.push_str(&format!("weighted AUC (%): {}\n", pct(self.weighted_auc)));
        if !self.per_stage_error.is_empty() {
            let stages: Vec<String> = self
                .per_stage_error
                .iter()
                .map(|e| format!("{:.2}", 100.0 * e))
                .collect();
            s.push_str(&format!("per-stage error (%): {}\n", stages.join(" ")));
        }
        s
    }
}
