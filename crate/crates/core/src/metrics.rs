//! Evaluation metrics: relative improvement percentage against the retrain
//! oracle, confidence-threshold membership inference, bias-prediction
//! correlation (Cramér's V), macro-F1, and unlearning-time bookkeeping.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Batch, ModelError, ModelSpec, ParamVector};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("f1_retrain must be positive, got {0}")]
    DivisionByZero(f64),
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Relative improvement percentage versus the retrain oracle:
/// `(f1_unlearn - f1_retrain) / f1_retrain * 100`.
pub fn rip(f1_unlearn: f64, f1_retrain: f64) -> Result<f64, MetricsError> {
    if !(f1_retrain > 0.0) {
        return Err(MetricsError::DivisionByZero(f1_retrain));
    }
    Ok((f1_unlearn - f1_retrain) / f1_retrain * 100.0)
}

fn confidences(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Vec<f64>, MetricsError> {
    let proba = model::predict_proba(spec, params, &batch.features)?;
    Ok((0..proba.rows())
        .map(|i| proba.row(i).iter().fold(0.0f64, |m, &p| m.max(p)))
        .collect())
}

/// Calibrate the confidence threshold maximizing member/non-member accuracy
/// over the candidate set (every observed confidence plus +inf, so "flag
/// nobody" is available); ties resolve to the largest threshold. A point is
/// flagged as a member when its confidence is >= the threshold.
fn calibrate_threshold(member: &[f64], nonmember: &[f64]) -> f64 {
    let mut candidates: Vec<f64> = member.iter().chain(nonmember).copied().collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let total = (member.len() + nonmember.len()) as f64;
    let mut best_threshold = f64::INFINITY;
    let mut best_accuracy = f64::NEG_INFINITY;
    for &t in &candidates {
        let hits = member.iter().filter(|&&c| c >= t).count()
            + nonmember.iter().filter(|&&c| c < t).count();
        let accuracy = hits as f64 / total;
        if accuracy > best_accuracy || (accuracy == best_accuracy && t > best_threshold) {
            best_accuracy = accuracy;
            best_threshold = t;
        }
    }
    best_threshold
}

/// Fraction (percent) of the forget set still flagged as training members
/// by a max-softmax confidence threshold calibrated on the two calibration
/// sets. Lower means better unlearning.
pub fn mia_member_rate(
    spec: &ModelSpec,
    params_unlearned: &ParamVector,
    forget: &Batch,
    calib_member: &Batch,
    calib_nonmember: &Batch,
) -> Result<f64, MetricsError> {
    if forget.n() == 0 {
        return Err(MetricsError::EmptyForgetSet);
    }
    let member = confidences(spec, params_unlearned, calib_member)?;
    let nonmember = confidences(spec, params_unlearned, calib_nonmember)?;
    let threshold = calibrate_threshold(&member, &nonmember);
    let forget_conf = confidences(spec, params_unlearned, forget)?;
    let flagged = forget_conf.iter().filter(|&&c| c >= threshold).count();
    Ok(100.0 * flagged as f64 / forget.n() as f64)
}

/// The complementary efficacy formula, `100 - member_rate`. Reported
/// alongside the member rate; the two use opposite "better" directions and
/// are never compared against each other.
pub fn mia_efficacy_paper(member_rate: f64) -> f64 {
    100.0 - member_rate
}

/// Cramér's V between predictions and bias attributes, with a degenerate
/// flag when either variable is constant (V reported as 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrelation {
    pub v: f64,
    pub degenerate: bool,
}

/// Cramér's V of the predictions-by-bias contingency table:
/// `sqrt(chi² / (n (min(r,c) - 1)))`, in [0, 1]. Category ids are compacted
/// to the observed distinct values, so the statistic is invariant under
/// relabeling.
pub fn bias_correlation(
    pred_labels: &[usize],
    bias_attrs: &[usize],
) -> Result<BiasCorrelation, MetricsError> {
    if pred_labels.len() != bias_attrs.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_labels.len(),
            right: bias_attrs.len(),
        });
    }
    if pred_labels.len() < 2 {
        return Err(MetricsError::TooFewObservations { needed: 2, got: pred_labels.len() });
    }
    let compact = |values: &[usize]| {
        let mut map = BTreeMap::new();
        for &v in values {
            let next = map.len();
            map.entry(v).or_insert(next);
        }
        let ids: Vec<usize> = values.iter().map(|v| map[v]).collect();
        (ids, map.len())
    };
    let (rows, r) = compact(pred_labels);
    let (cols, c) = compact(bias_attrs);
    if r < 2 || c < 2 {
        return Ok(BiasCorrelation { v: 0.0, degenerate: true });
    }
    let n = rows.len() as f64;
    let mut joint = vec![0.0; r * c];
    let mut row_sums = vec![0.0; r];
    let mut col_sums = vec![0.0; c];
    for (&i, &j) in rows.iter().zip(&cols) {
        joint[i * c + j] += 1.0;
        row_sums[i] += 1.0;
        col_sums[j] += 1.0;
    }
    let mut chi2 = 0.0;
    for i in 0..r {
        for j in 0..c {
            let expected = row_sums[i] * col_sums[j] / n;
            if expected > 0.0 {
                let gap = joint[i * c + j] - expected;
                chi2 += gap * gap / expected;
            }
        }
    }
    let v = (chi2 / (n * (r.min(c) as f64 - 1.0))).sqrt();
    Ok(BiasCorrelation { v, degenerate: false })
}

/// Macro-averaged F1 in percent. Classes absent from both predictions and
/// truth contribute F1 = 0 and are counted in `absent_both`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub percent: f64,
    pub absent_both: usize,
}

pub fn f1_macro(
    pred_labels: &[usize],
    true_labels: &[usize],
    num_classes: usize,
) -> Result<MacroF1, MetricsError> {
    if pred_labels.len() != true_labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_labels.len(),
            right: true_labels.len(),
        });
    }
    if pred_labels.is_empty() {
        return Err(MetricsError::TooFewObservations { needed: 1, got: 0 });
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fal_neg = vec![0usize; num_classes];
    for (&p, &t) in pred_labels.iter().zip(true_labels) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fal_neg[t] += 1;
        }
    }
    let mut total = 0.0;
    let mut absent_both = 0usize;
    for k in 0..num_classes {
        let denom = 2 * tp[k] + fp[k] + fal_neg[k];
        if denom == 0 {
            absent_both += 1;
        } else {
            total += 2.0 * tp[k] as f64 / denom as f64;
        }
    }
    Ok(MacroF1 { percent: 100.0 * total / num_classes as f64, absent_both })
}

/// Wall-clock seconds of the given work (monotone clock), returning the
/// work's output alongside.
pub fn measure_ut<T>(work: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = work();
    (out, start.elapsed().as_secs_f64())
}

/// One evaluation row. `CSV_HEADER` fixes the column order for exports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub f1_percent: f64,
    pub rip_percent: f64,
    pub mia_member_rate_percent: f64,
    pub mia_efficacy_paper_percent: f64,
    pub bias_correlation: f64,
    pub ut_seconds: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "f1_percent,rip_percent,mia_member_rate_percent,mia_efficacy_paper_percent,bias_correlation,ut_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.f1_percent,
            self.rip_percent,
            self.mia_member_rate_percent,
            self.mia_efficacy_paper_percent,
            self.bias_correlation,
            self.ut_seconds
        )
    }

    /// Field values in `CSV_HEADER` order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.f1_percent,
            self.rip_percent,
            self.mia_member_rate_percent,
            self.mia_efficacy_paper_percent,
            self.bias_correlation,
            self.ut_seconds,
        ]
    }
}
