//! OOD and triage threshold calibration.

use crate::checkpoint::{Checkpoint, Thresholds};
use crate::dataset::{infer_outputs, Dataset};
use crate::inference::{predict_levels, InferenceError};
use crate::model::{ModelError, Variant};
use crate::taxonomy::{RecordLabel, Split, Taxonomy};
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

pub const GRID_POINTS: usize = 101;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("no threshold reaches TPR >= {0}")]
    UnreachableTarget(f64),
    #[error("no correctly predicted validation image")]
    NoCorrectPredictions,
    #[error("triage threshold needs the hierarchical_mpl variant, got {0}")]
    NotPrototypeVariant(Variant),
    #[error("invalid threshold policy `{0}`")]
    BadPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// TPR/FPR at thresholds `0.00, 0.01, ..., 1.00`, with ID as the positive
/// class and "predicted ID" meaning `score >= t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

pub fn grid_threshold(k: usize) -> f64 {
    k as f64 / 100.0
}

fn check(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(s) => Err(CalibrationError::ScoreOutOfRange(*s)),
        None => Ok(()),
    }
}

fn fraction_at_least(sorted: &[f64], t: f64) -> f64 {
    let below = sorted.partition_point(|s| *s < t);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

pub fn tpr_fpr_sweep(id_scores: &[f64], ood_scores: &[f64]) -> Result<SweepCurve> {
    check(id_scores)?;
    check(ood_scores)?;
    let mut id = id_scores.to_vec();
    let mut ood = ood_scores.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    let thresholds: Vec<f64> = (0..GRID_POINTS).map(grid_threshold).collect();
    Ok(SweepCurve {
        tpr: thresholds.iter().map(|t| fraction_at_least(&id, *t)).collect(),
        fpr: thresholds.iter().map(|t| fraction_at_least(&ood, *t)).collect(),
        thresholds,
    })
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    // Twice the Mann-Whitney U, kept integral until the final division.
    let mut u2: u128 = 0;
    for s in id_scores {
        let below = ood.partition_point(|o| o < s);
        let not_above = ood.partition_point(|o| o <= s);
        u2 += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(u2 as f64 / (2.0 * id_scores.len() as f64 * ood_scores.len() as f64))
}

/// Exact ROC points `(fpr, tpr)` at every distinct score, from (0,0) to (1,1).
pub fn roc_points(id_scores: &[f64], ood_scores: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = id_scores.iter().chain(ood_scores).copied().collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut id = id_scores.to_vec();
    let mut ood = ood_scores.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    let mut pts = vec![(0.0, 0.0)];
    for t in cuts {
        pts.push((fraction_at_least(&ood, t), fraction_at_least(&id, t)));
    }
    pts
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ThresholdPolicy {
    Youden,
    TargetTpr(f64),
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Youden => f.write_str("youden"),
            ThresholdPolicy::TargetTpr(q) => write!(f, "target-tpr:{q}"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = CalibrationError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "youden" {
            return Ok(ThresholdPolicy::Youden);
        }
        let q = s
            .strip_prefix("target-tpr:")
            .or_else(|| s.strip_prefix("target_tpr:"))
            .and_then(|q| q.parse::<f64>().ok())
            .filter(|q| (0.0..=1.0).contains(q))
            .ok_or_else(|| CalibrationError::BadPolicy(s.to_string()))?;
        Ok(ThresholdPolicy::TargetTpr(q))
    }
}

/// `youden`: argmax of `TPR - FPR`, lowest threshold on ties.
/// `target_tpr(q)`: smallest threshold whose TPR is at least `q`.
pub fn select_ood_threshold(curve: &SweepCurve, policy: ThresholdPolicy) -> Result<f64> {
    match policy {
        ThresholdPolicy::Youden => {
            let mut best = 0;
            for k in 1..curve.thresholds.len() {
                if curve.tpr[k] - curve.fpr[k] > curve.tpr[best] - curve.fpr[best] {
                    best = k;
                }
            }
            Ok(curve.thresholds[best])
        }
        ThresholdPolicy::TargetTpr(q) => (0..curve.thresholds.len())
            .find(|&k| curve.tpr[k] >= q)
            .map(|k| curve.thresholds[k])
            .ok_or(CalibrationError::UnreachableTarget(q)),
    }
}

/// Mean of the minimum prototype distances over correctly predicted images.
pub fn triage_threshold_from(min_distances: &[f64], correct: &[bool]) -> Result<f64> {
    let picked: Vec<f64> = min_distances
        .iter()
        .zip(correct)
        .filter(|(_, c)| **c)
        .map(|(d, _)| *d)
        .collect();
    if picked.is_empty() {
        return Err(CalibrationError::NoCorrectPredictions);
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// Triage threshold of an MPL checkpoint over labelled `indices` of `ds`.
pub fn compute_triage_threshold(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let variant = ck.model.config.variant;
    if variant != Variant::HierarchicalMpl {
        return Err(CalibrationError::NotPrototypeVariant(variant));
    }
    let outputs = infer_outputs(&ck.model, ds, indices)?;
    let mut dist = Vec::with_capacity(indices.len());
    let mut correct = Vec::with_capacity(indices.len());
    for (&i, out) in indices.iter().zip(&outputs) {
        let pred = predict_levels(out, &ck.model, &ck.taxonomy)?;
        let truth = ds.records[i].label.known().map(|p| p.l3);
        dist.push(pred.min_distance.expect("MPL output has distances"));
        correct.push(truth == Some(pred.l3));
    }
    triage_threshold_from(&dist, &correct)
}

/// Level-3 confidences of `indices`.
pub fn confidence_scores(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let outputs = infer_outputs(&ck.model, ds, indices)?;
    outputs
        .iter()
        .map(|o| Ok(predict_levels(o, &ck.model, &ck.taxonomy)?.conf[2]))
        .collect()
}

/// OOD-test records reserved for calibration: every third record of each
/// OOD category and of the unknown set, in manifest order. The remaining
/// OOD-test records are left for evaluation.
pub fn ood_calibration_slice(ds: &Dataset, taxonomy: &Taxonomy) -> (Vec<usize>, Vec<usize>) {
    let mut seen: std::collections::HashMap<Option<usize>, usize> = Default::default();
    let mut calib = Vec::new();
    let mut rest = Vec::new();
    for i in ds.split_indices(Split::OodTest) {
        let r = &ds.records[i];
        if r.is_id(taxonomy) {
            continue;
        }
        let key = match r.label {
            RecordLabel::Known(p) => Some(p.l3),
            RecordLabel::Unknown => None,
        };
        let k = seen.entry(key).or_default();
        if *k % 3 == 0 {
            calib.push(i);
        } else {
            rest.push(i);
        }
        *k += 1;
    }
    (calib, rest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub policy: String,
    pub thresholds: Thresholds,
    pub id_count: usize,
    pub ood_count: usize,
    pub curve: SweepCurve,
    pub auroc: f64,
}

/// Calibrates `t_ood` on validation ID against the OOD calibration slice
/// (or, with `sweep_on_test`, ID test against all OOD-test records),
/// and `t_triage` on validation ID for the MPL variant.
pub fn calibrate(ck: &Checkpoint, ds: &Dataset, policy: ThresholdPolicy, sweep_on_test: bool) -> Result<CalibrationReport> {
    let tax = &ck.taxonomy;
    let val = ds.id_indices(Split::Val, tax);
    let (id_idx, ood_idx) = if sweep_on_test {
        let (mut a, b) = ood_calibration_slice(ds, tax);
        a.extend(b);
        (ds.id_indices(Split::Test, tax), a)
    } else {
        (val.clone(), ood_calibration_slice(ds, tax).0)
    };
    let id_scores = confidence_scores(ck, ds, &id_idx)?;
    let ood_scores = confidence_scores(ck, ds, &ood_idx)?;
    let curve = tpr_fpr_sweep(&id_scores, &ood_scores)?;
    let t_ood = select_ood_threshold(&curve, policy)?;
    let t_triage = if ck.model.config.variant == Variant::HierarchicalMpl {
        Some(compute_triage_threshold(ck, ds, &val)?)
    } else {
        None
    };
    Ok(CalibrationReport {
        policy: policy.to_string(),
        thresholds: Thresholds { t_ood, t_triage },
        id_count: id_scores.len(),
        ood_count: ood_scores.len(),
        auroc: auroc(&id_scores, &ood_scores)?,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sweep_and_auroc() {
        let id = [0.9, 0.8, 0.4];
        let ood = [0.7, 0.3];
        let c = tpr_fpr_sweep(&id, &ood).unwrap();
        assert_eq!((c.tpr[0], c.fpr[0]), (1.0, 1.0));
        assert!((c.tpr[50] - 2.0 / 3.0).abs() < 1e-12 && (c.fpr[50] - 0.5).abs() < 1e-12);
        assert_eq!((c.tpr[100], c.fpr[100]), (0.0, 0.0));
        assert!((auroc(&id, &ood).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let t = select_ood_threshold(&c, ThresholdPolicy::Youden).unwrap();
        assert!(t > 0.7 && t <= 0.8, "{t}");
    }

    #[test]
    fn policies() {
        let c = tpr_fpr_sweep(&[0.9, 0.95], &[0.1, 0.2]).unwrap();
        assert_eq!(select_ood_threshold(&c, ThresholdPolicy::Youden).unwrap(), 0.21);
        assert_eq!(select_ood_threshold(&c, ThresholdPolicy::TargetTpr(1.0)).unwrap(), 0.0);
        assert_eq!("target-tpr:0.95".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::TargetTpr(0.95));
        assert!("median".parse::<ThresholdPolicy>().is_err());
        let c = tpr_fpr_sweep(&[0.0], &[0.0]).unwrap();
        assert_eq!(select_ood_threshold(&c, ThresholdPolicy::TargetTpr(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn triage_mean() {
        assert!((triage_threshold_from(&[0.2, 0.4, 0.6], &[true; 3]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(triage_threshold_from(&[0.5, 0.5], &[true, true]).unwrap(), 0.5);
        assert!(matches!(
            triage_threshold_from(&[0.5], &[false]),
            Err(CalibrationError::NoCorrectPredictions)
        ));
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(matches!(tpr_fpr_sweep(&[], &[0.1]), Err(CalibrationError::EmptyScores)));
        assert!(matches!(tpr_fpr_sweep(&[1.5], &[0.1]), Err(CalibrationError::ScoreOutOfRange(_))));
        assert!(matches!(auroc(&[0.1], &[]), Err(CalibrationError::EmptyScores)));
    }
}
