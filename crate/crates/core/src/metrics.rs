//! Confusion-matrix classification metrics.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Macro-averaged precision, recall and F1 over every class that occurs in
/// `truth` or `pred`. Undefined ratios count as 0.
pub fn macro_metrics(truth: &[usize], pred: &[usize]) -> MacroMetrics {
    assert_eq!(truth.len(), pred.len(), "truth/prediction length");
    let classes = truth.iter().chain(pred).copied().max().map_or(0, |m| m + 1);
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut present = vec![false; classes];
    let mut correct = 0;
    for (&t, &p) in truth.iter().zip(pred) {
        present[t] = true;
        present[p] = true;
        if t == p {
            tp[t] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class = Vec::new();
    for c in (0..classes).filter(|&c| present[c]) {
        let precision = ratio(tp[c], tp[c] + fp[c]);
        let recall = ratio(tp[c], tp[c] + fn_[c]);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: c,
            support: tp[c] + fn_[c],
            precision,
            recall,
            f1,
        });
    }
    let n = per_class.len().max(1) as f64;
    MacroMetrics {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        accuracy: ratio(correct, truth.len()),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_confusion() {
        // class 0: TP 1, FP 1, FN 0; class 1: TP 0, FP 0, FN 1
        let m = macro_metrics(&[0, 1], &[0, 0]);
        assert!((m.precision - 0.25).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor() {
        let m = macro_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
    }
}
