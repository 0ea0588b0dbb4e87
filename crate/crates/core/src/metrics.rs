//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Which number picks the "best" checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMetric {
    #[default]
    MacroF1,
    Accuracy,
}

impl MetricsReport {
    pub fn get(&self, metric: ValidationMetric) -> f64 {
        match metric {
            ValidationMetric::MacroF1 => self.macro_f1,
            ValidationMetric::Accuracy => self.accuracy,
        }
    }
}

impl std::str::FromStr for ValidationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro-f1" => Ok(Self::MacroF1),
            "accuracy" => Ok(Self::Accuracy),
            other => Err(Error::Argument(format!("unknown validation metric {other:?}"))),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro-averaged precision/recall/F1 plus accuracy.
/// Undefined ratios (0/0) count as 0.
pub fn compute_metrics(predictions: &[usize], golds: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Argument(format!("{} predictions for {} gold labels", predictions.len(), golds.len())));
    }
    if golds.is_empty() || classes == 0 {
        return Err(Error::Argument("metrics need at least one example and one class".into()));
    }
    if let Some(bad) = predictions.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(Error::Argument(format!("class {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &g) in predictions.iter().zip(golds) {
        predicted[p] += 1;
        support[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassMetrics { precision, recall, f1, support: support[c] }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    Ok(MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: ratio(tp.iter().sum(), golds.len()),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1, 0];
        let r = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let golds = [0, 1, 0, 1];
        let r = compute_metrics(&[0; 4], &golds, 2).unwrap();
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[2], &[0], 2).is_err());
        assert!(compute_metrics(&[], &[], 2).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_permutes_rows(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..60), perm_idx in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let gg: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
            let a = compute_metrics(&p, &g, 3).unwrap();
            let b = compute_metrics(&pp, &gg, 3).unwrap();
            for (c, &moved) in perm.iter().enumerate() {
                prop_assert_eq!(&a.per_class[c], &b.per_class[moved]);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
            for v in [a.macro_f1, a.macro_precision, a.macro_recall, a.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
