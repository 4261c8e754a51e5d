use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::ingestion::Risk;

/// Confusion counts with [`Risk::AtRisk`] as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(predictions: &[Risk], golds: &[Risk]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in predictions.iter().zip(golds) {
        match (p.is_positive(), g.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Unanalyzable cases left out of every denominator.
    pub excluded_cases: usize,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1. A zero denominator yields 0 and
/// records the metric name in `degenerate`.
pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport, EvalError> {
    if counts.total() == 0 {
        return Err(EvalError::Empty);
    }
    let mut degenerate = Vec::new();
    let accuracy = (counts.tp + counts.tn) as f64 / counts.total() as f64;
    let precision = ratio(counts.tp, counts.tp + counts.fp, "precision", &mut degenerate);
    let recall = ratio(counts.tp, counts.tp + counts.fn_, "recall", &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate.push("f1".into());
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        counts,
        excluded_cases: 0,
        degenerate,
    })
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64, EvalError> {
    if logprobs.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&bad) = logprobs.iter().find(|&&x| x > 0.0 || x.is_nan()) {
        return Err(EvalError::PositiveLogprob(bad));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Risk::{AtRisk as P, NoRisk as N};

    fn risks(bits: &[u8]) -> Vec<Risk> {
        bits.iter().map(|&b| Risk::try_from(b).unwrap()).collect()
    }

    #[test]
    fn perfect_agreement() {
        let c = confusion(&[P, N, P], &[P, N, P]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 1 });
    }

    #[test]
    fn all_false_positives() {
        assert_eq!(confusion(&[P, P], &[N, N]).unwrap().fp, 2);
    }

    #[test]
    fn six_position_enumeration() {
        // positions: (1,1) tp, (0,1) fn, (1,0) fp, (0,0) tn, (1,1) tp, (0,0) tn
        let c = confusion(&risks(&[1, 0, 1, 0, 1, 0]), &risks(&[1, 1, 0, 0, 1, 0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 2 });
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[P], &[]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn hand_arithmetic_metrics() {
        let m = metrics(ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 10 }).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        // 2 * 0.75 * 0.6 / 1.35 = 0.9 / 1.35 = 2/3
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 13.0 / 16.0);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn all_correct_is_one() {
        let m = metrics(ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 6 }).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let m = metrics(ConfusionCounts { tp: 0, fp: 0, fn_: 2, tn: 3 }).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision".to_string()));
        assert!(m.degenerate.contains(&"f1".to_string()));
        assert!(metrics(ConfusionCounts::default()).is_err());
    }

    #[test]
    fn perplexity_closed_forms() {
        assert!((perplexity(&[0.5f64.ln(), 0.5f64.ln()]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&[0.25f64.ln()]).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(perplexity(&[]), Err(EvalError::Empty)));
        assert!(matches!(perplexity(&[0.1]), Err(EvalError::PositiveLogprob(_))));
        assert!(matches!(perplexity(&[f64::NAN]), Err(EvalError::PositiveLogprob(_))));
    }

    proptest! {
        #[test]
        fn single_logprob_perplexity_is_exp_neg(x in -50.0f64..=0.0) {
            prop_assert_eq!(perplexity(&[x]).unwrap(), (-x).exp());
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 1u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            let m = metrics(ConfusionCounts { tp, fp, fn_, tn }).unwrap();
            let h = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
            prop_assert!((m.f1 - h).abs() < 1e-12);
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
