use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::consistency::{consistency_accuracy, ConsistencyReport, LabeledEmbedding};
use super::metrics::{confusion, metrics, MetricsReport};
use super::EvalError;
use crate::causal::AssessmentBatch;
use crate::exec::Execution;
use crate::gateway::Gateway;
use crate::ingestion::{CaseKey, LabelTable, Risk};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_folds: usize,
    pub fold_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_folds: 5, fold_seed: 0 }
    }
}

/// Per-case audit row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub case_key: CaseKey,
    pub prediction: Risk,
    pub gold: Option<Risk>,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub analyzable_cases: usize,
    pub unanalyzable_cases: usize,
    pub metrics: Option<MetricsReport>,
    pub consistency: Option<ConsistencyReport>,
    /// Analyzable cases with no gold label.
    pub join_misses: Vec<CaseKey>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub report: EvaluationReport,
    pub rows: Vec<EvaluationRow>,
}

/// Classification metrics over analyzable cases with a gold label, and the
/// consistency protocol over evidence embeddings labeled by prediction.
pub fn evaluate_run(
    batch: &AssessmentBatch,
    golds: Option<&LabelTable>,
    gateway: &Gateway,
    config: &EvalConfig,
    exec: Execution,
) -> Result<EvaluationOutput, EvalError> {
    if batch.assessments.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut assessments: Vec<_> = batch.assessments.iter().collect();
    assessments.sort_by(|a, b| a.case_key.cmp(&b.case_key));
    let mut notices = Vec::new();

    let rows: Vec<EvaluationRow> = assessments
        .iter()
        .map(|a| {
            let gold = golds.and_then(|g| g.get(&a.case_key).copied());
            EvaluationRow {
                case_key: a.case_key.clone(),
                prediction: a.prediction,
                gold,
                correct: gold.map(|g| g == a.prediction),
            }
        })
        .collect();

    let mut join_misses = Vec::new();
    let metrics_report = match golds {
        None => {
            notices.push("no gold labels supplied; classification metrics skipped".into());
            None
        }
        Some(_) => {
            join_misses = rows.iter().filter(|r| r.gold.is_none()).map(|r| r.case_key.clone()).collect();
            for key in &join_misses {
                tracing::warn!(case = %key, "no gold label for case");
            }
            let (preds, golds): (Vec<Risk>, Vec<Risk>) =
                rows.iter().filter_map(|r| r.gold.map(|g| (r.prediction, g))).unzip();
            if preds.is_empty() {
                notices.push("no assessed case has a gold label; classification metrics skipped".into());
                None
            } else {
                let mut m = metrics(confusion(&preds, &golds)?)?;
                m.excluded_cases = batch.unanalyzable.len();
                Some(m)
            }
        }
    };

    let embeddings = exec.map(&assessments, |a| gateway.embed(&a.evidence_text));
    let mut points = Vec::with_capacity(assessments.len());
    for (a, e) in assessments.iter().zip(embeddings) {
        points.push(LabeledEmbedding {
            key: a.case_key.to_string(),
            label: i64::from(a.prediction.as_u8()),
            vector: e?.values().to_vec(),
        });
    }
    let consistency = match consistency_accuracy(&points, config.k_folds, config.fold_seed, exec) {
        Ok(r) => Some(r),
        Err(e @ (EvalError::SingleCluster | EvalError::TooFewPoints(_) | EvalError::BadK { .. })) => {
            notices.push(format!("consistency report skipped: {e}"));
            None
        }
        Err(e) => return Err(e),
    };

    Ok(EvaluationOutput {
        report: EvaluationReport {
            analyzable_cases: assessments.len(),
            unanalyzable_cases: batch.unanalyzable.len(),
            metrics: metrics_report,
            consistency,
            join_misses,
            notices,
        },
        rows,
    })
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "analyzable cases: {}  unanalyzable: {}",
            self.analyzable_cases, self.unanalyzable_cases
        );
        if let Some(m) = &self.metrics {
            let c = m.counts;
            let _ = writeln!(out, "confusion: tp {} fp {} fn {} tn {}", c.tp, c.fp, c.fn_, c.tn);
            let _ = writeln!(
                out,
                "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
                m.accuracy, m.precision, m.recall, m.f1
            );
            if !m.degenerate.is_empty() {
                let _ = writeln!(out, "degenerate (zero denominator): {}", m.degenerate.join(", "));
            }
        }
        if let Some(c) = &self.consistency {
            let _ = writeln!(
                out,
                "silhouette {:.4}  {}-fold accuracy {:.4} (seed {}, {} points)",
                c.silhouette, c.k, c.kfold_accuracy, c.fold_seed, c.points
            );
        }
        if !self.join_misses.is_empty() {
            let _ = writeln!(out, "cases without gold label: {}", self.join_misses.len());
        }
        for n in &self.notices {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::Assessment;
    use crate::simulate::SimulatedModel;
    use std::path::Path;

    fn golden_batch() -> (AssessmentBatch, LabelTable) {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden");
        let assessments: Vec<Assessment> = crate::jsonl::read(&dir.join("expected/assessments.jsonl")).unwrap();
        let labels = crate::ingestion::parse_label_table(&dir.join("input/labels.csv")).unwrap();
        (AssessmentBatch { assessments, unanalyzable: Vec::new() }, labels)
    }

    fn gw() -> Gateway {
        Gateway::from_backend(SimulatedModel::default())
    }

    #[test]
    fn empty_batch_is_an_error() {
        let r = evaluate_run(&AssessmentBatch::default(), None, &gw(), &EvalConfig::default(), Execution::Sequential);
        assert!(matches!(r, Err(EvalError::Empty)));
    }

    #[test]
    fn unanalyzable_cases_leave_the_denominators() {
        let (batch, labels) = golden_batch();
        let full = evaluate_run(&batch, Some(&labels), &gw(), &EvalConfig::default(), Execution::Sequential).unwrap();
        let mut cut = batch.clone();
        let gone = cut.assessments.remove(3);
        cut.unanalyzable.push(crate::causal::Unanalyzable {
            case_key: gone.case_key.clone(),
            stage: crate::causal::Stage::Combine,
            reason: "test".into(),
            transport: false,
            transcript: Vec::new(),
        });
        let part = evaluate_run(&cut, Some(&labels), &gw(), &EvalConfig::default(), Execution::Sequential).unwrap();
        let (fm, pm) = (full.report.metrics.unwrap(), part.report.metrics.unwrap());
        assert_eq!(pm.counts.total() + 1, fm.counts.total());
        assert_eq!(pm.excluded_cases, 1);
        assert_eq!(part.report.unanalyzable_cases, 1);
        let kept: Vec<_> = full.rows.iter().filter(|r| r.case_key != gone.case_key).cloned().collect();
        assert_eq!(part.rows, kept);
    }

    #[test]
    fn missing_golds_skip_metrics_but_not_consistency() {
        let (batch, mut labels) = golden_batch();
        let none = evaluate_run(&batch, None, &gw(), &EvalConfig::default(), Execution::Sequential).unwrap();
        assert!(none.report.metrics.is_none());
        assert!(none.report.consistency.is_some());
        assert_eq!(none.report.notices.len(), 1);
        assert!(none.rows.iter().all(|r| r.gold.is_none() && r.correct.is_none()));

        let first = batch.assessments[0].case_key.clone();
        labels.remove(&first);
        let some = evaluate_run(&batch, Some(&labels), &gw(), &EvalConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(some.report.join_misses, vec![first]);
        assert_eq!(some.report.metrics.unwrap().counts.total() as usize, batch.assessments.len() - 1);
    }
}
