use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AssessmentCase, CaseKey, IngestError, DAYS_PER_WEEK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMissingness {
    pub case_key: CaseKey,
    pub missing_days: usize,
    pub missing_day_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cases: usize,
    pub subjects: usize,
    pub cases_per_subject: BTreeMap<String, usize>,
    pub labeled_cases: usize,
    pub positive_cases: usize,
    /// Positive share of labeled cases; `None` when nothing is labeled.
    pub prevalence: Option<f64>,
    pub mean_missing_day_rate: f64,
    pub per_case: Vec<CaseMissingness>,
}

pub fn cohort_summary(cases: &[AssessmentCase]) -> Result<CohortSummary, IngestError> {
    if cases.is_empty() {
        return Err(IngestError::EmptyCohort);
    }
    let mut sorted: Vec<&AssessmentCase> = cases.iter().collect();
    sorted.sort_by_key(|c| c.key());

    let mut cases_per_subject = BTreeMap::new();
    for c in &sorted {
        *cases_per_subject.entry(c.subject_id.clone()).or_insert(0) += 1;
    }
    let labeled: Vec<_> = sorted.iter().filter_map(|c| c.gold_label).collect();
    let positive_cases = labeled.iter().filter(|l| l.is_positive()).count();
    let per_case: Vec<CaseMissingness> = sorted
        .iter()
        .map(|c| {
            let missing = c.missing_days();
            CaseMissingness {
                case_key: c.key(),
                missing_days: missing,
                missing_day_rate: missing as f64 / DAYS_PER_WEEK as f64,
            }
        })
        .collect();
    let mean_missing_day_rate =
        per_case.iter().map(|m| m.missing_day_rate).sum::<f64>() / per_case.len() as f64;
    Ok(CohortSummary {
        cases: sorted.len(),
        subjects: cases_per_subject.len(),
        cases_per_subject,
        labeled_cases: labeled.len(),
        positive_cases,
        prevalence: (!labeled.is_empty()).then(|| positive_cases as f64 / labeled.len() as f64),
        mean_missing_day_rate,
        per_case,
    })
}

impl CohortSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cases: {}  subjects: {}", self.cases, self.subjects);
        match self.prevalence {
            Some(p) => {
                let _ = writeln!(
                    out,
                    "labeled: {}  positive: {}  prevalence: {:.4}",
                    self.labeled_cases, self.positive_cases, p
                );
            }
            None => out.push_str("labeled: 0\n"),
        }
        let _ = writeln!(out, "mean missing-day rate: {:.4}", self.mean_missing_day_rate);
        out.push_str("cases per subject:\n");
        for (subject, n) in &self.cases_per_subject {
            let _ = writeln!(out, "  {subject}: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{MentalRecord, Risk};
    use chrono::NaiveDate;

    fn case(subject: &str, week: u32, label: Option<Risk>, missing: usize) -> AssessmentCase {
        let date = NaiveDate::from_ymd_opt(2019, 11, 4).unwrap();
        let days = (0..7).map(|d| (d >= missing).then_some(100.0)).collect();
        AssessmentCase {
            subject_id: subject.into(),
            week_index: week,
            week_start: date,
            behavior_window: [("steps".to_string(), days)].into_iter().collect(),
            mental_record: MentalRecord {
                subject_id: subject.into(),
                date,
                items: [("mood".to_string(), 3.0)].into_iter().collect(),
                notes: None,
            },
            gold_label: label,
        }
    }

    #[test]
    fn prevalence_of_ten_cases() {
        let cases: Vec<_> = (0..10)
            .map(|i| case("p01", i, Some(if i < 2 { Risk::AtRisk } else { Risk::NoRisk }), 0))
            .collect();
        let s = cohort_summary(&cases).unwrap();
        assert_eq!(s.prevalence, Some(0.2));
        assert_eq!(s.cases_per_subject["p01"], 10);
    }

    #[test]
    fn missing_day_rate_per_case() {
        let s = cohort_summary(&[case("p01", 0, None, 3)]).unwrap();
        assert_eq!(s.per_case[0].missing_day_rate, 3.0 / 7.0);
        assert_eq!(s.prevalence, None);
    }

    #[test]
    fn empty_cohort_is_error() {
        assert!(matches!(cohort_summary(&[]), Err(IngestError::EmptyCohort)));
    }
}
