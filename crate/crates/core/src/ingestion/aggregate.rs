use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    AssessmentCase, BehaviorSeries, CaseKey, DatasetProfile, LabelTable, MentalRecord,
    DAYS_PER_WEEK,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Behavior samples placed into emitted cases.
    pub samples_in_cases: usize,
    /// Behavior samples in weeks without any mental record.
    pub samples_in_uncovered_weeks: usize,
    pub weeks_without_mental: Vec<CaseKey>,
    pub weeks_without_behavior: Vec<CaseKey>,
    /// Label-table keys with no matching case; reported, never fatal.
    pub label_join_misses: Vec<CaseKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub cases: Vec<AssessmentCase>,
    pub coverage: CoverageReport,
}

fn merge_records(records: &[&MentalRecord]) -> MentalRecord {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for record in records {
        for (item, value) in &record.items {
            let entry = sums.entry(item.clone()).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
    }
    let notes: Vec<String> = records
        .iter()
        .filter_map(|r| r.notes.as_ref().map(|n| format!("{}: {n}", r.date)))
        .collect();
    MentalRecord {
        subject_id: records[0].subject_id.clone(),
        date: records[0].date,
        items: sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
        notes: (!notes.is_empty()).then(|| notes.join(" | ")),
    }
}

/// Groups series and records into subject-weeks.
///
/// A case is emitted for every week holding at least one behavior sample and
/// at least one mental record. Mental items in a week are averaged and notes
/// concatenated chronologically. Output is sorted by case key.
pub fn aggregate_weekly(
    series: &[BehaviorSeries],
    records: &[MentalRecord],
    labels: Option<&LabelTable>,
    profile: &DatasetProfile,
) -> Aggregation {
    // (subject, week) -> signal -> 7 slots
    let mut windows: BTreeMap<CaseKey, BTreeMap<String, Vec<Option<f64>>>> = BTreeMap::new();
    for s in series {
        for sample in &s.samples {
            let Some(week) = profile.week_index_of(sample.date) else {
                continue;
            };
            let key = CaseKey::new(s.subject_id.clone(), week);
            let day = (sample.date - profile.week_start_for_index(week)).num_days() as usize;
            windows
                .entry(key)
                .or_default()
                .entry(s.signal_name.clone())
                .or_insert_with(|| vec![None; DAYS_PER_WEEK])[day] = Some(sample.value);
        }
    }

    let mut sorted: Vec<&MentalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.subject_id, a.date)
            .cmp(&(&b.subject_id, b.date))
            .then_with(|| a.notes.cmp(&b.notes))
            .then_with(|| {
                let ka: Vec<_> = a.items.iter().map(|(k, v)| (k, v.to_bits())).collect();
                let kb: Vec<_> = b.items.iter().map(|(k, v)| (k, v.to_bits())).collect();
                ka.cmp(&kb)
            })
    });
    let mut weekly_records: BTreeMap<CaseKey, Vec<&MentalRecord>> = BTreeMap::new();
    for record in sorted {
        if let Some(week) = profile.week_index_of(record.date) {
            weekly_records
                .entry(CaseKey::new(record.subject_id.clone(), week))
                .or_default()
                .push(record);
        }
    }

    let mut coverage = CoverageReport::default();
    let mut cases = Vec::new();
    for (key, window) in windows {
        let count: usize = window
            .values()
            .map(|d| d.iter().filter(|v| v.is_some()).count())
            .sum();
        let Some(recs) = weekly_records.get(&key) else {
            coverage.samples_in_uncovered_weeks += count;
            coverage.weeks_without_mental.push(key);
            continue;
        };
        coverage.samples_in_cases += count;
        cases.push(AssessmentCase {
            week_start: profile.week_start_for_index(key.week_index),
            gold_label: labels.and_then(|l| l.get(&key).copied()),
            subject_id: key.subject_id,
            week_index: key.week_index,
            behavior_window: window,
            mental_record: merge_records(recs),
        });
    }
    let case_keys: BTreeSet<CaseKey> = cases.iter().map(AssessmentCase::key).collect();
    coverage.weeks_without_behavior = weekly_records
        .keys()
        .filter(|k| !case_keys.contains(*k))
        .cloned()
        .collect();
    if let Some(labels) = labels {
        coverage.label_join_misses = labels
            .keys()
            .filter(|k| !case_keys.contains(*k))
            .cloned()
            .collect();
    }
    Aggregation { cases, coverage }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{Risk, Sample};
    use chrono::NaiveDate;

    fn day(offset: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 11, 4).unwrap() + chrono::Days::new(offset)
    }

    fn steps(subject: &str, days: impl IntoIterator<Item = u64>) -> BehaviorSeries {
        BehaviorSeries {
            subject_id: subject.into(),
            signal_name: "steps".into(),
            unit: "count".into(),
            samples: days
                .into_iter()
                .map(|d| Sample { date: day(d), value: 1000.0 + d as f64 })
                .collect(),
        }
    }

    fn survey(subject: &str, offset: u64, mood: f64, notes: Option<&str>) -> MentalRecord {
        MentalRecord {
            subject_id: subject.into(),
            date: day(offset),
            items: [("mood".to_string(), mood)].into_iter().collect(),
            notes: notes.map(str::to_string),
        }
    }

    #[test]
    fn fourteen_days_two_surveys_two_cases() {
        let agg = aggregate_weekly(
            &[steps("p01", 0..14)],
            &[survey("p01", 2, 3.0, None), survey("p01", 9, 4.0, None)],
            None,
            &DatasetProfile::pmdata(),
        );
        assert_eq!(agg.cases.len(), 2);
        assert_eq!(agg.cases[0].week_index, 0);
        assert_eq!(agg.cases[1].week_start, day(7));
        assert_eq!(agg.cases[1].behavior_window["steps"][0], Some(1007.0));
        assert_eq!(agg.coverage.samples_in_cases, 14);
    }

    #[test]
    fn week_without_survey_emits_no_case() {
        let agg = aggregate_weekly(
            &[steps("p01", 0..14)],
            &[survey("p01", 2, 3.0, None)],
            None,
            &DatasetProfile::pmdata(),
        );
        assert_eq!(agg.cases.len(), 1);
        assert_eq!(agg.coverage.weeks_without_mental, vec![CaseKey::new("p01", 1)]);
        assert_eq!(agg.coverage.samples_in_uncovered_weeks, 7);
    }

    #[test]
    fn missing_days_are_explicit() {
        let agg = aggregate_weekly(
            &[steps("p01", [0, 1, 3, 4, 5, 6])],
            &[survey("p01", 2, 3.0, None)],
            None,
            &DatasetProfile::pmdata(),
        );
        let w = &agg.cases[0].behavior_window["steps"];
        assert_eq!(w.len(), 7);
        assert_eq!(w[2], None);
        assert_eq!(agg.cases[0].missing_days(), 1);
    }

    #[test]
    fn surveys_merge_by_mean_and_notes_concatenate() {
        let agg = aggregate_weekly(
            &[steps("p01", 0..7)],
            &[
                survey("p01", 5, 4.0, Some("later")),
                survey("p01", 1, 2.0, Some("earlier")),
            ],
            None,
            &DatasetProfile::pmdata(),
        );
        let rec = &agg.cases[0].mental_record;
        assert_eq!(rec.items["mood"], 3.0);
        assert_eq!(rec.notes.as_deref(), Some("2019-11-05: earlier | 2019-11-09: later"));
        assert_eq!(rec.date, day(1));
    }

    #[test]
    fn labels_join_and_misses_reported() {
        let mut labels = LabelTable::new();
        labels.insert(CaseKey::new("p01", 0), Risk::AtRisk);
        labels.insert(CaseKey::new("p09", 4), Risk::NoRisk);
        let agg = aggregate_weekly(
            &[steps("p01", 0..7)],
            &[survey("p01", 1, 2.0, None)],
            Some(&labels),
            &DatasetProfile::pmdata(),
        );
        assert_eq!(agg.cases[0].gold_label, Some(Risk::AtRisk));
        assert_eq!(agg.coverage.label_join_misses, vec![CaseKey::new("p09", 4)]);
    }
}
