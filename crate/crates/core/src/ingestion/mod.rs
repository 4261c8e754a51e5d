//! Parsing of wearable behavior files and survey files, and weekly
//! aggregation into assessment cases.

mod aggregate;
mod parse;
mod profile;
mod summary;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_weekly, Aggregation, CoverageReport};
pub use parse::{
    parse_behavior_files, parse_label_table, parse_mental_files, DuplicatePolicy, LabelTable,
    ParseFlag, ParsePolicy, ParseReport, RangePolicy,
};
pub use profile::{DatasetProfile, FileLayout, ItemSpec, SignalSpec};
pub use summary::{cohort_summary, CohortSummary};

pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("{path}:{line}: unknown signal {signal:?} for profile {profile}")]
    UnknownSignal {
        path: String,
        line: usize,
        signal: String,
        profile: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown dataset profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("cohort has no cases")]
    EmptyCohort,
}

/// Binary risk label: 1 means strong indicators needing follow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Risk {
    NoRisk,
    AtRisk,
}

impl Risk {
    pub fn as_u8(self) -> u8 {
        self.into()
    }

    pub fn is_positive(self) -> bool {
        self == Risk::AtRisk
    }
}

impl From<Risk> for u8 {
    fn from(r: Risk) -> u8 {
        match r {
            Risk::NoRisk => 0,
            Risk::AtRisk => 1,
        }
    }
}

impl TryFrom<u8> for Risk {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Risk::NoRisk),
            1 => Ok(Risk::AtRisk),
            other => Err(format!("risk label must be 0 or 1, got {other}")),
        }
    }
}

impl FromStr for Risk {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "0" => Ok(Risk::NoRisk),
            "1" => Ok(Risk::AtRisk),
            other => Err(format!("risk label must be 0 or 1, got {other:?}")),
        }
    }
}

/// Subject-week identifier, written `subject/wN`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaseKey {
    pub subject_id: String,
    pub week_index: u32,
}

impl CaseKey {
    pub fn new(subject_id: impl Into<String>, week_index: u32) -> Self {
        Self {
            subject_id: subject_id.into(),
            week_index,
        }
    }
}

impl fmt::Display for CaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/w{}", self.subject_id, self.week_index)
    }
}

impl FromStr for CaseKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (subject, week) = s
            .trim()
            .rsplit_once("/w")
            .ok_or_else(|| format!("case key {s:?} is not of the form subject/wN"))?;
        if subject.is_empty() {
            return Err(format!("case key {s:?} has an empty subject"));
        }
        let week_index = week
            .parse()
            .map_err(|_| format!("case key {s:?} has a bad week index"))?;
        Ok(Self::new(subject, week_index))
    }
}

impl Serialize for CaseKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CaseKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub date: NaiveDate,
    pub value: f64,
}

/// One signal for one subject, dates strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSeries {
    pub subject_id: String,
    pub signal_name: String,
    pub unit: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentalRecord {
    pub subject_id: String,
    pub date: NaiveDate,
    pub items: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Option<String>,
}

/// One subject-week: the behavior window, the merged mental record and an
/// optional gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentCase {
    pub subject_id: String,
    pub week_index: u32,
    pub week_start: NaiveDate,
    /// Seven daily slots per signal; `None` marks a day with no sample.
    pub behavior_window: BTreeMap<String, Vec<Option<f64>>>,
    pub mental_record: MentalRecord,
    #[serde(default)]
    pub gold_label: Option<Risk>,
}

impl AssessmentCase {
    pub fn key(&self) -> CaseKey {
        CaseKey::new(self.subject_id.clone(), self.week_index)
    }

    /// Digest of the behavior window; refined renderings carry it.
    pub fn window_digest(&self) -> String {
        crate::digest::json_digest(&(&self.week_start, &self.behavior_window))
    }

    pub fn present_samples(&self) -> usize {
        self.behavior_window
            .values()
            .map(|days| days.iter().filter(|d| d.is_some()).count())
            .sum()
    }

    /// Days on which no signal has a sample.
    pub fn missing_days(&self) -> usize {
        (0..DAYS_PER_WEEK)
            .filter(|&day| {
                self.behavior_window
                    .values()
                    .all(|days| days.get(day).copied().flatten().is_none())
            })
            .count()
    }

    pub fn day_date(&self, day: usize) -> NaiveDate {
        self.week_start + chrono::Days::new(day as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_key_round_trips() {
        let key = CaseKey::new("p01", 3);
        assert_eq!(key.to_string(), "p01/w3");
        assert_eq!("p01/w3".parse::<CaseKey>().unwrap(), key);
        assert_eq!("a/b/w12".parse::<CaseKey>().unwrap(), CaseKey::new("a/b", 12));
        assert!("p01".parse::<CaseKey>().is_err());
        assert!("/w1".parse::<CaseKey>().is_err());
    }

    #[test]
    fn risk_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&Risk::AtRisk).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Risk>("0").unwrap(), Risk::NoRisk);
        assert!(serde_json::from_str::<Risk>("2").is_err());
    }
}
