use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub name: String,
    pub unit: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Column names of the delimited source files.
///
/// Behavior files are long-format (`subject, date, signal, value`); survey
/// files are wide, one column per instrument item plus an optional notes
/// column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileLayout {
    pub subject_column: String,
    pub date_column: String,
    pub signal_column: String,
    pub value_column: String,
    pub notes_column: String,
    pub date_format: String,
}

impl Default for FileLayout {
    fn default() -> Self {
        Self {
            subject_column: "subject_id".into(),
            date_column: "date".into(),
            signal_column: "signal".into(),
            value_column: "value".into(),
            notes_column: "notes".into(),
            date_format: "%Y-%m-%d".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub signals: Vec<SignalSpec>,
    pub instruments: Vec<ItemSpec>,
    pub layout: FileLayout,
    /// First day of the calendar week.
    pub week_start: Weekday,
    /// Week 0 is the week containing this date.
    pub epoch: NaiveDate,
}

fn signal(name: &str, unit: &str, min: f64, max: f64) -> SignalSpec {
    SignalSpec {
        name: name.into(),
        unit: unit.into(),
        min,
        max,
    }
}

fn item(name: &str, min: f64, max: f64) -> ItemSpec {
    ItemSpec {
        name: name.into(),
        min,
        max,
    }
}

impl DatasetProfile {
    /// Fitbit activity/biometrics with PMSys wellness self-reports.
    pub fn pmdata() -> Self {
        Self {
            name: "pmdata".into(),
            signals: vec![
                signal("steps", "count", 0.0, 100_000.0),
                signal("sleep_minutes", "min", 0.0, 1440.0),
                signal("resting_heart_rate", "bpm", 25.0, 220.0),
                signal("calories", "kcal", 0.0, 20_000.0),
                signal("very_active_minutes", "min", 0.0, 1440.0),
            ],
            instruments: vec![
                item("fatigue", 1.0, 5.0),
                item("mood", 1.0, 5.0),
                item("readiness", 0.0, 10.0),
                item("sleep_quality", 1.0, 5.0),
                item("soreness", 1.0, 5.0),
                item("stress", 1.0, 5.0),
            ],
            layout: FileLayout::default(),
            week_start: Weekday::Mon,
            epoch: NaiveDate::from_ymd_opt(2019, 11, 4).expect("valid date"),
        }
    }

    /// Passive phone and wearable sensing with PHQ-4, PSS-4 and PANAS surveys.
    pub fn globem() -> Self {
        Self {
            name: "globem".into(),
            signals: vec![
                signal("steps", "count", 0.0, 100_000.0),
                signal("sleep_minutes", "min", 0.0, 1440.0),
                signal("time_at_home_minutes", "min", 0.0, 1440.0),
                signal("location_entropy", "nats", 0.0, 10.0),
                signal("phone_unlocks", "count", 0.0, 2000.0),
            ],
            instruments: vec![
                item("phq4", 0.0, 12.0),
                item("pss4", 0.0, 16.0),
                item("panas_positive", 5.0, 25.0),
                item("panas_negative", 5.0, 25.0),
            ],
            layout: FileLayout::default(),
            week_start: Weekday::Mon,
            epoch: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, IngestError> {
        match name {
            "pmdata" => Ok(Self::pmdata()),
            "globem" => Ok(Self::globem()),
            other => Err(IngestError::UnknownProfile(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.signals.is_empty() || self.instruments.is_empty() {
            return Err(IngestError::InvalidProfile(format!(
                "{}: registries must be non-empty",
                self.name
            )));
        }
        let bad_signal = self.signals.iter().find(|s| s.min > s.max || s.min.is_nan() || s.max.is_nan()).map(|s| &s.name);
        let bad_item = self.instruments.iter().find(|i| i.min > i.max || i.min.is_nan() || i.max.is_nan()).map(|i| &i.name);
        if let Some(name) = bad_signal.or(bad_item) {
            return Err(IngestError::InvalidProfile(format!(
                "{}: range of {name} is not well-ordered",
                self.name
            )));
        }
        Ok(())
    }

    pub fn signal(&self, name: &str) -> Option<&SignalSpec> {
        self.signals.iter().find(|s| s.name == name)
    }

    pub fn item(&self, name: &str) -> Option<&ItemSpec> {
        self.instruments.iter().find(|i| i.name == name)
    }

    /// Start of the week containing `date`.
    pub fn week_start_of(&self, date: NaiveDate) -> NaiveDate {
        let offset = (date.weekday().num_days_from_monday() + 7
            - self.week_start.num_days_from_monday())
            % 7;
        date - chrono::Days::new(offset as u64)
    }

    /// Week index of `date` relative to the epoch week; `None` before it.
    pub fn week_index_of(&self, date: NaiveDate) -> Option<u32> {
        let days = (self.week_start_of(date) - self.week_start_of(self.epoch)).num_days();
        (days >= 0).then_some((days / 7) as u32)
    }

    pub fn week_start_for_index(&self, index: u32) -> NaiveDate {
        self.week_start_of(self.epoch) + chrono::Days::new(7 * index as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn builtin_profiles_are_valid() {
        DatasetProfile::pmdata().validate().unwrap();
        DatasetProfile::globem().validate().unwrap();
        assert!(DatasetProfile::by_name("nope").is_err());
    }

    #[test]
    fn bad_range_rejected() {
        let mut p = DatasetProfile::pmdata();
        p.signals[0].min = 10.0;
        p.signals[0].max = 1.0;
        assert!(p.validate().is_err());
        p.signals.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn weeks_start_on_configured_day() {
        let mut p = DatasetProfile::pmdata();
        // 2019-11-04 is a Monday
        assert_eq!(p.week_start_of(d(2019, 11, 10)), d(2019, 11, 4));
        assert_eq!(p.week_index_of(d(2019, 11, 10)), Some(0));
        assert_eq!(p.week_index_of(d(2019, 11, 11)), Some(1));
        assert_eq!(p.week_index_of(d(2019, 11, 3)), None);
        assert_eq!(p.week_start_for_index(2), d(2019, 11, 18));

        p.week_start = Weekday::Sun;
        assert_eq!(p.week_start_of(d(2019, 11, 10)), d(2019, 11, 10));
        assert_eq!(p.week_start_of(d(2019, 11, 9)), d(2019, 11, 3));
    }
}
