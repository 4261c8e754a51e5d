use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{BehaviorSeries, CaseKey, DatasetProfile, IngestError, MentalRecord, Risk, Sample};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    Drop,
    Retain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// The row appearing last (file order, then line order) wins.
    LastWins,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParsePolicy {
    pub out_of_range: RangePolicy,
    pub duplicates: DuplicatePolicy,
    /// A file with a larger fraction of unparseable rows is malformed.
    pub max_bad_row_fraction: f64,
}

impl Default for ParsePolicy {
    fn default() -> Self {
        Self {
            out_of_range: RangePolicy::Drop,
            duplicates: DuplicatePolicy::LastWins,
            max_bad_row_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    Unparseable,
    OutOfRange,
    BeforeEpoch,
    Duplicate,
    EmptyRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFlag {
    pub file: String,
    pub line: u64,
    pub kind: FlagKind,
    pub detail: String,
    pub dropped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows_read: usize,
    /// Rows that produced a well-formed sample or record, before any dropping.
    pub parsed: usize,
    /// Parsed samples or records removed by range, calendar or duplicate rules.
    pub dropped: usize,
    pub unparseable: usize,
    pub flags: Vec<ParseFlag>,
}

impl ParseReport {
    /// Samples or records that survive into the parsed output.
    pub fn retained(&self) -> usize {
        self.parsed - self.dropped
    }

    fn merge(&mut self, other: ParseReport) {
        self.rows_read += other.rows_read;
        self.parsed += other.parsed;
        self.dropped += other.dropped;
        self.unparseable += other.unparseable;
        self.flags.extend(other.flags);
    }

    fn flag(&mut self, file: &str, line: u64, kind: FlagKind, detail: String, dropped: bool) {
        self.flags.push(ParseFlag {
            file: file.to_string(),
            line,
            kind,
            detail,
            dropped,
        });
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn open_csv(path: &Path) -> Result<(csv::Reader<std::fs::File>, Vec<String>), IngestError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| malformed(path, format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    Ok((reader, headers))
}

fn column(headers: &[String], name: &str, path: &Path) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| malformed(path, format!("missing column {name:?}")))
}

fn check_bad_rows(path: &Path, report: &ParseReport, policy: &ParsePolicy) -> Result<(), IngestError> {
    if report.rows_read > 0
        && report.unparseable as f64 / report.rows_read as f64 > policy.max_bad_row_fraction
    {
        return Err(malformed(
            path,
            format!(
                "{} of {} rows unparseable (tolerance {})",
                report.unparseable, report.rows_read, policy.max_bad_row_fraction
            ),
        ));
    }
    Ok(())
}

fn parse_date(raw: &str, format: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(raw, format).ok()
}

struct RawSample {
    subject: String,
    signal: String,
    date: NaiveDate,
    value: f64,
    line: u64,
}

fn read_behavior_file(
    path: &Path,
    profile: &DatasetProfile,
    policy: &ParsePolicy,
) -> Result<(Vec<RawSample>, ParseReport), IngestError> {
    let (mut reader, headers) = open_csv(path)?;
    let layout = &profile.layout;
    let subject_col = column(&headers, &layout.subject_column, path)?;
    let date_col = column(&headers, &layout.date_column, path)?;
    let signal_col = column(&headers, &layout.signal_column, path)?;
    let value_col = column(&headers, &layout.value_column, path)?;
    let file = path.display().to_string();

    let mut report = ParseReport::default();
    let mut out = Vec::new();
    for row in reader.records() {
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.unparseable += 1;
                report.flag(&file, line, FlagKind::Unparseable, e.to_string(), true);
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| row.get(i).unwrap_or("");
        let subject = cell(subject_col);
        let signal = cell(signal_col);
        let date = parse_date(cell(date_col), &layout.date_format);
        let value = cell(value_col).parse::<f64>().ok().filter(|v| v.is_finite());
        let (Some(date), Some(value)) = (date, value) else {
            report.unparseable += 1;
            report.flag(&file, line, FlagKind::Unparseable, format!("bad row {:?}", row.iter().collect::<Vec<_>>()), true);
            continue;
        };
        if subject.is_empty() {
            report.unparseable += 1;
            report.flag(&file, line, FlagKind::Unparseable, "empty subject".into(), true);
            continue;
        }
        let Some(spec) = profile.signal(signal) else {
            return Err(IngestError::UnknownSignal {
                path: file,
                line: line as usize,
                signal: signal.to_string(),
                profile: profile.name.clone(),
            });
        };
        report.parsed += 1;
        if profile.week_index_of(date).is_none() {
            report.dropped += 1;
            report.flag(&file, line, FlagKind::BeforeEpoch, format!("{date} precedes the profile epoch"), true);
            continue;
        }
        if value < spec.min || value > spec.max {
            let drop = policy.out_of_range == RangePolicy::Drop;
            report.flag(
                &file,
                line,
                FlagKind::OutOfRange,
                format!("{signal}={value} outside [{}, {}]", spec.min, spec.max),
                drop,
            );
            if drop {
                report.dropped += 1;
                continue;
            }
        }
        out.push(RawSample {
            subject: subject.to_string(),
            signal: signal.to_string(),
            date,
            value,
            line,
        });
    }
    check_bad_rows(path, &report, policy)?;
    Ok((out, report))
}

/// Parses long-format behavior files into one series per (subject, signal).
///
/// Files are read concurrently under `exec`; output is sorted by subject and
/// signal regardless of file order.
pub fn parse_behavior_files(
    paths: &[PathBuf],
    profile: &DatasetProfile,
    policy: &ParsePolicy,
    exec: Execution,
) -> Result<(Vec<BehaviorSeries>, ParseReport), IngestError> {
    profile.validate()?;
    let per_file = exec.map(paths, |p| read_behavior_file(p, profile, policy));
    let mut report = ParseReport::default();
    let mut grouped: BTreeMap<(String, String), BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for (path, result) in paths.iter().zip(per_file) {
        let (samples, file_report) = result?;
        report.merge(file_report);
        let file = path.display().to_string();
        for s in samples {
            let series = grouped.entry((s.subject.clone(), s.signal.clone())).or_default();
            if let Some(previous) = series.insert(s.date, s.value) {
                if policy.duplicates == DuplicatePolicy::Error {
                    return Err(malformed(
                        path,
                        format!("line {}: duplicate {} {} on {}", s.line, s.subject, s.signal, s.date),
                    ));
                }
                report.dropped += 1;
                report.flag(
                    &file,
                    s.line,
                    FlagKind::Duplicate,
                    format!("{} {} on {} replaces {previous}", s.subject, s.signal, s.date),
                    true,
                );
            }
        }
    }
    let series = grouped
        .into_iter()
        .map(|((subject_id, signal_name), samples)| BehaviorSeries {
            unit: profile
                .signal(&signal_name)
                .map(|s| s.unit.clone())
                .unwrap_or_default(),
            subject_id,
            signal_name,
            samples: samples
                .into_iter()
                .map(|(date, value)| Sample { date, value })
                .collect(),
        })
        .collect();
    Ok((series, report))
}

fn read_mental_file(
    path: &Path,
    profile: &DatasetProfile,
    policy: &ParsePolicy,
) -> Result<(Vec<MentalRecord>, ParseReport), IngestError> {
    let (mut reader, headers) = open_csv(path)?;
    let layout = &profile.layout;
    let subject_col = column(&headers, &layout.subject_column, path)?;
    let date_col = column(&headers, &layout.date_column, path)?;
    let notes_col = headers.iter().position(|h| *h == layout.notes_column);
    let mut item_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == subject_col || i == date_col || Some(i) == notes_col {
            continue;
        }
        let spec = profile
            .item(h)
            .ok_or_else(|| malformed(path, format!("column {h:?} is not an instrument item of {}", profile.name)))?;
        item_cols.push((i, spec));
    }
    let file = path.display().to_string();

    let mut report = ParseReport::default();
    let mut out = Vec::new();
    'rows: for row in reader.records() {
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.unparseable += 1;
                report.flag(&file, line, FlagKind::Unparseable, e.to_string(), true);
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let subject = row.get(subject_col).unwrap_or("");
        let date = parse_date(row.get(date_col).unwrap_or(""), &layout.date_format);
        let Some(date) = date.filter(|_| !subject.is_empty()) else {
            report.unparseable += 1;
            report.flag(&file, line, FlagKind::Unparseable, "bad subject or date".into(), true);
            continue;
        };
        let mut items = BTreeMap::new();
        let mut range_flags = Vec::new();
        for &(i, spec) in &item_cols {
            let raw = row.get(i).unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let Some(value) = raw.parse::<f64>().ok().filter(|v| v.is_finite()) else {
                report.unparseable += 1;
                report.flag(&file, line, FlagKind::Unparseable, format!("{}={raw:?}", spec.name), true);
                continue 'rows;
            };
            if value < spec.min || value > spec.max {
                let drop = policy.out_of_range == RangePolicy::Drop;
                range_flags.push((
                    format!("{}={value} outside [{}, {}]", spec.name, spec.min, spec.max),
                    drop,
                ));
                if drop {
                    continue;
                }
            }
            items.insert(spec.name.clone(), value);
        }
        for (detail, drop) in range_flags {
            report.flag(&file, line, FlagKind::OutOfRange, detail, drop);
        }
        report.parsed += 1;
        if profile.week_index_of(date).is_none() {
            report.dropped += 1;
            report.flag(&file, line, FlagKind::BeforeEpoch, format!("{date} precedes the profile epoch"), true);
            continue;
        }
        if items.is_empty() {
            report.dropped += 1;
            report.flag(&file, line, FlagKind::EmptyRecord, "no instrument items".into(), true);
            continue;
        }
        let notes = notes_col
            .and_then(|i| row.get(i))
            .filter(|n| !n.is_empty())
            .map(str::to_string);
        out.push(MentalRecord {
            subject_id: subject.to_string(),
            date,
            items,
            notes,
        });
    }
    check_bad_rows(path, &report, policy)?;
    Ok((out, report))
}

/// Parses wide-format survey files. Out-of-range items are flagged and, under
/// [`RangePolicy::Drop`], removed; a row left with no items is rejected.
pub fn parse_mental_files(
    paths: &[PathBuf],
    profile: &DatasetProfile,
    policy: &ParsePolicy,
    exec: Execution,
) -> Result<(Vec<MentalRecord>, ParseReport), IngestError> {
    profile.validate()?;
    let per_file = exec.map(paths, |p| read_mental_file(p, profile, policy));
    let mut report = ParseReport::default();
    let mut records = Vec::new();
    for result in per_file {
        let (recs, file_report) = result?;
        report.merge(file_report);
        records.extend(recs);
    }
    // stable: surveys on the same day keep file order
    records.sort_by(|a, b| (&a.subject_id, a.date).cmp(&(&b.subject_id, b.date)));
    Ok((records, report))
}

pub type LabelTable = BTreeMap<CaseKey, Risk>;

/// Reads a two-column `case_key,label` table.
pub fn parse_label_table(path: &Path) -> Result<LabelTable, IngestError> {
    let (mut reader, headers) = open_csv(path)?;
    if headers.len() != 2 {
        return Err(malformed(path, "label table must have exactly two columns"));
    }
    let mut table = LabelTable::new();
    for row in reader.records() {
        let row = row.map_err(|e| malformed(path, e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let key: CaseKey = row
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|e| malformed(path, format!("line {line}: {e}")))?;
        let label: Risk = row
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e| malformed(path, format!("line {line}: {e}")))?;
        table.insert(key, label);
    }
    Ok(table)
}
