//! Counterfactual augmentation of SFT pairs: each mental record is rewritten
//! as if distorted by two of three reporting biases, the outcome is kept.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::gateway::{Gateway, GatewayError};
use crate::jsonl::{self, JsonlError};
use crate::prompts::{PromptKind, PromptSet};
use crate::structured::{self, AskError, ParseError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub id: String,
    pub record: String,
    pub outcome: String,
    #[serde(default)]
    pub source_dataset: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionLabel {
    PersonalityTraits,
    Stigma,
    LackOfAwareness,
}

impl DistortionLabel {
    pub const ALL: [DistortionLabel; 3] = [
        DistortionLabel::PersonalityTraits,
        DistortionLabel::Stigma,
        DistortionLabel::LackOfAwareness,
    ];

    /// The three unordered label pairs, indexed by draw.
    pub const PAIRS: [(DistortionLabel, DistortionLabel); 3] = [
        (DistortionLabel::PersonalityTraits, DistortionLabel::Stigma),
        (DistortionLabel::PersonalityTraits, DistortionLabel::LackOfAwareness),
        (DistortionLabel::Stigma, DistortionLabel::LackOfAwareness),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionLabel::PersonalityTraits => "personality_traits",
            DistortionLabel::Stigma => "stigma",
            DistortionLabel::LackOfAwareness => "lack_of_awareness",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    fn display_name(self) -> &'static str {
        match self {
            DistortionLabel::PersonalityTraits => "personality traits",
            DistortionLabel::Stigma => "stigma",
            DistortionLabel::LackOfAwareness => "lack of awareness",
        }
    }

    fn guidance(self) -> &'static str {
        match self {
            DistortionLabel::PersonalityTraits => {
                "The person's temperament colors the report: a stoic or overly optimistic person plays problems down, an anxious one dramatizes them."
            }
            DistortionLabel::Stigma => {
                "The person fears being judged for mental health problems and minimizes or hides distress they actually feel."
            }
            DistortionLabel::LackOfAwareness => {
                "The person does not recognize their symptoms as mental health problems and describes them as ordinary tiredness, busyness or physical complaints."
            }
        }
    }
}

/// Seeded draw of two distinct labels per pair, uniform over the three
/// unordered combinations. Draws follow input order.
pub fn draw_label_pairs(n: usize, seed: u64) -> Vec<(DistortionLabel, DistortionLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DistortionLabel::PAIRS[rng.random_range(0..DistortionLabel::PAIRS.len())])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub label: DistortionLabel,
    pub distorted_record: String,
    pub clues: Vec<String>,
    pub parent_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid pair {id:?}: {reason}")]
    InvalidPair { id: String, reason: String },
    #[error("no pairs to augment")]
    Empty,
    #[error("unparseable generation: {0}")]
    Parse(ParseError),
    #[error("degenerate generation: {0}")]
    DegenerateOutput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl SftPair {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |reason: &str| {
            Err(AugmentError::InvalidPair {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if self.id.trim().is_empty() {
            return bad("empty id");
        }
        if self.record.trim().is_empty() {
            return bad("empty record");
        }
        if self.outcome.trim().is_empty() {
            return bad("empty outcome");
        }
        Ok(())
    }
}

fn parse_generation(text: &str) -> Result<(String, Vec<String>), ParseError> {
    let records = structured::parse_records(text)?;
    let [rec] = records.as_slice() else {
        return Err(ParseError::Invalid(format!("expected one record, got {}", records.len())));
    };
    let record = rec.require("record")?.to_string();
    let clues = rec
        .get_all("clue")
        .chain(rec.get_all("clues"))
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect();
    Ok((record, clues))
}

/// Request tag of one generation.
pub fn generation_tag(pair: &SftPair, label: DistortionLabel) -> String {
    format!("augment/{}/{}", pair.id, label.as_str())
}

pub fn generate_counterfactual(
    pair: &SftPair,
    label: DistortionLabel,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> Result<CounterfactualSample, AugmentError> {
    pair.validate()?;
    let prompt = prompts.render(
        PromptKind::Augment,
        &[
            ("label", label.display_name()),
            ("label_guidance", label.guidance()),
            ("record", &pair.record),
            ("outcome", &pair.outcome),
        ],
    );
    let (record, clues) = structured::ask_structured(
        gateway,
        prompts,
        &prompt,
        &generation_tag(pair, label),
        &mut Vec::new(),
        parse_generation,
    )
    .map_err(|e| match e {
        AskError::Parse(p) => AugmentError::Parse(p),
        AskError::Gateway(g) => AugmentError::Gateway(g),
    })?;
    if record.trim() == pair.record.trim() {
        return Err(AugmentError::DegenerateOutput("distorted record equals the original".into()));
    }
    if clues.is_empty() {
        return Err(AugmentError::DegenerateOutput("no clues".into()));
    }
    Ok(CounterfactualSample {
        label,
        distorted_record: record,
        clues,
        parent_id: pair.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    Original,
    Counterfactual,
}

/// One line of the augmented dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    #[serde(rename = "type")]
    pub kind: RecordType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<DistortionLabel>,
    pub record: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clues: Option<Vec<String>>,
    pub parent_id: String,
}

impl AugmentedRecord {
    fn original(pair: &SftPair) -> Self {
        Self {
            kind: RecordType::Original,
            label: None,
            record: pair.record.clone(),
            outcome: pair.outcome.clone(),
            clues: None,
            parent_id: pair.id.clone(),
        }
    }

    fn counterfactual(pair: &SftPair, sample: CounterfactualSample) -> Self {
        Self {
            kind: RecordType::Counterfactual,
            label: Some(sample.label),
            record: sample.distorted_record,
            outcome: pair.outcome.clone(),
            clues: Some(sample.clues),
            parent_id: sample.parent_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub parent_id: String,
    pub label: DistortionLabel,
    pub reason: String,
    #[serde(default)]
    pub transport: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub records: Vec<AugmentedRecord>,
    pub rejections: Vec<Rejection>,
}

/// Emits, for each pair in input order, the original followed by its two
/// counterfactuals. Failed generations become rejections; the batch never
/// aborts on them.
pub fn augment_dataset(
    pairs: &[SftPair],
    gateway: &Gateway,
    prompts: &PromptSet,
    seed: u64,
    exec: Execution,
) -> Result<AugmentedDataset, AugmentError> {
    if pairs.is_empty() {
        return Err(AugmentError::Empty);
    }
    let mut seen = BTreeSet::new();
    for pair in pairs {
        pair.validate()?;
        if !seen.insert(pair.id.as_str()) {
            return Err(AugmentError::InvalidPair {
                id: pair.id.clone(),
                reason: "duplicate id".into(),
            });
        }
    }
    let labels = draw_label_pairs(pairs.len(), seed);
    let jobs: Vec<(&SftPair, DistortionLabel)> = pairs
        .iter()
        .zip(&labels)
        .flat_map(|(p, &(a, b))| [(p, a), (p, b)])
        .collect();
    let generated = exec.map(&jobs, |(pair, label)| generate_counterfactual(pair, *label, gateway, prompts));

    let mut out = AugmentedDataset::default();
    let mut generated = generated.into_iter();
    for (pair, (a, b)) in pairs.iter().zip(&labels) {
        out.records.push(AugmentedRecord::original(pair));
        for label in [*a, *b] {
            match generated.next().expect("one result per job") {
                Ok(sample) => out.records.push(AugmentedRecord::counterfactual(pair, sample)),
                Err(e) => {
                    tracing::warn!(pair = %pair.id, label = label.as_str(), error = %e, "counterfactual rejected");
                    out.rejections.push(Rejection {
                        parent_id: pair.id.clone(),
                        label,
                        reason: e.to_string(),
                        transport: matches!(&e, AugmentError::Gateway(g) if g.is_transport()),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn read_sft_pairs(path: &Path) -> Result<Vec<SftPair>, AugmentError> {
    let pairs: Vec<SftPair> = jsonl::read(path)?;
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub originals: usize,
    pub counterfactuals: usize,
    pub label_histogram: BTreeMap<String, usize>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn non_empty_str<'a>(row: &'a serde_json::Value, field: &str) -> Result<&'a str, String> {
    match row.get(field).and_then(|v| v.as_str()) {
        Some(s) if !s.trim().is_empty() => Ok(s),
        Some(_) => Err(format!("{field} is empty")),
        None => Err(format!("{field} missing or not a string")),
    }
}

fn check_row(row: &serde_json::Value) -> Result<(RecordType, Option<DistortionLabel>, String), String> {
    let kind = match row.get("type").and_then(|v| v.as_str()) {
        Some("original") => RecordType::Original,
        Some("counterfactual") => RecordType::Counterfactual,
        other => return Err(format!("unknown type {other:?}")),
    };
    non_empty_str(row, "record")?;
    non_empty_str(row, "outcome")?;
    let parent = non_empty_str(row, "parent_id")?.to_string();
    let label = match (kind, row.get("label")) {
        (RecordType::Original, None) | (RecordType::Original, Some(serde_json::Value::Null)) => None,
        (RecordType::Original, Some(_)) => return Err("original carries a label".into()),
        (RecordType::Counterfactual, Some(v)) => {
            let s = v.as_str().ok_or("label is not a string")?;
            Some(DistortionLabel::parse(s).ok_or_else(|| format!("unknown label {s:?}"))?)
        }
        (RecordType::Counterfactual, None) => return Err("counterfactual without label".into()),
    };
    if kind == RecordType::Counterfactual {
        let clues = row
            .get("clues")
            .and_then(|v| v.as_array())
            .ok_or("clues missing or not a list")?;
        if clues.is_empty() || clues.iter().any(|c| c.as_str().is_none_or(|s| s.trim().is_empty())) {
            return Err("clues must be a non-empty list of non-empty strings".into());
        }
    }
    Ok((kind, label, parent))
}

/// Row-level schema check, label histogram and parent-reference integrity
/// of an augmented JSONL file.
pub fn validate_augmented(path: &Path) -> Result<ValidationReport, AugmentError> {
    let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = ValidationReport::default();
    for label in DistortionLabel::ALL {
        report.label_histogram.insert(label.as_str().into(), 0);
    }
    let mut originals = BTreeSet::new();
    let mut references = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let checked = serde_json::from_str::<serde_json::Value>(line)
            .map_err(|e| format!("not JSON: {e}"))
            .and_then(|row| check_row(&row));
        match checked {
            Err(reason) => report.violations.push(Violation { line: line_no, reason }),
            Ok((RecordType::Original, _, parent)) => {
                report.originals += 1;
                if !originals.insert(parent.clone()) {
                    report.violations.push(Violation {
                        line: line_no,
                        reason: format!("duplicate original {parent:?}"),
                    });
                }
            }
            Ok((RecordType::Counterfactual, label, parent)) => {
                report.counterfactuals += 1;
                if let Some(l) = label {
                    *report.label_histogram.entry(l.as_str().into()).or_default() += 1;
                }
                references.push((line_no, parent));
            }
        }
    }
    for (line, parent) in references {
        if !originals.contains(&parent) {
            report.violations.push(Violation {
                line,
                reason: format!("dangling parent reference {parent:?}"),
            });
        }
    }
    report.violations.sort_by_key(|v| v.line);
    Ok(report)
}
