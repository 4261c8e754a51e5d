//! Seeded synthetic cohorts shaped like the two dataset profiles, and the
//! golden replay fixture built from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentedDataset, SftPair};
use crate::causal::{assess_all, AssessmentBatch, CausalConfig};
use crate::digest::file_digest;
use crate::evaluation::{evaluate_run, EvalConfig, EvaluationOutput};
use crate::exec::Execution;
use crate::gateway::{record_tape, Gateway, GatewayError, Tape, TapeBackend};
use crate::ingestion::{
    aggregate_weekly, parse_behavior_files, parse_label_table, parse_mental_files, AssessmentCase, CaseKey,
    DatasetProfile, IngestError, LabelTable, ParsePolicy, Risk, DAYS_PER_WEEK,
};
use crate::jsonl::{self, JsonlError};
use crate::prompts::PromptSet;
use crate::refine::{refine_all, RefineOptions, RefinedRecord};
use crate::simulate::SimulatedModel;

pub const BEHAVIOR_FILE: &str = "behavior.csv";
pub const MENTAL_FILE: &str = "mental.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SFT_FILE: &str = "sft_pairs.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Pipeline(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parameters of one synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub profile: String,
    pub subjects: Vec<String>,
    pub weeks: u32,
    /// Share of emitted cases labeled at risk; the count is rounded.
    pub prevalence: f64,
    /// Chance that a subject-week has no survey (and so yields no case).
    pub survey_gap_rate: f64,
    /// Chance that a day has no behavior samples at all.
    pub missing_day_rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub participants: usize,
    pub test_fraction: f64,
    pub test_subjects: usize,
}

/// 16 subjects over about five months; 9.8% of cases at risk.
pub fn pmdata_like(seed: u64) -> CohortSpec {
    CohortSpec {
        profile: "pmdata".into(),
        subjects: (1..=16).map(|i| format!("p{i:02}")).collect(),
        weeks: 21,
        prevalence: 0.098,
        survey_gap_rate: 0.1,
        missing_day_rate: 0.05,
        seed,
        split: None,
    }
}

/// The seeded 25% test split of 497 participants, four weeks each; 23.2% of
/// cases at risk.
pub fn globem_like(seed: u64) -> CohortSpec {
    let participants = 497;
    let test_fraction = 0.25;
    let mut ids: Vec<String> = (1..=participants).map(|i| format!("g{i:03}")).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_test = (participants as f64 * test_fraction).round() as usize;
    let mut test: Vec<String> = ids.into_iter().take(n_test).collect();
    test.sort();
    CohortSpec {
        profile: "globem".into(),
        subjects: test,
        weeks: 4,
        prevalence: 0.232,
        survey_gap_rate: 0.03,
        missing_day_rate: 0.05,
        seed,
        split: Some(SplitInfo {
            participants,
            test_fraction,
            test_subjects: n_test,
        }),
    }
}

/// Four subjects by five weeks with no gaps: exactly 20 cases, 4 at risk.
pub fn golden_spec() -> CohortSpec {
    CohortSpec {
        profile: "pmdata".into(),
        subjects: (1..=4).map(|i| format!("p{i:02}")).collect(),
        weeks: 5,
        prevalence: 0.2,
        survey_gap_rate: 0.0,
        missing_day_rate: 0.05,
        seed: 2024,
        split: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub spec: CohortSpec,
    pub expected_cases: usize,
    pub expected_positives: usize,
    /// File name to SHA-256 digest.
    pub files: BTreeMap<String, String>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn two_decimals(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One day of signal values. `risky` shifts every signal towards the risk
/// end of its range.
fn day_values(profile: &str, risky: bool, rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let pick = |rng: &mut ChaCha8Rng, normal: (f64, f64), risk: (f64, f64)| {
        let (lo, hi) = if risky { risk } else { normal };
        uniform(rng, lo, hi)
    };
    match profile {
        "globem" => vec![
            ("steps", pick(rng, (5500.0, 11000.0), (1500.0, 6000.0)).round()),
            ("sleep_minutes", pick(rng, (380.0, 500.0), (270.0, 400.0)).round()),
            ("time_at_home_minutes", pick(rng, (650.0, 1100.0), (1000.0, 1380.0)).round()),
            ("location_entropy", two_decimals(pick(rng, (0.9, 2.6), (0.2, 1.1)))),
            ("phone_unlocks", pick(rng, (40.0, 140.0), (100.0, 230.0)).round()),
        ],
        _ => vec![
            ("steps", pick(rng, (6000.0, 11500.0), (1800.0, 6200.0)).round()),
            ("sleep_minutes", pick(rng, (390.0, 510.0), (280.0, 400.0)).round()),
            ("resting_heart_rate", one_decimal(pick(rng, (54.0, 70.0), (64.0, 80.0)))),
            ("calories", pick(rng, (1900.0, 2900.0), (1500.0, 2200.0)).round()),
            ("very_active_minutes", pick(rng, (10.0, 60.0), (0.0, 14.0)).round()),
        ],
    }
}

fn survey_values(profile: &str, risky: bool, rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let pick = |rng: &mut ChaCha8Rng, normal: (i64, i64), risk: (i64, i64)| {
        let (lo, hi) = if risky { risk } else { normal };
        rng.random_range(lo..=hi) as f64
    };
    match profile {
        "globem" => vec![
            ("phq4", pick(rng, (0, 5), (5, 12))),
            ("pss4", pick(rng, (2, 8), (7, 15))),
            ("panas_positive", pick(rng, (12, 22), (6, 14))),
            ("panas_negative", pick(rng, (6, 14), (13, 22))),
        ],
        _ => vec![
            ("fatigue", pick(rng, (1, 3), (3, 5))),
            ("mood", pick(rng, (3, 5), (1, 3))),
            ("readiness", pick(rng, (5, 9), (1, 5))),
            ("sleep_quality", pick(rng, (3, 5), (1, 3))),
            ("soreness", pick(rng, (1, 4), (2, 5))),
            ("stress", pick(rng, (1, 3), (3, 5))),
        ],
    }
}

struct Week {
    subject: String,
    index: u32,
    surveyed: bool,
}

/// Writes behavior, mental and label CSVs plus a manifest into `dir`.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<FixtureManifest, FixtureError> {
    let profile = DatasetProfile::by_name(&spec.profile)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut weeks = Vec::new();
    for subject in &spec.subjects {
        for index in 0..spec.weeks {
            weeks.push(Week {
                subject: subject.clone(),
                index,
                surveyed: !rng.random_bool(spec.survey_gap_rate),
            });
        }
    }
    let case_ids: Vec<usize> = (0..weeks.len()).filter(|&i| weeks[i].surveyed).collect();
    let positives = (spec.prevalence * case_ids.len() as f64).round() as usize;
    let mut order = case_ids.clone();
    order.shuffle(&mut rng);
    let mut at_risk = vec![false; weeks.len()];
    for &i in order.iter().take(positives) {
        at_risk[i] = true;
    }

    let behavior_path = dir.join(BEHAVIOR_FILE);
    let mental_path = dir.join(MENTAL_FILE);
    let labels_path = dir.join(LABELS_FILE);
    let mut behavior = csv::Writer::from_path(&behavior_path)?;
    behavior.write_record(["subject_id", "date", "signal", "value"])?;
    let mut mental = csv::Writer::from_path(&mental_path)?;
    let items: Vec<String> = profile.instruments.iter().map(|i| i.name.clone()).collect();
    let mut header = vec!["subject_id".to_string(), "date".to_string()];
    header.extend(items.iter().cloned());
    header.push("notes".into());
    mental.write_record(&header)?;
    let mut labels = csv::Writer::from_path(&labels_path)?;
    labels.write_record(["case_key", "label"])?;

    for (i, week) in weeks.iter().enumerate() {
        let start = profile.week_start_for_index(week.index);
        let risky = at_risk[i];
        // A few at-risk weeks look mild in behavior, and a few ordinary
        // weeks show one risk-like signal, so the task is not trivially
        // separable.
        let behavior_risky = if risky { !rng.random_bool(0.15) } else { rng.random_bool(0.1) };
        let mut missing: Vec<bool> = (0..DAYS_PER_WEEK).map(|_| rng.random_bool(spec.missing_day_rate)).collect();
        if missing.iter().all(|&m| m) {
            missing[0] = false;
        }
        for (day, &skip) in missing.iter().enumerate() {
            let values = day_values(&spec.profile, behavior_risky, &mut rng);
            if skip {
                continue;
            }
            let date = start + chrono::Days::new(day as u64);
            for (signal, value) in values {
                behavior.write_record([week.subject.as_str(), &date.to_string(), signal, &value.to_string()])?;
            }
        }
        if !week.surveyed {
            continue;
        }
        let surveys = if spec.profile == "globem" { 1 } else { rng.random_range(1..=3) };
        let mut days: Vec<u64> = (0..DAYS_PER_WEEK as u64).collect();
        days.shuffle(&mut rng);
        let mut days: Vec<u64> = days.into_iter().take(surveys).collect();
        days.sort_unstable();
        let mental_risky = if risky { true } else { rng.random_bool(0.12) };
        for day in days {
            let date: NaiveDate = start + chrono::Days::new(day);
            let values: BTreeMap<&str, f64> = survey_values(&spec.profile, mental_risky, &mut rng).into_iter().collect();
            let note = if risky && rng.random_bool(0.4) {
                "felt isolated and stayed home"
            } else if !risky && rng.random_bool(0.1) {
                "busy week at work"
            } else {
                ""
            };
            let mut row = vec![week.subject.clone(), date.to_string()];
            row.extend(items.iter().map(|k| values[k.as_str()].to_string()));
            row.push(note.to_string());
            mental.write_record(&row)?;
        }
        let label = if risky { Risk::AtRisk } else { Risk::NoRisk };
        labels.write_record([CaseKey::new(week.subject.clone(), week.index).to_string(), label.as_u8().to_string()])?;
    }
    behavior.flush().map_err(io_err(&behavior_path))?;
    mental.flush().map_err(io_err(&mental_path))?;
    labels.flush().map_err(io_err(&labels_path))?;
    drop((behavior, mental, labels));

    let mut files = BTreeMap::new();
    for name in [BEHAVIOR_FILE, MENTAL_FILE, LABELS_FILE] {
        let path = dir.join(name);
        files.insert(name.to_string(), file_digest(&path).map_err(io_err(&path))?);
    }
    let manifest = FixtureManifest {
        spec: spec.clone(),
        expected_cases: case_ids.len(),
        expected_positives: positives,
        files,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Parses and aggregates a cohort directory written by [`write_cohort`].
pub fn load_cohort(dir: &Path, profile: &DatasetProfile, exec: Execution) -> Result<(Vec<AssessmentCase>, LabelTable), FixtureError> {
    let policy = ParsePolicy::default();
    let (series, _) = parse_behavior_files(&[dir.join(BEHAVIOR_FILE)], profile, &policy, exec)?;
    let (records, _) = parse_mental_files(&[dir.join(MENTAL_FILE)], profile, &policy, exec)?;
    let labels = parse_label_table(&dir.join(LABELS_FILE))?;
    let agg = aggregate_weekly(&series, &records, Some(&labels), profile);
    Ok((agg.cases, labels))
}

const SFT_RECORDS: [&str; 10] = [
    "I have felt depressed for most of the month and I can't get out of bed before noon.",
    "Work is piling up and I feel anxious every morning; my chest gets tight before meetings.",
    "Since the breakup I feel hopeless about the future and I have stopped seeing friends.",
    "I am exhausted all the time even though I sleep nine hours, and nothing feels fun anymore.",
    "My exams are close and I panic whenever I open my notes; I keep crying at night.",
    "I feel sad most days and I skip meals because I am not hungry.",
    "I can't concentrate at work and I have been snapping at my family over small things.",
    "Lately I feel empty and exhausted, and I have started drinking alone in the evenings.",
    "I moved to a new city and feel lonely and anxious; I barely leave my apartment.",
    "I keep thinking I am a burden to everyone and I feel hopeless most evenings.",
];

const SFT_OUTCOMES: [&str; 10] = [
    "The post shows persistent low mood and loss of function, consistent with depression.",
    "The post describes anticipatory anxiety with somatic symptoms, consistent with an anxiety problem.",
    "Hopelessness and social withdrawal after a loss indicate depressive symptoms that need attention.",
    "Fatigue despite long sleep together with anhedonia suggests depression.",
    "Panic responses and frequent crying under exam stress indicate significant anxiety.",
    "Persistent sadness with appetite loss indicates depressive symptoms.",
    "Poor concentration and irritability suggest stress-related mental health problems.",
    "Emptiness, exhaustion and solitary drinking indicate depression with a risky coping pattern.",
    "Loneliness and avoidance after relocation suggest social anxiety and low mood.",
    "Perceived burdensomeness with hopelessness is a serious risk signal requiring follow-up.",
];

/// Ten fixed SFT pairs.
pub fn sft_fixture() -> Vec<SftPair> {
    SFT_RECORDS
        .iter()
        .zip(SFT_OUTCOMES)
        .enumerate()
        .map(|(i, (r, o))| SftPair {
            id: format!("sft{:02}", i + 1),
            record: (*r).to_string(),
            outcome: o.to_string(),
            source_dataset: "fixture".into(),
        })
        .collect()
}

/// Seeds and loop budgets of the golden pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldenSettings {
    pub refine: RefineOptions,
    pub causal: CausalConfig,
    pub eval: EvalConfig,
    pub augment_seed: u64,
}

impl Default for GoldenSettings {
    fn default() -> Self {
        Self {
            refine: RefineOptions::default(),
            causal: CausalConfig::default(),
            eval: EvalConfig { k_folds: 5, fold_seed: 7 },
            augment_seed: 11,
        }
    }
}

/// Every artifact of one golden pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenOutputs {
    pub cases: Vec<AssessmentCase>,
    pub refined: Vec<RefinedRecord>,
    pub batch: AssessmentBatch,
    pub evaluation: EvaluationOutput,
    pub augmented: AugmentedDataset,
}

pub const GOLDEN_OUTPUT_FILES: [&str; 6] = [
    "cases.jsonl",
    "refined.jsonl",
    "assessments.jsonl",
    "unanalyzable.jsonl",
    "evaluation.json",
    "augmented.jsonl",
];

impl GoldenOutputs {
    /// File name to serialized content, in [`GOLDEN_OUTPUT_FILES`] order.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        let eval = serde_json::to_string_pretty(&self.evaluation).expect("report serializes") + "\n";
        vec![
            ("cases.jsonl", jsonl::to_string(&self.cases)),
            ("refined.jsonl", jsonl::to_string(&self.refined)),
            ("assessments.jsonl", jsonl::to_string(&self.batch.assessments)),
            ("unanalyzable.jsonl", jsonl::to_string(&self.batch.unanalyzable)),
            ("evaluation.json", eval),
            ("augmented.jsonl", jsonl::to_string(&self.augmented.records)),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<(), FixtureError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, text) in self.render() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Runs ingest, refine, assess, evaluate and augment over the golden inputs.
pub fn run_golden_pipeline(
    input_dir: &Path,
    gateway: &Gateway,
    settings: &GoldenSettings,
    exec: Execution,
) -> Result<GoldenOutputs, FixtureError> {
    let profile = DatasetProfile::pmdata();
    let prompts = PromptSet::default();
    let (cases, labels) = load_cohort(input_dir, &profile, exec)?;
    let mut refined = Vec::new();
    for (key, result) in refine_all(&cases, &settings.refine, gateway, &prompts, exec) {
        refined.push(result.map_err(|e| FixtureError::Pipeline(format!("refine {key}: {e}")))?);
    }
    let formatted: Vec<_> = refined.iter().map(|r| r.formatted.clone()).collect();
    let batch = assess_all(&cases, &formatted, &settings.causal, gateway, &prompts, exec);
    let evaluation = evaluate_run(&batch, Some(&labels), gateway, &settings.eval, exec)
        .map_err(|e| FixtureError::Pipeline(format!("evaluate: {e}")))?;
    let pairs: Vec<SftPair> = jsonl::read(&input_dir.join(SFT_FILE))?;
    let augmented = augment_dataset(&pairs, gateway, &prompts, settings.augment_seed, exec)
        .map_err(|e| FixtureError::Pipeline(format!("augment: {e}")))?;
    Ok(GoldenOutputs {
        cases,
        refined,
        batch,
        evaluation,
        augmented,
    })
}

/// Layout of a golden fixture directory.
#[derive(Debug, Clone)]
pub struct GoldenPaths {
    pub root: PathBuf,
}

impl GoldenPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn input(&self) -> PathBuf {
        self.root.join("input")
    }

    pub fn tape(&self) -> PathBuf {
        self.root.join("tape.jsonl")
    }

    pub fn expected(&self) -> PathBuf {
        self.root.join("expected")
    }
}

/// Loop budgets whose refine requests the golden tape covers.
pub const GOLDEN_REFINE_BUDGETS: [u32; 4] = [0, 1, 3, 5];

/// Generates inputs, records a tape from the simulated model, then replays
/// the tape to produce the expected outputs.
pub fn build_golden(root: &Path) -> Result<GoldenOutputs, FixtureError> {
    let paths = GoldenPaths::new(root);
    let input = paths.input();
    write_cohort(&golden_spec(), &input)?;
    jsonl::write(&input.join(SFT_FILE), &sft_fixture())?;

    let settings = GoldenSettings::default();
    let recorder = Gateway::from_backend(SimulatedModel::default()).with_logging();
    let prompts = PromptSet::default();
    let profile = DatasetProfile::pmdata();
    let (cases, _) = load_cohort(&input, &profile, Execution::Sequential)?;
    for k in GOLDEN_REFINE_BUDGETS {
        let options = RefineOptions { k, ..settings.refine };
        for (key, result) in refine_all(&cases, &options, &recorder, &prompts, Execution::Sequential) {
            result.map_err(|e| FixtureError::Pipeline(format!("refine {key}: {e}")))?;
        }
    }
    run_golden_pipeline(&input, &recorder, &settings, Execution::Sequential)?;
    let log = recorder.session_log().expect("logging enabled");
    let tape = record_tape(&log)?;
    tape.save(&paths.tape())?;

    let replay = Gateway::from_backend(TapeBackend::new(Tape::load(&paths.tape())?));
    let outputs = run_golden_pipeline(&input, &replay, &settings, Execution::Sequential)?;
    outputs.write(&paths.expected())?;
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::cohort_summary;

    #[test]
    fn pmdata_like_prevalence_and_case_count() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_cohort(&pmdata_like(5), dir.path()).unwrap();
        let (cases, _) = load_cohort(dir.path(), &DatasetProfile::pmdata(), Execution::default()).unwrap();
        assert_eq!(cases.len(), manifest.expected_cases);
        let summary = cohort_summary(&cases).unwrap();
        let target = 0.098 * cases.len() as f64;
        assert!((summary.positive_cases as f64 - target).abs() <= 1.0);
    }

    #[test]
    fn globem_split_is_a_quarter_of_participants() {
        let spec = globem_like(1);
        assert_eq!(spec.subjects.len(), 124);
        assert_eq!(spec.split.as_ref().unwrap().participants, 497);
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_cohort(&golden_spec(), a.path()).unwrap();
        let mb = write_cohort(&golden_spec(), b.path()).unwrap();
        assert_eq!(ma.files, mb.files);
        assert_eq!(ma.expected_cases, 20);
        assert_eq!(ma.expected_positives, 4);
    }
}
