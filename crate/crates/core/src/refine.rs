//! Text rendering of behavior windows and the bounded self-refine loop.
//!
//! Each loop round asks the model to critique the current rendering for
//! redundancy and comprehensibility, then to rewrite it using that critique.
//! A rewrite is accepted only if a mechanical content audit passes (every
//! signal named, every observed day's value present) and its token count does
//! not grow. The loop stops after `k` rounds or two consecutive rejections and
//! returns the accepted version with the lowest (perplexity, token count).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::evaluation::perplexity;
use crate::exec::Execution;
use crate::gateway::{Gateway, GatewayError};
use crate::ingestion::{AssessmentCase, CaseKey};
use crate::prompts::{PromptKind, PromptSet};
use crate::structured;

pub const ABSENT_MARKER: &str = "absent";

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("case {0} has an empty behavior window")]
    EmptyWindow(CaseKey),
    #[error("text scored to zero tokens")]
    DegenerateText,
    #[error("case {0} not found")]
    NotFound(CaseKey),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatScore {
    pub token_count: usize,
    pub perplexity: f64,
}

impl FormatScore {
    /// Lexicographic (perplexity, tokens) ordering used to pick the best version.
    fn better_than(&self, other: &FormatScore) -> bool {
        match self.perplexity.total_cmp(&other.perplexity) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => self.token_count < other.token_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormattedBehavior {
    pub case_key: CaseKey,
    pub text: String,
    pub score: FormatScore,
    pub source_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineIteration {
    pub text: String,
    /// Absent when the candidate was rejected before scoring.
    pub score: Option<FormatScore>,
    pub accepted: bool,
    pub feedback_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub loop_budget: u32,
    pub iterations: Vec<RefineIteration>,
}

/// One line of the refined-behavior file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRecord {
    #[serde(flatten)]
    pub formatted: FormattedBehavior,
    pub trace: RefineTrace,
}

impl RefinedRecord {
    /// Score of the initial rendering.
    pub fn raw_score(&self) -> Option<FormatScore> {
        self.trace.iterations.first().and_then(|i| i.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub k: u32,
    pub require_audit: bool,
    pub require_token_non_increase: bool,
    pub max_consecutive_rejections: u32,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            k: 3,
            require_audit: true,
            require_token_non_increase: true,
            max_consecutive_rejections: 2,
        }
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Deterministic tabular rendering: a header line, then one line per signal
/// listing all seven days with their dates, absent days marked explicitly.
pub fn render_initial(case: &AssessmentCase) -> Result<String, RefineError> {
    if case.behavior_window.is_empty() {
        return Err(RefineError::EmptyWindow(case.key()));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Raw behavior data for subject {}, week {} ({} to {}).",
        case.subject_id,
        case.week_index,
        case.week_start,
        case.day_date(6)
    );
    for (signal, days) in &case.behavior_window {
        let unit = unit_hint(signal);
        let cells: Vec<String> = days
            .iter()
            .enumerate()
            .map(|(d, v)| {
                let value = v.map(format_value).unwrap_or_else(|| ABSENT_MARKER.to_string());
                format!("{}: {value}", case.day_date(d))
            })
            .collect();
        let _ = writeln!(out, "{signal} ({unit}): {}", cells.join(", "));
    }
    Ok(out.trim_end().to_string())
}

fn unit_hint(signal: &str) -> &'static str {
    match signal {
        s if s.ends_with("_minutes") => "min",
        "resting_heart_rate" => "bpm",
        "calories" => "kcal",
        "location_entropy" => "nats",
        _ => "count",
    }
}

fn canonical(s: &str) -> String {
    s.to_lowercase().replace(['_', '-'], " ")
}

fn date_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{4}-\d{2}-\d{2}").expect("valid regex"))
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)(k\b)?").expect("valid regex"))
}

/// Numbers on the lines mentioning `signal`, ignoring calendar dates.
fn numbers_for_signal(text: &str, signal: &str) -> Option<Vec<f64>> {
    let name = canonical(signal);
    let mut found = false;
    let mut numbers = Vec::new();
    for line in text.lines() {
        let canon = canonical(line);
        if !canon.contains(&name) {
            continue;
        }
        found = true;
        let stripped = date_re().replace_all(&canon, " ");
        let without_name = stripped.replace(&name, " ");
        for cap in number_re().captures_iter(&without_name) {
            let Ok(mut v) = cap[1].parse::<f64>() else {
                continue;
            };
            if cap.get(2).is_some() {
                v *= 1000.0;
            }
            numbers.push(v);
        }
    }
    found.then_some(numbers)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub missing_signals: Vec<String>,
    /// (signal, day index) whose value does not appear in the text.
    pub uncovered_days: Vec<(String, usize)>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.missing_signals.is_empty() && self.uncovered_days.is_empty()
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if !self.missing_signals.is_empty() {
            parts.push(format!("missing signals {:?}", self.missing_signals));
        }
        if !self.uncovered_days.is_empty() {
            parts.push(format!("{} observed day values not found", self.uncovered_days.len()));
        }
        format!("audit failure: {}", parts.join("; "))
    }
}

/// Mechanical content check of a rendering against its case.
///
/// Every signal must be named (case and `_`/space insensitive) and every
/// observed value must appear on a line naming its signal, up to rounding
/// (`max(0.5, 1%)`; a `k` suffix multiplies by 1000).
pub fn audit(text: &str, case: &AssessmentCase) -> AuditReport {
    let mut report = AuditReport::default();
    for (signal, days) in &case.behavior_window {
        let Some(numbers) = numbers_for_signal(text, signal) else {
            report.missing_signals.push(signal.clone());
            continue;
        };
        for (day, value) in days.iter().enumerate() {
            let Some(v) = value else { continue };
            let tol = (0.01 * v.abs()).max(0.5);
            if !numbers.iter().any(|n| (n - v).abs() <= tol) {
                report.uncovered_days.push((signal.clone(), day));
            }
        }
    }
    report
}

/// Token count and perplexity of `text` under the gateway's scoring model.
pub fn score_format(text: &str, gateway: &Gateway) -> Result<FormatScore, RefineError> {
    let scored = gateway.score_text(text)?;
    let logprobs = scored.logprobs();
    if logprobs.is_empty() {
        return Err(RefineError::DegenerateText);
    }
    let perplexity = perplexity(&logprobs).map_err(|_| RefineError::DegenerateText)?;
    Ok(FormatScore {
        token_count: logprobs.len(),
        perplexity,
    })
}

/// Exact keyed lookup of cases.
#[derive(Debug, Clone, Default)]
pub struct CaseStore {
    cases: BTreeMap<CaseKey, AssessmentCase>,
}

impl CaseStore {
    pub fn new(cases: impl IntoIterator<Item = AssessmentCase>) -> Self {
        Self {
            cases: cases.into_iter().map(|c| (c.key(), c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CaseKey> {
        self.cases.keys()
    }

    pub fn retrieve_window(&self, subject_id: &str, week_index: u32) -> Result<&AssessmentCase, RefineError> {
        let key = CaseKey::new(subject_id, week_index);
        self.cases.get(&key).ok_or(RefineError::NotFound(key))
    }
}

fn feedback_from(response: &str) -> String {
    structured::fenced_body(response)
        .unwrap_or_else(|_| response.to_string())
        .trim()
        .to_string()
}

/// Runs the self-refine loop on one case.
pub fn self_refine(
    case: &AssessmentCase,
    options: &RefineOptions,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> Result<(FormattedBehavior, RefineTrace), RefineError> {
    let key = case.key();
    let initial = render_initial(case)?;
    let initial_score = score_format(&initial, gateway)?;
    let mut trace = RefineTrace {
        loop_budget: options.k,
        iterations: vec![RefineIteration {
            text: initial.clone(),
            score: Some(initial_score),
            accepted: true,
            feedback_text: String::new(),
            rejection: None,
        }],
    };
    let (mut current, mut current_score) = (initial.clone(), initial_score);
    let (mut best, mut best_score) = (initial, initial_score);
    let mut consecutive_rejections = 0;

    for _ in 0..options.k {
        let evaluation = gateway.ask(
            &prompts.render(PromptKind::RefineEvaluate, &[("behavior_text", &current)]),
            &format!("{key}/refine/evaluate"),
        )?;
        let feedback = feedback_from(&evaluation);
        let rewrite = gateway.ask(
            &prompts.render(
                PromptKind::RefineRewrite,
                &[("behavior_text", &current), ("feedback", &feedback)],
            ),
            &format!("{key}/refine/rewrite"),
        )?;

        let mut iteration = RefineIteration {
            text: String::new(),
            score: None,
            accepted: false,
            feedback_text: feedback,
            rejection: None,
        };
        match structured::fenced_body(&rewrite) {
            Err(e) => iteration.rejection = Some(format!("unparseable rewrite: {e}")),
            Ok(body) if body.trim().is_empty() => {
                iteration.rejection = Some("empty rewrite".into())
            }
            Ok(body) => {
                let candidate = body.trim().to_string();
                let report = audit(&candidate, case);
                iteration.text = candidate;
                if options.require_audit && !report.passed() {
                    iteration.rejection = Some(report.describe());
                } else {
                    let score = score_format(&iteration.text, gateway)?;
                    iteration.score = Some(score);
                    if options.require_token_non_increase && score.token_count > current_score.token_count {
                        iteration.rejection = Some(format!(
                            "token count grew from {} to {}",
                            current_score.token_count, score.token_count
                        ));
                    } else {
                        iteration.accepted = true;
                        current = iteration.text.clone();
                        current_score = score;
                        if score.better_than(&best_score) {
                            best = current.clone();
                            best_score = score;
                        }
                    }
                }
            }
        }
        let accepted = iteration.accepted;
        trace.iterations.push(iteration);
        if accepted {
            consecutive_rejections = 0;
        } else {
            consecutive_rejections += 1;
            if consecutive_rejections >= options.max_consecutive_rejections {
                break;
            }
        }
    }

    Ok((
        FormattedBehavior {
            case_key: key,
            text: best,
            score: best_score,
            source_digest: case.window_digest(),
        },
        trace,
    ))
}

/// Refines every case; failures are kept per case. Output follows input order.
pub fn refine_all(
    cases: &[AssessmentCase],
    options: &RefineOptions,
    gateway: &Gateway,
    prompts: &PromptSet,
    exec: Execution,
) -> Vec<(CaseKey, Result<RefinedRecord, RefineError>)> {
    exec.map(cases, |case| {
        let result = self_refine(case, options, gateway, prompts)
            .map(|(formatted, trace)| RefinedRecord { formatted, trace });
        (case.key(), result)
    })
}

/// Mean token count and perplexity of raw and refined renderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatTable {
    pub cases: usize,
    pub raw_mean_tokens: f64,
    pub raw_mean_perplexity: f64,
    pub refined_mean_tokens: f64,
    pub refined_mean_perplexity: f64,
}

impl FormatTable {
    pub fn from_records(records: &[RefinedRecord]) -> Option<Self> {
        let raws: Vec<FormatScore> = records.iter().filter_map(RefinedRecord::raw_score).collect();
        if raws.is_empty() || raws.len() != records.len() {
            return None;
        }
        let refined: Vec<FormatScore> = records.iter().map(|r| r.formatted.score).collect();
        let mean_tokens = |xs: &[FormatScore]| {
            xs.iter().map(|s| s.token_count as f64).sum::<f64>() / xs.len() as f64
        };
        let mean_ppl = |xs: &[FormatScore]| xs.iter().map(|s| s.perplexity).sum::<f64>() / xs.len() as f64;
        Some(Self {
            cases: records.len(),
            raw_mean_tokens: mean_tokens(&raws),
            raw_mean_perplexity: mean_ppl(&raws),
            refined_mean_tokens: mean_tokens(&refined),
            refined_mean_perplexity: mean_ppl(&refined),
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "{:<10} {:>10} {:>12}\n{:<10} {:>10.1} {:>12.3}\n{:<10} {:>10.1} {:>12.3}\n",
            "format", "tokens", "perplexity",
            "raw", self.raw_mean_tokens, self.raw_mean_perplexity,
            "refined", self.refined_mean_tokens, self.refined_mean_perplexity,
        )
    }
}
