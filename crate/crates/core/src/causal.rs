//! Three-stage causal reasoning over one case: factual indicator pairs,
//! counterfactual re-rating, and a combined verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::gateway::{Gateway, GatewayError};
use crate::ingestion::{AssessmentCase, CaseKey, MentalRecord, Risk};
use crate::prompts::{PromptKind, PromptSet};
use crate::refine::FormattedBehavior;
use crate::structured::{self, AskError, ParseError, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Behavior,
    Mental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Moderate,
    High,
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Severity::Low),
            "moderate" | "medium" => Ok(Severity::Moderate),
            "high" => Ok(Severity::High),
            other => Err(format!("unknown severity {other:?}")),
        }
    }
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Severity::Low => "low",
            Severity::Moderate => "moderate",
            Severity::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub id: String,
    pub modality: Modality,
    pub description: String,
    pub severity_hint: Option<Severity>,
}

impl Indicator {
    fn line(&self) -> String {
        match self.severity_hint {
            Some(s) => format!("{}: {} ({s})", self.id, self.description),
            None => format!("{}: {}", self.id, self.description),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalPair {
    pub behavior_indicator: String,
    pub mental_indicator: String,
    pub strength: f64,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Rated in the per-behavior batch prompt.
    Batch,
    /// Rated in a single-pair prompt.
    Pair,
    /// Unparseable even after retry; scored 0.
    Failed,
}

/// Logged strength for one (behavior, mental) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthScore {
    pub behavior_indicator: String,
    pub mental_indicator: String,
    pub strength: f64,
    pub rationale: String,
    pub source: ScoreSource,
}

impl StrengthScore {
    fn to_pair(&self) -> CausalPair {
        CausalPair {
            behavior_indicator: self.behavior_indicator.clone(),
            mental_indicator: self.mental_indicator.clone(),
            strength: self.strength,
            rationale: self.rationale.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactualAnalysis {
    pub threshold: f64,
    pub all_indicators: Vec<Indicator>,
    /// Every scored combination, in grid order.
    pub scores: Vec<StrengthScore>,
    /// Combinations with strength strictly above the threshold.
    pub pairs: Vec<CausalPair>,
}

/// Combinations strictly above `tau`.
pub fn select_pairs(scores: &[StrengthScore], tau: f64) -> Vec<CausalPair> {
    scores
        .iter()
        .filter(|s| s.strength > tau)
        .map(StrengthScore::to_pair)
        .collect()
}

impl FactualAnalysis {
    /// The pair set the logged scores would give at another threshold.
    pub fn pairs_at(&self, tau: f64) -> Vec<CausalPair> {
        select_pairs(&self.scores, tau)
    }

    pub fn indicator(&self, id: &str) -> Option<&Indicator> {
        self.all_indicators.iter().find(|i| i.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Upheld,
    Weakened,
    Added,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub behavior_indicator: String,
    pub mental_indicator: String,
    pub original_strength: f64,
    pub scenario_text: String,
    pub revised_strength: f64,
    pub rationale: String,
    pub verdict: Verdict,
    /// True when the re-rating was unparseable and defaulted to 0.
    #[serde(default)]
    pub parse_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualAnalysis {
    pub threshold: f64,
    pub scenarios: Vec<Scenario>,
    pub retained_pairs: Vec<CausalPair>,
}

impl CounterfactualAnalysis {
    pub fn weakened(&self) -> impl Iterator<Item = &Scenario> {
        self.scenarios.iter().filter(|s| s.verdict == Verdict::Weakened)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub case_key: CaseKey,
    pub prediction: Risk,
    pub evidence_text: String,
    pub factual: FactualAnalysis,
    pub counterfactual: CounterfactualAnalysis,
    /// Request tags of every gateway call made for this case, in order.
    pub transcript: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    pub tau: f64,
    /// Unselected combinations within this distance below `tau` are
    /// re-examined in the counterfactual pass.
    pub near_band: f64,
    /// Rate all mental indicators against one behavior indicator per prompt.
    pub batch_strengths: bool,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            near_band: 0.15,
            batch_strengths: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Extract,
    Factual,
    Counterfactual,
    Combine,
}

#[derive(Debug, thiserror::Error)]
pub enum CausalError {
    #[error("tau {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("refined behavior does not belong to case {0}")]
    DigestMismatch(CaseKey),
    #[error("behavior text is empty")]
    EmptyBehavior,
    #[error("{stage:?} response for {tag} unparseable: {source}")]
    Parse {
        stage: Stage,
        tag: String,
        #[source]
        source: ParseError,
    },
    #[error("{stage:?}: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
}

impl CausalError {
    pub fn stage(&self) -> Stage {
        match self {
            CausalError::InvalidTau(_) | CausalError::DigestMismatch(_) | CausalError::EmptyBehavior => {
                Stage::Input
            }
            CausalError::Parse { stage, .. } | CausalError::Gateway { stage, .. } => *stage,
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, CausalError::Gateway { source, .. } if source.is_transport())
    }

    fn from_ask(stage: Stage, tag: &str, err: AskError) -> Self {
        match err {
            AskError::Parse(source) => CausalError::Parse {
                stage,
                tag: tag.to_string(),
                source,
            },
            AskError::Gateway(source) => CausalError::Gateway { stage, source },
        }
    }
}

/// A stage error with the request tags issued before it.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct CaseFailure {
    #[source]
    pub error: CausalError,
    pub transcript: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unanalyzable {
    pub case_key: CaseKey,
    pub stage: Stage,
    pub reason: String,
    pub transport: bool,
    pub transcript: Vec<String>,
}

fn format_value(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Plain-text rendering of a mental record for prompts.
pub fn render_mental(record: &MentalRecord) -> String {
    let mut out = format!("Self-report of {} on {}:\n", record.subject_id, record.date);
    for (item, value) in &record.items {
        let _ = writeln!(out, "{item}: {}", format_value(*value));
    }
    if let Some(notes) = &record.notes {
        let _ = writeln!(out, "notes: {notes}");
    }
    out.trim_end().to_string()
}

fn parse_indicators(text: &str, modality: Modality) -> Result<Vec<Indicator>, ParseError> {
    let prefix = match modality {
        Modality::Behavior => "b",
        Modality::Mental => "m",
    };
    structured::parse_records(text)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let severity_hint = rec
                .get("severity")
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<Severity>().map_err(|reason| ParseError::BadValue {
                        field: "severity".into(),
                        reason,
                    })
                })
                .transpose()?;
            Ok(Indicator {
                id: format!("{prefix}{}", i + 1),
                modality,
                description: rec.require("description")?.to_string(),
                severity_hint,
            })
        })
        .collect()
}

/// Asks for behavior and mental indicators separately. Ids are `b1, b2, ...`
/// and `m1, m2, ...` in response order.
pub fn extract_indicators(
    key: &CaseKey,
    behavior_text: &str,
    mental_record: &MentalRecord,
    gateway: &Gateway,
    prompts: &PromptSet,
    transcript: &mut Vec<String>,
) -> Result<Vec<Indicator>, CausalError> {
    if behavior_text.trim().is_empty() {
        return Err(CausalError::EmptyBehavior);
    }
    let mental_text = render_mental(mental_record);
    let mut indicators = Vec::new();
    for (modality, kind, var, text, tag) in [
        (Modality::Behavior, PromptKind::ExtractBehavior, "behavior_text", behavior_text, "behavior"),
        (Modality::Mental, PromptKind::ExtractMental, "mental_text", mental_text.as_str(), "mental"),
    ] {
        let tag = format!("{key}/extract/{tag}");
        let prompt = prompts.render(kind, &[(var, text)]);
        let found = structured::ask_structured(gateway, prompts, &prompt, &tag, transcript, |r| {
            parse_indicators(r, modality)
        })
        .map_err(|e| CausalError::from_ask(Stage::Extract, &tag, e))?;
        indicators.extend(found);
    }
    Ok(indicators)
}

fn rationale_of(rec: &Record) -> String {
    rec.get("rationale").unwrap_or_default().to_string()
}

fn parse_batch(text: &str, mental: &[&Indicator]) -> Result<BTreeMap<String, (f64, String)>, ParseError> {
    let mut out = BTreeMap::new();
    for rec in structured::parse_records(text)? {
        let id = rec.require("mental")?.trim().to_string();
        if !mental.iter().any(|m| m.id == id) {
            return Err(ParseError::Invalid(format!("unknown mental indicator {id:?}")));
        }
        if out.insert(id.clone(), (rec.unit_interval("strength")?, rationale_of(&rec))).is_some() {
            return Err(ParseError::Invalid(format!("{id} rated twice")));
        }
    }
    if let Some(m) = mental.iter().find(|m| !out.contains_key(&m.id)) {
        return Err(ParseError::Invalid(format!("{} not rated", m.id)));
    }
    Ok(out)
}

fn parse_single_strength(text: &str, field: &str) -> Result<(f64, String), ParseError> {
    let records = structured::parse_records(text)?;
    let [rec] = records.as_slice() else {
        return Err(ParseError::Invalid(format!("expected one record, got {}", records.len())));
    };
    Ok((rec.unit_interval(field)?, rationale_of(rec)))
}

fn context_text(behavior_text: &str, mental_record: &MentalRecord) -> String {
    format!("{behavior_text}\n\n{}", render_mental(mental_record))
}

/// Rates every (behavior, mental) combination and keeps those strictly above
/// `config.tau`. A combination whose rating cannot be parsed is scored 0.
#[allow(clippy::too_many_arguments)]
pub fn factual_pairs(
    key: &CaseKey,
    indicators: &[Indicator],
    context: &str,
    config: &CausalConfig,
    gateway: &Gateway,
    prompts: &PromptSet,
    transcript: &mut Vec<String>,
) -> Result<FactualAnalysis, CausalError> {
    if !(0.0..=1.0).contains(&config.tau) {
        return Err(CausalError::InvalidTau(config.tau));
    }
    let behavior: Vec<&Indicator> = indicators.iter().filter(|i| i.modality == Modality::Behavior).collect();
    let mental: Vec<&Indicator> = indicators.iter().filter(|i| i.modality == Modality::Mental).collect();
    let mut scores = Vec::with_capacity(behavior.len() * mental.len());

    for b in &behavior {
        if mental.is_empty() {
            break;
        }
        let mut batch = None;
        if config.batch_strengths {
            let tag = format!("{key}/strength/{}", b.id);
            let listing: Vec<String> = mental.iter().map(|m| m.line()).collect();
            let prompt = prompts.render(
                PromptKind::StrengthBatch,
                &[
                    ("behavior_indicator", &b.line()),
                    ("mental_indicators", &listing.join("\n")),
                    ("context", context),
                ],
            );
            match structured::ask_structured(gateway, prompts, &prompt, &tag, transcript, |r| {
                parse_batch(r, &mental)
            }) {
                Ok(rated) => batch = Some(rated),
                Err(AskError::Parse(e)) => {
                    tracing::warn!(%tag, error = %e, "batch rating unparseable, rating pairs one by one");
                }
                Err(AskError::Gateway(source)) => {
                    return Err(CausalError::Gateway { stage: Stage::Factual, source })
                }
            }
        }
        for m in &mental {
            if let Some((strength, rationale)) = batch.as_ref().and_then(|r| r.get(&m.id)) {
                scores.push(StrengthScore {
                    behavior_indicator: b.id.clone(),
                    mental_indicator: m.id.clone(),
                    strength: *strength,
                    rationale: rationale.clone(),
                    source: ScoreSource::Batch,
                });
                continue;
            }
            let tag = format!("{key}/strength/{}/{}", b.id, m.id);
            let prompt = prompts.render(
                PromptKind::StrengthPair,
                &[
                    ("behavior_indicator", &b.line()),
                    ("mental_indicator", &m.line()),
                    ("context", context),
                ],
            );
            let score = match structured::ask_structured(gateway, prompts, &prompt, &tag, transcript, |r| {
                parse_single_strength(r, "strength")
            }) {
                Ok((strength, rationale)) => StrengthScore {
                    behavior_indicator: b.id.clone(),
                    mental_indicator: m.id.clone(),
                    strength,
                    rationale,
                    source: ScoreSource::Pair,
                },
                Err(AskError::Parse(e)) => {
                    tracing::warn!(%tag, error = %e, "pair rating unparseable, scored 0");
                    StrengthScore {
                        behavior_indicator: b.id.clone(),
                        mental_indicator: m.id.clone(),
                        strength: 0.0,
                        rationale: format!("unparseable rating: {e}"),
                        source: ScoreSource::Failed,
                    }
                }
                Err(AskError::Gateway(source)) => {
                    return Err(CausalError::Gateway { stage: Stage::Factual, source })
                }
            };
            scores.push(score);
        }
    }
    Ok(FactualAnalysis {
        threshold: config.tau,
        all_indicators: indicators.to_vec(),
        pairs: select_pairs(&scores, config.tau),
        scores,
    })
}

/// The what-if question posed for a pair: the behavioral side is reversed,
/// the mental side is left to the model.
pub fn scenario_text(behavior: &Indicator, mental: &Indicator) -> String {
    format!(
        "What if the user no longer showed {} and the rest of the week stayed the same? Would {} change?",
        behavior.description, mental.description
    )
}

/// Re-rates each selected pair under a counterfactual scenario, then sweeps
/// unselected combinations within `near_band` below the threshold.
pub fn counterfactual_pass(
    key: &CaseKey,
    factual: &FactualAnalysis,
    context: &str,
    config: &CausalConfig,
    gateway: &Gateway,
    prompts: &PromptSet,
    transcript: &mut Vec<String>,
) -> Result<CounterfactualAnalysis, CausalError> {
    let tau = factual.threshold;
    let selected: BTreeSet<(&str, &str)> = factual
        .pairs
        .iter()
        .map(|p| (p.behavior_indicator.as_str(), p.mental_indicator.as_str()))
        .collect();
    let is_selected = |s: &StrengthScore| selected.contains(&(s.behavior_indicator.as_str(), s.mental_indicator.as_str()));
    let near = |s: &StrengthScore| {
        s.source != ScoreSource::Failed && s.strength <= tau && tau - s.strength <= config.near_band + 1e-12
    };
    let candidates = factual
        .scores
        .iter()
        .filter(|s| is_selected(s))
        .chain(factual.scores.iter().filter(|s| !is_selected(s) && near(s)));

    let mut scenarios = Vec::new();
    for score in candidates {
        let in_a = is_selected(score);
        let (Some(b), Some(m)) = (
            factual.indicator(&score.behavior_indicator),
            factual.indicator(&score.mental_indicator),
        ) else {
            continue;
        };
        let scenario = scenario_text(b, m);
        let tag = format!("{key}/counterfactual/{}/{}", b.id, m.id);
        let prompt = prompts.render(
            PromptKind::Counterfactual,
            &[
                ("strength", &format!("{:.2}", score.strength)),
                ("behavior_indicator", &b.line()),
                ("mental_indicator", &m.line()),
                ("scenario", &scenario),
                ("context", context),
            ],
        );
        let (revised, rationale, parse_failed) =
            match structured::ask_structured(gateway, prompts, &prompt, &tag, transcript, |r| {
                parse_single_strength(r, "revised_strength")
            }) {
                Ok((v, r)) => (v, r, false),
                Err(AskError::Parse(e)) => {
                    tracing::warn!(%tag, error = %e, "re-rating unparseable, scored 0");
                    (0.0, format!("unparseable re-rating: {e}"), true)
                }
                Err(AskError::Gateway(source)) => {
                    return Err(CausalError::Gateway { stage: Stage::Counterfactual, source })
                }
            };
        let verdict = match (revised > tau, in_a) {
            (true, true) => Verdict::Upheld,
            (true, false) => Verdict::Added,
            (false, _) => Verdict::Weakened,
        };
        scenarios.push(Scenario {
            behavior_indicator: b.id.clone(),
            mental_indicator: m.id.clone(),
            original_strength: score.strength,
            scenario_text: scenario,
            revised_strength: revised,
            rationale,
            verdict,
            parse_failed,
        });
    }
    let retained_pairs = scenarios
        .iter()
        .filter(|s| s.revised_strength > tau)
        .map(|s| CausalPair {
            behavior_indicator: s.behavior_indicator.clone(),
            mental_indicator: s.mental_indicator.clone(),
            strength: s.revised_strength,
            rationale: s.rationale.clone(),
        })
        .collect();
    Ok(CounterfactualAnalysis {
        threshold: tau,
        scenarios,
        retained_pairs,
    })
}

fn describe_pair(factual: &FactualAnalysis, b: &str, m: &str, strength: f64, rationale: &str) -> String {
    let name = |id: &str| factual.indicator(id).map(|i| i.description.as_str()).unwrap_or("?").to_string();
    format!("{b} ({}) -> {m} ({}): {strength:.2}; {rationale}", name(b), name(m))
}

fn none_if_empty(lines: Vec<String>) -> String {
    if lines.is_empty() {
        "none".into()
    } else {
        lines.join("\n")
    }
}

fn parse_verdict(text: &str) -> Result<(Risk, String), ParseError> {
    let records = structured::parse_records(text)?;
    let [rec] = records.as_slice() else {
        return Err(ParseError::Invalid(format!("expected one record, got {}", records.len())));
    };
    let prediction = match rec.require("prediction")?.trim() {
        "0" => Risk::NoRisk,
        "1" => Risk::AtRisk,
        other => {
            return Err(ParseError::BadValue {
                field: "prediction".into(),
                reason: format!("expected 0 or 1, got {other:?}"),
            })
        }
    };
    Ok((prediction, rec.require("evidence")?.to_string()))
}

/// Final verdict prompt. The parsed prediction is returned as-is.
#[allow(clippy::too_many_arguments)]
pub fn combine(
    key: &CaseKey,
    factual: FactualAnalysis,
    counterfactual: CounterfactualAnalysis,
    behavior_text: &str,
    mental_record: &MentalRecord,
    gateway: &Gateway,
    prompts: &PromptSet,
    mut transcript: Vec<String>,
) -> Result<Assessment, CaseFailure> {
    let indicators: Vec<String> = factual
        .all_indicators
        .iter()
        .map(|i| {
            let modality = match i.modality {
                Modality::Behavior => "behavior",
                Modality::Mental => "mental",
            };
            format!("[{modality}] {}", i.line())
        })
        .collect();
    let retained: Vec<String> = counterfactual
        .retained_pairs
        .iter()
        .map(|p| describe_pair(&factual, &p.behavior_indicator, &p.mental_indicator, p.strength, &p.rationale))
        .collect();
    let weakened: Vec<String> = counterfactual
        .weakened()
        .map(|s| describe_pair(&factual, &s.behavior_indicator, &s.mental_indicator, s.revised_strength, &s.rationale))
        .collect();
    let tag = format!("{key}/verdict");
    let prompt = prompts.render(
        PromptKind::Verdict,
        &[
            ("behavior_text", behavior_text),
            ("mental_text", &render_mental(mental_record)),
            ("indicators", &none_if_empty(indicators)),
            ("retained_pairs", &none_if_empty(retained)),
            ("weakened_pairs", &none_if_empty(weakened)),
        ],
    );
    match structured::ask_structured(gateway, prompts, &prompt, &tag, &mut transcript, parse_verdict) {
        Ok((prediction, evidence_text)) => Ok(Assessment {
            case_key: key.clone(),
            prediction,
            evidence_text,
            factual,
            counterfactual,
            transcript,
        }),
        Err(e) => Err(CaseFailure {
            error: CausalError::from_ask(Stage::Combine, &tag, e),
            transcript,
        }),
    }
}

/// Runs extract, factual, counterfactual and combine for one case.
pub fn assess_case(
    case: &AssessmentCase,
    refined: &FormattedBehavior,
    config: &CausalConfig,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> Result<Assessment, CaseFailure> {
    let key = case.key();
    let fail = |error, transcript| CaseFailure { error, transcript };
    if !(0.0..=1.0).contains(&config.tau) {
        return Err(fail(CausalError::InvalidTau(config.tau), Vec::new()));
    }
    if refined.case_key != key || refined.source_digest != case.window_digest() {
        return Err(fail(CausalError::DigestMismatch(key), Vec::new()));
    }
    let mut transcript = Vec::new();
    let behavior_text = refined.text.as_str();
    let context = context_text(behavior_text, &case.mental_record);

    let indicators = match extract_indicators(&key, behavior_text, &case.mental_record, gateway, prompts, &mut transcript) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, transcript)),
    };
    let factual = match factual_pairs(&key, &indicators, &context, config, gateway, prompts, &mut transcript) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, transcript)),
    };
    let counterfactual = match counterfactual_pass(&key, &factual, &context, config, gateway, prompts, &mut transcript) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, transcript)),
    };
    combine(&key, factual, counterfactual, behavior_text, &case.mental_record, gateway, prompts, transcript)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssessmentBatch {
    pub assessments: Vec<Assessment>,
    pub unanalyzable: Vec<Unanalyzable>,
}

/// Assesses every case that has a refined rendering. Both output lists are
/// sorted by case key.
pub fn assess_all(
    cases: &[AssessmentCase],
    refined: &[FormattedBehavior],
    config: &CausalConfig,
    gateway: &Gateway,
    prompts: &PromptSet,
    exec: Execution,
) -> AssessmentBatch {
    let by_key: BTreeMap<&CaseKey, &FormattedBehavior> = refined.iter().map(|r| (&r.case_key, r)).collect();
    let mut sorted: Vec<&AssessmentCase> = cases.iter().collect();
    sorted.sort_by_key(|c| c.key());
    let results = exec.map(&sorted, |case| {
        let key = case.key();
        let Some(r) = by_key.get(&key) else {
            return Err(Unanalyzable {
                case_key: key,
                stage: Stage::Input,
                reason: "no refined behavior for case".into(),
                transport: false,
                transcript: Vec::new(),
            });
        };
        assess_case(case, r, config, gateway, prompts).map_err(|f| Unanalyzable {
            case_key: key,
            stage: f.error.stage(),
            reason: f.error.to_string(),
            transport: f.error.is_transport(),
            transcript: f.transcript,
        })
    });
    let mut batch = AssessmentBatch::default();
    for r in results {
        match r {
            Ok(a) => batch.assessments.push(a),
            Err(u) => {
                tracing::warn!(case = %u.case_key, reason = %u.reason, "case unanalyzable");
                batch.unanalyzable.push(u);
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CompletionRequest, ScriptedBackend};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn key() -> CaseKey {
        CaseKey::new("p01", 3)
    }

    fn ind(id: &str, modality: Modality, desc: &str) -> Indicator {
        Indicator {
            id: id.into(),
            modality,
            description: desc.into(),
            severity_hint: Some(Severity::Moderate),
        }
    }

    fn score(b: &str, m: &str, s: f64) -> StrengthScore {
        StrengthScore {
            behavior_indicator: b.into(),
            mental_indicator: m.into(),
            strength: s,
            rationale: String::new(),
            source: ScoreSource::Batch,
        }
    }

    fn block(body: &str) -> String {
        format!("Here you go.\n```\n{body}\n```\n")
    }

    fn gateway(f: impl Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static) -> Gateway {
        Gateway::from_backend(ScriptedBackend::new(f))
    }

    fn suffix(req: &CompletionRequest) -> String {
        req.request_tag.trim_start_matches(&format!("{}/", key())).to_string()
    }

    #[test]
    fn strict_threshold() {
        let scores = vec![score("b1", "m1", 0.9), score("b1", "m2", 0.5), score("b1", "m3", 0.2)];
        let pairs = select_pairs(&scores, 0.5);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].mental_indicator, "m1");
        assert!(select_pairs(&scores, 1.0).is_empty());
    }

    #[test]
    fn extraction_assigns_ids_and_modalities() {
        let gw = gateway(|req| {
            Some(match suffix(req).as_str() {
                "extract/behavior" => block(
                    "description: reduced social interactions\nseverity: moderate\n---\ndescription: short sleep\nseverity: high",
                ),
                "extract/mental" => block("description: moderate stress\nseverity: moderate"),
                _ => return None,
            })
        });
        let record = MentalRecord {
            subject_id: "p01".into(),
            date: chrono::NaiveDate::from_ymd_opt(2019, 11, 4).unwrap(),
            items: [("stress".to_string(), 4.0)].into_iter().collect(),
            notes: None,
        };
        let mut t = Vec::new();
        let inds = extract_indicators(&key(), "steps: 100", &record, &gw, &PromptSet::default(), &mut t).unwrap();
        let ids: Vec<_> = inds.iter().map(|i| (i.id.as_str(), i.modality)).collect();
        assert_eq!(
            ids,
            vec![("b1", Modality::Behavior), ("b2", Modality::Behavior), ("m1", Modality::Mental)]
        );
        assert_eq!(inds[1].severity_hint, Some(Severity::High));
        assert_eq!(t, vec!["p01/w3/extract/behavior", "p01/w3/extract/mental"]);
    }

    #[test]
    fn extraction_fails_after_one_retry() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let gw = gateway(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Some("no block at all".into())
        });
        let record = MentalRecord {
            subject_id: "p01".into(),
            date: chrono::NaiveDate::from_ymd_opt(2019, 11, 4).unwrap(),
            items: Default::default(),
            notes: None,
        };
        let err = extract_indicators(&key(), "x", &record, &gw, &PromptSet::default(), &mut Vec::new()).unwrap_err();
        assert!(matches!(err, CausalError::Parse { stage: Stage::Extract, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    fn grid() -> Vec<Indicator> {
        vec![
            ind("b1", Modality::Behavior, "reduced social interactions"),
            ind("b2", Modality::Behavior, "short sleep"),
            ind("m1", Modality::Mental, "moderate stress"),
            ind("m2", Modality::Mental, "low mood"),
            ind("m3", Modality::Mental, "fatigue"),
        ]
    }

    #[test]
    fn unbatched_grid_issues_one_query_per_combination() {
        let gw = gateway(|_| Some(block("strength: 0.6\nrationale: plausible")));
        let config = CausalConfig { batch_strengths: false, ..Default::default() };
        let fa = factual_pairs(&key(), &grid(), "ctx", &config, &gw, &PromptSet::default(), &mut Vec::new()).unwrap();
        assert_eq!(gw.requests_issued(), 6);
        assert_eq!(fa.scores.len(), 6);
        assert_eq!(fa.pairs.len(), 6);
    }

    #[test]
    fn batched_grid_issues_one_query_per_behavior_indicator() {
        let gw = gateway(|_| {
            Some(block(
                "mental: m1\nstrength: 0.9\nrationale: a\n---\nmental: m2\nstrength: 0.5\nrationale: b\n---\nmental: m3\nstrength: 0.2\nrationale: c",
            ))
        });
        let fa = factual_pairs(&key(), &grid(), "ctx", &CausalConfig::default(), &gw, &PromptSet::default(), &mut Vec::new())
            .unwrap();
        assert_eq!(gw.requests_issued(), 2);
        assert_eq!(fa.pairs.len(), 2);
        assert!(fa.pairs.iter().all(|p| p.mental_indicator == "m1"));
    }

    #[test]
    fn unparseable_batch_falls_back_and_failed_pair_scores_zero() {
        let gw = gateway(|req| {
            let s = suffix(req);
            Some(if s.contains("/m2") {
                "garbage".into()
            } else if s.contains("/m") {
                block("strength: 0.7\nrationale: ok")
            } else {
                block("mental: m1\nstrength: 0.9")
            })
        });
        let fa = factual_pairs(&key(), &grid(), "ctx", &CausalConfig::default(), &gw, &PromptSet::default(), &mut Vec::new())
            .unwrap();
        let failed: Vec<_> = fa.scores.iter().filter(|s| s.source == ScoreSource::Failed).collect();
        assert_eq!(failed.len(), 2);
        assert!(failed.iter().all(|s| s.strength == 0.0 && s.mental_indicator == "m2"));
        assert_eq!(fa.scores.len(), 6);
    }

    fn factual_of(scores: Vec<StrengthScore>, tau: f64) -> FactualAnalysis {
        FactualAnalysis {
            threshold: tau,
            all_indicators: grid(),
            pairs: select_pairs(&scores, tau),
            scores,
        }
    }

    #[test]
    fn counterfactual_weakens_upholds_and_adds() {
        let fa = factual_of(
            vec![score("b1", "m1", 0.8), score("b1", "m2", 0.7), score("b2", "m1", 0.4), score("b2", "m2", 0.1)],
            0.5,
        );
        let gw = gateway(|req| {
            Some(match suffix(req).as_str() {
                "counterfactual/b1/m1" => block("revised_strength: 0.3\nrationale: would be less critical"),
                "counterfactual/b1/m2" => block("revised_strength: 0.75\nrationale: holds"),
                "counterfactual/b2/m1" => block("revised_strength: 0.6\nrationale: overlooked"),
                _ => return None,
            })
        });
        let ca = counterfactual_pass(&key(), &fa, "ctx", &CausalConfig::default(), &gw, &PromptSet::default(), &mut Vec::new())
            .unwrap();
        let verdicts: Vec<_> = ca.scenarios.iter().map(|s| s.verdict).collect();
        assert_eq!(verdicts, vec![Verdict::Weakened, Verdict::Upheld, Verdict::Added]);
        let kept: Vec<_> = ca.retained_pairs.iter().map(|p| (p.behavior_indicator.as_str(), p.mental_indicator.as_str())).collect();
        assert_eq!(kept, vec![("b1", "m2"), ("b2", "m1")]);
        assert!(ca.scenarios[0].scenario_text.starts_with("What if the user no longer showed reduced social interactions"));
    }

    #[test]
    fn empty_factual_gives_empty_counterfactual() {
        let fa = factual_of(vec![score("b1", "m1", 0.1)], 0.5);
        let gw = gateway(|_| None);
        let ca = counterfactual_pass(&key(), &fa, "ctx", &CausalConfig::default(), &gw, &PromptSet::default(), &mut Vec::new())
            .unwrap();
        assert!(ca.scenarios.is_empty() && ca.retained_pairs.is_empty());
        assert_eq!(gw.requests_issued(), 0);
    }

    #[test]
    fn verdict_parsing_is_strict() {
        assert_eq!(parse_verdict(&block("prediction: 1\nevidence: x")).unwrap().0, Risk::AtRisk);
        assert!(parse_verdict(&block("prediction: yes\nevidence: x")).is_err());
        assert!(parse_verdict(&block("prediction: 0")).is_err());
    }

    #[test]
    fn mental_rendering() {
        let record = MentalRecord {
            subject_id: "p01".into(),
            date: chrono::NaiveDate::from_ymd_opt(2019, 11, 4).unwrap(),
            items: [("mood".to_string(), 2.5), ("stress".to_string(), 4.0)].into_iter().collect(),
            notes: Some("long shifts".into()),
        };
        assert_eq!(
            render_mental(&record),
            "Self-report of p01 on 2019-11-04:\nmood: 2.5\nstress: 4\nnotes: long shifts"
        );
    }

    proptest! {
        #[test]
        fn threshold_filter_and_monotonicity(
            strengths in prop::collection::vec(0.0f64..=1.0, 1..30),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let scores: Vec<_> = strengths.iter().enumerate().map(|(i, &s)| score("b1", &format!("m{i}"), s)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let fa = factual_of(scores, lo);
            for p in &fa.pairs {
                prop_assert!(p.strength > lo);
            }
            let kept: BTreeSet<_> = fa.pairs.iter().map(|p| p.mental_indicator.clone()).collect();
            for s in fa.scores.iter().filter(|s| !kept.contains(&s.mental_indicator)) {
                prop_assert!(s.strength <= lo);
            }
            let high: BTreeSet<_> = fa.pairs_at(hi).into_iter().map(|p| p.mental_indicator).collect();
            prop_assert!(high.is_subset(&kept));
        }
    }
}
