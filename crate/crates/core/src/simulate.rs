//! A rule-based stand-in for a language model.
//!
//! [`SimulatedModel`] answers every shipped prompt template with a
//! deterministic, well-formed response derived from the data embedded in the
//! prompt: threshold rules for indicators, severity-driven link strengths
//! with hash jitter, a counting rule for verdicts, hashed bag-of-words
//! embeddings, and a token scorer that finds calendar dates and unit labels
//! unfamiliar. It exists to record replay tapes and to drive tests; it makes
//! no claim to clinical validity.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use sha2::{Digest, Sha256};

use crate::gateway::{CompletionRequest, EmbeddingVector, GatewayError, ModelBackend, ScoredText, TokenLogprob};
use crate::ingestion::DatasetProfile;

pub const EMBEDDING_DIMENSION: usize = 32;

#[derive(Debug, Clone)]
pub struct SimulatedModel {
    signals: Vec<String>,
}

impl Default for SimulatedModel {
    fn default() -> Self {
        let mut signals: Vec<String> = DatasetProfile::pmdata()
            .signals
            .into_iter()
            .chain(DatasetProfile::globem().signals)
            .map(|s| s.name)
            .collect();
        signals.sort();
        signals.dedup();
        // Longest first so that a name never matches inside a longer one.
        signals.sort_by_key(|s| std::cmp::Reverse(s.len()));
        Self { signals }
    }
}

/// Uniform value in `[0, 1)` from the hash of `parts`.
fn unit_hash(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    let d = h.finalize();
    let n = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (n >> 11) as f64 / (1u64 << 53) as f64
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*(?:[A-Za-z]+|\d{1,3}|[^\sA-Za-z\d])|\s+").expect("valid regex"))
}

fn date_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{4}-\d{2}-\d{2}").expect("valid regex"))
}

fn unit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\([a-z]+\)").expect("valid regex"))
}

/// Splits text into tokens that concatenate back to it.
pub fn tokenize(text: &str) -> Vec<&str> {
    token_re().find_iter(text).map(|m| m.as_str()).collect()
}

fn token_logprobs(text: &str) -> Vec<TokenLogprob> {
    let costly: Vec<(usize, usize, f64)> = date_re()
        .find_iter(text)
        .map(|m| (m.start(), m.end(), -3.0))
        .chain(unit_re().find_iter(text).map(|m| (m.start(), m.end(), -2.5)))
        .collect();
    let mut pos = 0;
    tokenize(text)
        .into_iter()
        .map(|tok| {
            let start = pos;
            pos += tok.len();
            let core = tok.trim_start();
            let core_start = start + (tok.len() - core.len());
            let base = if core.is_empty() {
                -0.2
            } else if let Some(&(_, _, c)) = costly.iter().find(|(s, e, _)| core_start >= *s && core_start < *e) {
                c
            } else if core.chars().all(|c| c.is_ascii_alphabetic()) {
                -0.9
            } else if core.chars().all(|c| c.is_ascii_digit()) {
                -1.2
            } else {
                -0.6
            };
            TokenLogprob {
                token: tok.to_string(),
                logprob: base - 0.1 * unit_hash(&["token", core]),
            }
        })
        .collect()
}

fn tagged<'a>(prompt: &'a str, tag: &str) -> &'a str {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let Some(start) = prompt.find(&open) else {
        return "";
    };
    let rest = &prompt[start + open.len()..];
    match rest.find(&close) {
        Some(end) => &rest[..end],
        None => rest,
    }
}

fn task_of(prompt: &str) -> &str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("### Task: "))
        .unwrap_or("")
        .trim()
}

fn fenced(body: &str) -> String {
    format!("```\n{}\n```", body.trim_end())
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// One signal line of a behavior rendering.
#[derive(Debug, Clone, PartialEq)]
struct SignalLine {
    name: String,
    unit: Option<String>,
    days: Vec<Option<f64>>,
}

impl SimulatedModel {
    fn signal_lines(&self, text: &str) -> Vec<SignalLine> {
        let mut out = Vec::new();
        for line in text.lines() {
            let Some((head, rest)) = line.split_once(':') else {
                continue;
            };
            let head = head.trim();
            let (name, unit) = match head.split_once(" (") {
                Some((n, u)) => (n.trim(), Some(u.trim_end_matches(')').to_string())),
                None => (head, None),
            };
            if !self.signals.iter().any(|s| s == name) {
                continue;
            }
            let days = if date_re().is_match(rest) {
                rest.split(',')
                    .map(|cell| cell.rsplit(':').next().unwrap_or("").trim().parse::<f64>().ok())
                    .collect()
            } else {
                rest.split_whitespace().map(|t| t.parse::<f64>().ok()).collect()
            };
            out.push(SignalLine {
                name: name.to_string(),
                unit,
                days,
            });
        }
        out
    }

    fn rewrite(&self, behavior: &str) -> String {
        let lines = self.signal_lines(behavior);
        let header = behavior.lines().next().unwrap_or("");
        let dates: Vec<&str> = date_re().find_iter(header).map(|m| m.as_str()).collect();
        let start = dates.first().copied().unwrap_or("");
        let subject = header
            .split_whitespace()
            .skip_while(|w| *w != "subject" && *w != "Subject")
            .nth(1)
            .or_else(|| header.split_whitespace().next())
            .unwrap_or("")
            .trim_end_matches(',');
        let week = header
            .split_whitespace()
            .skip_while(|w| *w != "week")
            .nth(1)
            .unwrap_or("")
            .trim_end_matches(',');
        let has_day_dates = behavior.lines().skip(1).any(|l| date_re().is_match(l));
        let has_units = lines.iter().any(|l| l.unit.is_some());
        let has_decimals = lines
            .iter()
            .flat_map(|l| l.days.iter().flatten())
            .any(|v| v.fract() != 0.0 && *v >= 10.0);

        let cells = |days: &[Option<f64>], round: bool| -> String {
            days.iter()
                .map(|d| match d {
                    None => "-".to_string(),
                    Some(v) if round && *v >= 10.0 => format!("{}", v.round() as i64),
                    Some(v) if round => format_value((v * 10.0).round() / 10.0),
                    Some(v) => format_value(*v),
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = Vec::new();
        if has_day_dates {
            out.push(format!("Subject {subject} week {week} from {start}, one value per day, - = no data"));
            for l in &lines {
                match &l.unit {
                    Some(u) => out.push(format!("{} ({u}): {}", l.name, cells(&l.days, false))),
                    None => out.push(format!("{}: {}", l.name, cells(&l.days, false))),
                }
            }
        } else if has_units || has_decimals {
            out.push(format!("{subject} w{week} from {start}, - = no data"));
            for l in &lines {
                out.push(format!("{}: {}", l.name, cells(&l.days, true)));
            }
        } else {
            // Nothing left to trim: a summary, which drops daily values.
            out.push(format!("{subject} w{week} weekly means"));
            for l in &lines {
                let present: Vec<f64> = l.days.iter().flatten().copied().collect();
                let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
                out.push(format!("{} averaged {}", l.name, format_value(round2(mean))));
            }
        }
        fenced(&out.join("\n"))
    }

    fn evaluate_format(&self, behavior: &str) -> String {
        let has_day_dates = behavior.lines().skip(1).any(|l| date_re().is_match(l));
        let has_units = self.signal_lines(behavior).iter().any(|l| l.unit.is_some());
        let (redundancy, suggestion) = if has_day_dates {
            ("every value repeats its full calendar date", "state the week start once and list values in day order")
        } else if has_units {
            ("unit labels and extra decimals add tokens without information", "drop units and round values")
        } else {
            ("little redundancy remains", "summarize each signal")
        };
        fenced(&format!(
            "redundancy: {redundancy}\ncomprehensibility: values are readable but dense\nsuggestion: {suggestion}"
        ))
    }

    fn behavior_indicators(&self, behavior: &str) -> Vec<(String, &'static str)> {
        let means: BTreeMap<String, f64> = self
            .signal_lines(behavior)
            .into_iter()
            .filter_map(|l| {
                let present: Vec<f64> = l.days.iter().flatten().copied().collect();
                (!present.is_empty()).then(|| (l.name, present.iter().sum::<f64>() / present.len() as f64))
            })
            .collect();
        let mut out = Vec::new();
        let mut push = |d: &str, s| out.push((d.to_string(), s));
        if let Some(&v) = means.get("steps") {
            if v < 4000.0 {
                push("very low physical activity", "high");
            } else if v < 6500.0 {
                push("reduced physical activity", "moderate");
            }
        }
        if let Some(&v) = means.get("sleep_minutes") {
            if v < 330.0 {
                push("severe sleep deprivation", "high");
            } else if v < 390.0 {
                push("short sleep", "moderate");
            }
        }
        if let Some(&v) = means.get("resting_heart_rate") {
            if v > 74.0 {
                push("elevated resting heart rate", "moderate");
            }
        }
        if let Some(&v) = means.get("very_active_minutes") {
            if v < 8.0 {
                push("little vigorous activity", "low");
            }
        }
        if let Some(&v) = means.get("time_at_home_minutes") {
            if v > 1100.0 {
                push("reduced social interactions", "moderate");
            }
        }
        if let Some(&v) = means.get("location_entropy") {
            if v < 0.8 {
                push("low mobility", "moderate");
            }
        }
        if let Some(&v) = means.get("phone_unlocks") {
            if v > 150.0 {
                push("heavy phone use", "low");
            }
        }
        out
    }

    fn mental_indicators(mental: &str) -> Vec<(String, &'static str)> {
        let mut items = BTreeMap::new();
        let mut notes = String::new();
        for line in mental.lines().skip(1) {
            if let Some((k, v)) = line.split_once(':') {
                if k.trim() == "notes" {
                    notes = v.trim().to_lowercase();
                } else if let Ok(x) = v.trim().parse::<f64>() {
                    items.insert(k.trim().to_string(), x);
                }
            }
        }
        let get = |k: &str| items.get(k).copied();
        let mut out = Vec::new();
        let mut push = |d: &str, s| out.push((d.to_string(), s));
        if let Some(v) = get("mood") {
            if v <= 2.0 {
                push("low mood", "high");
            } else if v <= 2.75 {
                push("lowered mood", "moderate");
            }
        }
        if let Some(v) = get("stress") {
            if v >= 4.0 {
                push("high stress", "high");
            } else if v >= 3.25 {
                push("moderate stress", "moderate");
            }
        }
        if let Some(v) = get("fatigue") {
            if v >= 4.0 {
                push("fatigue", "moderate");
            }
        }
        if let Some(v) = get("readiness") {
            if v <= 3.0 {
                push("low readiness", "low");
            }
        }
        if let Some(v) = get("sleep_quality") {
            if v <= 2.0 {
                push("poor sleep quality", "moderate");
            }
        }
        if let Some(v) = get("phq4") {
            if v >= 9.0 {
                push("severe anxiety and depression symptoms", "high");
            } else if v >= 6.0 {
                push("moderate anxiety and depression symptoms", "moderate");
            }
        }
        if let Some(v) = get("pss4") {
            if v >= 10.0 {
                push("high perceived stress", "high");
            } else if v >= 7.0 {
                push("moderate stress", "moderate");
            }
        }
        if let Some(v) = get("panas_negative") {
            if v >= 18.0 {
                push("strong negative affect", "moderate");
            }
        }
        if let Some(v) = get("panas_positive") {
            if v <= 10.0 {
                push("low positive affect", "low");
            }
        }
        if notes.contains("alone") || notes.contains("isolated") || notes.contains("lonely") {
            push("loneliness", "moderate");
        }
        out
    }

    fn indicator_block(found: &[(String, &str)]) -> String {
        let records: Vec<String> = found
            .iter()
            .map(|(d, s)| format!("description: {d}\nseverity: {s}"))
            .collect();
        if records.is_empty() {
            fenced("none")
        } else {
            fenced(&records.join("\n---\n"))
        }
    }
}

fn severity_weight(line: &str) -> f64 {
    if line.ends_with("(high)") {
        0.8
    } else if line.ends_with("(moderate)") {
        0.55
    } else if line.ends_with("(low)") {
        0.3
    } else {
        0.4
    }
}

/// `id: description (severity)` split into id and the rest.
fn split_indicator(line: &str) -> (&str, &str) {
    line.split_once(':').map(|(a, b)| (a.trim(), b.trim())).unwrap_or(("", line.trim()))
}

fn link_strength(behavior: &str, mental: &str, context: &str) -> f64 {
    let base = (severity_weight(behavior) + severity_weight(mental)) / 2.0;
    let jitter = 0.4 * unit_hash(&["strength", behavior, mental, context]) - 0.2;
    round2((base + jitter).clamp(0.0, 1.0))
}

impl SimulatedModel {
    fn rate_batch(&self, prompt: &str) -> String {
        let behavior = tagged(prompt, "behavior_indicator");
        let context = tagged(prompt, "context");
        let records: Vec<String> = tagged(prompt, "mental_indicators")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|m| {
                let (id, desc) = split_indicator(m);
                let s = link_strength(behavior, m, context);
                format!(
                    "mental: {id}\nstrength: {s}\nrationale: {} plausibly contributes to {desc}",
                    split_indicator(behavior).1
                )
            })
            .collect();
        fenced(&records.join("\n---\n"))
    }

    fn rate_pair(&self, prompt: &str) -> String {
        let behavior = tagged(prompt, "behavior_indicator");
        let mental = tagged(prompt, "mental_indicator");
        let s = link_strength(behavior, mental, tagged(prompt, "context"));
        fenced(&format!("strength: {s}\nrationale: link judged on severity of both indicators"))
    }

    fn rerate(&self, prompt: &str) -> String {
        let original: f64 = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Earlier analysis rated the causal link below at "))
            .and_then(|r| r.trim_end_matches('.').parse().ok())
            .unwrap_or(0.5);
        let scenario = tagged(prompt, "scenario");
        let jitter = 0.35 * unit_hash(&["rerate", scenario, tagged(prompt, "context")]) - 0.25;
        let revised = round2((original + jitter).clamp(0.0, 1.0));
        let rationale = if revised < original {
            "with the behavior changed the mental indicator would be less critical"
        } else {
            "the mental indicator would likely ease if the behavior changed"
        };
        fenced(&format!("revised_strength: {revised}\nrationale: {rationale}"))
    }

    fn verdict(&self, prompt: &str) -> String {
        let retained: Vec<&str> = tagged(prompt, "retained_pairs")
            .lines()
            .filter(|l| !l.trim().is_empty() && l.trim() != "none")
            .collect();
        let mental: Vec<&str> = tagged(prompt, "indicators")
            .lines()
            .filter(|l| l.starts_with("[mental]"))
            .collect();
        let high = mental.iter().any(|l| l.ends_with("(high)"));
        let notable = mental.iter().any(|l| l.ends_with("(high)") || l.ends_with("(moderate)"));
        let at_risk = (retained.len() >= 2 && notable) || (high && !retained.is_empty());
        let described: Vec<String> = retained
            .iter()
            .filter_map(|l| {
                let (b, rest) = l.split_once(" -> ")?;
                let b = b.split_once('(')?.1.trim_end_matches(')').trim();
                let m = rest.split_once('(')?.1.split_once(')')?.0;
                Some(format!("{b} linked to {m}"))
            })
            .collect();
        let evidence = if at_risk {
            format!(
                "The week shows persistent risk: {} survive the counterfactual check, so the person needs closer monitoring.",
                described.join("; ")
            )
        } else if described.is_empty() {
            "No behavioral indicator remains causally tied to the self-reported state after the counterfactual check; the week looks stable.".to_string()
        } else {
            format!(
                "Only a limited link remains ({}) and the self-report is mild, so no intervention is needed now.",
                described.join("; ")
            )
        };
        fenced(&format!("prediction: {}\nevidence: {evidence}", u8::from(at_risk)))
    }

    fn distort(&self, prompt: &str) -> String {
        let record = tagged(prompt, "record").trim();
        let label = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Distortion: "))
            .unwrap_or("")
            .trim();
        let (prefix, swaps, clue_prefix): (&str, &[(&str, &str)], &str) = match label {
            "stigma" => (
                "I'd rather not make a big deal of this, but",
                &[("depressed", "a bit off"), ("hopeless", "unsure"), ("anxious", "busy"), ("can't", "sometimes don't"), ("suicidal", "tired of things"), ("exhausted", "a little tired")],
                "minimized",
            ),
            "lack of awareness" => (
                "I think it's probably just my schedule, but",
                &[("depressed", "worn out"), ("hopeless", "bored"), ("anxious", "restless"), ("panic", "a racing heart"), ("exhausted", "physically tired"), ("sad", "low on energy")],
                "reframed",
            ),
            _ => (
                "I've always been the type to push through, so",
                &[("depressed", "in a slump"), ("hopeless", "stuck"), ("anxious", "on edge"), ("can't", "won't"), ("exhausted", "tired"), ("sad", "flat")],
                "recast",
            ),
        };
        let mut body = record.to_string();
        let mut clues = Vec::new();
        for (from, to) in swaps {
            if body.to_lowercase().contains(from) {
                body = replace_ci(&body, from, to);
                clues.push(format!("{clue_prefix} \"{from}\" as \"{to}\""));
            }
        }
        let keeps_case = body.starts_with("I ") || body.starts_with("I'");
        let distorted = match body.chars().next() {
            Some(c) if !keeps_case => format!("{prefix} {}{}", c.to_lowercase(), &body[c.len_utf8()..]),
            _ => format!("{prefix} {body}"),
        };
        clues.insert(0, format!("opened with \"{prefix}\" to soften the report"));
        let clue_lines: Vec<String> = clues.iter().map(|c| format!("clue: {c}")).collect();
        fenced(&format!("record: {}\n{}", distorted.replace('\n', " "), clue_lines.join("\n")))
    }
}

fn replace_ci(text: &str, from: &str, to: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::new();
    let mut last = 0;
    for (i, _) in lower.match_indices(from) {
        if i < last {
            continue;
        }
        out.push_str(&text[last..i]);
        out.push_str(to);
        last = i + from.len();
    }
    out.push_str(&text[last..]);
    out
}

impl ModelBackend for SimulatedModel {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let p = request.prompt_text.as_str();
        let response = match task_of(p) {
            "evaluate-behavior-format" => self.evaluate_format(tagged(p, "behavior")),
            "rewrite-behavior-format" => self.rewrite(tagged(p, "behavior")),
            "extract-behavior-indicators" => Self::indicator_block(&self.behavior_indicators(tagged(p, "behavior"))),
            "extract-mental-indicators" => Self::indicator_block(&Self::mental_indicators(tagged(p, "mental"))),
            "rate-causal-links" => self.rate_batch(p),
            "rate-causal-link" => self.rate_pair(p),
            "counterfactual-rerating" => self.rerate(p),
            "final-risk-verdict" => self.verdict(p),
            "counterfactual-record" => self.distort(p),
            other => return Err(GatewayError::Malformed(format!("simulated model has no rule for task {other:?}"))),
        };
        Ok(response)
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError> {
        Ok(ScoredText {
            text: text.to_string(),
            token_logprobs: token_logprobs(text),
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let mut v = vec![0.0; EMBEDDING_DIMENSION];
        for word in text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| w.len() > 2)
            .map(str::to_lowercase)
        {
            let h = unit_hash(&["embed", &word]);
            let slot = (h * EMBEDDING_DIMENSION as f64) as usize % EMBEDDING_DIMENSION;
            let sign = if unit_hash(&["sign", &word]) < 0.5 { -1.0 } else { 1.0 };
            v[slot] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(EmbeddingVector::new(v))
    }

    fn embedding_dimension(&self) -> Option<usize> {
        Some(EMBEDDING_DIMENSION)
    }
}
