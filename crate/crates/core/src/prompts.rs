//! Prompt templates.
//!
//! Templates ship in `prompts/` and are compiled in; a directory with files
//! of the same names overrides them. Placeholders are written `{{name}}`.

use std::collections::BTreeMap;
use std::path::Path;

/// Bumped whenever a shipped template changes wording.
pub const PROMPT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptKind {
    RefineEvaluate,
    RefineRewrite,
    ExtractBehavior,
    ExtractMental,
    StrengthBatch,
    StrengthPair,
    Counterfactual,
    Verdict,
    Augment,
    FormatReminder,
}

impl PromptKind {
    pub const ALL: [PromptKind; 10] = [
        PromptKind::RefineEvaluate,
        PromptKind::RefineRewrite,
        PromptKind::ExtractBehavior,
        PromptKind::ExtractMental,
        PromptKind::StrengthBatch,
        PromptKind::StrengthPair,
        PromptKind::Counterfactual,
        PromptKind::Verdict,
        PromptKind::Augment,
        PromptKind::FormatReminder,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::RefineEvaluate => "refine_evaluate.txt",
            PromptKind::RefineRewrite => "refine_rewrite.txt",
            PromptKind::ExtractBehavior => "extract_behavior.txt",
            PromptKind::ExtractMental => "extract_mental.txt",
            PromptKind::StrengthBatch => "strength_batch.txt",
            PromptKind::StrengthPair => "strength_pair.txt",
            PromptKind::Counterfactual => "counterfactual.txt",
            PromptKind::Verdict => "verdict.txt",
            PromptKind::Augment => "augment.txt",
            PromptKind::FormatReminder => "format_reminder.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::RefineEvaluate => include_str!("../prompts/refine_evaluate.txt"),
            PromptKind::RefineRewrite => include_str!("../prompts/refine_rewrite.txt"),
            PromptKind::ExtractBehavior => include_str!("../prompts/extract_behavior.txt"),
            PromptKind::ExtractMental => include_str!("../prompts/extract_mental.txt"),
            PromptKind::StrengthBatch => include_str!("../prompts/strength_batch.txt"),
            PromptKind::StrengthPair => include_str!("../prompts/strength_pair.txt"),
            PromptKind::Counterfactual => include_str!("../prompts/counterfactual.txt"),
            PromptKind::Verdict => include_str!("../prompts/verdict.txt"),
            PromptKind::Augment => include_str!("../prompts/augment.txt"),
            PromptKind::FormatReminder => include_str!("../prompts/format_reminder.txt"),
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::RefineEvaluate => &["behavior_text"],
            PromptKind::RefineRewrite => &["behavior_text", "feedback"],
            PromptKind::ExtractBehavior => &["behavior_text"],
            PromptKind::ExtractMental => &["mental_text"],
            PromptKind::StrengthBatch => &["behavior_indicator", "mental_indicators", "context"],
            PromptKind::StrengthPair => &["behavior_indicator", "mental_indicator", "context"],
            PromptKind::Counterfactual => &[
                "strength",
                "behavior_indicator",
                "mental_indicator",
                "scenario",
                "context",
            ],
            PromptKind::Verdict => &[
                "behavior_text",
                "mental_text",
                "indicators",
                "retained_pairs",
                "weakened_pairs",
            ],
            PromptKind::Augment => &["label", "label_guidance", "record", "outcome"],
            PromptKind::FormatReminder => &["error"],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("{file}: missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { file: String, placeholder: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    templates: BTreeMap<PromptKind, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: PromptKind::ALL
                .iter()
                .map(|&k| (k, k.builtin().to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Built-in templates, with any same-named file in `dir` taking precedence.
    pub fn load(dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut set = Self::default();
        if let Some(dir) = dir {
            for kind in PromptKind::ALL {
                let path = dir.join(kind.file_name());
                if path.exists() {
                    let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    set.templates.insert(kind, text);
                }
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (kind, text) in &self.templates {
            for p in kind.placeholders() {
                if !text.contains(&format!("{{{{{p}}}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        file: kind.file_name().into(),
                        placeholder: (*p).into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    /// Fills `kind` with `vars`. Placeholders are substituted in one pass, so
    /// substituted text is never re-expanded.
    pub fn render(&self, kind: PromptKind, vars: &[(&str, &str)]) -> String {
        let template = self.template(kind);
        let mut out = String::with_capacity(template.len() + 256);
        let mut rest = template;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    let name = &after[..end];
                    match vars.iter().find(|(k, _)| *k == name) {
                        Some((_, v)) => out.push_str(v),
                        None => {
                            out.push_str("{{");
                            out.push_str(name);
                            out.push_str("}}");
                        }
                    }
                    rest = &after[end + 2..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }

    /// Digest over all templates, for run manifests.
    pub fn digest(&self) -> String {
        let joined: Vec<&str> = self.templates.values().map(String::as_str).collect();
        crate::digest::sha256_hex(joined.join("\u{1e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_have_their_placeholders() {
        PromptSet::default().validate().unwrap();
    }

    #[test]
    fn render_substitutes_once() {
        let set = PromptSet::default();
        let out = set.render(PromptKind::FormatReminder, &[("error", "bad {{error}}")]);
        assert!(out.contains("(bad {{error}})"));
    }

    #[test]
    fn directory_override_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("verdict.txt"), "no placeholders here").unwrap();
        assert!(matches!(
            PromptSet::load(Some(dir.path())),
            Err(PromptError::MissingPlaceholder { .. })
        ));
        std::fs::write(
            dir.path().join("verdict.txt"),
            "{{behavior_text}}{{mental_text}}{{indicators}}{{retained_pairs}}{{weakened_pairs}}",
        )
        .unwrap();
        let set = PromptSet::load(Some(dir.path())).unwrap();
        assert_ne!(set.digest(), PromptSet::default().digest());
    }
}
