use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mindrisk_core::causal::CausalConfig;
use mindrisk_core::gateway::LiveConfig;
use mindrisk_core::refine::RefineOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Tape,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub backend: BackendKind,
    pub tape: Option<PathBuf>,
    /// Maximum backend requests per command.
    pub budget: Option<u64>,
    pub live: LiveConfig,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Live,
            tape: None,
            budget: None,
            live: LiveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `behavior*.csv` and `mental*.csv`.
    pub input_dir: PathBuf,
    /// Two-column `case_key,label` table; optional.
    pub labels: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub cases: Option<PathBuf>,
    pub refined: Option<PathBuf>,
    pub assessments: Option<PathBuf>,
    pub unanalyzable: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
    pub sft_input: Option<PathBuf>,
    pub augmented: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input_dir: "input".into(),
            labels: None,
            work_dir: "run".into(),
            cases: None,
            refined: None,
            assessments: None,
            unanalyzable: None,
            reports_dir: None,
            sft_input: None,
            augmented: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub augment_seed: u64,
    pub fold_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            augment_seed: 11,
            fold_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub k_folds: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self { k_folds: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    /// Directory whose template files override the built-in ones.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: String,
    pub paths: Paths,
    pub gateway: GatewaySettings,
    pub refine: RefineOptions,
    pub assess: CausalConfig,
    pub seeds: Seeds,
    pub evaluate: EvaluateSettings,
    pub prompts: PromptSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: "pmdata".into(),
            paths: Paths::default(),
            gateway: GatewaySettings::default(),
            refine: RefineOptions::default(),
            assess: CausalConfig::default(),
            seeds: Seeds::default(),
            evaluate: EvaluateSettings::default(),
            prompts: PromptSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub tape: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub k: Option<u32>,
    pub out: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Reads `path` (or the defaults when absent), applies overrides, makes
    /// every path absolute against the config file's directory and checks
    /// value ranges.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let config: PipelineConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, base)
            }
            None => (PipelineConfig::default(), PathBuf::new()),
        };
        let cwd = std::env::current_dir().context("current directory")?;
        let base = resolve(&cwd, &base);
        config.absolutize(&base);
        if let Some(out) = &overrides.out {
            let out = resolve(&cwd, out);
            let p = &mut config.paths;
            for slot in [
                &mut p.cases,
                &mut p.refined,
                &mut p.assessments,
                &mut p.unanalyzable,
                &mut p.reports_dir,
                &mut p.augmented,
            ] {
                *slot = None;
            }
            p.work_dir = out;
        }
        if let Some(tape) = &overrides.tape {
            config.gateway.backend = BackendKind::Tape;
            config.gateway.tape = Some(resolve(&cwd, tape));
        }
        if let Some(seed) = overrides.seed {
            config.seeds = Seeds {
                augment_seed: seed,
                fold_seed: seed,
            };
        }
        if let Some(tau) = overrides.tau {
            config.assess.tau = tau;
        }
        if let Some(k) = overrides.k {
            config.refine.k = k;
        }
        config.validate()?;
        Ok(config)
    }

    fn absolutize(&mut self, base: &Path) {
        let p = &mut self.paths;
        p.input_dir = resolve(base, &p.input_dir);
        p.work_dir = resolve(base, &p.work_dir);
        for slot in [
            &mut p.labels,
            &mut p.cases,
            &mut p.refined,
            &mut p.assessments,
            &mut p.unanalyzable,
            &mut p.reports_dir,
            &mut p.sft_input,
            &mut p.augmented,
        ] {
            if let Some(v) = slot.as_mut() {
                *v = resolve(base, v);
            }
        }
        if let Some(t) = self.gateway.tape.as_mut() {
            *t = resolve(base, t);
        }
        if let Some(d) = self.prompts.dir.as_mut() {
            *d = resolve(base, d);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        mindrisk_core::ingestion::DatasetProfile::by_name(&self.profile)?;
        if !(0.0..=1.0).contains(&self.assess.tau) {
            bail!("tau {} outside [0, 1]", self.assess.tau);
        }
        if !(0.0..=1.0).contains(&self.assess.near_band) {
            bail!("near_band {} outside [0, 1]", self.assess.near_band);
        }
        if self.evaluate.k_folds < 2 {
            bail!("k_folds must be at least 2");
        }
        if self.gateway.backend == BackendKind::Tape && self.gateway.tape.is_none() {
            bail!("gateway backend \"tape\" needs a tape path (gateway.tape or --tape)");
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        mindrisk_core::digest::json_digest(self)
    }

    fn in_work(&self, slot: &Option<PathBuf>, name: &str) -> PathBuf {
        slot.clone().unwrap_or_else(|| self.paths.work_dir.join(name))
    }

    pub fn cases_path(&self) -> PathBuf {
        self.in_work(&self.paths.cases, "cases.jsonl")
    }

    pub fn refined_path(&self) -> PathBuf {
        self.in_work(&self.paths.refined, "refined.jsonl")
    }

    pub fn assessments_path(&self) -> PathBuf {
        self.in_work(&self.paths.assessments, "assessments.jsonl")
    }

    pub fn unanalyzable_path(&self) -> PathBuf {
        self.in_work(&self.paths.unanalyzable, "unanalyzable.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.in_work(&self.paths.reports_dir, "reports")
    }

    pub fn augmented_path(&self) -> PathBuf {
        self.in_work(&self.paths.augmented, "augmented.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.work_dir.join("manifest.json")
    }
}
