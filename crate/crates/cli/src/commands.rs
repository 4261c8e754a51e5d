use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use mindrisk_core::augment::{augment_dataset, read_sft_pairs, validate_augmented, AugmentedDataset};
use mindrisk_core::causal::{assess_all, Assessment, AssessmentBatch, Unanalyzable};
use mindrisk_core::digest::file_digest;
use mindrisk_core::evaluation::{evaluate_run, EvalConfig};
use mindrisk_core::fixtures::{self, build_golden, globem_like, pmdata_like, write_cohort, SFT_FILE};
use mindrisk_core::gateway::{record_tape, LiveBackend, SessionLog, Tape, TapeBackend};
use mindrisk_core::ingestion::{
    aggregate_weekly, cohort_summary, parse_behavior_files, parse_label_table, parse_mental_files, AssessmentCase,
    DatasetProfile, LabelTable, ParsePolicy,
};
use mindrisk_core::jsonl;
use mindrisk_core::prompts::{PromptSet, PROMPT_VERSION};
use mindrisk_core::refine::{refine_all, FormatTable, RefinedRecord};
use mindrisk_core::simulate::SimulatedModel;
use mindrisk_core::{Execution, Gateway};
use serde::Serialize;

use crate::config::{BackendKind, PipelineConfig};
use crate::manifest::{now, RunManifest, StageFiles, StageRecord};

/// Fatal command errors, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, flags or input paths.
    Usage(anyhow::Error),
    /// Backend retries exhausted.
    Transport(anyhow::Error),
    Fatal(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Fatal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Transport(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Transport(e) | Failure::Fatal(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Fatal(e)
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

/// How a completed command went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some items failed; outputs hold the rest.
    Partial,
    /// Every item failed.
    Failed { transport: bool },
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Complete => 0,
            Status::Partial | Status::Failed { transport: false } => 1,
            Status::Failed { transport: true } => 3,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Status::Complete => "complete",
            Status::Partial => "partial",
            Status::Failed { .. } => "failed",
        }
    }

    fn from_counts(ok: usize, failed: usize, transport_failures: usize) -> Self {
        if failed == 0 {
            Status::Complete
        } else if ok == 0 {
            Status::Failed {
                transport: transport_failures > 0,
            }
        } else {
            Status::Partial
        }
    }
}

pub struct Context {
    pub config: PipelineConfig,
    pub exec: Execution,
    pub record_log: Option<PathBuf>,
}

/// Opened gateway plus what the manifest needs to know about it.
struct Backend {
    gateway: Gateway,
    tape_digest: Option<String>,
}

impl Context {
    fn prompts(&self) -> Result<PromptSet, Failure> {
        PromptSet::load(self.config.prompts.dir.as_deref())
            .map_err(|e| Failure::Usage(anyhow!(e).context("loading prompt templates")))
    }

    fn backend(&self) -> Result<Backend, Failure> {
        let settings = &self.config.gateway;
        let (gateway, tape_digest) = match settings.backend {
            BackendKind::Live => {
                let live = LiveBackend::new(settings.live.clone())
                    .map_err(|e| Failure::Usage(anyhow!(e).context("configuring live backend")))?;
                (Gateway::from_backend(live), None)
            }
            BackendKind::Tape => {
                let path = settings.tape.as_ref().ok_or_else(|| usage("no tape path configured"))?;
                if !path.is_file() {
                    return Err(usage(format!("tape file {} does not exist", path.display())));
                }
                let tape = Tape::load(path).map_err(|e| Failure::Usage(anyhow!(e).context("loading tape")))?;
                let digest = file_digest(path).context("digesting tape")?;
                (Gateway::from_backend(TapeBackend::new(tape)), Some(digest))
            }
            BackendKind::Simulated => (Gateway::from_backend(SimulatedModel::default()), None),
        };
        let gateway = gateway.with_budget(settings.budget);
        let gateway = if self.record_log.is_some() {
            gateway.with_logging()
        } else {
            gateway
        };
        Ok(Backend { gateway, tape_digest })
    }

    fn finish_backend(&self, backend: &Backend) -> Result<(), Failure> {
        if let (Some(path), Some(log)) = (&self.record_log, backend.gateway.session_log()) {
            create_parent(path)?;
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            log.write_jsonl(std::io::BufWriter::new(file))
                .map_err(|e| anyhow!(e).context("writing session log"))?;
        }
        Ok(())
    }

    fn record_stage(
        &self,
        stage: &str,
        started_at: String,
        files: &StageFiles,
        backend: Option<&Backend>,
        prompts: Option<&PromptSet>,
        status: Status,
    ) -> Result<(), Failure> {
        let path = self.config.manifest_path();
        let mut manifest = RunManifest::load_or_default(&path)?;
        manifest.tool_version = env!("CARGO_PKG_VERSION").into();
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                started_at,
                finished_at: now(),
                config_digest: self.config.digest(),
                prompt_version: PROMPT_VERSION.into(),
                prompt_digest: prompts.map(PromptSet::digest).unwrap_or_default(),
                tape_digest: backend.and_then(|b| b.tape_digest.clone()),
                inputs: StageFiles::digests(&files.inputs)?,
                outputs: StageFiles::digests(&files.outputs)?,
                backend_requests: backend.map(|b| b.gateway.requests_issued()).unwrap_or(0),
                outcome: status.label().into(),
            },
        );
        manifest.save(&path)?;
        Ok(())
    }

    fn profile(&self) -> Result<DatasetProfile, Failure> {
        DatasetProfile::by_name(&self.config.profile).map_err(|e| Failure::Usage(e.into()))
    }

    fn labels_path(&self) -> Option<PathBuf> {
        match &self.config.paths.labels {
            Some(p) => Some(p.clone()),
            None => {
                let p = self.config.paths.input_dir.join(fixtures::LABELS_FILE);
                p.is_file().then_some(p)
            }
        }
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T], files: &mut StageFiles) -> Result<(), Failure> {
    create_parent(path)?;
    jsonl::write(path, items).with_context(|| format!("writing {}", path.display()))?;
    files.output(path);
    Ok(())
}

fn write_text(path: &Path, text: &str, files: &mut StageFiles) -> Result<(), Failure> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    files.output(path);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, files: &mut StageFiles) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).context("serializing report")? + "\n";
    write_text(path, &text, files)
}

/// Reads a JSONL artifact that an earlier stage should have produced.
fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path, producer: &str, files: &mut StageFiles) -> Result<Vec<T>, Failure> {
    if !path.is_file() {
        return Err(usage(format!("{} not found; run `mindrisk {producer}` first", path.display())));
    }
    files.input(path);
    jsonl::read(path).map_err(|e| Failure::Fatal(anyhow!(e).context(format!("reading {}", path.display()))))
}

fn csv_files_with_prefix(dir: &Path, prefix: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.starts_with(prefix) && name.ends_with(".csv") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct IngestReport<'a> {
    behavior: &'a mindrisk_core::ingestion::ParseReport,
    mental: &'a mindrisk_core::ingestion::ParseReport,
    coverage: &'a mindrisk_core::ingestion::CoverageReport,
}

pub fn ingest(ctx: &Context) -> Result<Status, Failure> {
    let started = now();
    let mut files = StageFiles::default();
    let profile = ctx.profile()?;
    let dir = &ctx.config.paths.input_dir;
    if !dir.is_dir() {
        return Err(usage(format!("input directory {} does not exist", dir.display())));
    }
    let behavior = csv_files_with_prefix(dir, "behavior")?;
    let mental = csv_files_with_prefix(dir, "mental")?;
    if behavior.is_empty() || mental.is_empty() {
        return Err(usage(format!(
            "{} must hold behavior*.csv and mental*.csv files",
            dir.display()
        )));
    }
    let policy = ParsePolicy::default();
    let (series, behavior_report) = parse_behavior_files(&behavior, &profile, &policy, ctx.exec)
        .map_err(|e| Failure::Fatal(e.into()))?;
    let (records, mental_report) =
        parse_mental_files(&mental, &profile, &policy, ctx.exec).map_err(|e| Failure::Fatal(e.into()))?;
    files.inputs.extend(behavior.iter().cloned());
    files.inputs.extend(mental.iter().cloned());
    let labels = match ctx.labels_path() {
        Some(p) if p.is_file() => {
            files.input(&p);
            Some(parse_label_table(&p).map_err(|e| Failure::Fatal(e.into()))?)
        }
        Some(p) => return Err(usage(format!("label table {} does not exist", p.display()))),
        None => None,
    };
    let agg = aggregate_weekly(&series, &records, labels.as_ref(), &profile);
    let summary = cohort_summary(&agg.cases).map_err(|e| Failure::Fatal(e.into()))?;

    let reports = ctx.config.reports_dir();
    write_jsonl(&ctx.config.cases_path(), &agg.cases, &mut files)?;
    write_text(&reports.join("cohort_summary.txt"), &summary.to_text(), &mut files)?;
    write_json(&reports.join("cohort_summary.json"), &summary, &mut files)?;
    let report = IngestReport {
        behavior: &behavior_report,
        mental: &mental_report,
        coverage: &agg.coverage,
    };
    write_json(&reports.join("ingest.json"), &report, &mut files)?;
    print!("{}", summary.to_text());
    ctx.record_stage("ingest", started, &files, None, None, Status::Complete)?;
    Ok(Status::Complete)
}

#[derive(Serialize)]
struct StepFailure {
    case_key: String,
    error: String,
    transport: bool,
}

pub fn refine(ctx: &Context) -> Result<Status, Failure> {
    let started = now();
    let mut files = StageFiles::default();
    let cases: Vec<AssessmentCase> = read_artifact(&ctx.config.cases_path(), "ingest", &mut files)?;
    let prompts = ctx.prompts()?;
    let backend = ctx.backend()?;
    let results = refine_all(&cases, &ctx.config.refine, &backend.gateway, &prompts, ctx.exec);
    ctx.finish_backend(&backend)?;

    let mut refined: Vec<RefinedRecord> = Vec::new();
    let mut failures = Vec::new();
    for (key, result) in results {
        match result {
            Ok(r) => refined.push(r),
            Err(e) => {
                tracing::warn!(case = %key, error = %e, "refine failed");
                let transport = matches!(&e, mindrisk_core::refine::RefineError::Gateway(g) if g.is_transport());
                failures.push(StepFailure {
                    case_key: key.to_string(),
                    error: e.to_string(),
                    transport,
                });
            }
        }
    }
    let reports = ctx.config.reports_dir();
    write_jsonl(&ctx.config.refined_path(), &refined, &mut files)?;
    write_jsonl(&reports.join("refine_failures.jsonl"), &failures, &mut files)?;
    if let Some(table) = FormatTable::from_records(&refined) {
        write_text(&reports.join("format_table.txt"), &table.to_text(), &mut files)?;
        write_json(&reports.join("format_table.json"), &table, &mut files)?;
        print!("{}", table.to_text());
    }
    println!("refined {} of {} cases", refined.len(), cases.len());
    let transport = failures.iter().filter(|f| f.transport).count();
    // per-case failures are reported but only a total loss fails the command
    let status = match Status::from_counts(refined.len(), failures.len(), transport) {
        Status::Partial => Status::Complete,
        s => s,
    };
    ctx.record_stage("refine", started, &files, Some(&backend), Some(&prompts), status)?;
    Ok(status)
}

pub fn assess(ctx: &Context) -> Result<Status, Failure> {
    let started = now();
    let mut files = StageFiles::default();
    let cases: Vec<AssessmentCase> = read_artifact(&ctx.config.cases_path(), "ingest", &mut files)?;
    let refined: Vec<RefinedRecord> = read_artifact(&ctx.config.refined_path(), "refine", &mut files)?;
    let formatted: Vec<_> = refined.into_iter().map(|r| r.formatted).collect();
    let prompts = ctx.prompts()?;
    let backend = ctx.backend()?;
    let batch = assess_all(&cases, &formatted, &ctx.config.assess, &backend.gateway, &prompts, ctx.exec);
    ctx.finish_backend(&backend)?;

    write_jsonl(&ctx.config.assessments_path(), &batch.assessments, &mut files)?;
    write_jsonl(&ctx.config.unanalyzable_path(), &batch.unanalyzable, &mut files)?;
    let at_risk = batch.assessments.iter().filter(|a| a.prediction.is_positive()).count();
    println!(
        "assessed {} cases ({} at risk), {} unanalyzable",
        batch.assessments.len(),
        at_risk,
        batch.unanalyzable.len()
    );
    let transport = batch.unanalyzable.iter().filter(|u| u.transport).count();
    let status = Status::from_counts(batch.assessments.len(), batch.unanalyzable.len(), transport);
    ctx.record_stage("assess", started, &files, Some(&backend), Some(&prompts), status)?;
    Ok(status)
}

pub fn augment(ctx: &Context, input: Option<&Path>) -> Result<Status, Failure> {
    let started = now();
    let mut files = StageFiles::default();
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.paths.sft_input.clone())
        .ok_or_else(|| usage("no SFT input; pass --input or set paths.sft_input"))?;
    if !input.is_file() {
        return Err(usage(format!("SFT input {} does not exist", input.display())));
    }
    files.input(&input);
    let pairs = read_sft_pairs(&input).map_err(|e| Failure::Usage(anyhow!(e).context("reading SFT pairs")))?;
    let prompts = ctx.prompts()?;
    let backend = ctx.backend()?;
    let dataset: AugmentedDataset = augment_dataset(
        &pairs,
        &backend.gateway,
        &prompts,
        ctx.config.seeds.augment_seed,
        ctx.exec,
    )
    .map_err(|e| Failure::Usage(e.into()))?;
    ctx.finish_backend(&backend)?;

    let out = ctx.config.augmented_path();
    let reports = ctx.config.reports_dir();
    write_jsonl(&out, &dataset.records, &mut files)?;
    write_jsonl(&reports.join("augment_rejections.jsonl"), &dataset.rejections, &mut files)?;
    let validation = validate_augmented(&out).map_err(|e| Failure::Fatal(e.into()))?;
    write_json(&reports.join("augment_validation.json"), &validation, &mut files)?;
    println!(
        "{} records ({} originals, {} counterfactuals), {} rejected",
        validation.records,
        validation.originals,
        validation.counterfactuals,
        dataset.rejections.len()
    );
    let generated = validation.counterfactuals;
    let transport = dataset.rejections.iter().filter(|r| r.transport).count();
    let mut status = Status::from_counts(generated, dataset.rejections.len(), transport);
    if !validation.is_valid() {
        tracing::error!(violations = validation.violations.len(), "augmented file failed validation");
        status = Status::Failed { transport: false };
    }
    ctx.record_stage("augment", started, &files, Some(&backend), Some(&prompts), status)?;
    Ok(status)
}

pub fn evaluate(ctx: &Context, dump_rows: bool) -> Result<Status, Failure> {
    let started = now();
    let mut files = StageFiles::default();
    let assessments: Vec<Assessment> = read_artifact(&ctx.config.assessments_path(), "assess", &mut files)?;
    let unanalyzable_path = ctx.config.unanalyzable_path();
    let unanalyzable: Vec<Unanalyzable> = if unanalyzable_path.is_file() {
        read_artifact(&unanalyzable_path, "assess", &mut files)?
    } else {
        Vec::new()
    };
    let golds: Option<LabelTable> = match ctx.labels_path() {
        Some(p) if p.is_file() => {
            files.input(&p);
            Some(parse_label_table(&p).map_err(|e| Failure::Fatal(e.into()))?)
        }
        _ => {
            tracing::info!("no label table; classification metrics will be skipped");
            None
        }
    };
    let batch = AssessmentBatch {
        assessments,
        unanalyzable,
    };
    let backend = ctx.backend()?;
    let config = EvalConfig {
        k_folds: ctx.config.evaluate.k_folds,
        fold_seed: ctx.config.seeds.fold_seed,
    };
    let output = evaluate_run(&batch, golds.as_ref(), &backend.gateway, &config, ctx.exec).map_err(|e| {
        let transport = matches!(&e, mindrisk_core::evaluation::EvalError::Gateway(g) if g.is_transport());
        let err = anyhow!(e).context("evaluation");
        if transport {
            Failure::Transport(err)
        } else {
            Failure::Fatal(err)
        }
    })?;
    ctx.finish_backend(&backend)?;

    let reports = ctx.config.reports_dir();
    write_json(&reports.join("evaluation.json"), &output.report, &mut files)?;
    write_text(&reports.join("evaluation.txt"), &output.report.to_text(), &mut files)?;
    if dump_rows {
        write_jsonl(&reports.join("evaluation_rows.jsonl"), &output.rows, &mut files)?;
    }
    print!("{}", output.report.to_text());
    ctx.record_stage("evaluate", started, &files, Some(&backend), None, Status::Complete)?;
    Ok(Status::Complete)
}

const REPORT_SECTIONS: [(&str, &str); 3] = [
    ("Cohort", "cohort_summary.txt"),
    ("Format", "format_table.txt"),
    ("Evaluation", "evaluation.txt"),
];

pub fn report(ctx: &Context) -> Result<Status, Failure> {
    let reports = ctx.config.reports_dir();
    let mut text = String::new();
    for (title, name) in REPORT_SECTIONS {
        let path = reports.join(name);
        if let Ok(body) = fs::read_to_string(&path) {
            text.push_str(&format!("== {title} ==\n{body}\n"));
        }
    }
    let validation = reports.join("augment_validation.json");
    if let Ok(body) = fs::read_to_string(&validation) {
        let v: mindrisk_core::augment::ValidationReport =
            serde_json::from_str(&body).with_context(|| format!("parsing {}", validation.display()))?;
        text.push_str(&format!(
            "== Augmentation ==\nrecords {}  originals {}  counterfactuals {}  violations {}\n",
            v.records,
            v.originals,
            v.counterfactuals,
            v.violations.len()
        ));
        for (label, n) in &v.label_histogram {
            text.push_str(&format!("  {label}: {n}\n"));
        }
        text.push('\n');
    }
    if text.is_empty() {
        return Err(usage(format!("no stage reports under {}", reports.display())));
    }
    let manifest_path = ctx.config.manifest_path();
    if manifest_path.is_file() {
        let manifest = RunManifest::load_or_default(&manifest_path)?;
        text.push_str("== Stages ==\n");
        let outcomes: BTreeMap<_, _> = manifest.stages.iter().map(|(k, v)| (k, (&v.outcome, &v.finished_at))).collect();
        for (stage, (outcome, at)) in outcomes {
            text.push_str(&format!("{stage:<10} {outcome:<9} {at}\n"));
        }
    }
    let mut files = StageFiles::default();
    write_text(&reports.join("report.txt"), &text, &mut files)?;
    print!("{text}");
    Ok(Status::Complete)
}

pub fn fixture_golden(out: &Path) -> Result<Status, Failure> {
    let outputs = build_golden(out).map_err(|e| Failure::Fatal(anyhow!(e).context("building golden fixture")))?;
    println!(
        "golden fixture in {}: {} cases, {} augmented records",
        out.display(),
        outputs.cases.len(),
        outputs.augmented.records.len()
    );
    Ok(Status::Complete)
}

pub fn fixture_synthetic(profile: &str, seed: u64, out: &Path) -> Result<Status, Failure> {
    let spec = match profile {
        "pmdata" => pmdata_like(seed),
        "globem" => globem_like(seed),
        other => return Err(usage(format!("unknown profile {other:?}; expected pmdata or globem"))),
    };
    let manifest = write_cohort(&spec, out).map_err(|e| Failure::Fatal(e.into()))?;
    jsonl::write(&out.join(SFT_FILE), &fixtures::sft_fixture()).context("writing SFT pairs")?;
    println!(
        "{} cohort in {}: {} cases, {} at risk",
        profile,
        out.display(),
        manifest.expected_cases,
        manifest.expected_positives
    );
    Ok(Status::Complete)
}

pub fn record_tape_from_log(log: &Path, out: &Path) -> Result<Status, Failure> {
    if !log.is_file() {
        return Err(usage(format!("session log {} does not exist", log.display())));
    }
    let file = fs::File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let log = SessionLog::read_jsonl(std::io::BufReader::new(file)).map_err(|e| Failure::Fatal(e.into()))?;
    let tape = record_tape(&log).map_err(|e| Failure::Fatal(e.into()))?;
    create_parent(out)?;
    tape.save(out).map_err(|e| Failure::Fatal(e.into()))?;
    println!("{} tape entries from {} log rows", tape.len(), log.rows.len());
    Ok(Status::Complete)
}
