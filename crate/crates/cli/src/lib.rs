//! Command implementations behind the `povgen` binary.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! <out_dir>/report.json, report.txt      batch report
//! <out_dir>/<task_id>/project/           workspace (the agent's /project)
//! <out_dir>/<task_id>/logs/              transcript.jsonl
//! <out_dir>/<task_id>/payloads/          flow.json, branches.json, conditions.json
//! <out_dir>/<task_id>/transcripts/       one JSON file per stage instance
//! <out_dir>/<task_id>/pipeline.json      pipeline report
//! <out_dir>/<task_id>/verdict.json       evaluation verdict
//! <out_dir>/<task_id>/outcome.json       the task's row in the batch report
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use povgen_core::eval::{self, Category, EvalConfig, Verdict};
use povgen_core::gateway::{
    BudgetLedger, ChatBackend, Completion, Gateway, GatewayMode, HttpBackend, ModelPrice, PriceTable, ReplayCache,
    ScriptedBackend, Usage,
};
use povgen_core::manifest::{load_manifest, prepare_workspace, ManifestError, VulnerabilityTask, Workspace};
use povgen_core::output::Payload;
use povgen_core::par;
use povgen_core::sandbox::{ContainerEngine, DockerEngine, LocalEngine, SandboxConfig, SandboxRoot};
use povgen_core::workflow::{
    self, read_json, repair_loop, run_branch_stage, run_flow_stage, run_pipeline, run_testgen_stage, write_json,
    AblationConfig, PipelineConfig, StageContext, StageId, StageSummary, Terminal, TranscriptLog, WorkflowError,
};

pub const DEFAULT_MODEL: &str = "claude-3-7-sonnet-20250219";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{0}")]
    Infrastructure(String),
    #[error("{stage} needs {what}; run the earlier stage first")]
    MissingPriorPayload { stage: StageId, what: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Manifest(_) => 2,
            CliError::Infrastructure(_) | CliError::MissingPriorPayload { .. } => 3,
        }
    }
}

impl From<WorkflowError> for CliError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::MissingPriorPayload { stage, what } => CliError::MissingPriorPayload { stage, what },
            WorkflowError::Config(m) => CliError::Config(m),
            other => CliError::Infrastructure(other.to_string()),
        }
    }
}

fn infra(e: impl std::fmt::Display) -> CliError {
    CliError::Infrastructure(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    /// docker, falling back to podman.
    Docker,
    Podman,
    /// Runs Dockerfile steps directly on the host. No filesystem isolation.
    Local,
}

impl std::str::FromStr for EngineChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "docker" => Ok(EngineChoice::Docker),
            "podman" => Ok(EngineChoice::Podman),
            "local" => Ok(EngineChoice::Local),
            other => Err(format!("unknown engine {other:?} (docker, podman, local)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub task_filter: Vec<String>,
    pub model_id: String,
    pub mode: GatewayMode,
    pub cache_dir: Option<PathBuf>,
    /// Per-task scripted responses (`<task_id>.json`) used instead of the
    /// HTTP backend in live and record modes.
    pub script_dir: Option<PathBuf>,
    pub prices_path: Option<PathBuf>,
    /// Overrides the manifest's per-task budget when set.
    pub budget_usd: Option<f64>,
    pub time_budget: Option<Duration>,
    pub ablation: AblationConfig,
    pub out_dir: PathBuf,
    pub engine: EngineChoice,
    pub jobs: usize,
    pub sandbox: SandboxConfig,
}

impl RunConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest_path: manifest_path.into(),
            task_filter: Vec::new(),
            model_id: DEFAULT_MODEL.to_string(),
            mode: GatewayMode::Live,
            cache_dir: None,
            script_dir: None,
            prices_path: None,
            budget_usd: None,
            time_budget: None,
            ablation: AblationConfig::default(),
            out_dir: out_dir.into(),
            engine: EngineChoice::Docker,
            jobs: 1,
            sandbox: SandboxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if matches!(self.mode, GatewayMode::Record | GatewayMode::Replay) && self.cache_dir.is_none() {
            return Err(CliError::Config(format!(
                "--cache-dir is required in {} mode",
                if self.mode == GatewayMode::Record { "record" } else { "replay" }
            )));
        }
        if self.mode == GatewayMode::Replay && self.script_dir.is_some() {
            return Err(CliError::Config("--script-dir cannot be combined with replay mode".into()));
        }
        if let Some(b) = self.budget_usd {
            if !(b.is_finite() && b > 0.0) {
                return Err(CliError::Config(format!("budget must be positive, got {b}")));
            }
        }
        if self.time_budget == Some(Duration::ZERO) {
            return Err(CliError::Config("time budget must be positive".into()));
        }
        self.ablation.validate()?;
        Ok(())
    }

    fn prices(&self) -> Result<PriceTable, CliError> {
        match &self.prices_path {
            Some(p) => PriceTable::load(p).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(default_prices()),
        }
    }

    fn tasks(&self) -> Result<Vec<VulnerabilityTask>, CliError> {
        let all = load_manifest(&self.manifest_path)?;
        if self.task_filter.is_empty() {
            return Ok(all);
        }
        Ok(all.into_iter().filter(|t| self.task_filter.contains(&t.id)).collect())
    }

    fn task(&self, id: &str) -> Result<VulnerabilityTask, CliError> {
        load_manifest(&self.manifest_path)?
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| CliError::Config(format!("task {id:?} is not in {}", self.manifest_path.display())))
    }

    fn engine(&self) -> Result<Arc<dyn ContainerEngine>, CliError> {
        match self.engine {
            EngineChoice::Docker => Ok(Arc::new(DockerEngine::detect().map_err(infra)?)),
            EngineChoice::Podman => Ok(Arc::new(DockerEngine::new("podman"))),
            EngineChoice::Local => {
                let e = LocalEngine::new().map_err(infra)?;
                log::warn!(
                    "local engine: Dockerfile RUN/CMD steps execute on this host without filesystem isolation{}",
                    if e.isolates_network() { "" } else { " or network isolation" }
                );
                Ok(Arc::new(e))
            }
        }
    }

    fn gateway(&self, task_id: &str) -> Result<Gateway, CliError> {
        let cache = self.cache_dir.as_ref().map(ReplayCache::new);
        if self.mode == GatewayMode::Replay {
            return Ok(Gateway::replay(cache.expect("validated")));
        }
        let backend: Arc<dyn ChatBackend> = match &self.script_dir {
            Some(dir) => Arc::new(load_script(&dir.join(format!("{task_id}.json")))?),
            None => Arc::new(HttpBackend::from_env(4096, Duration::from_secs(300))),
        };
        Ok(match (self.mode, cache) {
            (GatewayMode::Record, Some(c)) => Gateway::record(backend, c),
            _ => Gateway::live(backend),
        })
    }

    fn ledger(&self, task: &VulnerabilityTask) -> Result<BudgetLedger, CliError> {
        Ok(BudgetLedger::new(
            self.budget_usd.unwrap_or(task.budget_usd),
            self.time_budget.unwrap_or(task.time_budget),
            self.prices()?,
        ))
    }

    fn task_dir(&self, id: &str) -> PathBuf {
        self.out_dir.join(id)
    }
}

/// Prices in USD per 1,000 tokens for the default model.
pub fn default_prices() -> PriceTable {
    PriceTable::default().with(
        DEFAULT_MODEL,
        ModelPrice {
            usd_per_1k_prompt_tokens: 0.003,
            usd_per_1k_completion_tokens: 0.015,
        },
    )
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    Text(String),
    Full {
        text: String,
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
    },
}

/// Reads a JSON array of responses: plain strings, or objects with `text`
/// and optional token counts.
pub fn load_script(path: &Path) -> Result<ScriptedBackend, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let entries: Vec<ScriptEntry> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(ScriptedBackend::new(entries.into_iter().map(|e| match e {
        ScriptEntry::Text(text) => Completion {
            text,
            usage: Usage::new(0, 0),
        },
        ScriptEntry::Full {
            text,
            prompt_tokens,
            completion_tokens,
        } => Completion {
            text,
            usage: Usage::new(prompt_tokens, completion_tokens),
        },
    })))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub cwe: String,
    pub category: Category,
    /// All automatic rungs passed; a human still has to judge the checklist.
    pub pending_manual_review: bool,
    pub spent_usd: f64,
    pub elapsed_secs: f64,
    pub attempts: usize,
    pub halted: Option<Terminal>,
    pub pipeline_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTask {
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub cwe: String,
    pub tasks: usize,
    pub reached: usize,
    pub rate_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub per_task: Vec<TaskRow>,
    pub funnel: BTreeMap<Category, usize>,
    pub per_cwe: Vec<CweRow>,
    pub failed_tasks: Vec<FailedTask>,
    /// Hash of the report without wall-clock fields.
    pub digest: String,
}

impl BatchReport {
    pub fn from_rows(mut rows: Vec<TaskRow>, mut failed_tasks: Vec<FailedTask>) -> Self {
        rows.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        failed_tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let mut funnel = BTreeMap::new();
        for r in &rows {
            *funnel.entry(r.category).or_insert(0) += 1;
        }
        let mut by_cwe: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &rows {
            let e = by_cwe.entry(r.cwe.as_str()).or_default();
            e.0 += 1;
            if r.category >= Category::ReachedVulnerableFunction {
                e.1 += 1;
            }
        }
        let per_cwe = by_cwe
            .into_iter()
            .map(|(cwe, (tasks, reached))| CweRow {
                cwe: cwe.to_string(),
                tasks,
                reached,
                rate_percent: 100.0 * reached as f64 / tasks as f64,
            })
            .collect();
        let mut report = BatchReport {
            per_task: rows,
            funnel,
            per_cwe,
            failed_tasks,
            digest: String::new(),
        };
        report.digest = report.compute_digest();
        report
    }

    pub fn compute_digest(&self) -> String {
        let mut view = self.clone();
        view.digest.clear();
        for r in &mut view.per_task {
            r.elapsed_secs = 0.0;
        }
        let json = serde_json::to_string(&view).unwrap_or_default();
        workflow::sha256_hex(&json)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let total: usize = self.funnel.values().sum();
        let _ = writeln!(s, "Verdict funnel ({total} tasks)");
        let _ = writeln!(s, "{:<28} {:>5}", "category", "count");
        for c in Category::ALL {
            if let Some(n) = self.funnel.get(&c) {
                let _ = writeln!(s, "{:<28} {:>5}", c.label(), n);
            }
        }
        let _ = writeln!(s, "\nPer-CWE (reached vulnerable function, pending manual review)");
        let _ = writeln!(s, "{:<8} {:>5} {:>8} {:>7}", "cwe", "tasks", "reached", "rate");
        for r in &self.per_cwe {
            let _ = writeln!(s, "{:<8} {:>5} {:>8} {:>6.1}%", r.cwe, r.tasks, r.reached, r.rate_percent);
        }
        if !self.per_task.is_empty() {
            let _ = writeln!(s, "\nTasks");
            for r in &self.per_task {
                let _ = writeln!(
                    s,
                    "{:<24} {:<7} {:<26} attempts={} spent=${:.4}{}",
                    r.task_id,
                    r.cwe,
                    r.category.label(),
                    r.attempts,
                    r.spent_usd,
                    if r.pending_manual_review { "  [manual review pending]" } else { "" }
                );
            }
        }
        if !self.failed_tasks.is_empty() {
            let _ = writeln!(s, "\nFailed tasks");
            for f in &self.failed_tasks {
                let _ = writeln!(s, "{:<24} {}", f.task_id, f.error);
            }
        }
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        write_json(&out_dir.join("report.json"), self)?;
        fs::write(out_dir.join("report.txt"), self.render_text()).map_err(infra)
    }
}

const OUTCOME_FILE: &str = "outcome.json";
const FAILURE_FILE: &str = "failure.json";

// ---------------------------------------------------------------------------
// Commands

fn open_sandbox(
    cfg: &RunConfig,
    task: &VulnerabilityTask,
    engine: Arc<dyn ContainerEngine>,
    prepare: bool,
) -> Result<SandboxRoot, CliError> {
    let task_dir = cfg.task_dir(&task.id);
    let project = task_dir.join("project");
    let ws = if prepare {
        if task_dir.exists() {
            fs::remove_dir_all(&task_dir).map_err(infra)?;
        }
        prepare_workspace(task, &project)?
    } else if project.exists() {
        Workspace::open(&project)?
    } else {
        prepare_workspace(task, &project)?
    };
    SandboxRoot::new(&ws, engine, cfg.sandbox.clone(), &task.id).map_err(infra)
}

fn run_task(cfg: &RunConfig, task: &VulnerabilityTask, engine: Arc<dyn ContainerEngine>) -> Result<TaskRow, CliError> {
    let started = Instant::now();
    let sb = open_sandbox(cfg, task, engine, true)?;
    let gateway = cfg.gateway(&task.id)?;
    let mut ledger = cfg.ledger(task)?;
    let task_dir = cfg.task_dir(&task.id);
    let pcfg = PipelineConfig {
        model_id: cfg.model_id.clone(),
        ablation: cfg.ablation,
        artifacts_dir: Some(task_dir.clone()),
        eval: Some(EvalConfig::from_sandbox(&sb)),
    };
    let outcome = run_pipeline(task, &sb, &gateway, &mut ledger, &pcfg)?;
    let report = outcome.report;
    let verdict = report.verdict.clone().expect("evaluation enabled");
    write_json(&task_dir.join("verdict.json"), &verdict)?;
    let row = TaskRow {
        task_id: task.id.clone(),
        cwe: task.cwe.id().to_string(),
        category: verdict.category,
        pending_manual_review: verdict.category == Category::ReachedVulnerableFunction,
        spent_usd: report.ledger.spent_usd,
        elapsed_secs: started.elapsed().as_secs_f64(),
        attempts: report.attempts,
        halted: report.halted,
        pipeline_digest: report.digest,
    };
    write_json(&task_dir.join(OUTCOME_FILE), &row)?;
    Ok(row)
}

/// Runs every selected task. Infrastructure failures of one task are
/// recorded in `failed_tasks` and do not stop the batch.
pub fn cmd_run(cfg: &RunConfig) -> Result<BatchReport, CliError> {
    cfg.validate()?;
    let tasks = cfg.tasks()?;
    cfg.prices()?;
    fs::create_dir_all(&cfg.out_dir).map_err(infra)?;
    let engine = if tasks.is_empty() { None } else { Some(cfg.engine()?) };
    let results = par::with_jobs(cfg.jobs, || {
        par::map(&tasks, |t| {
            let engine = engine.clone().expect("tasks present");
            let r = run_task(cfg, t, engine);
            if let Err(e) = &r {
                log::error!("task {} failed: {e}", t.id);
                let _ = write_json(
                    &cfg.task_dir(&t.id).join(FAILURE_FILE),
                    &FailedTask {
                        task_id: t.id.clone(),
                        error: e.to_string(),
                    },
                );
            }
            (t.id.clone(), r)
        })
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failed.push(FailedTask {
                task_id: id,
                error: e.to_string(),
            }),
        }
    }
    let report = BatchReport::from_rows(rows, failed);
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Re-renders the batch report from the per-task artifacts in `out_dir`.
pub fn cmd_report(out_dir: &Path) -> Result<BatchReport, CliError> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let entries = match fs::read_dir(out_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::Config(format!("{} does not exist", out_dir.display())))
        }
        Err(e) => return Err(infra(e)),
    };
    for entry in entries {
        let dir = entry.map_err(infra)?.path();
        if !dir.is_dir() {
            continue;
        }
        if dir.join(OUTCOME_FILE).exists() {
            rows.push(read_json::<TaskRow>(&dir.join(OUTCOME_FILE))?);
        } else if dir.join(FAILURE_FILE).exists() {
            failed.push(read_json::<FailedTask>(&dir.join(FAILURE_FILE))?);
        }
    }
    let report = BatchReport::from_rows(rows, failed);
    report.write(out_dir)?;
    Ok(report)
}

/// Evaluation only, against whatever test currently sits in the workspace.
pub fn cmd_eval(cfg: &RunConfig, task_id: &str) -> Result<Verdict, CliError> {
    let task = cfg.task(task_id)?;
    let project = cfg.task_dir(task_id).join("project");
    if !project.exists() {
        return Err(CliError::Config(format!("no workspace at {}", project.display())));
    }
    let sb = open_sandbox(cfg, &task, cfg.engine()?, false)?;
    let verdict = eval::evaluate(&task, &sb, &EvalConfig::from_sandbox(&sb)).map_err(infra)?;
    write_json(&cfg.task_dir(task_id).join("verdict.json"), &verdict)?;
    Ok(verdict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageId,
    pub results: Vec<StageSummary>,
    pub payload: Option<Payload>,
    /// For the repair stage: validations performed and whether the last one
    /// failed as a PoV test should.
    pub attempts: Option<usize>,
    pub validated: Option<bool>,
}

/// Runs a single stage, reading earlier payloads from `<task_dir>/payloads`.
pub fn cmd_stage(cfg: &RunConfig, task_id: &str, stage: StageId) -> Result<StageReport, CliError> {
    cfg.validate()?;
    let task = cfg.task(task_id)?;
    let task_dir = cfg.task_dir(task_id);
    let sb = open_sandbox(cfg, &task, cfg.engine()?, false)?;
    let gateway = cfg.gateway(task_id)?;
    let mut ledger = cfg.ledger(&task)?;
    let log = TranscriptLog::open(&task_dir.join("logs").join("transcript.jsonl"))?;
    let payloads = task_dir.join("payloads");
    let load = |name: &str, what: &str| -> Result<Option<serde_json::Value>, CliError> {
        let p = payloads.join(name);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Err(CliError::MissingPriorPayload {
                stage,
                what: what.to_string(),
            })
        }
    };
    let flow = if cfg.ablation.use_flow && stage != StageId::FlowReasoning {
        load(workflow::PAYLOAD_FLOW, "a flow payload")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(infra)?
    } else {
        None
    };
    let conditions = if cfg.ablation.use_branch && matches!(stage, StageId::TestGeneration) {
        load(workflow::PAYLOAD_CONDITIONS, "a conditions payload")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(infra)?
    } else {
        None
    };
    let mut ctx = StageContext {
        gateway: &gateway,
        model_id: &cfg.model_id,
        ledger: &mut ledger,
        sandbox: &sb,
        log: Some(&log),
    };
    let mut report = StageReport {
        stage,
        results: Vec::new(),
        payload: None,
        attempts: None,
        validated: None,
    };
    let results = match stage {
        StageId::FlowReasoning => {
            let r = run_flow_stage(&mut ctx, &task, &cfg.ablation)?;
            if let Some(Payload::Flow(f)) = &r.payload {
                write_json(&payloads.join(workflow::PAYLOAD_FLOW), f)?;
            }
            vec![r]
        }
        StageId::BranchReasoning => {
            let b = run_branch_stage(&mut ctx, &task, flow.as_ref(), &cfg.ablation)?;
            if let Some(bs) = &b.branches {
                write_json(&payloads.join(workflow::PAYLOAD_BRANCHES), bs)?;
            }
            if let Some(c) = &b.conditions {
                write_json(&payloads.join(workflow::PAYLOAD_CONDITIONS), c)?;
            }
            vec![b.result]
        }
        StageId::TestGeneration => vec![run_testgen_stage(
            &mut ctx,
            &task,
            flow.as_ref(),
            conditions.as_ref(),
            &cfg.ablation,
        )?],
        StageId::Repair => {
            let rep = repair_loop(&mut ctx, &task, &cfg.ablation, Terminal::DoneEmitted)?;
            report.attempts = Some(rep.attempts);
            report.validated = Some(rep.success);
            rep.stages
        }
    };
    for (i, r) in results.iter().enumerate() {
        write_json(
            &task_dir.join("transcripts").join(format!("stage-{}-{i:02}.json", r.stage)),
            r,
        )?;
    }
    report.payload = results.last().and_then(|r| r.payload.clone());
    report.results = results.iter().map(StageSummary::of).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, cwe: &str, category: Category) -> TaskRow {
        TaskRow {
            task_id: id.into(),
            cwe: cwe.into(),
            category,
            pending_manual_review: category == Category::ReachedVulnerableFunction,
            spent_usd: 0.0,
            elapsed_secs: 1.5,
            attempts: 1,
            halted: None,
            pipeline_digest: String::new(),
        }
    }

    #[test]
    fn funnel_and_rates() {
        let r = BatchReport::from_rows(
            vec![
                row("b", "CWE-78", Category::BuildFailed),
                row("a", "CWE-78", Category::ReachedVulnerableFunction),
                row("c", "CWE-22", Category::RanButPassed),
            ],
            vec![],
        );
        assert_eq!(r.per_task[0].task_id, "a");
        assert_eq!(r.funnel.values().sum::<usize>(), 3);
        assert_eq!(r.per_cwe.len(), 2);
        let cwe78 = r.per_cwe.iter().find(|c| c.cwe == "CWE-78").unwrap();
        assert_eq!((cwe78.tasks, cwe78.reached), (2, 1));
        assert!((cwe78.rate_percent - 50.0).abs() < 1e-9);
        assert!(r.render_text().contains("ReachedVulnerableFunction"));
    }

    #[test]
    fn digest_ignores_elapsed() {
        let a = BatchReport::from_rows(vec![row("a", "CWE-78", Category::BuildFailed)], vec![]);
        let mut r = row("a", "CWE-78", Category::BuildFailed);
        r.elapsed_secs = 99.0;
        let b = BatchReport::from_rows(vec![r], vec![]);
        assert_eq!(a.digest, b.digest);
    }

    #[test]
    fn empty_report() {
        let r = BatchReport::from_rows(vec![], vec![]);
        assert!(r.funnel.is_empty() && r.per_cwe.is_empty());
        assert!(r.render_text().contains("(0 tasks)"));
    }

    #[test]
    fn record_mode_needs_cache() {
        let mut cfg = RunConfig::new("m.toml", "out");
        cfg.mode = GatewayMode::Replay;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        cfg.cache_dir = Some("cache".into());
        assert!(cfg.validate().is_ok());
    }
}
