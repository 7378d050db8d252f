use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use povgen_cli::{cmd_eval, cmd_report, cmd_run, cmd_stage, CliError, EngineChoice, RunConfig, DEFAULT_MODEL};
use povgen_core::gateway::GatewayMode;
use povgen_core::workflow::{AblationConfig, StageId};

#[derive(Parser)]
#[command(name = "povgen", version, about = "Generate and grade proof-of-vulnerability tests with an LLM agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and evaluation for every selected task.
    Run(Common),
    /// Run a single stage for one task, using earlier payloads from the output directory.
    Stage {
        #[command(flatten)]
        common: Common,
        /// flow, branch, testgen or repair.
        #[arg(long)]
        stage: StageId,
    },
    /// Evaluate the test currently in a task's workspace.
    Eval(Common),
    /// Re-render the batch report from an output directory.
    Report {
        #[arg(long, default_value = "povgen-out")]
        out_dir: PathBuf,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Task manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to these task ids (repeatable).
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[arg(long, default_value = "povgen-out")]
    out_dir: PathBuf,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    /// live, record or replay.
    #[arg(long, default_value = "live", value_parser = parse_mode)]
    mode: GatewayMode,
    /// Replay cache directory (required for record and replay).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Directory of scripted responses, `<task_id>.json`, used instead of the HTTP backend.
    #[arg(long)]
    script_dir: Option<PathBuf>,
    /// Price table (TOML) overriding the built-in one.
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Per-task budget in USD (default: manifest value, 5).
    #[arg(long)]
    budget_usd: Option<f64>,
    /// Per-task time budget in minutes (default: manifest value, 40).
    #[arg(long)]
    time_budget_mins: Option<f64>,
    #[arg(long)]
    no_flow: bool,
    #[arg(long)]
    no_branch: bool,
    #[arg(long, default_value_t = AblationConfig::default().max_repair_iters)]
    max_repair_iters: usize,
    #[arg(long, default_value_t = AblationConfig::default().max_turns_per_stage)]
    max_turns: usize,
    /// docker, podman, or local (executes Dockerfile steps on this host).
    #[arg(long, default_value = "docker")]
    engine: EngineChoice,
    /// Task pipelines to run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_mode(s: &str) -> Result<GatewayMode, String> {
    match s {
        "live" => Ok(GatewayMode::Live),
        "record" => Ok(GatewayMode::Record),
        "replay" => Ok(GatewayMode::Replay),
        other => Err(format!("unknown mode {other:?} (live, record, replay)")),
    }
}

impl Common {
    fn into_config(self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::new(self.manifest, self.out_dir);
        cfg.task_filter = self.tasks;
        cfg.model_id = self.model;
        cfg.mode = self.mode;
        cfg.cache_dir = self.cache_dir;
        cfg.script_dir = self.script_dir;
        cfg.prices_path = self.prices;
        cfg.budget_usd = self.budget_usd;
        cfg.time_budget = match self.time_budget_mins {
            Some(m) if m.is_finite() && m > 0.0 => Some(Duration::from_secs_f64(m * 60.0)),
            Some(m) => return Err(CliError::Config(format!("time budget must be positive, got {m}"))),
            None => None,
        };
        cfg.ablation = AblationConfig {
            use_flow: !self.no_flow,
            use_branch: !self.no_branch,
            max_repair_iters: self.max_repair_iters,
            max_turns_per_stage: self.max_turns,
        };
        cfg.engine = self.engine;
        cfg.jobs = self.jobs;
        Ok(cfg)
    }

    fn single_task(&self) -> Result<String, CliError> {
        match self.tasks.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(CliError::Config("exactly one --task is required".into())),
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.into_config()?;
            let report = cmd_run(&cfg)?;
            print!("{}", report.render_text());
            if report.failed_tasks.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::Stage { common, stage } => {
            let task = common.single_task()?;
            let cfg = common.into_config()?;
            print_json(&cmd_stage(&cfg, &task, stage)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(common) => {
            let task = common.single_task()?;
            let cfg = common.into_config()?;
            print_json(&cmd_eval(&cfg, &task)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out_dir, json } => {
            let report = cmd_report(&out_dir)?;
            if json {
                print_json(&report);
            } else {
                print!("{}", report.render_text());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
