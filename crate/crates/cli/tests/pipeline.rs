mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use common::*;
use povgen_cli::{cmd_report, cmd_run, RunConfig};
use povgen_core::eval::{apply_instrumentation, plan_instrumentation, restore_instrumentation, Category, TRACE_PREFIX};
use povgen_core::gateway::GatewayMode;
use povgen_core::manifest::{dockerfile_scaffold, tree_digest, Language, DOCKERFILE_NAME};
use povgen_core::sandbox::{build_and_run, LocalEngine};
use povgen_core::workflow::{check_isolation, read_json, StageResult};

struct Setup {
    dir: tempfile::TempDir,
    manifest: PathBuf,
}

fn setup(ids: &[&str]) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let repo = git_repo("toy-cmdi", &dir.path().join("repo"));
    let specs: Vec<TaskSpec<'_>> = ids
        .iter()
        .map(|id| TaskSpec {
            id,
            cwe: "CWE-78",
            repo: &repo,
            fix_functions: &["ping_host"],
            language: "c",
        })
        .collect();
    let manifest = dir.path().join("manifest.toml");
    write_manifest(&manifest, &specs);
    Setup { dir, manifest }
}

impl Setup {
    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cfg(&self, out: &str, mode: GatewayMode) -> RunConfig {
        let mut cfg = run_config(&self.manifest, &self.p(out), mode);
        cfg.cache_dir = Some(self.p("cache"));
        if mode != GatewayMode::Replay {
            cfg.script_dir = Some(self.p("scripts"));
        }
        cfg
    }
}

#[test]
fn toy_task_record_and_replay_agree() {
    let s = setup(&["toy"]);
    write_script(&s.p("scripts"), "toy", &toy_script(), 200);
    let rec = cmd_run(&s.cfg("rec", GatewayMode::Record)).unwrap();
    let rep = cmd_run(&s.cfg("rep", GatewayMode::Replay)).unwrap();
    let (a, b) = (&rec.per_task[0], &rep.per_task[0]);
    assert_eq!(a.category, Category::ReachedVulnerableFunction);
    assert_eq!(a.attempts, 2);
    assert_eq!(a.pipeline_digest, b.pipeline_digest);
    assert_eq!(a.spent_usd, b.spent_usd);

    let mut stages: Vec<PathBuf> = fs::read_dir(s.p("rep/toy/transcripts")).unwrap().map(|e| e.unwrap().path()).collect();
    stages.sort();
    let stages: Vec<StageResult> = stages.iter().map(|p| read_json(p).unwrap()).collect();
    check_isolation(&stages).unwrap();
    assert!(s.p("rep/toy/payloads/flow.json").exists());
    assert!(s.p("rep/toy/payloads/conditions.json").exists());
}

#[test]
fn replay_without_a_recording_is_reported_per_task() {
    let s = setup(&["toy"]);
    let report = cmd_run(&s.cfg("out", GatewayMode::Replay)).unwrap();
    assert!(report.per_task.is_empty());
    assert_eq!(report.failed_tasks.len(), 1);
    assert!(report.failed_tasks[0].error.contains("replay"), "{}", report.failed_tasks[0].error);
}

#[test]
fn funnel_counts_every_rung() {
    let s = setup(&["toy", "fail-build", "fail-passes", "fail-nocov"]);
    let dir = s.p("scripts");
    write_script(&dir, "toy", &toy_script(), 0);
    write_script(&dir, "fail-build", &failing_script(BROKEN_TEST, "pov_ping", 3), 0);
    write_script(&dir, "fail-passes", &failing_script(WEAK_TEST, "pov_ping", 3), 0);
    write_script(&dir, "fail-nocov", &failing_script(SIMULATED_TEST, "pov_ping", 3), 0);
    let mut cfg = s.cfg("out", GatewayMode::Live);
    cfg.jobs = 2;
    cmd_run(&cfg).unwrap();
    let report = cmd_report(&s.p("out")).unwrap();
    assert_eq!(report.per_task.len(), 4);
    for c in [
        Category::BuildFailed,
        Category::RanButPassed,
        Category::FailedNoCoverage,
        Category::ReachedVulnerableFunction,
    ] {
        assert_eq!(report.funnel.get(&c), Some(&1), "{:?}", report.funnel);
    }
    assert!(fs::read_to_string(s.p("out/report.txt")).unwrap().contains("fail-nocov"));
}

#[test]
fn repair_attempts_follow_the_cap() {
    for (iters, want) in [(0, 1), (1, 1), (3, 3)] {
        let s = setup(&["fail-passes"]);
        write_script(&s.p("scripts"), "fail-passes", &failing_script(WEAK_TEST, "pov_ping", 5), 0);
        let mut cfg = s.cfg("out", GatewayMode::Live);
        cfg.ablation.max_repair_iters = iters;
        let row = cmd_run(&cfg).unwrap().per_task.remove(0);
        assert_eq!(row.attempts, want, "max_repair_iters={iters}");
    }
}

fn stripped(log: &str) -> Vec<&str> {
    log.lines().filter(|l| !l.contains(TRACE_PREFIX)).collect()
}

#[test]
fn c_instrumentation_does_not_change_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    assert!(Command::new("cp").arg("-r").arg(fixtures().join("toy-cmdi")).arg(&root).status().unwrap().success());
    let (scaffold, _) = dockerfile_scaffold(Language::C, None);
    fs::write(
        root.join(DOCKERFILE_NAME),
        format!("{scaffold}RUN gcc -o netcheck src/main.c src/net.c\nCMD [\"./netcheck\", \"-bad\"]\n"),
    )
    .unwrap();
    let engine = LocalEngine::new().unwrap();
    let t = Duration::from_secs(120);
    let plain = build_and_run(&engine, &root, "plain", t, t).unwrap().run.unwrap();
    let before = tree_digest(&root).unwrap();

    let fix = ["ping_host".to_string(), "valid_host".to_string()];
    let plan = plan_instrumentation(&root, &fix, Language::C).unwrap();
    let backup = tempfile::tempdir().unwrap();
    let applied = apply_instrumentation(&root, &plan, backup.path()).unwrap();
    let instr = build_and_run(&engine, &root, "instr", t, t).unwrap().run.unwrap();
    restore_instrumentation(&root, &applied).unwrap();

    assert_eq!(plain.exit_code, Some(1));
    assert_eq!(plain.exit_code, instr.exit_code);
    assert_eq!(stripped(&plain.log), stripped(&instr.log));
    assert!(instr.log.contains("FAULTLINE_COV:ping_host"));
    assert!(instr.log.contains("FAULTLINE_COV:valid_host"));
    assert_eq!(tree_digest(&root).unwrap(), before);
}

fn povgen(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_povgen")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "schema = 7\n").unwrap();
    let out = povgen(&["run", "--manifest", "bad.toml", "--engine", "local"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = povgen(&["report", "--out-dir", "missing"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = povgen(&["stage", "--manifest", "bad.toml", "--stage", "nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_runs_a_scripted_task() {
    let s = setup(&["toy"]);
    write_script(&s.p("scripts"), "toy", &toy_script(), 0);
    let out = povgen(
        &[
            "run",
            "--manifest",
            "manifest.toml",
            "--engine",
            "local",
            "--script-dir",
            "scripts",
            "--max-repair-iters",
            "2",
        ],
        s.dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("toy"), "{stdout}");
    let report = povgen(&["report", "--json"], s.dir.path());
    let json: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(json["per_task"][0]["category"], "ReachedVulnerableFunction");
}
