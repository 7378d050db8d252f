//! Fixture repositories and scripted model sessions shared by the CLI tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use povgen_cli::{RunConfig, DEFAULT_MODEL};
use povgen_core::gateway::GatewayMode;
use povgen_core::workflow::AblationConfig;
use serde_json::json;

pub const TOY_REPORT: &str = "netcheck passes the host argument to a shell command without sanitizing it. \
A host containing shell metacharacters such as ';' makes ping_host run arbitrary commands.";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn core_tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

fn copy_dir(src: &Path, dest: &Path) {
    fs::create_dir_all(dest).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dest.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &to);
        } else {
            fs::copy(e.path(), &to).unwrap();
        }
    }
}

/// Copies a fixture tree into `dest` and commits it as a one-commit repo.
pub fn git_repo(fixture: &str, dest: &Path) -> PathBuf {
    copy_dir(&fixtures().join(fixture), dest);
    let git = |args: &[&str]| {
        let out = Command::new("git")
            .arg("-C")
            .arg(dest)
            .args(["-c", "user.name=fixture", "-c", "user.email=fixture@example.invalid"])
            .args(args)
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    git(&["init", "-q"]);
    git(&["add", "-A"]);
    git(&["commit", "-q", "-m", "import"]);
    dest.to_path_buf()
}

pub struct TaskSpec<'a> {
    pub id: &'a str,
    pub cwe: &'a str,
    pub repo: &'a Path,
    pub fix_functions: &'a [&'a str],
    pub language: &'a str,
}

pub fn write_manifest(path: &Path, tasks: &[TaskSpec<'_>]) {
    let mut s = String::from("schema = 1\n");
    for t in tasks {
        let fns: Vec<String> = t.fix_functions.iter().map(|f| format!("{f:?}")).collect();
        s.push_str(&format!(
            "\n[[tasks]]\nid = {:?}\ncwe = {:?}\nreport_text = {:?}\nrepo_path = {:?}\nvulnerable_commit = \"HEAD\"\nfix_functions = [{}]\nlanguage = {:?}\nbudget_usd = 5.0\ntime_budget = \"30m\"\n",
            t.id,
            t.cwe,
            TOY_REPORT,
            t.repo.display().to_string(),
            fns.join(", "),
            t.language
        ));
    }
    fs::write(path, s).unwrap();
}

pub fn run_config(manifest: &Path, out_dir: &Path, mode: GatewayMode) -> RunConfig {
    let mut cfg = RunConfig::new(manifest, out_dir);
    cfg.mode = mode;
    cfg.engine = povgen_cli::EngineChoice::Local;
    cfg.model_id = DEFAULT_MODEL.to_string();
    cfg.ablation = AblationConfig {
        max_repair_iters: 2,
        ..AblationConfig::default()
    };
    cfg
}

// ---------------------------------------------------------------------------
// Scripted model turns

fn tool(name: &str, args: &[(&str, &str)]) -> String {
    let mut s = format!("<TOOL>\n{name}\n");
    for (k, v) in args {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s.push_str("</TOOL>");
    s
}

fn write(path: &str, content: &str) -> String {
    format!("<TOOL>\nWrite\npath: {path}\ncontent:\n```\n{content}```\n</TOOL>")
}

pub fn dockerfile(test_src: &str, binary: &str) -> String {
    format!(
        "FROM gcc:13\nWORKDIR /project\nCOPY . /project\n# Do not modify anything above this line\n\n\
         RUN gcc -o {binary} {test_src} src/net.c\nCMD [\"./{binary}\"]\n"
    )
}

pub const FLOW_TURN: &str = r#"The report points at ping_host; the host comes from argv.
<FLOW>
{"role": "Source", "code": "int rc = ping_host(argv[1]);", "variable": "argv[1]", "file": "/project/src/main.c"}
{"role": "Intermediate", "code": "if (!valid_host(host)) {", "variable": "host", "file": "/project/src/net.c"}
{"role": "Sink", "code": "return system(cmd);", "variable": "cmd", "file": "/project/src/net.c", "remarks": "host is formatted into a shell command line"}
</FLOW>"#;

pub const SEQUENCE_TURN: &str = r#"<SEQUENCE>
{"type": "If-Else", "code": "if (!valid_host(host)) {", "file": "/project/src/net.c", "outcome": "False - the host must pass validation"}
{"type": "If-Else", "code": "if (host[0] == '-')", "file": "/project/src/net.c", "outcome": "False - the host must not start with a dash"}
</SEQUENCE>"#;

pub const CONDITIONS_TURN: &str = "<CONDITIONS>
1. The host must be non-empty and at most 64 characters long.
2. The host must not start with '-'.
3. Shell metacharacters such as ';' are not filtered and reach system().
</CONDITIONS>";

pub const WEAK_TEST: &str = r#"#include <stdio.h>
#include "../src/net.h"

int main(void)
{
    int rc = ping_host("localhost");
    printf("rc=%d\n", rc);
    return 0;
}
"#;

pub const POV_TEST: &str = r#"#include <stdio.h>
#include <unistd.h>
#include "../src/net.h"

int main(void)
{
    unlink("pwned");
    ping_host("localhost; touch pwned");
    if (access("pwned", F_OK) == 0) {
        printf("injected command ran\n");
        return 1;
    }
    printf("no injection\n");
    return 0;
}
"#;

pub const BROKEN_TEST: &str = r#"#include "../src/net.h"

int main(void)
{
    return ping_host("localhost; true") == 0 ? 1 : 0
}
"#;

pub const SIMULATED_TEST: &str = r#"#include <stdio.h>
#include <stdlib.h>

int main(void)
{
    /* does not use the project */
    system("echo simulated");
    return 1;
}
"#;

fn analysis_turns() -> Vec<String> {
    vec![
        format!("Let me find the shell call.\n{}", tool("Grep", &[("pattern", "system(")])),
        FLOW_TURN.to_string(),
        SEQUENCE_TURN.to_string(),
        CONDITIONS_TURN.to_string(),
    ]
}

fn testgen_turns(test: &str, name: &str, run: bool) -> Vec<String> {
    let path = format!("/project/tests/{name}.c");
    let mut first = format!(
        "Writing the test and its build steps.\n{}\n{}",
        write(&path, test),
        write("/project/Dockerfile.vuln", &dockerfile(&format!("tests/{name}.c"), name))
    );
    if run {
        first.push('\n');
        first.push_str(&tool("Run", &[]));
    }
    vec![first, "<DONE>".to_string()]
}

/// The toy task: a weak first test that exits 0, repaired into a real PoV.
pub fn toy_script() -> Vec<String> {
    let mut v = analysis_turns();
    v.extend(testgen_turns(WEAK_TEST, "pov_ping", true));
    v.push(format!(
        "The test never injected anything. Using a host with a command separator.\n{}\n{}",
        write("/project/tests/pov_ping.c", POV_TEST),
        tool("Run", &[])
    ));
    v.push("The injected command ran and the test now exits non-zero.\n<DONE>".into());
    v
}

/// A task whose test never fails as required; repairs change nothing.
pub fn failing_script(test: &str, name: &str, repairs: usize) -> Vec<String> {
    let mut v = analysis_turns();
    v.extend(testgen_turns(test, name, false));
    v.extend(std::iter::repeat_n("<DONE>".to_string(), repairs));
    v
}

/// Writes `<dir>/<id>.json` with every turn priced at `completion_tokens`.
pub fn write_script(dir: &Path, id: &str, turns: &[String], completion_tokens: u64) {
    fs::create_dir_all(dir).unwrap();
    let entries: Vec<_> = turns
        .iter()
        .map(|t| json!({"text": t, "prompt_tokens": 0, "completion_tokens": completion_tokens}))
        .collect();
    fs::write(dir.join(format!("{id}.json")), serde_json::to_string_pretty(&entries).unwrap()).unwrap();
}

/// Test generation only, for runs with both analysis stages disabled.
pub fn testgen_only_script() -> Vec<String> {
    let mut v = testgen_turns(POV_TEST, "pov_ping", true);
    v.push("<DONE>".into());
    v
}
