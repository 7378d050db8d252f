use std::fs;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use povgen_core::manifest::{dockerfile_scaffold, Language, Workspace, DOCKERFILE_NAME};
use povgen_core::output::{ToolCall, ToolKind};
use povgen_core::sandbox::{LocalEngine, SandboxConfig, SandboxRoot, ToolError};
use proptest::prelude::*;

const CANARY: &str = "CANARY-7f3a do not touch";

struct Fixture {
    _dir: tempfile::TempDir,
    outer: PathBuf,
    sb: SandboxRoot,
}

impl Fixture {
    fn new(cfg: SandboxConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let outer = dir.path().canonicalize().unwrap();
        fs::write(outer.join("canary.txt"), CANARY).unwrap();
        fs::create_dir(outer.join("secrets")).unwrap();
        fs::write(outer.join("secrets/key"), CANARY).unwrap();

        let ws = outer.join("ws");
        fs::create_dir_all(ws.join("src")).unwrap();
        fs::write(ws.join("src/app.c"), "int main(void) { return 0; }\n").unwrap();
        let (scaffold, _) = dockerfile_scaffold(Language::C, None);
        fs::write(ws.join(DOCKERFILE_NAME), scaffold).unwrap();
        symlink(&outer, ws.join("link_out")).unwrap();
        symlink(outer.join("canary.txt"), ws.join("canary_link")).unwrap();
        symlink(outer.join("missing.txt"), ws.join("dangling")).unwrap();
        symlink("../secrets", ws.join("src/rel_out")).unwrap();
        symlink(ws.join(DOCKERFILE_NAME), ws.join("df_link")).unwrap();

        let workspace = Workspace::open(&ws).unwrap();
        let sb = SandboxRoot::new(&workspace, Arc::new(LocalEngine::new().unwrap()), cfg, "confine").unwrap();
        Fixture { _dir: dir, outer, sb }
    }

    fn assert_canary_intact(&self) {
        assert_eq!(fs::read_to_string(self.outer.join("canary.txt")).unwrap(), CANARY);
        assert_eq!(fs::read_to_string(self.outer.join("secrets/key")).unwrap(), CANARY);
        let mut names: Vec<String> = fs::read_dir(&self.outer)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["canary.txt", "secrets", "ws"], "a file appeared outside the workspace");
        assert_eq!(fs::read_dir(self.outer.join("secrets")).unwrap().count(), 1);
    }

    fn exec(&self, tool: ToolKind, args: &[(&str, &str)]) -> Result<String, ToolError> {
        let call = ToolCall::new(tool, args.iter().map(|(k, v)| (*k, *v))).unwrap();
        self.sb
            .execute(&call, &ToolKind::ALL, Duration::from_secs(60))
            .map(|o| o.text)
    }
}

fn hostile_paths(outer: &Path) -> Vec<String> {
    let abs = outer.join("canary.txt").display().to_string();
    vec![
        "../canary.txt".into(),
        "../../../../../../etc/passwd".into(),
        "/project/../canary.txt".into(),
        "/project/src/../../canary.txt".into(),
        "src/../../canary.txt".into(),
        "./../secrets/key".into(),
        abs,
        outer.join("secrets").display().to_string(),
        "/etc/passwd".into(),
        "/etc".into(),
        "link_out".into(),
        "link_out/canary.txt".into(),
        "link_out/secrets/key".into(),
        "canary_link".into(),
        "dangling".into(),
        "src/rel_out".into(),
        "src/rel_out/key".into(),
        "/project/link_out/secrets".into(),
        "..".into(),
    ]
}

#[test]
fn read_tools_never_escape() {
    let fx = Fixture::new(SandboxConfig::default());
    for p in hostile_paths(&fx.outer) {
        match fx.exec(ToolKind::Read, &[("path", &p)]) {
            Err(ToolError::PathEscape { .. }) | Err(ToolError::NotFound { .. }) => {}
            other => panic!("Read {p:?}: {other:?}"),
        }
        match fx.exec(ToolKind::ListDir, &[("path", &p)]) {
            Err(ToolError::PathEscape { .. }) | Err(ToolError::NotFound { .. }) => {}
            other => panic!("ListDir {p:?}: {other:?}"),
        }
        if let Ok(out) = fx.exec(ToolKind::Grep, &[("pattern", "CANARY"), ("scope", &p)]) {
            assert!(!out.contains("CANARY-7f3a"), "Grep scope {p:?} leaked: {out}");
        }
        if let Ok(out) = fx.exec(ToolKind::Find, &[("pattern", &p)]) {
            assert!(!out.contains("canary") && !out.contains("key"), "Find {p:?}: {out}");
        }
    }
    let all = fx.exec(ToolKind::Grep, &[("pattern", "CANARY")]).unwrap();
    assert!(all.contains("(no matches)"), "{all}");
    let found = fx.exec(ToolKind::Find, &[("pattern", "**/*")]).unwrap();
    assert_eq!(found.trim(), "Dockerfile.vuln\nsrc/app.c");
    fx.assert_canary_intact();
}

#[test]
fn writes_never_escape() {
    let fx = Fixture::new(SandboxConfig::default());
    let mut targets = hostile_paths(&fx.outer);
    targets.extend(["../new.txt".into(), "link_out/new.txt".into(), "src/rel_out/new".into()]);
    for p in targets {
        let r = fx.exec(ToolKind::Write, &[("path", &p), ("content", "overwritten\n")]);
        assert!(
            matches!(
                r,
                Err(ToolError::PathEscape { .. }) | Err(ToolError::IsADirectory { .. })
            ),
            "Write {p:?}: {r:?}"
        );
    }
    fx.assert_canary_intact();
    // A legitimate write still works.
    fx.exec(ToolKind::Write, &[("path", "/project/tests/t.c"), ("content", "x\n")]).unwrap();
    assert_eq!(fs::read_to_string(fx.sb.root().join("tests/t.c")).unwrap(), "x\n");
}

fn protected(fx: &Fixture) -> String {
    Workspace::open(fx.sb.root()).unwrap().protected_prefix
}

#[test]
fn dockerfile_guard_rejects_prefix_mutations() {
    let fx = Fixture::new(SandboxConfig::default());
    let prefix = protected(&fx);
    let lines: Vec<&str> = prefix.lines().collect();
    let original = fs::read_to_string(fx.sb.root().join(DOCKERFILE_NAME)).unwrap();

    let mut mutations = Vec::new();
    for i in 0..lines.len() {
        let mut l: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        l[i].push_str(" # changed");
        mutations.push((i + 1, l.join("\n") + "\nCMD [\"true\"]\n"));
        let mut l: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        l.remove(i);
        mutations.push((i + 1, l.join("\n") + "\nCMD [\"true\"]\n"));
    }
    mutations.push((1, format!("FROM alpine\n{prefix}")));
    mutations.push((1, String::new()));

    for (line, content) in &mutations {
        for path in ["Dockerfile.vuln", "/project/Dockerfile.vuln", "./src/../Dockerfile.vuln", "df_link"] {
            match fx.exec(ToolKind::Write, &[("path", path), ("content", content)]) {
                Err(ToolError::DockerfileGuardViolation { line: got }) => assert_eq!(got, *line, "{content}"),
                other => panic!("{path}: mutation accepted: {other:?}\n{content}"),
            }
        }
    }
    assert_eq!(fs::read_to_string(fx.sb.root().join(DOCKERFILE_NAME)).unwrap(), original);

    let appended = format!("{prefix}\nRUN true\nCMD [\"true\"]\n");
    fx.exec(ToolKind::Write, &[("path", "Dockerfile.vuln"), ("content", &appended)]).unwrap();
    assert_eq!(fs::read_to_string(fx.sb.root().join(DOCKERFILE_NAME)).unwrap(), appended);
}

#[test]
fn run_timeout_is_enforced() {
    let timeout = Duration::from_secs(3);
    let fx = Fixture::new(SandboxConfig {
        run_timeout: timeout,
        ..SandboxConfig::default()
    });
    let df = format!("{}CMD [\"sleep\", \"60\"]\n", protected(&fx));
    fs::write(fx.sb.root().join(DOCKERFILE_NAME), df).unwrap();
    let started = Instant::now();
    let report = fx.sb.run_container("sleepy", Duration::from_secs(120)).unwrap();
    let elapsed = started.elapsed();
    assert!(report.build_ok && report.timed_out, "{report:?}");
    assert_eq!(report.exit_code, None);
    assert!(elapsed >= timeout, "{elapsed:?}");
    assert!(elapsed <= timeout + Duration::from_secs(5), "{elapsed:?}");
}

#[test]
fn disallowed_tools_are_refused() {
    let fx = Fixture::new(SandboxConfig::default());
    let call = ToolCall::new(ToolKind::Write, [("path", "a.txt"), ("content", "x")]).unwrap();
    let r = fx.sb.execute(&call, &ToolKind::READ_ONLY, Duration::from_secs(5));
    assert!(matches!(r, Err(ToolError::ToolNotAllowed(ToolKind::Write))));
    assert!(!fx.sb.root().join("a.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn resolved_paths_stay_under_root(
        parts in proptest::collection::vec(
            prop_oneof![
                Just(".."), Just("."), Just("src"), Just("link_out"), Just("canary_link"),
                Just("rel_out"), Just("dangling"), Just("new"), Just("/project"), Just("")
            ],
            0..7,
        )
    ) {
        let fx = fixture();
        let raw = parts.join("/");
        if let Ok(p) = fx.sb.resolve(&raw) {
            prop_assert!(p.starts_with(fx.sb.root()), "{raw:?} -> {p:?}");
        }
    }
}

fn fixture() -> &'static Fixture {
    static FX: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    FX.get_or_init(|| Fixture::new(SandboxConfig::default()))
}
