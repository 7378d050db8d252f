//! Benchmark task manifest and workspace preparation.
//!
//! A manifest is a TOML document:
//!
//! ```toml
//! schema = 1
//!
//! [[tasks]]
//! id = "CVE-2021-41269"
//! cwe = "CWE-94"
//! report_text = "..."
//! repo_path = "repos/cron-utils"        # relative to the manifest file
//! vulnerable_commit = "abc123"
//! fix_functions = ["com.cronutils.validation.CronValidator.isValid"]
//! language = "java"
//! build_hint = "build.sh"               # optional
//! budget_usd = 5.0                      # optional
//! time_budget = "40m"                   # optional
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

pub const SCHEMA_VERSION: i64 = 1;
pub const DOCKERFILE_NAME: &str = "Dockerfile.vuln";
pub const PROTECTED_MARKER: &str = "# Do not modify anything above this line";
/// Directory the project is copied to inside the container; also the path
/// under which the agent sees the workspace.
pub const CONTAINER_WORKDIR: &str = "/project";
pub const DEFAULT_BUDGET_USD: f64 = 5.0;
pub const DEFAULT_TIME_BUDGET: Duration = Duration::from_secs(40 * 60);

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("task {task:?}: field `{field}`: {reason}")]
    Validation {
        task: String,
        field: String,
        reason: String,
    },
    #[error("checkout failed: {0}")]
    Checkout(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Cwe {
    PathTraversal,
    CommandInjection,
    CrossSiteScripting,
    CodeInjection,
}

impl Cwe {
    pub const ALL: [Cwe; 4] = [
        Cwe::PathTraversal,
        Cwe::CommandInjection,
        Cwe::CrossSiteScripting,
        Cwe::CodeInjection,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Cwe::PathTraversal => "CWE-22",
            Cwe::CommandInjection => "CWE-78",
            Cwe::CrossSiteScripting => "CWE-79",
            Cwe::CodeInjection => "CWE-94",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Cwe::PathTraversal => "Path Traversal",
            Cwe::CommandInjection => "OS Command Injection",
            Cwe::CrossSiteScripting => "Cross-Site Scripting",
            Cwe::CodeInjection => "Code Injection",
        }
    }
}

impl fmt::Display for Cwe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unsupported CWE {0:?} (supported: CWE-22, CWE-78, CWE-79, CWE-94)")]
pub struct UnsupportedCwe(pub String);

impl FromStr for Cwe {
    type Err = UnsupportedCwe;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // New categories are added here together with their criteria in `eval`.
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Cwe::ALL
            .into_iter()
            .find(|c| c.id() == norm)
            .ok_or_else(|| UnsupportedCwe(s.to_string()))
    }
}

impl TryFrom<String> for Cwe {
    type Error = UnsupportedCwe;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Cwe> for String {
    fn from(c: Cwe) -> String {
        c.id().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    C,
    Cpp,
    Other,
}

impl Language {
    fn base_image(self) -> &'static str {
        match self {
            Language::Java => "maven:3.9-eclipse-temurin-17",
            Language::C | Language::Cpp => "gcc:13",
            Language::Other => "ubuntu:22.04",
        }
    }
}

/// One benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityTask {
    pub id: String,
    pub cwe: Cwe,
    pub report_text: String,
    pub repo_path: PathBuf,
    pub vulnerable_commit: String,
    pub fixed_commit: Option<String>,
    pub fix_functions: Vec<String>,
    pub language: Language,
    pub build_hint: Option<PathBuf>,
    pub budget_usd: f64,
    #[serde(with = "humantime_serde")]
    pub time_budget: Duration,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema: Option<i64>,
    #[serde(default)]
    tasks: Vec<RawTask>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    id: String,
    cwe: String,
    report_text: String,
    repo_path: PathBuf,
    vulnerable_commit: String,
    fixed_commit: Option<String>,
    #[serde(default)]
    fix_functions: Vec<String>,
    language: Language,
    build_hint: Option<PathBuf>,
    budget_usd: Option<f64>,
    time_budget: Option<String>,
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl RawTask {
    fn validate(self, base_dir: &Path) -> Result<VulnerabilityTask, ManifestError> {
        let id = self.id.clone();
        let invalid = |field: &str, reason: String| ManifestError::Validation {
            task: id.clone(),
            field: field.to_string(),
            reason,
        };
        if !is_safe_id(&self.id) {
            return Err(invalid(
                "id",
                "must be non-empty and use only letters, digits, '-', '_' or '.'".into(),
            ));
        }
        let cwe: Cwe = self.cwe.parse().map_err(|e: UnsupportedCwe| invalid("cwe", e.to_string()))?;
        if self.fix_functions.is_empty() {
            return Err(invalid("fix_functions", "must list at least one function".into()));
        }
        if let Some(f) = self.fix_functions.iter().find(|f| f.trim().is_empty() || f.contains('\n')) {
            return Err(invalid("fix_functions", format!("invalid function name {f:?}")));
        }
        if self.vulnerable_commit.trim().is_empty() {
            return Err(invalid("vulnerable_commit", "must not be empty".into()));
        }
        let budget_usd = self.budget_usd.unwrap_or(DEFAULT_BUDGET_USD);
        if !(budget_usd > 0.0 && budget_usd.is_finite()) {
            return Err(invalid("budget_usd", format!("must be > 0, got {budget_usd}")));
        }
        let time_budget = match &self.time_budget {
            Some(s) => humantime::parse_duration(s).map_err(|e| invalid("time_budget", e.to_string()))?,
            None => DEFAULT_TIME_BUDGET,
        };
        if time_budget.is_zero() {
            return Err(invalid("time_budget", "must be > 0".into()));
        }
        let repo_path = if self.repo_path.is_absolute() {
            self.repo_path
        } else {
            base_dir.join(self.repo_path)
        };
        Ok(VulnerabilityTask {
            id: self.id,
            cwe,
            report_text: self.report_text,
            repo_path,
            vulnerable_commit: self.vulnerable_commit,
            fixed_commit: self.fixed_commit,
            fix_functions: self.fix_functions,
            language: self.language,
            build_hint: self.build_hint,
            budget_usd,
            time_budget,
        })
    }
}

/// Parses manifest text; relative repo paths resolve against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<VulnerabilityTask>, ManifestError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raw: RawManifest = toml::from_str(text).map_err(|e| ManifestError::Parse(e.to_string()))?;
    match raw.schema {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(ManifestError::Parse(format!("unsupported schema version {v}"))),
        None => return Err(ManifestError::Parse("missing `schema = 1`".into())),
    }
    let mut seen = HashSet::new();
    let mut tasks = Vec::with_capacity(raw.tasks.len());
    for t in raw.tasks {
        if !seen.insert(t.id.clone()) {
            return Err(ManifestError::Validation {
                task: t.id,
                field: "id".into(),
                reason: "duplicate task id".into(),
            });
        }
        tasks.push(t.validate(base_dir)?);
    }
    Ok(tasks)
}

pub fn load_manifest(path: &Path) -> Result<Vec<VulnerabilityTask>, ManifestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// An isolated copy of the project at the vulnerable commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub root: PathBuf,
    pub dockerfile_path: PathBuf,
    pub immutable_prefix_len: usize,
    /// Lines `0..immutable_prefix_len` of the scaffold, each newline-terminated.
    pub protected_prefix: String,
}

impl Workspace {
    /// Reconstructs the workspace description from an existing directory.
    pub fn open(root: &Path) -> Result<Self, ManifestError> {
        let dockerfile_path = root.join(DOCKERFILE_NAME);
        let text = fs::read_to_string(&dockerfile_path).map_err(io_err(&dockerfile_path))?;
        let idx = text
            .lines()
            .position(|l| l.contains(PROTECTED_MARKER))
            .ok_or_else(|| ManifestError::Checkout(format!("{} has no protected marker line", dockerfile_path.display())))?;
        let protected_prefix: String = text.lines().take(idx + 1).map(|l| format!("{l}\n")).collect();
        Ok(Workspace {
            root: root.to_path_buf(),
            dockerfile_path,
            immutable_prefix_len: idx + 1,
            protected_prefix,
        })
    }
}

/// Dockerfile scaffold text and the number of protected lines.
pub fn dockerfile_scaffold(language: Language, build_hint: Option<&str>) -> (String, usize) {
    let mut prefix = vec![
        format!("FROM {}", language.base_image()),
        format!("WORKDIR {CONTAINER_WORKDIR}"),
        format!("COPY . {CONTAINER_WORKDIR}"),
    ];
    if let Some(hint) = build_hint {
        prefix.push(format!("RUN sh {hint}"));
    }
    prefix.push(PROTECTED_MARKER.to_string());
    let len = prefix.len();
    let mut text: String = prefix.iter().map(|l| format!("{l}\n")).collect();
    text.push_str("\n# Add any build steps for the test below, and set CMD so that running the image runs the test.\n");
    (text, len)
}

fn git(repo: &Path) -> Command {
    let mut cmd = Command::new("git");
    cmd.arg("-C").arg(repo);
    cmd
}

const HINT_COPY: &str = ".povgen-build-hint.sh";

/// Materializes the task's repository at `vulnerable_commit` into `out_dir`
/// and writes the `Dockerfile.vuln` scaffold.
pub fn prepare_workspace(task: &VulnerabilityTask, out_dir: &Path) -> Result<Workspace, ManifestError> {
    let repo = &task.repo_path;
    if !repo.exists() {
        return Err(ManifestError::Checkout(format!("repository {} does not exist", repo.display())));
    }
    let verify = git(repo)
        .args(["rev-parse", "--verify", "--quiet"])
        .arg(format!("{}^{{commit}}", task.vulnerable_commit))
        .output()
        .map_err(|e| ManifestError::Checkout(format!("cannot run git: {e}")))?;
    if !verify.status.success() {
        return Err(ManifestError::Checkout(format!(
            "commit {:?} not found in {}",
            task.vulnerable_commit,
            repo.display()
        )));
    }

    if out_dir.exists() && fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some() {
        return Err(ManifestError::Io {
            path: out_dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::AlreadyExists, "workspace directory is not empty"),
        });
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let archive = git(repo)
        .args(["archive", "--format=tar"])
        .arg(&task.vulnerable_commit)
        .output()
        .map_err(|e| ManifestError::Checkout(format!("cannot run git archive: {e}")))?;
    if !archive.status.success() {
        return Err(ManifestError::Checkout(String::from_utf8_lossy(&archive.stderr).into_owned()));
    }
    tar::Archive::new(archive.stdout.as_slice())
        .unpack(out_dir)
        .map_err(io_err(out_dir))?;

    let hint = match &task.build_hint {
        None => None,
        Some(h) if h.is_relative() && out_dir.join(h).is_file() => Some(h.to_string_lossy().into_owned()),
        Some(h) if h.is_absolute() && h.is_file() => {
            let dest = out_dir.join(HINT_COPY);
            fs::copy(h, &dest).map_err(io_err(h))?;
            Some(HINT_COPY.to_string())
        }
        Some(h) => {
            return Err(ManifestError::Validation {
                task: task.id.clone(),
                field: "build_hint".into(),
                reason: format!("{} not found", h.display()),
            })
        }
    };
    let (text, prefix_len) = dockerfile_scaffold(task.language, hint.as_deref());
    let dockerfile_path = out_dir.join(DOCKERFILE_NAME);
    fs::write(&dockerfile_path, &text).map_err(io_err(&dockerfile_path))?;
    let protected_prefix = text.lines().take(prefix_len).map(|l| format!("{l}\n")).collect();
    Ok(Workspace {
        root: out_dir.to_path_buf(),
        dockerfile_path,
        immutable_prefix_len: prefix_len,
        protected_prefix,
    })
}

/// Content digest of a directory tree: relative paths, file bytes and
/// symlink targets, in sorted order.
pub fn tree_digest(root: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    for entry in WalkDir::new(root).sort_by_file_name().min_depth(1) {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel = rel.to_string_lossy();
        let ft = entry.file_type();
        if ft.is_symlink() {
            h.update(b"L");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read_link(entry.path())?.to_string_lossy().as_bytes());
        } else if ft.is_dir() {
            h.update(b"D");
            h.update(rel.as_bytes());
        } else {
            let bytes = fs::read(entry.path())?;
            h.update(b"F");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CRON_REPORT: &str = "cron-utils is a Java library to define, parse, validate, migrate crons as well as get human readable descriptions for them. In affected versions A template Injection was identified in cron-utils enabling attackers to inject arbitrary Java EL expressions, leading to unauthenticated Remote Code Execution (RCE) vulnerability.";

    fn one_task(extra: &str) -> String {
        format!(
            "schema = 1\n[[tasks]]\nid = \"CVE-2021-41269\"\ncwe = \"CWE-94\"\nreport_text = \"{CRON_REPORT}\"\nrepo_path = \"repos/cron-utils\"\nvulnerable_commit = \"abc123\"\nfix_functions = [\"CronValidator.isValid\"]\nlanguage = \"java\"\n{extra}"
        )
    }

    #[test]
    fn cron_utils_entry() {
        let tasks = parse_manifest(&one_task(""), Path::new("/data")).unwrap();
        assert_eq!(tasks.len(), 1);
        let t = &tasks[0];
        assert_eq!(t.cwe, Cwe::CodeInjection);
        assert_eq!(t.repo_path, Path::new("/data/repos/cron-utils"));
        assert_eq!(t.budget_usd, 5.0);
        assert_eq!(t.time_budget, Duration::from_secs(2400));
        assert!(t.report_text.contains("inject arbitrary Java EL"));
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("", Path::new(".")).unwrap().is_empty());
        assert!(parse_manifest("schema = 1\n", Path::new(".")).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_are_named() {
        let text = format!("{}\n{}", one_task(""), one_task("").replace("schema = 1\n", ""));
        match parse_manifest(&text, Path::new(".")) {
            Err(ManifestError::Validation { task, field, .. }) => {
                assert_eq!(task, "CVE-2021-41269");
                assert_eq!(field, "id");
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let cases = [
            (one_task("").replace("CWE-94", "CWE-89"), "cwe"),
            (one_task("").replace("[\"CronValidator.isValid\"]", "[]"), "fix_functions"),
            (one_task("budget_usd = 0.0"), "budget_usd"),
            (one_task("time_budget = \"0s\""), "time_budget"),
            (one_task("time_budget = \"forever\""), "time_budget"),
            (one_task("").replace("CVE-2021-41269", "../escape"), "id"),
        ];
        for (text, expected_field) in cases {
            match parse_manifest(&text, Path::new(".")) {
                Err(ManifestError::Validation { field, .. }) => assert_eq!(field, expected_field),
                other => panic!("expected validation error on {expected_field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn schema_is_required() {
        let text = one_task("").replace("schema = 1\n", "");
        assert!(matches!(parse_manifest(&text, Path::new(".")), Err(ManifestError::Parse(_))));
        let text = one_task("").replace("schema = 1", "schema = 2");
        assert!(matches!(parse_manifest(&text, Path::new(".")), Err(ManifestError::Parse(_))));
        assert!(matches!(
            parse_manifest("schema = 1\n[[tasks]]\nid = ", Path::new(".")),
            Err(ManifestError::Parse(_))
        ));
    }

    #[test]
    fn scaffold_marker_is_last_protected_line() {
        for (lang, hint) in [(Language::C, Some("build.sh")), (Language::Java, None)] {
            let (text, len) = dockerfile_scaffold(lang, hint);
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines[len - 1], PROTECTED_MARKER);
            assert_eq!(text.contains("RUN sh build.sh"), hint.is_some());
        }
    }

    #[test]
    fn cwe_parsing_is_lenient_on_case() {
        assert_eq!("cwe-22".parse::<Cwe>().unwrap(), Cwe::PathTraversal);
        assert!("CWE-1".parse::<Cwe>().is_err());
    }
}
