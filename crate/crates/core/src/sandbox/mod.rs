//! The agent's tools, confined to one workspace directory.
//!
//! Paths given by the model may be relative to the workspace, start with the
//! in-container path `/project`, or be absolute paths under the real root.
//! Anything that resolves (lexically or through symlinks) outside the root is
//! rejected with [`ToolError::PathEscape`] before any I/O on the target.

pub mod engine;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use globset::GlobBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub use engine::{
    run_with_timeout, sanitize_tag, BuildOutput, ContainerEngine, DockerEngine, EngineError, LocalEngine,
    ProcessOutcome, RunOutput,
};

use crate::manifest::{Workspace, CONTAINER_WORKDIR, DOCKERFILE_NAME};
use crate::output::{ToolCall, ToolKind};
use crate::par;

pub const TRUNCATION_MARKER: &str = "\n[truncated]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Upper bound on the text returned by a single tool call, in bytes.
    pub max_tool_output: usize,
    pub grep_cap: usize,
    #[serde(with = "humantime_serde")]
    pub run_timeout: Duration,
    #[serde(with = "humantime_serde")]
    pub build_timeout: Duration,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            max_tool_output: 20_000,
            grep_cap: 100,
            run_timeout: Duration::from_secs(5 * 60),
            build_timeout: Duration::from_secs(20 * 60),
        }
    }
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("path {path:?} is outside the project directory")]
    PathEscape { path: String },
    #[error("{path:?} does not exist")]
    NotFound { path: String },
    #[error("{path:?} is not a directory")]
    NotADirectory { path: String },
    #[error("{path:?} is a directory")]
    IsADirectory { path: String },
    #[error("invalid line range {start}..{end}: lines are 1-based and start must not exceed end")]
    BadRange { start: usize, end: usize },
    #[error("invalid pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error(
        "the lines of {DOCKERFILE_NAME} up to and including the protected marker must stay unchanged (first difference at line {line})"
    )]
    DockerfileGuardViolation { line: usize },
    #[error("{0} is not available in this stage")]
    ToolNotAllowed(ToolKind),
    #[error("container engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl From<EngineError> for ToolError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Unavailable(m) => ToolError::EngineUnavailable(m),
            EngineError::Io(e) => ToolError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub kind: EntryKind,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrepHit {
    pub file: String,
    pub line_no: usize,
    pub line_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrepResult {
    pub hits: Vec<GrepHit>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRunReport {
    pub build_ok: bool,
    pub build_log_tail: String,
    pub ran: bool,
    pub exit_code: Option<i32>,
    pub run_log_tail: String,
    pub timed_out: bool,
}

impl BuildRunReport {
    /// The success condition for a PoV test: built, ran, exited nonzero.
    pub fn failed_as_expected(&self) -> bool {
        self.ran && matches!(self.exit_code, Some(c) if c != 0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if self.build_ok {
            s.push_str("Build: succeeded\n");
        } else {
            s.push_str("Build: FAILED\n");
        }
        let _ = writeln!(s, "--- build output (last part) ---\n{}", self.build_log_tail.trim_end());
        if !self.ran {
            s.push_str("Run: not run\n");
            return s;
        }
        match (self.timed_out, self.exit_code) {
            (true, _) => s.push_str("Run: timed out\n"),
            (false, Some(code)) => {
                let _ = writeln!(s, "Run: exited with code {code}");
            }
            (false, None) => s.push_str("Run: no exit code\n"),
        }
        let _ = writeln!(s, "--- run output (last part) ---\n{}", self.run_log_tail.trim_end());
        s
    }
}

/// Complete, untruncated build and run logs.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub build: BuildOutput,
    pub run: Option<RunOutput>,
}

/// Builds `<context>/Dockerfile.vuln` as `tag`, runs it if the build
/// succeeded, then removes the image.
pub fn build_and_run(
    engine: &dyn ContainerEngine,
    context: &Path,
    tag: &str,
    build_timeout: Duration,
    run_timeout: Duration,
) -> Result<FullRun, EngineError> {
    let dockerfile = context.join(DOCKERFILE_NAME);
    let build = engine.build(context, &dockerfile, tag, build_timeout)?;
    let run = if build.ok {
        let r = engine.run(tag, run_timeout);
        engine.remove(tag);
        Some(r?)
    } else {
        None
    };
    Ok(FullRun { build, run })
}

/// Keeps the first `max` bytes (on a char boundary) and appends the marker.
pub fn truncate_head(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut cut = max;
    while !s.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &s[..cut])
}

/// Keeps the last `max` bytes (on a char boundary), prefixed by a marker.
pub fn tail(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    format!("[truncated]\n{}", &s[start..])
}

/// Result of [`SandboxRoot::execute`]: text for the model plus, for `Run`,
/// the structured report.
#[derive(Debug, Clone)]
pub struct ToolOutput {
    pub text: String,
    pub run_report: Option<BuildRunReport>,
}

pub struct SandboxRoot {
    root: PathBuf,
    dockerfile: PathBuf,
    protected_prefix: String,
    cfg: SandboxConfig,
    engine: Arc<dyn ContainerEngine>,
    tag_base: String,
    runs: AtomicU32,
}

impl std::fmt::Debug for SandboxRoot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxRoot")
            .field("root", &self.root)
            .field("engine", &self.engine.name())
            .field("cfg", &self.cfg)
            .finish()
    }
}

fn display(p: &str) -> String {
    p.to_string()
}

fn is_binary(bytes: &[u8]) -> bool {
    bytes.iter().take(8192).any(|&b| b == 0)
}

impl SandboxRoot {
    pub fn new(
        workspace: &Workspace,
        engine: Arc<dyn ContainerEngine>,
        cfg: SandboxConfig,
        tag_base: &str,
    ) -> Result<Self, ToolError> {
        let root = workspace.root.canonicalize().map_err(|_| ToolError::NotFound {
            path: workspace.root.display().to_string(),
        })?;
        Ok(SandboxRoot {
            dockerfile: root.join(DOCKERFILE_NAME),
            root,
            protected_prefix: workspace.protected_prefix.clone(),
            cfg,
            engine,
            tag_base: sanitize_tag(tag_base),
            runs: AtomicU32::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &Arc<dyn ContainerEngine> {
        &self.engine
    }

    /// A fresh image tag: task id plus a per-root attempt counter.
    pub fn next_image_tag(&self) -> String {
        let n = self.runs.fetch_add(1, Ordering::SeqCst) + 1;
        format!("povgen-{}-{n}", self.tag_base)
    }

    /// Root-relative form of a model-supplied path, normalized lexically.
    fn relative(&self, raw: &str) -> Result<PathBuf, ToolError> {
        let escape = || ToolError::PathEscape { path: raw.to_string() };
        let t = raw.trim();
        let rel: &Path = if t == CONTAINER_WORKDIR {
            Path::new("")
        } else if let Some(rest) = t.strip_prefix(&format!("{CONTAINER_WORKDIR}/")) {
            Path::new(rest)
        } else if Path::new(t).is_absolute() {
            match Path::new(t).strip_prefix(&self.root) {
                Ok(rest) => rest,
                Err(_) => return Err(escape()),
            }
        } else {
            Path::new(t)
        };
        let mut out = PathBuf::new();
        for c in rel.components() {
            match c {
                Component::CurDir => {}
                Component::ParentDir => {
                    if !out.pop() {
                        return Err(escape());
                    }
                }
                Component::Normal(n) => out.push(n),
                Component::RootDir | Component::Prefix(_) => return Err(escape()),
            }
        }
        Ok(out)
    }

    /// Resolves `raw` to a real path under the root. Symlinks are followed on
    /// the longest existing prefix; the result must stay under the root.
    pub fn resolve(&self, raw: &str) -> Result<PathBuf, ToolError> {
        let rel = self.relative(raw)?;
        let escape = || ToolError::PathEscape { path: raw.to_string() };
        let comps: Vec<_> = rel.components().collect();
        let mut existing = self.root.clone();
        let mut i = 0;
        while i < comps.len() {
            let next = existing.join(comps[i]);
            match next.symlink_metadata() {
                Ok(_) => {
                    // A dangling symlink cannot be proven to stay inside.
                    existing = next.canonicalize().map_err(|_| escape())?;
                    if !existing.starts_with(&self.root) {
                        return Err(escape());
                    }
                    i += 1;
                }
                Err(_) => break,
            }
        }
        let mut full = existing;
        for c in &comps[i..] {
            full.push(c);
        }
        if !full.starts_with(&self.root) {
            return Err(escape());
        }
        Ok(full)
    }

    fn rel_display(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        let s = rel.to_string_lossy().replace('\\', "/");
        if s.is_empty() {
            ".".into()
        } else {
            s
        }
    }

    pub fn list_dir(&self, path: &str) -> Result<Vec<DirEntry>, ToolError> {
        let dir = self.resolve(path)?;
        if !dir.exists() {
            return Err(ToolError::NotFound { path: display(path) });
        }
        if !dir.is_dir() {
            return Err(ToolError::NotADirectory { path: display(path) });
        }
        let mut entries = Vec::new();
        for e in fs::read_dir(&dir)? {
            let e = e?;
            let meta = e.path().symlink_metadata()?;
            let kind = if meta.is_dir() { EntryKind::Dir } else { EntryKind::File };
            entries.push(DirEntry {
                name: e.file_name().to_string_lossy().into_owned(),
                kind,
                size: if kind == EntryKind::Dir { 0 } else { meta.len() },
            });
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(entries)
    }

    /// Reads lines `start..=end` (1-based). Lines keep their terminators;
    /// a window past the end of the file yields what exists.
    pub fn read_file(&self, path: &str, start: Option<usize>, end: Option<usize>) -> Result<String, ToolError> {
        let file = self.resolve(path)?;
        if !file.exists() {
            return Err(ToolError::NotFound { path: display(path) });
        }
        if file.is_dir() {
            return Err(ToolError::IsADirectory { path: display(path) });
        }
        let s = start.unwrap_or(1);
        let e = end.unwrap_or(usize::MAX);
        if s == 0 || e < s {
            return Err(ToolError::BadRange { start: s, end: e });
        }
        let bytes = fs::read(&file)?;
        let text = String::from_utf8_lossy(&bytes);
        let body = if start.is_none() && end.is_none() {
            text.into_owned()
        } else {
            text.split_inclusive('\n')
                .skip(s - 1)
                .take(e - s + 1)
                .collect::<String>()
        };
        Ok(truncate_head(&body, self.cfg.max_tool_output))
    }

    pub fn find_files(&self, pattern: &str) -> Result<Vec<String>, ToolError> {
        let raw = pattern.trim();
        let bad = |reason: &str| ToolError::BadPattern {
            pattern: raw.to_string(),
            reason: reason.to_string(),
        };
        if raw.is_empty() {
            return Err(bad("empty pattern"));
        }
        let rel = if raw == CONTAINER_WORKDIR {
            ""
        } else if let Some(rest) = raw.strip_prefix(&format!("{CONTAINER_WORKDIR}/")) {
            rest
        } else if raw.starts_with('/') {
            let root = self.root.to_string_lossy();
            match raw.strip_prefix(&format!("{root}/")) {
                Some(rest) => rest,
                None => return Err(ToolError::PathEscape { path: raw.to_string() }),
            }
        } else {
            raw
        };
        if rel.split('/').any(|seg| seg == "..") {
            return Err(ToolError::PathEscape { path: raw.to_string() });
        }
        let rel = rel.trim_start_matches("./");
        if rel.is_empty() {
            return Err(bad("empty pattern"));
        }
        let matcher = GlobBuilder::new(rel)
            .literal_separator(true)
            .build()
            .map_err(|e| bad(&e.kind().to_string()))?
            .compile_matcher();
        let by_name = !rel.contains('/');
        let mut hits = Vec::new();
        for entry in WalkDir::new(&self.root).follow_links(false).sort_by_file_name() {
            let Ok(entry) = entry else { continue };
            if !entry.file_type().is_file() {
                continue;
            }
            let shown = self.rel_display(entry.path());
            let matched = if by_name {
                matcher.is_match(entry.file_name())
            } else {
                matcher.is_match(&shown)
            };
            if matched {
                hits.push(shown);
            }
        }
        hits.sort();
        Ok(hits)
    }

    /// Fixed-string, case-sensitive search. Binary files are skipped.
    pub fn grep(&self, pattern: &str, scope: Option<&str>) -> Result<GrepResult, ToolError> {
        if pattern.is_empty() {
            return Err(ToolError::BadPattern {
                pattern: String::new(),
                reason: "empty pattern".into(),
            });
        }
        let scope_raw = scope.unwrap_or(".");
        let base = self.resolve(scope_raw)?;
        if !base.exists() {
            return Err(ToolError::NotFound { path: display(scope_raw) });
        }
        let files: Vec<PathBuf> = if base.is_file() {
            vec![base]
        } else {
            let mut v: Vec<PathBuf> = WalkDir::new(&base)
                .follow_links(false)
                .sort_by_file_name()
                .into_iter()
                .filter_map(Result::ok)
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect();
            v.sort();
            v
        };
        let per_file = par::map(&files, |f| {
            let Ok(bytes) = fs::read(f) else { return Vec::new() };
            if is_binary(&bytes) {
                return Vec::new();
            }
            let text = String::from_utf8_lossy(&bytes);
            let shown = self.rel_display(f);
            text.lines()
                .enumerate()
                .filter(|(_, l)| l.contains(pattern))
                .map(|(i, l)| GrepHit {
                    file: shown.clone(),
                    line_no: i + 1,
                    line_text: l.to_string(),
                })
                .collect::<Vec<_>>()
        });
        let mut hits: Vec<GrepHit> = per_file.into_iter().flatten().collect();
        let truncated = hits.len() > self.cfg.grep_cap;
        hits.truncate(self.cfg.grep_cap);
        Ok(GrepResult { hits, truncated })
    }

    /// Checks a proposed Dockerfile.vuln against the protected prefix.
    pub fn check_dockerfile_guard(&self, content: &str) -> Result<(), ToolError> {
        if content.starts_with(&self.protected_prefix)
            || content == self.protected_prefix.trim_end_matches('\n')
        {
            return Ok(());
        }
        let line = self
            .protected_prefix
            .split_inclusive('\n')
            .zip(content.split_inclusive('\n').chain(std::iter::repeat("")))
            .position(|(want, got)| want != got)
            .map_or(1, |i| i + 1);
        Err(ToolError::DockerfileGuardViolation { line })
    }

    pub fn write_file(&self, path: &str, content: &str) -> Result<(), ToolError> {
        let target = self.resolve(path)?;
        if target == self.root || target.is_dir() {
            return Err(ToolError::IsADirectory { path: display(path) });
        }
        if target == self.dockerfile {
            self.check_dockerfile_guard(content)?;
        }
        let parent = target.parent().expect("target is below root");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(content.as_bytes())?;
        tmp.persist(&target).map_err(|e| ToolError::Io(e.error))?;
        Ok(())
    }

    /// Builds and runs the workspace image. Engine-level failures (missing
    /// runtime) are errors; everything else is encoded in the report.
    pub fn run_container(&self, image_tag: &str, remaining: Duration) -> Result<BuildRunReport, ToolError> {
        if !self.dockerfile.exists() {
            return Err(ToolError::NotFound {
                path: DOCKERFILE_NAME.into(),
            });
        }
        let build_timeout = self.cfg.build_timeout.min(remaining);
        let started = std::time::Instant::now();
        let dockerfile = self.dockerfile.clone();
        let build = self.engine.build(&self.root, &dockerfile, image_tag, build_timeout)?;
        let half = self.cfg.max_tool_output / 2;
        if !build.ok {
            self.engine.remove(image_tag);
            return Ok(BuildRunReport {
                build_ok: false,
                build_log_tail: tail(&build.log, half),
                ran: false,
                exit_code: None,
                run_log_tail: String::new(),
                timed_out: false,
            });
        }
        let left = remaining.saturating_sub(started.elapsed());
        let run = self.engine.run(image_tag, self.cfg.run_timeout.min(left));
        self.engine.remove(image_tag);
        let run = run?;
        Ok(BuildRunReport {
            build_ok: true,
            build_log_tail: tail(&build.log, half),
            ran: true,
            exit_code: if run.timed_out { None } else { run.exit_code },
            run_log_tail: tail(&run.log, half),
            timed_out: run.timed_out,
        })
    }

    /// Executes a parsed tool call if `allowed` permits it. `remaining` bounds `Run`.
    pub fn execute(&self, call: &ToolCall, allowed: &[ToolKind], remaining: Duration) -> Result<ToolOutput, ToolError> {
        if !allowed.contains(&call.tool) {
            return Err(ToolError::ToolNotAllowed(call.tool));
        }
        let arg = |k: &str| call.arg(k).unwrap_or("");
        let parse_line = |k: &str| -> Result<Option<usize>, ToolError> {
            match call.arg(k).map(str::trim) {
                None | Some("") => Ok(None),
                Some(v) => v.parse::<usize>().map(Some).map_err(|_| ToolError::BadRange { start: 0, end: 0 }),
            }
        };
        let mut run_report = None;
        let text = match call.tool {
            ToolKind::ListDir => {
                let entries = self.list_dir(arg("path"))?;
                if entries.is_empty() {
                    "(empty directory)".to_string()
                } else {
                    entries
                        .iter()
                        .map(|e| match e.kind {
                            EntryKind::Dir => format!("{}/\n", e.name),
                            EntryKind::File => format!("{} ({} bytes)\n", e.name, e.size),
                        })
                        .collect()
                }
            }
            ToolKind::Read => {
                let body = self.read_file(arg("path"), parse_line("start_line")?, parse_line("end_line")?)?;
                if body.is_empty() {
                    "(no content)".to_string()
                } else {
                    body
                }
            }
            ToolKind::Find => {
                let hits = self.find_files(arg("pattern"))?;
                if hits.is_empty() {
                    "(no matching files)".to_string()
                } else {
                    hits.iter().map(|h| format!("{h}\n")).collect()
                }
            }
            ToolKind::Grep => {
                let res = self.grep(arg("pattern"), call.arg("scope").filter(|s| !s.trim().is_empty()))?;
                let mut s: String = res
                    .hits
                    .iter()
                    .map(|h| format!("{}:{}: {}\n", h.file, h.line_no, h.line_text))
                    .collect();
                if res.hits.is_empty() {
                    s.push_str("(no matches)");
                }
                if res.truncated {
                    let _ = write!(s, "[truncated: only the first {} matches are shown]", self.cfg.grep_cap);
                }
                s
            }
            ToolKind::Write => {
                let content = arg("content");
                self.write_file(arg("path"), content)?;
                format!("Wrote {} bytes to {}", content.len(), arg("path").trim())
            }
            ToolKind::Run => {
                let tag = self.next_image_tag();
                let report = self.run_container(&tag, remaining)?;
                let text = report.render();
                run_report = Some(report);
                text
            }
        };
        Ok(ToolOutput {
            text: truncate_head(&text, self.cfg.max_tool_output),
            run_report,
        })
    }
}
