//! Container engines that build and run `Dockerfile.vuln`.
//!
//! [`DockerEngine`] drives a docker-compatible CLI. [`LocalEngine`] executes
//! the same Dockerfile subset directly on the host, inside a staged copy of
//! the build context; it has no filesystem isolation and exists for
//! environments without a container runtime (offline fixtures, CI). It is
//! never selected implicitly.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("container engine unavailable: {0}")]
    Unavailable(String),
    #[error("container engine I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOutput {
    pub ok: bool,
    pub log: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub log: String,
}

pub trait ContainerEngine: Send + Sync {
    fn name(&self) -> &str;

    /// Builds `dockerfile` with `context` as build context. Build failures are
    /// reported through [`BuildOutput::ok`]; `Err` means the engine itself failed.
    fn build(&self, context: &Path, dockerfile: &Path, tag: &str, timeout: Duration) -> Result<BuildOutput, EngineError>;

    /// Runs the image with no network and no volumes.
    fn run(&self, tag: &str, timeout: Duration) -> Result<RunOutput, EngineError>;

    fn remove(&self, tag: &str);
}

/// Outcome of a process run with a deadline; stdout and stderr are captured
/// through a single pipe so their interleaving is preserved.
#[derive(Debug)]
pub struct ProcessOutcome {
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub output: String,
}

const CAPTURE_LIMIT: usize = 8 << 20;

pub fn run_with_timeout(mut cmd: Command, timeout: Duration) -> io::Result<ProcessOutcome> {
    let (mut reader, writer) = io::pipe()?;
    cmd.stdin(Stdio::null())
        .stdout(writer.try_clone()?)
        .stderr(writer)
        .process_group(0);
    let mut child = cmd.spawn()?;
    // Drop our copies of the write end so EOF arrives when the child exits.
    drop(cmd);

    let collector = thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > 2 * CAPTURE_LIMIT {
                        buf.drain(..buf.len() - CAPTURE_LIMIT);
                    }
                }
            }
        }
        buf
    });

    let deadline = Instant::now() + timeout;
    let pid = child.id() as libc::pid_t;
    let (status, timed_out) = loop {
        if let Some(status) = child.try_wait()? {
            break (Some(status), false);
        }
        if Instant::now() >= deadline {
            // SAFETY: the child leads its own process group (process_group(0)).
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = child.wait();
            break (None, true);
        }
        thread::sleep(Duration::from_millis(10));
    };
    if status.is_some() {
        // Reap stragglers that inherited the pipe.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let bytes = collector.join().unwrap_or_default();
    let exit_code = status.map(|s| {
        use std::os::unix::process::ExitStatusExt;
        s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0))
    });
    Ok(ProcessOutcome {
        exit_code,
        timed_out,
        output: String::from_utf8_lossy(&bytes).into_owned(),
    })
}

// ---------------------------------------------------------------------------
// Docker

#[derive(Debug, Clone)]
pub struct DockerEngine {
    binary: String,
}

impl DockerEngine {
    pub fn new(binary: impl Into<String>) -> Self {
        DockerEngine { binary: binary.into() }
    }

    /// First of `docker`, `podman` that answers `--version`.
    pub fn detect() -> Result<Self, EngineError> {
        for bin in ["docker", "podman"] {
            let ok = Command::new(bin)
                .arg("--version")
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .map(|s| s.success())
                .unwrap_or(false);
            if ok {
                return Ok(Self::new(bin));
            }
        }
        Err(EngineError::Unavailable("neither docker nor podman found on PATH".into()))
    }

    fn cmd(&self) -> Command {
        Command::new(&self.binary)
    }

    fn container_name(tag: &str) -> String {
        format!("{}-run", tag.replace([':', '/'], "-"))
    }
}

fn spawn_err(bin: &str, e: io::Error) -> EngineError {
    if e.kind() == io::ErrorKind::NotFound {
        EngineError::Unavailable(format!("{bin} not found"))
    } else {
        EngineError::Io(e)
    }
}

impl ContainerEngine for DockerEngine {
    fn name(&self) -> &str {
        &self.binary
    }

    fn build(&self, context: &Path, dockerfile: &Path, tag: &str, timeout: Duration) -> Result<BuildOutput, EngineError> {
        let mut cmd = self.cmd();
        cmd.arg("build").arg("-f").arg(dockerfile).arg("-t").arg(tag).arg(context);
        let out = run_with_timeout(cmd, timeout).map_err(|e| spawn_err(&self.binary, e))?;
        let mut log = out.output;
        if out.timed_out {
            log.push_str(&format!("\nbuild timed out after {}s\n", timeout.as_secs()));
        }
        Ok(BuildOutput {
            ok: out.exit_code == Some(0),
            log,
        })
    }

    fn run(&self, tag: &str, timeout: Duration) -> Result<RunOutput, EngineError> {
        let name = Self::container_name(tag);
        let mut cmd = self.cmd();
        cmd.args(["run", "--rm", "--network", "none", "--name", &name, tag]);
        let out = run_with_timeout(cmd, timeout).map_err(|e| spawn_err(&self.binary, e))?;
        if out.timed_out {
            let _ = self.cmd().args(["rm", "-f", &name]).stdout(Stdio::null()).stderr(Stdio::null()).status();
        }
        Ok(RunOutput {
            exit_code: if out.timed_out { None } else { out.exit_code },
            timed_out: out.timed_out,
            log: out.output,
        })
    }

    fn remove(&self, tag: &str) {
        let _ = self.cmd().args(["rmi", "-f", tag]).stdout(Stdio::null()).stderr(Stdio::null()).status();
    }
}

// ---------------------------------------------------------------------------
// Local (host process) engine

#[derive(Debug, Clone, PartialEq, Eq)]
enum CmdSpec {
    Exec(Vec<String>),
    Shell(String),
}

impl CmdSpec {
    fn parse(args: &str) -> Result<Self, String> {
        let t = args.trim();
        if t.starts_with('[') {
            serde_json::from_str::<Vec<String>>(t)
                .map(CmdSpec::Exec)
                .map_err(|e| format!("invalid JSON array {t:?}: {e}"))
        } else if t.is_empty() {
            Err("empty command".into())
        } else {
            Ok(CmdSpec::Shell(t.to_string()))
        }
    }

    fn argv(&self) -> Vec<String> {
        match self {
            CmdSpec::Exec(v) => v.clone(),
            CmdSpec::Shell(s) => vec!["/bin/sh".into(), "-c".into(), s.clone()],
        }
    }
}

#[derive(Debug, Clone)]
struct LocalImage {
    rootfs: PathBuf,
    workdir: String,
    env: Vec<(String, String)>,
    cmd: Option<Vec<String>>,
}

/// Host-process engine. See the module docs for its limits.
#[derive(Debug)]
pub struct LocalEngine {
    staging: PathBuf,
    _owned: Option<tempfile::TempDir>,
    isolate_network: bool,
    images: Mutex<HashMap<String, LocalImage>>,
    runs: AtomicU64,
}

impl LocalEngine {
    pub fn new() -> io::Result<Self> {
        let dir = tempfile::Builder::new().prefix("povgen-local-engine-").tempdir()?;
        let mut engine = Self::with_staging(dir.path().to_path_buf());
        engine._owned = Some(dir);
        Ok(engine)
    }

    pub fn with_staging(staging: PathBuf) -> Self {
        LocalEngine {
            staging,
            _owned: None,
            isolate_network: probe_unshare(),
            images: Mutex::new(HashMap::new()),
            runs: AtomicU64::new(0),
        }
    }

    pub fn isolates_network(&self) -> bool {
        self.isolate_network
    }

    fn base_env() -> Vec<(String, String)> {
        vec![
            ("PATH".into(), std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into())),
            ("HOME".into(), "/tmp".into()),
            ("LC_ALL".into(), "C".into()),
        ]
    }

    fn command(argv: &[String], cwd: &Path, env: &[(String, String)], isolate: bool) -> Command {
        // `exec "$@"` lets the child resolve relative programs against its own cwd.
        let mut full: Vec<String> = Vec::new();
        if isolate {
            full.extend(["unshare".into(), "-rn".into()]);
        }
        full.extend(["/bin/sh".into(), "-c".into(), "exec \"$@\"".into(), "sh".into()]);
        full.extend(argv.iter().cloned());
        let mut cmd = Command::new(&full[0]);
        cmd.args(&full[1..]).current_dir(cwd).env_clear();
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd
    }
}

fn probe_unshare() -> bool {
    Command::new("unshare")
        .args(["-rn", "true"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Maps a container path onto `rootfs`, resolving it against `workdir` when relative.
fn map_path(rootfs: &Path, workdir: &str, p: &str) -> Result<PathBuf, String> {
    let joined = if p.starts_with('/') {
        PathBuf::from(p)
    } else {
        Path::new(workdir).join(p)
    };
    let mut out = rootfs.to_path_buf();
    let mut depth = 0usize;
    for c in joined.components() {
        match c {
            Component::RootDir | Component::CurDir | Component::Prefix(_) => {}
            Component::ParentDir => {
                if depth == 0 {
                    return Err(format!("path {p:?} escapes the image root"));
                }
                out.pop();
                depth -= 1;
            }
            Component::Normal(n) => {
                out.push(n);
                depth += 1;
            }
        }
    }
    Ok(out)
}

fn normalize_container_path(workdir: &str, p: &str) -> String {
    let joined = if p.starts_with('/') {
        PathBuf::from(p)
    } else {
        Path::new(workdir).join(p)
    };
    let mut parts: Vec<String> = Vec::new();
    for c in joined.components() {
        match c {
            Component::ParentDir => {
                parts.pop();
            }
            Component::Normal(n) => parts.push(n.to_string_lossy().into_owned()),
            _ => {}
        }
    }
    format!("/{}", parts.join("/"))
}

pub(crate) fn copy_tree(src: &Path, dest: &Path) -> io::Result<()> {
    for entry in WalkDir::new(src).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let target = dest.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path())?;
            if target.symlink_metadata().is_ok() {
                fs::remove_file(&target)?;
            }
            std::os::unix::fs::symlink(link, &target)?;
        } else {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Logical Dockerfile lines: comments dropped, `\` continuations joined.
fn dockerfile_instructions(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if current.is_empty() && (trimmed.is_empty() || trimmed.starts_with('#')) {
            continue;
        }
        if !current.is_empty() && trimmed.starts_with('#') {
            continue;
        }
        if let Some(stripped) = trimmed.strip_suffix('\\') {
            current.push_str(stripped);
            current.push(' ');
        } else {
            current.push_str(trimmed);
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.trim().is_empty() {
        out.push(current);
    }
    out
}

fn split_words(args: &str) -> Result<Vec<String>, String> {
    let t = args.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| format!("invalid JSON array {t:?}: {e}"));
    }
    Ok(t.split_whitespace().map(str::to_string).collect())
}

struct BuildState {
    rootfs: PathBuf,
    workdir: String,
    env: Vec<(String, String)>,
    entrypoint: Option<CmdSpec>,
    cmd: Option<CmdSpec>,
}

impl LocalEngine {
    fn build_steps(
        &self,
        context: &Path,
        text: &str,
        state: &mut BuildState,
        deadline: Instant,
        log: &mut String,
    ) -> Result<bool, EngineError> {
        let steps = dockerfile_instructions(text);
        if steps.is_empty() {
            log.push_str("error: Dockerfile has no instructions\n");
            return Ok(false);
        }
        let total = steps.len();
        let mut seen_from = false;
        for (i, step) in steps.iter().enumerate() {
            log.push_str(&format!("Step {}/{} : {}\n", i + 1, total, step));
            let (keyword, args) = match step.split_once(char::is_whitespace) {
                Some((k, a)) => (k.to_ascii_uppercase(), a.trim().to_string()),
                None => (step.to_ascii_uppercase(), String::new()),
            };
            if !seen_from && keyword != "FROM" && keyword != "ARG" {
                log.push_str("error: the first instruction must be FROM\n");
                return Ok(false);
            }
            let fail = |log: &mut String, msg: String| {
                log.push_str(&format!("error: {msg}\n"));
                Ok(false)
            };
            match keyword.as_str() {
                "FROM" => {
                    if args.is_empty() {
                        return fail(log, "FROM requires an image".into());
                    }
                    if seen_from {
                        return fail(log, "multi-stage builds are not supported by the local engine".into());
                    }
                    seen_from = true;
                    log.push_str(" ---> local engine: base image not pulled, host toolchain is used\n");
                }
                "WORKDIR" => {
                    if args.is_empty() {
                        return fail(log, "WORKDIR requires a path".into());
                    }
                    state.workdir = normalize_container_path(&state.workdir, &args);
                    let dir = map_path(&state.rootfs, "/", &state.workdir).map_err(io::Error::other)?;
                    fs::create_dir_all(dir)?;
                }
                "ENV" => {
                    if let Some((k, v)) = args.split_once('=') {
                        state.env.push((k.trim().into(), v.trim().trim_matches('"').into()));
                    } else if let Some((k, v)) = args.split_once(char::is_whitespace) {
                        state.env.push((k.trim().into(), v.trim().into()));
                    } else {
                        return fail(log, format!("malformed ENV {args:?}"));
                    }
                }
                "COPY" | "ADD" => {
                    let words = match split_words(&args) {
                        Ok(w) => w,
                        Err(e) => return fail(log, e),
                    };
                    let words: Vec<String> = words.into_iter().filter(|w| !w.starts_with("--")).collect();
                    if words.len() < 2 {
                        return fail(log, format!("{keyword} requires a source and a destination"));
                    }
                    let (srcs, dest) = words.split_at(words.len() - 1);
                    let dest_raw = &dest[0];
                    let dest_path = match map_path(&state.rootfs, &state.workdir, dest_raw) {
                        Ok(p) => p,
                        Err(e) => return fail(log, e),
                    };
                    for src in srcs {
                        let src_path = match map_path(context, "/", src) {
                            Ok(p) => p,
                            Err(e) => return fail(log, e),
                        };
                        if !src_path.exists() {
                            return fail(log, format!("COPY source {src:?} not found in build context"));
                        }
                        if src_path.is_dir() {
                            copy_tree(&src_path, &dest_path)?;
                        } else {
                            let into_dir = dest_raw.ends_with('/') || srcs.len() > 1 || dest_path.is_dir();
                            let target = if into_dir {
                                dest_path.join(src_path.file_name().unwrap_or_default())
                            } else {
                                dest_path.clone()
                            };
                            if let Some(parent) = target.parent() {
                                fs::create_dir_all(parent)?;
                            }
                            fs::copy(&src_path, &target)?;
                        }
                    }
                }
                "RUN" => {
                    let spec = match CmdSpec::parse(&args) {
                        Ok(s) => s,
                        Err(e) => return fail(log, e),
                    };
                    let cwd = map_path(&state.rootfs, "/", &state.workdir).map_err(io::Error::other)?;
                    fs::create_dir_all(&cwd)?;
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    let out = run_with_timeout(Self::command(&spec.argv(), &cwd, &state.env, false), remaining)?;
                    log.push_str(&out.output);
                    if out.timed_out {
                        return fail(log, "build timed out".into());
                    }
                    if out.exit_code != Some(0) {
                        return fail(
                            log,
                            format!("RUN {args} returned a non-zero code: {}", out.exit_code.unwrap_or(-1)),
                        );
                    }
                }
                "CMD" => match CmdSpec::parse(&args) {
                    Ok(s) => state.cmd = Some(s),
                    Err(e) => return fail(log, e),
                },
                "ENTRYPOINT" => match CmdSpec::parse(&args) {
                    Ok(s) => state.entrypoint = Some(s),
                    Err(e) => return fail(log, e),
                },
                "ARG" | "LABEL" | "EXPOSE" | "USER" | "VOLUME" | "SHELL" | "STOPSIGNAL" | "HEALTHCHECK"
                | "ONBUILD" | "MAINTAINER" => {
                    log.push_str(" ---> ignored by the local engine\n");
                }
                other => return fail(log, format!("unknown instruction: {other}")),
            }
        }
        Ok(true)
    }
}

impl ContainerEngine for LocalEngine {
    fn name(&self) -> &str {
        "local"
    }

    fn build(&self, context: &Path, dockerfile: &Path, tag: &str, timeout: Duration) -> Result<BuildOutput, EngineError> {
        let deadline = Instant::now() + timeout;
        let text = fs::read_to_string(dockerfile)?;
        let image_dir = self.staging.join(sanitize_tag(tag));
        if image_dir.exists() {
            fs::remove_dir_all(&image_dir)?;
        }
        let rootfs = image_dir.join("rootfs");
        fs::create_dir_all(&rootfs)?;
        let mut state = BuildState {
            rootfs: rootfs.clone(),
            workdir: "/".into(),
            env: Self::base_env(),
            entrypoint: None,
            cmd: None,
        };
        let mut log = String::new();
        let ok = self.build_steps(context, &text, &mut state, deadline, &mut log)?;
        if ok {
            let cmd = match (&state.entrypoint, &state.cmd) {
                (Some(CmdSpec::Exec(ep)), Some(CmdSpec::Exec(args))) => {
                    Some(ep.iter().chain(args.iter()).cloned().collect())
                }
                (Some(ep), _) => Some(ep.argv()),
                (None, Some(c)) => Some(c.argv()),
                (None, None) => None,
            };
            log.push_str(&format!("Successfully tagged {tag}\n"));
            self.images.lock().expect("image table poisoned").insert(
                tag.to_string(),
                LocalImage {
                    rootfs,
                    workdir: state.workdir,
                    env: state.env,
                    cmd,
                },
            );
        } else {
            self.images.lock().expect("image table poisoned").remove(tag);
        }
        Ok(BuildOutput { ok, log })
    }

    fn run(&self, tag: &str, timeout: Duration) -> Result<RunOutput, EngineError> {
        let image = self
            .images
            .lock()
            .expect("image table poisoned")
            .get(tag)
            .cloned()
            .ok_or_else(|| EngineError::Io(io::Error::new(io::ErrorKind::NotFound, format!("no image {tag}"))))?;
        let Some(argv) = image.cmd.clone() else {
            return Ok(RunOutput {
                exit_code: Some(0),
                timed_out: false,
                log: String::new(),
            });
        };
        // Each run starts from a fresh copy of the image filesystem.
        let n = self.runs.fetch_add(1, Ordering::SeqCst);
        let container = self.staging.join(format!("{}-run{n}", sanitize_tag(tag)));
        copy_tree(&image.rootfs, &container)?;
        let cwd = map_path(&container, "/", &image.workdir).map_err(io::Error::other)?;
        fs::create_dir_all(&cwd)?;
        let out = run_with_timeout(Self::command(&argv, &cwd, &image.env, self.isolate_network), timeout);
        let _ = fs::remove_dir_all(&container);
        let out = out?;
        Ok(RunOutput {
            exit_code: if out.timed_out { None } else { out.exit_code },
            timed_out: out.timed_out,
            log: out.output,
        })
    }

    fn remove(&self, tag: &str) {
        self.images.lock().expect("image table poisoned").remove(tag);
        let _ = fs::remove_dir_all(self.staging.join(sanitize_tag(tag)));
    }
}

/// Lowercase `[a-z0-9_.-]`, as accepted by image references.
pub fn sanitize_tag(raw: &str) -> String {
    let s: String = raw
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    let s = s.trim_start_matches(['.', '-']).to_string();
    if s.is_empty() {
        "image".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeout_kills_process_group() {
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "sleep 30 & sleep 30"]);
        let start = Instant::now();
        let out = run_with_timeout(cmd, Duration::from_millis(300)).unwrap();
        assert!(out.timed_out);
        assert_eq!(out.exit_code, None);
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn captures_interleaved_streams() {
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "echo out; echo err 1>&2; exit 3"]);
        let out = run_with_timeout(cmd, Duration::from_secs(5)).unwrap();
        assert_eq!(out.exit_code, Some(3));
        assert_eq!(out.output, "out\nerr\n");
    }

    #[test]
    fn instructions_join_continuations() {
        let text = "# c\nFROM x\nRUN a \\\n  && b\n\nCMD [\"y\"]\n";
        assert_eq!(
            dockerfile_instructions(text),
            vec!["FROM x", "RUN a  && b", "CMD [\"y\"]"]
        );
    }

    #[test]
    fn container_paths_stay_in_rootfs() {
        let root = Path::new("/stage/rootfs");
        assert_eq!(map_path(root, "/project", "bin").unwrap(), root.join("project/bin"));
        assert_eq!(map_path(root, "/project", "/etc/x").unwrap(), root.join("etc/x"));
        assert!(map_path(root, "/", "../../etc").is_err());
        assert_eq!(normalize_container_path("/a/b", "../c"), "/a/c");
    }

    #[test]
    fn tags_are_sanitized() {
        assert_eq!(sanitize_tag("CVE-2021/41269:x"), "cve-2021-41269-x");
        assert_eq!(sanitize_tag("..."), "image");
    }

    #[test]
    fn local_build_and_run() {
        let ctx = tempfile::tempdir().unwrap();
        fs::write(ctx.path().join("hello.sh"), "echo built > artifact.txt\n").unwrap();
        fs::write(
            ctx.path().join("Dockerfile"),
            "FROM ubuntu:22.04\nWORKDIR /project\nCOPY . /project\nRUN sh hello.sh\nCMD [\"sh\", \"-c\", \"cat artifact.txt; exit 4\"]\n",
        )
        .unwrap();
        let engine = LocalEngine::new().unwrap();
        let b = engine
            .build(ctx.path(), &ctx.path().join("Dockerfile"), "t1", Duration::from_secs(30))
            .unwrap();
        assert!(b.ok, "{}", b.log);
        let r = engine.run("t1", Duration::from_secs(30)).unwrap();
        assert_eq!(r.exit_code, Some(4));
        assert_eq!(r.log, "built\n");
        // Runs do not leak state into the image.
        let r2 = engine.run("t1", Duration::from_secs(30)).unwrap();
        assert_eq!(r2.log, "built\n");
    }

    #[test]
    fn local_build_rejects_unknown_instruction() {
        let ctx = tempfile::tempdir().unwrap();
        fs::write(ctx.path().join("Dockerfile"), "FROM x\nFROBNICATE y\n").unwrap();
        let engine = LocalEngine::new().unwrap();
        let b = engine
            .build(ctx.path(), &ctx.path().join("Dockerfile"), "t2", Duration::from_secs(30))
            .unwrap();
        assert!(!b.ok);
        assert!(b.log.contains("unknown instruction: FROBNICATE"));
        assert!(engine.run("t2", Duration::from_secs(1)).is_err());
    }

    #[test]
    fn local_run_has_no_network_when_isolated() {
        let engine = LocalEngine::new().unwrap();
        if !engine.isolates_network() {
            eprintln!("unshare unavailable; skipping");
            return;
        }
        let ctx = tempfile::tempdir().unwrap();
        fs::write(
            ctx.path().join("Dockerfile"),
            "FROM x\nCMD [\"sh\", \"-c\", \"tail -n +3 /proc/net/dev | cut -d: -f1\"]\n",
        )
        .unwrap();
        engine
            .build(ctx.path(), &ctx.path().join("Dockerfile"), "net", Duration::from_secs(30))
            .unwrap();
        let r = engine.run("net", Duration::from_secs(30)).unwrap();
        assert_eq!(r.exit_code, Some(0));
        assert_eq!(r.log.split_whitespace().collect::<Vec<_>>(), vec!["lo"], "{}", r.log);
    }
}
