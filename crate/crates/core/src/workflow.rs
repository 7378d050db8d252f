//! The three-stage agent pipeline and its repair loop.
//!
//! Every stage starts a fresh [`Conversation`] seeded only with its rendered
//! prompt, which may embed payloads (flow records, conditions) from earlier
//! stages but never their transcripts. The branch stage is the one place a
//! conversation spans two prompts: Part 2 continues Part 1.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalConfig, EvalError, Verdict};
use crate::gateway::{BudgetLedger, Conversation, Gateway, GatewayError, LedgerSnapshot, TurnOrderError, Usage};
use crate::manifest::{VulnerabilityTask, CONTAINER_WORKDIR};
use crate::output::{
    parse_agent_action, render_branch_records, render_branch_sequence, tool_grammar_description, AgentAction,
    BranchPoint, ConditionList, Flow, ParseError, Payload, PayloadKind, ToolCall, ToolKind,
};
use crate::sandbox::{BuildRunReport, SandboxRoot, ToolError, TRUNCATION_MARKER};

// ---------------------------------------------------------------------------
// Prompts

pub const SYSTEM_PROMPT: &str = r#"You are a helpful AI assistant that can interact with a computer to solve tasks.

<ROLE>
Your primary role is to assist users by executing commands, modifying code, and solving technical problems effectively.
You should be thorough, methodical, and prioritize quality over speed.
Your code will never be read by humans, so focus on correctness, not style.
</ROLE>

<EFFICIENCY>
* Each action you take is somewhat expensive. Minimize unnecessary actions.
* When exploring the codebase, use the find and grep tools with appropriate filters to minimize unnecessary operations.
* You do not have access to the internet, so do not attempt to search online for information.
</EFFICIENCY>

<CODE_QUALITY>
* Write clean, efficient code with minimal comments. Avoid redundancy in comments: Do not repeat information that can be easily inferred from the code itself.
* When implementing solutions, focus on making the minimal changes needed to solve the problem.
* Before implementing any changes, first thoroughly understand the codebase through exploration.
* If you are adding a lot of code to a function or file, consider splitting the function or file into smaller pieces when appropriate.
</CODE_QUALITY>

<PROBLEM_SOLVING_WORKFLOW>
1. EXPLORATION: Thoroughly explore relevant files and understand the context before proposing solutions
2. ANALYSIS: Consider multiple approaches and select the most promising one
3. IMPLEMENTATION: Make focused, minimal changes to address the problem
</PROBLEM_SOLVING_WORKFLOW>

<TROUBLESHOOTING>
* If you've made repeated attempts to solve a problem but tests still fail or the user reports it's still broken:
  1. Step back and reflect on 5-7 different possible sources of the problem
  2. Assess the likelihood of each possible cause
  3. Methodically address the most likely causes, starting with the highest probability
  4. Document your reasoning process
</TROUBLESHOOTING>"#;

const FLOW_BODY: &str = r#"The project I am working with has a vulnerability, reported as a CWE. The issue description says:
{description}
You do not have access to the internet or GitHub to look up more details.
There are no vulnerability reports in the project directory either.

{tool_description}

Could you generate a sequence of program points to reach the vulnerable point (sink), starting from an external input (source)? This corresponds to a vulnerable "flow" through the program.
The flow should take the form of a sequence of program points, each in the following format:
{"role": "Source|Intermediate|Sink",
 "code": "Source code of program point (1-2 lines),
 "variable": "Variable name",
 "file": "File path (absolute)",
 "remarks": "Comments about this point, if any"}
 You can use multiple intermediate steps and tool invocations, but when you are finished,
 your final response should contain the flow in the above format, within the tags <FLOW> and </FLOW>."#;

const BRANCH_PART1_BODY: &str = r#"The project I am working with has a vulnerability, reported as a CWE. The issue description says:
{description}
You do not have access to the internet or GitHub to look up more details.
There are no vulnerability reports in the project directory either.

{tool_description}

Here is a flow consisting of a sequence of program points to reach the vulnerability:
{flow}

Could you generate the sequence of branch conditions
encountered on the way to the sink, starting from the source?
Include *every single* if-else, try-except, or switch statement that the program flow will encounter in the path from the source to the sink.
This should take the form of a sequence of program points, each in the following format:
{"type": "If-Else | Try-Except | Switch",
 "code": "Source code of program point (1-2 lines),
 "file": "File path (absolute)",
 "outcome": "What should be the outcome of the branch statement in order to reach the vulnerability?"}
You can use multiple intermediate steps and tool invocations, but when you are finished,
your final response should contain the sequence in the above format, within the tags <SEQUENCE> and </SEQUENCE>."#;

const BRANCH_PART2_BODY: &str = r#"Based on the above branch conditions that you generated, infer a set of conditions that the external input must satisfy in order to reach the vulnerability. Your final answer should be in the following format:
<CONDITIONS>
1. Condition 1
2. Condition 2
...
</CONDITIONS>"#;

const TESTGEN_BODY: &str = r##"The project I am working with has a vulnerability, reported as a CWE. The issue description says:
{description}
You do not have access to the internet or GitHub to look up more details. There are no vulnerability reports in the project directory either.

Now create a test case that FAILS (exits with non-zero code) if the vulnerability EXISTS,
and PASSES (exits with code 0) if the vulnerability DOES NOT EXIST.
{cwe_desc}
This test should actually run the vulnerable code in the project.
- It should NOT read the source code to check for the presence of a vulnerability.
- It should NOT "simulate" the vulnerability by running some separate code that does not use the project.

Here is a flow consisting of a sequence of program points to reach the vulnerability:
{flow}

The test should start from the vulnerability 'source' and reach the 'sink'. It should be designed such that it passes through all the branch conditions on the way. This means that the input and method calls should be carefully crafted, satisfying the following conditions:
{conditions}

The project is built and run as a Docker container, and the Dockerfile is at `{workdir}/Dockerfile.vuln`. All the build dependencies for the project are already installed in `Dockerfile.vuln`. However, if you need any new dependencies, you can add them to `Dockerfile.vuln`.
Make sure to not modify any of the lines in the Dockerfile above "# Do not modify anything above this line". The entire project directory is copied into the Docker container, so you don't need to write any new COPY commands in the Dockerfile. The command to run the test should be the `CMD` command in `Dockerfile.vuln`, so that the test can be run with
`docker run -t imagename`.

Feel free to create any new files to create the test case.
You are highly encouraged to insert print statements in the existing source files to debug your test.
Remember the branch conditions and flow that you derived earlier, and use them to guide your test generation and debugging process.

Once you verify that the flow has reached the 'sink', you should analyze the observed behavior of the program to ensure that the test FAILS if the vulnerability exists, and PASSES if it does not exist. To re-emphasize, this test should NOT be based on reading the source code, but rather on the actual behavior of the program when it is run.
If I fix the vulnerability in the project, the test should PASS.

{tool_description}

If you successfully generate the test case and confirm that it satisfies all the above conditions, respond <DONE>."##;

const REPAIR_BODY: &str = r#"The test you generated had the following error:
{feedback}
Please fix the test case. Carefully analyze this output for errors or messages that can help you debug your test. Reason step-by-step about what might have gone wrong, and how you can fix it.
You can use the <TOOL>...</TOOL> format to invoke tools, and you can also add new files.
When you have generated, run and checked your test again, respond with a message containing the string "<DONE>".
Remember that the test should actually run the vulnerable code in the project,
- It should NOT read the source code to check for the presence of a vulnerability.
- It should NOT "simulate" the vulnerability by running some separate code that does not use the project.

{tool_description}"#;

const FLOW_PARAGRAPH: &str =
    "Here is a flow consisting of a sequence of program points to reach the vulnerability:\n{flow}\n";
const CONDITIONS_PARAGRAPH: &str = "The test should start from the vulnerability 'source' and reach the 'sink'. It should be designed such that it passes through all the branch conditions on the way. This means that the input and method calls should be carefully crafted, satisfying the following conditions:\n{conditions}\n";
pub const NO_FLOW_SENTENCE: &str = "No flow is provided; identify the relevant path yourself.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    FlowReasoning,
    BranchReasoning,
    TestGeneration,
    Repair,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::FlowReasoning => "flow_reasoning",
            StageId::BranchReasoning => "branch_reasoning",
            StageId::TestGeneration => "test_generation",
            StageId::Repair => "repair",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StageId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "flow" | "flow_reasoning" => Ok(StageId::FlowReasoning),
            "branch" | "branch_reasoning" => Ok(StageId::BranchReasoning),
            "testgen" | "test_generation" => Ok(StageId::TestGeneration),
            "repair" => Ok(StageId::Repair),
            other => Err(format!("unknown stage {other:?} (flow, branch, testgen, repair)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: StageId,
    pub body: Cow<'static, str>,
}

/// Positions of `{identifier}` slots in `body`, as (start, end, name).
fn slot_spans(body: &str) -> Vec<(usize, usize, &str)> {
    let b = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'{' && b.get(i + 1).is_some_and(|c| c.is_ascii_alphabetic() || *c == b'_') {
            let mut j = i + 1;
            while j < b.len() && (b[j].is_ascii_alphanumeric() || b[j] == b'_') {
                j += 1;
            }
            if b.get(j) == Some(&b'}') {
                out.push((i, j + 1, &body[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn new(stage: StageId, body: impl Into<Cow<'static, str>>) -> Self {
        PromptTemplate {
            stage,
            body: body.into(),
        }
    }

    pub fn slots(&self) -> Vec<&str> {
        let mut v: Vec<&str> = slot_spans(&self.body).into_iter().map(|(_, _, n)| n).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn flow() -> Self {
        Self::new(StageId::FlowReasoning, FLOW_BODY)
    }

    /// Part 1 of the branch stage. Without a flow, the flow paragraph is
    /// replaced by [`NO_FLOW_SENTENCE`].
    pub fn branch_part1(with_flow: bool) -> Self {
        if with_flow {
            Self::new(StageId::BranchReasoning, BRANCH_PART1_BODY)
        } else {
            let body = BRANCH_PART1_BODY.replacen(FLOW_PARAGRAPH, &format!("{NO_FLOW_SENTENCE}\n"), 1);
            Self::new(StageId::BranchReasoning, body)
        }
    }

    pub fn branch_part2() -> Self {
        Self::new(StageId::BranchReasoning, BRANCH_PART2_BODY)
    }

    /// The test-generation prompt, dropping the flow and/or conditions
    /// paragraphs when those inputs are absent.
    pub fn testgen(with_flow: bool, with_conditions: bool) -> Self {
        let mut body = TESTGEN_BODY.to_string();
        if !with_flow {
            body = body.replacen(&format!("{FLOW_PARAGRAPH}\n"), "", 1);
        }
        if !with_conditions {
            body = body.replacen(&format!("{CONDITIONS_PARAGRAPH}\n"), "", 1);
        }
        Self::new(StageId::TestGeneration, body)
    }

    pub fn repair() -> Self {
        Self::new(StageId::Repair, REPAIR_BODY)
    }
}

/// Substitutes every slot in one pass; substituted text is not rescanned.
pub fn render_prompt(tmpl: &PromptTemplate, bindings: &BTreeMap<&str, String>) -> Result<String, WorkflowError> {
    let body = &tmpl.body;
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for (start, end, name) in slot_spans(body) {
        let value = bindings.get(name).ok_or_else(|| WorkflowError::UnboundSlot {
            stage: tmpl.stage,
            slot: name.to_string(),
        })?;
        out.push_str(&body[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&body[last..]);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Errors and configuration

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("prompt for {stage} references unbound slot {{{slot}}}")]
    UnboundSlot { stage: StageId, slot: String },
    #[error("model gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("tool execution: {0}")]
    Tool(#[from] ToolError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    TurnOrder(#[from] TurnOrderError),
    #[error("{stage} requires a payload from an earlier stage: {what}")]
    MissingPriorPayload { stage: StageId, what: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_flow: bool,
    pub use_branch: bool,
    pub max_repair_iters: usize,
    pub max_turns_per_stage: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_flow: true,
            use_branch: true,
            max_repair_iters: 5,
            max_turns_per_stage: 30,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if self.max_turns_per_stage == 0 {
            return Err(WorkflowError::Config("max_turns_per_stage must be at least 1".into()));
        }
        Ok(())
    }

    /// Build-and-run validations performed by the repair loop at most.
    pub fn max_attempts(&self) -> usize {
        self.max_repair_iters.max(1)
    }

    /// Upper bound on model calls for one pipeline.
    pub fn max_model_calls(&self) -> usize {
        self.max_turns_per_stage * (3 + self.max_repair_iters) + 1
    }
}

// ---------------------------------------------------------------------------
// Transcript log

/// Append-only JSON-lines log of model turns and tool events.
#[derive(Debug)]
pub struct TranscriptLog {
    path: PathBuf,
    file: Mutex<File>,
}

#[derive(Debug, Serialize)]
struct LogRecord<'a> {
    ts: String,
    stage: StageId,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    call: Option<&'a ToolCall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result_digest: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    usage: Option<&'a Usage>,
    spent_usd: f64,
}

impl TranscriptLog {
    pub fn open(path: &Path) -> Result<Self, WorkflowError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_at(path))?;
        Ok(TranscriptLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, rec: &LogRecord<'_>) {
        let Ok(mut line) = serde_json::to_string(rec) else { return };
        line.push('\n');
        let mut f = self.file.lock().expect("transcript log poisoned");
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::warn!("could not append to {}: {e}", self.path.display());
        }
    }
}

// ---------------------------------------------------------------------------
// Agent loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    PayloadEmitted,
    DoneEmitted,
    TurnCapReached,
    BudgetExhausted,
    TimeExhausted,
}

impl Terminal {
    pub fn is_exhaustion(self) -> bool {
        matches!(self, Terminal::BudgetExhausted | Terminal::TimeExhausted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub call: ToolCall,
    pub result_digest: String,
    pub truncated: bool,
    pub is_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub conversation: Conversation,
    pub tool_events: Vec<ToolEvent>,
    pub ledger_snapshot: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: StageId,
    pub transcript: AgentTranscript,
    pub payload: Option<Payload>,
    pub terminal: Terminal,
    pub model_turns: usize,
    /// Report of the last `Run` tool call in this stage, if any.
    pub last_run: Option<BuildRunReport>,
}

/// What ends a stage's loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Payload(PayloadKind),
    Done,
}

impl Goal {
    fn expected(self) -> Option<PayloadKind> {
        match self {
            Goal::Payload(k) => Some(k),
            Goal::Done => None,
        }
    }

    fn reminder(self) -> String {
        match self {
            Goal::Payload(k) => format!(
                "When you are finished, your final response should contain the result within the tags <{0}> and </{0}>.",
                k.tag()
            ),
            Goal::Done => "If you have generated the test case and confirmed that it satisfies all the above conditions, respond <DONE>.".into(),
        }
    }
}

pub const MAX_CONSECUTIVE_CORRECTIONS: usize = 2;

/// Everything a stage needs besides its prompt.
pub struct StageContext<'a> {
    pub gateway: &'a Gateway,
    pub model_id: &'a str,
    pub ledger: &'a mut BudgetLedger,
    pub sandbox: &'a SandboxRoot,
    pub log: Option<&'a TranscriptLog>,
}

impl StageContext<'_> {
    fn log(&self, stage: StageId, kind: &str, text: Option<&str>, call: Option<&ToolCall>, digest: Option<&str>, usage: Option<&Usage>) {
        if let Some(log) = self.log {
            log.append(&LogRecord {
                ts: chrono::Utc::now().to_rfc3339(),
                stage,
                kind,
                text,
                call,
                result_digest: digest,
                usage,
                spent_usd: self.ledger.spent_usd(),
            });
        }
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Drives one model/tool exchange until `goal` is met, the turn cap is hit,
/// or the budget runs out. Appends `prompt` to `conv` as a framework turn.
/// Only infrastructure failures (transport, replay miss, missing container
/// engine) are returned as `Err`.
pub fn agent_loop(
    ctx: &mut StageContext<'_>,
    stage: StageId,
    goal: Goal,
    tools: &[ToolKind],
    max_turns: usize,
    mut conv: Conversation,
    prompt: String,
) -> Result<StageResult, WorkflowError> {
    ctx.log(stage, "framework_turn", Some(&prompt), None, None, None);
    conv.push_framework(prompt)?;
    let mut events = Vec::new();
    let mut payload = None;
    let mut last_run = None;
    let mut turns = 0;
    let mut corrections = 0;

    let terminal = loop {
        if turns >= max_turns {
            break Terminal::TurnCapReached;
        }
        let completion = match ctx.gateway.complete(&conv, ctx.model_id, ctx.ledger) {
            Ok(c) => c,
            Err(GatewayError::BudgetExhausted { .. }) => break Terminal::BudgetExhausted,
            Err(GatewayError::TimeExhausted { .. }) => break Terminal::TimeExhausted,
            Err(e) => return Err(e.into()),
        };
        turns += 1;
        ctx.log(stage, "model_turn", Some(&completion.text), None, None, Some(&completion.usage));
        conv.push_model(completion.text.clone())?;

        let reply = match parse_agent_action(&completion.text, goal.expected()) {
            Ok(AgentAction::ToolCalls(calls)) => {
                corrections = 0;
                let mut parts = Vec::with_capacity(calls.len());
                for call in calls {
                    let remaining = ctx.ledger.remaining_time();
                    let (text, is_error) = match ctx.sandbox.execute(&call, tools, remaining) {
                        Ok(out) => {
                            if out.run_report.is_some() {
                                last_run = out.run_report;
                            }
                            (out.text, false)
                        }
                        Err(e @ ToolError::EngineUnavailable(_)) => return Err(e.into()),
                        Err(e) => (format!("Error: {e}"), true),
                    };
                    let digest = sha256_hex(&text);
                    ctx.log(stage, "tool_event", None, Some(&call), Some(&digest), None);
                    parts.push(format!("[{} result]\n{}", call.tool, text.trim_end()));
                    events.push(ToolEvent {
                        truncated: text.contains(TRUNCATION_MARKER.trim_start()),
                        call,
                        result_digest: digest,
                        is_error,
                    });
                }
                parts.join("\n\n")
            }
            Ok(AgentAction::Payload(p)) => {
                payload = Some(p);
                break Terminal::PayloadEmitted;
            }
            Ok(AgentAction::Done) if goal == Goal::Done => break Terminal::DoneEmitted,
            Ok(AgentAction::Done) => {
                corrections = 0;
                format!("<DONE> does not end this step. {}", goal.reminder())
            }
            Ok(AgentAction::Plain(_)) => {
                corrections = 0;
                format!("Please continue. {}", goal.reminder())
            }
            Err(e) => {
                if corrections >= MAX_CONSECUTIVE_CORRECTIONS {
                    break Terminal::TurnCapReached;
                }
                corrections += 1;
                correction_message(&e, goal)
            }
        };
        if turns >= max_turns {
            break Terminal::TurnCapReached;
        }
        ctx.log(stage, "framework_turn", Some(&reply), None, None, None);
        conv.push_framework(reply)?;
    };
    ctx.log(stage, "stage_end", Some(&format!("{terminal:?}")), None, None, None);

    Ok(StageResult {
        stage,
        transcript: AgentTranscript {
            conversation: conv,
            tool_events: events,
            ledger_snapshot: ctx.ledger.snapshot(),
        },
        payload,
        terminal,
        model_turns: turns,
        last_run,
    })
}

fn correction_message(e: &ParseError, goal: Goal) -> String {
    let hint = match e {
        ParseError::MalformedToolCall(_) => {
            "Tool calls must follow the <TOOL> format described above, one call per block."
        }
        _ => "Please check the required format.",
    };
    format!("Your previous response could not be processed: {e}\n{hint} {}", goal.reminder())
}

// ---------------------------------------------------------------------------
// Stages

fn base_bindings(task: &VulnerabilityTask, tools: &[ToolKind]) -> BTreeMap<&'static str, String> {
    let mut b = BTreeMap::new();
    b.insert("description", task.report_text.clone());
    b.insert("tool_description", tool_grammar_description(tools, CONTAINER_WORKDIR));
    b.insert("workdir", CONTAINER_WORKDIR.to_string());
    b.insert("cwe_desc", eval::cwe_criteria(task.cwe).cwe_desc_prompt_fragment);
    b
}

pub fn flow_prompt(task: &VulnerabilityTask) -> Result<String, WorkflowError> {
    render_prompt(&PromptTemplate::flow(), &base_bindings(task, &ToolKind::READ_ONLY))
}

pub fn branch_prompts(task: &VulnerabilityTask, flow: Option<&Flow>) -> Result<(String, String), WorkflowError> {
    let mut b = base_bindings(task, &ToolKind::READ_ONLY);
    if let Some(f) = flow {
        b.insert("flow", f.render_records());
    }
    let p1 = render_prompt(&PromptTemplate::branch_part1(flow.is_some()), &b)?;
    let p2 = render_prompt(&PromptTemplate::branch_part2(), &b)?;
    Ok((p1, p2))
}

pub fn testgen_prompt(
    task: &VulnerabilityTask,
    flow: Option<&Flow>,
    conditions: Option<&ConditionList>,
) -> Result<String, WorkflowError> {
    let mut b = base_bindings(task, &ToolKind::ALL);
    if let Some(f) = flow {
        b.insert("flow", f.render_records());
    }
    if let Some(c) = conditions {
        b.insert("conditions", c.render_numbered());
    }
    render_prompt(&PromptTemplate::testgen(flow.is_some(), conditions.is_some()), &b)
}

pub fn repair_prompt(task: &VulnerabilityTask, feedback: &str) -> Result<String, WorkflowError> {
    let mut b = base_bindings(task, &ToolKind::ALL);
    b.insert("feedback", feedback.to_string());
    render_prompt(&PromptTemplate::repair(), &b)
}

pub fn run_flow_stage(
    ctx: &mut StageContext<'_>,
    task: &VulnerabilityTask,
    cfg: &AblationConfig,
) -> Result<StageResult, WorkflowError> {
    agent_loop(
        ctx,
        StageId::FlowReasoning,
        Goal::Payload(PayloadKind::Flow),
        &ToolKind::READ_ONLY,
        cfg.max_turns_per_stage,
        Conversation::new(SYSTEM_PROMPT),
        flow_prompt(task)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    /// Kept for inspection only; downstream prompts use the conditions.
    pub branches: Option<Vec<BranchPoint>>,
    pub conditions: Option<ConditionList>,
    pub result: StageResult,
}

/// Part 1 asks for the branch sequence; Part 2 continues the same
/// conversation and asks for input conditions. The two parts share the
/// stage's turn cap, with Part 2 guaranteed at least one turn.
pub fn run_branch_stage(
    ctx: &mut StageContext<'_>,
    task: &VulnerabilityTask,
    flow: Option<&Flow>,
    cfg: &AblationConfig,
) -> Result<BranchOutcome, WorkflowError> {
    let (p1, p2) = branch_prompts(task, flow)?;
    let cap = cfg.max_turns_per_stage;
    let part1 = agent_loop(
        ctx,
        StageId::BranchReasoning,
        Goal::Payload(PayloadKind::Sequence),
        &ToolKind::READ_ONLY,
        cap.saturating_sub(1).max(1),
        Conversation::new(SYSTEM_PROMPT),
        p1,
    )?;
    let branches = match &part1.payload {
        Some(Payload::Branches(b)) if part1.terminal == Terminal::PayloadEmitted => b.clone(),
        _ => {
            return Ok(BranchOutcome {
                branches: None,
                conditions: None,
                result: part1,
            })
        }
    };
    let part2 = agent_loop(
        ctx,
        StageId::BranchReasoning,
        Goal::Payload(PayloadKind::Conditions),
        &ToolKind::READ_ONLY,
        cap.saturating_sub(part1.model_turns).max(1),
        part1.transcript.conversation,
        p2,
    )?;
    let conditions = match &part2.payload {
        Some(Payload::Conditions(c)) => Some(c.clone()),
        _ => None,
    };
    let mut tool_events = part1.transcript.tool_events;
    tool_events.extend(part2.transcript.tool_events);
    Ok(BranchOutcome {
        branches: Some(branches),
        conditions,
        result: StageResult {
            stage: StageId::BranchReasoning,
            transcript: AgentTranscript {
                conversation: part2.transcript.conversation,
                tool_events,
                ledger_snapshot: part2.transcript.ledger_snapshot,
            },
            payload: part2.payload,
            terminal: part2.terminal,
            model_turns: part1.model_turns + part2.model_turns,
            last_run: None,
        },
    })
}

pub fn run_testgen_stage(
    ctx: &mut StageContext<'_>,
    task: &VulnerabilityTask,
    flow: Option<&Flow>,
    conditions: Option<&ConditionList>,
    cfg: &AblationConfig,
) -> Result<StageResult, WorkflowError> {
    agent_loop(
        ctx,
        StageId::TestGeneration,
        Goal::Done,
        &ToolKind::ALL,
        cfg.max_turns_per_stage,
        Conversation::new(SYSTEM_PROMPT),
        testgen_prompt(task, flow, conditions)?,
    )
}

/// Feedback shown to the model after a failed validation.
pub fn feedback_for(report: &BuildRunReport) -> String {
    let lead = if !report.build_ok {
        "The Docker image could not be built from Dockerfile.vuln."
    } else if report.timed_out {
        "The test did not finish within the time limit."
    } else if report.exit_code == Some(0) {
        "The test exited with code 0, so it PASSES even though the vulnerability exists. It must FAIL (exit with a non-zero code) while the vulnerability exists."
    } else {
        "The test did not exit with a non-zero code."
    };
    format!("{lead}\n{}", report.render().trim_end())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    /// Build-and-run validations performed.
    pub attempts: usize,
    /// The last validation built, ran and exited nonzero.
    pub success: bool,
    pub final_report: Option<BuildRunReport>,
    pub stages: Vec<StageResult>,
    /// Set when the loop stopped on budget or time exhaustion.
    pub halted: Option<Terminal>,
}

/// Validates the current test and, while it does not fail as a PoV test
/// should, asks for a repair in a fresh conversation. `last` is how the
/// preceding test-generation stage ended.
pub fn repair_loop(
    ctx: &mut StageContext<'_>,
    task: &VulnerabilityTask,
    cfg: &AblationConfig,
    mut last: Terminal,
) -> Result<RepairOutcome, WorkflowError> {
    let mut out = RepairOutcome {
        attempts: 0,
        success: false,
        final_report: None,
        stages: Vec::new(),
        halted: None,
    };
    loop {
        if last.is_exhaustion() {
            out.halted = Some(last);
            break;
        }
        let tag = ctx.sandbox.next_image_tag();
        let report = ctx.sandbox.run_container(&tag, ctx.ledger.remaining_time())?;
        out.attempts += 1;
        ctx.log(StageId::Repair, "validation", Some(&report.render()), None, None, None);
        out.success = report.failed_as_expected();
        let feedback = feedback_for(&report);
        out.final_report = Some(report);
        if out.success || out.attempts >= cfg.max_attempts() {
            break;
        }
        let res = agent_loop(
            ctx,
            StageId::Repair,
            Goal::Done,
            &ToolKind::ALL,
            cfg.max_turns_per_stage,
            Conversation::new(SYSTEM_PROMPT),
            repair_prompt(task, &feedback)?,
        )?;
        last = res.terminal;
        out.stages.push(res);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Isolation check

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("model text from {from} (turn {turn}) appears in the {into} conversation")]
pub struct IsolationViolation {
    pub from: StageId,
    pub turn: usize,
    pub into: StageId,
}

/// Shortest model turn considered; shorter turns (`<DONE>`, one-line tool
/// calls) recur legitimately.
pub const ISOLATION_MIN_LEN: usize = 32;

fn payload_renderings(p: &Payload) -> Vec<String> {
    match p {
        Payload::Flow(f) => vec![f.render(), f.render_records()],
        Payload::Branches(b) => vec![render_branch_sequence(b), render_branch_records(b)],
        Payload::Conditions(c) => vec![c.render(), c.render_numbered()],
    }
}

/// Checks that no model turn of one stage instance appears verbatim in the
/// conversation of another, except inside a payload rendering.
pub fn check_isolation(stages: &[StageResult]) -> Result<(), IsolationViolation> {
    let renderings: Vec<String> = stages
        .iter()
        .filter_map(|s| s.payload.as_ref())
        .flat_map(payload_renderings)
        .collect();
    for (i, a) in stages.iter().enumerate() {
        for (turn, text) in a.transcript.conversation.model_turns().enumerate() {
            let t = text.trim();
            if t.len() < ISOLATION_MIN_LEN || renderings.iter().any(|r| r.contains(t)) {
                continue;
            }
            for (j, b) in stages.iter().enumerate() {
                if i == j {
                    continue;
                }
                let conv = &b.transcript.conversation;
                let leaked =
                    conv.system_prompt.contains(t) || conv.turns().iter().any(|turn| turn.text.contains(t));
                if leaked {
                    return Err(IsolationViolation {
                        from: a.stage,
                        turn,
                        into: b.stage,
                    });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageId,
    pub terminal: Terminal,
    pub model_turns: usize,
    pub tool_events: usize,
    pub conversation_digest: String,
}

impl StageSummary {
    pub fn of(r: &StageResult) -> Self {
        let conv = serde_json::to_string(&r.transcript.conversation).unwrap_or_default();
        StageSummary {
            stage: r.stage,
            terminal: r.terminal,
            model_turns: r.model_turns,
            tool_events: r.transcript.tool_events.len(),
            conversation_digest: sha256_hex(&conv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub task_id: String,
    pub cwe: String,
    pub model_id: String,
    pub ablation: AblationConfig,
    pub stages: Vec<StageSummary>,
    pub flow: Option<Flow>,
    pub conditions: Option<ConditionList>,
    pub attempts: usize,
    pub validated: bool,
    pub final_run: Option<BuildRunReport>,
    pub halted: Option<Terminal>,
    pub ledger: LedgerSnapshot,
    pub verdict: Option<Verdict>,
    /// Hash of every field above except wall-clock time.
    pub digest: String,
}

impl PipelineReport {
    pub fn compute_digest(&self) -> String {
        let mut view = self.clone();
        view.digest = String::new();
        view.ledger.elapsed = Default::default();
        sha256_hex(&serde_json::to_string(&view).unwrap_or_default())
    }

    pub fn total_model_turns(&self) -> usize {
        self.stages.iter().map(|s| s.model_turns).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub stages: Vec<StageResult>,
    pub branches: Option<Vec<BranchPoint>>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model_id: String,
    pub ablation: AblationConfig,
    /// Where payloads, transcripts and the transcript log are written.
    pub artifacts_dir: Option<PathBuf>,
    /// `None` skips evaluation.
    pub eval: Option<EvalConfig>,
}

pub const PAYLOAD_FLOW: &str = "flow.json";
pub const PAYLOAD_BRANCHES: &str = "branches.json";
pub const PAYLOAD_CONDITIONS: &str = "conditions.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkflowError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| WorkflowError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })?;
    fs::write(path, text + "\n").map_err(io_at(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, WorkflowError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| WorkflowError::Io {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, e),
    })
}

struct Artifacts<'a>(Option<&'a Path>);

impl Artifacts<'_> {
    fn payload<T: Serialize>(&self, name: &str, value: &T) -> Result<(), WorkflowError> {
        match self.0 {
            Some(dir) => write_json(&dir.join("payloads").join(name), value),
            None => Ok(()),
        }
    }

    fn transcript(&self, index: usize, r: &StageResult) -> Result<(), WorkflowError> {
        match self.0 {
            Some(dir) => write_json(
                &dir.join("transcripts").join(format!("{index:02}-{}.json", r.stage)),
                r,
            ),
            None => Ok(()),
        }
    }
}

/// Runs flow, branch, test generation and repair per `cfg.ablation`, then
/// evaluates the resulting test. Stops issuing model calls as soon as the
/// budget or time cap is hit; evaluation still runs.
pub fn run_pipeline(
    task: &VulnerabilityTask,
    sandbox: &SandboxRoot,
    gateway: &Gateway,
    ledger: &mut BudgetLedger,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, WorkflowError> {
    cfg.ablation.validate()?;
    let arts = Artifacts(cfg.artifacts_dir.as_deref());
    let log = match &cfg.artifacts_dir {
        Some(dir) => Some(TranscriptLog::open(&dir.join("logs").join("transcript.jsonl"))?),
        None => None,
    };
    let mut ctx = StageContext {
        gateway,
        model_id: &cfg.model_id,
        ledger,
        sandbox,
        log: log.as_ref(),
    };
    let mut stages: Vec<StageResult> = Vec::new();
    let mut halted = None;
    let mut flow = None;
    let mut branches = None;
    let mut conditions = None;
    let record = |stages: &mut Vec<StageResult>, r: StageResult| -> Result<Option<Terminal>, WorkflowError> {
        arts.transcript(stages.len(), &r)?;
        let t = r.terminal;
        stages.push(r);
        Ok(t.is_exhaustion().then_some(t))
    };

    if cfg.ablation.use_flow {
        let r = run_flow_stage(&mut ctx, task, &cfg.ablation)?;
        if let Some(Payload::Flow(f)) = &r.payload {
            arts.payload(PAYLOAD_FLOW, f)?;
            flow = Some(f.clone());
        }
        halted = record(&mut stages, r)?;
    }
    if halted.is_none() && cfg.ablation.use_branch {
        let b = run_branch_stage(&mut ctx, task, flow.as_ref(), &cfg.ablation)?;
        if let Some(bs) = &b.branches {
            arts.payload(PAYLOAD_BRANCHES, bs)?;
        }
        if let Some(c) = &b.conditions {
            arts.payload(PAYLOAD_CONDITIONS, c)?;
        }
        branches = b.branches;
        conditions = b.conditions;
        halted = record(&mut stages, b.result)?;
    }
    let mut repair = None;
    if halted.is_none() {
        let r = run_testgen_stage(&mut ctx, task, flow.as_ref(), conditions.as_ref(), &cfg.ablation)?;
        let last = r.terminal;
        halted = record(&mut stages, r)?;
        let rep = repair_loop(&mut ctx, task, &cfg.ablation, last)?;
        for s in rep.stages.iter().cloned() {
            if let Some(t) = record(&mut stages, s)? {
                halted = Some(t);
            }
        }
        halted = halted.or(rep.halted);
        repair = Some(rep);
    }

    let verdict = match &cfg.eval {
        Some(ec) => Some(eval::evaluate(task, sandbox, ec)?),
        None => None,
    };
    let mut report = PipelineReport {
        task_id: task.id.clone(),
        cwe: task.cwe.id().to_string(),
        model_id: cfg.model_id.clone(),
        ablation: cfg.ablation,
        stages: stages.iter().map(StageSummary::of).collect(),
        flow,
        conditions,
        attempts: repair.as_ref().map_or(0, |r| r.attempts),
        validated: repair.as_ref().is_some_and(|r| r.success),
        final_run: repair.and_then(|r| r.final_report),
        halted,
        ledger: ctx.ledger.snapshot(),
        verdict,
        digest: String::new(),
    };
    report.digest = report.compute_digest();
    if let Some(dir) = &cfg.artifacts_dir {
        write_json(&dir.join("pipeline.json"), &report)?;
    }
    Ok(PipelineOutcome {
        report,
        stages,
        branches,
    })
}
