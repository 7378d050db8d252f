//! Parsers for the structured text the agent emits.
//!
//! Tag grammar (normative, shared with the prompt templates through
//! [`tool_grammar_description`]):
//!
//! ~~~text
//! <FLOW> record* </FLOW>             record = JSON object with role, code, variable, file, remarks?
//! <SEQUENCE> record* </SEQUENCE>     record = JSON object with type, code, file, outcome
//! <CONDITIONS>
//! 1. first condition
//! 2. second condition
//! </CONDITIONS>
//! <TOOL>
//! ToolName
//! key: value
//! content:
//! ```
//! raw file content (Write only)
//! ```
//! </TOOL>
//! <DONE>
//! ~~~
//!
//! Records are located by brace matching, so prose or `...` between them is
//! skipped. Keys match case-insensitively and unknown keys are ignored.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DONE_TAG: &str = "<DONE>";
pub const TOOL_TAG: &str = "TOOL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("<{tag}> opened without a matching </{tag}>")]
    UnbalancedTag { tag: String },
    #[error("no <{tag}> block found")]
    MissingTag { tag: String },
    #[error("record {index}: field `{field}`: {reason}")]
    MalformedRecord {
        index: usize,
        field: String,
        reason: String,
    },
    #[error("role order: {0}")]
    RoleOrderError(String),
    #[error("condition list is empty")]
    EmptyList,
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("malformed <{tag}> payload: {source}")]
    MalformedPayload {
        tag: String,
        #[source]
        source: Box<ParseError>,
    },
}

/// Returns the text between the first `<tag>` and the next `</tag>`.
pub fn extract_tagged_block(text: &str, tag: &str) -> Result<Option<String>, ParseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let Some(start) = text.find(&open) else {
        return Ok(None);
    };
    let body_start = start + open.len();
    match text[body_start..].find(&close) {
        Some(len) => Ok(Some(text[body_start..body_start + len].to_string())),
        None => Err(ParseError::UnbalancedTag {
            tag: tag.to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowRole {
    Source,
    Intermediate,
    Sink,
}

impl FlowRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowRole::Source => "Source",
            FlowRole::Intermediate => "Intermediate",
            FlowRole::Sink => "Sink",
        }
    }

    fn parse(raw: &str) -> Option<Self> {
        match normalize_word(raw).as_str() {
            "source" => Some(FlowRole::Source),
            "intermediate" | "intermediatenode" => Some(FlowRole::Intermediate),
            "sink" => Some(FlowRole::Sink),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPoint {
    pub role: FlowRole,
    pub code: String,
    pub variable: String,
    pub file: String,
    pub remarks: Option<String>,
}

/// Ordered source-to-sink program points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    points: Vec<FlowPoint>,
}

impl Flow {
    pub fn new(points: Vec<FlowPoint>) -> Result<Self, ParseError> {
        if points.len() < 2 {
            return Err(ParseError::RoleOrderError(format!(
                "a flow needs at least a source and a sink, got {} point(s)",
                points.len()
            )));
        }
        if points[0].role != FlowRole::Source {
            return Err(ParseError::RoleOrderError(format!(
                "first point has role {}, expected Source",
                points[0].role.as_str()
            )));
        }
        let last = points.len() - 1;
        if points[last].role != FlowRole::Sink {
            return Err(ParseError::RoleOrderError(format!(
                "last point has role {}, expected Sink",
                points[last].role.as_str()
            )));
        }
        for (i, p) in points.iter().enumerate().take(last).skip(1) {
            if p.role != FlowRole::Intermediate {
                return Err(ParseError::RoleOrderError(format!(
                    "point {i} has role {}, only the first point may be a Source and only the last a Sink",
                    p.role.as_str()
                )));
            }
        }
        Ok(Flow { points })
    }

    pub fn points(&self) -> &[FlowPoint] {
        &self.points
    }

    pub fn source(&self) -> &FlowPoint {
        &self.points[0]
    }

    pub fn sink(&self) -> &FlowPoint {
        &self.points[self.points.len() - 1]
    }

    /// Records only, as embedded in later prompts.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!(
                "{{\"role\": {},\n \"code\": {},\n \"variable\": {},\n \"file\": {}",
                json_str(p.role.as_str()),
                json_str(&p.code),
                json_str(&p.variable),
                json_str(&p.file)
            ));
            if let Some(r) = &p.remarks {
                out.push_str(&format!(",\n \"remarks\": {}", json_str(r)));
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn render(&self) -> String {
        format!("<FLOW>\n{}</FLOW>", self.render_records())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchType {
    IfElse,
    TryExcept,
    Switch,
    Other(String),
}

impl BranchType {
    fn parse(raw: &str) -> Self {
        match normalize_word(raw).as_str() {
            "ifelse" | "if" | "elseif" => BranchType::IfElse,
            "tryexcept" | "trycatch" | "try" => BranchType::TryExcept,
            "switch" | "switchcase" => BranchType::Switch,
            _ => BranchType::Other(raw.to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            BranchType::IfElse => "If-Else",
            BranchType::TryExcept => "Try-Except",
            BranchType::Switch => "Switch",
            BranchType::Other(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub branch_type: BranchType,
    pub code: String,
    pub file: String,
    pub outcome: String,
}

pub fn render_branch_records(branches: &[BranchPoint]) -> String {
    let mut out = String::new();
    for b in branches {
        out.push_str(&format!(
            "{{\"type\": {},\n \"code\": {},\n \"file\": {},\n \"outcome\": {}}}\n",
            json_str(b.branch_type.label()),
            json_str(&b.code),
            json_str(&b.file),
            json_str(&b.outcome)
        ));
    }
    out
}

pub fn render_branch_sequence(branches: &[BranchPoint]) -> String {
    format!("<SEQUENCE>\n{}</SEQUENCE>", render_branch_records(branches))
}

/// Input constraints synthesized from the branch sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionList(Vec<String>);

impl ConditionList {
    pub fn new(conditions: Vec<String>) -> Result<Self, ParseError> {
        if conditions.is_empty() || conditions.iter().any(|c| c.trim().is_empty()) {
            return Err(ParseError::EmptyList);
        }
        Ok(ConditionList(conditions))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn render_numbered(&self) -> String {
        self.0
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}\n", i + 1, c))
            .collect()
    }

    pub fn render(&self) -> String {
        format!("<CONDITIONS>\n{}</CONDITIONS>", self.render_numbered())
    }
}

fn json_str(s: &str) -> String {
    // `</` is escaped so a value can never close the surrounding tag.
    serde_json::to_string(s)
        .expect("string serialization is infallible")
        .replace("</", "<\\/")
}

fn normalize_word(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Splits `block` into the top-level `{...}` objects it contains, skipping
/// anything in between.
fn scan_objects(block: &str) -> Result<Vec<&str>, ParseError> {
    let mut objects = Vec::new();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut start = 0usize;
    for (i, c) in block.char_indices() {
        if depth == 0 {
            if c == '{' {
                depth = 1;
                start = i;
                in_string = false;
                escaped = false;
            }
            continue;
        }
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    objects.push(&block[start..=i]);
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(ParseError::MalformedRecord {
            index: objects.len(),
            field: "<object>".into(),
            reason: "unterminated record object".into(),
        });
    }
    Ok(objects)
}

struct Record {
    index: usize,
    fields: BTreeMap<String, String>,
}

impl Record {
    fn parse(index: usize, raw: &str) -> Result<Self, ParseError> {
        let map: serde_json::Map<String, Value> =
            serde_json::from_str(raw).map_err(|e| ParseError::MalformedRecord {
                index,
                field: "<json>".into(),
                reason: e.to_string(),
            })?;
        let mut fields = BTreeMap::new();
        for (k, v) in map {
            let value = match v {
                Value::Null => continue,
                Value::String(s) => s,
                other => other.to_string(),
            };
            fields.insert(k.trim().to_lowercase(), value);
        }
        Ok(Record { index, fields })
    }

    fn optional(&self, field: &str) -> Option<&str> {
        self.fields.get(field).map(String::as_str)
    }

    fn required(&self, field: &str) -> Result<&str, ParseError> {
        self.optional(field)
            .ok_or_else(|| ParseError::MalformedRecord {
                index: self.index,
                field: field.into(),
                reason: "missing".into(),
            })
    }

    fn non_blank(&self, field: &str) -> Result<&str, ParseError> {
        let v = self.required(field)?;
        if v.trim().is_empty() {
            return Err(ParseError::MalformedRecord {
                index: self.index,
                field: field.into(),
                reason: "empty".into(),
            });
        }
        Ok(v)
    }
}

fn records(block: &str) -> Result<Vec<Record>, ParseError> {
    scan_objects(block)?
        .into_iter()
        .enumerate()
        .map(|(i, raw)| Record::parse(i, raw))
        .collect()
}

pub fn parse_flow_block(block: &str) -> Result<Flow, ParseError> {
    let points = records(block)?
        .into_iter()
        .map(|r| {
            let role_raw = r.required("role")?;
            let role = FlowRole::parse(role_raw).ok_or_else(|| ParseError::MalformedRecord {
                index: r.index,
                field: "role".into(),
                reason: format!("unknown role {role_raw:?}"),
            })?;
            Ok(FlowPoint {
                role,
                code: r.non_blank("code")?.to_string(),
                variable: r.required("variable")?.to_string(),
                file: r.non_blank("file")?.to_string(),
                remarks: r.optional("remarks").map(str::to_string),
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    Flow::new(points)
}

pub fn parse_flow(text: &str) -> Result<Flow, ParseError> {
    let block = extract_tagged_block(text, "FLOW")?.ok_or(ParseError::MissingTag {
        tag: "FLOW".into(),
    })?;
    parse_flow_block(&block)
}

pub fn parse_branch_block(block: &str) -> Result<Vec<BranchPoint>, ParseError> {
    records(block)?
        .into_iter()
        .map(|r| {
            Ok(BranchPoint {
                branch_type: BranchType::parse(r.required("type")?),
                code: r.non_blank("code")?.to_string(),
                file: r.optional("file").unwrap_or_default().to_string(),
                outcome: r.non_blank("outcome")?.to_string(),
            })
        })
        .collect()
}

pub fn parse_branch_sequence(text: &str) -> Result<Vec<BranchPoint>, ParseError> {
    let block = extract_tagged_block(text, "SEQUENCE")?.ok_or(ParseError::MissingTag {
        tag: "SEQUENCE".into(),
    })?;
    parse_branch_block(&block)
}

/// `"12. rest"` or `"3) rest"` -> `Some("rest")`.
fn strip_list_number(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if rest.is_empty() || rest.starts_with(char::is_whitespace) {
        Some(rest.trim())
    } else {
        None
    }
}

pub fn parse_conditions_block(block: &str) -> Result<ConditionList, ParseError> {
    let numbered = block.lines().any(|l| strip_list_number(l).is_some());
    let mut items: Vec<String> = Vec::new();
    if numbered {
        let mut in_item = false;
        for line in block.lines() {
            if let Some(rest) = strip_list_number(line) {
                items.push(rest.to_string());
                in_item = true;
            } else if in_item && !line.trim().is_empty() {
                let last = items.last_mut().expect("in_item implies an item");
                last.push('\n');
                last.push_str(line.trim());
            }
        }
    } else {
        items = block
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
    }
    items.retain(|c| !c.trim().is_empty());
    ConditionList::new(items)
}

pub fn parse_conditions(text: &str) -> Result<ConditionList, ParseError> {
    let block = extract_tagged_block(text, "CONDITIONS")?.ok_or(ParseError::MissingTag {
        tag: "CONDITIONS".into(),
    })?;
    parse_conditions_block(&block)
}

// ---------------------------------------------------------------------------
// Tool calls

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolKind {
    ListDir,
    Read,
    Find,
    Grep,
    Write,
    Run,
}

pub struct ToolSpec {
    pub kind: ToolKind,
    pub summary: &'static str,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
}

const TOOL_SPECS: [ToolSpec; 6] = [
    ToolSpec {
        kind: ToolKind::ListDir,
        summary: "list the entries of a directory",
        required: &["path"],
        optional: &[],
    },
    ToolSpec {
        kind: ToolKind::Read,
        summary: "read a file, optionally only lines start_line..=end_line (1-based)",
        required: &["path"],
        optional: &["start_line", "end_line"],
    },
    ToolSpec {
        kind: ToolKind::Find,
        summary: "find files by name with a glob pattern, e.g. *.java or **/Parser.c",
        required: &["pattern"],
        optional: &[],
    },
    ToolSpec {
        kind: ToolKind::Grep,
        summary: "list lines containing a fixed, case-sensitive string, searching scope (default: the whole project)",
        required: &["pattern"],
        optional: &["scope"],
    },
    ToolSpec {
        kind: ToolKind::Write,
        summary: "create or replace a file; the content goes between ``` fences on the lines after `content:`",
        required: &["path", "content"],
        optional: &[],
    },
    ToolSpec {
        kind: ToolKind::Run,
        summary: "build the Docker image from Dockerfile.vuln and run it, returning the build and run output",
        required: &[],
        optional: &[],
    },
];

impl ToolKind {
    pub const ALL: [ToolKind; 6] = [
        ToolKind::ListDir,
        ToolKind::Read,
        ToolKind::Find,
        ToolKind::Grep,
        ToolKind::Write,
        ToolKind::Run,
    ];
    pub const READ_ONLY: [ToolKind; 4] = [
        ToolKind::ListDir,
        ToolKind::Read,
        ToolKind::Find,
        ToolKind::Grep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToolKind::ListDir => "ListDir",
            ToolKind::Read => "Read",
            ToolKind::Find => "Find",
            ToolKind::Grep => "Grep",
            ToolKind::Write => "Write",
            ToolKind::Run => "Run",
        }
    }

    pub fn spec(self) -> &'static ToolSpec {
        &TOOL_SPECS[self as usize]
    }

    fn from_name(raw: &str) -> Option<Self> {
        let n = normalize_word(raw);
        ToolKind::ALL
            .into_iter()
            .find(|k| normalize_word(k.name()) == n)
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: ToolKind,
    pub args: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn new<I, K, V>(tool: ToolKind, args: I) -> Result<Self, ParseError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let call = ToolCall {
            tool,
            args: args
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        };
        call.validate()?;
        Ok(call)
    }

    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).map(String::as_str)
    }

    fn validate(&self) -> Result<(), ParseError> {
        let spec = self.tool.spec();
        for req in spec.required {
            if !self.args.contains_key(*req) {
                return Err(ParseError::MalformedToolCall(format!(
                    "{} requires argument `{req}`",
                    self.tool
                )));
            }
        }
        for key in self.args.keys() {
            if !spec.required.contains(&key.as_str()) && !spec.optional.contains(&key.as_str()) {
                return Err(ParseError::MalformedToolCall(format!(
                    "{} does not take argument `{key}`",
                    self.tool
                )));
            }
        }
        Ok(())
    }

    /// Renders the call in the tool-block grammar.
    pub fn render(&self) -> String {
        let mut out = format!("<TOOL>\n{}\n", self.tool);
        for (k, v) in self.args.iter().filter(|(k, _)| k.as_str() != "content") {
            out.push_str(&format!("{k}: {v}\n"));
        }
        // The fenced section always comes last.
        if let Some(v) = self.args.get("content") {
            out.push_str("content:\n```\n");
            out.push_str(v);
            if !v.is_empty() && !v.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n");
        }
        out.push_str("</TOOL>");
        out
    }
}

fn parse_tool_body(body: &str) -> Result<ToolCall, ParseError> {
    // split, not lines(): content keeps any carriage returns verbatim
    let lines: Vec<&str> = body.split('\n').collect();
    let mut i = 0;
    while i < lines.len() && lines[i].trim().is_empty() {
        i += 1;
    }
    let name = lines
        .get(i)
        .map(|l| l.trim())
        .ok_or_else(|| ParseError::MalformedToolCall("empty tool block".into()))?;
    let tool = ToolKind::from_name(name)
        .ok_or_else(|| ParseError::MalformedToolCall(format!("unknown tool {name:?}")))?;
    i += 1;

    let mut args = BTreeMap::new();
    while i < lines.len() {
        let line = lines[i];
        i += 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| {
            ParseError::MalformedToolCall(format!("expected `key: value`, got {:?}", line.trim()))
        })?;
        let key = key.trim().to_lowercase();
        let value = if key == "content" && value.trim().is_empty() {
            // Fenced raw section: runs to the last fence line of the block.
            if !lines
                .get(i)
                .is_some_and(|l| l.trim_start().starts_with("```"))
            {
                return Err(ParseError::MalformedToolCall(
                    "`content:` must be followed by a ``` fence".into(),
                ));
            }
            let close = (i + 1..lines.len())
                .rev()
                .find(|&j| lines[j].trim() == "```")
                .ok_or_else(|| ParseError::MalformedToolCall("unterminated ``` fence".into()))?;
            if lines[close + 1..].iter().any(|l| !l.trim().is_empty()) {
                return Err(ParseError::MalformedToolCall(
                    "unexpected text after the content fence".into(),
                ));
            }
            let content: String = lines[i + 1..close]
                .iter()
                .map(|l| format!("{l}\n"))
                .collect();
            i = lines.len();
            content
        } else {
            value.trim().to_string()
        };
        if args.insert(key.clone(), value).is_some() {
            return Err(ParseError::MalformedToolCall(format!(
                "argument `{key}` given twice"
            )));
        }
    }
    let call = ToolCall { tool, args };
    call.validate()?;
    Ok(call)
}

/// All tool blocks in document order.
pub fn parse_tool_calls(text: &str) -> Result<Vec<ToolCall>, ParseError> {
    let open = "<TOOL>";
    let close = "</TOOL>";
    let mut calls = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(open) {
        let body_start = start + open.len();
        let len = rest[body_start..].find(close).ok_or_else(|| {
            ParseError::MalformedToolCall("<TOOL> opened without a matching </TOOL>".into())
        })?;
        calls.push(parse_tool_body(&rest[body_start..body_start + len])?);
        rest = &rest[body_start + len + close.len()..];
    }
    Ok(calls)
}

/// Text describing the tool grammar, embedded in prompts as `{tool_description}`.
pub fn tool_grammar_description(tools: &[ToolKind], workdir: &str) -> String {
    let mut out = String::from(
        "You can use the following tools. To invoke a tool, write a block of this form in your response:\n\
         <TOOL>\n\
         ToolName\n\
         argument_name: argument value\n\
         </TOOL>\n\
         You can invoke several tools in one response; they run in order and their outputs are returned in the next message.\n",
    );
    out.push_str(&format!(
        "Paths may be absolute (starting with {workdir}) or relative to {workdir}.\n\n"
    ));
    out.push_str("Available tools:\n");
    for t in tools {
        let spec = t.spec();
        let mut args: Vec<String> = spec.required.iter().map(|a| a.to_string()).collect();
        args.extend(spec.optional.iter().map(|a| format!("{a} (optional)")));
        let args = if args.is_empty() {
            "no arguments".to_string()
        } else {
            format!("arguments: {}", args.join(", "))
        };
        out.push_str(&format!("- {}: {}; {}\n", t.name(), spec.summary, args));
    }
    if tools.contains(&ToolKind::Write) {
        out.push_str(&format!(
            "\nExample:\n<TOOL>\nWrite\npath: {workdir}/tests/example.txt\ncontent:\n```\nfile contents here\n```\n</TOOL>\n"
        ));
    } else {
        out.push_str(&format!(
            "\nExample:\n<TOOL>\nGrep\npattern: someFunction(\nscope: {workdir}\n</TOOL>\n"
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Agent actions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    Flow,
    Sequence,
    Conditions,
}

impl PayloadKind {
    pub fn tag(self) -> &'static str {
        match self {
            PayloadKind::Flow => "FLOW",
            PayloadKind::Sequence => "SEQUENCE",
            PayloadKind::Conditions => "CONDITIONS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Flow(Flow),
    Branches(Vec<BranchPoint>),
    Conditions(ConditionList),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentAction {
    ToolCalls(Vec<ToolCall>),
    Done,
    Payload(Payload),
    Plain(String),
}

/// Classifies one model turn. Precedence: tool calls, then the payload tag
/// expected by the active stage, then `<DONE>`, else plain text.
pub fn parse_agent_action(
    text: &str,
    expected: Option<PayloadKind>,
) -> Result<AgentAction, ParseError> {
    if text.contains("<TOOL>") {
        let calls = parse_tool_calls(text)?;
        if !calls.is_empty() {
            return Ok(AgentAction::ToolCalls(calls));
        }
    }
    if let Some(kind) = expected {
        let tag = kind.tag();
        let wrap = |source: ParseError| ParseError::MalformedPayload {
            tag: tag.to_string(),
            source: Box::new(source),
        };
        if let Some(block) = extract_tagged_block(text, tag).map_err(wrap)? {
            let payload = match kind {
                PayloadKind::Flow => Payload::Flow(parse_flow_block(&block).map_err(wrap)?),
                PayloadKind::Sequence => {
                    Payload::Branches(parse_branch_block(&block).map_err(wrap)?)
                }
                PayloadKind::Conditions => {
                    Payload::Conditions(parse_conditions_block(&block).map_err(wrap)?)
                }
            };
            return Ok(AgentAction::Payload(payload));
        }
    }
    if text.contains(DONE_TAG) {
        return Ok(AgentAction::Done);
    }
    Ok(AgentAction::Plain(text.to_string()))
}
