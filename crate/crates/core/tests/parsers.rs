use std::path::Path;

use povgen_core::output::{
    parse_agent_action, parse_branch_block, parse_branch_sequence, parse_conditions, parse_conditions_block,
    parse_flow, render_branch_sequence, AgentAction, BranchPoint, BranchType, ConditionList, Flow, FlowPoint,
    FlowRole, ParseError, PayloadKind, ToolCall, ToolKind,
};
use proptest::prelude::*;

fn excerpt(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/excerpts").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn non_blank() -> impl Strategy<Value = String> {
    any::<String>().prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn point(role: FlowRole) -> impl Strategy<Value = FlowPoint> {
    (non_blank(), any::<String>(), non_blank(), proptest::option::of(any::<String>())).prop_map(
        move |(code, variable, file, remarks)| FlowPoint {
            role,
            code,
            variable,
            file,
            remarks,
        },
    )
}

fn flow() -> impl Strategy<Value = Flow> {
    (
        point(FlowRole::Source),
        proptest::collection::vec(point(FlowRole::Intermediate), 0..5),
        point(FlowRole::Sink),
    )
        .prop_map(|(s, mid, k)| {
            let mut pts = vec![s];
            pts.extend(mid);
            pts.push(k);
            Flow::new(pts).expect("valid role order")
        })
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

fn branch_type() -> impl Strategy<Value = BranchType> {
    const RESERVED: [&str; 8] = ["ifelse", "if", "elseif", "tryexcept", "trycatch", "try", "switch", "switchcase"];
    prop_oneof![
        Just(BranchType::IfElse),
        Just(BranchType::TryExcept),
        Just(BranchType::Switch),
        any::<String>()
            .prop_filter("not a known label", |s| !RESERVED.contains(&squash(s).as_str()))
            .prop_map(BranchType::Other),
    ]
}

fn branches() -> impl Strategy<Value = Vec<BranchPoint>> {
    proptest::collection::vec(
        (branch_type(), non_blank(), any::<String>(), non_blank()).prop_map(|(branch_type, code, file, outcome)| {
            BranchPoint {
                branch_type,
                code,
                file,
                outcome,
            }
        }),
        0..6,
    )
}

fn conditions() -> impl Strategy<Value = ConditionList> {
    proptest::collection::vec(
        "[^\n\r]{1,60}"
            .prop_map(|s| s.trim().to_string())
            .prop_filter("non-empty, no closing tag", |s| !s.is_empty() && !s.contains("</CONDITIONS>")),
        1..8,
    )
    .prop_map(|v| ConditionList::new(v).expect("non-empty"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flow_round_trip(f in flow()) {
        prop_assert_eq!(parse_flow(&f.render()), Ok(f));
    }

    #[test]
    fn branch_sequence_round_trip(b in branches()) {
        prop_assert_eq!(parse_branch_sequence(&render_branch_sequence(&b)), Ok(b));
    }

    #[test]
    fn conditions_round_trip(c in conditions()) {
        prop_assert_eq!(parse_conditions(&c.render()), Ok(c));
    }

    #[test]
    fn tool_call_round_trip(path in "[a-z0-9_/.]{1,30}", content in "[^`]{0,200}") {
        let call = ToolCall::new(ToolKind::Write, [("path", path), ("content", content)]).unwrap();
        let parsed = parse_agent_action(&call.render(), None).unwrap();
        let AgentAction::ToolCalls(calls) = parsed else { panic!("expected tool calls") };
        prop_assert_eq!(calls.len(), 1);
        prop_assert_eq!(calls[0].arg("path"), call.arg("path"));
        // the fenced form always ends content with a newline
        let want = call.arg("content").unwrap();
        let got = calls[0].arg("content").unwrap();
        prop_assert_eq!(got.trim_end_matches('\n'), want.trim_end_matches('\n'));
    }
}

fn fragments() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<TOOL>".to_string()),
        Just("</TOOL>".to_string()),
        Just("<FLOW>".to_string()),
        Just("</FLOW>".to_string()),
        Just("<SEQUENCE>".to_string()),
        Just("</SEQUENCE>".to_string()),
        Just("<CONDITIONS>".to_string()),
        Just("</CONDITIONS>".to_string()),
        Just("<DONE>".to_string()),
        Just("Write\npath: a\ncontent:\n```\n".to_string()),
        Just("```\n".to_string()),
        Just("{\"role\": \"Source\", ".to_string()),
        Just("\"code\": \"x\"}".to_string()),
        Just("1. ".to_string()),
        Just("{".to_string()),
        Just("}".to_string()),
        Just("\"".to_string()),
        Just("\\".to_string()),
        any::<String>(),
    ];
    proptest::collection::vec(piece, 0..24).prop_map(|v| v.concat())
}

fn expected_kinds() -> [Option<PayloadKind>; 4] {
    [
        None,
        Some(PayloadKind::Flow),
        Some(PayloadKind::Sequence),
        Some(PayloadKind::Conditions),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    // Any input yields a typed value or a typed error, never a panic.
    #[test]
    fn agent_action_never_panics_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let text = String::from_utf8_lossy(&bytes);
        for kind in expected_kinds() {
            let _: Result<AgentAction, ParseError> = parse_agent_action(&text, kind);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn agent_action_never_panics_on_fragments(text in fragments()) {
        for kind in expected_kinds() {
            let _ = parse_agent_action(&text, kind);
        }
    }
}

#[test]
fn excerpt_flow_records() {
    let flow = parse_flow(&excerpt("flow_records.txt")).unwrap();
    assert_eq!(flow.points().len(), 2);
    let (src, sink) = (flow.source(), flow.sink());
    assert_eq!(src.role, FlowRole::Source);
    assert_eq!(src.variable, "value");
    assert_eq!(src.file, "...CronValidator.java");
    assert!(src.remarks.as_deref().unwrap().starts_with("The entry point"));
    assert_eq!(sink.role, FlowRole::Sink);
    assert_eq!(sink.variable, "e.getMessage()");
    assert_eq!(
        sink.code,
        "context.buildConstraintViolationWithTemplate(e.getMessage()).addConstraintViolation();"
    );
}

#[test]
fn excerpt_branch_record() {
    let b = parse_branch_block(&excerpt("branch_record.txt")).unwrap();
    assert_eq!(
        b,
        vec![BranchPoint {
            branch_type: BranchType::IfElse,
            code: "if (value == null)".into(),
            file: ".../CronValidator.java".into(),
            outcome: "False - the value should not be null".into(),
        }]
    );
}

#[test]
fn excerpt_conditions() {
    let c = parse_conditions_block(&excerpt("conditions.txt")).unwrap();
    assert_eq!(
        c.as_slice(),
        [
            "The input must not be null...",
            "The input must not be an empty string after trimming whitespace...",
            "The input must not contain || ...",
        ]
    );
}

#[test]
fn payload_is_recognized_only_for_the_active_stage() {
    let text = excerpt("flow_records.txt");
    assert!(matches!(
        parse_agent_action(&text, Some(PayloadKind::Flow)),
        Ok(AgentAction::Payload(_))
    ));
    assert!(matches!(parse_agent_action(&text, None), Ok(AgentAction::Plain(_))));
}
