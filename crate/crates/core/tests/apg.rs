//! Provenance graphs checked against graphs written out by hand from the
//! event sequence that produced them.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use agentsafe_core::clock::{VirtualClock, HARNESS_EPOCH_MS};
use agentsafe_core::escalation::OperatorVerdict;
use agentsafe_core::gateway::{Gateway, GatewayConfig, ToolAdapter};
use agentsafe_core::ledger::payload::ToolCallRequest;
use agentsafe_core::ledger::{build_apg, export_apg, keys, ApgFormat, EdgeType, Ledger, NodeType, RecordKind};
use agentsafe_core::policy::PolicySet;
use agentsafe_core::register::load_register;
use agentsafe_core::telemetry::{EventKind, SemanticEvent};

const REGISTER: &str = r#"{
  "register_id": "clinic", "agent_id": "care-agent", "version": 1,
  "capabilities": [
    {"capability_id": "kb", "phase": "observe", "tool": "kb", "actions": ["search"]},
    {"capability_id": "ehr", "phase": "act", "tool": "ehr", "actions": ["write"]},
    {"capability_id": "plan", "phase": "plan", "tool": "treatment", "actions": ["change"]}
  ],
  "risks": [
    {"risk_id": "R-1", "capability_id": "ehr", "name": "record tampering",
     "causal": {"entity": "ai", "intent": "unintentional"}, "domains": ["privacy"], "severity": "high"},
    {"risk_id": "R-2", "capability_id": "plan", "name": "unsafe treatment change",
     "causal": {"entity": "ai", "intent": "unintentional"}, "domains": ["safety"], "severity": "critical",
     "human_critical": true}
  ]
}"#;

const POLICIES: &str = r#"
policy "kb" { when tool == "kb" then allow }
policy "no-ehr-write" { when tool == "ehr" then deny reason "read-only" risk R-1 }
policy "treatment" { when tool == "treatment" then escalate reason "clinician sign-off" risk R-2 }
"#;

struct Echo;

impl ToolAdapter for Echo {
    fn invoke(&self, request: &ToolCallRequest) -> Result<serde_json::Value, String> {
        Ok(serde_json::json!({ "tool": request.tool, "action": request.action }))
    }
}

fn gateway() -> (Gateway, String) {
    let clock = Arc::new(VirtualClock::new(HARNESS_EPOCH_MS));
    let gw = Gateway::new(
        GatewayConfig::default(),
        Ledger::in_memory("apg", keys::from_seed(3), clock.clone()),
        clock,
    );
    for tool in ["kb", "ehr", "treatment"] {
        gw.register_tool(tool, Arc::new(Echo));
    }
    let sid = gw
        .open_session(
            "care-agent",
            "review dosing guidance",
            Arc::new(load_register(REGISTER).unwrap()),
            Arc::new(PolicySet::parse(POLICIES, "v1").unwrap()),
        )
        .unwrap();
    (gw, sid)
}

fn event(gw: &Gateway, sid: &str, kind: EventKind, text: &str) -> u64 {
    gw.submit_event(sid, SemanticEvent::new(kind, text)).unwrap().record_seq
}

type Edge = (u64, u64, EdgeType);

fn edges_of(gw: &Gateway, sid: &str) -> (BTreeSet<(u64, NodeType)>, BTreeSet<Edge>) {
    let snap = gw.ledger_snapshot();
    let graph = build_apg(&snap.header, &snap.records, sid).unwrap();
    assert!(graph.is_acyclic());
    let seq = |id: &str| graph.node(id).unwrap().record_seq;
    let nodes = graph.nodes.iter().map(|n| (n.record_seq, n.node_type)).collect();
    let edges = graph.edges.iter().map(|e| (seq(&e.from), seq(&e.to), e.edge_type)).collect();
    (nodes, edges)
}

fn seq_of(gw: &Gateway, sid: &str, kind: RecordKind) -> u64 {
    gw.ledger_snapshot().session_records(sid).find(|r| r.kind == kind).unwrap().seq
}

fn observation_of(gw: &Gateway, sid: &str, request_seq: u64) -> Option<u64> {
    gw.ledger_snapshot()
        .session_records(sid)
        .filter(|r| r.kind == RecordKind::Observation)
        .find(|r| r.payload_value()["request_seq"] == request_seq)
        .map(|r| r.seq)
}

#[test]
fn goal_plan_two_steps_two_calls() {
    let (gw, sid) = gateway();
    let open = seq_of(&gw, &sid, RecordKind::SessionOpen);
    let goal = event(&gw, &sid, EventKind::Goal, "review dosing guidance");
    let plan = event(&gw, &sid, EventKind::Plan, "search the knowledge base twice");
    let step1 = event(&gw, &sid, EventKind::PlanStep, "search adult dosing");
    let a = gw.authorize_tool_call(&sid, ToolCallRequest::new("kb", "search")).unwrap();
    let step2 = event(&gw, &sid, EventKind::PlanStep, "search pediatric dosing");
    let b = gw.authorize_tool_call(&sid, ToolCallRequest::new("kb", "search")).unwrap();
    let obs_a = observation_of(&gw, &sid, a.request_seq).unwrap();
    let obs_b = observation_of(&gw, &sid, b.request_seq).unwrap();

    let expected_nodes: BTreeSet<(u64, NodeType)> = [
        (open, NodeType::Prompt),
        (goal, NodeType::Goal),
        (plan, NodeType::Plan),
        (step1, NodeType::Step),
        (step2, NodeType::Step),
        (a.request_seq, NodeType::ToolCall),
        (a.decision_seq, NodeType::Decision),
        (obs_a, NodeType::Observation),
        (b.request_seq, NodeType::ToolCall),
        (b.decision_seq, NodeType::Decision),
        (obs_b, NodeType::Observation),
    ]
    .into();
    let expected_edges: BTreeSet<Edge> = [
        (goal, open, EdgeType::DerivesFrom),
        (plan, goal, EdgeType::DerivesFrom),
        (step1, plan, EdgeType::DerivesFrom),
        (step2, plan, EdgeType::DerivesFrom),
        (a.request_seq, step1, EdgeType::DerivesFrom),
        (a.request_seq, a.decision_seq, EdgeType::AuthorizedBy),
        (a.request_seq, obs_a, EdgeType::Produced),
        (b.request_seq, step2, EdgeType::DerivesFrom),
        (b.request_seq, b.decision_seq, EdgeType::AuthorizedBy),
        (b.request_seq, obs_b, EdgeType::Produced),
    ]
    .into();
    let (nodes, edges) = edges_of(&gw, &sid);
    assert_eq!(nodes, expected_nodes);
    assert_eq!(edges, expected_edges);
}

#[test]
fn denied_call_has_no_observation() {
    let (gw, sid) = gateway();
    let out = gw
        .authorize_tool_call(&sid, ToolCallRequest::new("ehr", "write").with_resource("patient/9"))
        .unwrap();
    let (nodes, edges) = edges_of(&gw, &sid);
    assert!(nodes.contains(&(out.request_seq, NodeType::ToolCall)));
    assert!(edges.contains(&(out.request_seq, out.decision_seq, EdgeType::AuthorizedBy)));
    assert!(observation_of(&gw, &sid, out.request_seq).is_none());
    assert!(!nodes.iter().any(|(_, t)| *t == NodeType::Observation));
    let snap = gw.ledger_snapshot();
    assert_eq!(snap.records[out.decision_seq as usize].payload_value()["verdict"], "deny");
}

/// Approved escalation: the original call, its escalate decision, the ticket,
/// the operator's decision, and the resumed call that finally dispatched.
fn approved_escalation() -> (Gateway, String) {
    let (gw, sid) = gateway();
    event(&gw, &sid, EventKind::Goal, "adjust the treatment plan");
    let out = gw
        .authorize_tool_call(&sid, ToolCallRequest::new("treatment", "change").with_arg("units", 4))
        .unwrap();
    let ticket = out.escalation_id.clone().unwrap();
    gw.decide(&ticket, OperatorVerdict::Approve, "dr-lee", None).unwrap();
    gw.close_session(&sid, "done").unwrap();
    (gw, sid)
}

#[test]
fn approval_links_decision_escalation_and_resumed_call() {
    let (gw, sid) = approved_escalation();
    let snap = gw.ledger_snapshot();
    let recs: Vec<_> = snap.session_records(&sid).collect();
    let requests: Vec<u64> = recs.iter().filter(|r| r.kind == RecordKind::ToolCallRequest).map(|r| r.seq).collect();
    assert_eq!(requests.len(), 2);
    let (original, resumed) = (requests[0], requests[1]);
    let escalate = recs
        .iter()
        .find(|r| r.kind == RecordKind::Decision && r.payload_value()["request_seq"] == original)
        .unwrap()
        .seq;
    let opened = seq_of(&gw, &sid, RecordKind::EscalationOpened);
    let decided = seq_of(&gw, &sid, RecordKind::EscalationDecided);

    let (nodes, edges) = edges_of(&gw, &sid);
    assert!(nodes.contains(&(opened, NodeType::Escalation)));
    assert!(nodes.contains(&(decided, NodeType::Decision)));
    assert!(edges.contains(&(original, escalate, EdgeType::AuthorizedBy)));
    assert!(edges.contains(&(escalate, opened, EdgeType::Triggered)));
    assert!(edges.contains(&(opened, decided, EdgeType::DecidedBy)));
    assert!(edges.contains(&(resumed, opened, EdgeType::DerivesFrom)));
    let obs = observation_of(&gw, &sid, resumed).unwrap();
    assert!(edges.contains(&(resumed, obs, EdgeType::Produced)));
    assert!(observation_of(&gw, &sid, original).is_none());
}

#[test]
fn json_export_matches_golden_file() {
    let (gw, sid) = approved_escalation();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/apg_escalation.json");
    let snap = gw.ledger_snapshot();
    let graph = build_apg(&snap.header, &snap.records, &sid).unwrap();
    let json = export_apg(&graph, ApgFormat::Json);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, format!("{json}\n")).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(json, golden.trim_end());
    // the gateway export is the same bytes
    assert_eq!(gw.apg(&sid, ApgFormat::Json).unwrap(), json);
}
