//! Action provenance graph, rebuilt from one session's ledger records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{verify_chain, LedgerHeader, ProvenanceRecord, RecordKind};
use crate::canonical::CanonicalJson;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApgError {
    #[error("ledger failed verification at seq {0}")]
    UnverifiedLedger(u64),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unsupported export format `{0}` (expected dot or json)")]
    UnsupportedFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    Prompt,
    Goal,
    Plan,
    Step,
    ToolCall,
    Decision,
    Escalation,
    Containment,
    Observation,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeType {
    DerivesFrom,
    AuthorizedBy,
    DecidedBy,
    Triggered,
    Produced,
}

impl EdgeType {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::DerivesFrom => "derives-from",
            EdgeType::AuthorizedBy => "authorized-by",
            EdgeType::DecidedBy => "decided-by",
            EdgeType::Triggered => "triggered",
            EdgeType::Produced => "produced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApgNode {
    pub node_id: String,
    pub node_type: NodeType,
    pub record_seq: u64,
    pub label: String,
    /// Decision verdict (Decision nodes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    /// Outcome status for ToolCall and Decision nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ApgEdge {
    pub from: String,
    pub to: String,
    pub edge_type: EdgeType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionProvenanceGraph {
    pub session_id: String,
    pub nodes: Vec<ApgNode>,
    pub edges: Vec<ApgEdge>,
}

impl ActionProvenanceGraph {
    pub fn node(&self, node_id: &str) -> Option<&ApgNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn nodes_of(&self, t: NodeType) -> impl Iterator<Item = &ApgNode> {
        self.nodes.iter().filter(move |n| n.node_type == t)
    }

    pub fn outgoing<'a>(&'a self, node_id: &'a str, t: EdgeType) -> impl Iterator<Item = &'a ApgEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == node_id && e.edge_type == t)
    }

    pub fn is_acyclic(&self) -> bool {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.node_id.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.entry(e.to.as_str()).or_default() += 1;
        }
        let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for e in self.edges.iter().filter(|e| e.from == n) {
                let d = indegree.get_mut(e.to.as_str()).expect("edge target is a node");
                *d -= 1;
                if *d == 0 {
                    ready.push(e.to.as_str());
                }
            }
        }
        seen == indegree.len()
    }
}

fn node_id(seq: u64) -> String {
    format!("n{seq}")
}

fn field_u64(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

fn field_str<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

fn short(text: &str) -> String {
    const MAX: usize = 48;
    if text.chars().count() <= MAX {
        text.to_string()
    } else {
        let mut s: String = text.chars().take(MAX - 3).collect();
        s.push_str("...");
        s
    }
}

/// Rebuild the graph of `session_id` from a verified ledger.
pub fn build_apg(
    header: &LedgerHeader,
    records: &[ProvenanceRecord],
    session_id: &str,
) -> Result<ActionProvenanceGraph, ApgError> {
    let report = verify_chain(header, records);
    if !report.valid {
        return Err(ApgError::UnverifiedLedger(report.first_bad_seq.unwrap_or_default()));
    }
    build_apg_unchecked(records, session_id)
}

/// Graph construction without re-verifying the chain.
pub fn build_apg_unchecked(records: &[ProvenanceRecord], session_id: &str) -> Result<ActionProvenanceGraph, ApgError> {
    let session: Vec<(&ProvenanceRecord, Value)> = records
        .iter()
        .filter(|r| r.session_id == session_id)
        .map(|r| (r, r.payload_value()))
        .collect();
    let open = session
        .iter()
        .find(|(r, _)| r.kind == RecordKind::SessionOpen)
        .ok_or_else(|| ApgError::UnknownSession(session_id.to_string()))?;

    let mut nodes: BTreeMap<u64, ApgNode> = BTreeMap::new();
    let mut edges: BTreeSet<(u64, u64, EdgeType)> = BTreeSet::new();

    // decisions and escalations, indexed by the record they refer to
    let mut decision_of_request: BTreeMap<u64, u64> = BTreeMap::new();
    let mut escalation_by_id: BTreeMap<String, u64> = BTreeMap::new();
    let mut status_of_request: BTreeMap<u64, String> = BTreeMap::new();
    for (r, p) in &session {
        match r.kind {
            RecordKind::Decision => {
                if let Some(req) = field_u64(p, "request_seq") {
                    decision_of_request.entry(req).or_insert(r.seq);
                    if let Some(s) = field_str(p, "status") {
                        status_of_request.insert(req, s.to_string());
                    }
                }
            }
            RecordKind::EscalationOpened => {
                if let Some(id) = field_str(p, "escalation_id") {
                    escalation_by_id.insert(id.to_string(), r.seq);
                }
            }
            _ => {}
        }
    }

    let prompt_seq = open.0.seq;
    let (mut last_goal, mut last_plan, mut last_step) = (None::<u64>, None::<u64>, None::<u64>);
    let mut last_observation = None::<u64>;
    let mut uses_prompt = false;

    for (r, p) in &session {
        let seq = r.seq;
        let mut add = |t: NodeType, label: String, verdict: Option<String>, status: Option<String>| {
            nodes.insert(
                seq,
                ApgNode {
                    node_id: node_id(seq),
                    node_type: t,
                    record_seq: seq,
                    label,
                    verdict,
                    status,
                },
            );
        };
        match r.kind {
            RecordKind::Goal => {
                add(NodeType::Goal, short(field_str(p, "text").unwrap_or("")), None, None);
                edges.insert((seq, prompt_seq, EdgeType::DerivesFrom));
                uses_prompt = true;
                last_goal = Some(seq);
            }
            RecordKind::Plan => {
                add(NodeType::Plan, short(field_str(p, "text").unwrap_or("")), None, None);
                let parent = last_goal.unwrap_or(prompt_seq);
                uses_prompt |= parent == prompt_seq;
                edges.insert((seq, parent, EdgeType::DerivesFrom));
                last_plan = Some(seq);
            }
            RecordKind::PlanStep => {
                add(NodeType::Step, short(field_str(p, "text").unwrap_or("")), None, None);
                let parent = last_plan.or(last_goal).unwrap_or(prompt_seq);
                uses_prompt |= parent == prompt_seq;
                edges.insert((seq, parent, EdgeType::DerivesFrom));
                last_step = Some(seq);
            }
            RecordKind::ToolCallRequest => {
                let req = p.get("request").cloned().unwrap_or(Value::Null);
                let mut label = format!(
                    "{}.{}",
                    field_str(&req, "tool").unwrap_or("?"),
                    field_str(&req, "action").unwrap_or("?")
                );
                if let Some(res) = field_str(&req, "resource") {
                    let _ = write!(label, " {res}");
                }
                add(NodeType::ToolCall, short(&label), None, status_of_request.get(&seq).cloned());
                let resumed = field_str(p, "resumes").and_then(|id| escalation_by_id.get(id).copied());
                let parent = resumed
                    .or(last_step)
                    .or(last_plan)
                    .or(last_goal)
                    .unwrap_or(prompt_seq);
                uses_prompt |= parent == prompt_seq;
                edges.insert((seq, parent, EdgeType::DerivesFrom));
                if let Some(d) = decision_of_request.get(&seq) {
                    edges.insert((seq, *d, EdgeType::AuthorizedBy));
                }
            }
            RecordKind::Decision => {
                let verdict = field_str(p, "verdict").unwrap_or("?").to_string();
                let reason = field_str(p, "reason").unwrap_or("");
                add(
                    NodeType::Decision,
                    short(&format!("{verdict}: {reason}")),
                    Some(verdict),
                    field_str(p, "status").map(str::to_string),
                );
            }
            RecordKind::EscalationOpened => {
                add(
                    NodeType::Escalation,
                    field_str(p, "escalation_id").unwrap_or("?").to_string(),
                    None,
                    None,
                );
                if let Some(d) = field_u64(p, "decision_seq") {
                    edges.insert((d, seq, EdgeType::Triggered));
                }
            }
            RecordKind::EscalationDecided => {
                let status = field_str(p, "status").unwrap_or("?");
                let verdict = match status {
                    "approved" | "modified" => "allow",
                    _ => "deny",
                };
                add(
                    NodeType::Decision,
                    format!("operator {status}"),
                    Some(verdict.to_string()),
                    Some(status.to_string()),
                );
                if let Some(esc) = field_str(p, "escalation_id").and_then(|id| escalation_by_id.get(id)) {
                    edges.insert((*esc, seq, EdgeType::DecidedBy));
                }
            }
            RecordKind::Containment => {
                let level = field_str(p, "level").unwrap_or("?");
                add(NodeType::Containment, format!("contain {level}"), None, None);
                if let Some(cause) = field_u64(p, "cause_seq") {
                    edges.insert((cause, seq, EdgeType::Triggered));
                }
            }
            RecordKind::Observation => {
                let text = field_str(p, "text")
                    .map(str::to_string)
                    .or_else(|| p.get("result").map(|v| CanonicalJson::from_value(v).into_string()))
                    .unwrap_or_default();
                add(NodeType::Observation, short(&text), None, None);
                if let Some(req) = field_u64(p, "request_seq") {
                    edges.insert((req, seq, EdgeType::Produced));
                }
                last_observation = Some(seq);
            }
            RecordKind::SessionClose => {
                if let Some(obs) = last_observation {
                    add(NodeType::Outcome, short(field_str(p, "reason").unwrap_or("closed")), None, None);
                    edges.insert((seq, obs, EdgeType::DerivesFrom));
                }
            }
            _ => {}
        }
    }

    if !nodes.is_empty() || uses_prompt {
        let objective = field_str(&open.1, "declared_objective").unwrap_or("");
        nodes.insert(
            prompt_seq,
            ApgNode {
                node_id: node_id(prompt_seq),
                node_type: NodeType::Prompt,
                record_seq: prompt_seq,
                label: short(objective),
                verdict: None,
                status: None,
            },
        );
    }

    // drop edges whose endpoints are not nodes of this session
    let edges = edges
        .into_iter()
        .filter(|(a, b, _)| nodes.contains_key(a) && nodes.contains_key(b))
        .map(|(a, b, t)| ApgEdge {
            from: node_id(a),
            to: node_id(b),
            edge_type: t,
        })
        .collect();

    Ok(ActionProvenanceGraph {
        session_id: session_id.to_string(),
        nodes: nodes.into_values().collect(),
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApgFormat {
    Dot,
    Json,
}

impl FromStr for ApgFormat {
    type Err = ApgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(ApgFormat::Dot),
            "json" => Ok(ApgFormat::Json),
            other => Err(ApgError::UnsupportedFormat(other.to_string())),
        }
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

pub fn export_apg(graph: &ActionProvenanceGraph, format: ApgFormat) -> String {
    match format {
        ApgFormat::Json => CanonicalJson::from_serialize(graph)
            .expect("graph is serializable")
            .into_string(),
        ApgFormat::Dot => {
            let mut out = String::from("digraph apg {\n");
            for n in &graph.nodes {
                let _ = writeln!(
                    out,
                    "  {} [label=\"{:?}\\n{}\", type=\"{:?}\", seq={}];",
                    n.node_id,
                    n.node_type,
                    dot_escape(&n.label),
                    n.node_type,
                    n.record_seq
                );
            }
            for e in &graph.edges {
                let _ = writeln!(out, "  {} -> {} [label=\"{}\"];", e.from, e.to, e.edge_type.as_str());
            }
            out.push_str("}\n");
            out
        }
    }
}
