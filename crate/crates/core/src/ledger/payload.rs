//! Payload schemas of the record kinds the gateway writes.
//!
//! Cross-record references are by ledger `seq`; they are what the provenance
//! graph is rebuilt from.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::escalation::TicketStatus;
use crate::policy::{Effect, Scalar};
use crate::register::Phase;
use crate::telemetry::EventKind;
use crate::triage::{ContainmentLevel, FallbackMode};

/// A proposed tool invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCallRequest {
    #[serde(default)]
    pub session_id: String,
    pub tool: String,
    pub action: String,
    #[serde(default)]
    pub args: BTreeMap<String, Scalar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default)]
    pub intent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Evaluation labels; only the harness sets these.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub labels: BTreeSet<String>,
}

impl ToolCallRequest {
    pub fn new(tool: impl Into<String>, action: impl Into<String>) -> Self {
        Self {
            session_id: String::new(),
            tool: tool.into(),
            action: action.into(),
            args: BTreeMap::new(),
            resource: None,
            intent: String::new(),
            confidence: None,
            labels: BTreeSet::new(),
        }
    }

    pub fn with_resource(mut self, resource: impl Into<String>) -> Self {
        self.resource = Some(resource.into());
        self
    }

    pub fn with_arg(mut self, name: &str, value: impl Into<Scalar>) -> Self {
        self.args.insert(name.to_string(), value.into());
        self
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> Self {
        self.intent = intent.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Allowed,
    Denied,
    Escalated,
    Contained,
}

impl OutcomeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeStatus::Allowed => "allowed",
            OutcomeStatus::Denied => "denied",
            OutcomeStatus::Escalated => "escalated",
            OutcomeStatus::Contained => "contained",
        }
    }
}

impl std::fmt::Display for OutcomeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutcomeStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allowed" => Ok(OutcomeStatus::Allowed),
            "denied" => Ok(OutcomeStatus::Denied),
            "escalated" => Ok(OutcomeStatus::Escalated),
            "contained" => Ok(OutcomeStatus::Contained),
            other => Err(format!("unknown outcome `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub allowed: u64,
    pub denied: u64,
    pub escalated: u64,
    pub contained: u64,
}

impl StatusCounts {
    pub fn bump(&mut self, status: OutcomeStatus) {
        match status {
            OutcomeStatus::Allowed => self.allowed += 1,
            OutcomeStatus::Denied => self.denied += 1,
            OutcomeStatus::Escalated => self.escalated += 1,
            OutcomeStatus::Contained => self.contained += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOpenPayload {
    pub agent_id: String,
    pub declared_objective: String,
    pub policy_digest: String,
    pub policy_version: String,
    pub register_id: String,
    pub register_version: u64,
}

/// Goal, plan, plan-step, reflection and agent-reported observation events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticPayload {
    pub event_id: String,
    pub phase: Phase,
    pub kind: EventKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_score: Option<f64>,
    /// For observations: the allowed request whose result this reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRequestPayload {
    pub request: ToolCallRequest,
    /// Set when this request resumes a suspended call after an operator verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPayload {
    pub request_seq: u64,
    pub status: OutcomeStatus,
    pub verdict: Effect,
    pub matched_policies: Vec<String>,
    pub reason: String,
    pub policy_digest: String,
    pub decided_at: Millis,
    /// Gate that produced the decision.
    pub gate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationOpenedPayload {
    pub escalation_id: String,
    pub decision_seq: u64,
    pub request_seq: u64,
    pub rationale: String,
    pub projected_impact: String,
    pub risk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationDecidedPayload {
    pub escalation_id: String,
    pub status: TicketStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_args: Option<BTreeMap<String, Scalar>>,
    pub decided_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentPayload {
    pub level: ContainmentLevel,
    pub previous: ContainmentLevel,
    pub cause: String,
    /// Record that caused the containment (decision or semantic event).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause_seq: Option<u64>,
    /// Guardian or drift alert record, when one raised the level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_seq: Option<u64>,
    pub halt_latency_ms: u64,
    pub requested_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardianAlertPayload {
    pub rule_id: String,
    pub kind: String,
    pub evidence: Vec<u64>,
    pub response_level: ContainmentLevel,
    pub trigger_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAlertPayload {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub trigger_count: u32,
    pub response_level: ContainmentLevel,
    pub trigger_seq: u64,
}

/// Result of a tool the gateway dispatched itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolObservationPayload {
    pub request_seq: u64,
    pub tool: String,
    pub action: String,
    pub result: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackPayload {
    pub mode: FallbackMode,
    pub previous: FallbackMode,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinePayload {
    pub target: String,
    /// `quarantine` or `release`.
    pub op: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionClosePayload {
    pub reason: String,
    pub counts: StatusCounts,
}
