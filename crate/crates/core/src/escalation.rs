//! Human review queue for suspended high-impact calls.
//!
//! The queue only holds ticket state; the gateway drives resumption and
//! ledgering. Every status change goes through [`EscalationQueue::resolve`],
//! which moves a ticket out of `pending` at most once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::ledger::payload::{EscalationDecidedPayload, EscalationOpenedPayload, OutcomeStatus, ToolCallRequest};
use crate::ledger::{ProvenanceRecord, RecordKind};
use crate::policy::Scalar;

pub const DEFAULT_ESCALATION_TIMEOUT_SECS: u64 = 300;

/// Decision reasons for resolved escalations.
pub const OPERATOR_APPROVED: &str = "operator-approved";
pub const OPERATOR_MODIFIED: &str = "operator-modified";
pub const OPERATOR_DENIED: &str = "operator-denied";
pub const ESCALATION_TIMEOUT: &str = "escalation-timeout";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EscalationError {
    #[error("unknown escalation ticket `{0}`")]
    UnknownTicket(String),
    #[error("escalation `{id}` already resolved as {status}")]
    AlreadyDecided { id: String, status: TicketStatus },
    #[error("invalid modification: {0}")]
    InvalidModification(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TicketStatus {
    Pending,
    Approved,
    Modified,
    Denied,
    Expired,
}

impl TicketStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TicketStatus::Pending => "pending",
            TicketStatus::Approved => "approved",
            TicketStatus::Modified => "modified",
            TicketStatus::Denied => "denied",
            TicketStatus::Expired => "expired",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != TicketStatus::Pending
    }
}

impl fmt::Display for TicketStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TicketStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            TicketStatus::Pending,
            TicketStatus::Approved,
            TicketStatus::Modified,
            TicketStatus::Denied,
            TicketStatus::Expired,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| format!("unknown ticket status `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorVerdict {
    Approve,
    Modify,
    Deny,
}

impl OperatorVerdict {
    pub fn status(self) -> TicketStatus {
        match self {
            OperatorVerdict::Approve => TicketStatus::Approved,
            OperatorVerdict::Modify => TicketStatus::Modified,
            OperatorVerdict::Deny => TicketStatus::Denied,
        }
    }
}

impl FromStr for OperatorVerdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(OperatorVerdict::Approve),
            "modify" => Ok(OperatorVerdict::Modify),
            "deny" => Ok(OperatorVerdict::Deny),
            other => Err(format!("unknown operator verdict `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationTicket {
    pub escalation_id: String,
    pub session_id: String,
    pub request: ToolCallRequest,
    /// Ledger seq of the suspended tool-call-request.
    pub request_seq: u64,
    pub rationale: String,
    pub projected_impact: String,
    pub risk_ids: Vec<String>,
    pub status: TicketStatus,
    pub requested_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_args: Option<BTreeMap<String, Scalar>>,
    /// Final status of the suspended call once resolved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<OutcomeStatus>,
}

/// Fields of a new ticket.
#[derive(Debug, Clone)]
pub struct NewTicket {
    pub session_id: String,
    pub request: ToolCallRequest,
    pub request_seq: u64,
    pub rationale: String,
    pub projected_impact: String,
    pub risk_ids: Vec<String>,
    pub requested_at: Millis,
}

/// Operator (or timeout) resolution of a ticket.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub status: TicketStatus,
    pub operator_id: Option<String>,
    pub modified_args: Option<BTreeMap<String, Scalar>>,
    pub decided_at: Millis,
}

/// Check that a modification only changes values of existing arguments.
pub fn validate_modification(
    original: &ToolCallRequest,
    modified_args: Option<&BTreeMap<String, Scalar>>,
) -> Result<(), EscalationError> {
    let Some(args) = modified_args else {
        return Err(EscalationError::InvalidModification("modify requires modified_args".into()));
    };
    if let Some(extra) = args.keys().find(|k| !original.args.contains_key(*k)) {
        return Err(EscalationError::InvalidModification(format!(
            "argument `{extra}` is not present in the original request"
        )));
    }
    Ok(())
}

#[derive(Default)]
struct QueueState {
    next_id: u64,
    tickets: BTreeMap<String, EscalationTicket>,
}

#[derive(Default)]
pub struct EscalationQueue {
    state: Mutex<QueueState>,
}

impl EscalationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&self, t: NewTicket) -> EscalationTicket {
        let mut st = self.state.lock();
        st.next_id += 1;
        let ticket = EscalationTicket {
            escalation_id: format!("esc-{:06}", st.next_id),
            session_id: t.session_id,
            request: t.request,
            request_seq: t.request_seq,
            rationale: t.rationale,
            projected_impact: t.projected_impact,
            risk_ids: t.risk_ids,
            status: TicketStatus::Pending,
            requested_at: t.requested_at,
            decided_at: None,
            operator_id: None,
            modified_args: None,
            resolution: None,
        };
        st.tickets.insert(ticket.escalation_id.clone(), ticket.clone());
        ticket
    }

    pub fn get(&self, id: &str) -> Option<EscalationTicket> {
        self.state.lock().tickets.get(id).cloned()
    }

    pub fn list(&self, status: Option<TicketStatus>) -> Vec<EscalationTicket> {
        self.state
            .lock()
            .tickets
            .values()
            .filter(|t| status.is_none_or(|s| t.status == s))
            .cloned()
            .collect()
    }

    /// Atomically move a pending ticket to a terminal status.
    pub fn resolve(&self, id: &str, r: Resolution) -> Result<EscalationTicket, EscalationError> {
        let mut st = self.state.lock();
        let ticket = st
            .tickets
            .get_mut(id)
            .ok_or_else(|| EscalationError::UnknownTicket(id.to_string()))?;
        if ticket.status.is_terminal() {
            return Err(EscalationError::AlreadyDecided {
                id: id.to_string(),
                status: ticket.status,
            });
        }
        debug_assert!(r.status.is_terminal());
        ticket.status = r.status;
        ticket.operator_id = r.operator_id;
        ticket.modified_args = r.modified_args;
        ticket.decided_at = Some(r.decided_at);
        Ok(ticket.clone())
    }

    /// Record how the suspended call finally completed.
    pub fn set_resolution(&self, id: &str, outcome: OutcomeStatus) {
        if let Some(t) = self.state.lock().tickets.get_mut(id) {
            t.resolution = Some(outcome);
        }
    }

    /// Pending tickets strictly older than `timeout_secs` at `now`.
    pub fn overdue(&self, now: Millis, timeout_secs: u64) -> Vec<EscalationTicket> {
        let limit = (timeout_secs as i64) * 1000;
        self.state
            .lock()
            .tickets
            .values()
            .filter(|t| t.status == TicketStatus::Pending && now - t.requested_at > limit)
            .cloned()
            .collect()
    }

    pub fn pending_for_session(&self, session_id: &str) -> Vec<EscalationTicket> {
        self.state
            .lock()
            .tickets
            .values()
            .filter(|t| t.status == TicketStatus::Pending && t.session_id == session_id)
            .cloned()
            .collect()
    }
}

/// Escalation counts and operator response times, read back from a ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationStats {
    pub opened: u64,
    /// Opened and not yet decided in the ledger.
    pub pending: u64,
    /// Decided tickets by terminal status.
    pub by_status: BTreeMap<String, u64>,
    /// Open-to-decision time of operator verdicts (timeouts excluded).
    pub operator_latency: Option<LatencySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub n: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: u64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        Some(Self {
            n: n as u64,
            mean_ms: sorted.iter().sum::<u64>() as f64 / n as f64,
            median_ms,
            max_ms: sorted[n - 1],
        })
    }
}

pub fn escalation_stats(records: &[ProvenanceRecord]) -> EscalationStats {
    let mut opened_at: BTreeMap<String, Option<Millis>> = BTreeMap::new();
    let mut by_status: BTreeMap<String, u64> = BTreeMap::new();
    let mut latencies = Vec::new();
    let mut decided = 0;
    for r in records {
        match r.kind {
            RecordKind::EscalationOpened => {
                if let Some(p) = r.payload_as::<EscalationOpenedPayload>() {
                    opened_at.insert(p.escalation_id, r.ts_ms());
                }
            }
            RecordKind::EscalationDecided => {
                let Some(p) = r.payload_as::<EscalationDecidedPayload>() else {
                    continue;
                };
                decided += 1;
                *by_status.entry(p.status.as_str().to_string()).or_default() += 1;
                if p.status != TicketStatus::Expired {
                    if let Some(Some(at)) = opened_at.get(&p.escalation_id) {
                        latencies.push(p.decided_at.saturating_sub(*at).max(0) as u64);
                    }
                }
            }
            _ => {}
        }
    }
    let opened = opened_at.len() as u64;
    EscalationStats {
        opened,
        pending: opened.saturating_sub(decided),
        by_status,
        operator_latency: LatencySummary::from_samples(&latencies),
    }
}
