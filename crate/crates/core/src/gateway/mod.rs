//! The runtime enforcement point.
//!
//! Each session owns a lane (a mutex over its mutable state). Tool calls,
//! events and operator decisions for a session serialize on that lane.
//! Containment bypasses it: the target level is published through an atomic
//! first, so a call already inside the pipeline observes it at its final gate
//! and halts before dispatch. Lock order is always lane, then ledger.

mod config;

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{default_read_only_actions, ConfigError, DriftConfig, GatewayConfig, CONFIG_ENV};

use crate::clock::{Clock, Millis};
use crate::escalation::{
    validate_modification, EscalationError, EscalationQueue, EscalationTicket, NewTicket, OperatorVerdict,
    Resolution, TicketStatus, OPERATOR_APPROVED, OPERATOR_DENIED, OPERATOR_MODIFIED,
};
use crate::ledger::payload::*;
use crate::ledger::{
    build_apg, export_apg, ApgError, ApgFormat, Ledger, LedgerError, LedgerSnapshot, ProvenanceRecord, RecordKind,
    VerificationReport,
};
use crate::policy::{lint_policies, ActionContext, DiagSeverity, Decision, Diagnostic, Effect, PolicySet, Scalar};
use crate::register::{CapabilityProfile, Phase, RiskRegister};
use crate::telemetry::{assess_drift, DriftState, EventKind, SemanticEvent, TelemetryError};
use crate::triage::{
    escalate_containment, evaluate_guardians, measure_interruptibility, ContainmentLevel, FallbackMode,
    QuarantineEntry, QuarantineRegistry, SLAReport, QUARANTINED,
};

/// Session id under which gateway-wide records (quarantine) are written.
pub const GATEWAY_SESSION: &str = "gateway";

pub const OUT_OF_SCOPE: &str = "out-of-scope";
pub const RATE_LIMITED: &str = "rate-limited";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("containment ladder violation: {from} -> {to}")]
    LadderViolation {
        from: ContainmentLevel,
        to: ContainmentLevel,
    },
    #[error("policy lint failed: {}", .0.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "))]
    LintFailure(Vec<Diagnostic>),
    #[error("unknown {kind} `{name}`")]
    UnknownReference { kind: &'static str, name: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Escalation(#[from] EscalationError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Apg(#[from] ApgError),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

/// A tool backend the gateway dispatches allowed calls to.
pub trait ToolAdapter: Send + Sync {
    fn invoke(&self, request: &ToolCallRequest) -> std::result::Result<serde_json::Value, String>;
}

/// What happened to one proposed tool call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuthorizationOutcome {
    pub status: OutcomeStatus,
    pub decision: Decision,
    pub gate: String,
    pub request_seq: u64,
    pub decision_seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub escalation_id: Option<String>,
    /// Latency of the containment that halted the call, when contained by it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halt_latency_ms: Option<u64>,
    /// Adapter result when the call was dispatched.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentRecord {
    pub session_id: String,
    pub level: ContainmentLevel,
    pub previous: ContainmentLevel,
    pub cause: String,
    pub halt_latency_ms: u64,
    pub record_seq: u64,
    pub requested_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventAck {
    pub event_id: String,
    pub record_seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_score: Option<f64>,
    pub drift_alert: bool,
    pub level: ContainmentLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscalationDecision {
    pub ticket: EscalationTicket,
    pub decided_seq: u64,
    /// Final outcome of the suspended call.
    pub outcome: AuthorizationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub agent_id: String,
    pub declared_objective: String,
    pub level: ContainmentLevel,
    pub mode: FallbackMode,
    pub throttle_factor: f64,
    pub counts: StatusCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_drift_score: Option<f64>,
    pub policy_digest: String,
    pub register_id: String,
    pub opened_at: Millis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_at: Option<Millis>,
    pub pending_escalations: usize,
}

/// Parameters for opening a session against catalog entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenSessionRequest {
    pub agent_id: String,
    pub declared_objective: String,
    pub register_ref: String,
    pub policy_ref: String,
}

struct SessionState {
    mode: FallbackMode,
    throttle_factor: f64,
    drift: DriftState,
    /// Admission times per capability id, for sandbox rate limits.
    admissions: BTreeMap<String, VecDeque<Millis>>,
    /// Request times per tool, for `rate()` in policy conditions.
    requests: BTreeMap<String, VecDeque<Millis>>,
    counts: StatusCounts,
    closed_at: Option<Millis>,
    /// Request awaiting an observation event.
    unobserved_request: Option<u64>,
    /// Recent records of this session, for guardian evaluation.
    window: VecDeque<(Millis, ProvenanceRecord)>,
    /// Highest evidence seq already alerted per guardian rule.
    alerted: BTreeMap<String, u64>,
    last_halt_latency: u64,
}

struct Session {
    id: String,
    agent_id: String,
    declared_objective: String,
    register: Arc<RiskRegister>,
    policy: Arc<PolicySet>,
    opened_at: Millis,
    level: AtomicU8,
    closed: AtomicBool,
    lane: Mutex<SessionState>,
}

impl Session {
    fn level(&self) -> ContainmentLevel {
        ContainmentLevel::from_u8(self.level.load(Ordering::SeqCst))
    }

    /// Raise to at least `level`; returns the previous level.
    fn raise(&self, level: ContainmentLevel) -> ContainmentLevel {
        ContainmentLevel::from_u8(self.level.fetch_max(level.to_u8(), Ordering::SeqCst))
    }
}

/// Outcome of the non-policy gates.
struct Blocked {
    status: OutcomeStatus,
    verdict: Effect,
    matched: &'static str,
    reason: String,
    gate: &'static str,
}

fn blocked_decision(session: &Session, b: Blocked, now: Millis) -> (OutcomeStatus, Decision, &'static str) {
    (
        b.status,
        Decision {
            verdict: b.verdict,
            matched_policies: vec![b.matched.to_string()],
            reason: b.reason,
            policy_digest: session.policy.source_digest.clone(),
            decided_at: now,
        },
        b.gate,
    )
}

pub struct Gateway {
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    ledger: Mutex<Ledger>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    next_session: AtomicU64,
    next_event: AtomicU64,
    escalations: EscalationQueue,
    quarantine: RwLock<QuarantineRegistry>,
    adapters: RwLock<BTreeMap<String, Arc<dyn ToolAdapter>>>,
    registers: RwLock<BTreeMap<String, Arc<RiskRegister>>>,
    policies: RwLock<BTreeMap<String, Arc<PolicySet>>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, ledger: Ledger, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            clock,
            ledger: Mutex::new(ledger),
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(0),
            next_event: AtomicU64::new(0),
            escalations: EscalationQueue::new(),
            quarantine: RwLock::new(QuarantineRegistry::new()),
            adapters: RwLock::new(BTreeMap::new()),
            registers: RwLock::new(BTreeMap::new()),
            policies: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn register_tool(&self, tool: &str, adapter: Arc<dyn ToolAdapter>) {
        self.adapters.write().insert(tool.to_string(), adapter);
    }

    pub fn add_register(&self, name: &str, register: RiskRegister) {
        self.registers.write().insert(name.to_string(), Arc::new(register));
    }

    pub fn add_policy(&self, name: &str, policy: PolicySet) {
        self.policies.write().insert(name.to_string(), Arc::new(policy));
    }

    pub fn register_names(&self) -> Vec<String> {
        self.registers.read().keys().cloned().collect()
    }

    pub fn policy_names(&self) -> Vec<String> {
        self.policies.read().keys().cloned().collect()
    }

    pub fn open_session_by_ref(&self, req: &OpenSessionRequest) -> Result<String> {
        let register = self.registers.read().get(&req.register_ref).cloned().ok_or_else(|| {
            GatewayError::UnknownReference {
                kind: "register",
                name: req.register_ref.clone(),
            }
        })?;
        let policy = self.policies.read().get(&req.policy_ref).cloned().ok_or_else(|| {
            GatewayError::UnknownReference {
                kind: "policy",
                name: req.policy_ref.clone(),
            }
        })?;
        self.open_session(&req.agent_id, &req.declared_objective, register, policy)
    }

    /// Open a session. Policies must lint clean (warnings allowed) against the register.
    pub fn open_session(
        &self,
        agent_id: &str,
        declared_objective: &str,
        register: Arc<RiskRegister>,
        policy: Arc<PolicySet>,
    ) -> Result<String> {
        let errors: Vec<Diagnostic> = lint_policies(&policy, &register)
            .into_iter()
            .filter(|d| d.severity == DiagSeverity::Error)
            .collect();
        if !errors.is_empty() {
            return Err(GatewayError::LintFailure(errors));
        }
        let id = format!("s{:06}", self.next_session.fetch_add(1, Ordering::SeqCst) + 1);
        let now = self.clock.now_ms();
        let session = Arc::new(Session {
            id: id.clone(),
            agent_id: agent_id.to_string(),
            declared_objective: declared_objective.to_string(),
            register: register.clone(),
            policy: policy.clone(),
            opened_at: now,
            level: AtomicU8::new(ContainmentLevel::Monitor.to_u8()),
            closed: AtomicBool::new(false),
            lane: Mutex::new(SessionState {
                mode: FallbackMode::Normal,
                throttle_factor: 1.0,
                drift: DriftState::with_params(
                    declared_objective,
                    self.config.drift.threshold,
                    self.config.drift.trigger_count,
                ),
                admissions: BTreeMap::new(),
                requests: BTreeMap::new(),
                counts: StatusCounts::default(),
                closed_at: None,
                unobserved_request: None,
                window: VecDeque::new(),
                alerted: BTreeMap::new(),
                last_halt_latency: 0,
            }),
        });
        let mut st = session.lane.lock();
        self.sessions.write().insert(id.clone(), session.clone());
        self.append(
            &mut st,
            &id,
            RecordKind::SessionOpen,
            &SessionOpenPayload {
                agent_id: agent_id.to_string(),
                declared_objective: declared_objective.to_string(),
                policy_digest: policy.source_digest.clone(),
                policy_version: policy.version_label.clone(),
                register_id: register.register_id.clone(),
                register_version: register.version,
            },
        )?;
        Ok(id)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().keys().cloned().collect()
    }

    fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownSession(id.to_string()))
    }

    /// Current containment level, read without taking the session lane.
    pub fn session_level(&self, id: &str) -> Result<ContainmentLevel> {
        Ok(self.session(id)?.level())
    }

    fn append<T: Serialize>(
        &self,
        st: &mut SessionState,
        session_id: &str,
        kind: RecordKind,
        payload: &T,
    ) -> Result<ProvenanceRecord> {
        let record = self.ledger.lock().append_serialize(kind, session_id, payload)?;
        let now = record.ts_ms().unwrap_or_else(|| self.clock.now_ms());
        st.window.push_back((now, record.clone()));
        let horizon = now - self.config.guardian_window_ms();
        while st.window.front().is_some_and(|(t, _)| *t < horizon) {
            st.window.pop_front();
        }
        Ok(record)
    }

    fn append_global<T: Serialize>(&self, kind: RecordKind, payload: &T) -> Result<ProvenanceRecord> {
        Ok(self.ledger.lock().append_serialize(kind, GATEWAY_SESSION, payload)?)
    }

    // ---- tool calls ----

    pub fn authorize_tool_call(&self, session_id: &str, mut request: ToolCallRequest) -> Result<AuthorizationOutcome> {
        let session = self.session(session_id)?;
        let mut st = session.lane.lock();
        if st.closed_at.is_some() {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        if request.tool.is_empty() || request.action.is_empty() {
            return Err(GatewayError::InvalidRequest("tool and action are required".into()));
        }
        if request.confidence.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
            return Err(GatewayError::InvalidRequest("confidence outside [0, 1]".into()));
        }
        request.session_id = session_id.to_string();
        let now = self.clock.now_ms();
        let request_seq = self.record_request(&session, &mut st, &request, None, now)?;

        let (status, decision, gate) = match self.sandbox_gates(&session, &mut st, &request, now) {
            Err(b) => blocked_decision(&session, b, now),
            Ok(cap) => {
                let decision = self.policy_decision(&session, &st, &request, now);
                let (status, decision) = self.apply_verdict(&session, &st, decision, &cap);
                (status, decision, "policy")
            }
        };
        self.finish(&session, &mut st, request, request_seq, status, decision, gate, now)
    }

    fn record_request(
        &self,
        session: &Session,
        st: &mut SessionState,
        request: &ToolCallRequest,
        resumes: Option<String>,
        now: Millis,
    ) -> Result<u64> {
        let seq = self
            .append(
                st,
                &session.id,
                RecordKind::ToolCallRequest,
                &ToolCallRequestPayload {
                    request: request.clone(),
                    resumes,
                },
            )?
            .seq;
        st.requests.entry(request.tool.clone()).or_default().push_back(now);
        Ok(seq)
    }

    /// Containment, fallback and sandbox gates. On success returns the
    /// capability the call was admitted under.
    fn sandbox_gates(
        &self,
        session: &Session,
        st: &mut SessionState,
        request: &ToolCallRequest,
        now: Millis,
    ) -> std::result::Result<CapabilityProfile, Blocked> {
        let level = session.level();
        if level.halts() {
            return Err(Blocked {
                status: OutcomeStatus::Contained,
                verdict: Effect::Contain(level),
                matched: "@containment",
                reason: format!("session contained at {level}"),
                gate: "containment",
            });
        }

        let deny = |reason: String, matched, gate| Blocked {
            status: OutcomeStatus::Denied,
            verdict: Effect::Deny,
            matched,
            reason,
            gate,
        };
        let candidates: Vec<&CapabilityProfile> = session
            .register
            .capabilities
            .iter()
            .filter(|c| c.permits(&request.tool, &request.action))
            .collect();
        match st.mode {
            FallbackMode::Normal => {}
            FallbackMode::ReadOnly => {
                if !self.config.read_only_actions.contains(&request.action) {
                    return Err(deny("fallback read-only".into(), "@fallback", "fallback"));
                }
            }
            FallbackMode::SearchOnly => {
                if !candidates.iter().any(|c| c.phase == Phase::Observe) {
                    return Err(deny("fallback search-only".into(), "@fallback", "fallback"));
                }
            }
        }

        if self.quarantine.read().blocks(&request.tool, request.resource.as_deref()) {
            return Err(deny(QUARANTINED.into(), "@quarantine", "sandbox"));
        }
        let Some(cap) = candidates
            .into_iter()
            .find(|c| c.covers_resource(request.resource.as_deref()))
        else {
            return Err(deny(OUT_OF_SCOPE.into(), "@sandbox", "sandbox"));
        };
        if let Some(limit) = cap.rate_limit {
            let window = st.admissions.entry(cap.capability_id.clone()).or_default();
            let horizon = now - limit.window_seconds as i64 * 1000;
            while window.front().is_some_and(|t| *t <= horizon) {
                window.pop_front();
            }
            let effective = ((limit.count as f64 * st.throttle_factor).floor() as usize).max(1);
            if window.len() >= effective {
                return Err(deny(RATE_LIMITED.into(), "@sandbox", "sandbox"));
            }
            window.push_back(now);
        }
        Ok(cap.clone())
    }

    fn action_context(&self, session: &Session, st: &SessionState, request: &ToolCallRequest, now: Millis) -> ActionContext {
        let mut ctx = ActionContext::new(request.tool.clone(), request.action.clone());
        ctx.session_id = session.id.clone();
        ctx.args = request.args.clone();
        ctx.resource = request.resource.clone();
        let attrs = &mut ctx.session_attrs;
        attrs.insert("agent_id".into(), Scalar::Str(session.agent_id.clone()));
        attrs.insert("level".into(), Scalar::Str(session.level().as_str().into()));
        attrs.insert("mode".into(), Scalar::Str(st.mode.as_str().into()));
        attrs.insert("drift".into(), Scalar::Dec(st.drift.last_score().unwrap_or(0.0)));
        attrs.insert("throttle_factor".into(), Scalar::Dec(st.throttle_factor));
        attrs.insert("denied".into(), Scalar::Int(st.counts.denied as i64));
        for (tool, window_secs) in session.policy.rate_windows() {
            let horizon = now - window_secs as i64 * 1000;
            let count = st
                .requests
                .get(&tool)
                .map_or(0, |q| q.iter().filter(|t| **t > horizon).count());
            ctx.rates.insert((tool, window_secs), count as u64);
        }
        ctx
    }

    fn policy_decision(&self, session: &Session, st: &SessionState, request: &ToolCallRequest, now: Millis) -> Decision {
        session.policy.evaluate(&self.action_context(session, st, request, now), now)
    }

    /// Human-critical risks attached to the matched policies.
    fn human_critical_risks(&self, session: &Session, decision: &Decision) -> Vec<String> {
        let mut out: Vec<String> = decision
            .matched_policies
            .iter()
            .filter_map(|name| session.policy.get(name))
            .flat_map(|p| p.risk_ids.iter())
            .filter(|id| session.register.risk(id).is_some_and(|r| r.human_critical))
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Turn a policy decision into an outcome status. Throttle verdicts tighten
    /// the admitting capability's rate limit for this call.
    fn apply_verdict(
        &self,
        session: &Session,
        st: &SessionState,
        mut decision: Decision,
        cap: &CapabilityProfile,
    ) -> (OutcomeStatus, Decision) {
        match decision.verdict {
            Effect::Allow | Effect::Throttle(_) if !self.human_critical_risks(session, &decision).is_empty() => {
                let risks = self.human_critical_risks(session, &decision);
                decision.verdict = Effect::Escalate;
                decision.reason = format!("human-critical: {}", risks.join(", "));
                (OutcomeStatus::Escalated, decision)
            }
            Effect::Allow => (OutcomeStatus::Allowed, decision),
            Effect::Throttle(f) => {
                let over = cap.rate_limit.is_some_and(|l| {
                    let admitted = st.admissions.get(&cap.capability_id).map_or(0, VecDeque::len);
                    let limit = ((l.count as f64 * st.throttle_factor * f).floor() as usize).max(1);
                    admitted > limit
                });
                if over {
                    decision.verdict = Effect::Deny;
                    decision.reason = RATE_LIMITED.into();
                    (OutcomeStatus::Denied, decision)
                } else {
                    (OutcomeStatus::Allowed, decision)
                }
            }
            Effect::Escalate => (OutcomeStatus::Escalated, decision),
            Effect::Deny => (OutcomeStatus::Denied, decision),
            Effect::Contain(_) => (OutcomeStatus::Contained, decision),
        }
    }

    /// Write the decision (and escalation ticket), dispatch if allowed, then
    /// run guardians and any containment the decision implies.
    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        session: &Session,
        st: &mut SessionState,
        request: ToolCallRequest,
        request_seq: u64,
        mut status: OutcomeStatus,
        mut decision: Decision,
        mut gate: &'static str,
        now: Millis,
    ) -> Result<AuthorizationOutcome> {
        // A containment published while this call was in flight wins.
        let level = session.level();
        let mut halt_latency_ms = None;
        if level.halts() && status != OutcomeStatus::Contained {
            status = OutcomeStatus::Contained;
            decision.verdict = Effect::Contain(level);
            decision.matched_policies = vec!["@containment".into()];
            decision.reason = format!("session contained at {level}");
            gate = "containment";
        }
        if gate == "containment" {
            halt_latency_ms = Some(st.last_halt_latency);
        }

        let ticket = (status == OutcomeStatus::Escalated).then(|| {
            let risk_ids = self.ticket_risks(session, &decision);
            let names: Vec<&str> = risk_ids
                .iter()
                .filter_map(|id| session.register.risk(id))
                .map(|r| r.name.as_str())
                .collect();
            self.escalations.enqueue(NewTicket {
                session_id: session.id.clone(),
                request: request.clone(),
                request_seq,
                rationale: if request.intent.is_empty() {
                    format!("{} {}", request.tool, request.action)
                } else {
                    request.intent.clone()
                },
                projected_impact: if names.is_empty() {
                    decision.reason.clone()
                } else {
                    format!("{}; risks: {}", decision.reason, names.join(", "))
                },
                risk_ids,
                requested_at: now,
            })
        });

        let decision_seq = self
            .append(
                st,
                &session.id,
                RecordKind::Decision,
                &DecisionPayload {
                    request_seq,
                    status,
                    verdict: decision.verdict,
                    matched_policies: decision.matched_policies.clone(),
                    reason: decision.reason.clone(),
                    policy_digest: decision.policy_digest.clone(),
                    decided_at: decision.decided_at,
                    gate: gate.to_string(),
                    escalation_id: ticket.as_ref().map(|t| t.escalation_id.clone()),
                },
            )?
            .seq;
        st.counts.bump(status);

        if let Some(t) = &ticket {
            self.append(
                st,
                &session.id,
                RecordKind::EscalationOpened,
                &EscalationOpenedPayload {
                    escalation_id: t.escalation_id.clone(),
                    decision_seq,
                    request_seq,
                    rationale: t.rationale.clone(),
                    projected_impact: t.projected_impact.clone(),
                    risk_ids: t.risk_ids.clone(),
                },
            )?;
        }

        let mut result = None;
        if status == OutcomeStatus::Allowed {
            let adapter = self.adapters.read().get(&request.tool).cloned();
            match adapter {
                Some(adapter) => {
                    let value = match adapter.invoke(&request) {
                        Ok(v) => v,
                        Err(e) => serde_json::json!({ "error": e }),
                    };
                    self.append(
                        st,
                        &session.id,
                        RecordKind::Observation,
                        &ToolObservationPayload {
                            request_seq,
                            tool: request.tool.clone(),
                            action: request.action.clone(),
                            result: value.clone(),
                        },
                    )?;
                    result = Some(value);
                }
                None => st.unobserved_request = Some(request_seq),
            }
        }

        if let (OutcomeStatus::Contained, Effect::Contain(level), "policy") = (status, decision.verdict, gate) {
            let cause = format!("policy:{}", decision.matched_policies.first().map_or("", String::as_str));
            self.contain_internal(session, st, level, cause, Some(decision_seq), None, now)?;
        }
        self.run_guardians(session, st, decision_seq, now)?;

        Ok(AuthorizationOutcome {
            status,
            decision,
            gate: gate.to_string(),
            request_seq,
            decision_seq,
            escalation_id: ticket.map(|t| t.escalation_id),
            halt_latency_ms,
            result,
        })
    }

    fn ticket_risks(&self, session: &Session, decision: &Decision) -> Vec<String> {
        let mut ids: Vec<String> = decision
            .matched_policies
            .iter()
            .filter_map(|name| session.policy.get(name))
            .flat_map(|p| p.risk_ids.iter().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn run_guardians(&self, session: &Session, st: &mut SessionState, trigger_seq: u64, now: Millis) -> Result<()> {
        let window: Vec<ProvenanceRecord> = st.window.iter().map(|(_, r)| r.clone()).collect();
        for alert in evaluate_guardians(&window, &self.config.guardian_rules) {
            let newest = alert.evidence.iter().copied().max().unwrap_or(0);
            if st.alerted.get(&alert.rule_id).is_some_and(|seen| *seen >= newest) {
                continue;
            }
            st.alerted.insert(alert.rule_id.clone(), newest);
            let alert_seq = self
                .append(
                    st,
                    &session.id,
                    RecordKind::GuardianAlert,
                    &GuardianAlertPayload {
                        rule_id: alert.rule_id.clone(),
                        kind: alert.kind.clone(),
                        evidence: alert.evidence.clone(),
                        response_level: alert.response_level,
                        trigger_seq,
                    },
                )?
                .seq;
            let target = escalate_containment(session.level(), &alert);
            let cause = format!("guardian:{}", alert.rule_id);
            self.contain_internal(session, st, target, cause, Some(trigger_seq), Some(alert_seq), now)?;
            if st.closed_at.is_some() {
                break;
            }
        }
        Ok(())
    }

    // ---- containment ----

    /// Raise containment from inside the session lane (guardians, drift,
    /// policy verdicts). A no-op when the session is already at or above `level`.
    #[allow(clippy::too_many_arguments)]
    fn contain_internal(
        &self,
        session: &Session,
        st: &mut SessionState,
        level: ContainmentLevel,
        cause: String,
        cause_seq: Option<u64>,
        alert_seq: Option<u64>,
        requested_at: Millis,
    ) -> Result<Option<ContainmentRecord>> {
        let previous = session.raise(level);
        if previous >= level {
            return Ok(None);
        }
        self.record_containment(session, st, level, previous, cause, cause_seq, alert_seq, 0, requested_at)
            .map(Some)
    }

    #[allow(clippy::too_many_arguments)]
    fn record_containment(
        &self,
        session: &Session,
        st: &mut SessionState,
        level: ContainmentLevel,
        previous: ContainmentLevel,
        cause: String,
        cause_seq: Option<u64>,
        alert_seq: Option<u64>,
        halt_latency_ms: u64,
        requested_at: Millis,
    ) -> Result<ContainmentRecord> {
        if level == ContainmentLevel::Kill {
            self.expire_session_tickets(session, st)?;
        }
        let record = self.append(
            st,
            &session.id,
            RecordKind::Containment,
            &ContainmentPayload {
                level,
                previous,
                cause: cause.clone(),
                cause_seq,
                alert_seq,
                halt_latency_ms,
                requested_at,
            },
        )?;
        if level.halts() {
            st.last_halt_latency = halt_latency_ms;
        }
        st.throttle_factor = if level >= ContainmentLevel::Throttle {
            st.throttle_factor.min(self.config.default_throttle_factor)
        } else {
            1.0
        };
        if level == ContainmentLevel::Kill {
            self.ledger.lock().seal(&session.id);
            st.closed_at = Some(self.clock.now_ms());
            session.closed.store(true, Ordering::SeqCst);
        }
        Ok(ContainmentRecord {
            session_id: session.id.clone(),
            level,
            previous,
            cause,
            halt_latency_ms,
            record_seq: record.seq,
            requested_at,
        })
    }

    /// Operator or harness containment. Levels only move up the ladder, except
    /// that a paused session may be released back to monitor.
    ///
    /// The level is published before the session lane is taken, so an
    /// in-flight call halts at its final gate; `halt_latency_ms` is the time
    /// spent waiting for that call to yield the lane.
    pub fn apply_containment(&self, session_id: &str, level: ContainmentLevel, cause: &str) -> Result<ContainmentRecord> {
        let session = self.session(session_id)?;
        let t0 = self.clock.now_ms();
        if session.closed.load(Ordering::SeqCst) {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        let mut current = session.level.load(Ordering::SeqCst);
        let previous = loop {
            let from = ContainmentLevel::from_u8(current);
            let release = from == ContainmentLevel::Pause && level == ContainmentLevel::Monitor;
            if level < from && !release {
                return Err(GatewayError::LadderViolation { from, to: level });
            }
            match session
                .level
                .compare_exchange(current, level.to_u8(), Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => break from,
                Err(actual) => current = actual,
            }
        };
        let (mut st, latency) = match session.lane.try_lock() {
            Some(st) => (st, 0),
            None => {
                let st = session.lane.lock();
                (st, (self.clock.now_ms() - t0).max(0) as u64)
            }
        };
        if st.closed_at.is_some() {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        self.record_containment(&session, &mut st, level, previous, cause.to_string(), None, None, latency, t0)
    }

    pub fn set_fallback(&self, session_id: &str, mode: FallbackMode, cause: &str) -> Result<u64> {
        let session = self.session(session_id)?;
        let mut st = session.lane.lock();
        if st.closed_at.is_some() {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        let previous = st.mode;
        st.mode = mode;
        Ok(self
            .append(
                &mut st,
                session_id,
                RecordKind::Fallback,
                &FallbackPayload {
                    mode,
                    previous,
                    cause: cause.to_string(),
                },
            )?
            .seq)
    }

    /// Quarantine a tool name or resource glob for every session. Returns
    /// false (and writes nothing) when the target is already quarantined.
    pub fn quarantine(&self, target: &str, cause: &str) -> Result<bool> {
        let mut q = self.quarantine.write();
        if !q.quarantine(target, cause, self.clock.now_ms()) {
            return Ok(false);
        }
        self.append_global(
            RecordKind::Quarantine,
            &QuarantinePayload {
                target: target.to_string(),
                op: "quarantine".into(),
                cause: cause.to_string(),
            },
        )?;
        Ok(true)
    }

    pub fn release_quarantine(&self, target: &str, cause: &str) -> Result<bool> {
        let mut q = self.quarantine.write();
        if !q.release(target) {
            return Ok(false);
        }
        self.append_global(
            RecordKind::Quarantine,
            &QuarantinePayload {
                target: target.to_string(),
                op: "release".into(),
                cause: cause.to_string(),
            },
        )?;
        Ok(true)
    }

    pub fn quarantined(&self) -> Vec<QuarantineEntry> {
        self.quarantine.read().entries().cloned().collect()
    }

    // ---- semantic events ----

    pub fn submit_event(&self, session_id: &str, mut event: SemanticEvent) -> Result<EventAck> {
        let session = self.session(session_id)?;
        let mut st = session.lane.lock();
        if st.closed_at.is_some() {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        event.validate()?;
        if event.kind == EventKind::ToolCallIntent {
            return Err(GatewayError::InvalidRequest(
                "tool-call intents are submitted as tool calls".into(),
            ));
        }
        event.session_id = session_id.to_string();
        if event.event_id.is_empty() {
            event.event_id = format!("e{:06}", self.next_event.fetch_add(1, Ordering::SeqCst) + 1);
        }
        let now = self.clock.now_ms();

        let mut alert = None;
        let mut drift_score = None;
        if event.kind.is_drift_scored() {
            let (next, a) = assess_drift(&st.drift, &event)?;
            drift_score = next.last_score();
            st.drift = next;
            alert = a;
        }
        let request_seq = match event.kind {
            EventKind::Observation => st.unobserved_request.take(),
            _ => None,
        };
        let kind = match event.kind {
            EventKind::Goal => RecordKind::Goal,
            EventKind::Plan => RecordKind::Plan,
            EventKind::PlanStep => RecordKind::PlanStep,
            EventKind::Observation => RecordKind::Observation,
            EventKind::Reflection => RecordKind::Reflection,
            EventKind::ToolCallIntent => unreachable!(),
        };
        let seq = self
            .append(
                &mut st,
                session_id,
                kind,
                &SemanticPayload {
                    event_id: event.event_id.clone(),
                    phase: event.phase,
                    kind: event.kind,
                    text: event.text.clone(),
                    confidence: event.confidence,
                    drift_score,
                    request_seq,
                },
            )?
            .seq;

        if let Some(mut a) = alert.clone() {
            a.response_level = self.config.drift.response_level;
            let alert_seq = self
                .append(
                    &mut st,
                    session_id,
                    RecordKind::DriftAlert,
                    &DriftAlertPayload {
                        scores: a.scores.clone(),
                        threshold: a.threshold,
                        trigger_count: a.trigger_count,
                        response_level: a.response_level,
                        trigger_seq: seq,
                    },
                )?
                .seq;
            let target = escalate_containment(session.level(), &a);
            self.contain_internal(&session, &mut st, target, "drift".into(), Some(seq), Some(alert_seq), now)?;
        }
        Ok(EventAck {
            event_id: event.event_id,
            record_seq: seq,
            drift_score,
            drift_alert: alert.is_some(),
            level: session.level(),
        })
    }

    // ---- escalations ----

    pub fn escalations(&self, status: Option<TicketStatus>) -> Vec<EscalationTicket> {
        self.escalations.list(status)
    }

    pub fn escalation(&self, id: &str) -> Option<EscalationTicket> {
        self.escalations.get(id)
    }

    /// Resolve a pending escalation exactly once and complete the suspended call.
    pub fn decide(
        &self,
        escalation_id: &str,
        verdict: OperatorVerdict,
        operator_id: &str,
        modified_args: Option<BTreeMap<String, Scalar>>,
    ) -> Result<EscalationDecision> {
        let ticket = self
            .escalations
            .get(escalation_id)
            .ok_or_else(|| EscalationError::UnknownTicket(escalation_id.to_string()))?;
        let session = self.session(&ticket.session_id)?;
        let mut st = session.lane.lock();
        if verdict == OperatorVerdict::Modify {
            validate_modification(&ticket.request, modified_args.as_ref())?;
        }
        let now = self.clock.now_ms();
        let resolved = self.escalations.resolve(
            escalation_id,
            Resolution {
                status: verdict.status(),
                operator_id: Some(operator_id.to_string()),
                modified_args: modified_args.clone(),
                decided_at: now,
            },
        )?;
        let decided_seq = self.record_decided(&session, &mut st, &resolved)?;

        let outcome = match verdict {
            OperatorVerdict::Deny => {
                st.counts.bump(OutcomeStatus::Denied);
                self.terminal_outcome(&session, &ticket, OPERATOR_DENIED, decided_seq, now)
            }
            OperatorVerdict::Approve => self.resume(&session, &mut st, ticket.request.clone(), escalation_id, false, now)?,
            OperatorVerdict::Modify => {
                let mut request = ticket.request.clone();
                for (k, v) in modified_args.unwrap_or_default() {
                    request.args.insert(k, v);
                }
                self.resume(&session, &mut st, request, escalation_id, true, now)?
            }
        };
        self.escalations.set_resolution(escalation_id, outcome.status);
        Ok(EscalationDecision {
            ticket: self.escalations.get(escalation_id).unwrap_or(resolved),
            decided_seq,
            outcome,
        })
    }

    fn record_decided(&self, session: &Session, st: &mut SessionState, t: &EscalationTicket) -> Result<u64> {
        Ok(self
            .append(
                st,
                &session.id,
                RecordKind::EscalationDecided,
                &EscalationDecidedPayload {
                    escalation_id: t.escalation_id.clone(),
                    status: t.status,
                    operator_id: t.operator_id.clone(),
                    modified_args: t.modified_args.clone(),
                    decided_at: t.decided_at.unwrap_or_default(),
                },
            )?
            .seq)
    }

    /// Outcome of a suspended call that is not resumed.
    fn terminal_outcome(
        &self,
        session: &Session,
        ticket: &EscalationTicket,
        reason: &str,
        decided_seq: u64,
        now: Millis,
    ) -> AuthorizationOutcome {
        AuthorizationOutcome {
            status: OutcomeStatus::Denied,
            decision: Decision {
                verdict: Effect::Deny,
                matched_policies: vec!["@operator".into()],
                reason: reason.to_string(),
                policy_digest: session.policy.source_digest.clone(),
                decided_at: now,
            },
            gate: "operator".into(),
            request_seq: ticket.request_seq,
            decision_seq: decided_seq,
            escalation_id: Some(ticket.escalation_id.clone()),
            halt_latency_ms: None,
            result: None,
        }
    }

    /// Re-submit an approved or modified call. Containment, fallback and
    /// sandbox gates still apply; a modified call is also re-evaluated by policy.
    fn resume(
        &self,
        session: &Session,
        st: &mut SessionState,
        request: ToolCallRequest,
        escalation_id: &str,
        modified: bool,
        now: Millis,
    ) -> Result<AuthorizationOutcome> {
        let request_seq = self.record_request(session, st, &request, Some(escalation_id.to_string()), now)?;
        let operator = |reason: &str, matched: Vec<String>| Decision {
            verdict: Effect::Allow,
            matched_policies: matched,
            reason: reason.to_string(),
            policy_digest: session.policy.source_digest.clone(),
            decided_at: now,
        };
        let (status, decision, gate) = match self.sandbox_gates(session, st, &request, now) {
            Err(b) => blocked_decision(session, b, now),
            Ok(_) if !modified => (
                OutcomeStatus::Allowed,
                operator(OPERATOR_APPROVED, vec!["@operator".into()]),
                "operator",
            ),
            Ok(_) => {
                let d = self.policy_decision(session, st, &request, now);
                match d.verdict {
                    Effect::Allow | Effect::Throttle(_) | Effect::Escalate => {
                        let mut matched = d.matched_policies.clone();
                        matched.push("@operator".into());
                        (OutcomeStatus::Allowed, operator(OPERATOR_MODIFIED, matched), "operator")
                    }
                    Effect::Deny => (OutcomeStatus::Denied, d, "policy"),
                    Effect::Contain(_) => (OutcomeStatus::Contained, d, "policy"),
                }
            }
        };
        let mut out = self.finish(session, st, request, request_seq, status, decision, gate, now)?;
        out.escalation_id = Some(escalation_id.to_string());
        Ok(out)
    }

    /// Expire every pending escalation older than the configured timeout at
    /// `now`. The suspended calls complete as denied.
    pub fn expire(&self, now: Millis) -> Result<Vec<EscalationTicket>> {
        let mut out = Vec::new();
        for t in self.escalations.overdue(now, self.config.escalation_timeout_secs) {
            let Ok(session) = self.session(&t.session_id) else { continue };
            let mut st = session.lane.lock();
            if let Some(t) = self.expire_ticket(&session, &mut st, &t.escalation_id, now)? {
                out.push(t);
            }
        }
        Ok(out)
    }

    fn expire_ticket(
        &self,
        session: &Session,
        st: &mut SessionState,
        id: &str,
        now: Millis,
    ) -> Result<Option<EscalationTicket>> {
        let resolved = match self.escalations.resolve(
            id,
            Resolution {
                status: TicketStatus::Expired,
                operator_id: None,
                modified_args: None,
                decided_at: now,
            },
        ) {
            Ok(t) => t,
            // an operator decided first
            Err(EscalationError::AlreadyDecided { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        self.record_decided(session, st, &resolved)?;
        st.counts.bump(OutcomeStatus::Denied);
        self.escalations.set_resolution(id, OutcomeStatus::Denied);
        Ok(self.escalations.get(id))
    }

    fn expire_session_tickets(&self, session: &Session, st: &mut SessionState) -> Result<()> {
        let now = self.clock.now_ms();
        for t in self.escalations.pending_for_session(&session.id) {
            self.expire_ticket(session, st, &t.escalation_id, now)?;
        }
        Ok(())
    }

    // ---- lifecycle and reporting ----

    pub fn close_session(&self, session_id: &str, reason: &str) -> Result<u64> {
        let session = self.session(session_id)?;
        let mut st = session.lane.lock();
        if st.closed_at.is_some() {
            return Err(GatewayError::SessionClosed(session_id.to_string()));
        }
        self.expire_session_tickets(&session, &mut st)?;
        let counts = st.counts;
        let seq = self
            .append(
                &mut st,
                session_id,
                RecordKind::SessionClose,
                &SessionClosePayload {
                    reason: reason.to_string(),
                    counts,
                },
            )?
            .seq;
        st.closed_at = Some(self.clock.now_ms());
        session.closed.store(true, Ordering::SeqCst);
        Ok(seq)
    }

    pub fn session_status(&self, session_id: &str) -> Result<SessionStatus> {
        let session = self.session(session_id)?;
        let st = session.lane.lock();
        Ok(SessionStatus {
            session_id: session.id.clone(),
            agent_id: session.agent_id.clone(),
            declared_objective: session.declared_objective.clone(),
            level: session.level(),
            mode: st.mode,
            throttle_factor: st.throttle_factor,
            counts: st.counts,
            last_drift_score: st.drift.last_score(),
            policy_digest: session.policy.source_digest.clone(),
            register_id: session.register.register_id.clone(),
            opened_at: session.opened_at,
            closed_at: st.closed_at,
            pending_escalations: self.escalations.pending_for_session(&session.id).len(),
        })
    }

    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        self.ledger.lock().snapshot()
    }

    /// Records with seq >= `seq`.
    pub fn records_since(&self, seq: u64) -> Vec<ProvenanceRecord> {
        let ledger = self.ledger.lock();
        let records = ledger.records();
        records[(seq as usize).min(records.len())..].to_vec()
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.lock().len()
    }

    pub fn verify_ledger(&self) -> VerificationReport {
        self.ledger_snapshot().verify()
    }

    /// Append directly to the ledger, bypassing the pipeline. Used to show
    /// that sealed sessions refuse writes.
    pub fn append_raw(&self, kind: RecordKind, session_id: &str, payload: &serde_json::Value) -> Result<u64> {
        Ok(self
            .ledger
            .lock()
            .append(kind, session_id, &crate::canonical::CanonicalJson::from_value(payload))?
            .seq)
    }

    pub fn apg(&self, session_id: &str, format: ApgFormat) -> Result<String> {
        let snap = self.ledger_snapshot();
        let graph = build_apg(&snap.header, &snap.records, session_id)?;
        Ok(export_apg(&graph, format))
    }

    pub fn sla_report(&self) -> SLAReport {
        measure_interruptibility(self.ledger.lock().records(), self.config.sla)
    }
}
