//! Guardian rules, the graduated containment ladder, quarantine, and
//! interruptibility SLA measurement.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::ledger::payload::{ContainmentPayload, DecisionPayload, OutcomeStatus, ToolCallRequestPayload};
use crate::ledger::{ProvenanceRecord, RecordKind};

/// Graduated containment ladder, ordered from least to most restrictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainmentLevel {
    Monitor,
    Throttle,
    Pause,
    Isolate,
    Kill,
}

impl ContainmentLevel {
    pub const ALL: [ContainmentLevel; 5] = [
        ContainmentLevel::Monitor,
        ContainmentLevel::Throttle,
        ContainmentLevel::Pause,
        ContainmentLevel::Isolate,
        ContainmentLevel::Kill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContainmentLevel::Monitor => "monitor",
            ContainmentLevel::Throttle => "throttle",
            ContainmentLevel::Pause => "pause",
            ContainmentLevel::Isolate => "isolate",
            ContainmentLevel::Kill => "kill",
        }
    }

    /// Levels at which no tool call is dispatched.
    pub fn halts(self) -> bool {
        self >= ContainmentLevel::Pause
    }

    pub(crate) fn to_u8(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_u8(v: u8) -> Self {
        Self::ALL[v as usize]
    }
}

impl fmt::Display for ContainmentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContainmentLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown containment level `{s}`"))
    }
}

/// Restricted operating modes that keep partial utility during an incident.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackMode {
    #[default]
    Normal,
    ReadOnly,
    SearchOnly,
}

impl FallbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FallbackMode::Normal => "normal",
            FallbackMode::ReadOnly => "read-only",
            FallbackMode::SearchOnly => "search-only",
        }
    }
}

impl fmt::Display for FallbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FallbackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(FallbackMode::Normal),
            "read-only" => Ok(FallbackMode::ReadOnly),
            "search-only" => Ok(FallbackMode::SearchOnly),
            other => Err(format!("unknown fallback mode `{other}`")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriageError {
    #[error("guardian rule `{0}`: parameters must be positive")]
    InvalidRule(String),
    #[error("invalid SLA: {0}")]
    InvalidSla(String),
}

/// Predicate of a guardian rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GuardianKind {
    /// At least `k` denied decisions within `window_secs`.
    DenialBurst { k: u32, window_secs: u64 },
    /// More than `per_second` tool-call requests within the trailing second.
    RateSpike { per_second: u32 },
    /// More than `n` distinct resources requested within `window_secs`.
    ScopeSpread { n: u32, window_secs: u64 },
    /// Any request denied because its tool or resource is quarantined.
    QuarantineTouch,
}

impl GuardianKind {
    pub fn name(&self) -> &'static str {
        match self {
            GuardianKind::DenialBurst { .. } => "denial-burst",
            GuardianKind::RateSpike { .. } => "rate-spike",
            GuardianKind::ScopeSpread { .. } => "scope-spread",
            GuardianKind::QuarantineTouch => "quarantine-touch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardianRule {
    pub rule_id: String,
    #[serde(flatten)]
    pub kind: GuardianKind,
    pub response_level: ContainmentLevel,
}

impl GuardianRule {
    pub fn validate(&self) -> Result<(), TriageError> {
        let ok = match self.kind {
            GuardianKind::DenialBurst { k, window_secs } => k > 0 && window_secs > 0,
            GuardianKind::RateSpike { per_second } => per_second > 0,
            GuardianKind::ScopeSpread { n, window_secs } => n > 0 && window_secs > 0,
            GuardianKind::QuarantineTouch => true,
        };
        if ok {
            Ok(())
        } else {
            Err(TriageError::InvalidRule(self.rule_id.clone()))
        }
    }

    /// The rule set used when a deployment configures none.
    pub fn defaults() -> Vec<GuardianRule> {
        vec![
            GuardianRule {
                rule_id: "denial-burst".into(),
                kind: GuardianKind::DenialBurst { k: 3, window_secs: 60 },
                response_level: ContainmentLevel::Throttle,
            },
            GuardianRule {
                rule_id: "scope-spread".into(),
                kind: GuardianKind::ScopeSpread { n: 5, window_secs: 60 },
                response_level: ContainmentLevel::Isolate,
            },
            GuardianRule {
                rule_id: "rate-spike".into(),
                kind: GuardianKind::RateSpike { per_second: 10 },
                response_level: ContainmentLevel::Pause,
            },
            GuardianRule {
                rule_id: "quarantine-touch".into(),
                kind: GuardianKind::QuarantineTouch,
                response_level: ContainmentLevel::Isolate,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardianAlert {
    pub rule_id: String,
    pub kind: String,
    /// Ledger seqs of the records that satisfied the predicate.
    pub evidence: Vec<u64>,
    pub response_level: ContainmentLevel,
}

/// Anything that can push a session up the ladder.
pub trait ContainmentTrigger {
    fn response_level(&self) -> ContainmentLevel;
}

impl ContainmentTrigger for GuardianAlert {
    fn response_level(&self) -> ContainmentLevel {
        self.response_level
    }
}

impl ContainmentTrigger for crate::telemetry::DriftAlert {
    fn response_level(&self) -> ContainmentLevel {
        self.response_level
    }
}

/// Never lowers the level; kill stays kill.
pub fn escalate_containment(current: ContainmentLevel, alert: &impl ContainmentTrigger) -> ContainmentLevel {
    current.max(alert.response_level())
}

/// Run every rule over a window of ledgered records (ordered by ts). The
/// window's reference time is the ts of its last record.
pub fn evaluate_guardians(window: &[ProvenanceRecord], rules: &[GuardianRule]) -> Vec<GuardianAlert> {
    let Some(now) = window.last().and_then(ProvenanceRecord::ts_ms) else {
        return Vec::new();
    };
    let within = |r: &ProvenanceRecord, secs: u64| {
        r.ts_ms().is_some_and(|t| now - t < (secs as i64) * 1000)
    };
    let decisions = || {
        window
            .iter()
            .filter(|r| r.kind == RecordKind::Decision)
            .filter_map(|r| r.payload_as::<DecisionPayload>().map(|p| (r, p)))
    };
    let requests = || {
        window
            .iter()
            .filter(|r| r.kind == RecordKind::ToolCallRequest)
            .filter_map(|r| r.payload_as::<ToolCallRequestPayload>().map(|p| (r, p)))
    };

    let mut alerts = Vec::new();
    for rule in rules {
        let evidence: Option<Vec<u64>> = match &rule.kind {
            GuardianKind::DenialBurst { k, window_secs } => {
                let seqs: Vec<u64> = decisions()
                    .filter(|(r, p)| p.status == OutcomeStatus::Denied && within(r, *window_secs))
                    .map(|(r, _)| r.seq)
                    .collect();
                (seqs.len() >= *k as usize).then_some(seqs)
            }
            GuardianKind::RateSpike { per_second } => {
                let seqs: Vec<u64> = requests().filter(|(r, _)| within(r, 1)).map(|(r, _)| r.seq).collect();
                (seqs.len() > *per_second as usize).then_some(seqs)
            }
            GuardianKind::ScopeSpread { n, window_secs } => {
                let mut first: BTreeMap<String, u64> = BTreeMap::new();
                for (r, p) in requests().filter(|(r, _)| within(r, *window_secs)) {
                    if let Some(res) = p.request.resource {
                        first.entry(res).or_insert(r.seq);
                    }
                }
                let mut seqs: Vec<u64> = first.into_values().collect();
                seqs.sort_unstable();
                (seqs.len() > *n as usize).then_some(seqs)
            }
            GuardianKind::QuarantineTouch => {
                let seqs: Vec<u64> = decisions()
                    .filter(|(_, p)| p.reason == QUARANTINED)
                    .map(|(r, _)| r.seq)
                    .collect();
                (!seqs.is_empty()).then_some(seqs)
            }
        };
        if let Some(evidence) = evidence {
            alerts.push(GuardianAlert {
                rule_id: rule.rule_id.clone(),
                kind: rule.kind.name().to_string(),
                evidence,
                response_level: rule.response_level,
            });
        }
    }
    alerts
}

/// Decision reason for calls touching a quarantined tool or resource.
pub const QUARANTINED: &str = "quarantined";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterruptibilitySLA {
    pub max_halt_ms: u64,
    pub min_success_prob: f64,
}

impl Default for InterruptibilitySLA {
    fn default() -> Self {
        Self {
            max_halt_ms: 200,
            min_success_prob: 0.999,
        }
    }
}

impl InterruptibilitySLA {
    pub fn new(max_halt_ms: u64, min_success_prob: f64) -> Result<Self, TriageError> {
        let sla = Self {
            max_halt_ms,
            min_success_prob,
        };
        sla.validate()?;
        Ok(sla)
    }

    pub fn validate(&self) -> Result<(), TriageError> {
        if self.max_halt_ms == 0 {
            return Err(TriageError::InvalidSla("max_halt_ms must be positive".into()));
        }
        if !(self.min_success_prob > 0.0 && self.min_success_prob <= 1.0) {
            return Err(TriageError::InvalidSla("min_success_prob must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Upper bounds (inclusive, ms) of the latency histogram buckets.
pub const LATENCY_BUCKETS_MS: [u64; 9] = [0, 1, 5, 10, 25, 50, 100, 200, 500];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SLAReport {
    pub n: u64,
    pub successes: u64,
    /// `None` when there were no halting containments.
    pub success_rate: Option<f64>,
    /// Bucket label (`le_<ms>` or `gt_500`) to count.
    pub histogram: BTreeMap<String, u64>,
    pub meets_sla: bool,
    /// Set when `meets_sla` holds only because `n` is zero.
    pub vacuous: bool,
    pub sla: InterruptibilitySLA,
}

fn bucket_label(ms: u64) -> String {
    LATENCY_BUCKETS_MS
        .iter()
        .find(|&&b| ms <= b)
        .map(|b| format!("le_{b}"))
        .unwrap_or_else(|| format!("gt_{}", LATENCY_BUCKETS_MS[LATENCY_BUCKETS_MS.len() - 1]))
}

/// SLA outcome over halt latencies (ms).
pub fn sla_report_from_latencies(latencies: &[u64], sla: InterruptibilitySLA) -> SLAReport {
    let n = latencies.len() as u64;
    let successes = latencies.iter().filter(|&&l| l <= sla.max_halt_ms).count() as u64;
    let mut histogram = BTreeMap::new();
    for &l in latencies {
        *histogram.entry(bucket_label(l)).or_insert(0) += 1;
    }
    let success_rate = (n > 0).then(|| successes as f64 / n as f64);
    SLAReport {
        n,
        successes,
        success_rate,
        histogram,
        meets_sla: success_rate.is_none_or(|r| r >= sla.min_success_prob),
        vacuous: n == 0,
        sla,
    }
}

/// Measure every containment at pause or above recorded in the ledger.
pub fn measure_interruptibility(records: &[ProvenanceRecord], sla: InterruptibilitySLA) -> SLAReport {
    let latencies: Vec<u64> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Containment)
        .filter_map(|r| r.payload_as::<ContainmentPayload>())
        .filter(|p| p.level.halts())
        .map(|p| p.halt_latency_ms)
        .collect();
    sla_report_from_latencies(&latencies, sla)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub target: String,
    pub since: Millis,
    pub cause: String,
}

/// Tools and resources withheld pending human validation. Resource targets
/// may be glob patterns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRegistry {
    entries: BTreeMap<String, QuarantineEntry>,
}

impl QuarantineRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the target was already quarantined (the entry is kept).
    pub fn quarantine(&mut self, target: &str, cause: &str, since: Millis) -> bool {
        if self.entries.contains_key(target) {
            return false;
        }
        self.entries.insert(
            target.to_string(),
            QuarantineEntry {
                target: target.to_string(),
                since,
                cause: cause.to_string(),
            },
        );
        true
    }

    pub fn release(&mut self, target: &str) -> bool {
        self.entries.remove(target).is_some()
    }

    pub fn contains(&self, target: &str) -> bool {
        self.entries.contains_key(target)
    }

    /// Whether a call on `tool` touching `resource` hits any entry.
    pub fn blocks(&self, tool: &str, resource: Option<&str>) -> bool {
        self.entries.keys().any(|t| {
            t == tool || resource.is_some_and(|r| t == r || crate::glob_match(t, r))
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = &QuarantineEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
