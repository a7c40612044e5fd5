//! The Agent Risk Register: capabilities the agent may exercise and the
//! taxonomy-classified risks attached to each of them.
//!
//! Every other module refers to risks by `risk_id` and to sandbox scopes by
//! `capability_id`, so a register is fully cross-checked at load time and is
//! immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegisterError {
    #[error("register parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("register validation error for `{id}`: {message}")]
    Validation { id: String, message: String },
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
}

impl RegisterError {
    fn invalid(id: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            id: id.into(),
            message: message.into(),
        }
    }
}

/// Closed, normalized taxonomy vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Security,
    Privacy,
    Fairness,
    Safety,
    Accountability,
    Transparency,
    Systemic,
    HumanComputerInteraction,
    Societal,
}

impl Domain {
    pub const ALL: [Domain; 9] = [
        Domain::Security,
        Domain::Privacy,
        Domain::Fairness,
        Domain::Safety,
        Domain::Accountability,
        Domain::Transparency,
        Domain::Systemic,
        Domain::HumanComputerInteraction,
        Domain::Societal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Security => "security",
            Domain::Privacy => "privacy",
            Domain::Fairness => "fairness",
            Domain::Safety => "safety",
            Domain::Accountability => "accountability",
            Domain::Transparency => "transparency",
            Domain::Systemic => "systemic",
            Domain::HumanComputerInteraction => "human-computer-interaction",
            Domain::Societal => "societal",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown domain `{s}`"))
    }
}

/// Agent-loop phase a capability belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Plan,
    Act,
    Observe,
    Reflect,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Plan => "plan",
            Phase::Act => "act",
            Phase::Observe => "observe",
            Phase::Reflect => "reflect",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plan" => Ok(Phase::Plan),
            "act" => Ok(Phase::Act),
            "observe" => Ok(Phase::Observe),
            "reflect" => Ok(Phase::Reflect),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    /// Weight used by the Risk Coverage Score.
    pub fn weight(self) -> u32 {
        match self {
            Severity::Low => 1,
            Severity::Medium => 2,
            Severity::High => 3,
            Severity::Critical => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
            Severity::Critical => "critical",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(Severity::Low),
            "medium" => Ok(Severity::Medium),
            "high" => Ok(Severity::High),
            "critical" => Ok(Severity::Critical),
            other => Err(format!("unknown severity `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalEntity {
    Human,
    Ai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalIntent {
    Intentional,
    Unintentional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Causal {
    pub entity: CausalEntity,
    pub intent: CausalIntent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimit {
    pub count: u32,
    pub window_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapabilityProfile {
    pub capability_id: String,
    pub phase: Phase,
    pub tool: String,
    pub actions: BTreeSet<String>,
    pub resource_scopes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<RateLimit>,
}

impl CapabilityProfile {
    pub fn permits(&self, tool: &str, action: &str) -> bool {
        self.tool == tool && self.actions.contains(action)
    }

    /// Resource check against the glob scopes. A call without a resource is in
    /// scope only for capabilities that declare no resource scopes.
    pub fn covers_resource(&self, resource: Option<&str>) -> bool {
        match resource {
            None => self.resource_scopes.is_empty(),
            Some(r) => self
                .resource_scopes
                .iter()
                .any(|scope| crate::glob_match(scope, r)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RiskEntry {
    pub risk_id: String,
    pub capability_id: String,
    pub name: String,
    pub causal: Causal,
    pub domains: BTreeSet<Domain>,
    pub severity: Severity,
    pub human_critical: bool,
    pub scenario_note: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raci: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RiskRegister {
    pub register_id: String,
    pub agent_id: String,
    pub version: u64,
    pub capabilities: Vec<CapabilityProfile>,
    pub risks: Vec<RiskEntry>,
}

// Wire shapes. Enumerated fields stay strings here so that a bad value is
// reported as a validation error naming the offending entry.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegister {
    register_id: String,
    agent_id: String,
    version: u64,
    capabilities: Vec<RawCapability>,
    risks: Vec<RawRisk>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCapability {
    capability_id: String,
    phase: String,
    tool: String,
    actions: Vec<String>,
    #[serde(default)]
    resource_scopes: Vec<String>,
    #[serde(default)]
    rate_limit: Option<RateLimit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRisk {
    risk_id: String,
    capability_id: String,
    name: String,
    causal: Causal,
    domains: Vec<String>,
    severity: String,
    #[serde(default)]
    human_critical: bool,
    #[serde(default)]
    scenario_note: String,
    #[serde(default)]
    raci: Option<BTreeMap<String, String>>,
}

/// Parse and cross-check a register document.
pub fn load_register(document: &str) -> Result<RiskRegister, RegisterError> {
    let raw: RawRegister = serde_json::from_str(document).map_err(|e| RegisterError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    RiskRegister::from_raw(raw)
}

impl RiskRegister {
    fn from_raw(raw: RawRegister) -> Result<Self, RegisterError> {
        if raw.version < 1 {
            return Err(RegisterError::invalid(&raw.register_id, "version must be >= 1"));
        }

        let mut capabilities = Vec::with_capacity(raw.capabilities.len());
        let mut seen = HashSet::new();
        for cap in raw.capabilities {
            let id = cap.capability_id;
            if !seen.insert(id.clone()) {
                return Err(RegisterError::invalid(&id, "duplicate capability_id"));
            }
            let phase = cap.phase.parse().map_err(|m: String| RegisterError::invalid(&id, m))?;
            if cap.tool.is_empty() {
                return Err(RegisterError::invalid(&id, "tool must be non-empty"));
            }
            if cap.actions.is_empty() {
                return Err(RegisterError::invalid(&id, "actions must be non-empty"));
            }
            let actions: BTreeSet<String> = cap.actions.into_iter().collect();
            if let Some(limit) = cap.rate_limit {
                if limit.count < 1 || limit.window_seconds < 1 {
                    return Err(RegisterError::invalid(
                        &id,
                        "rate_limit requires count >= 1 and window_seconds >= 1",
                    ));
                }
            }
            for scope in &cap.resource_scopes {
                if glob::Pattern::new(scope).is_err() {
                    return Err(RegisterError::invalid(&id, format!("bad resource scope `{scope}`")));
                }
            }
            capabilities.push(CapabilityProfile {
                capability_id: id,
                phase,
                tool: cap.tool,
                actions,
                resource_scopes: cap.resource_scopes,
                rate_limit: cap.rate_limit,
            });
        }

        let mut risks = Vec::with_capacity(raw.risks.len());
        let mut seen = HashSet::new();
        for risk in raw.risks {
            let id = risk.risk_id;
            if !seen.insert(id.clone()) {
                return Err(RegisterError::invalid(&id, "duplicate risk_id"));
            }
            if !capabilities.iter().any(|c| c.capability_id == risk.capability_id) {
                return Err(RegisterError::invalid(
                    &risk.capability_id,
                    format!("risk `{id}` references unknown capability `{}`", risk.capability_id),
                ));
            }
            if risk.domains.is_empty() {
                return Err(RegisterError::invalid(&id, "domains must be non-empty"));
            }
            let domains = risk
                .domains
                .iter()
                .map(|d| d.parse::<Domain>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|m| RegisterError::invalid(&id, m))?;
            let severity = risk
                .severity
                .parse()
                .map_err(|m: String| RegisterError::invalid(&id, m))?;
            risks.push(RiskEntry {
                risk_id: id,
                capability_id: risk.capability_id,
                name: risk.name,
                causal: risk.causal,
                domains,
                severity,
                human_critical: risk.human_critical,
                scenario_note: risk.scenario_note,
                raci: risk.raci,
            });
        }

        Ok(RiskRegister {
            register_id: raw.register_id,
            agent_id: raw.agent_id,
            version: raw.version,
            capabilities,
            risks,
        })
    }

    /// Serialize to the register file format (pretty-printed JSON).
    pub fn export(&self) -> String {
        serde_json::to_string_pretty(self).expect("register serialization is infallible")
    }

    pub fn capability(&self, capability_id: &str) -> Option<&CapabilityProfile> {
        self.capabilities.iter().find(|c| c.capability_id == capability_id)
    }

    pub fn risk(&self, risk_id: &str) -> Option<&RiskEntry> {
        self.risks.iter().find(|r| r.risk_id == risk_id)
    }

    /// Capabilities granting `tool` + `action`, in register order.
    pub fn capabilities_for<'a>(
        &'a self,
        tool: &'a str,
        action: &'a str,
    ) -> impl Iterator<Item = &'a CapabilityProfile> + 'a {
        self.capabilities.iter().filter(move |c| c.permits(tool, action))
    }

    pub fn has_tool(&self, tool: &str) -> bool {
        self.capabilities.iter().any(|c| c.tool == tool)
    }

    pub fn lookup_risks(&self, capability_id: &str) -> Result<Vec<&RiskEntry>, RegisterError> {
        if self.capability(capability_id).is_none() {
            return Err(RegisterError::UnknownCapability(capability_id.to_string()));
        }
        Ok(self
            .risks
            .iter()
            .filter(|r| r.capability_id == capability_id)
            .collect())
    }

    pub fn taxonomy_coverage(&self) -> CoverageReport {
        let mut counts: BTreeMap<Domain, usize> = Domain::ALL.iter().map(|d| (*d, 0)).collect();
        for risk in &self.risks {
            for domain in &risk.domains {
                *counts.entry(*domain).or_default() += 1;
            }
        }
        let uncovered = Domain::ALL
            .iter()
            .copied()
            .filter(|d| counts[d] == 0)
            .collect();
        CoverageReport { counts, uncovered }
    }
}

/// Per-domain risk counts over the nine-domain taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub counts: BTreeMap<Domain, usize>,
    pub uncovered: Vec<Domain>,
}

impl CoverageReport {
    pub fn covered(&self) -> Vec<Domain> {
        Domain::ALL
            .iter()
            .copied()
            .filter(|d| self.counts[d] > 0)
            .collect()
    }
}
