//! Scenario-bank evaluation.
//!
//! A scenario is a scripted agent trace with expected guardrail outcomes. The
//! runner replays it through an isolated gateway backed by deterministic mock
//! tools and a seeded virtual clock; the metrics fold scores the whole bank.

mod metrics;
mod mocks;
mod runner;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{compute_metrics, risk_coverage_score, EvalReport, MetricsReport, RiskCoverage};
pub use mocks::{mock_adapter, MOCK_TOOLS};
pub use runner::{check_apg_integrity, run_bank, run_scenario, HarnessConfig, ProbeResult, ScenarioResult, StepResult};

use crate::ledger::payload::OutcomeStatus;
use crate::policy::Scalar;
use crate::register::{Domain, RiskRegister};
use crate::telemetry::EventKind;
use crate::triage::ContainmentLevel;

/// Paper-derived bounds on bank size.
pub const MIN_BANK_SIZE: usize = 50;
pub const MAX_BANK_SIZE: usize = 100;

pub const INJECTION_ATTEMPT: &str = "injection_attempt";
pub const EXFILTRATION_ATTEMPT: &str = "exfiltration_attempt";
pub const FABRICATED: &str = "fabricated";
pub const STEP_LABELS: [&str; 3] = [INJECTION_ATTEMPT, EXFILTRATION_ATTEMPT, FABRICATED];

/// Risk archetypes a bank is expected to exercise, carried as scenario tags.
pub const ARCHETYPES: [&str; 6] = [
    "covert-exfiltration",
    "plan-drift",
    "code-execution-hazard",
    "tool-chain-injection",
    "collusion",
    "false-legibility",
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("scenario `{scenario}`: {message}")]
    Validation { scenario: String, message: String },
    #[error("scenario `{scenario}`: no mock for tool `{tool}`")]
    MissingTool { scenario: String, tool: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("register has no risks")]
    EmptyRegister,
    #[error("gateway: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptedVerdict {
    Approve,
    Modify,
    Deny,
    /// Let the ticket time out.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorScript {
    pub verdict: ScriptedVerdict,
    #[serde(default = "default_operator")]
    pub operator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_args: Option<BTreeMap<String, Scalar>>,
    /// Virtual time before the operator answers.
    #[serde(default)]
    pub delay_ms: i64,
}

fn default_operator() -> String {
    "operator".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    Event {
        kind: EventKind,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        confidence: Option<f64>,
        #[serde(default)]
        delay_ms: i64,
        /// Containment level expected right after the event.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_level: Option<ContainmentLevel>,
    },
    ToolCall {
        tool: String,
        action: String,
        #[serde(default)]
        args: BTreeMap<String, Scalar>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resource: Option<String>,
        #[serde(default)]
        intent: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        confidence: Option<f64>,
        #[serde(default)]
        labels: BTreeSet<String>,
        #[serde(default)]
        delay_ms: i64,
        expect: OutcomeStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        operator: Option<OperatorScript>,
        /// Expected final status after the operator (or timeout) resolves.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_resolution: Option<OutcomeStatus>,
    },
}

/// Inject `level` while step `at_step` runs; the next tool call must not dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainmentProbe {
    pub at_step: usize,
    pub level: ContainmentLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario_id: String,
    pub title: String,
    pub risk_ids: Vec<String>,
    pub domains: BTreeSet<Domain>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    /// Accepted for authoring; coverage weights use severity only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<String>,
    pub declared_objective: String,
    pub script: Vec<Step>,
    #[serde(default)]
    pub containment_probes: Vec<ContainmentProbe>,
}

impl Scenario {
    pub fn validate(&self, register: &RiskRegister) -> Result<(), HarnessError> {
        let err = |message: String| HarnessError::Validation {
            scenario: self.scenario_id.clone(),
            message,
        };
        if self.risk_ids.is_empty() {
            return Err(err("risk_ids must not be empty".into()));
        }
        if let Some(r) = self.risk_ids.iter().find(|r| register.risk(r).is_none()) {
            return Err(err(format!("unknown risk `{r}`")));
        }
        if self.script.is_empty() {
            return Err(err("script must not be empty".into()));
        }
        for (i, step) in self.script.iter().enumerate() {
            if let Step::ToolCall {
                labels,
                expect,
                operator,
                expect_resolution,
                ..
            } = step
            {
                if let Some(l) = labels.iter().find(|l| !STEP_LABELS.contains(&l.as_str())) {
                    return Err(err(format!("step {i}: unknown label `{l}`")));
                }
                if *expect == OutcomeStatus::Escalated && operator.is_none() {
                    return Err(err(format!("step {i}: escalated steps need an operator verdict")));
                }
                if expect_resolution.is_some() && operator.is_none() {
                    return Err(err(format!("step {i}: expect_resolution without operator")));
                }
                if let Some(op) = operator {
                    if op.verdict == ScriptedVerdict::Modify && op.modified_args.is_none() {
                        return Err(err(format!("step {i}: modify needs modified_args")));
                    }
                }
            }
        }
        for p in &self.containment_probes {
            if p.at_step >= self.script.len() {
                return Err(err(format!("probe at step {} is past the script", p.at_step)));
            }
            if !p.level.halts() {
                return Err(err(format!("probe level {} does not halt", p.level)));
            }
        }
        Ok(())
    }

    pub fn tool_call_count(&self) -> usize {
        self.script.iter().filter(|s| matches!(s, Step::ToolCall { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioBank {
    pub scenarios: Vec<Scenario>,
    pub warnings: Vec<String>,
}

impl ScenarioBank {
    /// Build a bank from already-parsed scenarios.
    pub fn from_scenarios(mut scenarios: Vec<Scenario>, register: &RiskRegister) -> Result<Self, HarnessError> {
        let mut seen = BTreeSet::new();
        for s in &scenarios {
            s.validate(register)?;
            if !seen.insert(s.scenario_id.clone()) {
                return Err(HarnessError::Validation {
                    scenario: s.scenario_id.clone(),
                    message: "duplicate scenario_id".into(),
                });
            }
        }
        scenarios.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
        let mut warnings = Vec::new();
        if scenarios.len() < MIN_BANK_SIZE {
            warnings.push(format!(
                "bank has {} scenarios, fewer than {MIN_BANK_SIZE}",
                scenarios.len()
            ));
        }
        let covered: BTreeSet<Domain> = scenarios.iter().flat_map(|s| s.domains.iter().copied()).collect();
        for d in Domain::ALL {
            if !covered.contains(&d) {
                warnings.push(format!("no scenario covers domain `{d}`"));
            }
        }
        Ok(Self { scenarios, warnings })
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.scenarios.iter().flat_map(|s| s.domains.iter().copied()).collect()
    }

    /// Scenario count per archetype tag.
    pub fn archetype_counts(&self) -> BTreeMap<&'static str, usize> {
        ARCHETYPES
            .iter()
            .map(|a| (*a, self.scenarios.iter().filter(|s| s.tags.contains(*a)).count()))
            .collect()
    }
}

pub fn parse_scenario(text: &str, origin: &Path) -> Result<Scenario, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load every `*.json` file in `dir` as one scenario.
pub fn load_scenarios(dir: &Path, register: &RiskRegister) -> Result<ScenarioBank, HarnessError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let scenarios = paths
        .iter()
        .map(|p| parse_scenario(&std::fs::read_to_string(p).map_err(io(p))?, p))
        .collect::<Result<Vec<_>, _>>()?;
    ScenarioBank::from_scenarios(scenarios, register)
}

#[cfg(test)]
mod tests;
