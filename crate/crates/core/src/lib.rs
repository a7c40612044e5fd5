//! Runtime governance for tool-using agents.
//!
//! Every tool call an agent proposes passes through a [`gateway::Gateway`]:
//! capability sandbox, policy gates, human escalation and graduated
//! containment. Each step is written to a signed hash-chain [`ledger`], from
//! which an action provenance graph can be rebuilt. The [`evalharness`]
//! replays scripted scenario banks through a real gateway and scores the run.

pub mod canonical;
pub mod clock;
pub mod escalation;
pub mod evalharness;
pub mod gateway;
pub mod ledger;
pub mod policy;
pub mod register;
pub mod telemetry;
pub mod triage;

/// Shell-style glob match; an invalid pattern matches nothing.
pub fn glob_match(pattern: &str, candidate: &str) -> bool {
    glob::Pattern::new(pattern)
        .map(|p| p.matches(candidate))
        .unwrap_or(false)
}
