//! Agent-semantic events and goal/plan drift scoring.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::register::Phase;
use crate::triage::ContainmentLevel;

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_DRIFT_TRIGGER: u32 = 3;
const SCORE_HISTORY: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("event kind `{0}` is not scored for drift (only goal and plan are)")]
    WrongEventKind(EventKind),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Goal,
    Plan,
    PlanStep,
    ToolCallIntent,
    Observation,
    Reflection,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Goal => "goal",
            EventKind::Plan => "plan",
            EventKind::PlanStep => "plan-step",
            EventKind::ToolCallIntent => "tool-call-intent",
            EventKind::Observation => "observation",
            EventKind::Reflection => "reflection",
        }
    }

    /// The loop phase this kind belongs to.
    pub fn phase(self) -> Phase {
        match self {
            EventKind::Goal | EventKind::Plan | EventKind::PlanStep => Phase::Plan,
            EventKind::ToolCallIntent => Phase::Act,
            EventKind::Observation => Phase::Observe,
            EventKind::Reflection => Phase::Reflect,
        }
    }

    pub fn is_drift_scored(self) -> bool {
        matches!(self, EventKind::Goal | EventKind::Plan)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticEvent {
    #[serde(default)]
    pub event_id: String,
    #[serde(default)]
    pub session_id: String,
    pub phase: Phase,
    pub kind: EventKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub ts: Millis,
}

impl SemanticEvent {
    pub fn new(kind: EventKind, text: impl Into<String>) -> Self {
        Self {
            event_id: String::new(),
            session_id: String::new(),
            phase: kind.phase(),
            kind,
            text: text.into(),
            confidence: None,
            ts: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(TelemetryError::InvalidEvent(format!("confidence {c} outside [0, 1]")));
            }
        }
        if self.kind.phase() != self.phase {
            return Err(TelemetryError::InvalidEvent(format!(
                "kind `{}` does not belong to phase `{}`",
                self.kind,
                self.phase.as_str()
            )));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Jaccard distance between the token sets of two texts.
pub fn drift_score(declared: &str, current: &str) -> f64 {
    let a = tokenize(declared);
    let b = tokenize(current);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 1.0,
        _ => {}
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    1.0 - inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub declared_objective: String,
    pub last_scores: VecDeque<f64>,
    pub consecutive_above: u32,
    pub threshold: f64,
    pub trigger_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAlert {
    /// Scores of the trailing above-threshold run, oldest first.
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub trigger_count: u32,
    pub response_level: ContainmentLevel,
}

impl DriftState {
    pub fn new(declared_objective: impl Into<String>) -> Self {
        Self::with_params(declared_objective, DEFAULT_DRIFT_THRESHOLD, DEFAULT_DRIFT_TRIGGER)
    }

    pub fn with_params(declared_objective: impl Into<String>, threshold: f64, trigger_count: u32) -> Self {
        Self {
            declared_objective: declared_objective.into(),
            last_scores: VecDeque::new(),
            consecutive_above: 0,
            threshold: threshold.clamp(0.0, 1.0),
            trigger_count: trigger_count.max(1),
        }
    }

    pub fn last_score(&self) -> Option<f64> {
        self.last_scores.back().copied()
    }

    fn push(&mut self, score: f64) {
        if self.last_scores.len() == SCORE_HISTORY {
            self.last_scores.pop_front();
        }
        self.last_scores.push_back(score);
        if score > self.threshold {
            self.consecutive_above += 1;
        } else {
            self.consecutive_above = 0;
        }
    }

    fn trailing_run(&self) -> Vec<f64> {
        let n = (self.consecutive_above as usize).min(self.last_scores.len());
        self.last_scores.iter().skip(self.last_scores.len() - n).copied().collect()
    }
}

/// Score a goal or plan event against the declared objective.
pub fn assess_drift(
    state: &DriftState,
    event: &SemanticEvent,
) -> Result<(DriftState, Option<DriftAlert>), TelemetryError> {
    if !event.kind.is_drift_scored() {
        return Err(TelemetryError::WrongEventKind(event.kind));
    }
    let mut next = state.clone();
    next.push(drift_score(&state.declared_objective, &event.text));
    let alert = (next.consecutive_above >= next.trigger_count).then(|| DriftAlert {
        scores: next.trailing_run(),
        threshold: next.threshold,
        trigger_count: next.trigger_count,
        response_level: ContainmentLevel::Pause,
    });
    Ok((next, alert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent token-set distance: sorted vectors, merge-count.
    fn oracle(a: &str, b: &str) -> f64 {
        let norm = |s: &str| {
            let mut v: Vec<String> = s
                .to_lowercase()
                .split_whitespace()
                .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
                .filter(|w| !w.is_empty())
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let (x, y) = (norm(a), norm(b));
        if x.is_empty() && y.is_empty() {
            return 0.0;
        }
        let inter = x.iter().filter(|t| y.contains(t)).count();
        let union = x.len() + y.iter().filter(|t| !x.contains(t)).count();
        1.0 - inter as f64 / union as f64
    }

    #[test]
    fn identical_text_scores_zero() {
        assert_eq!(drift_score("Summarize patient record 123", "Summarize patient record 123"), 0.0);
        assert_eq!(drift_score("", ""), 0.0);
    }

    #[test]
    fn patient_example() {
        let s = drift_score("summarize patient record 123", "query all patient records");
        assert!((s - 6.0 / 7.0).abs() < 1e-12);
        assert!((s - oracle("summarize patient record 123", "query all patient records")).abs() < 1e-12);
    }

    #[test]
    fn one_empty_side_scores_one() {
        assert_eq!(drift_score("", "anything"), 1.0);
        assert_eq!(drift_score("anything", "  ?! "), 1.0);
    }

    #[test]
    fn punctuation_and_case_are_ignored() {
        assert_eq!(drift_score("Record #123, please!", "record 123 please"), 0.0);
    }

    fn run(scores_text: &[&str], state: &mut DriftState) -> Vec<bool> {
        scores_text
            .iter()
            .map(|t| {
                let (next, alert) = assess_drift(state, &SemanticEvent::new(EventKind::Goal, *t)).unwrap();
                *state = next;
                alert.is_some()
            })
            .collect()
    }

    #[test]
    fn alert_on_third_consecutive_high_score() {
        // "a b c d e" vs "a x y z w": 1 shared of 9 -> 0.888..
        let mut state = DriftState::with_params("a b c d e", 0.7, 3);
        let alerts = run(&["a x y z w", "a x y z w", "a x y z w"], &mut state);
        assert_eq!(alerts, vec![false, false, true]);
        assert_eq!(state.consecutive_above, 3);
    }

    #[test]
    fn broken_run_does_not_alert() {
        let mut state = DriftState::with_params("a b c d e", 0.7, 3);
        // middle event scores 0.0
        let alerts = run(&["a x y z w", "a b c d e", "a x y z w"], &mut state);
        assert_eq!(alerts, vec![false, false, false]);
        assert_eq!(state.consecutive_above, 1);
    }

    #[test]
    fn observation_is_wrong_kind() {
        let state = DriftState::new("x");
        let err = assess_drift(&state, &SemanticEvent::new(EventKind::Observation, "x")).unwrap_err();
        assert_eq!(err, TelemetryError::WrongEventKind(EventKind::Observation));
    }

    #[test]
    fn phase_consistency_is_checked() {
        let mut e = SemanticEvent::new(EventKind::Observation, "x");
        assert!(e.validate().is_ok());
        e.phase = Phase::Plan;
        assert!(e.validate().is_err());
        let mut c = SemanticEvent::new(EventKind::Goal, "x");
        c.confidence = Some(1.5);
        assert!(c.validate().is_err());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "B", "c!", "d", "", "ée", "42"]), 0..6)
            .prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_matches_oracle(a in arb_text(), b in arb_text()) {
            let s = drift_score(&a, &b);
            prop_assert_eq!(s, drift_score(&b, &a));
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s - oracle(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(s == 0.0, tokenize(&a) == tokenize(&b));
        }

        #[test]
        fn alerting_replays_from_scores(texts in prop::collection::vec(arb_text(), 0..12), trigger in 1u32..4) {
            let declared = "a b c";
            let mut state = DriftState::with_params(declared, 0.5, trigger);
            let mut run_len = 0u32;
            for t in &texts {
                let (next, alert) = assess_drift(&state, &SemanticEvent::new(EventKind::Plan, t.clone())).unwrap();
                state = next;
                run_len = if oracle(declared, t) > 0.5 { run_len + 1 } else { 0 };
                prop_assert_eq!(alert.is_some(), run_len >= trigger);
                if let Some(a) = alert {
                    prop_assert_eq!(a.scores.len() as u32, run_len.min(32));
                }
            }
        }
    }
}
