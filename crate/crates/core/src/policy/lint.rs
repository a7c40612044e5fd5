//! Static checks of a policy set against the risk register.
//!
//! Unreachable conditions are found by exhaustive evaluation over a small
//! representative domain per field: every literal the set mentions, values
//! adjacent to numeric literals, a witness string for each glob, a fresh value
//! and, for optional fields, absence. Conditions whose domain product is too
//! large are skipped rather than guessed at.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::ast::*;
use super::{eval_expr, ActionContext, PolicySet, Scalar};
use crate::register::RiskRegister;

const MAX_ASSIGNMENTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagSeverity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: DiagSeverity,
    /// `unknown-risk`, `uncovered-risk` or `unreachable`.
    pub code: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_id: Option<String>,
    pub message: String,
}

pub fn lint_policies(policy_set: &PolicySet, register: &RiskRegister) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut referenced = BTreeSet::new();

    for policy in &policy_set.policies {
        for risk_id in &policy.risk_ids {
            referenced.insert(risk_id.as_str());
            if register.risk(risk_id).is_none() {
                out.push(Diagnostic {
                    severity: DiagSeverity::Error,
                    code: "unknown-risk",
                    policy: Some(policy.name.clone()),
                    risk_id: Some(risk_id.clone()),
                    message: format!(
                        "policy `{}` references risk `{risk_id}` which is not in register `{}`",
                        policy.name, register.register_id
                    ),
                });
            }
        }
        if condition_is_constant_false(&policy.condition) {
            out.push(Diagnostic {
                severity: DiagSeverity::Warning,
                code: "unreachable",
                policy: Some(policy.name.clone()),
                risk_id: None,
                message: format!("condition of `{}` can never be true", policy.name),
            });
        }
    }

    for risk in &register.risks {
        if !referenced.contains(risk.risk_id.as_str()) {
            out.push(Diagnostic {
                severity: DiagSeverity::Warning,
                code: "uncovered-risk",
                policy: None,
                risk_id: Some(risk.risk_id.clone()),
                message: format!("uncovered risk: no policy references `{}` ({})", risk.risk_id, risk.name),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Field(Field),
    Rate(String, u64),
}

/// True if the condition is false under every representative assignment.
/// Returns false when the domain is too large to enumerate.
pub(crate) fn condition_is_constant_false(expr: &Expr) -> bool {
    let mut domains: BTreeMap<Slot, Vec<Option<Scalar>>> = BTreeMap::new();
    collect(expr, &mut domains);

    let slots: Vec<(Slot, Vec<Option<Scalar>>)> = domains
        .into_iter()
        .map(|(slot, mut values)| {
            let optional = match &slot {
                Slot::Field(f) => f.optional(),
                Slot::Rate(..) => false,
            };
            let mut uniq: Vec<Option<Scalar>> = Vec::new();
            values.push(Some(Scalar::Str("\u{1}fresh".to_string())));
            if optional {
                values.push(None);
            }
            for v in values {
                if !uniq.contains(&v) {
                    uniq.push(v);
                }
            }
            (slot, uniq)
        })
        .collect();

    let total = slots
        .iter()
        .try_fold(1usize, |acc, (_, vals)| acc.checked_mul(vals.len()));
    match total {
        Some(n) if n <= MAX_ASSIGNMENTS => {}
        _ => return false,
    }

    let mut idx = vec![0usize; slots.len()];
    loop {
        let mut ctx = ActionContext::default();
        for (i, (slot, values)) in slots.iter().enumerate() {
            assign(&mut ctx, slot, values[idx[i]].clone());
        }
        if eval_expr(expr, &ctx) {
            return false;
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == slots.len() {
                return true;
            }
            idx[k] += 1;
            if idx[k] < slots[k].1.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn assign(ctx: &mut ActionContext, slot: &Slot, value: Option<Scalar>) {
    match slot {
        Slot::Rate(tool, w) => {
            let n = match value {
                Some(Scalar::Int(i)) if i >= 0 => i as u64,
                Some(Scalar::Dec(d)) if d >= 0.0 => d.ceil() as u64,
                _ => 0,
            };
            ctx.rates.insert((tool.clone(), *w), n);
        }
        Slot::Field(field) => {
            let as_str = |v: Option<Scalar>| match v {
                Some(Scalar::Str(s)) => s,
                Some(other) => other.to_string(),
                None => String::new(),
            };
            match field {
                Field::Tool => ctx.tool = as_str(value),
                Field::Action => ctx.action = as_str(value),
                Field::SessionId => ctx.session_id = as_str(value),
                Field::Resource => ctx.resource = value.map(|v| as_str(Some(v))),
                Field::Arg(name) => {
                    if let Some(v) = value {
                        ctx.args.insert(name.clone(), v);
                    }
                }
                Field::Session(name) => {
                    if let Some(v) = value {
                        ctx.session_attrs.insert(name.clone(), v);
                    }
                }
            }
        }
    }
}

fn slot_of(op: &Operand) -> Option<Slot> {
    match op {
        Operand::Field(f) => Some(Slot::Field(f.clone())),
        Operand::Rate { tool, window_secs } => Some(Slot::Rate(tool.clone(), *window_secs)),
        Operand::Literal(_) => None,
    }
}

fn candidates(lit: &Literal) -> Vec<Scalar> {
    match lit {
        Literal::Str(s) => vec![Scalar::Str(s.clone())],
        Literal::Bool(b) => vec![Scalar::Bool(*b), Scalar::Bool(!*b)],
        Literal::Int(i) => vec![
            Scalar::Int(i.saturating_sub(1)),
            Scalar::Int(*i),
            Scalar::Int(i.saturating_add(1)),
            Scalar::Int(0),
        ],
        Literal::Dec(d) => vec![
            Scalar::Dec(d - 0.5),
            Scalar::Dec(*d),
            Scalar::Dec(d + 0.5),
            Scalar::Int(0),
        ],
    }
}

fn glob_witnesses(pattern: &glob::Pattern) -> Vec<Scalar> {
    let raw = pattern.as_str();
    let mut out = Vec::new();
    for fill in ["", "x", "zz/zz"] {
        let mut s = String::new();
        let mut chars = raw.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '*' => s.push_str(fill),
                '?' => s.push('x'),
                '[' => {
                    let mut class = String::new();
                    for d in chars.by_ref() {
                        if d == ']' {
                            break;
                        }
                        class.push(d);
                    }
                    let first = class
                        .trim_start_matches(['!', '^'])
                        .chars()
                        .next()
                        .unwrap_or('x');
                    s.push(first);
                }
                c => s.push(c),
            }
        }
        if pattern.matches(&s) {
            out.push(Scalar::Str(s));
        }
    }
    out
}

fn collect(expr: &Expr, domains: &mut BTreeMap<Slot, Vec<Option<Scalar>>>) {
    match expr {
        Expr::Const(_) => {}
        Expr::Cmp { lhs, rhs, .. } => {
            for (side, other) in [(lhs, rhs), (rhs, lhs)] {
                if let Some(slot) = slot_of(side) {
                    let entry = domains.entry(slot).or_default();
                    if let Operand::Literal(l) = other {
                        entry.extend(candidates(l).into_iter().map(Some));
                    }
                }
            }
        }
        Expr::In { operand, set } => {
            if let Some(slot) = slot_of(operand) {
                let entry = domains.entry(slot).or_default();
                for l in set {
                    entry.extend(candidates(l).into_iter().map(Some));
                }
            }
        }
        Expr::Matches { operand, pattern } => {
            if let Some(slot) = slot_of(operand) {
                domains
                    .entry(slot)
                    .or_default()
                    .extend(glob_witnesses(pattern).into_iter().map(Some));
            }
        }
        Expr::Not(inner) => collect(inner, domains),
        Expr::And(a, b) | Expr::Or(a, b) => {
            collect(a, domains);
            collect(b, domains);
        }
    }
}
