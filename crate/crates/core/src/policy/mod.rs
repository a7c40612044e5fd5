//! Declarative policy language: parsing, linting against the risk register,
//! and evaluation of one action context to exactly one [`Decision`].
//!
//! ```text
//! policy "no-ehr-write" {
//!   when tool == "ehr" and action in ["write", "update", "delete"]
//!   then deny
//!   severity high
//!   reason "read-only EHR access"
//!   risk R-001
//! }
//! ```
//!
//! All policies whose condition holds match; the verdict is the most
//! restrictive matched effect. No match at all is a deny (`default-deny`).

mod ast;
mod lexer;
mod lint;
mod parser;
mod print;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ast::{CmpOp, Effect, Expr, Field, Literal, Operand, Policy};
pub use lint::{lint_policies, DiagSeverity, Diagnostic};
pub use print::{expr_to_string, policies_to_source, policy_to_source};

use crate::clock::Millis;

/// Reason string of the implicit least-privilege verdict.
pub const DEFAULT_DENY: &str = "default-deny";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("policy type error at {line}:{column}: {message}")]
    Type {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
}

/// Scalar value carried by tool arguments and session attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Dec(f64),
    Str(String),
}

impl Scalar {
    fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Dec(d) => Some(*d),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Dec(d) => write!(f, "{d}"),
            Scalar::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

impl From<i64> for Scalar {
    fn from(i: i64) -> Self {
        Scalar::Int(i)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

/// Everything a condition may observe about one proposed tool call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionContext {
    pub session_id: String,
    pub tool: String,
    pub action: String,
    pub args: BTreeMap<String, Scalar>,
    pub resource: Option<String>,
    pub session_attrs: BTreeMap<String, Scalar>,
    /// (tool, window seconds) -> observed call count
    pub rates: BTreeMap<(String, u64), u64>,
}

impl ActionContext {
    pub fn new(tool: impl Into<String>, action: impl Into<String>) -> Self {
        Self {
            tool: tool.into(),
            action: action.into(),
            ..Default::default()
        }
    }

    pub fn with_arg(mut self, name: &str, value: impl Into<Scalar>) -> Self {
        self.args.insert(name.to_string(), value.into());
        self
    }

    pub fn with_resource(mut self, resource: &str) -> Self {
        self.resource = Some(resource.to_string());
        self
    }

    pub fn with_rate(mut self, tool: &str, window_secs: u64, count: u64) -> Self {
        self.rates.insert((tool.to_string(), window_secs), count);
        self
    }

    fn field(&self, field: &Field) -> Option<Scalar> {
        match field {
            Field::Tool => Some(Scalar::Str(self.tool.clone())),
            Field::Action => Some(Scalar::Str(self.action.clone())),
            Field::SessionId => Some(Scalar::Str(self.session_id.clone())),
            Field::Resource => self.resource.clone().map(Scalar::Str),
            Field::Arg(name) => self.args.get(name).cloned(),
            Field::Session(name) => self.session_attrs.get(name).cloned(),
        }
    }

    fn operand(&self, op: &Operand) -> Option<Scalar> {
        match op {
            Operand::Field(f) => self.field(f),
            Operand::Literal(l) => Some(literal_scalar(l)),
            // an unobserved window counts as zero calls
            Operand::Rate { tool, window_secs } => Some(Scalar::Int(
                self.rates
                    .get(&(tool.clone(), *window_secs))
                    .copied()
                    .unwrap_or(0) as i64,
            )),
        }
    }
}

fn literal_scalar(l: &Literal) -> Scalar {
    match l {
        Literal::Str(s) => Scalar::Str(s.clone()),
        Literal::Int(i) => Scalar::Int(*i),
        Literal::Dec(d) => Scalar::Dec(*d),
        Literal::Bool(b) => Scalar::Bool(*b),
    }
}

fn scalar_cmp(a: &Scalar, op: CmpOp, b: &Scalar) -> bool {
    use std::cmp::Ordering;
    let ord: Option<Ordering> = match (a, b) {
        (Scalar::Str(x), Scalar::Str(y)) => {
            if op.is_ordering() {
                return false;
            }
            Some(x.cmp(y))
        }
        (Scalar::Bool(x), Scalar::Bool(y)) => {
            if op.is_ordering() {
                return false;
            }
            Some(x.cmp(y))
        }
        (Scalar::Int(x), Scalar::Int(y)) => Some(x.cmp(y)),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x.partial_cmp(&y),
            // mismatched runtime types never compare true
            _ => None,
        },
    };
    let Some(ord) = ord else { return false };
    match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    }
}

/// Evaluate a condition. Absent fields make their comparison false.
pub fn eval_expr(expr: &Expr, ctx: &ActionContext) -> bool {
    match expr {
        Expr::Const(b) => *b,
        Expr::Cmp { lhs, op, rhs } => match (ctx.operand(lhs), ctx.operand(rhs)) {
            (Some(a), Some(b)) => scalar_cmp(&a, *op, &b),
            _ => false,
        },
        Expr::In { operand, set } => match ctx.operand(operand) {
            Some(v) => set
                .iter()
                .any(|l| scalar_cmp(&v, CmpOp::Eq, &literal_scalar(l))),
            None => false,
        },
        Expr::Matches { operand, pattern } => match ctx.operand(operand) {
            Some(Scalar::Str(s)) => pattern.matches(&s),
            _ => false,
        },
        Expr::Not(inner) => !eval_expr(inner, ctx),
        Expr::And(a, b) => eval_expr(a, ctx) && eval_expr(b, ctx),
        Expr::Or(a, b) => eval_expr(a, ctx) || eval_expr(b, ctx),
    }
}

/// The verdict for one action context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Effect,
    pub matched_policies: Vec<String>,
    pub reason: String,
    pub policy_digest: String,
    pub decided_at: Millis,
}

impl Decision {
    pub fn is_default_deny(&self) -> bool {
        self.verdict == Effect::Deny && self.matched_policies.is_empty() && self.reason == DEFAULT_DENY
    }
}

/// A parsed, immutable set of policies.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub policies: Vec<Policy>,
    pub source_digest: String,
    pub version_label: String,
}

/// Canonical policy source: LF line endings, no trailing whitespace per line.
pub fn canonicalize_source(source: &str) -> String {
    let normalized = source.replace("\r\n", "\n").replace('\r', "\n");
    normalized
        .split('\n')
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
}

/// SHA-256 (hex) of the canonical form of `source`.
pub fn source_digest(source: &str) -> String {
    hex::encode(Sha256::digest(canonicalize_source(source).as_bytes()))
}

pub fn parse_policy(source: &str) -> Result<PolicySet, PolicyError> {
    PolicySet::parse(source, "unversioned")
}

impl PolicySet {
    pub fn parse(source: &str, version_label: &str) -> Result<Self, PolicyError> {
        let policies = parser::parse_policies(source)?;
        Ok(Self {
            policies,
            source_digest: source_digest(source),
            version_label: version_label.to_string(),
        })
    }

    pub fn empty() -> Self {
        Self {
            policies: Vec::new(),
            source_digest: source_digest(""),
            version_label: "empty".to_string(),
        }
    }

    pub fn digest(&self) -> &str {
        &self.source_digest
    }

    pub fn get(&self, name: &str) -> Option<&Policy> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn to_source(&self) -> String {
        policies_to_source(&self.policies)
    }

    /// A copy with one policy removed; the digest covers the re-rendered source.
    pub fn without(&self, name: &str) -> Result<PolicySet, PolicyError> {
        if self.get(name).is_none() {
            return Err(PolicyError::UnknownPolicy(name.to_string()));
        }
        let policies: Vec<Policy> = self.policies.iter().filter(|p| p.name != name).cloned().collect();
        let source = policies_to_source(&policies);
        Ok(PolicySet {
            policies,
            source_digest: source_digest(&source),
            version_label: format!("{}-without-{name}", self.version_label),
        })
    }

    /// Every `(tool, window)` pair some condition reads through `rate(...)`.
    pub fn rate_windows(&self) -> BTreeSet<(String, u64)> {
        fn walk(e: &Expr, out: &mut BTreeSet<(String, u64)>) {
            let mut op = |o: &Operand| {
                if let Operand::Rate { tool, window_secs } = o {
                    out.insert((tool.clone(), *window_secs));
                }
            };
            match e {
                Expr::Const(_) => {}
                Expr::Cmp { lhs, rhs, .. } => {
                    op(lhs);
                    op(rhs);
                }
                Expr::In { operand, .. } | Expr::Matches { operand, .. } => op(operand),
                Expr::Not(i) => walk(i, out),
                Expr::And(a, b) | Expr::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        for p in &self.policies {
            walk(&p.condition, &mut out);
        }
        out
    }

    pub fn evaluate(&self, ctx: &ActionContext, decided_at: Millis) -> Decision {
        let matched: Vec<&Policy> = self
            .policies
            .iter()
            .filter(|p| eval_expr(&p.condition, ctx))
            .collect();

        let Some(winner) = matched
            .iter()
            .copied()
            .reduce(|best, p| {
                if p.effect.restrictiveness_cmp(&best.effect).is_gt() {
                    p
                } else {
                    best
                }
            })
        else {
            return Decision {
                verdict: Effect::Deny,
                matched_policies: Vec::new(),
                reason: DEFAULT_DENY.to_string(),
                policy_digest: self.source_digest.clone(),
                decided_at,
            };
        };

        Decision {
            verdict: winner.effect,
            matched_policies: matched.iter().map(|p| p.name.clone()).collect(),
            reason: if winner.reason.is_empty() {
                winner.name.clone()
            } else {
                winner.reason.clone()
            },
            policy_digest: self.source_digest.clone(),
            decided_at,
        }
    }
}
