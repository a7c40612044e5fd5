use std::fmt;

use serde::{Deserialize, Serialize};

use crate::register::Severity;
use crate::triage::ContainmentLevel;

/// Action-context field a condition can read.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Tool,
    Action,
    Resource,
    SessionId,
    Arg(String),
    Session(String),
}

impl Field {
    pub(crate) fn static_type(&self) -> ValueType {
        match self {
            Field::Tool | Field::Action | Field::Resource | Field::SessionId => ValueType::Str,
            Field::Arg(_) | Field::Session(_) => ValueType::Dynamic,
        }
    }

    /// Whether the field may be absent from a context.
    pub(crate) fn optional(&self) -> bool {
        matches!(self, Field::Resource | Field::Arg(_) | Field::Session(_))
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Tool => f.write_str("tool"),
            Field::Action => f.write_str("action"),
            Field::Resource => f.write_str("resource"),
            Field::SessionId => f.write_str("session_id"),
            Field::Arg(name) => write!(f, "args.{name}"),
            Field::Session(name) => write!(f, "session.{name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ValueType {
    Str,
    Num,
    Bool,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Dec(f64),
    Bool(bool),
}

impl Literal {
    pub(crate) fn value_type(&self) -> ValueType {
        match self {
            Literal::Str(_) => ValueType::Str,
            Literal::Int(_) | Literal::Dec(_) => ValueType::Num,
            Literal::Bool(_) => ValueType::Bool,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Field(Field),
    Literal(Literal),
    /// Observed call count for `tool` over the trailing `window_secs`.
    Rate { tool: String, window_secs: u64 },
}

impl Operand {
    pub(crate) fn value_type(&self) -> ValueType {
        match self {
            Operand::Field(f) => f.static_type(),
            Operand::Literal(l) => l.value_type(),
            Operand::Rate { .. } => ValueType::Num,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub(crate) fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(bool),
    Cmp {
        lhs: Operand,
        op: CmpOp,
        rhs: Operand,
    },
    In {
        operand: Operand,
        set: Vec<Literal>,
    },
    Matches {
        operand: Operand,
        pattern: glob::Pattern,
    },
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

/// Effect of a matching policy; also the verdict of a [`super::Decision`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Effect {
    Allow,
    Deny,
    Escalate,
    /// Multiplicative factor in (0, 1] applied to capability rate limits.
    Throttle(f64),
    Contain(ContainmentLevel),
}

impl Effect {
    /// Position in the combination order; larger is more restrictive.
    ///
    /// The canonical order is kill > isolate > pause > deny > escalate >
    /// throttle > allow. `contain monitor` sits just above allow and
    /// `contain throttle` just above a plain throttle.
    fn rank(self) -> u8 {
        match self {
            Effect::Allow => 0,
            Effect::Contain(ContainmentLevel::Monitor) => 1,
            Effect::Throttle(_) => 2,
            Effect::Contain(ContainmentLevel::Throttle) => 3,
            Effect::Escalate => 4,
            Effect::Deny => 5,
            Effect::Contain(ContainmentLevel::Pause) => 6,
            Effect::Contain(ContainmentLevel::Isolate) => 7,
            Effect::Contain(ContainmentLevel::Kill) => 8,
        }
    }

    /// Total restrictiveness order. Among throttles the smaller factor wins.
    pub fn restrictiveness_cmp(&self, other: &Effect) -> std::cmp::Ordering {
        match (self, other) {
            (Effect::Throttle(a), Effect::Throttle(b)) => b.total_cmp(a),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    pub fn is_permissive(self) -> bool {
        matches!(self, Effect::Allow | Effect::Throttle(_))
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Effect::Allow => f.write_str("allow"),
            Effect::Deny => f.write_str("deny"),
            Effect::Escalate => f.write_str("escalate"),
            Effect::Throttle(factor) => write!(f, "throttle {factor:?}"),
            Effect::Contain(level) => write!(f, "contain {level}"),
        }
    }
}

impl std::str::FromStr for Effect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let head = parts.next().unwrap_or_default();
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(format!("bad verdict `{s}`"));
        }
        match (head, arg) {
            ("allow", None) => Ok(Effect::Allow),
            ("deny", None) => Ok(Effect::Deny),
            ("escalate", None) => Ok(Effect::Escalate),
            ("throttle", Some(x)) => {
                let factor: f64 = x.parse().map_err(|_| format!("bad throttle factor `{x}`"))?;
                if factor > 0.0 && factor <= 1.0 {
                    Ok(Effect::Throttle(factor))
                } else {
                    Err(format!("throttle factor {factor} outside (0, 1]"))
                }
            }
            ("contain", Some(level)) => Ok(Effect::Contain(level.parse()?)),
            _ => Err(format!("bad verdict `{s}`")),
        }
    }
}

impl Serialize for Effect {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Effect {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub name: String,
    pub condition: Expr,
    pub effect: Effect,
    pub severity: Severity,
    pub reason: String,
    pub risk_ids: Vec<String>,
}
