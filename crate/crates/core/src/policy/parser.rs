use std::collections::HashSet;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::PolicyError;
use crate::register::Severity;

pub(crate) fn parse_policies(source: &str) -> Result<Vec<Policy>, PolicyError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, pos: 0 };
    let mut policies = Vec::new();
    let mut names = HashSet::new();
    while !parser.at_eof() {
        let (line, col) = parser.position();
        let policy = parser.policy()?;
        if !names.insert(policy.name.clone()) {
            return Err(PolicyError::Parse {
                line,
                column: col,
                message: format!("duplicate policy name `{}`", policy.name),
            });
        }
        policies.push(policy);
    }
    Ok(policies)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn position(&self) -> (usize, usize) {
        let t = &self.tokens[self.pos];
        (t.line, t.col)
    }

    fn at_eof(&self) -> bool {
        matches!(self.peek(), Tok::Eof)
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if !matches!(t.tok, Tok::Eof) {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, message: impl Into<String>) -> PolicyError {
        let (line, column) = self.position();
        PolicyError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn type_err(&self, at: (usize, usize), message: impl Into<String>) -> PolicyError {
        PolicyError::Type {
            line: at.0,
            column: at.1,
            message: message.into(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PolicyError> {
        if self.is_keyword(kw) {
            self.next();
            Ok(())
        } else {
            Err(self.err_here(format!("expected `{kw}`, found {}", describe(self.peek()))))
        }
    }

    fn expect(&mut self, want: Tok, label: &str) -> Result<(), PolicyError> {
        if *self.peek() == want {
            self.next();
            Ok(())
        } else {
            Err(self.err_here(format!("expected {label}, found {}", describe(self.peek()))))
        }
    }

    fn string(&mut self) -> Result<String, PolicyError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.next();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected string, found {}", describe(&other)))),
        }
    }

    fn ident(&mut self) -> Result<String, PolicyError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected identifier, found {}", describe(&other)))),
        }
    }

    fn policy(&mut self) -> Result<Policy, PolicyError> {
        self.keyword("policy")?;
        let name = self.string()?;
        if name.is_empty() {
            return Err(self.err_here("policy name must be non-empty"));
        }
        self.expect(Tok::LBrace, "`{`")?;
        self.keyword("when")?;
        let condition = self.expr()?;
        self.keyword("then")?;
        let effect = self.effect()?;

        let mut severity = None;
        let mut reason = None;
        let mut risk_ids: Option<Vec<String>> = None;
        loop {
            match self.peek().clone() {
                Tok::RBrace => {
                    self.next();
                    break;
                }
                Tok::Ident(kw) if kw == "severity" => {
                    self.next();
                    if severity.is_some() {
                        return Err(self.err_here("duplicate `severity`"));
                    }
                    let word = self.ident()?;
                    severity = Some(
                        word.parse::<Severity>()
                            .map_err(|m| self.err_here(m))?,
                    );
                }
                Tok::Ident(kw) if kw == "reason" => {
                    self.next();
                    if reason.is_some() {
                        return Err(self.err_here("duplicate `reason`"));
                    }
                    reason = Some(self.string()?);
                }
                Tok::Ident(kw) if kw == "risk" => {
                    self.next();
                    if risk_ids.is_some() {
                        return Err(self.err_here("duplicate `risk`"));
                    }
                    let mut ids = vec![self.ident()?];
                    while *self.peek() == Tok::Comma {
                        self.next();
                        ids.push(self.ident()?);
                    }
                    risk_ids = Some(ids);
                }
                other => {
                    return Err(self.err_here(format!(
                        "expected `severity`, `reason`, `risk` or `}}`, found {}",
                        describe(&other)
                    )))
                }
            }
        }

        Ok(Policy {
            name,
            condition,
            effect,
            severity: severity.unwrap_or(Severity::Medium),
            reason: reason.unwrap_or_default(),
            risk_ids: risk_ids.unwrap_or_default(),
        })
    }

    fn effect(&mut self) -> Result<Effect, PolicyError> {
        let (line, column) = self.position();
        let word = self.ident()?;
        match word.as_str() {
            "allow" => Ok(Effect::Allow),
            "deny" => Ok(Effect::Deny),
            "escalate" => Ok(Effect::Escalate),
            "throttle" => {
                let factor = match self.peek().clone() {
                    Tok::Int(i) => i as f64,
                    Tok::Dec(d) => d,
                    other => {
                        return Err(self.err_here(format!(
                            "expected throttle factor, found {}",
                            describe(&other)
                        )))
                    }
                };
                if !(factor > 0.0 && factor <= 1.0) {
                    return Err(self.err_here(format!("throttle factor {factor} outside (0, 1]")));
                }
                self.next();
                Ok(Effect::Throttle(factor))
            }
            "contain" => {
                let level = self.ident()?;
                level
                    .parse()
                    .map(Effect::Contain)
                    .map_err(|m: String| self.err_here(m))
            }
            other => Err(PolicyError::Parse {
                line,
                column,
                message: format!("unknown effect `{other}`"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, PolicyError> {
        let mut lhs = self.and_expr()?;
        while self.is_keyword("or") {
            self.next();
            let rhs = self.and_expr()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, PolicyError> {
        let mut lhs = self.unary()?;
        while self.is_keyword("and") {
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, PolicyError> {
        if self.is_keyword("not") {
            self.next();
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if *self.peek() == Tok::LParen {
            self.next();
            let inner = self.expr()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(inner);
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, PolicyError> {
        let at = self.position();
        let lhs = self.operand()?;
        match self.peek().clone() {
            Tok::Cmp(op) => {
                self.next();
                let rhs_at = self.position();
                let rhs = self.operand()?;
                check_cmp(&lhs, op, &rhs).map_err(|m| self.type_err(rhs_at, m))?;
                Ok(Expr::Cmp { lhs, op, rhs })
            }
            Tok::Ident(kw) if kw == "in" => {
                self.next();
                self.expect(Tok::LBracket, "`[`")?;
                let mut set = Vec::new();
                if *self.peek() != Tok::RBracket {
                    loop {
                        let lit_at = self.position();
                        let lit = self.literal()?;
                        if !compatible(lhs.value_type(), lit.value_type()) {
                            return Err(self.type_err(
                                lit_at,
                                format!("`{}` compared with incompatible literal", render_operand(&lhs)),
                            ));
                        }
                        set.push(lit);
                        if *self.peek() == Tok::Comma {
                            self.next();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RBracket, "`]`")?;
                let kinds: HashSet<_> = set.iter().map(|l| type_key(l.value_type())).collect();
                if kinds.len() > 1 {
                    return Err(self.type_err(at, "membership set mixes literal types"));
                }
                Ok(Expr::In { operand: lhs, set })
            }
            Tok::Ident(kw) if kw == "matches" => {
                self.next();
                if !compatible(lhs.value_type(), ValueType::Str) {
                    return Err(self.type_err(at, "`matches` requires a string operand"));
                }
                let pat_at = self.position();
                let raw = self.string()?;
                let pattern = glob::Pattern::new(&raw).map_err(|e| PolicyError::Parse {
                    line: pat_at.0,
                    column: pat_at.1,
                    message: format!("bad glob pattern: {e}"),
                })?;
                Ok(Expr::Matches { operand: lhs, pattern })
            }
            _ => match lhs {
                Operand::Literal(Literal::Bool(b)) => Ok(Expr::Const(b)),
                _ => Err(self.err_here(format!(
                    "expected comparison operator, `in` or `matches`, found {}",
                    describe(self.peek())
                ))),
            },
        }
    }

    fn literal(&mut self) -> Result<Literal, PolicyError> {
        match self.operand()? {
            Operand::Literal(l) => Ok(l),
            _ => Err(self.err_here("expected literal")),
        }
    }

    fn operand(&mut self) -> Result<Operand, PolicyError> {
        let t = self.next();
        match t.tok {
            Tok::Str(s) => Ok(Operand::Literal(Literal::Str(s))),
            Tok::Int(i) => Ok(Operand::Literal(Literal::Int(i))),
            Tok::Dec(d) => Ok(Operand::Literal(Literal::Dec(d))),
            Tok::Ident(word) => match word.as_str() {
                "true" => Ok(Operand::Literal(Literal::Bool(true))),
                "false" => Ok(Operand::Literal(Literal::Bool(false))),
                "tool" => Ok(Operand::Field(Field::Tool)),
                "action" => Ok(Operand::Field(Field::Action)),
                "resource" => Ok(Operand::Field(Field::Resource)),
                "session_id" => Ok(Operand::Field(Field::SessionId)),
                "rate" => self.rate(),
                w => {
                    let field = w
                        .strip_prefix("args.")
                        .filter(|n| valid_name(n))
                        .map(|n| Field::Arg(n.to_string()))
                        .or_else(|| {
                            w.strip_prefix("session.")
                                .filter(|n| valid_name(n))
                                .map(|n| Field::Session(n.to_string()))
                        });
                    field.map(Operand::Field).ok_or(PolicyError::Parse {
                        line: t.line,
                        column: t.col,
                        message: format!("unknown field `{w}`"),
                    })
                }
            },
            other => Err(PolicyError::Parse {
                line: t.line,
                column: t.col,
                message: format!("expected operand, found {}", describe(&other)),
            }),
        }
    }

    fn rate(&mut self) -> Result<Operand, PolicyError> {
        self.expect(Tok::LParen, "`(` after `rate`")?;
        let tool = match self.next().tok {
            Tok::Str(s) | Tok::Ident(s) if !s.is_empty() => s,
            other => return Err(self.err_here(format!("expected tool name, found {}", describe(&other)))),
        };
        self.expect(Tok::Comma, "`,`")?;
        let window_secs = match self.peek().clone() {
            Tok::Int(i) if i >= 1 => i as u64,
            other => {
                return Err(self.err_here(format!(
                    "expected positive window in seconds, found {}",
                    describe(&other)
                )))
            }
        };
        self.next();
        self.expect(Tok::RParen, "`)`")?;
        Ok(Operand::Rate { tool, window_secs })
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains('.')
}

fn type_key(t: ValueType) -> u8 {
    match t {
        ValueType::Str => 0,
        ValueType::Num => 1,
        ValueType::Bool => 2,
        ValueType::Dynamic => 3,
    }
}

fn compatible(a: ValueType, b: ValueType) -> bool {
    a == ValueType::Dynamic || b == ValueType::Dynamic || a == b
}

fn check_cmp(lhs: &Operand, op: CmpOp, rhs: &Operand) -> Result<(), String> {
    let (a, b) = (lhs.value_type(), rhs.value_type());
    if !compatible(a, b) {
        return Err(format!(
            "cannot compare `{}` with `{}`",
            render_operand(lhs),
            render_operand(rhs)
        ));
    }
    if op.is_ordering() && [a, b].iter().any(|t| matches!(t, ValueType::Str | ValueType::Bool)) {
        return Err(format!("`{}` requires numeric operands", op.symbol()));
    }
    Ok(())
}

pub(crate) fn render_operand(op: &Operand) -> String {
    super::print::operand_to_string(op)
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Int(i) => format!("number {i}"),
        Tok::Dec(d) => format!("number {d}"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::LBrace => "`{`".into(),
        Tok::RBrace => "`}`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::LBracket => "`[`".into(),
        Tok::RBracket => "`]`".into(),
        Tok::Comma => "`,`".into(),
        Tok::Cmp(op) => format!("`{}`", op.symbol()),
        Tok::Eof => "end of input".into(),
    }
}
