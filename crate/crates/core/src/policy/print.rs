//! Pretty-printer producing source that parses back to the same AST.

use std::fmt::Write;

use super::ast::*;

pub fn policies_to_source(policies: &[Policy]) -> String {
    let mut out = String::new();
    for (i, p) in policies.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&policy_to_source(p));
    }
    out
}

pub fn policy_to_source(p: &Policy) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "policy {} {{", quote(&p.name));
    let _ = writeln!(out, "  when {}", expr_to_string(&p.condition));
    let _ = writeln!(out, "  then {}", p.effect);
    let _ = writeln!(out, "  severity {}", p.severity);
    if !p.reason.is_empty() {
        let _ = writeln!(out, "  reason {}", quote(&p.reason));
    }
    if !p.risk_ids.is_empty() {
        let _ = writeln!(out, "  risk {}", p.risk_ids.join(", "));
    }
    out.push_str("}\n");
    out
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Or(..) => 1,
        Expr::And(..) => 2,
        Expr::Not(_) => 3,
        _ => 4,
    }
}

pub fn expr_to_string(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, &mut out);
    out
}

fn write_child(e: &Expr, parens: bool, out: &mut String) {
    if parens {
        out.push('(');
        write_expr(e, out);
        out.push(')');
    } else {
        write_expr(e, out);
    }
}

fn write_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Const(b) => out.push_str(if *b { "true" } else { "false" }),
        Expr::Cmp { lhs, op, rhs } => {
            let _ = write!(
                out,
                "{} {} {}",
                operand_to_string(lhs),
                op.symbol(),
                operand_to_string(rhs)
            );
        }
        Expr::In { operand, set } => {
            let items: Vec<String> = set.iter().map(literal_to_string).collect();
            let _ = write!(out, "{} in [{}]", operand_to_string(operand), items.join(", "));
        }
        Expr::Matches { operand, pattern } => {
            let _ = write!(out, "{} matches {}", operand_to_string(operand), quote(pattern.as_str()));
        }
        Expr::Not(inner) => {
            out.push_str("not ");
            write_child(inner, precedence(inner) < 3, out);
        }
        Expr::And(a, b) | Expr::Or(a, b) => {
            let p = precedence(e);
            write_child(a, precedence(a) < p, out);
            out.push_str(if p == 1 { " or " } else { " and " });
            // binary operators are left-associative
            write_child(b, precedence(b) <= p, out);
        }
    }
}

pub fn operand_to_string(op: &Operand) -> String {
    match op {
        Operand::Field(f) => f.to_string(),
        Operand::Literal(l) => literal_to_string(l),
        Operand::Rate { tool, window_secs } => format!("rate({}, {window_secs})", quote(tool)),
    }
}

pub fn literal_to_string(l: &Literal) -> String {
    match l {
        Literal::Str(s) => quote(s),
        Literal::Int(i) => i.to_string(),
        // Debug keeps a decimal point or exponent, so the value re-lexes as decimal
        Literal::Dec(d) => format!("{d:?}"),
        Literal::Bool(b) => b.to_string(),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
