//! Deterministic source rendering. `parse(unparse(p)) == p` for parsed programs.

use super::ast::*;

pub fn unparse(program: &ScenarioProgram) -> String {
    let mut out = String::new();
    if let Some(doc) = &program.docstring {
        out.push_str("\"\"\"\n");
        out.push_str(doc);
        out.push_str("\n\"\"\"\n");
    }
    for stmt in &program.statements {
        write_stmt(&mut out, stmt, 0);
    }
    out
}

fn indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("    ");
    }
}

fn write_block(out: &mut String, body: &[Stmt], level: usize) {
    for s in body {
        write_stmt(out, s, level);
    }
}

fn write_stmt(out: &mut String, stmt: &Stmt, level: usize) {
    indent(out, level);
    match &stmt.node {
        StmtKind::Param { name, value } => {
            out.push_str(&format!("param {name} = {}\n", expr_to_string(value)));
        }
        StmtKind::Model(path) => out.push_str(&format!("model {path}\n")),
        StmtKind::Assign { name, value } => {
            out.push_str(&format!("{name} = {}\n", expr_to_string(value)));
        }
        StmtKind::Behavior(b) => {
            out.push_str(&format!("behaviour {}({}):\n", b.name, b.params.join(", ")));
            write_block(out, &b.body, level + 1);
        }
        StmtKind::Object(o) => {
            out.push_str(&format!("{} = {} ", o.name, o.kind.name()));
            match &o.placement {
                Placement::At(e) => out.push_str(&format!("at {}", expr_to_string(e))),
                Placement::Offset { side, anchor, distance } => {
                    let side = match side {
                        Side::Left => "left",
                        Side::Right => "right",
                    };
                    out.push_str(&format!(
                        "{side} of {} by {}",
                        expr_to_string(anchor),
                        expr_to_string(distance)
                    ));
                }
            }
            for p in &o.properties {
                out.push_str(",\n");
                indent(out, level + 1);
                out.push_str(&format!("with {} {}", p.key, expr_to_string(&p.value)));
            }
            out.push('\n');
        }
        StmtKind::Require(e) => out.push_str(&format!("require {}\n", expr_to_string(e))),
        StmtKind::TerminateWhen(e) => {
            out.push_str(&format!("terminate when {}\n", expr_to_string(e)))
        }
        StmtKind::Do(e) => out.push_str(&format!("do {}\n", expr_to_string(e))),
        StmtKind::Take(e) => out.push_str(&format!("take {}\n", expr_to_string(e))),
        StmtKind::While { condition, body } => {
            out.push_str(&format!("while {}:\n", expr_to_string(condition)));
            write_block(out, body, level + 1);
        }
        StmtKind::Terminate => out.push_str("terminate\n"),
        StmtKind::Try { body, interrupts } => {
            out.push_str("try:\n");
            write_block(out, body, level + 1);
            for clause in interrupts {
                indent(out, level);
                out.push_str(&format!("interrupt when {}:\n", expr_to_string(&clause.condition)));
                write_block(out, &clause.handler, level + 1);
            }
        }
    }
}

pub fn expr_to_string(e: &Expr) -> String {
    let mut s = String::new();
    write_expr(&mut s, e);
    s
}

fn quote(s: &str) -> String {
    let mut out = String::from("'");
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

fn write_expr(out: &mut String, e: &Expr) {
    match &e.node {
        ExprKind::Number(n) => out.push_str(&n.to_string()),
        ExprKind::Str(s) => out.push_str(&quote(s)),
        ExprKind::Bool(true) => out.push_str("True"),
        ExprKind::Bool(false) => out.push_str("False"),
        ExprKind::NoneLit => out.push_str("None"),
        ExprKind::Name(n) => out.push_str(n),
        ExprKind::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, item);
            }
            out.push(']');
        }
        ExprKind::Paren(inner) => {
            out.push('(');
            write_expr(out, inner);
            out.push(')');
        }
        ExprKind::Attribute(base, attr) => {
            write_expr(out, base);
            out.push('.');
            out.push_str(attr);
        }
        ExprKind::Index(base, idx) => {
            write_expr(out, base);
            out.push('[');
            write_expr(out, idx);
            out.push(']');
        }
        ExprKind::Call(f, args) => {
            write_expr(out, f);
            out.push('(');
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                match arg {
                    Arg::Positional(e) => write_expr(out, e),
                    Arg::Keyword(k, e) => {
                        out.push_str(k);
                        out.push('=');
                        write_expr(out, e);
                    }
                    Arg::Star(e) => {
                        out.push('*');
                        write_expr(out, e);
                    }
                }
            }
            out.push(')');
        }
        ExprKind::Unary(UnaryOp::Neg, inner) => {
            out.push('-');
            write_expr(out, inner);
        }
        ExprKind::Unary(UnaryOp::Not, inner) => {
            out.push_str("not ");
            write_expr(out, inner);
        }
        ExprKind::Binary(op, l, r) => {
            write_expr(out, l);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_expr(out, r);
        }
        ExprKind::Compare(first, rest) => {
            write_expr(out, first);
            for (op, e) in rest {
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                write_expr(out, e);
            }
        }
        ExprKind::Lambda(param, body) => {
            out.push_str("lambda ");
            out.push_str(param);
            out.push_str(": ");
            write_expr(out, body);
        }
        ExprKind::DistanceTo(target) => {
            out.push_str("distance to ");
            write_expr(out, target);
        }
        ExprKind::DistanceFromTo(a, b) => {
            out.push_str("distance from ");
            write_expr(out, a);
            out.push_str(" to ");
            write_expr(out, b);
        }
        ExprKind::OrientedPointIn(target) => {
            out.push_str("OrientedPoint in ");
            write_expr(out, target);
        }
    }
}
