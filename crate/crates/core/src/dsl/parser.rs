//! Recursive-descent parser. Stops at the first error.

use super::ast::*;
use super::diagnostic::{Code, Diagnostic, Span};
use super::lexer::{tokenize, Keyword, Tok, Token};

pub fn parse(source: &str) -> Result<ScenarioProgram, Vec<Diagnostic>> {
    let tokens = tokenize(source).map_err(|d| vec![d])?;
    let mut p = Parser { tokens, pos: 0 };
    p.program().map_err(|d| vec![d])
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_n(&self, n: usize) -> &Tok {
        let idx = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[idx].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn prev_span(&self) -> Span {
        self.tokens[self.pos.saturating_sub(1)].span
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &str) -> PResult<T> {
        let span = self.span();
        Err(Diagnostic::error(
            Code::SyntaxError,
            format!("unexpected {}, expected {}", self.peek().describe(), expected),
            Some(span),
        ))
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn is_kw(&self, kw: Keyword) -> bool {
        matches!(self.peek(), Tok::Kw(k, _) if *k == kw)
    }

    fn is_name(&self, name: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == name)
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.is_op(op) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> PResult<()> {
        if self.eat_op(op) {
            Ok(())
        } else {
            self.error(&format!("'{op}'"))
        }
    }

    fn expect_kw(&mut self, kw: Keyword, text: &str) -> PResult<()> {
        if self.is_kw(kw) {
            self.advance();
            Ok(())
        } else {
            self.error(&format!("'{text}'"))
        }
    }

    fn expect_contextual(&mut self, word: &str) -> PResult<()> {
        if self.is_name(word) {
            self.advance();
            Ok(())
        } else {
            self.error(&format!("'{word}'"))
        }
    }

    fn expect_name(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Name(n) => {
                self.advance();
                Ok(n)
            }
            _ => self.error("identifier"),
        }
    }

    /// Identifier, or a keyword used as an attribute or module path segment.
    fn expect_member(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Name(n) | Tok::Kw(_, n) => {
                self.advance();
                Ok(n)
            }
            _ => self.error("identifier"),
        }
    }

    fn expect_newline(&mut self) -> PResult<()> {
        match self.peek() {
            Tok::Newline => {
                self.advance();
                Ok(())
            }
            Tok::Eof => Ok(()),
            _ => self.error("end of line"),
        }
    }

    fn program(&mut self) -> PResult<ScenarioProgram> {
        let mut program = ScenarioProgram::default();
        if let Tok::DocString(text) = self.peek().clone() {
            self.advance();
            self.expect_newline()?;
            program.docstring = Some(text.trim().to_string());
        }
        while !matches!(self.peek(), Tok::Eof) {
            let stmt = self.top_statement()?;
            program.statements.push(stmt);
        }
        Ok(program)
    }

    fn top_statement(&mut self) -> PResult<Stmt> {
        let start = self.span();
        let node = match self.peek().clone() {
            Tok::Kw(Keyword::Param, _) => {
                self.advance();
                let name = self.expect_name()?;
                self.expect_op("=")?;
                let value = self.expr()?;
                self.expect_newline()?;
                StmtKind::Param { name, value }
            }
            Tok::Kw(Keyword::Model, _) => {
                self.advance();
                let mut path = self.expect_name()?;
                while self.eat_op(".") {
                    path.push('.');
                    path.push_str(&self.expect_member()?);
                }
                self.expect_newline()?;
                StmtKind::Model(path)
            }
            Tok::Kw(Keyword::Behaviour, _) => StmtKind::Behavior(self.behavior_def()?),
            Tok::Kw(Keyword::Require, _) => {
                self.advance();
                let e = self.expr()?;
                self.expect_newline()?;
                StmtKind::Require(e)
            }
            Tok::Kw(Keyword::Terminate, _) => {
                self.advance();
                self.expect_kw(Keyword::When, "when")?;
                let e = self.expr()?;
                self.expect_newline()?;
                StmtKind::TerminateWhen(e)
            }
            Tok::Name(_) if matches!(self.peek_n(1), Tok::Op("=")) => {
                let is_object = matches!(self.peek_n(2), Tok::Name(k) if k == "Car" || k == "Pedestrian")
                    && matches!(self.peek_n(3), Tok::Name(w) if w == "at" || w == "left" || w == "right");
                if is_object {
                    StmtKind::Object(self.object_decl()?)
                } else {
                    self.assignment()?
                }
            }
            Tok::DocString(_) => {
                return Err(Diagnostic::error(
                    Code::SyntaxError,
                    "docstring is only allowed at the start of the program",
                    Some(start),
                ))
            }
            _ => return self.error("statement"),
        };
        Ok(Spanned::new(node, start.to(self.prev_span())))
    }

    fn assignment(&mut self) -> PResult<StmtKind> {
        let name = self.expect_name()?;
        self.expect_op("=")?;
        let value = self.expr()?;
        self.expect_newline()?;
        Ok(StmtKind::Assign { name, value })
    }

    fn behavior_def(&mut self) -> PResult<BehaviorDef> {
        self.advance();
        let name = self.expect_name()?;
        self.expect_op("(")?;
        let mut params = Vec::new();
        if !self.is_op(")") {
            loop {
                params.push(self.expect_name()?);
                if !self.eat_op(",") || self.is_op(")") {
                    break;
                }
            }
        }
        self.expect_op(")")?;
        self.expect_op(":")?;
        let body = self.block()?;
        Ok(BehaviorDef { name, params, body })
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        if !matches!(self.peek(), Tok::Newline) {
            return self.error("end of line");
        }
        self.advance();
        if !matches!(self.peek(), Tok::Indent) {
            return self.error("indented block");
        }
        self.advance();
        let mut body = Vec::new();
        while !matches!(self.peek(), Tok::Dedent | Tok::Eof) {
            body.push(self.behavior_statement()?);
        }
        if matches!(self.peek(), Tok::Dedent) {
            self.advance();
        }
        Ok(body)
    }

    fn behavior_statement(&mut self) -> PResult<Stmt> {
        let start = self.span();
        let node = match self.peek().clone() {
            Tok::Kw(Keyword::Try, _) => {
                self.advance();
                self.expect_op(":")?;
                let body = self.block()?;
                let mut interrupts = Vec::new();
                while self.is_kw(Keyword::Interrupt) {
                    self.advance();
                    self.expect_kw(Keyword::When, "when")?;
                    let condition = self.expr()?;
                    self.expect_op(":")?;
                    let handler = self.block()?;
                    interrupts.push(InterruptClause { condition, handler });
                }
                StmtKind::Try { body, interrupts }
            }
            Tok::Kw(Keyword::Interrupt, _) => {
                return Err(Diagnostic::error(
                    Code::SyntaxError,
                    "'interrupt when' must follow a try block",
                    Some(start),
                ))
            }
            Tok::Kw(Keyword::Do, _) => {
                self.advance();
                let e = self.expr()?;
                self.expect_newline()?;
                StmtKind::Do(e)
            }
            Tok::Kw(Keyword::Take, _) => {
                self.advance();
                let e = self.expr()?;
                self.expect_newline()?;
                StmtKind::Take(e)
            }
            Tok::Kw(Keyword::While, _) => {
                self.advance();
                let condition = self.expr()?;
                self.expect_op(":")?;
                let body = self.block()?;
                StmtKind::While { condition, body }
            }
            Tok::Kw(Keyword::Terminate, _) => {
                self.advance();
                self.expect_newline()?;
                StmtKind::Terminate
            }
            Tok::Name(_) if matches!(self.peek_n(1), Tok::Op("=")) => self.assignment()?,
            _ => return self.error("behavior statement"),
        };
        Ok(Spanned::new(node, start.to(self.prev_span())))
    }

    fn object_decl(&mut self) -> PResult<ObjectDecl> {
        let name = self.expect_name()?;
        self.expect_op("=")?;
        let kind = match self.expect_name()?.as_str() {
            "Car" => ObjectKind::Car,
            _ => ObjectKind::Pedestrian,
        };
        let placement = if self.is_name("at") {
            self.advance();
            Placement::At(self.expr()?)
        } else {
            let side = if self.is_name("left") { Side::Left } else { Side::Right };
            self.advance();
            self.expect_contextual("of")?;
            let anchor = self.expr()?;
            self.expect_contextual("by")?;
            let distance = self.expr()?;
            Placement::Offset { side, anchor, distance }
        };
        let mut properties = Vec::new();
        while self.eat_op(",") {
            let start = self.span();
            self.expect_kw(Keyword::With, "with")?;
            let key = match self.peek().clone() {
                Tok::Name(n) => n,
                Tok::Kw(Keyword::Behaviour, s) => s,
                _ => return self.error("property name"),
            };
            self.advance();
            let value = self.expr()?;
            properties.push(Property {
                key,
                value,
                span: SpanIgnored(start.to(self.prev_span())),
            });
        }
        self.expect_newline()?;
        Ok(ObjectDecl { name, kind, placement, properties })
    }

    pub fn expr(&mut self) -> PResult<Expr> {
        if self.is_kw(Keyword::Lambda) {
            let start = self.span();
            self.advance();
            let param = self.expect_name()?;
            self.expect_op(":")?;
            let body = self.expr()?;
            let span = start.to(body.span);
            return Ok(Spanned::new(ExprKind::Lambda(param, Box::new(body)), span));
        }
        self.or_expr()
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.is_kw(Keyword::Or) {
            self.advance();
            let rhs = self.and_expr()?;
            let span = lhs.span.to(rhs.span);
            lhs = Spanned::new(ExprKind::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.not_expr()?;
        while self.is_kw(Keyword::And) {
            self.advance();
            let rhs = self.not_expr()?;
            let span = lhs.span.to(rhs.span);
            lhs = Spanned::new(ExprKind::Binary(BinOp::And, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.is_kw(Keyword::Not) {
            let start = self.span();
            self.advance();
            let inner = self.not_expr()?;
            let span = start.to(inner.span);
            return Ok(Spanned::new(ExprKind::Unary(UnaryOp::Not, Box::new(inner)), span));
        }
        self.comparison()
    }

    fn comparison_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek() {
            Tok::Op("<") => CmpOp::Lt,
            Tok::Op("<=") => CmpOp::Le,
            Tok::Op(">") => CmpOp::Gt,
            Tok::Op(">=") => CmpOp::Ge,
            Tok::Op("==") => CmpOp::Eq,
            Tok::Op("!=") => CmpOp::Ne,
            Tok::Kw(Keyword::In, _) => CmpOp::In,
            Tok::Kw(Keyword::Is, _) => {
                if matches!(self.peek_n(1), Tok::Kw(Keyword::Not, _)) {
                    self.advance();
                    CmpOp::IsNot
                } else {
                    CmpOp::Is
                }
            }
            Tok::Kw(Keyword::Not, _) if matches!(self.peek_n(1), Tok::Kw(Keyword::In, _)) => {
                self.advance();
                CmpOp::NotIn
            }
            _ => return None,
        };
        self.advance();
        Some(op)
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let first = self.additive()?;
        let mut rest = Vec::new();
        while let Some(op) = self.comparison_op() {
            rest.push((op, self.additive()?));
        }
        if rest.is_empty() {
            return Ok(first);
        }
        let span = first.span.to(rest.last().unwrap().1.span);
        Ok(Spanned::new(ExprKind::Compare(Box::new(first), rest), span))
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Op("+") => BinOp::Add,
                Tok::Op("-") => BinOp::Sub,
                _ => break,
            };
            self.advance();
            let rhs = self.multiplicative()?;
            let span = lhs.span.to(rhs.span);
            lhs = Spanned::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op("*") => BinOp::Mul,
                Tok::Op("/") => BinOp::Div,
                _ => break,
            };
            self.advance();
            let rhs = self.unary()?;
            let span = lhs.span.to(rhs.span);
            lhs = Spanned::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.is_op("-") {
            let start = self.span();
            self.advance();
            let inner = self.unary()?;
            let span = start.to(inner.span);
            return Ok(Spanned::new(ExprKind::Unary(UnaryOp::Neg, Box::new(inner)), span));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut e = self.primary()?;
        loop {
            if self.eat_op(".") {
                let attr = self.expect_member()?;
                let span = e.span.to(self.prev_span());
                e = Spanned::new(ExprKind::Attribute(Box::new(e), attr), span);
            } else if self.eat_op("[") {
                let index = self.expr()?;
                self.expect_op("]")?;
                let span = e.span.to(self.prev_span());
                e = Spanned::new(ExprKind::Index(Box::new(e), Box::new(index)), span);
            } else if self.eat_op("(") {
                let args = self.call_args()?;
                let span = e.span.to(self.prev_span());
                e = Spanned::new(ExprKind::Call(Box::new(e), args), span);
            } else {
                return Ok(e);
            }
        }
    }

    fn call_args(&mut self) -> PResult<Vec<Arg>> {
        let mut args = Vec::new();
        while !self.is_op(")") {
            let arg = if self.eat_op("*") {
                Arg::Star(self.expr()?)
            } else if matches!(self.peek(), Tok::Name(_)) && matches!(self.peek_n(1), Tok::Op("=")) {
                let name = self.expect_name()?;
                self.advance();
                Arg::Keyword(name, self.expr()?)
            } else {
                Arg::Positional(self.expr()?)
            };
            args.push(arg);
            if !self.eat_op(",") {
                break;
            }
        }
        self.expect_op(")")?;
        Ok(args)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let start = self.span();
        let node = match self.peek().clone() {
            Tok::Number(n) => {
                self.advance();
                ExprKind::Number(n)
            }
            Tok::Str(s) => {
                self.advance();
                ExprKind::Str(s)
            }
            Tok::Kw(Keyword::True, _) => {
                self.advance();
                ExprKind::Bool(true)
            }
            Tok::Kw(Keyword::False, _) => {
                self.advance();
                ExprKind::Bool(false)
            }
            Tok::Kw(Keyword::None, _) => {
                self.advance();
                ExprKind::NoneLit
            }
            Tok::Name(n) if n == "distance" && matches!(self.peek_n(1), Tok::Name(w) if w == "to") => {
                self.advance();
                self.advance();
                ExprKind::DistanceTo(Box::new(self.postfix()?))
            }
            Tok::Name(n) if n == "distance" && matches!(self.peek_n(1), Tok::Name(w) if w == "from") => {
                self.advance();
                self.advance();
                let from = self.postfix()?;
                self.expect_contextual("to")?;
                let to = self.postfix()?;
                ExprKind::DistanceFromTo(Box::new(from), Box::new(to))
            }
            Tok::Name(n) if n == "OrientedPoint" && matches!(self.peek_n(1), Tok::Kw(Keyword::In, _)) => {
                self.advance();
                self.advance();
                ExprKind::OrientedPointIn(Box::new(self.postfix()?))
            }
            Tok::Name(n) => {
                self.advance();
                ExprKind::Name(n)
            }
            Tok::Op("(") => {
                self.advance();
                let inner = self.expr()?;
                self.expect_op(")")?;
                ExprKind::Paren(Box::new(inner))
            }
            Tok::Op("[") => {
                self.advance();
                let mut items = Vec::new();
                while !self.is_op("]") {
                    items.push(self.expr()?);
                    if !self.eat_op(",") {
                        break;
                    }
                }
                self.expect_op("]")?;
                ExprKind::List(items)
            }
            _ => return self.error("expression"),
        };
        Ok(Spanned::new(node, start.to(self.prev_span())))
    }
}
