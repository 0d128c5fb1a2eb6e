//! Syntax tree for the scenario language.
//!
//! Node spans are carried in [`Spanned`] but excluded from equality, so two
//! trees compare equal when they have the same structure regardless of layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::diagnostic::Span;

#[derive(Clone)]
pub struct Spanned<T> {
    pub node: T,
    pub span: Span,
}

impl<T> Spanned<T> {
    pub fn new(node: T, span: Span) -> Self {
        Self { node, span }
    }
}

impl<T: PartialEq> PartialEq for Spanned<T> {
    fn eq(&self, other: &Self) -> bool {
        self.node == other.node
    }
}

impl<T: fmt::Debug> fmt::Debug for Spanned<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.node.fmt(f)
    }
}

pub type Expr = Spanned<ExprKind>;
pub type Stmt = Spanned<StmtKind>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    Is,
    IsNot,
    In,
    NotIn,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Is => "is",
            CmpOp::IsNot => "is not",
            CmpOp::In => "in",
            CmpOp::NotIn => "not in",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Positional(Expr),
    Keyword(String, Expr),
    /// `*expr`, spreading a collection into positional arguments.
    Star(Expr),
}

impl Arg {
    pub fn expr(&self) -> &Expr {
        match self {
            Arg::Positional(e) | Arg::Keyword(_, e) | Arg::Star(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Number(f64),
    Str(String),
    Bool(bool),
    NoneLit,
    Name(String),
    List(Vec<Expr>),
    Paren(Box<Expr>),
    Attribute(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    Call(Box<Expr>, Vec<Arg>),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Compare(Box<Expr>, Vec<(CmpOp, Expr)>),
    Lambda(String, Box<Expr>),
    /// `distance to X`, measured from the ego.
    DistanceTo(Box<Expr>),
    /// `distance from A to B`.
    DistanceFromTo(Box<Expr>, Box<Expr>),
    /// `OrientedPoint in X`, a uniform point along a polyline.
    OrientedPointIn(Box<Expr>),
}

impl ExprKind {
    /// Callee name when this is a call to a plain identifier.
    pub fn call_name(&self) -> Option<&str> {
        match self {
            ExprKind::Call(f, _) => match &f.node {
                ExprKind::Name(n) => Some(n),
                _ => None,
            },
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Car,
    Pedestrian,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Car => "Car",
            ObjectKind::Pedestrian => "Pedestrian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    At(Expr),
    Offset { side: Side, anchor: Expr, distance: Expr },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub key: String,
    pub value: Expr,
    pub span: SpanIgnored,
}

/// A span that never participates in equality.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanIgnored(pub Span);

impl PartialEq for SpanIgnored {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDecl {
    pub name: String,
    pub kind: ObjectKind,
    pub placement: Placement,
    pub properties: Vec<Property>,
}

impl ObjectDecl {
    pub fn property(&self, key: &str) -> Option<&Expr> {
        self.properties.iter().find(|p| p.key == key).map(|p| &p.value)
    }

    /// `with behaviour` or `with behavior`.
    pub fn behavior(&self) -> Option<&Expr> {
        self.property("behaviour").or_else(|| self.property("behavior"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterruptClause {
    pub condition: Expr,
    pub handler: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Param { name: String, value: Expr },
    /// `model a.b.c`, accepted and ignored.
    Model(String),
    Assign { name: String, value: Expr },
    Behavior(BehaviorDef),
    Object(ObjectDecl),
    Require(Expr),
    TerminateWhen(Expr),
    Do(Expr),
    Take(Expr),
    While { condition: Expr, body: Vec<Stmt> },
    Terminate,
    /// Interrupt clauses in source order; later clauses have higher priority.
    Try { body: Vec<Stmt>, interrupts: Vec<InterruptClause> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioProgram {
    pub docstring: Option<String>,
    pub statements: Vec<Stmt>,
}

impl ScenarioProgram {
    pub fn params(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::Param { name, value } => Some((name.as_str(), value)),
            _ => None,
        })
    }

    /// Top-level non-param bindings (constants and derived variables).
    pub fn constants(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::Assign { name, value } => Some((name.as_str(), value)),
            _ => None,
        })
    }

    pub fn behaviors(&self) -> impl Iterator<Item = &BehaviorDef> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::Behavior(b) => Some(b),
            _ => None,
        })
    }

    pub fn behavior(&self, name: &str) -> Option<&BehaviorDef> {
        self.behaviors().find(|b| b.name == name)
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectDecl> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::Object(o) => Some(o),
            _ => None,
        })
    }

    pub fn requirements(&self) -> impl Iterator<Item = &Expr> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::Require(e) => Some(e),
            _ => None,
        })
    }

    pub fn terminations(&self) -> impl Iterator<Item = &Expr> {
        self.statements.iter().filter_map(|s| match &s.node {
            StmtKind::TerminateWhen(e) => Some(e),
            _ => None,
        })
    }
}
