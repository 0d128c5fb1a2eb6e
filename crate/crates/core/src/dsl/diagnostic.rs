use std::fmt;

use serde::{Deserialize, Serialize};

/// A source location: 1-based line and column, plus an end position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub line: u32,
    pub col: u32,
    pub end_line: u32,
    pub end_col: u32,
}

impl Span {
    pub fn new(line: u32, col: u32, end_line: u32, end_col: u32) -> Self {
        Self { line, col, end_line, end_col }
    }

    pub fn point(line: u32, col: u32) -> Self {
        Self::new(line, col, line, col + 1)
    }

    pub fn to(self, other: Span) -> Span {
        Span::new(self.line, self.col, other.end_line, other.end_col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// Stable short identifiers for every diagnostic the pipeline can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Code {
    LexError,
    SyntaxError,
    UnknownIdentifier,
    UnknownBehavior,
    UnknownProperty,
    NoEgoDefined,
    TypeMismatch,
    DuplicateDefinition,
    MissingMapName,
    EvaluationError,
    RejectionExhausted,
    DegeneratePolyline,
    UnknownAsset,
    UnboundLocal,
    DisconnectedTrajectory,
    RuntimeError,
    ExtractionError,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::LexError => "LexError",
            Code::SyntaxError => "SyntaxError",
            Code::UnknownIdentifier => "UnknownIdentifier",
            Code::UnknownBehavior => "UnknownBehavior",
            Code::UnknownProperty => "UnknownProperty",
            Code::NoEgoDefined => "NoEgoDefined",
            Code::TypeMismatch => "TypeMismatch",
            Code::DuplicateDefinition => "DuplicateDefinition",
            Code::MissingMapName => "MissingMapName",
            Code::EvaluationError => "EvaluationError",
            Code::RejectionExhausted => "RejectionExhausted",
            Code::DegeneratePolyline => "DegeneratePolyline",
            Code::UnknownAsset => "UnknownAsset",
            Code::UnboundLocal => "UnboundLocal",
            Code::DisconnectedTrajectory => "DisconnectedTrajectory",
            Code::RuntimeError => "RuntimeError",
            Code::ExtractionError => "ExtractionError",
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: Code,
    pub message: String,
    pub span: Option<Span>,
}

impl Diagnostic {
    pub fn error(code: Code, message: impl Into<String>, span: Option<Span>) -> Self {
        Self {
            severity: Severity::Error,
            code,
            message: message.into(),
            span,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    /// One line: `Code: message (line L, col C)`.
    pub fn render(&self) -> String {
        match self.span {
            Some(s) => format!("{}: {} (line {}, col {})", self.code, self.message, s.line, s.col),
            None => format!("{}: {}", self.code, self.message),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn render_all(diagnostics: &[Diagnostic]) -> String {
    diagnostics
        .iter()
        .map(Diagnostic::render)
        .collect::<Vec<_>>()
        .join("\n")
}
