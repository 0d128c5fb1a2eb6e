//! The scenario language: tokens, syntax tree, parser, validator and the
//! text pipeline around generated code.

pub mod ast;
pub mod diagnostic;
pub mod lexer;
pub mod parser;
pub mod text;
pub mod unparse;
pub mod validate;

pub use ast::ScenarioProgram;
pub use diagnostic::{Code, Diagnostic, Severity, Span};
pub use parser::parse;
pub use text::{extract_description, postprocess_generated, preprocess_training};
pub use unparse::unparse;
pub use validate::{validate, SymbolTable};

/// Parses and validates in one go, returning the first batch of diagnostics.
pub fn compile(source: &str, symbols: &SymbolTable) -> Result<ScenarioProgram, Vec<Diagnostic>> {
    let program = parse(source)?;
    let diagnostics = validate(&program, symbols);
    if diagnostics.iter().any(Diagnostic::is_error) {
        return Err(diagnostics);
    }
    Ok(program)
}
