pub mod geometry;
pub mod road;
pub mod dsl;
pub mod eval;
pub mod sample;
pub mod sim;
pub mod prompt;
pub mod llm;
pub mod corpus;
pub mod harness;
pub mod session;
