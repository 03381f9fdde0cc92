//! Register-based agentic search: a closed action grammar, a DAG plan, a
//! compact context register and a deterministic two-stage agent loop.

pub mod backend;
pub mod cli;
pub mod engine;
mod http;
pub mod plan;
pub mod protocol;
pub mod register;
pub mod tokenizer;
pub mod tools;
pub mod trajectory;

pub use http::RetryPolicy;
