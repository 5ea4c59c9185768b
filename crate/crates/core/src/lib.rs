pub mod cache;
pub mod cli;
pub mod eval;
pub mod expand;
pub mod gateway;
pub mod job;
pub mod model;
pub mod optimizer;
pub mod prompts;
pub mod trace;
