//! Agentic text-to-SQL runtime and evaluation harness.
//!
//! An exploration agent talks to a database through four tools using a
//! `[RUN] tool(args) [EXECUTE]` tag protocol. Its operation trace feeds a
//! separate SQL generation phase, and candidates are scored by execution
//! accuracy and Best-of-N coverage.

pub mod catalog;
pub mod model;
pub mod protocol;
pub mod agent;
pub mod backend;
pub mod prompts;
pub mod generation;
pub mod evaluation;
pub mod config;
pub mod store;
pub mod cli;
