//! HTTP service and command-line front end for the ctlmap engine.

pub mod cli;
pub mod config;
pub mod engine;
pub mod http;

pub use config::ServiceConfig;
pub use engine::{Access, Engine, EngineError, SystemStatus};
