//! Deterministic simulation of several Dims nodes on one virtual clock.
//!
//! [`build_network`] boots nodes over in-process transports with per-link
//! latency, loss, duplication and corruption driven by a seeded RNG;
//! [`run_scenario`] plays a timed script against it and collects an event
//! log and an assertion report.

pub mod network;
pub mod scenario;
pub mod spec;

use thiserror::Error;

pub use network::{build_network, LinkFaults, LogRecord, SimNetwork};
pub use scenario::{run_scenario, Action, AssertionResult, Outcome, Scenario, Step};
pub use spec::{LinkSpec, NetworkSpec, NodeSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid network spec: {0}")]
    SpecInvalid(String),
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("assertions failed: {}", failed.join(", "))]
    AssertionFailed { failed: Vec<String>, outcome: Box<Outcome> },
    #[error("network did not come up: {0}")]
    Boot(String),
    #[error("node setup failed: {0}")]
    Node(String),
}
