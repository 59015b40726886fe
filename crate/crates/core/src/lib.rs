//! Slotted Monte Carlo simulation of qubit relay over a chain of quantum
//! repeaters, comparing independent parallel channels against
//! backward-propagating, time-multiplexed memories.
//!
//! - [`model`]: configuration, domain types and single-segment attempt math.
//! - [`engine`]: the synchronous slot state machine.
//! - [`metrics`]: latency, steady-state throughput and transfer-time summaries.
//! - [`oracle`]: statevector check of heralded emission/absorption link
//!   generation and the teleportation step that consumes the link.

pub mod engine;
pub mod metrics;
pub mod model;
pub mod oracle;

pub use engine::{RunResult, Simulation, SlotReport};

pub use metrics::MetricsSummary;
pub use model::{AttemptOutcome, Protocol, SimConfig, StopCondition};

/// Version string embedded in every output artifact.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
