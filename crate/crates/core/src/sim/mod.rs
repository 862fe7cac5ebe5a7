//! Machine simulation: the event engine, race detection, tracing, and the
//! reference evaluator used to check simulated results.

pub mod engine;
pub mod oracle;
pub mod race;
pub mod tensorio;
pub mod trace;
pub mod verify;

pub use engine::{run, RunOptions, RunReport, RunStats, SimError};
