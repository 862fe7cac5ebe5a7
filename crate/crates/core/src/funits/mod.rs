//! TPB execution engines: functional semantics and per-instruction cycle
//! models. The engine in [`crate::sim`] owns scheduling; everything here is
//! a pure function of operands and configuration.

pub mod csu;
pub mod cvu;
pub mod dtdu;
pub mod gsdu;
pub mod tcu;

use thiserror::Error;

pub use csu::{ClusterCpu, Routine, RoutineBehavior, RoutineRegistry, ServiceCall};
pub use cvu::{CvuOp, CvuPipeline, CvuStage, Tap};
pub use dtdu::{DtduKind, DtduOp};
pub use gsdu::{Direction, GatherScatterPlan};
pub use tcu::{Activation, TcuKind, TcuOp, TcuTiming};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),
    #[error("tile too large: {0}")]
    TileTooLarge(String),
    #[error("invalid CVU pipeline: {0}")]
    InvalidPipeline(String),
    #[error("non-finite value converted to integer stream")]
    NonfiniteFault,
    #[error("source and destination overlap in HBSM")]
    OverlapFault,
    #[error("unroutable target: {0}")]
    UnroutableTarget(String),
    #[error("unknown service routine {0}")]
    UnknownRoutine(String),
    #[error("gather/scatter index {index} out of range")]
    IndexOutOfRange { index: u64 },
    #[error("operand mismatch: {0}")]
    OperandMismatch(String),
}

pub(crate) fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}
