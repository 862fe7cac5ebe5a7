//! Graph compiler: parses an operator graph, rewrites it, partitions it in
//! space and time, assigns buffers and counters, and emits a scheduled
//! program.

pub mod alloc;
pub mod emit;
pub mod ir;
pub mod passes;
pub mod plan;

use thiserror::Error;

use crate::machine::MachineConfig;
use crate::program::ScheduledProgram;

pub use alloc::BufferMap;
pub use emit::{emit, estimate_latency};
pub use ir::{Graph, OpKind};
pub use passes::{optimize, Pass, DEFAULT_PASSES};
pub use plan::{PartitionPlan, Placement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported: {0}")]
    UnsupportedOp(String),
    #[error("graph has no outputs")]
    EmptyGraph,
    #[error("does not fit: {0}")]
    DoesNotFit(String),
    #[error("{requested} TPBs requested, {available} available")]
    TooFewTpbs { requested: u32, available: u32 },
    #[error("TPB {tpb} needs more than {limit} counters")]
    OutOfCounters { tpb: u32, limit: u32 },
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Debug, Clone)]
pub struct CompileOptions {
    pub passes: Vec<Pass>,
    /// TPB budget. Falls back to the graph's schedule line, then to
    /// `min(4, total)`.
    pub tpbs: Option<u32>,
    pub chunks: Option<u32>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { passes: DEFAULT_PASSES.to_vec(), tpbs: None, chunks: None }
    }
}

#[derive(Debug, Clone)]
pub struct Compiled {
    /// The graph after rewriting.
    pub graph: Graph,
    pub plan: PartitionPlan,
    pub placement: Placement,
    pub buffers: BufferMap,
    pub program: ScheduledProgram,
}

impl Compiled {
    pub fn estimated_cycles(&self, cfg: &MachineConfig) -> u64 {
        estimate_latency(&self.program, cfg)
    }
}

pub fn compile(g: &Graph, cfg: &MachineConfig, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    g.validate()?;
    let graph = optimize(g, &opts.passes);
    graph.validate()?;
    let tpbs = opts.tpbs.or(g.schedule.tpbs).unwrap_or_else(|| cfg.total_tpbs().min(4));
    let chunks = opts.chunks.or(g.schedule.chunks);
    let (plan, placement) = plan::partition_and_place(&graph, cfg, tpbs, chunks)?;
    let buffers = alloc::assign_sync(&graph, &plan, &placement, cfg)?;
    let program = emit(&graph, &plan, &placement, &buffers, cfg)?;
    Ok(Compiled { graph, plan, placement, buffers, program })
}

pub fn compile_text(text: &str, cfg: &MachineConfig, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    compile(&Graph::parse(text)?, cfg, opts)
}
