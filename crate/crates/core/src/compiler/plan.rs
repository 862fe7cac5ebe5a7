//! Mini-tensor partitioning and pipeline placement.
//!
//! Every non-constant tensor is cut into the same number of chunks along its
//! outermost axis. Ops are assigned to TPBs as contiguous pipeline stages in
//! node order. An op that needs a whole input (transpose, or a reshape that
//! moves row boundaries) starts a new phase; tensors read whole or across a
//! phase boundary get one buffer slot per chunk instead of two.

use super::alloc::{assign_sync, BufferMap};
use super::ir::{Graph, OpKind};
use super::CompileError;
use crate::funits::{CvuPipeline, CvuStage, Tap, TcuKind, TcuOp};
use crate::isa::Unit;
use crate::machine::MachineConfig;

/// Fraction of HBSM kept free of buffers, as a divisor of the capacity.
pub const SCRATCH_MARGIN_DIVISOR: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    /// Global TPB index per node; `None` for inputs and constants.
    pub tpb: Vec<Option<u32>>,
    pub unit: Vec<Option<Unit>>,
    pub stage: Vec<Option<u32>>,
    pub tpbs_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub chunks: u32,
    /// Elements per chunk, per node. Constants are never chunked.
    pub chunk_elems: Vec<usize>,
    pub phase: Vec<u32>,
    /// Node reads its (single) input whole.
    pub full_dep: Vec<bool>,
    /// Tensor keeps one slot per chunk.
    pub whole: Vec<bool>,
}

impl PartitionPlan {
    pub fn slots(&self, node: usize) -> u32 {
        if self.whole[node] {
            self.chunks
        } else {
            self.chunks.min(2)
        }
    }
}

pub fn unit_for(op: &OpKind) -> Option<Unit> {
    match op {
        OpKind::Input | OpKind::Constant(_) => None,
        OpKind::Matmul { .. } | OpKind::Conv2d { .. } => Some(Unit::Tcu),
        OpKind::Transpose | OpKind::Reshape => Some(Unit::Dtdu),
        _ => Some(Unit::Cvu),
    }
}

/// TCU operation for `rows` leading-axis entries of node `n`.
pub fn tcu_op(g: &Graph, n: usize, rows: usize) -> Option<TcuOp> {
    let node = &g.nodes[n];
    let x = &g.nodes[*node.inputs.first()?];
    let w = &g.nodes[*node.inputs.get(1)?];
    let (kind, shift, act) = match node.op {
        OpKind::Matmul { shift, act } => {
            (TcuKind::Matmul { m: rows as u32, k: x.shape[1] as u32, n: w.shape[1] as u32 }, shift, act)
        }
        OpKind::Conv2d { stride, pad, shift, act } => (
            TcuKind::Conv2d {
                n: rows as u32,
                h: x.shape[1] as u32,
                w: x.shape[2] as u32,
                cin: x.shape[3] as u32,
                cout: w.shape[3] as u32,
                kh: w.shape[0] as u32,
                kw: w.shape[1] as u32,
                stride,
                pad,
            },
            shift,
            act,
        ),
        _ => return None,
    };
    let mut op = TcuOp::matmul(1, 1, 1, x.dtype);
    op.kind = kind;
    op.out_dtype = node.dtype;
    op.shift = shift;
    op.activation = act;
    Some(op)
}

/// Rough busy cycles for the whole of node `n`, for stage balancing.
pub fn op_cost(g: &Graph, n: usize, cfg: &MachineConfig) -> u64 {
    let node = &g.nodes[n];
    let elems = node.elements() as u64;
    let lanes = u64::from(cfg.cvu_lanes);
    match &node.op {
        OpKind::Input | OpKind::Constant(_) => 0,
        OpKind::Matmul { .. } | OpKind::Conv2d { .. } => {
            tcu_op(g, n, node.shape[0]).map_or(0, |op| op.timing(cfg).total())
        }
        OpKind::Softmax | OpKind::Layernorm { .. } => 2 * (elems.div_ceil(lanes) * 2 + u64::from(cfg.cvu_fill)),
        OpKind::Transpose | OpKind::Reshape => node.bytes().div_ceil(u64::from(cfg.hbsm_bank_width)),
        OpKind::Pool { k, .. } => {
            let p = CvuPipeline::new(vec![CvuStage::unary(crate::funits::CvuOp::ReduceMax, Tap::A)], k * k).expect("valid");
            p.cycles(cfg, elems * u64::from(k * k), 0)
        }
        _ => elems.div_ceil(lanes) + u64::from(cfg.cvu_fill),
    }
}

/// Contiguous split of `costs` into at most `parts` groups minimizing the
/// largest group sum: binary search on the bound, greedy packing.
fn linear_partition(costs: &[u64], parts: usize) -> Vec<usize> {
    let pack = |limit: u64| -> Option<Vec<usize>> {
        let mut stage = vec![0usize; costs.len()];
        let (mut s, mut acc) = (0usize, 0u64);
        for (i, &c) in costs.iter().enumerate() {
            if acc > 0 && acc + c > limit {
                s += 1;
                acc = 0;
            }
            if s >= parts {
                return None;
            }
            acc += c;
            stage[i] = s;
        }
        Some(stage)
    };
    let (mut lo, mut hi) = (costs.iter().copied().max().unwrap_or(0), costs.iter().sum::<u64>().max(1));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pack(mid).is_some() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    pack(lo).expect("the total always fits")
}

pub fn place(g: &Graph, cfg: &MachineConfig, tpb_budget: u32) -> Result<Placement, CompileError> {
    let available = cfg.total_tpbs();
    if tpb_budget == 0 || tpb_budget > available {
        return Err(CompileError::TooFewTpbs { requested: tpb_budget, available });
    }
    let ops: Vec<usize> = (0..g.nodes.len()).filter(|&i| !g.nodes[i].op.is_source()).collect();
    let parts = (tpb_budget as usize).min(ops.len()).max(1);
    let stages: Vec<usize> = if ops.len() <= parts {
        (0..ops.len()).collect()
    } else {
        let costs: Vec<u64> = ops.iter().map(|&i| op_cost(g, i, cfg)).collect();
        linear_partition(&costs, parts)
    };
    let mut p = Placement {
        tpb: vec![None; g.nodes.len()],
        unit: vec![None; g.nodes.len()],
        stage: vec![None; g.nodes.len()],
        tpbs_used: stages.iter().max().map_or(0, |&s| s as u32 + 1),
    };
    for (&i, &s) in ops.iter().zip(&stages) {
        p.tpb[i] = Some(s as u32);
        p.stage[i] = Some(s as u32);
        p.unit[i] = unit_for(&g.nodes[i].op);
    }
    Ok(p)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Chunk counts every non-constant tensor can be split into, ascending.
pub fn chunk_candidates(g: &Graph) -> Vec<u32> {
    let mut common = 0usize;
    for n in &g.nodes {
        if matches!(n.op, OpKind::Constant(_)) {
            continue;
        }
        let rowwise = matches!(n.op, OpKind::Softmax | OpKind::Layernorm { .. });
        if rowwise && n.shape.len() < 2 {
            return vec![1];
        }
        common = gcd(common, n.shape[0]);
    }
    (1..=common.max(1)).filter(|c| common.is_multiple_of(*c)).map(|c| c as u32).collect()
}

pub fn plan_for(g: &Graph, chunks: u32) -> PartitionPlan {
    let c = chunks as usize;
    let consumers = g.consumers();
    let n = g.nodes.len();
    let mut plan = PartitionPlan {
        chunks,
        chunk_elems: vec![0; n],
        phase: vec![0; n],
        full_dep: vec![false; n],
        whole: vec![false; n],
    };
    for (i, node) in g.nodes.iter().enumerate() {
        plan.chunk_elems[i] = match node.op {
            OpKind::Constant(_) => node.elements(),
            _ => node.elements() / c,
        };
        plan.full_dep[i] = match node.op {
            OpKind::Transpose => true,
            OpKind::Reshape => g.nodes[node.inputs[0]].shape[0] != node.shape[0],
            _ => false,
        };
        plan.phase[i] = node
            .inputs
            .iter()
            .filter(|&&j| !matches!(g.nodes[j].op, OpKind::Constant(_)))
            .map(|&j| plan.phase[j] + u32::from(plan.full_dep[i]))
            .max()
            .unwrap_or(0);
    }
    for i in 0..n {
        plan.whole[i] = chunks > 1 && consumers[i].iter().any(|&c| plan.full_dep[c] || plan.phase[c] != plan.phase[i]);
    }
    plan
}

/// Chooses the chunk count and placement. With `requested` chunks the count
/// is the largest feasible one not above it; otherwise the smallest count
/// whose buffers fit every TPB's HBSM budget.
pub fn partition_and_place(
    g: &Graph,
    cfg: &MachineConfig,
    tpb_budget: u32,
    requested: Option<u32>,
) -> Result<(PartitionPlan, Placement), CompileError> {
    let placement = place(g, cfg, tpb_budget)?;
    let cands = chunk_candidates(g);
    let try_list: Vec<u32> = match requested {
        Some(r) => vec![cands.iter().copied().filter(|&c| c <= r.max(1)).max().unwrap_or(1)],
        None => cands,
    };
    let mut last = None;
    for c in try_list {
        let plan = plan_for(g, c);
        match assign_sync(g, &plan, &placement, cfg) {
            Ok(_) => return Ok((plan, placement)),
            Err(e @ CompileError::DoesNotFit(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| CompileError::DoesNotFit("no chunk count".into())))
}

/// Largest per-TPB footprint in bytes for a plan, for reporting.
pub fn footprint(map: &BufferMap) -> u64 {
    map.footprint.iter().copied().max().unwrap_or(0)
}
