//! Instruction emission.
//!
//! Instructions go out phase by phase, chunk-major within a phase, ops in
//! node order. That order is itself a valid one-at-a-time schedule, which
//! keeps the in-order instruction broadcast free of head-of-line deadlock.

use std::collections::{BTreeMap, BTreeSet};

use super::alloc::{BufferMap, BufferPlan, Producer, Reader};
use super::ir::{EwStep, Graph, OpKind, PoolKind};
use super::plan::{tcu_op, PartitionPlan, Placement};
use super::CompileError;
use crate::fabric::{DmaDescriptor, DmaDest};
use crate::funits::cvu::recipes;
use crate::funits::{CvuOp, CvuPipeline, CvuStage, DtduKind, DtduOp, Tap};
use crate::isa::{OpDescriptor, SyncAction, TpbInstruction, TpbMask, Unit};
use crate::machine::{AddressSpace, DataType, MachineConfig, TensorDesc};
use crate::program::{DataInit, IoBinding, ScheduledProgram};
use crate::sync::CounterRef;
use crate::walker::WalkerConfig;

type Spec = (OpDescriptor, Vec<WalkerConfig>, Option<WalkerConfig>);

struct Emitter<'a> {
    g: &'a Graph,
    plan: &'a PartitionPlan,
    place: &'a Placement,
    map: &'a BufferMap,
    cfg: &'a MachineConfig,
    seqs: BTreeMap<(u32, Unit), u32>,
    out: Vec<TpbInstruction>,
    const_seen: BTreeSet<(u32, Unit, usize)>,
}

fn internal(e: impl ToString) -> CompileError {
    CompileError::Internal(e.to_string())
}

fn dense(base: u64, elems: u64, width: u64) -> Result<WalkerConfig, CompileError> {
    WalkerConfig::dense(base, &[elems], width).map_err(internal)
}

/// Largest power-of-two element width (at most 128 bytes) dividing `bytes`.
fn copy_width(bytes: u64) -> u64 {
    let mut w = 128;
    while !bytes.is_multiple_of(w) {
        w /= 2;
    }
    w
}

impl Emitter<'_> {
    fn space(&self, tpb: u32) -> AddressSpace {
        let (cluster, tpb) = self.cfg.tpb_local(tpb);
        AddressSpace::Hbsm { cluster, tpb }
    }

    fn push(
        &mut self,
        tpb: u32,
        unit: Unit,
        specs: Vec<Spec>,
        monitors: Vec<(CounterRef, u64)>,
        updates: Vec<CounterRef>,
    ) -> Result<(), CompileError> {
        let n = specs.len();
        for (k, (op, ins, out)) in specs.into_iter().enumerate() {
            let mut syncs = Vec::new();
            if k == 0 {
                syncs.extend(monitors.iter().filter(|m| m.1 > 0).map(|&(c, e)| SyncAction::monitor(c, e)));
            }
            if k + 1 == n {
                syncs.extend(updates.iter().map(|&c| SyncAction::update(c)));
            }
            let seq = self.seqs.entry((tpb, unit)).or_insert(0);
            let instr = TpbInstruction::new(*seq, TpbMask::single(tpb), op, ins, out, syncs).map_err(internal)?;
            *seq += 1;
            self.out.push(instr);
        }
        Ok(())
    }

    fn op_chunk(&mut self, n: usize, i: u32) -> Result<(), CompileError> {
        let (g, plan, map) = (self.g, self.plan, self.map);
        let node = &g.nodes[n];
        let tpb = self.place.tpb[n].expect("placed");
        let unit = self.place.unit[n].expect("placed");
        let home = &map.buffers[map.home[&n]];
        let out_addr = home.slot_addr(i);
        let elems = plan.chunk_elems[n] as u64;
        let ow = node.dtype.byte_width() as u64;
        let rows = node.shape[0] / plan.chunks as usize;

        let mut monitors = Vec::new();
        let mut updates = Vec::new();
        let mut in_addr = Vec::new();
        let mut seen = BTreeSet::new();
        for &t in &node.inputs {
            let b = map.buffer(t, tpb);
            let is_const = matches!(g.nodes[t].op, OpKind::Constant(_));
            in_addr.push(if is_const || plan.full_dep[n] { b.base } else { b.slot_addr(i) });
            if !seen.insert(t) {
                continue;
            }
            if is_const {
                if self.const_seen.insert((tpb, unit, t)) {
                    monitors.push((b.ready_on(tpb), 1));
                }
            } else {
                let need = if plan.full_dep[n] { plan.chunks } else { i + 1 };
                monitors.push((b.ready_on(tpb), u64::from(need)));
                if let Some(f) = b.free_for(Reader::Op(n)) {
                    updates.push(f);
                }
            }
        }
        monitors.extend(home.free_waits(i));
        updates.push(home.ready[0]);

        let inp = |k: usize| &g.nodes[node.inputs[k]];
        let iw = |k: usize| inp(k).dtype.byte_width() as u64;
        let specs: Vec<Spec> = match &node.op {
            OpKind::Matmul { .. } | OpKind::Conv2d { .. } => {
                let op = tcu_op(g, n, rows).ok_or_else(|| internal("tcu lowering"))?;
                vec![(
                    OpDescriptor::Tcu(op),
                    vec![dense(in_addr[0], op.act_elems(), iw(0))?, dense(in_addr[1], op.wt_elems(), iw(1))?],
                    Some(dense(out_addr, elems, ow)?),
                )]
            }
            OpKind::Softmax | OpKind::Layernorm { .. } => {
                let len = *node.shape.last().expect("rank >= 1") as u32;
                let scratch = map.scratch[&n];
                let nrows = elems / u64::from(len);
                let (p1, p2) = match node.op {
                    OpKind::Softmax => (recipes::softmax_pass1(len), recipes::softmax_pass2(len)),
                    OpKind::Layernorm { eps } => (recipes::layernorm_pass1(len), recipes::layernorm_pass2(len, eps)),
                    _ => unreachable!(),
                };
                let a = inp(0).dtype;
                vec![
                    (
                        OpDescriptor::Cvu { pipeline: p1, a_dtype: a, b_dtype: a, out_dtype: DataType::F32 },
                        vec![dense(in_addr[0], elems, iw(0))?],
                        Some(dense(scratch, nrows, 4)?),
                    ),
                    (
                        OpDescriptor::Cvu { pipeline: p2, a_dtype: a, b_dtype: DataType::F32, out_dtype: node.dtype },
                        vec![dense(in_addr[0], elems, iw(0))?, dense(scratch, nrows, 4)?],
                        Some(dense(out_addr, elems, ow)?),
                    ),
                ]
            }
            OpKind::Pool { kind, k, stride } => {
                let x = inp(0);
                let (h, w, c) = (x.shape[1] as u64, x.shape[2] as u64, x.shape[3] as u64);
                let (oh, ow_, k, s) = (node.shape[1] as u64, node.shape[2] as u64, u64::from(*k), u64::from(*stride));
                let e = iw(0) as i64;
                let stages = match kind {
                    PoolKind::Max => vec![CvuStage::unary(CvuOp::ReduceMax, Tap::A)],
                    PoolKind::Avg => vec![
                        CvuStage::unary(CvuOp::ReduceSum, Tap::A),
                        CvuStage::binary(CvuOp::Div, Tap::Prev, Tap::Imm((k * k) as f32)),
                    ],
                };
                let pipeline = CvuPipeline::new(stages, (k * k) as u32).map_err(internal)?;
                let mut v = Vec::new();
                for m in 0..rows as u64 {
                    let base = in_addr[0] + m * h * w * c * e as u64;
                    let walk = WalkerConfig::strided(
                        base,
                        &[oh, ow_, c, k, k],
                        &[(s * w * c) as i64 * e, (s * c) as i64 * e, e, (w * c) as i64 * e, c as i64 * e],
                    )
                    .map_err(internal)?;
                    let per = oh * ow_ * c;
                    v.push((
                        OpDescriptor::Cvu { pipeline: pipeline.clone(), a_dtype: x.dtype, b_dtype: x.dtype, out_dtype: node.dtype },
                        vec![walk],
                        Some(dense(out_addr + m * per * ow, per, ow)?),
                    ));
                }
                v
            }
            OpKind::Transpose => {
                let x = inp(0);
                let (a, b) = (x.shape[0] as u64, x.shape[1] as u64);
                let r = b / u64::from(plan.chunks);
                let e = iw(0);
                let walk = WalkerConfig::strided(in_addr[0] + u64::from(i) * r * e, &[r, a], &[e as i64, (b * e) as i64])
                    .map_err(internal)?;
                vec![(
                    OpDescriptor::Dtdu(DtduOp::local(DtduKind::Copy, e as u8)),
                    vec![walk],
                    Some(dense(out_addr, r * a, e)?),
                )]
            }
            OpKind::Reshape => {
                let src = if plan.full_dep[n] { in_addr[0] + u64::from(i) * elems * ow } else { in_addr[0] };
                let cw = copy_width(elems * ow);
                let cnt = elems * ow / cw;
                vec![(
                    OpDescriptor::Dtdu(DtduOp::local(DtduKind::Copy, cw as u8)),
                    vec![dense(src, cnt, cw)?],
                    Some(dense(out_addr, cnt, cw)?),
                )]
            }
            op => {
                let steps = op.ew_steps().ok_or_else(|| internal(format!("no lowering for {}", op.name())))?;
                let tap = |k: usize| if k == 0 { Tap::A } else { Tap::B };
                let mut stages = Vec::new();
                for s in steps {
                    let cur = if stages.is_empty() { Tap::A } else { Tap::Prev };
                    stages.push(match s {
                        EwStep::Add(k) => CvuStage::binary(CvuOp::Add, cur, tap(k)),
                        EwStep::Mul(k) => CvuStage::binary(CvuOp::Mul, cur, tap(k)),
                        EwStep::Relu => CvuStage::binary(CvuOp::Max, cur, Tap::Imm(0.0)),
                        EwStep::Round(d) => CvuStage::unary(CvuOp::Convert(d), cur),
                    });
                }
                let pipeline = CvuPipeline::new(stages, 0).map_err(internal)?;
                let mut ins = vec![dense(in_addr[0], elems, iw(0))?];
                let b_dtype = if pipeline.uses_b() {
                    ins.push(dense(in_addr[1], elems, iw(1))?);
                    inp(1).dtype
                } else {
                    inp(0).dtype
                };
                vec![(
                    OpDescriptor::Cvu { pipeline, a_dtype: inp(0).dtype, b_dtype, out_dtype: node.dtype },
                    ins,
                    Some(dense(out_addr, elems, ow)?),
                )]
            }
        };
        self.push(tpb, unit, specs, monitors, updates)
    }

    /// Copies chunk `i` of `n`'s home buffer to the TPBs that read it remotely.
    fn transfer(&mut self, n: usize, i: u32) -> Result<(), CompileError> {
        let map = self.map;
        let (Some(&h), Some(&r)) = (map.home.get(&n), map.remote.get(&n)) else { return Ok(()) };
        let (home, remote) = (&map.buffers[h], &map.buffers[r]);
        let tpb = home.group[0];
        let bytes = home.slot_bytes;
        let cw = copy_width(bytes);
        let op = DtduOp { kind: DtduKind::Copy, elem_bytes: cw as u8, targets: remote.group.iter().map(|&t| self.space(t)).collect() };
        let spec = (
            OpDescriptor::Dtdu(op),
            vec![dense(home.slot_addr(i), bytes / cw, cw)?],
            Some(dense(remote.slot_addr(i), bytes / cw, cw)?),
        );
        let mut monitors = vec![(home.ready[0], u64::from(i) + 1)];
        monitors.extend(remote.free_waits(i));
        let mut updates: Vec<CounterRef> = home.free_for(Reader::Transfer).into_iter().collect();
        updates.extend(&remote.ready);
        self.push(tpb, Unit::Dtdu, vec![spec], monitors, updates)
    }

    /// Copies chunk `i` of a graph output to its DDR location.
    fn store(&mut self, n: usize, i: u32) -> Result<(), CompileError> {
        let home = &self.map.buffers[self.map.home[&n]];
        let bytes = home.slot_bytes;
        let cw = copy_width(bytes);
        let dst = self.map.ddr[&n] + u64::from(i) * bytes;
        let op = DtduOp { kind: DtduKind::Copy, elem_bytes: cw as u8, targets: vec![AddressSpace::Ddr] };
        let spec = (OpDescriptor::Dtdu(op), vec![dense(home.slot_addr(i), bytes / cw, cw)?], Some(dense(dst, bytes / cw, cw)?));
        let updates: Vec<CounterRef> = home.free_for(Reader::Store).into_iter().collect();
        self.push(home.group[0], Unit::Dtdu, vec![spec], vec![(home.ready[0], u64::from(i) + 1)], updates)
    }

    fn dmas(&self) -> Vec<DmaDescriptor> {
        let engines = self.cfg.ccb_dma_engines;
        let dest = |b: &BufferPlan, addr: u64| {
            if b.group.len() == 1 {
                DmaDest::Space { space: self.space(b.group[0]), addr }
            } else {
                DmaDest::Drb { targets: b.group.iter().map(|&t| self.space(t)).collect(), addr }
            }
        };
        let mut out = Vec::new();
        let mut k = 0u32;
        for b in self.map.buffers.iter().filter(|b| b.producer == Producer::Preload) {
            out.push(DmaDescriptor {
                engine: k % engines,
                src: AddressSpace::Ddr,
                src_addr: self.map.ddr[&b.tensor],
                dst: dest(b, b.base),
                bytes: b.slot_bytes,
                wait: Vec::new(),
                signal: b.ready.clone(),
            });
            k += 1;
        }
        let inputs: Vec<(u32, &BufferPlan)> = self
            .map
            .buffers
            .iter()
            .filter(|b| b.producer == Producer::Dma)
            .enumerate()
            .map(|(j, b)| ((k + j as u32) % engines, b))
            .collect();
        let desc = |engine: u32, b: &BufferPlan, i: u32| DmaDescriptor {
            engine,
            src: AddressSpace::Ddr,
            src_addr: self.map.ddr[&b.tensor] + u64::from(i) * b.slot_bytes,
            dst: dest(b, b.slot_addr(i)),
            bytes: b.slot_bytes,
            wait: b.free_waits(i),
            signal: b.ready.clone(),
        };
        for &(e, b) in inputs.iter().filter(|(_, b)| b.slots == self.plan.chunks) {
            out.extend((0..self.plan.chunks).map(|i| desc(e, b, i)));
        }
        for i in 0..self.plan.chunks {
            for &(e, b) in inputs.iter().filter(|(_, b)| b.slots < self.plan.chunks) {
                out.push(desc(e, b, i));
            }
        }
        out
    }
}

pub fn emit(
    g: &Graph,
    plan: &PartitionPlan,
    place: &Placement,
    map: &BufferMap,
    cfg: &MachineConfig,
) -> Result<ScheduledProgram, CompileError> {
    let mut e = Emitter { g, plan, place, map, cfg, seqs: BTreeMap::new(), out: Vec::new(), const_seen: BTreeSet::new() };
    let ops: Vec<usize> = (0..g.nodes.len()).filter(|&n| !g.nodes[n].op.is_source()).collect();
    let phases = ops.iter().map(|&n| plan.phase[n]).max().unwrap_or(0);
    for phase in 0..=phases {
        for i in 0..plan.chunks {
            for &n in ops.iter().filter(|&&n| plan.phase[n] == phase) {
                e.op_chunk(n, i)?;
                e.transfer(n, i)?;
                if g.outputs.contains(&n) {
                    e.store(n, i)?;
                }
            }
        }
    }
    let binding = |n: usize| -> Result<IoBinding, CompileError> {
        let node = &g.nodes[n];
        Ok(IoBinding {
            name: node.name.clone(),
            desc: TensorDesc::dense(node.shape.clone(), node.dtype, AddressSpace::Ddr, map.ddr[&n]).map_err(internal)?,
        })
    };
    let mut program = ScheduledProgram {
        name: g.name.clone(),
        dmas: e.dmas(),
        buffers: map.to_entries(g, cfg),
        counters: map.counters.clone(),
        ..Default::default()
    };
    for (n, node) in g.nodes.iter().enumerate() {
        match &node.op {
            OpKind::Input => program.inputs.push(binding(n)?),
            OpKind::Constant(init) if map.ddr.contains_key(&n) => {
                let bytes = init.values(node.dtype, node.elements()).iter().flat_map(|&v| node.dtype.encode(v)).collect();
                program.data.push(DataInit { space: AddressSpace::Ddr, addr: map.ddr[&n], bytes });
            }
            _ => {}
        }
    }
    for &o in &g.outputs {
        program.outputs.push(binding(o)?);
    }
    program.streams = vec![e.out];
    program.validate(cfg).map_err(internal)?;
    program.check_sequence_numbers().map_err(internal)?;
    Ok(program)
}

/// Busy cycles of one instruction under the unit timing models, excluding
/// queueing and fabric contention.
pub fn instruction_cycles(i: &TpbInstruction, cfg: &MachineConfig) -> u64 {
    let fetch = u64::from(cfg.hbsm_latency);
    let total = |w: &WalkerConfig| w.total();
    fetch
        + match &i.op {
            OpDescriptor::Tcu(op) => op.timing(cfg).total(),
            OpDescriptor::Cvu { pipeline, a_dtype, b_dtype, out_dtype } => {
                let len = i.in_walkers.first().map_or(0, total);
                let a = len * a_dtype.byte_width() as u64;
                let b = i.in_walkers.get(1).map_or(0, |w| total(w) * b_dtype.byte_width() as u64);
                let o = i.out_walker.as_ref().map_or(0, |w| total(w) * out_dtype.byte_width() as u64);
                pipeline.cycles(cfg, len, a.max(b).max(o))
            }
            OpDescriptor::Dtdu(op) => {
                let n = i.out_walker.as_ref().map_or(0, total);
                if op.targets.is_empty() {
                    op.local_cycles(cfg, n)
                } else {
                    (n * u64::from(op.elem_bytes)).div_ceil(crate::fabric::UNIT_PORT_BYTES_PER_CYCLE)
                }
            }
            OpDescriptor::Csu(_) => u64::from(cfg.csu_interrupt_overhead),
        }
}

/// Lower bound on the simulated makespan: the first instruction must cross
/// the broadcast chain, and each unit runs its instructions one at a time.
pub fn estimate_latency(program: &ScheduledProgram, cfg: &MachineConfig) -> u64 {
    let mut per_unit: BTreeMap<(u32, Unit), u64> = BTreeMap::new();
    let mut first = u64::MAX;
    for stream in &program.streams {
        if let Some(i) = stream.first() {
            first = first.min(i.transmission_cycles(cfg.icb_bits_per_cycle) + u64::from(cfg.icb_hop_latency));
        }
        for i in stream {
            for t in i.tpb_mask.iter() {
                *per_unit.entry((t, i.unit)).or_default() += instruction_cycles(i, cfg);
            }
        }
    }
    if first == u64::MAX {
        return 0;
    }
    first + per_unit.values().copied().max().unwrap_or(0)
}
