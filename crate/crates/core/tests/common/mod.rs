//! Workload generators shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use npusim::compiler::ir::Graph;
use npusim::fabric::{DmaDescriptor, DmaDest};
use npusim::funits::{CvuOp, CvuPipeline, CvuStage, DtduKind, DtduOp, Tap};
use npusim::isa::{OpDescriptor, SyncAction, TpbInstruction, TpbMask, Unit};
use npusim::machine::{AddressSpace, DataType, MachineConfig, TensorDesc};
use npusim::program::{IoBinding, ScheduledProgram};
use npusim::sim::{run, RunOptions, RunReport};
use npusim::sync::CounterRef;
use npusim::walker::WalkerConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Hand-built producer/consumer pipelines

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageOp {
    AddImm(i8),
    Relu,
    Abs,
    Copy,
}

impl StageOp {
    pub fn apply(self, x: i64) -> i64 {
        let y = match self {
            StageOp::AddImm(k) => x + i64::from(k),
            StageOp::Relu => x.max(0),
            StageOp::Abs => x.abs(),
            StageOp::Copy => x,
        };
        y.clamp(-128, 127)
    }
}

#[derive(Debug, Clone)]
pub struct SyncPipeline {
    pub program: ScheduledProgram,
    pub input: Vec<u8>,
    pub expected: Vec<u8>,
    pub stages: Vec<(StageOp, u32)>,
    pub chunks: u32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Drops the ready monitor of the last stage's first chunk.
    pub drop_monitor: bool,
}

struct Buf {
    tpb: u32,
    base: u64,
    ready: CounterRef,
    free: CounterRef,
}

struct Builder<'a> {
    cfg: &'a MachineConfig,
    bump: BTreeMap<u32, u64>,
    counters: BTreeMap<u32, u32>,
    seqs: BTreeMap<(u32, Unit), u32>,
    stream_of: BTreeMap<(u32, Unit), usize>,
    streams: Vec<Vec<TpbInstruction>>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn space(&self, tpb: u32) -> AddressSpace {
        let (cluster, tpb) = self.cfg.tpb_local(tpb);
        AddressSpace::Hbsm { cluster, tpb }
    }

    fn counter(&mut self, tpb: u32) -> CounterRef {
        let i = self.counters.entry(tpb).or_insert(0);
        *i += 1;
        let (c, t) = self.cfg.tpb_local(tpb);
        CounterRef::new(c, t, *i - 1)
    }

    fn buf(&mut self, tpb: u32, bytes: u64, free_on: u32) -> Buf {
        let b = self.bump.entry(tpb).or_insert(0);
        let base = *b;
        *b += bytes.next_multiple_of(64);
        Buf { tpb, base, ready: self.counter(tpb), free: self.counter(free_on) }
    }

    fn push(&mut self, tpb: u32, op: OpDescriptor, ins: Vec<WalkerConfig>, out: WalkerConfig, syncs: Vec<SyncAction>) {
        let unit = op.unit();
        let n = self.streams.len();
        let d = *self.stream_of.entry((tpb, unit)).or_insert_with(|| self.rng.gen_range(0..n));
        let seq = self.seqs.entry((tpb, unit)).or_insert(0);
        let i = TpbInstruction::new(*seq, TpbMask::single(tpb), op, ins, Some(out), syncs).unwrap();
        *seq += 1;
        self.streams[d].push(i);
    }
}

fn walk(base: u64, bytes: u64, w: u64) -> WalkerConfig {
    WalkerConfig::dense(base, &[bytes / w], w).unwrap()
}

fn width(bytes: u64) -> u64 {
    let mut w = 128;
    while !bytes.is_multiple_of(w) {
        w /= 2;
    }
    w
}

/// Producer/consumer pipeline of 1–4 stages over double-buffered slots.
/// Each stage runs on a random TPB; buffers move between stages by DTDU
/// copies, the input arrives by DMA and the result leaves by DTDU.
pub fn sync_pipeline(cfg: &MachineConfig, seed: u64, faults: Faults) -> SyncPipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nstages = rng.gen_range(1..=4usize);
    let chunks = rng.gen_range(1..=6u32);
    let chunk = 32 * rng.gen_range(1..=16u64);
    let pool: Vec<u32> = {
        let mut all: Vec<u32> = (0..cfg.total_tpbs()).collect();
        all.shuffle(&mut rng);
        all.truncate(rng.gen_range(1..=4));
        all
    };
    let mut stages: Vec<(StageOp, u32)> = (0..nstages)
        .map(|_| {
            let op = match rng.gen_range(0..4) {
                0 => StageOp::AddImm(rng.gen_range(-9..=9)),
                1 => StageOp::Relu,
                2 => StageOp::Abs,
                _ => StageOp::Copy,
            };
            (op, *pool.choose(&mut rng).unwrap())
        })
        .collect();
    if faults.drop_monitor {
        // A copy stage would share the DTDU with the move feeding it, and
        // program order alone would then cover the dropped monitor.
        let last = stages.last_mut().unwrap();
        if last.0 == StageOp::Copy {
            last.0 = StageOp::Abs;
        }
    }
    let ndisp = rng.gen_range(1..=cfg.dispatcher_contexts as usize);
    let mut b = Builder {
        cfg,
        bump: BTreeMap::new(),
        counters: BTreeMap::new(),
        seqs: BTreeMap::new(),
        stream_of: BTreeMap::new(),
        streams: vec![Vec::new(); ndisp],
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    };
    let total = chunk * u64::from(chunks);
    let input: Vec<u8> = (0..total).map(|_| rng.gen_range(-100i8..=100) as u8).collect();
    let expected: Vec<u8> = input
        .iter()
        .map(|&x| stages.iter().fold(i64::from(x as i8), |v, (op, _)| op.apply(v)) as i8 as u8)
        .collect();

    // in[s] lives on the stage's TPB; its free counter sits with whoever
    // fills it. out[s] is local to the stage.
    let mut ins = Vec::new();
    let mut outs = Vec::new();
    for (s, &(_, t)) in stages.iter().enumerate() {
        let filler = if s == 0 { t } else { stages[s - 1].1 };
        ins.push(b.buf(t, 2 * chunk, filler));
        outs.push(b.buf(t, 2 * chunk, t));
    }
    let (in_ddr, out_ddr) = (0u64, total.next_multiple_of(64));
    let slot = |buf: &Buf, i: u32| buf.base + u64::from(i % 2) * chunk;
    let free_wait = |buf: &Buf, i: u32| (i >= 2).then(|| (buf.free, u64::from(i - 1)));

    let dmas: Vec<DmaDescriptor> = (0..chunks)
        .map(|i| DmaDescriptor {
            // One engine per buffer keeps chunk arrivals in counter order.
            engine: (seed % u64::from(cfg.ccb_dma_engines)) as u32,
            src: AddressSpace::Ddr,
            src_addr: in_ddr + u64::from(i) * chunk,
            dst: DmaDest::Space { space: b.space(ins[0].tpb), addr: slot(&ins[0], i) },
            bytes: chunk,
            wait: free_wait(&ins[0], i).into_iter().collect(),
            signal: vec![ins[0].ready],
        })
        .collect();
    let w = width(chunk);
    for i in 0..chunks {
        for (s, &(op, t)) in stages.iter().enumerate() {
            // Compute: in[s] -> out[s].
            let (inb, outb) = (&ins[s], &outs[s]);
            let mut syncs = Vec::new();
            if !(faults.drop_monitor && s + 1 == nstages && i == 0) {
                syncs.push(SyncAction::monitor(inb.ready, u64::from(i) + 1));
            }
            if let Some((c, e)) = free_wait(outb, i) {
                syncs.push(SyncAction::monitor(c, e));
            }
            syncs.push(SyncAction::update(inb.free));
            syncs.push(SyncAction::update(outb.ready));
            let (desc, iw) = match op {
                StageOp::Copy => (OpDescriptor::Dtdu(DtduOp::local(DtduKind::Copy, w as u8)), w),
                _ => {
                    let stage = match op {
                        StageOp::AddImm(k) => CvuStage::binary(CvuOp::Add, Tap::A, Tap::Imm(f32::from(k))),
                        StageOp::Relu => CvuStage::binary(CvuOp::Max, Tap::A, Tap::Imm(0.0)),
                        _ => CvuStage::unary(CvuOp::Abs, Tap::A),
                    };
                    let pipeline = CvuPipeline::new(vec![stage], 0).unwrap();
                    (OpDescriptor::Cvu { pipeline, a_dtype: DataType::I8, b_dtype: DataType::I8, out_dtype: DataType::I8 }, 1)
                }
            };
            let (src, dst) = (slot(inb, i), slot(outb, i));
            b.push(t, desc, vec![walk(src, chunk, iw)], walk(dst, chunk, iw), syncs);

            // Move: out[s] -> in[s+1], or to DDR after the last stage.
            let outb = &outs[s];
            let mut syncs = vec![SyncAction::monitor(outb.ready, u64::from(i) + 1)];
            let (targets, dst) = if s + 1 < nstages {
                let next = &ins[s + 1];
                if let Some((c, e)) = free_wait(next, i) {
                    syncs.push(SyncAction::monitor(c, e));
                }
                syncs.push(SyncAction::update(next.ready));
                let targets = if next.tpb == t { vec![] } else { vec![b.space(next.tpb)] };
                (targets, slot(next, i))
            } else {
                (vec![AddressSpace::Ddr], out_ddr + u64::from(i) * chunk)
            };
            syncs.push(SyncAction::update(outb.free));
            let op = DtduOp { kind: DtduKind::Copy, elem_bytes: w as u8, targets };
            b.push(t, OpDescriptor::Dtdu(op), vec![walk(slot(outb, i), chunk, w)], walk(dst, chunk, w), syncs);
        }
    }
    let bind = |name: &str, base| IoBinding {
        name: name.into(),
        desc: TensorDesc::dense(vec![total as usize], DataType::I8, AddressSpace::Ddr, base).unwrap(),
    };
    let program = ScheduledProgram {
        name: format!("sync{seed}"),
        inputs: vec![bind("x", in_ddr)],
        outputs: vec![bind("y", out_ddr)],
        dmas,
        streams: b.streams,
        ..Default::default()
    };
    SyncPipeline { program, input, expected, stages, chunks }
}

pub fn run_pipeline(cfg: &MachineConfig, p: &SyncPipeline) -> RunReport {
    run(&p.program, cfg, &BTreeMap::from([("x".to_string(), p.input.clone())]), RunOptions::default())
}

/// Two units on one TPB, each waiting for the other's update.
pub fn circular_wait() -> ScheduledProgram {
    let (a, bc) = (CounterRef::new(0, 0, 1), CounterRef::new(0, 0, 2));
    let w = |base| WalkerConfig::dense(base, &[64], 1).unwrap();
    let fill = TpbInstruction::new(
        0,
        TpbMask::single(0),
        OpDescriptor::Dtdu(DtduOp::local(DtduKind::Fill { pattern: 1 }, 1)),
        vec![],
        Some(w(0)),
        vec![SyncAction::monitor(bc, 1), SyncAction::update(a)],
    )
    .unwrap();
    let pipeline = CvuPipeline::new(vec![CvuStage::unary(CvuOp::Abs, Tap::A)], 0).unwrap();
    let cvu = TpbInstruction::new(
        0,
        TpbMask::single(0),
        OpDescriptor::Cvu { pipeline, a_dtype: DataType::I8, b_dtype: DataType::I8, out_dtype: DataType::I8 },
        vec![w(0)],
        Some(w(0x100)),
        vec![SyncAction::monitor(a, 1), SyncAction::update(bc)],
    )
    .unwrap();
    ScheduledProgram { name: "circular".into(), streams: vec![vec![fill], vec![cvu]], ..Default::default() }
}

// ---------------------------------------------------------------------------
// Random operator graphs

/// Random well-typed graph over the supported operator set. Every tensor
/// is built through the text form so the parser's inference is exercised.
pub fn random_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(g) = try_random_graph(&mut rng, seed) {
            return g;
        }
    }
}

fn try_random_graph(rng: &mut ChaCha8Rng, seed: u64) -> Option<Graph> {
    let family = rng.gen_range(0..3);
    let mut lines = vec![format!("graph rand{seed}")];
    // (name, dtype, shape)
    let mut live: Vec<(String, DataType, Vec<usize>)> = Vec::new();
    let rows = [8usize, 16, 32, 64][rng.gen_range(0..4)];
    let mut k = 0;
    let mut fresh = |p: &str| {
        k += 1;
        format!("{p}{k}")
    };
    let shape_s = |s: &[usize]| s.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
    match family {
        // Integer matmul chains with elementwise and layout ops.
        0 => {
            let dt = if rng.gen_bool(0.5) { DataType::I8 } else { DataType::U8 };
            let cols = [8usize, 16, 32][rng.gen_range(0..3)];
            lines.push(format!("input x dtype={dt} shape={rows}x{cols}"));
            live.push(("x".into(), dt, vec![rows, cols]));
            for _ in 0..rng.gen_range(2..6) {
                let (name, d, s) = live.choose(rng).unwrap().clone();
                let out = fresh("t");
                match rng.gen_range(0..6) {
                    0 | 1 if s.len() == 2 && matches!(d, DataType::I8 | DataType::U8) => {
                        let n = [8usize, 16, 32][rng.gen_range(0..3)];
                        let w = fresh("w");
                        lines.push(format!("const {w} dtype={d} shape={}x{n} init=seed:{}", s[1], rng.gen_range(0..100)));
                        let od = if rng.gen_bool(0.5) { DataType::I8 } else { DataType::I32 };
                        let shift = if od == DataType::I8 { rng.gen_range(2..6) } else { 0 };
                        let act = if rng.gen_bool(0.3) { " act=relu" } else { "" };
                        lines.push(format!("matmul {out} {name} {w} dtype={od} shift={shift}{act}"));
                        live.push((out, od, vec![s[0], n]));
                    }
                    2 => {
                        lines.push(format!("relu {out} {name}"));
                        live.push((out, d, s));
                    }
                    3 => {
                        let other = live.iter().filter(|(_, d2, s2)| *d2 == d && *s2 == s).map(|t| t.0.clone()).collect::<Vec<_>>();
                        let o = other.choose(rng).unwrap();
                        let op = if rng.gen_bool(0.5) { "add" } else { "mul" };
                        lines.push(format!("{op} {out} {name} {o}"));
                        live.push((out, d, s));
                    }
                    4 if s.len() == 2 => {
                        lines.push(format!("transpose {out} {name}"));
                        live.push((out, d, vec![s[1], s[0]]));
                    }
                    _ if s.len() == 2 => {
                        let ns = vec![s[0] * s[1] / 8, 8];
                        lines.push(format!("reshape {out} {name} shape={}", shape_s(&ns)));
                        live.push((out, d, ns));
                    }
                    _ => {}
                }
            }
        }
        // Float matmul / softmax / layernorm / elementwise chains.
        1 => {
            let dt = if rng.gen_bool(0.5) { DataType::F16 } else { DataType::F32 };
            let cols = [8usize, 16, 32, 64][rng.gen_range(0..4)];
            lines.push(format!("input x dtype={dt} shape={rows}x{cols}"));
            live.push(("x".into(), dt, vec![rows, cols]));
            if rng.gen_bool(0.5) {
                lines.push(format!("input b dtype={dt} shape={rows}x{cols}"));
                live.push(("b".into(), dt, vec![rows, cols]));
            }
            for _ in 0..rng.gen_range(2..7) {
                let (name, d, s) = live.choose(rng).unwrap().clone();
                let out = fresh("t");
                match rng.gen_range(0..7) {
                    0 if d == DataType::F16 => {
                        let n = [8usize, 16, 32][rng.gen_range(0..3)];
                        let w = fresh("w");
                        lines.push(format!("const {w} dtype=f16 shape={}x{n} init=seed:{}", s[1], rng.gen_range(0..100)));
                        let od = if rng.gen_bool(0.5) { DataType::F16 } else { DataType::F32 };
                        lines.push(format!("matmul {out} {name} {w} dtype={od}"));
                        live.push((out, od, vec![s[0], n]));
                    }
                    1 => {
                        lines.push(format!("softmax {out} {name}"));
                        live.push((out, d, s));
                    }
                    2 => {
                        lines.push(format!("layernorm {out} {name}"));
                        live.push((out, d, s));
                    }
                    3 => {
                        lines.push(format!("relu {out} {name}"));
                        live.push((out, d, s));
                    }
                    4 | 5 => {
                        let other = live.iter().filter(|(_, d2, s2)| *d2 == d && *s2 == s).map(|t| t.0.clone()).collect::<Vec<_>>();
                        let o = other.choose(rng).unwrap();
                        let op = if rng.gen_bool(0.5) { "add" } else { "mul" };
                        lines.push(format!("{op} {out} {name} {o}"));
                        live.push((out, d, s));
                    }
                    _ => {
                        lines.push(format!("transpose {out} {name}"));
                        live.push((out, d, vec![s[1], s[0]]));
                    }
                }
            }
        }
        // Convolutions and pooling over NHWC images.
        _ => {
            let n = [2usize, 4][rng.gen_range(0..2)];
            let hw = [6usize, 8][rng.gen_range(0..2)];
            let c = [2usize, 4][rng.gen_range(0..2)];
            lines.push(format!("input x dtype=i8 shape={n}x{hw}x{hw}x{c}"));
            live.push(("x".into(), DataType::I8, vec![n, hw, hw, c]));
            for _ in 0..rng.gen_range(2..5) {
                let (name, d, s) = live.choose(rng).unwrap().clone();
                let out = fresh("t");
                match rng.gen_range(0..4) {
                    0 | 1 if d == DataType::I8 && s.len() == 4 => {
                        let kk = rng.gen_range(1..=3usize).min(s[1]).min(s[2]);
                        let pad = if kk > 1 { rng.gen_range(0..kk) } else { 0 };
                        let stride = rng.gen_range(1..=2usize);
                        let co = [4usize, 8][rng.gen_range(0..2)];
                        let w = fresh("k");
                        lines.push(format!("const {w} dtype=i8 shape={kk}x{kk}x{}x{co} init=seed:{}", s[3], rng.gen_range(0..100)));
                        let act = if rng.gen_bool(0.5) { " act=relu" } else { "" };
                        lines.push(format!("conv2d {out} {name} {w} stride={stride} pad={pad} shift=3 dtype=i8{act}"));
                        let oh = (s[1] + 2 * pad - kk) / stride + 1;
                        let ow = (s[2] + 2 * pad - kk) / stride + 1;
                        live.push((out, DataType::I8, vec![s[0], oh, ow, co]));
                    }
                    2 if s.len() == 4 && s[1] >= 2 && s[2] >= 2 => {
                        let kind = if rng.gen_bool(0.5) { "max" } else { "avg" };
                        lines.push(format!("pool {out} {name} kind={kind} k=2"));
                        live.push((out, d, vec![s[0], s[1] / 2, s[2] / 2, s[3]]));
                    }
                    _ => {
                        lines.push(format!("relu {out} {name}"));
                        live.push((out, d, s));
                    }
                }
            }
        }
    }
    // Outputs: the last tensor plus, sometimes, another one.
    let last = live.last().unwrap().0.clone();
    if last == "x" || last == "b" {
        return None;
    }
    lines.push(format!("output {last}"));
    if live.len() > 3 && rng.gen_bool(0.3) {
        let extra = &live[rng.gen_range(1..live.len() - 1)].0;
        if extra != "b" && extra != &last {
            lines.push(format!("output {extra}"));
        }
    }
    let tpbs = rng.gen_range(1..=4);
    let chunks = [1, 2, 4, 8][rng.gen_range(0..4)];
    lines.push(format!("schedule tpbs={tpbs} chunks={chunks}"));
    let text = lines.join("\n") + "\n";
    Graph::parse(&text).ok()
}
