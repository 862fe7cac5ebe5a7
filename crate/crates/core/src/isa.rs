//! Tensor-granularity TPB instructions, their size model, their text form,
//! and the per-cluster instruction queue.
//!
//! Encoded size: a 128-bit header, 96 bits per walker loop level, 64 bits per
//! sync action, plus an opcode payload (matmul 128, conv 256, CVU
//! 64 + 64 per stage, DTDU 64 + 32 per remote target, CSU 64 + 8x64 args),
//! with a 256-bit floor. The size only feeds ICB transmission timing.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::funits::{
    Activation, CvuPipeline, DtduKind, DtduOp, ServiceCall, TcuKind, TcuOp, UnitError,
};
use crate::machine::{AddressSpace, DataType, MachineConfig};
use crate::sync::CounterRef;
use crate::text::{join, parse_list, parse_u64, Line, Record};
use crate::walker::{LoopLevel, WalkerConfig};

pub const HEADER_BITS: u64 = 128;
pub const BITS_PER_LEVEL: u64 = 96;
pub const BITS_PER_SYNC: u64 = 64;
pub const MIN_INSTRUCTION_BITS: u64 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IsaError {
    #[error("invalid instruction: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Unit(#[from] UnitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Tcu,
    Cvu,
    Dtdu,
    Csu,
}

impl Unit {
    pub const ALL: [Unit; 4] = [Unit::Tcu, Unit::Cvu, Unit::Dtdu, Unit::Csu];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Unit::Tcu => "tcu",
            Unit::Cvu => "cvu",
            Unit::Dtdu => "dtdu",
            Unit::Csu => "csu",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Unit {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Unit::ALL
            .into_iter()
            .find(|u| u.name() == s)
            .ok_or_else(|| IsaError::Parse(format!("unknown unit `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncStage {
    BeforeStart,
    PerChunk(u32),
    AfterComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncAction {
    Update { counter: CounterRef, stage: SyncStage },
    Monitor { counter: CounterRef, expected: u64, stage: SyncStage },
}

impl SyncAction {
    pub fn update(counter: CounterRef) -> Self {
        SyncAction::Update { counter, stage: SyncStage::AfterComplete }
    }

    pub fn monitor(counter: CounterRef, expected: u64) -> Self {
        SyncAction::Monitor { counter, expected, stage: SyncStage::BeforeStart }
    }

    pub fn counter(&self) -> CounterRef {
        match *self {
            SyncAction::Update { counter, .. } | SyncAction::Monitor { counter, .. } => counter,
        }
    }

    pub fn stage(&self) -> SyncStage {
        match *self {
            SyncAction::Update { stage, .. } | SyncAction::Monitor { stage, .. } => stage,
        }
    }
}

impl fmt::Display for SyncAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage() {
            SyncStage::BeforeStart => "start".to_string(),
            SyncStage::AfterComplete => "end".to_string(),
            SyncStage::PerChunk(n) => format!("chunk{n}"),
        };
        match self {
            SyncAction::Update { counter, .. } => write!(f, "upd:{counter}@{stage}"),
            SyncAction::Monitor { counter, expected, .. } => {
                write!(f, "mon:{counter}>={expected}@{stage}")
            }
        }
    }
}

impl FromStr for SyncAction {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| IsaError::Parse(format!("sync `{s}`: {m}"));
        let (body, stage) = s.split_once('@').ok_or_else(|| bad("missing stage"))?;
        let stage = match stage {
            "start" => SyncStage::BeforeStart,
            "end" => SyncStage::AfterComplete,
            other => SyncStage::PerChunk(
                other
                    .strip_prefix("chunk")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| bad("bad stage"))?,
            ),
        };
        if let Some(c) = body.strip_prefix("upd:") {
            let counter = c.parse().map_err(|_| bad("bad counter"))?;
            Ok(SyncAction::Update { counter, stage })
        } else if let Some(m) = body.strip_prefix("mon:") {
            let (c, e) = m.split_once(">=").ok_or_else(|| bad("missing >="))?;
            Ok(SyncAction::Monitor {
                counter: c.parse().map_err(|_| bad("bad counter"))?,
                expected: e.parse().map_err(|_| bad("bad expected"))?,
                stage,
            })
        } else {
            Err(bad("expected upd: or mon:"))
        }
    }
}

/// Destination TPB set, indexed by global TPB number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TpbMask(pub u128);

impl TpbMask {
    pub fn single(global: u32) -> Self {
        TpbMask(1u128 << global)
    }

    pub fn with(self, global: u32) -> Self {
        TpbMask(self.0 | 1u128 << global)
    }

    pub fn contains(&self, global: u32) -> bool {
        global < 128 && self.0 >> global & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..128u32).filter(|&g| self.contains(g))
    }

    pub fn count(&self) -> u32 {
        self.0.count_ones()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpDescriptor {
    Tcu(TcuOp),
    Cvu { pipeline: CvuPipeline, a_dtype: DataType, b_dtype: DataType, out_dtype: DataType },
    Dtdu(DtduOp),
    Csu(ServiceCall),
}

impl OpDescriptor {
    pub fn unit(&self) -> Unit {
        match self {
            OpDescriptor::Tcu(_) => Unit::Tcu,
            OpDescriptor::Cvu { .. } => Unit::Cvu,
            OpDescriptor::Dtdu(_) => Unit::Dtdu,
            OpDescriptor::Csu(_) => Unit::Csu,
        }
    }

    pub fn payload_bits(&self) -> u64 {
        match self {
            OpDescriptor::Tcu(op) => match op.kind {
                TcuKind::Matmul { .. } => 128,
                TcuKind::Conv2d { .. } => 256,
            },
            OpDescriptor::Cvu { pipeline, .. } => 64 + 64 * pipeline.stages.len() as u64,
            OpDescriptor::Dtdu(op) => 64 + 32 * op.targets.len() as u64,
            OpDescriptor::Csu(_) => 64 + 8 * 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpbInstruction {
    pub seq: u32,
    pub unit: Unit,
    pub tpb_mask: TpbMask,
    pub op: OpDescriptor,
    pub in_walkers: Vec<WalkerConfig>,
    pub out_walker: Option<WalkerConfig>,
    pub syncs: Vec<SyncAction>,
    pub encoded_bits: u64,
}

impl TpbInstruction {
    pub fn new(
        seq: u32,
        tpb_mask: TpbMask,
        op: OpDescriptor,
        in_walkers: Vec<WalkerConfig>,
        out_walker: Option<WalkerConfig>,
        syncs: Vec<SyncAction>,
    ) -> Result<Self, IsaError> {
        let mut instr = Self {
            seq,
            unit: op.unit(),
            tpb_mask,
            op,
            in_walkers,
            out_walker,
            syncs,
            encoded_bits: 0,
        };
        instr.encoded_bits = encoded_size(&instr);
        instr.check_structure()?;
        Ok(instr)
    }

    fn check_structure(&self) -> Result<(), IsaError> {
        let bad = |m: String| Err(IsaError::Invalid(format!("seq {}: {m}", self.seq)));
        if self.tpb_mask.is_empty() {
            return bad("empty TPB mask".into());
        }
        if self.unit != self.op.unit() {
            return bad("unit does not match opcode".into());
        }
        let n_in = self.in_walkers.len();
        let (lo, hi, out) = match &self.op {
            OpDescriptor::Tcu(_) => (2, 2, true),
            OpDescriptor::Cvu { pipeline, .. } => {
                let n = if pipeline.uses_b() { 2 } else { 1 };
                (n, n, true)
            }
            OpDescriptor::Dtdu(op) => match op.kind {
                DtduKind::Fill { .. } => (0, 0, true),
                _ => (1, 1, true),
            },
            OpDescriptor::Csu(_) => (0, 0, false),
        };
        if n_in < lo || n_in > hi {
            return bad(format!("{} takes {lo}..={hi} input walkers, got {n_in}", self.unit));
        }
        if out != self.out_walker.is_some() {
            return bad(format!("{} output walker presence mismatch", self.unit));
        }
        for s in &self.syncs {
            match *s {
                SyncAction::Monitor { stage, .. } if stage != SyncStage::BeforeStart => {
                    return bad("monitors are only supported before start".into())
                }
                SyncAction::Update { stage: SyncStage::PerChunk(0), .. } => {
                    return bad("per-chunk update with zero chunk size".into())
                }
                _ => {}
            }
        }
        if self.encoded_bits != encoded_size(self) {
            return bad("encoded size does not match the size formula".into());
        }
        Ok(())
    }

    /// Structural checks plus machine-dependent ranges.
    pub fn validate(&self, cfg: &MachineConfig) -> Result<(), IsaError> {
        self.check_structure()?;
        if let Some(g) = self.tpb_mask.iter().find(|&g| g >= cfg.total_tpbs()) {
            return Err(IsaError::Invalid(format!("seq {}: TPB {g} out of range", self.seq)));
        }
        for s in &self.syncs {
            let c = s.counter();
            if c.cluster >= cfg.num_clusters
                || c.tpb >= cfg.tpbs_per_cluster
                || c.index >= cfg.sync_counters
            {
                return Err(IsaError::Invalid(format!("seq {}: counter {c} out of range", self.seq)));
            }
        }
        match &self.op {
            OpDescriptor::Tcu(op) => op.validate()?,
            OpDescriptor::Cvu { pipeline, .. } => pipeline.validate()?,
            OpDescriptor::Dtdu(op) => op.validate(cfg)?,
            OpDescriptor::Csu(_) => {}
        }
        Ok(())
    }

    pub fn walker_levels(&self) -> usize {
        self.in_walkers.iter().chain(&self.out_walker).map(WalkerConfig::depth).sum()
    }

    /// Cycles to shift the instruction down an ICB of `bits_per_cycle`.
    pub fn transmission_cycles(&self, bits_per_cycle: u32) -> u64 {
        self.encoded_bits.div_ceil(bits_per_cycle.into())
    }
}

pub fn encoded_size(instr: &TpbInstruction) -> u64 {
    let bits = HEADER_BITS
        + BITS_PER_LEVEL * instr.walker_levels() as u64
        + BITS_PER_SYNC * instr.syncs.len() as u64
        + instr.op.payload_bits();
    bits.max(MIN_INSTRUCTION_BITS)
}

// ---------------------------------------------------------------------------
// Text form

fn encode_walker(w: &WalkerConfig) -> String {
    w.levels()
        .iter()
        .map(|l| format!("{}:{}:{}", l.initial, l.step, l.final_))
        .collect::<Vec<_>>()
        .join("|")
}

fn decode_walker(s: &str) -> Result<WalkerConfig, IsaError> {
    let bad = || IsaError::Parse(format!("walker `{s}`"));
    let levels = s
        .split('|')
        .map(|l| {
            let v: Vec<i64> = l.split(':').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
            match v[..] {
                [a, b, c] => Ok(LoopLevel::new(a, b, c)),
                _ => Err(bad()),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    WalkerConfig::new(levels).map_err(|e| IsaError::Parse(format!("walker `{s}`: {e}")))
}

fn encode_activation(a: Activation) -> String {
    match a {
        Activation::Identity => "identity".into(),
        Activation::Relu => "relu".into(),
        Activation::Relu6 => "relu6".into(),
        Activation::Clamp(lo, hi) => format!("clamp:{:08x}:{:08x}", lo.to_bits(), hi.to_bits()),
    }
}

fn decode_activation(s: &str) -> Result<Activation, IsaError> {
    let bad = || IsaError::Parse(format!("activation `{s}`"));
    Ok(match s {
        "identity" => Activation::Identity,
        "relu" => Activation::Relu,
        "relu6" => Activation::Relu6,
        _ => {
            let mut p = s.strip_prefix("clamp:").ok_or_else(bad)?.split(':');
            let mut f = || {
                p.next()
                    .and_then(|x| u32::from_str_radix(x, 16).ok())
                    .map(f32::from_bits)
                    .ok_or_else(bad)
            };
            Activation::Clamp(f()?, f()?)
        }
    })
}

impl TpbInstruction {
    /// One-line record; `prefix` words (e.g. the dispatcher) come first.
    pub fn to_record(&self, dispatcher: u32) -> String {
        let mut l = Line::new("instr")
            .kv("d", dispatcher)
            .kv("seq", self.seq)
            .kv("unit", self.unit)
            .kv("mask", format!("0x{:x}", self.tpb_mask.0));
        l = match &self.op {
            OpDescriptor::Tcu(op) => {
                l = match op.kind {
                    TcuKind::Matmul { m, k, n } => l.kv("op", "matmul").kv("m", m).kv("k", k).kv("n", n),
                    TcuKind::Conv2d { n, h, w, cin, cout, kh, kw, stride, pad } => l
                        .kv("op", "conv")
                        .kv("n", n)
                        .kv("h", h)
                        .kv("w", w)
                        .kv("cin", cin)
                        .kv("cout", cout)
                        .kv("kh", kh)
                        .kv("kw", kw)
                        .kv("stride", stride)
                        .kv("pad", pad),
                };
                l.kv("in", op.in_dtype)
                    .kv("acc", op.acc_dtype)
                    .kv("out", op.out_dtype)
                    .kv("shift", op.shift)
                    .kv("act", encode_activation(op.activation))
            }
            OpDescriptor::Cvu { pipeline, a_dtype, b_dtype, out_dtype } => l
                .kv("op", "cvu")
                .kv("stages", pipeline.encode_stages())
                .kv("seg", pipeline.segment)
                .kv("ta", a_dtype)
                .kv("tb", b_dtype)
                .kv("to", out_dtype),
            OpDescriptor::Dtdu(op) => {
                l = match op.kind {
                    DtduKind::Copy => l.kv("op", "copy"),
                    DtduKind::Transpose2d { rows, cols } => {
                        l.kv("op", "transpose").kv("rows", rows).kv("cols", cols)
                    }
                    DtduKind::Fill { pattern } => l.kv("op", "fill").kv("pattern", format!("0x{pattern:x}")),
                };
                l = l.kv("eb", op.elem_bytes);
                if !op.targets.is_empty() {
                    l = l.kv("targets", join(&op.targets, ","));
                }
                l
            }
            OpDescriptor::Csu(call) => {
                l.kv("op", "csu").kv("routine", &call.routine).kv("args", join(&call.args, ","))
            }
        };
        if !self.in_walkers.is_empty() {
            let w: Vec<String> = self.in_walkers.iter().map(encode_walker).collect();
            l = l.kv("win", w.join(";"));
        }
        if let Some(w) = &self.out_walker {
            l = l.kv("wout", encode_walker(w));
        }
        if !self.syncs.is_empty() {
            l = l.kv("sync", join(&self.syncs, ","));
        }
        l.kv("bits", self.encoded_bits).finish()
    }

    /// Parses a record produced by [`Self::to_record`]; returns the
    /// dispatcher index alongside the instruction.
    pub fn from_record(r: &Record) -> Result<(u32, TpbInstruction), IsaError> {
        let p = IsaError::Parse;
        if r.kind != "instr" {
            return Err(p(format!("expected instr record, got `{}`", r.kind)));
        }
        let dispatcher: u32 = r.parse_req("d").map_err(p)?;
        let seq: u32 = r.parse_req("seq").map_err(p)?;
        let mask_s = r.req("mask").map_err(p)?;
        let mask = u128::from_str_radix(mask_s.trim_start_matches("0x"), 16)
            .map_err(|e| p(format!("mask: {e}")))?;
        let dt = |k: &str| r.parse_req::<DataType>(k).map_err(p);
        let num = |k: &str| r.parse_req::<u32>(k).map_err(p);
        let op = match r.req("op").map_err(p)? {
            kind @ ("matmul" | "conv") => {
                let k = if kind == "matmul" {
                    TcuKind::Matmul { m: num("m")?, k: num("k")?, n: num("n")? }
                } else {
                    TcuKind::Conv2d {
                        n: num("n")?,
                        h: num("h")?,
                        w: num("w")?,
                        cin: num("cin")?,
                        cout: num("cout")?,
                        kh: num("kh")?,
                        kw: num("kw")?,
                        stride: num("stride")?,
                        pad: num("pad")?,
                    }
                };
                OpDescriptor::Tcu(TcuOp {
                    kind: k,
                    in_dtype: dt("in")?,
                    acc_dtype: dt("acc")?,
                    out_dtype: dt("out")?,
                    shift: r.parse_req("shift").map_err(p)?,
                    activation: decode_activation(r.req("act").map_err(p)?)?,
                })
            }
            "cvu" => OpDescriptor::Cvu {
                pipeline: CvuPipeline::decode_stages(r.req("stages").map_err(p)?, num("seg")?)?,
                a_dtype: dt("ta")?,
                b_dtype: dt("tb")?,
                out_dtype: dt("to")?,
            },
            kind @ ("copy" | "transpose" | "fill") => {
                let dk = match kind {
                    "copy" => DtduKind::Copy,
                    "transpose" => DtduKind::Transpose2d { rows: num("rows")?, cols: num("cols")? },
                    _ => DtduKind::Fill { pattern: parse_u64(r.req("pattern").map_err(p)?).map_err(p)? },
                };
                let targets = match r.get("targets") {
                    Some(t) => parse_list::<AddressSpace>(t, ',').map_err(p)?,
                    None => Vec::new(),
                };
                OpDescriptor::Dtdu(DtduOp { kind: dk, elem_bytes: r.parse_req("eb").map_err(p)?, targets })
            }
            "csu" => {
                let args: Vec<u64> = parse_list(r.req("args").map_err(p)?, ',').map_err(p)?;
                let args: [u64; 8] =
                    args.try_into().map_err(|_| p("csu args need exactly 8 words".into()))?;
                OpDescriptor::Csu(ServiceCall { routine: r.req("routine").map_err(p)?.to_string(), args })
            }
            other => return Err(p(format!("unknown op `{other}`"))),
        };
        let in_walkers = match r.get("win") {
            Some(w) => w.split(';').map(decode_walker).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let out_walker = r.get("wout").map(decode_walker).transpose()?;
        let syncs = match r.get("sync") {
            Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let instr = TpbInstruction::new(seq, TpbMask(mask), op, in_walkers, out_walker, syncs)?;
        if let Some(bits) = r.parse_opt::<u64>("bits").map_err(p)? {
            if bits != instr.encoded_bits {
                return Err(IsaError::Invalid(format!(
                    "seq {seq}: recorded size {bits} disagrees with formula {}",
                    instr.encoded_bits
                )));
            }
        }
        Ok((dispatcher, instr))
    }
}

// ---------------------------------------------------------------------------
// Instruction queue

/// Returned when the queue has no room; the ICB stalls rather than drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backpressure;

/// One cluster's instruction buffer: a FIFO per (TPB, unit), with a shared
/// capacity counted in instructions.
#[derive(Debug, Clone)]
pub struct InstructionQueue {
    capacity: usize,
    tpbs: usize,
    fifos: Vec<VecDeque<Arc<TpbInstruction>>>,
    len: usize,
}

impl InstructionQueue {
    pub fn new(tpbs: u32, capacity: u32) -> Self {
        Self {
            capacity: capacity as usize,
            tpbs: tpbs as usize,
            fifos: vec![VecDeque::new(); tpbs as usize * Unit::ALL.len()],
            len: 0,
        }
    }

    fn slot(&self, tpb: u32, unit: Unit) -> usize {
        assert!((tpb as usize) < self.tpbs, "tpb {tpb} outside cluster");
        tpb as usize * Unit::ALL.len() + unit.index()
    }

    pub fn enqueue(&mut self, tpb: u32, instr: Arc<TpbInstruction>) -> Result<(), Backpressure> {
        if self.len >= self.capacity {
            return Err(Backpressure);
        }
        let s = self.slot(tpb, instr.unit);
        self.fifos[s].push_back(instr);
        self.len += 1;
        Ok(())
    }

    pub fn ready_pop(&mut self, tpb: u32, unit: Unit) -> Option<Arc<TpbInstruction>> {
        let s = self.slot(tpb, unit);
        let i = self.fifos[s].pop_front()?;
        self.len -= 1;
        Some(i)
    }

    pub fn peek(&self, tpb: u32, unit: Unit) -> Option<&Arc<TpbInstruction>> {
        self.fifos[self.slot(tpb, unit)].front()
    }

    pub fn fifo_len(&self, tpb: u32, unit: Unit) -> usize {
        self.fifos[self.slot(tpb, unit)].len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn free_slots(&self) -> usize {
        self.capacity - self.len
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Arc<TpbInstruction>)> {
        self.fifos.iter().enumerate().flat_map(|(s, f)| {
            let tpb = (s / Unit::ALL.len()) as u32;
            f.iter().map(move |i| (tpb, i))
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::funits::{CvuOp, CvuStage, Tap};

    pub fn walker3() -> WalkerConfig {
        WalkerConfig::new(vec![
            LoopLevel::new(0, 1024, 1024),
            LoopLevel::new(0, 32, 992),
            LoopLevel::new(0, 1, 31),
        ])
        .unwrap()
    }

    pub fn matmul_instr(seq: u32) -> TpbInstruction {
        let c = CounterRef::new(0, 0, 1);
        TpbInstruction::new(
            seq,
            TpbMask::single(0),
            OpDescriptor::Tcu(TcuOp::matmul(32, 32, 64, DataType::I8)),
            vec![walker3(), walker3()],
            Some(walker3()),
            vec![SyncAction::monitor(c, 1), SyncAction::update(CounterRef::new(0, 0, 2))],
        )
        .unwrap()
    }

    fn cvu_instr(seq: u32) -> TpbInstruction {
        let p = CvuPipeline::new(vec![CvuStage::unary(CvuOp::Abs, Tap::A)], 0).unwrap();
        TpbInstruction::new(
            seq,
            TpbMask::single(0),
            OpDescriptor::Cvu { pipeline: p, a_dtype: DataType::F32, b_dtype: DataType::F32, out_dtype: DataType::F32 },
            vec![WalkerConfig::dense(0, &[4], 4).unwrap()],
            Some(WalkerConfig::dense(64, &[4], 4).unwrap()),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn matmul_size_example() {
        let i = matmul_instr(0);
        assert_eq!(i.encoded_bits, 128 + 9 * 96 + 2 * 64 + 128);
        assert_eq!(i.encoded_bits, 1248);
        assert_eq!(i.transmission_cycles(64), 20);
    }

    #[test]
    fn small_instruction_floor() {
        let i = TpbInstruction::new(
            0,
            TpbMask::single(0),
            OpDescriptor::Dtdu(DtduOp::local(DtduKind::Fill { pattern: 0 }, 1)),
            vec![],
            Some(WalkerConfig::dense(0, &[16], 1).unwrap()),
            vec![],
        )
        .unwrap();
        // header + one level + 64-bit DTDU payload = 288; the bare formula
        // without payload (224) would be clamped.
        assert_eq!(i.encoded_bits, 288);
        let mut bare = i.clone();
        bare.op = OpDescriptor::Dtdu(DtduOp::local(DtduKind::Fill { pattern: 0 }, 1));
        assert!(encoded_size(&bare) >= MIN_INSTRUCTION_BITS);
        assert_eq!((HEADER_BITS + BITS_PER_LEVEL).max(MIN_INSTRUCTION_BITS), 256);
    }

    #[test]
    fn structure_checks() {
        let err = TpbInstruction::new(
            0,
            TpbMask::default(),
            OpDescriptor::Tcu(TcuOp::matmul(1, 1, 1, DataType::I8)),
            vec![walker3(), walker3()],
            Some(walker3()),
            vec![],
        );
        assert!(err.is_err());
        let err = TpbInstruction::new(
            0,
            TpbMask::single(0),
            OpDescriptor::Tcu(TcuOp::matmul(1, 1, 1, DataType::I8)),
            vec![walker3()],
            Some(walker3()),
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn record_roundtrip() {
        let i = matmul_instr(7);
        let line = i.to_record(2);
        let (d, back) = TpbInstruction::from_record(&Record::parse(&line).unwrap()).unwrap();
        assert_eq!(d, 2);
        assert_eq!(back, i);
        let c = cvu_instr(3);
        let (_, back) = TpbInstruction::from_record(&Record::parse(&c.to_record(0)).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tampered_size_rejected() {
        let line = matmul_instr(0).to_record(0).replace("bits=1248", "bits=999");
        assert!(TpbInstruction::from_record(&Record::parse(&line).unwrap()).is_err());
    }

    #[test]
    fn queue_fifo_and_capacity() {
        let mut q = InstructionQueue::new(4, 64);
        for s in 0..64 {
            assert_eq!(q.enqueue(0, Arc::new(matmul_instr(s))), Ok(()));
        }
        assert_eq!(q.enqueue(1, Arc::new(matmul_instr(64))), Err(Backpressure));
        assert_eq!(q.ready_pop(0, Unit::Tcu).unwrap().seq, 0);
        assert_eq!(q.ready_pop(0, Unit::Tcu).unwrap().seq, 1);
        assert!(q.ready_pop(0, Unit::Cvu).is_none());
    }

    #[test]
    fn units_are_independent() {
        let mut q = InstructionQueue::new(4, 64);
        q.enqueue(0, Arc::new(matmul_instr(0))).unwrap();
        q.enqueue(0, Arc::new(cvu_instr(0))).unwrap();
        assert_eq!(q.ready_pop(0, Unit::Cvu).unwrap().unit, Unit::Cvu);
        assert_eq!(q.ready_pop(0, Unit::Tcu).unwrap().unit, Unit::Tcu);
        assert!(q.is_empty());
    }

    #[test]
    fn sync_text() {
        for s in ["upd:0.1.2@end", "mon:1.2.3>=4@start", "upd:0.0.1@chunk64"] {
            assert_eq!(s.parse::<SyncAction>().unwrap().to_string(), s);
        }
        assert!("mon:1.2.3@start".parse::<SyncAction>().is_err());
    }
}

#[cfg(test)]
mod props {
    use super::tests::matmul_instr;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Per (tpb, unit), pops come out in enqueue order under any interleaving.
        #[test]
        fn per_fifo_order(ops in prop::collection::vec((0u32..4, 0usize..4, any::<bool>()), 1..300)) {
            let mut q = InstructionQueue::new(4, 64);
            let mut next_seq = [[0u32; 4]; 4];
            let mut expect_pop = [[0u32; 4]; 4];
            let mut delivered = 0u32;
            let mut popped = 0u32;
            for (tpb, u, push) in ops {
                let unit = Unit::ALL[u];
                if push {
                    let mut i = matmul_instr(next_seq[tpb as usize][u]);
                    i.unit = unit;
                    if q.enqueue(tpb, Arc::new(i)).is_ok() {
                        next_seq[tpb as usize][u] += 1;
                        delivered += 1;
                    }
                } else if let Some(i) = q.ready_pop(tpb, unit) {
                    prop_assert_eq!(i.seq, expect_pop[tpb as usize][u]);
                    expect_pop[tpb as usize][u] += 1;
                    popped += 1;
                }
            }
            prop_assert_eq!(delivered - popped, q.len() as u32);
        }
    }
}
