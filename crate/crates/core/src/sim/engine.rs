//! Discrete-event machine engine.
//!
//! Time advances only to cycles where something happens. Within a visited
//! cycle the settlement order is fixed:
//!
//! 1. fabric delivery: ICB arrivals land in cluster queues, finished
//!    transfers write their payloads;
//! 2. unit milestones: outputs are written and their counter updates raised;
//! 3. counter updates due this cycle are applied, ordered by
//!    (cluster, tpb, unit) of the source;
//! 4. monitors are re-evaluated against the settled counters;
//! 5. issue: idle units pop their queues and start ready instructions, DMA
//!    engines start ready descriptors, and the ICB starts a transmission if
//!    the chain is free and the target queues have room.
//!
//! Unit timing is analytic: an instruction spends the HBSM read latency
//! fetching, then the unit's own cycle model executing. Results are computed
//! from a snapshot of the inputs at issue and written at completion.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use super::race::{coalesce, AgentId, RaceDetector, RaceReport, VClock};
use super::trace::{Trace, Track, TrackClass, STALL};
use crate::fabric::{
    hops, path_resources, DmaDest, FlowScheduler, IcbChain, InterruptCode, InterruptLog, InterruptSource, Node, Resource,
    UNIT_PORT_BYTES_PER_CYCLE,
};
use crate::funits::{ClusterCpu, DtduKind, GatherScatterPlan, RoutineBehavior, UnitError};
use crate::hbsm::Storage;
use crate::isa::{InstructionQueue, OpDescriptor, SyncAction, SyncStage, TpbInstruction, Unit};
use crate::machine::{for_each_index, AddressSpace, DataType, MachineConfig, TensorDesc};
use crate::program::ScheduledProgram;
use crate::sync::{CounterRef, SyncCounterFile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("program rejected: {0}")]
    Program(String),
    #[error("input `{0}`: {1}")]
    Input(String, String),
    #[error("deadlock at cycle {cycle}: {detail}")]
    DeadlockDetected { cycle: u64, detail: String, wait_cycle: Vec<String> },
    #[error("race at cycle {cycle}: {report}")]
    RaceDetected { cycle: u64, report: RaceReport },
    #[error("fault at cycle {cycle} on {site}: {error}")]
    UnitFault { cycle: u64, site: String, error: String },
    #[error("no end of task within {0} cycles")]
    Watchdog(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Issue at most one unit instruction or DMA descriptor at a time across
    /// the whole machine.
    pub serialize: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub instructions: u64,
    pub dma_descriptors: u64,
    pub icb_transmissions: u64,
    pub counter_updates: u64,
    pub cycles_visited: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outputs: BTreeMap<String, Vec<u8>>,
    pub makespan: u64,
    pub trace: Trace,
    pub interrupts: InterruptLog,
    pub fault: Option<SimError>,
    pub stats: RunStats,
}

impl RunReport {
    pub fn into_result(self) -> Result<RunReport, SimError> {
        match self.fault.clone() {
            Some(f) => Err(f),
            None => Ok(self),
        }
    }
}

/// Runs `program` to its end-of-task interrupt or first fault.
/// `inputs` maps input names to raw little-endian element bytes in
/// row-major order.
pub fn run(
    program: &ScheduledProgram,
    cfg: &MachineConfig,
    inputs: &BTreeMap<String, Vec<u8>>,
    opts: RunOptions,
) -> RunReport {
    let mut e = match Engine::new(program, cfg, opts) {
        Ok(e) => e,
        Err(err) => return failed_before_start(err),
    };
    if let Err(err) = e.load(inputs) {
        return failed_before_start(err);
    }
    let fault = e.main_loop().err();
    e.finish(fault)
}

fn failed_before_start(err: SimError) -> RunReport {
    RunReport {
        outputs: BTreeMap::new(),
        makespan: 0,
        trace: Trace::default(),
        interrupts: InterruptLog::default(),
        fault: Some(err),
        stats: RunStats::default(),
    }
}

// ---------------------------------------------------------------------------

const UNITS: usize = 4;

#[derive(Debug)]
enum Event {
    Arrive { cluster: u32, tpb: u32, instr: Arc<TpbInstruction> },
    Milestone { slot: usize, index: usize },
    Update { counter: CounterRef, key: (u32, u32, u32), vc: VClock },
    Deliver { tag: u64 },
    GsduStart { slot: usize },
    Wake,
}

#[derive(Debug, Clone)]
struct Milestone {
    elems: std::ops::Range<usize>,
    updates: Vec<CounterRef>,
}

#[derive(Debug, Clone)]
enum Post {
    None,
    Scale { addr: u64, count: u64, scale: f32 },
    Gsdu(GatherScatterPlan),
}

#[derive(Debug)]
struct Running {
    instr: Arc<TpbInstruction>,
    issue: u64,
    exec_start: u64,
    /// Output bytes in walk order, and where each element goes.
    data: Vec<u8>,
    addrs: Vec<u64>,
    width: usize,
    spaces: Vec<AddressSpace>,
    milestones: Vec<Milestone>,
    done: usize,
    post: Post,
    label: String,
    args: BTreeMap<String, Value>,
}

#[derive(Debug)]
enum UnitState {
    Idle,
    Waiting { instr: Arc<TpbInstruction>, since: u64 },
    Busy(Box<Running>),
}

#[derive(Debug)]
enum FlowOwner {
    Dma { engine: usize },
    Unit { slot: usize },
}

#[derive(Debug)]
struct ActiveDma {
    index: usize,
    start: u64,
    data: Vec<u8>,
}

#[derive(Debug, Default)]
struct DmaState {
    queue: VecDeque<usize>,
    active: Option<ActiveDma>,
}

struct Engine<'a> {
    cfg: &'a MachineConfig,
    prog: &'a ScheduledProgram,
    opts: RunOptions,
    now: u64,
    hbsm: Vec<Storage>,
    sram: Storage,
    ddr: Storage,
    counters: Vec<SyncCounterFile>,
    queues: Vec<InstructionQueue>,
    reserved: Vec<usize>,
    units: Vec<UnitState>,
    cursors: Vec<usize>,
    icb: IcbChain,
    dma: Vec<DmaState>,
    flows: FlowScheduler,
    owners: BTreeMap<u64, (FlowOwner, u64)>,
    next_tag: u64,
    cpus: Vec<ClusterCpu>,
    race: RaceDetector,
    calendar: BTreeMap<u64, Vec<Event>>,
    pending_updates: Vec<((u32, u32, u32), CounterRef, VClock)>,
    trace: Trace,
    interrupts: InterruptLog,
    stats: RunStats,
    inflight: usize,
}

fn unit_of(slot: usize) -> Unit {
    Unit::ALL[slot % UNITS]
}

impl<'a> Engine<'a> {
    fn new(prog: &'a ScheduledProgram, cfg: &'a MachineConfig, opts: RunOptions) -> Result<Self, SimError> {
        cfg.clone().validate().map_err(|e| SimError::Program(e.to_string()))?;
        prog.validate(cfg).map_err(|e| SimError::Program(e.to_string()))?;
        let tpbs = cfg.total_tpbs() as usize;
        let mut dma: Vec<DmaState> = (0..cfg.ccb_dma_engines).map(|_| DmaState::default()).collect();
        for (i, d) in prog.dmas.iter().enumerate() {
            dma[d.engine as usize].queue.push_back(i);
        }
        let agents = tpbs * UNITS + cfg.ccb_dma_engines as usize + 1;
        Ok(Self {
            cfg,
            prog,
            opts,
            now: 0,
            hbsm: (0..tpbs).map(|_| Storage::new(cfg.hbsm_bytes)).collect(),
            sram: Storage::new(cfg.ccb_sram_bytes),
            ddr: Storage::new(cfg.ddr_bytes),
            counters: (0..tpbs).map(|_| SyncCounterFile::new(cfg.sync_counters)).collect(),
            queues: (0..cfg.num_clusters).map(|_| InstructionQueue::new(cfg.tpbs_per_cluster, cfg.queue_capacity)).collect(),
            reserved: vec![0; cfg.num_clusters as usize],
            units: (0..tpbs * UNITS).map(|_| UnitState::Idle).collect(),
            cursors: vec![0; prog.streams.len()],
            icb: IcbChain::new(cfg),
            dma,
            flows: FlowScheduler::new(cfg),
            owners: BTreeMap::new(),
            next_tag: 0,
            cpus: (0..cfg.num_clusters).map(|_| ClusterCpu::new(cfg.csu_interrupt_overhead.into())).collect(),
            race: RaceDetector::new(agents),
            calendar: BTreeMap::new(),
            pending_updates: Vec::new(),
            trace: Trace::default(),
            interrupts: InterruptLog::default(),
            stats: RunStats::default(),
            inflight: 0,
        })
    }

    // -- addressing helpers ------------------------------------------------

    fn storage(&mut self, space: AddressSpace) -> &mut Storage {
        match space {
            AddressSpace::Hbsm { cluster, tpb } => &mut self.hbsm[self.cfg.tpb_global(cluster, tpb) as usize],
            AddressSpace::CcbSram => &mut self.sram,
            AddressSpace::Ddr => &mut self.ddr,
        }
    }

    fn slot_space(&self, slot: usize) -> AddressSpace {
        let (cluster, tpb) = self.cfg.tpb_local((slot / UNITS) as u32);
        AddressSpace::Hbsm { cluster, tpb }
    }

    fn slot_name(&self, slot: usize) -> String {
        let (c, t) = self.cfg.tpb_local((slot / UNITS) as u32);
        format!("c{c}.t{t}.{}", unit_of(slot))
    }

    fn slot_key(&self, slot: usize) -> (u32, u32, u32) {
        let (c, t) = self.cfg.tpb_local((slot / UNITS) as u32);
        (c, t, (slot % UNITS) as u32)
    }

    fn unit_track(&self, slot: usize) -> Track {
        let (c, _) = self.cfg.tpb_local((slot / UNITS) as u32);
        Track { class: TrackClass::Unit, group: Some(c), name: self.slot_name(slot) }
    }

    fn dma_agent(&self, engine: usize) -> AgentId {
        self.units.len() + engine
    }

    fn fault(&self, site: &str, error: impl ToString) -> SimError {
        SimError::UnitFault { cycle: self.now, site: site.to_string(), error: error.to_string() }
    }

    fn race_err(&self, report: RaceReport) -> SimError {
        SimError::RaceDetected { cycle: self.now, report }
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        self.calendar.entry(at).or_default().push(ev);
    }

    /// Reads `width`-byte elements at walker addresses, race-checked.
    fn read_elems(&mut self, agent: AgentId, space: AddressSpace, addrs: &[u64], width: usize, site: &str) -> Result<Vec<u8>, SimError> {
        let mut out = Vec::with_capacity(addrs.len() * width);
        for (a, len) in coalesce(addrs, width as u64) {
            self.race.read(agent, space, a, len).map_err(|r| self.race_err(r))?;
            let bytes = self.storage(space).read(a, len).map_err(|e| self.fault(site, e))?;
            out.extend(bytes);
        }
        Ok(out)
    }

    fn write_elems(&mut self, agent: AgentId, space: AddressSpace, addrs: &[u64], width: usize, data: &[u8], site: &str) -> Result<(), SimError> {
        let mut off = 0usize;
        for (a, len) in coalesce(addrs, width as u64) {
            self.race.write(agent, space, a, len).map_err(|r| self.race_err(r))?;
            let n = len as usize;
            self.storage(space).write(a, &data[off..off + n]).map_err(|e| self.fault(site, e))?;
            off += n;
        }
        Ok(())
    }

    // -- program load ------------------------------------------------------

    fn load(&mut self, inputs: &BTreeMap<String, Vec<u8>>) -> Result<(), SimError> {
        for d in &self.prog.data {
            self.storage(d.space).write(d.addr, &d.bytes).map_err(|e| SimError::Program(e.to_string()))?;
            self.race.preload(d.space, d.addr, d.bytes.len() as u64);
        }
        for b in &self.prog.inputs {
            let bytes = inputs.get(&b.name).ok_or_else(|| SimError::Input(b.name.clone(), "missing".into()))?;
            if bytes.len() as u64 != b.desc.tensor_bytes() {
                return Err(SimError::Input(
                    b.name.clone(),
                    format!("{} bytes, expected {}", bytes.len(), b.desc.tensor_bytes()),
                ));
            }
            let w = b.desc.dtype.byte_width();
            let mut i = 0;
            let mut err = None;
            for_each_index(&b.desc.shape, |ix| {
                let (space, off) = b.desc.element_address(ix).expect("index in shape");
                if let Err(e) = self.storage(space).write(off, &bytes[i * w..(i + 1) * w]) {
                    err = Some(e);
                }
                self.race.preload(space, off, w as u64);
                i += 1;
            });
            if let Some(e) = err {
                return Err(SimError::Input(b.name.clone(), e.to_string()));
            }
        }
        Ok(())
    }

    fn read_tensor(&mut self, desc: &TensorDesc) -> Vec<u8> {
        let w = desc.dtype.byte_width();
        let mut out = Vec::with_capacity(desc.num_elements() * w);
        for_each_index(&desc.shape, |ix| {
            let (space, off) = desc.element_address(ix).expect("index in shape");
            out.extend(self.storage(space).read(off, w as u64).unwrap_or_else(|_| vec![0; w]));
        });
        out
    }

    // -- main loop -----------------------------------------------------------

    fn main_loop(&mut self) -> Result<(), SimError> {
        loop {
            self.stats.cycles_visited += 1;
            self.visit()?;
            if self.is_done() {
                self.interrupts.raise(self.now, InterruptSource::Dispatcher(0), InterruptCode::TaskComplete);
                return Ok(());
            }
            let next = [self.calendar.keys().next().copied(), self.flows.next_completion()]
                .into_iter()
                .flatten()
                .min();
            match next {
                None => return Err(self.deadlock()),
                Some(t) => {
                    if t > self.cfg.max_cycles {
                        self.now = self.cfg.max_cycles;
                        return Err(SimError::Watchdog(self.cfg.max_cycles));
                    }
                    debug_assert!(t > self.now, "event scheduled in the past");
                    self.now = t.max(self.now + 1);
                }
            }
        }
    }

    fn is_done(&self) -> bool {
        self.cursors.iter().zip(&self.prog.streams).all(|(c, s)| *c == s.len())
            && self.calendar.is_empty()
            && self.flows.is_idle()
            && self.queues.iter().all(InstructionQueue::is_empty)
            && self.units.iter().all(|u| matches!(u, UnitState::Idle))
            && self.dma.iter().all(|d| d.queue.is_empty() && d.active.is_none())
    }

    fn visit(&mut self) -> Result<(), SimError> {
        let t = self.now;
        let events = self.calendar.remove(&t).unwrap_or_default();
        // 1. fabric delivery
        for (_, tag) in self.flows.complete_until(t) {
            let latency = self.owners.get(&tag).map_or(0, |o| o.1);
            if latency == 0 {
                self.deliver(tag)?;
            } else {
                self.schedule(t + latency, Event::Deliver { tag });
            }
        }
        let mut milestones = Vec::new();
        for ev in events {
            match ev {
                Event::Arrive { cluster, tpb, instr } => {
                    self.reserved[cluster as usize] -= 1;
                    self.queues[cluster as usize]
                        .enqueue(tpb, instr)
                        .expect("queue slot was reserved before transmission");
                }
                Event::Deliver { tag } => self.deliver(tag)?,
                Event::Milestone { slot, index } => milestones.push((slot, index)),
                Event::Update { counter, key, vc } => self.pending_updates.push((key, counter, vc)),
                Event::GsduStart { slot } => self.gsdu_start(slot)?,
                Event::Wake => {}
            }
        }
        // 2. unit milestones
        milestones.sort_unstable();
        for (slot, index) in milestones {
            self.milestone(slot, index)?;
        }
        // 3. counter updates
        let mut ups = std::mem::take(&mut self.pending_updates);
        ups.sort_by_key(|a| a.0);
        for (key, counter, vc) in ups {
            let g = self.cfg.tpb_global(counter.cluster, counter.tpb) as usize;
            let value = self.counters[g]
                .update(counter.index)
                .map_err(|e| self.fault(&format!("counter {counter}"), e))?;
            self.race.release(counter, value, &vc);
            self.stats.counter_updates += 1;
            let track = Track { class: TrackClass::Unit, group: Some(counter.cluster), name: format!("c{}.t{}.su", counter.cluster, counter.tpb) };
            self.trace.instant(
                track,
                "update",
                t,
                BTreeMap::from([
                    ("counter".to_string(), json!(counter.to_string())),
                    ("value".to_string(), json!(value)),
                    ("from".to_string(), json!(format!("{}.{}.{}", key.0, key.1, key.2))),
                ]),
            );
        }
        // 4 + 5. monitor evaluation and issue
        for slot in 0..self.units.len() {
            self.try_issue(slot)?;
        }
        for e in 0..self.dma.len() {
            self.try_dma(e)?;
        }
        self.try_icb();
        Ok(())
    }

    // -- counters ------------------------------------------------------------

    fn counter_value(&self, c: CounterRef) -> u64 {
        let g = self.cfg.tpb_global(c.cluster, c.tpb) as usize;
        self.counters[g].value(c.index).unwrap_or(0)
    }

    /// Routes an update raised at `now` by `src_node` with the given key.
    fn raise_update(&mut self, counter: CounterRef, key: (u32, u32, u32), vc: VClock, src: Option<(u32, u32)>) {
        let delay = match src {
            Some((c, t)) if c == counter.cluster && t == counter.tpb => 0,
            Some((c, _)) if c == counter.cluster => 1,
            Some((c, _)) => 1 + hops(Node::Cluster(c), Node::Cluster(counter.cluster)) * u64::from(self.cfg.mesh_hop_latency),
            None => 1 + hops(Node::Ccb, Node::Cluster(counter.cluster)) * u64::from(self.cfg.mesh_hop_latency),
        };
        if delay == 0 {
            self.pending_updates.push((key, counter, vc));
        } else {
            self.schedule(self.now + delay, Event::Update { counter, key, vc });
        }
    }

    // -- issue -----------------------------------------------------------------

    fn try_issue(&mut self, slot: usize) -> Result<(), SimError> {
        if matches!(self.units[slot], UnitState::Idle) {
            let g = (slot / UNITS) as u32;
            let (c, t) = self.cfg.tpb_local(g);
            if let Some(instr) = self.queues[c as usize].ready_pop(t, unit_of(slot)) {
                self.units[slot] = UnitState::Waiting { instr, since: self.now };
            }
        }
        let UnitState::Waiting { instr, since } = &self.units[slot] else { return Ok(()) };
        let (instr, since) = (instr.clone(), *since);
        let ready = instr.syncs.iter().all(|s| match *s {
            SyncAction::Monitor { counter, expected, .. } => self.counter_value(counter) >= expected,
            _ => true,
        });
        if !ready || (self.opts.serialize && self.inflight > 0) {
            return Ok(());
        }
        if since < self.now {
            let track = self.unit_track(slot);
            self.trace.span(track, STALL, since, self.now, Some(instr.seq), BTreeMap::new());
        }
        for s in &instr.syncs {
            if let SyncAction::Monitor { counter, expected, .. } = *s {
                self.race.acquire(slot, counter, expected);
            }
        }
        self.race.tick(slot);
        self.inflight += 1;
        self.stats.instructions += 1;
        // Updates tied to the start of execution.
        let before: Vec<CounterRef> = instr
            .syncs
            .iter()
            .filter_map(|s| match *s {
                SyncAction::Update { counter, stage: SyncStage::BeforeStart } => Some(counter),
                _ => None,
            })
            .collect();
        let key = self.slot_key(slot);
        let src = (key.0, key.1);
        for c in before {
            let vc = self.race.clock(slot).clone();
            self.raise_update(c, key, vc, Some(src));
        }
        let site = format!("{} seq {}", self.slot_name(slot), instr.seq);
        self.execute(slot, instr, &site)
    }

    fn execute(&mut self, slot: usize, instr: Arc<TpbInstruction>, site: &str) -> Result<(), SimError> {
        let own = self.slot_space(slot);
        let now = self.now;
        let fetch = u64::from(self.cfg.hbsm_latency);
        let walk = |w: &crate::walker::WalkerConfig| w.addresses();
        let mut run = Running {
            instr: instr.clone(),
            issue: now,
            exec_start: now + fetch,
            data: Vec::new(),
            addrs: instr.out_walker.as_ref().map(walk).unwrap_or_default(),
            width: 1,
            spaces: vec![own],
            milestones: Vec::new(),
            done: 0,
            post: Post::None,
            label: String::new(),
            args: BTreeMap::new(),
        };
        // Some(exec cycles) for locally timed work; None when completion
        // comes from a fabric transfer or the cluster CPU.
        let exec: Option<u64> = match &instr.op {
            OpDescriptor::Tcu(op) => {
                let iw = op.in_dtype.byte_width();
                let a_addr = walk(&instr.in_walkers[0]);
                let w_addr = walk(&instr.in_walkers[1]);
                let a = self.read_elems(slot, own, &a_addr, iw, site)?;
                let w = self.read_elems(slot, own, &w_addr, iw, site)?;
                let dec = |b: &[u8]| b.chunks(iw).map(|x| op.in_dtype.decode(x)).collect::<Vec<f64>>();
                let out = op.compute(&dec(&a), &dec(&w)).map_err(|e| self.fault(site, e))?;
                run.width = op.out_dtype.byte_width();
                run.data = out.iter().flat_map(|&v| op.out_dtype.encode(v)).collect();
                let tm = op.timing(self.cfg);
                run.label = match op.kind {
                    crate::funits::TcuKind::Matmul { .. } => "matmul".into(),
                    crate::funits::TcuKind::Conv2d { .. } => "conv2d".into(),
                };
                run.args = BTreeMap::from([
                    ("mac".to_string(), json!(tm.mac)),
                    ("fetch_bw".to_string(), json!(tm.fetch)),
                    ("fill".to_string(), json!(tm.fill)),
                    ("drain".to_string(), json!(tm.drain)),
                    ("macs".to_string(), json!(op.macs())),
                ]);
                Some(tm.total())
            }
            OpDescriptor::Cvu { pipeline, a_dtype, b_dtype, out_dtype } => {
                let aw = a_dtype.byte_width();
                let a_addr = walk(&instr.in_walkers[0]);
                let a = self.read_elems(slot, own, &a_addr, aw, site)?;
                let af: Vec<f32> = a.chunks(aw).map(|x| a_dtype.decode(x) as f32).collect();
                let mut stream_bytes = a.len() as u64;
                let bf = if pipeline.uses_b() {
                    let bw = b_dtype.byte_width();
                    let b_addr = walk(&instr.in_walkers[1]);
                    let b = self.read_elems(slot, own, &b_addr, bw, site)?;
                    stream_bytes = stream_bytes.max(b.len() as u64);
                    Some(b.chunks(bw).map(|x| b_dtype.decode(x) as f32).collect::<Vec<f32>>())
                } else {
                    None
                };
                let out = pipeline
                    .compute(&af, bf.as_deref(), *out_dtype, self.cfg.fault_on_nonfinite)
                    .map_err(|e| self.fault(site, e))?;
                run.width = out_dtype.byte_width();
                run.data = out.iter().flat_map(|&v| out_dtype.encode(f64::from(v))).collect();
                stream_bytes = stream_bytes.max(run.data.len() as u64);
                run.label = "cvu".into();
                Some(pipeline.cycles(self.cfg, af.len() as u64, stream_bytes))
            }
            OpDescriptor::Dtdu(op) => {
                let w = op.elem_bytes as usize;
                run.width = w;
                let in_addrs = instr.in_walkers.first().map(walk).unwrap_or_default();
                let elems: Vec<Vec<u8>> = if in_addrs.is_empty() {
                    Vec::new()
                } else {
                    self.read_elems(slot, own, &in_addrs, w, site)?.chunks(w).map(<[u8]>::to_vec).collect()
                };
                let out = op.transform(&elems, run.addrs.len()).map_err(|e| self.fault(site, e))?;
                run.data = out.concat();
                run.label = match op.kind {
                    DtduKind::Copy => "copy".into(),
                    DtduKind::Transpose2d { .. } => "transpose".into(),
                    DtduKind::Fill { .. } => "fill".into(),
                };
                if !op.targets.is_empty() {
                    run.spaces = op.targets.clone();
                }
                let remote = op.is_remote(own);
                if !remote && !in_addrs.is_empty() && crate::funits::dtdu::ranges_overlap(&in_addrs, &run.addrs, w as u64) {
                    return Err(self.fault(site, UnitError::OverlapFault));
                }
                if remote {
                    let bytes = run.data.len() as u64;
                    let (resources, latency) = if run.spaces.len() > 1 {
                        (vec![Resource::Drb], fetch)
                    } else {
                        let dst = run.spaces[0];
                        let h = hops(Node::of_space(own), Node::of_space(dst));
                        let port = match own {
                            AddressSpace::Hbsm { cluster, .. } => (cluster % 2) as u8,
                            _ => 0,
                        };
                        (path_resources(self.cfg, own, dst, port), fetch + h * u64::from(self.cfg.mesh_hop_latency))
                    };
                    self.start_flow(bytes, resources, UNIT_PORT_BYTES_PER_CYCLE, FlowOwner::Unit { slot }, latency);
                    run.args.insert("bytes".into(), json!(bytes));
                    None
                } else {
                    Some(op.local_cycles(self.cfg, run.addrs.len() as u64))
                }
            }
            OpDescriptor::Csu(call) => {
                let routine = self.prog.routines.get(&call.routine).map_err(|e| self.fault(site, e))?.clone();
                let (c, _) = self.cfg.tpb_local((slot / UNITS) as u32);
                let (start, end) = self.cpus[c as usize].serve(now, routine.cost);
                let track = Track { class: TrackClass::Cpu, group: Some(c), name: format!("c{c}.cpu") };
                self.trace.span(track, &routine.name, start, end, Some(instr.seq), BTreeMap::new());
                run.label = format!("csu:{}", routine.name);
                run.exec_start = now;
                match routine.behavior {
                    RoutineBehavior::NoOp => {}
                    RoutineBehavior::ScalarPostprocess => {
                        run.post = Post::Scale {
                            addr: call.args[0],
                            count: call.args[1],
                            scale: f32::from_bits(call.args[2] as u32),
                        }
                    }
                    RoutineBehavior::LaunchGsdu => {
                        let plan = GatherScatterPlan::from_args(&call.args, self.cfg).map_err(|e| self.fault(site, e))?;
                        run.post = Post::Gsdu(plan);
                    }
                }
                run.milestones = vec![Milestone { elems: 0..0, updates: self.end_updates(&instr) }];
                let gsdu = matches!(run.post, Post::Gsdu(_));
                self.units[slot] = UnitState::Busy(Box::new(run));
                if gsdu {
                    self.schedule(end, Event::GsduStart { slot });
                } else {
                    self.schedule(end, Event::Milestone { slot, index: 0 });
                }
                return Ok(());
            }
        };
        let n = run.addrs.len();
        if run.data.len() != n * run.width {
            return Err(self.fault(site, format!("output walker covers {n} elements, result has {}", run.data.len() / run.width.max(1))));
        }
        run.milestones = self.plan_milestones(&instr, n).map_err(|e| self.fault(site, e))?;
        if let Some(exec) = exec {
            let exec = exec.max(1);
            let count = run.milestones.len() as u64;
            for k in 0..count {
                let at = now + fetch + (exec * (k + 1)).div_ceil(count);
                self.schedule(at, Event::Milestone { slot, index: k as usize });
            }
        }
        self.units[slot] = UnitState::Busy(Box::new(run));
        Ok(())
    }

    fn end_updates(&self, instr: &TpbInstruction) -> Vec<CounterRef> {
        instr
            .syncs
            .iter()
            .filter_map(|s| match *s {
                SyncAction::Update { counter, stage: SyncStage::AfterComplete } => Some(counter),
                _ => None,
            })
            .collect()
    }

    /// Splits the output into per-chunk milestones. All per-chunk updates of
    /// one instruction must share a chunk size.
    fn plan_milestones(&self, instr: &TpbInstruction, n: usize) -> Result<Vec<Milestone>, String> {
        let mut chunk = None;
        let mut per_chunk = Vec::new();
        for s in &instr.syncs {
            if let SyncAction::Update { counter, stage: SyncStage::PerChunk(c) } = *s {
                if chunk.is_some_and(|x| x != c) {
                    return Err("per-chunk updates with different chunk sizes".into());
                }
                chunk = Some(c);
                per_chunk.push(counter);
            }
        }
        let end = self.end_updates(instr);
        let Some(c) = chunk else {
            return Ok(vec![Milestone { elems: 0..n, updates: end }]);
        };
        let c = c as usize;
        let k = n.div_ceil(c).max(1);
        let mut ms: Vec<Milestone> =
            (0..k).map(|i| Milestone { elems: i * c..((i + 1) * c).min(n), updates: per_chunk.clone() }).collect();
        ms.last_mut().expect("at least one").updates.extend(end);
        Ok(ms)
    }

    fn start_flow(&mut self, bytes: u64, resources: Vec<Resource>, cap: u64, owner: FlowOwner, latency: u64) {
        let tag = self.next_tag;
        self.next_tag += 1;
        self.owners.insert(tag, (owner, latency));
        self.flows.start(self.now, bytes.max(1), resources, cap, tag);
    }

    fn milestone(&mut self, slot: usize, index: usize) -> Result<(), SimError> {
        let UnitState::Busy(run) = &self.units[slot] else {
            unreachable!("milestone for an idle unit")
        };
        let m = run.milestones[index].clone();
        let (addrs, data, width, spaces, post) = (
            run.addrs[m.elems.clone()].to_vec(),
            run.data[m.elems.start * run.width..m.elems.end * run.width].to_vec(),
            run.width,
            run.spaces.clone(),
            run.post.clone(),
        );
        let seq = run.instr.seq;
        let site = format!("{} seq {seq}", self.slot_name(slot));
        for space in spaces {
            self.write_elems(slot, space, &addrs, width, &data, &site)?;
        }
        if let Post::Scale { addr, count, scale } = post {
            let own = self.slot_space(slot);
            let addrs: Vec<u64> = (0..count).map(|i| addr + 4 * i).collect();
            let bytes = self.read_elems(slot, own, &addrs, 4, &site)?;
            let scaled: Vec<u8> = bytes
                .chunks(4)
                .flat_map(|b| (f32::from_le_bytes(b.try_into().expect("4 bytes")) * scale).to_le_bytes())
                .collect();
            self.write_elems(slot, own, &addrs, 4, &scaled, &site)?;
        }
        let key = self.slot_key(slot);
        let vc = self.race.clock(slot).clone();
        for c in m.updates {
            self.raise_update(c, key, vc.clone(), Some((key.0, key.1)));
        }
        let UnitState::Busy(run) = &mut self.units[slot] else { unreachable!() };
        run.done += 1;
        if run.done == run.milestones.len() {
            let UnitState::Busy(run) = std::mem::replace(&mut self.units[slot], UnitState::Idle) else { unreachable!() };
            self.inflight -= 1;
            let track = self.unit_track(slot);
            if run.exec_start > run.issue {
                self.trace.span(track.clone(), "fetch", run.issue, run.exec_start, Some(run.instr.seq), BTreeMap::new());
            }
            self.trace.span(track, &run.label, run.exec_start, self.now, Some(run.instr.seq), run.args);
        }
        Ok(())
    }

    fn gsdu_start(&mut self, slot: usize) -> Result<(), SimError> {
        let UnitState::Busy(run) = &self.units[slot] else { unreachable!("gsdu without a request") };
        let Post::Gsdu(plan) = run.post.clone() else { unreachable!("gsdu without a plan") };
        let site = format!("{} gsdu", self.slot_name(slot));
        let own = self.slot_space(slot);
        let idx_addrs: Vec<u64> = (0..plan.count).map(|i| plan.index_table + 4 * i).collect();
        let raw = self.read_elems(slot, own, &idx_addrs, 4, &site)?;
        let indices: Vec<u32> = raw.chunks(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if let Err(e) = plan.moves(&indices, plan.remote.capacity(self.cfg)) {
            let err = self.fault(&site, e);
            self.interrupts.raise(self.now, InterruptSource::Tpb { cluster: self.slot_key(slot).0, tpb: self.slot_key(slot).1 }, InterruptCode::Fault(err.to_string()));
            return Err(err);
        }
        let (c, _) = (self.slot_key(slot).0, 0);
        let resources = path_resources(self.cfg, own, plan.remote, (c % 2) as u8);
        let latency = u64::from(self.cfg.hbsm_latency) + hops(Node::of_space(own), Node::of_space(plan.remote)) * u64::from(self.cfg.mesh_hop_latency);
        if let UnitState::Busy(run) = &mut self.units[slot] {
            run.args.insert("indices".into(), json!(indices));
            run.exec_start = self.now;
        }
        self.start_flow(plan.fabric_bytes(self.cfg), resources, UNIT_PORT_BYTES_PER_CYCLE, FlowOwner::Unit { slot }, latency);
        Ok(())
    }

    fn deliver(&mut self, tag: u64) -> Result<(), SimError> {
        let (owner, _) = self.owners.remove(&tag).expect("flow has an owner");
        match owner {
            FlowOwner::Dma { engine } => self.dma_done(engine),
            FlowOwner::Unit { slot } => {
                let UnitState::Busy(run) = &mut self.units[slot] else { unreachable!("delivery to idle unit") };
                if let Post::Gsdu(plan) = run.post.clone() {
                    let indices: Vec<u32> = run.args["indices"]
                        .as_array()
                        .expect("recorded at start")
                        .iter()
                        .map(|v| v.as_u64().expect("index") as u32)
                        .collect();
                    run.args.remove("indices");
                    run.args.insert("elements".into(), json!(plan.count));
                    self.gsdu_apply(slot, &plan, &indices)?;
                }
                let n = match &self.units[slot] {
                    UnitState::Busy(run) => run.milestones.len(),
                    _ => 0,
                };
                for i in 0..n {
                    self.milestone(slot, i)?;
                }
                Ok(())
            }
        }
    }

    fn gsdu_apply(&mut self, slot: usize, plan: &GatherScatterPlan, indices: &[u32]) -> Result<(), SimError> {
        let own = self.slot_space(slot);
        let site = format!("{} gsdu", self.slot_name(slot));
        let moves = plan.moves(indices, plan.remote.capacity(self.cfg)).map_err(|e| self.fault(&site, e))?;
        let (src_space, dst_space) = match plan.direction {
            crate::funits::Direction::GatherIn => (plan.remote, own),
            crate::funits::Direction::ScatterOut => (own, plan.remote),
        };
        let w = plan.elem_bytes as usize;
        for (src, dst) in moves {
            let v = self.read_elems(slot, src_space, &[src], w, &site)?;
            self.write_elems(slot, dst_space, &[dst], w, &v, &site)?;
        }
        Ok(())
    }

    // -- DMA -------------------------------------------------------------------

    fn try_dma(&mut self, engine: usize) -> Result<(), SimError> {
        if self.dma[engine].active.is_some() {
            return Ok(());
        }
        let Some(&index) = self.dma[engine].queue.front() else { return Ok(()) };
        let d = &self.prog.dmas[index];
        if d.wait.iter().any(|&(c, e)| self.counter_value(c) < e) {
            return Ok(());
        }
        if self.opts.serialize && self.inflight > 0 {
            return Ok(());
        }
        self.dma[engine].queue.pop_front();
        let agent = self.dma_agent(engine);
        for &(c, e) in &d.wait {
            self.race.acquire(agent, c, e);
        }
        self.race.tick(agent);
        let site = format!("dma{engine} descriptor {index}");
        let addrs = [d.src_addr];
        let data = {
            self.race.read(agent, d.src, d.src_addr, d.bytes).map_err(|r| self.race_err(r))?;
            let _ = addrs;
            self.storage(d.src).read(d.src_addr, d.bytes).map_err(|e| self.fault(&site, e))?
        };
        let latency = match &d.dst {
            DmaDest::Space { space: s @ AddressSpace::Hbsm { .. }, .. } => hops(Node::Ccb, Node::of_space(*s)) * u64::from(self.cfg.mesh_hop_latency),
            _ => 0,
        };
        self.inflight += 1;
        self.stats.dma_descriptors += 1;
        let resources = d.resources(self.cfg);
        let bytes = d.bytes;
        self.dma[engine].active = Some(ActiveDma { index, start: self.now, data });
        self.start_flow(bytes, resources, u64::MAX, FlowOwner::Dma { engine }, latency);
        Ok(())
    }

    fn dma_done(&mut self, engine: usize) -> Result<(), SimError> {
        let active = self.dma[engine].active.take().expect("active descriptor");
        let d = &self.prog.dmas[active.index];
        let agent = self.dma_agent(engine);
        let site = format!("dma{engine} descriptor {}", active.index);
        let targets: Vec<(AddressSpace, u64)> = match &d.dst {
            DmaDest::Space { space, addr } => vec![(*space, *addr)],
            DmaDest::Drb { targets, addr } => targets.iter().map(|t| (*t, *addr)).collect(),
        };
        for (space, addr) in targets {
            self.race.write(agent, space, addr, d.bytes).map_err(|r| self.race_err(r))?;
            self.storage(space).write(addr, &active.data).map_err(|e| self.fault(&site, e))?;
        }
        let vc = self.race.clock(agent).clone();
        let key = (u32::MAX, u32::MAX, engine as u32);
        for &c in &d.signal {
            self.raise_update(c, key, vc.clone(), None);
        }
        self.inflight -= 1;
        let kind = match d.dst {
            DmaDest::Drb { .. } => "drb_broadcast",
            DmaDest::Space { .. } => "dma",
        };
        let track = Track { class: TrackClass::Dma, group: None, name: format!("dma{engine}") };
        self.trace.span(
            track,
            kind,
            active.start,
            self.now,
            Some(active.index as u32),
            BTreeMap::from([
                ("bytes".to_string(), json!(d.bytes)),
                ("src".to_string(), json!(d.src.to_string())),
            ]),
        );
        Ok(())
    }

    // -- ICB ---------------------------------------------------------------------

    fn try_icb(&mut self) {
        if self.icb.free_at() > self.now {
            return;
        }
        let cap = self.cfg.queue_capacity as usize;
        for d in 0..self.prog.streams.len() {
            let Some(instr) = self.prog.streams[d].get(self.cursors[d]) else { continue };
            let mut copies: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for g in instr.tpb_mask.iter() {
                let (c, t) = self.cfg.tpb_local(g);
                copies.entry(c).or_default().push(t);
            }
            let fits = copies
                .iter()
                .all(|(&c, ts)| self.queues[c as usize].len() + self.reserved[c as usize] + ts.len() <= cap);
            if !fits {
                continue;
            }
            let clusters: Vec<u32> = copies.keys().copied().collect();
            let tx = self.icb.transmit(self.now, instr.encoded_bits, &clusters);
            self.stats.icb_transmissions += 1;
            let shared = Arc::new(instr.clone());
            for (c, at) in tx.arrivals {
                for &t in &copies[&c] {
                    self.reserved[c as usize] += 1;
                    self.schedule(at, Event::Arrive { cluster: c, tpb: t, instr: shared.clone() });
                }
            }
            let track = Track { class: TrackClass::Icb, group: None, name: "icb".into() };
            self.trace.span(
                track,
                "send",
                tx.start,
                tx.end,
                Some(instr.seq),
                BTreeMap::from([
                    ("dispatcher".to_string(), json!(d)),
                    ("bits".to_string(), json!(instr.encoded_bits)),
                ]),
            );
            self.cursors[d] += 1;
            if self.cursors.iter().zip(&self.prog.streams).any(|(c, s)| *c < s.len()) {
                self.schedule(tx.end, Event::Wake);
            }
            return;
        }
    }

    // -- deadlock report -----------------------------------------------------------

    fn deadlock(&self) -> SimError {
        // Agents: unit slots, then DMA engines.
        let n_units = self.units.len();
        let name = |a: usize| {
            if a < n_units {
                self.slot_name(a)
            } else {
                format!("dma{}", a - n_units)
            }
        };
        let mut waits: Vec<(usize, CounterRef, u64)> = Vec::new();
        for (slot, u) in self.units.iter().enumerate() {
            if let UnitState::Waiting { instr, .. } = u {
                for s in &instr.syncs {
                    if let SyncAction::Monitor { counter, expected, .. } = *s {
                        if self.counter_value(counter) < expected {
                            waits.push((slot, counter, expected));
                        }
                    }
                }
            }
        }
        for (e, st) in self.dma.iter().enumerate() {
            if let Some(&i) = st.queue.front() {
                for &(c, x) in &self.prog.dmas[i].wait {
                    if self.counter_value(c) < x {
                        waits.push((n_units + e, c, x));
                    }
                }
            }
        }
        // Who still holds an update of each counter.
        let mut holders: BTreeMap<CounterRef, Vec<usize>> = BTreeMap::new();
        let mut note = |instr: &TpbInstruction, slot: usize| {
            for s in &instr.syncs {
                if let SyncAction::Update { counter, .. } = *s {
                    holders.entry(counter).or_default().push(slot);
                }
            }
        };
        for (slot, u) in self.units.iter().enumerate() {
            if let UnitState::Waiting { instr, .. } = u {
                note(instr, slot);
            }
        }
        for (c, q) in self.queues.iter().enumerate() {
            for (t, instr) in q.iter() {
                let g = self.cfg.tpb_global(c as u32, t) as usize;
                note(instr, g * UNITS + instr.unit.index());
            }
        }
        for (d, stream) in self.prog.streams.iter().enumerate() {
            for instr in &stream[self.cursors[d]..] {
                for g in instr.tpb_mask.iter() {
                    note(instr, g as usize * UNITS + instr.unit.index());
                }
            }
        }
        for (e, st) in self.dma.iter().enumerate() {
            for &i in &st.queue {
                for &c in &self.prog.dmas[i].signal {
                    holders.entry(c).or_default().push(n_units + e);
                }
            }
        }
        let mut edges: BTreeMap<usize, Vec<(usize, CounterRef, u64)>> = BTreeMap::new();
        for &(a, c, x) in &waits {
            for &h in holders.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
                edges.entry(a).or_default().push((h, c, x));
            }
        }
        let cycle = find_cycle(&edges);
        let wait_cycle: Vec<String> = cycle
            .iter()
            .map(|&(a, c, x)| format!("{} waits for {c} >= {x} (now {})", name(a), self.counter_value(c)))
            .collect();
        let detail = if wait_cycle.is_empty() {
            let stalled: Vec<String> = waits.iter().map(|&(a, c, x)| format!("{} on {c}>={x}", name(a))).collect();
            format!("no component can make progress; stalled: [{}]", stalled.join(", "))
        } else {
            format!("circular wait: {}", wait_cycle.join(" -> "))
        };
        SimError::DeadlockDetected { cycle: self.now, detail, wait_cycle }
    }

    // -- wrap-up -----------------------------------------------------------------------

    fn finish(mut self, fault: Option<SimError>) -> RunReport {
        if let Some(f) = &fault {
            self.interrupts.raise(self.now, InterruptSource::Ccb, InterruptCode::Fault(f.to_string()));
        }
        let mut outputs = BTreeMap::new();
        if fault.is_none() {
            for b in &self.prog.outputs {
                let bytes = self.read_tensor(&b.desc);
                outputs.insert(b.name.clone(), bytes);
            }
        }
        self.trace.makespan = self.now;
        let mut moved: BTreeMap<String, u64> = BTreeMap::new();
        for (r, b) in self.flows.moved_totals() {
            let k = match r {
                Resource::Ddr | Resource::DdrPort(_) => "ddr",
                Resource::Sram => "sram",
                Resource::Drb => "drb",
                Resource::Link(_) => "mesh_link",
                Resource::Local(_) => "cluster_local",
            };
            *moved.entry(k.to_string()).or_default() += b;
        }
        moved.insert("icb_instructions".into(), self.icb.sent());
        self.trace.bytes_moved = moved;
        RunReport {
            outputs,
            makespan: self.now,
            trace: self.trace,
            interrupts: self.interrupts,
            fault,
            stats: self.stats,
        }
    }
}

/// Depth-first search for a cycle in the wait-for graph; returns its edges.
fn find_cycle(edges: &BTreeMap<usize, Vec<(usize, CounterRef, u64)>>) -> Vec<(usize, CounterRef, u64)> {
    fn dfs(
        v: usize,
        edges: &BTreeMap<usize, Vec<(usize, CounterRef, u64)>>,
        state: &mut BTreeMap<usize, u8>,
        stack: &mut Vec<(usize, CounterRef, u64)>,
    ) -> Option<Vec<(usize, CounterRef, u64)>> {
        state.insert(v, 1);
        for &(w, c, x) in edges.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            stack.push((v, c, x));
            match state.get(&w) {
                Some(1) => {
                    let start = stack.iter().position(|e| e.0 == w).expect("w is on the stack");
                    return Some(stack[start..].to_vec());
                }
                None => {
                    if let Some(found) = dfs(w, edges, state, stack) {
                        return Some(found);
                    }
                }
                _ => {}
            }
            stack.pop();
        }
        state.insert(v, 2);
        None
    }
    let mut state = BTreeMap::new();
    for &v in edges.keys() {
        if !state.contains_key(&v) {
            if let Some(c) = dfs(v, edges, &mut state, &mut Vec::new()) {
                return c;
            }
        }
    }
    Vec::new()
}

/// Decodes raw tensor bytes into f64 values.
pub fn decode_tensor(dtype: DataType, bytes: &[u8]) -> Vec<f64> {
    bytes.chunks(dtype.byte_width()).map(|b| dtype.decode(b)).collect()
}

/// Encodes values into raw tensor bytes.
pub fn encode_tensor(dtype: DataType, values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| dtype.encode(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funits::{DtduOp, TcuOp};
    use crate::isa::TpbMask;
    use crate::program::{DataInit, IoBinding};
    use crate::walker::WalkerConfig;

    const H0: AddressSpace = AddressSpace::Hbsm { cluster: 0, tpb: 0 };

    fn dense(base: u64, n: u64, w: u64) -> WalkerConfig {
        WalkerConfig::dense(base, &[n], w).unwrap()
    }

    fn fill(seq: u32, base: u64, n: u64, pattern: u64, syncs: Vec<SyncAction>) -> TpbInstruction {
        TpbInstruction::new(
            seq,
            TpbMask::single(0),
            OpDescriptor::Dtdu(DtduOp::local(DtduKind::Fill { pattern }, 1)),
            vec![],
            Some(dense(base, n, 1)),
            syncs,
        )
        .unwrap()
    }

    fn copy(seq: u32, src: u64, dst: u64, n: u64, syncs: Vec<SyncAction>) -> TpbInstruction {
        TpbInstruction::new(
            seq,
            TpbMask::single(0),
            OpDescriptor::Dtdu(DtduOp::local(DtduKind::Copy, 1)),
            vec![dense(src, n, 1)],
            Some(dense(dst, n, 1)),
            syncs,
        )
        .unwrap()
    }

    fn output(name: &str, base: u64, n: usize) -> IoBinding {
        IoBinding { name: name.into(), desc: TensorDesc::dense(vec![n], DataType::I8, H0, base).unwrap() }
    }

    #[test]
    fn single_matmul_timing_and_values() {
        let cfg = MachineConfig::default();
        let mut instr = TpbInstruction::new(
            0,
            TpbMask::single(0),
            OpDescriptor::Tcu(TcuOp::matmul(32, 32, 64, DataType::I8)),
            vec![dense(0, 32 * 32, 1), dense(0x1000, 32 * 64, 1)],
            Some(dense(0x2000, 32 * 64, 4)),
            vec![],
        )
        .unwrap();
        instr.seq = 0;
        let icb = instr.transmission_cycles(64);
        let a: Vec<u8> = (0..1024).map(|i| (i % 7) as u8).collect();
        let w: Vec<u8> = (0..2048).map(|i| ((i % 5) as i8 - 2) as u8).collect();
        let prog = ScheduledProgram {
            data: vec![DataInit { space: H0, addr: 0, bytes: a.clone() }, DataInit { space: H0, addr: 0x1000, bytes: w.clone() }],
            outputs: vec![IoBinding { name: "y".into(), desc: TensorDesc::dense(vec![32, 64], DataType::I32, H0, 0x2000).unwrap() }],
            streams: vec![vec![instr]],
            ..Default::default()
        };
        let rep = run(&prog, &cfg, &BTreeMap::new(), RunOptions::default()).into_result().unwrap();
        // ICB transmission, one hop to cluster 0, HBSM fetch, then 48 cycles.
        assert_eq!(rep.makespan, icb + 1 + 20 + 48);
        let y = decode_tensor(DataType::I32, &rep.outputs["y"]);
        for (r, c) in [(0usize, 0usize), (5, 17), (31, 63)] {
            let want: i64 = (0..32).map(|k| i64::from(a[r * 32 + k]) * i64::from(w[k * 64 + c] as i8)).sum();
            assert_eq!(y[r * 64 + c] as i64, want);
        }
        assert_eq!(rep.interrupts.task_complete(), Some(rep.makespan));
        rep.trace.check_well_formed().unwrap();
    }

    fn handoff(monitor: bool) -> ScheduledProgram {
        let c = CounterRef::new(0, 0, 3);
        let mut syncs = vec![];
        if monitor {
            syncs.push(SyncAction::monitor(c, 1));
        }
        // The fill runs on the DTDU; the consumer copy shares it, so put the
        // copy on a different TPB-local unit by using a CVU identity instead.
        let p = crate::funits::CvuPipeline::new(vec![crate::funits::CvuStage::unary(crate::funits::CvuOp::Abs, crate::funits::Tap::A)], 0).unwrap();
        let cvu = TpbInstruction::new(
            0,
            TpbMask::single(0),
            OpDescriptor::Cvu { pipeline: p, a_dtype: DataType::I8, b_dtype: DataType::I8, out_dtype: DataType::I8 },
            vec![dense(0, 64, 1)],
            Some(dense(0x100, 64, 1)),
            syncs,
        )
        .unwrap();
        ScheduledProgram {
            outputs: vec![output("y", 0x100, 64)],
            streams: vec![vec![fill(0, 0, 64, 3, vec![SyncAction::update(c)])], vec![cvu]],
            ..Default::default()
        }
    }

    #[test]
    fn synchronized_handoff_runs() {
        let rep = run(&handoff(true), &MachineConfig::default(), &BTreeMap::new(), RunOptions::default());
        let rep = rep.into_result().unwrap();
        assert_eq!(rep.outputs["y"], vec![3u8; 64]);
    }

    #[test]
    fn missing_monitor_is_reported_as_race() {
        let rep = run(&handoff(false), &MachineConfig::default(), &BTreeMap::new(), RunOptions::default());
        assert!(matches!(rep.fault, Some(SimError::RaceDetected { .. })), "{:?}", rep.fault);
        assert!(rep.interrupts.first_fault().is_some());
    }

    #[test]
    fn circular_wait_is_a_deadlock() {
        let a = CounterRef::new(0, 0, 1);
        let b = CounterRef::new(0, 0, 2);
        let p = crate::funits::CvuPipeline::new(vec![crate::funits::CvuStage::unary(crate::funits::CvuOp::Abs, crate::funits::Tap::A)], 0).unwrap();
        let cvu = TpbInstruction::new(
            0,
            TpbMask::single(0),
            OpDescriptor::Cvu { pipeline: p, a_dtype: DataType::I8, b_dtype: DataType::I8, out_dtype: DataType::I8 },
            vec![dense(0, 64, 1)],
            Some(dense(0x100, 64, 1)),
            vec![SyncAction::monitor(a, 1), SyncAction::update(b)],
        )
        .unwrap();
        let prog = ScheduledProgram {
            streams: vec![vec![fill(0, 0, 64, 1, vec![SyncAction::monitor(b, 1), SyncAction::update(a)])], vec![cvu]],
            ..Default::default()
        };
        let rep = run(&prog, &MachineConfig::default(), &BTreeMap::new(), RunOptions::default());
        match rep.fault {
            Some(SimError::DeadlockDetected { wait_cycle, .. }) => {
                assert_eq!(wait_cycle.len(), 2, "{wait_cycle:?}");
                assert!(wait_cycle.iter().any(|w| w.contains("c0.t0.dtdu")));
                assert!(wait_cycle.iter().any(|w| w.contains("c0.t0.cvu")));
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn serialize_is_never_faster() {
        let prog = ScheduledProgram {
            outputs: vec![output("y", 0x100, 64)],
            streams: vec![
                vec![fill(0, 0x100, 64, 9, vec![]), fill(1, 0x400, 4096, 1, vec![])],
                vec![TpbInstruction::new(
                    0,
                    TpbMask::single(1),
                    OpDescriptor::Dtdu(DtduOp::local(DtduKind::Fill { pattern: 2 }, 1)),
                    vec![],
                    Some(dense(0, 4096, 1)),
                    vec![],
                )
                .unwrap()],
            ],
            ..Default::default()
        };
        let cfg = MachineConfig::default();
        let par = run(&prog, &cfg, &BTreeMap::new(), RunOptions::default()).into_result().unwrap();
        let ser = run(&prog, &cfg, &BTreeMap::new(), RunOptions { serialize: true }).into_result().unwrap();
        assert_eq!(par.outputs, ser.outputs);
        assert!(ser.makespan > par.makespan, "{} vs {}", ser.makespan, par.makespan);
        assert_eq!(ser.trace.cycles_with_concurrency(2), 0);
        assert!(par.trace.cycles_with_concurrency(2) > 0);
    }

    #[test]
    fn dma_stream_with_signal() {
        let cfg = MachineConfig::default();
        let c = CounterRef::new(0, 0, 0);
        let prog = ScheduledProgram {
            inputs: vec![IoBinding { name: "x".into(), desc: TensorDesc::dense(vec![64], DataType::I8, AddressSpace::Ddr, 0).unwrap() }],
            outputs: vec![output("y", 0x100, 64)],
            dmas: vec![crate::fabric::DmaDescriptor {
                engine: 0,
                src: AddressSpace::Ddr,
                src_addr: 0,
                dst: DmaDest::Space { space: H0, addr: 0 },
                bytes: 64,
                wait: vec![],
                signal: vec![c],
            }],
            streams: vec![vec![copy(0, 0, 0x100, 64, vec![SyncAction::monitor(c, 1)])]],
            ..Default::default()
        };
        let x: Vec<u8> = (0..64).collect();
        let rep = run(&prog, &cfg, &BTreeMap::from([("x".to_string(), x.clone())]), RunOptions::default()).into_result().unwrap();
        assert_eq!(rep.outputs["y"], x);
        let missing = run(&prog, &cfg, &BTreeMap::new(), RunOptions::default());
        assert!(matches!(missing.fault, Some(SimError::Input(..))));
    }

    #[test]
    fn watchdog_fires() {
        let cfg = MachineConfig { max_cycles: 30, ..MachineConfig::default() };
        let prog = ScheduledProgram { streams: vec![vec![fill(0, 0, 4096, 0, vec![])]], ..Default::default() };
        let rep = run(&prog, &cfg, &BTreeMap::new(), RunOptions::default());
        assert_eq!(rep.fault, Some(SimError::Watchdog(30)));
    }
}
