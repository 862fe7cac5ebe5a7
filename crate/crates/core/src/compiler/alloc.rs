//! HBSM buffer allocation and synchronization-counter assignment.
//!
//! Each buffer has one producing agent and a set of readers. The producer
//! raises `ready` after writing chunk `i` (so `ready == i + 1`); each reader
//! raises its own `free` counter after its last read of a chunk. With two
//! slots, the producer of chunk `i` waits for every `free >= i - 1`, the
//! readers of chunk `i` wait for `ready >= i + 1`. A single shared `free`
//! counter would let a fast reader stand in for a slow one. Buffers with
//! one slot per chunk have no `free` counters.

use std::collections::BTreeMap;

use super::ir::{Graph, OpKind};
use super::plan::{PartitionPlan, Placement, SCRATCH_MARGIN_DIVISOR};
use super::CompileError;
use crate::machine::{AddressSpace, MachineConfig};
use crate::program::{BufferEntry, CounterEntry};
use crate::sync::CounterRef;

const ALIGN: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Producer {
    /// The op's own unit on this TPB.
    Op,
    /// The DTDU of the producing op's TPB.
    Transfer { from: u32 },
    /// DDR streaming by the CCB DMA engines.
    Dma,
    /// Loaded once before use.
    Preload,
}

/// An agent that reads a buffer chunk by chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reader {
    Op(usize),
    /// The DTDU copy feeding the remote group.
    Transfer,
    /// The DTDU copy of a graph output to DDR.
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPlan {
    pub tensor: usize,
    /// Global TPBs holding a copy at `base`.
    pub group: Vec<u32>,
    pub base: u64,
    pub slot_bytes: u64,
    pub slots: u32,
    pub producer: Producer,
    /// One per group member, located on that member.
    pub ready: Vec<CounterRef>,
    pub free: Vec<(Reader, CounterRef)>,
}

impl BufferPlan {
    pub fn bytes(&self) -> u64 {
        self.slot_bytes * u64::from(self.slots)
    }

    pub fn slot_addr(&self, chunk: u32) -> u64 {
        self.base + u64::from(chunk % self.slots) * self.slot_bytes
    }

    pub fn free_for(&self, r: Reader) -> Option<CounterRef> {
        self.free.iter().find(|f| f.0 == r).map(|f| f.1)
    }

    /// Monitors the producer of `chunk` needs before overwriting its slot.
    pub fn free_waits(&self, chunk: u32) -> Vec<(CounterRef, u64)> {
        if chunk < 2 {
            return Vec::new();
        }
        self.free.iter().map(|&(_, c)| (c, u64::from(chunk - 1))).collect()
    }

    pub fn ready_on(&self, tpb: u32) -> CounterRef {
        let k = self.group.iter().position(|&t| t == tpb).expect("TPB is in the buffer group");
        self.ready[k]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferMap {
    pub buffers: Vec<BufferPlan>,
    /// (tensor, TPB) → buffer holding that tensor on that TPB.
    pub lookup: BTreeMap<(usize, u32), usize>,
    /// Home buffer of each op output, and the remote group fed from it.
    pub home: BTreeMap<usize, usize>,
    pub remote: BTreeMap<usize, usize>,
    /// Row-statistics scratch for two-pass CVU ops.
    pub scratch: BTreeMap<usize, u64>,
    /// DDR placement of inputs, outputs and constant images.
    pub ddr: BTreeMap<usize, u64>,
    pub ddr_end: u64,
    pub counters: Vec<CounterEntry>,
    /// Bytes used per TPB.
    pub footprint: Vec<u64>,
}

impl BufferMap {
    pub fn buffer(&self, tensor: usize, tpb: u32) -> &BufferPlan {
        &self.buffers[self.lookup[&(tensor, tpb)]]
    }

    pub fn to_entries(&self, g: &Graph, cfg: &MachineConfig) -> Vec<BufferEntry> {
        let mut out = Vec::new();
        for b in &self.buffers {
            for &t in &b.group {
                let (cluster, tpb) = cfg.tpb_local(t);
                out.push(BufferEntry {
                    name: g.nodes[b.tensor].name.clone(),
                    space: AddressSpace::Hbsm { cluster, tpb },
                    base: b.base,
                    bytes: b.bytes(),
                });
            }
        }
        out
    }
}

struct Alloc<'a> {
    cfg: &'a MachineConfig,
    bump: Vec<u64>,
    next_counter: Vec<u32>,
    counters: Vec<CounterEntry>,
}

impl Alloc<'_> {
    fn space(&mut self, group: &[u32], bytes: u64) -> u64 {
        let base = group.iter().map(|&t| self.bump[t as usize]).max().unwrap_or(0).next_multiple_of(ALIGN);
        for &t in group {
            self.bump[t as usize] = base + bytes;
        }
        base
    }

    fn counter(&mut self, tpb: u32, name: String) -> Result<CounterRef, CompileError> {
        let idx = self.next_counter[tpb as usize];
        if idx >= self.cfg.sync_counters {
            return Err(CompileError::OutOfCounters { tpb, limit: self.cfg.sync_counters });
        }
        self.next_counter[tpb as usize] += 1;
        let (cluster, t) = self.cfg.tpb_local(tpb);
        let c = CounterRef::new(cluster, t, idx);
        self.counters.push(CounterEntry { name, counter: c });
        Ok(c)
    }
}

/// Allocates buffers, scratch and counters for a partition and placement.
pub fn assign_sync(g: &Graph, plan: &PartitionPlan, place: &Placement, cfg: &MachineConfig) -> Result<BufferMap, CompileError> {
    let tpbs = cfg.total_tpbs() as usize;
    let mut a = Alloc { cfg, bump: vec![0; tpbs], next_counter: vec![0; tpbs], counters: Vec::new() };
    let mut map = BufferMap::default();
    let consumers = g.consumers();
    let mut ddr = 0u64;
    let mut ddr_alloc = |bytes: u64| {
        let base = ddr.next_multiple_of(ALIGN);
        ddr = base + bytes;
        base
    };

    for (i, node) in g.nodes.iter().enumerate() {
        let name = &node.name;
        let is_output = g.outputs.contains(&i);
        if matches!(node.op, OpKind::Input | OpKind::Constant(_)) || is_output {
            map.ddr.insert(i, ddr_alloc(node.bytes()));
        }
        let user_tpbs: Vec<u32> = {
            let mut v: Vec<u32> = consumers[i].iter().filter_map(|&c| place.tpb[c]).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let readers_on = |tpbs: &[u32]| {
            let mut v: Vec<usize> =
                consumers[i].iter().copied().filter(|&c| place.tpb[c].is_some_and(|t| tpbs.contains(&t))).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let chunk_bytes = (plan.chunk_elems[i] * node.dtype.byte_width()) as u64;
        let slots = plan.slots(i);
        let streamed = slots < plan.chunks;
        match node.op {
            OpKind::Constant(_) => {
                if user_tpbs.is_empty() {
                    continue;
                }
                let base = a.space(&user_tpbs, node.bytes());
                let ready = user_tpbs.iter().map(|&t| a.counter(t, format!("{name}@{t}.ready"))).collect::<Result<_, _>>()?;
                push(&mut map, BufferPlan {
                    tensor: i,
                    group: user_tpbs.clone(),
                    base,
                    slot_bytes: node.bytes(),
                    slots: 1,
                    producer: Producer::Preload,
                    ready,
                    free: Vec::new(),
                });
            }
            OpKind::Input => {
                if user_tpbs.is_empty() {
                    continue;
                }
                let base = a.space(&user_tpbs, chunk_bytes * u64::from(slots));
                let ready = user_tpbs.iter().map(|&t| a.counter(t, format!("{name}@{t}.ready"))).collect::<Result<_, _>>()?;
                let mut free = Vec::new();
                if streamed {
                    for c in readers_on(&user_tpbs) {
                        let t = place.tpb[c].expect("ops are placed");
                        free.push((Reader::Op(c), a.counter(t, format!("{name}@{t}.free.{}", g.nodes[c].name))?));
                    }
                }
                push(&mut map, BufferPlan {
                    tensor: i,
                    group: user_tpbs.clone(),
                    base,
                    slot_bytes: chunk_bytes,
                    slots,
                    producer: Producer::Dma,
                    ready,
                    free,
                });
            }
            _ => {
                let home_tpb = place.tpb[i].expect("ops are placed");
                let remote: Vec<u32> = user_tpbs.iter().copied().filter(|&t| t != home_tpb).collect();
                let base = a.space(&[home_tpb], chunk_bytes * u64::from(slots));
                let ready = vec![a.counter(home_tpb, format!("{name}@{home_tpb}.ready"))?];
                let mut free = Vec::new();
                if streamed {
                    for c in readers_on(&[home_tpb]) {
                        free.push((Reader::Op(c), a.counter(home_tpb, format!("{name}@{home_tpb}.free.{}", g.nodes[c].name))?));
                    }
                    if !remote.is_empty() {
                        free.push((Reader::Transfer, a.counter(home_tpb, format!("{name}@{home_tpb}.free.transfer"))?));
                    }
                    if is_output {
                        free.push((Reader::Store, a.counter(home_tpb, format!("{name}@{home_tpb}.free.store"))?));
                    }
                }
                let h = push(&mut map, BufferPlan {
                    tensor: i,
                    group: vec![home_tpb],
                    base,
                    slot_bytes: chunk_bytes,
                    slots,
                    producer: Producer::Op,
                    ready,
                    free,
                });
                map.home.insert(i, h);
                if matches!(node.op, OpKind::Softmax | OpKind::Layernorm { .. }) {
                    let rows = plan.chunk_elems[i] / node.shape.last().copied().unwrap_or(1);
                    let s = a.space(&[home_tpb], rows as u64 * 4);
                    map.scratch.insert(i, s);
                }
                if !remote.is_empty() {
                    let base = a.space(&remote, chunk_bytes * u64::from(slots));
                    let ready = remote.iter().map(|&t| a.counter(t, format!("{name}@{t}.ready"))).collect::<Result<_, _>>()?;
                    let mut free = Vec::new();
                    if streamed {
                        for c in readers_on(&remote) {
                            let cn = &g.nodes[c].name;
                            free.push((Reader::Op(c), a.counter(home_tpb, format!("{name}@{home_tpb}.remote_free.{cn}"))?));
                        }
                    }
                    let r = push(&mut map, BufferPlan {
                        tensor: i,
                        group: remote,
                        base,
                        slot_bytes: chunk_bytes,
                        slots,
                        producer: Producer::Transfer { from: home_tpb },
                        ready,
                        free,
                    });
                    map.remote.insert(i, r);
                }
            }
        }
    }
    let budget = cfg.hbsm_bytes - cfg.hbsm_bytes / SCRATCH_MARGIN_DIVISOR;
    if let Some((t, &used)) = a.bump.iter().enumerate().find(|(_, &b)| b > budget) {
        return Err(CompileError::DoesNotFit(format!(
            "TPB {t} needs {used} bytes of HBSM with {} chunks; budget is {budget}",
            plan.chunks
        )));
    }
    if ddr > cfg.ddr_bytes {
        return Err(CompileError::DoesNotFit(format!("{ddr} bytes of DDR tensors")));
    }
    map.ddr_end = ddr;
    map.footprint = a.bump;
    map.counters = a.counters;
    Ok(map)
}

fn push(map: &mut BufferMap, b: BufferPlan) -> usize {
    let idx = map.buffers.len();
    for &t in &b.group {
        map.lookup.insert((b.tensor, t), idx);
    }
    map.buffers.push(b);
    idx
}
