//! Interconnects and the central control block: the ICB instruction chain,
//! the DRB broadcast ring, the 2D mesh, DDR and CCB SRAM bandwidth, DMA
//! descriptors and the interrupt log.
//!
//! Bulk transfers are flows over shared resources. Each resource splits its
//! capacity equally among the flows crossing it (remainder bytes go to the
//! lowest flow ids) and a flow moves at the smallest share it holds, capped
//! by its own port limit. Shares are recomputed whenever a flow starts or
//! finishes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::machine::{AddressSpace, MachineConfig};
use crate::sync::CounterRef;
use crate::text::{join, parse_list, parse_u64, Line, Record};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("bad DMA descriptor: {0}")]
    BadDescriptor(String),
    #[error("no route from {0} to {1}")]
    Unroutable(String, String),
}

// ---------------------------------------------------------------------------
// Mesh topology

pub const MESH_DIM: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Ccb,
    Sram,
    Cluster(u32),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Ccb => f.write_str("ccb"),
            Node::Sram => f.write_str("sram"),
            Node::Cluster(c) => write!(f, "cluster{c}"),
        }
    }
}

impl Node {
    /// Grid position: CCB at (0,0), SRAM at (1,0), clusters row-major in
    /// the remaining slots.
    pub fn position(self) -> (u32, u32) {
        let slot = match self {
            Node::Ccb => 0,
            Node::Sram => 1,
            Node::Cluster(c) => c + 2,
        };
        (slot % MESH_DIM, slot / MESH_DIM)
    }

    /// The mesh node that serves an address space. DDR hangs off the CCB.
    pub fn of_space(space: AddressSpace) -> Node {
        match space {
            AddressSpace::Hbsm { cluster, .. } => Node::Cluster(cluster),
            AddressSpace::CcbSram => Node::Sram,
            AddressSpace::Ddr => Node::Ccb,
        }
    }
}

/// Directed link between adjacent grid positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub from: (u32, u32),
    pub to: (u32, u32),
}

/// Dimension-ordered (X then Y) route.
pub fn route(src: Node, dst: Node) -> Vec<Link> {
    let (mut x, mut y) = src.position();
    let (tx, ty) = dst.position();
    let mut links = Vec::new();
    while x != tx {
        let nx = if tx > x { x + 1 } else { x - 1 };
        links.push(Link { from: (x, y), to: (nx, y) });
        x = nx;
    }
    while y != ty {
        let ny = if ty > y { y + 1 } else { y - 1 };
        links.push(Link { from: (x, y), to: (x, ny) });
        y = ny;
    }
    links
}

pub fn hops(src: Node, dst: Node) -> u64 {
    route(src, dst).len() as u64
}

// ---------------------------------------------------------------------------
// Flow scheduler

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    /// Single shared DDR pool.
    Ddr,
    /// One of two DDR ports when the split-port model is selected.
    DdrPort(u8),
    Sram,
    Drb,
    Link(Link),
    /// Intra-cluster path between TPBs of one cluster.
    Local(u32),
}

pub type FlowId = u64;

#[derive(Debug, Clone)]
struct Flow {
    remaining: u64,
    resources: Vec<Resource>,
    cap: u64,
    rate: u64,
    tag: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FlowScheduler {
    capacity: BTreeMap<Resource, u64>,
    flows: BTreeMap<FlowId, Flow>,
    now: u64,
    next_id: FlowId,
    moved: BTreeMap<Resource, u64>,
    mesh_pair: u64,
}

impl FlowScheduler {
    pub fn new(cfg: &MachineConfig) -> Self {
        let mut s = Self::default();
        s.capacity.insert(Resource::Ddr, cfg.ddr_bytes_per_cycle as u64);
        s.capacity.insert(Resource::DdrPort(0), 128);
        s.capacity.insert(Resource::DdrPort(1), 128);
        s.capacity
            .insert(Resource::Sram, cfg.ccb_sram_banks as u64 * SRAM_BANK_BYTES_PER_CYCLE);
        s.capacity.insert(Resource::Drb, cfg.drb_aggregate_bytes_per_cycle as u64);
        s.mesh_pair = cfg.mesh_pair_bytes_per_cycle as u64;
        s
    }

    fn cap_of(&self, r: Resource) -> u64 {
        match r {
            Resource::Link(_) | Resource::Local(_) => self.mesh_pair,
            other => self.capacity[&other],
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Starts a flow at `now`. Zero-byte flows complete at `now`.
    pub fn start(&mut self, now: u64, bytes: u64, resources: Vec<Resource>, cap: u64, tag: u64) -> FlowId {
        self.advance(now);
        let id = self.next_id;
        self.next_id += 1;
        self.flows.insert(id, Flow { remaining: bytes, resources, cap, rate: 0, tag });
        self.recompute();
        id
    }

    fn advance(&mut self, now: u64) {
        assert!(now >= self.now, "flow clock moved backwards");
        let dt = now - self.now;
        if dt > 0 {
            for f in self.flows.values_mut() {
                let moved = (f.rate * dt).min(f.remaining);
                f.remaining -= moved;
                for r in &f.resources {
                    *self.moved.entry(*r).or_default() += moved;
                }
            }
        }
        self.now = now;
    }

    fn recompute(&mut self) {
        let mut users: BTreeMap<Resource, Vec<FlowId>> = BTreeMap::new();
        for (&id, f) in &self.flows {
            for &r in &f.resources {
                users.entry(r).or_default().push(id);
            }
        }
        let mut rates: BTreeMap<FlowId, u64> = self.flows.iter().map(|(&id, f)| (id, f.cap)).collect();
        for (r, ids) in users {
            let cap = self.cap_of(r);
            let n = ids.len() as u64;
            for (i, id) in ids.into_iter().enumerate() {
                let share = cap / n + u64::from((i as u64) < cap % n);
                let e = rates.get_mut(&id).expect("flow exists");
                *e = (*e).min(share);
            }
        }
        for (id, f) in self.flows.iter_mut() {
            f.rate = rates[id];
        }
    }

    /// Earliest cycle at which some flow finishes.
    pub fn next_completion(&self) -> Option<u64> {
        self.flows
            .values()
            .filter_map(|f| match (f.remaining, f.rate) {
                (0, _) => Some(self.now),
                (_, 0) => None,
                (rem, rate) => Some(self.now + rem.div_ceil(rate)),
            })
            .min()
    }

    /// Advances to `now` and removes finished flows, returning
    /// `(id, tag)` in id order.
    pub fn complete_until(&mut self, now: u64) -> Vec<(FlowId, u64)> {
        self.advance(now);
        let done: Vec<FlowId> = self.flows.iter().filter(|(_, f)| f.remaining == 0).map(|(&id, _)| id).collect();
        let out = done.iter().map(|id| (*id, self.flows.remove(id).expect("listed").tag)).collect();
        if !done.is_empty() {
            self.recompute();
        }
        out
    }

    pub fn is_idle(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn active(&self) -> usize {
        self.flows.len()
    }

    pub fn rate(&self, id: FlowId) -> Option<u64> {
        self.flows.get(&id).map(|f| f.rate)
    }

    /// Sum of current flow rates through a resource.
    pub fn load(&self, r: Resource) -> u64 {
        self.flows.values().filter(|f| f.resources.contains(&r)).map(|f| f.rate).sum()
    }

    /// Total bytes moved through a resource so far.
    pub fn bytes_moved(&self, r: Resource) -> u64 {
        self.moved.get(&r).copied().unwrap_or(0)
    }

    pub fn moved_totals(&self) -> &BTreeMap<Resource, u64> {
        &self.moved
    }
}

/// Per-bank CCB SRAM throughput; with four banks the SRAM never limits a
/// single DDR stream.
pub const SRAM_BANK_BYTES_PER_CYCLE: u64 = 128;

/// Unit-side port limit for DTDU and GSDU streams.
pub const UNIT_PORT_BYTES_PER_CYCLE: u64 = 32;

/// Resources crossed by a transfer between two address spaces.
/// `ddr_port` selects the port under the split-port DDR model.
pub fn path_resources(cfg: &MachineConfig, src: AddressSpace, dst: AddressSpace, ddr_port: u8) -> Vec<Resource> {
    let mut rs = Vec::new();
    let ddr = if cfg.ddr_split_ports { Resource::DdrPort(ddr_port % 2) } else { Resource::Ddr };
    for s in [src, dst] {
        match s {
            AddressSpace::Ddr => rs.push(ddr),
            AddressSpace::CcbSram => rs.push(Resource::Sram),
            AddressSpace::Hbsm { .. } => {}
        }
    }
    let (a, b) = (Node::of_space(src), Node::of_space(dst));
    let inside_ccb = |n| matches!(n, Node::Ccb | Node::Sram);
    if inside_ccb(a) && inside_ccb(b) {
        // DDR <-> SRAM traffic stays inside the CCB.
    } else if a == b {
        if let Node::Cluster(c) = a {
            rs.push(Resource::Local(c));
        }
    } else {
        rs.extend(route(a, b).into_iter().map(Resource::Link));
    }
    rs.dedup();
    rs
}

// ---------------------------------------------------------------------------
// ICB

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub start: u64,
    pub end: u64,
    /// Arrival cycle per cluster, ascending cluster order.
    pub arrivals: Vec<(u32, u64)>,
}

/// Single daisy chain from the CCB through the clusters in index order.
#[derive(Debug, Clone)]
pub struct IcbChain {
    bits_per_cycle: u64,
    hop_latency: u64,
    free_at: u64,
    sent: u64,
}

impl IcbChain {
    pub fn new(cfg: &MachineConfig) -> Self {
        Self {
            bits_per_cycle: cfg.icb_bits_per_cycle as u64,
            hop_latency: cfg.icb_hop_latency as u64,
            free_at: 0,
            sent: 0,
        }
    }

    pub fn free_at(&self) -> u64 {
        self.free_at
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// Occupies the chain for the instruction's transmission time. One pass
    /// serves every listed cluster; cluster `c` taps it off `c + 1` hops
    /// downstream.
    pub fn transmit(&mut self, now: u64, bits: u64, clusters: &[u32]) -> Transmission {
        let start = now.max(self.free_at);
        let end = start + bits.div_ceil(self.bits_per_cycle);
        self.free_at = end;
        self.sent += 1;
        let mut cs = clusters.to_vec();
        cs.sort_unstable();
        cs.dedup();
        let arrivals = cs.into_iter().map(|c| (c, end + (c as u64 + 1) * self.hop_latency)).collect();
        Transmission { start, end, arrivals }
    }
}

// ---------------------------------------------------------------------------
// DMA descriptors

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DmaDest {
    Space { space: AddressSpace, addr: u64 },
    /// DRB broadcast of identical bytes to every target at the same offset.
    Drb { targets: Vec<AddressSpace>, addr: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaDescriptor {
    pub engine: u32,
    pub src: AddressSpace,
    pub src_addr: u64,
    pub dst: DmaDest,
    pub bytes: u64,
    /// Held until every listed counter reaches its value.
    pub wait: Vec<(CounterRef, u64)>,
    /// Counters bumped once the bytes have landed.
    pub signal: Vec<CounterRef>,
}

impl DmaDescriptor {
    pub fn validate(&self, cfg: &MachineConfig) -> Result<(), FabricError> {
        let bad = |m: String| Err(FabricError::BadDescriptor(m));
        if self.engine >= cfg.ccb_dma_engines {
            return bad(format!("engine {} does not exist", self.engine));
        }
        if self.bytes == 0 {
            return bad("zero-length transfer".into());
        }
        if !matches!(self.src, AddressSpace::Ddr | AddressSpace::CcbSram) {
            return bad(format!("DMA source must be ddr or sram, got {}", self.src));
        }
        let fits = |s: AddressSpace, a: u64| s.is_valid(cfg) && a.checked_add(self.bytes).is_some_and(|e| e <= s.capacity(cfg));
        if !fits(self.src, self.src_addr) {
            return bad("source range out of bounds".into());
        }
        match &self.dst {
            DmaDest::Space { space, addr } => {
                let pair_ok = matches!(
                    (self.src, space),
                    (AddressSpace::Ddr, AddressSpace::CcbSram)
                        | (AddressSpace::CcbSram, AddressSpace::Ddr)
                        | (AddressSpace::Ddr, AddressSpace::Hbsm { .. })
                );
                if !pair_ok {
                    return bad(format!("unsupported DMA pair {} -> {space}", self.src));
                }
                if !fits(*space, *addr) {
                    return bad("destination range out of bounds".into());
                }
            }
            DmaDest::Drb { targets, addr } => {
                if targets.is_empty() {
                    return bad("broadcast without targets".into());
                }
                for t in targets {
                    if !matches!(t, AddressSpace::Hbsm { .. }) || !fits(*t, *addr) {
                        return bad(format!("bad broadcast target {t}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shared resources the transfer crosses.
    pub fn resources(&self, cfg: &MachineConfig) -> Vec<Resource> {
        match &self.dst {
            DmaDest::Space { space, .. } => path_resources(cfg, self.src, *space, self.engine as u8),
            DmaDest::Drb { .. } => {
                let mut rs = path_resources(cfg, self.src, self.src, self.engine as u8);
                rs.push(Resource::Drb);
                rs
            }
        }
    }

    pub fn to_record(&self) -> String {
        let mut l = Line::new("dma")
            .kv("engine", self.engine)
            .kv("src", self.src)
            .kv("src_addr", format!("0x{:x}", self.src_addr))
            .kv("bytes", self.bytes);
        l = match &self.dst {
            DmaDest::Space { space, addr } => l.kv("dst", space).kv("dst_addr", format!("0x{addr:x}")),
            DmaDest::Drb { targets, addr } => l
                .kv("dst", "drb")
                .kv("dst_addr", format!("0x{addr:x}"))
                .kv("targets", join(targets, ",")),
        };
        if !self.wait.is_empty() {
            let w: Vec<String> = self.wait.iter().map(|(c, e)| format!("{c}>={e}")).collect();
            l = l.kv("wait", w.join(","));
        }
        if !self.signal.is_empty() {
            l = l.kv("signal", join(&self.signal, ","));
        }
        l.finish()
    }

    pub fn from_record(r: &Record) -> Result<Self, FabricError> {
        let p = FabricError::BadDescriptor;
        let dst_addr = parse_u64(r.req("dst_addr").map_err(p)?).map_err(p)?;
        let dst = match r.req("dst").map_err(p)? {
            "drb" => DmaDest::Drb {
                targets: parse_list(r.req("targets").map_err(p)?, ',').map_err(p)?,
                addr: dst_addr,
            },
            other => DmaDest::Space {
                space: other.parse().map_err(|e| p(format!("{e}")))?,
                addr: dst_addr,
            },
        };
        let wait = match r.get("wait") {
            Some(list) => list
                .split(',')
                .map(|w| {
                    let (c, e) = w.split_once(">=").ok_or_else(|| p(format!("wait `{w}`")))?;
                    Ok((
                        CounterRef::from_str(c).map_err(|e| p(e.to_string()))?,
                        e.parse().map_err(|_| p(format!("wait `{w}`")))?,
                    ))
                })
                .collect::<Result<_, FabricError>>()?,
            None => Vec::new(),
        };
        let signal = match r.get("signal") {
            Some(s) => parse_list(s, ',').map_err(p)?,
            None => Vec::new(),
        };
        Ok(Self {
            engine: r.parse_req("engine").map_err(p)?,
            src: r.parse_req("src").map_err(p)?,
            src_addr: parse_u64(r.req("src_addr").map_err(p)?).map_err(p)?,
            dst,
            bytes: r.parse_req("bytes").map_err(p)?,
            wait,
            signal,
        })
    }
}

// ---------------------------------------------------------------------------
// Interrupts

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum InterruptSource {
    Ccb,
    Dispatcher(u32),
    Tpb { cluster: u32, tpb: u32 },
}

impl fmt::Display for InterruptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterruptSource::Ccb => f.write_str("ccb"),
            InterruptSource::Dispatcher(d) => write!(f, "dispatcher{d}"),
            InterruptSource::Tpb { cluster, tpb } => write!(f, "tpb{cluster}.{tpb}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum InterruptCode {
    TaskComplete,
    Fault(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interrupt {
    pub cycle: u64,
    pub source: InterruptSource,
    pub code: InterruptCode,
}

#[derive(Debug, Clone, Default)]
pub struct InterruptLog {
    entries: Vec<Interrupt>,
}

impl InterruptLog {
    /// Appends keeping (cycle, source) order.
    pub fn raise(&mut self, cycle: u64, source: InterruptSource, code: InterruptCode) {
        let i = Interrupt { cycle, source, code };
        let pos = self.entries.partition_point(|e| (e.cycle, &e.source) <= (i.cycle, &i.source));
        self.entries.insert(pos, i);
    }

    pub fn entries(&self) -> &[Interrupt] {
        &self.entries
    }

    pub fn task_complete(&self) -> Option<u64> {
        self.entries.iter().find(|e| e.code == InterruptCode::TaskComplete).map(|e| e.cycle)
    }

    pub fn first_fault(&self) -> Option<&Interrupt> {
        self.entries.iter().find(|e| matches!(e.code, InterruptCode::Fault(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MachineConfig {
        MachineConfig::default()
    }

    /// Steps a scheduler to idle and returns completion cycles by tag.
    fn drain(s: &mut FlowScheduler) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        while let Some(t) = s.next_completion() {
            for (_, tag) in s.complete_until(t) {
                out.insert(tag, t);
            }
        }
        out
    }

    #[test]
    fn grid_placement_and_routes() {
        assert_eq!(Node::Ccb.position(), (0, 0));
        assert_eq!(Node::Sram.position(), (1, 0));
        assert_eq!(Node::Cluster(0).position(), (2, 0));
        assert_eq!(Node::Cluster(13).position(), (3, 3));
        let r = route(Node::Cluster(0), Node::Cluster(13));
        assert_eq!(r.len(), 4);
        // X first, then Y.
        assert_eq!(r[0], Link { from: (2, 0), to: (3, 0) });
        assert_eq!(r[1].to, (3, 1));
        assert!(route(Node::Ccb, Node::Ccb).is_empty());
        // Opposite directions use distinct links.
        let back = route(Node::Cluster(13), Node::Cluster(0));
        assert!(r.iter().all(|l| !back.contains(l)));
    }

    #[test]
    fn neighbor_transfer_at_pair_rate() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        let rs = path_resources(&c, AddressSpace::Hbsm { cluster: 0, tpb: 0 }, AddressSpace::Hbsm { cluster: 1, tpb: 0 }, 0);
        assert_eq!(rs.len(), 1);
        s.start(0, 64 << 10, rs, u64::MAX, 1);
        assert_eq!(drain(&mut s)[&1], 256);
    }

    #[test]
    fn shared_link_halves_rate() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        let a = AddressSpace::Hbsm { cluster: 0, tpb: 0 };
        let b = AddressSpace::Hbsm { cluster: 1, tpb: 0 };
        let id0 = s.start(0, 64 << 10, path_resources(&c, a, b, 0), u64::MAX, 0);
        let id1 = s.start(0, 64 << 10, path_resources(&c, a, b, 0), u64::MAX, 1);
        assert_eq!(s.rate(id0), Some(128));
        assert_eq!(s.rate(id1), Some(128));
        let done = drain(&mut s);
        assert_eq!(done[&0], 512);
        assert_eq!(done[&1], 512);
    }

    #[test]
    fn drb_streams() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        s.start(0, 256 << 10, vec![Resource::Drb], u64::MAX, 0);
        assert_eq!(drain(&mut s)[&0], 1024);
        s.start(1024, 256 << 10, vec![Resource::Drb], u64::MAX, 1);
        s.start(1024, 256 << 10, vec![Resource::Drb], u64::MAX, 2);
        let d = drain(&mut s);
        assert_eq!(d[&1] - 1024, 2048);
        assert_eq!(d[&2] - 1024, 2048);
    }

    #[test]
    fn ddr_to_sram_and_broadcast_rates() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        let d = DmaDescriptor {
            engine: 0,
            src: AddressSpace::Ddr,
            src_addr: 0,
            dst: DmaDest::Space { space: AddressSpace::CcbSram, addr: 0 },
            bytes: 1 << 20,
            wait: vec![],
            signal: vec![],
        };
        d.validate(&c).unwrap();
        s.start(0, d.bytes, d.resources(&c), u64::MAX, 0);
        assert_eq!(drain(&mut s)[&0], (1u64 << 20).div_ceil(273));

        let b = DmaDescriptor {
            dst: DmaDest::Drb { targets: (0..14).map(|cl| AddressSpace::Hbsm { cluster: cl, tpb: 0 }).collect(), addr: 0 },
            ..d
        };
        b.validate(&c).unwrap();
        s.start(10_000, b.bytes, b.resources(&c), u64::MAX, 1);
        assert_eq!(drain(&mut s)[&1] - 10_000, 4096);
    }

    #[test]
    fn dual_engine_ddr_pool() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        let a = s.start(0, 1 << 20, path_resources(&c, AddressSpace::Ddr, AddressSpace::CcbSram, 0), u64::MAX, 0);
        let b = s.start(0, 1 << 20, path_resources(&c, AddressSpace::Ddr, AddressSpace::CcbSram, 1), u64::MAX, 1);
        assert_eq!(s.rate(a), Some(137));
        assert_eq!(s.rate(b), Some(136));
        assert_eq!(s.load(Resource::Ddr), 273);
        let mut split = cfg();
        split.ddr_split_ports = true;
        let mut s = FlowScheduler::new(&split);
        let a = s.start(0, 1 << 20, path_resources(&split, AddressSpace::Ddr, AddressSpace::CcbSram, 0), u64::MAX, 0);
        let b = s.start(0, 1 << 20, path_resources(&split, AddressSpace::Ddr, AddressSpace::CcbSram, 1), u64::MAX, 1);
        assert_eq!((s.rate(a), s.rate(b)), (Some(128), Some(128)));
    }

    #[test]
    fn port_cap_limits_rate() {
        let c = cfg();
        let mut s = FlowScheduler::new(&c);
        s.start(0, 3200, vec![Resource::Local(0)], UNIT_PORT_BYTES_PER_CYCLE, 0);
        assert_eq!(drain(&mut s)[&0], 100);
    }

    #[test]
    fn zero_byte_flow_completes_now() {
        let mut s = FlowScheduler::new(&cfg());
        s.start(5, 0, vec![Resource::Drb], u64::MAX, 9);
        assert_eq!(s.next_completion(), Some(5));
        assert_eq!(s.complete_until(5), vec![(0, 9)]);
    }

    #[test]
    fn icb_timing() {
        let c = cfg();
        let mut icb = IcbChain::new(&c);
        let t = icb.transmit(0, 1248, &[0]);
        assert_eq!(t.arrivals, vec![(0, 21)]);
        let all: Vec<u32> = (0..14).collect();
        let t = icb.transmit(0, 1248, &all);
        assert_eq!(t.start, 20);
        assert_eq!(t.arrivals.len(), 14);
        for (c, a) in &t.arrivals {
            assert_eq!(*a, 40 + *c as u64 + 1);
        }
        assert_eq!(icb.sent(), 2);
    }

    #[test]
    fn descriptor_validation_and_text() {
        let c = cfg();
        let d = DmaDescriptor {
            engine: 1,
            src: AddressSpace::Ddr,
            src_addr: 0x40,
            dst: DmaDest::Drb { targets: vec![AddressSpace::Hbsm { cluster: 0, tpb: 1 }, AddressSpace::Hbsm { cluster: 2, tpb: 3 }], addr: 0x100 },
            bytes: 512,
            wait: vec![(CounterRef::new(0, 1, 4), 2), (CounterRef::new(0, 2, 1), 7)],
            signal: vec![CounterRef::new(0, 1, 5), CounterRef::new(2, 3, 5)],
        };
        d.validate(&c).unwrap();
        let back = DmaDescriptor::from_record(&Record::parse(&d.to_record()).unwrap()).unwrap();
        assert_eq!(back, d);
        let mut bad = d.clone();
        bad.engine = 2;
        assert!(bad.validate(&c).is_err());
        let mut bad = d.clone();
        bad.src = AddressSpace::Hbsm { cluster: 0, tpb: 0 };
        assert!(bad.validate(&c).is_err());
        let mut bad = d;
        bad.bytes = 0;
        assert!(bad.validate(&c).is_err());
    }

    #[test]
    fn interrupt_order() {
        let mut log = InterruptLog::default();
        log.raise(5, InterruptSource::Tpb { cluster: 1, tpb: 0 }, InterruptCode::Fault("x".into()));
        log.raise(5, InterruptSource::Ccb, InterruptCode::TaskComplete);
        log.raise(3, InterruptSource::Dispatcher(0), InterruptCode::Fault("y".into()));
        let srcs: Vec<_> = log.entries().iter().map(|e| e.source.clone()).collect();
        assert_eq!(srcs, vec![InterruptSource::Dispatcher(0), InterruptSource::Ccb, InterruptSource::Tpb { cluster: 1, tpb: 0 }]);
        assert_eq!(log.task_complete(), Some(5));
        assert_eq!(log.first_fault().unwrap().cycle, 3);
    }
}
