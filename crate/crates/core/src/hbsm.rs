//! Banked scratchpad memory: line-interleaved banks, per-requester ports with
//! in-order issue, round-robin arbitration per bank, and a fixed read
//! pipeline. Writes are visible at grant.
//!
//! The same machinery models the CCB SRAM with a coarser interleave.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::isa::SyncAction;
use crate::machine::MachineConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HbsmError {
    #[error("malformed request at {addr:#x} len {len}: {reason}")]
    MalformedRequest { addr: u64, len: u64, reason: &'static str },
    #[error("port {0} does not exist")]
    BadPort(u32),
    #[error("address {addr:#x}+{len} outside {capacity} bytes")]
    OutOfRange { addr: u64, len: u64, capacity: u64 },
    #[error("image of {got} bytes does not match capacity {want}")]
    ImageSize { got: u64, want: u64 },
}

/// Fixed port assignment within a TPB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Port {
    TcuAct = 0,
    TcuWt = 1,
    TcuOut = 2,
    CvuIn0 = 3,
    CvuIn1 = 4,
    CvuOut = 5,
    Dtdu = 6,
    GsduCsu = 7,
}

impl Port {
    pub const ALL: [Port; 8] = [
        Port::TcuAct,
        Port::TcuWt,
        Port::TcuOut,
        Port::CvuIn0,
        Port::CvuIn1,
        Port::CvuOut,
        Port::Dtdu,
        Port::GsduCsu,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }
}

// ---------------------------------------------------------------------------
// Storage

const PAGE: u64 = 4096;

/// Sparse byte store; untouched bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Storage {
    capacity: u64,
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl Storage {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, pages: BTreeMap::new() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), HbsmError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(HbsmError::OutOfRange { addr, len, capacity: self.capacity }),
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, HbsmError> {
        self.check(addr, len)?;
        let mut out = vec![0u8; len as usize];
        let mut a = addr;
        while a < addr + len {
            let page = a / PAGE;
            let off = a % PAGE;
            let n = (PAGE - off).min(addr + len - a);
            if let Some(p) = self.pages.get(&page) {
                let dst = (a - addr) as usize;
                out[dst..dst + n as usize].copy_from_slice(&p[off as usize..(off + n) as usize]);
            }
            a += n;
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), HbsmError> {
        let len = data.len() as u64;
        self.check(addr, len)?;
        let mut a = addr;
        while a < addr + len {
            let page = a / PAGE;
            let off = a % PAGE;
            let n = (PAGE - off).min(addr + len - a);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            let src = (a - addr) as usize;
            p[off as usize..(off + n) as usize].copy_from_slice(&data[src..src + n as usize]);
            a += n;
        }
        Ok(())
    }

    /// Flat image of the whole space.
    pub fn dump(&self) -> Vec<u8> {
        self.read(0, self.capacity).expect("full range is in bounds")
    }

    pub fn load(&mut self, image: &[u8]) -> Result<(), HbsmError> {
        if image.len() as u64 != self.capacity {
            return Err(HbsmError::ImageSize { got: image.len() as u64, want: self.capacity });
        }
        self.pages.clear();
        for (i, chunk) in image.chunks(PAGE as usize).enumerate() {
            if chunk.iter().any(|&b| b != 0) {
                self.write(i as u64 * PAGE, chunk)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry and requests

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub capacity: u64,
    pub banks: u32,
    /// Interleave granularity in bytes.
    pub line: u64,
    /// Largest single request; never more than one line.
    pub beat: u64,
    pub ports: u32,
    pub read_latency: u64,
}

impl Geometry {
    pub fn hbsm(cfg: &MachineConfig) -> Self {
        Self {
            capacity: cfg.hbsm_bytes,
            banks: cfg.hbsm_banks,
            line: cfg.hbsm_bank_width as u64,
            beat: cfg.hbsm_bank_width as u64,
            ports: cfg.hbsm_ports,
            read_latency: cfg.hbsm_latency as u64,
        }
    }

    /// CCB SRAM: interleaved by `ccb_interleave`, one port per DMA engine
    /// plus one each for the DRB and mesh sides.
    pub fn ccb_sram(cfg: &MachineConfig) -> Self {
        Self {
            capacity: cfg.ccb_sram_bytes,
            banks: cfg.ccb_sram_banks,
            line: cfg.ccb_interleave as u64,
            beat: 64,
            ports: cfg.ccb_dma_engines + 2,
            read_latency: cfg.hbsm_latency as u64,
        }
    }

    pub fn bank_of(&self, addr: u64) -> Result<u32, HbsmError> {
        if addr >= self.capacity {
            return Err(HbsmError::OutOfRange { addr, len: 1, capacity: self.capacity });
        }
        Ok((addr / self.line % self.banks as u64) as u32)
    }

    /// Peak bytes per cycle across all banks.
    pub fn bank_side_peak(&self) -> u64 {
        self.banks as u64 * self.beat
    }

    /// Peak bytes per cycle with every port granted each cycle.
    pub fn port_side_peak(&self) -> u64 {
        self.ports as u64 * self.beat
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Access {
    Read,
    Write(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemRequest {
    pub requester: u32,
    pub addr: u64,
    pub len: u64,
    pub access: Access,
    pub tag: u64,
    pub sync_on_grant: Option<SyncAction>,
}

impl MemRequest {
    pub fn read(requester: u32, addr: u64, len: u64, tag: u64) -> Self {
        Self { requester, addr, len, access: Access::Read, tag, sync_on_grant: None }
    }

    pub fn write(requester: u32, addr: u64, data: Vec<u8>, tag: u64) -> Self {
        Self {
            requester,
            addr,
            len: data.len() as u64,
            access: Access::Write(data),
            tag,
            sync_on_grant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemEvent {
    Grant { cycle: u64, port: u32, bank: u32, tag: u64, bytes: u64, sync: Option<SyncAction> },
    /// Read data return or write acknowledgement.
    Complete { cycle: u64, port: u32, tag: u64, data: Option<Vec<u8>> },
}

#[derive(Debug, Clone)]
struct Inflight {
    due: u64,
    port: u32,
    tag: u64,
    data: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct BankedMemory {
    geometry: Geometry,
    storage: Storage,
    queues: Vec<VecDeque<MemRequest>>,
    rr: Vec<u32>,
    inflight: VecDeque<Inflight>,
    now: u64,
}

impl BankedMemory {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            storage: Storage::new(geometry.capacity),
            queues: vec![VecDeque::new(); geometry.ports as usize],
            rr: vec![0; geometry.banks as usize],
            inflight: VecDeque::new(),
            geometry,
            now: 0,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut Storage {
        &mut self.storage
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn submit(&mut self, req: MemRequest) -> Result<(), HbsmError> {
        if req.requester >= self.geometry.ports {
            return Err(HbsmError::BadPort(req.requester));
        }
        let bad = |reason| Err(HbsmError::MalformedRequest { addr: req.addr, len: req.len, reason });
        if req.len == 0 {
            return bad("zero length");
        }
        if req.len > self.geometry.beat {
            return bad("longer than one beat");
        }
        if req.addr / self.geometry.line != (req.addr + req.len - 1) / self.geometry.line {
            return bad("crosses a bank line");
        }
        if let Access::Write(d) = &req.access {
            if d.len() as u64 != req.len {
                return bad("payload length mismatch");
            }
        }
        self.storage.check(req.addr, req.len)?;
        self.queues[req.requester as usize].push_back(req);
        Ok(())
    }

    pub fn queued(&self, port: u32) -> usize {
        self.queues[port as usize].len()
    }

    pub fn is_idle(&self) -> bool {
        self.inflight.is_empty() && self.queues.iter().all(VecDeque::is_empty)
    }

    /// Advances one cycle: completes due accesses, then arbitrates every
    /// bank among the port-queue heads that target it.
    pub fn cycle(&mut self) -> Vec<MemEvent> {
        let now = self.now;
        let mut events = Vec::new();
        while self.inflight.front().is_some_and(|f| f.due <= now) {
            let f = self.inflight.pop_front().expect("front checked");
            events.push(MemEvent::Complete { cycle: now, port: f.port, tag: f.tag, data: f.data });
        }

        let ports = self.geometry.ports;
        let mut contenders: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for p in 0..ports {
            if let Some(head) = self.queues[p as usize].front() {
                let bank = self.geometry.bank_of(head.addr).expect("checked at submit");
                contenders.entry(bank).or_default().push(p);
            }
        }
        let mut winners = Vec::new();
        for (bank, ps) in contenders {
            let start = self.rr[bank as usize];
            let winner = *ps
                .iter()
                .min_by_key(|&&p| (p + ports - start % ports) % ports)
                .expect("nonempty contender list");
            self.rr[bank as usize] = (winner + 1) % ports;
            winners.push((winner, bank));
        }
        // Grants are applied in port order so same-cycle write/read pairs
        // on different banks are independent and ordering is reproducible.
        winners.sort_unstable();
        for (port, bank) in winners {
            let req = self.queues[port as usize].pop_front().expect("head exists");
            let data = match req.access {
                Access::Read => Some(self.storage.read(req.addr, req.len).expect("checked at submit")),
                Access::Write(d) => {
                    self.storage.write(req.addr, &d).expect("checked at submit");
                    None
                }
            };
            events.push(MemEvent::Grant {
                cycle: now,
                port,
                bank,
                tag: req.tag,
                bytes: req.len,
                sync: req.sync_on_grant,
            });
            self.inflight.push_back(Inflight {
                due: now + self.geometry.read_latency,
                port,
                tag: req.tag,
                data,
            });
        }
        self.now += 1;
        events
    }
}

/// Splits `[addr, addr+len)` into beats that never cross a line.
pub fn split_beats(addr: u64, len: u64, line: u64, beat: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut a = addr;
    let end = addr + len;
    while a < end {
        let line_end = (a / line + 1) * line;
        let n = (line_end - a).min(beat).min(end - a);
        out.push((a, n));
        a += n;
    }
    out
}
