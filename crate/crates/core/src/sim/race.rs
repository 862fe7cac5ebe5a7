//! Happens-before race detection over synchronization counters.
//!
//! Every agent (a TPB unit, a DMA engine, a cluster CPU, the host) carries a
//! vector clock and bumps its own entry once per instruction. A counter
//! update releases the updater's clock into the counter's history; a monitor
//! satisfied at `expected = e` acquires the join of the first `e` releases.
//! Memory is shadowed per address space as byte intervals holding the last
//! writer and the readers since. A read needs a write that happens before
//! it; a write needs the previous write and every read since to happen
//! before it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::machine::AddressSpace;
use crate::sync::CounterRef;

pub type AgentId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VClock(Vec<u32>);

impl VClock {
    pub fn new(n: usize) -> Self {
        VClock(vec![0; n])
    }

    pub fn join(&mut self, other: &VClock) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }

    pub fn get(&self, agent: AgentId) -> u32 {
        self.0[agent]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Epoch {
    pub agent: AgentId,
    pub clock: u32,
}

impl Epoch {
    fn before(&self, vc: &VClock) -> bool {
        vc.get(self.agent) >= self.clock
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaceKind {
    /// Read of bytes never written.
    Uninitialized,
    /// Read not ordered after the last write.
    ReadBeforeProduce,
    /// Write not ordered after the last write.
    WriteAfterWrite,
    /// Write not ordered after a read of the old contents.
    WriteBeforeFree,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceReport {
    pub kind: RaceKind,
    pub space: AddressSpace,
    pub addr: u64,
    pub len: u64,
    pub agent: AgentId,
    pub other: Option<AgentId>,
}

impl fmt::Display for RaceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} on {}:[{:#x}, {:#x}) by agent {}",
            self.kind,
            self.space,
            self.addr,
            self.addr + self.len,
            self.agent
        )?;
        if let Some(o) = self.other {
            write!(f, " against agent {o}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Seg {
    end: u64,
    writer: Epoch,
    reads: Vec<Epoch>,
}

#[derive(Debug, Clone, Default)]
struct Shadow {
    segs: BTreeMap<u64, Seg>,
}

impl Shadow {
    /// Ensures no segment straddles `at`.
    fn split(&mut self, at: u64) {
        let Some((&start, seg)) = self.segs.range(..at).next_back() else { return };
        if seg.end > at {
            let mut tail = seg.clone();
            self.segs.get_mut(&start).expect("present").end = at;
            tail.end = tail.end.max(at);
            self.segs.insert(at, tail);
        }
    }

    fn isolate(&mut self, a: u64, b: u64) {
        self.split(a);
        self.split(b);
    }
}

#[derive(Debug, Clone)]
pub struct RaceDetector {
    clocks: Vec<VClock>,
    history: HashMap<CounterRef, Vec<VClock>>,
    shadow: HashMap<AddressSpace, Shadow>,
    host: AgentId,
}

impl RaceDetector {
    /// `agents` includes the host, which is agent `agents - 1`.
    pub fn new(agents: usize) -> Self {
        Self {
            clocks: vec![VClock::new(agents); agents],
            history: HashMap::new(),
            shadow: HashMap::new(),
            host: agents - 1,
        }
    }

    pub fn host(&self) -> AgentId {
        self.host
    }

    /// Starts a new instruction epoch for `agent`.
    pub fn tick(&mut self, agent: AgentId) {
        self.clocks[agent].0[agent] += 1;
    }

    pub fn clock(&self, agent: AgentId) -> &VClock {
        &self.clocks[agent]
    }

    /// Records the update that moved `counter` to `value` (values arrive in
    /// order, one at a time).
    pub fn release(&mut self, counter: CounterRef, value: u64, vc: &VClock) {
        let h = self.history.entry(counter).or_default();
        debug_assert_eq!(h.len() as u64 + 1, value, "counter history out of step");
        let mut joined = h.last().cloned().unwrap_or_else(|| VClock::new(vc.0.len()));
        joined.join(vc);
        h.push(joined);
    }

    pub fn acquire(&mut self, agent: AgentId, counter: CounterRef, expected: u64) {
        if expected == 0 {
            return;
        }
        if let Some(h) = self.history.get(&counter) {
            let idx = (expected as usize).min(h.len()) - 1;
            let vc = h[idx].clone();
            self.clocks[agent].join(&vc);
        }
    }

    fn epoch(&self, agent: AgentId) -> Epoch {
        Epoch { agent, clock: self.clocks[agent].get(agent) }
    }

    /// Initial contents: ordered before everything.
    pub fn preload(&mut self, space: AddressSpace, addr: u64, len: u64) {
        self.write_unchecked(space, addr, len, Epoch { agent: self.host, clock: 0 });
    }

    fn write_unchecked(&mut self, space: AddressSpace, a: u64, len: u64, writer: Epoch) {
        if len == 0 {
            return;
        }
        let b = a + len;
        let sh = self.shadow.entry(space).or_default();
        sh.isolate(a, b);
        let keys: Vec<u64> = sh.segs.range(a..b).map(|(&k, _)| k).collect();
        for k in keys {
            sh.segs.remove(&k);
        }
        sh.segs.insert(a, Seg { end: b, writer, reads: Vec::new() });
    }

    pub fn read(&mut self, agent: AgentId, space: AddressSpace, a: u64, len: u64) -> Result<(), RaceReport> {
        if len == 0 {
            return Ok(());
        }
        let b = a + len;
        let me = self.epoch(agent);
        let vc = &self.clocks[agent];
        let sh = self.shadow.entry(space).or_default();
        sh.isolate(a, b);
        let report = |kind, other| RaceReport { kind, space, addr: a, len, agent, other };
        let mut cursor = a;
        for (&start, seg) in sh.segs.range_mut(a..b) {
            if start > cursor {
                return Err(report(RaceKind::Uninitialized, None));
            }
            if seg.writer.agent != agent && !seg.writer.before(vc) {
                return Err(report(RaceKind::ReadBeforeProduce, Some(seg.writer.agent)));
            }
            match seg.reads.iter_mut().find(|r| r.agent == agent) {
                Some(r) => r.clock = r.clock.max(me.clock),
                None => seg.reads.push(me),
            }
            cursor = seg.end;
        }
        if cursor < b {
            return Err(report(RaceKind::Uninitialized, None));
        }
        Ok(())
    }

    pub fn write(&mut self, agent: AgentId, space: AddressSpace, a: u64, len: u64) -> Result<(), RaceReport> {
        if len == 0 {
            return Ok(());
        }
        let b = a + len;
        let vc = &self.clocks[agent];
        let report = |kind, other| RaceReport { kind, space, addr: a, len, agent, other };
        if let Some(sh) = self.shadow.get_mut(&space) {
            sh.isolate(a, b);
            for seg in sh.segs.range(a..b).map(|(_, s)| s) {
                if seg.writer.agent != agent && !seg.writer.before(vc) {
                    return Err(report(RaceKind::WriteAfterWrite, Some(seg.writer.agent)));
                }
                if let Some(r) = seg.reads.iter().find(|r| r.agent != agent && !r.before(vc)) {
                    return Err(report(RaceKind::WriteBeforeFree, Some(r.agent)));
                }
            }
        }
        let me = self.epoch(agent);
        self.write_unchecked(space, a, len, me);
        Ok(())
    }
}

/// Collapses per-element addresses into contiguous byte ranges, preserving
/// walk order between discontinuities.
pub fn coalesce(addrs: &[u64], elem_bytes: u64) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for &a in addrs {
        match out.last_mut() {
            Some((s, l)) if *s + *l == a => *l += elem_bytes,
            _ => out.push((a, elem_bytes)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: AddressSpace = AddressSpace::Hbsm { cluster: 0, tpb: 0 };
    const C: CounterRef = CounterRef { cluster: 0, tpb: 0, index: 0 };
    const F: CounterRef = CounterRef { cluster: 0, tpb: 0, index: 1 };

    #[test]
    fn synchronized_handoff_is_clean() {
        let mut d = RaceDetector::new(3);
        d.tick(0);
        d.write(0, H, 0, 64).unwrap();
        let vc = d.clock(0).clone();
        d.release(C, 1, &vc);
        d.acquire(1, C, 1);
        d.tick(1);
        d.read(1, H, 0, 64).unwrap();
        let vc = d.clock(1).clone();
        d.release(F, 1, &vc);
        d.acquire(0, F, 1);
        d.tick(0);
        d.write(0, H, 0, 64).unwrap();
    }

    #[test]
    fn missing_monitor_is_a_race() {
        let mut d = RaceDetector::new(3);
        d.tick(0);
        d.write(0, H, 0, 64).unwrap();
        d.tick(1);
        let e = d.read(1, H, 0, 64).unwrap_err();
        assert_eq!(e.kind, RaceKind::ReadBeforeProduce);
        assert_eq!(e.other, Some(0));
    }

    #[test]
    fn overwrite_before_free() {
        let mut d = RaceDetector::new(3);
        d.preload(H, 0, 64);
        d.tick(1);
        d.read(1, H, 0, 64).unwrap();
        d.tick(0);
        assert_eq!(d.write(0, H, 16, 8).unwrap_err().kind, RaceKind::WriteBeforeFree);
    }

    #[test]
    fn uninitialized_and_partial() {
        let mut d = RaceDetector::new(2);
        d.preload(H, 0, 32);
        d.tick(0);
        assert_eq!(d.read(0, H, 16, 32).unwrap_err().kind, RaceKind::Uninitialized);
        d.read(0, H, 0, 32).unwrap();
        assert_eq!(d.read(0, H, 100, 4).unwrap_err().kind, RaceKind::Uninitialized);
    }

    #[test]
    fn reduction_needs_all_releases() {
        let mut d = RaceDetector::new(4);
        for a in 0..2 {
            d.tick(a);
            d.write(a, H, a as u64 * 8, 8).unwrap();
            let vc = d.clock(a).clone();
            d.release(C, a as u64 + 1, &vc);
        }
        d.acquire(2, C, 1);
        d.tick(2);
        assert!(d.read(2, H, 0, 16).is_err());
        d.acquire(2, C, 2);
        d.read(2, H, 0, 16).unwrap();
    }

    #[test]
    fn coalescing() {
        assert_eq!(coalesce(&[0, 2, 4, 10, 12], 2), vec![(0, 6), (10, 4)]);
        assert_eq!(coalesce(&[4, 0], 4), vec![(4, 4), (0, 4)]);
    }
}
