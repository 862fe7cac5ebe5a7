//! Synchronization counters: monotonic per-TPB counters with update (+1) and
//! monitor (wait until value >= expected) semantics, plus the barrier,
//! broadcast and reduction patterns built from them.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("counter index {0} out of range")]
    IndexOutOfRange(u32),
    #[error("counter {0} would overflow")]
    OverflowFault(u32),
    #[error("unroutable sync target {0}")]
    UnroutableTarget(CounterRef),
    #[error("bad counter reference `{0}`")]
    Parse(String),
}

/// Global address of one counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CounterRef {
    pub cluster: u32,
    pub tpb: u32,
    pub index: u32,
}

impl CounterRef {
    pub fn new(cluster: u32, tpb: u32, index: u32) -> Self {
        Self { cluster, tpb, index }
    }
}

impl fmt::Display for CounterRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.cluster, self.tpb, self.index)
    }
}

impl FromStr for CounterRef {
    type Err = SyncError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split('.')
            .map(|p| p.parse().map_err(|_| SyncError::Parse(s.to_string())))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [cluster, tpb, index] => Ok(Self { cluster, tpb, index }),
            _ => Err(SyncError::Parse(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorOutcome {
    Proceed,
    Blocked,
}

/// Opaque waiter identity; the engine encodes (cluster, tpb, unit) into it so
/// the natural ordering gives the deterministic tiebreak.
pub type WaiterId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PendingMonitor {
    pub waiter: WaiterId,
    pub index: u32,
    pub expected: u64,
}

#[derive(Debug, Clone)]
pub struct SyncCounterFile {
    values: Vec<u64>,
    pending: Vec<PendingMonitor>,
}

impl SyncCounterFile {
    pub fn new(counters: u32) -> Self {
        Self { values: vec![0; counters as usize], pending: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, index: u32) -> Result<u64, SyncError> {
        self.values.get(index as usize).copied().ok_or(SyncError::IndexOutOfRange(index))
    }

    pub fn update(&mut self, index: u32) -> Result<u64, SyncError> {
        let v = self.values.get_mut(index as usize).ok_or(SyncError::IndexOutOfRange(index))?;
        *v = v.checked_add(1).ok_or(SyncError::OverflowFault(index))?;
        Ok(*v)
    }

    pub fn monitor(
        &mut self,
        waiter: WaiterId,
        index: u32,
        expected: u64,
    ) -> Result<MonitorOutcome, SyncError> {
        if self.value(index)? >= expected {
            return Ok(MonitorOutcome::Proceed);
        }
        let m = PendingMonitor { waiter, index, expected };
        if !self.pending.contains(&m) {
            self.pending.push(m);
        }
        Ok(MonitorOutcome::Blocked)
    }

    /// Releases every satisfied monitor, in waiter order.
    pub fn settle(&mut self) -> Vec<PendingMonitor> {
        let values = &self.values;
        let mut released: Vec<PendingMonitor> = Vec::new();
        self.pending.retain(|m| {
            if values[m.index as usize] >= m.expected {
                released.push(*m);
                false
            } else {
                true
            }
        });
        released.sort();
        released
    }

    pub fn pending(&self) -> &[PendingMonitor] {
        &self.pending
    }

    #[cfg(test)]
    pub(crate) fn force(&mut self, index: u32, value: u64) {
        self.values[index as usize] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncEventKind {
    Update,
    MonitorSatisfied,
    BarrierRelease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncEvent {
    pub kind: SyncEventKind,
    pub cycle: u64,
    pub counter: CounterRef,
    pub value: u64,
}

/// A barrier over a group of TPBs: each arrival increments a CCB-owned
/// counter, and every member waits for it to reach the group size.
#[derive(Debug, Clone)]
pub struct Barrier {
    members: Vec<u32>,
    arrived: SyncCounterFile,
    released_at: Option<u64>,
}

impl Barrier {
    pub fn new(members: Vec<u32>) -> Self {
        assert!(!members.is_empty(), "barrier group must be nonempty");
        let mut arrived = SyncCounterFile::new(1);
        let n = members.len() as u64;
        for &m in &members {
            let _ = arrived.monitor(m.into(), 0, n);
        }
        Self { members, arrived, released_at: None }
    }

    /// Records `member` arriving at `cycle`. Returns the release events if
    /// this arrival completed the barrier.
    pub fn arrive(&mut self, member: u32, cycle: u64) -> Vec<SyncEvent> {
        assert!(self.members.contains(&member), "{member} is not in the group");
        let value = self.arrived.update(0).expect("single counter");
        let released = self.arrived.settle();
        if released.is_empty() {
            return Vec::new();
        }
        self.released_at = Some(cycle);
        released
            .into_iter()
            .map(|m| SyncEvent {
                kind: SyncEventKind::BarrierRelease,
                cycle,
                counter: CounterRef::new(u32::MAX, m.waiter as u32, 0),
                value,
            })
            .collect()
    }

    pub fn released_at(&self) -> Option<u64> {
        self.released_at
    }
}

/// Arrival cycle of every target of a multicast update sent at `now`, given a
/// latency function for the route to each target.
pub fn multicast_arrivals(
    now: u64,
    targets: &[CounterRef],
    latency: impl Fn(&CounterRef) -> Option<u64>,
) -> Result<Vec<(CounterRef, u64)>, SyncError> {
    targets
        .iter()
        .map(|t| latency(t).map(|l| (*t, now + l)).ok_or(SyncError::UnroutableTarget(*t)))
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Counters never decrease and no wakeup is lost.
        #[test]
        fn monotone_and_no_lost_wakeups(ops in prop::collection::vec((0u32..4, 0u64..6, any::<bool>()), 1..200)) {
            let mut f = SyncCounterFile::new(4);
            let mut last = [0u64; 4];
            for (i, (idx, expected, is_update)) in ops.into_iter().enumerate() {
                if is_update {
                    f.update(idx).unwrap();
                } else {
                    let _ = f.monitor(i as u64, idx, expected).unwrap();
                }
                f.settle();
                for c in 0..4u32 {
                    let v = f.value(c).unwrap();
                    prop_assert!(v >= last[c as usize]);
                    last[c as usize] = v;
                }
                for m in f.pending() {
                    prop_assert!(f.value(m.index).unwrap() < m.expected);
                }
            }
        }
    }
}
