//! Execution trace in the browser trace-event JSON format, one track per
//! unit, plus a summary block.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Name of the span recorded while an instruction waits on its monitors.
pub const STALL: &str = "stall";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrackClass {
    /// A TPB functional unit.
    Unit,
    Dma,
    Icb,
    Cpu,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Track {
    pub class: TrackClass,
    /// Process group in the viewer: cluster index, or `None` for the CCB.
    pub group: Option<u32>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub track: Track,
    pub name: String,
    pub begin: u64,
    pub end: u64,
    pub seq: Option<u32>,
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstantEvent {
    pub track: Track,
    pub name: String,
    pub cycle: u64,
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub instants: Vec<InstantEvent>,
    pub makespan: u64,
    /// Bytes moved per fabric, keyed by a short name.
    pub bytes_moved: BTreeMap<String, u64>,
}

impl Trace {
    pub fn span(&mut self, track: Track, name: &str, begin: u64, end: u64, seq: Option<u32>, args: BTreeMap<String, Value>) {
        self.events.push(TraceEvent { track, name: name.to_string(), begin, end, seq, args });
    }

    pub fn instant(&mut self, track: Track, name: &str, cycle: u64, args: BTreeMap<String, Value>) {
        self.instants.push(InstantEvent { track, name: name.to_string(), cycle, args });
    }

    fn tracks(&self) -> Vec<Track> {
        let mut t: Vec<Track> = self
            .events
            .iter()
            .map(|e| e.track.clone())
            .chain(self.instants.iter().map(|e| e.track.clone()))
            .collect();
        t.sort();
        t.dedup();
        t
    }

    /// Merged busy intervals of one track. Stall spans are not busy time.
    pub fn busy_intervals(&self, track: &Track) -> Vec<(u64, u64)> {
        let mut iv: Vec<(u64, u64)> = self
            .events
            .iter()
            .filter(|e| &e.track == track && e.end > e.begin && e.name != STALL)
            .map(|e| (e.begin, e.end))
            .collect();
        iv.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::new();
        for (b, e) in iv {
            match out.last_mut() {
                Some(last) if b <= last.1 => last.1 = last.1.max(e),
                _ => out.push((b, e)),
            }
        }
        out
    }

    pub fn busy_cycles(&self, track: &Track) -> u64 {
        self.busy_intervals(track).iter().map(|(b, e)| e - b).sum()
    }

    /// Cycles during which at least `k` TPB units are busy.
    pub fn cycles_with_concurrency(&self, k: usize) -> u64 {
        let mut edges: Vec<(u64, i64)> = Vec::new();
        for t in self.tracks().iter().filter(|t| t.class == TrackClass::Unit) {
            for (b, e) in self.busy_intervals(t) {
                edges.push((b, 1));
                edges.push((e, -1));
            }
        }
        edges.sort_unstable();
        let (mut level, mut last, mut total) = (0i64, 0u64, 0u64);
        for (at, d) in edges {
            if level >= k as i64 {
                total += at - last;
            }
            level += d;
            last = at;
        }
        total
    }

    /// Per-track checks: intervals well-formed and non-overlapping, busy
    /// time within the makespan.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for t in self.tracks() {
            let mut iv: Vec<(u64, u64)> = self.events.iter().filter(|e| e.track == t).map(|e| (e.begin, e.end)).collect();
            iv.sort_unstable();
            for &(b, e) in &iv {
                if e < b {
                    return Err(format!("{}: event ends before it begins", t.name));
                }
            }
            for w in iv.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(format!("{}: overlapping events at {}", t.name, w[1].0));
                }
            }
            if self.busy_cycles(&t) > self.makespan {
                return Err(format!("{}: busy longer than the makespan", t.name));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> Value {
        let mut busy = serde_json::Map::new();
        for t in self.tracks().iter().filter(|t| matches!(t.class, TrackClass::Unit | TrackClass::Dma | TrackClass::Cpu)) {
            let frac = if self.makespan == 0 { 0.0 } else { self.busy_cycles(t) as f64 / self.makespan as f64 };
            busy.insert(t.name.clone(), json!((frac * 1e6).round() / 1e6));
        }
        json!({
            "makespan_cycles": self.makespan,
            "busy_fraction": busy,
            "bytes_moved": self.bytes_moved,
            "cycles_with_2plus_units_busy": self.cycles_with_concurrency(2),
        })
    }

    pub fn to_json(&self) -> Value {
        let tracks = self.tracks();
        let tid: BTreeMap<&Track, usize> = tracks.iter().enumerate().map(|(i, t)| (t, i)).collect();
        let pid = |t: &Track| t.group.map_or(0, |g| g as u64 + 1);
        let mut ev = Vec::new();
        let mut groups: Vec<Option<u32>> = tracks.iter().map(|t| t.group).collect();
        groups.dedup();
        for g in groups {
            let name = g.map_or("ccb".to_string(), |c| format!("cluster{c}"));
            ev.push(json!({"ph": "M", "name": "process_name", "pid": g.map_or(0, |g| g as u64 + 1), "args": {"name": name}}));
        }
        for t in &tracks {
            ev.push(json!({"ph": "M", "name": "thread_name", "pid": pid(t), "tid": tid[t], "args": {"name": t.name}}));
        }
        let mut spans: Vec<&TraceEvent> = self.events.iter().collect();
        spans.sort_by(|a, b| (a.begin, &a.track, a.end).cmp(&(b.begin, &b.track, b.end)));
        for e in spans {
            let mut args = e.args.clone();
            if let Some(s) = e.seq {
                args.insert("seq".into(), json!(s));
            }
            ev.push(json!({
                "ph": "X", "name": e.name, "pid": pid(&e.track), "tid": tid[&e.track],
                "ts": e.begin, "dur": e.end - e.begin, "args": args,
            }));
        }
        for e in &self.instants {
            ev.push(json!({
                "ph": "i", "s": "t", "name": e.name, "pid": pid(&e.track), "tid": tid[&e.track],
                "ts": e.cycle, "args": e.args,
            }));
        }
        json!({ "traceEvents": ev, "displayTimeUnit": "ns", "summary": self.summary() })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("trace serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_string().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json()).expect("trace serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(name: &str) -> Track {
        Track { class: TrackClass::Unit, group: Some(0), name: name.into() }
    }

    #[test]
    fn empty_trace_is_valid_json() {
        let t = Trace::default();
        let v: Value = serde_json::from_str(&t.to_json_string()).unwrap();
        assert_eq!(v["traceEvents"].as_array().unwrap().len(), 0);
        assert_eq!(v["summary"]["makespan_cycles"], 0);
        t.check_well_formed().unwrap();
    }

    #[test]
    fn concurrency_count() {
        let mut t = Trace { makespan: 100, ..Default::default() };
        t.span(unit("a"), "exec", 0, 60, Some(0), BTreeMap::new());
        t.span(unit("b"), "exec", 40, 100, Some(0), BTreeMap::new());
        t.span(unit("c"), "exec", 50, 55, Some(0), BTreeMap::new());
        assert_eq!(t.cycles_with_concurrency(1), 100);
        assert_eq!(t.cycles_with_concurrency(2), 20);
        assert_eq!(t.cycles_with_concurrency(3), 5);
        t.check_well_formed().unwrap();
        t.span(unit("a"), "exec", 59, 70, Some(1), BTreeMap::new());
        assert!(t.check_well_formed().is_err());
    }

    #[test]
    fn hash_is_stable() {
        let mut t = Trace { makespan: 10, ..Default::default() };
        t.span(unit("a"), "exec", 0, 10, None, BTreeMap::new());
        assert_eq!(t.hash(), t.clone().hash());
        let v = t.to_json();
        let x = v["traceEvents"].as_array().unwrap().iter().find(|e| e["ph"] == "X").unwrap();
        assert_eq!(x["dur"], 10);
    }
}
