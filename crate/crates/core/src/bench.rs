//! Benchmark workloads shared by the command line and the test suite.

use std::collections::BTreeMap;
use std::fmt;

use crate::compiler::{compile, CompileOptions, Graph};
use crate::fabric::{path_resources, DmaDescriptor, DmaDest, FlowScheduler};
use crate::funits::TcuOp;
use crate::hbsm::{BankedMemory, Geometry, MemEvent, MemRequest};
use crate::machine::{AddressSpace, DataType, MachineConfig};
use crate::program::{DataInit, ScheduledProgram};
use crate::sim::verify::{encode_inputs, verify};
use crate::sim::{oracle, run, RunOptions};

pub const PIPELINE_GRAPH: &str = include_str!("../graphs/pipeline.graph");

/// Bundled example graphs by name.
pub const GRAPHS: [(&str, &str); 4] = [
    ("pipeline", PIPELINE_GRAPH),
    ("mlp_i8", include_str!("../graphs/mlp_i8.graph")),
    ("convnet", include_str!("../graphs/convnet.graph")),
    ("residual_f32", include_str!("../graphs/residual_f32.graph")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: &'static str,
    pub value: String,
}

impl Row {
    fn new(name: &'static str, value: impl ToString) -> Self {
        Self { name, value: value.to_string() }
    }
}

pub struct Table<'a>(pub &'a [Row]);

impl fmt::Display for Table<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.0.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in self.0 {
            writeln!(f, "{:<w$}  {}", r.name, r.value)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcuBench {
    pub mac_cycles: u64,
    /// Fill, MAC/fetch overlap and drain, as timed by the unit.
    pub exec_cycles: u64,
    /// The execution span recorded by a full simulation of the instruction.
    pub simulated_exec_cycles: u64,
    /// Operand fetch start-up before the execution span.
    pub simulated_fetch_cycles: u64,
    pub makespan: u64,
    pub trace_hash: String,
}

/// i8 matmul M=32, K=32, N=64 on one TPB.
pub fn tcu_matmul(cfg: &MachineConfig) -> Result<TcuBench, String> {
    let t = TcuOp::matmul(32, 32, 64, DataType::I8).timing(cfg);
    let g = Graph::parse(
        "graph tcu\ninput x dtype=i8 shape=32x32\nconst w dtype=i8 shape=32x64 init=seed:1\nmatmul y x w\noutput y\n",
    )
    .map_err(|e| e.to_string())?;
    let opts = CompileOptions { tpbs: Some(1), chunks: Some(1), ..Default::default() };
    let c = compile(&g, cfg, &opts).map_err(|e| e.to_string())?;
    let inputs = encode_inputs(&g, &oracle::random_inputs(&g, 1));
    let r = run(&c.program, cfg, &inputs, RunOptions::default()).into_result().map_err(|e| e.to_string())?;
    let span = |name: &str| {
        r.trace.events.iter().find(|e| e.name == name && e.track.name.ends_with("tcu")).map(|e| e.end - e.begin)
    };
    Ok(TcuBench {
        mac_cycles: t.mac,
        exec_cycles: t.total(),
        simulated_exec_cycles: span("matmul").ok_or("no matmul span")?,
        simulated_fetch_cycles: span("fetch").ok_or("no fetch span")?,
        makespan: r.makespan,
        trace_hash: r.trace.hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HbsmStream {
    pub cycles: u64,
    pub bytes: u64,
    pub min_per_cycle: u64,
    pub max_per_cycle: u64,
}

/// Eight ports streaming 32-byte reads over disjoint banks.
pub fn hbsm_stream(cfg: &MachineConfig, cycles: u64) -> HbsmStream {
    let mut m = BankedMemory::new(Geometry::hbsm(cfg));
    let ports = u64::from(cfg.hbsm_ports);
    let width = u64::from(cfg.hbsm_bank_width);
    let cap = m.geometry().capacity;
    let (mut total, mut lo, mut hi) = (0, u64::MAX, 0);
    for k in 0..cycles {
        for p in 0..ports {
            let addr = ((p + ports * k) * width) % cap;
            m.submit(MemRequest::read(p as u32, addr, width, k)).expect("in range");
        }
        let b: u64 = m
            .cycle()
            .iter()
            .filter_map(|e| match e {
                MemEvent::Grant { bytes, .. } => Some(*bytes),
                _ => None,
            })
            .sum();
        total += b;
        lo = lo.min(b);
        hi = hi.max(b);
    }
    HbsmStream { cycles, bytes: total, min_per_cycle: lo, max_per_cycle: hi }
}

/// Every port hammering bank 0. Returns the grant order.
pub fn hbsm_contention(cfg: &MachineConfig, grants: usize) -> Vec<u32> {
    let mut m = BankedMemory::new(Geometry::hbsm(cfg));
    let ports = cfg.hbsm_ports;
    let per_port = grants.div_ceil(ports as usize) as u64 + 1;
    for k in 0..per_port {
        for p in 0..ports {
            m.submit(MemRequest::read(p, 0, u64::from(cfg.hbsm_bank_width), k)).expect("in range");
        }
    }
    let mut order = Vec::with_capacity(grants);
    while order.len() < grants {
        for e in m.cycle() {
            if let MemEvent::Grant { port, .. } = e {
                order.push(port);
            }
        }
    }
    order.truncate(grants);
    order
}

/// Largest difference between per-port grant counts in any window of
/// `window` consecutive grants.
pub fn max_window_spread(order: &[u32], ports: u32, window: usize) -> u64 {
    order
        .windows(window)
        .map(|w| {
            let mut n = vec![0u64; ports as usize];
            for &p in w {
                n[p as usize] += 1;
            }
            n.iter().max().unwrap() - n.iter().min().unwrap()
        })
        .max()
        .unwrap_or(0)
}

/// Simulated cycles of a DDR→DRB broadcast of `bytes` to TPB 0 of every
/// cluster, on an otherwise idle machine.
pub fn drb_broadcast(cfg: &MachineConfig, bytes: u64) -> Result<u64, String> {
    let targets = (0..cfg.num_clusters).map(|c| AddressSpace::Hbsm { cluster: c, tpb: 0 }).collect();
    let program = ScheduledProgram {
        name: "drb".into(),
        data: vec![DataInit { space: AddressSpace::Ddr, addr: 0, bytes: (0..bytes).map(|i| i as u8).collect() }],
        dmas: vec![DmaDescriptor {
            engine: 0,
            src: AddressSpace::Ddr,
            src_addr: 0,
            dst: DmaDest::Drb { targets, addr: 0 },
            bytes,
            wait: vec![],
            signal: vec![],
        }],
        ..Default::default()
    };
    let r = run(&program, cfg, &BTreeMap::new(), RunOptions::default()).into_result().map_err(|e| e.to_string())?;
    r.trace
        .events
        .iter()
        .find(|e| e.name == "drb_broadcast")
        .map(|e| e.end - e.begin)
        .ok_or_else(|| "no broadcast span".into())
}

/// Peak aggregate DDR read rate while two DMA engines issue staggered
/// reads. Rates are piecewise constant between flow events, so sampling
/// at every event is exhaustive.
pub fn dual_dma_peak(cfg: &MachineConfig, transfers: &[(u64, u64)]) -> u64 {
    let mut s = FlowScheduler::new(cfg);
    let mut pending: Vec<(u64, u64, u8)> =
        transfers.iter().enumerate().map(|(i, &(at, bytes))| (at, bytes, (i % 2) as u8)).collect();
    pending.sort_by_key(|p| std::cmp::Reverse(p.0));
    let mut active = Vec::new();
    let mut peak = 0;
    loop {
        let next_start = pending.last().map(|p| p.0);
        let next_done = s.next_completion();
        let now = match (next_start, next_done) {
            (None, None) => break,
            (a, b) => a.unwrap_or(u64::MAX).min(b.unwrap_or(u64::MAX)),
        };
        let done: Vec<u64> = s.complete_until(now).into_iter().map(|(id, _)| id).collect();
        active.retain(|id| !done.contains(id));
        while pending.last().is_some_and(|p| p.0 == now) {
            let (_, bytes, port) = pending.pop().unwrap();
            let res = path_resources(cfg, AddressSpace::Ddr, AddressSpace::CcbSram, port);
            active.push(s.start(now, bytes, res, u64::MAX, 0));
        }
        peak = peak.max(active.iter().filter_map(|&id| s.rate(id)).sum::<u64>());
    }
    peak
}

pub fn micro(cfg: &MachineConfig) -> Result<Vec<Row>, String> {
    let tcu = tcu_matmul(cfg)?;
    let stream = hbsm_stream(cfg, 10_000);
    let order = hbsm_contention(cfg, 8_000);
    let drb = drb_broadcast(cfg, 1 << 20)?;
    let dual = dual_dma_peak(cfg, &[(0, 1 << 20), (0, 1 << 20), (500, 1 << 18), (3000, 1 << 19)]);
    Ok(vec![
        Row::new("tcu_matmul_32x32x64_mac_cycles", tcu.mac_cycles),
        Row::new("tcu_matmul_32x32x64_exec_cycles", tcu.exec_cycles),
        Row::new("tcu_matmul_32x32x64_simulated_exec", tcu.simulated_exec_cycles),
        Row::new("tcu_matmul_32x32x64_simulated_fetch", tcu.simulated_fetch_cycles),
        Row::new("tcu_matmul_program_makespan", tcu.makespan),
        Row::new("hbsm_8port_stream_bytes_per_cycle", format!("{}/{}", stream.bytes, stream.cycles)),
        Row::new("hbsm_8port_stream_min_max", format!("{} {}", stream.min_per_cycle, stream.max_per_cycle)),
        Row::new("hbsm_contention_window_spread", max_window_spread(&order, cfg.hbsm_ports, cfg.hbsm_ports as usize)),
        Row::new("ddr_drb_broadcast_1mib_cycles", drb),
        Row::new("dual_dma_ddr_peak_bytes_per_cycle", dual),
        Row::new("tcu_trace_sha256", tcu.trace_hash),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineBench {
    pub makespan: u64,
    pub serialized_makespan: u64,
    pub concurrent_cycles: u64,
    pub chunks: u32,
    pub tpbs: u32,
    pub trace_hash: String,
    pub outputs_match: bool,
}

impl PipelineBench {
    pub fn ratio(&self) -> f64 {
        self.makespan as f64 / self.serialized_makespan as f64
    }

    pub fn overlap_fraction(&self) -> f64 {
        self.concurrent_cycles as f64 / self.makespan as f64
    }

    pub fn rows(&self) -> Vec<Row> {
        vec![
            Row::new("pipeline_tpbs", self.tpbs),
            Row::new("pipeline_chunks", self.chunks),
            Row::new("pipeline_makespan", self.makespan),
            Row::new("serialized_makespan", self.serialized_makespan),
            Row::new("makespan_ratio", format!("{:.4}", self.ratio())),
            Row::new("cycles_2plus_units_busy", self.concurrent_cycles),
            Row::new("overlap_fraction", format!("{:.4}", self.overlap_fraction())),
            Row::new("outputs_match_reference", self.outputs_match),
            Row::new("pipeline_trace_sha256", &self.trace_hash),
        ]
    }
}

/// The bundled pipeline against the same graph on one TPB with units
/// forced to run one instruction at a time.
pub fn pipeline(cfg: &MachineConfig) -> Result<PipelineBench, String> {
    let g = Graph::parse(PIPELINE_GRAPH).map_err(|e| e.to_string())?;
    let par = verify(&g, cfg, &CompileOptions::default(), 1, RunOptions::default()).map_err(|e| e.to_string())?;
    let serial_opts = CompileOptions { tpbs: Some(1), ..Default::default() };
    let ser = verify(&g, cfg, &serial_opts, 1, RunOptions { serialize: true }).map_err(|e| e.to_string())?;
    for v in [&par, &ser] {
        if let Some(f) = &v.report.fault {
            return Err(f.to_string());
        }
    }
    Ok(PipelineBench {
        makespan: par.report.makespan,
        serialized_makespan: ser.report.makespan,
        concurrent_cycles: par.report.trace.cycles_with_concurrency(2),
        chunks: par.compiled.plan.chunks,
        tpbs: par.compiled.placement.tpbs_used,
        trace_hash: par.report.trace.hash(),
        outputs_match: par.ok() && ser.ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_spread() {
        assert_eq!(max_window_spread(&[0, 1, 0, 1], 2, 2), 0);
        assert_eq!(max_window_spread(&[0, 0, 1, 1], 2, 2), 2);
    }

    #[test]
    fn bundled_graphs_parse() {
        for (name, text) in GRAPHS {
            let g = Graph::parse(text).unwrap();
            assert_eq!(g.name, name);
        }
    }
}
