//! Trace files for a compiled single-matmul program.

use npusim::compiler::{compile, CompileOptions, Graph};
use npusim::machine::MachineConfig;
use npusim::sim::oracle;
use npusim::sim::trace::TrackClass;
use npusim::sim::verify::encode_inputs;
use npusim::sim::{run, RunOptions, RunReport};

const MATMUL: &str = "graph tcu\ninput x dtype=i8 shape=32x32\nconst w dtype=i8 shape=32x64 init=seed:1\nmatmul y x w\noutput y\n";

fn single_matmul() -> RunReport {
    let cfg = MachineConfig::default();
    let g = Graph::parse(MATMUL).unwrap();
    let opts = CompileOptions { tpbs: Some(1), chunks: Some(1), ..Default::default() };
    let c = compile(&g, &cfg, &opts).unwrap();
    run(&c.program, &cfg, &encode_inputs(&g, &oracle::random_inputs(&g, 1)), RunOptions::default())
}

#[test]
fn one_tcu_event_plus_dma_events() {
    let r = single_matmul();
    assert!(r.fault.is_none(), "{:?}", r.fault);
    let tcu: Vec<_> =
        r.trace.events.iter().filter(|e| e.track.class == TrackClass::Unit && e.track.name.ends_with("tcu")).collect();
    assert_eq!(tcu.iter().filter(|e| e.name == "matmul").count(), 1);
    let dma = r.trace.events.iter().filter(|e| e.track.class == TrackClass::Dma).count() as u64;
    assert_eq!(dma, r.stats.dma_descriptors);
    assert!(dma >= 2, "input and weights arrive by DMA");
    r.trace.check_well_formed().unwrap();
}

#[test]
fn file_matches_frozen_hash() {
    let r = single_matmul();
    // Frozen from a reviewed run; any timing or format change shows here.
    assert_eq!(r.trace.hash(), "71c703f7df4d25922433f882bc6a77eeb6785a0753da770fedc439bc75133bde");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    r.trace.write(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["summary"]["makespan_cycles"], 369);
    let busy = v["summary"]["busy_fraction"].as_object().unwrap();
    assert!(busy.values().all(|f| (0.0..=1.0).contains(&f.as_f64().unwrap())));
}
