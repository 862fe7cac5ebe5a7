//! Producer/consumer pipelines under the counter protocol.

mod common;

use common::{circular_wait, run_pipeline, sync_pipeline, Faults};
use npusim::machine::MachineConfig;
use npusim::sim::{run, RunOptions, SimError};
use proptest::prelude::*;
use std::collections::BTreeMap;

#[test]
fn random_pipelines_match_reference() {
    let cfg = MachineConfig::default();
    for seed in 0..200 {
        let p = sync_pipeline(&cfg, seed, Faults::default());
        let r = run_pipeline(&cfg, &p);
        assert!(r.fault.is_none(), "seed {seed}: {:?}", r.fault);
        assert_eq!(r.outputs["y"], p.expected, "seed {seed}: stages {:?}", p.stages);
        r.trace.check_well_formed().unwrap();
    }
}

#[test]
fn dropped_monitor_is_a_race() {
    let cfg = MachineConfig::default();
    for seed in 0..200 {
        let p = sync_pipeline(&cfg, seed, Faults { drop_monitor: true });
        let r = run_pipeline(&cfg, &p);
        assert!(matches!(r.fault, Some(SimError::RaceDetected { .. })), "seed {seed}: {:?}", r.fault);
    }
}

#[test]
fn circular_wait_reports_the_cycle() {
    let r = run(&circular_wait(), &MachineConfig::default(), &BTreeMap::new(), RunOptions::default());
    match r.fault {
        Some(SimError::DeadlockDetected { wait_cycle, .. }) => assert!(wait_cycle.len() >= 2, "{wait_cycle:?}"),
        other => panic!("expected a deadlock, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_deterministic(seed in 0u64..10_000) {
        let cfg = MachineConfig::default();
        let p = sync_pipeline(&cfg, seed, Faults::default());
        let a = run_pipeline(&cfg, &p);
        let b = run_pipeline(&cfg, &p);
        prop_assert_eq!(a.trace.hash(), b.trace.hash());
        prop_assert_eq!(a.outputs, b.outputs);
        prop_assert_eq!(a.makespan, b.makespan);
    }

    #[test]
    fn serialized_runs_agree(seed in 0u64..10_000) {
        let cfg = MachineConfig::default();
        let p = sync_pipeline(&cfg, seed, Faults::default());
        let r = run(&p.program, &cfg, &BTreeMap::from([("x".to_string(), p.input.clone())]), RunOptions { serialize: true });
        prop_assert!(r.fault.is_none(), "{:?}", r.fault);
        prop_assert_eq!(&r.outputs["y"], &p.expected);
        prop_assert!(r.trace.check_well_formed().is_ok());
    }
}
