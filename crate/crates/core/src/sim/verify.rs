//! Compiles a graph, simulates it on seeded inputs and compares the outputs
//! with the reference evaluation of the unoptimized graph.

use std::collections::BTreeMap;

use super::engine::{decode_tensor, encode_tensor, run, RunOptions, RunReport};
use super::oracle::{self, Mismatch, Values};
use crate::compiler::{compile, CompileError, CompileOptions, Compiled, Graph};
use crate::machine::MachineConfig;

#[derive(Debug)]
pub struct Verified {
    pub compiled: Compiled,
    pub report: RunReport,
    pub outputs: Values,
    pub expected: Values,
    pub mismatches: Vec<Mismatch>,
}

impl Verified {
    pub fn ok(&self) -> bool {
        self.report.fault.is_none() && self.mismatches.is_empty()
    }
}

/// Encodes reference values as the raw input bytes the simulator takes.
pub fn encode_inputs(g: &Graph, values: &Values) -> BTreeMap<String, Vec<u8>> {
    g.nodes
        .iter()
        .filter_map(|n| values.get(&n.name).map(|v| (n.name.clone(), encode_tensor(n.dtype, v))))
        .collect()
}

pub fn decode_outputs(g: &Graph, raw: &BTreeMap<String, Vec<u8>>) -> Values {
    g.outputs
        .iter()
        .filter_map(|&o| {
            let n = &g.nodes[o];
            raw.get(&n.name).map(|b| (n.name.clone(), decode_tensor(n.dtype, b)))
        })
        .collect()
}

pub fn verify(
    g: &Graph,
    cfg: &MachineConfig,
    opts: &CompileOptions,
    seed: u64,
    run_opts: RunOptions,
) -> Result<Verified, CompileError> {
    verify_with(g, cfg, opts, oracle::random_inputs(g, seed), run_opts)
}

/// As [`verify`], on caller-supplied input values.
pub fn verify_with(
    g: &Graph,
    cfg: &MachineConfig,
    opts: &CompileOptions,
    inputs: Values,
    run_opts: RunOptions,
) -> Result<Verified, CompileError> {
    let compiled = compile(g, cfg, opts)?;
    let expected = oracle::evaluate(g, &inputs).map_err(CompileError::Internal)?;
    let report = run(&compiled.program, cfg, &encode_inputs(g, &inputs), run_opts);
    let outputs = decode_outputs(g, &report.outputs);
    let mismatches = if report.fault.is_none() { oracle::compare(g, &outputs, &expected) } else { Vec::new() };
    Ok(Verified { compiled, report, outputs, expected, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(text: &str) -> Verified {
        let g = Graph::parse(text).unwrap();
        let v = verify(&g, &MachineConfig::default(), &CompileOptions::default(), 1, RunOptions::default()).unwrap();
        assert!(v.report.fault.is_none(), "{:?}", v.report.fault);
        assert!(v.mismatches.is_empty(), "{:?}", v.mismatches);
        v
    }

    #[test]
    fn int_matmul_relu() {
        check("input x dtype=i8 shape=32x32\nconst w dtype=i8 shape=32x64 init=seed:3\nmatmul y x w dtype=i8 shift=3\nrelu r y\noutput r\n");
    }

    #[test]
    fn chunked_two_stage_chain() {
        let v = check(
            "input x dtype=f32 shape=64x16\nconst w dtype=f32 shape=16x16 init=seed:2\ninput b dtype=f32 shape=64x16\n\
             relu r x\nadd s r b\nmul m s s\noutput m\nschedule tpbs=2 chunks=4\n",
        );
        assert_eq!(v.compiled.plan.chunks, 4);
    }

    #[test]
    fn softmax_layernorm_f16() {
        check(
            "input x dtype=f16 shape=32x64\nconst w dtype=f16 shape=64x64 init=seed:5\nmatmul y x w dtype=f16\n\
             softmax s y\nlayernorm l s dtype=f32\noutput l\nschedule tpbs=3 chunks=4\n",
        );
    }

    #[test]
    fn conv_pool_transpose_reshape() {
        check(
            "input x dtype=i8 shape=4x8x8x4\nconst w dtype=i8 shape=3x3x4x8 init=seed:9\n\
             conv2d c x w pad=1 shift=2 dtype=i8 act=relu\npool p c kind=max k=2\nreshape f p shape=4x128\n\
             transpose t f\noutput t\nschedule tpbs=4 chunks=2\n",
        );
    }

    #[test]
    fn multiple_outputs_and_fanout() {
        check(
            "input x dtype=f32 shape=16x8\nrelu a x\nadd b a x\nmul c a b\noutput b\noutput c\nschedule tpbs=3 chunks=4\n",
        );
    }
}
