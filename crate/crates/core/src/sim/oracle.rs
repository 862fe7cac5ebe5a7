//! Reference evaluation of operator graphs in f64, independent of the unit
//! models, and the comparison rules used to check simulated outputs.
//!
//! Every node result is narrowed to the node's dtype, as a stored tensor
//! would be. Integer arithmetic is exact; float arithmetic is f64.

use std::collections::BTreeMap;

use crate::compiler::ir::{EwStep, Graph, Init, OpKind, PoolKind};
use crate::funits::Activation;
use crate::machine::DataType;

pub type Values = BTreeMap<String, Vec<f64>>;

/// Evaluates every node and returns the values of the graph outputs.
pub fn evaluate(g: &Graph, inputs: &Values) -> Result<Values, String> {
    let all = evaluate_all(g, inputs)?;
    Ok(g.outputs.iter().map(|&o| (g.nodes[o].name.clone(), all[o].clone())).collect())
}

pub fn evaluate_all(g: &Graph, inputs: &Values) -> Result<Vec<Vec<f64>>, String> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let x = |k: usize| &vals[node.inputs[k]];
        let shape = |k: usize| &g.nodes[node.inputs[k]].shape;
        let raw = match &node.op {
            OpKind::Input => {
                let v = inputs.get(&node.name).ok_or_else(|| format!("missing input `{}`", node.name))?;
                if v.len() != node.elements() {
                    return Err(format!("input `{}`: {} values for {} elements", node.name, v.len(), node.elements()));
                }
                v.clone()
            }
            OpKind::Constant(init) => init.values(node.dtype, node.elements()),
            OpKind::Matmul { shift, act } => {
                let (m, k, n) = (shape(0)[0], shape(0)[1], shape(1)[1]);
                let (a, w) = (x(0), x(1));
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let acc: f64 = (0..k).map(|p| a[i * k + p] * w[p * n + j]).sum();
                        out[i * n + j] = tcu_finish(acc, *shift, *act, node.dtype);
                    }
                }
                out
            }
            OpKind::Conv2d { stride, pad, shift, act } => {
                let xs = shape(0);
                let ws = shape(1);
                let (h, w, cin) = (xs[1] as i64, xs[2] as i64, xs[3]);
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let (s, p) = (*stride as i64, *pad as i64);
                let [b, oh, ow, _] = node.shape[..] else { unreachable!() };
                let (a, wt) = (x(0), x(1));
                let mut out = Vec::with_capacity(node.elements());
                for bi in 0..b {
                    for oy in 0..oh as i64 {
                        for ox in 0..ow as i64 {
                            for co in 0..cout {
                                let mut acc = 0.0;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let (iy, ix) = (oy * s + ky as i64 - p, ox * s + kx as i64 - p);
                                        if iy < 0 || iy >= h || ix < 0 || ix >= w {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            let av = a[((bi as i64 * h + iy) * w + ix) as usize * cin + ci];
                                            acc += av * wt[((ky * kw + kx) * cin + ci) * cout + co];
                                        }
                                    }
                                }
                                out.push(tcu_finish(acc, *shift, *act, node.dtype));
                            }
                        }
                    }
                }
                out
            }
            OpKind::Add => x(0).iter().zip(x(1)).map(|(a, b)| a + b).collect(),
            OpKind::Mul => x(0).iter().zip(x(1)).map(|(a, b)| a * b).collect(),
            OpKind::Relu => x(0).iter().map(|a| a.max(0.0)).collect(),
            OpKind::Fused(steps) => (0..node.elements())
                .map(|i| {
                    steps.iter().fold(x(0)[i], |v, s| match *s {
                        EwStep::Add(k) => v + x(k)[i],
                        EwStep::Mul(k) => v * x(k)[i],
                        EwStep::Relu => v.max(0.0),
                        EwStep::Round(d) => d.quantize(v),
                    })
                })
                .collect(),
            OpKind::Softmax => rows(x(0), node.shape[node.shape.len() - 1], |r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }),
            OpKind::Layernorm { eps } => rows(x(0), node.shape[node.shape.len() - 1], |r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let d = (var + f64::from(*eps)).sqrt();
                r.iter().map(|v| (v - mean) / d).collect()
            }),
            OpKind::Pool { kind, k, stride } => {
                let xs = shape(0);
                let (h, w, c) = (xs[1], xs[2], xs[3]);
                let (k, s) = (*k as usize, *stride as usize);
                let [b, oh, ow, _] = node.shape[..] else { unreachable!() };
                let a = x(0);
                let mut out = Vec::with_capacity(node.elements());
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ci in 0..c {
                                let win = (0..k * k).map(|t| a[((bi * h + oy * s + t / k) * w + ox * s + t % k) * c + ci]);
                                out.push(match kind {
                                    PoolKind::Max => win.fold(f64::NEG_INFINITY, f64::max),
                                    PoolKind::Avg => win.sum::<f64>() / (k * k) as f64,
                                });
                            }
                        }
                    }
                }
                out
            }
            OpKind::Transpose => {
                let (r, c) = (shape(0)[0], shape(0)[1]);
                (0..r * c).map(|i| x(0)[(i % r) * c + i / r]).collect()
            }
            OpKind::Reshape => x(0).clone(),
        };
        vals.push(raw.into_iter().map(|v| node.dtype.quantize(v)).collect());
    }
    Ok(vals)
}

fn rows(x: &[f64], len: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks(len).flat_map(f).collect()
}

/// Activation, then (integer accumulators) a round-half-even right shift
/// and saturating narrowing.
fn tcu_finish(acc: f64, shift: u8, act: Activation, out: DataType) -> f64 {
    let y = act.apply(acc);
    if out.is_float() {
        return y;
    }
    let y = y.clamp(f64::from(i32::MIN), f64::from(i32::MAX));
    let d = f64::from(1u32 << shift);
    let q = y / d;
    // Exact for |y| < 2^53: ties are decided on the exact quotient.
    q.round_ties_even()
}

/// Deterministic input values for every graph input.
pub fn random_inputs(g: &Graph, seed: u64) -> Values {
    g.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.op == OpKind::Input)
        .map(|(i, n)| (n.name.clone(), Init::Seed(seed.wrapping_mul(1000).wrapping_add(i as u64)).values(n.dtype, n.elements())))
        .collect()
}

/// Normwise error `max|a-b| / max|ref|`; absolute when the reference is zero.
pub fn normwise_error(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Tolerance for outputs of `dtype`, given whether any f16 tensor feeds
/// the path: integers are exact, f32 paths 1e-5, f16 paths 1e-3.
pub fn tolerance(dtype: DataType, f16_path: bool) -> f64 {
    match dtype {
        DataType::I8 | DataType::U8 | DataType::I32 => 0.0,
        _ if f16_path => 1e-3,
        DataType::F16 => 1e-3,
        DataType::F32 => 1e-5,
    }
}

/// Whether any ancestor of node `n` (or `n` itself) is an f16 tensor.
pub fn has_f16_ancestor(g: &Graph, n: usize) -> bool {
    let mut stack = vec![n];
    let mut seen = vec![false; g.nodes.len()];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        if g.nodes[i].dtype == DataType::F16 {
            return true;
        }
        stack.extend(&g.nodes[i].inputs);
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub output: String,
    pub error: f64,
    pub tolerance: f64,
}

/// Checks simulated outputs against the reference. Integer outputs must
/// match exactly.
pub fn compare(g: &Graph, got: &Values, want: &Values) -> Vec<Mismatch> {
    let mut bad = Vec::new();
    for &o in &g.outputs {
        let node = &g.nodes[o];
        let tol = tolerance(node.dtype, has_f16_ancestor(g, o));
        let empty = Vec::new();
        let err = normwise_error(got.get(&node.name).unwrap_or(&empty), &want[&node.name]);
        if err > tol || err.is_nan() {
            bad.push(Mismatch { output: node.name.clone(), error: err, tolerance: tol });
        }
    }
    bad
}
