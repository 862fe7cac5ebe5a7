//! Semantics-preserving graph rewrites.

use std::fmt;
use std::str::FromStr;

use super::ir::{EwStep, Graph, Init, Node, OpKind};
use crate::funits::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// x+0, x*1, x*0 with constant operands.
    Simplify,
    /// transpose(transpose(x)) → x.
    Layout,
    /// Activation into the TCU, elementwise chains into one CVU pipeline.
    Fuse,
    /// Drops nodes with no path to an output.
    Dce,
}

pub const DEFAULT_PASSES: [Pass; 4] = [Pass::Simplify, Pass::Layout, Pass::Fuse, Pass::Dce];

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Simplify => "simplify",
            Pass::Layout => "layout",
            Pass::Fuse => "fuse",
            Pass::Dce => "dce",
        })
    }
}

impl FromStr for Pass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "simplify" => Pass::Simplify,
            "layout" => Pass::Layout,
            "fuse" => Pass::Fuse,
            "dce" => Pass::Dce,
            _ => return Err(format!("unknown pass `{s}` (simplify, layout, fuse, dce)")),
        })
    }
}

pub fn optimize(g: &Graph, passes: &[Pass]) -> Graph {
    let mut g = g.clone();
    for p in passes {
        g = match p {
            Pass::Simplify => simplify(g),
            Pass::Layout => cancel_transposes(g),
            Pass::Fuse => fuse(g),
            Pass::Dce => dce(g),
        };
    }
    g
}

/// Points every use of `from` at `to`. An output keeps its name and becomes
/// an identity reshape of `to`.
fn redirect(g: &mut Graph, from: usize, to: usize) -> bool {
    let is_output = g.outputs.contains(&from);
    if is_output && g.nodes[from].elements() != g.nodes[to].elements() {
        return false;
    }
    for n in &mut g.nodes {
        for i in &mut n.inputs {
            if *i == from {
                *i = to;
            }
        }
    }
    if is_output {
        let n = &mut g.nodes[from];
        n.op = OpKind::Reshape;
        n.inputs = vec![to];
    }
    true
}

fn const_all(n: &Node, x: f64) -> bool {
    matches!(&n.op, OpKind::Constant(init) if init.is_all(x))
}

pub fn simplify(mut g: Graph) -> Graph {
    for i in 0..g.nodes.len() {
        let n = &g.nodes[i];
        if !matches!(n.op, OpKind::Add | OpKind::Mul) {
            continue;
        }
        let (a, b) = (n.inputs[0], n.inputs[1]);
        let is_add = n.op == OpKind::Add;
        let pick = |c: usize, x: usize| (g.nodes[x].dtype == g.nodes[i].dtype).then_some((c, x));
        let identity = if is_add { 0.0 } else { 1.0 };
        let keep = if const_all(&g.nodes[b], identity) {
            pick(b, a)
        } else if const_all(&g.nodes[a], identity) {
            pick(a, b)
        } else {
            None
        };
        if let Some((_, x)) = keep {
            redirect(&mut g, i, x);
            continue;
        }
        if !is_add && (const_all(&g.nodes[a], 0.0) || const_all(&g.nodes[b], 0.0)) && !g.outputs.contains(&i) {
            let n = &mut g.nodes[i];
            n.op = OpKind::Constant(Init::Zeros);
            n.inputs.clear();
        }
    }
    g
}

pub fn cancel_transposes(mut g: Graph) -> Graph {
    for i in 0..g.nodes.len() {
        if g.nodes[i].op != OpKind::Transpose {
            continue;
        }
        let inner = g.nodes[i].inputs[0];
        if g.nodes[inner].op == OpKind::Transpose {
            let x = g.nodes[inner].inputs[0];
            redirect(&mut g, i, x);
        }
    }
    g
}

pub fn fuse(mut g: Graph) -> Graph {
    for i in 0..g.nodes.len() {
        let consumers = g.consumers();
        let sole = |p: usize, g: &Graph| consumers[p] == [i] && !g.outputs.contains(&p);
        // Activation into the TCU output path.
        if g.nodes[i].op == OpKind::Relu {
            let p = g.nodes[i].inputs[0];
            if let OpKind::Matmul { act: Activation::Identity, .. } | OpKind::Conv2d { act: Activation::Identity, .. } =
                g.nodes[p].op
            {
                if sole(p, &g) && g.nodes[p].dtype == g.nodes[i].dtype {
                    let mut op = g.nodes[p].op.clone();
                    match &mut op {
                        OpKind::Matmul { act, .. } | OpKind::Conv2d { act, .. } => *act = Activation::Relu,
                        _ => unreachable!(),
                    }
                    let inputs = g.nodes[p].inputs.clone();
                    let n = &mut g.nodes[i];
                    n.op = op;
                    n.inputs = inputs;
                }
            }
            if g.nodes[i].op != OpKind::Relu {
                continue;
            }
        }
        // Elementwise chains.
        let Some(steps) = g.nodes[i].op.ew_steps() else { continue };
        let mut inputs = g.nodes[i].inputs.clone();
        if matches!(g.nodes[i].op, OpKind::Add | OpKind::Mul)
            && g.nodes[inputs[0]].op.ew_steps().is_none()
            && g.nodes[inputs[1]].op.ew_steps().is_some()
        {
            inputs.swap(0, 1);
        }
        let p = inputs[0];
        let Some(head) = g.nodes[p].op.ew_steps() else { continue };
        if !sole(p, &g) || inputs[1..].contains(&p) {
            continue;
        }
        let mut merged = g.nodes[p].inputs.clone();
        let mut remap = vec![0usize; inputs.len()];
        for (k, &t) in inputs.iter().enumerate().skip(1) {
            remap[k] = match merged.iter().position(|&m| m == t) {
                Some(pos) => pos,
                None => {
                    merged.push(t);
                    merged.len() - 1
                }
            };
        }
        if merged.len() > 2 {
            continue;
        }
        let mut chain = head;
        chain.push(EwStep::Round(g.nodes[p].dtype));
        chain.extend(steps.iter().map(|s| match *s {
            EwStep::Add(k) => EwStep::Add(remap[k]),
            EwStep::Mul(k) => EwStep::Mul(remap[k]),
            other => other,
        }));
        let n = &mut g.nodes[i];
        n.op = OpKind::Fused(chain);
        n.inputs = merged;
    }
    g
}

pub fn dce(g: Graph) -> Graph {
    let mut live = vec![false; g.nodes.len()];
    let mut stack = g.outputs.clone();
    while let Some(i) = stack.pop() {
        if !live[i] {
            live[i] = true;
            stack.extend(&g.nodes[i].inputs);
        }
    }
    let mut index = vec![usize::MAX; g.nodes.len()];
    let mut nodes = Vec::new();
    for (i, n) in g.nodes.into_iter().enumerate() {
        if live[i] {
            index[i] = nodes.len();
            let mut n = n;
            n.inputs = n.inputs.iter().map(|&j| index[j]).collect();
            nodes.push(n);
        }
    }
    Graph { nodes, outputs: g.outputs.iter().map(|&o| index[o]).collect(), ..g }
}
