//! Graph IR and its text form.
//!
//! One node per line, `op name inputs... key=value...`, defined before use:
//!
//! ```text
//! graph mlp
//! input x dtype=i8 shape=64x32
//! const w dtype=i8 shape=32x64 init=seed:7
//! matmul y x w shift=6 dtype=i8
//! relu r y
//! output r
//! schedule tpbs=2 chunks=4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CompileError;
use crate::funits::Activation;
use crate::machine::DataType;
use crate::text::{join, parse_list, Line, Record};

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Seed(u64),
    Zeros,
    Ones,
    Values(Vec<f64>),
}

impl Init {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(match s {
            "zeros" => Init::Zeros,
            "ones" => Init::Ones,
            _ => match s.split_once(':') {
                Some(("seed", n)) => Init::Seed(n.parse().map_err(|_| format!("bad seed `{n}`"))?),
                Some(("values", v)) => Init::Values(parse_list(v, ',')?),
                _ => return Err(format!("bad init `{s}`")),
            },
        })
    }

    /// Element values, already representable in `dtype`.
    pub fn values(&self, dtype: DataType, n: usize) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Values(v) => (0..n).map(|i| dtype.quantize(v[i % v.len()])).collect(),
            Init::Seed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n)
                    .map(|_| match dtype {
                        DataType::I8 | DataType::I32 => f64::from(rng.gen_range(-8i32..=8)),
                        DataType::U8 => f64::from(rng.gen_range(0u32..=8)),
                        DataType::F16 | DataType::F32 => dtype.quantize(rng.gen_range(-1.0..1.0)),
                    })
                    .collect()
            }
        }
    }

    fn to_text(&self) -> String {
        match self {
            Init::Zeros => "zeros".into(),
            Init::Ones => "ones".into(),
            Init::Seed(s) => format!("seed:{s}"),
            Init::Values(v) => format!("values:{}", join(v, ",")),
        }
    }

    pub fn is_all(&self, x: f64) -> bool {
        match self {
            Init::Zeros => x == 0.0,
            Init::Ones => x == 1.0,
            Init::Values(v) => !v.is_empty() && v.iter().all(|&e| e == x),
            Init::Seed(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// One step of a fused elementwise chain. Operands index the node's inputs;
/// the chain starts from input 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EwStep {
    Add(usize),
    Mul(usize),
    Relu,
    /// Rounds the running value to a dtype, as an unfused edge would.
    Round(DataType),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Constant(Init),
    Matmul { shift: u8, act: Activation },
    Conv2d { stride: u32, pad: u32, shift: u8, act: Activation },
    Add,
    Mul,
    Relu,
    Softmax,
    Layernorm { eps: f32 },
    Pool { kind: PoolKind, k: u32, stride: u32 },
    Transpose,
    Reshape,
    Fused(Vec<EwStep>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Constant(_) => "const",
            OpKind::Matmul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Layernorm { .. } => "layernorm",
            OpKind::Pool { .. } => "pool",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Fused(_) => "fused",
        }
    }

    pub fn is_source(&self) -> bool {
        matches!(self, OpKind::Input | OpKind::Constant(_))
    }

    /// Elementwise chain equivalent, for add/mul/relu/fused nodes.
    pub fn ew_steps(&self) -> Option<Vec<EwStep>> {
        match self {
            OpKind::Add => Some(vec![EwStep::Add(1)]),
            OpKind::Mul => Some(vec![EwStep::Mul(1)]),
            OpKind::Relu => Some(vec![EwStep::Relu]),
            OpKind::Fused(s) => Some(s.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<usize>,
    pub dtype: DataType,
    pub shape: Vec<usize>,
}

impl Node {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        (self.elements() * self.dtype.byte_width()) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Schedule {
    pub tpbs: Option<u32>,
    pub chunks: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub name: String,
    pub nodes: Vec<Node>,
    pub outputs: Vec<usize>,
    pub schedule: Schedule,
}

fn parse_act(s: &str) -> Result<Activation, String> {
    Ok(match s {
        "none" => Activation::Identity,
        "relu" => Activation::Relu,
        "relu6" => Activation::Relu6,
        _ => return Err(format!("unknown activation `{s}`")),
    })
}

fn act_name(a: Activation) -> String {
    match a {
        Activation::Identity => "none".into(),
        Activation::Relu => "relu".into(),
        Activation::Relu6 => "relu6".into(),
        Activation::Clamp(lo, hi) => format!("clamp:{lo}:{hi}"),
    }
}

fn parse_steps(s: &str) -> Result<Vec<EwStep>, String> {
    s.split(',')
        .map(|t| {
            Ok(match t.split_once(':') {
                None if t == "relu" => EwStep::Relu,
                Some(("add", i)) => EwStep::Add(i.parse().map_err(|_| format!("bad step `{t}`"))?),
                Some(("mul", i)) => EwStep::Mul(i.parse().map_err(|_| format!("bad step `{t}`"))?),
                Some(("round", d)) => EwStep::Round(d.parse().map_err(|_| format!("bad step `{t}`"))?),
                _ => return Err(format!("bad step `{t}`")),
            })
        })
        .collect()
}

fn steps_text(steps: &[EwStep]) -> String {
    let v: Vec<String> = steps
        .iter()
        .map(|s| match s {
            EwStep::Add(i) => format!("add:{i}"),
            EwStep::Mul(i) => format!("mul:{i}"),
            EwStep::Relu => "relu".into(),
            EwStep::Round(d) => format!("round:{d}"),
        })
        .collect();
    v.join(",")
}

fn arity(op: &OpKind) -> Option<usize> {
    Some(match op {
        OpKind::Input | OpKind::Constant(_) => 0,
        OpKind::Matmul { .. } | OpKind::Conv2d { .. } | OpKind::Add | OpKind::Mul => 2,
        OpKind::Fused(_) => return None,
        _ => 1,
    })
}

impl Graph {
    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Consumers of every node, in node order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                if !out[j].contains(&i) {
                    out[j].push(i);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Graph, CompileError> {
        let mut g = Graph { name: "graph".into(), ..Default::default() };
        let mut pending_reshape: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let Some(r) = Record::parse(raw) else { continue };
            let err = |msg: String| CompileError::Parse { line, msg };
            match r.kind.as_str() {
                "graph" => g.name = r.words.first().cloned().unwrap_or_default(),
                "output" => {
                    for w in &r.words {
                        let i = g.find(w).ok_or_else(|| err(format!("unknown tensor `{w}`")))?;
                        g.outputs.push(i);
                    }
                }
                "schedule" => {
                    g.schedule.tpbs = r.parse_opt("tpbs").map_err(err)?;
                    g.schedule.chunks = r.parse_opt("chunks").map_err(err)?;
                }
                kind => {
                    let name = r.words.first().ok_or_else(|| err("missing node name".into()))?.clone();
                    if g.find(&name).is_some() {
                        return Err(err(format!("tensor `{name}` defined twice")));
                    }
                    let inputs = r.words[1..]
                        .iter()
                        .map(|w| g.find(w).ok_or_else(|| err(format!("unknown tensor `{w}`"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    let op = match kind {
                        "input" => OpKind::Input,
                        "const" => OpKind::Constant(Init::parse(r.get("init").unwrap_or("zeros")).map_err(err)?),
                        "matmul" => OpKind::Matmul {
                            shift: r.parse_opt("shift").map_err(err)?.unwrap_or(0),
                            act: parse_act(r.get("act").unwrap_or("none")).map_err(err)?,
                        },
                        "conv2d" => OpKind::Conv2d {
                            stride: r.parse_opt("stride").map_err(err)?.unwrap_or(1),
                            pad: r.parse_opt("pad").map_err(err)?.unwrap_or(0),
                            shift: r.parse_opt("shift").map_err(err)?.unwrap_or(0),
                            act: parse_act(r.get("act").unwrap_or("none")).map_err(err)?,
                        },
                        "add" => OpKind::Add,
                        "mul" => OpKind::Mul,
                        "relu" => OpKind::Relu,
                        "softmax" => OpKind::Softmax,
                        "layernorm" => OpKind::Layernorm { eps: r.parse_opt("eps").map_err(err)?.unwrap_or(1e-5) },
                        "pool" => {
                            let k: u32 = r.parse_req("k").map_err(err)?;
                            let kind = match r.get("kind").unwrap_or("max") {
                                "max" => PoolKind::Max,
                                "avg" => PoolKind::Avg,
                                o => return Err(err(format!("unknown pool kind `{o}`"))),
                            };
                            if r.parse_opt::<u32>("pad").map_err(err)?.unwrap_or(0) != 0 {
                                return Err(CompileError::UnsupportedOp(format!("{name}: padded pooling")));
                            }
                            OpKind::Pool { kind, k, stride: r.parse_opt("stride").map_err(err)?.unwrap_or(k) }
                        }
                        "transpose" => OpKind::Transpose,
                        "reshape" => {
                            pending_reshape.insert(g.nodes.len(), parse_list(r.req("shape").map_err(err)?, 'x').map_err(err)?);
                            OpKind::Reshape
                        }
                        "fused" => OpKind::Fused(parse_steps(r.req("steps").map_err(err)?).map_err(err)?),
                        other => return Err(CompileError::UnsupportedOp(other.to_string())),
                    };
                    if let Some(a) = arity(&op) {
                        if inputs.len() != a {
                            return Err(err(format!("`{kind}` takes {a} inputs, got {}", inputs.len())));
                        }
                    }
                    let dtype: Option<DataType> = r.parse_opt("dtype").map_err(err)?;
                    let shape: Option<Vec<usize>> =
                        r.get("shape").filter(|_| op.is_source()).map(|s| parse_list(s, 'x')).transpose().map_err(err)?;
                    let idx = g.nodes.len();
                    let node = g.infer(idx, &name, op, inputs, dtype, shape, pending_reshape.get(&idx).cloned())?;
                    g.nodes.push(node);
                }
            }
        }
        g.validate()?;
        Ok(g)
    }

    /// Shape and dtype inference for one node whose inputs already exist.
    #[allow(clippy::too_many_arguments)]
    fn infer(
        &self,
        _idx: usize,
        name: &str,
        op: OpKind,
        inputs: Vec<usize>,
        dtype: Option<DataType>,
        shape: Option<Vec<usize>>,
        reshape_to: Option<Vec<usize>>,
    ) -> Result<Node, CompileError> {
        let mismatch = |m: String| CompileError::ShapeMismatch(format!("{name}: {m}"));
        let unsupported = |m: String| CompileError::UnsupportedOp(format!("{name}: {m}"));
        let inp = |i: usize| &self.nodes[inputs[i]];
        let (dtype, shape) = match &op {
            OpKind::Input | OpKind::Constant(_) => {
                let s = shape.ok_or_else(|| mismatch("missing shape".into()))?;
                if s.is_empty() || s.contains(&0) {
                    return Err(mismatch(format!("bad shape {s:?}")));
                }
                if let OpKind::Constant(Init::Values(v)) = &op {
                    if v.is_empty() {
                        return Err(mismatch("empty value list".into()));
                    }
                }
                (dtype.ok_or_else(|| mismatch("missing dtype".into()))?, s)
            }
            OpKind::Matmul { shift, .. } => {
                let (a, b) = (inp(0), inp(1));
                if !matches!(b.op, OpKind::Constant(_)) {
                    return Err(unsupported("the second matmul operand must be a constant".into()));
                }
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(mismatch(format!("{:?} x {:?}", a.shape, b.shape)));
                }
                let out = tcu_out_dtype(a.dtype, b.dtype, *shift, dtype).map_err(unsupported)?;
                (out, vec![a.shape[0], b.shape[1]])
            }
            OpKind::Conv2d { stride, pad, shift, .. } => {
                let (x, w) = (inp(0), inp(1));
                if !matches!(w.op, OpKind::Constant(_)) {
                    return Err(unsupported("conv2d weights must be a constant".into()));
                }
                if x.shape.len() != 4 || w.shape.len() != 4 || x.shape[3] != w.shape[2] {
                    return Err(mismatch(format!("NHWC {:?} with weights {:?}", x.shape, w.shape)));
                }
                let (kh, kw) = (w.shape[0], w.shape[1]);
                let (s, p) = (*stride as usize, *pad as usize);
                if s == 0 || p >= kh || p >= kw || x.shape[1] + 2 * p < kh || x.shape[2] + 2 * p < kw {
                    return Err(mismatch("kernel, stride or padding does not fit the input".into()));
                }
                let out = tcu_out_dtype(x.dtype, w.dtype, *shift, dtype).map_err(unsupported)?;
                let oh = (x.shape[1] + 2 * p - kh) / s + 1;
                let ow = (x.shape[2] + 2 * p - kw) / s + 1;
                (out, vec![x.shape[0], oh, ow, w.shape[3]])
            }
            OpKind::Add | OpKind::Mul => {
                if inp(0).shape != inp(1).shape {
                    return Err(mismatch(format!("{:?} vs {:?}", inp(0).shape, inp(1).shape)));
                }
                (dtype.unwrap_or(inp(0).dtype), inp(0).shape.clone())
            }
            OpKind::Fused(steps) => {
                if inputs.is_empty() || inputs.len() > 2 {
                    return Err(mismatch("fused chains take one or two inputs".into()));
                }
                for s in steps {
                    if let EwStep::Add(i) | EwStep::Mul(i) = s {
                        if *i >= inputs.len() || inp(*i).shape != inp(0).shape {
                            return Err(mismatch("bad fused operand".into()));
                        }
                    }
                }
                (dtype.unwrap_or(inp(0).dtype), inp(0).shape.clone())
            }
            OpKind::Relu => (dtype.unwrap_or(inp(0).dtype), inp(0).shape.clone()),
            OpKind::Softmax | OpKind::Layernorm { .. } => {
                let d = dtype.unwrap_or(inp(0).dtype);
                if !d.is_float() || !inp(0).dtype.is_float() {
                    return Err(unsupported(format!("{} needs float tensors", op.name())));
                }
                (d, inp(0).shape.clone())
            }
            OpKind::Pool { k, stride, .. } => {
                let x = inp(0);
                let (k, s) = (*k as usize, *stride as usize);
                if x.shape.len() != 4 || k == 0 || s == 0 || x.shape[1] < k || x.shape[2] < k {
                    return Err(mismatch(format!("pool k={k} over {:?}", x.shape)));
                }
                let oh = (x.shape[1] - k) / s + 1;
                let ow = (x.shape[2] - k) / s + 1;
                (x.dtype, vec![x.shape[0], oh, ow, x.shape[3]])
            }
            OpKind::Transpose => {
                let x = inp(0);
                if x.shape.len() != 2 {
                    return Err(unsupported("transpose is 2-D only".into()));
                }
                (x.dtype, vec![x.shape[1], x.shape[0]])
            }
            OpKind::Reshape => {
                let s = reshape_to.ok_or_else(|| mismatch("missing shape".into()))?;
                if s.iter().product::<usize>() != inp(0).elements() || s.contains(&0) {
                    return Err(mismatch(format!("cannot reshape {:?} to {s:?}", inp(0).shape)));
                }
                (inp(0).dtype, s)
            }
        };
        Ok(Node { name: name.to_string(), op, inputs, dtype, shape })
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        if self.outputs.is_empty() {
            return Err(CompileError::EmptyGraph);
        }
        for &o in &self.outputs {
            if self.nodes[o].op.is_source() {
                return Err(CompileError::UnsupportedOp(format!("output `{}` is not computed", self.nodes[o].name)));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(CompileError::ShapeMismatch(format!("{}: inputs must be defined first", n.name)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "graph {}", self.name);
        for n in &self.nodes {
            let mut l = Line::new(n.op.name()).word(&n.name);
            for &i in &n.inputs {
                l = l.word(&self.nodes[i].name);
            }
            l = l.kv("dtype", n.dtype);
            l = match &n.op {
                OpKind::Input => l.kv("shape", join(&n.shape, "x")),
                OpKind::Constant(init) => l.kv("shape", join(&n.shape, "x")).kv("init", init.to_text()),
                OpKind::Matmul { shift, act } => l.kv("shift", shift).kv("act", act_name(*act)),
                OpKind::Conv2d { stride, pad, shift, act } => {
                    l.kv("stride", stride).kv("pad", pad).kv("shift", shift).kv("act", act_name(*act))
                }
                OpKind::Layernorm { eps } => l.kv("eps", eps),
                OpKind::Pool { kind, k, stride } => {
                    l.kv("kind", if *kind == PoolKind::Max { "max" } else { "avg" }).kv("k", k).kv("stride", stride)
                }
                OpKind::Reshape => l.kv("shape", join(&n.shape, "x")),
                OpKind::Fused(steps) => l.kv("steps", steps_text(steps)),
                _ => l,
            };
            let _ = writeln!(s, "{}", l.finish());
        }
        let names: Vec<&str> = self.outputs.iter().map(|&o| self.nodes[o].name.as_str()).collect();
        let _ = writeln!(s, "output {}", names.join(" "));
        let mut l = Line::new("schedule");
        if let Some(t) = self.schedule.tpbs {
            l = l.kv("tpbs", t);
        }
        if let Some(c) = self.schedule.chunks {
            l = l.kv("chunks", c);
        }
        let _ = writeln!(s, "{}", l.finish());
        s
    }
}

fn tcu_out_dtype(a: DataType, w: DataType, shift: u8, requested: Option<DataType>) -> Result<DataType, String> {
    let int = matches!(a, DataType::I8 | DataType::U8);
    if a != w || !(int || a == DataType::F16) {
        return Err(format!("TCU takes i8/u8 or f16 operands, got {a} and {w}"));
    }
    let out = requested.unwrap_or(if int { DataType::I32 } else { DataType::F32 });
    let ok = if int { matches!(out, DataType::I32 | DataType::I8 | DataType::U8) } else { out.is_float() };
    if !ok || (!int && shift != 0) {
        return Err(format!("cannot produce {out} from {a} operands"));
    }
    Ok(out)
}
