//! Configurable Vector Unit: a linear chain of single-function operators.
//!
//! The input stream is cut into segments (`segment == 0` means one segment
//! spanning the whole stream). Every stage maps the current segment to a
//! vector: elementwise stages keep its length, reductions produce one value,
//! `broadcast_scalar` widens a single value back to the segment length.
//! Binary stages broadcast a length-1 operand. A stage can read stream A,
//! stream B, an immediate scalar register, the previous stage, or the
//! buffered output of any earlier stage. All arithmetic is f32.

use std::fmt;
use std::str::FromStr;

use super::{ceil_div, UnitError};
use crate::machine::{DataType, MachineConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CvuOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Exp2,
    Reciprocal,
    Sqrt,
    Abs,
    ScaleBias { scale: f32, bias: f32 },
    Convert(DataType),
    ReduceMax,
    ReduceSum,
    BroadcastScalar,
    /// `a >= threshold ? a : b`
    SelectGe { threshold: f32 },
}

impl CvuOp {
    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            CvuOp::Add
                | CvuOp::Sub
                | CvuOp::Mul
                | CvuOp::Div
                | CvuOp::Max
                | CvuOp::Min
                | CvuOp::SelectGe { .. }
        )
    }

    pub fn is_reduction(&self) -> bool {
        matches!(self, CvuOp::ReduceMax | CvuOp::ReduceSum)
    }

    fn unary(&self, x: f32) -> f32 {
        match *self {
            CvuOp::Exp2 => x.exp2(),
            CvuOp::Reciprocal => 1.0 / x,
            CvuOp::Sqrt => x.sqrt(),
            CvuOp::Abs => x.abs(),
            CvuOp::ScaleBias { scale, bias } => x * scale + bias,
            CvuOp::Convert(dt) => dt.quantize(f64::from(x)) as f32,
            _ => unreachable!("not an elementwise unary op"),
        }
    }

    fn binary(&self, a: f32, b: f32) -> f32 {
        match *self {
            CvuOp::Add => a + b,
            CvuOp::Sub => a - b,
            CvuOp::Mul => a * b,
            CvuOp::Div => a / b,
            CvuOp::Max => a.max(b),
            CvuOp::Min => a.min(b),
            CvuOp::SelectGe { threshold } => {
                if a >= threshold {
                    a
                } else {
                    b
                }
            }
            _ => unreachable!("not a binary op"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tap {
    A,
    B,
    Prev,
    Stage(u8),
    Imm(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvuStage {
    pub op: CvuOp,
    pub a: Tap,
    pub b: Option<Tap>,
}

impl CvuStage {
    pub fn unary(op: CvuOp, a: Tap) -> Self {
        Self { op, a, b: None }
    }

    pub fn binary(op: CvuOp, a: Tap, b: Tap) -> Self {
        Self { op, a, b: Some(b) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvuPipeline {
    pub stages: Vec<CvuStage>,
    pub segment: u32,
}

impl CvuPipeline {
    pub fn new(stages: Vec<CvuStage>, segment: u32) -> Result<Self, UnitError> {
        let p = Self { stages, segment };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), UnitError> {
        let bad = |m: String| Err(UnitError::InvalidPipeline(m));
        if self.stages.is_empty() {
            return bad("empty pipeline".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.op.is_binary() != s.b.is_some() {
                return bad(format!("stage {i}: wrong arity for {:?}", s.op));
            }
            for tap in std::iter::once(s.a).chain(s.b) {
                match tap {
                    Tap::Prev if i == 0 => return bad("stage 0 reads Prev".into()),
                    Tap::Stage(j) if j as usize >= i => {
                        return bad(format!("stage {i} reads later stage {j}"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn uses_b(&self) -> bool {
        self.stages.iter().any(|s| s.a == Tap::B || s.b == Some(Tap::B))
    }

    /// Passes over each segment: one, plus one per reduction whose result
    /// feeds a later elementwise stage through an intermediate buffer.
    pub fn passes(&self) -> u64 {
        let n = self.stages.len();
        1 + self.stages[..n - 1].iter().filter(|s| s.op.is_reduction()).count() as u64
    }

    fn num_segments(&self, len: usize) -> Result<usize, UnitError> {
        if self.segment == 0 {
            return Ok(1);
        }
        let s = self.segment as usize;
        if !len.is_multiple_of(s) {
            return Err(UnitError::InvalidPipeline(format!(
                "stream length {len} not a multiple of segment {s}"
            )));
        }
        Ok(len / s)
    }

    /// Runs the chain. `b` may hold either the full stream length or one
    /// value per segment. The result is rounded to `out_dtype`.
    pub fn compute(
        &self,
        a: &[f32],
        b: Option<&[f32]>,
        out_dtype: DataType,
        fault_on_nonfinite: bool,
    ) -> Result<Vec<f32>, UnitError> {
        self.validate()?;
        if self.uses_b() && b.is_none() {
            return Err(UnitError::InvalidPipeline("stream B is not bound".into()));
        }
        let nseg = self.num_segments(a.len())?;
        let seg_len = a.len() / nseg.max(1);
        let b_per_seg = match b {
            Some(b) if b.len() == a.len() => seg_len,
            Some(b) if b.len() == nseg => 1,
            Some(b) => {
                return Err(UnitError::InvalidPipeline(format!(
                    "stream B length {} matches neither {} nor {nseg} segments",
                    b.len(),
                    a.len()
                )))
            }
            None => 0,
        };
        let mut out = Vec::with_capacity(a.len());
        let mut vals: Vec<Vec<f32>> = Vec::with_capacity(self.stages.len());
        for seg in 0..nseg {
            let sa = &a[seg * seg_len..(seg + 1) * seg_len];
            let sb = b.map(|b| &b[seg * b_per_seg..(seg + 1) * b_per_seg]);
            vals.clear();
            for (i, st) in self.stages.iter().enumerate() {
                let fetch = |t: Tap, vals: &Vec<Vec<f32>>| -> Vec<f32> {
                    match t {
                        Tap::A => sa.to_vec(),
                        Tap::B => sb.unwrap_or(&[]).to_vec(),
                        Tap::Prev => vals[i - 1].clone(),
                        Tap::Stage(j) => vals[j as usize].clone(),
                        Tap::Imm(x) => vec![x],
                    }
                };
                let x = fetch(st.a, &vals);
                let v = match st.op {
                    CvuOp::ReduceMax => vec![x.iter().copied().fold(f32::NEG_INFINITY, f32::max)],
                    CvuOp::ReduceSum => vec![x.iter().sum()],
                    CvuOp::BroadcastScalar => {
                        if x.len() != 1 {
                            return Err(UnitError::InvalidPipeline(format!(
                                "stage {i}: broadcast of a {}-element operand",
                                x.len()
                            )));
                        }
                        vec![x[0]; seg_len]
                    }
                    op if op.is_binary() => {
                        let y = fetch(st.b.unwrap(), &vals);
                        zip_broadcast(&x, &y, |p, q| op.binary(p, q)).ok_or_else(|| {
                            UnitError::InvalidPipeline(format!(
                                "stage {i}: operand lengths {} and {}",
                                x.len(),
                                y.len()
                            ))
                        })?
                    }
                    op => {
                        if let CvuOp::Convert(dt) = op {
                            check_finite(&x, dt, fault_on_nonfinite)?;
                        }
                        x.iter().map(|&p| op.unary(p)).collect()
                    }
                };
                vals.push(v);
            }
            let last = vals.last().unwrap();
            check_finite(last, out_dtype, fault_on_nonfinite)?;
            out.extend(last.iter().map(|&x| out_dtype.quantize(f64::from(x)) as f32));
        }
        Ok(out)
    }

    /// Busy cycles for a pass over `len` elements moving `stream_bytes` on
    /// its busiest port.
    pub fn cycles(&self, cfg: &MachineConfig, len: u64, stream_bytes: u64) -> u64 {
        let compute = ceil_div(len, cfg.cvu_lanes.into()) * self.passes();
        let io = ceil_div(stream_bytes, cfg.hbsm_bank_width.into());
        u64::from(cfg.cvu_fill) + compute.max(io)
    }
}

fn check_finite(x: &[f32], dt: DataType, fault: bool) -> Result<(), UnitError> {
    if fault && !dt.is_float() && x.iter().any(|v| !v.is_finite()) {
        return Err(UnitError::NonfiniteFault);
    }
    Ok(())
}

fn zip_broadcast(x: &[f32], y: &[f32], f: impl Fn(f32, f32) -> f32) -> Option<Vec<f32>> {
    match (x.len(), y.len()) {
        (a, b) if a == b => Some(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()),
        (_, 1) => Some(x.iter().map(|&p| f(p, y[0])).collect()),
        (1, _) => Some(y.iter().map(|&q| f(x[0], q)).collect()),
        _ => None,
    }
}

// Text form: stages separated by '/', e.g. `sub(a,b)/mul(p,0x3fb8aa3b)/exp2(p)`.
// Immediates are f32 bit patterns in hex so the encoding is exact.

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::A => f.write_str("a"),
            Tap::B => f.write_str("b"),
            Tap::Prev => f.write_str("p"),
            Tap::Stage(i) => write!(f, "s{i}"),
            Tap::Imm(x) => write!(f, "0x{:08x}", x.to_bits()),
        }
    }
}

impl FromStr for Tap {
    type Err = UnitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UnitError::InvalidPipeline(format!("bad tap `{s}`"));
        Ok(match s {
            "a" => Tap::A,
            "b" => Tap::B,
            "p" => Tap::Prev,
            _ if s.starts_with('s') => Tap::Stage(s[1..].parse().map_err(|_| bad())?),
            _ if s.starts_with("0x") => Tap::Imm(parse_f32_bits(&s[2..]).ok_or_else(bad)?),
            _ => return Err(bad()),
        })
    }
}

fn parse_f32_bits(s: &str) -> Option<f32> {
    u32::from_str_radix(s, 16).ok().map(f32::from_bits)
}

impl fmt::Display for CvuStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.op {
            CvuOp::Add => "add".to_string(),
            CvuOp::Sub => "sub".into(),
            CvuOp::Mul => "mul".into(),
            CvuOp::Div => "div".into(),
            CvuOp::Max => "max".into(),
            CvuOp::Min => "min".into(),
            CvuOp::Exp2 => "exp2".into(),
            CvuOp::Reciprocal => "recip".into(),
            CvuOp::Sqrt => "sqrt".into(),
            CvuOp::Abs => "abs".into(),
            CvuOp::ScaleBias { scale, bias } => {
                format!("scale_bias:{:08x}:{:08x}", scale.to_bits(), bias.to_bits())
            }
            CvuOp::Convert(dt) => format!("convert:{dt}"),
            CvuOp::ReduceMax => "reduce_max".into(),
            CvuOp::ReduceSum => "reduce_sum".into(),
            CvuOp::BroadcastScalar => "bcast".into(),
            CvuOp::SelectGe { threshold } => format!("select_ge:{:08x}", threshold.to_bits()),
        };
        match self.b {
            Some(b) => write!(f, "{name}({},{b})", self.a),
            None => write!(f, "{name}({})", self.a),
        }
    }
}

impl FromStr for CvuStage {
    type Err = UnitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UnitError::InvalidPipeline(format!("bad stage `{s}`"));
        let (head, args) = s.split_once('(').ok_or_else(bad)?;
        let args = args.strip_suffix(')').ok_or_else(bad)?;
        let mut parts = head.split(':');
        let name = parts.next().ok_or_else(bad)?;
        let mut imm = || parts.next().and_then(parse_f32_bits).ok_or_else(bad);
        let op = match name {
            "add" => CvuOp::Add,
            "sub" => CvuOp::Sub,
            "mul" => CvuOp::Mul,
            "div" => CvuOp::Div,
            "max" => CvuOp::Max,
            "min" => CvuOp::Min,
            "exp2" => CvuOp::Exp2,
            "recip" => CvuOp::Reciprocal,
            "sqrt" => CvuOp::Sqrt,
            "abs" => CvuOp::Abs,
            "scale_bias" => CvuOp::ScaleBias { scale: imm()?, bias: imm()? },
            "convert" => CvuOp::Convert(
                head.split(':').nth(1).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            ),
            "reduce_max" => CvuOp::ReduceMax,
            "reduce_sum" => CvuOp::ReduceSum,
            "bcast" => CvuOp::BroadcastScalar,
            "select_ge" => CvuOp::SelectGe { threshold: imm()? },
            _ => return Err(bad()),
        };
        let mut taps = args.split(',');
        let a = taps.next().ok_or_else(bad)?.parse()?;
        let b = taps.next().map(str::parse).transpose()?;
        Ok(CvuStage { op, a, b })
    }
}

impl CvuPipeline {
    pub fn encode_stages(&self) -> String {
        self.stages.iter().map(ToString::to_string).collect::<Vec<_>>().join("/")
    }

    pub fn decode_stages(s: &str, segment: u32) -> Result<Self, UnitError> {
        let stages = s.split('/').map(str::parse).collect::<Result<Vec<_>, _>>()?;
        Self::new(stages, segment)
    }
}

/// Canned two-pass lowerings used by the compiler.
pub mod recipes {
    use super::*;

    pub const LOG2_E: f32 = std::f32::consts::LOG2_E;

    /// Pass 1 of softmax: per-row maximum.
    pub fn softmax_pass1(row: u32) -> CvuPipeline {
        CvuPipeline::new(vec![CvuStage::unary(CvuOp::ReduceMax, Tap::A)], row).unwrap()
    }

    /// Pass 2 of softmax: stream B carries the per-row maximum.
    pub fn softmax_pass2(row: u32) -> CvuPipeline {
        CvuPipeline::new(
            vec![
                CvuStage::binary(CvuOp::Sub, Tap::A, Tap::B),
                CvuStage::binary(CvuOp::Mul, Tap::Prev, Tap::Imm(LOG2_E)),
                CvuStage::unary(CvuOp::Exp2, Tap::Prev),
                CvuStage::unary(CvuOp::ReduceSum, Tap::Prev),
                CvuStage::binary(CvuOp::Div, Tap::Stage(2), Tap::Prev),
            ],
            row,
        )
        .unwrap()
    }

    /// Pass 1 of layer norm: per-row mean.
    pub fn layernorm_pass1(row: u32) -> CvuPipeline {
        CvuPipeline::new(
            vec![
                CvuStage::unary(CvuOp::ReduceSum, Tap::A),
                CvuStage::binary(CvuOp::Div, Tap::Prev, Tap::Imm(row as f32)),
            ],
            row,
        )
        .unwrap()
    }

    /// Pass 2 of layer norm: stream B carries the per-row mean.
    pub fn layernorm_pass2(row: u32, eps: f32) -> CvuPipeline {
        CvuPipeline::new(
            vec![
                CvuStage::binary(CvuOp::Sub, Tap::A, Tap::B),
                CvuStage::binary(CvuOp::Mul, Tap::Prev, Tap::Prev),
                CvuStage::unary(CvuOp::ReduceSum, Tap::Prev),
                CvuStage::unary(CvuOp::ScaleBias { scale: 1.0 / row as f32, bias: eps }, Tap::Prev),
                CvuStage::unary(CvuOp::Sqrt, Tap::Prev),
                CvuStage::binary(CvuOp::Div, Tap::Stage(0), Tap::Prev),
            ],
            row,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::recipes::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax(x: &[f32], row: u32, out: DataType) -> Vec<f32> {
        let m = softmax_pass1(row).compute(x, None, DataType::F32, false).unwrap();
        softmax_pass2(row).compute(x, Some(&m), out, false).unwrap()
    }

    #[test]
    fn uniform_softmax() {
        assert_eq!(softmax(&[0.0; 4], 4, DataType::F32), vec![0.25; 4]);
    }

    #[test]
    fn random_f16_softmax_within_1e3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..1024)
            .map(|_| half::f16::from_f32(rng.gen_range(-4.0..4.0)).to_f32())
            .collect();
        let got = softmax(&x, 1024, DataType::F16);
        let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let e: Vec<f64> = x.iter().map(|&v| (f64::from(v) - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let want: Vec<f64> = e.iter().map(|e| e / s).collect();
        let norm = want.iter().fold(0f64, |a, &b| a.max(b.abs()));
        let err = got.iter().zip(&want).fold(0f64, |a, (g, w)| a.max((f64::from(*g) - w).abs()));
        assert!(err <= 1e-3 * norm, "normwise error {}", err / norm);
    }

    #[test]
    fn single_stage_add() {
        let p = CvuPipeline::new(vec![CvuStage::binary(CvuOp::Add, Tap::A, Tap::B)], 0).unwrap();
        let got = p.compute(&[1.0, 2.0, 3.0], Some(&[10.0, 20.0, 30.0]), DataType::F32, false);
        assert_eq!(got.unwrap(), vec![11.0, 22.0, 33.0]);
    }

    #[test]
    fn arity_and_topology_checked() {
        assert!(CvuPipeline::new(vec![CvuStage::unary(CvuOp::Add, Tap::A)], 0).is_err());
        assert!(CvuPipeline::new(vec![CvuStage::unary(CvuOp::Abs, Tap::Prev)], 0).is_err());
        assert!(CvuPipeline::new(
            vec![CvuStage::unary(CvuOp::Abs, Tap::A), CvuStage::unary(CvuOp::Abs, Tap::Stage(1))],
            0
        )
        .is_err());
        assert!(CvuPipeline::new(vec![], 0).is_err());
    }

    #[test]
    fn nonfinite_fault_is_configurable() {
        let p = CvuPipeline::new(vec![CvuStage::unary(CvuOp::Reciprocal, Tap::A)], 0).unwrap();
        assert_eq!(p.compute(&[0.0], None, DataType::I8, true), Err(UnitError::NonfiniteFault));
        assert_eq!(p.compute(&[0.0], None, DataType::I8, false).unwrap(), vec![127.0]);
    }

    #[test]
    fn layernorm_rows() {
        let x = [1.0f32, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let mean = layernorm_pass1(4).compute(&x, None, DataType::F32, false).unwrap();
        assert_eq!(mean, vec![2.5, 10.0]);
        let y = layernorm_pass2(4, 1e-5).compute(&x, Some(&mean), DataType::F32, false).unwrap();
        let sd = (1.25f64 + 1e-5).sqrt();
        assert!((f64::from(y[0]) + 1.5 / sd).abs() < 1e-6);
        assert_eq!(&y[4..], &[0.0; 4]);
    }

    #[test]
    fn stage_text_roundtrip() {
        let p = softmax_pass2(64);
        let s = p.encode_stages();
        assert_eq!(CvuPipeline::decode_stages(&s, 64).unwrap(), p);
        let q = layernorm_pass2(8, 1e-5);
        assert_eq!(CvuPipeline::decode_stages(&q.encode_stages(), 8).unwrap(), q);
    }

    #[test]
    fn timing_counts_passes() {
        let cfg = MachineConfig::default();
        assert_eq!(softmax_pass2(64).passes(), 2);
        assert_eq!(softmax_pass1(64).passes(), 1);
        assert_eq!(softmax_pass1(64).cycles(&cfg, 1024, 1024), 4 + 32);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn elementwise_op() -> impl Strategy<Value = CvuStage> {
        prop_oneof![
            Just(CvuStage::binary(CvuOp::Add, Tap::Prev, Tap::B)),
            Just(CvuStage::binary(CvuOp::Mul, Tap::Prev, Tap::Imm(0.5))),
            Just(CvuStage::binary(CvuOp::Max, Tap::Prev, Tap::A)),
            Just(CvuStage::unary(CvuOp::Abs, Tap::Prev)),
            Just(CvuStage::unary(CvuOp::ScaleBias { scale: 2.0, bias: -1.0 }, Tap::Prev)),
            Just(CvuStage::binary(CvuOp::SelectGe { threshold: 0.0 }, Tap::Prev, Tap::Imm(0.0))),
        ]
    }

    proptest! {
        /// Running a chain equals applying each stage to the whole stream in turn.
        #[test]
        fn chain_equals_composition(
            stages in prop::collection::vec(elementwise_op(), 1..6),
            a in prop::collection::vec(-8.0f32..8.0, 16),
            b in prop::collection::vec(-8.0f32..8.0, 16),
        ) {
            let mut chain = vec![CvuStage::unary(CvuOp::Abs, Tap::A)];
            chain.extend(stages.iter().copied());
            let p = CvuPipeline::new(chain.clone(), 0).unwrap();
            let got = p.compute(&a, Some(&b), DataType::F32, false).unwrap();
            let mut cur: Vec<f32> = a.iter().map(|x| x.abs()).collect();
            for st in &stages {
                cur = cur
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| match st.op {
                        CvuOp::Add => x + b[i],
                        CvuOp::Mul => x * 0.5,
                        CvuOp::Max => x.max(a[i]),
                        CvuOp::Abs => x.abs(),
                        CvuOp::ScaleBias { .. } => x * 2.0 - 1.0,
                        CvuOp::SelectGe { .. } => if x >= 0.0 { x } else { 0.0 },
                        _ => unreachable!(),
                    })
                    .collect();
            }
            prop_assert_eq!(got, cur);
        }
    }
}
