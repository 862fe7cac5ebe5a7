//! Tensor Computing Unit: an 8x64 array of 4-wide dot-product MACs with an
//! activation pipeline on the output path.
//!
//! Convolutions are computed as implicit matmuls with contraction length
//! `kh * kw * cin`; the activation walker streams the NHWC input as stored.

use super::{ceil_div, UnitError};
use crate::machine::{DataType, MachineConfig};

const MAX_CONTRACTION: u64 = 1 << 16;
const MAX_ROWS: u64 = 1 << 20;
const MAX_COLS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Relu6,
    Clamp(f32, f32),
}

impl Activation {
    /// Applied in the accumulator domain, before narrowing.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::Clamp(lo, hi) => x.clamp(f64::from(lo), f64::from(hi)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcuKind {
    Matmul { m: u32, k: u32, n: u32 },
    Conv2d { n: u32, h: u32, w: u32, cin: u32, cout: u32, kh: u32, kw: u32, stride: u32, pad: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcuOp {
    pub kind: TcuKind,
    pub in_dtype: DataType,
    pub acc_dtype: DataType,
    pub out_dtype: DataType,
    /// Arithmetic right shift (round half to even) applied to integer
    /// accumulators before narrowing.
    pub shift: u8,
    pub activation: Activation,
}

/// Cycle breakdown of one TCU instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcuTiming {
    pub mac: u64,
    pub fetch: u64,
    pub fill: u64,
    pub drain: u64,
}

impl TcuTiming {
    /// Operand fetch is double-buffered against the MAC phase, so the busy
    /// window is bounded by the slower of the two.
    pub fn total(&self) -> u64 {
        self.fill + self.mac.max(self.fetch) + self.drain
    }
}

impl TcuOp {
    pub fn matmul(m: u32, k: u32, n: u32, in_dtype: DataType) -> Self {
        let acc = if in_dtype.is_float() { DataType::F32 } else { DataType::I32 };
        Self {
            kind: TcuKind::Matmul { m, k, n },
            in_dtype,
            acc_dtype: acc,
            out_dtype: acc,
            shift: 0,
            activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<(), UnitError> {
        match (self.in_dtype, self.acc_dtype) {
            (DataType::I8 | DataType::U8, DataType::I32) | (DataType::F16, DataType::F32) => {}
            (i, a) => return Err(UnitError::UnsupportedDtype(format!("{i} inputs with {a} accumulation"))),
        }
        let out_ok = match self.acc_dtype {
            DataType::I32 => matches!(self.out_dtype, DataType::I32 | DataType::I8 | DataType::U8),
            _ => matches!(self.out_dtype, DataType::F32 | DataType::F16),
        };
        if !out_ok {
            return Err(UnitError::UnsupportedDtype(format!(
                "{} output from {} accumulator",
                self.out_dtype, self.acc_dtype
            )));
        }
        if self.acc_dtype.is_float() && self.shift != 0 {
            return Err(UnitError::UnsupportedDtype("shift on float accumulator".into()));
        }
        match self.kind {
            TcuKind::Matmul { m, k, n } => {
                if m == 0 || k == 0 || n == 0 {
                    return Err(UnitError::OperandMismatch("zero matmul dimension".into()));
                }
            }
            TcuKind::Conv2d { n, h, w, cin, cout, kh, kw, stride, pad } => {
                if [n, h, w, cin, cout, kh, kw, stride].contains(&0) {
                    return Err(UnitError::OperandMismatch("zero conv dimension".into()));
                }
                if pad >= kh || pad >= kw {
                    return Err(UnitError::OperandMismatch("padding must be smaller than the kernel".into()));
                }
                if h + 2 * pad < kh || w + 2 * pad < kw {
                    return Err(UnitError::OperandMismatch("kernel larger than padded input".into()));
                }
            }
        }
        if self.contraction() > MAX_CONTRACTION
            || self.out_rows() > MAX_ROWS
            || self.out_cols() > MAX_COLS
        {
            return Err(UnitError::TileTooLarge(format!(
                "M'={} K'={} N'={}",
                self.out_rows(),
                self.contraction(),
                self.out_cols()
            )));
        }
        Ok(())
    }

    pub fn conv_out_hw(&self) -> Option<(u32, u32)> {
        match self.kind {
            TcuKind::Conv2d { h, w, kh, kw, stride, pad, .. } => Some((
                (h + 2 * pad - kh) / stride + 1,
                (w + 2 * pad - kw) / stride + 1,
            )),
            TcuKind::Matmul { .. } => None,
        }
    }

    /// K': contraction length.
    pub fn contraction(&self) -> u64 {
        match self.kind {
            TcuKind::Matmul { k, .. } => k.into(),
            TcuKind::Conv2d { cin, kh, kw, .. } => u64::from(kh) * u64::from(kw) * u64::from(cin),
        }
    }

    /// M': output rows.
    pub fn out_rows(&self) -> u64 {
        match self.kind {
            TcuKind::Matmul { m, .. } => m.into(),
            TcuKind::Conv2d { n, .. } => {
                let (oh, ow) = self.conv_out_hw().unwrap();
                u64::from(n) * u64::from(oh) * u64::from(ow)
            }
        }
    }

    /// N': output columns.
    pub fn out_cols(&self) -> u64 {
        match self.kind {
            TcuKind::Matmul { n, .. } => n.into(),
            TcuKind::Conv2d { cout, .. } => cout.into(),
        }
    }

    pub fn act_elems(&self) -> u64 {
        match self.kind {
            TcuKind::Matmul { m, k, .. } => u64::from(m) * u64::from(k),
            TcuKind::Conv2d { n, h, w, cin, .. } => {
                u64::from(n) * u64::from(h) * u64::from(w) * u64::from(cin)
            }
        }
    }

    pub fn wt_elems(&self) -> u64 {
        self.contraction() * self.out_cols()
    }

    pub fn out_elems(&self) -> u64 {
        self.out_rows() * self.out_cols()
    }

    pub fn macs(&self) -> u64 {
        self.out_rows() * self.out_cols() * self.contraction()
    }

    pub fn timing(&self, cfg: &MachineConfig) -> TcuTiming {
        let per_pass = u64::from(cfg.tcu_rows) * u64::from(cfg.tcu_dot_width);
        let mac = ceil_div(self.contraction(), per_pass)
            * self.out_rows()
            * ceil_div(self.out_cols(), cfg.tcu_cols.into());
        let b = self.in_dtype.byte_width() as u64;
        let act_bw = u64::from(cfg.hbsm_bank_width);
        let wt_bw = 2 * u64::from(cfg.hbsm_bank_width);
        let fetch = ceil_div(self.out_rows() * self.contraction() * b, act_bw)
            .max(ceil_div(self.wt_elems() * b, wt_bw));
        TcuTiming { mac, fetch, fill: cfg.tcu_fill.into(), drain: cfg.tcu_drain.into() }
    }

    /// Functional result. `act` and `wt` hold decoded operand values in walk
    /// order (row-major `[M,K]`/`[K,N]`, or NHWC input and `[kh,kw,cin,cout]`
    /// weights); the result is row-major `[M',N']` already rounded to the
    /// output dtype.
    pub fn compute(&self, act: &[f64], wt: &[f64]) -> Result<Vec<f64>, UnitError> {
        self.validate()?;
        if act.len() as u64 != self.act_elems() || wt.len() as u64 != self.wt_elems() {
            return Err(UnitError::OperandMismatch(format!(
                "expected {} activations and {} weights, got {} and {}",
                self.act_elems(),
                self.wt_elems(),
                act.len(),
                wt.len()
            )));
        }
        let rows = self.out_rows() as usize;
        let cols = self.out_cols() as usize;
        let kk = self.contraction() as usize;
        let mut out = Vec::with_capacity(rows * cols);
        let mut row_buf = vec![None::<f64>; kk];
        for r in 0..rows {
            self.gather_row(act, r, &mut row_buf);
            for c in 0..cols {
                let v = if self.acc_dtype.is_float() {
                    let mut acc = 0f32;
                    for (kx, a) in row_buf.iter().enumerate() {
                        if let Some(a) = a {
                            acc += (*a as f32) * (wt[kx * cols + c] as f32);
                        }
                    }
                    let y = self.activation.apply(f64::from(acc));
                    self.out_dtype.quantize(f64::from(y as f32))
                } else {
                    let mut acc = 0i64;
                    for (kx, a) in row_buf.iter().enumerate() {
                        if let Some(a) = a {
                            acc += (*a as i64) * (wt[kx * cols + c] as i64);
                        }
                    }
                    let acc = acc.clamp(i32::MIN.into(), i32::MAX.into());
                    let y = self.activation.apply(acc as f64).round_ties_even() as i64;
                    self.out_dtype.quantize(rshift_round_even(y, self.shift) as f64)
                };
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Implicit im2col row `r`; `None` marks padding.
    fn gather_row(&self, act: &[f64], r: usize, row: &mut [Option<f64>]) {
        match self.kind {
            TcuKind::Matmul { k, .. } => {
                let k = k as usize;
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = Some(act[r * k + i]);
                }
            }
            TcuKind::Conv2d { h, w, cin, kh, kw, stride, pad, .. } => {
                let (oh, ow) = self.conv_out_hw().unwrap();
                let (oh, ow) = (oh as usize, ow as usize);
                let (h, w, cin, kw) = (h as i64, w as i64, cin as usize, kw as usize);
                let b = r / (oh * ow);
                let oy = (r / ow) % oh;
                let ox = r % ow;
                let mut i = 0;
                for ky in 0..kh as usize {
                    for kx in 0..kw {
                        let y = (oy * stride as usize + ky) as i64 - i64::from(pad);
                        let x = (ox * stride as usize + kx) as i64 - i64::from(pad);
                        for ci in 0..cin {
                            row[i] = if y >= 0 && y < h && x >= 0 && x < w {
                                let idx = ((b as i64 * h + y) * w + x) as usize * cin + ci;
                                Some(act[idx])
                            } else {
                                None
                            };
                            i += 1;
                        }
                    }
                }
            }
        }
    }
}

/// `x / 2^s` rounded half to even.
pub fn rshift_round_even(x: i64, s: u8) -> i64 {
    if s == 0 {
        return x;
    }
    let d = 1i64 << s;
    let q = x.div_euclid(d);
    let r = x.rem_euclid(d);
    let half = d / 2;
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &[i64], b: &[i64], m: usize, k: usize, n: usize) -> Vec<i64> {
        let mut c = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_32x32x64_takes_32_mac_cycles() {
        let cfg = MachineConfig::default();
        let op = TcuOp::matmul(32, 32, 64, DataType::I8);
        let t = op.timing(&cfg);
        assert_eq!(t.mac, 32);
        assert_eq!(t.fetch, 32);
        assert!(t.total() <= 48);
    }

    #[test]
    fn mac_cycles_bound_total_macs() {
        let cfg = MachineConfig::default();
        for (m, k, n) in [(48, 96, 17), (1, 1, 1), (64, 64, 128), (7, 300, 65)] {
            let op = TcuOp::matmul(m, k, n, DataType::I8);
            let t = op.timing(&cfg);
            assert!(t.mac >= ceil_div(op.macs(), cfg.tcu_macs_per_cycle()));
        }
        let full = TcuOp::matmul(64, 64, 128, DataType::I8);
        assert_eq!(full.timing(&cfg).mac, full.macs() / cfg.tcu_macs_per_cycle());
    }

    #[test]
    fn identity_matmul_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..32 * 32).map(|_| f64::from(rng.gen_range(-128i32..128))).collect();
        let eye: Vec<f64> = (0..32 * 32).map(|i| if i / 32 == i % 32 { 1.0 } else { 0.0 }).collect();
        let op = TcuOp::matmul(32, 32, 32, DataType::I8);
        assert_eq!(op.compute(&a, &eye).unwrap(), a);
    }

    #[test]
    fn random_padded_matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (48, 96, 17);
        let a: Vec<i64> = (0..m * k).map(|_| rng.gen_range(-128..128)).collect();
        let b: Vec<i64> = (0..k * n).map(|_| rng.gen_range(-128..128)).collect();
        let want = triple_loop(&a, &b, m, k, n);
        let op = TcuOp::matmul(m as u32, k as u32, n as u32, DataType::I8);
        let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let bf: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        let got: Vec<i64> = op.compute(&af, &bf).unwrap().iter().map(|&x| x as i64).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn narrowing_and_activation() {
        let mut op = TcuOp::matmul(1, 2, 1, DataType::I8);
        op.out_dtype = DataType::I8;
        op.shift = 2;
        op.activation = Activation::Relu;
        // 10*1 + 0 = 10 -> 10/4 = 2.5 -> 2 (even)
        assert_eq!(op.compute(&[10.0, 0.0], &[1.0, 1.0]).unwrap(), vec![2.0]);
        assert_eq!(op.compute(&[-10.0, 0.0], &[1.0, 1.0]).unwrap(), vec![0.0]);
        assert_eq!(op.compute(&[127.0, 127.0], &[127.0, 127.0]).unwrap(), vec![127.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w, cin, cout, kh, kw, stride, pad) = (2, 5, 6, 3, 4, 3, 3, 2, 1);
        let op = TcuOp {
            kind: TcuKind::Conv2d { n, h, w, cin, cout, kh, kw, stride, pad },
            ..TcuOp::matmul(1, 1, 1, DataType::I8)
        };
        let act: Vec<f64> =
            (0..op.act_elems()).map(|_| f64::from(rng.gen_range(-5i32..5))).collect();
        let wt: Vec<f64> =
            (0..op.wt_elems()).map(|_| f64::from(rng.gen_range(-5i32..5))).collect();
        let got = op.compute(&act, &wt).unwrap();
        let (oh, ow) = op.conv_out_hw().unwrap();
        assert_eq!((oh, ow), (3, 3));
        let mut want = Vec::new();
        for b in 0..n as i64 {
            for oy in 0..oh as i64 {
                for ox in 0..ow as i64 {
                    for co in 0..cout as i64 {
                        let mut s = 0.0;
                        for ky in 0..kh as i64 {
                            for kx in 0..kw as i64 {
                                let y = oy * stride as i64 + ky - pad as i64;
                                let x = ox * stride as i64 + kx - pad as i64;
                                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                    continue;
                                }
                                for ci in 0..cin as i64 {
                                    let ai = ((b * h as i64 + y) * w as i64 + x) * cin as i64 + ci;
                                    let wi = ((ky * kw as i64 + kx) * cin as i64 + ci) * cout as i64 + co;
                                    s += act[ai as usize] * wt[wi as usize];
                                }
                            }
                        }
                        want.push(s);
                    }
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn dtype_errors() {
        let mut op = TcuOp::matmul(4, 4, 4, DataType::I8);
        op.acc_dtype = DataType::F32;
        assert!(matches!(op.validate(), Err(UnitError::UnsupportedDtype(_))));
        let op = TcuOp::matmul(4, 4, 4, DataType::F32);
        assert!(matches!(op.validate(), Err(UnitError::UnsupportedDtype(_))));
        let op = TcuOp::matmul(4, 1 << 17, 4, DataType::I8);
        assert!(matches!(op.validate(), Err(UnitError::TileTooLarge(_))));
    }

    #[test]
    fn f16_matmul_accumulates_in_f32() {
        let mut op = TcuOp::matmul(1, 3, 1, DataType::F16);
        op.out_dtype = DataType::F16;
        let got = op.compute(&[0.5, 0.25, 1.0], &[2.0, 4.0, -1.0]).unwrap();
        assert_eq!(got, vec![1.0]);
    }

    #[test]
    fn rounding_shift() {
        assert_eq!(rshift_round_even(5, 1), 2);
        assert_eq!(rshift_round_even(7, 1), 4);
        assert_eq!(rshift_round_even(-5, 1), -2);
        assert_eq!(rshift_round_even(-7, 1), -4);
        assert_eq!(rshift_round_even(-6, 2), -2);
    }
}
