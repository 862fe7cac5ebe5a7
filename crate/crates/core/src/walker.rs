//! Tensor walker: the nested-loop address generator behind every streaming
//! access to HBSM.
//!
//! Each loop level holds a `value` counter running from `initial` to `final`
//! in `step` increments. The emitted address is the sum of all level values.
//! The innermost level advances on every emission; a level that already sits
//! at its final value rolls back to its initial value on the next increment
//! and carries into the next-outer level.

use thiserror::Error;

pub const MAX_LEVELS: usize = 8;
pub const DEFAULT_MAX_ITERATIONS: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WalkerError {
    #[error("invalid loop level {level}: {reason}")]
    InvalidLevel { level: usize, reason: String },
    #[error("walker needs 1..={MAX_LEVELS} levels, got {0}")]
    BadDepth(usize),
    #[error("walk of {0} iterations exceeds the iteration limit")]
    TooManyIterations(u64),
    #[error("walk reaches a negative address")]
    NegativeAddress,
    #[error("walker exhausted")]
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoopLevel {
    pub initial: i64,
    pub step: i64,
    pub final_: i64,
}

impl LoopLevel {
    pub fn new(initial: i64, step: i64, final_: i64) -> Self {
        Self { initial, step, final_ }
    }

    /// Level covering `extent` values spaced `stride` bytes apart.
    pub fn span(initial: i64, extent: u64, stride: i64) -> Self {
        if extent <= 1 {
            // A single value; the step is irrelevant but must be nonzero.
            return Self::new(initial, 1, initial);
        }
        Self::new(initial, stride, initial + (extent as i64 - 1) * stride)
    }

    fn check(&self, level: usize) -> Result<(), WalkerError> {
        let bad = |reason: &str| WalkerError::InvalidLevel { level, reason: reason.into() };
        if self.step == 0 {
            return Err(bad("step is zero"));
        }
        let range = self.final_ - self.initial;
        if range % self.step != 0 {
            return Err(bad("range is not a multiple of step"));
        }
        if range / self.step < 0 {
            return Err(bad("step points away from final"));
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        ((self.final_ - self.initial) / self.step) as u64 + 1
    }

    fn min_value(&self) -> i64 {
        self.initial.min(self.final_)
    }

    fn max_value(&self) -> i64 {
        self.initial.max(self.final_)
    }
}

/// Outermost level first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WalkerConfig {
    levels: Vec<LoopLevel>,
}

impl WalkerConfig {
    pub fn new(levels: Vec<LoopLevel>) -> Result<Self, WalkerError> {
        Self::with_limit(levels, DEFAULT_MAX_ITERATIONS)
    }

    pub fn with_limit(levels: Vec<LoopLevel>, max_iterations: u64) -> Result<Self, WalkerError> {
        if levels.is_empty() || levels.len() > MAX_LEVELS {
            return Err(WalkerError::BadDepth(levels.len()));
        }
        for (i, l) in levels.iter().enumerate() {
            l.check(i)?;
        }
        let cfg = Self { levels };
        let total = cfg
            .levels
            .iter()
            .try_fold(1u64, |acc, l| acc.checked_mul(l.count()))
            .unwrap_or(u64::MAX);
        if total > max_iterations {
            return Err(WalkerError::TooManyIterations(total));
        }
        if cfg.levels.iter().map(LoopLevel::min_value).sum::<i64>() < 0 {
            return Err(WalkerError::NegativeAddress);
        }
        Ok(cfg)
    }

    /// Walk over a strided box: `extents[d]` values with byte stride
    /// `strides[d]`, the base folded into the outermost initial value.
    pub fn strided(base: u64, extents: &[u64], strides: &[i64]) -> Result<Self, WalkerError> {
        assert_eq!(extents.len(), strides.len());
        let mut levels: Vec<LoopLevel> = extents
            .iter()
            .zip(strides)
            .map(|(&e, &s)| LoopLevel::span(0, e, s))
            .collect();
        // Negative strides start high so the walk stays within [base, ..).
        for l in &mut levels {
            if l.step < 0 && l.final_ != l.initial {
                let span = l.initial - l.final_;
                l.initial += span;
                l.final_ += span;
            }
        }
        if let Some(first) = levels.first_mut() {
            first.initial += base as i64;
            first.final_ += base as i64;
        }
        Self::new(levels)
    }

    /// Row-major dense walk of `extents` elements of `elem_bytes` each.
    pub fn dense(base: u64, extents: &[u64], elem_bytes: u64) -> Result<Self, WalkerError> {
        let mut strides = vec![elem_bytes as i64; extents.len()];
        for d in (0..extents.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * extents[d + 1] as i64;
        }
        Self::strided(base, extents, &strides)
    }

    /// Same walk repeated over two buffers `offset` bytes apart: the first
    /// pass covers buffer 0, the second buffer 1.
    pub fn ping_pong(&self, offset: i64) -> Result<Self, WalkerError> {
        let mut levels = Vec::with_capacity(self.levels.len() + 1);
        levels.push(LoopLevel::new(0, offset, offset));
        levels.extend_from_slice(&self.levels);
        Self::new(levels)
    }

    pub fn levels(&self) -> &[LoopLevel] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn total(&self) -> u64 {
        self.levels.iter().map(LoopLevel::count).product()
    }

    pub fn min_address(&self) -> u64 {
        self.levels.iter().map(LoopLevel::min_value).sum::<i64>() as u64
    }

    pub fn max_address(&self) -> u64 {
        self.levels.iter().map(LoopLevel::max_value).sum::<i64>() as u64
    }

    pub fn start(&self) -> WalkerState<'_> {
        WalkerState::new(self)
    }

    pub fn addresses(&self) -> Vec<u64> {
        self.start().collect()
    }
}

#[derive(Debug, Clone)]
pub struct WalkerState<'a> {
    cfg: &'a WalkerConfig,
    values: Vec<i64>,
    emitted: u64,
    exhausted: bool,
}

impl<'a> WalkerState<'a> {
    pub fn new(cfg: &'a WalkerConfig) -> Self {
        Self {
            cfg,
            values: cfg.levels.iter().map(|l| l.initial).collect(),
            emitted: 0,
            exhausted: false,
        }
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn next_address(&mut self) -> Result<u64, WalkerError> {
        if self.exhausted {
            return Err(WalkerError::Exhausted);
        }
        let addr = self.values.iter().sum::<i64>() as u64;
        self.emitted += 1;
        // Carry from the innermost level outwards.
        let mut carried_out = true;
        for (v, l) in self.values.iter_mut().zip(&self.cfg.levels).rev() {
            if *v == l.final_ {
                *v = l.initial;
            } else {
                *v += l.step;
                carried_out = false;
                break;
            }
        }
        if carried_out {
            self.exhausted = true;
        }
        Ok(addr)
    }
}

impl Iterator for WalkerState<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        self.next_address().ok()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.cfg.total() - self.emitted) as usize;
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: &[(i64, i64, i64)]) -> WalkerConfig {
        WalkerConfig::new(levels.iter().map(|&(a, b, c)| LoopLevel::new(a, b, c)).collect())
            .unwrap()
    }

    /// Literal nested loops summing loop variables.
    fn nested(levels: &[(i64, i64, i64)]) -> Vec<u64> {
        fn rec(levels: &[(i64, i64, i64)], acc: i64, out: &mut Vec<u64>) {
            let Some((&(init, step, fin), rest)) = levels.split_first() else {
                out.push(acc as u64);
                return;
            };
            let n = (fin - init) / step + 1;
            for i in 0..n {
                rec(rest, acc + init + i * step, out);
            }
        }
        let mut out = Vec::new();
        rec(levels, 0, &mut out);
        out
    }

    #[test]
    fn fresh_state_is_initial() {
        let c = cfg(&[(0, 1, 3)]);
        assert_eq!(c.start().values(), &[0]);
        let c = cfg(&[(100, 64, 228), (0, 8, 56), (0, 1, 7)]);
        assert_eq!(c.start().values(), &[100, 0, 0]);
    }

    #[test]
    fn non_divisible_level_rejected() {
        let e = WalkerConfig::new(vec![LoopLevel::new(0, 3, 7)]).unwrap_err();
        assert!(matches!(e, WalkerError::InvalidLevel { level: 0, .. }));
        assert!(WalkerConfig::new(vec![LoopLevel::new(0, 0, 0)]).is_err());
        assert!(WalkerConfig::new(vec![LoopLevel::new(3, 1, 0)]).is_err());
    }

    #[test]
    fn single_level_sequence() {
        let c = cfg(&[(0, 1, 3)]);
        let mut st = c.start();
        for want in 0..4 {
            assert_eq!(st.next_address(), Ok(want));
        }
        assert_eq!(st.next_address(), Err(WalkerError::Exhausted));
        assert_eq!(st.next_address(), Err(WalkerError::Exhausted));
        assert!(st.is_exhausted());
    }

    #[test]
    fn two_levels_match_nested_loops() {
        let lv = [(0, 16, 32), (0, 1, 3)];
        let want = nested(&lv);
        assert_eq!(want, vec![0, 1, 2, 3, 16, 17, 18, 19, 32, 33, 34, 35]);
        assert_eq!(cfg(&lv).addresses(), want);
    }

    #[test]
    fn double_buffer_ping_pong() {
        let lv = [(0, 4096, 4096), (0, 1, 1)];
        assert_eq!(nested(&lv), vec![0, 1, 4096, 4097]);
        assert_eq!(cfg(&lv).addresses(), vec![0, 1, 4096, 4097]);
        let inner = WalkerConfig::dense(0, &[2], 1).unwrap();
        assert_eq!(inner.ping_pong(4096).unwrap().addresses(), vec![0, 1, 4096, 4097]);
    }

    #[test]
    fn totals() {
        assert_eq!(cfg(&[(0, 1, 3)]).total(), 4);
        assert_eq!(cfg(&[(0, 16, 32), (0, 1, 3)]).total(), 12);
        assert_eq!(cfg(&[(5, 1, 5)]).total(), 1);
        assert_eq!(cfg(&[(5, 1, 5)]).addresses(), vec![5]);
    }

    #[test]
    fn negative_steps() {
        let c = cfg(&[(6, -2, 0)]);
        assert_eq!(c.addresses(), vec![6, 4, 2, 0]);
        let lv = [(0, 100, 200), (6, -2, 0)];
        assert_eq!(cfg(&lv).addresses(), nested(&lv));
    }

    #[test]
    fn depth_and_limit() {
        assert_eq!(WalkerConfig::new(vec![]).unwrap_err(), WalkerError::BadDepth(0));
        let nine = vec![LoopLevel::new(0, 1, 1); 9];
        assert_eq!(WalkerConfig::new(nine).unwrap_err(), WalkerError::BadDepth(9));
        let big = vec![LoopLevel::new(0, 1, 65535); 3];
        assert!(matches!(WalkerConfig::new(big), Err(WalkerError::TooManyIterations(_))));
        assert_eq!(
            WalkerConfig::new(vec![LoopLevel::new(-4, 1, 0)]).unwrap_err(),
            WalkerError::NegativeAddress
        );
    }

    #[test]
    fn strided_transpose_walk() {
        // Column-major walk of a 2x3 row-major i8 matrix.
        let c = WalkerConfig::strided(10, &[3, 2], &[1, 3]).unwrap();
        assert_eq!(c.addresses(), vec![10, 13, 11, 14, 12, 15]);
        let rev = WalkerConfig::strided(0, &[4], &[-1]).unwrap();
        assert_eq!(rev.addresses(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn three_level_matches_oracle() {
        let lv = [(0, 256, 768), (0, 32, 96), (0, 1, 7)];
        assert_eq!(cfg(&lv).addresses(), nested(&lv));
    }
}
