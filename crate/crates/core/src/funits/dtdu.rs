//! Data Transformation DMA Unit: copy, 2D transpose and fill over walker
//! address streams, locally or into remote memories.

use super::{ceil_div, UnitError};
use crate::machine::{AddressSpace, MachineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtduKind {
    Copy,
    /// Input walked row-major as `rows x cols`, output written as `cols x rows`.
    Transpose2d { rows: u32, cols: u32 },
    /// Little-endian low `elem_bytes` of the pattern at every output address.
    Fill { pattern: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtduOp {
    pub kind: DtduKind,
    pub elem_bytes: u8,
    /// Destination memories. Empty means the local HBSM. More than one
    /// target is a broadcast with byte-identical payloads.
    pub targets: Vec<AddressSpace>,
}

impl DtduOp {
    pub fn local(kind: DtduKind, elem_bytes: u8) -> Self {
        Self { kind, elem_bytes, targets: Vec::new() }
    }

    pub fn is_remote(&self, own: AddressSpace) -> bool {
        self.targets.iter().any(|t| *t != own)
    }

    pub fn validate(&self, cfg: &MachineConfig) -> Result<(), UnitError> {
        if self.elem_bytes == 0 || self.elem_bytes > 8 && !matches!(self.kind, DtduKind::Copy) {
            return Err(UnitError::OperandMismatch(format!("element width {}", self.elem_bytes)));
        }
        if let Some(t) = self.targets.iter().find(|t| !t.is_valid(cfg)) {
            return Err(UnitError::UnroutableTarget(t.to_string()));
        }
        Ok(())
    }

    /// Reorders `elems` (each `elem_bytes` long, in input-walk order) into
    /// output-walk order. Fill ignores its input.
    pub fn transform(&self, elems: &[Vec<u8>], out_count: usize) -> Result<Vec<Vec<u8>>, UnitError> {
        match self.kind {
            DtduKind::Copy => {
                if elems.len() != out_count {
                    return Err(UnitError::OperandMismatch(format!(
                        "copy of {} elements into {out_count} slots",
                        elems.len()
                    )));
                }
                Ok(elems.to_vec())
            }
            DtduKind::Transpose2d { rows, cols } => {
                let (r, c) = (rows as usize, cols as usize);
                if elems.len() != r * c || out_count != r * c {
                    return Err(UnitError::OperandMismatch(format!(
                        "transpose {r}x{c} with {} in / {out_count} out",
                        elems.len()
                    )));
                }
                let mut out = Vec::with_capacity(r * c);
                for j in 0..c {
                    for i in 0..r {
                        out.push(elems[i * c + j].clone());
                    }
                }
                Ok(out)
            }
            DtduKind::Fill { pattern } => {
                let bytes = pattern.to_le_bytes()[..self.elem_bytes as usize].to_vec();
                Ok(vec![bytes; out_count])
            }
        }
    }

    /// Local busy cycles: the single DTDU port carries both the read and the
    /// write stream.
    pub fn local_cycles(&self, cfg: &MachineConfig, elems: u64) -> u64 {
        let bytes = elems * u64::from(self.elem_bytes);
        let streams = if matches!(self.kind, DtduKind::Fill { .. }) { 1 } else { 2 };
        u64::from(cfg.dtdu_fill) + ceil_div(streams * bytes, cfg.hbsm_bank_width.into())
    }
}

/// True when any source byte is also a destination byte.
pub fn ranges_overlap(src: &[u64], dst: &[u64], elem_bytes: u64) -> bool {
    let mut s: Vec<u64> = src.to_vec();
    let mut d: Vec<u64> = dst.to_vec();
    s.sort_unstable();
    d.sort_unstable();
    let (mut i, mut j) = (0, 0);
    while i < s.len() && j < d.len() {
        let (a, b) = (s[i], d[j]);
        if a < b + elem_bytes && b < a + elem_bytes {
            return true;
        }
        if a < b {
            i += 1;
        } else {
            j += 1;
        }
    }
    false
}
