//! Gather-Scatter DMA Unit, launched by a cluster-CPU service routine.
//!
//! The plan travels in the service call's fixed 8-word argument block:
//! `[direction, index_table, count, local_base, remote_space, remote_base,
//! elem_bytes, 0]`. `remote_space` is 0 for DDR, 1 for CCB SRAM and
//! `2 + global_tpb` for another HBSM. Index entries are little-endian u32
//! element indices into the remote region.

use super::UnitError;
use crate::machine::{AddressSpace, MachineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    GatherIn,
    ScatterOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatherScatterPlan {
    pub direction: Direction,
    pub index_table: u64,
    pub count: u64,
    pub local_base: u64,
    pub remote: AddressSpace,
    pub remote_base: u64,
    pub elem_bytes: u64,
}

/// One element move: `(source address, destination address)`. Sources are
/// remote for gathers and local for scatters.
pub type ElementMove = (u64, u64);

impl GatherScatterPlan {
    pub fn to_args(&self, cfg: &MachineConfig) -> [u64; 8] {
        let space = match self.remote {
            AddressSpace::Ddr => 0,
            AddressSpace::CcbSram => 1,
            AddressSpace::Hbsm { cluster, tpb } => 2 + u64::from(cfg.tpb_global(cluster, tpb)),
        };
        let dir = match self.direction {
            Direction::GatherIn => 0,
            Direction::ScatterOut => 1,
        };
        [
            dir,
            self.index_table,
            self.count,
            self.local_base,
            space,
            self.remote_base,
            self.elem_bytes,
            0,
        ]
    }

    pub fn from_args(args: &[u64; 8], cfg: &MachineConfig) -> Result<Self, UnitError> {
        let direction = match args[0] {
            0 => Direction::GatherIn,
            1 => Direction::ScatterOut,
            d => return Err(UnitError::OperandMismatch(format!("gsdu direction {d}"))),
        };
        let remote = match args[4] {
            0 => AddressSpace::Ddr,
            1 => AddressSpace::CcbSram,
            g => {
                let g = (g - 2) as u32;
                if g >= cfg.total_tpbs() {
                    return Err(UnitError::UnroutableTarget(format!("tpb {g}")));
                }
                let (cluster, tpb) = cfg.tpb_local(g);
                AddressSpace::Hbsm { cluster, tpb }
            }
        };
        if args[6] == 0 {
            return Err(UnitError::OperandMismatch("zero element width".into()));
        }
        Ok(Self {
            direction,
            index_table: args[1],
            count: args[2],
            local_base: args[3],
            remote,
            remote_base: args[5],
            elem_bytes: args[6],
        })
    }

    /// Resolves every element move in index order. Duplicate scatter targets
    /// are kept in order, so applying the moves sequentially makes the last
    /// writer win.
    pub fn moves(&self, indices: &[u32], remote_capacity: u64) -> Result<Vec<ElementMove>, UnitError> {
        if indices.len() as u64 != self.count {
            return Err(UnitError::OperandMismatch(format!(
                "{} indices for {} elements",
                indices.len(),
                self.count
            )));
        }
        indices
            .iter()
            .enumerate()
            .map(|(i, &ix)| {
                let remote = self.remote_base + u64::from(ix) * self.elem_bytes;
                if remote + self.elem_bytes > remote_capacity {
                    return Err(UnitError::IndexOutOfRange { index: ix.into() });
                }
                let local = self.local_base + i as u64 * self.elem_bytes;
                Ok(match self.direction {
                    Direction::GatherIn => (remote, local),
                    Direction::ScatterOut => (local, remote),
                })
            })
            .collect()
    }

    /// Bytes charged to the fabric: one uncoalesced beat per element.
    pub fn fabric_bytes(&self, cfg: &MachineConfig) -> u64 {
        self.count * self.elem_bytes.max(cfg.hbsm_bank_width.into())
    }
}
