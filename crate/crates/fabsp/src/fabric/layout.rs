//! Cyclic partitioning of a global index space across PEs.
//!
//! Global index `g` lives on PE `g % npes` at local offset `g / npes`; the
//! inverse is `global = local * npes + rank`.

use super::PeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionedLayout {
    npes: usize,
}

impl PartitionedLayout {
    pub fn new(npes: usize) -> Self {
        assert!(npes > 0, "layout requires at least one PE");
        PartitionedLayout { npes }
    }

    pub fn npes(&self) -> usize {
        self.npes
    }

    pub fn owner_of(&self, global: usize) -> PeId {
        PeId(global % self.npes)
    }

    pub fn local_of(&self, global: usize) -> usize {
        global / self.npes
    }

    pub fn global_of(&self, pe: PeId, local: usize) -> usize {
        local * self.npes + pe.0
    }

    /// Number of globals in `[0, total)` owned by `pe`.
    pub fn local_count(&self, total: usize, pe: PeId) -> usize {
        (total + self.npes - 1 - pe.0) / self.npes
    }
}
