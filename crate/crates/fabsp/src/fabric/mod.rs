//! SPMD substrate: PE identity, cyclic data layout, bounded frame transport,
//! naive collectives, and the thread-per-PE launcher.

mod collective;
pub(crate) mod launch;
mod layout;
mod router;
mod transport;

pub use launch::{launch_spmd, FabricConfig, Pe};
pub use layout::PartitionedLayout;
pub use transport::{BufferFrame, FrameKind};

use std::fmt;

/// Rank of one processing element, in `[0, npes)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeId(usize);

impl PeId {
    pub fn new(rank: usize) -> Self {
        PeId(rank)
    }

    pub fn rank(self) -> usize {
        self.0
    }
}

impl fmt::Debug for PeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PE {}", self.0)
    }
}

impl fmt::Display for PeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
