//! The seven mini-applications. Each module exposes
//!
//! * `run(cfg) -> AppReport` — the distributed kernel under its own SPMD
//!   launch, with timing, global conveyor statistics, a checksum, and (when
//!   enabled) a validity verdict from an independent oracle;
//! * serial oracle functions used by that verdict and by the test suites.

pub mod histogram;
pub mod index_gather;
pub mod permute_matrix;
pub mod random_permutation;
pub mod topological_sort;
pub mod transpose;
pub mod triangle_count;
