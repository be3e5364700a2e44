//! Seven irregular-communication mini-applications on the `fabsp` runtime.
//!
//! Each application module provides a distributed kernel built on selectors,
//! a serial oracle that computes the same answer independently, and a
//! validity checker; [`run_app`] runs one and returns its [`AppReport`].

pub mod checksum;
pub mod gen;
pub mod report;
pub mod sparse;

pub mod apps;

pub use report::{App, AppConfig, AppReport};

/// Runs one application under its own SPMD launch.
pub fn run_app(app: App, cfg: &AppConfig) -> AppReport {
    match app {
        App::Histogram => apps::histogram::run(cfg),
        App::IndexGather => apps::index_gather::run(cfg),
        App::PermuteMatrix => apps::permute_matrix::run(cfg),
        App::RandomPermutation => apps::random_permutation::run(cfg),
        App::TopologicalSort => apps::topological_sort::run(cfg),
        App::Transpose => apps::transpose::run(cfg),
        App::TriangleCount => apps::triangle_count::run(cfg),
    }
}
