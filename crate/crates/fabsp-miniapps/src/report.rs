//! Run configuration and machine-readable run reports.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fabsp::{launch_spmd, ConveyorStats, FabricConfig, Pe};
use serde::{Deserialize, Serialize};

/// The seven applications, in canonical emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum App {
    Histogram,
    IndexGather,
    PermuteMatrix,
    RandomPermutation,
    TopologicalSort,
    Transpose,
    TriangleCount,
}

impl App {
    pub const ALL: [App; 7] = [
        App::Histogram,
        App::IndexGather,
        App::PermuteMatrix,
        App::RandomPermutation,
        App::TopologicalSort,
        App::Transpose,
        App::TriangleCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            App::Histogram => "histogram",
            App::IndexGather => "ig",
            App::PermuteMatrix => "permute",
            App::RandomPermutation => "randperm",
            App::TopologicalSort => "toposort",
            App::Transpose => "transpose",
            App::TriangleCount => "triangles",
        }
    }
}

/// Everything a run needs: PE count, per-PE sizes, seed, and runtime knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppConfig {
    pub pes: usize,
    pub updates_per_pe: u64,
    pub table_per_pe: u64,
    pub reads_per_pe: u64,
    pub rows_per_pe: u64,
    pub nnz_per_row: u64,
    pub elements_per_pe: u64,
    pub seed: u64,
    pub buffer_items: usize,
    pub ring_capacity: usize,
    pub inbox_capacity: usize,
    pub validate: bool,
    /// Watchdog on task-scheduler steps per PE; `None` = unlimited.
    pub step_limit: Option<u64>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            pes: 4,
            updates_per_pe: 100_000,
            table_per_pe: 1_000,
            reads_per_pe: 100_000,
            rows_per_pe: 1_000,
            nnz_per_row: 10,
            elements_per_pe: 10_000,
            seed: 0,
            buffer_items: 1024,
            ring_capacity: 64,
            inbox_capacity: 64,
            validate: true,
            step_limit: None,
        }
    }
}

impl AppConfig {
    pub fn fabric(&self) -> FabricConfig {
        FabricConfig {
            npes: self.pes,
            inbox_capacity: self.inbox_capacity,
            seed: self.seed,
            collective_timeout: Some(Duration::from_secs(300)),
            step_limit: self.step_limit,
        }
    }

    /// The size parameters relevant to `app`, for the report echo.
    pub fn sizes_for(&self, app: App) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match app {
            App::Histogram => {
                m.insert("updates_per_pe".into(), self.updates_per_pe);
                m.insert("table_per_pe".into(), self.table_per_pe);
            }
            App::IndexGather => {
                m.insert("reads_per_pe".into(), self.reads_per_pe);
                m.insert("table_per_pe".into(), self.table_per_pe);
            }
            App::PermuteMatrix | App::TopologicalSort | App::Transpose | App::TriangleCount => {
                m.insert("rows_per_pe".into(), self.rows_per_pe);
                m.insert("nnz_per_row".into(), self.nnz_per_row);
            }
            App::RandomPermutation => {
                m.insert("elements_per_pe".into(), self.elements_per_pe);
            }
        }
        m
    }
}

/// What a kernel hands back to the report builder, all global (summed
/// across PEs) quantities measured at rank 0.
#[derive(Debug, Clone)]
pub struct KernelOutcome {
    pub wall_seconds: f64,
    pub stats: ConveyorStats,
    pub rounds: Option<u64>,
    pub checksum: u64,
    /// `None` when validation was switched off.
    pub valid: Option<bool>,
}

/// One run's report. Field names are the stable wire contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppReport {
    pub app: String,
    pub pes: usize,
    pub seed: u64,
    pub sizes: BTreeMap<String, u64>,
    pub buffer_items: usize,
    pub ring_capacity: usize,
    pub inbox_capacity: usize,
    pub wall_time_seconds: f64,
    pub items_sent_total: u64,
    pub frames_sent_total: u64,
    pub aggregation_ratio: f64,
    pub valid: Option<bool>,
    /// 16 hex digits.
    pub checksum: String,
    pub rounds: Option<u64>,
}

impl AppReport {
    pub fn build(app: App, cfg: &AppConfig, outcome: KernelOutcome) -> AppReport {
        let items = outcome.stats.items_pushed;
        let frames = outcome.stats.frames_sent;
        assert_eq!(
            items, outcome.stats.items_pulled,
            "conservation violated: {items} items pushed, {} pulled",
            outcome.stats.items_pulled
        );
        let ratio = if frames == 0 {
            0.0
        } else {
            items as f64 / frames as f64
        };
        AppReport {
            app: app.name().to_string(),
            pes: cfg.pes,
            seed: cfg.seed,
            sizes: cfg.sizes_for(app),
            buffer_items: cfg.buffer_items,
            ring_capacity: cfg.ring_capacity,
            inbox_capacity: cfg.inbox_capacity,
            wall_time_seconds: outcome.wall_seconds,
            items_sent_total: items,
            frames_sent_total: frames,
            aggregation_ratio: ratio,
            valid: outcome.valid,
            checksum: format!("{:016x}", outcome.checksum),
            rounds: outcome.rounds,
        }
    }
}

/// Sums this PE's conveyor counters into a global total (four collectives).
pub(crate) async fn allreduce_stats(pe: &Pe, local: ConveyorStats) -> ConveyorStats {
    ConveyorStats {
        items_pushed: pe.allreduce_sum(local.items_pushed).await,
        items_pulled: pe.allreduce_sum(local.items_pulled).await,
        frames_sent: pe.allreduce_sum(local.frames_sent).await,
        frames_received: pe.allreduce_sum(local.frames_received).await,
    }
}

/// Runs `body` on every PE under the config's fabric and returns rank 0's
/// result (the other PEs return `None`).
pub(crate) fn run_collect<T, F, Fut>(fabric: FabricConfig, body: F) -> T
where
    T: Send + 'static,
    F: Fn(Pe) -> Fut + Send + Clone + 'static,
    Fut: std::future::Future<Output = Option<T>> + 'static,
{
    let slot: Arc<Mutex<Option<T>>> = Arc::default();
    let out = slot.clone();
    launch_spmd(fabric, move |pe| {
        let slot = slot.clone();
        let body = body.clone();
        async move {
            if let Some(value) = body(pe).await {
                let prev = slot.lock().unwrap().replace(value);
                assert!(prev.is_none(), "two PEs produced a result");
            }
        }
    });
    let value = out.lock().unwrap().take();
    value.expect("rank 0 must produce a result")
}
