//! Histogram: every PE fires random increments at a distributed table.
//!
//! One mailbox, fed only from outside. A message is the global bucket
//! index; the owner's handler increments its local bucket. Validity
//! compares the gathered table against a serial replay of every PE's
//! update stream, plus the total-count identity.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use fabsp::{GraphNode, PeId, Selector, TerminationGraph};

use crate::checksum::{combine, pair_digest};
use crate::report::{allreduce_stats, run_collect, App, AppConfig, AppReport, KernelOutcome};
use crate::{gen, sparse};

/// Applies a stream of bucket draws to a table (the counting semantics).
pub fn count_into(histo: &mut [u64], draws: &[u64]) {
    for &g in draws {
        histo[g as usize] += 1;
    }
}

/// Serial oracle: replay all PEs' update streams into one table.
pub fn serial_buckets(cfg: &AppConfig) -> Vec<u64> {
    let table = cfg.table_per_pe * cfg.pes as u64;
    let mut histo = vec![0u64; table as usize];
    for rank in 0..cfg.pes {
        let draws = gen::gen_indices(
            cfg.seed,
            gen::salt::HISTOGRAM_UPDATES,
            rank,
            cfg.updates_per_pe as usize,
            table,
        );
        count_into(&mut histo, &draws);
    }
    histo
}

/// Checksum the serial oracle predicts for this config.
pub fn serial_checksum(cfg: &AppConfig) -> u64 {
    let buckets = serial_buckets(cfg);
    combine(
        buckets
            .iter()
            .enumerate()
            .map(|(g, &v)| pair_digest(g as u64, v)),
    )
}

pub fn run(cfg: &AppConfig) -> AppReport {
    run_full(cfg, false).0
}

/// Like [`run`], also returning the gathered final table (test path).
pub fn run_gather(cfg: &AppConfig) -> (AppReport, Vec<u64>) {
    let (report, buckets) = run_full(cfg, true);
    (report, buckets.expect("gather requested"))
}

fn run_full(cfg: &AppConfig, gather: bool) -> (AppReport, Option<Vec<u64>>) {
    let c = cfg.clone();
    let (outcome, buckets) = run_collect(cfg.fabric(), move |pe| {
        let cfg = c.clone();
        async move {
            let me = pe.rank().rank();
            let npes = pe.npes() as u64;
            let table_global = cfg.table_per_pe * npes;
            let updates = gen::gen_indices(
                cfg.seed,
                gen::salt::HISTOGRAM_UPDATES,
                me,
                cfg.updates_per_pe as usize,
                table_global,
            );
            let buckets = Rc::new(RefCell::new(vec![0u64; cfg.table_per_pe as usize]));

            pe.barrier().await;
            let t0 = Instant::now();

            let graph = TerminationGraph::new(1, [(GraphNode::Outside, 0)]).unwrap();
            let sink = buckets.clone();
            let handle = Selector::<u64>::new(graph)
                .ring_capacity(cfg.ring_capacity)
                .buffer_items(cfg.buffer_items)
                .on_sync(0, move |g, _from| {
                    sink.borrow_mut()[(g / npes) as usize] += 1;
                })
                .start(&pe)
                .await;
            for &g in &updates {
                handle
                    .send(0, PeId::new((g % npes) as usize), g)
                    .await
                    .unwrap();
            }
            handle.done(0).unwrap();
            handle.all_done().await;
            pe.barrier().await;
            let wall = t0.elapsed().as_secs_f64();

            let stats = allreduce_stats(&pe, handle.total_stats()).await;
            let local = buckets.borrow();
            let partial = combine(
                local
                    .iter()
                    .enumerate()
                    .map(|(l, &v)| pair_digest((l as u64) * npes + me as u64, v)),
            );
            let digest = pe.allreduce_sum(partial).await;

            let gathered = if cfg.validate || gather {
                sparse::gather_cyclic(&pe, &local).await
            } else {
                None
            };

            if me != 0 {
                return None;
            }
            let valid = if cfg.validate {
                let got = gathered.as_ref().unwrap();
                let total: u64 = got.iter().sum();
                Some(*got == serial_buckets(&cfg) && total == npes * cfg.updates_per_pe)
            } else {
                None
            };
            let outcome = KernelOutcome {
                wall_seconds: wall,
                stats,
                rounds: None,
                checksum: digest,
                valid,
            };
            Some((outcome, if gather { gathered } else { None }))
        }
    });
    (AppReport::build(App::Histogram, cfg, outcome), buckets)
}
