//! Index-gather: every PE reads random slots of a distributed table.
//!
//! Two mailboxes: requests arrive from outside at the slot's owner, whose
//! handler sends the stored value back to the requesting PE's response
//! mailbox. The termination graph is `{Outside → Request, Request →
//! Response}`, so the caller declares `done` only for the request mailbox
//! and response traffic drains automatically. The table holds
//! `data[g] = 2g + 1`, making validation closed-form.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use fabsp::{GraphNode, PeId, Selector, TerminationGraph};

use crate::checksum::{combine, pair_digest};
use crate::gen;
use crate::report::{allreduce_stats, run_collect, App, AppConfig, AppReport, KernelOutcome};

/// The deterministic table fill.
pub fn table_value(g: u64) -> u64 {
    2 * g + 1
}

/// Serial oracle: the exact gather array rank `rank` must end up with.
pub fn serial_gather(cfg: &AppConfig, rank: usize) -> Vec<u64> {
    let table_global = cfg.table_per_pe * cfg.pes as u64;
    gen::gen_indices(
        cfg.seed,
        gen::salt::GATHER_READS,
        rank,
        cfg.reads_per_pe as usize,
        table_global,
    )
    .into_iter()
    .map(table_value)
    .collect()
}

/// Checksum the serial oracle predicts for this config.
pub fn serial_checksum(cfg: &AppConfig) -> u64 {
    combine((0..cfg.pes).flat_map(|rank| {
        serial_gather(cfg, rank)
            .into_iter()
            .enumerate()
            .map(move |(i, v)| pair_digest(rank as u64 * cfg.reads_per_pe + i as u64, v))
            .collect::<Vec<_>>()
    }))
}

pub fn run(cfg: &AppConfig) -> AppReport {
    run_full(cfg, false).0
}

/// Like [`run`], also returning rank 0's gather array (test path).
pub fn run_gather(cfg: &AppConfig) -> (AppReport, Vec<u64>) {
    let (report, gathered) = run_full(cfg, true);
    (report, gathered.expect("gather requested"))
}

fn run_full(cfg: &AppConfig, want_rank0_array: bool) -> (AppReport, Option<Vec<u64>>) {
    const REQ: usize = 0;
    const RESP: usize = 1;
    let c = cfg.clone();
    let (outcome, rank0_array) = run_collect(cfg.fabric(), move |pe| {
        let cfg = c.clone();
        async move {
            let me = pe.rank().rank();
            let npes = pe.npes() as u64;
            let table_global = cfg.table_per_pe * npes;
            let reads = gen::gen_indices(
                cfg.seed,
                gen::salt::GATHER_READS,
                me,
                cfg.reads_per_pe as usize,
                table_global,
            );
            // data[g] = 2g + 1 for this PE's slots g = l·P + me.
            let data: Rc<Vec<u64>> = Rc::new(
                (0..cfg.table_per_pe)
                    .map(|l| table_value(l * npes + me as u64))
                    .collect(),
            );
            let gather = Rc::new(RefCell::new(vec![0u64; reads.len()]));

            pe.barrier().await;
            let t0 = Instant::now();

            let graph = TerminationGraph::new(
                2,
                [(GraphNode::Outside, REQ), (GraphNode::Mailbox(REQ), RESP)],
            )
            .unwrap();
            let table = data.clone();
            let sink = gather.clone();
            let handle = Selector::<(u64, u64)>::new(graph)
                .ring_capacity(cfg.ring_capacity)
                .buffer_items(cfg.buffer_items)
                .on_sending(REQ, move |s, (orig, g), from| {
                    let value = table[(g / npes) as usize];
                    Box::pin(async move {
                        s.send(RESP, from, (orig, value)).await.unwrap();
                    })
                })
                .on_sync(RESP, move |(orig, value), _from| {
                    sink.borrow_mut()[orig as usize] = value;
                })
                .start(&pe)
                .await;
            for (i, &g) in reads.iter().enumerate() {
                handle
                    .send(REQ, PeId::new((g % npes) as usize), (i as u64, g))
                    .await
                    .unwrap();
            }
            handle.done(REQ).unwrap();
            handle.all_done().await;
            pe.barrier().await;
            let wall = t0.elapsed().as_secs_f64();

            let stats = allreduce_stats(&pe, handle.total_stats()).await;
            let got = gather.borrow();
            let base = me as u64 * cfg.reads_per_pe;
            let partial = combine(
                got.iter()
                    .enumerate()
                    .map(|(i, &v)| pair_digest(base + i as u64, v)),
            );
            let digest = pe.allreduce_sum(partial).await;

            // `cfg.validate` is identical on every PE, so this collective
            // either runs everywhere or nowhere.
            let valid = if cfg.validate {
                let bad = reads
                    .iter()
                    .zip(got.iter())
                    .filter(|(&g, &v)| v != table_value(g))
                    .count() as u64;
                Some(pe.allreduce_sum(bad).await == 0)
            } else {
                None
            };

            if me != 0 {
                return None;
            }
            let outcome = KernelOutcome {
                wall_seconds: wall,
                stats,
                rounds: None,
                checksum: digest,
                valid,
            };
            Some((outcome, want_rank0_array.then(|| got.clone())))
        }
    });
    (AppReport::build(App::IndexGather, cfg, outcome), rank0_array)
}
