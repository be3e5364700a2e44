//! Random permutation by dart throwing.
//!
//! `m = P · elements_per_pe` values land in a dartboard of `2m` slots
//! (block-partitioned): each round, every unplaced value claims a uniformly
//! random slot; the slot's owner grants the first claim and rejects the
//! rest, and rejected values retry next round. The oversized board keeps at
//! least half the slots empty, so outstanding darts halve per round in
//! expectation and the round cap `10·⌈log₂ m⌉ + 50` holds with wide margin.
//! Occupied slots are then compacted by a prefix scan into the final
//! cyclic target array of `m` positions.
//!
//! Each round is one superstep: a fresh two-mailbox selector
//! `{Outside → Claim, Claim → Verdict}` plus an allreduce of the
//! outstanding count. Validity routes every target value to its owner and
//! checks each of `0..m` arrived exactly once.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use fabsp::{ConveyorStats, GraphNode, PeId, Selector, TerminationGraph};

use crate::checksum::{combine, pair_digest};
use crate::gen;
use crate::report::{allreduce_stats, run_collect, App, AppConfig, AppReport, KernelOutcome};
use crate::sparse;

const CLAIM: usize = 0;
const VERDICT: usize = 1;

/// Empty-slot sentinel; real values are `< m ≤ u64::MAX`.
const EMPTY: u64 = u64::MAX;

/// Hard bound on dart-throwing rounds: `10·⌈log₂ m⌉ + 50`.
pub fn round_cap(m: u64) -> u64 {
    if m <= 1 {
        50
    } else {
        10 * (64 - (m - 1).leading_zeros()) as u64 + 50
    }
}

/// The per-round dart stream for one PE.
fn dart_stream(seed: u64, rank: usize, round: u64) -> rand_chacha::ChaCha8Rng {
    gen::stream(seed, gen::salt::DARTS, (round << 32) | rank as u64)
}

/// Serial oracle: replays the P=1 execution exactly — same streams, same
/// grant-first semantics, same compaction — so the distributed run at one
/// PE must match it bit for bit.
pub fn serial_permutation(elements: u64, seed: u64) -> Vec<u64> {
    use rand::Rng;
    let m = elements;
    let board_size = 2 * m;
    let mut board = vec![EMPTY; board_size as usize];
    let mut outstanding: Vec<u64> = (0..m).collect();
    let mut round = 0u64;
    while !outstanding.is_empty() {
        assert!(
            round < round_cap(m),
            "dart throwing failed to converge: {} outstanding after {round} rounds (m={m})",
            outstanding.len()
        );
        let mut rng = dart_stream(seed, 0, round);
        let mut retry = Vec::new();
        for v in outstanding {
            let s = rng.gen_range(0..board_size) as usize;
            if board[s] == EMPTY {
                board[s] = v;
            } else {
                retry.push(v);
            }
        }
        outstanding = retry;
        round += 1;
    }
    board.into_iter().filter(|&v| v != EMPTY).collect()
}

pub fn run(cfg: &AppConfig) -> AppReport {
    run_full(cfg, false).0
}

/// Like [`run`], also returning the gathered target array (test path).
pub fn run_gather(cfg: &AppConfig) -> (AppReport, Vec<u64>) {
    let (report, target) = run_full(cfg, true);
    (report, target.expect("gather requested"))
}

fn run_full(cfg: &AppConfig, gather: bool) -> (AppReport, Option<Vec<u64>>) {
    let c = cfg.clone();
    let (outcome, target_full) = run_collect(cfg.fabric(), move |pe| {
        let cfg = c.clone();
        async move {
            let me = pe.rank().rank();
            let npes = pe.npes() as u64;
            let m = cfg.elements_per_pe * npes;
            let slots_per_pe = 2 * cfg.elements_per_pe;
            // Block layout: slot s lives on PE s / slots_per_pe.
            let board = Rc::new(RefCell::new(vec![EMPTY; slots_per_pe as usize]));
            // This PE's values, cyclic: v ≡ me (mod P).
            let mut outstanding: Vec<u64> =
                (0..cfg.elements_per_pe).map(|l| l * npes + me as u64).collect();

            pe.barrier().await;
            let t0 = Instant::now();

            let mut rounds = 0u64;
            let mut stats = ConveyorStats::default();
            let mut total_out = pe.allreduce_sum(outstanding.len() as u64).await;
            while total_out > 0 {
                assert!(
                    rounds < round_cap(m),
                    "dart throwing failed to converge: {total_out} outstanding \
                     after {rounds} rounds (m={m})"
                );
                let graph = TerminationGraph::new(
                    2,
                    [
                        (GraphNode::Outside, CLAIM),
                        (GraphNode::Mailbox(CLAIM), VERDICT),
                    ],
                )
                .unwrap();
                let slots = board.clone();
                let base = me as u64 * slots_per_pe;
                let retry: Rc<RefCell<Vec<u64>>> = Rc::default();
                let failures = retry.clone();
                let handle = Selector::<(u64, u64)>::new(graph)
                    .ring_capacity(cfg.ring_capacity)
                    .buffer_items(cfg.buffer_items)
                    .on_sending(CLAIM, move |s, (v, slot), from| {
                        let mut b = slots.borrow_mut();
                        let cell = &mut b[(slot - base) as usize];
                        let granted = if *cell == EMPTY {
                            *cell = v;
                            1
                        } else {
                            0
                        };
                        Box::pin(async move {
                            s.send(VERDICT, from, (v, granted)).await.unwrap();
                        })
                    })
                    .on_sync(VERDICT, move |(v, granted), _from| {
                        if granted == 0 {
                            failures.borrow_mut().push(v);
                        }
                    })
                    .start(&pe)
                    .await;

                let mut rng = dart_stream(cfg.seed, me, rounds);
                for v in outstanding.drain(..) {
                    use rand::Rng;
                    let slot = rng.gen_range(0..2 * m);
                    handle
                        .send(CLAIM, PeId::new((slot / slots_per_pe) as usize), (v, slot))
                        .await
                        .unwrap();
                }
                handle.done(CLAIM).unwrap();
                handle.all_done().await;
                stats += handle.total_stats();

                outstanding = retry.take();
                rounds += 1;
                total_out = pe.allreduce_sum(outstanding.len() as u64).await;
            }

            // Compaction: occupied slots keep their global slot order, so a
            // prefix scan of local counts yields each PE's position range.
            let placed: Vec<u64> = board
                .borrow()
                .iter()
                .copied()
                .filter(|&v| v != EMPTY)
                .collect();
            let (prefix, total) = pe.exscan_sum(placed.len() as u64).await;
            assert_eq!(total, m, "every value must land exactly once");
            let target: Rc<RefCell<Vec<u64>>> =
                Rc::new(RefCell::new(vec![EMPTY; cfg.elements_per_pe as usize]));
            {
                let graph = TerminationGraph::new(1, [(GraphNode::Outside, 0)]).unwrap();
                let sink = target.clone();
                let handle = Selector::<(u64, u64)>::new(graph)
                    .ring_capacity(cfg.ring_capacity)
                    .buffer_items(cfg.buffer_items)
                    .on_sync(0, move |(k, v), _from| {
                        sink.borrow_mut()[(k / npes) as usize] = v;
                    })
                    .start(&pe)
                    .await;
                for (i, &v) in placed.iter().enumerate() {
                    let k = prefix + i as u64;
                    handle
                        .send(0, PeId::new((k % npes) as usize), (k, v))
                        .await
                        .unwrap();
                }
                handle.done(0).unwrap();
                handle.all_done().await;
                stats += handle.total_stats();
            }
            pe.barrier().await;
            let wall = t0.elapsed().as_secs_f64();

            let stats = allreduce_stats(&pe, stats).await;
            let local = target.borrow();
            let partial = combine(
                local
                    .iter()
                    .enumerate()
                    .map(|(l, &v)| pair_digest((l as u64) * npes + me as u64, v)),
            );
            let digest = pe.allreduce_sum(partial).await;

            // Permutation check: route each value to its owner; every value
            // in 0..m must arrive exactly once.
            let valid = if cfg.validate {
                let counts: Rc<RefCell<Vec<u64>>> =
                    Rc::new(RefCell::new(vec![0u64; cfg.elements_per_pe as usize]));
                let range_bad = Rc::new(std::cell::Cell::new(0u64));
                let graph = TerminationGraph::new(1, [(GraphNode::Outside, 0)]).unwrap();
                let tally = counts.clone();
                let bad = range_bad.clone();
                let handle = Selector::<u64>::new(graph)
                    .ring_capacity(cfg.ring_capacity)
                    .buffer_items(cfg.buffer_items)
                    .on_sync(0, move |v, _from| {
                        if v < m {
                            tally.borrow_mut()[(v / npes) as usize] += 1;
                        } else {
                            bad.set(bad.get() + 1);
                        }
                    })
                    .start(&pe)
                    .await;
                for &v in local.iter() {
                    handle.send(0, PeId::new((v % npes) as usize), v).await.unwrap();
                }
                handle.done(0).unwrap();
                handle.all_done().await;
                let wrong = counts.borrow().iter().filter(|&&c| c != 1).count() as u64
                    + range_bad.get();
                Some(pe.allreduce_sum(wrong).await == 0)
            } else {
                None
            };

            let gathered = if gather {
                sparse::gather_cyclic(&pe, &local).await
            } else {
                None
            };

            if me != 0 {
                return None;
            }
            let outcome = KernelOutcome {
                wall_seconds: wall,
                stats,
                rounds: Some(rounds),
                checksum: digest,
                valid,
            };
            Some((outcome, gathered))
        }
    });
    (
        AppReport::build(App::RandomPermutation, cfg, outcome),
        target_full,
    )
}
