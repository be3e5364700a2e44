//! Randomized conveyor sessions: arbitrary interleavings of push, pull,
//! done, and advance across varying PE counts, buffer capacities, and
//! transport inbox sizes must conserve the pushed multiset exactly and
//! terminate without deadlock.

use std::sync::{Arc, Mutex};

use fabsp::conveyor::Conveyor;
use fabsp::{launch_spmd, yield_now, FabricConfig, PeId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// The destination plan for one PE, replayable by the checker: how many
/// items it sends and where each one goes. Kept on a dedicated RNG stream so
/// scheduling draws cannot perturb it.
fn dest_plan(seed: u64, rank: usize, npes: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let total = rng.gen_range(0..150);
    (0..total).map(|_| rng.gen_range(0..npes)).collect()
}

fn run_session(seed: u64, npes: usize, buffer_items: usize, inbox_capacity: usize) {
    let mut config = FabricConfig::new(npes);
    config.inbox_capacity = inbox_capacity;
    config.step_limit = Some(100_000_000);

    let received: Arc<Mutex<Vec<(usize, u64)>>> = Arc::default();
    let sink = received.clone();
    launch_spmd(config, move |pe| {
        let received = sink.clone();
        async move {
            let me = pe.rank().rank();
            let dests = dest_plan(seed, me, pe.npes());
            let mut sched =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(me as u64 + 1));
            let mut conv: Conveyor<u64> =
                Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), buffer_items);
            let mut next = 0usize;
            let mut local = Vec::new();
            loop {
                let stats_before = conv.stats();
                let more = conv.advance(next == dests.len()).unwrap();
                let burst = sched.gen_range(0..12usize);
                for _ in 0..burst {
                    if next >= dests.len() {
                        break;
                    }
                    let value = ((me as u64) << 32) | next as u64;
                    if !conv.push(PeId::new(dests[next]), value).unwrap() {
                        break;
                    }
                    next += 1;
                }
                let pulls = if sched.gen_bool(0.25) {
                    usize::MAX
                } else {
                    sched.gen_range(0..6)
                };
                for _ in 0..pulls {
                    match conv.pull() {
                        Some((value, from)) => {
                            assert_eq!(
                                (value >> 32) as usize,
                                from.rank(),
                                "item delivered with wrong sender attribution"
                            );
                            local.push(value);
                        }
                        None => break,
                    }
                }
                if !more {
                    break;
                }
                // A cycle that moved nothing is waiting on another PE's
                // thread; hand the core back to the OS so it can run now
                // rather than after a full scheduler timeslice.
                if conv.stats() == stats_before {
                    std::thread::yield_now();
                }
                yield_now().await;
            }
            assert_eq!(conv.pull(), None, "items appeared after completion");
            assert_eq!(conv.stats().items_pushed, dests.len() as u64);
            let mut out = received.lock().unwrap();
            out.extend(local.into_iter().map(|v| (me, v)));
        }
    });

    let mut got = received.lock().unwrap().clone();
    got.sort_unstable();
    let mut want = Vec::new();
    for src in 0..npes {
        for (seq, &dest) in dest_plan(seed, src, npes).iter().enumerate() {
            want.push((dest, ((src as u64) << 32) | seq as u64));
        }
    }
    want.sort_unstable();
    assert_eq!(
        got, want,
        "multiset conservation failed: seed={seed} npes={npes} \
         buffer_items={buffer_items} inbox_capacity={inbox_capacity}"
    );
}

#[test]
fn randomized_sessions_conserve_items() {
    let mut master = ChaCha8Rng::seed_from_u64(0xfab5_0001);
    for _ in 0..40 {
        let npes = *[1, 2, 4, 8].choose(&mut master).unwrap();
        let buffer_items = *[1, 2, 3, 8, 64].choose(&mut master).unwrap();
        let inbox_capacity = *[1, 4, 64].choose(&mut master).unwrap();
        let seed = master.gen();
        run_session(seed, npes, buffer_items, inbox_capacity);
    }
}

#[test]
fn single_item_smallest_session() {
    run_session(7, 1, 1, 1);
}
