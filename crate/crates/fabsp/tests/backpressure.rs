//! Backpressure and scheduling edge cases: minimal ring, buffer, and inbox
//! capacities; senders that arrive long after everyone else; loopback
//! forwarding; and many concurrent producer tasks sharing one selector.

use std::cell::Cell;
use std::rc::Rc;

use fabsp::{
    finish, launch_spmd, spawn, yield_now, FabricConfig, GraphNode, PeId, Selector,
    TerminationGraph,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn outside_only(n: usize) -> TerminationGraph {
    TerminationGraph::new(n, (0..n).map(|m| (GraphNode::Outside, m))).unwrap()
}

/// Every capacity in the pipeline at its minimum, 1000 messages per PE.
#[test]
fn minimum_capacities_deliver_everything() {
    let mut config = FabricConfig::new(4);
    config.inbox_capacity = 1;
    config.step_limit = Some(500_000_000);
    launch_spmd(config, |pe| async move {
        let me = pe.rank().rank() as u64;
        let npes = pe.npes();
        let count: Rc<Cell<u64>> = Rc::default();
        let count2 = count.clone();
        let sel = Selector::<u64>::new(outside_only(1))
            .ring_capacity(1)
            .buffer_items(1)
            .on_sync(0, move |_, _| count2.set(count2.get() + 1))
            .start(&pe)
            .await;
        let mut rng = ChaCha8Rng::seed_from_u64(me);
        for i in 0..1000u64 {
            let dest = PeId::new(rng.gen_range(0..npes));
            sel.send(0, dest, me * 10_000 + i).await.unwrap();
        }
        sel.done(0).unwrap();
        sel.all_done().await;
        let grand = pe.allreduce_sum(count.get()).await;
        assert_eq!(grand, 4000);
    });
}

/// One PE stays silent through thousands of scheduler turns while the rest
/// finish instantly; termination must wait for its items and its done.
#[test]
fn late_sender_holds_termination_open() {
    launch_spmd(FabricConfig::new(4), |pe| async move {
        let me = pe.rank().rank();
        let count: Rc<Cell<u64>> = Rc::default();
        let count2 = count.clone();
        let sel = Selector::<u64>::new(outside_only(1))
            .on_sync(0, move |_, _| count2.set(count2.get() + 1))
            .start(&pe)
            .await;
        if me == 3 {
            for _ in 0..2000 {
                yield_now().await;
            }
            for i in 0..50u64 {
                sel.send(0, PeId::new(0), i).await.unwrap();
            }
        }
        sel.done(0).unwrap();
        sel.all_done().await;
        let expected = if me == 0 { 50 } else { 0 };
        assert_eq!(count.get(), expected);
    });
}

/// A handler forwarding to another mailbox on its *own* PE: loopback frames
/// must flow even while the same worker drives both conveyors.
#[test]
fn handler_loopback_to_same_pe() {
    launch_spmd(FabricConfig::new(2), |pe| async move {
        let graph = TerminationGraph::new(
            2,
            [(GraphNode::Outside, 0), (GraphNode::Mailbox(0), 1)],
        )
        .unwrap();
        let got: Rc<Cell<u64>> = Rc::default();
        let got2 = got.clone();
        let sel = Selector::<u64>::new(graph)
            .on_sending(0, |s, v, _| {
                Box::pin(async move {
                    // Redirect to mailbox 1 of the PE handling this message.
                    s.send(1, s.rank(), v).await.unwrap();
                })
            })
            .on_sync(1, move |v, _| got2.set(got2.get() + v))
            .start(&pe)
            .await;
        let other = PeId::new(1 - pe.rank().rank());
        for i in 1..=10u64 {
            sel.send(0, other, i).await.unwrap();
        }
        sel.done(0).unwrap();
        sel.all_done().await;
        assert_eq!(got.get(), 55, "sum 1..=10 forwarded via loopback");
    });
}

/// Four producer tasks per PE share one selector handle through a finish
/// scope; done is only declared after the scope proves they all finished.
#[test]
fn concurrent_producer_tasks_share_handle() {
    launch_spmd(FabricConfig::new(2), |pe| async move {
        let npes = pe.npes();
        let count: Rc<Cell<u64>> = Rc::default();
        let count2 = count.clone();
        let sel = Selector::<u64>::new(outside_only(1))
            .ring_capacity(2)
            .on_sync(0, move |v, _| count2.set(count2.get() + v))
            .start(&pe)
            .await;
        finish({
            let sel = sel.clone();
            async move {
                for t in 0..4u64 {
                    let sel = sel.clone();
                    spawn(async move {
                        for i in 0..100u64 {
                            let dest = PeId::new(((t + i) % npes as u64) as usize);
                            sel.send(0, dest, 1).await.unwrap();
                        }
                    });
                }
            }
        })
        .await;
        sel.done(0).unwrap();
        sel.all_done().await;
        let grand = pe.allreduce_sum(count.get()).await;
        assert_eq!(grand, (npes * 400) as u64);
    });
}
