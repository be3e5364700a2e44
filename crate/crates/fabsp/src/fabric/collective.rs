//! Naive collectives over the frame transport.
//!
//! Everything funnels through rank 0: gather-to-root plus broadcast. Each
//! collective call consumes one or more sequence numbers from a per-PE
//! counter; because every PE invokes collectives in the same program order
//! (SPMD discipline), sequence numbers agree without negotiation. Payloads
//! ride `FrameKind::Control` frames and are matched by sequence number, so
//! collective traffic can interleave with conveyor traffic on the same
//! inboxes.

use std::time::Instant;

use super::transport::{BufferFrame, FrameKind, CONTROL_CHANNEL};
use super::{launch::Pe, PeId};
use crate::task::yield_now;

const ROOT: PeId = PeId(0);

impl Pe {
    fn next_seq(&self) -> u64 {
        let seq = self.inner.next_collective_seq.get();
        self.inner.next_collective_seq.set(seq + 1);
        seq
    }

    async fn ctl_send(&self, dest: PeId, seq: u64, bytes: Vec<u8>) {
        let frame = BufferFrame {
            conveyor_id: CONTROL_CHANNEL,
            sender: self.rank(),
            kind: FrameKind::Control { seq, bytes },
        };
        let start = Instant::now();
        let mut tries = 0u32;
        loop {
            if self.inner.transport.send_frame(dest, frame.clone()) {
                return;
            }
            tries += 1;
            if tries % 4096 == 0 {
                self.check_collective_timeout(seq, start);
            }
            // The destination inbox is full: that PE needs CPU time to
            // drain it, so hand the core back to the OS, not just to our
            // own task scheduler.
            std::thread::yield_now();
            yield_now().await;
        }
    }

    async fn ctl_recv(&self, seq: u64) -> (PeId, Vec<u8>) {
        let start = Instant::now();
        let mut tries = 0u32;
        loop {
            if let Some(got) = self.router().poll_control(seq) {
                return got;
            }
            tries += 1;
            if tries % 4096 == 0 {
                self.check_collective_timeout(seq, start);
            }
            // Waiting on a remote contribution; let sibling PE threads run.
            std::thread::yield_now();
            yield_now().await;
        }
    }

    fn check_collective_timeout(&self, seq: u64, start: Instant) {
        if let Some(limit) = self.inner.collective_timeout {
            assert!(
                start.elapsed() < limit,
                "PE {}: collective timeout on sequence {seq} (a PE never arrived)",
                self.rank()
            );
        }
    }

    /// Blocks until every PE has entered the barrier.
    pub async fn barrier(&self) {
        self.allreduce_sum(0).await;
    }

    /// Wrapping sum of every PE's contribution, returned on every PE.
    pub async fn allreduce_sum(&self, x: u64) -> u64 {
        let seq = self.next_seq();
        if self.rank() == ROOT {
            let mut acc = x;
            for _ in 1..self.npes() {
                let (_, bytes) = self.ctl_recv(seq).await;
                acc = acc.wrapping_add(u64::from_le_bytes(bytes.try_into().unwrap()));
            }
            for rank in 1..self.npes() {
                self.ctl_send(PeId(rank), seq, acc.to_le_bytes().to_vec())
                    .await;
            }
            acc
        } else {
            self.ctl_send(ROOT, seq, x.to_le_bytes().to_vec()).await;
            let (_, bytes) = self.ctl_recv(seq).await;
            u64::from_le_bytes(bytes.try_into().unwrap())
        }
    }

    /// Collects every PE's bytes at rank 0 (`Some`, ordered by rank);
    /// other ranks get `None`.
    pub async fn gather_bytes(&self, mine: Vec<u8>) -> Option<Vec<Vec<u8>>> {
        let seq = self.next_seq();
        if self.rank() == ROOT {
            let mut slots: Vec<Option<Vec<u8>>> = vec![None; self.npes()];
            slots[0] = Some(mine);
            for _ in 1..self.npes() {
                let (from, bytes) = self.ctl_recv(seq).await;
                assert!(
                    slots[from.rank()].replace(bytes).is_none(),
                    "duplicate gather contribution from {from:?}"
                );
            }
            Some(slots.into_iter().map(Option::unwrap).collect())
        } else {
            self.ctl_send(ROOT, seq, mine).await;
            None
        }
    }

    /// Sends rank 0's bytes to every PE. Only rank 0's argument is used.
    pub async fn broadcast_bytes(&self, mine: Option<Vec<u8>>) -> Vec<u8> {
        let seq = self.next_seq();
        if self.rank() == ROOT {
            let bytes = mine.expect("broadcast root must supply bytes");
            for rank in 1..self.npes() {
                self.ctl_send(PeId(rank), seq, bytes.clone()).await;
            }
            bytes
        } else {
            self.ctl_recv(seq).await.1
        }
    }

    /// Rank 0 supplies one chunk per PE; each PE receives its chunk.
    pub async fn scatter_bytes(&self, chunks: Option<Vec<Vec<u8>>>) -> Vec<u8> {
        let seq = self.next_seq();
        if self.rank() == ROOT {
            let mut chunks = chunks.expect("scatter root must supply chunks");
            assert_eq!(chunks.len(), self.npes(), "scatter needs one chunk per PE");
            for rank in (1..self.npes()).rev() {
                self.ctl_send(PeId(rank), seq, chunks.pop().unwrap()).await;
            }
            chunks.pop().unwrap()
        } else {
            self.ctl_recv(seq).await.1
        }
    }

    /// Exclusive prefix sum across ranks: returns `(sum of ranks < me, total)`.
    pub async fn exscan_sum(&self, x: u64) -> (u64, u64) {
        let gathered = self.gather_bytes(x.to_le_bytes().to_vec()).await;
        let chunks = gathered.map(|parts| {
            let mut acc = 0u64;
            let mut out = Vec::with_capacity(parts.len());
            let values: Vec<u64> = parts
                .iter()
                .map(|b| u64::from_le_bytes(b.as_slice().try_into().unwrap()))
                .collect();
            let total: u64 = values.iter().fold(0u64, |a, v| a.wrapping_add(*v));
            for v in values {
                let mut chunk = acc.to_le_bytes().to_vec();
                chunk.extend_from_slice(&total.to_le_bytes());
                out.push(chunk);
                acc = acc.wrapping_add(v);
            }
            out
        });
        let mine = self.scatter_bytes(chunks).await;
        (
            u64::from_le_bytes(mine[..8].try_into().unwrap()),
            u64::from_le_bytes(mine[8..16].try_into().unwrap()),
        )
    }
}
