//! Topological sort of a scrambled unit-upper-triangular matrix: recover
//! row/column permutations that restore upper-triangular form.
//!
//! The input is a unit-upper pattern with random row and column scrambles
//! applied. The algorithm repeatedly claims rows with exactly one
//! unresolved nonzero; such a row and its lone column receive the same
//! position, assigned from `n-1` downward, so earlier-resolved columns sit
//! to the right. Each wavefront round is a two-mailbox selector
//! `{Outside → ColumnClaim, ColumnClaim → Decrement}`: a claimed column's
//! owner records its position and fans out decrements to every row that
//! contains the column (found in the transpose, which the kernel computes
//! first with the transpose machinery). A round that claims nothing while
//! rows remain is a stalled wavefront: the input was not a permuted
//! unit-upper matrix, and the run reports invalid.
//!
//! Rows track their unresolved set as a count plus a column sum; when the
//! count hits one, the sum *is* the lone column.

use std::time::Instant;

use fabsp::{ConveyorStats, GraphNode, Pe, PeId, Selector, TerminationGraph};

use crate::checksum::{combine, pair_digest};
use crate::report::{allreduce_stats, run_collect, App, AppConfig, AppReport, KernelOutcome};
use crate::sparse::{gather_cyclic, gather_matrix, scatter_perm, FullMatrix, LocalCsr};
use crate::{apps::permute_matrix::relocate_kernel, apps::transpose::transpose_kernel, gen};

const COL_CLAIM: usize = 0;
const DECREMENT: usize = 1;

/// Position sentinel for never-claimed rows/columns (stalled inputs).
const UNSET: u64 = u64::MAX;

/// What the distributed kernel leaves on each PE.
pub(crate) struct KernelResult {
    /// Position of each owned row (cyclic by row).
    pub pos_row: Vec<u64>,
    /// Position of each owned column (cyclic by column).
    pub pos_col: Vec<u64>,
    pub rounds: u64,
    /// False iff the wavefront stalled before claiming every row.
    pub completed: bool,
    pub stats: ConveyorStats,
}

/// Runs the wavefront elimination on the scrambled matrix `a`.
pub(crate) async fn toposort_kernel(
    pe: &Pe,
    a: &LocalCsr,
    ring_capacity: usize,
    buffer_items: usize,
) -> KernelResult {
    use std::cell::RefCell;
    use std::rc::Rc;

    let npes = pe.npes() as u64;
    let n = a.nrows_global as u64;
    let mut stats = ConveyorStats::default();

    // The transpose tells each column's owner which rows contain it.
    let (t, t_stats) = transpose_kernel(pe, a, ring_capacity, buffer_items).await;
    stats += t_stats;
    let t = Rc::new(t);

    let local_rows = a.local_rows();
    let local_cols = t.local_rows();
    // Per-row unresolved state: count and column sum; claimed guard.
    let cnt: Rc<RefCell<Vec<u64>>> = Rc::new(RefCell::new(
        (0..local_rows).map(|l| a.row(l).len() as u64).collect(),
    ));
    let sum: Rc<RefCell<Vec<u64>>> = Rc::new(RefCell::new(
        (0..local_rows).map(|l| a.row(l).iter().sum()).collect(),
    ));
    let mut claimed = vec![false; local_rows];
    let mut pos_row = vec![UNSET; local_rows];
    let pos_col: Rc<RefCell<Vec<u64>>> = Rc::new(RefCell::new(vec![UNSET; local_cols]));

    let mut resolved = 0u64;
    let mut rounds = 0u64;
    let completed = loop {
        if resolved == n {
            break true;
        }
        // Claim every local row whose unresolved set is a single column.
        let mut claims: Vec<(usize, u64)> = Vec::new();
        {
            let cnt = cnt.borrow();
            let sum = sum.borrow();
            for l in 0..local_rows {
                if !claimed[l] && cnt[l] == 1 {
                    claims.push((l, sum[l]));
                }
            }
        }
        for &(l, _) in &claims {
            claimed[l] = true;
        }
        let (prefix, w_total) = pe.exscan_sum(claims.len() as u64).await;
        if w_total == 0 {
            break false; // stalled wavefront: not a permuted unit-upper input
        }

        let graph = TerminationGraph::new(
            2,
            [
                (GraphNode::Outside, COL_CLAIM),
                (GraphNode::Mailbox(COL_CLAIM), DECREMENT),
            ],
        )
        .unwrap();
        let fanout = t.clone();
        let col_positions = pos_col.clone();
        let cnt_sink = cnt.clone();
        let sum_sink = sum.clone();
        let handle = Selector::<(u64, u64)>::new(graph)
            .ring_capacity(ring_capacity)
            .buffer_items(buffer_items)
            .on_sending(COL_CLAIM, move |s, (c, k), _from| {
                let l = (c / npes) as usize;
                col_positions.borrow_mut()[l] = k;
                let rows = fanout.clone();
                Box::pin(async move {
                    for &r in rows.row(l) {
                        s.send(DECREMENT, PeId::new((r % npes) as usize), (r, c))
                            .await
                            .unwrap();
                    }
                })
            })
            .on_sync(DECREMENT, move |(r, c), _from| {
                let l = (r / npes) as usize;
                cnt_sink.borrow_mut()[l] -= 1;
                sum_sink.borrow_mut()[l] -= c;
            })
            .start(pe)
            .await;
        // Positions count down from n-1: this wavefront occupies
        // [n - resolved - w_total, n - resolved).
        let base = n - resolved;
        for (j, &(l, c)) in claims.iter().enumerate() {
            let k = base - 1 - prefix - j as u64;
            pos_row[l] = k;
            handle
                .send(COL_CLAIM, PeId::new((c % npes) as usize), (c, k))
                .await
                .unwrap();
        }
        handle.done(COL_CLAIM).unwrap();
        handle.all_done().await;
        stats += handle.total_stats();

        resolved += w_total;
        rounds += 1;
    };

    KernelResult {
        pos_row,
        pos_col: pos_col.take(),
        rounds,
        completed,
        stats,
    }
}

/// The scrambled input matrix (identical for every PE count).
pub fn serial_input(cfg: &AppConfig) -> FullMatrix {
    let n = (cfg.rows_per_pe * cfg.pes as u64) as usize;
    let upper = FullMatrix::generate(n, n, |r| {
        gen::unit_upper_row(cfg.seed, r, n as u64, cfg.nnz_per_row)
    });
    let pr = gen::random_perm(cfg.seed, gen::salt::ROW_PERM, n);
    let pc = gen::random_perm(cfg.seed, gen::salt::COL_PERM, n);
    upper.permuted(&pr, &pc)
}

/// Serial oracle: the same wavefront elimination, replayed on one thread
/// with rows scanned in increasing index order (the P=1 schedule).
/// Returns `None` on a stalled wavefront.
pub fn serial_toposort(a: &FullMatrix) -> Option<(Vec<u64>, Vec<u64>, u64)> {
    let n = a.nrows();
    let t = a.transpose();
    let mut cnt: Vec<u64> = a.rows.iter().map(|r| r.len() as u64).collect();
    let mut sum: Vec<u64> = a.rows.iter().map(|r| r.iter().sum()).collect();
    let mut claimed = vec![false; n];
    let mut pos_row = vec![UNSET; n];
    let mut pos_col = vec![UNSET; n];
    let mut resolved = 0u64;
    let mut rounds = 0u64;
    while resolved < n as u64 {
        let claims: Vec<(usize, u64)> = (0..n)
            .filter(|&r| !claimed[r] && cnt[r] == 1)
            .map(|r| (r, sum[r]))
            .collect();
        if claims.is_empty() {
            return None;
        }
        let base = n as u64 - resolved;
        for (j, &(r, c)) in claims.iter().enumerate() {
            claimed[r] = true;
            let k = base - 1 - j as u64;
            pos_row[r] = k;
            pos_col[c as usize] = k;
        }
        for &(_, c) in &claims {
            for &r in &t.rows[c as usize] {
                cnt[r as usize] -= 1;
                sum[r as usize] -= c;
            }
        }
        resolved += claims.len() as u64;
        rounds += 1;
    }
    Some((pos_row, pos_col, rounds))
}

/// True iff `p` is a permutation of `0..p.len()`.
fn is_permutation(p: &[u64]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&v| {
        (v as usize) < seen.len() && !std::mem::replace(&mut seen[v as usize], true)
    })
}

/// The acceptance test for an output pair: both are permutations and
/// applying them to the scrambled matrix restores unit-upper form.
pub fn checker(a: &FullMatrix, pos_row: &[u64], pos_col: &[u64]) -> bool {
    is_permutation(pos_row)
        && is_permutation(pos_col)
        && a.permuted(pos_row, pos_col).is_unit_upper()
}

pub fn run(cfg: &AppConfig) -> AppReport {
    run_full(cfg, false).0
}

/// Like [`run`], also returning the gathered `(σ_r, σ_c)` pair.
pub fn run_gather(cfg: &AppConfig) -> (AppReport, (Vec<u64>, Vec<u64>)) {
    let (report, out) = run_full(cfg, true);
    (report, out.expect("gather requested"))
}

fn run_full(cfg: &AppConfig, gather: bool) -> (AppReport, Option<(Vec<u64>, Vec<u64>)>) {
    let c = cfg.clone();
    let (outcome, perms) = run_collect(cfg.fabric(), move |pe| {
        let cfg = c.clone();
        async move {
            let me = pe.rank().rank();
            let npes = pe.npes() as u64;
            let n = (cfg.rows_per_pe * npes) as usize;
            // Build the scrambled input: generate owned unit-upper rows and
            // relocate every entry through the permutation pipeline.
            let upper = LocalCsr::generate(&pe, n, n, |r| {
                gen::unit_upper_row(cfg.seed, r, n as u64, cfg.nnz_per_row)
            });
            let pr_local = scatter_perm(&pe, cfg.seed, gen::salt::ROW_PERM, n).await;
            let pc_local = scatter_perm(&pe, cfg.seed, gen::salt::COL_PERM, n).await;
            let (a, _) = relocate_kernel(
                &pe,
                &upper,
                &pr_local,
                pc_local,
                cfg.ring_capacity,
                cfg.buffer_items,
            )
            .await;

            pe.barrier().await;
            let t0 = Instant::now();
            let result = toposort_kernel(&pe, &a, cfg.ring_capacity, cfg.buffer_items).await;
            pe.barrier().await;
            let wall = t0.elapsed().as_secs_f64();

            let stats = allreduce_stats(&pe, result.stats).await;
            let base_row = me as u64;
            let partial = combine(
                result
                    .pos_row
                    .iter()
                    .enumerate()
                    .map(|(l, &v)| pair_digest(base_row + (l as u64) * npes, v))
                    .chain(result.pos_col.iter().enumerate().map(|(l, &v)| {
                        pair_digest(n as u64 + base_row + (l as u64) * npes, v)
                    })),
            );
            let digest = pe.allreduce_sum(partial).await;

            let need_gather = cfg.validate || gather;
            let gathered = if need_gather {
                let sr = gather_cyclic(&pe, &result.pos_row).await;
                let sc = gather_cyclic(&pe, &result.pos_col).await;
                let a_full = gather_matrix(&pe, &a).await.expect(
                    "topological-sort validation needs the gathered matrix; \
                     disable validation for runs beyond oracle scale",
                );
                sr.map(|sr| (sr, sc.unwrap(), a_full.unwrap()))
            } else {
                None
            };

            if me != 0 {
                return None;
            }
            let mut out_perms = None;
            let valid = match gathered {
                Some((sr, sc, a_full)) => {
                    let ok = result.completed && checker(&a_full, &sr, &sc);
                    if gather {
                        out_perms = Some((sr, sc));
                    }
                    cfg.validate.then_some(ok)
                }
                None => None,
            };
            let outcome = KernelOutcome {
                wall_seconds: wall,
                stats,
                rounds: Some(result.rounds),
                checksum: digest,
                valid,
            };
            Some((outcome, out_perms))
        }
    });
    (AppReport::build(App::TopologicalSort, cfg, outcome), perms)
}
