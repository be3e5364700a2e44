//! Sparse pattern matrices and distributed array plumbing.
//!
//! Distributed matrices are partitioned cyclically by row and stored as
//! compressed rows (offsets + sorted column indices). Serial oracles work on
//! [`FullMatrix`], a plain row-of-columns form gathered to rank 0; gathering
//! is guarded so oracle mode cannot be asked to materialize huge runs.

use fabsp::Pe;

use crate::checksum;

/// Largest global nonzero count the gathered-oracle path accepts.
pub const GATHER_GUARD_NNZ: u64 = 10_000_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("gathered-oracle mode is limited to {GATHER_GUARD_NNZ} entries; run has {0}")]
pub struct OracleScaleError(pub u64);

/// The local partition of a pattern matrix distributed cyclically by row:
/// this PE holds global rows `l * npes + me` as compressed rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCsr {
    pub nrows_global: usize,
    pub ncols_global: usize,
    pub me: usize,
    pub npes: usize,
    offsets: Vec<usize>,
    cols: Vec<u64>,
}

impl LocalCsr {
    /// Builds this PE's partition by calling `row_of` for each owned global
    /// row. `row_of` must return strictly increasing columns.
    pub fn generate(
        pe: &Pe,
        nrows_global: usize,
        ncols_global: usize,
        mut row_of: impl FnMut(u64) -> Vec<u64>,
    ) -> Self {
        let me = pe.rank().rank();
        let npes = pe.npes();
        let local = pe.layout().local_count(nrows_global, pe.rank());
        let mut offsets = Vec::with_capacity(local + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for l in 0..local {
            let g = pe.layout().global_of(pe.rank(), l) as u64;
            cols.extend(row_of(g));
            offsets.push(cols.len());
        }
        let out = LocalCsr {
            nrows_global,
            ncols_global,
            me,
            npes,
            offsets,
            cols,
        };
        out.validate();
        out
    }

    /// Builds the partition from per-local-row column lists (sorting each).
    pub fn from_row_lists(
        pe: &Pe,
        nrows_global: usize,
        ncols_global: usize,
        mut rows: Vec<Vec<u64>>,
    ) -> Self {
        let local = pe.layout().local_count(nrows_global, pe.rank());
        assert_eq!(rows.len(), local, "row list count must match owned rows");
        let mut offsets = Vec::with_capacity(local + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_unstable();
            cols.extend(row.iter().copied());
            offsets.push(cols.len());
        }
        let out = LocalCsr {
            nrows_global,
            ncols_global,
            me: pe.rank().rank(),
            npes: pe.npes(),
            offsets,
            cols,
        };
        out.validate();
        out
    }

    pub fn local_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn global_row(&self, l: usize) -> u64 {
        (l * self.npes + self.me) as u64
    }

    pub fn row(&self, l: usize) -> &[u64] {
        &self.cols[self.offsets[l]..self.offsets[l + 1]]
    }

    pub fn nnz_local(&self) -> u64 {
        self.cols.len() as u64
    }

    /// All local entries as `(global_row, col)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        (0..self.local_rows())
            .flat_map(move |l| self.row(l).iter().map(move |&c| (self.global_row(l), c)))
    }

    /// Order/partition-independent digest of the entry set.
    pub fn digest(&self) -> u64 {
        checksum::combine(self.entries().map(|(r, c)| checksum::pair_digest(r, c)))
    }

    /// Enforces the partition invariants: monotone offsets, strictly
    /// increasing columns within each row, columns in range.
    pub fn validate(&self) {
        assert!(self.offsets.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*self.offsets.last().unwrap(), self.cols.len());
        for l in 0..self.local_rows() {
            let row = self.row(l);
            assert!(
                row.windows(2).all(|w| w[0] < w[1]),
                "row {} columns not strictly increasing",
                self.global_row(l)
            );
            if let Some(&last) = row.last() {
                assert!(
                    (last as usize) < self.ncols_global,
                    "column {last} out of range in row {}",
                    self.global_row(l)
                );
            }
        }
    }
}

/// A whole pattern matrix on one thread, for serial oracles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullMatrix {
    pub ncols: usize,
    /// `rows[r]` = sorted column indices of row `r`.
    pub rows: Vec<Vec<u64>>,
}

impl FullMatrix {
    pub fn generate(nrows: usize, ncols: usize, mut row_of: impl FnMut(u64) -> Vec<u64>) -> Self {
        FullMatrix {
            ncols,
            rows: (0..nrows as u64).map(|r| row_of(r)).collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }

    pub fn transpose(&self) -> FullMatrix {
        let mut rows = vec![Vec::new(); self.ncols];
        for (r, cols) in self.rows.iter().enumerate() {
            for &c in cols {
                rows[c as usize].push(r as u64);
            }
        }
        // Source rows are visited in order, so each transposed row is sorted.
        FullMatrix {
            ncols: self.nrows(),
            rows,
        }
    }

    /// Relocates every entry `(r, c)` to `(pr[r], pc[c])`.
    pub fn permuted(&self, pr: &[u64], pc: &[u64]) -> FullMatrix {
        assert_eq!(pr.len(), self.nrows());
        let mut rows = vec![Vec::new(); self.nrows()];
        for (r, cols) in self.rows.iter().enumerate() {
            let dst = &mut rows[pr[r] as usize];
            for &c in cols {
                dst.push(pc[c as usize]);
            }
        }
        for row in &mut rows {
            row.sort_unstable();
        }
        FullMatrix {
            ncols: self.ncols,
            rows,
        }
    }

    /// True iff square, every diagonal entry present, nothing below it.
    /// Rows are sorted, so both conditions reduce to "first column == row".
    pub fn is_unit_upper(&self) -> bool {
        self.nrows() == self.ncols
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(r, cols)| cols.first() == Some(&(r as u64)))
    }

    pub fn digest(&self) -> u64 {
        checksum::combine(
            self.rows
                .iter()
                .enumerate()
                .flat_map(|(r, cols)| cols.iter().map(move |&c| checksum::pair_digest(r as u64, c))),
        )
    }
}

fn u64s_to_bytes(values: &[u64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn bytes_to_u64s(bytes: &[u8]) -> Vec<u64> {
    assert!(bytes.len() % 8 == 0, "byte payload is not whole u64s");
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Gathers a cyclically distributed `u64` array to rank 0: element
/// `l * npes + me` comes from PE `me`'s `local[l]`. Returns `Some` on rank 0.
pub async fn gather_cyclic(pe: &Pe, local: &[u64]) -> Option<Vec<u64>> {
    let parts = pe.gather_bytes(u64s_to_bytes(local)).await?;
    let chunks: Vec<Vec<u64>> = parts.iter().map(|b| bytes_to_u64s(b)).collect();
    let total: usize = chunks.iter().map(|c| c.len()).sum();
    let mut out = vec![0u64; total];
    for (p, chunk) in chunks.iter().enumerate() {
        for (l, &v) in chunk.iter().enumerate() {
            out[l * chunks.len() + p] = v;
        }
    }
    Some(out)
}

/// Rank 0 generates a permutation of `0..n` and scatters it cyclically:
/// each PE receives `perm[g]` for its owned indices `g`, in local order.
pub async fn scatter_perm(pe: &Pe, seed: u64, salt: u64, n: usize) -> Vec<u64> {
    let chunks = if pe.rank().rank() == 0 {
        let perm = crate::gen::random_perm(seed, salt, n);
        let mut per_pe: Vec<Vec<u64>> = vec![Vec::new(); pe.npes()];
        for (g, &v) in perm.iter().enumerate() {
            per_pe[pe.layout().owner_of(g).rank()].push(v);
        }
        Some(per_pe.iter().map(|c| u64s_to_bytes(c)).collect())
    } else {
        None
    };
    bytes_to_u64s(&pe.scatter_bytes(chunks).await)
}

/// Gathers the distributed matrix to rank 0 for a serial oracle, or fails
/// on every PE if the global nonzero count exceeds [`GATHER_GUARD_NNZ`].
pub async fn gather_matrix(pe: &Pe, local: &LocalCsr) -> Result<Option<FullMatrix>, OracleScaleError> {
    let nnz_global = pe.allreduce_sum(local.nnz_local()).await;
    if nnz_global > GATHER_GUARD_NNZ {
        return Err(OracleScaleError(nnz_global));
    }
    // Wire form: [local_rows, len(row_0), cols..., len(row_1), cols..., ...].
    let mut words = vec![local.local_rows() as u64];
    for l in 0..local.local_rows() {
        let row = local.row(l);
        words.push(row.len() as u64);
        words.extend_from_slice(row);
    }
    let Some(parts) = pe.gather_bytes(u64s_to_bytes(&words)).await else {
        return Ok(None);
    };
    let mut rows = vec![Vec::new(); local.nrows_global];
    for (p, part) in parts.iter().enumerate() {
        let words = bytes_to_u64s(part);
        let nrows = words[0] as usize;
        let mut at = 1;
        for l in 0..nrows {
            let len = words[at] as usize;
            at += 1;
            rows[l * parts.len() + p] = words[at..at + len].to_vec();
            at += len;
        }
        assert_eq!(at, words.len(), "trailing words in gathered rows from PE {p}");
    }
    Ok(Some(FullMatrix {
        ncols: local.ncols_global,
        rows,
    }))
}
