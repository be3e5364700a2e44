//! Deterministic input generators.
//!
//! Every generator draws from a ChaCha8 stream keyed by a mixed
//! `(master seed, purpose salt, index)` triple, so
//!
//! * per-PE streams (index draws, dart throws) can be replayed by a serial
//!   oracle that knows the PE count, and
//! * per-row streams (sparse matrices) produce the **same matrix for every
//!   PE count**, letting one serial oracle cover the whole P sweep.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer: a cheap, well-mixed 64→64 hash.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A ChaCha8 stream keyed by `(seed, salt, index)`.
///
/// `salt` separates purposes (index draws vs. matrix rows vs. dart rounds)
/// so streams never collide across uses of the same master seed.
pub fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let key = mix64(seed ^ mix64(salt)).wrapping_add(mix64(index));
    ChaCha8Rng::seed_from_u64(mix64(key))
}

/// Purpose salts. Arbitrary distinct constants.
pub mod salt {
    pub const HISTOGRAM_UPDATES: u64 = 0x4849_5354;
    pub const GATHER_READS: u64 = 0x4947_4154;
    pub const MATRIX_ROWS: u64 = 0x4d41_5452;
    pub const TRIANGLE_ROWS: u64 = 0x5452_4940;
    pub const UPPER_ROWS: u64 = 0x5550_5052;
    pub const DARTS: u64 = 0x4441_5254;
    pub const ROW_PERM: u64 = 0x5052_4f57;
    pub const COL_PERM: u64 = 0x5043_4f4c;
}

/// `count` independent uniform draws from `[0, range)`.
///
/// Callers key the stream per PE; serial oracles replay it per rank.
pub fn gen_indices(seed: u64, salt: u64, rank: usize, count: usize, range: u64) -> Vec<u64> {
    assert!(range > 0 || count == 0, "cannot draw from an empty range");
    let mut rng = stream(seed, salt, rank as u64);
    (0..count).map(|_| rng.gen_range(0..range)).collect()
}

/// Columns `c` in `[lo, hi)` kept independently with probability `p`,
/// via geometric gap sampling (O(hits), not O(hi-lo)).
fn bernoulli_subset(rng: &mut ChaCha8Rng, lo: u64, hi: u64, p: f64) -> Vec<u64> {
    let mut out = Vec::new();
    if hi <= lo || p <= 0.0 {
        return out;
    }
    if p >= 1.0 {
        return (lo..hi).collect();
    }
    // Gap between successive hits is geometric: skip = floor(ln U / ln(1-p)).
    let log1mp = (1.0 - p).ln();
    let mut c = lo;
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let skip = (u.ln() / log1mp).floor();
        if skip >= (hi - c) as f64 {
            return out;
        }
        c += skip as u64;
        out.push(c);
        c += 1;
        if c >= hi {
            return out;
        }
    }
}

/// Row `row` of an Erdős–Rényi pattern over columns `[0, ncols)`: each
/// column present with probability `z / ncols` (expected `z` per row).
pub fn er_row(seed: u64, row: u64, ncols: u64, z: u64) -> Vec<u64> {
    let mut rng = stream(seed, salt::MATRIX_ROWS, row);
    let p = z as f64 / ncols as f64;
    bernoulli_subset(&mut rng, 0, ncols, p)
}

/// Row `row` of the lower-triangular adjacency of an undirected
/// Erdős–Rényi graph on `n` vertices: each edge `{row, c}` with `c < row`
/// present with probability `z / n` (expected vertex degree ≈ `z`). Each
/// unordered pair is decided once, by its larger endpoint.
pub fn er_lower_row(seed: u64, row: u64, n: u64, z: u64) -> Vec<u64> {
    let mut rng = stream(seed, salt::TRIANGLE_ROWS, row);
    let p = z as f64 / n as f64;
    bernoulli_subset(&mut rng, 0, row, p)
}

/// Row `row` of a unit-upper-triangular pattern on `n` columns: the
/// diagonal `row` plus each column in `(row, n)` with a probability tuned
/// for `z` expected nonzeros per row over the whole matrix.
pub fn unit_upper_row(seed: u64, row: u64, n: u64, z: u64) -> Vec<u64> {
    let mut rng = stream(seed, salt::UPPER_ROWS, row);
    let mut cols = vec![row];
    if n > 1 && z > 1 {
        // Strictly-upper entries: n·(z-1) expected over n·(n-1)/2 slots.
        let p = (2.0 * (z - 1) as f64 / (n - 1) as f64).min(1.0);
        cols.extend(bernoulli_subset(&mut rng, row + 1, n, p));
    }
    cols
}

/// Fisher–Yates permutation of `0..n` on the given stream.
pub fn random_perm(seed: u64, salt: u64, n: usize) -> Vec<u64> {
    let mut rng = stream(seed, salt, 0);
    let mut perm: Vec<u64> = (0..n as u64).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_purpose_separated() {
        let a = gen_indices(7, salt::HISTOGRAM_UPDATES, 3, 100, 1000);
        let b = gen_indices(7, salt::HISTOGRAM_UPDATES, 3, 100, 1000);
        let c = gen_indices(7, salt::GATHER_READS, 3, 100, 1000);
        assert_eq!(a, b);
        assert_ne!(a, c, "different salts must give different streams");
        assert!(a.iter().all(|&v| v < 1000));
    }

    #[test]
    fn er_rows_replay_identically() {
        for row in 0..50 {
            assert_eq!(er_row(11, row, 500, 10), er_row(11, row, 500, 10));
        }
    }

    #[test]
    fn er_row_density_is_near_z() {
        let n = 2000u64;
        let z = 10u64;
        let total: usize = (0..n).map(|r| er_row(42, r, n, z).len()).sum();
        let expect = (n * z) as f64;
        let got = total as f64;
        assert!(
            (got - expect).abs() < 0.15 * expect,
            "nnz {got} far from expected {expect}"
        );
    }

    #[test]
    fn er_rows_are_sorted_unique_in_range() {
        for r in 0..100u64 {
            let cols = er_row(3, r, 300, 8);
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
            assert!(cols.iter().all(|&c| c < 300));
        }
    }

    #[test]
    fn lower_rows_stay_strictly_below_diagonal() {
        for r in 0..200u64 {
            let cols = er_lower_row(13, r, 200, 8);
            assert!(cols.iter().all(|&c| c < r));
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(er_lower_row(13, 0, 200, 8).is_empty());
    }

    #[test]
    fn unit_upper_rows_have_unit_diagonal_and_upper_tail() {
        let n = 400u64;
        for r in 0..n {
            let cols = unit_upper_row(5, r, n, 10);
            assert_eq!(cols[0], r, "diagonal entry must lead row {r}");
            assert!(cols.iter().all(|&c| c >= r && c < n));
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
        // Last row is exactly the diagonal.
        assert_eq!(unit_upper_row(5, n - 1, n, 10), vec![n - 1]);
    }

    #[test]
    fn unit_upper_density_is_near_z() {
        let n = 2000u64;
        let z = 10u64;
        let total: usize = (0..n).map(|r| unit_upper_row(9, r, n, z).len()).sum();
        let expect = (n * z) as f64;
        let got = total as f64;
        assert!(
            (got - expect).abs() < 0.15 * expect,
            "nnz {got} far from expected {expect}"
        );
    }

    #[test]
    fn random_perm_is_a_permutation() {
        for n in [0usize, 1, 2, 17, 1000] {
            let p = random_perm(21, salt::ROW_PERM, n);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n as u64).collect::<Vec<_>>());
        }
        assert_ne!(
            random_perm(21, salt::ROW_PERM, 1000),
            random_perm(21, salt::COL_PERM, 1000),
            "row and column scrambles must differ"
        );
        assert_ne!(
            random_perm(21, salt::ROW_PERM, 1000),
            (0..1000).collect::<Vec<_>>(),
            "a 1000-element shuffle should not be the identity"
        );
    }
}
