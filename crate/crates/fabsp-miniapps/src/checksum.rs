//! Order- and partition-independent result digests.
//!
//! Each `(position, value)` pair hashes independently (FNV-1a over its 16
//! little-endian bytes) and pairs combine by wrapping addition, so a digest
//! is invariant to the order pairs are visited in and to how they are
//! distributed across PEs. Per-PE partial digests combine with
//! `allreduce_sum` (itself wrapping) into the run checksum.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Digest of one `(position, value)` pair.
pub fn pair_digest(position: u64, value: u64) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&position.to_le_bytes());
    bytes[8..].copy_from_slice(&value.to_le_bytes());
    fnv1a64(&bytes)
}

/// Combine a sequence of pair digests (order-independent).
pub fn combine(digests: impl IntoIterator<Item = u64>) -> u64 {
    digests.into_iter().fold(0u64, u64::wrapping_add)
}

/// Digest of a `(position, value)` table slice starting at `base`.
pub fn digest_values(base: u64, values: &[u64]) -> u64 {
    combine(
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| pair_digest(base + i as u64, v)),
    )
}
