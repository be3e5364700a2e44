//! Fixed-size wire records.
//!
//! Conveyor frames carry contiguous byte runs of identically sized records.
//! `WireRecord` pins the size at the type level so buffers can be encoded and
//! decoded without per-item framing.

/// A POD message with a fixed wire size.
///
/// `write` must fill exactly `SIZE` bytes and `read` must invert it.
pub trait WireRecord: Copy + 'static {
    const SIZE: usize;

    fn write(&self, out: &mut [u8]);
    fn read(buf: &[u8]) -> Self;
}

impl WireRecord for u64 {
    const SIZE: usize = 8;

    fn write(&self, out: &mut [u8]) {
        out[..8].copy_from_slice(&self.to_le_bytes());
    }

    fn read(buf: &[u8]) -> Self {
        u64::from_le_bytes(buf[..8].try_into().unwrap())
    }
}

impl WireRecord for (u64, u64) {
    const SIZE: usize = 16;

    fn write(&self, out: &mut [u8]) {
        out[..8].copy_from_slice(&self.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.1.to_le_bytes());
    }

    fn read(buf: &[u8]) -> Self {
        (u64::read(&buf[..8]), u64::read(&buf[8..16]))
    }
}

impl WireRecord for (u64, u64, u64) {
    const SIZE: usize = 24;

    fn write(&self, out: &mut [u8]) {
        out[..8].copy_from_slice(&self.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.1.to_le_bytes());
        out[16..24].copy_from_slice(&self.2.to_le_bytes());
    }

    fn read(buf: &[u8]) -> Self {
        (
            u64::read(&buf[..8]),
            u64::read(&buf[8..16]),
            u64::read(&buf[16..24]),
        )
    }
}

/// Encodes a slice of records into one contiguous byte buffer.
pub fn encode_items<P: WireRecord>(items: &[P]) -> Vec<u8> {
    let mut bytes = vec![0u8; items.len() * P::SIZE];
    for (i, item) in items.iter().enumerate() {
        item.write(&mut bytes[i * P::SIZE..(i + 1) * P::SIZE]);
    }
    bytes
}

/// Decodes the byte buffer produced by [`encode_items`].
///
/// Panics if the buffer is not a whole number of records.
pub fn decode_items<P: WireRecord>(bytes: &[u8]) -> Vec<P> {
    assert!(
        bytes.len() % P::SIZE == 0,
        "frame of {} bytes is not a multiple of record size {}",
        bytes.len(),
        P::SIZE
    );
    bytes.chunks_exact(P::SIZE).map(P::read).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record_round_trip() {
        let mut buf = [0u8; 24];
        let v = (3u64, u64::MAX, 17u64);
        v.write(&mut buf);
        assert_eq!(<(u64, u64, u64)>::read(&buf), v);
    }

    #[test]
    fn empty_batch() {
        let bytes = encode_items::<u64>(&[]);
        assert!(bytes.is_empty());
        assert!(decode_items::<u64>(&bytes).is_empty());
    }

    proptest! {
        #[test]
        fn batch_round_trip(items in proptest::collection::vec((any::<u64>(), any::<u64>()), 0..200)) {
            let bytes = encode_items(&items);
            prop_assert_eq!(bytes.len(), items.len() * 16);
            prop_assert_eq!(decode_items::<(u64, u64)>(&bytes), items);
        }
    }
}
