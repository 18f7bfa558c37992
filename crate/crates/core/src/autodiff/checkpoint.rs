//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "FRL1"  u32 entry_count
//! per entry: u32 name_len, name (UTF-8), u32 rank, rank × u32 dims, numel × f32
//! ```
//!
//! Entries are written in name order. The trainable/buffer distinction is not
//! stored; loaders mark buffers themselves.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FRL1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected \"FRL1\"".into() });
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: start + 4, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format { offset: start, msg: format!("{name}: {e}") })?;
        store.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after last entry".into() });
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("relation.head0.WQ", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap());
        s.insert_buffer("bn.running_mean", Tensor::new(&[4], vec![0.1f32 as f64; 4]).unwrap());
        s
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode(&sample_store());
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&sample_store());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode(&sample_store());
        assert_eq!(&bytes[..4], b"FRL1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        // Entries sorted by name: "bn.running_mean" first.
        assert_eq!(&bytes[8..12], &15u32.to_le_bytes());
        assert_eq!(&bytes[12..27], b"bn.running_mean");
        assert_eq!(&bytes[27..31], &1u32.to_le_bytes());
        assert_eq!(&bytes[31..35], &4u32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn f32_payload_round_trips_bitwise(values in proptest::collection::vec(-1e6f32..1e6, 1..40), split in 1usize..5) {
            let mut s = ParamStore::new();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let n = data.len();
            let shape = if n.is_multiple_of(split) { vec![split, n / split] } else { vec![n] };
            s.insert("w", Tensor::new(&shape, data.clone()).unwrap());
            let back = decode(&encode(&s)).unwrap();
            let t = back.get("w").unwrap();
            prop_assert_eq!(t.shape(), &shape[..]);
            for (a, b) in t.data().iter().zip(&data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
