//! Flat binary container of named tensors plus string metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MRCKPT01"
//! n_meta     u32
//!   key_len  u32, key bytes (UTF-8)
//!   val_len  u32, value bytes (UTF-8)
//! n_tensors  u32
//!   key_len  u32, key bytes (UTF-8)
//!   rank     u32
//!   dims     u64 × rank
//!   data     f64 × prod(dims), IEEE-754 little-endian
//! ```
//!
//! Values are written bit-for-bit, so a load after save reproduces every
//! tensor exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MRCKPT01";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{key}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (k, t) in &self.tensors {
            write_str(w, k)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((k, Tensor::new(&dims, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u64>(), 25),
            key in "[a-z/_]{1,12}",
        ) {
            let data: Vec<f64> = bits.iter().take(rows * cols).map(|b| f64::from_bits(*b)).collect();
            let mut c = Container::default();
            c.meta.insert("k".into(), key.clone());
            c.tensors.push((key, Tensor::matrix(rows, cols, data).unwrap()));
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Container::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.meta, c.meta);
            for ((ka, ta), (kb, tb)) in back.tensors.iter().zip(&c.tensors) {
                prop_assert_eq!(ka, kb);
                prop_assert_eq!(ta.shape(), tb.shape());
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTACKPT\0\0\0\0".to_vec();
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }
}
