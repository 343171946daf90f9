//! Binary parameter checkpoints.
//!
//! Layout: magic `PRCK`, `u32` format version, then one record per
//! parameter until end of file: `u32` name length, UTF-8 name bytes,
//! `u32` rank, `rank × u32` dims, values as little-endian `f32`.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, value) in store.named_values() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err("bad magic, expected PRCK".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32().ok_or("truncated record")? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or("truncated name")?)
            .map_err(|e| format!("parameter name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u32().ok_or("truncated rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or("truncated dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r
            .take(count.checked_mul(4).ok_or("dims overflow")?)
            .ok_or_else(|| format!("truncated values for `{name}`"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, values).map_err(|e| e.to_string())?));
    }
    Ok(out)
}

pub fn write_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6),
            b in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 4),
        ) {
            let mut store = ParamStore::<f32>::new();
            store.add("layer.weight", Tensor::new(&[2, 3], a).unwrap());
            store.add("layer.bias", Tensor::new(&[4], b).unwrap());
            let decoded = decode_checkpoint(&encode_checkpoint(&store)).unwrap();
            let mut fresh = ParamStore::<f32>::new();
            fresh.add("layer.weight", Tensor::zeros(&[2, 3]));
            fresh.add("layer.bias", Tensor::zeros(&[4]));
            fresh.load_from(&decoded).unwrap();
            for (x, y) in store.named_values().zip(fresh.named_values()) {
                let xb: Vec<u32> = x.1.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[1]));
        let mut bytes = encode_checkpoint(&store);
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn truncated_values_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[3]));
        let bytes = encode_checkpoint(&store);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    }
}
