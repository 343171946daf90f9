//! Precomputed modality embeddings.
//!
//! Binary layout: magic `PREM`, then little-endian `u32` version (= 1),
//! `u32` count, `u32` dim, followed by `count` records of
//! (`u64` item id, `dim × f32`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::interactions::InteractionDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PREM";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, item: u64, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::config(format!(
                "embedding for item {item} has dim {}, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("embedding for item {item} is not finite")));
        }
        self.vectors.insert(item, v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (&id, v) in &self.vectors {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let u32_at = |pos: usize| -> std::result::Result<u32, String> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated header".to_string())
        };
        if bytes.get(..4) != Some(EMBEDDING_MAGIC.as_slice()) {
            return Err("bad magic, expected PREM".into());
        }
        let version = u32_at(4)?;
        if version != EMBEDDING_VERSION {
            return Err(format!("unsupported embedding version {version}"));
        }
        let count = u32_at(8)? as usize;
        let dim = u32_at(12)? as usize;
        let record = 8 + 4 * dim;
        let body = &bytes[16..];
        if body.len() != count * record {
            return Err(format!(
                "expected {count} records of {record} bytes, found {} bytes",
                body.len()
            ));
        }
        let mut table = EmbeddingTable::new(dim);
        for rec in body.chunks_exact(record) {
            let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let v = rec[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if table.vectors.insert(id, v).is_some() {
                return Err(format!("duplicate item id {id}"));
            }
        }
        Ok(table)
    }
}

pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fs::write(path, table.encode()).map_err(|e| Error::io(path, e))
}

/// Read a `PREM` file; `expected_dim`, when given, must match the header.
pub fn load_modality_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let table = EmbeddingTable::decode(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })?;
    if let Some(d) = expected_dim {
        if d != table.dim {
            return Err(Error::config(format!(
                "{}: embedding dim {} does not match expected {d}",
                path.display(),
                table.dim
            )));
        }
    }
    if table.vectors.values().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{}: non-finite embedding value", path.display())));
    }
    Ok(table)
}

/// An item's identifier with its image and text vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: u64,
    pub image_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
}

/// Image and text matrices aligned with dense item ids; row 0 (padding)
/// is zero.
#[derive(Clone, Debug)]
pub struct ItemFeatures {
    pub image: Tensor<f32>,
    pub text: Tensor<f32>,
}

impl ItemFeatures {
    pub fn build(ds: &InteractionDataset, image: &EmbeddingTable, text: &EmbeddingTable) -> Result<Self> {
        let mut missing: Vec<u64> = ds
            .item_raw
            .iter()
            .copied()
            .filter(|id| !image.vectors.contains_key(id) || !text.vectors.contains_key(id))
            .collect();
        missing.dedup();
        if !missing.is_empty() {
            return Err(Error::IncompleteCoverage(missing));
        }
        let matrix = |table: &EmbeddingTable| {
            let mut data = vec![0.0f32; table.dim];
            for raw in &ds.item_raw {
                data.extend_from_slice(&table.vectors[raw]);
            }
            Tensor::new(&[ds.num_items() + 1, table.dim], data).unwrap()
        };
        Ok(Self {
            image: matrix(image),
            text: matrix(text),
        })
    }

    pub fn image_dim(&self) -> usize {
        self.image.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text.cols()
    }

    pub fn num_items(&self) -> usize {
        self.image.rows() - 1
    }

    pub fn record(&self, ds: &InteractionDataset, dense: usize) -> ItemRecord {
        ItemRecord {
            item_id: ds.raw_item(dense),
            image_embedding: self.image.row(dense).to_vec(),
            text_embedding: self.text.row(dense).to_vec(),
        }
    }
}
