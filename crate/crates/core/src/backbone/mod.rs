//! Host sequential recommender: ID and positional embeddings, a causal
//! sequence encoder, shared-embedding dot-product scoring and the BCE /
//! BPR recommendation losses.

mod encoder;
mod losses;

use std::rc::Rc;

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::layers::normal;
use crate::numerics::{Graph, ParamId, ParamStore, Real, SeqLayout, Tensor, Var};

pub use encoder::{AttentionEncoder, SequenceEncoder};
pub use losses::{bce_loss, bpr_loss, rec_loss, RecLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Pre-LN causal self-attention blocks.
    Attention,
    /// Causal running mean of the embedded positions; no parameters.
    MeanPool,
}

/// Item-ID table (row 0 is the padding row, held at zero) and positional
/// table.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub position: ParamId,
    pub num_items: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl EmbeddingTables {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        num_items: usize,
        dim: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut item: Tensor<T> = normal(num_items + 1, dim, std, rng);
        item.row_mut(0).iter_mut().for_each(|v| *v = T::zero());
        let position = normal(max_len, dim, 0.1 * std, rng);
        Self {
            item: store.add("embed.item", item),
            position: store.add("embed.position", position),
            num_items,
            dim,
            max_len,
        }
    }

    /// Zero the padding row's gradient so the optimizer leaves it at zero.
    pub fn clear_padding_grad<T: Real>(&self, store: &mut ParamStore<T>) {
        store
            .grad_mut(self.item)
            .row_mut(0)
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }

    /// `e^id + fused + positional` per row; padding rows are zero.
    pub fn embed_positions<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        fused: Option<Var>,
    ) -> Result<Var> {
        if batch.positions.iter().any(|&p| p >= self.max_len) {
            return Err(Error::config(format!(
                "sequence position exceeds max_len {}",
                self.max_len
            )));
        }
        let table = g.param(store, self.item);
        let ids = g.gather(table, &batch.items);
        let pos_table = g.param(store, self.position);
        let pos = g.gather(pos_table, &batch.positions);
        let mut x = g.add(ids, pos);
        if let Some(f) = fused {
            x = g.add(x, f);
        }
        Ok(g.mul_const(x, row_mask(&batch.valid, self.dim)))
    }
}

/// `[rows × width]` tensor of 1 on valid rows and 0 on padding rows.
pub fn row_mask<T: Real>(valid: &[bool], width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(valid.len() * width);
    for &v in valid {
        let x = if v { T::one() } else { T::zero() };
        data.extend(std::iter::repeat_n(x, width));
    }
    Tensor::new(&[valid.len(), width], data).unwrap()
}

pub fn layout_of(batch: &Batch) -> Rc<SeqLayout> {
    Rc::new(SeqLayout {
        seqs: batch.size(),
        len: batch.len,
        valid: batch.valid.clone(),
    })
}

/// Logit of `item` for hidden state `h`: `⟨h, e^id_item⟩`.
pub fn score<T: Real>(store: &ParamStore<T>, tables: &EmbeddingTables, hidden: &[T], item: usize) -> T {
    let row = store.value(tables.item).row(item);
    hidden.iter().zip(row).map(|(&a, &b)| a * b).sum()
}

/// Row-wise logits of `hidden` against the item rows `ids`.
pub fn score_rows<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    hidden: Var,
    ids: &[usize],
) -> Var {
    let table = g.param(store, tables.item);
    let e = g.gather(table, ids);
    g.row_dot(hidden, e)
}
