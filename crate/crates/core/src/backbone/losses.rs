use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RecLoss {
    Bce,
    Bpr,
}

/// Mean over valid rows of `−ln σ(pos) − ln(1 − σ(neg))`.
///
/// `pos` and `neg` are `[n × 1]` logits. A batch with no valid row gives
/// a constant 0 that carries no gradient.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, pos: Var, neg: Var, valid: &[bool]) -> Var {
    let neg_pos = g.scale(pos, -T::one());
    let a = g.softplus(neg_pos);
    let b = g.softplus(neg);
    let per_row = g.add(a, b);
    masked_mean(g, per_row, valid)
}

/// Mean over valid rows of `−ln σ(pos − neg)`.
pub fn bpr_loss<T: Real>(g: &mut Graph<T>, pos: Var, neg: Var, valid: &[bool]) -> Var {
    let diff = g.sub(neg, pos);
    let per_row = g.softplus(diff);
    masked_mean(g, per_row, valid)
}

pub fn rec_loss<T: Real>(kind: RecLoss, g: &mut Graph<T>, pos: Var, neg: Var, valid: &[bool]) -> Var {
    match kind {
        RecLoss::Bce => bce_loss(g, pos, neg, valid),
        RecLoss::Bpr => bpr_loss(g, pos, neg, valid),
    }
}

fn masked_mean<T: Real>(g: &mut Graph<T>, per_row: Var, valid: &[bool]) -> Var {
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let mask = super::row_mask::<T>(valid, 1);
    let masked = g.mul_const(per_row, mask);
    let total = g.sum(masked);
    g.scale(total, T::one() / T::of(count as f64))
}
