use std::rc::Rc;

use rand::Rng;

use super::row_mask;
use crate::numerics::{Graph, LayerNorm, Linear, ParamStore, Pooling, Real, SeqLayout, Tensor, Var};

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Stack of pre-LN causal self-attention blocks with a final LayerNorm.
#[derive(Clone, Debug)]
pub struct AttentionEncoder {
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    heads: usize,
    dim: usize,
    dropout: f64,
}

impl AttentionEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        blocks: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|b| {
                let n = |s: &str| format!("{prefix}.block{b}.{s}");
                Block {
                    ln_attn: LayerNorm::new(store, &n("ln_attn"), dim),
                    query: Linear::new(store, &n("query"), dim, dim, rng),
                    key: {
                        // attention weights are invariant to a key bias
                        let key = Linear::new(store, &n("key"), dim, dim, rng);
                        store.set_frozen(key.bias, true);
                        key
                    },
                    value: Linear::new(store, &n("value"), dim, dim, rng),
                    out: Linear::new(store, &n("out"), dim, dim, rng),
                    ln_ff: LayerNorm::new(store, &n("ln_ff"), dim),
                    ff_in: Linear::new(store, &n("ff_in"), dim, dim, rng),
                    ff_out: Linear::new(store, &n("ff_out"), dim, dim, rng),
                }
            })
            .collect();
        Self {
            blocks,
            final_ln: LayerNorm::new(store, &format!("{prefix}.ln_final"), dim),
            heads,
            dim,
            dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub enum SequenceEncoder {
    Attention(AttentionEncoder),
    MeanPool,
}

impl SequenceEncoder {
    /// Hidden states for every row. Output at position `t` depends only on
    /// valid positions `≤ t` of the same sequence; padding rows are zero.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn encode<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Rc<SeqLayout>,
        mut dropout_rng: Option<&mut R>,
    ) -> Var {
        match self {
            SequenceEncoder::MeanPool => {
                let groups = (0..layout.seqs * layout.len)
                    .map(|r| {
                        if !layout.valid[r] {
                            return Vec::new();
                        }
                        let start = r - r % layout.len;
                        let members: Vec<usize> = (start..=r).filter(|&u| layout.valid[u]).collect();
                        let w = T::one() / T::of(members.len() as f64);
                        members.into_iter().map(|u| (u, w)).collect()
                    })
                    .collect();
                g.pool(x, Rc::new(Pooling { groups }))
            }
            SequenceEncoder::Attention(enc) => {
                let mask = row_mask::<T>(&layout.valid, enc.dim);
                let mut h = dropout(g, x, enc.dropout, dropout_rng.as_deref_mut());
                for b in &enc.blocks {
                    let a = b.ln_attn.forward(g, store, h);
                    let q = b.query.forward(g, store, a);
                    let k = b.key.forward(g, store, a);
                    let v = b.value.forward(g, store, a);
                    let att = g.causal_attention(q, k, v, enc.heads, layout.clone());
                    let o = b.out.forward(g, store, att);
                    let o = dropout(g, o, enc.dropout, dropout_rng.as_deref_mut());
                    h = g.add(h, o);

                    let f = b.ln_ff.forward(g, store, h);
                    let f = b.ff_in.forward(g, store, f);
                    let f = g.relu(f);
                    let f = b.ff_out.forward(g, store, f);
                    let f = dropout(g, f, enc.dropout, dropout_rng.as_deref_mut());
                    h = g.add(h, f);
                    h = g.mul_const(h, mask.clone());
                }
                let out = enc.final_ln.forward(g, store, h);
                g.mul_const(out, mask)
            }
        }
    }
}

impl SequenceEncoder {
    /// `[seqs × D]` mean of the encoded valid positions of each sequence.
    ///
    /// For the running-mean encoder this is a fixed linear map of `x`: row
    /// `i` of a sequence with `n` valid positions contributes with weight
    /// `(1/n)·Σ_{k=i..n} 1/k`, so the per-position means are never built.
    pub fn summarize<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Rc<SeqLayout>,
        dropout_rng: Option<&mut R>,
    ) -> Var {
        let rows_of = |s: usize| (s * layout.len..(s + 1) * layout.len).filter(|&r| layout.valid[r]);
        match self {
            SequenceEncoder::MeanPool => {
                let groups = (0..layout.seqs)
                    .map(|s| {
                        let rows: Vec<usize> = rows_of(s).collect();
                        let n = rows.len() as f64;
                        let mut tail = 0.0;
                        let mut weights = vec![0.0; rows.len()];
                        for k in (0..rows.len()).rev() {
                            tail += 1.0 / (k + 1) as f64;
                            weights[k] = tail / n;
                        }
                        rows.into_iter().zip(weights).map(|(r, w)| (r, T::of(w))).collect()
                    })
                    .collect();
                g.pool(x, Rc::new(Pooling { groups }))
            }
            SequenceEncoder::Attention(_) => {
                let h = self.encode(g, store, x, layout, dropout_rng);
                let groups = (0..layout.seqs)
                    .map(|s| {
                        let rows: Vec<usize> = rows_of(s).collect();
                        let w = T::one() / T::of(rows.len().max(1) as f64);
                        rows.into_iter().map(|r| (r, w)).collect()
                    })
                    .collect();
                g.pool(h, Rc::new(Pooling { groups }))
            }
        }
    }
}

fn dropout<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let keep = T::of(1.0 / (1.0 - p));
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    g.mul_const(x, Tensor::new(&shape, data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(enc: &SequenceEncoder, store: &ParamStore<f64>, x: &Tensor<f64>, layout: &Rc<SeqLayout>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = enc.encode::<f64, ChaCha8Rng>(&mut g, store, xv, layout, None);
        g.value(h).clone()
    }

    fn encoders(store: &mut ParamStore<f64>) -> Vec<SequenceEncoder> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        vec![
            SequenceEncoder::Attention(AttentionEncoder::new(store, "enc", 4, 2, 2, 0.0, &mut rng)),
            SequenceEncoder::MeanPool,
        ]
    }

    #[test]
    fn future_positions_do_not_leak() {
        let mut store = ParamStore::new();
        let encs = encoders(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = Rc::new(SeqLayout {
            seqs: 2,
            len: 5,
            valid: vec![true; 10],
        });
        let x: Tensor<f64> = normal(10, 4, 1.0, &mut rng);
        for enc in &encs {
            let base = run(enc, &store, &x, &layout);
            for t in 0..4 {
                let mut y = x.clone();
                for r in t + 1..5 {
                    y.row_mut(r).iter_mut().for_each(|v| *v += 3.0);
                }
                let out = run(enc, &store, &y, &layout);
                for r in 0..=t {
                    assert_eq!(base.row(r), out.row(r), "position {r} changed");
                }
                // second sequence untouched
                assert_eq!(base.row(7), out.row(7));
            }
        }
    }

    #[test]
    fn single_position_has_no_cross_flow() {
        let mut store = ParamStore::new();
        let encs = encoders(&mut store);
        let layout = Rc::new(SeqLayout {
            seqs: 2,
            len: 1,
            valid: vec![true, true],
        });
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0]]).unwrap();
        let mut b = a.clone();
        b.row_mut(1).iter_mut().for_each(|v| *v *= -2.0);
        for enc in &encs {
            assert_eq!(run(enc, &store, &a, &layout).row(0), run(enc, &store, &b, &layout).row(0));
        }
    }

    #[test]
    fn padding_rows_are_zero_and_inert() {
        let mut store = ParamStore::new();
        let encs = encoders(&mut store);
        let layout = Rc::new(SeqLayout {
            seqs: 1,
            len: 3,
            valid: vec![false, true, true],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = normal(3, 4, 1.0, &mut rng);
        let mut y = x.clone();
        y.row_mut(0).iter_mut().for_each(|v| *v = 100.0);
        for enc in &encs {
            let (hx, hy) = (run(enc, &store, &x, &layout), run(enc, &store, &y, &layout));
            assert!(hx.row(0).iter().all(|&v| v == 0.0));
            assert_eq!(hx.row(1), hy.row(1));
            assert_eq!(hx.row(2), hy.row(2));
        }
    }

    #[test]
    fn summary_is_mean_of_encoded_positions() {
        let mut store = ParamStore::new();
        let encs = encoders(&mut store);
        let layout = Rc::new(SeqLayout {
            seqs: 2,
            len: 4,
            valid: vec![false, true, true, true, false, false, true, true],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = normal(8, 4, 1.0, &mut rng);
        for enc in &encs {
            let h = run(enc, &store, &x, &layout);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let s = enc.summarize::<f64, ChaCha8Rng>(&mut g, &store, xv, &layout, None);
            let s = g.value(s);
            for d in 0..4 {
                let first = (h.at(1, d) + h.at(2, d) + h.at(3, d)) / 3.0;
                let second = (h.at(6, d) + h.at(7, d)) / 2.0;
                assert!((s.at(0, d) - first).abs() < 1e-12);
                assert!((s.at(1, d) - second).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let encs = encoders(&mut store);
        let layout = Rc::new(SeqLayout {
            seqs: 1,
            len: 4,
            valid: vec![true; 4],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f64> = normal(4, 4, 1.0, &mut rng);
        for enc in &encs {
            let a = run(enc, &store, &x, &layout);
            let b = run(enc, &store, &x, &layout);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }
}
