use rand::Rng;

use crate::numerics::{Graph, Linear, ParamId, ParamStore, Real, Tensor, Var};

/// Reweighting MLP `[(N + 1)·D] → hidden → N` over the concatenated expert
/// outputs and item-ID embedding. The output layer starts at zero, so
/// initial weights are uniform.
#[derive(Clone, Debug)]
pub struct ReweightNet {
    pub hidden: Linear,
    pub output: Linear,
    pub slots: usize,
    pub dim: usize,
}

impl ReweightNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, slots: usize, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "reweight.0", (slots + 1) * dim, hidden, rng),
            output: Linear::zeros(store, "reweight.1", hidden, slots),
            slots,
            dim,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.output.weight, self.output.bias]
    }

    /// Raw logits `[n × slots]`; `inputs` has one entry per slot, `None`
    /// for a dropped expert (fed as zeros).
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[Option<Var>], id: Var) -> Var {
        assert_eq!(inputs.len(), self.slots, "one input per expert slot");
        let n = g.value(id).rows();
        let mut parts = Vec::with_capacity(self.slots + 1);
        for x in inputs {
            parts.push(match x {
                Some(v) => *v,
                None => g.constant(Tensor::zeros(&[n, self.dim])),
            });
        }
        parts.push(id);
        let x = g.concat_cols(&parts);
        let h = self.hidden.forward(g, store, x);
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}

/// Softmax weights over the active experts and the fused vector
/// `Σ_j w_j · e_j`. Returns `(weights [n × active], fused [n × D])`;
/// weight column `c` belongs to the `c`-th present input.
pub fn adaptive_fusion<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &ReweightNet,
    inputs: &[Option<Var>],
    id: Var,
) -> (Var, Var) {
    let active: Vec<usize> = (0..inputs.len()).filter(|&j| inputs[j].is_some()).collect();
    assert!(!active.is_empty(), "fusion needs at least one expert");
    let logits = net.logits(g, store, inputs, id);
    let logits = if active.len() == inputs.len() {
        logits
    } else {
        g.select_cols(logits, &active)
    };
    let w = g.softmax_rows(logits);
    let mut fused: Option<Var> = None;
    for (c, &j) in active.iter().enumerate() {
        let wc = g.select_cols(w, &[c]);
        let term = g.row_scale(inputs[j].unwrap(), wc);
        fused = Some(match fused {
            Some(f) => g.add(f, term),
            None => term,
        });
    }
    (w, fused.unwrap())
}

/// Uniform average of the given expert outputs.
pub fn mean_fusion<T: Real>(g: &mut Graph<T>, experts: &[Var]) -> Var {
    assert!(!experts.is_empty(), "fusion needs at least one expert");
    let mut total = experts[0];
    for &e in &experts[1..] {
        total = g.add(total, e);
    }
    g.scale(total, T::one() / T::of(experts.len() as f64))
}

/// `Σ_j w_j · e_j` on plain vectors.
pub fn fuse_values<T: Real>(weights: &[T], experts: &[&[T]]) -> Vec<T> {
    assert_eq!(weights.len(), experts.len());
    let d = experts.first().map_or(0, |e| e.len());
    let mut out = vec![T::zero(); d];
    for (&w, e) in weights.iter().zip(experts) {
        for (o, &v) in out.iter_mut().zip(e.iter()) {
            *o += w * v;
        }
    }
    out
}
