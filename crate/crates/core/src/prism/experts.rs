use rand::Rng;

use super::ExpertKind;
use crate::numerics::{Graph, Mlp, ParamId, ParamStore, Real, Var};

/// One fusion MLP `[D_img + D_txt] → hidden → D`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    pub replica: usize,
    pub mlp: Mlp,
}

impl Expert {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        kind: ExpertKind,
        replica: usize,
        in_dim: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let name = if replica == 0 {
            format!("expert.{kind}")
        } else {
            format!("expert.{kind}.r{replica}")
        };
        Self {
            kind,
            replica,
            mlp: Mlp::new(store, &name, in_dim, hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Var {
        self.mlp.forward(g, store, input)
    }
}

/// All experts, ordered by kind then replica.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    pub in_dim: usize,
    pub dim: usize,
}

impl ExpertBank {
    /// `rng_for(k)` supplies the initialisation stream of the `k`-th expert.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        hidden: usize,
        dim: usize,
        replicas: usize,
        mut rng_for: impl FnMut(usize) -> R,
    ) -> Self {
        let mut experts = Vec::new();
        for kind in ExpertKind::ALL {
            for replica in 0..replicas.max(1) {
                let mut rng = rng_for(experts.len());
                experts.push(Expert::new(store, kind, replica, in_dim, hidden, dim, &mut rng));
            }
        }
        Self { experts, in_dim, dim }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| e.mlp.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::seed::{self, Stream};

    #[test]
    fn identically_seeded_experts_agree() {
        let mut store = ParamStore::<f64>::new();
        let bank = ExpertBank::new(&mut store, 6, 8, 4, 1, |_| seed::rng(3, Stream::Init, 77));
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let outs: Vec<_> = bank
            .experts
            .iter()
            .map(|e| {
                let y = e.forward(&mut g, &store, xv);
                g.value(y).clone()
            })
            .collect();
        assert_eq!(outs[0].shape(), &[1, 4]);
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn replicas_get_distinct_names() {
        let mut store = ParamStore::<f32>::new();
        let bank = ExpertBank::new(&mut store, 4, 4, 2, 2, |k| seed::rng(0, Stream::Init, k as u64));
        assert_eq!(bank.len(), 8);
        assert!(store.id("expert.syn.0.weight").is_some());
        assert!(store.id("expert.syn.r1.0.weight").is_some());
    }
}
