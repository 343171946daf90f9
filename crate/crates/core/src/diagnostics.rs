//! Central-difference gradient checks of every layer type and of the full
//! training loss, at 64-bit.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{bce_loss, bpr_loss, AttentionEncoder, BackboneKind, RecLoss, SequenceEncoder};
use crate::data::{leave_one_out_split, make_batches, random_dataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrismConfig, PrismModel};
use crate::numerics::layers::normal;
use crate::numerics::{grad_check, Graph, LayerNorm, Linear, Mlp, ParamStore, SeqLayout, Tensor, Var};
use crate::prism::{
    adaptive_fusion, interaction_loss, redundancy_loss, synergy_loss, uniqueness_loss, ExpertKind, LambdaWeights,
    ReweightNet, TripletMargin,
};
use crate::seed::{self, Stream};

/// Largest relative error accepted by [`gradient_suite`].
pub const GRAD_TOLERANCE: f64 = 1e-5;

const EPS: f64 = 1e-5;

/// Draws whose ReLU or hinge inputs come closer than this to zero are
/// redrawn, so that no central difference straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

const MAX_DRAWS: u64 = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Draws rejected for lying near a kink.
    pub redraws: u64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// A parameter store and a scalar loss over it.
struct Case {
    store: ParamStore<f64>,
    loss: Loss,
}

/// Fixed random weights that turn a tensor into a scalar without the
/// symmetries of a plain sum.
fn probe(g: &mut Graph<f64>, y: Var, c: &Tensor<f64>) -> Var {
    let p = g.mul_const(y, c.clone());
    g.sum(p)
}

fn run(name: &str, seed: u64, build: impl Fn(&mut ChaCha8Rng) -> Result<Case>) -> Result<GradCheck> {
    for draw in 0..MAX_DRAWS {
        let mut rng = seed::rng(seed, Stream::Init, 1_000_000 + draw);
        let mut case = build(&mut rng)?;
        let mut g = Graph::new();
        (case.loss)(&mut g, &case.store)?;
        if g.relu_margin() < KINK_MARGIN {
            continue;
        }
        let loss = &case.loss;
        return Ok(GradCheck {
            name: name.into(),
            max_rel_error: grad_check(&mut case.store, EPS, |g, s| loss(g, s))?,
            redraws: draw,
        });
    }
    Err(Error::Numeric(format!("{name}: no draw clear of ReLU kinks")))
}

fn linear(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, rng);
    *store.value_mut(lin.bias) = normal(1, 2, 0.5, rng);
    let x: Tensor<f64> = normal(4, 3, 1.0, rng);
    let c = normal(4, 2, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, s, xv);
            Ok(probe(g, y, &c))
        }),
    })
}

fn mlp(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let m = Mlp::new(&mut store, "mlp", 3, 5, 2, rng);
    *store.value_mut(m.hidden.bias) = normal(1, 5, 0.5, rng);
    let x: Tensor<f64> = normal(4, 3, 1.0, rng);
    let c = normal(4, 2, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.constant(x.clone());
            let y = m.forward(g, s, xv);
            Ok(probe(g, y, &c))
        }),
    })
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    *store.value_mut(ln.gain) = normal(1, 4, 1.0, rng);
    *store.value_mut(ln.bias) = normal(1, 4, 1.0, rng);
    let x = store.add("x", normal(3, 4, 1.0, rng));
    let c = normal(3, 4, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.param(s, x);
            let y = ln.forward(g, s, xv);
            Ok(probe(g, y, &c))
        }),
    })
}

fn embedding(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let table = store.add("table", normal(6, 3, 1.0, rng));
    let c = normal(5, 3, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let t = g.param(s, table);
            let y = g.gather(t, &[1, 3, 3, 0, 5]);
            Ok(probe(g, y, &c))
        }),
    })
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let x = store.add("x", normal(3, 4, 1.0, rng));
    let c = normal(3, 4, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.param(s, x);
            let y = g.softmax_rows(xv);
            Ok(probe(g, y, &c))
        }),
    })
}

fn row_cosine(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let a = store.add("a", normal(3, 4, 1.0, rng));
    let b = store.add("b", normal(3, 4, 1.0, rng));
    let c = normal(3, 1, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let (av, bv) = (g.param(s, a), g.param(s, b));
            let y = g.row_cosine(av, bv);
            Ok(probe(g, y, &c))
        }),
    })
}

fn encoder(kind: BackboneKind, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let enc = match kind {
        BackboneKind::Attention => {
            SequenceEncoder::Attention(AttentionEncoder::new(&mut store, "enc", 4, 1, 2, 0.0, rng))
        }
        BackboneKind::MeanPool => SequenceEncoder::MeanPool,
    };
    // move off the identity LayerNorms and zero biases
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let noise: Tensor<f64> = normal(shape[0], shape[1], 0.3, rng);
        store.value_mut(id).add_assign(&noise);
    }
    let x = store.add("x", normal(6, 4, 1.0, rng));
    let c = normal(6, 4, 1.0, rng);
    let layout = Rc::new(SeqLayout {
        seqs: 2,
        len: 3,
        valid: vec![false, true, true, true, true, true],
    });
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.param(s, x);
            let h = enc.encode::<_, ChaCha8Rng>(g, s, xv, &layout, None);
            Ok(probe(g, h, &c))
        }),
    })
}

fn rec_loss(kind: RecLoss, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let pos = store.add("pos", normal(4, 1, 2.0, rng));
    let neg = store.add("neg", normal(4, 1, 2.0, rng));
    let valid = [true, false, true, true];
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let (p, n) = (g.param(s, pos), g.param(s, neg));
            Ok(match kind {
                RecLoss::Bce => bce_loss(g, p, n, &valid),
                RecLoss::Bpr => bpr_loss(g, p, n, &valid),
            })
        }),
    })
}

fn interaction_losses(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let y = store.add("y", normal(3, 5, 1.0, rng));
    let yi = store.add("y_img", normal(3, 5, 1.0, rng));
    let yt = store.add("y_txt", normal(3, 5, 1.0, rng));
    let lambdas = LambdaWeights {
        uni_i: rng.gen_range(0.1..1.0),
        uni_t: rng.gen_range(0.1..1.0),
        syn: rng.gen_range(0.1..1.0),
        rdn: rng.gen_range(0.1..1.0),
    };
    let margin = TripletMargin::DEFAULT;
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let (a, b, c) = (g.param(s, y), g.param(s, yi), g.param(s, yt));
            let terms = vec![
                (ExpertKind::UniI, uniqueness_loss(g, a, b, c, margin)),
                (ExpertKind::UniT, uniqueness_loss(g, a, c, b, margin)),
                (ExpertKind::Syn, synergy_loss(g, a, b, c)),
                (ExpertKind::Rdn, redundancy_loss(g, a, b, c)),
            ];
            Ok(interaction_loss(g, &terms, &lambdas))
        }),
    })
}

fn fusion(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let net = ReweightNet::new(&mut store, 4, 3, 5, rng);
    // the output layer starts at zero
    *store.value_mut(net.output.weight) = normal(5, 4, 0.5, rng);
    let experts: Vec<_> = (0..4).map(|j| store.add(format!("e{j}"), normal(2, 3, 1.0, rng))).collect();
    let id = store.add("id", normal(2, 3, 1.0, rng));
    let c = normal(2, 3, 1.0, rng);
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let inputs: Vec<Option<Var>> = experts.iter().map(|&p| Some(g.param(s, p))).collect();
            let idv = g.param(s, id);
            let (_, f) = adaptive_fusion(g, s, &net, &inputs, idv);
            Ok(probe(g, f, &c))
        }),
    })
}

fn full_loss(backbone: BackboneKind, rng: &mut ChaCha8Rng) -> Result<Case> {
    let data_seed: u64 = rng.gen();
    let (ds, feats) = random_dataset(5, 8, 7, data_seed);
    let split = leave_one_out_split(&ds);
    let batch = make_batches(&split, 6, 3, data_seed, 0)?.remove(0);
    let config = ModelConfig {
        backbone,
        dim: 4,
        expert_hidden: 5,
        reweight_hidden: 3,
        blocks: 1,
        heads: 2,
        max_len: 6,
        dropout: 0.0,
        // identical experts leave the fusion weights without gradient
        identical_expert_init: false,
        ..ModelConfig::default()
    };
    let mut model = PrismModel::<f64>::new(config, PrismConfig::default(), &feats, rng.gen())?;
    let w = model.net.reweight.output.weight;
    let shape = model.store.value(w).shape().to_vec();
    *model.store.value_mut(w) = normal(shape[0], shape[1], 0.5, rng);
    let mask_seed: u64 = rng.gen();
    let PrismModel { net, store } = model;
    Ok(Case {
        store,
        loss: Box::new(move |g, s| {
            let mut mask = seed::rng(mask_seed, Stream::Masking, 0);
            let step = net.forward_train::<_, ChaCha8Rng>(g, s, &batch, RecLoss::Bce, &mut mask, None)?;
            Ok(step.total)
        }),
    })
}

/// One check per layer type plus the full training loss of both
/// backbones, each on a draw from `seed` clear of ReLU kinks.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        run("linear", seed, linear)?,
        run("mlp", seed, mlp)?,
        run("layer_norm", seed, layer_norm)?,
        run("embedding", seed, embedding)?,
        run("softmax", seed, softmax)?,
        run("cosine", seed, row_cosine)?,
        run("mean_pool", seed, |r| encoder(BackboneKind::MeanPool, r))?,
        run("attention", seed, |r| encoder(BackboneKind::Attention, r))?,
        run("bce_loss", seed, |r| rec_loss(RecLoss::Bce, r))?,
        run("bpr_loss", seed, |r| rec_loss(RecLoss::Bpr, r))?,
        run("interaction_losses", seed, interaction_losses)?,
        run("fusion", seed, fusion)?,
        run("full_loss_mean_pool", seed, |r| full_loss(BackboneKind::MeanPool, r))?,
        run("full_loss_attention", seed, |r| full_loss(BackboneKind::Attention, r))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for seed in 0..3 {
            let suite = gradient_suite(seed).unwrap();
            assert_eq!(suite.len(), 14);
            for c in suite {
                assert!(c.passed(), "seed {seed} {}: {}", c.name, c.max_rel_error);
            }
        }
    }

    #[test]
    fn kinked_draws_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![0.0, 1e-4, -2.0]).unwrap());
        g.relu(x);
        // constants carry no gradient
        assert_eq!(g.relu_margin(), f64::INFINITY);
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[1, 3], vec![0.0, 1e-4, -2.0]).unwrap());
        let mut g = Graph::<f64>::new();
        let v = g.param(&store, p);
        g.relu(v);
        assert_eq!(g.relu_margin(), 1e-4);
    }
}
