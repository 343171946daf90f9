use super::{ExpertKind, LambdaWeights, TripletMargin};
use crate::numerics::{cosine, Graph, Real, Tensor, Var};

/// `max(0, m + d(a, p) − d(a, n))` with `d = 1 − cos`.
pub fn triplet_value<T: Real>(a: &[T], p: &[T], n: &[T], margin: TripletMargin) -> T {
    let d_ap = T::one() - cosine(a, p);
    let d_an = T::one() - cosine(a, n);
    (T::of(margin.get()) + d_ap - d_an).max(T::zero())
}

/// `½·[cos(y, y_img) + cos(y, y_txt)]`.
pub fn synergy_value<T: Real>(y: &[T], y_img: &[T], y_txt: &[T]) -> T {
    T::of(0.5) * (cosine(y, y_img) + cosine(y, y_txt))
}

pub fn redundancy_value<T: Real>(y: &[T], y_img: &[T], y_txt: &[T]) -> T {
    T::one() - synergy_value(y, y_img, y_txt)
}

/// Row-mean triplet loss over `[n × k]` predictions. The image-unique
/// loss is `uniqueness_loss(y, y_img, y_txt)`, the text-unique one
/// swaps the last two arguments.
pub fn uniqueness_loss<T: Real>(g: &mut Graph<T>, anchor: Var, pos: Var, neg: Var, margin: TripletMargin) -> Var {
    let c_ap = g.row_cosine(anchor, pos);
    let c_an = g.row_cosine(anchor, neg);
    // m + (1 − c_ap) − (1 − c_an)
    let diff = g.sub(c_an, c_ap);
    let shifted = g.add_scalar(diff, T::of(margin.get()));
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

pub fn synergy_loss<T: Real>(g: &mut Graph<T>, y: Var, y_img: Var, y_txt: Var) -> Var {
    let a = g.row_cosine(y, y_img);
    let b = g.row_cosine(y, y_txt);
    let s = g.add(a, b);
    let m = g.mean(s);
    g.scale(m, T::of(0.5))
}

pub fn redundancy_loss<T: Real>(g: &mut Graph<T>, y: Var, y_img: Var, y_txt: Var) -> Var {
    let s = synergy_loss(g, y, y_img, y_txt);
    let neg = g.scale(s, -T::one());
    g.add_scalar(neg, T::one())
}

/// Per-type interaction losses of one step; `None` for dropped experts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InteractionLosses {
    pub uni_i: Option<f64>,
    pub uni_t: Option<f64>,
    pub syn: Option<f64>,
    pub rdn: Option<f64>,
}

impl InteractionLosses {
    pub fn get(&self, kind: ExpertKind) -> Option<f64> {
        match kind {
            ExpertKind::UniI => self.uni_i,
            ExpertKind::UniT => self.uni_t,
            ExpertKind::Syn => self.syn,
            ExpertKind::Rdn => self.rdn,
        }
    }

    pub fn set(&mut self, kind: ExpertKind, v: Option<f64>) {
        match kind {
            ExpertKind::UniI => self.uni_i = v,
            ExpertKind::UniT => self.uni_t = v,
            ExpertKind::Syn => self.syn = v,
            ExpertKind::Rdn => self.rdn = v,
        }
    }
}

/// `Σ λ_j · L_j` over the present terms.
pub fn interaction_loss_value(losses: &InteractionLosses, lambdas: &LambdaWeights) -> f64 {
    ExpertKind::ALL
        .iter()
        .filter_map(|&k| losses.get(k).map(|l| lambdas.get(k) * l))
        .sum()
}

/// Graph form of [`interaction_loss_value`]; an empty term list gives a
/// constant zero.
pub fn interaction_loss<T: Real>(g: &mut Graph<T>, terms: &[(ExpertKind, Var)], lambdas: &LambdaWeights) -> Var {
    let mut total: Option<Var> = None;
    for &(kind, l) in terms {
        let w = g.scale(l, T::of(lambdas.get(kind)));
        total = Some(match total {
            Some(t) => g.add(t, w),
            None => w,
        });
    }
    total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore};
    use proptest::prelude::*;

    const M: TripletMargin = TripletMargin::DEFAULT;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn triplet_reference_points() {
        let y = [1.0, 0.0];
        // positive aligned, negative opposite: 1 + 0 − 2 < 0
        assert_eq!(triplet_value(&y, &[2.0, 0.0], &[-1.0, 0.0], M), 0.0);
        // positive aligned, negative orthogonal: 1 + 0 − 1 = 0
        assert!(close(triplet_value(&y, &[1.0, 0.0], &[0.0, 1.0], M), 0.0));
        // both aligned: margin only
        assert!(close(triplet_value(&y, &[1.0, 0.0], &[3.0, 0.0], M), 1.0));
        // positive opposite, negative aligned: 1 + 2 − 0
        assert!(close(triplet_value(&y, &[-1.0, 0.0], &[1.0, 0.0], M), 3.0));
        assert!(close(triplet_value(&y, &[0.0, 1.0], &[1.0, 0.0], M), 2.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(triplet_value(&y, &[h, h], &[-1.0, 0.0], M), 0.0);
    }

    #[test]
    fn synergy_reference_points() {
        let y = [1.0, 1.0];
        assert!(close(synergy_value(&y, &y, &y), 1.0));
        assert!(close(redundancy_value(&y, &y, &y), 0.0));
        assert!(close(synergy_value(&y, &[1.0, -1.0], &[-1.0, 1.0]), 0.0));
        assert!(close(synergy_value(&y, &[-1.0, -1.0], &[-2.0, -2.0]), -1.0));
        assert!(close(redundancy_value(&y, &[-1.0, -1.0], &[-2.0, -2.0]), 2.0));
        // a zero prediction counts as cosine 0
        assert!(close(synergy_value(&y, &[0.0, 0.0], &y), 0.5));
    }

    #[test]
    fn weighted_sum_of_terms() {
        let losses = InteractionLosses {
            uni_i: Some(1.0),
            uni_t: Some(2.0),
            syn: Some(0.5),
            rdn: Some(0.5),
        };
        let v = interaction_loss_value(&losses, &LambdaWeights::default());
        assert!(close(v, 0.2 + 0.1 + 0.1 + 0.25));
        let zero = LambdaWeights::uniform(0.0);
        assert_eq!(interaction_loss_value(&losses, &zero), 0.0);
        let dropped = InteractionLosses {
            syn: None,
            ..losses
        };
        assert!(close(interaction_loss_value(&dropped, &LambdaWeights::default()), 0.55));

        let parts = InteractionLosses {
            uni_i: Some(0.5),
            uni_t: Some(0.2),
            syn: Some(0.3),
            rdn: Some(0.4),
        };
        assert!(close(interaction_loss_value(&parts, &LambdaWeights::uniform(1.0)), 1.4));
        let ones = InteractionLosses {
            uni_i: Some(1.0),
            uni_t: Some(1.0),
            syn: Some(1.0),
            rdn: Some(1.0),
        };
        assert!(close(interaction_loss_value(&ones, &LambdaWeights::default()), 0.95));
    }

    fn rows(data: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(data).unwrap()
    }

    #[test]
    fn graph_losses_match_row_means() {
        let y = vec![vec![1.0, 2.0, -1.0], vec![0.5, -0.5, 2.0]];
        let yi = vec![vec![1.0, 1.0, 0.0], vec![-1.0, 0.5, 1.0]];
        let yt = vec![vec![0.0, -2.0, 1.0], vec![0.5, 0.5, 0.5]];
        let mut g = Graph::<f64>::new();
        let (a, b, c) = (g.constant(rows(&y)), g.constant(rows(&yi)), g.constant(rows(&yt)));
        let ui = uniqueness_loss(&mut g, a, b, c, M);
        let ut = uniqueness_loss(&mut g, a, c, b, M);
        let s = synergy_loss(&mut g, a, b, c);
        let r = redundancy_loss(&mut g, a, b, c);
        let mean = |f: &dyn Fn(usize) -> f64| (f(0) + f(1)) / 2.0;
        assert!(close(g.value(ui).item(), mean(&|k| triplet_value(&y[k], &yi[k], &yt[k], M))));
        assert!(close(g.value(ut).item(), mean(&|k| triplet_value(&y[k], &yt[k], &yi[k], M))));
        assert!(close(g.value(s).item(), mean(&|k| synergy_value(&y[k], &yi[k], &yt[k]))));
        assert!(close(g.value(r).item(), mean(&|k| redundancy_value(&y[k], &yi[k], &yt[k]))));
    }

    #[test]
    fn composite_loss_gradients_check() {
        let mut store = ParamStore::<f64>::new();
        let y = store.add("y", rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.6]]));
        let yi = store.add("yi", rows(&[vec![0.9, 0.2, -0.4], vec![-0.7, 1.3, 0.5]]));
        let yt = store.add("yt", rows(&[vec![-0.5, 0.6, 1.4], vec![0.2, -0.9, 0.3]]));
        // the default weights make the y_txt gradient cancel exactly, which
        // a relative check cannot resolve
        let lambdas = LambdaWeights {
            uni_i: 0.3,
            uni_t: 0.1,
            syn: 0.7,
            rdn: 0.4,
        };
        let err = grad_check(&mut store, 1e-6, |g, s| {
            let (a, b, c) = (g.param(s, y), g.param(s, yi), g.param(s, yt));
            let terms = vec![
                (ExpertKind::UniI, uniqueness_loss(g, a, b, c, M)),
                (ExpertKind::UniT, uniqueness_loss(g, a, c, b, M)),
                (ExpertKind::Syn, synergy_loss(g, a, b, c)),
                (ExpertKind::Rdn, redundancy_loss(g, a, b, c)),
            ];
            Ok(interaction_loss(g, &terms, &lambdas))
        })
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 3).prop_filter("non-degenerate", |v| {
            v.iter().map(|x| x * x).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn synergy_and_redundancy_sum_to_one(y in vec3(), a in vec3(), b in vec3()) {
            prop_assert!((synergy_value(&y, &a, &b) + redundancy_value(&y, &a, &b) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn losses_ignore_positive_scale(y in vec3(), a in vec3(), b in vec3(), s in 0.01f64..100.0) {
            let sc = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
            prop_assert!((triplet_value(&y, &a, &b, M) - triplet_value(&sc(&y), &sc(&a), &b, M)).abs() < 1e-9);
            prop_assert!((synergy_value(&y, &a, &b) - synergy_value(&sc(&y), &a, &sc(&b))).abs() < 1e-9);
        }

        #[test]
        fn losses_stay_in_range(y in vec3(), a in vec3(), b in vec3()) {
            let t = triplet_value(&y, &a, &b, M);
            prop_assert!((0.0..=3.0 + 1e-12).contains(&t));
            let s = synergy_value(&y, &a, &b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
            let r = redundancy_value(&y, &a, &b);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&r));
        }

        #[test]
        fn swapping_modalities(y in vec3(), a in vec3(), b in vec3()) {
            prop_assert!((synergy_value(&y, &a, &b) - synergy_value(&y, &b, &a)).abs() < 1e-12);
            // text-unique loss on the swapped pair equals image-unique loss on the original
            let mut g = Graph::<f64>::new();
            let t = |v: &Vec<f64>| Tensor::new(&[1, 3], v.clone()).unwrap();
            let (yv, av, bv) = (g.constant(t(&y)), g.constant(t(&a)), g.constant(t(&b)));
            let ui = uniqueness_loss(&mut g, yv, av, bv, M);
            let (img_swapped, txt_swapped) = (bv, av);
            let ut = uniqueness_loss(&mut g, yv, txt_swapped, img_swapped, M);
            prop_assert_eq!(g.value(ui).item(), g.value(ut).item());
            prop_assert!((g.value(ui).item() - triplet_value(&y, &a, &b, M)).abs() < 1e-12);
        }
    }
}
