use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// Plug-in mutual information between a target and two sources, in bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub t_x1: f64,
    pub t_x2: f64,
    pub t_x12: f64,
    pub samples: usize,
}

fn entropy<K: Hash + Eq>(keys: impl Iterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    let mut n = 0usize;
    for k in keys {
        *counts.entry(k).or_insert(0) += 1;
        n += 1;
    }
    let n = n as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Empirical `I(T;X1)`, `I(T;X2)` and `I(T;X1,X2)` from `(t, x1, x2)`
/// samples. Empty input gives zeros.
pub fn discrete_mi(samples: &[(u32, u32, u32)]) -> MiEstimate {
    if samples.is_empty() {
        return MiEstimate {
            t_x1: 0.0,
            t_x2: 0.0,
            t_x12: 0.0,
            samples: 0,
        };
    }
    let s = || samples.iter();
    let h_t = entropy(s().map(|x| x.0));
    let mi = |h_x: f64, h_tx: f64| (h_t + h_x - h_tx).max(0.0);
    MiEstimate {
        t_x1: mi(entropy(s().map(|x| x.1)), entropy(s().map(|x| (x.0, x.1)))),
        t_x2: mi(entropy(s().map(|x| x.2)), entropy(s().map(|x| (x.0, x.2)))),
        t_x12: mi(entropy(s().map(|x| (x.1, x.2))), entropy(s().copied())),
        samples: samples.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionType {
    Synergy,
    UniqueX1,
    UniqueX2,
    Redundant,
    Mixed,
}

/// Dominant interaction type of an MI signature, checked in the order
/// synergy, unique, redundant.
pub fn classify_interaction(mi: &MiEstimate, tol: f64) -> InteractionType {
    let (a, b, j) = (mi.t_x1, mi.t_x2, mi.t_x12);
    if j - a - b > tol {
        InteractionType::Synergy
    } else if a > b + tol && (j - a).abs() <= tol {
        InteractionType::UniqueX1
    } else if b > a + tol && (j - b).abs() <= tol {
        InteractionType::UniqueX2
    } else if j > tol && (a - b).abs() <= tol && (a - j).abs() <= tol && (b - j).abs() <= tol {
        InteractionType::Redundant
    } else {
        InteractionType::Mixed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{self, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn bits(n: usize, f: impl Fn(u32, u32) -> u32) -> Vec<(u32, u32, u32)> {
        let mut rng = seed::rng(1, Stream::Synthetic, 9);
        (0..n)
            .map(|_| {
                let (a, b) = (rng.gen_range(0..2), rng.gen_range(0..2));
                (f(a, b), a, b)
            })
            .collect()
    }

    fn sig(m: &MiEstimate) -> (f64, f64, f64) {
        (m.t_x1, m.t_x2, m.t_x12)
    }

    #[test]
    fn analytic_channels() {
        let close = |m: MiEstimate, e: (f64, f64, f64)| {
            let s = sig(&m);
            assert!((s.0 - e.0).abs() < 0.02 && (s.1 - e.1).abs() < 0.02 && (s.2 - e.2).abs() < 0.02, "{s:?}");
        };
        close(discrete_mi(&bits(100_000, |a, _| a)), (1.0, 0.0, 1.0));
        close(discrete_mi(&bits(100_000, |a, b| a ^ b)), (0.0, 0.0, 1.0));
        let red: Vec<_> = bits(100_000, |a, _| a).into_iter().map(|(t, a, _)| (t, a, a)).collect();
        close(discrete_mi(&red), (1.0, 1.0, 1.0));
    }

    #[test]
    fn exact_on_balanced_tables() {
        let xor: Vec<_> = (0..4u32).map(|k| ((k & 1) ^ (k >> 1), k & 1, k >> 1)).collect();
        let m = discrete_mi(&xor);
        assert_eq!(sig(&m), (0.0, 0.0, 1.0));
        assert_eq!(discrete_mi(&[]).samples, 0);
    }

    #[test]
    fn signature_labels() {
        let mk = |a, b, j| MiEstimate {
            t_x1: a,
            t_x2: b,
            t_x12: j,
            samples: 1,
        };
        assert_eq!(classify_interaction(&mk(0.0, 0.0, 1.0), 0.05), InteractionType::Synergy);
        assert_eq!(classify_interaction(&mk(1.0, 0.0, 1.0), 0.05), InteractionType::UniqueX1);
        assert_eq!(classify_interaction(&mk(0.0, 1.0, 1.0), 0.05), InteractionType::UniqueX2);
        assert_eq!(classify_interaction(&mk(1.0, 1.0, 1.0), 0.05), InteractionType::Redundant);
        assert_eq!(classify_interaction(&mk(0.5, 0.3, 0.7), 0.05), InteractionType::Mixed);
        assert_eq!(classify_interaction(&mk(0.0, 0.0, 0.0), 0.05), InteractionType::Mixed);
    }

    proptest! {
        #[test]
        fn bounded_by_alphabet(samples in prop::collection::vec((0u32..3, 0u32..2, 0u32..4), 1..300)) {
            let m = discrete_mi(&samples);
            let h_t = 3f64.log2();
            for v in [m.t_x1, m.t_x2, m.t_x12] {
                prop_assert!((0.0..=h_t + 1e-9).contains(&v));
            }
            prop_assert!(m.t_x1 <= m.t_x12 + 1e-9 && m.t_x2 <= m.t_x12 + 1e-9);
        }
    }
}
