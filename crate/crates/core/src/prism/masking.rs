use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

/// Surrogate used in place of a masked modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Fresh standard-normal draws, rescaled to the mean norm of the
    /// replaced modality.
    Random,
    /// Per-dimension mean of the replaced modality.
    Mean,
    Zero,
}

/// Surrogate rows for the modality `e` (one row per item occurrence).
///
/// `weights[r]` is how many batch positions row `r` stands for; batch
/// statistics (mean vector, mean norm) are weighted accordingly, so a
/// position-level call passes 1 for real positions and 0 for padding.
pub fn mask_modality<T: Real, R: Rng>(
    e: &Tensor<T>,
    weights: &[T],
    strategy: MaskStrategy,
    rng: &mut R,
) -> Tensor<T> {
    let (n, d) = (e.rows(), e.cols());
    assert_eq!(weights.len(), n, "one weight per row");
    let total: T = weights.iter().copied().sum();
    match strategy {
        MaskStrategy::Zero => Tensor::zeros(e.shape()),
        MaskStrategy::Mean => {
            let mut mean = vec![T::zero(); d];
            if total > T::zero() {
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(e.row(r)) {
                        *m += weights[r] * v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= total);
            }
            let data = (0..n).flat_map(|_| mean.iter().copied()).collect();
            Tensor::new(e.shape(), data).unwrap()
        }
        MaskStrategy::Random => {
            let target = if total > T::zero() {
                (0..n)
                    .map(|r| weights[r] * e.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
                    .sum::<T>()
                    / total
            } else {
                T::zero()
            };
            let mut out = Tensor::zeros(e.shape());
            for r in 0..n {
                let row = out.row_mut(r);
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = T::of(z);
                }
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    let s = target / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{self, Stream};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_strategy_gives_zeros() {
        let e = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut rng = seed::rng(0, Stream::Masking, 0);
        let r = mask_modality(&e, &[1.0, 1.0], MaskStrategy::Zero, &mut rng);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_strategy_broadcasts_batch_mean() {
        let e = t(&[vec![1.0, 3.0], vec![3.0, 1.0]]);
        let mut rng = seed::rng(0, Stream::Masking, 0);
        let r = mask_modality(&e, &[1.0, 1.0], MaskStrategy::Mean, &mut rng);
        assert_eq!(r.row(0), &[2.0, 2.0]);
        assert_eq!(r.row(1), &[2.0, 2.0]);
    }

    #[test]
    fn random_strategy_redraws_and_reproduces() {
        let e = t(&[vec![3.0, 4.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let w = [1.0, 1.0];
        let draw_twice = || {
            let mut rng = seed::rng(42, Stream::Masking, 0);
            let a = mask_modality(&e, &w, MaskStrategy::Random, &mut rng);
            let b = mask_modality(&e, &w, MaskStrategy::Random, &mut rng);
            (a, b)
        };
        let (a1, b1) = draw_twice();
        let (a2, b2) = draw_twice();
        assert_ne!(a1, b1);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        // rescaled to the mean norm (5 + 1) / 2 = 3
        for r in 0..2 {
            let n: f64 = a1.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_steer_batch_statistics() {
        let e = t(&[vec![0.0, 0.0], vec![4.0, 8.0]]);
        let mut rng = seed::rng(1, Stream::Masking, 0);
        // the second item occurs three times, the first once
        let r = mask_modality(&e, &[1.0, 3.0], MaskStrategy::Mean, &mut rng);
        assert_eq!(r.row(0), &[3.0, 6.0]);
    }
}
