use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LossValue;
use crate::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of direction `index` at optimization step `step`.
pub fn direction_seed(seed: u64, step: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step) ^ index)
}

/// A standard normal perturbation direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSample {
    pub u: Vec<f64>,
    pub seed: u64,
}

impl DirectionSample {
    pub fn draw(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        DirectionSample { u, seed }
    }
}

/// Central-difference estimate over `n` directions together with the mean
/// of the `2n` loss values it evaluated.
pub(crate) fn estimate(
    mut loss: impl FnMut(&[f64]) -> Result<LossValue>,
    v: &[f64],
    mu: f64,
    n: usize,
    seed: u64,
    step: u64,
) -> Result<(Vec<f64>, LossValue)> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    if n == 0 {
        return Err(Error::Config("n_directions must be at least 1".into()));
    }
    let mut grad = vec![0.0; v.len()];
    let mut mean = LossValue { total: 0.0, nll: 0.0, kl: 0.0 };
    let mut probe = vec![0.0; v.len()];
    for i in 0..n {
        let dir = DirectionSample::draw(direction_seed(seed, step, i as u64), v.len());
        let mut eval = |sign: f64| -> Result<LossValue> {
            for ((p, x), u) in probe.iter_mut().zip(v).zip(&dir.u) {
                *p = x + sign * mu * u;
            }
            let l = loss(&probe)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { index: i });
            }
            Ok(l)
        };
        let plus = eval(1.0)?;
        let minus = eval(-1.0)?;
        let coef = (plus.total - minus.total) / (2.0 * mu);
        for (g, u) in grad.iter_mut().zip(&dir.u) {
            *g += coef * u;
        }
        for l in [plus, minus] {
            mean.total += l.total;
            mean.nll += l.nll;
            mean.kl += l.kl;
        }
    }
    let k = n as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    let m = 2.0 * k;
    Ok((grad, LossValue { total: mean.total / m, nll: mean.nll / m, kl: mean.kl / m }))
}

/// `(1/N) sum_i (L(v + mu u_i) - L(v - mu u_i)) / (2 mu) * u_i` with
/// `u_i ~ N(0, I)` derived from `rng_seed`. Evaluates `loss` exactly `2N`
/// times.
pub fn zo_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    v: &[f64],
    mu: f64,
    n_directions: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    let scalar = |x: &[f64]| {
        let l = loss(x);
        Ok(LossValue { total: l, nll: l, kl: 0.0 })
    };
    estimate(scalar, v, mu, n_directions, rng_seed, 0).map(|(g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn same_seed_same_direction() {
        let a = DirectionSample::draw(direction_seed(1, 2, 3), 16);
        let b = DirectionSample::draw(direction_seed(1, 2, 3), 16);
        assert_eq!(a, b);
        assert_ne!(a, DirectionSample::draw(direction_seed(1, 2, 4), 16));
    }

    #[test]
    fn counts_two_evaluations_per_direction() {
        let mut calls = 0;
        zo_gradient(
            |_| {
                calls += 1;
                0.0
            },
            &[1.0; 4],
            1e-3,
            7,
            0,
        )
        .unwrap();
        assert_eq!(calls, 14);
    }

    #[test]
    fn non_finite_loss_names_direction() {
        let mut calls = 0;
        let err = zo_gradient(
            |_| {
                calls += 1;
                if calls == 5 {
                    f64::NAN
                } else {
                    0.0
                }
            },
            &[1.0; 4],
            1e-3,
            4,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { index: 2 }));
    }

    #[test]
    fn spd_quadratic_cosine() {
        let d = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let a = &b * b.transpose() / d as f64 + DMatrix::identity(d, d);
        let v = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let loss = |x: &[f64]| {
            let x = DVector::from_column_slice(x);
            0.5 * (x.transpose() * &a * &x)[(0, 0)]
        };
        let g = zo_gradient(loss, v.as_slice(), 1e-4, 2000, 9).unwrap();
        let exact = &a * &v;
        let cos = dot(&g, exact.as_slice()) / (g.iter().map(|x| x * x).sum::<f64>().sqrt() * exact.norm());
        assert!(cos >= 0.95, "cosine {cos}");
    }

    proptest! {
        #[test]
        fn exact_on_quadratic(v in proptest::collection::vec(-5.0f64..5.0, 1..16), mu in 1e-4f64..1.0, seed: u64) {
            let g = zo_gradient(|x| 0.5 * dot(x, x), &v, mu, 1, seed).unwrap();
            let u = DirectionSample::draw(direction_seed(seed, 0, 0), v.len()).u;
            let c = dot(&u, &v);
            for (gi, ui) in g.iter().zip(&u) {
                prop_assert!((gi - c * ui).abs() <= 1e-10 * (1.0 + (c * ui).abs()));
            }
        }

        #[test]
        fn exact_on_linear(b in proptest::collection::vec(-5.0f64..5.0, 8), mu in 1e-4f64..1.0, seed: u64) {
            let v = vec![0.3; 8];
            let g = zo_gradient(|x| dot(&b, x), &v, mu, 1, seed).unwrap();
            let u = DirectionSample::draw(direction_seed(seed, 0, 0), 8).u;
            let c = dot(&b, &u);
            for (gi, ui) in g.iter().zip(&u) {
                prop_assert!((gi - c * ui).abs() <= 1e-9 * (1.0 + (c * ui).abs()));
            }
        }

        #[test]
        fn estimate_lies_in_direction_span(seed: u64, n in 1usize..4) {
            let d = 10;
            let v: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
            let g = zo_gradient(|x| x.iter().map(|t| t.powi(4)).sum(), &v, 1e-3, n, seed).unwrap();
            let us: Vec<DVector<f64>> = (0..n)
                .map(|i| DVector::from_vec(DirectionSample::draw(direction_seed(seed, 0, i as u64), d).u))
                .collect();
            let basis = DMatrix::from_columns(&us);
            let gv = DVector::from_vec(g);
            let coef = basis.clone().svd(true, true).solve(&gv, 1e-12).unwrap();
            let resid = (&basis * coef - &gv).norm();
            prop_assert!(resid <= 1e-8 * (1.0 + gv.norm()));
        }
    }
}
