use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::CovarianceEstimate;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneResult {
    pub lambda_vec: Vec<f64>,
    /// Row-major `d_model x d_mlp`.
    pub w_hat: Vec<f64>,
    /// `‖Ŵ k* − v*‖`.
    pub residual_norm: f64,
}

/// `Ŵ = W + Λ (C⁻¹k*)ᵀ` with `Λ = (v* − W k*) / ((C⁻¹k*)ᵀ k*)`.
pub fn rank_one_update(
    w: ArrayView2<'_, f64>,
    k_star: &[f64],
    v_star: &[f64],
    cov: &CovarianceEstimate,
) -> Result<RankOneResult> {
    let (rows, cols) = w.dim();
    if k_star.len() != cols || v_star.len() != rows || cov.dim != cols {
        return Err(Error::Config(format!(
            "W is {rows}x{cols}, k* has {}, v* has {}, C is {}",
            k_star.len(),
            v_star.len(),
            cov.dim
        )));
    }
    let k = Array1::from_vec(k_star.to_vec());
    let v = Array1::from_vec(v_star.to_vec());
    let c_inv_k = Array1::from_vec(cov.solve(k_star)?);
    let denom = c_inv_k.dot(&k);
    let threshold = 1e-12 * k.dot(&k);
    if !(denom.abs() >= threshold) || denom == 0.0 {
        return Err(Error::DegenerateKey { denominator: denom, threshold });
    }
    let lambda = (&v - &w.dot(&k)) / denom;
    let mut w_hat: Array2<f64> = w.to_owned();
    for (i, mut row) in w_hat.rows_mut().into_iter().enumerate() {
        if lambda[i] != 0.0 {
            row.scaled_add(lambda[i], &c_inv_k);
        }
    }
    let residual_norm = (&w_hat.dot(&k) - &v).mapv(|x| x * x).sum().sqrt();
    Ok(RankOneResult { lambda_vec: lambda.to_vec(), w_hat: w_hat.into_raw_vec_and_offset().0, residual_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn satisfied_edit_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Array2::from_shape_vec((6, 10), randn(&mut rng, 60)).unwrap();
        let k = randn(&mut rng, 10);
        let v = w.dot(&Array1::from_vec(k.clone())).to_vec();
        let r = rank_one_update(w.view(), &k, &v, &CovarianceEstimate::identity(10)).unwrap();
        assert!(r.lambda_vec.iter().all(|&x| x == 0.0));
        assert_eq!(r.w_hat, w.into_raw_vec_and_offset().0);
    }

    #[test]
    fn identity_covariance_exactness_and_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, m) = (64, 128);
        let w = Array2::from_shape_vec((d, m), randn(&mut rng, d * m)).unwrap();
        let k = randn(&mut rng, m);
        let v = randn(&mut rng, d);
        let r = rank_one_update(w.view(), &k, &v, &CovarianceEstimate::identity(m)).unwrap();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(r.residual_norm / vn <= 1e-6);

        let w_hat = Array2::from_shape_vec((d, m), r.w_hat.clone()).unwrap();
        let kv = Array1::from_vec(k.clone());
        let mut other = Array1::from_vec(randn(&mut rng, m));
        let proj = other.dot(&kv) / kv.dot(&kv);
        other.scaled_add(-proj, &kv);
        let moved = (&w_hat.dot(&other) - &w.dot(&other)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(moved <= 1e-9, "orthogonal key moved by {moved}");

        let delta = DMatrix::from_row_slice(d, m, (&w_hat - &w).as_slice().unwrap());
        let sv = delta.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(s[1] <= 1e-8 * s[0]);
    }

    #[test]
    fn zero_key_is_degenerate() {
        let w = Array2::<f64>::zeros((2, 3));
        let err = rank_one_update(w.view(), &[0.0; 3], &[1.0, 1.0], &CovarianceEstimate::identity(3)).unwrap_err();
        assert!(matches!(err, Error::DegenerateKey { .. }));
    }
}
