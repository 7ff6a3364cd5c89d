use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky, cholesky_solve};
use crate::model::{forward, ModelBundle, TapPosition, TapRequest, TapSite};
use crate::{Error, Result, TokenId};

/// Second moment `C = (1/n) sum k kᵀ` of MLP keys, inverted with a ridge
/// term `lambda I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// Row-major `dim x dim`.
    pub c: Vec<f64>,
    pub dim: usize,
    pub sample_count: usize,
    pub ridge_lambda: f64,
}

impl CovarianceEstimate {
    /// `C = I`, no ridge.
    pub fn identity(dim: usize) -> Self {
        let mut c = vec![0.0; dim * dim];
        for i in 0..dim {
            c[i * dim + i] = 1.0;
        }
        CovarianceEstimate { c, dim, sample_count: 0, ridge_lambda: 0.0 }
    }

    /// Second moment of `keys`. `ridge` defaults to `1e-4 * trace(C) / dim`.
    pub fn from_keys(keys: &[Vec<f64>], ridge: Option<f64>) -> Result<Self> {
        let dim = keys.first().map(Vec::len).ok_or_else(|| Error::Input("no key samples".into()))?;
        let mut c = Array2::<f64>::zeros((dim, dim));
        for k in keys {
            if k.len() != dim {
                return Err(Error::Input("key samples differ in length".into()));
            }
            let k = Array1::from_vec(k.clone());
            let outer = k.view().insert_axis(ndarray::Axis(1));
            c += &outer.dot(&outer.t());
        }
        c /= keys.len() as f64;
        let trace = c.diag().sum();
        let ridge_lambda = ridge.unwrap_or(1e-4 * trace / dim as f64);
        if !(ridge_lambda >= 0.0) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {ridge_lambda}")));
        }
        if ridge_lambda == 0.0 && keys.len() < dim {
            return Err(Error::Singular(format!(
                "{} samples cannot span {dim} dimensions without a ridge term",
                keys.len()
            )));
        }
        Ok(CovarianceEstimate { c: c.into_raw_vec_and_offset().0, dim, sample_count: keys.len(), ridge_lambda })
    }

    /// `trace(C) / dim`, the scale used for the default ridge.
    pub fn mean_variance(&self) -> f64 {
        (0..self.dim).map(|i| self.c[i * self.dim + i]).sum::<f64>() / self.dim.max(1) as f64
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.dim, self.dim), self.c.clone()).expect("square")
    }

    /// `C + lambda I`.
    pub fn regularized(&self) -> Array2<f64> {
        let mut c = self.matrix();
        c.diag_mut().mapv_inplace(|x| x + self.ridge_lambda);
        c
    }

    /// `(C + lambda I)^{-1} k`.
    pub fn solve(&self, k: &[f64]) -> Result<Vec<f64>> {
        if k.len() != self.dim {
            return Err(Error::Config(format!("key has length {}, covariance is {}", k.len(), self.dim)));
        }
        let l = cholesky(self.regularized().view())?;
        Ok(cholesky_solve(l.view(), Array1::from_vec(k.to_vec()).view()).to_vec())
    }
}

/// Key second moment of `layer` over every position of every sequence.
pub fn estimate_covariance(
    model: &ModelBundle,
    layer: usize,
    corpus: &[Vec<TokenId>],
    ridge: Option<f64>,
) -> Result<CovarianceEstimate> {
    model.config().check_layer(layer)?;
    if corpus.is_empty() {
        return Err(Error::Input("covariance corpus is empty".into()));
    }
    let mut keys = Vec::new();
    for seq in corpus {
        let taps: Vec<TapRequest> = (0..seq.len())
            .map(|i| TapRequest { layer, site: TapSite::MlpPostActivation, position: TapPosition::Index(i) })
            .collect();
        let out = forward(model, seq, &taps, None, None)?;
        keys.extend(out.tapped.into_iter().map(|(_, k)| k));
    }
    CovarianceEstimate::from_keys(&keys, ridge)
}
