//! Dense symmetric positive definite solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

/// Lower-triangular `L` with `a = L Lᵀ`.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Config(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular(format!("pivot {j} is {d:e}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` for a Cholesky factor `L`.
pub fn cholesky_solve(l: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn solves_spd_systems(entries in proptest::collection::vec(-1.0f64..1.0, 36), b in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let m = Array2::from_shape_vec((6, 6), entries).unwrap();
            let a = m.dot(&m.t()) + Array2::<f64>::eye(6) * 0.5;
            let l = cholesky(a.view()).unwrap();
            let b = Array1::from_vec(b);
            let x = cholesky_solve(l.view(), b.view());
            let r = a.dot(&x) - &b;
            prop_assert!(r.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = ndarray::arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(cholesky(a.view()), Err(Error::Singular(_))));
    }
}
