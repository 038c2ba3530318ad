//! Cyclic Jacobi eigensolver for the small symmetric matrices that appear in
//! spectral clustering (a handful of rows at most).

use crate::domain::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]] * a[[i, j]];
            }
        }
    }
    s.sqrt()
}

pub fn symmetric_eigen(matrix: &Matrix) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Shape(format!("eigen: {:?} is not square", matrix.dim())));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("eigen: non-finite entry".into()));
    }
    let mut a = (matrix + &matrix.t()) * 0.5;
    let mut v = Matrix::eye(n);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Matrix::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok(SymmetricEigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn diagonal_matrix() {
        let e = symmetric_eigen(&array![[3.0, 0.0], [0.0, -1.0]]).unwrap();
        assert_eq!(e.values, vec![-1.0, 3.0]);
    }

    #[test]
    fn two_by_two() {
        let e = symmetric_eigen(&array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn non_square_rejected() {
        assert!(symmetric_eigen(&Matrix::zeros((2, 3))).is_err());
    }

    proptest! {
        #[test]
        fn reconstructs_input(vals in prop::collection::vec(-5.0f64..5.0, 36), n in 1usize..7) {
            let raw = Array2::from_shape_vec((6, 6), vals).unwrap();
            let m = raw.slice(ndarray::s![..n, ..n]).to_owned();
            let m = (&m + &m.t()) * 0.5;
            let e = symmetric_eigen(&m).unwrap();
            let lambda = Matrix::from_diag(&ndarray::Array1::from(e.values.clone()));
            let rebuilt = e.vectors.dot(&lambda).dot(&e.vectors.t());
            for (a, b) in rebuilt.iter().zip(m.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let gram = e.vectors.t().dot(&e.vectors);
            for ((i, j), g) in gram.indexed_iter() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g - want).abs() < 1e-9);
            }
            prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
