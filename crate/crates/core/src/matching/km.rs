//! Maximum-weight bipartite assignment (Kuhn-Munkres with potentials).

use crate::domain::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched `(row, column)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
    /// Mean matched weight, `total / min(rows, cols)`.
    pub score: f64,
}

/// Minimum-cost perfect assignment on a square cost matrix. Returns
/// `col_of_row`.
fn hungarian_min(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

/// Maximum-weight assignment of `min(N, M)` pairs. Rectangular inputs are
/// zero-padded to square; padded pairs are dropped from the result.
pub fn km_assign(weights: &Matrix) -> Result<Assignment> {
    let (rows, cols) = weights.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Shape("km_assign: non-finite weight".into()));
    }
    let n = rows.max(cols);
    let max_w = weights.iter().fold(0.0f64, |m, &w| m.max(w));
    let cost = Matrix::from_shape_fn((n, n), |(i, j)| {
        let w = if i < rows && j < cols { weights[[i, j]] } else { 0.0 };
        max_w - w
    });
    let col_of_row = hungarian_min(&cost);
    let pairs: Vec<(usize, usize)> = col_of_row
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols)
        .collect();
    let total: f64 = pairs.iter().map(|&(i, j)| weights[[i, j]]).sum();
    Ok(Assignment {
        score: total / rows.min(cols) as f64,
        pairs,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn single_pair() {
        let a = km_assign(&array![[0.7]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_abs_diff_eq!(a.score, 0.7);
    }

    #[test]
    fn identity_structure() {
        let a = km_assign(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_abs_diff_eq!(a.score, 1.0);
    }

    #[test]
    fn three_by_three_brute_force_value() {
        let a = km_assign(&array![[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.4, 0.7]]).unwrap();
        assert_abs_diff_eq!(a.total, 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(a.score, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn rectangular_drops_padding() {
        let a = km_assign(&array![[0.1, 0.9, 0.3]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_abs_diff_eq!(a.score, 0.9);
        let a = km_assign(&array![[0.1], [0.9], [0.3]]).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(km_assign(&Matrix::zeros((0, 3))), Err(Error::EmptyMatrix)));
    }
}
