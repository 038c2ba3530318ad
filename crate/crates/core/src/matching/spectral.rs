//! Spectral clustering of a group's global affinity.

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::Matrix;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// `I - D^{-1/2} A D^{-1/2}` of the symmetrized affinity. Isolated nodes
/// (zero degree) get a zero scaling.
pub fn normalized_laplacian(affinity: &Matrix) -> Matrix {
    let sym = (affinity + &affinity.t()) * 0.5;
    let inv_sqrt: Array1<f64> = sym
        .sum_axis(Axis(1))
        .mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let n = sym.nrows();
    Matrix::from_shape_fn((n, n), |(i, j)| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - inv_sqrt[i] * sym[[i, j]] * inv_sqrt[j]
    })
}

#[derive(Debug, Clone)]
pub struct SpectralClusters {
    /// `t x t` centroids in the row-normalized spectral embedding.
    pub centroids: Matrix,
    /// Cluster index of every node.
    pub labels: Vec<usize>,
    /// Set when fewer than `t` eigenvalues cleared the zero tolerance and
    /// zero eigenvalues had to be used.
    pub used_zero_eigenvalues: bool,
}

/// Spectral embedding from the `t` smallest nonzero eigenvalues, rows scaled
/// to unit length, then seeded k-means with `k = t`.
pub fn spectral_subgraphs(a0: &Matrix, t: usize, seed: u64, zero_tol: f64) -> Result<SpectralClusters> {
    let n = a0.nrows();
    if !(1 < t && t < n) {
        return Err(Error::InvalidConfig(format!(
            "cluster count {t} must satisfy 1 < t < {n}"
        )));
    }
    let eig = symmetric_eigen(&normalized_laplacian(a0))?;
    let nonzero: Vec<usize> = (0..n).filter(|&k| eig.values[k] > zero_tol).take(t).collect();
    let (cols, fallback) = if nonzero.len() == t {
        (nonzero, false)
    } else {
        ((0..t).collect(), true)
    };
    let mut u = eig.vectors.select(Axis(1), &cols);
    for mut row in u.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let (centroids, labels) = kmeans(&u, t, seed);
    Ok(SpectralClusters {
        centroids,
        labels,
        used_zero_eigenvalues: fallback,
    })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Matrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd's k-means with k-means++ seeding. An emptied cluster keeps its
/// previous centroid.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let (n, dim) = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut closest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut labels = vec![0; n];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, p) in points.rows().into_iter().enumerate() {
            labels[i] = nearest(p, &centroids);
        }
        let mut next = centroids.clone();
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mean = points
                .select(Axis(0), &members)
                .mean_axis(Axis(0))
                .expect("non-empty cluster");
            next.row_mut(c).assign(&mean);
        }
        let shift = (&next - &centroids).mapv(|v| v * v).sum().sqrt();
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, p) in points.rows().into_iter().enumerate() {
        labels[i] = nearest(p, &centroids);
    }
    (centroids, labels)
}
