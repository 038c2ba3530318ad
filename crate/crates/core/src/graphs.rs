//! Global affinity, relation-specific affinities and the reconstruction loss.

use ndarray::{s, Array1, ArrayView2, Axis};

use crate::domain::{AffinitySet, Config, Matrix, ModelParams, RelationMasks};
use crate::error::{Error, Result};
use crate::relations::mean_std;

/// Intermediate values of the global affinity, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GlobalAffinity {
    /// `F0 * sym(W0) * F0^T`.
    pub w_tilde: Matrix,
    /// Kernel bandwidth; treated as a constant by the gradient code.
    pub sigma: f64,
    /// Set when `W~` is constant (e.g. a single member): the kernel carries
    /// no pairwise information and is taken as all ones.
    pub constant: bool,
    pub a_tilde0: Matrix,
    pub a0: Matrix,
}

/// Global affinity with an optional externally fixed bandwidth.
pub fn global_affinity_with_sigma(
    f0: ArrayView2<f64>,
    w0: ArrayView2<f64>,
    sigma: Option<f64>,
    floor: f64,
) -> Result<GlobalAffinity> {
    let d = f0.ncols();
    if w0.dim() != (d, d) {
        return Err(Error::Shape(format!(
            "w0 is {:?}, embeddings have width {d}",
            w0.dim()
        )));
    }
    let sym = (&w0 + &w0.t()) * 0.5;
    let w_tilde = f0.dot(&sym).dot(&f0.t());
    let spread = mean_std(w_tilde.iter().copied()).1;
    let constant = spread < floor;
    let sigma = sigma.unwrap_or(spread.max(floor));
    let scale = 2.0 * sigma * sigma;
    let a_tilde0 = if constant {
        Matrix::ones(w_tilde.raw_dim())
    } else {
        w_tilde.mapv(|w| (-(w * w) / scale).exp())
    };
    if a_tilde0.iter().any(|v| !v.is_finite()) {
        return Err(Error::AffinityOverflow(format!("sigma = {sigma}")));
    }
    let a0 = if constant {
        row_normalize(&a_tilde0, floor)
    } else {
        shifted_kernel_rows(&w_tilde, scale)
    };
    if a0.iter().any(|v| !v.is_finite()) {
        return Err(Error::AffinityOverflow("row normalization".into()));
    }
    Ok(GlobalAffinity {
        w_tilde,
        sigma,
        constant,
        a_tilde0,
        a0,
    })
}

/// Row-normalized `exp(-w^2 / scale)`, with each row's smallest exponent
/// factored out so rows stay stochastic when every entry would underflow.
fn shifted_kernel_rows(w_tilde: &Matrix, scale: f64) -> Matrix {
    let mut out = w_tilde.mapv(|w| w * w / scale);
    for mut row in out.rows_mut() {
        let min = row.fold(f64::INFINITY, |m, &v| m.min(v));
        row.mapv_inplace(|v| (min - v).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Unnormalized kernel and its row-normalized form.
pub fn global_affinity(
    f0: ArrayView2<f64>,
    w0: ArrayView2<f64>,
    floor: f64,
) -> Result<(Matrix, Matrix)> {
    let g = global_affinity_with_sigma(f0, w0, None, floor)?;
    Ok((g.a_tilde0, g.a0))
}

/// Row sums, floored from below at `floor`.
pub(crate) fn floored_row_sums(x: &Matrix, floor: f64) -> Array1<f64> {
    x.sum_axis(Axis(1)).mapv(|r| r.max(floor))
}

/// Divides each row by its (floored) sum.
pub fn row_normalize(x: &Matrix, floor: f64) -> Matrix {
    let sums = floored_row_sums(x, floor);
    x / &sums.insert_axis(Axis(1))
}

/// Gradient of [`row_normalize`] given the input `x`, its output `y`, and
/// the upstream gradient. Rows whose sum hit the floor treat it as constant.
pub(crate) fn row_normalize_backward(x: &Matrix, y: &Matrix, grad_y: &Matrix, floor: f64) -> Matrix {
    let mut grad_x = Matrix::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let raw = x.row(i).sum();
        let denom = raw.max(floor);
        let coupling = if raw > floor {
            grad_y.row(i).dot(&y.row(i))
        } else {
            0.0
        };
        for j in 0..x.ncols() {
            grad_x[[i, j]] = (grad_y[[i, j]] - coupling) / denom;
        }
    }
    grad_x
}

fn leading_block<'a>(w: &'a Matrix, n: usize, name: &str) -> Result<ArrayView2<'a, f64>> {
    if n > w.nrows() || n > w.ncols() {
        return Err(Error::Shape(format!(
            "{name}: group of {n} exceeds learned {:?} block",
            w.dim()
        )));
    }
    Ok(w.slice(s![..n, ..n]))
}

/// Mixes the kernel with the leading `N x N` block of `w_rel`, row-normalizes,
/// then applies `mask` if given. Normalization happens before masking, so
/// masked rows can sum to less than one.
pub fn relational_affinity(
    a_tilde0: &Matrix,
    w_rel: &Matrix,
    mask: Option<&Matrix>,
    floor: f64,
) -> Result<Matrix> {
    let n = a_tilde0.nrows();
    if n > w_rel.nrows() {
        return Err(Error::GroupTooLarge {
            size: n,
            max: w_rel.nrows(),
        });
    }
    let mixed = leading_block(w_rel, n, "relation matrix")?.dot(a_tilde0);
    let mut out = row_normalize(&mixed, floor);
    if let Some(mask) = mask {
        if mask.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} vs affinity {:?}",
                mask.dim(),
                out.dim()
            )));
        }
        out *= mask;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::AffinityOverflow("relational affinity".into()));
    }
    Ok(out)
}

/// Sum of the four relation affinities, right-multiplied by the leading block of `w_re`.
pub fn reconstruction(
    a_ap: &Matrix,
    a_oc: &Matrix,
    a_fo: &Matrix,
    a_rs: &Matrix,
    w_re: &Matrix,
) -> Result<Matrix> {
    let n = a_ap.nrows();
    let sum = a_ap + a_oc + a_fo + a_rs;
    Ok(sum.dot(&leading_block(w_re, n, "w_re")?))
}

/// Unsquared Frobenius distance between `a0` and its reconstruction.
pub fn reconstruction_loss(
    a0: &Matrix,
    a_ap: &Matrix,
    a_oc: &Matrix,
    a_fo: &Matrix,
    a_rs: &Matrix,
    w_re: &Matrix,
) -> Result<f64> {
    let rebuilt = reconstruction(a_ap, a_oc, a_fo, a_rs, w_re)?;
    if rebuilt.dim() != a0.dim() {
        return Err(Error::Shape("reconstruction vs a0".into()));
    }
    Ok((a0 - &rebuilt).mapv(|v| v * v).sum().sqrt())
}

/// Everything the forward pass needs from the graph stage.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub global: GlobalAffinity,
    pub affinities: AffinitySet,
    /// Effective masks (after toggles) for the four relation graphs, in
    /// `ap, oc, fo, rs` order.
    pub masks: [Matrix; 4],
}

/// Builds all affinities of one group. Disabled relation graphs get an
/// all-zero mask.
pub fn build_graphs(
    f0: ArrayView2<f64>,
    masks: &RelationMasks,
    params: &ModelParams,
    config: &Config,
    sigma: Option<f64>,
) -> Result<GraphState> {
    let n = f0.nrows();
    if n > config.max_group_size {
        return Err(Error::GroupTooLarge {
            size: n,
            max: config.max_group_size,
        });
    }
    let floor = config.sigma_floor;
    let global = global_affinity_with_sigma(f0, params.w0.view(), sigma, floor)?;
    let zero = Matrix::zeros((n, n));
    let ones = Matrix::ones((n, n));
    let g = config.graphs;
    let pick = |on: bool, m: &Matrix| if on { m.clone() } else { zero.clone() };
    let eff = [
        pick(g.appearance, &masks.m_ap),
        pick(g.occlusion, &masks.m_oc),
        pick(g.foreground, &masks.m_fo),
        pick(g.implicit, &ones),
    ];
    let a_ap = relational_affinity(&global.a_tilde0, &params.w_ap, Some(&eff[0]), floor)?;
    let a_oc = relational_affinity(&global.a_tilde0, &params.w_oc, Some(&eff[1]), floor)?;
    let a_fo = relational_affinity(&global.a_tilde0, &params.w_fo, Some(&eff[2]), floor)?;
    let a_rs = if g.implicit {
        relational_affinity(&global.a_tilde0, &params.w_rs, None, floor)?
    } else {
        zero.clone()
    };
    let affinities = AffinitySet {
        a_tilde0: global.a_tilde0.clone(),
        a0: global.a0.clone(),
        a_ap,
        a_oc,
        a_fo,
        a_rs,
    };
    Ok(GraphState {
        global,
        affinities,
        masks: eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    const FLOOR: f64 = 1e-6;

    #[test]
    fn zero_weights_give_uniform_affinity() {
        let f0 = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let (at, a0) = global_affinity(f0.view(), Matrix::zeros((2, 2)).view(), FLOOR).unwrap();
        assert!(at.iter().all(|&v| v == 1.0));
        for v in a0.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_node_affinity() {
        // W~ = [[1,2],[2,4]], population std of {1,2,2,4} = sqrt(1.1875)
        let f0 = array![[1.0], [2.0]];
        let g = global_affinity_with_sigma(f0.view(), array![[1.0]].view(), None, FLOOR).unwrap();
        assert_eq!(g.w_tilde, array![[1.0, 2.0], [2.0, 4.0]]);
        assert_abs_diff_eq!(g.sigma, 1.1875f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.sigma, 1.0897, epsilon = 1e-4);
        let expected_tilde = array![[0.6563, 0.1856], [0.1856, 0.00119]];
        for (a, b) in g.a_tilde0.iter().zip(expected_tilde.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
        let expected_a0 = array![[0.7796, 0.2204], [0.9936, 0.0064]];
        for (a, b) in g.a0.iter().zip(expected_a0.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
    }

    #[test]
    fn permuting_rows_permutes_affinity() {
        let f0 = array![[1.0, 0.2], [0.1, 0.7], [-0.4, 0.3]];
        let w0 = array![[0.9, 0.3], [-0.2, 1.1]];
        let perm = [2usize, 0, 1];
        let fp = f0.select(Axis(0), &perm);
        let (_, a) = global_affinity(f0.view(), w0.view(), FLOOR).unwrap();
        let (_, ap) = global_affinity(fp.view(), w0.view(), FLOOR).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(ap[[i, j]], a[[perm[i], perm[j]]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_mask_annihilates() {
        let at = array![[1.0, 0.5], [0.5, 1.0]];
        let a = relational_affinity(&at, &Matrix::eye(6), Some(&Matrix::zeros((2, 2))), FLOOR)
            .unwrap();
        assert_eq!(a, Matrix::zeros((2, 2)));
    }

    #[test]
    fn identity_mixing_reduces_to_global_normalization() {
        let at = array![[1.0, 0.25, 0.5], [0.25, 1.0, 0.1], [0.5, 0.1, 1.0]];
        let a = relational_affinity(&at, &Matrix::eye(6), None, FLOOR).unwrap();
        assert_eq!(a, row_normalize(&at, FLOOR));
    }

    #[test]
    fn normalization_precedes_masking() {
        // Masked rows keep the unmasked denominator and so sum below one.
        let at = array![[0.5, 0.5], [0.5, 0.5]];
        let mask = array![[0.0, 1.0], [0.0, 0.0]];
        let a = relational_affinity(&at, &Matrix::eye(6), Some(&mask), FLOOR).unwrap();
        assert_eq!(a.row(0).to_vec(), vec![0.0, 0.5]);
        assert!(a.row(0).sum() < 1.0);
    }

    #[test]
    fn oversized_group_rejected() {
        let at = Matrix::ones((3, 3));
        assert!(relational_affinity(&at, &Matrix::eye(2), None, FLOOR).is_err());
    }

    #[test]
    fn exact_reconstruction_has_zero_loss() {
        let a0 = array![[0.6, 0.4], [0.3, 0.7]];
        let z = Matrix::zeros((2, 2));
        let loss = reconstruction_loss(&a0, &a0, &z, &z, &z, &Matrix::eye(6)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identity_against_zero_reconstruction() {
        let z = Matrix::zeros((2, 2));
        let loss = reconstruction_loss(&Matrix::eye(2), &z, &z, &z, &z, &Matrix::eye(6)).unwrap();
        assert_abs_diff_eq!(loss, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn reconstruction_is_linear_in_w_re() {
        let a = array![[0.2, 0.8], [0.5, 0.5]];
        let b = array![[0.1, 0.0], [0.0, 0.3]];
        let w = array![[0.7, 0.1], [0.2, 0.9]];
        let base = reconstruction(&a, &b, &b, &a, &w).unwrap();
        let scaled = reconstruction(&a, &b, &b, &a, &(&w * 3.0)).unwrap();
        for (x, y) in base.iter().zip(scaled.iter()) {
            assert_abs_diff_eq!(3.0 * x, *y, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn affinity_invariants(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..7),
            w in prop::collection::vec(-1.0f64..1.0, 9),
            mask_bits in prop::collection::vec(any::<bool>(), 36),
        ) {
            let n = rows.len();
            let f0 = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            let w0 = Array2::from_shape_vec((3, 3), w).unwrap();
            let g = global_affinity_with_sigma(f0.view(), w0.view(), None, FLOOR).unwrap();
            for row in g.a0.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            prop_assert!(g.a_tilde0.iter().all(|&v| v > 0.0 && v <= 1.0));
            let asym = (&g.a_tilde0 - &g.a_tilde0.t()).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
            prop_assert!(asym < 1e-12);
            let mask = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(mask_bits[i * 6 + j])));
            let a = relational_affinity(&g.a_tilde0, &Matrix::eye(6), Some(&mask), FLOOR).unwrap();
            for ((i, j), v) in a.indexed_iter() {
                if mask[[i, j]] == 0.0 {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
