//! Explicit relation masks derived from geometry, keypoint counts and
//! appearance.

use ndarray::{Array2, ArrayView2};

use crate::domain::{GroupSample, Matrix, MemberBox, RelationMasks};
use crate::error::{Error, Result};

/// Pairwise Euclidean distances between the rows of `a` and `b`.
pub fn euclidean_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "euclidean_matrix: row widths {} and {} differ",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Mean and population standard deviation.
pub(crate) fn mean_std<I: IntoIterator<Item = f64> + Clone>(values: I) -> (f64, f64) {
    let (n, sum) = values
        .clone()
        .into_iter()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values
        .into_iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt())
}

/// Per-row standardization to mean 0 and population std 1. Rows whose std
/// falls below `floor` become all-zero.
pub fn norm_rows(x: ArrayView2<f64>, floor: f64) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let (mean, std) = mean_std(row.iter().copied());
        if std < floor {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / std);
        }
    }
    out
}

/// Appearance mask: `1` where the negated, row-standardized distance exceeds
/// `tau`. The diagonal is excluded both from the row statistics and from the
/// mask; the result is symmetrized by logical OR.
pub fn appearance_mask(f0: ArrayView2<f64>, tau: f64, floor: f64) -> Result<Matrix> {
    let n = f0.nrows();
    let dist = euclidean_matrix(f0, f0)?;
    let mut mask = Matrix::zeros((n, n));
    for i in 0..n {
        let off = (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]);
        let (mean, std) = mean_std(off);
        for j in (0..n).filter(|&j| j != i) {
            let z = if std < floor {
                0.0
            } else {
                (dist[[i, j]] - mean) / std
            };
            if -z > tau {
                mask[[i, j]] = 1.0;
                mask[[j, i]] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Occlusion and foreground masks. `m_oc[i][j] = 1` iff the boxes of `i` and
/// `j` overlap and `i` shows strictly more keypoints than `j`;
/// `m_fo` is the transpose.
pub fn occlusion_masks(members: &[MemberBox]) -> (Matrix, Matrix) {
    let n = members.len();
    let m_oc = Array2::from_shape_fn((n, n), |(i, j)| {
        let (a, b) = (&members[i], &members[j]);
        if i != j && a.overlaps(b) && a.num_keypoints > b.num_keypoints {
            1.0
        } else {
            0.0
        }
    });
    let m_fo = m_oc.t().to_owned();
    (m_oc, m_fo)
}

pub fn relation_masks(sample: &GroupSample, tau: f64, floor: f64) -> Result<RelationMasks> {
    let m_ap = appearance_mask(sample.embeddings().view(), tau, floor)?;
    let (m_oc, m_fo) = occlusion_masks(sample.members());
    Ok(RelationMasks { m_ap, m_oc, m_fo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    const FLOOR: f64 = 1e-6;

    fn mb(id: u32, bbox: [i32; 4], k: u32) -> MemberBox {
        MemberBox::new(id, bbox, k).unwrap()
    }

    #[test]
    fn disjoint_boxes_have_no_occlusion() {
        let (oc, fo) = occlusion_masks(&[mb(0, [0, 0, 10, 20], 17), mb(1, [30, 0, 40, 20], 9)]);
        assert_eq!(oc, Matrix::zeros((2, 2)));
        assert_eq!(fo, Matrix::zeros((2, 2)));
    }

    #[test]
    fn overlap_with_more_keypoints_occludes() {
        let (oc, fo) = occlusion_masks(&[mb(0, [0, 0, 10, 20], 17), mb(1, [5, 0, 15, 20], 9)]);
        assert_eq!(oc, array![[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(fo, array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn keypoint_tie_gives_no_edge() {
        let (oc, _) = occlusion_masks(&[mb(0, [0, 0, 10, 20], 12), mb(1, [5, 0, 15, 20], 12)]);
        assert_eq!(oc, Matrix::zeros((2, 2)));
    }

    #[test]
    fn touching_edges_overlap() {
        let (oc, _) = occlusion_masks(&[mb(0, [0, 0, 10, 20], 17), mb(1, [10, 0, 20, 20], 5)]);
        assert_eq!(oc[[0, 1]], 1.0);
    }

    #[test]
    fn appearance_single_member() {
        assert_eq!(
            appearance_mask(array![[1.0, 2.0]].view(), 0.0, FLOOR).unwrap(),
            array![[0.0]]
        );
    }

    #[test]
    fn appearance_duplicate_rows_linked() {
        let f = array![[0.0, 0.0], [0.0, 0.0], [10.0, 0.0]];
        let m = appearance_mask(f.view(), 0.0, FLOOR).unwrap();
        assert_eq!(m[[0, 1]], 1.0);
        assert_eq!(m[[0, 2]], 0.0);
        assert_eq!(m[[1, 0]], 1.0);
        assert_eq!(m[[2, 2]], 0.0);
    }

    #[test]
    fn appearance_infinite_threshold_is_empty() {
        let f = array![[0.0], [1.0], [5.0], [5.5]];
        let m = appearance_mask(f.view(), f64::INFINITY, FLOOR).unwrap();
        assert_eq!(m, Matrix::zeros((4, 4)));
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(
            euclidean_matrix(array![[0.0]].view(), array![[0.0]].view()).unwrap(),
            array![[0.0]]
        );
        assert_eq!(
            euclidean_matrix(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap(),
            array![[5.0]]
        );
        assert_eq!(
            euclidean_matrix(array![[1.0], [2.0]].view(), array![[1.0], [4.0]].view()).unwrap(),
            array![[0.0, 3.0], [1.0, 2.0]]
        );
        assert!(euclidean_matrix(array![[1.0]].view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn norm_rows_examples() {
        assert_eq!(norm_rows(array![[1.0, 3.0]].view(), FLOOR), array![[-1.0, 1.0]]);
        assert_eq!(norm_rows(array![[5.0, 5.0, 5.0]].view(), FLOOR), array![[0.0, 0.0, 0.0]]);
        assert_eq!(norm_rows(array![[0.0]].view(), FLOOR), array![[0.0]]);
    }

    fn boxes() -> impl Strategy<Value = Vec<MemberBox>> {
        prop::collection::vec((0i32..60, 0i32..30, 1i32..30, 1i32..30, 0u32..18), 1..7).prop_map(
            |v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (x, y, w, h, k))| mb(i as u32, [x, y, x + w, y + h], k))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn occlusion_masks_are_transposed_and_antisymmetric(members in boxes()) {
            let (oc, fo) = occlusion_masks(&members);
            prop_assert_eq!(&oc.t().to_owned(), &fo);
            let n = members.len();
            for i in 0..n {
                prop_assert_eq!(oc[[i, i]], 0.0);
                for j in 0..n {
                    prop_assert!(!(oc[[i, j]] == 1.0 && oc[[j, i]] == 1.0));
                }
            }
        }

        #[test]
        fn appearance_mask_symmetric_zero_diagonal(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..7),
            tau in -1.0f64..1.0,
        ) {
            let n = rows.len();
            let f = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            let m = appearance_mask(f.view(), tau, FLOOR).unwrap();
            prop_assert_eq!(&m, &m.t().to_owned());
            for i in 0..n {
                prop_assert_eq!(m[[i, i]], 0.0);
            }
        }

        #[test]
        fn euclidean_self_distance_symmetric(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..7),
        ) {
            let n = rows.len();
            let f = Array2::from_shape_vec((n, 4), rows.concat()).unwrap();
            let d = euclidean_matrix(f.view(), f.view()).unwrap();
            for i in 0..n {
                prop_assert_eq!(d[[i, i]], 0.0);
                for j in 0..n {
                    prop_assert_eq!(d[[i, j]], d[[j, i]]);
                    prop_assert!(d[[i, j]] >= 0.0);
                }
            }
        }

        #[test]
        fn norm_rows_standardizes(
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 5), 1..6),
        ) {
            let n = rows.len();
            let x = Array2::from_shape_vec((n, 5), rows.concat()).unwrap();
            let z = norm_rows(x.view(), FLOOR);
            for row in z.rows() {
                let (mean, std) = mean_std(row.iter().copied());
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
                assert_abs_diff_eq!(std, 1.0, epsilon = 1e-9);
            }
        }
    }
}
