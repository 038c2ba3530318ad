//! Data types shared by every stage of the pipeline.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Default maximum group size; the learned relation matrices are this wide.
pub const DEFAULT_MAX_GROUP_SIZE: usize = 6;

/// One detected person inside a group image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberBox {
    pub member_id: u32,
    /// `[x_lt, y_lt, x_rb, y_rb]` in pixels.
    pub bbox: [i32; 4],
    pub num_keypoints: u32,
}

impl MemberBox {
    pub fn new(member_id: u32, bbox: [i32; 4], num_keypoints: u32) -> Result<Self> {
        let b = Self {
            member_id,
            bbox,
            num_keypoints,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let [x_lt, y_lt, x_rb, y_rb] = self.bbox;
        if x_lt >= x_rb {
            return Err(Error::InvalidMember {
                member_id: self.member_id,
                reason: format!("bbox x_lt {x_lt} must be < x_rb {x_rb}"),
            });
        }
        if y_lt >= y_rb {
            return Err(Error::InvalidMember {
                member_id: self.member_id,
                reason: format!("bbox y_lt {y_lt} must be < y_rb {y_rb}"),
            });
        }
        Ok(())
    }

    /// Closed-rectangle intersection test; touching edges count as overlap.
    pub fn overlaps(&self, other: &MemberBox) -> bool {
        let [ax0, ay0, ax1, ay1] = self.bbox;
        let [bx0, by0, bx1, by1] = other.bbox;
        ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
    }
}

/// Permutation that sorts `members` by `(x_lt, y_lt, member_id)`.
pub fn canonical_permutation(members: &[MemberBox]) -> Result<Vec<usize>> {
    if members.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.sort_by_key(|&i| {
        let m = &members[i];
        (m.bbox[0], m.bbox[1], m.member_id)
    });
    Ok(idx)
}

/// Sort members into the canonical left-to-right order.
pub fn canonical_order(members: &[MemberBox]) -> Result<Vec<MemberBox>> {
    let perm = canonical_permutation(members)?;
    Ok(perm.into_iter().map(|i| members[i].clone()).collect())
}

/// One group image: its members in canonical order plus their initial embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_id: u32,
    pub view_id: u32,
    members: Vec<MemberBox>,
    embeddings: Matrix,
}

impl GroupSample {
    /// Builds a sample, reordering members (and the matching embedding rows)
    /// into canonical order.
    pub fn new(
        group_id: u32,
        view_id: u32,
        members: Vec<MemberBox>,
        embeddings: Matrix,
    ) -> Result<Self> {
        let perm = canonical_permutation(&members)?;
        if embeddings.nrows() != members.len() {
            return Err(Error::Shape(format!(
                "group {group_id}: {} members but {} embedding rows",
                members.len(),
                embeddings.nrows()
            )));
        }
        if embeddings.ncols() == 0 {
            return Err(Error::Shape(format!("group {group_id}: zero-width embeddings")));
        }
        for m in &members {
            m.validate()?;
        }
        if let Some((r, _)) = embeddings
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Shape(format!(
                "group {group_id}: embedding row {r} is not finite"
            )));
        }
        let members = perm.iter().map(|&i| members[i].clone()).collect();
        let embeddings = embeddings.select(Axis(0), &perm);
        Ok(Self {
            group_id,
            view_id,
            members,
            embeddings,
        })
    }

    pub fn members(&self) -> &[MemberBox] {
        &self.members
    }

    /// Initial node features, one row per member.
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn member_labels(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.member_id as usize).collect()
    }

    pub fn check_size(&self, max_group_size: usize) -> Result<()> {
        if self.len() > max_group_size {
            return Err(Error::GroupTooLarge {
                size: self.len(),
                max: max_group_size,
            });
        }
        Ok(())
    }
}

/// Explicit relation masks with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMasks {
    pub m_ap: Matrix,
    pub m_oc: Matrix,
    pub m_fo: Matrix,
}

/// Global affinity and the four relation-specific affinities of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinitySet {
    /// Unnormalized Gaussian kernel, entries in (0, 1].
    pub a_tilde0: Matrix,
    pub a0: Matrix,
    pub a_ap: Matrix,
    pub a_oc: Matrix,
    pub a_fo: Matrix,
    pub a_rs: Matrix,
}

impl AffinitySet {
    /// The five propagation matrices in convolution order.
    pub fn propagators(&self) -> [&Matrix; 5] {
        [&self.a0, &self.a_ap, &self.a_oc, &self.a_fo, &self.a_rs]
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w0: Matrix,
    pub w_ap: Matrix,
    pub w_oc: Matrix,
    pub w_fo: Matrix,
    pub w_rs: Matrix,
    pub w_re: Matrix,
    /// One `6d x d` matrix per convolution layer.
    pub w_dim: Vec<Matrix>,
    /// One `d x out` projection per layer, including layer 0.
    pub w_out: Vec<Matrix>,
    pub classifier: Matrix,
    pub classifier_bias: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(config: &Config) -> Self {
        let d = config.embed_dim;
        let n = config.max_group_size;
        let z = |r, c| Matrix::zeros((r, c));
        Self {
            w0: z(d, d),
            w_ap: z(n, n),
            w_oc: z(n, n),
            w_fo: z(n, n),
            w_rs: z(n, n),
            w_re: z(n, n),
            w_dim: (0..config.layers).map(|_| z(6 * d, d)).collect(),
            w_out: (0..=config.layers).map(|_| z(d, config.out_dim)).collect(),
            classifier: z(config.out_dim, config.num_classes),
            classifier_bias: Array1::zeros(config.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.tensors_mut().into_iter().for_each(|(_, mut t)| t.fill(0.0));
        g
    }

    /// Tensor names in a fixed order; checkpoints use the same names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("w0".to_string(), self.w0.view().into_dyn()),
            ("w_ap".to_string(), self.w_ap.view().into_dyn()),
            ("w_oc".to_string(), self.w_oc.view().into_dyn()),
            ("w_fo".to_string(), self.w_fo.view().into_dyn()),
            ("w_rs".to_string(), self.w_rs.view().into_dyn()),
            ("w_re".to_string(), self.w_re.view().into_dyn()),
        ];
        for (s, w) in self.w_dim.iter().enumerate() {
            out.push((format!("w_dim.{s}"), w.view().into_dyn()));
        }
        for (s, w) in self.w_out.iter().enumerate() {
            out.push((format!("w_out.{s}"), w.view().into_dyn()));
        }
        out.push(("classifier".to_string(), self.classifier.view().into_dyn()));
        out.push((
            "classifier_bias".to_string(),
            self.classifier_bias.view().into_dyn(),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("w0".to_string(), self.w0.view_mut().into_dyn()),
            ("w_ap".to_string(), self.w_ap.view_mut().into_dyn()),
            ("w_oc".to_string(), self.w_oc.view_mut().into_dyn()),
            ("w_fo".to_string(), self.w_fo.view_mut().into_dyn()),
            ("w_rs".to_string(), self.w_rs.view_mut().into_dyn()),
            ("w_re".to_string(), self.w_re.view_mut().into_dyn()),
        ];
        for (s, w) in self.w_dim.iter_mut().enumerate() {
            out.push((format!("w_dim.{s}"), w.view_mut().into_dyn()));
        }
        for (s, w) in self.w_out.iter_mut().enumerate() {
            out.push((format!("w_out.{s}"), w.view_mut().into_dyn()));
        }
        out.push((
            "classifier".to_string(),
            self.classifier.view_mut().into_dyn(),
        ));
        out.push((
            "classifier_bias".to_string(),
            self.classifier_bias.view_mut().into_dyn(),
        ));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(scale, &src);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &Config) -> Result<()> {
        let expected = ModelParams::zeros(config);
        let mine = self.tensors();
        let theirs = expected.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors for {} layers, found {}",
                theirs.len(),
                config.layers,
                mine.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(theirs.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, config requires {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fused multi-scale similarity between a query and one gallery group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub p_nod: f64,
    pub p_sub: f64,
    pub p_glo: f64,
    pub p: f64,
    pub sub_skipped: bool,
}

/// How the number of local-scale clusters is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Fixed(usize),
    /// `round((N + M) / 4)`.
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphToggles {
    pub appearance: bool,
    pub occlusion: bool,
    pub foreground: bool,
    pub implicit: bool,
}

impl GraphToggles {
    pub const ALL: GraphToggles = GraphToggles {
        appearance: true,
        occlusion: true,
        foreground: true,
        implicit: true,
    };
}

impl Default for GraphToggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub id: bool,
    pub triplet: bool,
    pub reconstruction: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            id: true,
            triplet: true,
            reconstruction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// Input embedding width `d`.
    pub embed_dim: usize,
    pub out_dim: usize,
    /// Number of multi-graph convolution layers `S`.
    pub layers: usize,
    pub max_group_size: usize,
    /// Number of member identity classes for the classifier head.
    pub num_classes: usize,
    /// Appearance mask threshold.
    pub tau: f64,
    pub margin: f64,
    /// Reconstruction loss weight.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub clusters: ClusterMode,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    pub zero_eig_tol: f64,
    pub init_noise: f64,
    pub graphs: GraphToggles,
    pub losses: LossToggles,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            out_dim: 32,
            layers: 2,
            max_group_size: DEFAULT_MAX_GROUP_SIZE,
            num_classes: 1,
            tau: 0.0,
            margin: 0.3,
            delta: 0.2,
            alpha: 0.6,
            beta: 0.3,
            gamma: 0.1,
            clusters: ClusterMode::Fixed(3),
            lr: 0.0003,
            momentum: 0.0,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            sigma_floor: 1e-6,
            zero_eig_tol: 1e-8,
            init_noise: 0.01,
            graphs: GraphToggles::ALL,
            losses: LossToggles::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.embed_dim == 0 || self.out_dim == 0 {
            return bad("embed_dim and out_dim must be positive");
        }
        if self.max_group_size == 0 {
            return bad("max_group_size must be at least 1");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.alpha + self.beta + self.gamma > 0.0) {
            return bad("alpha + beta + gamma must be > 0");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be > 0");
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("lr must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if let ClusterMode::Fixed(0) = self.clusters {
            return bad("fixed cluster count must be positive");
        }
        if !self.tau.is_finite() && self.tau != f64::INFINITY {
            return bad("tau must be finite or +inf");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn mb(id: u32, x: i32, y: i32) -> MemberBox {
        MemberBox::new(id, [x, y, x + 10, y + 20], 17).unwrap()
    }

    #[test]
    fn sorts_by_x() {
        let out = canonical_order(&[mb(0, 30, 0), mb(1, 0, 0)]).unwrap();
        assert_eq!(out.iter().map(|m| m.bbox[0]).collect::<Vec<_>>(), vec![0, 30]);
    }

    #[test]
    fn single_member_unchanged() {
        let m = vec![mb(4, 7, 7)];
        assert_eq!(canonical_order(&m).unwrap(), m);
    }

    #[test]
    fn tie_breaks_on_member_id() {
        let out = canonical_order(&[mb(5, 0, 0), mb(2, 0, 0)]).unwrap();
        assert_eq!(out.iter().map(|m| m.member_id).collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn empty_group_rejected() {
        assert!(matches!(canonical_order(&[]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn degenerate_bbox_rejected() {
        assert!(MemberBox::new(0, [5, 0, 5, 10], 3).is_err());
        assert!(MemberBox::new(0, [0, 9, 5, 3], 3).is_err());
    }

    #[test]
    fn sample_reorders_embedding_rows() {
        let s = GroupSample::new(
            1,
            0,
            vec![mb(0, 30, 0), mb(1, 0, 0)],
            array![[1.0, 1.0], [2.0, 2.0]],
        )
        .unwrap();
        assert_eq!(s.members()[0].member_id, 1);
        assert_eq!(s.embeddings(), &array![[2.0, 2.0], [1.0, 1.0]]);
    }

    #[test]
    fn sample_rejects_row_mismatch_and_nan() {
        assert!(GroupSample::new(0, 0, vec![mb(0, 0, 0)], Matrix::zeros((2, 3))).is_err());
        assert!(GroupSample::new(0, 0, vec![mb(0, 0, 0)], array![[f64::NAN]]).is_err());
    }

    #[test]
    fn oversized_group_rejected() {
        let members: Vec<_> = (0..7).map(|i| mb(i, 20 * i as i32, 0)).collect();
        let s = GroupSample::new(0, 0, members, Matrix::zeros((7, 2))).unwrap();
        assert!(matches!(
            s.check_size(6),
            Err(Error::GroupTooLarge { size: 7, max: 6 })
        ));
    }

    #[test]
    fn default_config_is_valid() {
        Config::default().validate().unwrap();
        let bad = Config {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Config::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_shapes_follow_config() {
        let cfg = Config {
            embed_dim: 4,
            out_dim: 3,
            layers: 2,
            num_classes: 5,
            ..Config::default()
        };
        let p = ModelParams::zeros(&cfg);
        p.check_shapes(&cfg).unwrap();
        assert_eq!(p.w_dim[1].dim(), (24, 4));
        assert_eq!(p.w_out.len(), 3);
        let other = Config { layers: 1, ..cfg };
        assert!(p.check_shapes(&other).is_err());
    }

    proptest! {
        #[test]
        fn canonical_order_is_a_sorted_permutation(
            raw in prop::collection::vec((0u32..20, 0i32..50, 0i32..50), 1..8)
        ) {
            let members: Vec<_> = raw.iter().map(|&(id, x, y)| mb(id, x, y)).collect();
            let out = canonical_order(&members).unwrap();
            let mut a = members.clone();
            let mut b = out.clone();
            a.sort_by_key(|m| (m.member_id, m.bbox));
            b.sort_by_key(|m| (m.member_id, m.bbox));
            prop_assert_eq!(a, b);
            let sorted = out.windows(2).all(|w| {
                (w[0].bbox[0], w[0].bbox[1], w[0].member_id)
                    <= (w[1].bbox[0], w[1].bbox[1], w[1].member_id)
            });
            prop_assert!(sorted);
            prop_assert_eq!(canonical_order(&out).unwrap(), out);
        }
    }
}
