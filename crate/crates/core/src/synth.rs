//! Seeded synthetic group re-identification data.
//!
//! Every member identity gets a unit-norm prototype; each view observes it
//! as `normalize(prototype + noise_scale * N(0, I))`. Within a group image
//! the members stand on a horizontal line in a per-view random order, and
//! each adjacent pair overlaps with probability `occlusion_rate`. In an
//! overlapping pair one member is planted in front; members behind someone
//! lose between 4 and 12 of their 17 keypoints, so the keypoint comparison
//! in [`crate::relations::occlusion_masks`] recovers the planted direction.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::{canonical_permutation, GroupSample, Matrix, MemberBox, DEFAULT_MAX_GROUP_SIZE};
use crate::error::{Error, Result};

pub const FULL_KEYPOINTS: u32 = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_group_ids: usize,
    /// Inclusive member-count range per group.
    pub members_range: (usize, usize),
    pub dim: usize,
    pub views: usize,
    pub noise_scale: f64,
    pub occlusion_rate: f64,
    pub seed: u64,
    pub max_group_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_group_ids: 50,
            members_range: (2, 6),
            dim: 32,
            views: 2,
            noise_scale: 0.1,
            occlusion_rate: 0.5,
            seed: 0,
            max_group_size: DEFAULT_MAX_GROUP_SIZE,
        }
    }
}

impl SynthSpec {
    /// The desk-scale retrieval benchmark: 50 group identities of 4 to 6
    /// members, two views, 32-dimensional embeddings.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            num_group_ids: 50,
            members_range: (4, 6),
            dim: 32,
            views: 2,
            noise_scale: 0.11,
            occlusion_rate: 0.5,
            seed,
            max_group_size: DEFAULT_MAX_GROUP_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthSpec(m));
        let (lo, hi) = self.members_range;
        if lo == 0 || lo > hi || hi > self.max_group_size {
            return bad(format!(
                "members_range ({lo}, {hi}) must lie within [1, {}]",
                self.max_group_size
            ));
        }
        if self.views < 2 {
            return bad(format!("need at least 2 views, got {}", self.views));
        }
        if self.num_group_ids == 0 || self.dim == 0 {
            return bad("num_group_ids and dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale {} must be finite and >= 0", self.noise_scale));
        }
        Ok(())
    }
}

/// Generated samples plus the planted occlusion matrix of each (canonical
/// member order, `[i][j] = 1` when `i` is in front of `j`).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<GroupSample>,
    pub planted_occlusion: Vec<Matrix>,
}

impl SynthDataset {
    pub fn num_member_ids(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| s.members().iter().map(|m| m.member_id as usize + 1))
            .max()
            .unwrap_or(0)
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Depth {
    Free,
    Front,
    Back,
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<GroupSample>> {
    Ok(generate_with_truth(spec)?.samples)
}

pub fn generate_with_truth(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.members_range;

    let mut next_member = 0u32;
    let rosters: Vec<Vec<u32>> = (0..spec.num_group_ids)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            let ids = (next_member..next_member + n as u32).collect();
            next_member += n as u32;
            ids
        })
        .collect();
    let prototypes: Vec<Array1<f64>> = (0..next_member)
        .map(|_| unit(gaussian(spec.dim, &mut rng)))
        .collect();

    let mut samples = Vec::with_capacity(spec.num_group_ids * spec.views);
    let mut planted_occlusion = Vec::with_capacity(samples.capacity());
    for view in 0..spec.views {
        for (gid, roster) in rosters.iter().enumerate() {
            let (sample, planted) = group_image(gid as u32, view as u32, roster, &prototypes, spec, &mut rng)?;
            samples.push(sample);
            planted_occlusion.push(planted);
        }
    }
    Ok(SynthDataset {
        samples,
        planted_occlusion,
    })
}

fn group_image(
    group_id: u32,
    view_id: u32,
    roster: &[u32],
    prototypes: &[Array1<f64>],
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(GroupSample, Matrix)> {
    let n = roster.len();
    let mut order = roster.to_vec();
    order.shuffle(rng);

    // Layout along a line; only neighbours can overlap.
    let mut depth = vec![Depth::Free; n];
    let mut planted = Matrix::zeros((n, n));
    let mut boxes = Vec::with_capacity(n);
    let mut x = rng.random_range(0..20);
    for i in 0..n {
        let width = rng.random_range(36..=44);
        let top = rng.random_range(0..=20);
        let height = rng.random_range(100..=120);
        boxes.push([x, top, x + width, top + height]);
        if i + 1 < n {
            if rng.random_bool(spec.occlusion_rate) {
                x = x + width - rng.random_range(5..=15);
                let front = match (depth[i], depth[i + 1]) {
                    (Depth::Back, _) => i + 1,
                    (Depth::Front, _) => i,
                    _ => {
                        if rng.random_bool(0.5) {
                            i
                        } else {
                            i + 1
                        }
                    }
                };
                let back = if front == i { i + 1 } else { i };
                depth[front] = Depth::Front;
                depth[back] = Depth::Back;
                planted[[front, back]] = 1.0;
            } else {
                x = x + width + rng.random_range(5..=30);
            }
        }
    }

    let mut members = Vec::with_capacity(n);
    let mut embeddings = Matrix::zeros((n, spec.dim));
    for (i, &member_id) in order.iter().enumerate() {
        let keypoints = match depth[i] {
            Depth::Back => FULL_KEYPOINTS - rng.random_range(4..=12),
            _ => FULL_KEYPOINTS,
        };
        members.push(MemberBox::new(member_id, boxes[i], keypoints)?);
        let noisy = &prototypes[member_id as usize] + &(gaussian(spec.dim, rng) * spec.noise_scale);
        embeddings.row_mut(i).assign(&unit(noisy));
    }

    let perm = canonical_permutation(&members)?;
    let planted = Matrix::from_shape_fn((n, n), |(i, j)| planted[[perm[i], perm[j]]]);
    let sample = GroupSample::new(group_id, view_id, members, embeddings)?;
    Ok((sample, planted))
}
