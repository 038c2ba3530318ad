//! Multi-scale group matching: node-level assignment, cluster-level
//! assignment and group-centroid distance, fused into one score.

mod km;
mod spectral;

pub use km::{km_assign, Assignment};
pub use spectral::{kmeans, normalized_laplacian, spectral_subgraphs, SpectralClusters};

use ndarray::Axis;

use crate::domain::{ClusterMode, Config, GroupSample, MatchScore, Matrix, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mgnn::{self, PreparedGroup};
use crate::relations::{self, euclidean_matrix, norm_rows};

/// `ReLU(-norm_rows(dist(fq, fg)))`.
pub fn node_similarity(fq: &Matrix, fg: &Matrix, floor: f64) -> Result<Matrix> {
    let dist = euclidean_matrix(fq.view(), fg.view())?;
    Ok(norm_rows(dist.view(), floor).mapv(|z| (-z).max(0.0)))
}

/// Number of local clusters for a pair of groups, clamped to `[2, min(N,M) - 1]`.
/// Only meaningful when `min(N, M) > 2`.
pub fn cluster_count(mode: ClusterMode, n: usize, m: usize) -> usize {
    let raw = match mode {
        ClusterMode::Fixed(t) => t,
        ClusterMode::Ratio => ((n + m) as f64 / 4.0).round() as usize,
    };
    let hi = n.min(m).saturating_sub(1).max(2);
    raw.clamp(2, hi)
}

/// Mean output feature of every cluster present in `labels`.
fn cluster_feature_centroids(features: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..k)
        .filter_map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            (!members.is_empty()).then(|| {
                features
                    .select(Axis(0), &members)
                    .mean_axis(Axis(0))
                    .expect("non-empty")
                    .to_vec()
            })
        })
        .collect();
    let width = features.ncols();
    Matrix::from_shape_vec((rows.len(), width), rows.concat()).expect("consistent widths")
}

/// Local-scale score. Returns `(0, true)` when `min(N, M) <= 2`.
pub fn local_similarity(
    aq0: &Matrix,
    ag0: &Matrix,
    fq: &Matrix,
    fg: &Matrix,
    config: &Config,
    seed: u64,
) -> Result<(f64, bool)> {
    let (n, m) = (fq.nrows(), fg.nrows());
    if n.min(m) <= 2 {
        return Ok((0.0, true));
    }
    let t = cluster_count(config.clusters, n, m);
    let cq = spectral_subgraphs(aq0, t, seed, config.zero_eig_tol)?;
    let cg = spectral_subgraphs(ag0, t, seed, config.zero_eig_tol)?;
    let centroids_q = cluster_feature_centroids(fq, &cq.labels, t);
    let centroids_g = cluster_feature_centroids(fg, &cg.labels, t);
    let sim = node_similarity(&centroids_q, &centroids_g, config.sigma_floor)?;
    Ok((km_assign(&sim)?.score, false))
}

/// Distance between the mean output features of two groups.
pub fn centroid_distance(fq: &Matrix, fg: &Matrix) -> f64 {
    let a = fq.mean_axis(Axis(0)).expect("non-empty group");
    let b = fg.mean_axis(Axis(0)).expect("non-empty group");
    (&a - &b).mapv(|v| v * v).sum().sqrt()
}

/// Converts one query's centroid distances (one per gallery candidate) into
/// similarities: z-score across candidates, negate, ReLU.
pub fn global_similarities(distances: &[f64], floor: f64) -> Vec<f64> {
    let row = Matrix::from_shape_vec((1, distances.len()), distances.to_vec())
        .expect("1 x n from n values");
    norm_rows(row.view(), floor)
        .row(0)
        .iter()
        .map(|z| (-z).max(0.0))
        .collect()
}

/// Global-scale score of `fg` against `fq`, standardized over the query's
/// full list of gallery centroid distances (which must include this pair).
pub fn global_similarity(fq: &Matrix, fg: &Matrix, gallery_distances: &[f64], floor: f64) -> f64 {
    let raw = centroid_distance(fq, fg);
    if gallery_distances.len() < 2 {
        return 0.0;
    }
    let (mean, std) = relations::mean_std(gallery_distances.iter().copied());
    if std < floor {
        return 0.0;
    }
    (-(raw - mean) / std).max(0.0)
}

/// Weighted fusion. When the local scale is skipped, the remaining weights
/// are rescaled so that the total weight is unchanged.
pub fn fuse(p_nod: f64, p_sub: f64, p_glo: f64, skipped: bool, alpha: f64, beta: f64, gamma: f64) -> f64 {
    if !skipped {
        return alpha * p_nod + beta * p_sub + gamma * p_glo;
    }
    let kept = alpha + gamma;
    if kept <= 0.0 {
        return 0.0;
    }
    (alpha * p_nod + gamma * p_glo) / kept * (alpha + beta + gamma)
}

/// Output features and global affinity of one group under a trained model.
#[derive(Debug, Clone)]
pub struct EncodedGroup {
    pub group_id: u32,
    pub view_id: u32,
    pub features: Matrix,
    pub a0: Matrix,
}

pub fn encode(sample: &GroupSample, params: &ModelParams, config: &Config) -> Result<EncodedGroup> {
    let prepared = PreparedGroup::new(sample, config)?;
    let out = mgnn::run_group(&prepared, params, config, None)?;
    Ok(EncodedGroup {
        group_id: sample.group_id,
        view_id: sample.view_id,
        features: out.trace.output,
        a0: out.graphs.affinities.a0,
    })
}

pub fn encode_all(
    samples: &[GroupSample],
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<Vec<EncodedGroup>> {
    exec.map(samples, |s| encode(s, params, config))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedMatch {
    pub gallery_index: usize,
    pub score: MatchScore,
}

/// Scores one encoded query against every encoded gallery group and sorts
/// by fused score (descending, ties by gallery index).
pub fn rank_gallery(
    query: &EncodedGroup,
    gallery: &[EncodedGroup],
    config: &Config,
    exec: Execution,
) -> Result<Vec<RankedMatch>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let floor = config.sigma_floor;
    let distances: Vec<f64> = gallery
        .iter()
        .map(|g| centroid_distance(&query.features, &g.features))
        .collect();
    let p_glo = global_similarities(&distances, floor);
    let mut ranked: Vec<RankedMatch> = exec
        .map_range(gallery.len(), |j| {
            let g = &gallery[j];
            let nod = node_similarity(&query.features, &g.features, floor)?;
            let p_nod = km_assign(&nod)?.score;
            let (p_sub, sub_skipped) =
                local_similarity(&query.a0, &g.a0, &query.features, &g.features, config, config.seed)?;
            let p = fuse(
                p_nod,
                p_sub,
                p_glo[j],
                sub_skipped,
                config.alpha,
                config.beta,
                config.gamma,
            );
            Ok(RankedMatch {
                gallery_index: j,
                score: MatchScore {
                    p_nod,
                    p_sub,
                    p_glo: p_glo[j],
                    p,
                    sub_skipped,
                },
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.score
            .p
            .total_cmp(&a.score.p)
            .then(a.gallery_index.cmp(&b.gallery_index))
    });
    Ok(ranked)
}

/// Re-fuses precomputed component scores under different weights and
/// re-sorts. Used by the scale ablation.
pub fn refuse(ranked: &[RankedMatch], alpha: f64, beta: f64, gamma: f64) -> Vec<RankedMatch> {
    let mut out: Vec<RankedMatch> = ranked
        .iter()
        .map(|r| {
            let s = r.score;
            RankedMatch {
                gallery_index: r.gallery_index,
                score: MatchScore {
                    p: fuse(s.p_nod, s.p_sub, s.p_glo, s.sub_skipped, alpha, beta, gamma),
                    ..s
                },
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .p
            .total_cmp(&a.score.p)
            .then(a.gallery_index.cmp(&b.gallery_index))
    });
    out
}

/// Encodes and ranks a gallery for one query sample.
pub fn match_query(
    query: &GroupSample,
    gallery: &[GroupSample],
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<Vec<RankedMatch>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let q = encode(query, params, config)?;
    let g = encode_all(gallery, params, config, exec)?;
    rank_gallery(&q, &g, config, exec)
}

/// Ranks every query against a shared gallery. Queries run in parallel;
/// the per-query scoring runs sequentially inside each.
pub fn match_all(
    queries: &[GroupSample],
    gallery: &[GroupSample],
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<Vec<Vec<RankedMatch>>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let q = encode_all(queries, params, config, exec)?;
    let g = encode_all(gallery, params, config, exec)?;
    rank_encoded(&q, &g, config, exec)
}

pub fn rank_encoded(
    queries: &[EncodedGroup],
    gallery: &[EncodedGroup],
    config: &Config,
    exec: Execution,
) -> Result<Vec<Vec<RankedMatch>>> {
    exec.map(queries, |q| rank_gallery(q, gallery, config, Execution::Sequential))
        .into_iter()
        .collect()
}
