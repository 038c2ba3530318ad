//! Retrieval metrics and the ablation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::domain::{Config, GraphToggles, GroupSample, LossToggles, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matching::{self, RankedMatch};
use crate::trainer;

/// Ranks reported in metric tables.
pub const REPORTED_RANKS: [usize; 4] = [1, 5, 10, 20];

fn first_hit(ranking: &[u32], truth: &BTreeSet<u32>, query: usize) -> Result<usize> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth { query });
    }
    ranking
        .iter()
        .position(|id| truth.contains(id))
        .ok_or(Error::EmptyTruth { query })
}

/// Fraction of queries with a relevant entry in the top `k`, for each `k`.
pub fn cmc(rankings: &[Vec<u32>], truths: &[BTreeSet<u32>], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if rankings.len() != truths.len() {
        return Err(Error::Shape("one truth set per ranking required".into()));
    }
    let hits: Vec<usize> = rankings
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(q, (r, t))| first_hit(r, t, q))
        .collect::<Result<_>>()?;
    let n = hits.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, hits.iter().filter(|&&h| h < k).count() as f64 / n))
        .collect())
}

/// Non-interpolated average precision of one ranked list. Relevant ids that
/// never appear in the ranking contribute zero precision.
pub fn average_precision(ranking: &[u32], truth: &BTreeSet<u32>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if truth.contains(id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / truth.len() as f64
}

pub fn mean_ap(rankings: &[Vec<u32>], truths: &[BTreeSet<u32>]) -> Result<f64> {
    if rankings.len() != truths.len() {
        return Err(Error::Shape("one truth set per ranking required".into()));
    }
    for (q, (r, t)) in rankings.iter().zip(truths).enumerate() {
        first_hit(r, t, q)?;
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rankings
        .iter()
        .zip(truths)
        .map(|(r, t)| average_precision(r, t))
        .sum();
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

pub fn metrics(rankings: &[Vec<u32>], truths: &[BTreeSet<u32>]) -> Result<Metrics> {
    let c = cmc(rankings, truths, &REPORTED_RANKS)?;
    Ok(Metrics {
        rank1: c[0].1,
        rank5: c[1].1,
        rank10: c[2].1,
        rank20: c[3].1,
        map: mean_ap(rankings, truths)?,
    })
}

pub const METRICS_HEADER: &str = "config,rank1,rank5,rank10,rank20,map";

/// Metrics table as CSV, four decimals per value.
pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4}",
            m.rank1, m.rank5, m.rank10, m.rank20, m.map
        );
    }
    out
}

/// Query and gallery images of a cross-view retrieval split.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub queries: Vec<GroupSample>,
    pub gallery: Vec<GroupSample>,
}

impl RetrievalSplit {
    pub fn new(dataset: &[GroupSample], query_view: u32, gallery_view: u32) -> Result<Self> {
        if query_view == gallery_view {
            return Err(Error::InvalidConfig("query and gallery views must differ".into()));
        }
        let pick = |v| dataset.iter().filter(|s| s.view_id == v).cloned().collect::<Vec<_>>();
        let split = Self {
            queries: pick(query_view),
            gallery: pick(gallery_view),
        };
        if split.gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        Ok(split)
    }

    /// A gallery entry is relevant when it shares the query's group id.
    pub fn truths(&self) -> Vec<BTreeSet<u32>> {
        self.queries
            .iter()
            .map(|q| {
                self.gallery
                    .iter()
                    .filter(|g| g.group_id == q.group_id)
                    .map(|g| g.group_id)
                    .collect()
            })
            .collect()
    }

    pub fn ranked_ids(&self, ranked: &[Vec<RankedMatch>]) -> Vec<Vec<u32>> {
        ranked
            .iter()
            .map(|r| r.iter().map(|m| self.gallery[m.gallery_index].group_id).collect())
            .collect()
    }

    /// Drops queries whose group has no gallery image.
    pub fn with_answerable_queries(mut self) -> Self {
        let ids: BTreeSet<u32> = self.gallery.iter().map(|g| g.group_id).collect();
        self.queries.retain(|q| ids.contains(&q.group_id));
        self
    }
}

/// Trains on `dataset`, then ranks the split and scores it.
pub fn train_and_evaluate(
    dataset: &[GroupSample],
    split: &RetrievalSplit,
    config: &Config,
    exec: Execution,
) -> Result<(ModelParams, Metrics)> {
    let outcome = trainer::train(dataset, config, exec)?;
    let m = evaluate_params(split, &outcome.params, config, exec)?;
    Ok((outcome.params, m))
}

pub fn evaluate_params(
    split: &RetrievalSplit,
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<Metrics> {
    let ranked = matching::match_all(&split.queries, &split.gallery, params, config, exec)?;
    metrics(&split.ranked_ids(&ranked), &split.truths())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    Graphs,
    Losses,
    Scales,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphs" => Ok(Self::Graphs),
            "losses" => Ok(Self::Losses),
            "scales" => Ok(Self::Scales),
            other => Err(Error::InvalidConfig(format!("unknown ablation suite `{other}`"))),
        }
    }
}

fn graph_rows() -> Vec<(&'static str, GraphToggles)> {
    let g = |appearance, occlusion, foreground, implicit| GraphToggles {
        appearance,
        occlusion,
        foreground,
        implicit,
    };
    vec![
        ("none", g(false, false, false, false)),
        ("ap", g(true, false, false, false)),
        ("oc", g(false, true, false, false)),
        ("fo", g(false, false, true, false)),
        ("rs", g(false, false, false, true)),
        ("oc+fo", g(false, true, true, false)),
        ("ap+oc+fo", g(true, true, true, false)),
        ("all", GraphToggles::ALL),
    ]
}

fn loss_rows() -> Vec<(&'static str, LossToggles)> {
    let l = |id, triplet, reconstruction| LossToggles {
        id,
        triplet,
        reconstruction,
    };
    vec![
        ("no_id", l(false, true, true)),
        ("no_trip", l(true, false, true)),
        ("no_re", l(true, true, false)),
        ("all", l(true, true, true)),
    ]
}

/// `(name, nod, sub, glo)` rows of the matching-scale ablation.
pub fn scale_rows() -> Vec<(&'static str, bool, bool, bool)> {
    vec![
        ("glo", false, false, true),
        ("nod", true, false, false),
        ("nod+glo", true, false, true),
        ("nod+sub", true, true, false),
        ("all", true, true, true),
    ]
}

/// Runs one ablation suite. Graph and loss rows retrain from the seeded
/// initialization with the row's toggles; scale rows reuse `params` (or a
/// model trained with `config` when none is given) and only re-fuse scores.
pub fn ablate(
    dataset: &[GroupSample],
    split: &RetrievalSplit,
    config: &Config,
    suite: AblationSuite,
    params: Option<&ModelParams>,
    exec: Execution,
) -> Result<Vec<(String, Metrics)>> {
    match suite {
        AblationSuite::Graphs => graph_rows()
            .into_iter()
            .map(|(name, graphs)| {
                let cfg = Config {
                    graphs,
                    ..config.clone()
                };
                Ok((name.to_string(), train_and_evaluate(dataset, split, &cfg, exec)?.1))
            })
            .collect(),
        AblationSuite::Losses => loss_rows()
            .into_iter()
            .map(|(name, losses)| {
                let cfg = Config {
                    losses,
                    ..config.clone()
                };
                Ok((name.to_string(), train_and_evaluate(dataset, split, &cfg, exec)?.1))
            })
            .collect(),
        AblationSuite::Scales => {
            let trained;
            let params = match params {
                Some(p) => p,
                None => {
                    trained = trainer::train(dataset, config, exec)?.params;
                    &trained
                }
            };
            let ranked = matching::match_all(&split.queries, &split.gallery, params, config, exec)?;
            let truths = split.truths();
            scale_rows()
                .into_iter()
                .map(|(name, nod, sub, glo)| {
                    let w = |on: bool, v: f64| if on { v } else { 0.0 };
                    let (a, b, g) = (w(nod, config.alpha), w(sub, config.beta), w(glo, config.gamma));
                    if a + b + g <= 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "scale row `{name}` has zero total weight"
                        )));
                    }
                    let refused: Vec<Vec<RankedMatch>> =
                        ranked.iter().map(|r| matching::refuse(r, a, b, g)).collect();
                    Ok((name.to_string(), metrics(&split.ranked_ids(&refused), &truths)?))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn truth(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn cmc_examples() {
        let c = cmc(&[vec![7, 1, 2]], &[truth(&[7])], &[1]).unwrap();
        assert_eq!(c, vec![(1, 1.0)]);
        let c = cmc(&[vec![1, 7, 2]], &[truth(&[7])], &[1, 5]).unwrap();
        assert_eq!(c, vec![(1, 0.0), (5, 1.0)]);
        let c = cmc(
            &[vec![3, 1, 2], vec![1, 2, 4, 5]],
            &[truth(&[3]), truth(&[4])],
            &[1],
        )
        .unwrap();
        assert_eq!(c, vec![(1, 0.5)]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(mean_ap(&[vec![5, 1]], &[truth(&[5])]).unwrap(), 1.0);
        assert_eq!(mean_ap(&[vec![1, 5]], &[truth(&[5])]).unwrap(), 0.5);
        assert_abs_diff_eq!(
            average_precision(&[5, 1, 6, 2], &truth(&[5, 6])),
            (1.0 + 2.0 / 3.0) / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_truth_rejected() {
        assert!(matches!(
            cmc(&[vec![1]], &[truth(&[])], &[1]),
            Err(Error::EmptyTruth { query: 0 })
        ));
        assert!(mean_ap(&[vec![1]], &[truth(&[9])]).is_err());
    }

    #[test]
    fn csv_format() {
        let m = Metrics {
            rank1: 0.5,
            rank5: 0.75,
            rank10: 1.0,
            rank20: 1.0,
            map: 2.0 / 3.0,
        };
        assert_eq!(
            metrics_csv(&[("default".into(), m)]),
            "config,rank1,rank5,rank10,rank20,map\ndefault,0.5000,0.7500,1.0000,1.0000,0.6667\n"
        );
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("graphs".parse::<AblationSuite>().unwrap(), AblationSuite::Graphs);
        assert!("nope".parse::<AblationSuite>().is_err());
    }
}
