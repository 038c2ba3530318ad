//! Plain SGD over shuffled group batches.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Config, GroupSample, Matrix, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mgnn::{self, LossBreakdown, PreparedGroup};

/// Identity plus uniform noise in `[-noise, noise]`.
fn identity_plus_noise(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::eye(n);
    if noise > 0.0 {
        m.mapv_inplace(|v| v + rng.random_range(-noise..=noise));
    }
    m
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Seeded parameter initialization. Relation and kernel matrices start near
/// identity; projections use Glorot-uniform bounds; the bias starts at zero.
pub fn init_params(config: &Config, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let n = config.max_group_size;
    let noise = config.init_noise;
    let w0 = identity_plus_noise(d, noise, &mut rng);
    let w_ap = identity_plus_noise(n, noise, &mut rng);
    let w_oc = identity_plus_noise(n, noise, &mut rng);
    let w_fo = identity_plus_noise(n, noise, &mut rng);
    let w_rs = identity_plus_noise(n, noise, &mut rng);
    let w_re = identity_plus_noise(n, noise, &mut rng);
    let w_dim = (0..config.layers).map(|_| xavier(6 * d, d, &mut rng)).collect();
    let w_out = (0..=config.layers)
        .map(|_| xavier(d, config.out_dim, &mut rng))
        .collect();
    let classifier = xavier(config.out_dim, config.num_classes, &mut rng);
    Ok(ModelParams {
        w0,
        w_ap,
        w_oc,
        w_fo,
        w_rs,
        w_re,
        w_dim,
        w_out,
        classifier,
        classifier_bias: Array1::zeros(config.num_classes),
    })
}

/// Seeded epoch-by-epoch shuffling of group indices into batches.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub fn new(num_groups: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..num_groups).collect(),
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Reshuffles and returns the next epoch's batches.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Batches for a single epoch with a fresh schedule.
pub fn make_batches(num_groups: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    BatchSchedule::new(num_groups, batch_size, seed).next_epoch()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub id: f64,
    pub triplet: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub fn prepare_dataset(dataset: &[GroupSample], config: &Config) -> Result<Vec<PreparedGroup>> {
    let groups: Vec<PreparedGroup> = dataset
        .iter()
        .map(|s| PreparedGroup::new(s, config))
        .collect::<Result<_>>()?;
    for g in &groups {
        if let Some(&label) = g.labels.iter().find(|&&l| l >= config.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: config.num_classes,
            });
        }
    }
    Ok(groups)
}

/// Mean loss over the dataset in fixed, unshuffled batches.
pub fn evaluate_loss(
    groups: &[PreparedGroup],
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<LossBreakdown> {
    let refs: Vec<&PreparedGroup> = groups.iter().collect();
    let mut acc = LossBreakdown {
        id: 0.0,
        triplet: 0.0,
        reconstruction: 0.0,
        total: 0.0,
        triplet_anchors: 0,
    };
    let chunks: Vec<_> = refs.chunks(config.batch_size.max(1)).collect();
    for chunk in &chunks {
        let l = mgnn::batch_loss(chunk, params, config, None, exec)?;
        acc.id += l.id;
        acc.triplet += l.triplet;
        acc.reconstruction += l.reconstruction;
        acc.total += l.total;
        acc.triplet_anchors += l.triplet_anchors;
    }
    let k = chunks.len().max(1) as f64;
    acc.id /= k;
    acc.triplet /= k;
    acc.reconstruction /= k;
    acc.total /= k;
    Ok(acc)
}

/// Trains from the seeded initialization. `on_epoch` sees the parameters
/// after every epoch (checkpointing, progress output).
pub fn train_with<F>(
    dataset: &[GroupSample],
    config: &Config,
    exec: Execution,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &ModelParams) -> Result<()>,
{
    config.validate()?;
    let params = init_params(config, config.seed)?;
    train_from(params, dataset, config, exec, &mut on_epoch)
}

pub fn train(dataset: &[GroupSample], config: &Config, exec: Execution) -> Result<TrainOutcome> {
    train_with(dataset, config, exec, |_, _| Ok(()))
}

/// Continues training from `params`.
pub fn train_from<F>(
    mut params: ModelParams,
    dataset: &[GroupSample],
    config: &Config,
    exec: Execution,
    on_epoch: &mut F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &ModelParams) -> Result<()>,
{
    params.check_shapes(config)?;
    let groups = prepare_dataset(dataset, config)?;
    if groups.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidConfig("cannot train on an empty dataset".into()));
    }
    let mut schedule = BatchSchedule::new(groups.len(), config.batch_size, config.seed);
    let mut velocity = (config.momentum > 0.0).then(|| params.zeros_like());
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = schedule.next_epoch();
        let mut sums = [0.0; 4];
        for (b, batch) in batches.iter().enumerate() {
            let refs: Vec<&PreparedGroup> = batch.iter().map(|&i| &groups[i]).collect();
            let g = mgnn::gradients(&refs, &params, config, exec)?;
            let l = g.losses;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sums[0] += l.id;
            sums[1] += l.triplet;
            sums[2] += l.reconstruction;
            sums[3] += l.total;
            match velocity.as_mut() {
                Some(v) => {
                    for ((_, mut vt), (_, gt)) in v.tensors_mut().into_iter().zip(g.grads.tensors()) {
                        vt.zip_mut_with(&gt, |vv, &gg| *vv = config.momentum * *vv + gg);
                    }
                    params.add_scaled(v, -config.lr);
                }
                None => params.add_scaled(&g.grads, -config.lr),
            }
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
        }
        let k = batches.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            id: sums[0] / k,
            triplet: sums[1] / k,
            reconstruction: sums[2] / k,
            total: sums[3] / k,
        };
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> Config {
        Config {
            embed_dim: 4,
            out_dim: 5,
            num_classes: 7,
            ..Config::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
    }

    #[test]
    fn zero_noise_gives_identity_kernel() {
        let cfg = Config {
            init_noise: 0.0,
            ..small_config()
        };
        let p = init_params(&cfg, 1).unwrap();
        assert_eq!(p.w0, Matrix::eye(4));
        assert_eq!(p.w_rs, Matrix::eye(6));
    }

    #[test]
    fn init_shapes_match_config() {
        let cfg = small_config();
        let p = init_params(&cfg, 0).unwrap();
        p.check_shapes(&cfg).unwrap();
        let bound = (6.0f64 / (24 + 4) as f64).sqrt();
        assert!(p.w_dim[0].iter().all(|v| v.abs() <= bound));
        assert!(p.w0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_counts() {
        assert_eq!(make_batches(32, 16, 0).len(), 2);
        let b = make_batches(17, 16, 0);
        let mut sizes: Vec<_> = b.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 16]);
    }

    #[test]
    fn batches_are_seeded() {
        let mut a = BatchSchedule::new(40, 16, 9);
        let mut b = BatchSchedule::new(40, 16, 9);
        for _ in 0..3 {
            assert_eq!(a.next_epoch(), b.next_epoch());
        }
        let mut all: Vec<usize> = make_batches(40, 16, 9).concat();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }
}
