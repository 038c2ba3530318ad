//! Central finite-difference check of [`crate::mgnn::gradients`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Config, ModelParams};
use crate::error::Result;
use crate::exec::Execution;
use crate::mgnn::{self, PreparedGroup};
use crate::synth::{self, SynthSpec};
use crate::trainer::init_params;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose gradient is
/// essentially zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// A seeded random problem: a few small groups sharing member identities
/// across two views, with parameters perturbed away from initialization.
#[derive(Debug, Clone)]
pub struct Instance {
    pub config: Config,
    pub params: ModelParams,
    pub groups: Vec<PreparedGroup>,
}

pub fn random_instance(seed: u64, dim: usize, layers: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = synth::generate(&SynthSpec {
        num_group_ids: 2,
        members_range: (2, 6),
        dim,
        views: 2,
        noise_scale: 0.3,
        occlusion_rate: 0.5,
        seed,
        ..SynthSpec::default()
    })?;
    let num_classes = data
        .iter()
        .flat_map(|s| s.member_labels())
        .max()
        .map_or(1, |m| m + 1);
    let config = Config {
        embed_dim: dim,
        out_dim: rng.random_range(2..=dim.max(2)),
        layers,
        num_classes,
        ..Config::default()
    };
    let mut params = init_params(&config, seed)?;
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    let groups = data
        .iter()
        .map(|s| PreparedGroup::new(s, &config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        config,
        params,
        groups,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic and central-difference gradients for every entry of
/// every tensor. Kernel bandwidths are held at their unperturbed values.
pub fn check_gradients(instance: &Instance, step: f64, exec: Execution) -> Result<Vec<TensorReport>> {
    let groups: Vec<&PreparedGroup> = instance.groups.iter().collect();
    let config = &instance.config;
    let analytic = mgnn::gradients(&groups, &instance.params, config, Execution::Sequential)?;
    let sigmas = analytic.sigmas.as_slice();
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(mgnn::batch_loss(&groups, p, config, Some(sigmas), Execution::Sequential)?.total)
    };

    let grad_tensors = analytic.grads.tensors();
    let mut reports = Vec::with_capacity(grad_tensors.len());
    for (t_idx, (name, grad)) in grad_tensors.iter().enumerate() {
        let flat: Vec<f64> = grad.iter().copied().collect();
        let errors = exec.map_range(flat.len(), |e| -> Result<(f64, f64)> {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = instance.params.clone();
                let (_, mut t) = p.tensors_mut().swap_remove(t_idx);
                let v = t.iter_mut().nth(e).expect("entry in range");
                *v += delta;
                loss_at(&p)
            };
            let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
            Ok(((flat[e] - numeric).abs(), relative_error(flat[e], numeric)))
        });
        let mut report = TensorReport {
            name: name.clone(),
            entries: flat.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for r in errors {
            let (abs, rel) = r?;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn worst(reports: &[TensorReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_small_values() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn small_instance_passes() {
        let inst = random_instance(1, 4, 1).unwrap();
        let reports = check_gradients(&inst, DEFAULT_STEP, Execution::Sequential).unwrap();
        assert_eq!(reports.len(), inst.params.tensors().len());
        assert!(worst(&reports) < DEFAULT_TOLERANCE, "{reports:#?}");
    }
}
