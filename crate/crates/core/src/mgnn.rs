//! Multi-graph convolution, the classifier head, the training losses and
//! their exact gradients.
//!
//! The forward pass for one group with features `F0` is
//!
//! ```text
//! F^s   = [F0 | A0 F^{s-1} | Aap F^{s-1} | Aoc F^{s-1} | Afo F^{s-1} | Ars F^{s-1}] W_dim[s]
//! F_out = sum_{s=0..S} F^s W_out[s]
//! logits = F_out W_cls + b
//! ```
//!
//! A batch loss pools every member of every group in the batch: identity
//! cross-entropy and hard triplet loss are averaged over nodes and anchors,
//! and the reconstruction loss is averaged over groups. The kernel bandwidth
//! of the global affinity is a per-group constant for differentiation.

use ndarray::{s, Axis};

use crate::domain::{AffinitySet, Config, GroupSample, Matrix, ModelParams, RelationMasks};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graphs::{self, GraphState};
use crate::relations;

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `F^0 ..= F^S`, each `N x d`.
    pub layers: Vec<Matrix>,
    /// Concatenated convolution inputs for layers `1..=S`, each `N x 6d`.
    pub(crate) inputs: Vec<Matrix>,
    pub output: Matrix,
    pub logits: Matrix,
}

pub fn forward(f0: &Matrix, affinities: &AffinitySet, params: &ModelParams) -> Result<ForwardTrace> {
    let (n, d) = f0.dim();
    if params.w_out.len() != params.w_dim.len() + 1 {
        return Err(Error::Shape(format!(
            "{} output projections for {} layers",
            params.w_out.len(),
            params.w_dim.len()
        )));
    }
    for a in affinities.propagators() {
        if a.dim() != (n, n) {
            return Err(Error::Shape(format!("affinity {:?} for {n} nodes", a.dim())));
        }
    }
    let mut layers = vec![f0.clone()];
    let mut inputs = Vec::with_capacity(params.w_dim.len());
    for w_dim in &params.w_dim {
        if w_dim.dim() != (6 * d, d) {
            return Err(Error::Shape(format!("w_dim {:?}, expected {:?}", w_dim.dim(), (6 * d, d))));
        }
        let prev = layers.last().expect("layer 0 present");
        let mut x = Matrix::zeros((n, 6 * d));
        x.slice_mut(s![.., 0..d]).assign(f0);
        for (k, a) in affinities.propagators().iter().enumerate() {
            x.slice_mut(s![.., (k + 1) * d..(k + 2) * d]).assign(&a.dot(prev));
        }
        layers.push(x.dot(w_dim));
        inputs.push(x);
    }
    let out_dim = params.w_out[0].ncols();
    let mut output = Matrix::zeros((n, out_dim));
    for (h, w) in layers.iter().zip(&params.w_out) {
        if w.nrows() != d {
            return Err(Error::Shape(format!("w_out {:?} for width {d}", w.dim())));
        }
        output += &h.dot(w);
    }
    if params.classifier.nrows() != out_dim {
        return Err(Error::Shape("classifier rows vs output width".into()));
    }
    let logits = output.dot(&params.classifier) + &params.classifier_bias;
    Ok(ForwardTrace {
        layers,
        inputs,
        output,
        logits,
    })
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, label: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood of the true labels.
pub fn id_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    check_labels(labels, logits.ncols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| -log_softmax_at(row, l))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Hardest positive and negative for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HardTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// First-index-wins hardest mining over the batch.
pub(crate) fn mine_hard_triplets(features: &Matrix, labels: &[usize]) -> Vec<HardTriplet> {
    let dist = relations::euclidean_matrix(features.view(), features.view())
        .expect("same matrix on both sides");
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in (0..b).filter(|&j| j != a) {
            let dj = dist[[a, j]];
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, d)| dj > d) {
                    pos = Some((j, dj));
                }
            } else if neg.is_none_or(|(_, d)| dj < d) {
                neg = Some((j, dj));
            }
        }
        if let (Some((positive, d_pos)), Some((negative, d_neg))) = (pos, neg) {
            out.push(HardTriplet {
                anchor: a,
                positive,
                negative,
                d_pos,
                d_neg,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub valid_anchors: usize,
    /// Set when no anchor had both a positive and a negative.
    pub no_valid_anchors: bool,
}

/// Batch-hard triplet loss, averaged over anchors that have at least one
/// positive and one negative.
pub fn triplet_loss(features: &Matrix, labels: &[usize], margin: f64) -> Result<TripletLoss> {
    if labels.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let triplets = mine_hard_triplets(features, labels);
    if triplets.is_empty() {
        return Ok(TripletLoss {
            loss: 0.0,
            valid_anchors: 0,
            no_valid_anchors: true,
        });
    }
    let sum: f64 = triplets
        .iter()
        .map(|t| (margin + t.d_pos - t.d_neg).max(0.0))
        .sum();
    Ok(TripletLoss {
        loss: sum / triplets.len() as f64,
        valid_anchors: triplets.len(),
        no_valid_anchors: false,
    })
}

pub fn total_loss(id: f64, trip: f64, re: f64, delta: f64) -> f64 {
    id + trip + delta * re
}

/// A group with its data-only preprocessing (relation masks, labels) done.
#[derive(Debug, Clone)]
pub struct PreparedGroup {
    pub f0: Matrix,
    pub masks: RelationMasks,
    pub labels: Vec<usize>,
}

impl PreparedGroup {
    pub fn new(sample: &GroupSample, config: &Config) -> Result<Self> {
        sample.check_size(config.max_group_size)?;
        if sample.dim() != config.embed_dim {
            return Err(Error::Shape(format!(
                "group {}: embedding width {} but model expects {}",
                sample.group_id,
                sample.dim(),
                config.embed_dim
            )));
        }
        Ok(Self {
            f0: sample.embeddings().clone(),
            masks: relations::relation_masks(sample, config.tau, config.sigma_floor)?,
            labels: sample.member_labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph state plus forward trace for one group.
#[derive(Debug, Clone)]
pub struct GroupOutput {
    pub graphs: GraphState,
    pub trace: ForwardTrace,
    pub reconstruction: f64,
}

/// Runs graph construction and the forward pass for one group.
pub fn run_group(
    group: &PreparedGroup,
    params: &ModelParams,
    config: &Config,
    sigma: Option<f64>,
) -> Result<GroupOutput> {
    let graphs = graphs::build_graphs(group.f0.view(), &group.masks, params, config, sigma)?;
    let trace = forward(&group.f0, &graphs.affinities, params)?;
    let a = &graphs.affinities;
    let reconstruction =
        graphs::reconstruction_loss(&a.a0, &a.a_ap, &a.a_oc, &a.a_fo, &a.a_rs, &params.w_re)?;
    Ok(GroupOutput {
        graphs,
        trace,
        reconstruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub reconstruction: f64,
    /// Weighted total after loss toggles and `delta`.
    pub total: f64,
    pub triplet_anchors: usize,
}

struct LossWeights {
    id: f64,
    triplet: f64,
    reconstruction: f64,
}

impl LossWeights {
    fn new(config: &Config) -> Self {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        Self {
            id: on(config.losses.id),
            triplet: on(config.losses.triplet),
            reconstruction: on(config.losses.reconstruction) * config.delta,
        }
    }
}

struct BatchForward {
    outputs: Vec<GroupOutput>,
    pooled: Matrix,
    labels: Vec<usize>,
    offsets: Vec<usize>,
    losses: LossBreakdown,
}

fn batch_forward(
    groups: &[&PreparedGroup],
    params: &ModelParams,
    config: &Config,
    sigmas: Option<&[f64]>,
    exec: Execution,
) -> Result<BatchForward> {
    if groups.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(s) = sigmas {
        if s.len() != groups.len() {
            return Err(Error::Shape("one sigma per group required".into()));
        }
    }
    let outputs: Vec<GroupOutput> = exec
        .map_range(groups.len(), |i| {
            run_group(groups[i], params, config, sigmas.map(|s| s[i]))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let total_nodes: usize = groups.iter().map(|g| g.len()).sum();
    let out_dim = params.classifier.nrows();
    let mut pooled = Matrix::zeros((total_nodes, out_dim));
    let mut logits = Matrix::zeros((total_nodes, params.classifier.ncols()));
    let mut labels = Vec::with_capacity(total_nodes);
    let mut offsets = Vec::with_capacity(groups.len());
    let mut row = 0;
    for (g, o) in groups.iter().zip(&outputs) {
        offsets.push(row);
        let n = g.len();
        pooled.slice_mut(s![row..row + n, ..]).assign(&o.trace.output);
        logits.slice_mut(s![row..row + n, ..]).assign(&o.trace.logits);
        labels.extend_from_slice(&g.labels);
        row += n;
    }
    let id = id_loss(&logits, &labels)?;
    let trip = triplet_loss(&pooled, &labels, config.margin)?;
    let re = outputs.iter().map(|o| o.reconstruction).sum::<f64>() / outputs.len() as f64;
    let w = LossWeights::new(config);
    let losses = LossBreakdown {
        id,
        triplet: trip.loss,
        reconstruction: re,
        total: w.id * id + w.triplet * trip.loss + w.reconstruction * re,
        triplet_anchors: trip.valid_anchors,
    };
    Ok(BatchForward {
        outputs,
        pooled,
        labels,
        offsets,
        losses,
    })
}

/// Batch loss. `sigmas` pins each group's kernel bandwidth; `None` computes
/// it from the current parameters.
pub fn batch_loss(
    groups: &[&PreparedGroup],
    params: &ModelParams,
    config: &Config,
    sigmas: Option<&[f64]>,
    exec: Execution,
) -> Result<LossBreakdown> {
    Ok(batch_forward(groups, params, config, sigmas, exec)?.losses)
}

/// Result of a gradient evaluation.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub losses: LossBreakdown,
    pub grads: ModelParams,
    /// Kernel bandwidths used per group (held constant when differentiating).
    pub sigmas: Vec<f64>,
}

/// Exact gradients of the weighted total loss with respect to every parameter.
pub fn gradients(
    groups: &[&PreparedGroup],
    params: &ModelParams,
    config: &Config,
    exec: Execution,
) -> Result<BatchGradients> {
    let fwd = batch_forward(groups, params, config, None, exec)?;
    let w = LossWeights::new(config);
    let total_nodes = fwd.labels.len() as f64;

    // Triplet gradient on the pooled features.
    let mut d_pooled = Matrix::zeros(fwd.pooled.raw_dim());
    if w.triplet != 0.0 {
        let triplets = mine_hard_triplets(&fwd.pooled, &fwd.labels);
        let coef = w.triplet / triplets.len().max(1) as f64;
        for t in triplets {
            if config.margin + t.d_pos - t.d_neg <= 0.0 {
                continue;
            }
            let fa = fwd.pooled.row(t.anchor).to_owned();
            if t.d_pos > 0.0 {
                let u = (&fa - &fwd.pooled.row(t.positive)) * (coef / t.d_pos);
                d_pooled.row_mut(t.anchor).scaled_add(1.0, &u);
                d_pooled.row_mut(t.positive).scaled_add(-1.0, &u);
            }
            if t.d_neg > 0.0 {
                let u = (&fa - &fwd.pooled.row(t.negative)) * (coef / t.d_neg);
                d_pooled.row_mut(t.anchor).scaled_add(-1.0, &u);
                d_pooled.row_mut(t.negative).scaled_add(1.0, &u);
            }
        }
    }

    let id_coef = w.id / total_nodes;
    let re_coef = w.reconstruction / groups.len() as f64;
    let per_group: Vec<ModelParams> = exec
        .map_range(groups.len(), |i| {
            let n = groups[i].len();
            let off = fwd.offsets[i];
            let d_out = d_pooled.slice(s![off..off + n, ..]).to_owned();
            backward_group(
                groups[i],
                &fwd.outputs[i],
                d_out,
                params,
                config,
                id_coef,
                re_coef,
            )
        });
    let mut grads = params.zeros_like();
    for g in &per_group {
        grads.add_scaled(g, 1.0);
    }
    for (name, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(BatchGradients {
        losses: fwd.losses,
        grads,
        sigmas: fwd.outputs.iter().map(|o| o.graphs.global.sigma).collect(),
    })
}

fn backward_group(
    group: &PreparedGroup,
    out: &GroupOutput,
    mut d_out: Matrix,
    params: &ModelParams,
    config: &Config,
    id_coef: f64,
    re_coef: f64,
) -> ModelParams {
    let mut grads = params.zeros_like();
    let n = group.len();
    let d = group.f0.ncols();
    let floor = config.sigma_floor;
    let trace = &out.trace;

    // Classifier head.
    if id_coef != 0.0 {
        let mut d_logits = softmax_rows(&trace.logits);
        for (i, &l) in group.labels.iter().enumerate() {
            d_logits[[i, l]] -= 1.0;
        }
        d_logits *= id_coef;
        grads.classifier += &trace.output.t().dot(&d_logits);
        grads.classifier_bias += &d_logits.sum_axis(Axis(0));
        d_out += &d_logits.dot(&params.classifier.t());
    }

    // Output projections and convolution layers.
    let mut d_layers: Vec<Matrix> = Vec::with_capacity(trace.layers.len());
    for (s, h) in trace.layers.iter().enumerate() {
        grads.w_out[s] += &h.t().dot(&d_out);
        d_layers.push(d_out.dot(&params.w_out[s].t()));
    }
    let aff = &out.graphs.affinities;
    let props = aff.propagators();
    let mut d_props: [Matrix; 5] = std::array::from_fn(|_| Matrix::zeros((n, n)));
    for s in (1..trace.layers.len()).rev() {
        let x = &trace.inputs[s - 1];
        let d_h = std::mem::replace(&mut d_layers[s], Matrix::zeros((0, 0)));
        grads.w_dim[s - 1] += &x.t().dot(&d_h);
        let d_x = d_h.dot(&params.w_dim[s - 1].t());
        let prev = &trace.layers[s - 1];
        for k in 0..5 {
            let g = d_x.slice(s![.., (k + 1) * d..(k + 2) * d]);
            d_props[k] += &g.dot(&prev.t());
            d_layers[s - 1] += &props[k].t().dot(&g);
        }
    }

    // Reconstruction loss.
    if re_coef != 0.0 && out.reconstruction > 0.0 {
        let w_re = params.w_re.slice(s![..n, ..n]);
        let sum = &aff.a_ap + &aff.a_oc + &aff.a_fo + &aff.a_rs;
        let residual = &aff.a0 - &sum.dot(&w_re);
        let u = residual * (re_coef / out.reconstruction);
        d_props[0] += &u;
        // d(rebuilt) = -u
        let mut gw = grads.w_re.slice_mut(s![..n, ..n]);
        gw -= &sum.t().dot(&u);
        let d_sum = u.dot(&w_re.t());
        for dp in d_props.iter_mut().skip(1) {
            *dp -= &d_sum;
        }
    }

    // Relation affinities back to the shared kernel.
    let global = &out.graphs.global;
    let a_tilde = &global.a_tilde0;
    let mut d_a_tilde = Matrix::zeros((n, n));
    let relation_enabled = [true, true, true, config.graphs.implicit];
    for r in 0..4 {
        if !relation_enabled[r] {
            continue;
        }
        let d_c = &d_props[r + 1] * &out.graphs.masks[r];
        if d_c.iter().all(|&v| v == 0.0) {
            continue;
        }
        let w_block = match r {
            0 => &params.w_ap,
            1 => &params.w_oc,
            2 => &params.w_fo,
            _ => &params.w_rs,
        }
        .slice(s![..n, ..n]);
        let mixed = w_block.dot(a_tilde);
        let normed = graphs::row_normalize(&mixed, floor);
        let d_mixed = graphs::row_normalize_backward(&mixed, &normed, &d_c, floor);
        let gw = d_mixed.dot(&a_tilde.t());
        let mut target = match r {
            0 => grads.w_ap.slice_mut(s![..n, ..n]),
            1 => grads.w_oc.slice_mut(s![..n, ..n]),
            2 => grads.w_fo.slice_mut(s![..n, ..n]),
            _ => grads.w_rs.slice_mut(s![..n, ..n]),
        };
        target += &gw;
        d_a_tilde += &w_block.t().dot(&d_mixed);
    }

    // Gaussian kernel and the symmetrized bilinear form.
    if global.constant {
        return grads;
    }
    // The global affinity goes through the kernel exponent directly:
    // d a0_ij / d e_ik = a0_ij (delta_jk - a0_ik) for exponents e = -w^2 / 2 sigma^2.
    let coupling = (&d_props[0] * &aff.a0).sum_axis(Axis(1));
    let inv_var = 1.0 / (global.sigma * global.sigma);
    let d_w_tilde = Matrix::from_shape_fn((n, n), |(i, j)| {
        let d_exponent = aff.a0[[i, j]] * (d_props[0][[i, j]] - coupling[i])
            + d_a_tilde[[i, j]] * a_tilde[[i, j]];
        d_exponent * (-global.w_tilde[[i, j]] * inv_var)
    });
    let d_sym = group.f0.t().dot(&d_w_tilde).dot(&group.f0);
    grads.w0 += &((&d_sym + &d_sym.t()) * 0.5);
    grads
}
