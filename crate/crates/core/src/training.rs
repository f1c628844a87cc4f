//! Joint supervised + auxiliary training on pooled sources, and
//! meta-auxiliary training of the BN affine parameters.
//!
//! The meta loop adapts a clone of the model on each task's support set
//! with the auxiliary loss, scores the adapted clone on the query set with
//! the joint loss, and applies the summed query gradient (taken at the
//! adapted parameters) to the original affine parameters.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_support_query, Domain, DomainTask, Split, Targets};
use crate::error::{Error, Result};
use crate::nn::{AffineSnapshot, BnMode, Model, ParamGrads, ParamKey, Scope, Session};
use crate::ssl::{self, SslKind, SslTaskConfig};
use crate::tensor::{adam_step, sgd_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOrder {
    /// Gradient at the adapted parameters applied to the original ones.
    FirstOrder,
    /// Query gradient pulled back through the inner update by a central
    /// difference of the inner map along that gradient. Exact up to O(h^2)
    /// for one inner step, where the inner Jacobian is symmetric.
    FiniteDifference,
}

/// How per-task query gradients are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaReduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub delta: f64,
    /// Joint-training learning rate.
    pub eta: f64,
    pub meta_batch: usize,
    pub lambda: f64,
    pub support_size: usize,
    pub query_size: usize,
    pub inner_steps: usize,
    pub scope: Scope,
    pub outer_order: OuterOrder,
    pub reduction: MetaReduction,
    pub outer_optimizer: OuterOptimizer,
    /// Meta steps per epoch; 0 means one pass over the sources.
    pub steps_per_epoch: usize,
    /// Running-statistic retention while re-estimating under FullBn
    /// adaptation; `None` uses each layer's own retention. 0 replaces the
    /// statistics with the support estimate.
    pub fullbn_retention: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 3e-4,
            delta: 3e-5,
            eta: 1e-4,
            meta_batch: 4,
            lambda: 0.1,
            support_size: 12,
            query_size: 48,
            inner_steps: 1,
            scope: Scope::AffineOnly,
            outer_order: OuterOrder::FirstOrder,
            reduction: MetaReduction::Sum,
            outer_optimizer: OuterOptimizer::Sgd,
            steps_per_epoch: 0,
            fullbn_retention: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.delta >= 0.0 && self.eta >= 0.0 && self.lambda >= 0.0) {
            return bad("meta: alpha, delta, eta and lambda must be non-negative");
        }
        if self.meta_batch == 0 {
            return bad("meta: meta_batch must be at least 1");
        }
        if self.support_size == 0 || self.query_size == 0 {
            return bad("meta: support_size and query_size must be at least 1");
        }
        if self.inner_steps == 0 {
            return bad("meta: inner_steps must be at least 1");
        }
        if self.fullbn_retention.is_some_and(|r| !(0.0..=1.0).contains(&r)) {
            return bad("meta: fullbn_retention must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs over which relative improvement is measured.
    pub plateau_window: usize,
    /// Relative improvement below which the learning rate is halved.
    pub plateau_tol: f64,
    pub lr_factor: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, plateau_window: 2, plateau_tol: 1e-3, lr_factor: 0.5 }
    }
}

/// One telemetry record. A missing domain id means a pooled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub domain_id: Option<u32>,
    pub loss_ce: f64,
    pub loss_ssl: f64,
    pub loss_joint: f64,
    pub lr: f64,
}

pub const TELEMETRY_HEADER: &str = "epoch,phase,domain_id,loss_ce,loss_ssl,loss_joint,lr";

pub fn write_telemetry_csv(rows: &[TelemetryRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TELEMETRY_HEADER}")?;
    for r in rows {
        let id = r.domain_id.map(|d| d.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{},{}", r.epoch, r.phase, id, r.loss_ce, r.loss_ssl, r.loss_joint, r.lr)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointReport {
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
    pub telemetry: Vec<TelemetryRow>,
}

/// SplitMix64 over `base` and `parts`; decorrelates per-task seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in std::iter::once(&0x9e37_79b9_7f4a_7c15u64).chain(parts) {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn divergence(phase: &'static str, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::DivergenceDetected { phase, epoch },
        other => other,
    }
}

fn apply_grads(
    model: &mut Model,
    keys: &[ParamKey],
    grads: &ParamGrads,
    lr: f64,
    adam: Option<&mut AdamState>,
) -> Result<()> {
    let zeros: Vec<Vec<f64>> = keys.iter().map(|&k| vec![0.0; model.param(k).len()]).collect();
    let g: Vec<&[f64]> = keys.iter().zip(&zeros).map(|(&k, z)| grads.get(k).unwrap_or(z)).collect();
    let mut params = model.params_mut(keys)?;
    match adam {
        Some(state) => adam_step(&mut params, &g, state, lr),
        None => sgd_step(&mut params, &g, lr),
    }
}

/// Phase 1: Adam on `L_CE + lambda * L_SSL` over uniformly shuffled
/// minibatches of the pooled source train splits. Updates weights, affine
/// parameters and running statistics.
pub fn train_joint(
    model: &mut Model,
    sources: &[Domain],
    ssl_cfg: &SslTaskConfig,
    meta: &MetaConfig,
    cfg: &JointConfig,
    seed: u64,
) -> Result<JointReport> {
    let mut pool: Vec<(usize, usize)> =
        sources.iter().enumerate().flat_map(|(d, dom)| dom.indices(Split::Train).map(move |i| (d, i))).collect();
    if pool.len() < 2 {
        return Err(Error::DataExhausted(format!("{} pooled source samples", pool.len())));
    }
    model.set_freeze_theta(false);
    model.set_mode(BnMode::Train);
    let keys = model.collect_params(Scope::AllParams).keys;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lr = meta.eta;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut telemetry = Vec::new();
    let mut last_drop = 0;
    let bs = cfg.batch_size.max(2);
    for epoch in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pool.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = gather(sources, chunk)?;
            let mut s = Session::new(model, Scope::AllParams)?;
            let l = ssl::joint_forward(model, &mut s, &x, &y, ssl_cfg, meta.lambda, &mut rng)
                .map_err(divergence("joint", epoch))?;
            let (ce, sl, joint) = (s.scalar(l.ce), s.scalar(l.ssl), s.scalar(l.joint));
            let grads = s.backward(l.joint).map_err(divergence("joint", epoch))?;
            apply_grads(model, &keys, &grads, lr, Some(&mut adam))?;
            model.commit_stats(&mut s)?;
            if ssl_cfg.kind == SslKind::ByolLite {
                ssl::ema_update_model(model, ssl_cfg.byol.ema_tau)?;
            }
            if !model.theta().iter().all(|t| t.is_finite()) {
                return Err(Error::DivergenceDetected { phase: "joint", epoch });
            }
            telemetry.push(TelemetryRow {
                epoch,
                phase: "joint",
                domain_id: None,
                loss_ce: ce,
                loss_ssl: sl,
                loss_joint: joint,
                lr,
            });
            total += joint;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        epoch_losses.push(mean);
        let w = cfg.plateau_window.max(1);
        if epoch >= last_drop + w {
            let past = epoch_losses[epoch - w];
            if (past - mean) / past.abs().max(1e-12) < cfg.plateau_tol {
                lr *= cfg.lr_factor;
                last_drop = epoch + 1;
            }
        }
    }
    Ok(JointReport { epoch_losses, final_lr: lr, telemetry })
}

fn gather(sources: &[Domain], chunk: &[(usize, usize)]) -> Result<(crate::tensor::Tensor, Targets)> {
    let per: usize = sources[0].x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(chunk.len() * per);
    let mut labels = Vec::with_capacity(chunk.len());
    for &(d, i) in chunk {
        data.extend_from_slice(&sources[d].x.data()[i * per..(i + 1) * per]);
        labels.push(sources[d].labels[i]);
    }
    let mut shape = sources[0].x.shape().to_vec();
    shape[0] = chunk.len();
    Ok((crate::tensor::Tensor::new(&shape, data, false)?, Targets::Classes(labels)))
}

/// Settings of one test-time or inner-loop adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub alpha: f64,
    pub scope: Scope,
    pub steps: usize,
    pub fullbn_retention: Option<f64>,
}

impl From<&MetaConfig> for InnerConfig {
    fn from(m: &MetaConfig) -> Self {
        Self { alpha: m.alpha, scope: m.scope, steps: m.inner_steps, fullbn_retention: m.fullbn_retention }
    }
}

/// Adapted copy of `model` after `steps` SGD steps of the auxiliary loss on
/// `support`. `model` itself is untouched.
///
/// AffineOnly normalizes with the running statistics. FullBn normalizes
/// with support statistics and folds them into the copy's running
/// statistics with `fullbn_retention`. Scopes that train weights require
/// `freeze_theta` to be clear.
pub fn inner_adapt_model(
    model: &Model,
    support: &crate::tensor::Tensor,
    cfg: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    seed: u64,
) -> Result<Model> {
    if support.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptySupport);
    }
    let mut m = model.clone();
    let modes: Vec<BnMode> = m.bn_layers().iter().map(|b| b.mode()).collect();
    let retention: Vec<f64> = m.bn_layers().iter().map(|b| b.retention).collect();
    let train_stats = cfg.scope == Scope::FullBn;
    m.set_mode(if train_stats { BnMode::Train } else { BnMode::Frozen });
    if let (true, Some(r)) = (train_stats, cfg.fullbn_retention) {
        m.bn_layers_mut().iter_mut().for_each(|b| b.retention = r);
    }
    let keys = m.collect_params(cfg.scope).keys;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.steps {
        let mut s = Session::new(&m, cfg.scope)?;
        let loss = ssl::ssl_loss(&m, &mut s, support, ssl_cfg, &mut rng)?;
        let grads = s.backward(loss)?;
        if m.freeze_theta() && grads.keys().any(|k| matches!(k, ParamKey::Theta(_))) {
            return Err(Error::ScopeViolation("weights received a gradient during adaptation".into()));
        }
        apply_grads(&mut m, &keys, &grads, cfg.alpha, None)?;
        if train_stats {
            m.commit_stats(&mut s)?;
        }
    }
    for ((b, mode), r) in m.bn_layers_mut().iter_mut().zip(modes).zip(retention) {
        b.set_mode(mode);
        b.retention = r;
    }
    Ok(m)
}

/// Adapted `(gamma, beta)` of every layer; see [`inner_adapt_model`].
pub fn inner_adapt(
    model: &Model,
    support: &crate::tensor::Tensor,
    cfg: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    seed: u64,
) -> Result<AffineSnapshot> {
    Ok(inner_adapt_model(model, support, cfg, ssl_cfg, seed)?.snapshot_affine())
}

/// Optimizer state carried across meta steps.
#[derive(Clone, Debug, Default)]
pub struct OuterState {
    adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskLoss {
    pub domain_id: u32,
    pub ce: f64,
    pub ssl: f64,
    pub joint: f64,
}

/// Query-set joint loss and its gradient at the adapted parameters of one task.
fn task_gradient(
    model: &Model,
    task: &DomainTask,
    meta: &MetaConfig,
    ssl_cfg: &SslTaskConfig,
    seed: u64,
) -> Result<(TaskLoss, ParamGrads)> {
    let inner = InnerConfig::from(meta);
    let task_seed = derive_seed(seed, &[task.domain_id as u64]);
    let mut adapted = inner_adapt_model(model, &task.support, &inner, ssl_cfg, task_seed)?;
    adapted.set_mode(BnMode::Frozen);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, &[1]));
    let mut s = Session::new(&adapted, meta.scope)?;
    let l = ssl::joint_forward(&adapted, &mut s, &task.query, &task.query_targets, ssl_cfg, meta.lambda, &mut rng)?;
    let loss =
        TaskLoss { domain_id: task.domain_id, ce: s.scalar(l.ce), ssl: s.scalar(l.ssl), joint: s.scalar(l.joint) };
    let grads = s.backward(l.joint)?;
    if meta.outer_order == OuterOrder::FirstOrder {
        return Ok((loss, grads));
    }
    Ok((loss, pull_back(model, task, &inner, ssl_cfg, task_seed, &grads)?))
}

/// `J v` for the inner map `J` at `model`'s affine parameters and `v` the
/// affine part of `grads`; other entries of `grads` pass through. The
/// stencil has norm `1e-6` so it rarely straddles a ReLU kink.
fn pull_back(
    model: &Model,
    task: &DomainTask,
    inner: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    seed: u64,
    grads: &ParamGrads,
) -> Result<ParamGrads> {
    let keys: Vec<ParamKey> = model.collect_params(Scope::AffineOnly).keys;
    let norm = keys.iter().filter_map(|&k| grads.get(k)).flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(grads.clone());
    }
    let h = 1e-6 / norm;
    let shifted = |sign: f64| -> Result<Model> {
        let mut m = model.clone();
        let freeze = m.freeze_theta();
        for &k in &keys {
            if let Some(g) = grads.get(k) {
                let g = g.to_vec();
                let mut p = m.params_mut(&[k])?;
                p[0].iter_mut().zip(&g).for_each(|(x, d)| *x += sign * h * d);
            }
        }
        m.set_freeze_theta(freeze);
        inner_adapt_model(&m, &task.support, inner, ssl_cfg, seed)
    };
    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
    let mut out = grads.clone();
    for &k in &keys {
        if grads.get(k).is_some() {
            let jv: Vec<f64> = plus.param(k).iter().zip(minus.param(k)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            out.insert(k, jv);
        }
    }
    Ok(out)
}

/// One meta update of the affine parameters from `tasks`.
/// Gradients are reduced in ascending domain-id order.
pub fn meta_step(
    model: &mut Model,
    tasks: &[DomainTask],
    meta: &MetaConfig,
    ssl_cfg: &SslTaskConfig,
    state: &mut OuterState,
    seed: u64,
) -> Result<Vec<TaskLoss>> {
    if tasks.is_empty() {
        return Err(Error::EmptyMetaBatch);
    }
    if !model.freeze_theta() || meta.scope.trains_theta() {
        return Err(Error::ScopeViolation("meta-training requires frozen weights and an affine scope".into()));
    }
    let mut order: Vec<&DomainTask> = tasks.iter().collect();
    order.sort_by_key(|t| t.domain_id);
    let frozen: &Model = model;
    let results =
        order.par_iter().map(|t| task_gradient(frozen, t, meta, ssl_cfg, seed)).collect::<Result<Vec<_>>>()?;
    let mut total = ParamGrads::default();
    let mut losses = Vec::with_capacity(results.len());
    for (loss, g) in results {
        total.accumulate(&g, 1.0);
        losses.push(loss);
    }
    if meta.reduction == MetaReduction::Mean {
        total.scale(1.0 / tasks.len() as f64);
    }
    let keys = model.collect_params(Scope::AffineOnly).keys;
    let adam = match meta.outer_optimizer {
        OuterOptimizer::Adam => Some(&mut state.adam),
        OuterOptimizer::Sgd => None,
    };
    apply_grads(model, &keys, &total, meta.delta, adam)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    /// Mean query joint loss per epoch.
    pub epoch_query_loss: Vec<f64>,
    pub telemetry: Vec<TelemetryRow>,
}

/// Phase 2: repeated meta steps over meta-batches of distinct source
/// domains. Weights and running statistics are left bit-identical.
pub fn meta_train(
    model: &mut Model,
    sources: &[Domain],
    meta: &MetaConfig,
    ssl_cfg: &SslTaskConfig,
    epochs: usize,
    seed: u64,
) -> Result<MetaReport> {
    meta.validate()?;
    if sources.len() < meta.meta_batch {
        return Err(Error::TooFewDomains { needed: meta.meta_batch, got: sources.len() });
    }
    let theta_before = model.theta_hash();
    let stats_before = model.stats_hash();
    model.set_freeze_theta(true);
    model.set_mode(BnMode::Frozen);
    let steps = if meta.steps_per_epoch == 0 { sources.len().div_ceil(meta.meta_batch) } else { meta.steps_per_epoch };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OuterState::default();
    let mut report = MetaReport { epoch_query_loss: Vec::with_capacity(epochs), telemetry: Vec::new() };
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut cursor = order.len();
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for step in 0..steps {
            let mut batch = Vec::with_capacity(meta.meta_batch);
            while batch.len() < meta.meta_batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                if !batch.contains(&order[cursor]) {
                    batch.push(order[cursor]);
                }
                cursor += 1;
            }
            let step_seed = derive_seed(seed, &[epoch as u64, step as u64]);
            let tasks = batch
                .iter()
                .map(|&d| {
                    let dom = &sources[d];
                    let s = derive_seed(step_seed, &[dom.id as u64, 7]);
                    sample_support_query(dom, Split::Train, meta.support_size, meta.query_size, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let losses =
                meta_step(model, &tasks, meta, ssl_cfg, &mut state, step_seed).map_err(divergence("meta", epoch))?;
            for l in losses {
                sum += l.joint;
                count += 1;
                report.telemetry.push(TelemetryRow {
                    epoch,
                    phase: "meta",
                    domain_id: Some(l.domain_id),
                    loss_ce: l.ce,
                    loss_ssl: l.ssl,
                    loss_joint: l.joint,
                    lr: meta.delta,
                });
            }
        }
        report.epoch_query_loss.push(sum / count.max(1) as f64);
    }
    if model.theta_hash() != theta_before || model.stats_hash() != stats_before {
        return Err(Error::ScopeViolation("weights or running statistics changed during meta-training".into()));
    }
    Ok(report)
}

/// Scalar bi-level helpers on plain parameter vectors, used to check the
/// first-order update against an exact finite-difference meta-gradient.
pub mod bilevel {
    /// `steps` gradient-descent steps from `params`.
    pub fn inner_sgd(params: &[f64], inner_grad: &dyn Fn(&[f64]) -> Vec<f64>, alpha: f64, steps: usize) -> Vec<f64> {
        let mut p = params.to_vec();
        for _ in 0..steps {
            let g = inner_grad(&p);
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= alpha * g);
        }
        p
    }

    /// Outer gradient evaluated at the adapted parameters.
    pub fn first_order_grad(
        params: &[f64],
        inner_grad: &dyn Fn(&[f64]) -> Vec<f64>,
        outer_grad: &dyn Fn(&[f64]) -> Vec<f64>,
        alpha: f64,
        steps: usize,
    ) -> Vec<f64> {
        outer_grad(&inner_sgd(params, inner_grad, alpha, steps))
    }

    /// Central differences of `outer(inner_sgd(params))`.
    pub fn exact_grad_fd(
        params: &[f64],
        inner_grad: &dyn Fn(&[f64]) -> Vec<f64>,
        outer_loss: &dyn Fn(&[f64]) -> f64,
        alpha: f64,
        steps: usize,
        h: f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut hi = params.to_vec();
                let mut lo = params.to_vec();
                hi[i] += h;
                lo[i] -= h;
                let f = |p: &[f64]| outer_loss(&inner_sgd(p, inner_grad, alpha, steps));
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }
}
