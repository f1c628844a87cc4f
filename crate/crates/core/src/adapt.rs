//! Test-time adaptation of a meta-trained model to one target domain,
//! evaluation, the matched/not-matched protocol, entropy refinement, and
//! feature / BN-activation exports.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_support_query, Domain, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, macro_f1, DomainMetrics, Metrics};
use crate::nn::{AffineSnapshot, BnMode, Model, Scope, Session};
use crate::ssl::SslTaskConfig;
use crate::tensor::{sgd_step, Tensor};
use crate::training::{derive_seed, inner_adapt_model, InnerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub support_size: usize,
    /// Split of each target domain the support set is drawn from.
    pub support_split: Split,
    /// Entropy-refinement step size; `None` uses the outer learning rate.
    pub refine_lr: Option<f64>,
    pub refine_steps: usize,
    pub refine_batch: usize,
    /// Rows per inference forward pass.
    pub eval_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            support_size: 12,
            support_split: Split::Train,
            refine_lr: None,
            refine_steps: 1,
            refine_batch: 32,
            eval_batch: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size == 0 || self.refine_batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("eval: support_size, refine_batch and eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Clone of `meta_model` adapted on `support`; `meta_model` is untouched.
pub fn adapt_domain(
    meta_model: &Model,
    support: &Tensor,
    inner: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    seed: u64,
) -> Result<Model> {
    let mut m = inner_adapt_model(meta_model, support, inner, ssl_cfg, seed)?;
    m.set_mode(BnMode::Eval);
    Ok(m)
}

/// Support set for adapting to `domain`, reproducible from `seed`.
pub fn draw_support(domain: &Domain, eval: &EvalConfig, seed: u64) -> Result<Tensor> {
    let s = derive_seed(seed, &[domain.id as u64, eval.support_size as u64]);
    Ok(sample_support_query(domain, eval.support_split, eval.support_size, 0, s)?.support)
}

/// Main-branch logits with frozen statistics, computed in chunks of `batch` rows.
pub fn predict_logits(model: &Model, x: &Tensor, batch: usize) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend_from_slice(model.predict(&x.select_rows(chunk)?)?.data());
    }
    Ok(out)
}

pub fn predict_labels(model: &Model, x: &Tensor, batch: usize) -> Result<Vec<usize>> {
    let classes = model.config().task.outputs();
    Ok(argmax_rows(&predict_logits(model, x, batch)?, classes))
}

/// Accuracy and macro-F1 of `model` on a labeled set.
pub fn evaluate_domain(
    model: &Model,
    domain_id: u32,
    x: &Tensor,
    labels: &[usize],
    batch: usize,
) -> Result<DomainMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let preds = predict_labels(model, x, batch)?;
    let classes = model.config().task.outputs();
    Ok(DomainMetrics {
        domain_id,
        n: labels.len(),
        accuracy: accuracy(&preds, labels),
        macro_f1: macro_f1(&preds, labels, classes),
    })
}

/// Uniformly random permutation of `0..n` with no fixed point.
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::TooFewDomains { needed: 2, got: n });
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return Ok(p);
        }
    }
}

/// Adapted state of one domain: affine parameters, plus running statistics
/// when the adaptation re-estimated them.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSnapshot {
    pub domain_id: u32,
    pub affine: AffineSnapshot,
    pub stats: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl DomainSnapshot {
    pub fn capture(domain_id: u32, adapted: &Model, scope: Scope) -> Self {
        Self {
            domain_id,
            affine: adapted.snapshot_affine(),
            stats: (scope == Scope::FullBn).then(|| adapted.running_stats()),
        }
    }

    /// `base` with this snapshot's parameters installed.
    pub fn apply(&self, base: &Model) -> Result<Model> {
        let mut m = base.clone();
        m.restore_affine(&self.affine)?;
        if let Some(stats) = &self.stats {
            m.set_running_stats(stats)?;
        }
        m.set_mode(BnMode::Eval);
        Ok(m)
    }
}

/// Adapts every domain independently from the same meta model.
pub fn adapt_all(
    meta_model: &Model,
    domains: &[Domain],
    inner: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<DomainSnapshot>> {
    domains
        .par_iter()
        .map(|d| {
            let support = draw_support(d, eval, seed)?;
            let adapted = adapt_domain(meta_model, &support, inner, ssl_cfg, derive_seed(seed, &[d.id as u64, 11]))?;
            Ok(DomainSnapshot::capture(d.id, &adapted, inner.scope))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedShuffle {
    pub no_adapt: Metrics,
    pub not_matched: Metrics,
    pub matched: Metrics,
    /// Domain `j` is evaluated with the snapshot of domain `assignment[j]`.
    pub assignment: Vec<usize>,
}

/// Evaluates each target domain with its own snapshot, with another
/// domain's snapshot (a seeded derangement), and without adaptation.
pub fn run_matched_shuffle(
    meta_model: &Model,
    targets: &[Domain],
    inner: &InnerConfig,
    ssl_cfg: &SslTaskConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<MatchedShuffle> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xde]));
    let assignment = derangement(targets.len(), &mut rng)?;
    let snaps = adapt_all(meta_model, targets, inner, ssl_cfg, eval, seed)?;
    let classes = meta_model.config().task.outputs();
    let mut base = meta_model.clone();
    base.set_mode(BnMode::Eval);
    let run = |pick: &(dyn Fn(usize) -> Option<usize> + Sync)| -> Result<Metrics> {
        let parts = targets
            .par_iter()
            .enumerate()
            .map(|(j, d)| {
                let model = match pick(j) {
                    Some(u) => snaps[u].apply(meta_model)?,
                    None => base.clone(),
                };
                let (x, y) = d.split(Split::Test);
                if y.is_empty() {
                    return Err(Error::EmptyTestSet);
                }
                Ok((d.id, predict_labels(&model, &x, eval.eval_batch)?, y))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics::from_domains(&parts, classes))
    };
    Ok(MatchedShuffle {
        no_adapt: run(&|_| None)?,
        not_matched: run(&|j| Some(assignment[j]))?,
        matched: run(&|j| Some(j))?,
        assignment,
    })
}

/// Settings of entropy refinement on test batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub scope: Scope,
    pub lr: f64,
    pub steps: usize,
    /// Running-statistic retention when `scope` is FullBn; `None` keeps
    /// each layer's own.
    pub retention: Option<f64>,
}

/// Minimizes the mean prediction entropy of `batch` over the affine
/// parameters (and, under FullBn, normalizes with batch statistics folded
/// into the running statistics). Returns the logits of the first forward
/// pass, taken before any update.
pub fn entropy_refine(model: &mut Model, batch: &Tensor, cfg: &RefineConfig) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if cfg.scope.trains_theta() {
        return Err(Error::ScopeViolation("entropy refinement updates affine parameters only".into()));
    }
    let train_stats = cfg.scope == Scope::FullBn;
    let modes: Vec<BnMode> = model.bn_layers().iter().map(|b| b.mode()).collect();
    let retention: Vec<f64> = model.bn_layers().iter().map(|b| b.retention).collect();
    model.set_mode(if train_stats && n >= 2 { BnMode::Train } else { BnMode::Frozen });
    if let (true, Some(r)) = (train_stats, cfg.retention) {
        model.bn_layers_mut().iter_mut().for_each(|b| b.retention = r);
    }
    let keys = model.collect_params(Scope::AffineOnly).keys;
    let mut first = None;
    for _ in 0..cfg.steps.max(1) {
        let mut s = Session::new(model, Scope::AffineOnly)?;
        let xv = s.input(batch);
        let f = model.features(&mut s, xv)?;
        let logits = model.classify(&mut s, f)?;
        if first.is_none() {
            first = Some(s.graph.value(logits).clone());
        }
        if cfg.steps == 0 {
            break;
        }
        let h = s.graph.neg_entropy(logits)?;
        let grads = s.backward(h)?;
        let zeros: Vec<Vec<f64>> = keys.iter().map(|&k| vec![0.0; model.param(k).len()]).collect();
        let g: Vec<&[f64]> = keys.iter().zip(&zeros).map(|(&k, z)| grads.get(k).unwrap_or(z)).collect();
        sgd_step(&mut model.params_mut(&keys)?, &g, cfg.lr)?;
        if model.bn_layers().iter().any(|b| b.mode() == BnMode::Train) {
            model.commit_stats(&mut s)?;
        }
    }
    for ((b, mode), r) in model.bn_layers_mut().iter_mut().zip(modes).zip(retention) {
        b.set_mode(mode);
        b.retention = r;
    }
    Ok(first.expect("at least one forward pass"))
}

/// Streams `x` through [`entropy_refine`] in fixed-size batches on a copy
/// of `adapted`, accumulating updates within the call. Predictions come
/// from each batch's pre-update forward pass.
pub fn refine_predictions(adapted: &Model, x: &Tensor, cfg: &RefineConfig, batch: usize) -> Result<Vec<usize>> {
    let mut m = adapted.clone();
    let classes = m.config().task.outputs();
    let idx: Vec<usize> = (0..x.shape()[0]).collect();
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let logits = entropy_refine(&mut m, &x.select_rows(chunk)?, cfg)?;
        preds.extend(argmax_rows(logits.data(), classes));
    }
    Ok(preds)
}

/// Metrics of [`refine_predictions`] on one labeled domain.
pub fn evaluate_with_refine(
    adapted: &Model,
    domain_id: u32,
    x: &Tensor,
    labels: &[usize],
    cfg: &RefineConfig,
    batch: usize,
) -> Result<DomainMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let preds = refine_predictions(adapted, x, cfg, batch)?;
    let classes = adapted.config().task.outputs();
    Ok(DomainMetrics {
        domain_id,
        n: labels.len(),
        accuracy: accuracy(&preds, labels),
        macro_f1: macro_f1(&preds, labels, classes),
    })
}

/// CSV of `sample_id,label,f_1..f_d` with backbone features.
pub fn export_features(model: &Model, x: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    let feats = model.extract_features(x)?;
    let d = model.feature_dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (1..=d).map(|i| format!("f_{i}")).collect();
    writeln!(f, "sample_id,label,{}", header.join(","))?;
    for (i, row) in feats.data().chunks(d).enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{i},{},{}", labels[i], vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Equal-width histogram over `[min, max]` of `values`. A zero-width range
/// puts every value in the first bin.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if values.is_empty() || bins == 0 {
        return (0.0, 0.0, counts);
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    (lo, hi, counts)
}

/// Binned pre-BN and post-BN activations of one channel of one backbone BN
/// layer, using frozen statistics. Columns:
/// `bin,pre_lo,pre_hi,pre_count,post_lo,post_hi,post_count`.
pub fn export_bn_histograms(
    model: &Model,
    x: &Tensor,
    layer: usize,
    channel: usize,
    bins: usize,
    path: &Path,
) -> Result<()> {
    if layer >= model.num_backbone_bn() || channel >= model.bn_layers()[layer].channels() || bins == 0 {
        return Err(Error::Config(format!("no backbone BN layer {layer} channel {channel} (bins {bins})")));
    }
    let mut s = Session::inference(model);
    let xv = s.input(x);
    let (_, taps) = model.features_with_taps(&mut s, xv)?;
    let take = |v: crate::tensor::Var| -> Vec<f64> {
        let t = s.graph.value(v);
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let plane = t.numel() / (n * c).max(1);
        (0..n).flat_map(|i| t.data()[(i * c + channel) * plane..(i * c + channel + 1) * plane].to_vec()).collect()
    };
    let (pre, post) = (take(taps[layer].pre), take(taps[layer].post));
    let (plo, phi, pc) = histogram(&pre, bins);
    let (qlo, qhi, qc) = histogram(&post, bins);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "bin,pre_lo,pre_hi,pre_count,post_lo,post_hi,post_count")?;
    let edge = |lo: f64, hi: f64, b: usize| lo + (hi - lo) * b as f64 / bins as f64;
    for b in 0..bins {
        writeln!(
            f,
            "{b},{},{},{},{},{},{}",
            edge(plo, phi, b),
            edge(plo, phi, b + 1),
            pc[b],
            edge(qlo, qhi, b),
            edge(qlo, qhi, b + 1),
            qc[b]
        )?;
    }
    f.flush()?;
    Ok(())
}
