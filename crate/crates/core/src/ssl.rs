//! Label-free auxiliary losses and the joint objective `L_CE + lambda * L_SSL`.
//!
//! Losses are built on a caller-owned [`Session`], so the same functions
//! serve joint training, inner adaptation and the meta objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Targets;
use crate::error::{Error, Result};
use crate::nn::{ByolTargetState, Model, Session};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslKind {
    Rotation4,
    ByolLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByolParams {
    pub projection_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub ema_tau: f64,
}

impl Default for ByolParams {
    fn default() -> Self {
        Self { projection_dim: 32, projector_hidden: 64, predictor_hidden: 64, ema_tau: 0.99 }
    }
}

/// View augmentations for BYOL. Point inputs only receive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub noise_std: f64,
    /// Maximum translation in pixels, zero padded.
    pub crop_jitter: usize,
    pub flip_prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { noise_std: 0.1, crop_jitter: 2, flip_prob: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslTaskConfig {
    pub kind: SslKind,
    /// Hidden width of the rotation head.
    pub rotation_hidden: usize,
    pub byol: ByolParams,
    pub augmentation: Augmentation,
}

impl Default for SslTaskConfig {
    fn default() -> Self {
        Self {
            kind: SslKind::Rotation4,
            rotation_hidden: 32,
            byol: ByolParams::default(),
            augmentation: Augmentation::default(),
        }
    }
}

impl SslTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.byol;
        if !(0.0..1.0).contains(&b.ema_tau) {
            return Err(Error::Config("ssl.byol.ema_tau must lie in [0, 1)".into()));
        }
        if b.projection_dim == 0 || b.projector_hidden == 0 || b.predictor_hidden == 0 || self.rotation_hidden == 0 {
            return Err(Error::Config("ssl head sizes must be positive".into()));
        }
        let a = &self.augmentation;
        if !(a.noise_std >= 0.0 && (0.0..=1.0).contains(&a.flip_prob)) {
            return Err(Error::Config("ssl.augmentation: noise_std >= 0 and flip_prob in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn head_spec(&self) -> crate::nn::SslHeadSpec {
        match self.kind {
            SslKind::Rotation4 => crate::nn::SslHeadSpec::Rotation { hidden: self.rotation_hidden },
            SslKind::ByolLite => crate::nn::SslHeadSpec::Byol {
                projector_hidden: self.byol.projector_hidden,
                projection_dim: self.byol.projection_dim,
                predictor_hidden: self.byol.predictor_hidden,
            },
        }
    }
}

/// Every sample rotated by 0, 90, 180 and 270 degrees, sample-major:
/// rows `4i..4i+4` hold sample `i` with labels `[0, 1, 2, 3]`.
pub fn make_rotation_batch(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let n = *x.shape().first().ok_or_else(|| Error::shape("make_rotation_batch", "rank 0"))?;
    let rotated = (0..4).map(|k| x.rot90(k)).collect::<Result<Vec<_>>>()?;
    let per = x.numel().checked_div(n).unwrap_or(0);
    let mut data = Vec::with_capacity(4 * x.numel());
    for i in 0..n {
        for r in &rotated {
            data.extend_from_slice(&r.data()[i * per..(i + 1) * per]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 4 * n;
    let labels = (0..4 * n).map(|i| i % 4).collect();
    Ok((Tensor::from_parts(shape, data), labels))
}

/// Row indices of the unrotated copies in a [`make_rotation_batch`] output.
pub fn identity_rows(n: usize) -> Vec<usize> {
    (0..n).map(|i| 4 * i).collect()
}

/// Cross-entropy of the predicted rotation over the rotated batch.
pub fn ssl_loss_rotation(model: &Model, s: &mut Session, x: &Tensor) -> Result<Var> {
    if !model.is_rotation_head() {
        return Err(Error::HeadMismatch("rotation loss needs a 4-way rotation head".into()));
    }
    let (xr, labels) = make_rotation_batch(x)?;
    let xv = s.input(&xr);
    let f = model.features(s, xv)?;
    rotation_loss_on_features(model, s, f, &labels)
}

fn rotation_loss_on_features(model: &Model, s: &mut Session, f: Var, labels: &[usize]) -> Result<Var> {
    let logits = model.rotation_logits(s, f)?;
    s.graph.softmax_ce(logits, labels)
}

/// Applies random noise, horizontal flip and translation to each sample.
pub fn augment(x: &Tensor, aug: &Augmentation, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = x.shape().to_vec();
    let n = shape[0];
    let mut out = x.data().to_vec();
    if shape.len() >= 3 && n > 0 {
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes_per = x.numel() / n / (h * w);
        let j = aug.crop_jitter as i64;
        for i in 0..n {
            let flip = rng.random::<f64>() < aug.flip_prob;
            let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            for p in 0..planes_per {
                let base = (i * planes_per + p) * h * w;
                let src = &x.data()[base..base + h * w];
                let dst = &mut out[base..base + h * w];
                for r in 0..h as i64 {
                    for c in 0..w as i64 {
                        let (sr, mut sc) = (r - dy, c - dx);
                        if flip {
                            sc = w as i64 - 1 - sc;
                        }
                        let inside = (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc);
                        dst[(r * w as i64 + c) as usize] =
                            if inside { src[(sr * w as i64 + sc) as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
    if aug.noise_std > 0.0 {
        let normal = Normal::new(0.0, aug.noise_std).expect("finite std");
        out.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Tensor::from_parts(shape, out)
}

/// Symmetrized BYOL loss `2 - (cos(p1, z2) + cos(p2, z1))` averaged over the
/// batch, so it lies in `[0, 4]`. Target projections enter as constants.
pub fn ssl_loss_byol(
    model: &Model,
    s: &mut Session,
    x: &Tensor,
    cfg: &SslTaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (v1, v2) = byol_views(model, x, cfg, rng)?;
    let both = concat_rows(&v1, &v2)?;
    let bv = s.input(&both);
    let f = model.features(s, bv)?;
    byol_loss_on_features(model, s, f, &v1, &v2)
}

fn byol_views(model: &Model, x: &Tensor, cfg: &SslTaskConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    if model.target().is_none() {
        return Err(Error::MissingTarget);
    }
    if !model.is_byol_head() {
        return Err(Error::HeadMismatch("BYOL loss needs a projector/predictor head".into()));
    }
    let v1 = augment(x, &cfg.augmentation, rng);
    let v2 = augment(x, &cfg.augmentation, rng);
    Ok((v1, v2))
}

fn byol_loss_on_features(model: &Model, s: &mut Session, f: Var, v1: &Tensor, v2: &Tensor) -> Result<Var> {
    let z = model.byol_projection(s, f)?;
    let p = model.byol_prediction(s, z)?;
    // pair online(v1) with target(v2) and online(v2) with target(v1)
    let t = concat_rows(&model.target_projection(v2)?, &model.target_projection(v1)?)?;
    let tv = s.graph.constant(t);
    let cos = s.graph.cosine_sim(p, tv)?;
    let mean = s.graph.mean_axis(cos, &[0])?;
    s.graph.scale_shift(mean, -2.0, 2.0)
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(shape, data))
}

/// Auxiliary loss of the configured kind.
pub fn ssl_loss(model: &Model, s: &mut Session, x: &Tensor, cfg: &SslTaskConfig, rng: &mut ChaCha8Rng) -> Result<Var> {
    match cfg.kind {
        SslKind::Rotation4 => ssl_loss_rotation(model, s, x),
        SslKind::ByolLite => ssl_loss_byol(model, s, x, cfg, rng),
    }
}

/// `ce + lambda * ssl`
pub fn joint_loss(g: &mut Graph, ce: Var, ssl: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale_shift(ssl, lambda, 0.0)?;
    g.add(ce, weighted)
}

/// Graph handles of the three terms of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct JointLosses {
    pub ce: Var,
    pub ssl: Var,
    pub joint: Var,
}

/// Supervised loss of main-branch outputs: cross-entropy for classes, MSE
/// for values.
pub fn task_loss(g: &mut Graph, out: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(y) => g.softmax_ce(out, y),
        Targets::Values(y) => {
            let t = g.constant(Tensor::new(&[y.len(), 1], y.clone(), false)?);
            g.mse(out, t)
        }
    }
}

/// Joint objective on a labeled batch with one shared backbone pass: the
/// supervised loss reads the unrotated (or clean) rows of the auxiliary batch.
pub fn joint_forward(
    model: &Model,
    s: &mut Session,
    x: &Tensor,
    targets: &Targets,
    cfg: &SslTaskConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<JointLosses> {
    let n = x.shape()[0];
    if targets.len() != n {
        return Err(Error::shape("joint_forward", format!("{n} inputs, {} targets", targets.len())));
    }
    let (ce, ssl) = match cfg.kind {
        SslKind::Rotation4 => {
            if !model.is_rotation_head() {
                return Err(Error::HeadMismatch("rotation loss needs a 4-way rotation head".into()));
            }
            let (xr, labels) = make_rotation_batch(x)?;
            let xv = s.input(&xr);
            let f = model.features(s, xv)?;
            let clean = s.graph.select_rows(f, &identity_rows(n))?;
            let out = model.classify(s, clean)?;
            let ce = task_loss(&mut s.graph, out, targets)?;
            (ce, rotation_loss_on_features(model, s, f, &labels)?)
        }
        SslKind::ByolLite => {
            let (v1, v2) = byol_views(model, x, cfg, rng)?;
            let all = concat_rows(&concat_rows(x, &v1)?, &v2)?;
            let xv = s.input(&all);
            let f = model.features(s, xv)?;
            let clean = s.graph.select_rows(f, &(0..n).collect::<Vec<_>>())?;
            let views = s.graph.select_rows(f, &(n..3 * n).collect::<Vec<_>>())?;
            let out = model.classify(s, clean)?;
            let ce = task_loss(&mut s.graph, out, targets)?;
            (ce, byol_loss_on_features(model, s, views, &v1, &v2)?)
        }
    };
    let joint = joint_loss(&mut s.graph, ce, ssl, lambda)?;
    Ok(JointLosses { ce, ssl, joint })
}

/// `t <- tau * t + (1 - tau) * o` for every weight, affine parameter and
/// running statistic.
pub fn ema_update(target: &mut ByolTargetState, online: &Model, tau: f64) -> Result<()> {
    if target.theta.len() != online.theta().len() || target.bn.len() != online.bn_layers().len() {
        return Err(Error::LayoutMismatch("target and online networks differ".into()));
    }
    let mix = |t: &mut [f64], o: &[f64]| t.iter_mut().zip(o).for_each(|(t, o)| *t = tau * *t + (1.0 - tau) * o);
    for (t, o) in target.theta.iter_mut().zip(online.theta()) {
        mix(t.data_mut(), o.data());
    }
    for (t, o) in target.bn.iter_mut().zip(online.bn_layers()) {
        mix(&mut t.gamma, &o.gamma);
        mix(&mut t.beta, &o.beta);
        mix(&mut t.running_mean, &o.running_mean);
        mix(&mut t.running_var, &o.running_var);
    }
    Ok(())
}

/// Applies [`ema_update`] to the model's own target network.
pub fn ema_update_model(model: &mut Model, tau: f64) -> Result<()> {
    let mut target = model.take_target().ok_or(Error::MissingTarget)?;
    let res = ema_update(&mut target, model, tau);
    model.set_target(Some(target));
    res
}
