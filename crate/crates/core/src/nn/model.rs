use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bn::{AffineVars, BatchStats, BnMode, BnState, Branch, DEFAULT_EPS, DEFAULT_RETENTION};
use crate::error::{Error, Result};
use crate::tensor::{Bcast, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// conv3x3 -> BN -> relu blocks followed by global average pooling.
    Conv { in_channels: usize, image_size: usize, channels: Vec<usize> },
    /// linear -> BN -> relu blocks on flat vectors.
    Mlp { input_dim: usize, hidden: Vec<usize> },
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Conv { channels, in_channels, .. } => channels.last().copied().unwrap_or(*in_channels),
            BackboneSpec::Mlp { hidden, input_dim } => hidden.last().copied().unwrap_or(*input_dim),
        }
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            BackboneSpec::Conv { in_channels, image_size, .. } => vec![*in_channels, *image_size, *image_size],
            BackboneSpec::Mlp { input_dim, .. } => vec![*input_dim],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskHead {
    Classification {
        num_classes: usize,
    },
    /// Single output trained with MSE.
    Regression,
}

impl TaskHead {
    pub fn outputs(&self) -> usize {
        match self {
            TaskHead::Classification { num_classes } => *num_classes,
            TaskHead::Regression => 1,
        }
    }
}

/// Architecture of the auxiliary branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SslHeadSpec {
    /// linear -> BN -> relu -> linear(4)
    Rotation { hidden: usize },
    /// Projector and predictor, each linear -> BN -> relu -> linear.
    Byol { projector_hidden: usize, projection_dim: usize, predictor_hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub task: TaskHead,
    pub ssl: SslHeadSpec,
    #[serde(default = "default_retention")]
    pub retention: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_retention() -> f64 {
    DEFAULT_RETENTION
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every (gamma, beta), with running statistics fixed.
    AffineOnly,
    /// Every (gamma, beta) plus re-estimation of the statistics from the
    /// adaptation batch.
    FullBn,
    /// Weights and affine parameters.
    AllParams,
    /// Weights only.
    ThetaOnly,
}

impl Scope {
    pub fn trains_theta(self) -> bool {
        matches!(self, Scope::AllParams | Scope::ThetaOnly)
    }

    pub fn trains_affine(self) -> bool {
        !matches!(self, Scope::ThetaOnly)
    }

    pub fn label(self) -> &'static str {
        match self {
            Scope::AffineOnly => "affine",
            Scope::FullBn => "fullbn",
            Scope::AllParams => "all",
            Scope::ThetaOnly => "theta",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Theta(usize),
    Gamma(usize),
    Beta(usize),
}

/// Ordered set of parameters selected by a [`Scope`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamView {
    pub keys: Vec<ParamKey>,
    pub reestimate_stats: bool,
}

/// Gradients keyed by parameter; absent keys had no path to the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: HashMap<ParamKey, Vec<f64>>,
}

impl ParamGrads {
    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.grads.get(&key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: ParamKey, grad: Vec<f64>) {
        self.grads.insert(key, grad);
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.grads.keys()
    }

    /// `self += scale * other`, key by key.
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (k, g) in &other.grads {
            let acc = self.grads.entry(*k).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
}

/// Deep copy of every layer's (gamma, beta), in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSnapshot {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AffineSnapshot {
    pub fn differs_from(&self, other: &AffineSnapshot) -> bool {
        self != other
    }
}

/// Frozen momentum copy of the online network used by the BYOL loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ByolTargetState {
    pub theta: Vec<Tensor>,
    pub bn: Vec<BnState>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    w: usize,
    b: usize,
    bn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Mlp2 {
    fc1: Dense,
    bn: usize,
    fc2: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum SslLayout {
    Rotation(Mlp2),
    Byol { projector: Mlp2, predictor: Mlp2 },
}

/// Backbone (weights + BN layers), a BN-free linear classifier and an
/// auxiliary self-supervised head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    theta: Vec<Tensor>,
    theta_names: Vec<String>,
    bn: Vec<BnState>,
    blocks: Vec<Block>,
    classifier: Dense,
    ssl: Option<SslLayout>,
    target: Option<ByolTargetState>,
    freeze_theta: bool,
}

/// Pre- and post-normalization activations of one backbone BN layer.
#[derive(Clone, Copy, Debug)]
pub struct BnTap {
    pub pre: Var,
    pub post: Var,
}

/// A forward/backward pass over a [`Model`]: a graph with every parameter
/// bound as a leaf, plus Train-mode statistics waiting to be committed.
pub struct Session {
    pub graph: Graph,
    theta: Vec<Var>,
    affine: Vec<AffineVars>,
    pending: Vec<(usize, BatchStats)>,
    mode_override: Option<BnMode>,
}

impl Session {
    /// Binds the model's parameters. Leaves in `scope` require grad.
    pub fn new(model: &Model, scope: Scope) -> Result<Self> {
        Self::with_flags(model, scope.trains_theta(), scope.trains_affine(), None)
    }

    /// Everything constant and every BN layer normalizing with running statistics.
    pub fn inference(model: &Model) -> Self {
        Self::with_flags(model, false, false, Some(BnMode::Eval)).expect("inference binding cannot fail")
    }

    fn with_flags(model: &Model, theta_rg: bool, affine_rg: bool, mode_override: Option<BnMode>) -> Result<Self> {
        if theta_rg && model.freeze_theta {
            return Err(Error::ScopeViolation("weights are frozen but the scope trains them".into()));
        }
        let mut graph = Graph::new();
        let theta = model.theta.iter().map(|t| graph.leaf(t.clone(), theta_rg)).collect();
        let affine = model
            .bn
            .iter()
            .map(|b| {
                let learnable = affine_rg && mode_override != Some(BnMode::Eval);
                b.bind_affine(&mut graph, learnable)
            })
            .collect();
        Ok(Self { graph, theta, affine, pending: Vec::new(), mode_override })
    }

    pub fn input(&mut self, x: &Tensor) -> Var {
        self.graph.constant(x.clone())
    }

    /// Gradients of all bound parameters after `graph.backward`.
    pub fn grads(&self) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (i, &v) in self.theta.iter().enumerate() {
            if let Some(g) = self.graph.grad(v) {
                out.insert(ParamKey::Theta(i), g.to_vec());
            }
        }
        for (i, a) in self.affine.iter().enumerate() {
            if let Some(g) = self.graph.grad(a.gamma) {
                out.insert(ParamKey::Gamma(i), g.to_vec());
            }
            if let Some(g) = self.graph.grad(a.beta) {
                out.insert(ParamKey::Beta(i), g.to_vec());
            }
        }
        out
    }

    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        self.graph.backward(loss)?;
        Ok(self.grads())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.graph.value(v).data()[0]
    }
}

fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data = (0..shape.iter().product::<usize>()).map(|_| rng.sample(normal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    theta: Vec<Tensor>,
    names: Vec<String>,
    bn: Vec<BnState>,
    retention: f64,
    eps: f64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.theta.push(t);
        self.names.push(name);
        self.theta.len() - 1
    }

    fn dense(&mut self, name: &str, input: usize, output: usize) -> Dense {
        let w = he_init(self.rng, &[input, output], input);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[output]));
        Dense { w, b }
    }

    fn bn(&mut self, channels: usize, branch: Branch) -> usize {
        self.bn.push(BnState::new(channels, self.retention, self.eps, branch));
        self.bn.len() - 1
    }

    fn mlp2(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Mlp2 {
        let fc1 = self.dense(&format!("{name}.fc1"), input, hidden);
        let bn = self.bn(hidden, Branch::Auxiliary);
        let fc2 = self.dense(&format!("{name}.fc2"), hidden, output);
        Mlp2 { fc1, bn, fc2 }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        validate_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            theta: Vec::new(),
            names: Vec::new(),
            bn: Vec::new(),
            retention: config.retention,
            eps: config.eps,
        };
        let mut blocks = Vec::new();
        match &config.backbone {
            BackboneSpec::Conv { in_channels, channels, .. } => {
                let mut c_in = *in_channels;
                for (i, &c) in channels.iter().enumerate() {
                    let w = he_init(b.rng, &[c, c_in, 3, 3], c_in * 9);
                    let w = b.push(format!("backbone.{i}.conv.weight"), w);
                    let bias = b.push(format!("backbone.{i}.conv.bias"), Tensor::zeros(&[c]));
                    let bn = b.bn(c, Branch::Backbone);
                    blocks.push(Block { w, b: bias, bn });
                    c_in = c;
                }
            }
            BackboneSpec::Mlp { input_dim, hidden } => {
                let mut d_in = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    let d = b.dense(&format!("backbone.{i}.linear"), d_in, h);
                    let bn = b.bn(h, Branch::Backbone);
                    blocks.push(Block { w: d.w, b: d.b, bn });
                    d_in = h;
                }
            }
        }
        let fd = config.backbone.feature_dim();
        let classifier = b.dense("classifier", fd, config.task.outputs());
        let ssl = match config.ssl {
            SslHeadSpec::Rotation { hidden } => SslLayout::Rotation(b.mlp2("ssl.rotation", fd, hidden, 4)),
            SslHeadSpec::Byol { projector_hidden, projection_dim, predictor_hidden } => SslLayout::Byol {
                projector: b.mlp2("ssl.projector", fd, projector_hidden, projection_dim),
                predictor: b.mlp2("ssl.predictor", projection_dim, predictor_hidden, projection_dim),
            },
        };
        let (theta, theta_names, bn) = (b.theta, b.names, b.bn);
        let mut model = Self {
            config,
            theta,
            theta_names,
            bn,
            blocks,
            classifier,
            ssl: Some(ssl),
            target: None,
            freeze_theta: false,
        };
        if matches!(model.ssl, Some(SslLayout::Byol { .. })) {
            model.target = Some(ByolTargetState { theta: model.theta.clone(), bn: model.bn.clone() });
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn theta(&self) -> &[Tensor] {
        &self.theta
    }

    pub fn theta_names(&self) -> &[String] {
        &self.theta_names
    }

    pub fn bn_layers(&self) -> &[BnState] {
        &self.bn
    }

    /// Mutable access to the BN layers. Running statistics written here
    /// bypass the mode checks of [`BnState::update_running`].
    pub fn bn_layers_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn num_backbone_bn(&self) -> usize {
        self.blocks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    pub fn has_ssl_head(&self) -> bool {
        self.ssl.is_some()
    }

    pub fn is_rotation_head(&self) -> bool {
        matches!(self.ssl, Some(SslLayout::Rotation(_)))
    }

    pub fn is_byol_head(&self) -> bool {
        matches!(self.ssl, Some(SslLayout::Byol { .. }))
    }

    pub fn freeze_theta(&self) -> bool {
        self.freeze_theta
    }

    pub fn set_freeze_theta(&mut self, frozen: bool) {
        self.freeze_theta = frozen;
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.bn.iter_mut().for_each(|b| b.set_mode(mode));
    }

    pub fn target(&self) -> Option<&ByolTargetState> {
        self.target.as_ref()
    }

    pub fn target_mut(&mut self) -> Option<&mut ByolTargetState> {
        self.target.as_mut()
    }

    pub fn set_target(&mut self, target: Option<ByolTargetState>) {
        self.target = target;
    }

    pub fn take_target(&mut self) -> Option<ByolTargetState> {
        self.target.take()
    }

    /// Removes the auxiliary branch (and its BN layers and target network).
    /// The main branch is unaffected.
    pub fn drop_ssl_head(&mut self) {
        if self.ssl.take().is_none() {
            return;
        }
        let keep_theta = self.classifier.b + 1;
        self.theta.truncate(keep_theta);
        self.theta_names.truncate(keep_theta);
        self.bn.truncate(self.blocks.len());
        self.target = None;
    }

    fn mode_of(&self, s: &Session, layer: usize) -> BnMode {
        s.mode_override.unwrap_or(self.bn[layer].mode())
    }

    fn bn_apply(&self, s: &mut Session, layer: usize, x: Var) -> Result<Var> {
        let mode = self.mode_of(s, layer);
        let out = self.bn[layer].forward(&mut s.graph, x, s.affine[layer], mode)?;
        if let Some(stats) = out.batch_stats {
            s.pending.push((layer, stats));
        }
        Ok(out.out)
    }

    fn dense_apply(&self, s: &mut Session, d: Dense, x: Var) -> Result<Var> {
        let y = s.graph.matmul(x, s.theta[d.w])?;
        s.graph.add_b(y, s.theta[d.b], Bcast::Channel)
    }

    fn mlp2_apply(&self, s: &mut Session, m: Mlp2, x: Var) -> Result<Var> {
        let h = self.dense_apply(s, m.fc1, x)?;
        let h = self.bn_apply(s, m.bn, h)?;
        let h = s.graph.relu(h)?;
        self.dense_apply(s, m.fc2, h)
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<()> {
        let shape = s.graph.shape(x);
        let want = self.config.backbone.sample_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::shape("backbone_forward", format!("input {shape:?}, expected [batch, {want:?}]")));
        }
        Ok(())
    }

    /// Backbone features `[batch, feature_dim]`.
    pub fn features(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.features_with_taps(s, x)?.0)
    }

    pub fn features_with_taps(&self, s: &mut Session, x: Var) -> Result<(Var, Vec<BnTap>)> {
        self.check_input(s, x)?;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.blocks.len());
        let conv = matches!(self.config.backbone, BackboneSpec::Conv { .. });
        for blk in &self.blocks {
            let pre = if conv {
                let y = s.graph.conv2d_3x3(h, s.theta[blk.w])?;
                s.graph.add_b(y, s.theta[blk.b], Bcast::Channel)?
            } else {
                self.dense_apply(s, Dense { w: blk.w, b: blk.b }, h)?
            };
            let post = self.bn_apply(s, blk.bn, pre)?;
            taps.push(BnTap { pre, post });
            h = s.graph.relu(post)?;
        }
        if conv {
            h = s.graph.mean_axis(h, &[2, 3])?;
        }
        Ok((h, taps))
    }

    /// Main-branch output `[batch, outputs]`.
    pub fn classify(&self, s: &mut Session, features: Var) -> Result<Var> {
        let fd = s.graph.shape(features);
        if fd.len() != 2 || fd[1] != self.feature_dim() {
            return Err(Error::shape("classify", format!("features {fd:?}, expected [batch, {}]", self.feature_dim())));
        }
        self.dense_apply(s, self.classifier, features)
    }

    /// Four-way rotation logits from backbone features.
    pub fn rotation_logits(&self, s: &mut Session, features: Var) -> Result<Var> {
        match self.ssl {
            Some(SslLayout::Rotation(m)) => self.mlp2_apply(s, m, features),
            _ => Err(Error::HeadMismatch("model has no rotation head".into())),
        }
    }

    pub fn byol_projection(&self, s: &mut Session, features: Var) -> Result<Var> {
        match self.ssl {
            Some(SslLayout::Byol { projector, .. }) => self.mlp2_apply(s, projector, features),
            _ => Err(Error::HeadMismatch("model has no BYOL head".into())),
        }
    }

    pub fn byol_prediction(&self, s: &mut Session, projection: Var) -> Result<Var> {
        match self.ssl {
            Some(SslLayout::Byol { predictor, .. }) => self.mlp2_apply(s, predictor, projection),
            _ => Err(Error::HeadMismatch("model has no BYOL head".into())),
        }
    }

    /// Target-network projection of `x`, computed without gradients using
    /// the target's running statistics.
    pub fn target_projection(&self, x: &Tensor) -> Result<Tensor> {
        let target = self.target.as_ref().ok_or(Error::MissingTarget)?;
        let mut shadow = self.clone();
        shadow.theta = target.theta.clone();
        shadow.bn = target.bn.clone();
        shadow.target = None;
        let mut s = Session::inference(&shadow);
        let xv = s.input(x);
        let f = shadow.features(&mut s, xv)?;
        let z = shadow.byol_projection(&mut s, f)?;
        Ok(s.graph.value(z).clone())
    }

    /// Folds the batch statistics gathered by Train-mode layers during the
    /// session into their running statistics.
    pub fn commit_stats(&mut self, s: &mut Session) -> Result<()> {
        for (layer, stats) in s.pending.drain(..) {
            self.bn[layer].update_running(&stats.mean, &stats.var)?;
        }
        Ok(())
    }

    /// Logits for `x` with frozen statistics and no gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(self);
        let xv = s.input(x);
        let f = self.features(&mut s, xv)?;
        let out = self.classify(&mut s, f)?;
        Ok(s.graph.value(out).clone())
    }

    /// Backbone features for `x` with frozen statistics.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(self);
        let xv = s.input(x);
        let f = self.features(&mut s, xv)?;
        Ok(s.graph.value(f).clone())
    }

    pub fn collect_params(&self, scope: Scope) -> ParamView {
        let mut keys = Vec::new();
        if scope.trains_theta() {
            keys.extend((0..self.theta.len()).map(ParamKey::Theta));
        }
        if scope.trains_affine() {
            for i in 0..self.bn.len() {
                keys.push(ParamKey::Gamma(i));
                keys.push(ParamKey::Beta(i));
            }
        }
        ParamView { keys, reestimate_stats: scope == Scope::FullBn }
    }

    pub fn param(&self, key: ParamKey) -> &[f64] {
        match key {
            ParamKey::Theta(i) => self.theta[i].data(),
            ParamKey::Gamma(i) => &self.bn[i].gamma,
            ParamKey::Beta(i) => &self.bn[i].beta,
        }
    }

    pub fn param_count(&self, view: &ParamView) -> usize {
        view.keys.iter().map(|&k| self.param(k).len()).sum()
    }

    /// Disjoint mutable views of the requested parameters, in `keys` order.
    pub fn params_mut(&mut self, keys: &[ParamKey]) -> Result<Vec<&mut [f64]>> {
        if self.freeze_theta && keys.iter().any(|k| matches!(k, ParamKey::Theta(_))) {
            return Err(Error::ScopeViolation("attempted write to frozen weights".into()));
        }
        let mut all: HashMap<ParamKey, &mut [f64]> = HashMap::new();
        for (i, t) in self.theta.iter_mut().enumerate() {
            all.insert(ParamKey::Theta(i), t.data_mut());
        }
        for (i, b) in self.bn.iter_mut().enumerate() {
            all.insert(ParamKey::Gamma(i), b.gamma.as_mut_slice());
            all.insert(ParamKey::Beta(i), b.beta.as_mut_slice());
        }
        keys.iter()
            .map(|k| all.remove(k).ok_or_else(|| Error::LayoutMismatch(format!("unknown or repeated parameter {k:?}"))))
            .collect()
    }

    pub fn snapshot_affine(&self) -> AffineSnapshot {
        AffineSnapshot { layers: self.bn.iter().map(|b| (b.gamma.clone(), b.beta.clone())).collect() }
    }

    /// Overwrites gamma and beta only.
    pub fn restore_affine(&mut self, snap: &AffineSnapshot) -> Result<()> {
        if snap.layers.len() != self.bn.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} layers in snapshot, {} in model",
                snap.layers.len(),
                self.bn.len()
            )));
        }
        for (i, (b, (g, be))) in self.bn.iter().zip(&snap.layers).enumerate() {
            if g.len() != b.channels() || be.len() != b.channels() {
                return Err(Error::LayoutMismatch(format!("layer {i}: {} channels vs {}", g.len(), b.channels())));
            }
        }
        for (b, (g, be)) in self.bn.iter_mut().zip(&snap.layers) {
            b.gamma.clone_from(g);
            b.beta.clone_from(be);
        }
        Ok(())
    }

    /// Running statistics of every layer, in layer order.
    pub fn running_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.bn.iter().map(|b| (b.running_mean.clone(), b.running_var.clone())).collect()
    }

    pub fn set_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if stats.len() != self.bn.len() || stats.iter().zip(&self.bn).any(|((m, _), b)| m.len() != b.channels()) {
            return Err(Error::LayoutMismatch("running statistics layout differs".into()));
        }
        for (b, (m, v)) in self.bn.iter_mut().zip(stats) {
            b.running_mean.clone_from(m);
            b.running_var.clone_from(v);
        }
        Ok(())
    }

    pub fn theta_hash(&self) -> String {
        hash_buffers(self.theta.iter().map(|t| t.data()))
    }

    pub fn stats_hash(&self) -> String {
        hash_buffers(self.bn.iter().flat_map(|b| [b.running_mean.as_slice(), b.running_var.as_slice()]))
    }

    pub fn affine_hash(&self) -> String {
        hash_buffers(self.bn.iter().flat_map(|b| [b.gamma.as_slice(), b.beta.as_slice()]))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        theta: Vec<Tensor>,
        bn: Vec<BnState>,
        has_ssl: bool,
        target: Option<ByolTargetState>,
        freeze_theta: bool,
    ) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if !has_ssl {
            model.drop_ssl_head();
        }
        let shapes_match = theta.len() == model.theta.len()
            && theta.iter().zip(&model.theta).all(|(a, b)| a.shape() == b.shape())
            && bn.len() == model.bn.len()
            && bn.iter().zip(&model.bn).all(|(a, b)| a.channels() == b.channels() && a.branch == b.branch);
        if !shapes_match {
            return Err(Error::LayoutMismatch("parameter buffers do not match the architecture".into()));
        }
        model.theta = theta;
        model.bn = bn;
        model.target = target;
        model.freeze_theta = freeze_theta;
        Ok(model)
    }
}

/// SHA-256 over the little-endian bytes of the buffers, as lowercase hex.
pub fn hash_buffers<'a>(buffers: impl Iterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for buf in buffers {
        h.update((buf.len() as u64).to_le_bytes());
        for v in buf {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn validate_config(c: &ModelConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    match &c.backbone {
        BackboneSpec::Conv { in_channels, image_size, channels } => {
            if *in_channels == 0 || *image_size == 0 || channels.is_empty() || channels.contains(&0) {
                return bad("conv backbone needs positive in_channels, image_size and channel counts");
            }
        }
        BackboneSpec::Mlp { input_dim, hidden } => {
            if *input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                return bad("mlp backbone needs positive input_dim and hidden sizes");
            }
        }
    }
    if let TaskHead::Classification { num_classes } = c.task {
        if num_classes < 2 {
            return bad("classification needs at least 2 classes");
        }
    }
    match c.ssl {
        SslHeadSpec::Rotation { hidden: 0 } => return bad("ssl hidden size must be positive"),
        SslHeadSpec::Byol { projector_hidden, projection_dim, predictor_hidden }
            if projector_hidden == 0 || projection_dim == 0 || predictor_hidden == 0 =>
        {
            return bad("byol dimensions must be positive")
        }
        _ => {}
    }
    if !(0.0..1.0).contains(&c.retention) || c.eps <= 0.0 {
        return bad("retention must lie in [0, 1) and eps must be positive");
    }
    Ok(())
}
