//! Test-side oracles, independent of the library's own implementations.

#![allow(dead_code)]

use mabn::nn::{BackboneSpec, Model, ModelConfig, ParamKey, Scope, SslHeadSpec, TaskHead};
use mabn::tensor::{Graph, OpKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
/// Step for whole-network checks. A ReLU pre-activation within `1e-5` of
/// zero puts a kink inside a wider stencil (3 of 100 cases at `1e-5`).
pub const FD_STEP_NET: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect(), false).unwrap()
}

/// `|a - b| <= max(rel * max(|a|, |b|), floor)`
pub fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(floor)
}

/// Confusion-matrix macro-F1: classes with no predictions and no labels are skipped.
pub fn brute_macro_f1(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut cm = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let mut scores = Vec::new();
    for (c, row) in cm.iter().enumerate() {
        let tp = row[c] as f64;
        let actual: u64 = row.iter().sum();
        let predicted: u64 = cm.iter().map(|r| r[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        scores.push(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) });
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Pearson r from the covariance matrix; 0 when a series is constant.
pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let cov =
        |x: &[f64], mx: f64, y: &[f64], my: f64| x.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let (caa, cbb, cab) = (cov(a, ma, a, ma), cov(b, mb, b, mb), cov(a, ma, b, mb));
    if caa == 0.0 || cbb == 0.0 {
        return 0.0;
    }
    (cab / (caa * cbb).sqrt()).clamp(-1.0, 1.0)
}

/// Scalar loss `mean(out * w)` over a single primitive with fixed projection `w`.
pub fn projected(op: &OpKind, inputs: &[Tensor], w: &Tensor) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = g.apply(op.clone(), &vars).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).unwrap();
    let axes: Vec<usize> = (0..w.shape().len()).collect();
    let loss = g.mean_axis(prod, &axes).unwrap();
    (g, vars, loss)
}

/// Worst relative gradient error of `op` over all inputs, against central differences.
pub fn primitive_grad_error(op: &OpKind, inputs: &[Tensor], w: &Tensor, frozen: &[usize]) -> f64 {
    let (mut g, vars, loss) = projected(op, inputs, w);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        if frozen.contains(&i) {
            continue;
        }
        let analytic = g.grad(*v).expect("input reached the loss").to_vec();
        let mut probe = inputs.to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            let mut eval = |x: f64| {
                probe[i].data_mut()[j] = x;
                let (g2, _, l2) = projected(op, &probe, w);
                g2.value(l2).data()[0]
            };
            let numeric = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            probe[i].data_mut()[j] = orig;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR / GRAD_REL_TOL);
            worst = worst.max(err);
        }
    }
    worst
}

/// Three conv blocks on 2x4x4 images, 3 classes, 4-way rotation head.
pub fn conv3_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneSpec::Conv { in_channels: 2, image_size: 4, channels: vec![3, 3, 2] },
        task: TaskHead::Classification { num_classes: 3 },
        ssl: SslHeadSpec::Rotation { hidden: 4 },
        retention: 0.9,
        eps: 1e-5,
    }
}

pub fn conv3_byol_config() -> ModelConfig {
    ModelConfig {
        ssl: SslHeadSpec::Byol { projector_hidden: 4, projection_dim: 3, predictor_hidden: 4 },
        ..conv3_config()
    }
}

pub fn perturb(model: &Model, key: ParamKey, j: usize, delta: f64) -> Model {
    let mut m = model.clone();
    let frozen = m.freeze_theta();
    m.set_freeze_theta(false);
    m.params_mut(&[key]).unwrap()[0][j] += delta;
    m.set_freeze_theta(frozen);
    m
}

/// Worst relative error of the analytic gradient of `loss` over every
/// parameter in `scope`, against central differences on model clones.
pub fn model_grad_error(
    model: &Model,
    scope: Scope,
    analytic: &mabn::nn::ParamGrads,
    loss: &dyn Fn(&Model) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for key in model.collect_params(scope).keys {
        let n = model.param(key).len();
        let a = analytic.get(key).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (j, &aj) in a.iter().enumerate() {
            let h = FD_STEP_NET;
            let up = loss(&perturb(model, key, j, h));
            let down = loss(&perturb(model, key, j, -h));
            let numeric = (up - down) / (2.0 * h);
            let err = (aj - numeric).abs() / aj.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR / GRAD_REL_TOL);
            worst = worst.max(err);
        }
    }
    worst
}

/// Values bounded away from zero so ReLU kinks stay outside the difference stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v, false).unwrap()
}

/// One randomized instance of a primitive: the op, its inputs, and the
/// indices of inputs that are not differentiated.
pub struct PrimitiveCase {
    pub op: OpKind,
    pub inputs: Vec<Tensor>,
    pub frozen: Vec<usize>,
}

pub const PRIMITIVES: [&str; 20] = [
    "matmul",
    "add_same",
    "add_channel",
    "add_scalar",
    "mul_same",
    "mul_channel",
    "mul_scalar",
    "scale_shift",
    "relu",
    "conv2d_3x3",
    "mean_axis",
    "var_axis",
    "channel_normalize",
    "softmax_ce",
    "mse",
    "l2_normalize",
    "cosine_sim",
    "neg_entropy",
    "rotate90k",
    "concat_reshape_select",
];

pub fn primitive_case(name: &str, seed: u64) -> Vec<PrimitiveCase> {
    use mabn::tensor::Bcast;
    let mut r = rng(seed);
    let b = r.random_range(2..4);
    let c = r.random_range(1..4);
    let s = r.random_range(2..5);
    let k = r.random_range(2..5);
    let one = |op, inputs| vec![PrimitiveCase { op, inputs, frozen: vec![] }];
    match name {
        "matmul" => {
            let (m, kk, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            one(OpKind::MatMul, vec![uniform(&mut r, &[m, kk], -1.0, 1.0), uniform(&mut r, &[kk, n], -1.0, 1.0)])
        }
        "add_same" | "mul_same" => {
            let op = if name == "add_same" { OpKind::Add(Bcast::Same) } else { OpKind::Mul(Bcast::Same) };
            one(op, vec![uniform(&mut r, &[b, c, s], -1.0, 1.0), uniform(&mut r, &[b, c, s], -1.0, 1.0)])
        }
        "add_channel" | "mul_channel" => {
            let op = if name == "add_channel" { OpKind::Add(Bcast::Channel) } else { OpKind::Mul(Bcast::Channel) };
            one(op, vec![uniform(&mut r, &[b, c, s, s], -1.0, 1.0), uniform(&mut r, &[c], -1.0, 1.0)])
        }
        "add_scalar" | "mul_scalar" => {
            let op = if name == "add_scalar" { OpKind::Add(Bcast::Scalar) } else { OpKind::Mul(Bcast::Scalar) };
            one(op, vec![uniform(&mut r, &[b, c], -1.0, 1.0), uniform(&mut r, &[1], -1.0, 1.0)])
        }
        "scale_shift" => {
            let (scale, shift) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
            one(OpKind::ScaleShift { scale, shift }, vec![uniform(&mut r, &[b, c], -1.0, 1.0)])
        }
        "relu" => one(OpKind::Relu, vec![away_from_zero(&mut r, &[b, c, s])]),
        "conv2d_3x3" => {
            let co = r.random_range(1..4);
            one(
                OpKind::Conv2d3x3,
                vec![uniform(&mut r, &[b, c, s, s], -1.0, 1.0), uniform(&mut r, &[co, c, 3, 3], -1.0, 1.0)],
            )
        }
        "mean_axis" | "var_axis" => {
            let all = [vec![0], vec![1], vec![0, 2, 3], vec![2, 3], vec![0, 1, 2, 3]];
            let axes = all[r.random_range(0..all.len())].clone();
            let op = if name == "mean_axis" { OpKind::MeanAxis(axes) } else { OpKind::VarAxis(axes) };
            one(op, vec![uniform(&mut r, &[b, c, s, s], -1.0, 1.0)])
        }
        "channel_normalize" => one(
            OpKind::ChannelNormalize { eps: 1e-5 },
            vec![
                uniform(&mut r, &[b, c, s, s], -1.0, 1.0),
                uniform(&mut r, &[c], -0.5, 0.5),
                uniform(&mut r, &[c], 0.5, 2.0),
            ],
        ),
        "softmax_ce" => {
            let labels = (0..b).map(|_| r.random_range(0..k)).collect();
            one(OpKind::SoftmaxCe(labels), vec![uniform(&mut r, &[b, k], -2.0, 2.0)])
        }
        "mse" => one(OpKind::Mse, vec![uniform(&mut r, &[b, k], -1.0, 1.0), uniform(&mut r, &[b, k], -1.0, 1.0)]),
        "l2_normalize" => one(OpKind::L2Normalize, vec![uniform(&mut r, &[b, k], -1.0, 1.0)]),
        "cosine_sim" => {
            one(OpKind::CosineSim, vec![uniform(&mut r, &[b, k], -1.0, 1.0), uniform(&mut r, &[b, k], -1.0, 1.0)])
        }
        "neg_entropy" => one(OpKind::NegEntropy, vec![uniform(&mut r, &[b, k], -2.0, 2.0)]),
        "rotate90k" => {
            let turns = r.random_range(0..4);
            vec![
                PrimitiveCase {
                    op: OpKind::Rotate90k(turns),
                    inputs: vec![uniform(&mut r, &[b, c, s, s], -1.0, 1.0)],
                    frozen: vec![],
                },
                PrimitiveCase {
                    op: OpKind::Rotate90k(turns),
                    inputs: vec![uniform(&mut r, &[b, 2], -1.0, 1.0)],
                    frozen: vec![],
                },
            ]
        }
        "concat_reshape_select" => {
            let axis = r.random_range(0..2);
            let (sa, sb) = if axis == 0 { ([b, c], [b + 1, c]) } else { ([b, c], [b, c + 1]) };
            let rows: Vec<usize> = (0..b + 2).map(|_| r.random_range(0..b)).collect();
            vec![
                PrimitiveCase {
                    op: OpKind::Concat(axis),
                    inputs: vec![uniform(&mut r, &sa, -1.0, 1.0), uniform(&mut r, &sb, -1.0, 1.0)],
                    frozen: vec![],
                },
                PrimitiveCase {
                    op: OpKind::Reshape(vec![c, b]),
                    inputs: vec![uniform(&mut r, &[b, c], -1.0, 1.0)],
                    frozen: vec![],
                },
                PrimitiveCase {
                    op: OpKind::SelectRows(rows),
                    inputs: vec![uniform(&mut r, &[b, c, s], -1.0, 1.0)],
                    frozen: vec![],
                },
            ]
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Output shape of a case, used to draw the projection weights.
pub fn output_shape(case: &PrimitiveCase) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.apply(case.op.clone(), &vars).unwrap();
    g.shape(out).to_vec()
}

/// Worst relative error of one primitive over `cases` seeded instances.
pub fn primitive_worst(name: &str, cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        for case in primitive_case(name, seed) {
            let mut r = rng(seed ^ 0xabcd);
            let w = uniform(&mut r, &output_shape(&case), -1.0, 1.0);
            worst = worst.max(primitive_grad_error(&case.op, &case.inputs, &w, &case.frozen));
        }
    }
    worst
}

/// Joint loss of `model` on a fixed batch, recomputed from scratch.
pub fn joint_value(model: &Model, x: &Tensor, y: &[usize], ssl: &mabn::ssl::SslTaskConfig, seed: u64) -> f64 {
    let mut s = mabn::nn::Session::new(model, Scope::AllParams).unwrap();
    let t = mabn::data::Targets::Classes(y.to_vec());
    let l = mabn::ssl::joint_forward(model, &mut s, x, &t, ssl, 0.1, &mut rng(seed)).unwrap();
    s.scalar(l.joint)
}

/// Worst relative error of the composed joint loss gradient on a 3-block
/// conv net in Train mode, for one seeded case. Odd seeds use the BYOL head.
pub fn joint_case_error(seed: u64) -> f64 {
    use mabn::ssl::{SslKind, SslTaskConfig};
    let byol = seed % 2 == 1;
    let cfg = if byol { conv3_byol_config() } else { conv3_config() };
    let mut model = Model::new(cfg, seed).unwrap();
    jitter_params(&mut model, seed);
    let ssl =
        SslTaskConfig { kind: if byol { SslKind::ByolLite } else { SslKind::Rotation4 }, ..SslTaskConfig::default() };
    let mut r = rng(seed.wrapping_add(17));
    let n = 3;
    let x = uniform(&mut r, &[n, 2, 4, 4], -1.0, 1.0);
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    model.set_freeze_theta(false);
    let mut s = mabn::nn::Session::new(&model, Scope::AllParams).unwrap();
    let t = mabn::data::Targets::Classes(y.clone());
    let l = mabn::ssl::joint_forward(&model, &mut s, &x, &t, &ssl, 0.1, &mut rng(seed)).unwrap();
    let grads = s.backward(l.joint).unwrap();
    model_grad_error(&model, Scope::AllParams, &grads, &|m| joint_value(m, &x, &y, &ssl, seed))
}

/// Adds small noise to every weight and affine parameter so no bias sits
/// exactly at its zero initialization.
pub fn jitter_params(model: &mut Model, seed: u64) {
    let mut r = rng(seed ^ 0x5eed);
    model.set_freeze_theta(false);
    let keys = model.collect_params(Scope::AllParams).keys;
    for p in model.params_mut(&keys).unwrap() {
        p.iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
}

/// Per-channel population mean and variance of a `[batch, channels, ...]` buffer.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let (b, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> =
            (0..b).flat_map(|i| x.data()[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        mean[ch] = m;
        var[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    (mean, var)
}

/// Train-mode output of a single BN layer, with its batch statistics.
pub fn bn_train_output(state: &mabn::nn::BnState, x: &Tensor) -> (Tensor, mabn::nn::BatchStats) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let aff = state.bind_affine(&mut g, false);
    let out = state.forward(&mut g, xv, aff, mabn::nn::BnMode::Train).unwrap();
    (g.value(out.out).clone(), out.batch_stats.unwrap())
}

/// Worst deviation of Train-mode output moments from `(beta, gamma^2 s^2 / (s^2 + eps))`.
pub fn bn_moment_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..5);
    let mut state = mabn::nn::BnState::new(c, 0.9, 1e-5, mabn::nn::Branch::Backbone);
    state.gamma = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
    state.beta = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
    let scale = r.random_range(0.01..3.0);
    let b = r.random_range(2..6);
    let x = uniform(&mut r, &[b, c, 3, 3], -scale, scale);
    let (_, in_var) = channel_moments(&x);
    let (out, _) = bn_train_output(&state, &x);
    let (m, v) = channel_moments(&out);
    (0..c)
        .map(|ch| {
            let want = state.gamma[ch].powi(2) * in_var[ch] / (in_var[ch] + state.eps);
            (m[ch] - state.beta[ch]).abs().max((v[ch] - want).abs())
        })
        .fold(0.0, f64::max)
}

/// Feeds `batches` Train-mode batches of 32 samples of `N(mean, sd^2)` 4x4
/// feature maps through one layer and returns `(running_mean, running_var,
/// standard error of the running mean)`.
pub fn bn_running_convergence(seed: u64, batches: usize, mean: f64, sd: f64) -> (f64, f64, f64) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let dist = Normal::new(mean, sd).unwrap();
    let mut state = mabn::nn::BnState::new(1, 0.9, 1e-5, mabn::nn::Branch::Backbone);
    let (batch, spatial) = (32, 16);
    for _ in 0..batches {
        let x =
            Tensor::new(&[batch, 1, 4, 4], (0..batch * spatial).map(|_| dist.sample(&mut r)).collect(), false).unwrap();
        let (_, stats) = bn_train_output(&state, &x);
        state.update_running(&stats.mean, &stats.var).unwrap();
    }
    let m = state.retention;
    let se = sd * ((1.0 - m) / ((1.0 + m) * (batch * spatial) as f64)).sqrt();
    (state.running_mean[0], state.running_var[0], se)
}

/// A run configuration from the workspace `configs/` directory.
pub fn workspace_config(name: &str) -> mabn::config::RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    mabn::config::RunConfig::load(&path).unwrap()
}
