//! Synthetic multi-domain benchmarks with a shared label space and
//! controllable per-domain shift, support/query sampling, and the `MABD`
//! dataset file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MABD";
pub const FORMAT_VERSION: u32 = 1;
/// Number of distinct shape classes ShiftedShapes can render.
pub const MAX_SHAPE_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Isotropic Gaussian classes placed on a circle in the plane.
    GaussianBlobs2d,
    /// `channels x size x size` renderings of parametric shapes.
    ShiftedShapes { channels: usize, size: usize },
}

impl GeneratorKind {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            GeneratorKind::GaussianBlobs2d => vec![2],
            GeneratorKind::ShiftedShapes { channels, size } => vec![channels, size, size],
        }
    }

    /// Channels receiving their own gain and bias.
    pub fn shift_channels(&self) -> usize {
        match *self {
            GeneratorKind::GaussianBlobs2d => 2,
            GeneratorKind::ShiftedShapes { channels, .. } => channels,
        }
    }

    fn code(&self) -> u8 {
        match self {
            GeneratorKind::GaussianBlobs2d => 0,
            GeneratorKind::ShiftedShapes { .. } => 1,
        }
    }
}

/// Where target-domain shifts are drawn relative to the source range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPlacement {
    /// Outside the source range on every shift axis.
    Extrapolate,
    /// Inside the source range.
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Source rotations span `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Source global log-gains (contrast) lie in `[-log_gain, log_gain]`.
    pub log_gain: f64,
    /// Source global biases (brightness) lie in `[-bias, bias]`.
    pub bias: f64,
    /// Per-channel tint: each channel's log-gain and bias deviate from the
    /// global values by at most `tint`.
    pub tint: f64,
    /// Source background intensities lie in `[-background, background]`.
    pub background: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    /// Extrapolated targets reach `extrapolation` times the source bound.
    pub extrapolation: f64,
    pub placement: TargetPlacement,
    /// When false every domain gets the identity shift and `noise_min`.
    pub enabled: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            log_gain: 0.4,
            bias: 0.5,
            tint: 0.1,
            background: 0.3,
            noise_min: 0.05,
            noise_max: 0.15,
            extrapolation: 1.6,
            placement: TargetPlacement::Extrapolate,
            enabled: true,
        }
    }
}

/// Per-sample nuisance applied before the domain shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceConfig {
    /// Per-sample contrast is uniform in `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    /// Standard deviation of a per-sample additive offset.
    pub offset: f64,
    /// Maximum shape translation in unit coordinates.
    pub jitter: f64,
    /// Maximum per-sample rotation in degrees.
    pub spin_deg: f64,
    /// Within-class spread of GaussianBlobs2d.
    pub blob_std: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self { contrast: 0.3, offset: 0.2, jitter: 0.15, spin_deg: 10.0, blob_std: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub generator: GeneratorKind,
    pub num_classes: usize,
    pub samples_per_domain: usize,
    /// Fraction of each domain assigned to its train split.
    pub train_fraction: f64,
    pub shift: ShiftConfig,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::ShiftedShapes { channels: 3, size: 8 },
            num_classes: 4,
            samples_per_domain: 200,
            train_fraction: 0.5,
            shift: ShiftConfig::default(),
            nuisance: NuisanceConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftParams {
    pub rotation_deg: f64,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_std: f64,
    pub background: f64,
}

impl ShiftParams {
    pub fn identity(channels: usize, noise_std: f64) -> Self {
        Self { rotation_deg: 0.0, gain: vec![1.0; channels], bias: vec![0.0; channels], noise_std, background: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: u32,
    pub shift: ShiftParams,
    /// `[n, sample_shape...]`
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Samples `0..train_count` form the train split, the rest the test split.
    pub train_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_count,
            Split::Test => self.train_count..self.len(),
            Split::All => 0..self.len(),
        }
    }

    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor> {
        self.x.select_rows(idx)
    }

    pub fn split(&self, split: Split) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = self.indices(split).collect();
        let x = self.x.select_rows(&idx).expect("split indices are in range");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub generator: GeneratorKind,
    pub num_classes: usize,
    pub sources: Vec<Domain>,
    pub targets: Vec<Domain>,
    /// Set when a loaded file had no target domains.
    pub empty_targets_warning: bool,
}

impl DomainSet {
    pub fn sample_shape(&self) -> Vec<usize> {
        self.generator.sample_shape()
    }

    pub fn domain(&self, id: u32) -> Option<&Domain> {
        self.sources.iter().chain(&self.targets).find(|d| d.id == id)
    }
}

/// Supervision for the main branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One episode: an unlabeled support set and a disjoint labeled query set
/// drawn from the same domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTask {
    pub domain_id: u32,
    pub support: Tensor,
    pub support_idx: Vec<usize>,
    pub query: Tensor,
    pub query_targets: Targets,
    pub query_idx: Vec<usize>,
}

/// Builds `m` source and `n` target domains. Source ids are `0..m`,
/// target ids `m..m + n`.
pub fn gen_domains(spec: &DomainSpec, m: usize, n: usize) -> Result<DomainSet> {
    validate(spec, m, n)?;
    let channels = spec.generator.shift_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shifts = shift_schedule(&spec.shift, channels, m, n, &mut rng);
    let mut domains = Vec::with_capacity(m + n);
    for (id, shift) in shifts.into_iter().enumerate() {
        let mut drng = ChaCha8Rng::seed_from_u64(spec.seed);
        drng.set_stream(id as u64 + 1);
        domains.push(render_domain(spec, id as u32, shift, &mut drng));
    }
    let targets = domains.split_off(m);
    Ok(DomainSet {
        generator: spec.generator,
        num_classes: spec.num_classes,
        sources: domains,
        targets,
        empty_targets_warning: false,
    })
}

fn validate(spec: &DomainSpec, m: usize, n: usize) -> Result<()> {
    let bad = |s: &str| Err(Error::InvalidSpec(s.to_string()));
    if m < 2 {
        return bad("at least 2 source domains are required");
    }
    if n < 1 {
        return bad("at least 1 target domain is required");
    }
    if spec.num_classes < 2 {
        return bad("num_classes must be at least 2");
    }
    if let GeneratorKind::ShiftedShapes { channels, size } = spec.generator {
        if spec.num_classes > MAX_SHAPE_CLASSES {
            return bad("ShiftedShapes renders at most 6 classes");
        }
        if channels == 0 || size < 4 {
            return bad("ShiftedShapes needs channels >= 1 and size >= 4");
        }
    }
    if spec.samples_per_domain < spec.num_classes {
        return bad("samples_per_domain must cover every class");
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return bad("train_fraction must lie in (0, 1)");
    }
    let s = &spec.shift;
    let finite = [s.rotation_deg, s.log_gain, s.bias, s.tint, s.background, s.noise_min, s.noise_max, s.extrapolation];
    if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || s.noise_min > s.noise_max || s.extrapolation < 1.0 {
        return bad("shift bounds must be finite, non-negative, noise_min <= noise_max, extrapolation >= 1");
    }
    Ok(())
}

fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo + (hi - lo) * t
}

/// A value in `[-bound, bound]` for sources, or beyond the bound for
/// extrapolated targets (sign chosen at random).
fn draw(rng: &mut ChaCha8Rng, bound: f64, target: bool, cfg: &ShiftConfig) -> f64 {
    if !target || cfg.placement == TargetPlacement::Interpolate {
        return rng.random_range(-1.0..=1.0) * bound;
    }
    let mag = lerp(bound, bound * cfg.extrapolation, rng.random::<f64>());
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn channel_shift(rng: &mut ChaCha8Rng, cfg: &ShiftConfig, channels: usize, target: bool) -> (Vec<f64>, Vec<f64>) {
    let lg = draw(rng, cfg.log_gain, target, cfg);
    let b = draw(rng, cfg.bias, target, cfg);
    let gain = (0..channels).map(|_| (lg + cfg.tint * rng.random_range(-1.0..=1.0)).exp()).collect();
    let bias = (0..channels).map(|_| b + cfg.tint * rng.random_range(-1.0..=1.0)).collect();
    (gain, bias)
}

fn shift_schedule(cfg: &ShiftConfig, channels: usize, m: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<ShiftParams> {
    if !cfg.enabled {
        return (0..m + n).map(|_| ShiftParams::identity(channels, cfg.noise_min)).collect();
    }
    let mut out = Vec::with_capacity(m + n);
    for i in 0..m {
        let t = i as f64 / (m - 1) as f64;
        let (gain, bias) = channel_shift(rng, cfg, channels, false);
        out.push(ShiftParams {
            rotation_deg: lerp(-cfg.rotation_deg, cfg.rotation_deg, t),
            gain,
            bias,
            noise_std: lerp(cfg.noise_min, cfg.noise_max, rng.random::<f64>()),
            background: draw(rng, cfg.background, false, cfg),
        });
    }
    for j in 0..n {
        let rotation_deg = match cfg.placement {
            TargetPlacement::Extrapolate => {
                let side = if j % 2 == 0 { 1.0 } else { -1.0 };
                side * lerp(cfg.rotation_deg, cfg.rotation_deg * cfg.extrapolation, rng.random::<f64>())
            }
            TargetPlacement::Interpolate => rng.random_range(-1.0..=1.0) * cfg.rotation_deg,
        };
        let noise_std = match cfg.placement {
            TargetPlacement::Extrapolate => lerp(cfg.noise_max, cfg.noise_max * cfg.extrapolation, rng.random::<f64>()),
            TargetPlacement::Interpolate => lerp(cfg.noise_min, cfg.noise_max, rng.random::<f64>()),
        };
        let (gain, bias) = channel_shift(rng, cfg, channels, true);
        out.push(ShiftParams { rotation_deg, gain, bias, noise_std, background: draw(rng, cfg.background, true, cfg) });
    }
    out
}

/// Indicator of shape class `k` at unit coordinates `(a, b)`, `b` pointing up.
fn shape_mask(k: usize, a: f64, b: f64) -> bool {
    match k {
        // T
        0 => ((b - 0.45).abs() < 0.18 && a.abs() < 0.65) || (a.abs() < 0.18 && b < 0.45 && b > -0.65),
        // L
        1 => ((a + 0.45).abs() < 0.18 && b.abs() < 0.65) || ((b + 0.47).abs() < 0.18 && a > -0.63 && a < 0.6),
        // triangle
        2 => b > -0.5 && b < 0.65 && a.abs() < (0.65 - b) * 0.55,
        // square outline
        3 => a.abs() < 0.62 && b.abs() < 0.62 && !(a.abs() < 0.3 && b.abs() < 0.3),
        // cross
        4 => (a.abs() < 0.18 && b.abs() < 0.65) || (b.abs() < 0.18 && a.abs() < 0.65),
        // disk
        _ => a * a + b * b < 0.3,
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn render_domain(spec: &DomainSpec, id: u32, shift: ShiftParams, rng: &mut ChaCha8Rng) -> Domain {
    let n = spec.samples_per_domain;
    let labels = balanced_labels(n, spec.num_classes, rng);
    let noise = Normal::new(0.0, shift.noise_std.max(0.0)).expect("finite std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let nz = &spec.nuisance;
    let mut data = Vec::new();
    match spec.generator {
        GeneratorKind::GaussianBlobs2d => {
            let rot = shift.rotation_deg.to_radians();
            let (sr, cr) = rot.sin_cos();
            for &y in &labels {
                let phi = std::f64::consts::TAU * y as f64 / spec.num_classes as f64;
                let p = [
                    2.0 * phi.cos() + nz.blob_std * unit.sample(rng),
                    2.0 * phi.sin() + nz.blob_std * unit.sample(rng),
                ];
                let r = [cr * p[0] - sr * p[1], sr * p[0] + cr * p[1]];
                for (c, &rc) in r.iter().enumerate() {
                    data.push(shift.gain[c] * rc + shift.bias[c] + noise.sample(rng));
                }
            }
        }
        GeneratorKind::ShiftedShapes { channels, size } => {
            let s = size as f64;
            for &y in &labels {
                let contrast = 1.0 + nz.contrast * rng.random_range(-1.0..=1.0);
                let offset = nz.offset * unit.sample(rng);
                let (tx, ty) = (nz.jitter * rng.random_range(-1.0..=1.0), nz.jitter * rng.random_range(-1.0..=1.0));
                let angle = (shift.rotation_deg + nz.spin_deg * rng.random_range(-1.0..=1.0)).to_radians();
                let (sa, ca) = angle.sin_cos();
                let mut plane = vec![0.0; size * size];
                for (r, row) in plane.chunks_mut(size).enumerate() {
                    for (c, px) in row.iter_mut().enumerate() {
                        // 2x2 supersampling for anti-aliased edges
                        let mut cover = 0.0;
                        for (du, dv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                            let u = 2.0 * (c as f64 + du) / s - 1.0 - tx;
                            let v = 1.0 - 2.0 * (r as f64 + dv) / s - ty;
                            let (a, b) = (ca * u + sa * v, -sa * u + ca * v);
                            if shape_mask(y, a, b) {
                                cover += 0.25;
                            }
                        }
                        *px = shift.background + contrast * cover + offset;
                    }
                }
                for ch in 0..channels {
                    for &v in &plane {
                        data.push(shift.gain[ch] * v + shift.bias[ch] + noise.sample(rng));
                    }
                }
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(spec.generator.sample_shape());
    let train_count = ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    Domain { id, shift, x: Tensor::from_parts(shape, data), labels, train_count }
}

/// Draws disjoint support and query index sets from `split` of `domain`.
pub fn sample_support_query(
    domain: &Domain,
    split: Split,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<DomainTask> {
    let mut pool: Vec<usize> = domain.indices(split).collect();
    let need = support_size + query_size;
    if pool.len() < need {
        return Err(Error::InsufficientSamples { domain: domain.id, available: pool.len(), requested: need });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.id as u64);
    pool.shuffle(&mut rng);
    let support_idx = pool[..support_size].to_vec();
    let query_idx = pool[support_size..need].to_vec();
    Ok(DomainTask {
        domain_id: domain.id,
        support: domain.x.select_rows(&support_idx)?,
        query: domain.x.select_rows(&query_idx)?,
        query_targets: Targets::Classes(query_idx.iter().map(|&i| domain.labels[i]).collect()),
        support_idx,
        query_idx,
    })
}

/// Mean absolute difference of the per-feature means of two domains.
pub fn domain_discrepancy(a: &Domain, b: &Domain) -> f64 {
    let mean = |d: &Domain| {
        let n = d.len().max(1);
        let f = d.x.numel() / n;
        let mut m = vec![0.0; f];
        for row in d.x.data().chunks(f) {
            m.iter_mut().zip(row).for_each(|(acc, v)| *acc += v / n as f64);
        }
        m
    };
    let (ma, mb) = (mean(a), mean(b));
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len().max(1) as f64
}

pub fn encode(set: &DomainSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, set.sources.len() as u32);
    put_u32(&mut out, set.targets.len() as u32);
    put_u32(&mut out, set.num_classes as u32);
    out.push(set.generator.code());
    let shape = set.sample_shape();
    put_u32(&mut out, shape.len() as u32);
    shape.iter().for_each(|&d| put_u64(&mut out, d as u64));
    for d in set.sources.iter().chain(&set.targets) {
        put_u32(&mut out, d.id);
        put_f64(&mut out, d.shift.rotation_deg);
        put_u32(&mut out, d.shift.gain.len() as u32);
        d.shift.gain.iter().chain(&d.shift.bias).for_each(|&v| put_f64(&mut out, v));
        put_f64(&mut out, d.shift.noise_std);
        put_f64(&mut out, d.shift.background);
        put_u64(&mut out, d.len() as u64);
        put_u64(&mut out, d.train_count as u64);
        d.labels.iter().for_each(|&l| out.extend_from_slice(&(l as i32).to_le_bytes()));
        d.x.data().iter().for_each(|&v| put_f64(&mut out, v));
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode(bytes: &[u8]) -> Result<DomainSet> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptFile(format!("unsupported format version {version}")));
    }
    let (m, n, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let code = r.u8()?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let generator = match (code, shape.as_slice()) {
        (0, [2]) => GeneratorKind::GaussianBlobs2d,
        (1, &[c, h, w]) if h == w => GeneratorKind::ShiftedShapes { channels: c, size: h },
        _ => return Err(Error::CorruptFile(format!("generator {code} with sample shape {shape:?}"))),
    };
    let per_sample: usize = shape.iter().product();
    let mut domains = Vec::with_capacity((m + n).min(4096));
    for _ in 0..m + n {
        let id = r.u32()?;
        let rotation_deg = r.f64()?;
        let ch = r.u32()? as usize;
        let gain = r.f64s(ch)?;
        let bias = r.f64s(ch)?;
        let (noise_std, background) = (r.f64()?, r.f64()?);
        let count = r.u64()? as usize;
        let train_count = r.u64()? as usize;
        if train_count > count {
            return Err(Error::CorruptFile(format!("domain {id}: train split larger than domain")));
        }
        let labels = (0..count)
            .map(|_| {
                let l = i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                usize::try_from(l).ok().filter(|&l| l < classes).ok_or_else(|| Error::CorruptFile(format!("label {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let numel = count.checked_mul(per_sample).ok_or_else(|| Error::CorruptFile("size overflow".into()))?;
        let data = r.f64s(numel)?;
        let mut xshape = vec![count];
        xshape.extend(&shape);
        domains.push(Domain {
            id,
            shift: ShiftParams { rotation_deg, gain, bias, noise_std, background },
            x: Tensor::new(&xshape, data, false)
                .map_err(|_| Error::CorruptFile(format!("domain {id}: non-finite data")))?,
            labels,
            train_count,
        });
    }
    if r.pos != body.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let targets = domains.split_off(m);
    Ok(DomainSet {
        generator,
        num_classes: classes,
        sources: domains,
        empty_targets_warning: targets.is_empty(),
        targets,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_dataset(set: &DomainSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(set))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainSet> {
    decode(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::TruncatedFile(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
