//! End-to-end pipeline per seed (joint training, meta training) and the
//! ablation harness that evaluates arms on the target domains.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_all, derangement, predict_labels, refine_predictions, DomainSnapshot, RefineConfig};
use crate::config::RunConfig;
use crate::data::{DomainSet, Split};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::nn::{BnMode, Model, Scope};
use crate::training::{derive_seed, meta_train, train_joint, InnerConfig, JointReport, MetaReport};

/// Which training phase's model an arm evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Joint,
    Meta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Each domain uses its own adapted parameters.
    Matched,
    /// Each domain uses another domain's adapted parameters.
    NotMatched,
    /// Parameters as trained.
    NoAdapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostRefine {
    None,
    EntropyMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default = "default_true")]
    pub adapt: bool,
    #[serde(default = "default_assignment")]
    pub assignment: Assignment,
    #[serde(default = "default_refine")]
    pub post_refine: PostRefine,
    /// Parameters updated by entropy refinement.
    #[serde(default = "default_scope")]
    pub refine_scope: Scope,
    /// Overrides the evaluation support size.
    #[serde(default)]
    pub support_size: Option<usize>,
}

fn default_stage() -> Stage {
    Stage::Meta
}
fn default_scope() -> Scope {
    Scope::AffineOnly
}
fn default_true() -> bool {
    true
}
fn default_assignment() -> Assignment {
    Assignment::Matched
}
fn default_refine() -> PostRefine {
    PostRefine::None
}

impl Arm {
    pub fn new(name: &str, stage: Stage, scope: Scope, assignment: Assignment) -> Self {
        Self {
            name: name.to_string(),
            stage,
            scope,
            adapt: assignment != Assignment::NoAdapt,
            assignment,
            post_refine: PostRefine::None,
            refine_scope: Scope::AffineOnly,
            support_size: None,
        }
    }

    pub fn with_refine(mut self, scope: Scope) -> Self {
        self.post_refine = PostRefine::EntropyMin;
        self.refine_scope = scope;
        self
    }

    pub fn with_support(mut self, n: usize) -> Self {
        self.support_size = Some(n);
        self
    }

    fn adapts(&self) -> bool {
        self.adapt && self.assignment != Assignment::NoAdapt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub arms: Vec<Arm>,
    /// Seeds for the ablation; empty means the run's seeds.
    pub seeds: Vec<u64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            arms: vec![
                Arm::new("NoAdapt", Stage::Meta, Scope::AffineOnly, Assignment::NoAdapt),
                Arm::new("NotMatched", Stage::Meta, Scope::AffineOnly, Assignment::NotMatched),
                Arm::new("Matched", Stage::Meta, Scope::AffineOnly, Assignment::Matched),
            ],
            seeds: Vec::new(),
        }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for a in &self.arms {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("ablation: duplicate arm name {:?}", a.name)));
            }
            if a.refine_scope.trains_theta() {
                return Err(Error::Config(format!("ablation: arm {:?} refines weights", a.name)));
            }
            if a.support_size == Some(0) {
                return Err(Error::Config(format!("ablation: arm {:?} has support_size 0", a.name)));
            }
        }
        Ok(())
    }

    pub fn needs_joint_stage(&self) -> bool {
        self.arms.iter().any(|a| a.stage == Stage::Joint)
    }
}

/// Models produced by one seed of the training pipeline.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub joint: Model,
    pub meta: Model,
    pub joint_report: JointReport,
    pub meta_report: MetaReport,
}

impl TrainedModels {
    pub fn stage(&self, stage: Stage) -> &Model {
        match stage {
            Stage::Joint => &self.joint,
            Stage::Meta => &self.meta,
        }
    }
}

pub fn init_model(cfg: &RunConfig, set: &DomainSet, seed: u64) -> Result<Model> {
    Model::new(cfg.model_config(set.generator)?, derive_seed(seed, &[0x1417]))
}

/// Joint training followed by meta training, both seeded from `seed`.
pub fn train_pipeline(cfg: &RunConfig, set: &DomainSet, seed: u64) -> Result<TrainedModels> {
    let mut model = init_model(cfg, set, seed)?;
    let joint_report = train_joint(&mut model, &set.sources, &cfg.ssl, &cfg.meta, &cfg.joint, derive_seed(seed, &[1]))?;
    let joint = model.clone();
    let meta_report =
        meta_train(&mut model, &set.sources, &cfg.meta, &cfg.ssl, cfg.meta_epochs, derive_seed(seed, &[2]))?;
    Ok(TrainedModels { joint, meta: model, joint_report, meta_report })
}

/// One metrics row per (arm, domain, seed).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmRow {
    pub arm: String,
    pub domain_id: u32,
    pub seed: u64,
    pub n: usize,
    pub acc: f64,
    pub macro_f1: f64,
    pub wc_acc: f64,
    pub pearson_r: Option<f64>,
}

pub const ROW_HEADER: &str = "arm,domain_id,seed,n,acc,macro_f1,wc_acc,pearson_r";

/// Pooled metrics of one arm for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Source of the model evaluated by each arm.
pub enum ModelSource<'a> {
    Trained(&'a TrainedModels),
    /// A single checkpoint serves every stage.
    Fixed(&'a Model),
}

impl ModelSource<'_> {
    fn get(&self, stage: Stage) -> &Model {
        match self {
            ModelSource::Trained(t) => t.stage(stage),
            ModelSource::Fixed(m) => m,
        }
    }
}

/// Evaluates every arm on the target test splits.
pub fn run_arms(
    cfg: &RunConfig,
    set: &DomainSet,
    models: &ModelSource<'_>,
    arms: &[Arm],
    seed: u64,
) -> Result<Vec<ArmResult>> {
    if set.targets.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut cache: HashMap<(Stage, Scope, usize), Vec<CachedAdaptation>> = HashMap::new();
    let mut out = Vec::with_capacity(arms.len());
    let classes = set.num_classes;
    for arm in arms {
        let base = {
            let mut m = models.get(arm.stage).clone();
            if arm.scope.trains_theta() {
                m.set_freeze_theta(false);
            }
            m
        };
        let snaps = if arm.adapts() {
            let support = arm.support_size.unwrap_or(cfg.eval.support_size);
            let key = (arm.stage, arm.scope, support);
            if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(key) {
                let inner = InnerConfig { scope: arm.scope, ..InnerConfig::from(&cfg.meta) };
                let eval = crate::adapt::EvalConfig { support_size: support, ..cfg.eval.clone() };
                let s = if arm.scope.trains_theta() {
                    adapt_full(&base, set, &inner, cfg, &eval, seed)?
                } else {
                    adapt_all(&base, &set.targets, &inner, &cfg.ssl, &eval, seed)?
                        .into_iter()
                        .map(|snapshot| CachedAdaptation { snapshot, full: None })
                        .collect()
                };
                slot.insert(s);
            }
            Some(&cache[&key])
        } else {
            None
        };
        let assignment = match arm.assignment {
            Assignment::NotMatched => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xde]));
                derangement(set.targets.len(), &mut rng)?
            }
            _ => (0..set.targets.len()).collect(),
        };
        let refine = RefineConfig {
            scope: arm.refine_scope,
            lr: cfg.eval.refine_lr.unwrap_or(cfg.meta.delta),
            steps: cfg.eval.refine_steps,
            retention: cfg.meta.fullbn_retention,
        };
        let parts = set
            .targets
            .par_iter()
            .enumerate()
            .map(|(j, d)| -> Result<(u32, Vec<usize>, Vec<usize>)> {
                let model = match snaps {
                    Some(s) => match &s[assignment[j]].full {
                        Some(m) => m.clone(),
                        None => s[assignment[j]].snapshot.apply(&base)?,
                    },
                    None => {
                        let mut m = base.clone();
                        m.set_mode(BnMode::Eval);
                        m
                    }
                };
                let (x, y) = d.split(Split::Test);
                if y.is_empty() {
                    return Err(Error::EmptyTestSet);
                }
                let preds = match arm.post_refine {
                    PostRefine::None => predict_labels(&model, &x, cfg.eval.eval_batch)?,
                    PostRefine::EntropyMin => refine_predictions(&model, &x, &refine, cfg.eval.refine_batch)?,
                };
                Ok((d.id, preds, y))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ArmResult { arm: arm.name.clone(), seed, metrics: Metrics::from_domains(&parts, classes) });
    }
    Ok(out)
}

/// Adapted state kept by the harness: a parameter snapshot, or the full
/// model when weights were adapted too.
pub struct CachedAdaptation {
    pub snapshot: DomainSnapshot,
    pub full: Option<Model>,
}

fn adapt_full(
    base: &Model,
    set: &DomainSet,
    inner: &InnerConfig,
    cfg: &RunConfig,
    eval: &crate::adapt::EvalConfig,
    seed: u64,
) -> Result<Vec<CachedAdaptation>> {
    set.targets
        .par_iter()
        .map(|d| {
            let support = crate::adapt::draw_support(d, eval, seed)?;
            let m = crate::adapt::adapt_domain(base, &support, inner, &cfg.ssl, derive_seed(seed, &[d.id as u64, 11]))?;
            Ok(CachedAdaptation { snapshot: DomainSnapshot::capture(d.id, &m, inner.scope), full: Some(m) })
        })
        .collect()
}

/// Flattens per-seed arm results into one row per (arm, domain, seed).
pub fn rows(results: &[ArmResult]) -> Vec<ArmRow> {
    results
        .iter()
        .flat_map(|r| {
            r.metrics.per_domain.iter().map(move |d| ArmRow {
                arm: r.arm.clone(),
                domain_id: d.domain_id,
                seed: r.seed,
                n: d.n,
                acc: d.accuracy,
                macro_f1: d.macro_f1,
                wc_acc: d.accuracy,
                pearson_r: r.metrics.pearson_r,
            })
        })
        .collect()
}

pub fn write_rows_csv(rows: &[ArmRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ROW_HEADER}")?;
    for r in rows {
        let p = r.pearson_r.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{},{},{}", r.arm, r.domain_id, r.seed, r.n, r.acc, r.macro_f1, r.wc_acc, p)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub wc_acc_mean: f64,
    pub wc_acc_std: f64,
}

/// Per-arm mean and standard deviation across seeds, in first-seen arm order.
pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let mine: Vec<&ArmResult> = results.iter().filter(|r| r.arm == name).collect();
            let col = |f: &dyn Fn(&Metrics) -> f64| mean_std(&mine.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            let (acc_mean, acc_std) = col(&|m| m.accuracy);
            let (macro_f1_mean, macro_f1_std) = col(&|m| m.macro_f1);
            let (wc_acc_mean, wc_acc_std) = col(&|m| m.worst_case_accuracy);
            ArmSummary {
                arm: name.to_string(),
                seeds: mine.len(),
                acc_mean,
                acc_std,
                macro_f1_mean,
                macro_f1_std,
                wc_acc_mean,
                wc_acc_std,
            }
        })
        .collect()
}

pub fn summary_json(summary: &[ArmSummary]) -> String {
    let map: serde_json::Map<String, serde_json::Value> =
        summary.iter().map(|s| (s.arm.clone(), serde_json::to_value(s).expect("summary serializes"))).collect();
    serde_json::to_string_pretty(&map).expect("summary serializes")
}

pub fn summary_table(summary: &[ArmSummary]) -> String {
    let mut s = String::from("arm,seeds,acc_mean,acc_std,macro_f1_mean,macro_f1_std,wc_acc_mean,wc_acc_std\n");
    for a in summary {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            a.arm, a.seeds, a.acc_mean, a.acc_std, a.macro_f1_mean, a.macro_f1_std, a.wc_acc_mean, a.wc_acc_std
        ));
    }
    s
}
