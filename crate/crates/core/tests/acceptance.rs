//! Acceptance criteria 1 to 10. Each prints one PASS/FAIL line to the real
//! stdout, bypassing test capture. Criteria 1 to 4, 9 and 10 are exact
//! properties and fail the test; 5 to 8 are directional results of a
//! training run and are reported without failing it.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use mabn::adapt::adapt_domain;
use mabn::data::{self, gen_domains, DomainSet, Split};
use mabn::experiment::{rows, run_arms, train_pipeline, write_rows_csv, ArmResult, ModelSource};
use mabn::metrics::{macro_f1, pearson};
use mabn::nn::{checkpoint, BnMode, Model, Scope, Session};
use mabn::training::bilevel::{exact_grad_fd, first_order_grad, inner_sgd};
use mabn::training::{derive_seed, InnerConfig};
use rand::Rng;

const GRAD_CASES: u64 = 100;
const BN_MOMENT_TOL: f64 = 1e-8;
const TOY_TOL: f64 = 1e-6;
const TOY_MAX_STEPS: usize = 1000;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_SETS: u64 = 1000;
/// Accuracy gaps in percentage points.
const MATCHED_OVER_NOADAPT: f64 = 2.0;
const NOADAPT_OVER_NOTMATCHED: f64 = 1.0;
const AFFINE_OVER_FULLBN: f64 = 1.0;
const ADAPTED_OVER_UNADAPTED: f64 = 1.0;
const ENTROPY_MIN_SEEDS: usize = 3;
const SUPPORT_NOISE: f64 = 0.5;
const PIPELINE_BUDGET: Duration = Duration::from_secs(600);

struct Report {
    hard_failures: Vec<u32>,
}

impl Report {
    fn line(&mut self, n: u32, hard: bool, pass: bool, started: Instant, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let kind = if hard { "" } else { " (reported)" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {n:>2} {verdict}{kind} [{:.1}s] {detail}", started.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
        if hard && !pass {
            self.hard_failures.push(n);
        }
    }
}

fn gradient_fidelity(report: &mut Report) {
    let t = Instant::now();
    let worst_primitive = PRIMITIVES.iter().map(|n| primitive_worst(n, GRAD_CASES)).fold(0.0, f64::max);
    let worst_joint = (0..GRAD_CASES).map(joint_case_error).fold(0.0, f64::max);
    let fast = t.elapsed() < Duration::from_secs(60);
    let pass = worst_primitive <= GRAD_REL_TOL && worst_joint <= GRAD_REL_TOL && fast;
    let detail = format!(
        "gradient fidelity: primitives {worst_primitive:.1e}, composed {worst_joint:.1e} (tol {GRAD_REL_TOL:.0e})"
    );
    report.line(1, true, pass, t, detail);
}

fn bn_semantics(report: &mut Report) {
    let t = Instant::now();
    let moments = (0..100).map(bn_moment_error).fold(0.0, f64::max);
    let runs: Vec<_> = (0..40).map(|s| bn_running_convergence(s, 600, 1.5, 0.7)).collect();
    let inside = runs.iter().filter(|(m, _, se)| (m - 1.5).abs() < 3.0 * se).count();
    let var_ok = runs.iter().all(|(_, v, _)| (v / 0.49 - 1.0).abs() < 0.10);
    let mut untouched = true;
    for seed in 0..10 {
        let mut model = Model::new(conv3_config(), seed).unwrap();
        let x = uniform(&mut rng(seed), &[4, 2, 4, 4], -1.0, 1.0);
        for mode in [BnMode::Frozen, BnMode::Eval] {
            model.set_mode(mode);
            let before = model.stats_hash();
            let mut s = Session::new(&model, Scope::AffineOnly).unwrap();
            let xv = s.input(&x);
            let f = model.features(&mut s, xv).unwrap();
            let logits = model.classify(&mut s, f).unwrap();
            let loss = s.graph.mean_axis(logits, &[0, 1]).unwrap();
            s.backward(loss).unwrap();
            model.commit_stats(&mut s).unwrap();
            model.predict(&x).unwrap();
            untouched &= model.stats_hash() == before;
        }
    }
    let pass = moments < BN_MOMENT_TOL && inside >= 38 && var_ok && untouched && t.elapsed() < Duration::from_secs(60);
    let detail = format!(
        "BN semantics: moments {moments:.1e}, running mean within 3 SE {inside}/40, variance within 10% {var_ok}, frozen/eval hashes unchanged {untouched}"
    );
    report.line(2, true, pass, t, detail);
}

fn bilevel_toy(report: &mut Report) {
    let t = Instant::now();
    let ssl = |p: &[f64]| vec![2.0 * (p[0] - 2.0)];
    let joint = |p: &[f64]| vec![2.0 * (p[0] - 1.0)];
    let joint_loss = |p: &[f64]| (p[0] - 1.0).powi(2);
    let adapted = inner_sgd(&[0.0], &ssl, 0.25, 1)[0];
    let fo = first_order_grad(&[0.0], &ssl, &joint, 0.25, 1)[0];
    let alpha: f64 = 0.1;
    let optimum = (1.0 - 4.0 * alpha) / (1.0 - 2.0 * alpha);
    let mut gamma = vec![0.0];
    let mut steps = 0;
    while (gamma[0] - optimum).abs() >= TOY_TOL && steps < TOY_MAX_STEPS {
        gamma[0] -= 0.5 * exact_grad_fd(&gamma, &ssl, &joint_loss, alpha, 1, 1e-6)[0];
        steps += 1;
    }
    let converged = (gamma[0] - optimum).abs() < TOY_TOL;
    let pass = adapted == 1.0 && fo == 0.0 && converged && t.elapsed() < Duration::from_secs(10);
    let detail = format!("bi-level toy: adapted {adapted}, first-order grad {fo}, exact descent reached {:.8} (optimum {optimum}) in {steps} steps", gamma[0]);
    report.line(3, true, pass, t, detail);
}

fn metrics_oracle(report: &mut Report) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..ORACLE_SETS {
        let mut r = rng(seed);
        let k = r.random_range(2..8);
        let n = r.random_range(1..60);
        let l: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        worst = worst.max((macro_f1(&p, &l, k) - brute_macro_f1(&p, &l, k)).abs());
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + r.random_range(-1.0..1.0)).collect();
        worst = worst.max((pearson(&a, &b) - brute_pearson(&a, &b)).abs());
    }
    let detail = format!("metrics oracle: worst |library - oracle| {worst:.1e} over {ORACLE_SETS} sets");
    report.line(9, true, worst <= ORACLE_TOL, t, detail);
}

fn determinism(report: &mut Report) {
    let t = Instant::now();
    let cfg = workspace_config("smoke.json");
    let gen = || gen_domains(&cfg.data.spec, cfg.data.sources, cfg.data.targets).unwrap();
    let set = gen();
    let bytes = data::encode(&set);
    let dataset_same = bytes == data::encode(&gen());
    let dataset_roundtrip = data::decode(&bytes).map(|s| s == set).unwrap_or(false);
    let dir = tempfile::tempdir().unwrap();
    let run = |i: usize| {
        let trained = train_pipeline(&cfg, &set, 0).unwrap();
        let results = run_arms(&cfg, &set, &ModelSource::Trained(&trained), &cfg.ablation.arms, 0).unwrap();
        let path = dir.path().join(format!("m{i}.csv"));
        write_rows_csv(&rows(&results), &path).unwrap();
        (checkpoint::encode(&trained.meta), std::fs::read(path).unwrap())
    };
    let (ckpt_a, csv_a) = run(0);
    let (ckpt_b, csv_b) = run(1);
    let ckpt_roundtrip = checkpoint::decode(&ckpt_a).map(|m| checkpoint::encode(&m) == ckpt_a).unwrap_or(false);
    let flipped = |b: &[u8], i: usize| {
        let mut v = b.to_vec();
        v[i] ^= 0x10;
        v
    };
    let rejected = (1..8).all(|k| {
        data::decode(&flipped(&bytes, bytes.len() * k / 8)).is_err()
            && checkpoint::decode(&flipped(&ckpt_a, ckpt_a.len() * k / 8)).is_err()
    });
    let pass = dataset_same && dataset_roundtrip && ckpt_a == ckpt_b && csv_a == csv_b && ckpt_roundtrip && rejected;
    let detail = format!(
        "determinism: dataset {dataset_same}, checkpoint {}, metrics csv {}, roundtrips {}, corruption rejected {rejected}",
        ckpt_a == ckpt_b,
        csv_a == csv_b,
        dataset_roundtrip && ckpt_roundtrip
    );
    report.line(10, true, pass, t, detail);
}

/// Mean accuracy in points of `arm` over seeds, and the per-seed values.
fn arm_acc(results: &[Vec<ArmResult>], arm: &str) -> (f64, Vec<f64>) {
    let per_seed: Vec<f64> = results
        .iter()
        .map(|r| {
            100.0 * r.iter().find(|a| a.arm == arm).unwrap_or_else(|| panic!("arm {arm} missing")).metrics.accuracy
        })
        .collect();
    (per_seed.iter().sum::<f64>() / per_seed.len() as f64, per_seed)
}

/// Affine-only adaptation of every target leaves weights and running
/// statistics of the adapted copies equal to the meta model's.
fn adaptation_keeps_hashes(cfg: &mabn::config::RunConfig, set: &DomainSet, meta: &Model, seed: u64) -> bool {
    let inner = InnerConfig { scope: Scope::AffineOnly, ..InnerConfig::from(&cfg.meta) };
    set.targets.iter().all(|d| {
        let support = mabn::adapt::draw_support(d, &cfg.eval, seed).unwrap();
        let adapted = adapt_domain(meta, &support, &inner, &cfg.ssl, derive_seed(seed, &[d.id as u64])).unwrap();
        adapted.theta_hash() == meta.theta_hash() && adapted.stats_hash() == meta.stats_hash()
    })
}

fn benchmark(report: &mut Report) {
    let t = Instant::now();
    let cfg = workspace_config("acceptance.json");
    let set = gen_domains(&cfg.data.spec, cfg.data.sources, cfg.data.targets).unwrap();
    assert!(set.targets.iter().all(|d| !d.indices(Split::Test).is_empty()));
    let mut results = Vec::new();
    let mut scope_ok = true;
    for &seed in &cfg.seeds {
        let trained = train_pipeline(&cfg, &set, seed).unwrap();
        let (theta, stats) = (trained.meta.theta_hash(), trained.meta.stats_hash());
        scope_ok &= theta == trained.joint.theta_hash() && stats == trained.joint.stats_hash();
        results.push(run_arms(&cfg, &set, &ModelSource::Trained(&trained), &cfg.ablation.arms, seed).unwrap());
        scope_ok &= trained.meta.theta_hash() == theta && trained.meta.stats_hash() == stats;
        scope_ok &= adaptation_keeps_hashes(&cfg, &set, &trained.meta, seed);
    }
    let elapsed = t.elapsed();
    report.line(
        4,
        true,
        scope_ok,
        t,
        format!(
            "scope discipline: weight and running-statistic hashes unchanged over {} seeds {scope_ok}",
            cfg.seeds.len()
        ),
    );

    let (matched, matched_seeds) = arm_acc(&results, "Matched");
    let (no_adapt, _) = arm_acc(&results, "NoAdapt");
    let (not_matched, _) = arm_acc(&results, "NotMatched");
    let (full_bn, _) = arm_acc(&results, "MatchedFullBN");
    let (entropy, entropy_seeds) = arm_acc(&results, "MatchedEntropy");
    let (entropy_full, _) = arm_acc(&results, "MatchedEntropyFullBN");
    let (s1, _) = arm_acc(&results, "Support1");
    let (s4, _) = arm_acc(&results, "Support4");
    let (s32, _) = arm_acc(&results, "Support32");
    let in_budget = elapsed < PIPELINE_BUDGET;

    let pass5 =
        matched - no_adapt >= MATCHED_OVER_NOADAPT && no_adapt - not_matched >= NOADAPT_OVER_NOTMATCHED && in_budget;
    report.line(
        5,
        false,
        pass5,
        t,
        format!("matched {matched:.2} / no-adapt {no_adapt:.2} / not-matched {not_matched:.2} (need gaps >= {MATCHED_OVER_NOADAPT}, >= {NOADAPT_OVER_NOTMATCHED})"),
    );

    let pass6 = matched - full_bn >= AFFINE_OVER_FULLBN && matched - no_adapt >= ADAPTED_OVER_UNADAPTED && in_budget;
    report.line(
        6,
        false,
        pass6,
        t,
        format!("affine {matched:.2} vs full-BN {full_bn:.2}, adapted {matched:.2} vs unadapted {no_adapt:.2} (need >= 1 each), pipeline {:.0}s", elapsed.as_secs_f64()),
    );

    let wins = entropy_seeds.iter().zip(&matched_seeds).filter(|(e, m)| e >= m).count();
    let pass7 = wins >= ENTROPY_MIN_SEEDS && entropy_full < entropy;
    report.line(
        7,
        false,
        pass7,
        t,
        format!(
            "entropy refine >= matched on {wins}/{} seeds; refine affine {entropy:.2} vs full-BN {entropy_full:.2}",
            cfg.seeds.len()
        ),
    );

    let chain = [s1, s4, matched, s32];
    let monotone = chain.windows(2).all(|w| w[1] >= w[0] - SUPPORT_NOISE);
    let pass8 = monotone && s1 >= no_adapt - SUPPORT_NOISE;
    report.line(
        8,
        false,
        pass8,
        t,
        format!("support 1/4/12/32: {s1:.2} / {s4:.2} / {matched:.2} / {s32:.2}, no-adapt {no_adapt:.2}"),
    );
}

#[test]
fn acceptance_criteria() {
    let mut report = Report { hard_failures: Vec::new() };
    gradient_fidelity(&mut report);
    bn_semantics(&mut report);
    bilevel_toy(&mut report);
    benchmark(&mut report);
    metrics_oracle(&mut report);
    determinism(&mut report);
    assert!(report.hard_failures.is_empty(), "failed criteria {:?}", report.hard_failures);
}
