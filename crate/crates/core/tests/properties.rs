mod common;

use std::collections::HashSet;

use common::*;
use mabn::adapt::derangement;
use mabn::data::{
    gen_domains, sample_support_query, DomainSet, DomainSpec, GeneratorKind, ShiftParams, Split, Targets,
};
use mabn::metrics::{accuracy, macro_f1, pearson};
use mabn::nn::{checkpoint, BnMode, Model, Scope, Session};
use mabn::ssl::{self, SslKind, SslTaskConfig};
use mabn::training::{inner_adapt_model, meta_step, InnerConfig, MetaConfig, OuterOrder, OuterState};
use proptest::prelude::*;

fn small_set(seed: u64, enabled: bool) -> DomainSet {
    let mut spec = DomainSpec {
        generator: GeneratorKind::ShiftedShapes { channels: 2, size: 4 },
        num_classes: 3,
        samples_per_domain: 30,
        seed,
        ..DomainSpec::default()
    };
    spec.shift.enabled = enabled;
    gen_domains(&spec, 4, 2).unwrap()
}

fn meta_model(seed: u64) -> Model {
    let mut m = Model::new(conv3_config(), seed).unwrap();
    jitter_params(&mut m, seed);
    m.set_freeze_theta(true);
    m.set_mode(BnMode::Frozen);
    m
}

fn ssl_cfg() -> SslTaskConfig {
    SslTaskConfig { rotation_hidden: 4, ..SslTaskConfig::default() }
}

fn fingerprint(m: &Model) -> Vec<u8> {
    checkpoint::encode(m)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn support_and_query_are_disjoint_within_split(seed in 0u64..1000, s in 1usize..6, q in 1usize..8, test in any::<bool>()) {
        let set = small_set(seed % 7, true);
        let split = if test { Split::Test } else { Split::Train };
        let d = &set.targets[(seed % 2) as usize];
        let task = sample_support_query(d, split, s, q, seed).unwrap();
        let range = d.indices(split);
        let sup: HashSet<usize> = task.support_idx.iter().copied().collect();
        prop_assert_eq!(sup.len(), s);
        prop_assert_eq!(task.query_idx.len(), q);
        prop_assert!(task.query_idx.iter().all(|i| !sup.contains(i)));
        prop_assert!(task.support_idx.iter().chain(&task.query_idx).all(|i| range.contains(i)));
        let Targets::Classes(y) = &task.query_targets else { panic!("classification task") };
        prop_assert!(y.iter().zip(&task.query_idx).all(|(&l, &i)| l == d.labels[i]));
    }

    #[test]
    fn derangement_has_no_fixed_point(n in 2usize..40, seed in any::<u64>()) {
        let p = derangement(n, &mut rng(seed)).unwrap();
        prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn labels_cover_every_class(seed in 0u64..500) {
        let set = small_set(seed, true);
        for d in set.sources.iter().chain(&set.targets) {
            let seen: HashSet<usize> = d.labels.iter().copied().collect();
            prop_assert_eq!(seen.len(), set.num_classes);
        }
    }

    #[test]
    fn byol_loss_is_within_its_range(seed in 0u64..1000) {
        let mut m = Model::new(conv3_byol_config(), seed).unwrap();
        jitter_params(&mut m, seed);
        let x = uniform(&mut rng(seed), &[3, 2, 4, 4], -2.0, 2.0);
        let cfg = SslTaskConfig { kind: SslKind::ByolLite, ..SslTaskConfig::default() };
        let mut s = Session::new(&m, Scope::AffineOnly).unwrap();
        let l = ssl::ssl_loss(&m, &mut s, &x, &cfg, &mut rng(seed + 1)).unwrap();
        let v = s.scalar(l);
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&v), "loss {}", v);
    }

    #[test]
    fn inner_adaptation_leaves_the_input_model_untouched(seed in 0u64..1000, full in any::<bool>(), alpha in 0.0f64..0.5) {
        let m = meta_model(seed);
        let before = fingerprint(&m);
        let x = uniform(&mut rng(seed), &[4, 2, 4, 4], -1.0, 1.0);
        let scope = if full { Scope::FullBn } else { Scope::AffineOnly };
        let inner = InnerConfig { alpha, scope, steps: 2, fullbn_retention: None };
        let adapted = inner_adapt_model(&m, &x, &inner, &ssl_cfg(), seed).unwrap();
        prop_assert_eq!(fingerprint(&m), before);
        prop_assert_eq!(adapted.theta_hash(), m.theta_hash());
        if !full {
            prop_assert_eq!(adapted.stats_hash(), m.stats_hash());
        }
    }

    #[test]
    fn zero_inner_rate_is_the_identity(seed in 0u64..1000, steps in 1usize..4) {
        let m = meta_model(seed);
        let x = uniform(&mut rng(seed), &[4, 2, 4, 4], -1.0, 1.0);
        let inner = InnerConfig { alpha: 0.0, scope: Scope::AffineOnly, steps, fullbn_retention: None };
        let adapted = inner_adapt_model(&m, &x, &inner, &ssl_cfg(), seed).unwrap();
        prop_assert_eq!(fingerprint(&adapted), fingerprint(&m));
    }

    #[test]
    fn restoring_a_snapshot_recovers_the_model(seed in 0u64..1000) {
        let m = meta_model(seed);
        let snap = m.snapshot_affine();
        let x = uniform(&mut rng(seed), &[4, 2, 4, 4], -1.0, 1.0);
        let inner = InnerConfig { alpha: 0.1, scope: Scope::AffineOnly, steps: 1, fullbn_retention: None };
        let mut adapted = inner_adapt_model(&m, &x, &inner, &ssl_cfg(), seed).unwrap();
        adapted.restore_affine(&snap).unwrap();
        prop_assert_eq!(fingerprint(&adapted), fingerprint(&m));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in any::<u64>(), byol in any::<bool>(), frozen in any::<bool>()) {
        let mut m = Model::new(if byol { conv3_byol_config() } else { conv3_config() }, seed).unwrap();
        jitter_params(&mut m, seed);
        m.set_freeze_theta(frozen);
        let bytes = checkpoint::encode(&m);
        prop_assert_eq!(checkpoint::encode(&checkpoint::decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn metrics_stay_in_bounds(labels in prop::collection::vec((0usize..5, 0usize..5), 1..80), xs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 0..50)) {
        let (p, l): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let a = accuracy(&p, &l);
        let f = macro_f1(&p, &l, 5);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&f));
        let (u, v): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        prop_assert!((-1.0..=1.0).contains(&pearson(&u, &v)));
    }

    #[test]
    fn disabled_shift_gives_every_domain_the_identity(seed in 0u64..500) {
        let set = small_set(seed, false);
        let noise = DomainSpec::default().shift.noise_min;
        for d in set.sources.iter().chain(&set.targets) {
            prop_assert_eq!(&d.shift, &ShiftParams::identity(2, noise));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn meta_step_ignores_task_order(seed in 0u64..1000, fd in any::<bool>()) {
        let set = small_set(seed % 5, true);
        let tasks: Vec<_> = set.sources.iter().map(|d| sample_support_query(d, Split::Train, 3, 5, seed).unwrap()).collect();
        let order = if fd { OuterOrder::FiniteDifference } else { OuterOrder::FirstOrder };
        let meta = MetaConfig { alpha: 0.05, delta: 0.01, outer_order: order, ..MetaConfig::default() };
        let base = meta_model(seed);
        let mut a = base.clone();
        let mut b = base.clone();
        let mut reversed = tasks.clone();
        reversed.reverse();
        reversed.rotate_left((seed % 4) as usize);
        let la = meta_step(&mut a, &tasks, &meta, &ssl_cfg(), &mut OuterState::default(), seed).unwrap();
        let lb = meta_step(&mut b, &reversed, &meta, &ssl_cfg(), &mut OuterState::default(), seed).unwrap();
        prop_assert_eq!(la, lb);
        for ((ga, ba), (gb, bb)) in a.snapshot_affine().layers.iter().zip(&b.snapshot_affine().layers) {
            prop_assert!(ga.iter().chain(ba).zip(gb.iter().chain(bb)).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
        prop_assert_eq!(a.theta_hash(), base.theta_hash());
        prop_assert_eq!(a.stats_hash(), base.stats_hash());
    }
}
