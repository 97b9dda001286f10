use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacticraft_core::adapter::AdapterSet;
use tacticraft_core::gradcheck::{finite_diff_check, GradCheckOptions};
use tacticraft_core::policy::{init_base_with, ActionSample, BasePolicy, Head, Observation, PolicyDims, TrunkCache};
use tacticraft_core::taxonomy::{softmax_normalize, TacticDistribution};
use tacticraft_core::trainer::*;
use tacticraft_core::{Graph, NumericError};

fn random_obs(d: &PolicyDims, rng: &mut ChaCha8Rng) -> Observation {
    let mut mask: Vec<bool> = (0..d.max_entities).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    Observation {
        scalar: (0..d.scalar_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        entities: (0..d.max_entities * d.entity_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        mask,
        spatial: (0..d.cells()).map(|_| rng.random_range(0.0..1.0)).collect(),
    }
}

fn random_action(o: &Observation, d: &PolicyDims, rng: &mut ChaCha8Rng) -> ActionSample {
    let valid: Vec<usize> = (0..d.max_entities).filter(|&e| o.mask[e]).collect();
    ActionSample {
        action_type: rng.random_range(0..d.action_types),
        delay: rng.random_range(0..d.delays),
        queued: rng.random_range(0..2),
        selected_units: o.mask.iter().map(|&m| m && rng.random_bool(0.5)).collect(),
        target_unit: valid[rng.random_range(0..valid.len())],
        location: rng.random_range(0..d.cells()),
    }
}

fn random_tau(rng: &mut ChaCha8Rng) -> TacticDistribution {
    let l: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
    softmax_normalize(&l).unwrap()
}

fn dataset(d: &PolicyDims, n: usize, l: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..n)
        .map(|_| {
            let observations: Vec<Observation> = (0..l).map(|_| random_obs(d, &mut rng)).collect();
            let actions = observations.iter().map(|o| random_action(o, d, &mut rng)).collect();
            Trajectory {
                observations,
                actions,
                tau: random_tau(&mut rng),
            }
        })
        .collect();
    Dataset { trajectories }
}

fn perturb(a: &mut AdapterSet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in a.store.ids().collect::<Vec<_>>() {
        for v in a.store.get_mut(id).values_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn batch_for(base: &BasePolicy, ds: &Dataset, idx: &[usize]) -> TrainBatch {
    let obs: Vec<Vec<Observation>> = ds.trajectories.iter().map(|t| t.observations.clone()).collect();
    let cache = TrunkCache::build(base, &obs).unwrap();
    TrainBatch::assemble(ds, &cache, idx)
}

fn tiny_cfg(preset: &str) -> TrainConfig {
    TrainConfig {
        kl_head_weights: HeadWeights::preset(preset).unwrap(),
        preset: Some(preset.into()),
        warm_up_steps: 10,
        total_steps: 200,
        learning_rate: 3e-3,
        batch_size: 4,
        trajectory_length: 3,
        checkpoint_freq: 10,
        ..TrainConfig::default()
    }
}

fn bc_only(r: &LossReport, cfg: &TrainConfig) -> f64 {
    Head::ALL.iter().map(|h| cfg.bc_head_weights.get(*h) * r.bc[h.index()]).sum()
}

#[test]
fn zero_init_kl_vanishes_and_loss_is_pure_bc() {
    let base = init_base_with(PolicyDims::tiny(), 1).unwrap();
    let ds = dataset(&base.dims, 6, 3, 2);
    let cfg = tiny_cfg("A");
    let a = init_adapters(&base, &cfg).unwrap();
    let r = loss_batch(&base, &a, &batch_for(&base, &ds, &[0, 3, 5]), &cfg).unwrap();
    assert!(r.kl.iter().all(|k| *k == 0.0), "{:?}", r.kl);
    assert!((r.total - bc_only(&r, &cfg)).abs() < 1e-12);
}

#[test]
fn zero_alpha_reduces_to_behavior_cloning() {
    let base = init_base_with(PolicyDims::tiny(), 3).unwrap();
    let ds = dataset(&base.dims, 4, 3, 4);
    let mut cfg = tiny_cfg("A");
    cfg.kl_head_weights = HeadWeights([0.0; 6]);
    let mut a = init_adapters(&base, &cfg).unwrap();
    perturb(&mut a, 5, 0.4);
    let r = loss_batch(&base, &a, &batch_for(&base, &ds, &[0, 1, 2, 3]), &cfg).unwrap();
    assert!(r.kl.iter().any(|k| *k > 0.0));
    assert!((r.total - bc_only(&r, &cfg)).abs() < 1e-12);
}

#[test]
fn two_way_head_matches_closed_form() {
    let adapted = [1.3, -0.4];
    let base = [0.2, 0.5];
    let lse = |x: [f64; 2]| (x[0].exp() + x[1].exp()).ln();
    let la = adapted.map(|x| x - lse(adapted));
    let lb = base.map(|x| x - lse(base));
    let ce = -la[1];
    let fwd: f64 = (0..2).map(|i| lb[i].exp() * (lb[i] - la[i])).sum();
    let rev: f64 = (0..2).map(|i| la[i].exp() * (la[i] - lb[i])).sum();

    let targets = BatchTargets {
        index: [vec![0], vec![0], vec![1], vec![0], vec![0], vec![0]],
        selected: vec![],
    };
    for (dir, kl) in [(KlDirection::Forward, fwd), (KlDirection::Reverse, rev)] {
        let mut g = Graph::new();
        let a = g.constant(vec![1, 2], adapted.to_vec()).unwrap();
        let b = g.constant(vec![1, 2], base.to_vec()).unwrap();
        let (bc, k) = head_terms(&mut g, Head::Queued, a, b, &targets, None, dir).unwrap();
        assert!((g.scalar(bc) - ce).abs() < 1e-10);
        assert!((g.scalar(k) - kl).abs() < 1e-10, "{dir:?}");
        let total = 2.0 * g.scalar(bc) + 0.5 * g.scalar(k);
        assert!((total - (2.0 * ce + 0.5 * kl)).abs() < 1e-10);
    }
}

#[test]
fn selected_units_use_bernoulli_terms() {
    let x = [0.7, -1.2, 3.0];
    let y = [0.1, 0.4, -2.0];
    let t = [1.0, 0.0, 1.0];
    let mask = [true, true, false];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut ce = 0.0;
    let mut kl = 0.0;
    for i in 0..2 {
        let (p, q) = (sig(y[i]), sig(x[i]));
        ce -= t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln();
        kl += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    let targets = BatchTargets {
        index: [vec![0], vec![0], vec![0], vec![0], vec![0], vec![0]],
        selected: t.to_vec(),
    };
    let mut g = Graph::new();
    let a = g.constant(vec![1, 3], x.to_vec()).unwrap();
    let b = g.constant(vec![1, 3], y.to_vec()).unwrap();
    let (bc, k) = head_terms(&mut g, Head::SelectedUnits, a, b, &targets, Some(&mask), KlDirection::Forward).unwrap();
    assert!((g.scalar(bc) - ce / 2.0).abs() < 1e-10, "{} vs {}", g.scalar(bc), ce / 2.0);
    assert!((g.scalar(k) - kl / 2.0).abs() < 1e-10);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let base = init_base_with(PolicyDims::toy(), 6).unwrap();
    let ds = dataset(&base.dims, 2, 2, 7);
    let mut cfg = tiny_cfg("A");
    cfg.trajectory_length = 2;
    let mut a = init_adapters(&base, &cfg).unwrap();
    perturb(&mut a, 8, 0.3);
    let batch = batch_for(&base, &ds, &[0, 1]);
    let report = finite_diff_check(
        &a.store,
        |g, p| {
            loss_graph(g, &base, &a, p, &batch, &cfg)
                .map(|v| v.total)
                .map_err(|e| NumericError::Evaluation(e.to_string()))
        },
        GradCheckOptions {
            max_per_tensor: Some(24),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.entries.len(), a.store.len());
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn warmup_and_decay_schedule() {
    let cfg = TrainConfig {
        warm_up_steps: 20_000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert!((lr_at(10_000, &cfg) - 5e-4).abs() < 1e-15);
    assert!((lr_at(20_000, &cfg) - 1e-3).abs() < 1e-15);
    assert!((lr_at(60_000, &cfg) - 1e-3).abs() < 1e-15);
    let decayed = TrainConfig {
        warm_up_steps: 10,
        lr_decay: 0.5,
        lr_decay_interval: 100,
        ..TrainConfig::default()
    };
    assert!((lr_at(99, &decayed) - 1e-3).abs() < 1e-15);
    assert!((lr_at(250, &decayed) - 2.5e-4).abs() < 1e-15);
}

#[test]
fn global_norm_clipping_examples() {
    let cfg = TrainConfig {
        grad_clip_kind: GradClipKind::GlobalNorm,
        grad_clip_threshold: 1.4,
        ..TrainConfig::default()
    };
    let store = tacticraft_core::ParamStore::new();
    let mut opt = OptimizerState::new(&store, 0.0);
    let mut g = vec![vec![0.7, 0.0]];
    let info = clip_gradients(&mut g, &mut opt, &cfg);
    assert_eq!(info.scale, 1.0);
    assert_eq!(g, vec![vec![0.7, 0.0]]);
    let mut g = vec![vec![0.0], vec![2.8]];
    let info = clip_gradients(&mut g, &mut opt, &cfg);
    assert!((info.scale - 0.5).abs() < 1e-15);
    assert!((g[1][0] - 1.4).abs() < 1e-15);
}

#[test]
fn momentum_clipping_follows_running_norm() {
    let cfg = TrainConfig {
        grad_clip_kind: GradClipKind::MomentumNorm,
        grad_clip_threshold: 1.4,
        ..TrainConfig::default()
    };
    let store = tacticraft_core::ParamStore::new();
    let mut opt = OptimizerState::new(&store, 0.0);
    let norms = [1.0, 1.0, 10.0, 0.5, 3.0];
    let mut ema: Option<f64> = None;
    for n in norms {
        let m = ema.map_or(n, |m| 0.99 * m + 0.01 * n);
        ema = Some(m);
        let want = (1.4 * m / n).min(1.0);
        let mut g = vec![vec![n]];
        let info = clip_gradients(&mut g, &mut opt, &cfg);
        assert!((info.scale - want).abs() < 1e-12, "norm {n}: {} vs {want}", info.scale);
        assert!((g[0][0] - n * want).abs() < 1e-12);
    }
}

#[test]
fn training_reduces_loss_and_leaves_base_untouched() {
    let base = init_base_with(PolicyDims::tiny(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before = base.store.clone();
    let bpath = base.save(&dir.path().join("base_before")).unwrap();
    let ds = dataset(&base.dims, 16, 3, 10);
    let cfg = tiny_cfg("A");
    let out = train(&ds, &base, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.metrics.len(), 200);
    let first = out.metrics[0].loss;
    let last = out.metrics[199].loss;
    assert!(last < first, "{first} -> {last}");
    for ((_, a), (_, b)) in before.iter().zip(base.store.iter()) {
        assert_eq!(a.values(), b.values());
    }
    let apath = base.save(&dir.path().join("base_after")).unwrap();
    let tensors = |p: &std::path::Path| std::fs::read(p.with_extension("bin")).unwrap();
    assert_eq!(tensors(&bpath), tensors(&apath));
}

#[test]
fn training_is_deterministic() {
    let base = init_base_with(PolicyDims::tiny(), 11).unwrap();
    let ds = dataset(&base.dims, 8, 3, 12);
    let mut cfg = tiny_cfg("D");
    cfg.total_steps = 25;
    let a = train(&ds, &base, &cfg, &TrainOptions::default()).unwrap();
    let b = train(&ds, &base, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for ((_, x), (_, y)) in a.adapters.store.iter().zip(b.adapters.store.iter()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn resume_is_bit_exact() {
    let base = init_base_with(PolicyDims::tiny(), 13).unwrap();
    let ds = dataset(&base.dims, 8, 3, 14);
    let mut cfg = tiny_cfg("A");
    cfg.total_steps = 30;
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(
        &ds,
        &base,
        &cfg,
        &TrainOptions {
            checkpoint_dir: Some(full_dir.path().into()),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainOptions {
        checkpoint_dir: Some(dir.path().into()),
        resume: false,
        stop_at: Some(20),
    };
    let part = train(&ds, &base, &cfg, &first).unwrap();
    assert_eq!(part.metrics.len(), 20);
    // a later stop overshoots the checkpoint and must be discarded on resume
    let rest = train(
        &ds,
        &base,
        &cfg,
        &TrainOptions {
            resume: true,
            stop_at: None,
            ..first
        },
    )
    .unwrap();
    assert_eq!(rest.metrics.first().unwrap().step, 21);
    assert_eq!(rest.metrics, full.metrics[20..]);
    for ((_, x), (_, y)) in full.adapters.store.iter().zip(rest.adapters.store.iter()) {
        assert_eq!(x.values(), y.values());
    }
    let log = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log, full.metrics);
}

#[test]
fn resume_truncates_metrics_past_the_checkpoint() {
    let base = init_base_with(PolicyDims::tiny(), 15).unwrap();
    let ds = dataset(&base.dims, 8, 3, 16);
    let mut cfg = tiny_cfg("A");
    cfg.total_steps = 20;
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().into()),
        resume: true,
        stop_at: Some(15),
    };
    train(&ds, &base, &cfg, &opts).unwrap();
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 15);
    let rest = train(&ds, &base, &cfg, &TrainOptions { stop_at: None, ..opts }).unwrap();
    assert_eq!(rest.metrics.first().unwrap().step, 11);
    let log = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=20).collect::<Vec<_>>());
}

#[test]
fn checkpoints_follow_the_frequency() {
    let base = init_base_with(PolicyDims::tiny(), 17).unwrap();
    let ds = dataset(&base.dims, 8, 3, 18);
    let mut cfg = tiny_cfg("A");
    cfg.total_steps = 3000;
    cfg.checkpoint_freq = 1000;
    cfg.batch_size = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &ds,
        &base,
        &cfg,
        &TrainOptions {
            checkpoint_dir: Some(dir.path().into()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step_1000", "step_2000", "step_3000"]);
    assert_eq!(latest_checkpoint(dir.path()).unwrap().0, 3000);
    let (a, opt) = load_step(&out.checkpoints[2], &base, &cfg).unwrap();
    assert_eq!(opt, out.optimizer);
    for ((_, x), (_, y)) in a.store.iter().zip(out.adapters.store.iter()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn non_finite_adapter_names_the_head() {
    let base = init_base_with(PolicyDims::tiny(), 19).unwrap();
    let ds = dataset(&base.dims, 4, 3, 20);
    let cfg = tiny_cfg("A");
    let mut a = init_adapters(&base, &cfg).unwrap();
    let id = a.store.ids().find(|id| a.store.name(*id) == "adapter.delay.out.b").unwrap();
    a.store.get_mut(id).values_mut()[1] = f64::NAN;
    let mut opt = OptimizerState::new(&a.store, cfg.weight_decay);
    let err = train_step(&batch_for(&base, &ds, &[0, 1]), &base, &mut a, &mut opt, &cfg).unwrap_err();
    match &err {
        TrainError::NonFinite { head, step, .. } => {
            assert_eq!(head, "delay");
            assert_eq!(*step, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("delay"), "{err}");
}

#[test]
fn dataset_jsonl_roundtrip_and_validation() {
    let base = init_base_with(PolicyDims::tiny(), 21).unwrap();
    let ds = dataset(&base.dims, 3, 2, 22);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    ds.write_jsonl(&p).unwrap();
    let back = Dataset::read_jsonl(&p).unwrap();
    assert_eq!(back, ds);
    back.validate(&base).unwrap();
    let mut bad = ds.clone();
    bad.trajectories[1].actions[0].target_unit = 99;
    assert!(matches!(bad.validate(&base), Err(TrainError::Dataset(_))));
    let cfg = TrainConfig {
        trajectory_length: 5,
        ..tiny_cfg("A")
    };
    assert!(train(&ds, &base, &cfg, &TrainOptions::default()).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let err = TrainConfig::from_toml_str("learning_rate = 0.01\nlearnin_rate = 0.1\n").unwrap_err();
    match err {
        TrainError::UnknownKeys(k) => assert_eq!(k, vec!["learnin_rate".to_string()]),
        other => panic!("{other:?}"),
    }
    let cfg = TrainConfig::from_toml_str("head_weights = \"B\"\n[grad_clip]\ntype = \"global_norm\"\nthreshold = 2.0\n").unwrap();
    assert_eq!(cfg.kl_head_weights, HeadWeights::preset("B").unwrap());
    assert_eq!(cfg.grad_clip_kind, GradClipKind::GlobalNorm);
    let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_terms_are_nonnegative(seed in 0u64..10_000, scale in 0.01f64..2.0) {
        let base = init_base_with(PolicyDims::tiny(), 23).unwrap();
        let ds = dataset(&base.dims, 3, 2, 24);
        let batch = batch_for(&base, &ds, &[0, 1, 2]);
        for dir in [KlDirection::Forward, KlDirection::Reverse] {
            let mut cfg = tiny_cfg("A");
            cfg.kl_direction = dir;
            let mut a = init_adapters(&base, &cfg).unwrap();
            perturb(&mut a, seed, scale);
            let r = loss_batch(&base, &a, &batch, &cfg).unwrap();
            for k in r.kl {
                prop_assert!(k >= -1e-12, "{k}");
            }
        }
    }

    #[test]
    fn batches_cover_each_epoch(n in 1usize..40, b in 1usize..8, seed in 0u64..100) {
        let per = (n / b).max(1);
        let mut seen = vec![0usize; n];
        for step in 1..=per as u64 {
            let idx = batch_indices(n, b, seed, step);
            prop_assert_eq!(idx.len(), b);
            for i in idx { seen[i] += 1; }
        }
        if n >= b {
            prop_assert!(seen.iter().all(|c| *c <= 1));
        }
    }
}

#[test]
fn reverse_kl_direction_is_available() {
    let cfg = TrainConfig::from_toml_str("kl_direction = \"reverse\"\n").unwrap();
    assert_eq!(cfg.kl_direction, KlDirection::Reverse);
    assert!(TrainConfig::from_toml_str("kl_direction = \"sideways\"\n").is_err());
}
