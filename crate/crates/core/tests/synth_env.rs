use tacticraft_core::adapter::{AdapterSet, AttachPoint, Fusion};
use tacticraft_core::categorical::js_divergence;
use tacticraft_core::policy::{init_base_with, PolicyDims, TrunkCache};
use tacticraft_core::synth::*;
use tacticraft_core::taxonomy::one_hot;

fn toy() -> PolicyDims {
    PolicyDims::toy()
}

#[test]
fn generation_is_deterministic_per_seed() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let a = generate_dataset(&s, &d, 20, 4, 7).unwrap();
    let b = generate_dataset(&s, &d, 20, 4, 7).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&s, &d, 20, 4, 8).unwrap();
    assert_ne!(a.dataset, c.dataset);
    // a prefix does not depend on how many trajectories follow
    let short = generate_dataset(&s, &d, 5, 4, 7).unwrap();
    assert_eq!(short.dataset.trajectories[..], a.dataset.trajectories[..5]);
}

#[test]
fn uniform_assignment_gives_one_hundred_per_category() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let data = generate_dataset(&s, &d, 900, 1, 1).unwrap();
    let mut counts = [0usize; 9];
    for (k, t) in data.archetypes.iter().zip(&data.dataset.trajectories) {
        counts[*k] += 1;
        assert_eq!(t.tau.argmax().index(), *k);
        assert!((t.tau.probs()[*k] - 0.9).abs() < 1e-12);
    }
    assert_eq!(counts, [100; 9]);
    let labels = data.labels();
    assert_eq!(labels.len(), 900);
    assert_eq!(labels[0].replay_id, "synth-00000");
}

#[test]
fn action_marginals_within_three_sigma() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let l = 8;
    let per = 1250;
    let data = generate_dataset(&s, &d, 9 * per, l, 3).unwrap();
    let mut counts = vec![vec![0.0; d.action_types]; 9];
    for (k, t) in data.archetypes.iter().zip(&data.dataset.trajectories) {
        for a in &t.actions {
            counts[*k][a.action_type] += 1.0;
        }
    }
    let n = (per * l) as f64;
    for (k, row) in counts.iter().enumerate() {
        for (a, c) in row.iter().enumerate() {
            let p = s.scripts[k].action_type[a];
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((c - n * p).abs() <= 3.0 * sd, "archetype {k} action {a}: {c} vs {}", n * p);
        }
    }
}

#[test]
fn sampled_actions_respect_masks() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let data = generate_dataset(&s, &d, 45, 6, 4).unwrap();
    let base = init_base_with(d.clone(), 0).unwrap();
    data.dataset.validate(&base).unwrap();
    for t in &data.dataset.trajectories {
        for (o, a) in t.observations.iter().zip(&t.actions) {
            assert!(o.mask[a.target_unit]);
            assert!(a.selected_units.iter().zip(&o.mask).all(|(s, m)| !s || *m));
        }
    }
}

#[test]
fn scripts_roundtrip_and_separation_is_enforced() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let back = ScriptSet::from_toml(&s.to_toml(), &d).unwrap();
    assert_eq!(back, s);
    for i in 0..9 {
        for j in i + 1..9 {
            assert!(total_variation(&s.scripts[i].action_type, &s.scripts[j].action_type) >= MIN_SEPARATION);
        }
    }
    let mut close = s.clone();
    let mut p = close.scripts[2].action_type.clone();
    p.iter_mut().zip(&close.scripts[3].action_type).for_each(|(x, y)| *x = 0.1 * *x + 0.9 * y);
    close.scripts[2].action_type = p;
    let err = ScriptSet::from_toml(&close.to_toml(), &d).unwrap_err().to_string();
    assert!(err.contains("too close"), "{err}");
    let mut reordered = s.clone();
    reordered.scripts.swap(0, 1);
    assert!(reordered.validate(&d).is_err());
    assert!(ScriptSet::default_for(&PolicyDims::tiny()).is_err());
}

#[test]
fn short_pretraining_lowers_bc_and_freezes() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let train = generate_dataset(&s, &d, 480, 4, 5).unwrap().dataset;
    let held = generate_dataset(&s, &d, 45, 4, 6).unwrap().dataset;
    let cfg = PretrainConfig {
        steps: 60,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let out = pretrain_base(&train, &d, &cfg).unwrap();
    assert_eq!(out.losses.len(), 60);
    assert!(out.base.store.is_frozen());
    let untrained = init_base_with(d.clone(), cfg.seed).unwrap();
    let before: f64 = bc_loss(&untrained, &held).unwrap().iter().sum();
    let after: f64 = bc_loss(&out.base, &held).unwrap().iter().sum();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn zero_adapters_do_not_modulate() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let base = init_base_with(d.clone(), 2).unwrap();
    let a = AdapterSet::new(&d, &AttachPoint::ALL, Fusion::Add, 3).unwrap();
    let r = evaluate_modulation(&base, &a, &s, 256, 8, 9, (5, 7)).unwrap();
    for row in &r.match_matrix {
        assert_eq!(row, &r.match_matrix[0]);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
    assert!(r.head_kl.iter().flatten().all(|v| *v == 0.0));
    assert!(r.modulation_score.abs() < 0.01, "{}", r.modulation_score);
    assert!(!r.diagonal_dominant);
    assert_eq!(r.n_eval, 256);
    let text = r.render_table();
    assert!(text.contains("modulation score"));
    let json = serde_json::to_string(&r).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn divergence_profile_is_zero_for_zero_adapters() {
    let d = toy();
    let base = init_base_with(d.clone(), 4).unwrap();
    let a = AdapterSet::new(&d, &AttachPoint::ALL, Fusion::Gated, 5).unwrap();
    let obs = eval_observations(&d, 4, 3, 6);
    let cache = TrunkCache::build(&base, &obs).unwrap();
    let taus: Vec<_> = (0..9).map(|k| one_hot(k).unwrap()).collect();
    let table = head_divergence_profile(&base, &a, &taus, &cache).unwrap();
    assert_eq!(table.len(), 9);
    assert!(table.iter().flatten().all(|v| *v == 0.0));
    let p = profile_tau(&base, None, &cache, &taus[0]).unwrap();
    assert!((p.action_type.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((p.location.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn mixture_marginal_is_closer_to_mixture_than_any_archetype() {
    let d = toy();
    let s = ScriptSet::default_for(&d).unwrap();
    let mix = s.mixture_action_marginal();
    let uniform = vec![1.0 / 12.0; 12];
    assert!(js_divergence(&mix, &uniform) < 1e-12);
    for a in &s.scripts {
        assert!(js_divergence(&mix, &a.action_type) > 0.05);
    }
}
