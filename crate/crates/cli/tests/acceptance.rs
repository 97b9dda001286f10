//! One line per acceptance criterion; exits non-zero if any fails.
//!
//! The base policy is pre-trained once and shared by every training criterion.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacticraft_core::adapter::{AdapterSet, AttachPoint, Fusion};
use tacticraft_core::buildorder::{parse_build_order, parse_build_order_file, read_corpus, serialize, write_corpus};
use tacticraft_core::gradcheck::{finite_diff_check, GradCheckOptions};
use tacticraft_core::labeler::{label_rule_based, score_rules, RuleSet};
use tacticraft_core::policy::{init_base, init_base_with, ActionSample, BasePolicy, Head, Observation, PolicyDims, TrunkCache};
use tacticraft_core::synth::{evaluate_modulation, generate_dataset, pretrain_base, EvalReport, PretrainConfig, ScriptSet};
use tacticraft_core::taxonomy::{softmax_normalize, TacticDistribution};
use tacticraft_core::trainer::*;
use tacticraft_core::{Graph, NumericError};

const TABLE1: &str = include_str!("../../core/tests/fixtures/table1.txt");

const TRAJECTORIES: usize = 900;
const TRAJ_LEN: usize = 8;
const N_EVAL: usize = 10_000;
const MODULATION_SEEDS: [u64; 3] = [1, 2, 3];
const ORDERING_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ORDERING_STEPS: u64 = 2000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

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

fn random_dataset(d: &PolicyDims, n: usize, l: usize, seed: u64) -> Dataset {
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

fn preset_cfg(preset: &str, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        kl_head_weights: HeadWeights::preset(preset).unwrap(),
        preset: Some(preset.into()),
        total_steps: steps,
        seed,
        ..TrainConfig::default()
    }
}

// ── 1 ──

fn zero_init_identity() -> Verdict {
    let base = init_base(101);
    let d = base.dims.clone();
    let adapters = AdapterSet::new(&d, &AttachPoint::ALL, Fusion::Add, 102).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut mismatches = 0;
    for _ in 0..100 {
        let o = random_obs(&d, &mut rng);
        let plain = base.forward(&o, &base.initial_state()).unwrap();
        for _ in 0..20 {
            let tau = random_tau(&mut rng);
            let c = adapters.conditioned_forward(&base, &o, &base.initial_state(), &tau).unwrap();
            if c.logits != plain.logits || c.core_out != plain.core_out {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 2000 (obs, tau) pairs differ"))
}

// ── 2 ──

fn files_of(manifest: &Path) -> (Vec<u8>, Vec<u8>) {
    (std::fs::read(manifest).unwrap(), std::fs::read(manifest.with_extension("bin")).unwrap())
}

fn frozen_base(dir: &Path, base: &BasePolicy, before: &(Vec<u8>, Vec<u8>)) -> Verdict {
    // same stem, since the manifest names its blob file
    let after = base.save(&dir.join("after").join("base")).unwrap();
    let same = files_of(&after) == *before;
    verdict(same, format!("base checkpoint after {ORDERING_STEPS}-step run byte-identical: {same}"))
}

// ── 3 ──

fn gradient_check() -> Verdict {
    let base = init_base_with(PolicyDims::toy(), 6).unwrap();
    let ds = random_dataset(&base.dims, 2, 2, 7);
    let mut cfg = preset_cfg("A", 10, 0);
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
        GradCheckOptions::default(),
    )
    .unwrap();
    let checked: usize = report.entries.iter().map(|e| e.checked).sum();
    let err = report.max_rel_error();
    verdict(
        err < 1e-4 && report.entries.len() == a.store.len(),
        format!("{checked} elements over {} tensors, max relative error {err:.3e}", report.entries.len()),
    )
}

// ── 4 ──

fn kl_sanity() -> Verdict {
    let base = init_base_with(PolicyDims::tiny(), 23).unwrap();
    let ds = random_dataset(&base.dims, 3, 2, 24);
    let batch = batch_for(&base, &ds, &[0, 1, 2]);
    let cfg = preset_cfg("A", 10, 0);
    let zero = loss_batch(&base, &init_adapters(&base, &cfg).unwrap(), &batch, &cfg).unwrap();
    let zero_ok = zero.kl.iter().all(|k| *k == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut min_kl = f64::INFINITY;
    for i in 0..10_000u64 {
        let mut a = init_adapters(&base, &cfg).unwrap();
        perturb(&mut a, i, rng.random_range(0.01..2.0));
        let r = loss_batch(&base, &a, &batch, &cfg).unwrap();
        min_kl = r.kl.iter().copied().fold(min_kl, f64::min);
    }

    // two-way head by hand
    let adapted = [1.3, -0.4];
    let frozen = [0.2, 0.5];
    let lse = |x: [f64; 2]| (x[0].exp() + x[1].exp()).ln();
    let la = adapted.map(|x| x - lse(adapted));
    let lb = frozen.map(|x| x - lse(frozen));
    let by_hand: f64 = (0..2).map(|i| lb[i].exp() * (lb[i] - la[i])).sum();
    let targets = BatchTargets {
        index: [vec![0], vec![0], vec![1], vec![0], vec![0], vec![0]],
        selected: vec![],
    };
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], adapted.to_vec()).unwrap();
    let y = g.constant(vec![1, 2], frozen.to_vec()).unwrap();
    let (_, k) = head_terms(&mut g, Head::Queued, x, y, &targets, None, KlDirection::Forward).unwrap();
    let closed = (g.scalar(k) - by_hand).abs();

    verdict(
        zero_ok && min_kl >= 0.0 && closed < 1e-10,
        format!("zero-init KL exactly 0: {zero_ok}; min KL over 1e4 perturbations {min_kl:.3e}; closed-form gap {closed:.1e}"),
    )
}

// ── 5, 6, 7, 8 ──

struct RunResult {
    report: EvalReport,
}

fn train_and_eval(base: &BasePolicy, scripts: &ScriptSet, preset: &str, steps: u64, seed: u64) -> RunResult {
    let data = generate_dataset(scripts, &base.dims, TRAJECTORIES, TRAJ_LEN, seed).unwrap().dataset;
    let cfg = preset_cfg(preset, steps, seed);
    let out = train(&data, base, &cfg, &TrainOptions::default()).unwrap();
    let report = evaluate_modulation(base, &out.adapters, scripts, N_EVAL, TRAJ_LEN, 1000 + seed, (5, 7)).unwrap();
    RunResult { report }
}

fn modulation(runs: &[(u64, RunResult)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, r) in runs {
        let ok = r.report.diagonal_dominant && r.report.modulation_score > 0.05;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: score {:.4} dominant {}",
            r.report.modulation_score, r.report.diagonal_dominant
        ));
    }
    verdict(pass, parts.join("; "))
}

fn hybrid(runs: &[(u64, RunResult)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, r) in runs {
        let h = &r.report.hybrid;
        pass &= h.holds(0.02);
        parts.push(format!(
            "seed {seed}: JS mix {:.4} vs pure {:.4}/{:.4}",
            h.js_mixture, h.js_a, h.js_b
        ));
    }
    verdict(pass, parts.join("; "))
}

/// One-sided binomial tail P(X >= wins) at p = 1/2.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn ordering(a: &[(u64, RunResult)], d: &[(u64, RunResult)]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for ((seed, ra), (_, rd)) in a.iter().zip(d) {
        let ka = ra.report.mean_head_kl();
        let kd = rd.report.mean_head_kl();
        let heads_lower = (0..6).filter(|&i| kd[i] < ka[i]).count();
        let score_lower = rd.report.modulation_score < ra.report.modulation_score;
        if heads_lower == 6 && score_lower {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: D<A on {heads_lower}/6 heads, score {:.4} vs {:.4}",
            rd.report.modulation_score, ra.report.modulation_score
        ));
    }
    let p = sign_test_p(wins, a.len());
    verdict(
        p < 0.05,
        format!("{wins}/{} seeds, sign test p = {p:.4}; {}", a.len(), parts.join("; ")),
    )
}

fn head_asymmetry(b: &[(u64, RunResult)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, r) in b {
        let k = r.report.mean_head_kl();
        let (loc, at) = (k[Head::Location.index()], k[Head::ActionType.index()]);
        pass &= loc >= at;
        parts.push(format!("seed {seed}: location {loc:.3e} vs action_type {at:.3e}"));
    }
    verdict(pass, parts.join("; "))
}

// ── 9 ──

fn parser_fidelity() -> Verdict {
    let expected: [(u32, u32, &str, u32); 9] = [
        (13, 12, "Overlord", 1),
        (16, 48, "Hatchery", 1),
        (17, 69, "Spawning Pool", 1),
        (17, 81, "Extractor", 1),
        (19, 109, "Overlord", 1),
        (19, 118, "Queen", 2),
        (24, 124, "Overlord", 1),
        (27, 147, "Roach Warren", 1),
        (28, 174, "Overlord", 2),
    ];
    let bo = parse_build_order_file(TABLE1, "x").unwrap();
    let got: Vec<(u32, u32, &str, u32)> = bo
        .entries
        .iter()
        .map(|e| (e.supply, e.time_s, e.action.as_str(), e.count))
        .collect();
    let values_ok = got == expected;

    let mut first = Vec::new();
    write_corpus(&mut first, std::slice::from_ref(&bo)).unwrap();
    let back = read_corpus(&first[..]).unwrap();
    let mut second = Vec::new();
    write_corpus(&mut second, &back).unwrap();
    let text = serialize(&bo);
    let reparsed = parse_build_order(&text, &bo.replay_id, bo.mmr).unwrap();
    let stable = first == second && back == [bo.clone()] && serialize(&reparsed) == text;
    verdict(values_ok && stable, format!("nine entries match: {values_ok}; round-trip byte-stable: {stable}"))
}

// ── 10 ──

fn softmax_and_rules() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut negative = 0;
    for _ in 0..100_000 {
        let l: Vec<f64> = (0..9).map(|_| rng.random_range(-50.0..0.0)).collect();
        let c = rng.random_range(-500.0..500.0);
        let p = softmax_normalize(&l).unwrap();
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let q = softmax_normalize(&shifted).unwrap();
        negative += p.probs().iter().filter(|v| **v < 0.0).count();
        worst_sum = worst_sum.max((p.probs().iter().sum::<f64>() - 1.0).abs());
        for (a, b) in p.probs().iter().zip(q.probs()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    let rules = RuleSet::default_rules();
    let fixture = |id: &str, text: &str| {
        let bo = parse_build_order(text, id, Some(5000)).unwrap();
        let s = score_rules(&bo, &rules);
        let by_score = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        let by_label = label_rule_based(&bo, &rules, rules.temperature).unwrap().argmax().index();
        (by_score == by_label).then_some(by_label)
    };
    let pool = fixture(
        "pool",
        "12 0:40 Spawning Pool\n13 0:52 Drone\n13 1:02 Overlord\n14 1:20 Zergling ×3\n16 1:40 Hatchery\n17 1:50 Queen\n",
    );
    let lurker = fixture(
        "lurker",
        "13 0:12 Overlord\n16 0:48 Hatchery\n17 1:09 Spawning Pool\n32 3:40 Lair\n44 4:50 Hydralisk Den\n52 5:40 Lurker Den\n",
    );
    let empty = fixture("empty", "");
    let rules_ok = (pool, lurker, empty) == (Some(4), Some(7), Some(0));
    verdict(
        negative == 0 && worst_sum <= 1e-9 && worst_shift <= 1e-9 && rules_ok,
        format!(
            "1e5 vectors: max |sum-1| {worst_sum:.1e}, max shift gap {worst_shift:.1e}; fixtures (4, 7, 0) -> {pool:?} {lurker:?} {empty:?}"
        ),
    )
}

// ── 11 ──

fn cli_determinism(dir: &Path) -> Verdict {
    let run = |name: &str| {
        let out = dir.join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_tacticraft"));
        for (k, _) in std::env::vars() {
            if k.starts_with("TACTICRAFT_") {
                c.env_remove(k);
            }
        }
        let status = c
            .env("TACTICRAFT_LOG", "warn")
            .args(["train", "--out-dir"])
            .arg(&out)
            .args(["--preset", "B", "--trajectories", "90", "--pretrain-steps", "20"])
            .args(["--set", "steps=100", "--set", "warm_up_steps=20", "--set", "save_ckpt_after_iter.freq=50"])
            .output()
            .expect("binary runs");
        (status.status.success(), std::fs::read(out.join(METRICS_FILE)).unwrap_or_default())
    };
    let (ok1, m1) = run("first");
    let (ok2, m2) = run("second");
    let lines = String::from_utf8_lossy(&m1).lines().count();
    verdict(
        ok1 && ok2 && lines == 100 && m1 == m2,
        format!("two runs exit 0: {}; {lines} metric lines; byte-identical: {}", ok1 && ok2, m1 == m2),
    )
}

fn main() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!(
            "[{}] {n:>2} {name}: {} ({:.0}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        results.push((n, name, v));
    };

    report(1, "zero-init identity", zero_init_identity());
    report(3, "gradient check", gradient_check());
    report(4, "KL sanity", kl_sanity());
    report(9, "parser fidelity", parser_fidelity());
    report(10, "softmax and rule oracle", softmax_and_rules());
    report(11, "CLI determinism", cli_determinism(tmp.path()));

    let d = PolicyDims::toy();
    let scripts = ScriptSet::default_for(&d).unwrap();
    let pre_data = generate_dataset(&scripts, &d, TRAJECTORIES, TRAJ_LEN, 0).unwrap().dataset;
    let pretrained = pretrain_base(&pre_data, &d, &PretrainConfig::default()).unwrap().base;
    let saved = pretrained.save(&tmp.path().join("base")).unwrap();
    let before = files_of(&saved);
    let base = BasePolicy::load(&saved).unwrap();
    println!("       base pre-trained ({:.0}s)", started.elapsed().as_secs_f64());

    let by_preset = |preset: &str, seeds: &[u64], steps: u64| -> Vec<(u64, RunResult)> {
        seeds
            .iter()
            .map(|&s| (s, train_and_eval(&base, &scripts, preset, steps, s)))
            .collect()
    };
    let a = by_preset("A", &ORDERING_SEEDS, ORDERING_STEPS);
    let dd = by_preset("D", &ORDERING_SEEDS, ORDERING_STEPS);
    let b = by_preset("B", &ORDERING_SEEDS, ORDERING_STEPS);
    report(2, "frozen base", frozen_base(tmp.path(), &base, &before));
    report(6, "constraint-strength ordering", ordering(&a, &dd));
    report(7, "config B head asymmetry", head_asymmetry(&b));

    let long = by_preset("A", &MODULATION_SEEDS, 5000);
    report(5, "tactical modulation", modulation(&long));
    report(8, "blended tau hybrid", hybrid(&long));

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
