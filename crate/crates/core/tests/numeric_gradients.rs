//! Finite-difference and property checks for the autodiff primitives.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacticraft_core::categorical::{kl_categorical, log_softmax};
use tacticraft_core::gradcheck::{finite_diff_check, relative_error_at, GradCheckOptions};
use tacticraft_core::nn::{Init, LstmCell};
use tacticraft_core::{Graph, ParamStore, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn linear_sum_has_unit_gradient() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.3, -2.0, 5.0, 1.5]).unwrap().trainable());
    let report = finite_diff_check(&store, |g, p| g.sum(p[store.find("w").unwrap()]), opts()).unwrap();
    assert!(report.max_rel_error() < 1e-9, "{report:?}");
}

#[test]
fn frozen_tensor_excluded_from_report() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.3, -2.0]).unwrap().trainable());
    let c = store.add("c", Tensor::vector(vec![1.0, 2.0]).unwrap());
    let report = finite_diff_check(
        &store,
        |g, p| {
            let y = g.mul(p[w], p[c])?;
            g.sum(y)
        },
        opts(),
    )
    .unwrap();
    assert!(report.entry("w").is_some());
    assert!(report.entry("c").is_none());
}

#[test]
fn large_objective_offset_does_not_fail_zero_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.0, 1e-7, 0.5]).unwrap().trainable());
    let report = finite_diff_check(
        &store,
        |g, p| {
            let sq = g.mul(p[w], p[w])?;
            let s = g.sum(sq)?;
            let c = g.constant(g.shape(s).to_vec(), vec![1e4])?;
            g.add(s, c)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
    // a real discrepancy is still caught at that scale
    assert!(relative_error_at(1.0, 1.001, 1e4) > 1e-4);
    assert!(relative_error_at(0.0, 1e-3, 1e4) > 1e-4);
}

#[test]
fn eps_out_of_range_rejected() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0]).unwrap().trainable());
    let bad = GradCheckOptions { eps: 1e-2, ..opts() };
    assert!(finite_diff_check(&store, |g, p| g.sum(p[w]), bad).is_err());
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mut vals: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    // keep away from the kink
    for v in &mut vals {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let x = store.add("x", Tensor::vector(vals).unwrap().trainable());
    let w = store.add("w", random_tensor(&mut rng, vec![12], 1.0));
    let report = finite_diff_check(
        &store,
        |g, p| {
            let r = g.relu(p[x])?;
            let y = g.mul(r, p[w])?;
            g.sum(y)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn matmul_and_softmax_chain_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng, vec![3, 4], 1.0).trainable());
    let b = store.add("b", random_tensor(&mut rng, vec![4, 5], 1.0).trainable());
    let mask = [true, false, true, true, false, true, true, true, false, true, true, true, true, true, false];
    let report = finite_diff_check(
        &store,
        |g, p| {
            let c = g.matmul(p[a], p[b])?;
            let t = g.tanh(c)?;
            let ls = g.log_softmax(t, Some(&mask))?;
            let picked = g.pick(ls, &[0, 2, 3])?;
            g.mean(picked)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn kl_between_parameterized_softmaxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let p = store.add("p", random_tensor(&mut rng, vec![2, 9], 1.5).trainable());
    let q = store.add("q", random_tensor(&mut rng, vec![2, 9], 1.5).trainable());
    for detach in [true, false] {
        let report = finite_diff_check(
            &store,
            |g, b| {
                let kl = g.kl_rows(b[p], b[q], None, detach)?;
                g.sum(kl)
            },
            opts(),
        )
        .unwrap();
        assert!(report.entry("q").unwrap().max_rel_error < 1e-4, "{report:?}");
        if detach {
            // detached teacher: analytic grad is zero, numeric is not
            assert!(report.entry("p").unwrap().max_rel_error > 1e-3);
        } else {
            assert!(report.max_rel_error() < 1e-4, "{report:?}");
        }
    }
}

#[test]
fn detached_teacher_receives_no_gradient() {
    let mut g = Graph::new();
    let p = g.leaf(&Tensor::new(vec![1, 3], vec![0.1, 0.5, -0.2]).unwrap().trainable());
    let q = g.leaf(&Tensor::new(vec![1, 3], vec![0.3, -0.5, 0.9]).unwrap().trainable());
    let kl = g.kl_rows(p, q, None, true).unwrap();
    let s = g.sum(kl).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(p).is_none());
    assert!(g.grad(q).is_some());
}

#[test]
fn bernoulli_and_bce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let p = store.add("p", random_tensor(&mut rng, vec![2, 5], 2.0).trainable());
    let q = store.add("q", random_tensor(&mut rng, vec![2, 5], 2.0).trainable());
    let mask = [true, true, false, true, true, true, false, false, true, true];
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let report = finite_diff_check(
        &store,
        |g, b| {
            let kl = g.bernoulli_kl_rows(b[p], b[q], Some(&mask), false)?;
            let bce = g.bce_rows(b[q], &targets, Some(&mask))?;
            let s = g.add(kl, bce)?;
            g.sum(s)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn pointer_and_pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let keys = store.add("keys", random_tensor(&mut rng, vec![6, 4], 1.0).trainable());
    let query = store.add("query", random_tensor(&mut rng, vec![2, 4], 1.0).trainable());
    let ent = store.add("ent", random_tensor(&mut rng, vec![6, 3], 1.0).trainable());
    let skip = store.add("skip", random_tensor(&mut rng, vec![6, 4], 1.0).trainable());
    let gain = store.add("gain", random_tensor(&mut rng, vec![4], 1.0).trainable());
    let s = store.add("s", random_tensor(&mut rng, vec![1], 1.0).trainable());
    let mask = [true, false, true, true, true, false];
    let report = finite_diff_check(
        &store,
        |g, b| {
            let scores = g.group_dot(b[keys], b[query], 3)?;
            let ls = g.log_softmax(scores, Some(&mask))?;
            let pooled = g.group_masked_mean(b[ent], &mask, 3)?;
            let ps = g.sum(pooled)?;
            let grouped = g.add_group(b[skip], b[query], 3)?;
            let grouped = g.mul_row(grouped, b[gain])?;
            let grouped = g.sigmoid(grouped)?;
            let grouped = g.mul_scalar_var(grouped, b[s])?;
            let gs = g.sum(grouped)?;
            let tiled = g.add_tiled(b[skip], b[query])?;
            let tiled = g.tanh(tiled)?;
            let ts = g.sum(tiled)?;
            let gs = g.add(gs, ts)?;
            let picked = g.pick(ls, &[0, 1])?;
            let pk = g.sum(picked)?;
            let a = g.add(ps, gs)?;
            g.add(a, pk)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn two_step_lstm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, Init::Uniform(0.5), &mut rng);
    store.unfreeze();
    let x0 = random_tensor(&mut rng, vec![2, 3], 1.0);
    let x1 = random_tensor(&mut rng, vec![2, 3], 1.0);
    let w = random_tensor(&mut rng, vec![2, 4], 1.0);
    let report = finite_diff_check(
        &store,
        |g, p| {
            let h = g.constant(vec![2, 4], vec![0.0; 8])?;
            let c = g.constant(vec![2, 4], vec![0.0; 8])?;
            let a = g.leaf(&x0);
            let b = g.leaf(&x1);
            let (h, c) = cell.forward(g, p, a, h, c)?;
            let (h, _) = cell.forward(g, p, b, h, c)?;
            let wv = g.leaf(&w);
            let y = g.mul(h, wv)?;
            g.sum(y)
        },
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{report:?}");
}

#[test]
fn kl_nonnegative_over_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let p: Vec<f64> = (0..9).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q: Vec<f64> = (0..9).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert!(kl_categorical(&p, &q, None).unwrap() >= 0.0);
    }
}

proptest! {
    #[test]
    fn log_softmax_normalizes(xs in prop::collection::vec(-50.0f64..50.0, 1..300), c in -100.0f64..100.0) {
        let out = log_softmax(&xs, None).unwrap();
        let total: f64 = out.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let out2 = log_softmax(&shifted, None).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_log_softmax_normalizes_over_support(
        xs in prop::collection::vec(-20.0f64..20.0, 2..64),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = xs.iter().map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let out = log_softmax(&xs, Some(&mask)).unwrap();
        let total: f64 = out.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (v, m) in out.iter().zip(&mask) {
            if !*m {
                prop_assert_eq!(v.exp(), 0.0);
            }
        }
    }
}

#[test]
fn log_softmax_normalizes_at_ten_thousand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-30.0..30.0)).collect();
    let total: f64 = log_softmax(&xs, None).unwrap().iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
