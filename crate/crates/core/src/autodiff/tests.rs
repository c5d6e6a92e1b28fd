use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(r ⊙ op(params))` with a fixed random projection `r`, so every
/// output element contributes to the loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, g.shape(y), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

/// Grad-checks `build` over the given named tensors; `build` receives the
/// parameter nodes in the order listed.
fn check(
    tensors: Vec<(&str, Tensor<f64>)>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.to_string()).collect();
    let mut store = ParamStore::new();
    for (n, t) in tensors {
        store.insert(n, t);
    }
    let store = &store;
    grad_check(
        store,
        &names,
        |s| {
            let mut g = Graph::new();
            let vars: Vec<Var> = names
                .iter()
                .map(|n| g.param(n, s.get(n).unwrap(), true))
                .collect();
            let y = build(&mut g, &vars);
            Ok((g, y))
        },
        GradCheckOptions {
            max_coords: 64,
            ..Default::default()
        },
    )
    .unwrap()
}

fn assert_passes(report: &GradCheckReport, what: &str) {
    for e in &report.entries {
        assert!(
            !e.flagged,
            "{what}: {} flagged, rel err {}",
            e.name, e.max_rel_error
        );
    }
}

#[test]
fn linear_form_gradient() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::vector(vec![1.0f64, 2.0]), true);
    let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    let (value, grads) = g.forward_backward(loss).unwrap();
    assert_eq!(value, 11.0);
    assert_eq!(grads.param("w").unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn quadratic_minimum_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::vector(vec![0.5f64, -1.5, 2.0]), true);
    let y = g.constant(Tensor::vector(vec![0.5, -1.5, 2.0]));
    let loss = g.mse(x, y).unwrap();
    let (value, grads) = g.forward_backward(loss).unwrap();
    assert_eq!(value, 0.0);
    assert!(grads.param("x").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn tanh_derivative_at_zero() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::scalar(0.0f64), true);
    let t = g.tanh(w);
    let x = g.constant(Tensor::scalar(2.0));
    let loss = g.mul(t, x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("w").unwrap().item(), 2.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::vector(vec![1.0f64, 2.0]), true);
    let y = g.tanh(w);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn shape_mismatch_names_both_nodes() {
    let mut g = Graph::<f64>::new();
    let a = g.param("enc.w", &Tensor::zeros(&[2, 3]), true);
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("enc.w"), "{err}");
    assert!(err.contains("leaf"), "{err}");
}

#[test]
fn param_names_are_unique_per_graph() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::vector(vec![1.0, 2.0]);
    let a = g.param("p", &t, true);
    let b = g.param("p", &t, true);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("p").unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn quadratic_gradcheck_is_near_exact() {
    let report = check(
        vec![("x", Tensor::vector(vec![0.3f64, -1.2, 2.5, 0.7]))],
        |g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            let s = g.scale(sq, 1.5);
            g.sum(s)
        },
    );
    assert!(report.max_rel_error() < 1e-7, "{}", report.max_rel_error());
}

#[test]
fn hard_round_is_flagged_as_discontinuous() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::vector(vec![0.5f64 - 2e-6, 1.3]));
    let names = vec!["x".to_string()];
    let report = grad_check(
        &store,
        &names,
        |s| {
            let mut g = Graph::new();
            g.set_round_mode(RoundMode::Hard);
            let x = g.param("x", s.get("x").unwrap(), true);
            let r = g.round(x);
            let l = g.sum(r);
            Ok((g, l))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.entries[0].discontinuous);
}

#[test]
fn non_finite_perturbation_is_flagged_not_fatal() {
    let mut store = ParamStore::new();
    store.insert("s", Tensor::vector(vec![7.09e-8f64]));
    let names = vec!["s".to_string()];
    let report = grad_check(
        &store,
        &names,
        |s| {
            let mut g = Graph::new();
            let x = g.param("s", s.get("s").unwrap(), true);
            // exp overflows once the perturbation pushes x past ~7e-8.
            let y = g.scale(x, 1e10);
            let e = g.exp(y);
            let l = g.sum(e);
            Ok((g, l))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.entries[0].non_finite);
    assert!(!report.passed());
}

#[test]
fn straight_through_matches_identity_for_linear_downstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = rand_tensor(&mut rng, &[5, 3], 2.0);
    let w0 = rand_tensor(&mut rng, &[3, 4], 1.0);
    let grad = |mode: RoundMode| {
        let mut g = Graph::new();
        g.set_round_mode(mode);
        let x = g.param("x", &x0, true);
        let t = g.tanh(x);
        let t = g.scale(t, 2.0);
        let r = g.round(t);
        let w = g.constant(w0.clone());
        let y = g.linear(r, w, None).unwrap();
        let loss = project(&mut g, y, 9);
        g.backward(loss).unwrap().param("x").unwrap()
    };
    assert_eq!(grad(RoundMode::StraightThrough), grad(RoundMode::Identity));
    assert!(grad(RoundMode::Hard).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_is_causal_and_windowed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, d, window) = (12, 8, 4);
    let base = rand_tensor(&mut rng, &[t, d], 1.0);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.attention(v, v, v, 2, window, 10000.0).unwrap();
        g.value(y).clone()
    };
    let y0 = run(&base);
    for probe in 0..t {
        let mut future = base.clone();
        for r in probe + 1..t {
            future.row_mut(r).iter_mut().for_each(|v| *v += 3.0);
        }
        let mut past = base.clone();
        for r in 0..(probe + 1).saturating_sub(window) {
            past.row_mut(r).iter_mut().for_each(|v| *v -= 5.0);
        }
        assert_eq!(run(&future).row(probe), y0.row(probe));
        assert_eq!(run(&past).row(probe), y0.row(probe));
    }
}

#[test]
fn kl_margin_rejects_non_positive_sigma() {
    let mut g = Graph::<f64>::new();
    let mu = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let s = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(g.kl_margin(mu, s, 0.0).is_err());
}

#[test]
fn l2_normalize_rejects_zero_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    assert!(g.l2_normalize_rows(x).is_err());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = rand_tensor(&mut rng, &[6, 4], 1.0);
        let w0 = rand_tensor(&mut rng, &[3, 4, 4], 0.5);
        let mut g = Graph::new();
        let x = g.param("x", &x0, true);
        let w = g.param("w", &w0, true);
        let y = g.conv(x, w, None, 1, 2).unwrap();
        let y = g.elu(y);
        let loss = project(&mut g, y, 1);
        let (l, grads) = g.forward_backward(loss).unwrap();
        (l, grads.into_params())
    };
    assert_eq!(run(), run());
}

/// Every differentiable op checked against central differences on random
/// small tensors.
fn all_ops_gradcheck(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (5usize, 4usize);

    let r = check(
        vec![
            ("a", rand_tensor(&mut rng, &[t, c], 1.0)),
            ("b", rand_tensor(&mut rng, &[t, c], 1.0)),
            ("v", rand_tensor(&mut rng, &[c], 1.0)),
        ],
        |g, v| {
            let x = g.add(v[0], v[1]).unwrap();
            let x = g.sub(x, v[1]).unwrap();
            let x = g.mul(x, v[1]).unwrap();
            let x = g.add_row(x, v[2]).unwrap();
            let x = g.mul_row(x, v[2]).unwrap();
            let x = g.add_scalar(x, 0.3);
            let x = g.scale(x, -1.7);
            project(g, x, seed)
        },
    );
    assert_passes(&r, "elementwise");

    let r = check(
        vec![
            ("x", rand_tensor(&mut rng, &[t, c], 1.0)),
            ("w", rand_tensor(&mut rng, &[c, 3], 1.0)),
            ("b", rand_tensor(&mut rng, &[3], 1.0)),
            ("p", rand_tensor(&mut rng, &[4, 3], 1.0)),
            ("s", rand_tensor(&mut rng, &[], 1.0)),
        ],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let m = g.matmul_nt(y, v[3]).unwrap();
            let m = g.mul_scalar(m, v[4]).unwrap();
            project(g, m, seed)
        },
    );
    assert_passes(&r, "linear/matmul");

    let r = check(
        vec![
            ("x", rand_tensor(&mut rng, &[7, 3], 1.0)),
            ("w", rand_tensor(&mut rng, &[3, 3, 2], 0.7)),
            ("b", rand_tensor(&mut rng, &[2], 0.5)),
            ("ws", rand_tensor(&mut rng, &[4, 2, 3], 0.7)),
            ("wt", rand_tensor(&mut rng, &[4, 3, 2], 0.7)),
            ("bt", rand_tensor(&mut rng, &[2], 0.5)),
        ],
        |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), 1, 2).unwrap();
            let y = g.conv(y, v[3], None, 2, 1).unwrap();
            let y = g.conv_transpose(y, v[4], Some(v[5]), 2).unwrap();
            project(g, y, seed)
        },
    );
    assert_passes(&r, "conv");

    let r = check(
        vec![
            ("q", rand_tensor(&mut rng, &[6, 8], 1.0)),
            ("k", rand_tensor(&mut rng, &[6, 8], 1.0)),
            ("v", rand_tensor(&mut rng, &[6, 8], 1.0)),
        ],
        |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, 4, 10000.0).unwrap();
            project(g, y, seed)
        },
    );
    assert_passes(&r, "attention");

    // relu and clamp have corners; their inputs stay 0.05 away from them
    let kinked = rand_tensor(&mut rng, &[t, c], 2.0).map(|v| {
        let v = if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v };
        if (v.abs() - 0.8).abs() < 0.05 { v.signum() * 0.9 } else { v }
    });
    let r = check(
        vec![
            ("x", rand_tensor(&mut rng, &[t, c], 2.0)),
            ("g", rand_tensor(&mut rng, &[c], 1.0)),
            ("b", rand_tensor(&mut rng, &[c], 1.0)),
            ("k", kinked),
        ],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let a = g.elu(y);
            let c2 = g.tanh(y);
            let d = g.sigmoid(y);
            let e = g.exp(c2);
            let b = g.relu(v[3]);
            let f = g.clamp(v[3], -0.8, 0.8);
            let x = g.add(a, b).unwrap();
            let x = g.add(x, d).unwrap();
            let x = g.add(x, e).unwrap();
            let x = g.add(x, f).unwrap();
            project(g, x, seed)
        },
    );
    assert_passes(&r, "norm/activations");

    let r = check(
        vec![
            ("tab", rand_tensor(&mut rng, &[5, 3], 1.0)),
            ("x", rand_tensor(&mut rng, &[4, 3], 1.0)),
        ],
        |g, v| {
            let e = g.embedding(v[0], &[1, 3, 3, 0]).unwrap();
            let rep = g.repeat_rows(v[1], 2).unwrap();
            let sl = g.slice_rows(rep, 1, 4).unwrap();
            let cat = g.concat_rows(&[e, sl]).unwrap();
            let n = g.l2_normalize_rows(cat).unwrap();
            let m = g.mean_rows(n).unwrap();
            let p = project(g, m, seed);
            let q = g.mean(cat);
            g.add(p, q).unwrap()
        },
    );
    assert_passes(&r, "gather/reshape");

    let r = check(
        vec![
            ("a", rand_tensor(&mut rng, &[3, 4], 1.0)),
            ("b", rand_tensor(&mut rng, &[3, 4], 1.0)),
            ("mu", rand_tensor(&mut rng, &[3, 4], 1.5)),
            ("sigma", positive_tensor(&mut rng, &[3, 4])),
            ("c", rand_tensor(&mut rng, &[5, 5], 3.0)),
        ],
        |g, v| {
            let m = g.mse(v[0], v[1]).unwrap();
            let k = g.kl_margin(v[2], v[3], 0.05).unwrap();
            let c = g.symmetric_cross_entropy(v[4]).unwrap();
            let x = g.add(m, k).unwrap();
            g.add(x, c).unwrap()
        },
    );
    assert_passes(&r, "losses");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        all_ops_gradcheck(seed);
    }
}
