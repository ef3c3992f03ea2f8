//! Finite-difference oracles for every differentiable op.
//!
//! Central differences at f64 (h = 1e-5) must agree with the analytic VJPs
//! within relative error 1e-4, over 10 random seeds per op.

use tempotrack_tensor::{gradcheck, BnStats, Graph, GradCheckConfig, ParamStore, Rng, Tensor, ValueId};

const SEEDS: u64 = 10;

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-5,
        rel_tol: 1e-4,
        atol: 1e-8,
        sample_per_param: None,
        seed: 0,
    }
}

fn random_param(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, shape: &[usize]) -> tempotrack_tensor::ParamRef<f64> {
    store.register(name, rng.normal_tensor(shape, 0.8), true)
}

fn check_over_seeds(
    shapes: &[(&str, &[usize])],
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> tempotrack_tensor::Result<ValueId>,
) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed * 7919 + 13);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            random_param(&mut store, &mut rng, name, shape);
        }
        let report = gradcheck(&store, |g| build(g, &store), &cfg()).unwrap();
        assert!(report.passed, "seed {seed}: {report}");
    }
}

#[test]
fn matmul_grads_match_finite_differences() {
    check_over_seeds(&[("a", &[4, 5]), ("b", &[5, 3])], |g, s| {
        let a = g.param(s.get("a").unwrap());
        let b = g.param(s.get("b").unwrap());
        let c = g.matmul(a, b)?;
        g.sum_all(c)
    });
}

#[test]
fn batched_matmul_grads() {
    check_over_seeds(&[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], |g, s| {
        let a = g.param(s.get("a").unwrap());
        let b = g.param(s.get("b").unwrap());
        let c = g.matmul(a, b)?;
        g.sum_all(c)
    });
}

#[test]
fn broadcast_matmul_grads() {
    // batched lhs against shared rank-2 rhs (the projection-weight pattern)
    check_over_seeds(&[("a", &[3, 4, 5]), ("w", &[5, 2])], |g, s| {
        let a = g.param(s.get("a").unwrap());
        let w = g.param(s.get("w").unwrap());
        let c = g.matmul(a, w)?;
        g.sum_all(c)
    });
}

#[test]
fn softmax_grads_and_row_sums() {
    check_over_seeds(&[("x", &[6])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let y = g.softmax_lastdim(x)?;
        // weighted sum so the gradient is not identically zero
        let w = g.constant(Tensor::new(vec![6], (0..6).map(|i| i as f64).collect()).unwrap());
        let z = g.mul(y, w)?;
        g.sum_all(z)
    });

    let mut rng = Rng::new(42);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rng.normal_tensor(&[5, 6], 3.0));
    let y = g.softmax_lastdim(x).unwrap();
    for r in 0..5 {
        let row_sum: f64 = g.value(y).data()[r * 6..(r + 1) * 6].iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_grads() {
    check_over_seeds(&[("x", &[3, 8]), ("gamma", &[8]), ("beta", &[8])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let y = g.layer_norm(x, s.get("gamma").unwrap(), s.get("beta").unwrap(), 1e-6)?;
        let w = g.constant(Tensor::from_fn(&[3, 8], |i| (i % 5) as f64 - 2.0));
        let z = g.mul(y, w)?;
        g.sum_all(z)
    });
}

#[test]
fn layer_norm_statistics() {
    let mut rng = Rng::new(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rng.normal_tensor(&[3, 8], 2.5));
    let gamma = tempotrack_tensor::ParamRef::new(Tensor::full(&[8], 1.0), false);
    let beta = tempotrack_tensor::ParamRef::new(Tensor::zeros(&[8]), false);
    let y = g.layer_norm(x, &gamma, &beta, 1e-6).unwrap();
    for r in 0..3 {
        let row = &g.value(y).data()[r * 8..(r + 1) * 8];
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
    }
}

#[test]
fn batch_norm_train_grads() {
    check_over_seeds(&[("x", &[6, 3]), ("gamma", &[3]), ("beta", &[3])], |g, s| {
        let rm = tempotrack_tensor::ParamRef::new(Tensor::zeros(&[3]), false);
        let rv = tempotrack_tensor::ParamRef::new(Tensor::full(&[3], 1.0), false);
        let x = g.param(s.get("x").unwrap());
        let y = g.batch_norm(
            x,
            1,
            s.get("gamma").unwrap(),
            s.get("beta").unwrap(),
            &rm,
            &rv,
            0.1,
            1e-5,
            BnStats::Batch { update_running: true },
        )?;
        let w = g.constant(Tensor::from_fn(&[6, 3], |i| ((i * 3) % 7) as f64 - 3.0));
        let z = g.mul(y, w)?;
        g.sum_all(z)
    });
}

#[test]
fn batch_norm_eval_grads() {
    check_over_seeds(&[("x", &[2, 3, 4]), ("gamma", &[3]), ("beta", &[3])], |g, s| {
        let rm = tempotrack_tensor::ParamRef::new(
            Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
            false,
        );
        let rv = tempotrack_tensor::ParamRef::new(
            Tensor::new(vec![3], vec![0.5, 1.5, 1.0]).unwrap(),
            false,
        );
        let x = g.param(s.get("x").unwrap());
        let y = g.batch_norm(
            x,
            1,
            s.get("gamma").unwrap(),
            s.get("beta").unwrap(),
            &rm,
            &rv,
            0.1,
            1e-5,
            BnStats::Running,
        )?;
        g.sum_all(y)
    });
}

#[test]
fn conv1x1_grads() {
    check_over_seeds(&[("x", &[4, 5, 5]), ("w", &[3, 4]), ("b", &[3])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let y = g.conv1x1(x, s.get("w").unwrap(), s.get("b").unwrap())?;
        let m = g.constant(Tensor::from_fn(&[3, 5, 5], |i| ((i % 11) as f64) / 5.0 - 1.0));
        let z = g.mul(y, m)?;
        g.sum_all(z)
    });
}

#[test]
fn conv1x1_matches_reshape_matmul_oracle() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed + 100);
        let x = rng.normal_tensor::<f64>(&[4, 5, 5], 1.0);
        let w = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let b = rng.normal_tensor::<f64>(&[3], 1.0);

        let mut g = Graph::<f64>::no_grad();
        let x_id = g.constant(x.clone());
        let wp = tempotrack_tensor::ParamRef::new(w.clone(), false);
        let bp = tempotrack_tensor::ParamRef::new(b.clone(), false);
        let direct = g.conv1x1(x_id, &wp, &bp).unwrap();

        // oracle: flatten pixels, multiply by the weight matrix, add bias
        let x_flat = g.reshape(x_id, vec![4, 25]).unwrap();
        let xt = g.transpose_last2(x_flat).unwrap(); // [25, 4]
        let w_id = g.constant(w);
        let wt = g.transpose_last2(w_id).unwrap(); // [4, 3]
        let prod = g.matmul(xt, wt).unwrap(); // [25, 3]
        let b_id = g.constant(b);
        let biased = g.add_bias(prod, b_id).unwrap();
        let back = g.transpose_last2(biased).unwrap(); // [3, 25]
        let oracle = g.reshape(back, vec![3, 5, 5]).unwrap();

        let max_diff = g
            .value(direct)
            .data()
            .iter()
            .zip(g.value(oracle).data())
            .map(|(a, o)| (a - o).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "seed {seed}: max diff {max_diff}");
    }
}

#[test]
fn activation_grads() {
    // keep relu/abs inputs away from the kink at zero
    check_over_seeds(&[("x", &[7])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let r = g.relu(x)?;
        let e = g.gelu(r)?;
        let t = g.sigmoid(e)?;
        g.sum_all(t)
    });
}

#[test]
fn log_div_clamp_abs_grads() {
    check_over_seeds(&[("x", &[5])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let sq = g.mul(x, x)?;
        let shifted = {
            let one = g.constant(Tensor::full(&[5], 1.0));
            g.add(sq, one)?
        }; // > 0, safe for ln and div
        let l = g.ln(shifted)?;
        let d = g.div(l, shifted)?;
        let c = g.clamp(d, -0.4, 0.4)?;
        let a = g.abs(c)?;
        g.sum_all(a)
    });
}

#[test]
fn min_max_grads() {
    check_over_seeds(&[("a", &[6]), ("b", &[6])], |g, s| {
        let a = g.param(s.get("a").unwrap());
        let b = g.param(s.get("b").unwrap());
        let lo = g.min_elem(a, b)?;
        let hi = g.max_elem(a, b)?;
        let d = g.mul(lo, hi)?;
        g.sum_all(d)
    });
}

#[test]
fn composed_chain_matches_finite_differences() {
    // matmul -> softmax -> layer_norm chain, the backbone op pattern
    check_over_seeds(
        &[("x", &[4, 6]), ("w", &[6, 6]), ("gamma", &[6]), ("beta", &[6])],
        |g, s| {
            let x = g.param(s.get("x").unwrap());
            let w = g.param(s.get("w").unwrap());
            let h = g.matmul(x, w)?;
            let a = g.softmax_lastdim(h)?;
            let y = g.layer_norm(a, s.get("gamma").unwrap(), s.get("beta").unwrap(), 1e-6)?;
            let m = g.constant(Tensor::from_fn(&[4, 6], |i| (i % 3) as f64));
            let z = g.mul(y, m)?;
            g.sum_all(z)
        },
    );
}

#[test]
fn shape_op_grads() {
    check_over_seeds(&[("x", &[2, 3, 4])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let p = g.permute(x, &[1, 2, 0])?;
        let r = g.reshape(p, vec![6, 4])?;
        let parts = g.split(r, 0, &[2, 4])?;
        let back = g.concat(&[parts[1], parts[0]], 0)?;
        let w = g.constant(Tensor::from_fn(&[6, 4], |i| (i as f64).sin()));
        let z = g.mul(back, w)?;
        g.sum_all(z)
    });
}

#[test]
fn add_bias_grads() {
    check_over_seeds(&[("x", &[5, 3]), ("b", &[3])], |g, s| {
        let x = g.param(s.get("x").unwrap());
        let b = g.param(s.get("b").unwrap());
        let y = g.add_bias(x, b)?;
        let w = g.constant(Tensor::from_fn(&[5, 3], |i| (i % 4) as f64 - 1.5));
        let z = g.mul(y, w)?;
        g.sum_all(z)
    });
}

#[test]
fn frozen_param_untouched_by_backward() {
    let mut store = ParamStore::<f64>::new();
    let frozen = store.register("frozen", Tensor::full(&[3], 2.0), false);
    let live = store.register("live", Tensor::full(&[3], 1.0), true);
    let mut g = Graph::new();
    let a = g.param(&frozen);
    let b = g.param(&live);
    let c = g.mul(a, b).unwrap();
    let loss = g.sum_all(c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(frozen.borrow().grad.data(), &[0.0, 0.0, 0.0]);
    assert_eq!(live.borrow().grad.data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn deterministic_forward() {
    let run = || {
        let mut rng = Rng::new(99);
        let mut g = Graph::<f32>::new();
        let x = g.constant(rng.normal_tensor(&[8, 8], 1.0));
        let w = g.constant(rng.normal_tensor(&[8, 8], 1.0));
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax_lastdim(h).unwrap();
        g.value(s).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
