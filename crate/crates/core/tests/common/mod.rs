//! Property checks shared by the standalone property tests and the
//! acceptance runner. Each returns `Err` with the failing case.

use invexnet::autodiff::{Tape, Tensor};
use invexnet::classifier::ConnectedClassifierState;
use invexnet::gcgp::{out_clip, pg_penalty};
use invexnet::nn::{spectral_normalize, value_and_input_grad, Activation, ConvexNet, InvertibleNet, Mlp, Module, SpectralState};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type CaseResult = Result<(), TestCaseError>;

fn run<S>(name: &str, cases: u32, strategy: S, test: impl Fn(S::Value) -> CaseResult) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> CaseResult {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

fn fail(e: invexnet::Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

const SMOOTH: [Activation; 5] = [Activation::Elu, Activation::Swish, Activation::Sigmoid, Activation::Sigmoid4, Activation::None];

/// Relative error with a floor on the denominator, so near-zero gradients are
/// compared on an absolute scale of 1e-3.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// First- and second-order tape gradients agree with central differences.
pub fn autodiff_finite_differences() -> Result<(), String> {
    let h = 1e-5;
    run("input gradients", 48, (any::<u64>(), 0..SMOOTH.len(), 1usize..4), |(seed, act, dim)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[dim, 6, 5, 1], SMOOTH[act], Activation::None, &mut rng);
        let x = uniform(&mut rng, 5, dim, -2.0, 2.0);
        let (_, g) = value_and_input_grad(&x, |tape, xv| {
            let p = net.bind(tape, false);
            net.forward(tape, &p, xv)
        })
        .map_err(fail)?;
        for i in 0..x.rows() {
            for j in 0..dim {
                let mut xp = x.select_rows(&[i]);
                let mut xm = xp.clone();
                xp.set(0, j, x.get(i, j) + h);
                xm.set(0, j, x.get(i, j) - h);
                let fd = (net.eval(&xp).map_err(fail)?.item() - net.eval(&xm).map_err(fail)?.item()) / (2.0 * h);
                let e = rel_err(g.get(i, j), fd);
                check(e < 1e-4, || format!("d/dx[{i},{j}]: tape {} fd {fd} rel err {e}", g.get(i, j)))?;
            }
        }
        Ok(())
    })?;

    // d/dtheta of sum_i (grad_x f(x_i) . d_i)^2, which needs a second sweep
    // through the first-order gradient graph.
    let loss = |net: &Mlp, x: &Tensor, d: &Tensor| -> invexnet::Result<f64> {
        let (_, g) = value_and_input_grad(x, |tape, xv| {
            let p = net.bind(tape, false);
            net.forward(tape, &p, xv)
        })?;
        Ok((0..x.rows())
            .map(|i| g.row_slice(i).iter().zip(d.row_slice(i)).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum())
    };
    run("parameter gradients through input gradients", 24, (any::<u64>(), 0..SMOOTH.len() - 1), |(seed, act)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&[2, 5, 4, 1], SMOOTH[act], Activation::None, &mut rng);
        let x = uniform(&mut rng, 6, 2, -2.0, 2.0);
        let d = uniform(&mut rng, 6, 2, -1.0, 1.0);
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, true);
        let xv = tape.var(x.clone());
        let y = net.forward(&mut tape, &params, xv).map_err(fail)?;
        let total = tape.sum(y);
        let gx = tape.grad(total, &[xv]).map_err(|e| fail(e.into()))?[0];
        let dv = tape.constant(d.clone());
        let pg = tape.row_dot(gx, dv).map_err(|e| fail(e.into()))?;
        let sq = tape.mul(pg, pg).map_err(|e| fail(e.into()))?;
        let l = tape.sum(sq);
        let grads = tape.backward(l, &params, &[]).map_err(|e| fail(e.into()))?;
        for (k, g) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let orig = net.parameters()[k].data()[e];
                net.parameters_mut()[k].data_mut()[e] = orig + h;
                let lp = loss(&net, &x, &d).map_err(fail)?;
                net.parameters_mut()[k].data_mut()[e] = orig - h;
                let lm = loss(&net, &x, &d).map_err(fail)?;
                net.parameters_mut()[k].data_mut()[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = rel_err(g.data()[e], fd);
                check(err < 1e-4, || format!("param {k}[{e}]: tape {} fd {fd} rel err {err}", g.data()[e]))?;
            }
        }
        Ok(())
    })
}

/// `inverse(eval(x))` recovers `x`.
pub fn invertibility_roundtrip() -> Result<(), String> {
    run(
        "invertible round trip",
        32,
        (any::<u64>(), 2usize..5, 1usize..6, any::<bool>(), 0.3f64..0.97),
        |(seed, dim, blocks, bn, coeff)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = InvertibleNet::new(dim, blocks, 12, 3, Activation::LeakyRelu, coeff, bn, &mut rng).map_err(fail)?;
            if bn {
                let warm = uniform(&mut rng, 64, dim, -4.0, 2.0);
                net.refresh_statistics(&warm).map_err(fail)?;
            }
            net.set_training(false);
            let x = uniform(&mut rng, 32, dim, -3.0, 3.0);
            let y = net.eval_direct(&x).map_err(fail)?;
            let back = net.inverse(&y).map_err(fail)?;
            let err = back.zip_map(&x, |a, b| (a - b).abs()).max_abs();
            check(err < 1e-5, || format!("max |x - inverse(eval(x))| = {err}"))
        },
    )
}

fn svd_max(w: &Tensor) -> f64 {
    let (r, c) = w.dims2();
    let m = nalgebra::DMatrix::from_row_slice(r, c, w.data());
    m.singular_values().max()
}

/// Power-iteration estimates agree with the largest singular value.
pub fn spectral_norm_vs_svd() -> Result<(), String> {
    run("spectral norm", 64, (any::<u64>(), 1usize..9, 1usize..9, 0.1f64..5.0), |(seed, r, c, scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::matrix(r, c, (0..r * c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
        let sigma = svd_max(&w);
        let mut state = SpectralState::new(r, c, 0.9, &mut rng);
        let est = state.estimate(&w, 500);
        check((est - sigma).abs() <= 1e-3 * sigma, || format!("estimate {est} vs svd {sigma}"))?;
        let projected = spectral_normalize(&w, &mut state, 5).map_err(fail)?;
        let after = svd_max(&projected);
        check(after <= 0.9 * (1.0 + 1e-3), || format!("normalized norm {after} exceeds 0.9"))
    })
}

/// Jensen's inequality holds for the convex comparison net.
pub fn convexity_inequality() -> Result<(), String> {
    let acts = [Activation::Relu, Activation::LeakyRelu, Activation::Elu];
    run("convexity", 64, (any::<u64>(), 0..acts.len(), 1usize..4, 0.0f64..=1.0), |(seed, act, dim, t)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ConvexNet::new(&[dim, 8, 8, 1], acts[act], &mut rng).map_err(fail)?;
        let a = uniform(&mut rng, 16, dim, -3.0, 3.0);
        let b = uniform(&mut rng, 16, dim, -3.0, 3.0);
        let mid = a.zip_map(&b, |p, q| t * p + (1.0 - t) * q);
        let (fa, fb, fm) = (net.eval(&a).map_err(fail)?, net.eval(&b).map_err(fail)?, net.eval(&mid).map_err(fail)?);
        for i in 0..16 {
            let chord = t * fa.get(i, 0) + (1.0 - t) * fb.get(i, 0);
            let tol = 1e-9 * (1.0 + chord.abs());
            check(fm.get(i, 0) <= chord + tol, || format!("f(mid) {} > chord {chord}", fm.get(i, 0)))?;
        }
        Ok(())
    })
}

fn random_state(rng: &mut ChaCha8Rng, regions: usize, dim: usize, classes: usize) -> ConnectedClassifierState {
    let centers = uniform(rng, regions, dim, -2.0, 2.0);
    let assign: Vec<usize> = (0..regions).map(|_| rng.random_range(0..classes)).collect();
    let mut s = ConnectedClassifierState::euclidean(centers, &assign, classes, 1.0).expect("valid state");
    s.region_class_logits = uniform(rng, regions, classes, -3.0, 3.0);
    s.inverse_temp = rng.random_range(-2.0..2.0);
    s
}

fn nearest(z: &[f64], centers: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for r in 0..centers.rows() {
        let d: f64 = z.iter().zip(centers.row_slice(r)).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Softmax rows are distributions and shift invariant; hard regions form a
/// nearest-center partition that does not depend on the temperature.
pub fn softmax_partition_argmax() -> Result<(), String> {
    run("softmax", 64, (any::<u64>(), 1usize..6, 1usize..7, -50.0f64..50.0), |(seed, rows, cols, shift)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, rows, cols, -20.0, 20.0);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let sv = tape.constant(a.map(|v| v + shift));
        let p = tape.softmax(av, 1).map_err(|e| fail(e.into()))?;
        let q = tape.softmax(sv, 1).map_err(|e| fail(e.into()))?;
        let (p, q) = (tape.value(p).clone(), tape.value(q).clone());
        for i in 0..rows {
            let s: f64 = p.row_slice(i).iter().sum();
            check((s - 1.0).abs() < 1e-12, || format!("row {i} sums to {s}"))?;
            check(p.row_slice(i).iter().all(|&v| v >= 0.0), || format!("negative entry in row {i}"))?;
        }
        let diff = p.zip_map(&q, |x, y| (x - y).abs()).max_abs();
        check(diff < 1e-12, || format!("shift changed softmax by {diff}"))
    })?;
    run(
        "partition",
        64,
        (any::<u64>(), 1usize..7, 1usize..4, 1usize..5, -3.0f64..3.0),
        |(seed, regions, dim, classes, other_temp)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_state(&mut rng, regions, dim, classes);
            let z = uniform(&mut rng, 40, dim, -3.0, 3.0);
            let hard = s.hard_regions(&z).map_err(fail)?;
            let probs = s.class_probs();
            for (mode, out) in [("soft", s.classify(&z, false)), ("hard", s.classify(&z, true))] {
                let out = out.map_err(fail)?;
                for i in 0..z.rows() {
                    let sum: f64 = out.row_slice(i).iter().sum();
                    check((sum - 1.0).abs() < 1e-12, || format!("{mode} row {i} sums to {sum}"))?;
                }
            }
            let hard_out = s.classify(&z, true).map_err(fail)?;
            for (i, &r) in hard.iter().enumerate() {
                check(r == nearest(z.row_slice(i), &s.weight), || format!("row {i}: region {r} is not the nearest center"))?;
                check(hard_out.row_slice(i) == probs.row_slice(r), || format!("row {i}: hard output is not region {r}'s class row"))?;
            }
            s.inverse_temp = other_temp;
            check(s.hard_regions(&z).map_err(fail)? == hard, || "hard regions changed with the temperature".into())
        },
    )
}

/// Pointwise values and shape of the output clip and projected-gradient penalty.
pub fn gcgp_pointwise() -> Result<(), String> {
    let ln2 = std::f64::consts::LN_2;
    let cases = [
        ("out_clip(0)", out_clip(0.0), ln2 / 20.0, 1e-12),
        ("out_clip(1)", out_clip(1.0), 2.9155439994, 1e-12),
        ("out_clip(-1)", out_clip(-1.0), (-20.0f64).exp().ln_1p() / 20.0, 1e-20),
        ("pg_penalty(0.1)", pg_penalty(0.1), -ln2 / 4.0, 1e-12),
        ("pg_penalty(-1)", pg_penalty(-1.0), -0.25 * (22.0 + (-22.0f64).exp().ln_1p()), 1e-12),
    ];
    for (name, got, want, tol) in cases {
        if (got - want).abs() > tol {
            return Err(format!("{name} = {got}, expected {want}"));
        }
    }
    if pg_penalty(10.0).abs() >= 1e-10 {
        return Err(format!("pg_penalty(10) = {}", pg_penalty(10.0)));
    }
    let n = 1_000_000;
    let (mut prev_clip, mut prev_pen) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in 0..=n {
        let pg = -5.0 + 10.0 * k as f64 / n as f64;
        let (c, p) = (out_clip(pg), pg_penalty(pg));
        if c < prev_clip || p < prev_pen || c <= 0.0 || p > 0.0 {
            return Err(format!("monotonicity or sign fails at pg = {pg}: clip {c}, penalty {p}"));
        }
        (prev_clip, prev_pen) = (c, p);
    }
    Ok(())
}

/// Soft outputs are within 1e-6 of hard outputs once the scaled score gap
/// exceeds 30.
pub fn soft_to_hard_convergence() -> Result<(), String> {
    run("soft to hard", 64, (any::<u64>(), 2usize..8, 1usize..4, 1usize..5), |(seed, regions, dim, classes)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = random_state(&mut rng, regions, dim, classes);
        let z = uniform(&mut rng, 64, dim, -3.0, 3.0);
        // Unscaled scores: -(distance / sqrt(D)).
        let gaps: Vec<f64> = (0..z.rows())
            .map(|i| {
                let mut d: Vec<f64> = (0..regions)
                    .map(|r| {
                        let sq: f64 = z.row_slice(i).iter().zip(s.weight.row_slice(r)).map(|(a, b)| (a - b).powi(2)).sum();
                        sq.sqrt() / (dim as f64).sqrt()
                    })
                    .collect();
                d.sort_by(f64::total_cmp);
                d[1] - d[0]
            })
            .collect();
        let keep: Vec<usize> = (0..z.rows()).filter(|&i| gaps[i] > 1e-3).collect();
        if keep.is_empty() {
            return Ok(());
        }
        let min_gap = keep.iter().map(|&i| gaps[i]).fold(f64::INFINITY, f64::min);
        s.inverse_temp = (30.0 / min_gap).ln() + 1e-9;
        let z = z.select_rows(&keep);
        let soft = s.classify(&z, false).map_err(fail)?;
        let hard = s.classify(&z, true).map_err(fail)?;
        let diff = soft.zip_map(&hard, |a, b| (a - b).abs()).max_abs();
        check(diff < 1e-6, || format!("max |soft - hard| = {diff} at scaled gap 30"))
    })
}
