//! Behavioral checks on the pairwise Stein kernel k⁰: pinned hand-computed
//! values, the kernel-property invariants (symmetry, positive
//! semidefiniteness of Gram matrices), collapse to the classical
//! score-kernel form, equality of the structured fast paths with the dense
//! reference, θ-gradient correctness, and the small-bandwidth limit that
//! connects the kernelized discrepancy to score matching.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use stein_estim::diffusion::builtin_diffusion;
use stein_estim::kernel::{scalar_kernel, FnWeight, MatrixKernel, WeightedKernel};
use stein_estim::linalg::min_eigval_symmetric;
use stein_estim::model::{builtin_model, ModelSpec};
use stein_estim::num::rel_err;
use stein_estim::steinkern::{
    dsm_limit_check, KnownDensity, SteinKernelCtx, ThetaGradMode,
};

fn hyper(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn rand_points(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| -1.8 + 3.6 * rng.gen::<f64>())
}

/// Standard-normal model: mean/per-coordinate-σ Gaussian at (0, 1).
fn std_normal_ctx(sample: ndarray::ArrayView2<f64>) -> SteinKernelCtx {
    let model = builtin_model("gaussian_meancov", &hyper(&[("d", 1.0)])).unwrap();
    let kernel =
        MatrixKernel::isotropic(1, 1.0, scalar_kernel("gaussian", &hyper(&[])).unwrap()).unwrap();
    let diffusion = builtin_diffusion("identity", &hyper(&[])).unwrap();
    SteinKernelCtx::new(model, kernel, diffusion, array![0.0, 1.0], sample).unwrap()
}

#[test]
fn standard_normal_identity_kernel_at_origin_equals_one() {
    // At x = y = 0 the score and all divergence terms vanish; only the
    // trace of the kernel cross-derivative survives, and with unit
    // lengthscale that is exactly 1.
    let sample = array![[0.0]];
    let ctx = std_normal_ctx(sample.view());
    let k0 = ctx.stein_kernel(array![0.0].view(), array![0.0].view()).unwrap();
    assert!((k0 - 1.0).abs() < 1e-14, "k⁰(0,0) = {k0}");
}

#[test]
fn stein_kernel_is_symmetric() {
    let model = builtin_model("student_t", &hyper(&[("d", 3.0), ("nu", 5.0)])).unwrap();
    let kern = scalar_kernel("imq", &hyper(&[("c", 1.0), ("beta", -0.5)])).unwrap();
    let mut b = Array2::<f64>::eye(3);
    b[[0, 1]] = 0.4;
    b[[1, 0]] = 0.4;
    b[[2, 2]] = 1.5;
    let kernel = MatrixKernel::scaled(b, kern).unwrap();
    let diffusion = builtin_diffusion("student_loc", &hyper(&[("d", 3.0)])).unwrap();
    let theta = array![0.2, -0.4, 0.1, 1.1];
    let sample = array![[0.0, 0.0, 0.0]];
    let ctx = SteinKernelCtx::new(model, kernel, diffusion, theta, sample.view()).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let x = Array1::from_shape_fn(3, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let y = Array1::from_shape_fn(3, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let kxy = ctx.stein_kernel(x.view(), y.view()).unwrap();
        let kyx = ctx.stein_kernel(y.view(), x.view()).unwrap();
        assert!(
            (kxy - kyx).abs() < 1e-10 * (1.0 + kxy.abs()),
            "asymmetry {kxy} vs {kyx}"
        );
    }
}

#[test]
fn stein_gram_matrix_is_positive_semidefinite() {
    let n = 30;
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let pts = rand_points(&mut rng, n, 2);

    let model = builtin_model("gaussian_location", &hyper(&[("d", 2.0)])).unwrap();
    let kernel =
        MatrixKernel::isotropic(2, 1.0, scalar_kernel("gaussian", &hyper(&[("lengthscale", 0.8)])).unwrap())
            .unwrap();
    let diffusion = builtin_diffusion("decay", &hyper(&[("d", 2.0)])).unwrap();
    let ctx =
        SteinKernelCtx::new(model, kernel, diffusion, array![0.3, -0.2], pts.view()).unwrap();

    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            gram[[i, j]] = ctx.stein_kernel_pair(i, j);
        }
    }
    // enforce exact symmetry for the eigensolver; asymmetry is ~1e-16
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (gram[[i, j]] + gram[[j, i]]);
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    let trace: f64 = (0..n).map(|i| gram[[i, i]]).sum();
    let min_eig = min_eigval_symmetric(&gram).unwrap();
    assert!(
        min_eig >= -1e-8 * (trace / n as f64),
        "min eigenvalue {min_eig:.3e}, trace/n {:.3e}",
        trace / n as f64
    );
}

#[test]
fn identity_diffusion_collapses_to_classical_score_kernel() {
    // m = I, K = I·k: k⁰ must equal the familiar
    //   ⟨s(x), s(y)⟩k + ⟨s(x), ∇_y k⟩ + ⟨s(y), ∇_x k⟩ + Σᵢ ∂²k/∂xᵢ∂yᵢ
    // with s = ∇log p.
    let d = 3;
    let model = builtin_model("student_t", &hyper(&[("d", 3.0), ("nu", 4.0)])).unwrap();
    let kern = scalar_kernel("imq", &hyper(&[("c", 1.2), ("beta", -0.5)])).unwrap();
    let kernel = MatrixKernel::isotropic(d, 1.0, kern.clone()).unwrap();
    let diffusion = builtin_diffusion("identity", &hyper(&[("d", 3.0)])).unwrap();
    let theta = array![0.1, 0.4, -0.3, 1.2];
    let sample = array![[0.0, 0.0, 0.0]];
    let ctx =
        SteinKernelCtx::new(model.clone(), kernel, diffusion, theta.clone(), sample.view())
            .unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(19);
    for _ in 0..200 {
        let x = Array1::from_shape_fn(d, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let y = Array1::from_shape_fn(d, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let sx = model.score_x(x.view(), theta.view()).unwrap();
        let sy = model.score_x(y.view(), theta.view()).unwrap();
        let k = kern.eval(x.view(), y.view());
        let gkx = kern.grad_x(x.view(), y.view());
        let gky = kern.grad_y(x.view(), y.view());
        let hk = kern.grad_xy(x.view(), y.view());
        let classical = sx.dot(&sy) * k
            + sx.dot(&gky)
            + sy.dot(&gkx)
            + (0..d).map(|i| hk[[i, i]]).sum::<f64>();
        let k0 = ctx.stein_kernel(x.view(), y.view()).unwrap();
        assert!(
            (k0 - classical).abs() < 1e-12 * (1.0 + classical.abs()),
            "collapse mismatch {k0} vs {classical}"
        );
    }
}

#[test]
fn scalar_diffusion_equals_weighted_scalar_kernel() {
    // m = h·I with K = I·k is the same discrepancy kernel as m = I with the
    // separably weighted kernel h(x)·k(x,y)·h(y), pointwise.
    let d = 2;
    let model = builtin_model("gaussian_location", &hyper(&[("d", 2.0)])).unwrap();
    let theta = array![0.4, -0.6];
    let base = scalar_kernel("gaussian", &hyper(&[("lengthscale", 1.3)])).unwrap();
    let sample = array![[0.0, 0.0]];

    // route 1: decay diffusion h(x) = 1/(1+‖x‖²)
    let diffusion = builtin_diffusion("decay", &hyper(&[("d", 2.0)])).unwrap();
    let kernel1 = MatrixKernel::isotropic(d, 1.0, base.clone()).unwrap();
    let ctx1 = SteinKernelCtx::new(
        model.clone(),
        kernel1,
        diffusion,
        theta.clone(),
        sample.view(),
    )
    .unwrap();

    // route 2: identity diffusion, kernel weighted by the same h
    let weight = FnWeight {
        eval_fn: |x: ndarray::ArrayView1<f64>| {
            1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>())
        },
        grad_fn: |x: ndarray::ArrayView1<f64>| {
            let h = 1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>());
            x.mapv(|v| -2.0 * v * h * h)
        },
    };
    let weighted = Arc::new(WeightedKernel::new(base, Arc::new(weight)));
    let kernel2 = MatrixKernel::isotropic(d, 1.0, weighted).unwrap();
    let identity = builtin_diffusion("identity", &hyper(&[("d", 2.0)])).unwrap();
    let ctx2 = SteinKernelCtx::new(model, kernel2, identity, theta, sample.view()).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(29);
    for _ in 0..200 {
        let x = Array1::from_shape_fn(d, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let y = Array1::from_shape_fn(d, |_| -2.0 + 4.0 * rng.gen::<f64>());
        let a = ctx1.stein_kernel(x.view(), y.view()).unwrap();
        let b = ctx2.stein_kernel(x.view(), y.view()).unwrap();
        assert!(
            (a - b).abs() < 1e-12 * (1.0 + a.abs()),
            "weighted-kernel equivalence {a} vs {b}"
        );
    }
}

/// Contexts covering both structured fast paths with several diffusions.
fn fast_path_cases() -> Vec<(String, SteinKernelCtx)> {
    let d = 3;
    let model = builtin_model("student_t", &hyper(&[("d", 3.0), ("nu", 5.0)])).unwrap();
    let theta = array![0.3, -0.2, 0.5, 1.2];
    let sample = array![[0.0, 0.0, 0.0]];
    let gauss = scalar_kernel("gaussian", &hyper(&[("lengthscale", 0.9)])).unwrap();
    let imq = scalar_kernel("imq", &hyper(&[("c", 1.1), ("beta", -0.6)])).unwrap();

    let mut b = Array2::<f64>::eye(d);
    b[[0, 1]] = 0.35;
    b[[1, 0]] = 0.35;
    b[[1, 2]] = -0.2;
    b[[2, 1]] = -0.2;
    b[[2, 2]] = 1.4;

    let mut cases = Vec::new();
    for (dname, dh) in [
        ("identity", hyper(&[("d", 3.0)])),
        ("student_loc", hyper(&[("d", 3.0)])),
        ("decay", hyper(&[("d", 3.0), ("alpha", 2.0)])),
        ("recip_diag", hyper(&[("d", 3.0)])),
    ] {
        let diffusion = builtin_diffusion(dname, &dh).unwrap();
        let scaled = MatrixKernel::scaled(b.clone(), imq.clone()).unwrap();
        cases.push((
            format!("scaled+{dname}"),
            SteinKernelCtx::new(
                model.clone(),
                scaled,
                diffusion.clone(),
                theta.clone(),
                sample.view(),
            )
            .unwrap(),
        ));
        let diag = MatrixKernel::diagonal(
            vec![0.7, 1.0, 1.8],
            vec![gauss.clone(), imq.clone(), gauss.clone()],
        )
        .unwrap();
        cases.push((
            format!("diagonal+{dname}"),
            SteinKernelCtx::new(model.clone(), diag, diffusion, theta.clone(), sample.view())
                .unwrap(),
        ));
    }
    cases
}

#[test]
fn fast_paths_match_dense_reference() {
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    for (name, ctx) in fast_path_cases() {
        for _ in 0..60 {
            // recip_diag is singular at coordinates near −1; sample clear of it
            let x = Array1::from_shape_fn(3, |_| 0.2 + 2.0 * rng.gen::<f64>());
            let y = Array1::from_shape_fn(3, |_| 0.2 + 2.0 * rng.gen::<f64>());
            let a = ctx.point_data(x.view()).unwrap();
            let b = ctx.point_data(y.view()).unwrap();
            let fast = ctx.stein_kernel_points(&a, &b);
            let dense = ctx.stein_kernel_points_dense(&a, &b);
            assert!(
                (fast - dense).abs() < 1e-12 * (1.0 + dense.abs()),
                "{name}: value {fast} vs dense {dense}"
            );
            let gf = ctx.stein_kernel_grad_theta_points(&a, &b);
            let gd = ctx.stein_kernel_grad_theta_points_dense(&a, &b);
            for t in 0..gf.len() {
                assert!(
                    (gf[t] - gd[t]).abs() < 1e-12 * (1.0 + gd[t].abs()),
                    "{name}: grad[{t}] {} vs dense {}",
                    gf[t],
                    gd[t]
                );
            }
        }
    }
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    for (name, ctx) in fast_path_cases() {
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| 0.2 + 2.0 * rng.gen::<f64>());
            let y = Array1::from_shape_fn(3, |_| 0.2 + 2.0 * rng.gen::<f64>());
            let g = ctx.stein_kernel_grad_theta(x.view(), y.view()).unwrap();
            let theta = ctx.theta().to_owned();
            for a in 0..theta.len() {
                let h = stein_estim::num::fd_step(theta[a]);
                let rebuild = |tv: &Array1<f64>| {
                    let c = SteinKernelCtx::new(
                        ctx.model().clone(),
                        ctx.kernel().clone(),
                        ctx.diffusion().clone(),
                        tv.clone(),
                        array![[0.0, 0.0, 0.0]].view(),
                    )
                    .unwrap();
                    c.stein_kernel(x.view(), y.view()).unwrap()
                };
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[a] += h;
                tm[a] -= h;
                let fd = (rebuild(&tp) - rebuild(&tm)) / (2.0 * h);
                assert!(
                    rel_err(g[a], fd) < 1e-5,
                    "{name}: grad[{a}] = {} vs fd {fd}",
                    g[a]
                );
            }
        }
    }
}

#[test]
fn finite_difference_gradient_mode_agrees_with_analytic() {
    let model = builtin_model("student_t", &hyper(&[("d", 2.0), ("nu", 6.0)])).unwrap();
    let kernel =
        MatrixKernel::isotropic(2, 1.0, scalar_kernel("gaussian", &hyper(&[])).unwrap()).unwrap();
    let diffusion = builtin_diffusion("student_loc", &hyper(&[("d", 2.0)])).unwrap();
    let theta = array![0.2, -0.5, 1.4];
    let mut rng = ChaCha12Rng::seed_from_u64(43);
    let sample = rand_points(&mut rng, 6, 2);

    let analytic = SteinKernelCtx::new(
        model.clone(),
        kernel.clone(),
        diffusion.clone(),
        theta.clone(),
        sample.view(),
    )
    .unwrap();
    let fd_mode = SteinKernelCtx::new(model, kernel, diffusion, theta, sample.view())
        .unwrap()
        .with_grad_mode(ThetaGradMode::FiniteDiff)
        .unwrap();

    for i in 0..6 {
        for j in 0..6 {
            if i == j {
                continue;
            }
            let ga = analytic.stein_kernel_grad_theta_pair(i, j);
            let gf = fd_mode.stein_kernel_grad_theta_pair(i, j);
            for t in 0..ga.len() {
                assert!(
                    rel_err(ga[t], gf[t]) < 1e-5,
                    "pair ({i},{j}) grad[{t}]: {} vs {}",
                    ga[t],
                    gf[t]
                );
            }
        }
    }
}

fn normal_sample(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

#[test]
fn bandwidth_limit_gap_decreases_toward_score_matching() {
    // Data from a standard normal; model deliberately misspecified so both
    // discrepancies are positive. The mollifier-kernel discrepancy must
    // approach the score-matching divergence as the bandwidth shrinks.
    let model: ModelSpec = builtin_model("gaussian_meancov", &hyper(&[("d", 1.0)])).unwrap();
    let theta = array![0.4, 1.3];
    let diffusion = builtin_diffusion("identity", &hyper(&[])).unwrap();
    let q = KnownDensity::standard_normal(1);
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let sample = normal_sample(&mut rng, 2000, 1);
    let gammas = [1.0, 0.3, 0.1, 0.03];
    let gaps = dsm_limit_check(
        &model,
        &diffusion,
        theta.view(),
        &q,
        sample.view(),
        &gammas,
    )
    .unwrap();
    for w in gaps.windows(2) {
        assert!(
            w[1] < w[0],
            "gap sequence not strictly decreasing: {gaps:?}"
        );
    }
}

#[test]
fn bandwidth_limit_gap_small_at_truth() {
    // Model equals the data distribution: the score-matching divergence is
    // exactly 0 and the kernelized value is pure sampling noise.
    let model: ModelSpec = builtin_model("gaussian_meancov", &hyper(&[("d", 1.0)])).unwrap();
    let theta = array![0.0, 1.0];
    let diffusion = builtin_diffusion("identity", &hyper(&[])).unwrap();
    let q = KnownDensity::standard_normal(1);
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let sample = normal_sample(&mut rng, 500, 1);
    let gaps = dsm_limit_check(
        &model,
        &diffusion,
        theta.view(),
        &q,
        sample.view(),
        &[0.5],
    )
    .unwrap();
    assert!(gaps[0].abs() < 0.05, "gap at truth {:.3e}", gaps[0]);
}

