//! Influence-function oracles: the ε-contamination refit derivative must
//! reproduce the influence value, the classical score-matching influence
//! must be exactly linear, and the boundedness dichotomy between
//! estimators must show up on fixed grids.

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

use stein_estim::diffusion::builtin_diffusion;
use stein_estim::expfam::{builtin_expfam, dksd_quadratic, dsm_quadratic, solve_quadratic};
use stein_estim::kernel::{scalar_kernel, MatrixKernel};
use stein_estim::model::builtin_model;
use stein_estim::robust::{
    curve_max_norm, influence_curve_dksd, influence_curve_dsm, influence_dksd, influence_dsm,
};
use stein_estim::steinkern::SteinKernelCtx;

fn hyper(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn location_sample(seed: u64, n: usize, loc: f64) -> Array2<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sd = 0.5_f64.sqrt();
    Array2::from_shape_fn((n, 1), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        loc + sd * z
    })
}

fn append_copies(sample: &Array2<f64>, z: f64, k: usize) -> Array2<f64> {
    let n = sample.nrows();
    let mut out = Array2::zeros((n + k, 1));
    out.slice_mut(ndarray::s![..n, ..]).assign(sample);
    for r in n..n + k {
        out[[r, 0]] = z;
    }
    out
}

fn line_grid(lo: f64, hi: f64, step: f64) -> Vec<Array1<f64>> {
    let count = ((hi - lo) / step).round() as usize + 1;
    (0..count).map(|i| array![lo + step * i as f64]).collect()
}

/// Gateaux-derivative oracle: refit on the point-mass-contaminated sample
/// and compare the finite difference (θ̂_ε − θ̂)/ε against the influence
/// value, at ε ≈ 0.02 and, as a sensitivity check, ε ≈ 0.01.
#[test]
fn contamination_refit_matches_influence_for_both_estimators() {
    let spec = builtin_expfam("gaussian_natural", &hyper(&[("d", 1.0)])).unwrap();
    let model = spec.as_model();
    let sample = location_sample(31, 1000, 0.4);
    let z = 2.5;

    // Pairwise estimator with a Gaussian kernel and identity diffusion.
    let kernel = MatrixKernel::isotropic(
        1,
        1.0,
        scalar_kernel("gaussian", &hyper(&[("lengthscale", 1.0)])).unwrap(),
    )
    .unwrap();
    let identity = builtin_diffusion("identity", &hyper(&[("d", 1.0)])).unwrap();
    let theta_hat =
        solve_quadratic(&dksd_quadratic(&spec, &kernel, &identity, sample.view()).unwrap())
            .unwrap();
    let ctx = SteinKernelCtx::new(
        model.clone(),
        kernel.clone(),
        identity.clone(),
        theta_hat.clone(),
        sample.view(),
    )
    .unwrap();
    let iff = influence_dksd(&ctx, array![z].view()).unwrap();
    for copies in [20usize, 10] {
        let contaminated = append_copies(&sample, z, copies);
        let eps = copies as f64 / contaminated.nrows() as f64;
        let refit = solve_quadratic(
            &dksd_quadratic(&spec, &kernel, &identity, contaminated.view()).unwrap(),
        )
        .unwrap();
        let fd = (refit[0] - theta_hat[0]) / eps;
        assert!(
            fd * iff[0] > 0.0,
            "pairwise: refit derivative {fd} and influence {} disagree in sign",
            iff[0]
        );
        let ratio = fd / iff[0];
        assert!(
            (0.7..=1.3).contains(&ratio),
            "pairwise (ε={eps:.4}): magnitude ratio {ratio}"
        );
    }

    // Score matching with the decaying diffusion.
    let decay = builtin_diffusion("decay", &hyper(&[("d", 1.0), ("alpha", 2.0)])).unwrap();
    let theta_dsm =
        solve_quadratic(&dsm_quadratic(&spec, &decay, sample.view()).unwrap()).unwrap();
    let iff_dsm = influence_dsm(
        &model,
        &decay,
        theta_dsm.view(),
        sample.view(),
        array![z].view(),
    )
    .unwrap();
    for copies in [20usize, 10] {
        let contaminated = append_copies(&sample, z, copies);
        let eps = copies as f64 / contaminated.nrows() as f64;
        let refit =
            solve_quadratic(&dsm_quadratic(&spec, &decay, contaminated.view()).unwrap()).unwrap();
        let fd = (refit[0] - theta_dsm[0]) / eps;
        assert!(
            fd * iff_dsm[0] > 0.0,
            "score matching: refit derivative {fd} and influence {} disagree in sign",
            iff_dsm[0]
        );
        let ratio = fd / iff_dsm[0];
        assert!(
            (0.7..=1.3).contains(&ratio),
            "score matching (ε={eps:.4}): magnitude ratio {ratio}"
        );
    }
}

#[test]
fn classical_influence_is_linear_with_unit_slope() {
    let model = builtin_model("gaussian_location", &hyper(&[("d", 1.0)])).unwrap();
    let identity = builtin_diffusion("identity", &hyper(&[("d", 1.0)])).unwrap();
    let sample = location_sample(32, 200, 0.4);
    let mean = sample.column(0).sum() / 200.0;
    let theta = array![mean];
    let grid = line_grid(-20.0, 20.0, 0.5);
    let rows = influence_curve_dsm(&model, &identity, theta.view(), sample.view(), &grid).unwrap();

    // Least-squares line through (z, IF(z)) must be essentially exact.
    let xs: Vec<f64> = grid.iter().map(|z| z[0]).collect();
    let ys: Vec<f64> = rows
        .iter()
        .map(|r| r.influence.as_ref().unwrap()[0])
        .collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let fit = ybar + slope * (x - xbar);
            (y - fit) * (y - fit)
        })
        .sum();
    let r2 = 1.0 - ss_res / ss_tot;
    assert!(r2 > 0.999, "linear fit R² = {r2}");
    assert!((slope - 1.0).abs() <= 1e-4, "slope {slope}");
    for (x, y) in xs.iter().zip(&ys) {
        assert!((y - (x - mean)).abs() <= 1e-4 * x.abs().max(1.0));
    }
}

#[test]
fn boundedness_dichotomy_on_fixed_grids() {
    let spec = builtin_expfam("gaussian_natural", &hyper(&[("d", 1.0)])).unwrap();
    let model = spec.as_model();
    let sample = location_sample(33, 400, 0.0);
    let identity = builtin_diffusion("identity", &hyper(&[("d", 1.0)])).unwrap();
    let grid20 = line_grid(-20.0, 20.0, 0.25);
    let grid30 = line_grid(-30.0, 30.0, 0.25);

    // Pairwise with a Gaussian kernel: influence redescends, so widening
    // the grid cannot move the max.
    let kernel = MatrixKernel::isotropic(
        1,
        1.0,
        scalar_kernel("gaussian", &hyper(&[("lengthscale", 1.0)])).unwrap(),
    )
    .unwrap();
    let theta_k =
        solve_quadratic(&dksd_quadratic(&spec, &kernel, &identity, sample.view()).unwrap())
            .unwrap();
    let ctx = SteinKernelCtx::new(
        model.clone(),
        kernel,
        identity.clone(),
        theta_k.clone(),
        sample.view(),
    )
    .unwrap();
    let k20 = curve_max_norm(&influence_curve_dksd(&ctx, &grid20).unwrap()).unwrap();
    let k30 = curve_max_norm(&influence_curve_dksd(&ctx, &grid30).unwrap()).unwrap();
    assert!(
        (k30 - k20).abs() <= 0.01 * k20,
        "pairwise max moved from {k20} to {k30}"
    );
    // Far-field values are negligible against the peak.
    let far = influence_dksd(&ctx, array![theta_k[0] + 15.0].view()).unwrap();
    assert!(far[0].abs() <= 0.01 * k20);

    // Score matching with the decaying diffusion: same stability.
    let decay = builtin_diffusion("decay", &hyper(&[("d", 1.0), ("alpha", 2.0)])).unwrap();
    let theta_d =
        solve_quadratic(&dsm_quadratic(&spec, &decay, sample.view()).unwrap()).unwrap();
    let d20 = curve_max_norm(
        &influence_curve_dsm(&model, &decay, theta_d.view(), sample.view(), &grid20).unwrap(),
    )
    .unwrap();
    let d30 = curve_max_norm(
        &influence_curve_dsm(&model, &decay, theta_d.view(), sample.view(), &grid30).unwrap(),
    )
    .unwrap();
    assert!(
        (d30 - d20).abs() <= 0.01 * d20,
        "decaying-diffusion max moved from {d20} to {d30}"
    );

    // Classical score matching: the max grows linearly with grid extent.
    let mean = sample.column(0).sum() / 400.0;
    let s20 = curve_max_norm(
        &influence_curve_dsm(&model, &identity, array![mean].view(), sample.view(), &grid20)
            .unwrap(),
    )
    .unwrap();
    let s30 = curve_max_norm(
        &influence_curve_dsm(&model, &identity, array![mean].view(), sample.view(), &grid30)
            .unwrap(),
    )
    .unwrap();
    assert!(
        s30 / s20 >= 1.4,
        "classical max grew only from {s20} to {s30}"
    );
}

/// For a scalar diffusion on the location family the stationarity
/// condition solves in closed form; the quadratic machinery must agree.
#[test]
fn scalar_diffusion_location_estimate_matches_hand_formula() {
    let spec = builtin_expfam("gaussian_natural", &hyper(&[("d", 1.0)])).unwrap();
    let decay = builtin_diffusion("decay", &hyper(&[("d", 1.0), ("alpha", 2.0)])).unwrap();
    let sample = location_sample(34, 300, 0.6);
    let theta =
        solve_quadratic(&dsm_quadratic(&spec, &decay, sample.view()).unwrap()).unwrap();

    // m(x) = 1/(1+x²); score −2(x−θ). Stationarity of the mean of
    // m²s² + 2(m²)'s + 2m²s' gives θ̂ = [Σm²x − ½Σ(m²)'] / Σm².
    let mut sw = 0.0;
    let mut swx = 0.0;
    let mut swp = 0.0;
    for &x in sample.column(0) {
        let m2 = 1.0 / (1.0 + x * x).powi(2);
        let m2p = -4.0 * x / (1.0 + x * x).powi(3);
        sw += m2;
        swx += m2 * x;
        swp += m2p;
    }
    let hand = (swx - 0.5 * swp) / sw;
    assert!(
        (theta[0] - hand).abs() <= 1e-12 * hand.abs().max(1.0),
        "quadratic solve {} vs hand formula {hand}",
        theta[0]
    );
}

#[test]
fn influence_vanishes_at_the_center_of_a_symmetric_sample() {
    let spec = builtin_expfam("gaussian_natural", &hyper(&[("d", 1.0)])).unwrap();
    let model = spec.as_model();
    let kernel = MatrixKernel::isotropic(
        1,
        1.0,
        scalar_kernel("gaussian", &hyper(&[("lengthscale", 1.0)])).unwrap(),
    )
    .unwrap();
    let identity = builtin_diffusion("identity", &hyper(&[("d", 1.0)])).unwrap();
    let sample = array![[0.3], [-0.3], [0.9], [-0.9], [1.7], [-1.7]];
    let theta =
        solve_quadratic(&dksd_quadratic(&spec, &kernel, &identity, sample.view()).unwrap())
            .unwrap();
    assert!(theta[0].abs() <= 1e-12, "fit off center: {}", theta[0]);
    let ctx = SteinKernelCtx::new(model, kernel, identity, theta, sample.view()).unwrap();
    let iff = influence_dksd(&ctx, array![0.0].view()).unwrap();
    assert!(iff[0].abs() <= 1e-8, "influence at center: {}", iff[0]);
}
