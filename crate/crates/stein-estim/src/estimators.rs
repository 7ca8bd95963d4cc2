//! Empirical losses, their θ-gradients, and plug-in information matrices.
//!
//! Three objectives share this module's conventions:
//!
//! * **Kernelized discrepancy** — a U-statistic of the operator kernel
//!   [`SteinKernelCtx`] over all distinct sample pairs,
//!   `(1/(n(n−1))) Σ_{i≠j} k⁰(Xᵢ, Xⱼ)`.
//! * **Diffusion score matching** — a sample mean of the per-point
//!   integrand `F(x) = ‖m(x)ᵀ∇log p‖² + 2⟨∇·(mmᵀ), ∇log p⟩ +
//!   2 tr[mmᵀ ∇²log p]`, which requires a θ-independent diffusion so the
//!   integration-by-parts identity behind it holds.
//! * **Classical score matching** — the same objective at `m = I`, up to an
//!   overall factor: `dsm_loss(identity) = 2 · sm_loss` exactly.
//!
//! Information matrices are plug-in estimates that use the data sample in
//! place of model expectations; this is exact at the optimum in the
//! well-specified case and a documented bias source away from it. All
//! inverses go through a relative ridge (`linalg::default_ridge`) because
//! the empirical metric carries no invertibility guarantee.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::diffusion::{dsm_theta_independence_check, DiffusionRef};
use crate::error::{Error, Result};
use crate::linalg::{default_ridge, inverse_spd, symmetrize};
use crate::model::{check_theta_against, ModelSpec};
use crate::num::{Accumulator, VecAccumulator};
use crate::parallel::{ordered_map, pair_sum, pair_sum_vec};
use crate::steinkern::SteinKernelCtx;

/// A validated n×d data matrix.
#[derive(Clone, Debug)]
pub struct Sample {
    data: Array2<f64>,
}

impl Sample {
    /// Wrap a data matrix, rejecting empty or non-finite input.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::config("sample must be a non-empty n×d matrix"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("sample contains non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// One loss evaluation with optional derivative information.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub value: f64,
    pub grad: Option<Array1<f64>>,
    pub info_matrix: Option<Array2<f64>>,
    pub n_used: usize,
}

impl LossReport {
    fn validated(self) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::numeric("loss value is not finite"));
        }
        if let Some(g) = &self.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("loss gradient has non-finite entries"));
            }
        }
        if let Some(info) = &self.info_matrix {
            let scale = 1.0 + info.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..info.nrows() {
                for j in 0..i {
                    if (info[[i, j]] - info[[j, i]]).abs() > 1e-10 * scale {
                        return Err(Error::numeric("information matrix is not symmetric"));
                    }
                }
            }
        }
        Ok(self)
    }
}

fn ordered_pair_count(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0)
}

fn require_pairs(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config(
            "the pairwise loss needs at least two sample points",
        ));
    }
    Ok(())
}

fn finite_scalar(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} evaluated to a non-finite value")))
    }
}

fn finite_vec(v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} has non-finite entries")))
    }
}

fn finite_mat(v: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} has non-finite entries")))
    }
}

// ---------------------------------------------------------------------------
// Kernelized discrepancy
// ---------------------------------------------------------------------------

/// U-statistic loss `(2/(n(n−1))) Σ_{i<j} k⁰(Xᵢ, Xⱼ)` over the context's
/// cached sample.
pub fn dksd_loss(ctx: &SteinKernelCtx) -> Result<f64> {
    let n = ctx.n();
    require_pairs(n)?;
    let total = pair_sum(n, |i, j| ctx.stein_kernel_pair(i, j));
    finite_scalar(2.0 * total / ordered_pair_count(n), "pairwise loss")
}

/// θ-gradient of [`dksd_loss`]: the U-statistic of the pairwise kernel's
/// θ-gradient.
pub fn dksd_grad(ctx: &SteinKernelCtx) -> Result<Array1<f64>> {
    let n = ctx.n();
    require_pairs(n)?;
    let m = ctx.dim_theta();
    let total = pair_sum_vec(n, m, |i, j, out| {
        let g = ctx.stein_kernel_grad_theta_pair(i, j);
        out.copy_from_slice(g.as_slice().expect("contiguous gradient"));
    });
    let scale = 2.0 / ordered_pair_count(n);
    finite_vec(
        Array1::from_iter(total.into_iter().map(|v| v * scale)),
        "pairwise loss gradient",
    )
}

/// Plug-in information metric of the kernelized discrepancy: the U-statistic
/// of `(J_x m_x) K(x,y) (J_y m_y)ᵀ` with `J` the mixed score derivative
/// (rows `∇_x ∂_{θ_a} log p`), symmetrized.
pub fn dksd_info_matrix(ctx: &SteinKernelCtx) -> Result<Array2<f64>> {
    let n = ctx.n();
    require_pairs(n)?;
    let m = ctx.dim_theta();
    let flat = pair_sum_vec(n, m * m, |i, j, out| {
        let a = ctx.point(i);
        let b = ctx.point(j);
        let k = ctx.kernel().eval(a.x.view(), b.x.view());
        let jm_x = a.grad_theta_score.dot(&a.m);
        let jm_y = b.grad_theta_score.dot(&b.m);
        let g = jm_x.dot(&k).dot(&jm_y.t());
        // The reversed pair contributes the transpose (K(y,x) = K(x,y)ᵀ),
        // so summing g + gᵀ covers both ordered pairs.
        for r in 0..m {
            for c in 0..m {
                out[r * m + c] = g[[r, c]] + g[[c, r]];
            }
        }
    });
    let mut gmat = Array2::from_shape_vec((m, m), flat).expect("m×m buffer");
    let norm = ordered_pair_count(n);
    gmat.mapv_inplace(|v| v / norm);
    symmetrize(&mut gmat);
    finite_mat(gmat, "information matrix")
}

/// Per-point projections `tᵢ = mean_{j≠i} ∇_θ k⁰(Xᵢ, Xⱼ)` that drive the
/// sandwich covariance. The diagonal term is excluded to match the
/// U-statistic structure; the means are not centered (valid at the optimum,
/// where the population gradient vanishes).
fn dksd_grad_projections(ctx: &SteinKernelCtx) -> Vec<Array1<f64>> {
    let n = ctx.n();
    let m = ctx.dim_theta();
    ordered_map(n, |i| {
        let mut acc = VecAccumulator::new(m);
        for j in 0..n {
            if j != i {
                let g = ctx.stein_kernel_grad_theta_pair(i, j);
                acc.add_slice(g.as_slice().expect("contiguous gradient"));
            }
        }
        let mut v = Array1::from_vec(acc.value());
        v.mapv_inplace(|t| t / (n as f64 - 1.0));
        v
    })
}

/// Sandwich covariance of the √n-scaled kernelized estimator,
/// `ĝ⁻¹ Σ̂ ĝ⁻¹` with `Σ̂ = (1/n) Σᵢ tᵢ tᵢᵀ` built from the per-point
/// gradient projections and `ĝ` the ridged plug-in metric.
pub fn dksd_sandwich_covariance(ctx: &SteinKernelCtx) -> Result<Array2<f64>> {
    let n = ctx.n();
    require_pairs(n)?;
    let m = ctx.dim_theta();
    let g = dksd_info_matrix(ctx)?;
    let projections = dksd_grad_projections(ctx);
    let mut sigma = Array2::<f64>::zeros((m, m));
    for t in &projections {
        for r in 0..m {
            for c in 0..m {
                sigma[[r, c]] += t[r] * t[c];
            }
        }
    }
    sigma.mapv_inplace(|v| v / n as f64);
    sandwich(&g, &sigma)
}

/// `h⁻¹ Σ h⁻¹` with a relative ridge on `h`.
fn sandwich(h: &Array2<f64>, sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let mut ridged = h.clone();
    let lambda = default_ridge(h);
    for i in 0..ridged.nrows() {
        ridged[[i, i]] += lambda;
    }
    let inv = inverse_spd(&ridged)?;
    let mut out = inv.dot(sigma).dot(&inv);
    symmetrize(&mut out);
    finite_mat(out, "sandwich covariance")
}

/// Loss, and optionally gradient and information matrix, in one report.
pub fn dksd_report(ctx: &SteinKernelCtx, want_grad: bool, want_info: bool) -> Result<LossReport> {
    let report = LossReport {
        value: dksd_loss(ctx)?,
        grad: if want_grad { Some(dksd_grad(ctx)?) } else { None },
        info_matrix: if want_info {
            Some(dksd_info_matrix(ctx)?)
        } else {
            None
        },
        n_used: ctx.n(),
    };
    report.validated()
}

// ---------------------------------------------------------------------------
// Diffusion score matching
// ---------------------------------------------------------------------------

fn dsm_check_args(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<()> {
    if sample.ncols() != model.dim_x() || diffusion.dim_x() != model.dim_x() {
        return Err(Error::config(format!(
            "dimension mismatch: sample d={}, model d={}, diffusion d={}",
            sample.ncols(),
            model.dim_x(),
            diffusion.dim_x()
        )));
    }
    if sample.nrows() == 0 {
        return Err(Error::config("sample must contain at least one point"));
    }
    check_theta_against(&model.theta_domain(), theta)?;
    if !dsm_theta_independence_check(diffusion.as_ref(), model.dim_theta()) {
        return Err(Error::config(
            "the diffusion depends on θ; the divergence-form objective \
             requires a θ-free diffusion",
        ));
    }
    Ok(())
}

/// Per-point integrand `F(x)` and, when requested, its θ-gradient
/// `∇F_a = 2[(J S s)_a + (J ∇·S)_a + tr(S ∂_{θ_a}∇²log p)]` with
/// `S = mmᵀ`, `s = ∇log p`, `J` the mixed score derivative.
pub(crate) fn dsm_point(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
    want_grad: bool,
) -> Result<(f64, Option<Array1<f64>>)> {
    let s = model.score_x(x, theta)?;
    let hess = model.hess_x(x, theta)?;
    let smat = diffusion.mmt(x, theta)?;
    let div_s = diffusion.div_mmt(x, theta)?;
    let ss = smat.dot(&s);
    let mut trace = Accumulator::new();
    for (sv, hv) in smat.iter().zip(hess.iter()) {
        // tr(S H) = Σ_{ik} S_{ik} H_{ki}; both are symmetric.
        trace.add(sv * hv);
    }
    let f = s.dot(&ss) + 2.0 * div_s.dot(&s) + 2.0 * trace.value();
    let grad = if want_grad {
        let j = model.grad_theta_score(x, theta)?;
        let gh = model.grad_theta_hess(x, theta)?;
        let m = theta.len();
        let mut g = Array1::<f64>::zeros(m);
        for a in 0..m {
            let ja = j.row(a);
            let mut tr_a = Accumulator::new();
            for (sv, hv) in smat.iter().zip(gh.index_axis(ndarray::Axis(0), a).iter()) {
                tr_a.add(sv * hv);
            }
            g[a] = 2.0 * (ja.dot(&ss) + ja.dot(&div_s) + tr_a.value());
        }
        Some(g)
    } else {
        None
    };
    Ok((f, grad))
}

fn dsm_point_values(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
    want_grad: bool,
) -> Result<Vec<(f64, Option<Array1<f64>>)>> {
    ordered_map(sample.nrows(), |i| {
        dsm_point(model, diffusion, theta, sample.row(i), want_grad)
    })
    .into_iter()
    .collect()
}

/// Diffusion score-matching objective `(1/n) Σᵢ F(Xᵢ)`.
pub fn dsm_loss(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<f64> {
    dsm_check_args(model, diffusion, theta, sample)?;
    let points = dsm_point_values(model, diffusion, theta, sample, false)?;
    let mut acc = Accumulator::new();
    for (f, _) in &points {
        acc.add(*f);
    }
    finite_scalar(acc.value() / sample.nrows() as f64, "score-matching loss")
}

/// θ-gradient of [`dsm_loss`].
pub fn dsm_grad(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    dsm_check_args(model, diffusion, theta, sample)?;
    let points = dsm_point_values(model, diffusion, theta, sample, true)?;
    let m = theta.len();
    let mut acc = VecAccumulator::new(m);
    for (_, g) in &points {
        let g = g.as_ref().expect("gradient requested");
        acc.add_slice(g.as_slice().expect("contiguous gradient"));
    }
    let n = sample.nrows() as f64;
    finite_vec(
        Array1::from_iter(acc.value().into_iter().map(|v| v / n)),
        "score-matching gradient",
    )
}

/// Plug-in information metric `(1/n) Σᵢ (J m)(J m)ᵀ` evaluated at the
/// sample; exactly symmetric and PSD by construction.
pub fn dsm_info_matrix(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    dsm_check_args(model, diffusion, theta, sample)?;
    let n = sample.nrows();
    let m = theta.len();
    let per_point: Result<Vec<Array2<f64>>> = ordered_map(n, |i| {
        let x = sample.row(i);
        let j = model.grad_theta_score(x, theta)?;
        let mx = diffusion.eval(x, theta)?;
        let jm = j.dot(&mx);
        Ok(jm.dot(&jm.t()))
    })
    .into_iter()
    .collect();
    let per_point = per_point?;
    let mut acc = VecAccumulator::new(m * m);
    let mut buf = vec![0.0; m * m];
    for g in &per_point {
        buf.copy_from_slice(g.as_slice().expect("contiguous matrix"));
        acc.add_slice(&buf);
    }
    let mut gmat = Array2::from_shape_vec((m, m), acc.value()).expect("m×m buffer");
    gmat.mapv_inplace(|v| v / n as f64);
    symmetrize(&mut gmat);
    finite_mat(gmat, "information matrix")
}

/// Sandwich covariance of the √n-scaled score-matching estimator. The
/// outer factor is the loss Hessian `2ĝ` (the objective is `θᵀĝθ`-shaped
/// near the optimum), so the result is `(2ĝ)⁻¹ Σ̂ (2ĝ)⁻¹` with
/// `Σ̂ = (1/n) Σᵢ ∇F(Xᵢ) ⊗ ∇F(Xᵢ)`.
///
/// The classical score-matching estimator (loss scaled by ½, `m = I`)
/// minimizes the same objective and has the identical sandwich, so callers
/// fit SM through this function with the identity diffusion.
pub fn dsm_sandwich_covariance(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let g = dsm_info_matrix(model, diffusion, theta, sample)?;
    let points = dsm_point_values(model, diffusion, theta, sample, true)?;
    let m = theta.len();
    let n = sample.nrows();
    let mut sigma = Array2::<f64>::zeros((m, m));
    for (_, grad) in &points {
        let grad = grad.as_ref().expect("gradient requested");
        for r in 0..m {
            for c in 0..m {
                sigma[[r, c]] += grad[r] * grad[c];
            }
        }
    }
    sigma.mapv_inplace(|v| v / n as f64);
    let hessian = g.mapv(|v| 2.0 * v);
    sandwich(&hessian, &sigma)
}

/// Loss report for the diffusion objective.
pub fn dsm_report(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
    want_grad: bool,
    want_info: bool,
) -> Result<LossReport> {
    let report = LossReport {
        value: dsm_loss(model, diffusion, theta, sample)?,
        grad: if want_grad {
            Some(dsm_grad(model, diffusion, theta, sample)?)
        } else {
            None
        },
        info_matrix: if want_info {
            Some(dsm_info_matrix(model, diffusion, theta, sample)?)
        } else {
            None
        },
        n_used: sample.nrows(),
    };
    report.validated()
}

// ---------------------------------------------------------------------------
// Classical score matching
// ---------------------------------------------------------------------------

/// Classical score-matching objective
/// `(1/n) Σᵢ [Δ log p(Xᵢ) + ½‖∇log p(Xᵢ)‖²]`, computed directly from the
/// printed formula rather than through the diffusion objective so the
/// factor-two relation `dsm_loss(identity) = 2·sm_loss` is a real check.
pub fn sm_loss(model: &ModelSpec, theta: ArrayView1<f64>, sample: ArrayView2<f64>) -> Result<f64> {
    check_theta_against(&model.theta_domain(), theta)?;
    if sample.ncols() != model.dim_x() {
        return Err(Error::config("sample dimension does not match the model"));
    }
    let values: Result<Vec<f64>> = ordered_map(sample.nrows(), |i| {
        let x = sample.row(i);
        let s = model.score_x(x, theta)?;
        let h = model.hess_x(x, theta)?;
        let mut lap = Accumulator::new();
        for i in 0..h.nrows() {
            lap.add(h[[i, i]]);
        }
        Ok(lap.value() + 0.5 * s.dot(&s))
    })
    .into_iter()
    .collect();
    let mut acc = Accumulator::new();
    for v in values? {
        acc.add(v);
    }
    finite_scalar(acc.value() / sample.nrows() as f64, "score-matching loss")
}

/// θ-gradient of [`sm_loss`]: `(1/n) Σᵢ [J s + (tr ∂_{θ_a}∇²log p)_a]`.
pub fn sm_grad(
    model: &ModelSpec,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_theta_against(&model.theta_domain(), theta)?;
    if sample.ncols() != model.dim_x() {
        return Err(Error::config("sample dimension does not match the model"));
    }
    let m = theta.len();
    let grads: Result<Vec<Array1<f64>>> = ordered_map(sample.nrows(), |i| {
        let x = sample.row(i);
        let s = model.score_x(x, theta)?;
        let j = model.grad_theta_score(x, theta)?;
        let gh = model.grad_theta_hess(x, theta)?;
        let mut g = Array1::<f64>::zeros(m);
        for a in 0..m {
            let mut lap = Accumulator::new();
            let slab = gh.index_axis(ndarray::Axis(0), a);
            for i in 0..slab.nrows() {
                lap.add(slab[[i, i]]);
            }
            g[a] = j.row(a).dot(&s) + lap.value();
        }
        Ok(g)
    })
    .into_iter()
    .collect();
    let mut acc = VecAccumulator::new(m);
    for g in grads? {
        acc.add_slice(g.as_slice().expect("contiguous gradient"));
    }
    let n = sample.nrows() as f64;
    finite_vec(
        Array1::from_iter(acc.value().into_iter().map(|v| v / n)),
        "score-matching gradient",
    )
}
