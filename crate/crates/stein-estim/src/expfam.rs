//! Closed-form estimation for natural exponential families.
//!
//! For densities `p_θ(x) ∝ exp(⟨θ, T(x)⟩ + b(x))` both empirical losses are
//! exact quadratics `θᵀAθ + vᵀθ + c` in the natural parameter, so the
//! estimator is the linear solve `θ̂ = −½A⁻¹v` and its asymptotic
//! covariance follows from the delta method applied to the sample moments
//! `(A_n, v_n)`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use std::collections::HashMap;
use std::sync::Arc;

use crate::diffusion::{dsm_theta_independence_check, DiffusionRef};
use crate::error::{Error, Result};
use crate::kernel::MatrixKernel;
use crate::linalg::{min_eigval_symmetric, solve_spd, symmetrize};
use crate::model::{Model, ModelSpec, ThetaBound};
use crate::num::{Accumulator, VecAccumulator};
use crate::parallel::{index_sum_vec, ordered_map, pair_sum_vec};

type VecFn = Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(ArrayView1<f64>) -> Array2<f64> + Send + Sync>;
type TenFn = Arc<dyn Fn(ArrayView1<f64>) -> Array3<f64> + Send + Sync>;
type ScalFn = Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>;

/// A natural exponential family `log p_θ(x) = ⟨θ, T(x)⟩ + b(x) + const`,
/// given through the sufficient statistic `T`, the base term `b`, and their
/// x-derivatives.
#[derive(Clone)]
pub struct ExpFamSpec {
    dim_x: usize,
    dim_theta: usize,
    suff_stat: VecFn,
    grad_suff_stat: MatFn,
    hess_suff_stat: TenFn,
    base: ScalFn,
    grad_base: VecFn,
    hess_base: MatFn,
}

impl ExpFamSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim_x: usize,
        dim_theta: usize,
        suff_stat: VecFn,
        grad_suff_stat: MatFn,
        hess_suff_stat: TenFn,
        base: ScalFn,
        grad_base: VecFn,
        hess_base: MatFn,
    ) -> Result<Self> {
        if dim_x == 0 || dim_theta == 0 {
            return Err(Error::config("exponential family needs positive dimensions"));
        }
        Ok(Self {
            dim_x,
            dim_theta,
            suff_stat,
            grad_suff_stat,
            hess_suff_stat,
            base,
            grad_base,
            hess_base,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn suff_stat(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.suff_stat)(x)
    }

    /// m×d matrix with row `a` = ∇T_a.
    pub fn grad_suff_stat(&self, x: ArrayView1<f64>) -> Array2<f64> {
        (self.grad_suff_stat)(x)
    }

    /// m×d×d stack of the Hessians ∇²T_a.
    pub fn hess_suff_stat(&self, x: ArrayView1<f64>) -> Array3<f64> {
        (self.hess_suff_stat)(x)
    }

    pub fn base(&self, x: ArrayView1<f64>) -> f64 {
        (self.base)(x)
    }

    pub fn grad_base(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.grad_base)(x)
    }

    pub fn hess_base(&self, x: ArrayView1<f64>) -> Array2<f64> {
        (self.hess_base)(x)
    }

    /// View the family as a generic model with score `∇b + ∇Tᵀθ`, so every
    /// generic estimator applies unchanged.
    pub fn as_model(&self) -> ModelSpec {
        Arc::new(ExpFamModel { spec: self.clone() })
    }
}

struct ExpFamModel {
    spec: ExpFamSpec,
}

impl Model for ExpFamModel {
    fn dim_x(&self) -> usize {
        self.spec.dim_x
    }
    fn dim_theta(&self) -> usize {
        self.spec.dim_theta
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        vec![ThetaBound::free(); self.spec.dim_theta]
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        Ok(theta.dot(&self.spec.suff_stat(x)) + self.spec.base(x))
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        Ok(self.spec.grad_base(x) + self.spec.grad_suff_stat(x).t().dot(&theta))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let mut h = self.spec.hess_base(x);
        let ht = self.spec.hess_suff_stat(x);
        for a in 0..self.spec.dim_theta {
            h.scaled_add(theta[a], &ht.index_axis(Axis(0), a));
        }
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        Ok(self.spec.grad_suff_stat(x))
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        Ok(self.spec.hess_suff_stat(x))
    }
}

// ---------------------------------------------------------------------------
// Built-in families
// ---------------------------------------------------------------------------

fn sech2(t: f64) -> f64 {
    let th = t.tanh();
    1.0 - th * th
}

fn hyper_dim(hyper: &HashMap<String, f64>, default: usize) -> Result<usize> {
    match hyper.get("d") {
        None => Ok(default),
        Some(&v) => {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::config(format!("hyper d must be a positive integer, got {v}")));
            }
            Ok(v as usize)
        }
    }
}

/// Gaussian location model in natural form: `T(x) = 2x`, `b(x) = −‖x‖²`,
/// so the score is `−2(x−θ)`.
fn gaussian_natural(d: usize) -> ExpFamSpec {
    ExpFamSpec::new(
        d,
        d,
        Arc::new(move |x: ArrayView1<f64>| x.mapv(|v| 2.0 * v)),
        Arc::new(move |_x: ArrayView1<f64>| Array2::from_diag_elem(d, 2.0)),
        Arc::new(move |_x: ArrayView1<f64>| Array3::zeros((d, d, d))),
        Arc::new(move |x: ArrayView1<f64>| -x.dot(&x)),
        Arc::new(move |x: ArrayView1<f64>| x.mapv(|v| -2.0 * v)),
        Arc::new(move |_x: ArrayView1<f64>| Array2::from_diag_elem(d, -2.0)),
    )
    .expect("static dimensions")
}

/// The intractable-normalizer family: a coupled Gaussian base with tanh
/// nonlinearities and a single natural parameter on `tanh(x_k)`. Matches
/// the generic model of the same name exactly.
fn intractable_expfam(d: usize) -> Result<ExpFamSpec> {
    if d < 2 {
        return Err(Error::config("intractable_expfam requires d >= 2"));
    }
    let k = if d >= 3 { d - 2 } else { d - 1 };
    ExpFamSpec::new(
        d,
        1,
        Arc::new(move |x: ArrayView1<f64>| Array1::from_elem(1, x[k].tanh())),
        Arc::new(move |x: ArrayView1<f64>| {
            let mut g = Array2::zeros((1, d));
            g[[0, k]] = sech2(x[k]);
            g
        }),
        Arc::new(move |x: ArrayView1<f64>| {
            let mut h = Array3::zeros((1, d, d));
            h[[0, k, k]] = -2.0 * sech2(x[k]) * x[k].tanh();
            h
        }),
        Arc::new(move |x: ArrayView1<f64>| {
            let quad: f64 = x.iter().map(|v| v * v).sum();
            let cross: f64 = (2..d).map(|i| x[0] * x[i]).sum();
            -0.5 * quad + 0.2 * cross + 0.6 * x[0].tanh()
        }),
        Arc::new(move |x: ArrayView1<f64>| {
            let cross_sum: f64 = (2..d).map(|i| x[i]).sum();
            let mut g = Array1::from_iter(x.iter().map(|v| -v));
            g[0] += 0.2 * cross_sum + 0.6 * sech2(x[0]);
            for i in 2..d {
                g[i] += 0.2 * x[0];
            }
            g
        }),
        Arc::new(move |x: ArrayView1<f64>| {
            let mut h = Array2::from_diag_elem(d, -1.0);
            for i in 2..d {
                h[[0, i]] += 0.2;
                h[[i, 0]] += 0.2;
            }
            h[[0, 0]] += -1.2 * sech2(x[0]) * x[0].tanh();
            h
        }),
    )
}

pub const EXPFAM_IDS: [&str; 2] = ["gaussian_natural", "intractable_expfam"];

/// Construct a built-in family by id. Recognized hyperparameter: `d`.
pub fn builtin_expfam(name: &str, hyper: &HashMap<String, f64>) -> Result<ExpFamSpec> {
    match name {
        "gaussian_natural" => Ok(gaussian_natural(hyper_dim(hyper, 1)?)),
        "intractable_expfam" => intractable_expfam(hyper_dim(hyper, 2)?),
        other => Err(Error::config(format!(
            "unknown exponential family '{other}'; available: {}",
            EXPFAM_IDS.join(", ")
        ))),
    }
}

/// (id, hyperparameters, description) rows for CLI listings.
pub fn list_expfams() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        (
            "gaussian_natural",
            "d",
            "T(x) = 2x, b(x) = −‖x‖²; score −2(x−θ)",
        ),
        (
            "intractable_expfam",
            "d",
            "coupled Gaussian base with tanh terms; one natural parameter",
        ),
    ]
}

// ---------------------------------------------------------------------------
// Quadratic forms
// ---------------------------------------------------------------------------

/// The empirical loss as a quadratic `θᵀAθ + vᵀθ + c`. `a` is symmetric up
/// to accumulation roundoff (both pair orders are folded in).
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub a: Array2<f64>,
    pub v: Array1<f64>,
    pub c: f64,
}

impl QuadraticForm {
    pub fn value(&self, theta: ArrayView1<f64>) -> f64 {
        theta.dot(&self.a.dot(&theta)) + self.v.dot(&theta) + self.c
    }

    pub fn grad(&self, theta: ArrayView1<f64>) -> Array1<f64> {
        self.a.dot(&theta) + self.a.t().dot(&theta) + &self.v
    }
}

fn require_theta_free(diffusion: &DiffusionRef, dim_theta: usize) -> Result<()> {
    if !dsm_theta_independence_check(diffusion.as_ref(), dim_theta) {
        return Err(Error::config(
            "closed-form estimation requires a θ-free diffusion",
        ));
    }
    Ok(())
}

fn check_sample(spec: &ExpFamSpec, diffusion: &DiffusionRef, sample: ArrayView2<f64>) -> Result<()> {
    if sample.ncols() != spec.dim_x() || diffusion.dim_x() != spec.dim_x() {
        return Err(Error::config(format!(
            "dimension mismatch: sample d={}, family d={}, diffusion d={}",
            sample.ncols(),
            spec.dim_x(),
            diffusion.dim_x()
        )));
    }
    Ok(())
}

/// Per-point quantities entering the pairwise quadratic.
struct FamPoint {
    x: Array1<f64>,
    m: Array2<f64>,
    /// φ = mᵀ∇Tᵀ, d×m.
    phi: Array2<f64>,
    /// α = mᵀ∇b + ∇·m.
    alpha: Array1<f64>,
}

fn fam_points(
    spec: &ExpFamSpec,
    diffusion: &DiffusionRef,
    sample: ArrayView2<f64>,
) -> Result<Vec<FamPoint>> {
    // The diffusion is θ-free (checked by callers); evaluate it at an
    // arbitrary in-domain θ.
    let theta0 = Array1::zeros(spec.dim_theta());
    ordered_map(sample.nrows(), |i| {
        let x = sample.row(i);
        let m = diffusion.eval(x, theta0.view())?;
        let dm = diffusion.div_x(x, theta0.view())?;
        let phi = m.t().dot(&spec.grad_suff_stat(x).t());
        let alpha = m.t().dot(&spec.grad_base(x)) + &dm;
        Ok(FamPoint {
            x: x.to_owned(),
            m,
            phi,
            alpha,
        })
    })
    .into_iter()
    .collect()
}

/// Ordered-pair contribution (A, v, c) to the pairwise quadratic, written
/// into `out` (layout: m² entries of A, then m of v, then c).
fn dksd_pair_terms(kernel: &MatrixKernel, px: &FamPoint, py: &FamPoint, out: &mut [f64]) {
    let d = px.x.len();
    let mdim = px.phi.ncols();
    let k = kernel.eval(px.x.view(), py.x.view());
    let gx = kernel.grad_x(px.x.view(), py.x.view());
    let gy = kernel.grad_y(px.x.view(), py.x.view());
    let gxy = kernel.grad_xy(px.x.view(), py.x.view());

    // d3[j] = Σ_{r,l} m_x[r,l] ∂_{x^r}K_{lj};  d2[l] = Σ_{i,j} m_y[i,j] ∂_{y^i}K_{lj}
    let mut d3 = Array1::<f64>::zeros(d);
    let mut d2 = Array1::<f64>::zeros(d);
    let mut t5 = Accumulator::new();
    for r in 0..d {
        for l in 0..d {
            let mx = px.m[[r, l]];
            if mx != 0.0 {
                for j in 0..d {
                    d3[j] += mx * gx[[r, l, j]];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let my = py.m[[i, j]];
            if my != 0.0 {
                for l in 0..d {
                    d2[l] += my * gy[[i, l, j]];
                }
            }
        }
    }
    for r in 0..d {
        for l in 0..d {
            let mx = px.m[[r, l]];
            if mx == 0.0 {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    t5.add(mx * py.m[[i, j]] * gxy[[r, i, l, j]]);
                }
            }
        }
    }

    let k_alpha_x = k.t().dot(&px.alpha); // Kᵀα_x, length d
    let k_alpha_y = k.dot(&py.alpha); // Kα_y, length d
    let a_mat = py.phi.t().dot(&k.t()).dot(&px.phi); // φ_yᵀKᵀφ_x
    let v_vec = py.phi.t().dot(&k_alpha_x)
        + px.phi.t().dot(&k_alpha_y)
        + py.phi.t().dot(&d3)
        + px.phi.t().dot(&d2);
    let c_val = py.alpha.dot(&k_alpha_x) + py.alpha.dot(&d3) + px.alpha.dot(&d2) + t5.value();

    for r in 0..mdim {
        for s in 0..mdim {
            out[r * mdim + s] += a_mat[[r, s]];
        }
    }
    for r in 0..mdim {
        out[mdim * mdim + r] += v_vec[r];
    }
    out[mdim * mdim + mdim] += c_val;
}

/// Pairwise quadratic: `dksd_loss(θ) = θᵀA_nθ + v_nᵀθ + c_n` with `(A_n,
/// v_n, c_n)` U-statistics over all ordered pairs.
pub fn dksd_quadratic(
    spec: &ExpFamSpec,
    kernel: &MatrixKernel,
    diffusion: &DiffusionRef,
    sample: ArrayView2<f64>,
) -> Result<QuadraticForm> {
    check_sample(spec, diffusion, sample)?;
    require_theta_free(diffusion, spec.dim_theta())?;
    let n = sample.nrows();
    if n < 2 {
        return Err(Error::config(
            "the pairwise loss needs at least two sample points",
        ));
    }
    let points = fam_points(spec, diffusion, sample)?;
    let mdim = spec.dim_theta();
    let len = mdim * mdim + mdim + 1;
    let flat = pair_sum_vec(n, len, |i, j, out| {
        dksd_pair_terms(kernel, &points[i], &points[j], out);
        dksd_pair_terms(kernel, &points[j], &points[i], out);
    });
    let norm = (n as f64) * (n as f64 - 1.0);
    let a = Array2::from_shape_vec(
        (mdim, mdim),
        flat[..mdim * mdim].iter().map(|v| v / norm).collect(),
    )
    .expect("A buffer");
    let v = Array1::from_iter(flat[mdim * mdim..mdim * mdim + mdim].iter().map(|v| v / norm));
    let c = flat[len - 1] / norm;
    if a.iter().any(|t| !t.is_finite()) || v.iter().any(|t| !t.is_finite()) || !c.is_finite() {
        return Err(Error::numeric("quadratic coefficients are not finite"));
    }
    Ok(QuadraticForm { a, v, c })
}

/// Per-point (A, v, c) for the diffusion score-matching quadratic.
fn dsm_point_terms(
    spec: &ExpFamSpec,
    diffusion: &DiffusionRef,
    x: ArrayView1<f64>,
    out: &mut [f64],
) -> Result<()> {
    let theta0 = Array1::zeros(spec.dim_theta());
    let mdim = spec.dim_theta();
    let gt = spec.grad_suff_stat(x); // m×d
    let ht = spec.hess_suff_stat(x); // m×d×d
    let gb = spec.grad_base(x);
    let hb = spec.hess_base(x);
    let s_mat = diffusion.mmt(x, theta0.view())?;
    let div_s = diffusion.div_mmt(x, theta0.view())?;

    let sgb = s_mat.dot(&gb);
    let a_mat = gt.dot(&s_mat).dot(&gt.t());
    for r in 0..mdim {
        for c in 0..mdim {
            out[r * mdim + c] += a_mat[[r, c]];
        }
    }
    for a in 0..mdim {
        let row = gt.row(a);
        let mut tr = Accumulator::new();
        for (sv, hv) in s_mat.iter().zip(ht.index_axis(Axis(0), a).iter()) {
            tr.add(sv * hv);
        }
        out[mdim * mdim + a] += 2.0 * (row.dot(&sgb) + row.dot(&div_s) + tr.value());
    }
    let mut trb = Accumulator::new();
    for (sv, hv) in s_mat.iter().zip(hb.iter()) {
        trb.add(sv * hv);
    }
    out[mdim * mdim + mdim] += gb.dot(&sgb) + 2.0 * div_s.dot(&gb) + 2.0 * trb.value();
    Ok(())
}

/// Score-matching quadratic: `dsm_loss(θ) = θᵀA_nθ + v_nᵀθ + c_n` with
/// coefficients that are plain sample means.
pub fn dsm_quadratic(
    spec: &ExpFamSpec,
    diffusion: &DiffusionRef,
    sample: ArrayView2<f64>,
) -> Result<QuadraticForm> {
    check_sample(spec, diffusion, sample)?;
    require_theta_free(diffusion, spec.dim_theta())?;
    let n = sample.nrows();
    if n == 0 {
        return Err(Error::config("sample must contain at least one point"));
    }
    let mdim = spec.dim_theta();
    let len = mdim * mdim + mdim + 1;
    // Evaluate fallibly first, then reduce deterministically.
    let per_point: Result<Vec<Vec<f64>>> = ordered_map(n, |i| {
        let mut buf = vec![0.0; len];
        dsm_point_terms(spec, diffusion, sample.row(i), &mut buf)?;
        Ok(buf)
    })
    .into_iter()
    .collect();
    let per_point = per_point?;
    let flat = index_sum_vec(n, len, |i, out| out.copy_from_slice(&per_point[i]));
    let nn = n as f64;
    let a = Array2::from_shape_vec(
        (mdim, mdim),
        flat[..mdim * mdim].iter().map(|v| v / nn).collect(),
    )
    .expect("A buffer");
    let v = Array1::from_iter(flat[mdim * mdim..mdim * mdim + mdim].iter().map(|v| v / nn));
    let c = flat[len - 1] / nn;
    if a.iter().any(|t| !t.is_finite()) || v.iter().any(|t| !t.is_finite()) || !c.is_finite() {
        return Err(Error::numeric("quadratic coefficients are not finite"));
    }
    Ok(QuadraticForm { a, v, c })
}

/// Symmetrized quadratic matrix and its minimum eigenvalue, rejecting
/// effectively singular systems.
fn checked_symmetric(q: &QuadraticForm) -> Result<Array2<f64>> {
    let mut a_sym = q.a.clone();
    a_sym += &q.a.t();
    a_sym.mapv_inplace(|v| 0.5 * v);
    symmetrize(&mut a_sym);
    let m = a_sym.nrows();
    let trace: f64 = (0..m).map(|i| a_sym[[i, i]]).sum();
    let min_eig = min_eigval_symmetric(&a_sym)?;
    if min_eig <= 1e-12 * trace.abs() / m as f64 {
        return Err(Error::numeric(format!(
            "quadratic matrix is numerically singular (minimum eigenvalue \
             {min_eig:.3e}); increase the sample size or change the kernel"
        )));
    }
    Ok(a_sym)
}

/// Minimizer `θ̂ = −½A⁻¹v` of the quadratic.
pub fn solve_quadratic(q: &QuadraticForm) -> Result<Array1<f64>> {
    let a_sym = checked_symmetric(q)?;
    let rhs = q.v.mapv(|v| -0.5 * v);
    solve_spd(&a_sym, &rhs)
}

/// Which closed-form loss a covariance refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosedFormKind {
    Dksd,
    Dsm,
}

/// Delta-method covariance of the √n-scaled closed-form estimator
/// `θ̂ = −½A_n⁻¹v_n`, propagating the sampling variability of `(A_n, v_n)`
/// through the solve. The per-point influence is
/// `r(x) = A⁻¹[v⁰(x) + 2A⁰(x)θ̂]` built from centered (projected, for the
/// pairwise loss) moment contributions; the covariance is `(1/n)Σ r rᵀ`
/// for the pairwise loss and `¼(1/n)Σ r rᵀ` for score matching (whose
/// moments are plain means, not two-argument U-statistics).
pub fn expfam_asymptotic_cov(
    kind: ClosedFormKind,
    spec: &ExpFamSpec,
    kernel: Option<&MatrixKernel>,
    diffusion: &DiffusionRef,
    sample: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = sample.nrows();
    let mdim = spec.dim_theta();
    let quad = match kind {
        ClosedFormKind::Dksd => {
            let kernel = kernel.ok_or_else(|| {
                Error::config("the pairwise covariance needs a kernel")
            })?;
            dksd_quadratic(spec, kernel, diffusion, sample)?
        }
        ClosedFormKind::Dsm => dsm_quadratic(spec, diffusion, sample)?,
    };
    let a_sym = checked_symmetric(&quad)?;
    let theta_hat = solve_quadratic(&quad)?;

    let residuals: Result<Vec<Array1<f64>>> = match kind {
        ClosedFormKind::Dksd => {
            let kernel = kernel.expect("checked above");
            let points = fam_points(spec, diffusion, sample)?;
            let len = mdim * mdim + mdim + 1;
            ordered_map(n, |i| {
                // Projection of the pair kernel at Xᵢ: mean over j≠i of the
                // order-averaged (A, v) contributions.
                let mut acc = VecAccumulator::new(len);
                let mut buf = vec![0.0; len];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    buf.iter_mut().for_each(|b| *b = 0.0);
                    dksd_pair_terms(kernel, &points[i], &points[j], &mut buf);
                    dksd_pair_terms(kernel, &points[j], &points[i], &mut buf);
                    acc.add_slice(&buf);
                }
                let mean = acc.value();
                let scale = 2.0 * (n as f64 - 1.0);
                let mut l_c = Array2::<f64>::zeros((mdim, mdim));
                let mut t_c = Array1::<f64>::zeros(mdim);
                for r in 0..mdim {
                    for c in 0..mdim {
                        // Symmetric part of the projected A, centered at A_n.
                        let raw = 0.5 * (mean[r * mdim + c] + mean[c * mdim + r]) / scale;
                        l_c[[r, c]] = raw - a_sym[[r, c]];
                    }
                    t_c[r] = mean[mdim * mdim + r] / scale - quad.v[r];
                }
                let rhs = t_c + l_c.dot(&theta_hat).mapv(|v| 2.0 * v);
                solve_spd(&a_sym, &rhs)
            })
            .into_iter()
            .collect()
        }
        ClosedFormKind::Dsm => {
            let len = mdim * mdim + mdim + 1;
            ordered_map(n, |i| {
                let mut buf = vec![0.0; len];
                dsm_point_terms(spec, diffusion, sample.row(i), &mut buf)?;
                let mut l_c = Array2::<f64>::zeros((mdim, mdim));
                let mut t_c = Array1::<f64>::zeros(mdim);
                for r in 0..mdim {
                    for c in 0..mdim {
                        let raw = 0.5 * (buf[r * mdim + c] + buf[c * mdim + r]);
                        l_c[[r, c]] = raw - a_sym[[r, c]];
                    }
                    t_c[r] = buf[mdim * mdim + r] - quad.v[r];
                }
                let rhs = t_c + l_c.dot(&theta_hat).mapv(|v| 2.0 * v);
                solve_spd(&a_sym, &rhs)
            })
            .into_iter()
            .collect()
        }
    };
    let residuals = residuals?;
    let mut cov = Array2::<f64>::zeros((mdim, mdim));
    for r in &residuals {
        for p in 0..mdim {
            for q in 0..mdim {
                cov[[p, q]] += r[p] * r[q];
            }
        }
    }
    let factor = match kind {
        ClosedFormKind::Dksd => 1.0 / n as f64,
        ClosedFormKind::Dsm => 0.25 / n as f64,
    };
    cov.mapv_inplace(|v| v * factor);
    symmetrize(&mut cov);
    Ok(cov)
}
