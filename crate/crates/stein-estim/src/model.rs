//! Unnormalized density models with analytic derivatives.
//!
//! A model exposes its log-density up to an additive constant together with
//! every derivative the estimators consume: the score `∇_x log p`, its
//! Hessian, and the parameter-Jacobians of both. Derivative outputs never
//! depend on the normalizing constant, so adding a constant to the
//! log-density leaves them bit-identical.
//!
//! [`finite_diff_wrap`] turns any model into one whose derivative slots are
//! filled by central differences of the log-density alone; it serves as the
//! oracle the analytic implementations are tested against and as the onboard
//! path for user-supplied densities.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::num::{fd_step, fd_step2, fd_step3};
use crate::special::bessel_log_profile;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// Interval constraint for one parameter coordinate (open at finite ends).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaBound {
    pub lo: f64,
    pub hi: f64,
}

impl ThetaBound {
    pub const fn free() -> Self {
        ThetaBound {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub const fn greater_than(lo: f64) -> Self {
        ThetaBound {
            lo,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v > self.lo && v < self.hi
    }

    /// Whether the coordinate is constrained to (lo, ∞) with finite lo —
    /// the case the optimizer handles by log-reparameterization.
    pub fn is_lower_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_infinite()
    }
}

/// An unnormalized density `p_θ` on ℝ^d with analytic derivatives.
///
/// Conventions: `x` has length `dim_x()` = d, `theta` length `dim_theta()`
/// = m; `grad_theta_score` is m×d with row a = ∂_{θ_a} score;
/// `grad_theta_hess` is m×d×d with slab a = ∂_{θ_a} hess.
pub trait Model: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn theta_domain(&self) -> Vec<ThetaBound>;

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64>;
    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>>;
    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>>;
    fn grad_theta_score(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>)
        -> Result<Array2<f64>>;
    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>>;

    /// Validate shapes and the parameter domain. Implementations call this
    /// at the top of every evaluation.
    fn check_args(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim_x() {
            return Err(Error::config(format!(
                "model expects x of length {}, got {}",
                self.dim_x(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("model input x has non-finite entries"));
        }
        check_theta_against(&self.theta_domain(), theta)
    }
}

pub type ModelSpec = Arc<dyn Model>;

pub fn check_theta_against(domain: &[ThetaBound], theta: ArrayView1<f64>) -> Result<()> {
    if theta.len() != domain.len() {
        return Err(Error::config(format!(
            "model expects theta of length {}, got {}",
            domain.len(),
            theta.len()
        )));
    }
    for (i, (b, &v)) in domain.iter().zip(theta.iter()).enumerate() {
        if !b.contains(v) {
            return Err(Error::config(format!(
                "theta[{i}] = {v} outside the model domain ({}, {})",
                b.lo, b.hi
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference wrapper
// ---------------------------------------------------------------------------

struct FiniteDiffModel {
    inner: ModelSpec,
}

impl FiniteDiffModel {
    fn logp(&self, x: &Array1<f64>, theta: &Array1<f64>) -> Result<f64> {
        let v = self.inner.log_density_unnorm(x.view(), theta.view())?;
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_wrap: log-density non-finite at x={x}, theta={theta}"
            )));
        }
        Ok(v)
    }

    /// Mixed second difference ∂_a ∂_b f where `a` perturbs `pa` and `b`
    /// perturbs `pb` (`pa`/`pb` select x or theta by mutation).
    fn cross(
        &self,
        x: &Array1<f64>,
        theta: &Array1<f64>,
        a_in_theta: bool,
        a: usize,
        b: usize,
    ) -> Result<f64> {
        let (ha, hb);
        let eval = |da: f64, db: f64| -> Result<f64> {
            let mut xe = x.clone();
            let mut te = theta.clone();
            if a_in_theta {
                te[a] += da;
            } else {
                xe[a] += da;
            }
            xe[b] += db;
            self.logp(&xe, &te)
        };
        ha = if a_in_theta {
            fd_step2(theta[a])
        } else {
            fd_step2(x[a])
        };
        hb = fd_step2(x[b]);
        Ok(
            (eval(ha, hb)? - eval(ha, -hb)? - eval(-ha, hb)? + eval(-ha, -hb)?)
                / (4.0 * ha * hb),
        )
    }

    fn hess_at(&self, x: &Array1<f64>, theta: &Array1<f64>) -> Result<Array2<f64>> {
        let d = x.len();
        let mut h = Array2::zeros((d, d));
        let f0 = self.logp(x, theta)?;
        for i in 0..d {
            let hi = fd_step2(x[i]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += hi;
            xm[i] -= hi;
            h[[i, i]] = (self.logp(&xp, theta)? - 2.0 * f0 + self.logp(&xm, theta)?) / (hi * hi);
            for j in (i + 1)..d {
                let v = self.cross(x, theta, false, i, j)?;
                h[[i, j]] = v;
                h[[j, i]] = v;
            }
        }
        Ok(h)
    }
}

impl Model for FiniteDiffModel {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_theta(&self) -> usize {
        self.inner.dim_theta()
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        self.inner.theta_domain()
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.inner.log_density_unnorm(x, theta)
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let x0 = x.to_owned();
        let t0 = theta.to_owned();
        let mut s = Array1::zeros(x.len());
        for j in 0..x.len() {
            let h = fd_step(x0[j]);
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            s[j] = (self.logp(&xp, &t0)? - self.logp(&xm, &t0)?) / (2.0 * h);
        }
        Ok(s)
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        self.hess_at(&x.to_owned(), &theta.to_owned())
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let x0 = x.to_owned();
        let t0 = theta.to_owned();
        let (m, d) = (theta.len(), x.len());
        let mut g = Array2::zeros((m, d));
        for a in 0..m {
            for j in 0..d {
                g[[a, j]] = self.cross(&x0, &t0, true, a, j)?;
            }
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let x0 = x.to_owned();
        let t0 = theta.to_owned();
        let (m, d) = (theta.len(), x.len());
        let mut g = Array3::zeros((m, d, d));
        for a in 0..m {
            // Differencing the hessian stencil, which itself carries ~eps^(1/2)
            // noise, needs the wider third-level step.
            let h = fd_step3(t0[a]);
            let mut tp = t0.clone();
            let mut tm = t0.clone();
            tp[a] += h;
            tm[a] -= h;
            let hp = self.hess_at(&x0, &tp)?;
            let hm = self.hess_at(&x0, &tm)?;
            for i in 0..d {
                for j in 0..d {
                    g[[a, i, j]] = (hp[[i, j]] - hm[[i, j]]) / (2.0 * h);
                }
            }
        }
        Ok(g)
    }
}

/// Replace every derivative slot of `inner` with central differences of its
/// log-density. Oracle-grade accuracy: first derivatives ~1e-10 relative,
/// second ~1e-7, third ~1e-5.
pub fn finite_diff_wrap(inner: ModelSpec) -> ModelSpec {
    Arc::new(FiniteDiffModel { inner })
}

// ---------------------------------------------------------------------------
// Builtin models
// ---------------------------------------------------------------------------

/// Gaussian location family, log p = −‖x − θ‖².
struct GaussianLocation {
    d: usize,
}

impl Model for GaussianLocation {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        self.d
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        vec![ThetaBound::free(); self.d]
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        Ok(-x
            .iter()
            .zip(theta.iter())
            .map(|(xi, ti)| (xi - ti) * (xi - ti))
            .sum::<f64>())
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        Ok(Array1::from_iter(
            x.iter().zip(theta.iter()).map(|(xi, ti)| -2.0 * (xi - ti)),
        ))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        Ok(Array2::from_diag_elem(self.d, -2.0))
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        Ok(Array2::from_diag_elem(self.d, 2.0))
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        Ok(Array3::zeros((self.d, self.d, self.d)))
    }
}

/// Gaussian with free mean and per-coordinate scale,
/// θ = (μ_1..μ_d, σ_1..σ_d), log p = −Σ (x_i−μ_i)²/(2σ_i²) − Σ ln σ_i.
struct GaussianMeanCov {
    d: usize,
}

impl Model for GaussianMeanCov {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        2 * self.d
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        let mut dom = vec![ThetaBound::free(); self.d];
        dom.extend(vec![ThetaBound::greater_than(0.0); self.d]);
        dom
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let mut s = 0.0;
        for i in 0..self.d {
            let (mu, sig) = (theta[i], theta[self.d + i]);
            let z = (x[i] - mu) / sig;
            s += -0.5 * z * z - sig.ln();
        }
        Ok(s)
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        Ok(Array1::from_iter((0..self.d).map(|i| {
            let (mu, sig) = (theta[i], theta[self.d + i]);
            -(x[i] - mu) / (sig * sig)
        })))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let mut h = Array2::zeros((self.d, self.d));
        for i in 0..self.d {
            let sig = theta[self.d + i];
            h[[i, i]] = -1.0 / (sig * sig);
        }
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let mut g = Array2::zeros((2 * self.d, self.d));
        for i in 0..self.d {
            let (mu, sig) = (theta[i], theta[self.d + i]);
            g[[i, i]] = 1.0 / (sig * sig);
            g[[self.d + i, i]] = 2.0 * (x[i] - mu) / (sig * sig * sig);
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let mut g = Array3::zeros((2 * self.d, self.d, self.d));
        for i in 0..self.d {
            let sig = theta[self.d + i];
            g[[self.d + i, i, i]] = 2.0 / (sig * sig * sig);
        }
        Ok(g)
    }
}

/// Isotropic Laplace, θ = (θ₁ ∈ ℝ^d, θ₂ > 0),
/// log p = −(1/θ₂) Σ |x_i − θ₁_i| − d ln θ₂.
/// Scores at kinks follow the symmetric convention sign(0) = 0.
struct LaplaceModel {
    d: usize,
}

impl LaplaceModel {
    fn sgn(v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

impl Model for LaplaceModel {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        self.d + 1
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        let mut dom = vec![ThetaBound::free(); self.d];
        dom.push(ThetaBound::greater_than(0.0));
        dom
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let scale = theta[self.d];
        let s: f64 = (0..self.d).map(|i| (x[i] - theta[i]).abs()).sum();
        Ok(-s / scale - self.d as f64 * scale.ln())
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let scale = theta[self.d];
        Ok(Array1::from_iter(
            (0..self.d).map(|i| -Self::sgn(x[i] - theta[i]) / scale),
        ))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        Ok(Array2::zeros((self.d, self.d)))
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let scale = theta[self.d];
        let mut g = Array2::zeros((self.d + 1, self.d));
        for i in 0..self.d {
            g[[self.d, i]] = Self::sgn(x[i] - theta[i]) / (scale * scale);
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        Ok(Array3::zeros((self.d + 1, self.d, self.d)))
    }
}

/// Symmetric Bessel family: p ∝ z^ν K_ν(z) with z = ‖x − θ₁‖/θ₂ and
/// ν = s − d/2 > 0. The case s = 1, d = 1 reduces to the Laplace density.
struct SymmetricBessel {
    d: usize,
    s: f64,
}

struct BesselRadial {
    // radial profile g and first three derivatives at z = r/θ₂
    g1: f64,
    g2: f64,
    g3: f64,
    z: f64,
    r: f64,
    u: Array1<f64>,
}

impl SymmetricBessel {
    fn nu(&self) -> f64 {
        self.s - self.d as f64 / 2.0
    }

    fn radial(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<BesselRadial> {
        let scale = theta[self.d];
        let u = Array1::from_iter((0..self.d).map(|i| x[i] - theta[i]));
        let r = u.dot(&u).sqrt();
        if r == 0.0 {
            return Err(Error::numeric(
                "symmetric_bessel derivatives are singular at x = θ₁",
            ));
        }
        let z = r / scale;
        let (_, g1, g2, g3) = bessel_log_profile(self.nu(), z)?;
        Ok(BesselRadial { g1, g2, g3, z, r, u })
    }

    /// Hessian coefficients: hess = A·uuᵀ + B·I.
    fn hess_coeffs(rad: &BesselRadial, scale: f64) -> (f64, f64) {
        let (r, g1, g2) = (rad.r, rad.g1, rad.g2);
        let a = g2 / (scale * scale * r * r) - g1 / (scale * r * r * r);
        let b = g1 / (scale * r);
        (a, b)
    }
}

impl Model for SymmetricBessel {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        self.d + 1
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        let mut dom = vec![ThetaBound::free(); self.d];
        dom.push(ThetaBound::greater_than(0.0));
        dom
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let scale = theta[self.d];
        let r = (0..self.d)
            .map(|i| (x[i] - theta[i]) * (x[i] - theta[i]))
            .sum::<f64>()
            .sqrt();
        if r == 0.0 {
            // g(z) → ν ln z has a removable singularity against K_ν's pole;
            // the density is finite at the center, approach on the axis.
            let z = 1e-12;
            let (g, _, _, _) = bessel_log_profile(self.nu(), z)?;
            return Ok(g);
        }
        let (g, _, _, _) = bessel_log_profile(self.nu(), r / scale)?;
        Ok(g)
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let rad = self.radial(x, theta)?;
        let scale = theta[self.d];
        let c = rad.g1 / (scale * rad.r);
        Ok(rad.u.mapv(|ui| c * ui))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let rad = self.radial(x, theta)?;
        let scale = theta[self.d];
        let (a, b) = Self::hess_coeffs(&rad, scale);
        let mut h = Array2::zeros((self.d, self.d));
        for i in 0..self.d {
            for j in 0..self.d {
                h[[i, j]] = a * rad.u[i] * rad.u[j] + if i == j { b } else { 0.0 };
            }
        }
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let rad = self.radial(x, theta)?;
        let scale = theta[self.d];
        let (a, b) = Self::hess_coeffs(&rad, scale);
        let mut g = Array2::zeros((self.d + 1, self.d));
        // Location rows: ∂_{θ₁} = −∂_x of the score, i.e. −hess.
        for k in 0..self.d {
            for i in 0..self.d {
                g[[k, i]] = -(a * rad.u[k] * rad.u[i] + if i == k { b } else { 0.0 });
            }
        }
        // Scale row: ∂_{θ₂} [g'(z) u_i/(θ₂ r)] = −u_i (z g'' + g')/(θ₂² r).
        let c = -(rad.z * rad.g2 + rad.g1) / (scale * scale * rad.r);
        for i in 0..self.d {
            g[[self.d, i]] = c * rad.u[i];
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let rad = self.radial(x, theta)?;
        let scale = theta[self.d];
        let (a, _) = Self::hess_coeffs(&rad, scale);
        let (r, g1, g2, g3) = (rad.r, rad.g1, rad.g2, rad.g3);
        let (t2, t3) = (scale * scale, scale * scale * scale);
        let r2 = r * r;
        // Radial derivatives of the hessian coefficients.
        let a_r = g3 / (t3 * r2) - 3.0 * g2 / (t2 * r2 * r) + 3.0 * g1 / (scale * r2 * r2);
        let b_r = g2 / (t2 * r) - g1 / (scale * r2);
        // θ₂-derivatives (z = r/θ₂ shrinks as the scale grows).
        let a_s = -(rad.z * g3 + 2.0 * g2) / (t3 * r2) + (rad.z * g2 + g1) / (t2 * r2 * r);
        let b_s = -(rad.z * g2 + g1) / (t2 * r);
        let mut out = Array3::zeros((self.d + 1, self.d, self.d));
        for k in 0..self.d {
            for i in 0..self.d {
                for j in 0..self.d {
                    let mut v = a_r * (rad.u[k] / r) * rad.u[i] * rad.u[j];
                    if i == k {
                        v += a * rad.u[j];
                    }
                    if j == k {
                        v += a * rad.u[i];
                    }
                    if i == j {
                        v += b_r * rad.u[k] / r;
                    }
                    out[[k, i, j]] = -v;
                }
            }
        }
        for i in 0..self.d {
            for j in 0..self.d {
                out[[self.d, i, j]] =
                    a_s * rad.u[i] * rad.u[j] + if i == j { b_s } else { 0.0 };
            }
        }
        Ok(out)
    }
}

/// Heavy-tailed location–scale family with radial profile
/// log p = −((ν+1)/2) ln(1 + ‖x−θ₁‖²/(ν θ₂²)) − ln θ₂.
struct StudentT {
    d: usize,
    nu: f64,
}

impl StudentT {
    /// (u, Q, c, b) with Q = 1 + ‖u‖²/(νθ₂²), c = (ν+1)/(νθ₂²), b = 2/(νθ₂²).
    fn parts(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> (Array1<f64>, f64, f64, f64) {
        let scale = theta[self.d];
        let u = Array1::from_iter((0..self.d).map(|i| x[i] - theta[i]));
        let nt2 = self.nu * scale * scale;
        let q = 1.0 + u.dot(&u) / nt2;
        let c = (self.nu + 1.0) / nt2;
        let b = 2.0 / nt2;
        (u, q, c, b)
    }
}

impl Model for StudentT {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        self.d + 1
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        let mut dom = vec![ThetaBound::free(); self.d];
        dom.push(ThetaBound::greater_than(0.0));
        dom
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let (_, q, _, _) = self.parts(x, theta);
        Ok(-0.5 * (self.nu + 1.0) * q.ln() - theta[self.d].ln())
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let (u, q, c, _) = self.parts(x, theta);
        Ok(u.mapv(|ui| -c * ui / q))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let (u, q, c, b) = self.parts(x, theta);
        let mut h = Array2::zeros((self.d, self.d));
        for i in 0..self.d {
            for j in 0..self.d {
                h[[i, j]] = c * b * u[i] * u[j] / (q * q) - if i == j { c / q } else { 0.0 };
            }
        }
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let (u, q, c, b) = self.parts(x, theta);
        let scale = theta[self.d];
        let mut g = Array2::zeros((self.d + 1, self.d));
        for k in 0..self.d {
            for i in 0..self.d {
                // −hess entries
                g[[k, i]] = -(c * b * u[i] * u[k] / (q * q)) + if i == k { c / q } else { 0.0 };
            }
        }
        for i in 0..self.d {
            g[[self.d, i]] = 2.0 * c * u[i] / (scale * q * q);
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let (u, q, c, b) = self.parts(x, theta);
        let scale = theta[self.d];
        let mut out = Array3::zeros((self.d + 1, self.d, self.d));
        let q2 = q * q;
        let q3 = q2 * q;
        for k in 0..self.d {
            for i in 0..self.d {
                for j in 0..self.d {
                    let mut v = -2.0 * c * b * b * u[i] * u[j] * u[k] / q3;
                    if i == j {
                        v += c * b * u[k] / q2;
                    }
                    if i == k {
                        v += c * b * u[j] / q2;
                    }
                    if j == k {
                        v += c * b * u[i] / q2;
                    }
                    // ∂_{θ₁k} = −∂_{x_k}
                    out[[k, i, j]] = -v;
                }
            }
        }
        for i in 0..self.d {
            for j in 0..self.d {
                let mut v = -4.0 * c * b * u[i] * u[j] / (scale * q3);
                if i == j {
                    v += 2.0 * c / (scale * q2);
                }
                out[[self.d, i, j]] = v;
            }
        }
        Ok(out)
    }
}

/// Generalized gamma location family, log p = −Σ |x_i − θ₁_i|^{θ₂},
/// θ₂ > 1. Derivatives take the symmetric-convention value 0 on kinks.
struct GeneralizedGamma {
    d: usize,
}

impl GeneralizedGamma {
    fn sgn(v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

impl Model for GeneralizedGamma {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        self.d + 1
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        let mut dom = vec![ThetaBound::free(); self.d];
        dom.push(ThetaBound::greater_than(1.0));
        dom
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let p = theta[self.d];
        Ok(-(0..self.d)
            .map(|i| (x[i] - theta[i]).abs().powf(p))
            .sum::<f64>())
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let p = theta[self.d];
        Ok(Array1::from_iter((0..self.d).map(|i| {
            let u = x[i] - theta[i];
            if u == 0.0 {
                0.0
            } else {
                -p * u.abs().powf(p - 1.0) * Self::sgn(u)
            }
        })))
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let p = theta[self.d];
        let mut h = Array2::zeros((self.d, self.d));
        for i in 0..self.d {
            let u = x[i] - theta[i];
            h[[i, i]] = if u == 0.0 {
                0.0
            } else {
                -p * (p - 1.0) * u.abs().powf(p - 2.0)
            };
        }
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let p = theta[self.d];
        let mut g = Array2::zeros((self.d + 1, self.d));
        for i in 0..self.d {
            let u = x[i] - theta[i];
            if u == 0.0 {
                continue;
            }
            g[[i, i]] = p * (p - 1.0) * u.abs().powf(p - 2.0);
            g[[self.d, i]] =
                -Self::sgn(u) * u.abs().powf(p - 1.0) * (1.0 + p * u.abs().ln());
        }
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let p = theta[self.d];
        let mut out = Array3::zeros((self.d + 1, self.d, self.d));
        for i in 0..self.d {
            let u = x[i] - theta[i];
            if u == 0.0 {
                continue;
            }
            out[[i, i, i]] = p * (p - 1.0) * (p - 2.0) * u.abs().powf(p - 3.0) * Self::sgn(u);
            out[[self.d, i, i]] = -(2.0 * p - 1.0) * u.abs().powf(p - 2.0)
                - p * (p - 1.0) * u.abs().powf(p - 2.0) * u.abs().ln();
        }
        Ok(out)
    }
}

/// Exponential-family model with an intractable normalizer:
/// log p = −0.5 Σ x_i² + 0.2 Σ_{i≥3} x₁x_i + 0.6 tanh(x₁) + θ tanh(x_k),
/// where the scalar θ weights the tanh of one fixed coordinate k
/// (second-to-last for d ≥ 3, last for d = 2; d = 6 puts θ on x₅).
struct IntractableExpFam {
    d: usize,
}

impl IntractableExpFam {
    /// Zero-based coordinate whose tanh the free parameter multiplies.
    pub(crate) fn theta_coord(d: usize) -> usize {
        if d >= 3 {
            d - 2
        } else {
            d - 1
        }
    }

    fn sech2(t: f64) -> f64 {
        let th = t.tanh();
        1.0 - th * th
    }
}

impl Model for IntractableExpFam {
    fn dim_x(&self) -> usize {
        self.d
    }
    fn dim_theta(&self) -> usize {
        1
    }
    fn theta_domain(&self) -> Vec<ThetaBound> {
        vec![ThetaBound::free()]
    }

    fn log_density_unnorm(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
        self.check_args(x, theta)?;
        let k = Self::theta_coord(self.d);
        let quad: f64 = x.iter().map(|v| v * v).sum();
        let cross: f64 = (2..self.d).map(|i| x[0] * x[i]).sum();
        Ok(-0.5 * quad + 0.2 * cross + 0.6 * x[0].tanh() + theta[0] * x[k].tanh())
    }

    fn score_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_args(x, theta)?;
        let k = Self::theta_coord(self.d);
        let cross_sum: f64 = (2..self.d).map(|i| x[i]).sum();
        let mut s = Array1::from_iter(x.iter().map(|v| -v));
        s[0] += 0.2 * cross_sum + 0.6 * Self::sech2(x[0]);
        for i in 2..self.d {
            s[i] += 0.2 * x[0];
        }
        s[k] += theta[0] * Self::sech2(x[k]);
        Ok(s)
    }

    fn hess_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let k = Self::theta_coord(self.d);
        let mut h = Array2::from_diag_elem(self.d, -1.0);
        for i in 2..self.d {
            h[[0, i]] += 0.2;
            h[[i, 0]] += 0.2;
        }
        let t0 = x[0].tanh();
        h[[0, 0]] += 0.6 * (-2.0) * Self::sech2(x[0]) * t0;
        let tk = x[k].tanh();
        h[[k, k]] += theta[0] * (-2.0) * Self::sech2(x[k]) * tk;
        Ok(h)
    }

    fn grad_theta_score(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_args(x, theta)?;
        let k = Self::theta_coord(self.d);
        let mut g = Array2::zeros((1, self.d));
        g[[0, k]] = Self::sech2(x[k]);
        Ok(g)
    }

    fn grad_theta_hess(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_args(x, theta)?;
        let k = Self::theta_coord(self.d);
        let mut g = Array3::zeros((1, self.d, self.d));
        g[[0, k, k]] = -2.0 * Self::sech2(x[k]) * x[k].tanh();
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

pub(crate) fn hyper_get(hyper: &HashMap<String, f64>, key: &str) -> Option<f64> {
    hyper.get(key).copied()
}

pub(crate) fn hyper_dim(hyper: &HashMap<String, f64>, default: usize) -> Result<usize> {
    match hyper_get(hyper, "d") {
        None => Ok(default),
        Some(v) => {
            if v < 1.0 || v.fract() != 0.0 || v > 1e6 {
                Err(Error::config(format!("hyper d must be a positive integer, got {v}")))
            } else {
                Ok(v as usize)
            }
        }
    }
}

/// Construct a builtin model by id. `hyper` supplies fixed constants:
/// `d` (dimension, default 1; intractable_expfam defaults to 2), `s` for
/// symmetric_bessel, `nu` for student_t.
pub fn builtin_model(name: &str, hyper: &HashMap<String, f64>) -> Result<ModelSpec> {
    match name {
        "gaussian_location" => {
            let d = hyper_dim(hyper, 1)?;
            Ok(Arc::new(GaussianLocation { d }))
        }
        "gaussian_meancov" => {
            let d = hyper_dim(hyper, 1)?;
            Ok(Arc::new(GaussianMeanCov { d }))
        }
        "laplace" => {
            let d = hyper_dim(hyper, 1)?;
            Ok(Arc::new(LaplaceModel { d }))
        }
        "symmetric_bessel" => {
            let d = hyper_dim(hyper, 1)?;
            let s = hyper_get(hyper, "s")
                .ok_or_else(|| Error::config("symmetric_bessel requires hyper s"))?;
            if !(s > d as f64 / 2.0) {
                return Err(Error::config(format!(
                    "symmetric_bessel requires s > d/2, got s={s}, d={d}"
                )));
            }
            Ok(Arc::new(SymmetricBessel { d, s }))
        }
        "student_t" => {
            let d = hyper_dim(hyper, 1)?;
            let nu = hyper_get(hyper, "nu")
                .ok_or_else(|| Error::config("student_t requires hyper nu"))?;
            if !(nu > 0.0) {
                return Err(Error::config(format!("student_t requires nu > 0, got {nu}")));
            }
            Ok(Arc::new(StudentT { d, nu }))
        }
        "generalized_gamma" => {
            let d = hyper_dim(hyper, 1)?;
            Ok(Arc::new(GeneralizedGamma { d }))
        }
        "intractable_expfam" => {
            let d = hyper_dim(hyper, 2)?;
            if d < 2 {
                return Err(Error::config("intractable_expfam requires d >= 2"));
            }
            Ok(Arc::new(IntractableExpFam { d }))
        }
        other => Err(Error::config(format!(
            "unknown model '{other}'; known: {}",
            MODEL_IDS.join(", ")
        ))),
    }
}

pub const MODEL_IDS: [&str; 7] = [
    "gaussian_location",
    "gaussian_meancov",
    "laplace",
    "symmetric_bessel",
    "student_t",
    "generalized_gamma",
    "intractable_expfam",
];

/// (id, hyperparameters, description) rows for CLI listings.
pub fn list_models() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        ("gaussian_location", "d", "log p = −‖x−θ‖², θ ∈ ℝ^d"),
        (
            "gaussian_meancov",
            "d",
            "independent Gaussians, θ = (means, scales), scales > 0",
        ),
        ("laplace", "d", "log p = −Σ|x_i−θ₁_i|/θ₂, θ₂ > 0"),
        (
            "symmetric_bessel",
            "d, s",
            "p ∝ z^ν K_ν(z), z = ‖x−θ₁‖/θ₂, ν = s−d/2 > 0",
        ),
        (
            "student_t",
            "d, nu",
            "log p = −((ν+1)/2)ln(1+‖x−θ₁‖²/(νθ₂²)) − ln θ₂",
        ),
        (
            "generalized_gamma",
            "d",
            "log p = −Σ|x_i−θ₁_i|^{θ₂}, θ₂ > 1",
        ),
        (
            "intractable_expfam",
            "d",
            "quadratic + cross-terms + tanh features; scalar θ weights one tanh",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hyper(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn gaussian_location_score_value() {
        let m = builtin_model("gaussian_location", &hyper(&[])).unwrap();
        let s = m.score_x(array![1.0].view(), array![0.0].view()).unwrap();
        assert_eq!(s[0], -2.0);
    }

    #[test]
    fn student_t_score_zero_at_center() {
        let m = builtin_model("student_t", &hyper(&[("nu", 5.0)])).unwrap();
        let s = m
            .score_x(array![25.0].view(), array![25.0, 10.0].view())
            .unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn bessel_laplace_case_score_is_inverse_scale() {
        // s = 1, d = 1 gives ν = 1/2, the Laplace density; right of the
        // location the score is −1/θ₂. Checked against differencing the
        // log-density itself.
        let m = builtin_model("symmetric_bessel", &hyper(&[("s", 1.0)])).unwrap();
        let theta = array![0.0, 2.0];
        for &x in &[0.5, 1.0, 3.0] {
            let s = m.score_x(array![x].view(), theta.view()).unwrap();
            assert!((s[0] + 0.5).abs() < 1e-10, "x={x}: {}", s[0]);
            let fd = crate::num::central_diff(
                |xx| m.log_density_unnorm(array![xx].view(), theta.view()).unwrap(),
                x,
            );
            assert!((s[0] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_shift_leaves_derivatives_bit_identical() {
        struct Shifted(ModelSpec, f64);
        impl Model for Shifted {
            fn dim_x(&self) -> usize {
                self.0.dim_x()
            }
            fn dim_theta(&self) -> usize {
                self.0.dim_theta()
            }
            fn theta_domain(&self) -> Vec<ThetaBound> {
                self.0.theta_domain()
            }
            fn log_density_unnorm(
                &self,
                x: ArrayView1<f64>,
                t: ArrayView1<f64>,
            ) -> Result<f64> {
                Ok(self.0.log_density_unnorm(x, t)? + self.1)
            }
            fn score_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
                self.0.score_x(x, t)
            }
            fn hess_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
                self.0.hess_x(x, t)
            }
            fn grad_theta_score(
                &self,
                x: ArrayView1<f64>,
                t: ArrayView1<f64>,
            ) -> Result<Array2<f64>> {
                self.0.grad_theta_score(x, t)
            }
            fn grad_theta_hess(
                &self,
                x: ArrayView1<f64>,
                t: ArrayView1<f64>,
            ) -> Result<Array3<f64>> {
                self.0.grad_theta_hess(x, t)
            }
        }
        let base = builtin_model("student_t", &hyper(&[("nu", 3.0), ("d", 2.0)])).unwrap();
        let shifted: ModelSpec = Arc::new(Shifted(base.clone(), 123.456));
        let x = array![0.7, -1.2];
        let t = array![0.1, -0.3, 1.5];
        let a = base.score_x(x.view(), t.view()).unwrap();
        let b = shifted.score_x(x.view(), t.view()).unwrap();
        assert_eq!(a, b);
        let ha = base.hess_x(x.view(), t.view()).unwrap();
        let hb = shifted.hess_x(x.view(), t.view()).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn wrap_of_constant_density_has_zero_score() {
        struct Flat;
        impl Model for Flat {
            fn dim_x(&self) -> usize {
                2
            }
            fn dim_theta(&self) -> usize {
                1
            }
            fn theta_domain(&self) -> Vec<ThetaBound> {
                vec![ThetaBound::free()]
            }
            fn log_density_unnorm(&self, _: ArrayView1<f64>, _: ArrayView1<f64>) -> Result<f64> {
                Ok(7.5)
            }
            fn score_x(&self, _: ArrayView1<f64>, _: ArrayView1<f64>) -> Result<Array1<f64>> {
                unimplemented!()
            }
            fn hess_x(&self, _: ArrayView1<f64>, _: ArrayView1<f64>) -> Result<Array2<f64>> {
                unimplemented!()
            }
            fn grad_theta_score(
                &self,
                _: ArrayView1<f64>,
                _: ArrayView1<f64>,
            ) -> Result<Array2<f64>> {
                unimplemented!()
            }
            fn grad_theta_hess(
                &self,
                _: ArrayView1<f64>,
                _: ArrayView1<f64>,
            ) -> Result<Array3<f64>> {
                unimplemented!()
            }
        }
        let w = finite_diff_wrap(Arc::new(Flat));
        let s = w.score_x(array![0.3, -0.4].view(), array![0.0].view()).unwrap();
        assert_eq!(s, array![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_theta_and_unknown_model() {
        let m = builtin_model("laplace", &hyper(&[])).unwrap();
        assert!(m
            .score_x(array![1.0].view(), array![0.0, -1.0].view())
            .is_err());
        assert!(builtin_model("no_such_model", &hyper(&[])).is_err());
        assert!(builtin_model("symmetric_bessel", &hyper(&[("s", 0.5), ("d", 1.0)])).is_err());
        assert!(builtin_model("student_t", &hyper(&[("nu", -1.0)])).is_err());
    }

    #[test]
    fn intractable_theta_coordinate_layout() {
        assert_eq!(IntractableExpFam::theta_coord(2), 1);
        assert_eq!(IntractableExpFam::theta_coord(3), 1);
        assert_eq!(IntractableExpFam::theta_coord(6), 4);
    }
}
