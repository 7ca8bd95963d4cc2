//! Scalar reproducing kernels with analytic derivatives through second
//! cross-order, and the two matrix-valued constructions built from them.
//!
//! Derivative conventions: `grad_x` is ∇_x k, `grad_y` is ∇_y k, and
//! `grad_xy` is the d×d matrix with entry (i, j) = ∂_{x^i} ∂_{y^j} k.
//! Derivatives are analytic; finite differences are kept to the test suite,
//! because the downstream Stein kernel consumes second cross-derivatives
//! where FD error compounds.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::min_eigval_symmetric;

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

pub trait ScalarKernel: Send + Sync {
    fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64;
    fn grad_x(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64>;
    fn grad_y(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64>;
    fn grad_xy(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64>;
}

pub type ScalarKernelRef = Arc<dyn ScalarKernel>;

/// Radial Gaussian kernel k(x,y) = exp(−‖x−y‖²/(2ℓ²)).
pub struct GaussianKernel {
    ell2: f64,
}

impl GaussianKernel {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::config(format!(
                "gaussian kernel requires lengthscale > 0, got {lengthscale}"
            )));
        }
        Ok(GaussianKernel {
            ell2: lengthscale * lengthscale,
        })
    }

    fn diff(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(x.iter().zip(y.iter()).map(|(a, b)| a - b))
    }
}

impl ScalarKernel for GaussianKernel {
    fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        let u = Self::diff(x, y);
        (-u.dot(&u) / (2.0 * self.ell2)).exp()
    }

    fn grad_x(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let u = Self::diff(x, y);
        let k = (-u.dot(&u) / (2.0 * self.ell2)).exp();
        u.mapv(|ui| -k * ui / self.ell2)
    }

    fn grad_y(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let u = Self::diff(x, y);
        let k = (-u.dot(&u) / (2.0 * self.ell2)).exp();
        u.mapv(|ui| k * ui / self.ell2)
    }

    fn grad_xy(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
        let u = Self::diff(x, y);
        let k = (-u.dot(&u) / (2.0 * self.ell2)).exp();
        let d = u.len();
        let mut g = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] = k
                    * (if i == j { 1.0 / self.ell2 } else { 0.0 }
                        - u[i] * u[j] / (self.ell2 * self.ell2));
            }
        }
        g
    }
}

/// Inverse multiquadric kernel k(x,y) = (c² + ‖x−y‖²)^β with β < 0.
pub struct ImqKernel {
    c2: f64,
    beta: f64,
}

impl ImqKernel {
    pub fn new(c: f64, beta: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::config(format!("imq kernel requires c > 0, got {c}")));
        }
        if !(beta < 0.0) || !beta.is_finite() {
            return Err(Error::config(format!(
                "imq kernel requires beta < 0, got {beta}"
            )));
        }
        Ok(ImqKernel { c2: c * c, beta })
    }
}

impl ScalarKernel for ImqKernel {
    fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (self.c2 + r2).powf(self.beta)
    }

    fn grad_x(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let u = Array1::from_iter(x.iter().zip(y.iter()).map(|(a, b)| a - b));
        let t = self.c2 + u.dot(&u);
        let f = 2.0 * self.beta * t.powf(self.beta - 1.0);
        u.mapv(|ui| f * ui)
    }

    fn grad_y(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        self.grad_x(x, y).mapv(|v| -v)
    }

    fn grad_xy(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
        let u = Array1::from_iter(x.iter().zip(y.iter()).map(|(a, b)| a - b));
        let t = self.c2 + u.dot(&u);
        let d = u.len();
        let f1 = -2.0 * self.beta * t.powf(self.beta - 1.0);
        let f2 = -4.0 * self.beta * (self.beta - 1.0) * t.powf(self.beta - 2.0);
        let mut g = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] = if i == j { f1 } else { 0.0 } + f2 * u[i] * u[j];
            }
        }
        g
    }
}

/// Pointwise weight with its gradient, for [`WeightedKernel`].
pub trait WeightFn: Send + Sync {
    fn eval(&self, x: ArrayView1<f64>) -> f64;
    fn grad(&self, x: ArrayView1<f64>) -> Array1<f64>;
}

/// Closure-backed weight.
pub struct FnWeight<E, G> {
    pub eval_fn: E,
    pub grad_fn: G,
}

impl<E, G> WeightFn for FnWeight<E, G>
where
    E: Fn(ArrayView1<f64>) -> f64 + Send + Sync,
    G: Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync,
{
    fn eval(&self, x: ArrayView1<f64>) -> f64 {
        (self.eval_fn)(x)
    }
    fn grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.grad_fn)(x)
    }
}

/// Separably weighted kernel w(x)·k(x,y)·w(y).
///
/// Used in two places: the scalar-kernel reduction of a scalar diffusion
/// (the discrepancy with m = h·I equals a plain one with kernel h k h), and
/// the density-weighted mollifier kernel whose small-bandwidth limit turns
/// the kernelized discrepancy into the diffusion score-matching objective.
pub struct WeightedKernel {
    inner: ScalarKernelRef,
    weight: Arc<dyn WeightFn>,
}

impl WeightedKernel {
    pub fn new(inner: ScalarKernelRef, weight: Arc<dyn WeightFn>) -> Self {
        WeightedKernel { inner, weight }
    }
}

impl ScalarKernel for WeightedKernel {
    fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        self.weight.eval(x) * self.inner.eval(x, y) * self.weight.eval(y)
    }

    fn grad_x(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let (wx, wy) = (self.weight.eval(x), self.weight.eval(y));
        let k = self.inner.eval(x, y);
        let gw = self.weight.grad(x);
        let gk = self.inner.grad_x(x, y);
        Array1::from_iter(
            gw.iter()
                .zip(gk.iter())
                .map(|(dw, dk)| wy * (dw * k + wx * dk)),
        )
    }

    fn grad_y(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let (wx, wy) = (self.weight.eval(x), self.weight.eval(y));
        let k = self.inner.eval(x, y);
        let gw = self.weight.grad(y);
        let gk = self.inner.grad_y(x, y);
        Array1::from_iter(
            gw.iter()
                .zip(gk.iter())
                .map(|(dw, dk)| wx * (dw * k + wy * dk)),
        )
    }

    fn grad_xy(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
        let (wx, wy) = (self.weight.eval(x), self.weight.eval(y));
        let k = self.inner.eval(x, y);
        let gwx = self.weight.grad(x);
        let gwy = self.weight.grad(y);
        let gkx = self.inner.grad_x(x, y);
        let gky = self.inner.grad_y(x, y);
        let gkxy = self.inner.grad_xy(x, y);
        let d = x.len();
        let mut g = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] = gwx[i] * (gwy[j] * k + wy * gky[j])
                    + wx * (gwy[j] * gkx[i] + wy * gkxy[[i, j]]);
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels
// ---------------------------------------------------------------------------

/// The two matrix-valued kernel constructions: a coordinatewise diagonal
/// `diag(λ₁k¹, …, λ_d k^d)` and a constant SPD matrix scaling one scalar
/// kernel, `B·k`.
#[derive(Clone)]
pub enum MatrixKernel {
    Diagonal {
        lambdas: Vec<f64>,
        kernels: Vec<ScalarKernelRef>,
    },
    Scaled {
        b: Array2<f64>,
        kernel: ScalarKernelRef,
    },
}

impl MatrixKernel {
    pub fn diagonal(lambdas: Vec<f64>, kernels: Vec<ScalarKernelRef>) -> Result<Self> {
        if lambdas.len() != kernels.len() || lambdas.is_empty() {
            return Err(Error::config(
                "diagonal matrix kernel needs one (λ, kernel) pair per coordinate",
            ));
        }
        if lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::config("diagonal matrix kernel requires all λ > 0"));
        }
        Ok(MatrixKernel::Diagonal { lambdas, kernels })
    }

    /// Uniform diagonal: the same kernel and weight on every coordinate
    /// (K = λ·I·k).
    pub fn isotropic(dim: usize, lambda: f64, kernel: ScalarKernelRef) -> Result<Self> {
        Self::diagonal(vec![lambda; dim], vec![kernel; dim])
    }

    pub fn scaled(b: Array2<f64>, kernel: ScalarKernelRef) -> Result<Self> {
        if b.nrows() != b.ncols() {
            return Err(Error::config("scaled matrix kernel needs square B"));
        }
        let asym = (0..b.nrows())
            .flat_map(|i| (0..b.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (b[[i, j]] - b[[j, i]]).abs())
            .fold(0.0f64, f64::max);
        if asym > 1e-12 {
            return Err(Error::config("scaled matrix kernel needs symmetric B"));
        }
        let min_ev = min_eigval_symmetric(&b)?;
        if min_ev <= 0.0 {
            return Err(Error::config(format!(
                "scaled matrix kernel needs positive-definite B (min eigenvalue {min_ev:.3e})"
            )));
        }
        Ok(MatrixKernel::Scaled { b, kernel })
    }

    pub fn dim(&self) -> usize {
        match self {
            MatrixKernel::Diagonal { lambdas, .. } => lambdas.len(),
            MatrixKernel::Scaled { b, .. } => b.nrows(),
        }
    }

    /// K(x,y), d×d.
    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((d, d));
        match self {
            MatrixKernel::Diagonal { lambdas, kernels } => {
                for l in 0..d {
                    out[[l, l]] = lambdas[l] * kernels[l].eval(x, y);
                }
            }
            MatrixKernel::Scaled { b, kernel } => {
                let k = kernel.eval(x, y);
                out.assign(b);
                out.mapv_inplace(|v| v * k);
            }
        }
        out
    }

    /// ∂_{x^r} K_{lj}(x,y) as [r, l, j].
    pub fn grad_x(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array3<f64> {
        let d = self.dim();
        let mut out = Array3::zeros((d, d, d));
        match self {
            MatrixKernel::Diagonal { lambdas, kernels } => {
                for l in 0..d {
                    let g = kernels[l].grad_x(x, y);
                    for r in 0..d {
                        out[[r, l, l]] = lambdas[l] * g[r];
                    }
                }
            }
            MatrixKernel::Scaled { b, kernel } => {
                let g = kernel.grad_x(x, y);
                for r in 0..d {
                    for l in 0..d {
                        for j in 0..d {
                            out[[r, l, j]] = b[[l, j]] * g[r];
                        }
                    }
                }
            }
        }
        out
    }

    /// ∂_{y^i} K_{lj}(x,y) as [i, l, j].
    pub fn grad_y(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array3<f64> {
        let d = self.dim();
        let mut out = Array3::zeros((d, d, d));
        match self {
            MatrixKernel::Diagonal { lambdas, kernels } => {
                for l in 0..d {
                    let g = kernels[l].grad_y(x, y);
                    for i in 0..d {
                        out[[i, l, l]] = lambdas[l] * g[i];
                    }
                }
            }
            MatrixKernel::Scaled { b, kernel } => {
                let g = kernel.grad_y(x, y);
                for i in 0..d {
                    for l in 0..d {
                        for j in 0..d {
                            out[[i, l, j]] = b[[l, j]] * g[i];
                        }
                    }
                }
            }
        }
        out
    }

    /// ∂_{x^r} ∂_{y^i} K_{lj}(x,y) as [r, i, l, j].
    pub fn grad_xy(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array4<f64> {
        let d = self.dim();
        let mut out = Array4::zeros((d, d, d, d));
        match self {
            MatrixKernel::Diagonal { lambdas, kernels } => {
                for l in 0..d {
                    let g = kernels[l].grad_xy(x, y);
                    for r in 0..d {
                        for i in 0..d {
                            out[[r, i, l, l]] = lambdas[l] * g[[r, i]];
                        }
                    }
                }
            }
            MatrixKernel::Scaled { b, kernel } => {
                let g = kernel.grad_xy(x, y);
                for r in 0..d {
                    for i in 0..d {
                        for l in 0..d {
                            for j in 0..d {
                                out[[r, i, l, j]] = b[[l, j]] * g[[r, i]];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Construct a scalar kernel by id. Parameters: gaussian takes `lengthscale`
/// (default 1), imq takes `c` (default 1) and `beta` (default −0.5).
pub fn scalar_kernel(name: &str, params: &HashMap<String, f64>) -> Result<ScalarKernelRef> {
    match name {
        "gaussian" => {
            let ell = params.get("lengthscale").copied().unwrap_or(1.0);
            Ok(Arc::new(GaussianKernel::new(ell)?))
        }
        "imq" => {
            let c = params.get("c").copied().unwrap_or(1.0);
            let beta = params.get("beta").copied().unwrap_or(-0.5);
            Ok(Arc::new(ImqKernel::new(c, beta)?))
        }
        other => Err(Error::config(format!(
            "unknown kernel '{other}'; known: gaussian, imq"
        ))),
    }
}

pub fn list_kernels() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        ("gaussian", "lengthscale", "exp(−‖x−y‖²/(2ℓ²))"),
        ("imq", "c, beta", "(c²+‖x−y‖²)^β, β < 0"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gaussian_pinned_values() {
        let k = GaussianKernel::new(1.0).unwrap();
        let x = array![0.0];
        let y = array![1.0];
        assert_eq!(k.eval(x.view(), x.view()), 1.0);
        assert!((k.eval(x.view(), y.view()) - (-0.5f64).exp()).abs() < 1e-15);
        let g = k.grad_xy(x.view(), x.view());
        assert!((g[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn imq_pinned_values() {
        let k = ImqKernel::new(1.0, -0.5).unwrap();
        let x = array![0.0];
        let y = array![2.0];
        assert_eq!(k.eval(x.view(), x.view()), 1.0);
        assert!((k.eval(x.view(), y.view()) - 1.0 / 5.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn parameter_domains_enforced() {
        assert!(GaussianKernel::new(0.0).is_err());
        assert!(GaussianKernel::new(-1.0).is_err());
        assert!(ImqKernel::new(1.0, 0.5).is_err());
        assert!(ImqKernel::new(0.0, -0.5).is_err());
        assert!(scalar_kernel("triangle", &HashMap::new()).is_err());
    }

    #[test]
    fn scaled_matrix_kernel_requires_spd() {
        let k: ScalarKernelRef = Arc::new(GaussianKernel::new(1.0).unwrap());
        assert!(MatrixKernel::scaled(array![[1.0, 2.0], [2.0, 1.0]], k.clone()).is_err());
        assert!(MatrixKernel::scaled(array![[1.0, 0.2], [0.2, 1.0]], k).is_ok());
    }

    #[test]
    fn matrix_kernel_at_coincidence() {
        let k: ScalarKernelRef = Arc::new(GaussianKernel::new(1.0).unwrap());
        let x = array![0.3, -0.7];
        let scaled = MatrixKernel::scaled(Array2::eye(2), k.clone()).unwrap();
        let e = scaled.eval(x.view(), x.view());
        assert_eq!(e, Array2::<f64>::eye(2));
        let diag = MatrixKernel::diagonal(vec![2.0, 3.0], vec![k.clone(), k]).unwrap();
        let e = diag.eval(x.view(), x.view());
        assert_eq!(e, array![[2.0, 0.0], [0.0, 3.0]]);
    }
}
