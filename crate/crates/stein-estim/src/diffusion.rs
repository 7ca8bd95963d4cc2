//! Diffusion matrix fields m(x; θ) and the derivative bundle the Stein
//! kernel and score-matching losses consume.
//!
//! Divergence convention: `div_x` returns the vector with entry
//! j = Σᵢ ∂_{x^i} m_{ij} (columnwise divergence), and `div_mmt` the same for
//! m mᵀ. θ-gradients are indexed parameter-major: `grad_theta[[a, i, j]]`
//! = ∂_{θ_a} m_{ij}.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Structural form, used by the Stein kernel to pick specialized
/// contractions. `Scalar` and `Identity` are special diagonals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionForm {
    Identity,
    Scalar,
    Diagonal,
    Full,
}

pub trait Diffusion: Send + Sync {
    fn form(&self) -> DiffusionForm;
    fn dim_x(&self) -> usize;

    /// m(x, θ), d×d.
    fn eval(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>>;
    /// (∇_x·m)_j = Σᵢ ∂_{x^i} m_{ij}.
    fn div_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>>;
    /// ∂_{θ_a} m_{ij} as [a, i, j]; a ranges over the full θ vector.
    fn grad_theta(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array3<f64>>;
    /// ∂_{θ_a} (∇_x·m)_j as [a, j].
    fn grad_theta_div_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>)
        -> Result<Array2<f64>>;
    /// m mᵀ, d×d, symmetric PSD.
    fn mmt(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array2<f64>>;
    /// (∇_x·(m mᵀ))_j.
    fn div_mmt(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>>;

    /// For identity/scalar/diagonal forms: the diagonal values fᵢ(x) and the
    /// matched derivatives ∂_{x^i} fᵢ(x). `None` for full fields.
    fn diag_parts(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Option<(Array1<f64>, Array1<f64>)>>;
}

pub type DiffusionRef = Arc<dyn Diffusion>;

// ---------------------------------------------------------------------------
// Identity
// ---------------------------------------------------------------------------

struct IdentityDiffusion {
    d: usize,
}

impl Diffusion for IdentityDiffusion {
    fn form(&self) -> DiffusionForm {
        DiffusionForm::Identity
    }
    fn dim_x(&self) -> usize {
        self.d
    }
    fn eval(&self, _x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::eye(self.d))
    }
    fn div_x(&self, _x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(self.d))
    }
    fn grad_theta(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array3<f64>> {
        Ok(Array3::zeros((t.len(), self.d, self.d)))
    }
    fn grad_theta_div_x(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((t.len(), self.d)))
    }
    fn mmt(&self, _x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::eye(self.d))
    }
    fn div_mmt(&self, _x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(self.d))
    }
    fn diag_parts(
        &self,
        _x: ArrayView1<f64>,
        _t: ArrayView1<f64>,
    ) -> Result<Option<(Array1<f64>, Array1<f64>)>> {
        Ok(Some((Array1::ones(self.d), Array1::zeros(self.d))))
    }
}

// ---------------------------------------------------------------------------
// Scalar fields h(x, θ) · I
// ---------------------------------------------------------------------------

/// A scalar field with the derivatives needed to lift h·I to a diffusion:
/// value, ∇_x h, ∇_θ h, and ∇_θ ∇_x h.
trait ScalarField: Send + Sync {
    fn value(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64>;
    fn grad_x(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>>;
    fn grad_theta(&self, x: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Array1<f64>>;
    fn grad_theta_grad_x(
        &self,
        x: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Result<Array2<f64>>;
}

struct ScalarDiffusion<F> {
    d: usize,
    field: F,
}

impl<F: ScalarField> Diffusion for ScalarDiffusion<F> {
    fn form(&self) -> DiffusionForm {
        DiffusionForm::Scalar
    }
    fn dim_x(&self) -> usize {
        self.d
    }
    fn eval(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_diag_elem(self.d, self.field.value(x, t)?))
    }
    fn div_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.field.grad_x(x, t)
    }
    fn grad_theta(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array3<f64>> {
        let gh = self.field.grad_theta(x, t)?;
        let mut out = Array3::zeros((t.len(), self.d, self.d));
        for a in 0..t.len() {
            for i in 0..self.d {
                out[[a, i, i]] = gh[a];
            }
        }
        Ok(out)
    }
    fn grad_theta_div_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.field.grad_theta_grad_x(x, t)
    }
    fn mmt(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        let h = self.field.value(x, t)?;
        Ok(Array2::from_diag_elem(self.d, h * h))
    }
    fn div_mmt(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        // ∇·(h²I) = ∇(h²) = 2h ∇h
        let h = self.field.value(x, t)?;
        Ok(self.field.grad_x(x, t)?.mapv(|g| 2.0 * h * g))
    }
    fn diag_parts(
        &self,
        x: ArrayView1<f64>,
        t: ArrayView1<f64>,
    ) -> Result<Option<(Array1<f64>, Array1<f64>)>> {
        let h = self.field.value(x, t)?;
        let g = self.field.grad_x(x, t)?;
        Ok(Some((Array1::from_elem(self.d, h), g)))
    }
}

/// h(x, θ) = 1 + ‖x − θ₁‖²/θ₂², with θ = (θ₁ ∈ ℝ^d, θ₂ > 0, ...).
struct StudentLocField {
    d: usize,
}

impl StudentLocField {
    fn check(&self, t: ArrayView1<f64>) -> Result<()> {
        if t.len() < self.d + 1 {
            return Err(Error::config(format!(
                "student_loc diffusion expects theta of length >= {}, got {}",
                self.d + 1,
                t.len()
            )));
        }
        if !(t[self.d] > 0.0) {
            return Err(Error::config("student_loc diffusion requires θ₂ > 0"));
        }
        Ok(())
    }
}

impl ScalarField for StudentLocField {
    fn value(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<f64> {
        self.check(t)?;
        let s2 = t[self.d] * t[self.d];
        let r2: f64 = (0..self.d).map(|i| (x[i] - t[i]) * (x[i] - t[i])).sum();
        Ok(1.0 + r2 / s2)
    }
    fn grad_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check(t)?;
        let s2 = t[self.d] * t[self.d];
        Ok(Array1::from_iter(
            (0..self.d).map(|i| 2.0 * (x[i] - t[i]) / s2),
        ))
    }
    fn grad_theta(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check(t)?;
        let s = t[self.d];
        let s2 = s * s;
        let r2: f64 = (0..self.d).map(|i| (x[i] - t[i]) * (x[i] - t[i])).sum();
        let mut g = Array1::zeros(t.len());
        for k in 0..self.d {
            g[k] = -2.0 * (x[k] - t[k]) / s2;
        }
        g[self.d] = -2.0 * r2 / (s2 * s);
        Ok(g)
    }
    fn grad_theta_grad_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check(t)?;
        let s = t[self.d];
        let s2 = s * s;
        let mut g = Array2::zeros((t.len(), self.d));
        for k in 0..self.d {
            g[[k, k]] = -2.0 / s2;
        }
        for j in 0..self.d {
            g[[self.d, j]] = -4.0 * (x[j] - t[j]) / (s2 * s);
        }
        Ok(g)
    }
}

/// d = 1 only: h(x, θ) = ((x − θ₁)/θ₂)(1 + (x − θ₁)²/(ν θ₂²)).
struct StudentScaleField {
    nu: f64,
}

impl StudentScaleField {
    fn check(t: ArrayView1<f64>) -> Result<()> {
        if t.len() < 2 {
            return Err(Error::config(
                "student_scale diffusion expects theta = (θ₁, θ₂)",
            ));
        }
        if !(t[1] > 0.0) {
            return Err(Error::config("student_scale diffusion requires θ₂ > 0"));
        }
        Ok(())
    }
}

impl ScalarField for StudentScaleField {
    fn value(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<f64> {
        Self::check(t)?;
        let (u, s) = (x[0] - t[0], t[1]);
        Ok(u / s + u * u * u / (self.nu * s * s * s))
    }
    fn grad_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Self::check(t)?;
        let (u, s) = (x[0] - t[0], t[1]);
        Ok(Array1::from_elem(
            1,
            1.0 / s + 3.0 * u * u / (self.nu * s * s * s),
        ))
    }
    fn grad_theta(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Self::check(t)?;
        let (u, s) = (x[0] - t[0], t[1]);
        let mut g = Array1::zeros(t.len());
        // ∂_{θ₁} = −∂_x
        g[0] = -(1.0 / s + 3.0 * u * u / (self.nu * s * s * s));
        g[1] = -u / (s * s) - 3.0 * u * u * u / (self.nu * s * s * s * s);
        Ok(g)
    }
    fn grad_theta_grad_x(&self, x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Self::check(t)?;
        let (u, s) = (x[0] - t[0], t[1]);
        let mut g = Array2::zeros((t.len(), 1));
        g[[0, 0]] = -6.0 * u / (self.nu * s * s * s);
        g[[1, 0]] = -1.0 / (s * s) - 9.0 * u * u / (self.nu * s * s * s * s);
        Ok(g)
    }
}

/// θ-independent decay h(x) = 1/(1 + ‖x‖^α).
struct DecayField {
    d: usize,
    alpha: f64,
}

impl DecayField {
    /// (h, ∇h); the gradient takes the symmetric-convention value 0 at the
    /// origin where ‖x‖^α has a kink for α < 2.
    fn parts(&self, x: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let r = r2.sqrt();
        let h = 1.0 / (1.0 + r.powf(self.alpha));
        if r == 0.0 {
            return (h, Array1::zeros(self.d));
        }
        let c = -self.alpha * r.powf(self.alpha - 2.0) * h * h;
        (h, Array1::from_iter(x.iter().map(|v| c * v)))
    }
}

impl ScalarField for DecayField {
    fn value(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<f64> {
        Ok(self.parts(x).0)
    }
    fn grad_x(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.parts(x).1)
    }
    fn grad_theta(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(t.len()))
    }
    fn grad_theta_grad_x(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((t.len(), self.d)))
    }
}

// ---------------------------------------------------------------------------
// Diagonal fields diag(f₁(x), …, f_d(x))
// ---------------------------------------------------------------------------

/// θ-independent diagonal field defined by fᵢ(xᵢ) and its derivative in the
/// same coordinate (each diagonal entry depends on its own coordinate only).
trait DiagonalField: Send + Sync {
    fn f(&self, i: usize, xi: f64) -> Result<f64>;
    fn df(&self, i: usize, xi: f64) -> Result<f64>;
}

struct DiagonalDiffusion<F> {
    d: usize,
    field: F,
}

impl<F: DiagonalField> DiagonalDiffusion<F> {
    fn values(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let mut f = Array1::zeros(self.d);
        let mut df = Array1::zeros(self.d);
        for i in 0..self.d {
            f[i] = self.field.f(i, x[i])?;
            df[i] = self.field.df(i, x[i])?;
        }
        Ok((f, df))
    }
}

impl<F: DiagonalField> Diffusion for DiagonalDiffusion<F> {
    fn form(&self) -> DiffusionForm {
        DiffusionForm::Diagonal
    }
    fn dim_x(&self) -> usize {
        self.d
    }
    fn eval(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (f, _) = self.values(x)?;
        Ok(Array2::from_diag(&f))
    }
    fn div_x(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (_, df) = self.values(x)?;
        Ok(df)
    }
    fn grad_theta(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array3<f64>> {
        Ok(Array3::zeros((t.len(), self.d, self.d)))
    }
    fn grad_theta_div_x(&self, _x: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((t.len(), self.d)))
    }
    fn mmt(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (f, _) = self.values(x)?;
        Ok(Array2::from_diag(&f.mapv(|v| v * v)))
    }
    fn div_mmt(&self, x: ArrayView1<f64>, _t: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (f, df) = self.values(x)?;
        Ok(Array1::from_iter(
            f.iter().zip(df.iter()).map(|(fi, dfi)| 2.0 * fi * dfi),
        ))
    }
    fn diag_parts(
        &self,
        x: ArrayView1<f64>,
        _t: ArrayView1<f64>,
    ) -> Result<Option<(Array1<f64>, Array1<f64>)>> {
        self.values(x).map(Some)
    }
}

/// fᵢ(x) = xᵢ (non-negative-data diffusion).
struct CoordinateField;

impl DiagonalField for CoordinateField {
    fn f(&self, _i: usize, xi: f64) -> Result<f64> {
        Ok(xi)
    }
    fn df(&self, _i: usize, _xi: f64) -> Result<f64> {
        Ok(1.0)
    }
}

/// fᵢ(x) = 1/(1 + xᵢ); evaluation too close to the pole is an error because
/// a silently huge value would dominate every pairwise sum downstream.
struct ReciprocalField;

impl ReciprocalField {
    fn denom(xi: f64) -> Result<f64> {
        let den = 1.0 + xi;
        if den.abs() < 1e-8 {
            return Err(Error::numeric(format!(
                "recip_diag diffusion singular near x = −1 (coordinate value {xi})"
            )));
        }
        Ok(den)
    }
}

impl DiagonalField for ReciprocalField {
    fn f(&self, _i: usize, xi: f64) -> Result<f64> {
        Ok(1.0 / Self::denom(xi)?)
    }
    fn df(&self, _i: usize, xi: f64) -> Result<f64> {
        let den = Self::denom(xi)?;
        Ok(-1.0 / (den * den))
    }
}

// ---------------------------------------------------------------------------
// Registry and θ-independence probe
// ---------------------------------------------------------------------------

/// Construct a builtin diffusion by id. Hyper keys: `d` (dimension,
/// default 1), `nu` for student_scale, `alpha` for decay (default 2).
pub fn builtin_diffusion(name: &str, hyper: &HashMap<String, f64>) -> Result<DiffusionRef> {
    let d = match hyper.get("d").copied() {
        None => 1usize,
        Some(v) if v >= 1.0 && v.fract() == 0.0 && v <= 1e6 => v as usize,
        Some(v) => {
            return Err(Error::config(format!(
                "hyper d must be a positive integer, got {v}"
            )))
        }
    };
    match name {
        "identity" => Ok(Arc::new(IdentityDiffusion { d })),
        "student_loc" => Ok(Arc::new(ScalarDiffusion {
            d,
            field: StudentLocField { d },
        })),
        "student_scale" => {
            if d != 1 {
                return Err(Error::config(
                    "student_scale diffusion is defined for d = 1 only",
                ));
            }
            let nu = hyper
                .get("nu")
                .copied()
                .ok_or_else(|| Error::config("student_scale diffusion requires hyper nu"))?;
            if !(nu > 0.0) {
                return Err(Error::config("student_scale requires nu > 0"));
            }
            Ok(Arc::new(ScalarDiffusion {
                d,
                field: StudentScaleField { nu },
            }))
        }
        "nonneg" => Ok(Arc::new(DiagonalDiffusion {
            d,
            field: CoordinateField,
        })),
        "decay" => {
            let alpha = hyper.get("alpha").copied().unwrap_or(2.0);
            if !(alpha > 0.0) {
                return Err(Error::config("decay diffusion requires alpha > 0"));
            }
            Ok(Arc::new(ScalarDiffusion {
                d,
                field: DecayField { d, alpha },
            }))
        }
        "recip_diag" => Ok(Arc::new(DiagonalDiffusion {
            d,
            field: ReciprocalField,
        })),
        other => Err(Error::config(format!(
            "unknown diffusion '{other}'; known: {}",
            DIFFUSION_IDS.join(", ")
        ))),
    }
}

pub const DIFFUSION_IDS: [&str; 6] = [
    "identity",
    "student_loc",
    "student_scale",
    "nonneg",
    "decay",
    "recip_diag",
];

pub fn list_diffusions() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        ("identity", "d", "m = I"),
        ("student_loc", "d", "m = (1 + ‖x−θ₁‖²/θ₂²)·I"),
        (
            "student_scale",
            "nu",
            "d=1: m = ((x−θ₁)/θ₂)(1 + (x−θ₁)²/(ν θ₂²))",
        ),
        ("nonneg", "d", "m = diag(x)"),
        ("decay", "d, alpha", "m = I/(1 + ‖x‖^α)"),
        ("recip_diag", "d", "m = diag(1/(1+xᵢ)), error near xᵢ = −1"),
    ]
}

/// True iff ∇_θ m vanishes on a fixed random probe set — the admissibility
/// condition for using a diffusion inside the score-matching objective,
/// whose derivation moves m outside the θ-differentiation.
pub fn dsm_theta_independence_check(diff: &dyn Diffusion, dim_theta: usize) -> bool {
    let mut rng = ChaCha12Rng::seed_from_u64(0xD1FF);
    let d = diff.dim_x();
    for _ in 0..20 {
        let x = Array1::from_iter((0..d).map(|_| -0.8 + 2.5 * rng.gen::<f64>()));
        let theta = Array1::from_iter((0..dim_theta).map(|_| 0.5 + 1.5 * rng.gen::<f64>()));
        let g = match diff.grad_theta(x.view(), theta.view()) {
            Ok(g) => g,
            Err(_) => return false,
        };
        if g.iter().any(|v| v.abs() > 1e-14) {
            return false;
        }
    }
    true
}
