//! Influence functions for the pairwise and score-matching estimators.
//!
//! The influence function is the Gateaux derivative of the fitted
//! parameter under ε-contamination of the data by a point mass at `z`:
//! `IF(z) = lim (θ̂_ε − θ̂)/ε`. For an M-estimator minimizing an empirical
//! loss it comes out of the implicit function theorem as
//! `−H⁻¹ ∂_ε∇θ(loss)`, with `H` the loss Hessian at the optimum. Both
//! losses here have `H = 2ĝ` near a well-specified optimum, which gives
//!
//! * pairwise: `IF(z) = −ĝ⁻¹ · meanⱼ ∇θk⁰(z, Xⱼ)`
//! * score matching: `IF(z) = −½ ĝ⁻¹ ∇θF(z)`
//!
//! where `F` is the per-point score-matching integrand. The sign makes
//! the classical special case come out right: for Gaussian location with
//! identity diffusion the formula reduces to `IF(z) = z − mean(sample)`.
//! Whether `IF` stays bounded in `z` depends on the kernel and diffusion
//! decay; the curves below make that dichotomy measurable. Integrability
//! of the pairwise mean over the model distribution is an analytic
//! hypothesis on the kernel/model pair (it holds for the bounded kernels
//! and log-concave-tailed models shipped here) and is not checked at
//! runtime.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::diffusion::DiffusionRef;
use crate::error::{Error, Result};
use crate::estimators::{dksd_info_matrix, dsm_info_matrix, dsm_point};
use crate::linalg::{default_ridge, inverse_spd};
use crate::model::ModelSpec;
use crate::parallel::{index_sum_vec, ordered_map};
use crate::steinkern::SteinKernelCtx;

/// Ridged inverse of the information matrix, shared by all influence
/// evaluations on one fitted context.
fn info_inverse(mut g: Array2<f64>) -> Result<Array2<f64>> {
    let ridge = default_ridge(&g);
    for i in 0..g.nrows() {
        g[[i, i]] += ridge;
    }
    inverse_spd(&g)
}

fn averaged_pair_gradient(ctx: &SteinKernelCtx, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = ctx.n();
    if n == 0 {
        return Err(Error::config("influence needs a non-empty sample"));
    }
    let pz = ctx.point_data(z)?;
    let m = ctx.dim_theta();
    let sum = index_sum_vec(n, m, |j, out| {
        let g = ctx.stein_kernel_grad_theta_points(&pz, ctx.point(j));
        out.copy_from_slice(g.as_slice().expect("contiguous gradient"));
    });
    Ok(Array1::from_iter(sum.into_iter().map(|v| v / n as f64)))
}

/// Influence of a contaminating point `z` on the pairwise estimator whose
/// fitted state (θ̂ and sample) is carried by `ctx`.
pub fn influence_dksd(ctx: &SteinKernelCtx, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    let ginv = info_inverse(dksd_info_matrix(ctx)?)?;
    let t = averaged_pair_gradient(ctx, z)?;
    Ok(ginv.dot(&t).mapv(|v| -v))
}

/// Influence of a contaminating point `z` on the score-matching estimator
/// with the given (θ-free) diffusion, evaluated at the fitted `theta`.
/// Classical score matching is the identity-diffusion case.
pub fn influence_dsm(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
    z: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let ginv = info_inverse(dsm_info_matrix(model, diffusion, theta, sample)?)?;
    let (_, grad) = dsm_point(model, diffusion, theta, z, true)?;
    let grad = grad.expect("gradient requested");
    Ok(ginv.dot(&grad).mapv(|v| -0.5 * v))
}

/// One influence-curve row; `influence` is `None` when evaluation failed
/// at that grid point.
#[derive(Clone, Debug)]
pub struct InfluenceRow {
    pub z: Array1<f64>,
    pub influence: Option<Array1<f64>>,
    pub norm: Option<f64>,
}

fn curve_from<F>(grid: &[Array1<f64>], eval: F) -> Vec<InfluenceRow>
where
    F: Fn(ArrayView1<f64>) -> Result<Array1<f64>> + Sync,
{
    ordered_map(grid.len(), |i| {
        let z = grid[i].clone();
        match eval(z.view()) {
            Ok(f) => {
                let norm = f.dot(&f).sqrt();
                if norm.is_finite() {
                    InfluenceRow {
                        z,
                        influence: Some(f),
                        norm: Some(norm),
                    }
                } else {
                    InfluenceRow {
                        z,
                        influence: None,
                        norm: None,
                    }
                }
            }
            Err(_) => InfluenceRow {
                z,
                influence: None,
                norm: None,
            },
        }
    })
}

/// Influence of every grid point on the pairwise estimator. The
/// information matrix is factored once; per-point failures are recorded as
/// missing rows.
pub fn influence_curve_dksd(
    ctx: &SteinKernelCtx,
    grid: &[Array1<f64>],
) -> Result<Vec<InfluenceRow>> {
    let ginv = info_inverse(dksd_info_matrix(ctx)?)?;
    Ok(curve_from(grid, |z| {
        let t = averaged_pair_gradient(ctx, z)?;
        Ok(ginv.dot(&t).mapv(|v| -v))
    }))
}

/// Influence of every grid point on the score-matching estimator.
pub fn influence_curve_dsm(
    model: &ModelSpec,
    diffusion: &DiffusionRef,
    theta: ArrayView1<f64>,
    sample: ArrayView2<f64>,
    grid: &[Array1<f64>],
) -> Result<Vec<InfluenceRow>> {
    let ginv = info_inverse(dsm_info_matrix(model, diffusion, theta, sample)?)?;
    Ok(curve_from(grid, |z| {
        let (_, grad) = dsm_point(model, diffusion, theta, z, true)?;
        let grad = grad.expect("gradient requested");
        Ok(ginv.dot(&grad).mapv(|v| -0.5 * v))
    }))
}

/// Largest present `‖IF‖` on a curve.
pub fn curve_max_norm(rows: &[InfluenceRow]) -> Option<f64> {
    rows.iter()
        .filter_map(|r| r.norm)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}
