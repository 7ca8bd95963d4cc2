//! Stochastic gradient descent over estimator losses, with an optional
//! information-metric preconditioner.
//!
//! The update is `θ_{t+1} = θ_t − γ_t P_t⁻¹ ∇L_t(θ_t)` in reparameterized
//! coordinates, where `L_t` is the loss on a freshly drawn minibatch and
//! `P_t` is either the identity or the (ridged) information matrix
//! evaluated on the same minibatch. Lower-bounded parameter coordinates
//! are optimized in log space, so iterates cannot leave the domain.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;
use std::time::Instant;

use crate::diffusion::{builtin_diffusion, DiffusionRef};
use crate::error::{Error, Result};
use crate::estimators::{
    dksd_grad, dksd_info_matrix, dksd_loss, dsm_grad, dsm_info_matrix, dsm_loss, sm_grad, sm_loss,
};
use crate::expfam::QuadraticForm;
use crate::kernel::MatrixKernel;
use crate::linalg::solve_regularized;
use crate::model::{check_theta_against, ModelSpec, ThetaBound};
use crate::steinkern::SteinKernelCtx;

type LossFn = Arc<dyn Fn(ArrayView1<f64>, ArrayView2<f64>) -> Result<f64> + Send + Sync>;
type GradFn = Arc<dyn Fn(ArrayView1<f64>, ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync>;
type InfoFn = Arc<dyn Fn(ArrayView1<f64>, ArrayView2<f64>) -> Result<Array2<f64>> + Send + Sync>;

/// A loss with its gradient and information metric, all evaluated on an
/// arbitrary subsample, plus the parameter domain used for
/// reparameterization.
#[derive(Clone)]
pub struct LossBundle {
    dim_theta: usize,
    domain: Vec<ThetaBound>,
    loss: LossFn,
    grad: GradFn,
    info: InfoFn,
}

impl LossBundle {
    pub fn custom(
        domain: Vec<ThetaBound>,
        loss: LossFn,
        grad: GradFn,
        info: InfoFn,
    ) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::config("loss bundle needs at least one parameter"));
        }
        Ok(LossBundle {
            dim_theta: domain.len(),
            domain,
            loss,
            grad,
            info,
        })
    }

    /// Kernelized pairwise loss.
    pub fn dksd(model: ModelSpec, kernel: MatrixKernel, diffusion: DiffusionRef) -> Self {
        let domain = model.theta_domain();
        let ctx_of = move |theta: ArrayView1<f64>, batch: ArrayView2<f64>| {
            SteinKernelCtx::new(
                model.clone(),
                kernel.clone(),
                diffusion.clone(),
                theta.to_owned(),
                batch,
            )
        };
        let c1 = ctx_of.clone();
        let c2 = ctx_of.clone();
        let c3 = ctx_of;
        LossBundle {
            dim_theta: domain.len(),
            domain,
            loss: Arc::new(move |t, b| dksd_loss(&c1(t, b)?)),
            grad: Arc::new(move |t, b| dksd_grad(&c2(t, b)?)),
            info: Arc::new(move |t, b| dksd_info_matrix(&c3(t, b)?)),
        }
    }

    /// Divergence-form score-matching loss.
    pub fn dsm(model: ModelSpec, diffusion: DiffusionRef) -> Self {
        let domain = model.theta_domain();
        let m1 = model.clone();
        let m2 = model.clone();
        let m3 = model;
        let d1 = diffusion.clone();
        let d2 = diffusion.clone();
        let d3 = diffusion;
        LossBundle {
            dim_theta: domain.len(),
            domain,
            loss: Arc::new(move |t, b| dsm_loss(&m1, &d1, t, b)),
            grad: Arc::new(move |t, b| dsm_grad(&m2, &d2, t, b)),
            info: Arc::new(move |t, b| dsm_info_matrix(&m3, &d3, t, b)),
        }
    }

    /// Classical score matching; the information metric is the identity
    /// diffusion's.
    pub fn sm(model: ModelSpec) -> Result<Self> {
        let domain = model.theta_domain();
        let ident = builtin_diffusion(
            "identity",
            &[("d".to_string(), model.dim_x() as f64)].into_iter().collect(),
        )?;
        let m1 = model.clone();
        let m2 = model.clone();
        let m3 = model;
        Ok(LossBundle {
            dim_theta: domain.len(),
            domain,
            loss: Arc::new(move |t, b| sm_loss(&m1, t, b)),
            grad: Arc::new(move |t, b| sm_grad(&m2, t, b)),
            info: Arc::new(move |t, b| dsm_info_matrix(&m3, &ident, t, b)),
        })
    }

    /// A fixed quadratic `θᵀAθ + vᵀθ + c`; the sample argument is ignored
    /// and the information metric is the symmetrized `A`.
    pub fn quadratic(q: QuadraticForm) -> Self {
        let m = q.v.len();
        let mut a_sym = q.a.clone();
        a_sym += &q.a.t();
        a_sym.mapv_inplace(|v| 0.5 * v);
        let q1 = q.clone();
        let q2 = q;
        LossBundle {
            dim_theta: m,
            domain: vec![ThetaBound::free(); m],
            loss: Arc::new(move |t, _b| Ok(q1.value(t))),
            grad: Arc::new(move |t, _b| Ok(q2.grad(t))),
            info: Arc::new(move |_t, _b| Ok(a_sym.clone())),
        }
    }

    pub fn dim_theta(&self) -> usize {
        self.dim_theta
    }

    pub fn domain(&self) -> &[ThetaBound] {
        &self.domain
    }

    pub fn loss(&self, theta: ArrayView1<f64>, sample: ArrayView2<f64>) -> Result<f64> {
        (self.loss)(theta, sample)
    }

    pub fn grad(&self, theta: ArrayView1<f64>, sample: ArrayView2<f64>) -> Result<Array1<f64>> {
        (self.grad)(theta, sample)
    }

    pub fn info_matrix(
        &self,
        theta: ArrayView1<f64>,
        sample: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        (self.info)(theta, sample)
    }
}

/// Step-size sequence γ_t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    /// γ_t = γ for all t.
    Constant(f64),
    /// γ_t = γ₀ / (1 + t).
    OneOverT(f64),
}

impl StepSchedule {
    fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(g) => g,
            StepSchedule::OneOverT(g0) => g0 / (1.0 + t as f64),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant(g) | StepSchedule::OneOverT(g) => g,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preconditioner {
    /// Plain SGD.
    None,
    /// Solve against the minibatch information matrix ridged by
    /// `lambda_rel · |trace| / m`.
    InfoMetric { lambda_rel: f64 },
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub schedule: StepSchedule,
    pub minibatch: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub preconditioner: Preconditioner,
    /// Per-coordinate log-reparameterization flags; `None` derives them
    /// from the domain (log space for lower-bounded coordinates).
    pub log_reparam: Option<Vec<bool>>,
    /// Stop once ‖θ_{t+1} − θ_t‖ ≤ tol. The default 0.0 stops only at an
    /// exactly stationary iterate.
    pub tol: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            schedule: StepSchedule::Constant(0.1),
            minibatch: 50,
            max_iters: 1000,
            seed: 0,
            preconditioner: Preconditioner::None,
            log_reparam: None,
            tol: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.schedule.base();
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::config(format!("step size must be positive, got {g}")));
        }
        if self.minibatch < 2 {
            return Err(Error::config(
                "minibatch size must be at least 2 (pairwise losses need pairs)",
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if let Preconditioner::InfoMetric { lambda_rel } = self.preconditioner {
            if !(lambda_rel >= 0.0) || !lambda_rel.is_finite() {
                return Err(Error::config(format!(
                    "preconditioner ridge must be non-negative, got {lambda_rel}"
                )));
            }
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(Error::config(format!(
                "convergence tolerance must be non-negative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// One optimizer iteration: the evaluated point, its minibatch loss, the
/// norm of the update-driving (reparameterized) gradient, and wall time.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub iter: usize,
    pub theta: Array1<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub millis: u64,
}

/// Full optimization trace. Everything except `millis` is bit-reproducible
/// for a fixed (seed, config, sample), independent of thread count.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub converged: bool,
    /// Set when the run stopped early on a numeric failure; the final θ is
    /// the last finite iterate.
    pub abort: Option<String>,
}

struct Reparam {
    log_space: Vec<bool>,
    lo: Vec<f64>,
}

impl Reparam {
    fn new(domain: &[ThetaBound], flags: Option<&[bool]>) -> Result<Self> {
        let log_space: Vec<bool> = match flags {
            Some(f) => {
                if f.len() != domain.len() {
                    return Err(Error::config(format!(
                        "log_reparam has {} flags for {} parameters",
                        f.len(),
                        domain.len()
                    )));
                }
                for (i, (&on, b)) in f.iter().zip(domain.iter()).enumerate() {
                    if on && !b.is_lower_bounded() {
                        return Err(Error::config(format!(
                            "log reparameterization requested for unbounded coordinate {i}"
                        )));
                    }
                }
                f.to_vec()
            }
            None => domain.iter().map(|b| b.is_lower_bounded()).collect(),
        };
        let lo = domain.iter().map(|b| b.lo).collect();
        Ok(Reparam { log_space, lo })
    }

    fn to_internal(&self, theta: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(theta.iter().enumerate().map(|(i, &v)| {
            if self.log_space[i] {
                (v - self.lo[i]).ln()
            } else {
                v
            }
        }))
    }

    fn to_theta(&self, eta: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(eta.iter().enumerate().map(|(i, &v)| {
            if self.log_space[i] {
                self.lo[i] + v.exp()
            } else {
                v
            }
        }))
    }

    /// Diagonal Jacobian dθ/dη at θ.
    fn jacobian(&self, theta: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(theta.iter().enumerate().map(|(i, &v)| {
            if self.log_space[i] {
                v - self.lo[i]
            } else {
                1.0
            }
        }))
    }
}

/// Draw `k` distinct indices from `0..n` (partial Fisher–Yates), returned
/// sorted so batch assembly is order-stable.
fn draw_batch(rng: &mut ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for t in 0..k {
        let j = rng.gen_range(t..n);
        idx.swap(t, j);
    }
    let mut batch = idx[..k].to_vec();
    batch.sort_unstable();
    batch
}

fn gather_rows(sample: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = sample.ncols();
    let mut out = Array2::zeros((rows.len(), d));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&sample.row(i));
    }
    out
}

/// Minibatch (optionally preconditioned) gradient descent. Draws a fresh
/// without-replacement minibatch each iteration — the whole sample when
/// `minibatch ≥ n` — and returns the final parameter with the full trace.
/// Numeric failures mid-run stop the loop and are reported in
/// [`Trajectory::abort`] rather than as an error.
pub fn sgd_run(
    bundle: &LossBundle,
    sample: ArrayView2<f64>,
    theta0: ArrayView1<f64>,
    cfg: &OptimConfig,
) -> Result<(Array1<f64>, Trajectory)> {
    cfg.validate()?;
    if theta0.len() != bundle.dim_theta() {
        return Err(Error::config(format!(
            "theta0 has {} coordinates, loss expects {}",
            theta0.len(),
            bundle.dim_theta()
        )));
    }
    check_theta_against(bundle.domain(), theta0)?;
    let n = sample.nrows();
    if n < 2 {
        return Err(Error::config("optimization needs at least two sample points"));
    }
    let reparam = Reparam::new(bundle.domain(), cfg.log_reparam.as_deref())?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let m = bundle.dim_theta();

    let mut eta = reparam.to_internal(theta0);
    let mut theta = reparam.to_theta(eta.view());
    let mut traj = Trajectory::default();

    for t in 0..cfg.max_iters {
        let started = Instant::now();
        let rows = draw_batch(&mut rng, n, cfg.minibatch);
        let batch = gather_rows(sample, &rows);

        let step = (|| -> Result<(f64, Array1<f64>)> {
            let loss = bundle.loss(theta.view(), batch.view())?;
            let grad = bundle.grad(theta.view(), batch.view())?;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite minibatch loss or gradient"));
            }
            let jac = reparam.jacobian(theta.view());
            let grad_eta = &grad * &jac;
            let dir = match cfg.preconditioner {
                Preconditioner::None => grad_eta,
                Preconditioner::InfoMetric { lambda_rel } => {
                    let info = bundle.info_matrix(theta.view(), batch.view())?;
                    let mut metric = Array2::zeros((m, m));
                    for r in 0..m {
                        for c in 0..m {
                            metric[[r, c]] = jac[r] * info[[r, c]] * jac[c];
                        }
                    }
                    let trace: f64 = (0..m).map(|i| metric[[i, i]]).sum();
                    let ridge = lambda_rel * trace.abs() / m as f64;
                    solve_regularized(&metric, &grad_eta, ridge)?
                }
            };
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::numeric("non-finite update direction"));
            }
            Ok((loss, dir))
        })();

        let (loss, dir) = match step {
            Ok(v) => v,
            Err(e) => {
                traj.abort = Some(format!("iteration {t}: {e}"));
                return Ok((theta, traj));
            }
        };
        let grad_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        eta.scaled_add(-cfg.schedule.at(t), &dir);
        let next = reparam.to_theta(eta.view());
        traj.records.push(TrajectoryRecord {
            iter: t,
            theta: theta.clone(),
            loss,
            grad_norm,
            millis: started.elapsed().as_millis() as u64,
        });
        if next.iter().any(|v| !v.is_finite()) {
            traj.abort = Some(format!("iteration {t}: parameter became non-finite"));
            return Ok((theta, traj));
        }
        // Log-space keeps bounded coordinates inside the domain by
        // construction; the only escape route is exp underflowing onto the
        // boundary, which we stop on rather than panic.
        if check_theta_against(bundle.domain(), next.view()).is_err() {
            traj.abort = Some(format!(
                "iteration {t}: parameter reached the domain boundary"
            ));
            return Ok((theta, traj));
        }
        let delta = (&next - &theta).iter().map(|v| v * v).sum::<f64>().sqrt();
        theta = next;
        if delta <= cfg.tol {
            traj.converged = true;
            break;
        }
    }
    Ok((theta, traj))
}

/// One grid-scan row; `loss` is `None` when evaluation failed at that
/// point (out of domain, numeric failure).
#[derive(Clone, Debug)]
pub struct GridRow {
    pub theta: Array1<f64>,
    pub loss: Option<f64>,
}

/// Evaluate the full-sample loss on every grid point, in grid order.
pub fn grid_scan(
    bundle: &LossBundle,
    sample: ArrayView2<f64>,
    grid: &[Array1<f64>],
) -> Result<Vec<GridRow>> {
    for (i, theta) in grid.iter().enumerate() {
        if theta.len() != bundle.dim_theta() {
            return Err(Error::config(format!(
                "grid point {i} has {} coordinates, loss expects {}",
                theta.len(),
                bundle.dim_theta()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("grid point {i} is not finite")));
        }
    }
    Ok(grid
        .iter()
        .map(|theta| {
            let loss = bundle
                .loss(theta.view(), sample)
                .ok()
                .filter(|v| v.is_finite());
            GridRow {
                theta: theta.clone(),
                loss,
            }
        })
        .collect())
}

/// Index of the smallest present loss, if any.
pub fn grid_argmin(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(l) = row.loss {
            if best.map_or(true, |(_, b)| l < b) {
                best = Some((i, l));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Grid varying one coordinate of `base` over `count` evenly spaced values
/// in `[lo, hi]`.
pub fn coordinate_grid(
    base: ArrayView1<f64>,
    coord: usize,
    lo: f64,
    hi: f64,
    count: usize,
) -> Result<Vec<Array1<f64>>> {
    if coord >= base.len() {
        return Err(Error::config(format!(
            "coordinate {coord} out of range for {} parameters",
            base.len()
        )));
    }
    if count == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::config("grid range must be finite with hi >= lo and count >= 1"));
    }
    let step = if count > 1 { (hi - lo) / (count - 1) as f64 } else { 0.0 };
    Ok((0..count)
        .map(|i| {
            let mut theta = base.to_owned();
            theta[coord] = lo + step * i as f64;
            theta
        })
        .collect())
}
