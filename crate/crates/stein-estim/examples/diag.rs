//! Throwaway probe: step sizes for the optimizer-ordering check.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::array;

use stein_estim::diffusion::builtin_diffusion;
use stein_estim::harness::sample_from;
use stein_estim::kernel::{scalar_kernel, MatrixKernel};
use stein_estim::model::builtin_model;
use stein_estim::optim::{
    coordinate_grid, grid_scan, sgd_run, LossBundle, OptimConfig, Preconditioner, StepSchedule,
};

fn hyper(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn main() {
    let model = builtin_model("student_t", &hyper(&[("d", 1.0), ("nu", 5.0)])).unwrap();
    let kernel = MatrixKernel::isotropic(
        1,
        1.0,
        scalar_kernel("imq", &hyper(&[("c", 1.0), ("beta", -0.5)])).unwrap(),
    )
    .unwrap();
    let diffusion = builtin_diffusion("identity", &hyper(&[("d", 1.0)])).unwrap();
    let theta_star = array![25.0, 10.0];
    let sample = sample_from("student_t", &hyper(&[("d", 1.0), ("nu", 5.0)]), theta_star.view(), 1000, 424242).unwrap();
    let bundle = LossBundle::dksd(model, kernel, diffusion);

    let t0 = Instant::now();
    let grid = coordinate_grid(array![25.0, 10.0].view(), 0, 15.0, 35.0, 41).unwrap();
    let rows = grid_scan(&bundle, sample.view(), &grid).unwrap();
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.loss).collect();
    let lmin = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thresh = lmin + 0.05 * (lmax - lmin);
    println!(
        "grid: lmin={lmin:.6e} lmax={lmax:.6e} thresh={thresh:.6e} ({:?})",
        t0.elapsed()
    );

    for gamma in [0.1, 0.3, 1.0] {
        for lam in [1e-6, 1e-4] {
            let cfg = OptimConfig {
                schedule: StepSchedule::Constant(gamma),
                minibatch: 50,
                max_iters: 100,
                seed: 7,
                preconditioner: Preconditioner::InfoMetric { lambda_rel: lam },
                log_reparam: None,
                tol: 0.0,
            };
            let t1 = Instant::now();
            let (theta, traj) = sgd_run(&bundle, sample.view(), array![15.0, 10.0].view(), &cfg).unwrap();
            let loss = bundle.loss(theta.view(), sample.view()).unwrap();
            println!(
                "riem  gamma={gamma} lam={lam:.0e}: theta=({:.4},{:.4}) loss={loss:.6e} within={} abort={:?} ({:?})",
                theta[0], theta[1], loss <= thresh, traj.abort, t1.elapsed()
            );
        }
        let cfg = OptimConfig {
            schedule: StepSchedule::Constant(gamma),
            minibatch: 50,
            max_iters: 1000,
            seed: 7,
            preconditioner: Preconditioner::None,
            log_reparam: None,
            tol: 0.0,
        };
        let t1 = Instant::now();
        let (theta, traj) = sgd_run(&bundle, sample.view(), array![15.0, 10.0].view(), &cfg).unwrap();
        let loss = bundle.loss(theta.view(), sample.view()).unwrap();
        println!(
            "plain gamma={gamma}: theta=({:.4},{:.4}) loss={loss:.6e} within={} abort={:?} ({:?})",
            theta[0], theta[1], loss <= thresh, traj.abort, t1.elapsed()
        );
    }
}
