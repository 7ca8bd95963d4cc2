//! Finite-difference and symmetry checks for the matrix-kernel derivative
//! slots, plus the positive-semidefiniteness of block Gram matrices.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{array, Array1, Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use stein_estim::kernel::{
    scalar_kernel, FnWeight, MatrixKernel, ScalarKernelRef, WeightedKernel,
};
use stein_estim::linalg::min_eigval_symmetric;
use stein_estim::num::fd_step;

fn hyper(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// A density-style weight w(x) = exp(−‖x‖²/8) wrapped around a base kernel;
/// exercises the full product rule of the weighted combinator.
fn weighted(base: ScalarKernelRef) -> ScalarKernelRef {
    let weight = FnWeight {
        eval_fn: |x: ndarray::ArrayView1<f64>| (-x.iter().map(|v| v * v).sum::<f64>() / 8.0).exp(),
        grad_fn: |x: ndarray::ArrayView1<f64>| {
            let w = (-x.iter().map(|v| v * v).sum::<f64>() / 8.0).exp();
            x.mapv(|v| -w * v / 4.0)
        },
    };
    Arc::new(WeightedKernel::new(base, Arc::new(weight)))
}

fn cases(dim: usize) -> Vec<(String, MatrixKernel)> {
    let gauss = scalar_kernel("gaussian", &hyper(&[("lengthscale", 0.9)])).unwrap();
    let imq = scalar_kernel("imq", &hyper(&[("c", 1.3), ("beta", -0.7)])).unwrap();
    let mut b = Array2::<f64>::eye(dim);
    for i in 0..dim {
        for j in 0..dim {
            b[[i, j]] += 0.3 / (1.0 + (i as f64 - j as f64).abs());
        }
    }
    let kernels: Vec<ScalarKernelRef> = (0..dim)
        .map(|i| {
            if i % 2 == 0 {
                gauss.clone()
            } else {
                imq.clone()
            }
        })
        .collect();
    let lambdas = (0..dim).map(|i| 0.5 + 0.5 * i as f64).collect();
    vec![
        (
            "isotropic_gaussian".into(),
            MatrixKernel::isotropic(dim, 1.0, gauss.clone()).unwrap(),
        ),
        (
            "diagonal_mixed".into(),
            MatrixKernel::diagonal(lambdas, kernels).unwrap(),
        ),
        (
            "scaled_imq".into(),
            MatrixKernel::scaled(b, imq.clone()).unwrap(),
        ),
        (
            "weighted_gaussian".into(),
            MatrixKernel::isotropic(dim, 1.0, weighted(gauss)).unwrap(),
        ),
    ]
}

fn rand_point(rng: &mut ChaCha12Rng, dim: usize) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| -1.5 + 3.0 * rng.gen::<f64>()))
}

fn fd_grad_x(k: &MatrixKernel, x: &Array1<f64>, y: &Array1<f64>) -> Array3<f64> {
    let d = x.len();
    let mut out = Array3::zeros((d, d, d));
    for r in 0..d {
        let h = fd_step(x[r]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[r] += h;
        xm[r] -= h;
        let kp = k.eval(xp.view(), y.view());
        let km = k.eval(xm.view(), y.view());
        for l in 0..d {
            for j in 0..d {
                out[[r, l, j]] = (kp[[l, j]] - km[[l, j]]) / (2.0 * h);
            }
        }
    }
    out
}

fn fd_grad_y(k: &MatrixKernel, x: &Array1<f64>, y: &Array1<f64>) -> Array3<f64> {
    let d = x.len();
    let mut out = Array3::zeros((d, d, d));
    for i in 0..d {
        let h = fd_step(y[i]);
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[i] += h;
        ym[i] -= h;
        let kp = k.eval(x.view(), yp.view());
        let km = k.eval(x.view(), ym.view());
        for l in 0..d {
            for j in 0..d {
                out[[i, l, j]] = (kp[[l, j]] - km[[l, j]]) / (2.0 * h);
            }
        }
    }
    out
}

fn fd_grad_xy(k: &MatrixKernel, x: &Array1<f64>, y: &Array1<f64>) -> Array4<f64> {
    let d = x.len();
    let mut out = Array4::zeros((d, d, d, d));
    for i in 0..d {
        let h = fd_step(y[i]);
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[i] += h;
        ym[i] -= h;
        let gp = k.grad_x(x.view(), yp.view());
        let gm = k.grad_x(x.view(), ym.view());
        for r in 0..d {
            for l in 0..d {
                for j in 0..d {
                    out[[r, i, l, j]] = (gp[[r, l, j]] - gm[[r, l, j]]) / (2.0 * h);
                }
            }
        }
    }
    out
}

fn max_abs_diff<'a, I, J>(a: I, b: J) -> f64
where
    I: IntoIterator<Item = &'a f64>,
    J: IntoIterator<Item = &'a f64>,
{
    a.into_iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

#[test]
fn derivative_slots_match_finite_differences() {
    for dim in [1usize, 3] {
        for (name, k) in cases(dim) {
            let mut rng = ChaCha12Rng::seed_from_u64(11);
            for _ in 0..25 {
                let x = rand_point(&mut rng, dim);
                let y = rand_point(&mut rng, dim);
                let gx = k.grad_x(x.view(), y.view());
                let gy = k.grad_y(x.view(), y.view());
                let gxy = k.grad_xy(x.view(), y.view());
                let err_x = max_abs_diff(gx.iter(), fd_grad_x(&k, &x, &y).iter());
                let err_y = max_abs_diff(gy.iter(), fd_grad_y(&k, &x, &y).iter());
                let err_xy = max_abs_diff(gxy.iter(), fd_grad_xy(&k, &x, &y).iter());
                assert!(err_x < 1e-5, "{name} d={dim}: grad_x fd err {err_x:.2e}");
                assert!(err_y < 1e-5, "{name} d={dim}: grad_y fd err {err_y:.2e}");
                assert!(err_xy < 1e-5, "{name} d={dim}: grad_xy fd err {err_xy:.2e}");
            }
        }
    }
}

#[test]
fn exchange_symmetries_hold_to_machine_precision() {
    let dim = 3;
    for (name, k) in cases(dim) {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..100 {
            let x = rand_point(&mut rng, dim);
            let y = rand_point(&mut rng, dim);
            let kxy = k.eval(x.view(), y.view());
            let kyx = k.eval(y.view(), x.view());
            let gy_xy = k.grad_y(x.view(), y.view());
            let gx_yx = k.grad_x(y.view(), x.view());
            let gxy_xy = k.grad_xy(x.view(), y.view());
            let gxy_yx = k.grad_xy(y.view(), x.view());
            for l in 0..dim {
                for j in 0..dim {
                    // K(x,y) = K(y,x)ᵀ
                    assert!(
                        (kxy[[l, j]] - kyx[[j, l]]).abs() < 1e-12,
                        "{name}: eval transpose symmetry"
                    );
                    for i in 0..dim {
                        // ∂_{y^i}K(x,y) = [∂_{x^i}K(y,x)]ᵀ
                        assert!(
                            (gy_xy[[i, l, j]] - gx_yx[[i, j, l]]).abs() < 1e-12,
                            "{name}: grad exchange symmetry"
                        );
                        for r in 0..dim {
                            // ∂_x∂_y K(x,y) = [∂_x∂_y K(y,x)] with (r,i) and
                            // (l,j) both swapped
                            assert!(
                                (gxy_xy[[r, i, l, j]] - gxy_yx[[i, r, j, l]]).abs() < 1e-12,
                                "{name}: second-derivative exchange symmetry"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn block_gram_matrices_are_positive_semidefinite() {
    let dim = 2;
    let n = 20;
    for (name, k) in cases(dim) {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let pts: Vec<Array1<f64>> = (0..n).map(|_| rand_point(&mut rng, dim)).collect();
        let nd = n * dim;
        let mut gram = Array2::<f64>::zeros((nd, nd));
        for a in 0..n {
            for b in 0..n {
                let kab = k.eval(pts[a].view(), pts[b].view());
                for l in 0..dim {
                    for j in 0..dim {
                        gram[[a * dim + l, b * dim + j]] = kab[[l, j]];
                    }
                }
            }
        }
        let trace: f64 = (0..nd).map(|i| gram[[i, i]]).sum();
        let min_eig = min_eigval_symmetric(&gram).unwrap();
        assert!(
            min_eig >= -1e-8 * (trace / nd as f64),
            "{name}: block Gram min eigenvalue {min_eig:.3e} vs trace/nd {:.3e}",
            trace / nd as f64
        );
    }
}

#[test]
fn weighted_kernel_value_is_separable_product() {
    let base = scalar_kernel("gaussian", &hyper(&[])).unwrap();
    let k = weighted(base.clone());
    let x = array![0.7, -0.3];
    let y = array![-1.1, 0.4];
    let wx = (-x.iter().map(|v| v * v).sum::<f64>() / 8.0).exp();
    let wy = (-y.iter().map(|v| v * v).sum::<f64>() / 8.0).exp();
    let expect = wx * base.eval(x.view(), y.view()) * wy;
    assert!((k.eval(x.view(), y.view()) - expect).abs() < 1e-15);
}
