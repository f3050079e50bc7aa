//! Independent oracles shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use mfae::sgd::{sgd_step, StepParams};
use mfae::{Activation, Stream, WeightMatrix};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_distr::{ChiSquared, StandardNormal};

/// Classical RK4 of `dr/dt = −r(½Σ²r² − Σ² + 2λ)`, sampled at ascending `times`.
pub fn relu_ode_rk4(sigma_sq: f64, lambda: f64, r0: f64, times: &[f64], h: f64) -> Vec<f64> {
    let f = |r: f64| -r * (0.5 * sigma_sq * r * r - sigma_sq + 2.0 * lambda);
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut r) = (0.0f64, r0);
    for &target in times {
        let steps = ((target - t) / h).round() as usize;
        let dt = if steps > 0 { (target - t) / steps as f64 } else { 0.0 };
        for _ in 0..steps {
            let k1 = f(r);
            let k2 = f(r + 0.5 * dt * k1);
            let k3 = f(r + 0.5 * dt * k2);
            let k4 = f(r + dt * k3);
            r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        t = target;
        out.push(r);
    }
    out
}

pub struct ClosedFormGrid {
    pub points: usize,
    pub max_error: f64,
    pub min_abs_eta: f64,
}

/// Compares `relu_r` with the step-1e-5 RK4 oracle over a 5×5×5×10 grid of
/// `(Σ², λ, r0, t)`. Two of the `λ` values sit within 1e-6 of the threshold.
pub fn closed_form_grid() -> ClosedFormGrid {
    let sigmas: [f64; 5] = [0.1, 0.5, 1.0, 1.3, 2.0];
    let r0s = [0.05, 0.2, 1.0, 1.5, 2.2];
    let times: Vec<f64> = (1..=10).map(|k| 0.4 * k as f64).collect();
    let mut grid = ClosedFormGrid {
        points: 0,
        max_error: 0.0,
        min_abs_eta: f64::INFINITY,
    };
    for &s in &sigmas {
        let lambdas = [0.0, 0.1, 0.4, 0.5 * s - 4e-7, 0.5 * s + 2e-9];
        for &l in &lambdas {
            grid.min_abs_eta = grid.min_abs_eta.min((s - 2.0 * l).abs());
            for &r0 in &r0s {
                let oracle = relu_ode_rk4(s, l, r0, &times, 1e-5);
                for (&t, o) in times.iter().zip(oracle) {
                    let v = mfae::mf_relu::relu_r(s, l, r0, t);
                    grid.max_error = grid.max_error.max((v - o).abs());
                    grid.points += 1;
                }
            }
        }
    }
    grid
}

pub struct SphereEstimate {
    pub mean: [f64; 2],
    pub std_error: [f64; 2],
}

/// Monte-Carlo estimate of the exact finite-dimension kernels
/// `qⱼ(a,b) = E{κωⱼ₁σ(κaω₁₁ + κbω₂₁)}`, with `ωⱼ` uniform on the unit sphere
/// of dimension `dⱼ` and `κ = √(d₁+d₂)`. The first coordinate of a uniform
/// sphere point is drawn as `g/√(g² + χ²_{d−1})`.
pub fn sphere_q(act: Activation, a: f64, b: f64, dims: [usize; 2], samples: usize, seed: u64) -> SphereEstimate {
    let kappa = ((dims[0] + dims[1]) as f64).sqrt();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let chi = [
        ChiSquared::new((dims[0] - 1) as f64).unwrap(),
        ChiSquared::new((dims[1] - 1) as f64).unwrap(),
    ];
    let mut sum = [0.0f64; 2];
    let mut sum_sq = [0.0f64; 2];
    for _ in 0..samples {
        let mut w = [0.0f64; 2];
        for j in 0..2 {
            let g: f64 = rng.sample(StandardNormal);
            let rest: f64 = rng.sample(chi[j]);
            w[j] = kappa * g / (g * g + rest).sqrt();
        }
        let s = act.eval(a * w[0] + b * w[1]);
        for j in 0..2 {
            let v = w[j] * s;
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = samples as f64;
    let mut est = SphereEstimate {
        mean: [0.0; 2],
        std_error: [0.0; 2],
    };
    for j in 0..2 {
        let m = sum[j] / n;
        est.mean[j] = m;
        est.std_error[j] = ((sum_sq[j] / n - m * m).max(0.0) / (n - 1.0)).sqrt();
    }
    est
}

/// `λ‖Θ‖² + (N/B)·Σ_b ½‖x̂_b − x_b‖²`, whose gradient is the SGD direction.
fn step_objective(theta: &Array2<f64>, batch: &Array2<f64>, lambda: f64, act: Activation) -> f64 {
    let (n, d) = theta.dim();
    let kappa = (d as f64).sqrt();
    let mut loss = 0.0;
    for x in batch.rows() {
        let mut xhat = vec![0.0; d];
        for th in theta.rows() {
            let u: f64 = kappa * th.dot(&x);
            let s = act.eval(u);
            for (o, t) in xhat.iter_mut().zip(th.iter()) {
                *o += kappa * t * s / n as f64;
            }
        }
        loss += 0.5 * xhat.iter().zip(x.iter()).map(|(h, v)| (h - v).powi(2)).sum::<f64>();
    }
    let reg: f64 = theta.iter().map(|v| v * v).sum();
    lambda * reg + n as f64 / batch.nrows() as f64 * loss
}

/// Relative 2-norm error between the SGD update direction and a central
/// finite-difference gradient of the step objective.
pub fn gradient_rel_error(theta: &Array2<f64>, batch: &Array2<f64>, lambda: f64, act: Activation) -> f64 {
    let w = WeightMatrix::from_array(theta.clone()).unwrap();
    let eps = 1.0;
    let next = sgd_step(&w, batch.view(), StepParams { lambda, epsilon: eps }, act).unwrap();
    let analytic = (theta - next.theta()) / eps;
    let h = 1e-6;
    let mut num = 0.0;
    let mut den = 0.0;
    for idx in 0..theta.len() {
        let (i, j) = (idx / theta.ncols(), idx % theta.ncols());
        let mut p = theta.clone();
        p[[i, j]] += h;
        let mut m = theta.clone();
        m[[i, j]] -= h;
        let fd = (step_objective(&p, batch, lambda, act) - step_objective(&m, batch, lambda, act)) / (2.0 * h);
        num += (fd - analytic[[i, j]]).powi(2);
        den += analytic[[i, j]].powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

/// Gaussian matrix drawn from a seeded stream.
pub fn gaussian(rows: usize, cols: usize, scale: f64, stream: &mut Stream) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * stream.normal())
}
