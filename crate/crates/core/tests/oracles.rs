mod common;

use std::time::Instant;

use mfae::mf_bounded::{
    integrate_particles, integrate_two_scalar, integrate_two_scalar_with_step, q_check, ChiMode, ParticleOptions,
    QKernel, TwoBlockParams,
};
use mfae::mf_relu::relu_r;
use mfae::ode::linear_grid;
use mfae::Activation;

#[test]
fn closed_form_matches_fine_rk4_on_grid() {
    let start = Instant::now();
    let grid = common::closed_form_grid();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(grid.points, 1250);
    assert!(grid.min_abs_eta < 1e-6);
    assert!(grid.max_error <= 1e-8, "max error {:e}", grid.max_error);
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
}

#[test]
fn tanh_kernel_matches_sphere_monte_carlo() {
    let kernel = QKernel::new(Activation::Tanh, 0.5, 0.5).unwrap();
    let (q1, q2) = q_check(&kernel, 1.0, 1.0);
    let mc = common::sphere_q(Activation::Tanh, 1.0, 1.0, [500, 500], 10_000_000, 11);
    for (j, q) in [q1, q2].into_iter().enumerate() {
        let gap = (q - mc.mean[j]).abs();
        assert!(
            gap <= 4.0 * mc.std_error[j] + 0.01,
            "q{}: {q} vs {} ± {}",
            j + 1,
            mc.mean[j],
            mc.std_error[j]
        );
    }
}

#[test]
fn asymmetric_kernels_match_sphere_monte_carlo() {
    for act in [Activation::Tanh, Activation::TanhShift(0.5), Activation::TanhBumps] {
        let kernel = QKernel::new(act, 0.3, 0.7).unwrap();
        let (q1, q2) = q_check(&kernel, 0.5, 1.2);
        let mc = common::sphere_q(act, 0.5, 1.2, [300, 700], 2_000_000, 5);
        for (j, q) in [q1, q2].into_iter().enumerate() {
            let gap = (q - mc.mean[j]).abs();
            assert!(
                gap <= 4.0 * mc.std_error[j] + 0.01,
                "{act:?} q{}: {q} vs {}",
                j + 1,
                mc.mean[j]
            );
        }
    }
}

#[test]
fn relu_kernel_matches_sphere_monte_carlo() {
    let kernel = QKernel::new(Activation::Relu, 0.4, 0.6).unwrap();
    let (q1, q2) = q_check(&kernel, 0.8, 0.3);
    assert_eq!(q1, 0.8 / (2.0 * 0.4));
    let mc = common::sphere_q(Activation::Relu, 0.8, 0.3, [400, 600], 2_000_000, 9);
    assert!((q1 - mc.mean[0]).abs() <= 4.0 * mc.std_error[0] + 0.01);
    assert!((q2 - mc.mean[1]).abs() <= 4.0 * mc.std_error[1] + 0.01);
}

#[test]
fn two_scalar_rk4_has_fourth_order() {
    let kernel = QKernel::two_block(Activation::Tanh, 0.3).unwrap();
    let p = TwoBlockParams::new(1.3, 0.2, 0.1, 1.0).unwrap();
    let grid = [0.0, 2.0];
    let terminal = |h: f64| {
        let s = integrate_two_scalar_with_step(&kernel, &p, &grid, h).unwrap()[1];
        [s.r1, s.r2]
    };
    let (a, b, c) = (terminal(0.2), terminal(0.1), terminal(0.05));
    let diff = |x: [f64; 2], y: [f64; 2]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
    let order = (diff(a, b) / diff(b, c)).log2();
    assert!(order >= 3.5, "observed order {order}");
}

#[test]
fn relu_two_scalar_reduces_to_closed_form() {
    let kernel = QKernel::two_block(Activation::Relu, 0.3).unwrap();
    let grid = linear_grid(8.0, 17);
    for (lambda, r0) in [(0.0, 0.2), (0.2, 1.5), (0.4, 2.2)] {
        let states = integrate_two_scalar(&kernel, 1.3, 0.2, lambda, r0, &grid).unwrap();
        for s in &states {
            let norms = s.block_norms(&kernel);
            for (j, sq) in [1.3, 0.2].into_iter().enumerate() {
                let expect = relu_r(sq, lambda, r0, s.t).powi(2);
                assert!((norms[j] - expect).abs() < 1e-6, "λ={lambda} t={} j={j}", s.t);
            }
        }
    }
}

/// RMS over seeds of the distance between terminal particle means and a reference.
fn particle_deviation(kernel: &QKernel, particles: usize, seeds: std::ops::Range<u64>, reference: [f64; 2]) -> f64 {
    let grid = [0.0, 1.5];
    let count = seeds.end - seeds.start;
    let mut acc = 0.0;
    for seed in seeds {
        let m = terminal_mean(kernel, particles, seed, &grid);
        acc += (m[0] - reference[0]).powi(2) + (m[1] - reference[1]).powi(2);
    }
    (acc / count as f64).sqrt()
}

fn terminal_mean(kernel: &QKernel, particles: usize, seed: u64, grid: &[f64]) -> [f64; 2] {
    let mut opts = ParticleOptions::new(particles, seed);
    opts.chi = ChiMode::Quadrature(4);
    opts.step = Some(0.02);
    let (clouds, _) = integrate_particles(kernel, 1.3, 0.2, 30, 30, 0.0, 1.0, &opts, grid).unwrap();
    clouds.last().unwrap().mean()
}

#[test]
fn particle_method_self_converges() {
    let kernel = QKernel::two_block(Activation::Tanh, 0.5).unwrap().tabulated();
    let reference = terminal_mean(&kernel, 16_384, 999, &[0.0, 1.5]);
    let coarse = particle_deviation(&kernel, 1024, 100..108, reference);
    let fine = particle_deviation(&kernel, 4096, 200..208, reference);
    let ratio = fine / coarse;
    assert!(
        (0.25..=1.0).contains(&ratio),
        "deviation ratio {ratio} ({fine:e} / {coarse:e})"
    );
}

#[test]
fn relu_particles_track_closed_form() {
    let kernel = QKernel::two_block(Activation::Relu, 0.3).unwrap();
    let mut opts = ParticleOptions::new(512, 3);
    opts.step = Some(0.025);
    let grid = linear_grid(5.0, 6);
    let (clouds, _) = integrate_particles(&kernel, 1.3, 0.2, 60, 140, 0.0, 0.2, &opts, &grid).unwrap();
    for cloud in clouds.iter().skip(1) {
        let norms = cloud.block_norms(&kernel);
        for (j, sq) in [1.3, 0.2].into_iter().enumerate() {
            let expect = relu_r(sq, 0.0, 0.2, cloud.t).powi(2);
            assert!(
                (norms[j] / expect - 1.0).abs() < 0.02,
                "t={} j={j}: {} vs {expect}",
                cloud.t,
                norms[j]
            );
        }
    }
}
