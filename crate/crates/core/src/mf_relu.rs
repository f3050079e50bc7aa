//! Closed-form mean-field limit for ReLU activation.
//!
//! Along eigendirection `i` the limiting weight law is Gaussian with scale
//! `r_{i,t}`, which solves `dr/dt = −r(½Σᵢ²r² − Σᵢ² + 2λ)`. With `y = r²` this
//! is the logistic equation `y′ = 2ηy − Σ²y²`, `η = Σ² − 2λ`, whose solution
//! is `y = r0² / (r0²Σ²φ(t) + e^{−2ηt})` with `φ = (1 − e^{−2ηt})/(2η)`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;
use crate::spectral::{Blocks, Rotation, SpectralModel};

/// Below this `|η|` the `η = 0` limit `r² = r0²/(1 + r0²Σ²t)` is used,
/// corrected to first order in `η`.
pub const ETA_CUTOFF: f64 = 1e-8;

/// `(r_t/r0)²` for one eigendirection.
fn ratio_sq(sigma_sq: f64, lambda: f64, r0: f64, t: f64) -> f64 {
    let eta = sigma_sq - 2.0 * lambda;
    let a = r0 * r0 * sigma_sq;
    if eta.abs() < ETA_CUTOFF {
        return 1.0 / (1.0 + a * t - eta * t * (2.0 + a * t));
    }
    if eta > 0.0 {
        let phi = -(-2.0 * eta * t).exp_m1() / (2.0 * eta);
        1.0 / (a * phi + (-2.0 * eta * t).exp())
    } else {
        // divide through by e^{2|η|t} so nothing overflows
        let x = -2.0 * eta * t;
        let decay = (-x).exp();
        decay / (1.0 + a * (-(-x).exp_m1()) / (-2.0 * eta))
    }
}

/// Rescaling factor `r_{i,t}` for an eigendirection with variance `sigma_sq`.
pub fn relu_r(sigma_sq: f64, lambda: f64, r0: f64, t: f64) -> f64 {
    debug_assert!(sigma_sq > 0.0 && r0 >= 0.0 && t >= 0.0);
    r0 * ratio_sq(sigma_sq, lambda, r0, t).sqrt()
}

/// `r_{i,∞}`: `√(2(1 − 2λ/Σ²))` above threshold, otherwise 0 (for `r0 > 0`).
pub fn relu_r_limit(sigma_sq: f64, lambda: f64, r0: f64) -> f64 {
    if r0 == 0.0 {
        return 0.0;
    }
    let eta = sigma_sq - 2.0 * lambda;
    if eta > 0.0 {
        (2.0 * eta / sigma_sq).sqrt()
    } else {
        0.0
    }
}

/// Limiting-law curve for a whole spectrum.
#[derive(Clone, Debug)]
pub struct ReluMfCurve {
    eigvals: Vec<f64>,
    lambda: f64,
    r0: f64,
}

impl ReluMfCurve {
    pub fn new(model: &SpectralModel, lambda: f64, r0: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(r0 >= 0.0 && r0.is_finite()) {
            return Err(Error::InvalidArgument(format!("r0 must be >= 0, got {r0}")));
        }
        Ok(ReluMfCurve {
            eigvals: model.eigvals().to_vec(),
            lambda,
            r0,
        })
    }

    pub fn r_at(&self, t: f64) -> Vec<f64> {
        self.eigvals
            .iter()
            .map(|&s| relu_r(s, self.lambda, self.r0, t))
            .collect()
    }

    pub fn risk(&self, t: f64) -> f64 {
        risk_from_r(&self.eigvals, &self.r_at(t))
    }

    pub fn block_norms(&self, t: f64, blocks: &Blocks) -> Result<Vec<f64>> {
        check_blocks(blocks, self.eigvals.len())?;
        let r = self.r_at(t);
        Ok(blocks
            .ranges()
            .iter()
            .map(|range| compensated_sum(r[range.clone()].iter().map(|v| v * v)) / range.len() as f64)
            .collect())
    }

    pub fn two_stage_risk(&self, t: f64, mu: f64) -> Result<f64> {
        if !(mu > 0.0) {
            return Err(Error::InvalidArgument(format!("mu must be > 0, got {mu}")));
        }
        let r = self.r_at(t);
        Ok(risk_from_r(&self.eigvals, &r) + sampling_term(&self.eigvals, &r, mu))
    }
}

fn check_blocks(blocks: &Blocks, d: usize) -> Result<()> {
    if blocks.dim() != d {
        return Err(Error::BadPartition {
            dim: d,
            reason: format!("blocks cover 0..{}", blocks.dim()),
        });
    }
    Ok(())
}

fn risk_from_r(eigvals: &[f64], r: &[f64]) -> f64 {
    let d = eigvals.len() as f64;
    compensated_sum(eigvals.iter().zip(r).map(|(s, r)| {
        let gap = 1.0 - 0.5 * r * r;
        s * gap * gap
    })) / (2.0 * d)
}

fn sampling_term(eigvals: &[f64], r: &[f64], mu: f64) -> f64 {
    let d = eigvals.len() as f64;
    let sum_r2 = compensated_sum(r.iter().map(|v| v * v));
    let sum_r2s = compensated_sum(r.iter().zip(eigvals).map(|(v, s)| v * v * s));
    sum_r2 * sum_r2s / (4.0 * mu * d * d)
}

/// Predicted reconstruction error `(1/2d)·Σᵢ Σᵢ²(1 − ½r_{i,t}²)²`.
pub fn relu_risk(model: &SpectralModel, lambda: f64, r0: f64, t: f64) -> Result<f64> {
    Ok(ReluMfCurve::new(model, lambda, r0)?.risk(t))
}

/// Per-block mean of `r_{i,t}²`, the predicted normalized squared block norm.
pub fn relu_block_norm_prediction(
    model: &SpectralModel,
    lambda: f64,
    r0: f64,
    t: f64,
    blocks: &Blocks,
) -> Result<Vec<f64>> {
    ReluMfCurve::new(model, lambda, r0)?.block_norms(t, blocks)
}

/// Training term plus the neuron-resampling term for `M = μd`.
pub fn relu_two_stage_risk(model: &SpectralModel, lambda: f64, r0: f64, t: f64, mu: f64) -> Result<f64> {
    ReluMfCurve::new(model, lambda, r0)?.two_stage_risk(t, mu)
}

/// Only the resampling part of [`relu_two_stage_risk`].
pub fn relu_sampling_term(model: &SpectralModel, lambda: f64, r0: f64, t: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be > 0, got {mu}")));
    }
    let curve = ReluMfCurve::new(model, lambda, r0)?;
    Ok(sampling_term(model.eigvals(), &curve.r_at(t), mu))
}

/// Per-direction factors `r_{i,t}/r0` (all ones when `r0 = 0`).
fn scale_factors(model: &SpectralModel, lambda: f64, r0: f64, t: f64) -> Vec<f64> {
    if r0 == 0.0 {
        return vec![1.0; model.dim()];
    }
    model
        .eigvals()
        .iter()
        .map(|&s| ratio_sq(s, lambda, r0, t).sqrt())
        .collect()
}

/// Mean-field trajectory of one particle: `R·diag(r_{i,t}/r0)·Rᵀ·θ⁰`.
pub fn relu_mf_particle(
    theta0: ArrayView1<'_, f64>,
    model: &SpectralModel,
    lambda: f64,
    r0: f64,
    t: f64,
) -> Result<Array1<f64>> {
    let rows = theta0.to_owned().insert_axis(ndarray::Axis(0));
    Ok(relu_mf_particles(&rows, model, lambda, r0, t)?.row(0).to_owned())
}

/// [`relu_mf_particle`] applied to every row.
pub fn relu_mf_particles(
    theta0: &Array2<f64>,
    model: &SpectralModel,
    lambda: f64,
    r0: f64,
    t: f64,
) -> Result<Array2<f64>> {
    if theta0.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: theta0.ncols(),
        });
    }
    if t == 0.0 {
        return Ok(theta0.clone());
    }
    let f = Array1::from(scale_factors(model, lambda, r0, t));
    Ok(match model.rotation() {
        Rotation::Identity => theta0 * &f,
        Rotation::Explicit(r) => (theta0.dot(r) * &f).dot(&r.t()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::rk4_on_grid;
    use ndarray::array;

    fn rk4_r(sigma_sq: f64, lambda: f64, r0: f64, t: f64) -> f64 {
        let f = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[0] * (0.5 * sigma_sq * y[0] * y[0] - sigma_sq + 2.0 * lambda);
            Ok(())
        };
        rk4_on_grid(f, &[r0], &[0.0, t], 1e-5).unwrap()[1][0]
    }

    #[test]
    fn fixed_point_and_origin() {
        for s in [0.1, 1.3, 4.0] {
            for t in [0.0, 1.0, 50.0] {
                assert!((relu_r(s, 0.0, 2f64.sqrt(), t) - 2f64.sqrt()).abs() < 1e-14);
                assert_eq!(relu_r(s, 0.3, 0.0, t), 0.0);
            }
        }
    }

    #[test]
    fn matches_rk4_oracle() {
        let v = relu_r(1.3, 0.0, 0.2, 5.0);
        assert!((v - rk4_r(1.3, 0.0, 0.2, 5.0)).abs() < 1e-8);
        for (s, l, r0) in [(0.1, 0.4, 2.2), (1.5, 0.4, 2.2), (1.0, 0.5, 1.0), (0.2, 0.1, 0.5)] {
            assert!(
                (relu_r(s, l, r0, 3.0) - rk4_r(s, l, r0, 3.0)).abs() < 1e-8,
                "{s} {l} {r0}"
            );
        }
    }

    #[test]
    fn continuous_across_threshold_patch() {
        for (s, r0, t) in [(1.0f64, 0.2, 3.0), (2.0, 2.2, 4.0), (0.1, 1.0, 5.0)] {
            let at_zero = relu_r(s, 0.5 * s, r0, t);
            for eta in [1e-8f64, -1e-8] {
                let l = 0.5 * (s - eta);
                assert!((relu_r(s, l, r0, t) - at_zero).abs() < 1e-7);
                // both sides of the cutoff agree far more tightly than the plain limit would
                let inside = relu_r(s, 0.5 * (s - 0.999 * eta), r0, t);
                let outside = relu_r(s, 0.5 * (s - 1.001 * eta), r0, t);
                assert!((inside - outside).abs() < 1e-10, "{s} {eta} {:e}", inside - outside);
            }
        }
    }

    #[test]
    fn long_time_shrinkage() {
        for (s, l) in [(1.3f64, 0.0f64), (1.5, 0.4), (2.0, 0.3)] {
            let target = (2.0 * (1.0 - 2.0 * l / s)).sqrt();
            assert!((relu_r(s, l, 0.2, 1e3) - target).abs() < 1e-9);
            assert!((relu_r_limit(s, l, 0.2) - target).abs() < 1e-15);
        }
        assert!(relu_r(0.1, 0.4, 2.2, 1e3) < 1e-9);
        // slow power-law decay exactly at threshold
        let at = relu_r(0.8, 0.4, 1.0, 1e3);
        assert!(at > 1e-3 && at < 0.1);
    }

    #[test]
    fn no_overflow_for_long_negative_eta() {
        let v = relu_r(0.1, 5.0, 1.0, 1e6);
        assert_eq!(v, 0.0);
        assert!(relu_r(0.1, 5.0, 1.0, 10.0).is_finite());
    }

    #[test]
    fn risk_examples() {
        let model = SpectralModel::new(vec![1.3, 0.7, 0.1], None).unwrap();
        assert!(relu_risk(&model, 0.0, 2f64.sqrt(), 3.0).unwrap().abs() < 1e-15);
        let t0 = relu_risk(&model, 0.2, 0.5, 0.0).unwrap();
        let expected = (1.3 + 0.7 + 0.1) * (1.0f64 - 0.125).powi(2) / 6.0;
        assert!((t0 - expected).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_limits() {
        let blocks = vec![(50usize, 1.5), (450usize, 0.1)];
        let (model, b) = crate::spectral::model_from_blocks(&blocks).unwrap();
        let risk = relu_risk(&model, 0.4, 2.2, 1e3).unwrap();
        let kept: f64 = 2.0 * (1.0 - 0.8 / 1.5);
        let kept_part = 50.0 * 1.5 * (1.0 - 0.5 * kept).powi(2) / 1000.0;
        let elim_part = 0.5 * 0.9 * 0.1;
        assert!((risk - kept_part - elim_part).abs() < 1e-9);
        let norms = relu_block_norm_prediction(&model, 0.4, 2.2, 1e3, &b).unwrap();
        assert!((norms[0] - kept).abs() < 1e-9);
        assert!(norms[1] < 1e-9);
        let init = relu_block_norm_prediction(&model, 0.4, 2.2, 0.0, &b).unwrap();
        assert!(init.iter().all(|v| (v - 2.2 * 2.2).abs() < 1e-12));
    }

    #[test]
    fn two_stage_examples() {
        let model = SpectralModel::new(vec![1.3, 1.3, 0.4, 0.1], None).unwrap();
        let base = relu_risk(&model, 0.0, 0.7, 2.0).unwrap();
        let huge = relu_two_stage_risk(&model, 0.0, 0.7, 2.0, 1e300).unwrap();
        assert_eq!(huge, base);
        // r² = 2 everywhere: term = 4d·ΣΣ²/(4μd²) = ΣΣ²/(μd)
        let mu = 0.75;
        let term = relu_sampling_term(&model, 0.0, 2f64.sqrt(), 1.0, mu).unwrap();
        assert!((term - 3.1 / (mu * 4.0)).abs() < 1e-14);
        assert!(relu_two_stage_risk(&model, 0.0, 0.7, 2.0, 0.0).is_err());
    }

    #[test]
    fn particle_map() {
        let model = SpectralModel::new(vec![2.0, 0.5], None).unwrap();
        let th = array![0.3, -0.2];
        assert_eq!(relu_mf_particle(th.view(), &model, 0.1, 0.4, 0.0).unwrap(), th);
        let fixed = relu_mf_particle(th.view(), &model, 0.0, 2f64.sqrt(), 7.0).unwrap();
        for (a, b) in fixed.iter().zip(th.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let moved = relu_mf_particle(th.view(), &model, 0.1, 0.4, 1.0).unwrap();
        assert!((moved[0] - 0.3 * relu_r(2.0, 0.1, 0.4, 1.0) / 0.4).abs() < 1e-12);
        assert!((moved[1] + 0.2 * relu_r(0.5, 0.1, 0.4, 1.0) / 0.4).abs() < 1e-12);
    }

    #[test]
    fn particle_map_respects_rotation() {
        let mut s = crate::rng::Stream::new(3);
        let q = crate::linalg::random_orthogonal(3, &mut s);
        let model = SpectralModel::new(vec![1.5, 0.8, 0.2], Some(q.clone())).unwrap();
        let th = array![0.1, 0.4, -0.3];
        let out = relu_mf_particle(th.view(), &model, 0.05, 0.6, 2.0).unwrap();
        let f: Vec<f64> = [1.5, 0.8, 0.2]
            .iter()
            .map(|&v| relu_r(v, 0.05, 0.6, 2.0) / 0.6)
            .collect();
        let expected = q.dot(&(q.t().dot(&th) * &Array1::from(f)));
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
