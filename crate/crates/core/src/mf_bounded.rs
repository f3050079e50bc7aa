//! Mean-field predictions for bounded activations on two-block spectra.
//!
//! The limiting weight law is described by the joint law of the two block
//! radii `(r₁, r₂)`. Two solvers are provided: a deterministic two-scalar
//! reduction valid when both block dimensions are large, and a particle method
//! for the self-consistent radial ODE that keeps the χ-distributed
//! fluctuations of finite blocks.
//!
//! Both use the large-dimension kernel
//! `q̌ⱼ(a, b) = (xⱼ/αⱼ)·m(s)`, `x = (a, b)`, `s² = a²/α₁ + b²/α₂`,
//! `m(s) = E σ′(s·g)`.

use std::sync::Arc;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::ode::rk4_on_grid;
use crate::quadrature::legendre;
use crate::rng::{tag, Stream};

/// Above this total dimension the χ expectation collapses to a point mass.
pub const CHI_POINT_MASS_DIM: usize = 200;

/// Default Gauss–Legendre order for each χ marginal.
pub const CHI_NODES: usize = 32;

/// Values and first partials of the kernel at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QEval {
    pub q: [f64; 2],
    /// `dq[j][k] = ∂q̌ⱼ/∂xₖ`
    pub dq: [[f64; 2]; 2],
}

#[derive(Clone, Debug)]
pub struct QKernel {
    act: Activation,
    alpha: [f64; 2],
    table: Option<Arc<MomentTable>>,
}

impl QKernel {
    pub fn new(act: Activation, alpha1: f64, alpha2: f64) -> Result<Self> {
        for a in [alpha1, alpha2] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(QKernel {
            act,
            alpha: [alpha1, alpha2],
            table: None,
        })
    }

    /// Kernel for a split with `α₁ = alpha`, `α₂ = 1 − alpha`.
    pub fn two_block(act: Activation, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
        }
        QKernel::new(act, alpha, 1.0 - alpha)
    }

    /// Replaces the per-call quadrature by cubic Hermite interpolation of
    /// `m` on a fine grid (accuracy ~1e-9 in `m`, ~1e-7 in `m′`). Intended
    /// for the particle solver, where the kernel is evaluated millions of
    /// times per step.
    pub fn tabulated(mut self) -> Self {
        if !self.act.is_relu() {
            self.table = Some(Arc::new(MomentTable::build(self.act)));
        }
        self
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn alphas(&self) -> [f64; 2] {
        self.alpha
    }

    fn moments(&self, s: f64) -> (f64, f64) {
        match &self.table {
            Some(t) if s < t.s_max => t.eval(s),
            _ => self.act.gauss_prime_moments(s),
        }
    }

    /// `(q̌₁(a,b), q̌₂(a,b))`.
    pub fn q(&self, a: f64, b: f64) -> [f64; 2] {
        let [a1, a2] = self.alpha;
        let s = (a * a / a1 + b * b / a2).sqrt();
        let (m, _) = self.moments(s);
        [a / a1 * m, b / a2 * m]
    }

    /// Kernel values with analytic partials from `m′`.
    pub fn eval(&self, a: f64, b: f64) -> QEval {
        let x = [a, b];
        let al = self.alpha;
        let s = (a * a / al[0] + b * b / al[1]).sqrt();
        let (m, dm) = self.moments(s);
        let mut out = QEval {
            q: [x[0] / al[0] * m, x[1] / al[1] * m],
            dq: [[0.0; 2]; 2],
        };
        for j in 0..2 {
            for k in 0..2 {
                let diag = if j == k { m / al[j] } else { 0.0 };
                let chain = if s > 0.0 {
                    x[j] / al[j] * dm * x[k] / (al[k] * s)
                } else {
                    0.0
                };
                out.dq[j][k] = diag + chain;
            }
        }
        out
    }
}

/// The kernel pair `(q̌₁, q̌₂)` at `(a, b)`.
pub fn q_check(kernel: &QKernel, a: f64, b: f64) -> (f64, f64) {
    let [q1, q2] = kernel.q(a, b);
    (q1, q2)
}

/// `m` and `m′` sampled on a uniform grid in `s`.
#[derive(Debug)]
struct MomentTable {
    step: f64,
    s_max: f64,
    m: Vec<f64>,
    dm: Vec<f64>,
}

impl MomentTable {
    const STEP: f64 = 1.0 / 256.0;
    const S_MAX: f64 = 32.0;

    fn build(act: Activation) -> Self {
        let n = (Self::S_MAX / Self::STEP) as usize + 1;
        let (m, dm) = (0..n).map(|i| act.gauss_prime_moments(i as f64 * Self::STEP)).unzip();
        MomentTable {
            step: Self::STEP,
            s_max: (n - 1) as f64 * Self::STEP,
            m,
            dm,
        }
    }

    fn eval(&self, s: f64) -> (f64, f64) {
        let x = s / self.step;
        let i = (x as usize).min(self.m.len() - 2);
        let u = x - i as f64;
        let h = self.step;
        let (y0, y1) = (self.m[i], self.m[i + 1]);
        let (d0, d1) = (self.dm[i] * h, self.dm[i + 1] * h);
        let u2 = u * u;
        let u3 = u2 * u;
        let val =
            (2.0 * u3 - 3.0 * u2 + 1.0) * y0 + (u3 - 2.0 * u2 + u) * d0 + (-2.0 * u3 + 3.0 * u2) * y1 + (u3 - u2) * d1;
        let der = ((6.0 * u2 - 6.0 * u) * y0
            + (3.0 * u2 - 4.0 * u + 1.0) * d0
            + (-6.0 * u2 + 6.0 * u) * y1
            + (3.0 * u2 - 2.0 * u) * d1)
            / h;
        (val, der)
    }
}

/// Spectrum and training parameters of a two-block bounded-activation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoBlockParams {
    pub sigma_sq: [f64; 2],
    pub lambda: f64,
    pub r0: f64,
}

impl TwoBlockParams {
    pub fn new(sigma1_sq: f64, sigma2_sq: f64, lambda: f64, r0: f64) -> Result<Self> {
        for s in [sigma1_sq, sigma2_sq] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::NonPositiveEigenvalue { index: 0, value: s });
            }
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(r0 >= 0.0 && r0.is_finite()) {
            return Err(Error::InvalidArgument(format!("r0 must be >= 0, got {r0}")));
        }
        Ok(TwoBlockParams {
            sigma_sq: [sigma1_sq, sigma2_sq],
            lambda,
            r0,
        })
    }

    /// Fixed RK4 step `1e−3·min(1, 1/(Σ₁² + Σ₂² + 2λ))`.
    pub fn default_step(&self) -> f64 {
        1e-3 * (1.0f64).min(1.0 / (self.sigma_sq[0] + self.sigma_sq[1] + 2.0 * self.lambda))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundedMfState {
    pub t: f64,
    pub r1: f64,
    pub r2: f64,
}

impl BoundedMfState {
    /// Predicted normalized squared block norms `řⱼ²/αⱼ`.
    pub fn block_norms(&self, kernel: &QKernel) -> [f64; 2] {
        let [a1, a2] = kernel.alphas();
        [self.r1 * self.r1 / a1, self.r2 * self.r2 / a2]
    }
}

/// `Δ̌ⱼ = řⱼ·q̌ⱼ(c₁ř₁, c₂ř₂) − cⱼ` with `cⱼ = Σⱼ√αⱼ`.
pub fn delta_check(kernel: &QKernel, r: [f64; 2], sigma_sq: [f64; 2]) -> [f64; 2] {
    let c = block_scales(kernel, sigma_sq);
    let q = kernel.q(c[0] * r[0], c[1] * r[1]);
    [r[0] * q[0] - c[0], r[1] * q[1] - c[1]]
}

fn block_scales(kernel: &QKernel, sigma_sq: [f64; 2]) -> [f64; 2] {
    let al = kernel.alphas();
    [(sigma_sq[0] * al[0]).sqrt(), (sigma_sq[1] * al[1]).sqrt()]
}

/// Right-hand side of the radial ODE for one particle against a single
/// χ point, accumulated into `dr` with weight `w`.
#[inline]
fn radial_drift(kernel: &QKernel, chi: [f64; 2], r: [f64; 2], delta: [f64; 2], w: f64, dr: &mut [f64; 2]) {
    let e = kernel.eval(chi[0] * r[0], chi[1] * r[1]);
    for j in 0..2 {
        let o = 1 - j;
        dr[j] -= w * (delta[j] * (e.q[j] + chi[j] * r[j] * e.dq[j][j]) + delta[o] * chi[j] * r[o] * e.dq[o][j]);
    }
}

/// Two-scalar reduction, integrated with the default fixed step.
pub fn integrate_two_scalar(
    kernel: &QKernel,
    sigma1_sq: f64,
    sigma2_sq: f64,
    lambda: f64,
    r0: f64,
    t_grid: &[f64],
) -> Result<Vec<BoundedMfState>> {
    let p = TwoBlockParams::new(sigma1_sq, sigma2_sq, lambda, r0)?;
    integrate_two_scalar_with_step(kernel, &p, t_grid, p.default_step())
}

pub fn integrate_two_scalar_with_step(
    kernel: &QKernel,
    p: &TwoBlockParams,
    t_grid: &[f64],
    h: f64,
) -> Result<Vec<BoundedMfState>> {
    check_grid(t_grid)?;
    let c = block_scales(kernel, p.sigma_sq);
    let al = kernel.alphas();
    let y0 = [p.r0 * al[0].sqrt(), p.r0 * al[1].sqrt()];
    let lambda = p.lambda;
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let r = [y[0], y[1]];
        let delta = delta_check(kernel, r, p.sigma_sq);
        let mut dr = [-2.0 * lambda * r[0], -2.0 * lambda * r[1]];
        radial_drift(kernel, c, r, delta, 1.0, &mut dr);
        dy[0] = dr[0];
        dy[1] = dr[1];
        Ok(())
    };
    let states = rk4_on_grid(rhs, &y0, t_grid, h)?;
    Ok(t_grid
        .iter()
        .zip(states)
        .map(|(&t, y)| BoundedMfState { t, r1: y[0], r2: y[1] })
        .collect())
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    match t_grid.first() {
        Some(0.0) => Ok(()),
        _ => Err(Error::InvalidArgument("time grid must start at 0".into())),
    }
}

/// `½·Σⱼ Δ̌ⱼ²` for the two-scalar state.
pub fn bounded_risk(kernel: &QKernel, state: &BoundedMfState, sigma1_sq: f64, sigma2_sq: f64) -> f64 {
    let d = delta_check(kernel, [state.r1, state.r2], [sigma1_sq, sigma2_sq]);
    0.5 * (d[0] * d[0] + d[1] * d[1])
}

/// Reconstruction error of the trained state on a test law with block
/// variances `Σ_Q²`.
pub fn out_of_sample_risk(kernel: &QKernel, state: &BoundedMfState, sigma_q1_sq: f64, sigma_q2_sq: f64) -> f64 {
    bounded_risk(kernel, state, sigma_q1_sq, sigma_q2_sq)
}

/// How the χ expectation is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChiMode {
    /// Quadrature if `d₁ + d₂ ≤ 200`, point mass otherwise.
    Auto,
    /// Gauss–Legendre with this many nodes per marginal.
    Quadrature(usize),
    /// `χⱼ = Σⱼ√αⱼ`.
    PointMass,
}

/// Initial radii: χ-distributed draws or the deterministic `r0√αⱼ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    Sampled,
    PointMass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleOptions {
    pub particles: usize,
    pub seed: u64,
    pub chi: ChiMode,
    pub init: InitMode,
    /// RK4 step; `None` uses [`TwoBlockParams::default_step`].
    pub step: Option<f64>,
}

impl ParticleOptions {
    pub fn new(particles: usize, seed: u64) -> Self {
        ParticleOptions {
            particles,
            seed,
            chi: ChiMode::Auto,
            init: InitMode::Sampled,
            step: None,
        }
    }
}

/// Discrete law of `χ = (χ₁, χ₂)`: points with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiMeasure {
    pub points: Vec<([f64; 2], f64)>,
}

impl ChiMeasure {
    pub fn new(sigma_sq: [f64; 2], dims: [usize; 2], mode: ChiMode) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("block dimensions must be positive".into()));
        }
        let d = (dims[0] + dims[1]) as f64;
        let nodes = match mode {
            ChiMode::Auto if dims[0] + dims[1] <= CHI_POINT_MASS_DIM => Some(CHI_NODES),
            ChiMode::Auto | ChiMode::PointMass => None,
            ChiMode::Quadrature(n) if n >= 1 => Some(n),
            ChiMode::Quadrature(_) => {
                return Err(Error::InvalidArgument("need at least one χ node".into()));
            }
        };
        let points = match nodes {
            None => vec![(
                [
                    (sigma_sq[0] * dims[0] as f64 / d).sqrt(),
                    (sigma_sq[1] * dims[1] as f64 / d).sqrt(),
                ],
                1.0,
            )],
            Some(n) => {
                let m1 = chi_marginal(dims[0], n, (sigma_sq[0] / d).sqrt());
                let m2 = chi_marginal(dims[1], n, (sigma_sq[1] / d).sqrt());
                let mut pts = Vec::with_capacity(m1.len() * m2.len());
                for &(x1, w1) in &m1 {
                    for &(x2, w2) in &m2 {
                        pts.push(([x1, x2], w1 * w2));
                    }
                }
                pts
            }
        };
        Ok(ChiMeasure { points })
    }

    pub fn expect(&self, mut f: impl FnMut([f64; 2]) -> f64) -> f64 {
        self.points.iter().map(|&(c, w)| w * f(c)).sum()
    }
}

/// Nodes and normalized weights for `scale·Z`, `Z ∼ χ(k)`.
fn chi_marginal(k: usize, n: usize, scale: f64) -> Vec<(f64, f64)> {
    let kf = k as f64;
    let mode = (kf - 1.0).max(0.0).sqrt();
    // the density is ≈ N(mode, 1/2) for large k; 7 sd either side suffices
    let lo = (mode - 5.0).max(0.0);
    let hi = mode + 5.0 + if k < 4 { 4.0 } else { 0.0 };
    let rule = legendre(n, lo, hi);
    let log_pdf = |z: f64| {
        if z <= 0.0 {
            if k == 1 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            (kf - 1.0) * z.ln() - 0.5 * z * z
        }
    };
    let peak = rule.nodes.iter().map(|&z| log_pdf(z)).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&z, &w)| w * (log_pdf(z) - peak).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    rule.nodes
        .iter()
        .zip(raw)
        .map(|(&z, w)| (scale * z, w / total))
        .collect()
}

/// Empirical radial law at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialParticleCloud {
    pub t: f64,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
}

impl RadialParticleCloud {
    pub fn len(&self) -> usize {
        self.r1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r1.is_empty()
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.len() as f64;
        [self.r1.iter().sum::<f64>() / n, self.r2.iter().sum::<f64>() / n]
    }

    /// Predicted normalized squared block norms `E r̄ⱼ²/αⱼ`.
    pub fn block_norms(&self, kernel: &QKernel) -> [f64; 2] {
        let n = self.len() as f64;
        let [a1, a2] = kernel.alphas();
        [
            self.r1.iter().map(|v| v * v).sum::<f64>() / (n * a1),
            self.r2.iter().map(|v| v * v).sum::<f64>() / (n * a2),
        ]
    }
}

/// `Δⱼ(χ, ρ) = mean_p r̄ⱼ·q̌ⱼ(χ₁r̄₁, χ₂r̄₂) − χⱼ`.
fn particle_delta(kernel: &QKernel, chi: [f64; 2], r1: &[f64], r2: &[f64]) -> [f64; 2] {
    let mut acc = [0.0; 2];
    for (&a, &b) in r1.iter().zip(r2) {
        let q = kernel.q(chi[0] * a, chi[1] * b);
        acc[0] += a * q[0];
        acc[1] += b * q[1];
    }
    let n = r1.len() as f64;
    [acc[0] / n - chi[0], acc[1] / n - chi[1]]
}

/// `E_χ ½·Σⱼ Δⱼ(χ, ρ)²` for the empirical law of the cloud.
pub fn particle_risk(kernel: &QKernel, cloud: &RadialParticleCloud, chi: &ChiMeasure) -> f64 {
    chi.expect(|c| {
        let d = particle_delta(kernel, c, &cloud.r1, &cloud.r2);
        0.5 * (d[0] * d[0] + d[1] * d[1])
    })
}

/// Self-consistent particle solution of the radial ODE.
#[allow(clippy::too_many_arguments)]
pub fn integrate_particles(
    kernel: &QKernel,
    sigma1_sq: f64,
    sigma2_sq: f64,
    d1: usize,
    d2: usize,
    lambda: f64,
    r0: f64,
    opts: &ParticleOptions,
    t_grid: &[f64],
) -> Result<(Vec<RadialParticleCloud>, ChiMeasure)> {
    let p = TwoBlockParams::new(sigma1_sq, sigma2_sq, lambda, r0)?;
    check_grid(t_grid)?;
    let np = opts.particles;
    match opts.init {
        InitMode::Sampled if np < 2 => {
            return Err(Error::InvalidArgument("need at least 2 particles".into()));
        }
        InitMode::PointMass if np < 1 => {
            return Err(Error::InvalidArgument("need at least 1 particle".into()));
        }
        _ => {}
    }
    let chi = ChiMeasure::new(p.sigma_sq, [d1, d2], opts.chi)?;
    let d = (d1 + d2) as f64;
    let mut y0 = vec![0.0; 2 * np];
    match opts.init {
        InitMode::PointMass => {
            let al = kernel.alphas();
            y0[..np].fill(r0 * al[0].sqrt());
            y0[np..].fill(r0 * al[1].sqrt());
        }
        InitMode::Sampled => {
            let root = Stream::new(opts.seed);
            for i in 0..np {
                let mut s = root.substream(tag::PARTICLES, i as u64);
                for (j, dj) in [d1, d2].into_iter().enumerate() {
                    let sq: f64 = (0..dj).map(|_| s.normal().powi(2)).sum();
                    y0[j * np + i] = r0 * (sq / d).sqrt();
                }
            }
        }
    }
    let lambda = p.lambda;
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let (r1, r2) = y.split_at(np);
        for i in 0..np {
            dy[i] = -2.0 * lambda * r1[i];
            dy[np + i] = -2.0 * lambda * r2[i];
        }
        for &(c, w) in &chi.points {
            let delta = particle_delta(kernel, c, r1, r2);
            for i in 0..np {
                let mut dr = [0.0; 2];
                radial_drift(kernel, c, [r1[i], r2[i]], delta, w, &mut dr);
                dy[i] += dr[0];
                dy[np + i] += dr[1];
            }
        }
        Ok(())
    };
    let h = opts.step.unwrap_or_else(|| p.default_step());
    let states = rk4_on_grid(rhs, &y0, t_grid, h)?;
    let clouds = t_grid
        .iter()
        .zip(states)
        .map(|(&t, y)| RadialParticleCloud {
            t,
            r1: y[..np].to_vec(),
            r2: y[np..].to_vec(),
        })
        .collect();
    Ok((clouds, chi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mf_relu::relu_r;
    use crate::ode::linear_grid;

    fn tanh_kernel() -> QKernel {
        QKernel::two_block(Activation::Tanh, 0.3).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let relu = QKernel::new(Activation::Relu, 0.5, 0.5).unwrap();
        assert_eq!(q_check(&relu, 1.0, 0.0).0, 1.0);
        for act in [Activation::Relu, Activation::Tanh, Activation::TanhBumps] {
            let k = QKernel::two_block(act, 0.4).unwrap();
            assert_eq!(q_check(&k, 0.0, 0.0), (0.0, 0.0));
        }
        assert!(QKernel::two_block(Activation::Tanh, 1.0).is_err());
    }

    #[test]
    fn relu_partials_are_constant() {
        let k = QKernel::two_block(Activation::Relu, 0.3).unwrap();
        let e = k.eval(0.7, 1.9);
        assert_eq!(e.dq[0][0], 1.0 / 0.6);
        assert_eq!(e.dq[1][1], 1.0 / 1.4);
        assert_eq!(e.dq[0][1], 0.0);
        assert_eq!(e.dq[1][0], 0.0);
    }

    #[test]
    fn partials_match_central_differences() {
        let k = tanh_kernel();
        let h = 1e-6;
        for (a, b) in [(0.3, 0.2), (1.1, 0.05), (0.02, 0.9), (2.0, 1.5)] {
            let e = k.eval(a, b);
            let qa = [k.q(a + h, b), k.q(a - h, b)];
            let qb = [k.q(a, b + h), k.q(a, b - h)];
            for j in 0..2 {
                let fd_a = (qa[0][j] - qa[1][j]) / (2.0 * h);
                let fd_b = (qb[0][j] - qb[1][j]) / (2.0 * h);
                assert!((fd_a - e.dq[j][0]).abs() < 1e-7, "∂a q{j} at ({a},{b})");
                assert!((fd_b - e.dq[j][1]).abs() < 1e-7, "∂b q{j} at ({a},{b})");
            }
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        let exact = tanh_kernel();
        let fast = tanh_kernel().tabulated();
        for i in 0..400 {
            let a = 0.013 * i as f64;
            let b = 0.7 - 0.001 * i as f64;
            let e = exact.eval(a, b.abs());
            let f = fast.eval(a, b.abs());
            for j in 0..2 {
                assert!((e.q[j] - f.q[j]).abs() < 1e-9);
                for k in 0..2 {
                    assert!((e.dq[j][k] - f.dq[j][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn relu_reduction_matches_closed_form() {
        let k = QKernel::two_block(Activation::Relu, 0.3).unwrap();
        let grid = linear_grid(6.0, 13);
        for (l, r0) in [(0.0, 0.2), (0.3, 2.5), (0.1, 1.0)] {
            let states = integrate_two_scalar(&k, 1.3, 0.2, l, r0, &grid).unwrap();
            for st in &states {
                let [n1, n2] = st.block_norms(&k);
                assert!((n1 - relu_r(1.3, l, r0, st.t).powi(2)).abs() < 1e-6);
                assert!((n2 - relu_r(0.2, l, r0, st.t).powi(2)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn origin_is_stationary() {
        let k = tanh_kernel();
        let states = integrate_two_scalar(&k, 1.3, 0.2, 0.1, 0.0, &[0.0, 1.0, 5.0]).unwrap();
        let expected = 0.5 * (1.3 * 0.3 + 0.2 * 0.7);
        for st in states {
            assert_eq!((st.r1, st.r2), (0.0, 0.0));
            assert!((bounded_risk(&k, &st, 1.3, 0.2) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_sample_equals_in_sample_for_same_law() {
        let k = tanh_kernel();
        let st = BoundedMfState {
            t: 0.0,
            r1: 0.4,
            r2: 0.7,
        };
        assert_eq!(out_of_sample_risk(&k, &st, 1.3, 0.2), bounded_risk(&k, &st, 1.3, 0.2));
    }

    #[test]
    fn rk4_order_on_tanh_dynamics() {
        let k = tanh_kernel();
        let p = TwoBlockParams::new(1.3, 0.2, 0.05, 0.8).unwrap();
        let end = |h: f64| {
            let s = integrate_two_scalar_with_step(&k, &p, &[0.0, 4.0], h).unwrap();
            [s[1].r1, s[1].r2]
        };
        let (a, b, c) = (end(0.2), end(0.1), end(0.05));
        let diff = |x: [f64; 2], y: [f64; 2]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        let order = (diff(a, b) / diff(b, c)).log2();
        assert!(order >= 3.5, "observed order {order}");
    }

    #[test]
    fn chi_measure_moments() {
        // E χ² = Σ²·dⱼ/d; 32 nodes resolve it to ~1e-9 relative
        let m = ChiMeasure::new([1.3, 0.2], [30, 70], ChiMode::Auto).unwrap();
        assert_eq!(m.points.len(), CHI_NODES * CHI_NODES);
        let total: f64 = m.expect(|_| 1.0);
        assert!((total - 1.0).abs() < 1e-14);
        let e1 = m.expect(|c| c[0] * c[0]);
        let e2 = m.expect(|c| c[1] * c[1]);
        assert!((e1 / (1.3 * 0.3) - 1.0).abs() < 1e-8, "{e1}");
        assert!((e2 / (0.2 * 0.7) - 1.0).abs() < 1e-8, "{e2}");
        let pm = ChiMeasure::new([1.3, 0.2], [300, 700], ChiMode::Auto).unwrap();
        assert_eq!(pm.points.len(), 1);
    }

    #[test]
    fn single_point_particle_reduces_to_two_scalar() {
        let k = tanh_kernel();
        let grid = linear_grid(3.0, 7);
        let opts = ParticleOptions {
            particles: 1,
            seed: 0,
            chi: ChiMode::PointMass,
            init: InitMode::PointMass,
            step: None,
        };
        let (clouds, chi) = integrate_particles(&k, 1.3, 0.2, 300, 700, 0.0, 0.2, &opts, &grid).unwrap();
        let states = integrate_two_scalar(&k, 1.3, 0.2, 0.0, 0.2, &grid).unwrap();
        for (c, s) in clouds.iter().zip(&states) {
            assert!((c.r1[0] - s.r1).abs() < 1e-8);
            assert!((c.r2[0] - s.r2).abs() < 1e-8);
            assert!((particle_risk(&k, c, &chi) - bounded_risk(&k, s, 1.3, 0.2)).abs() < 1e-8);
        }
    }

    #[test]
    fn particle_init_is_deterministic_and_scaled() {
        let k = QKernel::two_block(Activation::Relu, 0.25).unwrap();
        let opts = ParticleOptions::new(500, 9);
        let run = || {
            integrate_particles(&k, 1.0, 0.5, 25, 75, 0.0, 1.0, &opts, &[0.0])
                .unwrap()
                .0
        };
        let a = run();
        assert_eq!(a, run());
        let [n1, n2] = a[0].block_norms(&k);
        assert!((n1 - 1.0).abs() < 0.05, "{n1}");
        assert!((n2 - 1.0).abs() < 0.05, "{n2}");
        let bad = ParticleOptions::new(1, 9);
        assert!(integrate_particles(&k, 1.0, 0.5, 25, 75, 0.0, 1.0, &bad, &[0.0]).is_err());
    }
}
