//! Activation functions and the Gaussian derivative mean `E{σ′(s·g)}` that
//! drives every mean-field formula.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quadrature::unit_legendre;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    /// `tanh(u) − c`
    TanhShift(f64),
    /// `tanh(u) + exp(−(u−1)²) + exp(−(u+1)²)`
    TanhBumps,
}

impl Activation {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Activation::Relu => u.max(0.0),
            Activation::Tanh => u.tanh(),
            Activation::TanhShift(c) => u.tanh() - c,
            Activation::TanhBumps => {
                let a = u - 1.0;
                let b = u + 1.0;
                u.tanh() + (-a * a).exp() + (-b * b).exp()
            }
        }
    }

    /// Pointwise derivative; for ReLU the indicator `u ≥ 0`.
    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh | Activation::TanhShift(_) => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::TanhBumps => {
                let t = u.tanh();
                let a = u - 1.0;
                let b = u + 1.0;
                1.0 - t * t - 2.0 * a * (-a * a).exp() - 2.0 * b * (-b * b).exp()
            }
        }
    }

    /// Second derivative; zero almost everywhere for ReLU.
    #[inline]
    pub fn second_derivative(&self, u: f64) -> f64 {
        match *self {
            Activation::Relu => 0.0,
            Activation::Tanh | Activation::TanhShift(_) => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::TanhBumps => {
                let t = u.tanh();
                let a = u - 1.0;
                let b = u + 1.0;
                -2.0 * t * (1.0 - t * t) + (4.0 * a * a - 2.0) * (-a * a).exp() + (4.0 * b * b - 2.0) * (-b * b).exp()
            }
        }
    }

    /// `(σ(u), σ′(u))` sharing one `tanh` evaluation.
    #[inline]
    pub fn eval_with_derivative(&self, u: f64) -> (f64, f64) {
        match *self {
            Activation::Relu => {
                if u >= 0.0 {
                    (u, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Tanh => {
                let t = u.tanh();
                (t, 1.0 - t * t)
            }
            Activation::TanhShift(c) => {
                let t = u.tanh();
                (t - c, 1.0 - t * t)
            }
            Activation::TanhBumps => {
                let t = u.tanh();
                let a = u - 1.0;
                let b = u + 1.0;
                let ea = (-a * a).exp();
                let eb = (-b * b).exp();
                (t + ea + eb, 1.0 - t * t - 2.0 * a * ea - 2.0 * b * eb)
            }
        }
    }

    /// `(σ′(u), σ″(u))` sharing one `tanh` evaluation.
    #[inline]
    fn derivatives(&self, u: f64) -> (f64, f64) {
        match *self {
            Activation::Relu => (self.derivative(u), 0.0),
            Activation::Tanh | Activation::TanhShift(_) => {
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                (sech2, -2.0 * t * sech2)
            }
            Activation::TanhBumps => {
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                let a = u - 1.0;
                let b = u + 1.0;
                let ea = (-a * a).exp();
                let eb = (-b * b).exp();
                (
                    sech2 - 2.0 * a * ea - 2.0 * b * eb,
                    -2.0 * t * sech2 + (4.0 * a * a - 2.0) * ea + (4.0 * b * b - 2.0) * eb,
                )
            }
        }
    }

    /// `E_{g∼N(0,1)} σ′(s·g)`.
    ///
    /// ReLU is exact (0.5 for `s > 0`). The tanh family uses composite
    /// Gauss–Legendre on the folded half-line, with panels narrow enough to
    /// resolve `σ′(s·g)` for any `s`.
    pub fn gauss_prime_mean(&self, s: f64) -> f64 {
        debug_assert!(s >= 0.0);
        if s == 0.0 {
            return self.derivative(0.0);
        }
        match self {
            Activation::Relu => 0.5,
            _ => self.gauss_prime_moments(s).0,
        }
    }

    /// `(m(s), m′(s))` with `m(s) = E σ′(s·g)` and `m′(s) = E g·σ″(s·g)`.
    ///
    /// For ReLU this is `(½, 0)` for every `s ≥ 0`, the Gaussian-average
    /// value rather than the pointwise `σ′(0)`.
    pub fn gauss_prime_moments(&self, s: f64) -> (f64, f64) {
        debug_assert!(s >= 0.0);
        if self.is_relu() {
            return (0.5, 0.0);
        }
        if s == 0.0 {
            return (self.derivative(0.0), 0.0);
        }
        // fold g ↦ ±g; panels narrow with s so σ′(s·g) is always resolved
        let upper = if s > 1.0 { U_CUTOFF / s } else { G_CUTOFF };
        let panels = if s > 1.0 {
            PANELS_WIDE
        } else {
            (2.0 * G_CUTOFF) as usize
        };
        let h = upper / panels as f64;
        let rule = unit_legendre();
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let (mut m, mut dm) = (0.0, 0.0);
        for p in 0..panels {
            let left = p as f64 * h;
            let (mut pm, mut pdm) = (0.0, 0.0);
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                let g = left + h * x;
                let u = s * g;
                let wg = w * (-0.5 * g * g).exp();
                let (d1p, d2p) = self.derivatives(u);
                let (d1m, d2m) = self.derivatives(-u);
                pm += wg * (d1p + d1m);
                pdm += wg * g * (d2p - d2m);
            }
            m += pm;
            dm += pdm;
        }
        (m * h * norm, dm * h * norm)
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, Activation::Relu)
    }
}

/// True iff `max_s |E σ_a′(sg) − E σ_b′(sg)| ≤ tol` over the grid.
pub fn equivalence_check(a: &Activation, b: &Activation, s_grid: &[f64], tol: f64) -> bool {
    assert!(!s_grid.is_empty(), "empty s grid");
    s_grid.iter().all(|&s| {
        assert!(s >= 0.0, "negative s in grid");
        (a.gauss_prime_mean(s) - b.gauss_prime_mean(s)).abs() <= tol
    })
}

const U_CUTOFF: f64 = 20.0;
const G_CUTOFF: f64 = 12.0;
const PANELS_WIDE: usize = 40;

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::TanhShift(c) => write!(f, "tanh_shift:{c}"),
            Activation::TanhBumps => write!(f, "tanh_bumps"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "tanh_bumps" => Ok(Activation::TanhBumps),
            _ => {
                if let Some(c) = s.strip_prefix("tanh_shift:") {
                    let c: f64 = c
                        .trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad tanh_shift constant `{c}`")))?;
                    if !c.is_finite() {
                        return Err(Error::Parse(format!("non-finite tanh_shift `{c}`")));
                    }
                    Ok(Activation::TanhShift(c))
                } else {
                    Err(Error::Parse(format!("unknown activation `{s}`")))
                }
            }
        }
    }
}
