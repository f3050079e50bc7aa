//! Fixed-step classical Runge–Kutta integration.

use crate::error::{Error, Result};

/// State norm above which integration is declared unstable.
pub const STATE_LIMIT: f64 = 1e6;

/// Integrates `y′ = f(t, y)` from `t_grid[0]` and returns the state at every
/// grid point.
///
/// Each gap between grid points is split into `ceil(gap/h)` equal steps, so
/// the step never exceeds `h` and the grid is hit exactly.
pub fn rk4_on_grid<F>(mut f: F, y0: &[f64], t_grid: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::InvalidArgument("time grid must be nondecreasing".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(y.clone());
    for w in t_grid.windows(2) {
        let gap = w[1] - w[0];
        let steps = (gap / h).ceil() as usize;
        if steps == 0 {
            out.push(y.clone());
            continue;
        }
        let dt = gap / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * dt;
            f(t, &y, &mut k1)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            f(t + 0.5 * dt, &tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            f(t + 0.5 * dt, &tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            f(t + dt, &tmp, &mut k4)?;
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= STATE_LIMIT) {
                return Err(Error::Unstable { t: t + dt, norm });
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Evenly spaced grid `0, T/(n−1), …, T`.
pub fn linear_grid(t_end: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points).map(|i| t_end * i as f64 / (points - 1) as f64).collect()
}
