//! Coupling between SGD particles and their closed-form ReLU mean-field
//! trajectories started from the same initial weights.

use ndarray::Axis;

use crate::activations::Activation;
use crate::csvout::{Cell, Table};
use crate::error::{Error, Result};
use crate::mf_relu::{relu_mf_particles, ReluMfCurve};
use crate::rng::{tag, Stream};
use crate::sgd::{estimate_rec_err, init_weights, train_with, FreshGaussian, TrainConfig, WeightMatrix};
use crate::spectral::SpectralModel;

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingConfig {
    pub n: usize,
    pub epsilon: f64,
    pub t_end: f64,
    pub lambda: f64,
    pub r0: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of evenly spaced checkpoints (including both ends).
    pub checkpoints: usize,
}

impl CouplingConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.epsilon).round() as usize
    }

    fn train_config(&self) -> TrainConfig {
        let steps = self.steps();
        TrainConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            steps,
            r0: self.r0,
            seed: self.seed,
            checkpoints: TrainConfig::even_checkpoints(steps, self.checkpoints),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingPoint {
    pub k: usize,
    pub t: f64,
    pub e: f64,
}

#[derive(Clone, Debug)]
pub struct CouplingReport {
    pub config: CouplingConfig,
    pub d: usize,
    pub points: Vec<CouplingPoint>,
    pub initial: WeightMatrix,
    pub terminal: WeightMatrix,
}

impl CouplingReport {
    pub fn terminal_e(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.e)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["k", "t", "E_k"]);
        for p in &self.points {
            t.push(vec![p.k.into(), p.t.into(), p.e.into()]);
        }
        t
    }
}

/// `(1/N)·Σᵢ ‖θᵢ − θ̄ᵢ‖²`.
pub fn coupling_error(w: &WeightMatrix, mf: &ndarray::Array2<f64>) -> f64 {
    let diff = w.theta() - mf;
    diff.iter().map(|v| v * v).sum::<f64>() / w.n() as f64
}

/// Runs ReLU SGD and, at each checkpoint, measures the distance to the
/// mean-field particles `θ̄ᵢ^{kε}` sharing the initialization.
pub fn coupled_run(model: &SpectralModel, cfg: &CouplingConfig) -> Result<CouplingReport> {
    let tc = cfg.train_config();
    let w0 = init_weights(cfg.n, model.dim(), cfg.r0, cfg.seed)?;
    let theta0 = w0.theta().clone();
    let mut source = FreshGaussian::new(model, cfg.seed);
    let mut points = Vec::with_capacity(tc.checkpoints.len());
    let terminal = train_with(w0.clone(), &tc, &mut source, Activation::Relu, |k, w| {
        let t = k as f64 * cfg.epsilon;
        let mf = relu_mf_particles(&theta0, model, cfg.lambda, cfg.r0, t)?;
        points.push(CouplingPoint {
            k,
            t,
            e: coupling_error(w, &mf),
        });
        Ok(())
    })?;
    Ok(CouplingReport {
        config: cfg.clone(),
        d: model.dim(),
        points,
        initial: w0,
        terminal,
    })
}

/// Gaps between SGD particle statistics and their limiting-law values at the
/// terminal time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TerminalGaps {
    /// `|avgᵢ ‖θᵢ‖ − E‖θ‖|`
    pub norm: f64,
    /// `|avgᵢ θᵢ·e₁ − E θ·e₁|` (the limit is 0)
    pub first_coord: f64,
    /// `|RecErr(Θ) − predicted risk|`
    pub risk: f64,
}

/// Samples used for the limiting-law expectation of `‖θ‖`.
pub const LIMIT_LAW_SAMPLES: usize = 1_000_000;

pub fn terminal_gaps(report: &CouplingReport, model: &SpectralModel, n_mc: usize) -> Result<TerminalGaps> {
    let cfg = &report.config;
    let t = report.points.last().map_or(0.0, |p| p.t);
    let curve = ReluMfCurve::new(model, cfg.lambda, cfg.r0)?;
    let r = curve.r_at(t);
    let d = model.dim() as f64;

    // E‖θ‖ under N(0, R·diag(r²)·Rᵀ/d); the norm is rotation invariant
    let mut s = Stream::new(cfg.seed).substream(tag::ORACLE, 0);
    let mut acc = 0.0;
    for _ in 0..LIMIT_LAW_SAMPLES {
        let sq: f64 = r.iter().map(|ri| (ri * s.normal()).powi(2)).sum();
        acc += (sq / d).sqrt();
    }
    let limit_norm = acc / LIMIT_LAW_SAMPLES as f64;

    let w = &report.terminal;
    let emp_norm = w
        .theta()
        .map_axis(Axis(1), |row| row.dot(&row).sqrt())
        .mean()
        .unwrap_or(0.0);
    let emp_first = w.theta().column(0).mean().unwrap_or(0.0);
    let emp_risk = estimate_rec_err(w, model, Activation::Relu, n_mc, cfg.seed)?;
    Ok(TerminalGaps {
        norm: (emp_norm - limit_norm).abs(),
        first_coord: emp_first.abs(),
        risk: (emp_risk.mean - curve.risk(t)).abs(),
    })
}

/// One row of the scaling summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub axis: &'static str,
    pub value: f64,
    pub median_terminal_e: f64,
    pub fitted_slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn slope(&self, axis: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.axis == axis).map(|r| r.fitted_slope)
    }

    pub fn medians(&self, axis: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.axis == axis)
            .map(|r| r.median_terminal_e)
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["axis", "value", "median_terminal_E", "fitted_slope"]);
        for r in &self.rows {
            t.push(vec![
                Cell::from(r.axis),
                r.value.into(),
                r.median_terminal_e.into(),
                r.fitted_slope.into(),
            ]);
        }
        t
    }
}

/// Settings shared by every run of a scaling study.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingBase {
    pub t_end: f64,
    pub lambda: f64,
    pub r0: f64,
    pub batch_size: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn check_axis(name: &str, len: usize) -> Result<bool> {
    match len {
        0 => Err(Error::InvalidArgument(format!("{name} list is empty"))),
        1 => Ok(false),
        2 => Err(Error::InvalidArgument(format!(
            "{name} axis needs at least 3 values to be swept, got 2"
        ))),
        _ => Ok(true),
    }
}

/// Median terminal coupling error over seeds for each swept axis value, with
/// the other axis held at its most favorable value (largest N, smallest ε).
pub fn scaling_study(
    model: &SpectralModel,
    n_list: &[usize],
    eps_list: &[f64],
    base: &ScalingBase,
    seeds: &[u64],
) -> Result<ScalingTable> {
    let sweep_n = check_axis("N", n_list.len())?;
    let sweep_eps = check_axis("epsilon", eps_list.len())?;
    if !sweep_n && !sweep_eps {
        return Err(Error::InvalidArgument(
            "at least one axis must be swept with >= 3 values".into(),
        ));
    }
    if seeds.len() < 3 {
        return Err(Error::InvalidArgument(format!("need >= 3 seeds, got {}", seeds.len())));
    }
    let best_n = *n_list.iter().max().unwrap();
    let best_eps = eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let run = |n: usize, eps: f64| -> Result<f64> {
        let mut es = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = CouplingConfig {
                n,
                epsilon: eps,
                t_end: base.t_end,
                lambda: base.lambda,
                r0: base.r0,
                batch_size: base.batch_size,
                seed,
                checkpoints: 2,
            };
            es.push(coupled_run(model, &cfg)?.terminal_e());
        }
        Ok(median(&mut es))
    };
    let mut rows = Vec::new();
    if sweep_n {
        let meds: Vec<f64> = n_list.iter().map(|&n| run(n, best_eps)).collect::<Result<_>>()?;
        let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
        let slope = log_log_slope(&xs, &meds);
        rows.extend(xs.iter().zip(&meds).map(|(&v, &m)| ScalingRow {
            axis: "N",
            value: v,
            median_terminal_e: m,
            fitted_slope: slope,
        }));
    }
    if sweep_eps {
        let meds: Vec<f64> = eps_list.iter().map(|&e| run(best_n, e)).collect::<Result<_>>()?;
        let slope = log_log_slope(eps_list, &meds);
        rows.extend(eps_list.iter().zip(&meds).map(|(&v, &m)| ScalingRow {
            axis: "epsilon",
            value: v,
            median_terminal_e: m,
            fitted_slope: slope,
        }));
    }
    Ok(ScalingTable { rows })
}
