//! Mean-field-scaled weight-tied autoencoder
//! `x̂(x) = (1/N)·Σᵢ κθᵢ·σ(⟨κθᵢ, x⟩)`, `κ = √d`, trained by mini-batch SGD
//! with the `N`-amplified gradient.
//!
//! All batch work is expressed as dense matrix products so one step costs a
//! handful of GEMMs of shape `b × N × d`; the reduction order inside each
//! product is fixed, which keeps runs bit-reproducible.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::rng::{tag, Stream};
use crate::spectral::{Blocks, Rotation, SpectralModel};

/// Any weight above this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Mini-batch size used by default for synthetic runs.
pub const DEFAULT_BATCH_SIZE: usize = 100;

const SNAPSHOT_MAGIC: &[u8; 4] = b"MFAE";
const SNAPSHOT_VERSION: u32 = 1;

/// Rows are neurons θᵢ ∈ ℝᵈ.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    theta: Array2<f64>,
}

impl WeightMatrix {
    pub fn from_array(theta: Array2<f64>) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(Error::InvalidArgument("weight matrix must be non-empty".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("weight matrix has non-finite entries".into()));
        }
        Ok(WeightMatrix { theta })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        WeightMatrix {
            theta: Array2::zeros((n, d)),
        }
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d(&self) -> usize {
        self.theta.ncols()
    }

    pub fn kappa(&self) -> f64 {
        (self.d() as f64).sqrt()
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.theta
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.theta.row(i)
    }

    /// New matrix made of the given rows (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> WeightMatrix {
        WeightMatrix {
            theta: self.theta.select(Axis(0), rows),
        }
    }

    pub fn write_snapshot(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.n() as u64).to_le_bytes())?;
        out.write_all(&(self.d() as u64).to_le_bytes())?;
        for v in self.theta.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Parse(format!("snapshot: {e}")))?;
        if bytes.len() < 24 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(Error::Parse("snapshot: bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Parse(format!("snapshot: unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Parse("snapshot: size overflow".into()))?;
        if bytes.len() - 24 != expected {
            return Err(Error::Parse(format!(
                "snapshot: payload is {} bytes, expected {expected}",
                bytes.len() - 24
            )));
        }
        let data: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let theta = Array2::from_shape_vec((n, d), data).map_err(|e| Error::Parse(e.to_string()))?;
        WeightMatrix::from_array(theta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * self.theta.len());
        self.write_snapshot(&mut buf).expect("write to Vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Rows i.i.d. `N(0, r0²·I/d)`.
pub fn init_weights(n: usize, d: usize, r0: f64, seed: u64) -> Result<WeightMatrix> {
    if !(r0 >= 0.0 && r0.is_finite()) {
        return Err(Error::InvalidArgument(format!("r0 must be nonnegative, got {r0}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("N and d must be positive".into()));
    }
    let mut stream = Stream::new(seed).substream(tag::INIT, 0);
    let scale = r0 / (d as f64).sqrt();
    let theta = Array2::from_shape_simple_fn((n, d), || stream.normal() * scale);
    Ok(WeightMatrix { theta })
}

/// Reconstruction of one input.
pub fn forward(w: &WeightMatrix, x: ArrayView1<'_, f64>, act: Activation) -> Array1<f64> {
    let batch = x.insert_axis(Axis(0));
    forward_batch(w, batch, act).index_axis_move(Axis(0), 0)
}

/// Reconstructions of each row of `xs`.
pub fn forward_batch(w: &WeightMatrix, xs: ArrayView2<'_, f64>, act: Activation) -> Array2<f64> {
    let kappa = w.kappa();
    let mut pre = xs.dot(&w.theta.t());
    pre.mapv_inplace(|u| act.eval(kappa * u));
    let mut out = pre.dot(&w.theta);
    out *= kappa / w.n() as f64;
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub lambda: f64,
    pub epsilon: f64,
}

/// Scratch buffers reused across steps.
#[derive(Default)]
pub struct Workspace {
    pre: Array2<f64>,
    act: Array2<f64>,
    dact: Array2<f64>,
    resid: Array2<f64>,
    grad: Array2<f64>,
}

impl Workspace {
    fn ensure(&mut self, b: usize, n: usize, d: usize) {
        if self.pre.dim() != (b, n) {
            self.pre = Array2::zeros((b, n));
            self.act = Array2::zeros((b, n));
            self.dact = Array2::zeros((b, n));
        }
        if self.resid.dim() != (b, d) {
            self.resid = Array2::zeros((b, d));
        }
        if self.grad.dim() != (n, d) {
            self.grad = Array2::zeros((n, d));
        }
    }
}

/// One simultaneous SGD update
/// `θᵢ ← θᵢ − ε·avg_x[κσ(uᵢ)(x̂−x) + κ²σ′(uᵢ)⟨θᵢ, x̂−x⟩x + 2λθᵢ]`,
/// with `uᵢ = ⟨κθᵢ, x⟩` and `x̂` evaluated at the pre-update weights.
pub fn sgd_step(
    w: &WeightMatrix,
    batch: ArrayView2<'_, f64>,
    params: StepParams,
    act: Activation,
) -> Result<WeightMatrix> {
    let mut next = w.clone();
    sgd_step_in_place(&mut next, batch, params, act, &mut Workspace::default())?;
    Ok(next)
}

pub fn sgd_step_in_place(
    w: &mut WeightMatrix,
    batch: ArrayView2<'_, f64>,
    params: StepParams,
    act: Activation,
    ws: &mut Workspace,
) -> Result<()> {
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (n, d) = w.theta.dim();
    if batch.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: batch.ncols(),
        });
    }
    let kappa = (d as f64).sqrt();
    ws.ensure(b, n, d);
    let theta = &w.theta;

    // pre-activations u = κ·X·Θᵀ
    general_mat_mul(kappa, &batch, &theta.t(), 0.0, &mut ws.pre);
    ndarray::Zip::from(&mut ws.act)
        .and(&mut ws.dact)
        .and(&ws.pre)
        .for_each(|s, sp, &u| {
            (*s, *sp) = act.eval_with_derivative(u);
        });
    // residual x̂ − x
    ws.resid.assign(&batch);
    general_mat_mul(kappa / n as f64, &ws.act, theta, -1.0, &mut ws.resid);
    // κ·σ(u)ᵀ(x̂ − x)
    general_mat_mul(kappa, &ws.act.t(), &ws.resid, 0.0, &mut ws.grad);
    // ⟨θᵢ, x̂ − x⟩ weighted by σ′(uᵢ), reusing `pre`
    general_mat_mul(1.0, &ws.resid, &theta.t(), 0.0, &mut ws.pre);
    ws.pre *= &ws.dact;
    general_mat_mul(kappa * kappa, &ws.pre.t(), &batch, 1.0, &mut ws.grad);

    let decay = 1.0 - 2.0 * params.epsilon * params.lambda;
    let rate = params.epsilon / b as f64;
    let mut bad = None;
    ndarray::Zip::from(&mut w.theta).and(&ws.grad).for_each(|t, &g| {
        *t = decay * *t - rate * g;
    });
    for v in w.theta.iter() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            bad = Some(*v);
            break;
        }
    }
    if let Some(v) = bad {
        return Err(Error::Diverged {
            step: 0,
            reason: format!("weight entry {v:e} exceeds {DIVERGENCE_LIMIT:e}"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl RiskEstimate {
    pub fn from_samples(values: &[f64]) -> RiskEstimate {
        let n = values.len();
        let mean = crate::linalg::compensated_sum(values.iter().copied()) / n as f64;
        let var = if n > 1 {
            crate::linalg::compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64
        } else {
            0.0
        };
        RiskEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            n_samples: n,
        }
    }
}

const EVAL_CHUNK: usize = 2_000;

/// Monte-Carlo estimate of `½E‖x̂(x) − x‖²` over fresh draws from `model`.
pub fn estimate_rec_err(
    w: &WeightMatrix,
    model: &SpectralModel,
    act: Activation,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    let mut stream = Stream::new(seed).substream(tag::EVAL, 0);
    estimate_rec_err_with(w, model, act, n_mc, &mut stream)
}

pub fn estimate_rec_err_with(
    w: &WeightMatrix,
    model: &SpectralModel,
    act: Activation,
    n_mc: usize,
    stream: &mut Stream,
) -> Result<RiskEstimate> {
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be at least 2".into()));
    }
    if model.dim() != w.d() {
        return Err(Error::DimensionMismatch {
            expected: w.d(),
            got: model.dim(),
        });
    }
    let mut losses = Vec::with_capacity(n_mc);
    let mut remaining = n_mc;
    while remaining > 0 {
        let c = remaining.min(EVAL_CHUNK);
        let x = model.sample(c, stream)?;
        push_losses(w, x.view(), act, &mut losses);
        remaining -= c;
    }
    Ok(RiskEstimate::from_samples(&losses))
}

/// Reconstruction error averaged over a fixed dataset (rows).
pub fn rec_err_on_dataset(w: &WeightMatrix, data: ArrayView2<'_, f64>, act: Activation) -> RiskEstimate {
    let mut losses = Vec::with_capacity(data.nrows());
    let mut start = 0;
    while start < data.nrows() {
        let end = (start + EVAL_CHUNK).min(data.nrows());
        push_losses(w, data.slice(ndarray::s![start..end, ..]), act, &mut losses);
        start = end;
    }
    RiskEstimate::from_samples(&losses)
}

fn push_losses(w: &WeightMatrix, x: ArrayView2<'_, f64>, act: Activation, out: &mut Vec<f64>) {
    let xhat = forward_batch(w, x, act);
    for (r, xr) in xhat.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0))) {
        let mut s = 0.0;
        for (a, b) in r.iter().zip(xr.iter()) {
            s += (a - b) * (a - b);
        }
        out.push(0.5 * s);
    }
}

/// Normalized squared block norms `(d/(d_b·N))·Σᵢ‖θᵢ,block‖²`, measured in
/// the eigenbasis of `rotation`.
pub fn subspace_norms(w: &WeightMatrix, blocks: &Blocks, rotation: &Rotation) -> Result<Vec<f64>> {
    let d = w.d();
    if blocks.dim() != d {
        return Err(Error::BadPartition {
            dim: d,
            reason: format!("blocks cover 0..{}", blocks.dim()),
        });
    }
    let rotated;
    let theta = match rotation {
        Rotation::Identity => &w.theta,
        Rotation::Explicit(r) => {
            rotated = w.theta.dot(r);
            &rotated
        }
    };
    let n = w.n() as f64;
    Ok(blocks
        .ranges()
        .iter()
        .map(|r| {
            let sq: f64 = theta.slice(ndarray::s![.., r.clone()]).iter().map(|v| v * v).sum();
            sq * d as f64 / (r.len() as f64 * n)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub r0: f64,
    pub seed: u64,
    /// Sorted step indices in `0..=steps` at which metrics are recorded.
    pub checkpoints: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.r0 >= 0.0 && self.r0.is_finite()) {
            return Err(Error::InvalidArgument(format!("r0 must be >= 0, got {}", self.r0)));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
        }
        if let Some(&last) = self.checkpoints.last() {
            if last > self.steps {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {last} beyond {} steps",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> StepParams {
        StepParams {
            lambda: self.lambda,
            epsilon: self.epsilon,
        }
    }

    /// `count` checkpoints spread evenly over `0..=steps` (always including
    /// both ends).
    pub fn even_checkpoints(steps: usize, count: usize) -> Vec<usize> {
        let count = count.max(2);
        let mut out: Vec<usize> = (0..count)
            .map(|i| ((i as u128 * steps as u128) / (count as u128 - 1)) as usize)
            .collect();
        out.dedup();
        out
    }
}

/// Where training batches come from.
pub trait BatchSource {
    fn batch(&mut self, step: usize, size: usize) -> Result<Array2<f64>>;
}

/// Fresh i.i.d. draws each step; step `k` always sees the same batch for a
/// given seed.
pub struct FreshGaussian<'a> {
    model: &'a SpectralModel,
    root: Stream,
}

impl<'a> FreshGaussian<'a> {
    pub fn new(model: &'a SpectralModel, seed: u64) -> Self {
        FreshGaussian {
            model,
            root: Stream::new(seed),
        }
    }
}

impl BatchSource for FreshGaussian<'_> {
    fn batch(&mut self, step: usize, size: usize) -> Result<Array2<f64>> {
        let mut s = self.root.substream(tag::DATA, step as u64);
        self.model.sample(size, &mut s)
    }
}

/// Finite dataset scanned without replacement, reshuffled every epoch.
pub struct EpochShuffle<'a> {
    data: ArrayView2<'a, f64>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    root: Stream,
}

impl<'a> EpochShuffle<'a> {
    pub fn new(data: ArrayView2<'a, f64>, seed: u64) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let root = Stream::new(seed);
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        root.substream(tag::SHUFFLE, 0).shuffle(&mut order);
        Ok(EpochShuffle {
            data,
            order,
            pos: 0,
            epoch: 0,
            root,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl BatchSource for EpochShuffle<'_> {
    fn batch(&mut self, _step: usize, size: usize) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.root.substream(tag::SHUFFLE, self.epoch).shuffle(&mut self.order);
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(self.data.select(Axis(0), &rows))
    }
}

/// Runs `cfg.steps` SGD steps, calling `observe(step, weights)` at every
/// checkpoint (before the step with that index is applied).
pub fn train_with<F>(
    w0: WeightMatrix,
    cfg: &TrainConfig,
    source: &mut dyn BatchSource,
    act: Activation,
    mut observe: F,
) -> Result<WeightMatrix>
where
    F: FnMut(usize, &WeightMatrix) -> Result<()>,
{
    cfg.validate()?;
    let params = cfg.params();
    let mut w = w0;
    let mut ws = Workspace::default();
    let mut next_cp = cfg.checkpoints.iter().peekable();
    for k in 0..=cfg.steps {
        if next_cp.peek() == Some(&&k) {
            next_cp.next();
            observe(k, &w)?;
        }
        if k == cfg.steps {
            break;
        }
        let batch = source.batch(k, cfg.batch_size)?;
        sgd_step_in_place(&mut w, batch.view(), params, act, &mut ws).map_err(|e| match e {
            Error::Diverged { reason, .. } => Error::Diverged { step: k, reason },
            other => other,
        })?;
    }
    Ok(w)
}

/// How checkpoint reconstruction errors are measured.
#[derive(Clone, Copy, Debug)]
pub enum RiskSource<'a> {
    /// Fresh Monte-Carlo draws (independent per checkpoint).
    Gaussian { model: &'a SpectralModel, n_mc: usize },
    /// A fixed held-out set.
    Dataset(ArrayView2<'a, f64>),
}

#[derive(Clone, Debug)]
pub struct MetricSpec<'a> {
    pub risk: RiskSource<'a>,
    pub blocks: Blocks,
    pub rotation: Rotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub time: f64,
    pub rec_err: RiskEstimate,
    pub block_norms: Vec<f64>,
}

/// Measures reconstruction error and block norms of `w` at `step`.
pub fn checkpoint_metrics(
    w: &WeightMatrix,
    step: usize,
    cfg: &TrainConfig,
    act: Activation,
    metrics: &MetricSpec<'_>,
) -> Result<Checkpoint> {
    let rec_err = match metrics.risk {
        RiskSource::Gaussian { model, n_mc } => {
            let mut s = Stream::new(cfg.seed).substream(tag::EVAL, step as u64);
            estimate_rec_err_with(w, model, act, n_mc, &mut s)?
        }
        RiskSource::Dataset(data) => rec_err_on_dataset(w, data, act),
    };
    Ok(Checkpoint {
        step,
        time: step as f64 * cfg.epsilon,
        rec_err,
        block_norms: subspace_norms(w, &metrics.blocks, &metrics.rotation)?,
    })
}

/// Trains on fresh Gaussian batches from `model` and records metrics at each
/// checkpoint. Returns the final weights with the metric stream.
pub fn train(
    w0: WeightMatrix,
    cfg: &TrainConfig,
    model: &SpectralModel,
    act: Activation,
    metrics: &MetricSpec<'_>,
) -> Result<(WeightMatrix, Vec<Checkpoint>)> {
    let mut source = FreshGaussian::new(model, cfg.seed);
    let mut out = Vec::with_capacity(cfg.checkpoints.len());
    let w = train_with(w0, cfg, &mut source, act, |k, w| {
        out.push(checkpoint_metrics(w, k, cfg, act, metrics)?);
        Ok(())
    })?;
    Ok((w, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthogonal;
    use ndarray::{arr1, array};

    fn small_model(d: usize) -> SpectralModel {
        let eig: Vec<f64> = (0..d).map(|i| 1.5 - 0.2 * i as f64).collect();
        SpectralModel::new(eig, None).unwrap()
    }

    /// Direct double loop over neurons and coordinates.
    fn forward_loops(theta: &Array2<f64>, x: &[f64], act: Activation) -> Vec<f64> {
        let (n, d) = theta.dim();
        let kappa = (d as f64).sqrt();
        let mut out = vec![0.0; d];
        for i in 0..n {
            let mut u = 0.0;
            for j in 0..d {
                u += kappa * theta[[i, j]] * x[j];
            }
            let s = act.eval(u);
            for j in 0..d {
                out[j] += kappa * theta[[i, j]] * s / n as f64;
            }
        }
        out
    }

    /// `½‖x̂−x‖² + (λ/N)Σ‖θᵢ‖²` averaged over the batch rows.
    fn loss(theta: &Array2<f64>, batch: &Array2<f64>, lambda: f64, act: Activation) -> f64 {
        let n = theta.nrows();
        let mut total = 0.0;
        for x in batch.axis_iter(Axis(0)) {
            let xhat = forward_loops(theta, x.as_slice().unwrap(), act);
            total += 0.5 * xhat.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total /= batch.nrows() as f64;
        total + lambda / n as f64 * theta.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn init_examples() {
        let w = init_weights(3, 2, 0.0, 1).unwrap();
        assert!(w.theta().iter().all(|&v| v == 0.0));
        assert_eq!(init_weights(4, 3, 0.5, 9).unwrap(), init_weights(4, 3, 0.5, 9).unwrap());
        assert!(init_weights(2, 2, -1.0, 0).is_err());

        let w = init_weights(10_000, 200, 0.2, 42).unwrap();
        let mean_sq = w.theta().map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap();
        assert!((mean_sq - 0.04).abs() <= 0.02 * 0.04, "{mean_sq}");
    }

    #[test]
    fn forward_examples() {
        let z = WeightMatrix::zeros(3, 4);
        assert!(forward(&z, arr1(&[1.0, 2.0, 3.0, 4.0]).view(), Activation::Tanh)
            .iter()
            .all(|&v| v == 0.0));
        let w = WeightMatrix::from_array(array![[1.0]]).unwrap();
        assert_eq!(forward(&w, arr1(&[1.0]).view(), Activation::Relu)[0], 1.0);
    }

    #[test]
    fn forward_matches_loops() {
        let mut s = Stream::new(3);
        let theta = Array2::from_shape_simple_fn((5, 3), || s.normal());
        let w = WeightMatrix::from_array(theta.clone()).unwrap();
        for act in [Activation::Relu, Activation::Tanh, Activation::TanhBumps] {
            let x: Vec<f64> = (0..3).map(|_| s.normal()).collect();
            let fast = forward(&w, arr1(&x).view(), act);
            let slow = forward_loops(&theta, &x, act);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn origin_is_stationary() {
        let w = WeightMatrix::zeros(4, 3);
        let batch = small_model(3).sample(5, &mut Stream::new(1)).unwrap();
        let params = StepParams {
            lambda: 0.0,
            epsilon: 0.1,
        };
        let next = sgd_step(&w, batch.view(), params, Activation::Relu).unwrap();
        assert!(next.theta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_data_is_pure_decay() {
        let mut s = Stream::new(5);
        let w = WeightMatrix::from_array(Array2::from_shape_simple_fn((3, 2), || s.normal())).unwrap();
        let batch = Array2::zeros((4, 2));
        let params = StepParams {
            lambda: 0.3,
            epsilon: 0.05,
        };
        let next = sgd_step(&w, batch.view(), params, Activation::Tanh).unwrap();
        let expected = w.theta() * (1.0 - 2.0 * 0.05 * 0.3);
        for (a, b) in next.theta().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn check_gradient(theta: Array2<f64>, batch: Array2<f64>, lambda: f64, act: Activation) {
        let n = theta.nrows();
        let eps = 1e-3;
        let w = WeightMatrix::from_array(theta.clone()).unwrap();
        let next = sgd_step(&w, batch.view(), StepParams { lambda, epsilon: eps }, act).unwrap();
        let kappa = (theta.ncols() as f64).sqrt();
        let h = 1e-6;
        for ((i, j), &t) in theta.indexed_iter() {
            if act.is_relu() {
                // skip coordinates whose neuron sits near the kink
                let near_kink = batch
                    .axis_iter(Axis(0))
                    .any(|x| (kappa * theta.row(i).dot(&x)).abs() < 1e-3);
                if near_kink {
                    continue;
                }
            }
            let mut plus = theta.clone();
            plus[[i, j]] = t + h;
            let mut minus = theta.clone();
            minus[[i, j]] = t - h;
            let fd = n as f64 * (loss(&plus, &batch, lambda, act) - loss(&minus, &batch, lambda, act)) / (2.0 * h);
            let step_dir = (t - next.theta()[[i, j]]) / eps;
            let rel = (fd - step_dir).abs() / fd.abs().max(step_dir.abs()).max(1e-8);
            assert!(rel <= 1e-5, "{act} ({i},{j}): fd {fd} step {step_dir} rel {rel}");
        }
    }

    #[test]
    fn relu_step_matches_finite_differences_n2_d2() {
        let theta = array![[0.7, -0.4], [0.2, 0.9]];
        let batch = array![[0.8, 0.5]];
        check_gradient(theta, batch, 0.0, Activation::Relu);
    }

    #[test]
    fn random_instances_match_finite_differences() {
        let mut s = Stream::new(77);
        for trial in 0..24 {
            let n = 1 + s.below(4) as usize;
            let d = 1 + s.below(4) as usize;
            let b = 1 + s.below(3) as usize;
            let act = [
                Activation::Relu,
                Activation::Tanh,
                Activation::TanhShift(0.5),
                Activation::TanhBumps,
            ][trial % 4];
            let theta = Array2::from_shape_simple_fn((n, d), || 0.8 * s.normal());
            let batch = Array2::from_shape_simple_fn((b, d), || s.normal());
            let lambda = if trial % 3 == 0 { 0.0 } else { 0.25 };
            check_gradient(theta, batch, lambda, act);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let w = WeightMatrix::from_array(array![[1e5, 1e5]]).unwrap();
        let batch = array![[1e3, 1e3]];
        let err = sgd_step(
            &w,
            batch.view(),
            StepParams {
                lambda: 0.0,
                epsilon: 1.0,
            },
            Activation::Relu,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn zero_weights_risk_is_half_trace() {
        let model = small_model(4);
        let w = WeightMatrix::zeros(3, 4);
        let est = estimate_rec_err(&w, &model, Activation::Relu, 20_000, 8).unwrap();
        let target = 0.5 * model.second_moment_trace();
        assert!((est.mean - target).abs() < 4.0 * est.std_error);
        assert!(estimate_rec_err(&w, &model, Activation::Relu, 1, 8).is_err());
    }

    #[test]
    fn two_seed_consistency() {
        let model = small_model(3);
        let w = init_weights(5, 3, 1.0, 12).unwrap();
        let a = estimate_rec_err(&w, &model, Activation::Tanh, 1_000_000, 1).unwrap();
        let b = estimate_rec_err(&w, &model, Activation::Tanh, 1_000_000, 2).unwrap();
        let joint = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 4.0 * joint);
        assert_ne!(a.mean, b.mean);
    }

    #[test]
    fn subspace_norm_examples() {
        let d = 5;
        let blocks = Blocks::from_sizes(&[1, 4]).unwrap();
        let z = WeightMatrix::zeros(3, d);
        assert_eq!(
            subspace_norms(&z, &blocks, &Rotation::Identity).unwrap(),
            vec![0.0, 0.0]
        );
        let mut e1 = Array2::zeros((3, d));
        e1.column_mut(0).fill(1.0);
        let w = WeightMatrix::from_array(e1).unwrap();
        assert_eq!(
            subspace_norms(&w, &blocks, &Rotation::Identity).unwrap(),
            vec![5.0, 0.0]
        );
        let bad = Blocks::from_sizes(&[1, 3]).unwrap();
        assert!(subspace_norms(&w, &bad, &Rotation::Identity).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let model = small_model(4);
        let w = init_weights(7, 4, 1.2, 3).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let wp = w.select_rows(&perm);
        let x = model.sample(3, &mut Stream::new(4)).unwrap();
        let a = forward_batch(&w, x.view(), Activation::Tanh);
        let b = forward_batch(&wp, x.view(), Activation::Tanh);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() <= 1e-10);
        }
        let ra = estimate_rec_err(&w, &model, Activation::Relu, 5_000, 9).unwrap();
        let rb = estimate_rec_err(&wp, &model, Activation::Relu, 5_000, 9).unwrap();
        assert!((ra.mean - rb.mean).abs() <= 1e-10);
    }

    #[test]
    fn rotational_covariance() {
        let mut s = Stream::new(21);
        let q = random_orthogonal(4, &mut s);
        let w = init_weights(6, 4, 1.0, 2).unwrap();
        let wq = WeightMatrix::from_array(w.theta().dot(&q.t())).unwrap();
        let x = arr1(&[0.3, -1.2, 0.5, 0.9]);
        for act in [Activation::Relu, Activation::Tanh] {
            let lhs = forward(&wq, q.dot(&x).view(), act);
            let rhs = q.dot(&forward(&w, x.view(), act));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn train_emits_checkpoints_deterministically() {
        let model = small_model(3);
        let metrics = MetricSpec {
            risk: RiskSource::Gaussian {
                model: &model,
                n_mc: 200,
            },
            blocks: Blocks::whole(3),
            rotation: Rotation::Identity,
        };
        let w0 = init_weights(8, 3, 0.5, 1).unwrap();
        let cfg0 = TrainConfig {
            lambda: 0.1,
            epsilon: 0.01,
            batch_size: 4,
            steps: 0,
            r0: 0.5,
            seed: 5,
            checkpoints: vec![0],
        };
        let (w, cps) = train(w0.clone(), &cfg0, &model, Activation::Relu, &metrics).unwrap();
        assert_eq!(w, w0);
        assert_eq!(cps.len(), 1);
        assert_eq!(cps[0].step, 0);

        let cfg = TrainConfig {
            steps: 50,
            checkpoints: vec![0, 10, 50],
            ..cfg0
        };
        let (wa, a) = train(w0.clone(), &cfg, &model, Activation::Relu, &metrics).unwrap();
        let (wb, b) = train(w0, &cfg, &model, Activation::Relu, &metrics).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        assert_eq!(a.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 10, 50]);
        assert!((a[2].time - 0.5).abs() < 1e-15);
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig {
            lambda: 0.0,
            epsilon: 0.1,
            batch_size: 1,
            steps: 10,
            r0: 0.0,
            seed: 0,
            checkpoints: vec![0, 10],
        };
        assert!(ok.validate().is_ok());
        assert!(TrainConfig {
            checkpoints: vec![0, 11],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            checkpoints: vec![5, 5],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert_eq!(TrainConfig::even_checkpoints(10, 3), vec![0, 5, 10]);
    }

    #[test]
    fn epoch_shuffle_covers_each_row_once_per_epoch() {
        let data = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        let mut src = EpochShuffle::new(data.view(), 3).unwrap();
        let mut seen = Vec::new();
        for k in 0..5 {
            let b = src.batch(k, 2).unwrap();
            for r in b.axis_iter(Axis(0)) {
                seen.push(r[0] as usize / 2);
            }
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(src.epoch(), 0);
        src.batch(5, 1).unwrap();
        assert_eq!(src.epoch(), 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let w = init_weights(3, 2, 1.0, 4).unwrap();
        let mut buf = Vec::new();
        w.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFAE");
        assert_eq!(buf.len(), 24 + 3 * 2 * 8);
        let back = WeightMatrix::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
        buf.pop();
        assert!(WeightMatrix::read_snapshot(&mut buf.as_slice()).is_err());
    }
}
