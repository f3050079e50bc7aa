//! Two-staged process: resample `M` neurons i.i.d. with replacement from a
//! trained autoencoder and evaluate the derived `M`-neuron autoencoder.

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::rng::{tag, Stream};
use crate::sgd::{estimate_rec_err, RiskEstimate, WeightMatrix};
use crate::spectral::SpectralModel;

/// Resample repeats per `(M, t)` by default.
pub const DEFAULT_REPEATS: usize = 20;

/// `M` rows drawn uniformly with replacement.
pub fn subsample_neurons(w: &WeightMatrix, m: usize, seed: u64) -> Result<WeightMatrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mut s = Stream::new(seed).substream(tag::RESAMPLE, 0);
    let n = w.n() as u64;
    let rows: Vec<usize> = (0..m).map(|_| s.below(n) as usize).collect();
    Ok(w.select_rows(&rows))
}

/// Monte-Carlo risk of the derived autoencoder (same estimator as for the
/// trained one, with the `1/M` output prefactor).
pub fn derived_risk(
    sampled: &WeightMatrix,
    model: &SpectralModel,
    act: Activation,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    estimate_rec_err(sampled, model, act, n_mc, seed)
}

/// Derived risk averaged over independent resamples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleSummary {
    pub m: usize,
    pub mean: f64,
    /// Standard error across repeats (captures resampling and evaluation
    /// noise together).
    pub std_error: f64,
    pub repeats: usize,
}

/// Runs `repeats` resamples of size `m`; repeat `k` draws its neurons and its
/// evaluation data from its own substreams of `seed`.
pub fn resample_study(
    w: &WeightMatrix,
    model: &SpectralModel,
    act: Activation,
    m: usize,
    repeats: usize,
    n_mc: usize,
    seed: u64,
) -> Result<ResampleSummary> {
    if repeats < 2 {
        return Err(Error::InvalidArgument("need at least 2 repeats".into()));
    }
    let root = Stream::new(seed);
    let mut means = Vec::with_capacity(repeats);
    for k in 0..repeats {
        let mut s = root.substream(tag::RESAMPLE, (m as u64) << 20 | k as u64);
        let pick_seed = s.next_u64();
        let eval_seed = s.next_u64();
        let sampled = subsample_neurons(w, m, pick_seed)?;
        means.push(derived_risk(&sampled, model, act, n_mc, eval_seed)?.mean);
    }
    let est = RiskEstimate::from_samples(&means);
    Ok(ResampleSummary {
        m,
        mean: est.mean,
        std_error: est.std_error,
        repeats,
    })
}
