//! Gaussian data laws `N(0, (1/d)·R·diag(Σ²)·Rᵀ)` and their samplers.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, orthogonality_deviation};
use crate::rng::Stream;

/// Orthogonality tolerance for explicit rotations.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Spectra below this value are accepted but flagged.
pub const SMALL_EIGENVALUE_WARNING: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Rotation {
    Identity,
    Explicit(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralModel {
    eigvals: Vec<f64>,
    rotation: Rotation,
}

impl SpectralModel {
    /// Builds a model, sorting the spectrum in nonincreasing order. When the
    /// sort permutes entries, the rotation's columns are permuted to match so
    /// the covariance is unchanged; an identity rotation then becomes an
    /// explicit permutation matrix.
    pub fn new(eigvals: Vec<f64>, rotation: Option<Array2<f64>>) -> Result<Self> {
        let d = eigvals.len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty spectrum".into()));
        }
        for (index, &value) in eigvals.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveEigenvalue { index, value });
            }
        }
        let mut perm: Vec<usize> = (0..d).collect();
        perm.sort_by(|&i, &j| eigvals[j].total_cmp(&eigvals[i]));
        let sorted: Vec<f64> = perm.iter().map(|&i| eigvals[i]).collect();
        let permuted = perm.iter().enumerate().any(|(k, &i)| k != i);

        let rotation = match rotation {
            None if !permuted => Rotation::Identity,
            None => {
                let mut r = Array2::<f64>::zeros((d, d));
                for (k, &i) in perm.iter().enumerate() {
                    r[[i, k]] = 1.0;
                }
                Rotation::Explicit(r)
            }
            Some(r) => {
                if r.dim() != (d, d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: r.nrows(),
                    });
                }
                let deviation = orthogonality_deviation(&r);
                if deviation > ORTHOGONALITY_TOL || !deviation.is_finite() {
                    return Err(Error::NotOrthogonal { deviation });
                }
                let mut out = Array2::<f64>::zeros((d, d));
                for (k, &i) in perm.iter().enumerate() {
                    out.column_mut(k).assign(&r.column(i));
                }
                Rotation::Explicit(out)
            }
        };
        Ok(SpectralModel {
            eigvals: sorted,
            rotation,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    /// Smallest Σ² falls below [`SMALL_EIGENVALUE_WARNING`].
    pub fn has_tiny_eigenvalues(&self) -> bool {
        self.eigvals.last().is_some_and(|&v| v < SMALL_EIGENVALUE_WARNING)
    }

    pub fn covariance(&self) -> Array2<f64> {
        let d = self.dim();
        let diag = Array2::from_diag(&ndarray::Array1::from(
            self.eigvals.iter().map(|v| v / d as f64).collect::<Vec<_>>(),
        ));
        match &self.rotation {
            Rotation::Identity => diag,
            Rotation::Explicit(r) => r.dot(&diag).dot(&r.t()),
        }
    }

    /// `E‖x‖² = (1/d)·ΣΣᵢ²`.
    pub fn second_moment_trace(&self) -> f64 {
        compensated_sum(self.eigvals.iter().copied()) / self.dim() as f64
    }

    /// `n` i.i.d. rows from the model.
    pub fn sample(&self, n: usize, stream: &mut Stream) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let scale: Vec<f64> = self.eigvals.iter().map(|v| (v / d as f64).sqrt()).collect();
        let mut z = Array2::<f64>::zeros((n, d));
        for mut row in z.axis_iter_mut(Axis(0)) {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v = stream.normal() * s;
            }
        }
        Ok(match &self.rotation {
            Rotation::Identity => z,
            Rotation::Explicit(r) => z.dot(&r.t()),
        })
    }

    /// Maps data-space vectors (rows) into the eigenbasis: `Rᵀx`.
    pub fn to_eigenbasis(&self, rows: &Array2<f64>) -> Array2<f64> {
        match &self.rotation {
            Rotation::Identity => rows.clone(),
            Rotation::Explicit(r) => rows.dot(r),
        }
    }

    /// Same spectrum, different rotation.
    pub fn with_rotation(&self, rotation: Array2<f64>) -> Result<Self> {
        SpectralModel::new(self.eigvals.clone(), Some(rotation))
    }
}

/// Contiguous index ranges that partition `0..d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks(Vec<Range<usize>>);

impl Blocks {
    pub fn new(ranges: Vec<Range<usize>>, d: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::BadPartition {
                dim: d,
                reason: "no blocks".into(),
            });
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::BadPartition {
                    dim: d,
                    reason: format!("block {r:?} does not continue at {next}"),
                });
            }
            next = r.end;
        }
        if next != d {
            return Err(Error::BadPartition {
                dim: d,
                reason: format!("blocks cover 0..{next}"),
            });
        }
        Ok(Blocks(ranges))
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let ranges = sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        Blocks::new(ranges, start)
    }

    #[allow(clippy::single_range_in_vec_init)]
    pub fn whole(d: usize) -> Self {
        Blocks(vec![0..d])
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0.last().map_or(0, |r| r.end)
    }
}

/// Two-block diagonal spectrum with `d₁` entries at Σ₁² then `d₂` at Σ₂².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoBlockModel {
    pub d1: usize,
    pub d2: usize,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

impl TwoBlockModel {
    pub fn new(d1: usize, d2: usize, sigma1_sq: f64, sigma2_sq: f64) -> Result<Self> {
        if d1 <= 16 || d2 <= 16 {
            return Err(Error::InvalidArgument(format!(
                "two-block model needs d1, d2 > 16 (got {d1}, {d2})"
            )));
        }
        if !(sigma1_sq > 0.0 && sigma2_sq > 0.0) {
            return Err(Error::InvalidArgument("block variances must be positive".into()));
        }
        Ok(TwoBlockModel {
            d1,
            d2,
            sigma1_sq,
            sigma2_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    /// `α = d₁/d`.
    pub fn alpha(&self) -> f64 {
        self.d1 as f64 / self.dim() as f64
    }

    pub fn second_moment_trace(&self) -> f64 {
        let a = self.alpha();
        a * self.sigma1_sq + (1.0 - a) * self.sigma2_sq
    }

    /// Expands to a spectral model with identity rotation. A block listed
    /// with the smaller variance first is reordered by the sort contract.
    pub fn to_spectral(&self) -> Result<SpectralModel> {
        let mut eig = vec![self.sigma1_sq; self.d1];
        eig.extend(std::iter::repeat_n(self.sigma2_sq, self.d2));
        SpectralModel::new(eig, None)
    }

    pub fn blocks(&self) -> Blocks {
        Blocks(vec![0..self.d1, self.d1..self.dim()])
    }
}

/// Parses an inline block list `"d1:σ1sq, d2:σ2sq, …"`.
pub fn parse_block_spec(spec: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (size, var) = part
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("block `{part}` is not size:variance")))?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad block size `{size}`")))?;
        let var: f64 = var
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad block variance `{var}`")))?;
        if size == 0 {
            return Err(Error::Parse("block of size 0".into()));
        }
        out.push((size, var));
    }
    if out.is_empty() {
        return Err(Error::Parse("empty block list".into()));
    }
    Ok(out)
}

/// Model and block partition for an inline block list. Blocks must be listed
/// in nonincreasing variance so block ranges coincide with sorted indices.
pub fn model_from_blocks(blocks: &[(usize, f64)]) -> Result<(SpectralModel, Blocks)> {
    if blocks.windows(2).any(|w| w[0].1 < w[1].1) {
        return Err(Error::InvalidArgument(
            "blocks must be listed in nonincreasing variance".into(),
        ));
    }
    let mut eig = Vec::new();
    for &(size, var) in blocks {
        eig.extend(std::iter::repeat_n(var, size));
    }
    let model = SpectralModel::new(eig, None)?;
    let sizes: Vec<usize> = blocks.iter().map(|b| b.0).collect();
    Ok((model, Blocks::from_sizes(&sizes)?))
}

/// Spectrum text: one Σᵢ² per line; blank lines and `#` comments ignored.
pub fn parse_spectrum(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Parse(format!("spectrum line {}: `{line}`", lineno + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_spectrum_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spectrum(&text)
}

pub fn format_spectrum(values: &[f64]) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&crate::csvout::fmt_f64(*v));
        s.push('\n');
    }
    s
}
