//! Mean removal and principal-axis rotation of image data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{orthogonality_deviation, symmetric_eigen};
use crate::spectral::{format_spectrum, SpectralModel};

/// Smallest eigenvalue kept in the emitted spectrum.
pub const EIGEN_FLOOR: f64 = 1e-5;

const BASIS_MAGIC: &[u8; 4] = b"MFUB";
const CHUNK_ROWS: usize = 4096;

#[derive(Clone, Debug)]
pub struct Preprocessor {
    mean: Array1<f64>,
    basis: Array2<f64>,
    eigvals: Vec<f64>,
}

impl Preprocessor {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    /// Columns are the principal directions, ordered by decreasing variance.
    pub fn basis(&self) -> ArrayView2<'_, f64> {
        self.basis.view()
    }

    /// Floored covariance spectrum, nonincreasing.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Spectral model of the transformed data, which is already rotated.
    pub fn spectral_model(&self) -> Result<SpectralModel> {
        SpectralModel::new(self.eigvals.clone(), None)
    }

    pub fn write_spectrum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format_spectrum(&self.eigvals)).map_err(|e| Error::io(path, e))
    }

    pub fn write_basis(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_basis_to(&mut w, &self.basis).map_err(|e| Error::io(path, e))
    }
}

fn write_basis_to(w: &mut impl Write, basis: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(BASIS_MAGIC)?;
    w.write_all(&(basis.nrows() as u64).to_le_bytes())?;
    for v in basis.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads a basis file written by [`Preprocessor::write_basis`].
pub fn read_basis(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != BASIS_MAGIC {
        return Err(Error::Parse(format!("{}: not a basis file", path.display())));
    }
    let d = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if d.checked_mul(d).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(Error::Parse(format!(
            "{}: expected {d}x{d} doubles, found {} bytes",
            path.display(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((d, d), values).expect("length checked"))
}

/// Fits mean, principal basis and floored spectrum to `images` (one
/// flattened image per row, pixels in `[0, 1]`).
pub fn fit_preprocessor(images: ArrayView2<'_, f64>, d: usize) -> Result<Preprocessor> {
    let (n, width) = images.dim();
    if width != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: width,
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 images, got {n}")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("zero image size".into()));
    }
    let mean = images.mean_axis(Axis(0)).expect("n >= 2");

    let mut cov = Array2::<f64>::zeros((d, d));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let centered = &images.slice(s![start..end, ..]) - &mean;
        general_mat_mul(1.0, &centered.t(), &centered, 1.0, &mut cov);
        start = end;
    }
    cov /= n as f64;
    // Symmetrize against rounding in the accumulation.
    let cov = (&cov + &cov.t()) * 0.5;

    let (values, basis) = symmetric_eigen(&cov);
    let eigvals = values.iter().map(|&v| v.max(EIGEN_FLOOR)).collect();
    Ok(Preprocessor { mean, basis, eigvals })
}

/// `Uᵀ(x̄ − μ̂)/√d` for a single image.
pub fn apply_preprocessor(p: &Preprocessor, image: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if image.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: image.len(),
        });
    }
    let centered = &image - &p.mean;
    Ok(p.basis.t().dot(&centered) / (p.dim() as f64).sqrt())
}

/// Row-wise [`apply_preprocessor`].
pub fn apply_batch(p: &Preprocessor, images: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if images.ncols() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: images.ncols(),
        });
    }
    let centered = &images - &p.mean;
    Ok(centered.dot(&p.basis) / (p.dim() as f64).sqrt())
}

/// Largest deviation of the stored basis from orthogonality.
pub fn basis_deviation(p: &Preprocessor) -> f64 {
    orthogonality_deviation(&p.basis)
}
