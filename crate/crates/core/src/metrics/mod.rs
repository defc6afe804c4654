//! Image quality measures and Fréchet distance between Gaussian feature fits.

mod report;

pub use report::{
    evaluate_dirs, evaluate_pair, format_value, pooled_features, EvalOptions, MetricReport,
    MetricRow, PairEvaluation, PairMetrics,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::colorspace::{luminance, ColorError, ColorImage, Space};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Image(#[from] crate::image_io::ImageError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_C3: f64 = SSIM_C2 / 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;
/// Symmetry slack and negative-eigenvalue slack accepted by [`matrix_sqrt_psd`].
pub const PSD_TOLERANCE: f64 = 1e-6;

fn check_len(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() || u.is_empty() {
        return Err(MetricError::SizeMismatch(format!("{} vs {} values", u.len(), v.len())));
    }
    Ok(())
}

pub fn mean_abs_error(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64)
}

pub fn mean_squared_error(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / u.len() as f64)
}

/// `20 log10(max u) - 10 log10(mse)` over all channels; `+inf` when `u == v`.
pub fn psnr(u: &[f64], v: &[f64]) -> Result<f64> {
    let mse = mean_squared_error(u, v)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(20.0 * peak.log10() - 10.0 * mse.log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsimMode {
    /// One set of statistics per image.
    #[default]
    Global,
    /// Mean of local SSIM under an 11x11 Gaussian window (sigma 1.5).
    Gaussian,
}

struct Moments {
    mu_u: f64,
    mu_v: f64,
    var_u: f64,
    var_v: f64,
    cov: f64,
}

fn ssim_from_moments(m: &Moments) -> f64 {
    // sqrt(var_u * var_v) rather than sigma_u * sigma_v makes ssim(u, u) exactly 1
    let sigma_prod = (m.var_u * m.var_v).sqrt();
    let l = (2.0 * (m.mu_u * m.mu_v) + SSIM_C1) / (m.mu_u * m.mu_u + m.mu_v * m.mu_v + SSIM_C1);
    let c = (2.0 * sigma_prod + SSIM_C2) / (m.var_u + m.var_v + SSIM_C2);
    let s = (m.cov + SSIM_C3) / (sigma_prod + SSIM_C3);
    l * c * s
}

fn global_moments(u: &[f64], v: &[f64]) -> Moments {
    let n = u.len() as f64;
    let mu_u = u.iter().sum::<f64>() / n;
    let mu_v = v.iter().sum::<f64>() / n;
    let (mut var_u, mut var_v, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (du, dv) = (a - mu_u, b - mu_v);
        var_u += du * du;
        var_v += dv * dv;
        cov += du * dv;
    }
    Moments { mu_u, mu_v, var_u: var_u / n, var_v: var_v / n, cov: cov / n }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_WINDOW_SIGMA * SSIM_WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn local_ssim(u: &[f64], v: &[f64], width: usize, height: usize) -> f64 {
    // local moments come from raw sums, so identical planes are settled up front
    if u == v {
        return 1.0;
    }
    let kernel = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    for y in 0..height {
        for x in 0..width {
            // window truncated at the border and renormalized
            let (mut wsum, mut su, mut sv, mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                let Some(yy) = (y + ky).checked_sub(r).filter(|&yy| yy < height) else { continue };
                for kx in 0..SSIM_WINDOW {
                    let Some(xx) = (x + kx).checked_sub(r).filter(|&xx| xx < width) else { continue };
                    let w = kernel[ky] * kernel[kx];
                    let (a, b) = (u[yy * width + xx], v[yy * width + xx]);
                    wsum += w;
                    su += w * a;
                    sv += w * b;
                    suu += w * a * a;
                    svv += w * b * b;
                    suv += w * a * b;
                }
            }
            let (mu_u, mu_v) = (su / wsum, sv / wsum);
            let m = Moments {
                mu_u,
                mu_v,
                var_u: (suu / wsum - mu_u * mu_u).max(0.0),
                var_v: (svv / wsum - mu_v * mu_v).max(0.0),
                cov: suv / wsum - mu_u * mu_v,
            };
            total += ssim_from_moments(&m);
        }
    }
    total / (width * height) as f64
}

/// SSIM between two single-channel planes of `width * height` values.
pub fn ssim_planes(u: &[f64], v: &[f64], width: usize, height: usize, mode: SsimMode) -> Result<f64> {
    check_len(u, v)?;
    if u.len() != width * height {
        return Err(MetricError::SizeMismatch(format!("{} values for {width}x{height}", u.len())));
    }
    Ok(match mode {
        SsimMode::Global => ssim_from_moments(&global_moments(u, v)),
        SsimMode::Gaussian => local_ssim(u, v, width, height),
    })
}

fn luminance_plane(img: &ColorImage) -> Result<ColorImage> {
    match img.space() {
        Space::Gray => Ok(img.clone()),
        _ => Ok(luminance(img)?),
    }
}

/// SSIM on the luminance planes of two RGB (or gray) images.
pub fn ssim(u: &ColorImage, v: &ColorImage, mode: SsimMode) -> Result<f64> {
    if (u.width(), u.height()) != (v.width(), v.height()) {
        return Err(MetricError::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            u.width(),
            u.height(),
            v.width(),
            v.height()
        )));
    }
    let (lu, lv) = (luminance_plane(u)?, luminance_plane(v)?);
    ssim_planes(lu.data(), lv.data(), u.width(), u.height(), mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance of equally long feature vectors.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(MetricError::TooFewSamples(features.len()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(MetricError::SizeMismatch("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut sigma = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        sigma += &c * c.transpose();
    }
    sigma /= n - 1.0;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma })
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero, where `tol` is
/// [`PSD_TOLERANCE`] scaled by the largest eigenvalue magnitude (at least 1).
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(MetricError::SizeMismatch(format!("{}x{} is not square", a.nrows(), a.ncols())));
    }
    let asym = (a - a.transpose()).abs().max();
    let scale = a.abs().max().max(1.0);
    if asym > PSD_TOLERANCE * scale {
        return Err(MetricError::NotPsd(format!("asymmetry {asym:e}")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.abs().max().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < -PSD_TOLERANCE * lmax {
            return Err(MetricError::NotPsd(format!("eigenvalue {l:e}")));
        }
        *l = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))`.
///
/// The trace of the product root is taken from the symmetric
/// `S_r^(1/2) S_g S_r^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.dim() != g.dim() {
        return Err(MetricError::SizeMismatch(format!("dimensions {} and {}", r.dim(), g.dim())));
    }
    let mean_term = (&r.mu - &g.mu).norm_squared();
    let root_r = matrix_sqrt_psd(&r.sigma)?;
    let inner = &root_r * &g.sigma * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let d = mean_term + r.sigma.trace() + g.sigma.trace() - 2.0 * cross;
    if (-1e-8..0.0).contains(&d) {
        Ok(0.0)
    } else {
        Ok(d)
    }
}
