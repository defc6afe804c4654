//! Differentiable training objectives over `[N, C, H, W]` tensors.
//!
//! Every loss sums over the batch axis, so a batch of N identical pairs costs
//! N times one pair.

mod extractor;
mod feature_file;

pub use extractor::{
    Activation, FeatureExtractor, FeatureLayer, LpipsWeights, DEFAULT_EXTRACTOR_CHANNELS,
    DEFAULT_EXTRACTOR_SEED,
};
pub use feature_file::{FeatureFile, FeatureFileError};

use thiserror::Error;

use crate::tensor::{Graph, Real, TensorError, Var};

/// Added to feature norms before channel normalization.
pub const LPIPS_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("feature layer {layer} out of range for a {count}-layer extractor")]
    LayerOutOfRange { layer: usize, count: usize },
    #[error("{0}")]
    WeightMismatch(String),
    #[error("invalid extractor: {0}")]
    Extractor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn same_shape<T: Real>(g: &Graph<T>, u: Var, v: Var) -> Result<()> {
    let (a, b) = (g.value(u).shape(), g.value(v).shape());
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a.to_vec(), b.to_vec()))
    }
}

/// `sum (u - v)^2`.
pub fn mse_sum<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    same_shape(g, u, v)?;
    let d = g.sub(u, v)?;
    Ok(g.sum_squares(d))
}

/// `mse_sum` divided by the element count.
pub fn mse_mean<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    let n = g.value(u).numel() as f64;
    let s = mse_sum(g, u, v)?;
    Ok(g.scale(s, 1.0 / n))
}

/// `sum |u - v|` over channels and pixels.
pub fn mae<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    same_shape(g, u, v)?;
    let d = g.sub(u, v)?;
    let a = g.abs(d);
    Ok(g.sum(a))
}

/// Sum over pixels of the Euclidean norm of the channel difference.
pub fn mae_coupled<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    same_shape(g, u, v)?;
    let d = g.sub(u, v)?;
    let n = g.pixel_norm(d)?;
    Ok(g.sum(n))
}

/// `|phi_l(u) - phi_l(v)|^2 / (C_l H_l W_l)`.
pub fn feature_loss<T: Real>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    phi: &FeatureExtractor,
    layer: usize,
) -> Result<Var> {
    if layer >= phi.layer_count() {
        return Err(LossError::LayerOutOfRange { layer, count: phi.layer_count() });
    }
    same_shape(g, u, v)?;
    let fu = phi.forward(g, u)?[layer];
    let fv = phi.forward(g, v)?[layer];
    let [_, c, h, w] = g.value(fu).dims4()?;
    let s = mse_sum(g, fu, fv)?;
    Ok(g.scale(s, 1.0 / (c * h * w) as f64))
}

/// Weighted distance between channel-normalized feature stacks.
///
/// Per layer: mean over positions of `|w_l * (unit(fu) - unit(fv))|^2`; layers
/// are summed without further weighting.
pub fn lpips_from_features<T: Real>(
    g: &mut Graph<T>,
    fu: &[Var],
    fv: &[Var],
    weights: &LpipsWeights,
) -> Result<Var> {
    if fu.len() != fv.len() || fu.len() != weights.layers().len() {
        return Err(LossError::WeightMismatch(format!(
            "{} and {} feature layers for {} weight vectors",
            fu.len(),
            fv.len(),
            weights.layers().len()
        )));
    }
    let mut channels = Vec::with_capacity(fu.len());
    for &f in fu {
        channels.push(g.value(f).dims4()?[1]);
    }
    weights.check_channels(&channels)?;
    let mut total: Option<Var> = None;
    for ((&a, &b), w) in fu.iter().zip(fv).zip(weights.layers()) {
        same_shape(g, a, b)?;
        let [_, c, h, width] = g.value(a).dims4()?;
        let na = g.unit_normalize_channels(a, LPIPS_EPS)?;
        let nb = g.unit_normalize_channels(b, LPIPS_EPS)?;
        let d = g.sub(na, nb)?;
        let weighted = g.channel_affine(d, w, &vec![0.0; c])?;
        let s = g.sum_squares(weighted);
        let term = g.scale(s, 1.0 / (h * width) as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn lpips<T: Real>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    phi: &FeatureExtractor,
    weights: &LpipsWeights,
) -> Result<Var> {
    same_shape(g, u, v)?;
    let fu = phi.forward(g, u)?;
    let fv = phi.forward(g, v)?;
    lpips_from_features(g, &fu, &fv, weights)
}
