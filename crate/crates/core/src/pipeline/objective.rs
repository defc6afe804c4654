//! Per-strategy training loss on the graph.

use super::{LossKind, Result, Strategy};
use crate::colorspace::{convert_var, Space, WhitePoint};
use crate::losses::{lpips, mse_sum, FeatureExtractor, LpipsWeights};
use crate::tensor::{ClampGrad, Graph, Real, Var};

/// Feature extractor and layer weights of the perceptual loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptual {
    pub extractor: FeatureExtractor,
    pub weights: LpipsWeights,
}

impl Default for Perceptual {
    fn default() -> Self {
        let extractor = FeatureExtractor::default();
        let weights = LpipsWeights::for_extractor(&extractor);
        Self { extractor, weights }
    }
}

/// RGB image implied by the network output, before clipping.
///
/// `lum` is the `[N, 1, H, W]` input plane (Y, or L/100 for Lab strategies).
pub fn predicted_rgb<T: Real>(g: &mut Graph<T>, strategy: Strategy, out: Var, lum: Var) -> Result<Var> {
    let Some(space) = strategy.chroma_space() else {
        return Ok(out);
    };
    let scale = strategy.chroma_scale().expect("chroma strategy");
    let lum_scale = if space == Space::Lab { 100.0 } else { 1.0 };
    let l = g.channel_affine(lum, &[lum_scale], &[0.0])?;
    let c = g.channel_affine(out, &scale, &[0.0, 0.0])?;
    let full = g.concat_channels(l, c)?;
    Ok(convert_var(g, full, space, Space::Rgb, &WhitePoint::default())?)
}

/// Scalar training loss for one batch.
///
/// `target` is the strategy's L2 target (normalized chrominance, or RGB for
/// the RGB-loss strategies); `rgb` is the ground-truth RGB batch.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    strategy: Strategy,
    loss: LossKind,
    perceptual: &Perceptual,
    out: Var,
    lum: Var,
    target: Var,
    rgb: Var,
) -> Result<Var> {
    let to_rgb = loss == LossKind::Lpips || strategy.rgb_loss();
    let pred = if to_rgb && strategy != Strategy::Rgb {
        let p = predicted_rgb(g, strategy, out, lum)?;
        if strategy == Strategy::LabRgb {
            g.clamp01(p, ClampGrad::Interior)
        } else {
            p
        }
    } else {
        out
    };
    Ok(match loss {
        LossKind::L2 => mse_sum(g, pred, if to_rgb { rgb } else { target })?,
        LossKind::Lpips => lpips(g, pred, rgb, &perceptual.extractor, &perceptual.weights)?,
    })
}
