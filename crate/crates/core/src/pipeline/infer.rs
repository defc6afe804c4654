//! Colorization at the original resolution.

use super::{PipelineError, Result, Strategy};
use crate::colorspace::{assemble_unclipped, clip_rgb, gray_to_lightness, ColorImage, Space, WhitePoint};
use crate::tensor::Tensor;
use crate::unet::{UNetWeights, SIZE_MULTIPLE};

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends a `width x height` plane to the right and bottom by reflection.
pub fn reflect_pad(plane: &[f64], width: usize, height: usize, new_width: usize, new_height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(new_width * new_height);
    for y in 0..new_height {
        let row = &plane[reflect(y, height) * width..][..width];
        out.extend((0..new_width).map(|x| row[reflect(x, width)]));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Colorized {
    /// Final image inside the RGB cube.
    pub rgb: ColorImage,
    /// The same image before gamut clipping.
    pub unclipped: ColorImage,
}

/// Colorizes a gray image with eval-mode weights.
///
/// The gray plane is relative luminance in `[0, 1]`. Chrominance predictions
/// are assembled with the unmodified gray plane, so only chrominance passes
/// through the network.
pub fn colorize(w: &UNetWeights, strategy: Strategy, gray: &ColorImage) -> Result<Colorized> {
    if gray.space() != Space::Gray {
        return Err(crate::colorspace::ColorError::WrongSpace { expected: Space::Gray, found: gray.space() }.into());
    }
    if w.config().out_channels != strategy.out_channels() {
        return Err(PipelineError::Config(format!(
            "strategy {strategy} needs {} output channels, network has {}",
            strategy.out_channels(),
            w.config().out_channels
        )));
    }
    let (width, height) = (gray.width(), gray.height());
    let up = |n: usize| n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let (pw, ph) = (up(width), up(height));
    let lum: Vec<f64> = match strategy.chroma_space() {
        Some(Space::Lab) => gray.data().iter().map(|&g| gray_to_lightness(g) / 100.0).collect(),
        _ => gray.data().to_vec(),
    };
    let padded = reflect_pad(&lum, width, height, pw, ph);
    let input: Vec<f32> = (0..3).flat_map(|_| padded.iter().map(|&v| v as f32)).collect();
    let x = Tensor::new(vec![1, 3, ph, pw], input)?;
    let out = w.infer(&x)?;
    let c = strategy.out_channels();
    let mut cropped = Vec::with_capacity(c * width * height);
    for ch in 0..c {
        let plane = &out.data()[ch * pw * ph..(ch + 1) * pw * ph];
        for y in 0..height {
            cropped.extend(plane[y * pw..y * pw + width].iter().map(|&v| f64::from(v)));
        }
    }
    let unclipped = match strategy.chroma_space() {
        None => ColorImage::new(Space::Rgb, width, height, cropped)?,
        Some(space) => assemble_unclipped(gray, &cropped, space, &WhitePoint::default())?,
    };
    Ok(Colorized { rgb: clip_rgb(&unclipped)?, unclipped })
}
