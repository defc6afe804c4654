//! Dataset scanning, resize-and-crop preprocessing and per-strategy encoding.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PipelineError, Result, Strategy};
use crate::colorspace::{is_grayscale, luminance_px, rgb_to_lab_px, rgb_to_yuv_px, ColorImage, Space, WhitePoint};
use crate::image_io::{is_supported_extension, read_rgb, ImageError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(id, path)` sorted by path; ids are file stems.
    pub entries: Vec<(String, PathBuf)>,
    pub excluded_grayscale: usize,
    pub unreadable: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Lists the decodable color images of `dir`, dropping grayscale ones.
pub fn scan_dataset(dir: &Path, tolerance: f64) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|source| ImageError::Io { path: dir.into(), source })?;
    let mut paths: Vec<PathBuf> =
        entries.flatten().map(|e| e.path()).filter(|p| p.is_file() && is_supported_extension(p)).collect();
    paths.sort();
    let mut out = Dataset { entries: Vec::new(), excluded_grayscale: 0, unreadable: 0 };
    for path in paths {
        let img = match read_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                out.unreadable += 1;
                continue;
            }
        };
        if is_grayscale(&img, tolerance)? {
            out.excluded_grayscale += 1;
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.entries.push((id, path));
    }
    log::info!(
        "{}: {} color images, {} grayscale excluded, {} unreadable",
        dir.display(),
        out.entries.len(),
        out.excluded_grayscale,
        out.unreadable
    );
    if out.entries.is_empty() {
        return Err(PipelineError::EmptyDataset(dir.into()));
    }
    Ok(out)
}

/// Size after scaling the smaller side to `side`, the other rounded to nearest.
pub fn resized_dims(width: usize, height: usize, side: usize) -> (usize, usize) {
    let scale = |other: usize, min: usize| ((other * side) as f64 / min as f64).round().max(1.0) as usize;
    if width <= height {
        (side, scale(height, width))
    } else {
        (scale(width, height), side)
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ColorImage, width: usize, height: usize) -> Result<ColorImage> {
    let (w0, h0) = (img.width(), img.height());
    if (w0, h0) == (width, height) {
        return Ok(img.clone());
    }
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (tx, ty) = (taps(width, w0), taps(height, h0));
    let mut data = Vec::with_capacity(img.channels() * width * height);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w0 + x0] * (1.0 - fx) + plane[y0 * w0 + x1] * fx;
                let bottom = plane[y1 * w0 + x0] * (1.0 - fx) + plane[y1 * w0 + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(ColorImage::new(img.space(), width, height, data)?)
}

/// Aspect-preserving resize so that the smaller side equals `side`.
pub fn resize_to_min_side(img: &ColorImage, side: usize) -> Result<ColorImage> {
    let (w, h) = resized_dims(img.width(), img.height(), side);
    resize_bilinear(img, w, h)
}

/// Top-left corner `(x, y)` of the square crop, keyed by `(seed, index, epoch)`.
pub fn crop_offset(width: usize, height: usize, side: usize, seed: u64, index: u64, epoch: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    // 16 words per ChaCha block; each epoch starts on a fresh block
    rng.set_word_pos(u128::from(epoch) * 16);
    let x = rng.gen_range(0..=width - side);
    let y = rng.gen_range(0..=height - side);
    (x, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub offset: (usize, usize),
    /// `[1, 3, S, S]`: the luminance plane replicated.
    pub input: Tensor<f32>,
    /// `[1, C, S, S]` in the strategy's L2 loss space.
    pub target: Tensor<f32>,
    /// `[1, 3, S, S]` ground-truth RGB crop.
    pub rgb: Tensor<f32>,
    /// Chrominance values clamped into `[-1, 1]`.
    pub clamped: usize,
}

fn crop(img: &ColorImage, (ox, oy): (usize, usize), side: usize) -> Vec<f64> {
    let w = img.width();
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        let plane = img.plane(c);
        for y in oy..oy + side {
            out.extend_from_slice(&plane[y * w + ox..y * w + ox + side]);
        }
    }
    out
}

fn tensor(channels: usize, side: usize, data: impl IntoIterator<Item = f64>) -> Tensor<f32> {
    let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![1, channels, side, side], data).expect("finite sample")
}

/// Encodes an RGB image into a training sample.
///
/// The image is resized so its smaller side is `side`, then cropped to
/// `side x side` at the offset keyed by `(seed, index, epoch)`.
pub fn prepare_sample(
    img: &ColorImage,
    id: &str,
    strategy: Strategy,
    side: usize,
    seed: u64,
    index: u64,
    epoch: u64,
) -> Result<Sample> {
    let resized = resize_to_min_side(img, side)?;
    encode_resized(&resized, id, strategy, side, seed, index, epoch)
}

/// [`prepare_sample`] on an image whose smaller side is already `side`.
/// Two chrominance planes in raw units and their normalizing ranges.
type RawChroma = (Vec<f64>, [f64; 2]);

pub(crate) fn encode_resized(
    resized: &ColorImage,
    id: &str,
    strategy: Strategy,
    side: usize,
    seed: u64,
    index: u64,
    epoch: u64,
) -> Result<Sample> {
    if resized.space() != Space::Rgb {
        return Err(crate::colorspace::ColorError::WrongSpace { expected: Space::Rgb, found: resized.space() }.into());
    }
    let offset = crop_offset(resized.width(), resized.height(), side, seed, index, epoch);
    let rgb = crop(resized, offset, side);
    let p = side * side;
    let pixel = |i: usize| [rgb[i], rgb[p + i], rgb[2 * p + i]];
    let wp = WhitePoint::default();
    // (input plane, two chrominance planes in raw units)
    let (lum, chroma): (Vec<f64>, Option<RawChroma>) = match strategy {
        Strategy::Rgb => ((0..p).map(|i| luminance_px(pixel(i))).collect(), None),
        Strategy::Yuv => {
            let yuv: Vec<[f64; 3]> = (0..p).map(|i| rgb_to_yuv_px(pixel(i))).collect();
            let planes = yuv.iter().map(|v| v[1]).chain(yuv.iter().map(|v| v[2])).collect();
            (yuv.iter().map(|v| v[0]).collect(), Some((planes, strategy.chroma_scale().expect("chroma"))))
        }
        Strategy::Lab | Strategy::LabRgb => {
            let lab: Vec<[f64; 3]> = (0..p).map(|i| rgb_to_lab_px(pixel(i), &wp)).collect();
            let planes = lab.iter().map(|v| v[1]).chain(lab.iter().map(|v| v[2])).collect();
            (lab.iter().map(|v| v[0] / 100.0).collect(), Some((planes, strategy.chroma_scale().expect("chroma"))))
        }
    };
    let input = tensor(3, side, (0..3).flat_map(|_| lum.iter().map(|v| v.clamp(0.0, 1.0))));
    let mut clamped = 0;
    let target = match (&chroma, strategy.rgb_loss()) {
        (Some((planes, scale)), false) => {
            let norm = planes.iter().enumerate().map(|(i, v)| {
                let n = v / scale[i / p];
                if n.abs() > 1.0 {
                    clamped += 1;
                }
                n.clamp(-1.0, 1.0)
            });
            tensor(2, side, norm.collect::<Vec<_>>())
        }
        _ => tensor(3, side, rgb.iter().copied()),
    };
    if clamped > 0 {
        log::debug!("{id}: {clamped} chrominance values clamped to [-1, 1]");
    }
    Ok(Sample { id: id.to_string(), offset, input, target, rgb: tensor(3, side, rgb), clamped })
}

/// Samples stacked along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor<f32>,
    /// First input channel, `[N, 1, S, S]`.
    pub lum: Tensor<f32>,
    pub target: Tensor<f32>,
    pub rgb: Tensor<f32>,
}

impl Batch {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let stack = |f: fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<Tensor<f32>> = samples.iter().map(|s| f(s).clone()).collect();
            Ok(Tensor::stack_batch(&items)?)
        };
        let input = stack(|s| &s.input)?;
        let lum = input.narrow_channels(0, 1)?;
        Ok(Self { lum, target: stack(|s| &s.target)?, rgb: stack(|s| &s.rgb)?, input })
    }

    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
