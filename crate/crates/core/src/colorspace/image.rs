//! Planar `f64` images tagged with their color space.

use super::{
    convert_px, gray_to_lightness, luminance_px, ColorError, Result, Space, WhitePoint, AB_RANGE,
    U_MAX, V_MAX,
};

/// Planar image, channel-major: `data[c * height * width + y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    space: Space,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ColorImage {
    pub fn new(space: Space, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ColorError::Dimension(format!("empty image {width}x{height}")));
        }
        let expected = space.channels() * width * height;
        if data.len() != expected {
            return Err(ColorError::Dimension(format!(
                "{space} image {width}x{height} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { space, width, height, data })
    }

    pub fn filled(space: Space, width: usize, height: usize, value: [f64; 3]) -> Result<Self> {
        let plane = width * height;
        let data = (0..space.channels()).flat_map(|c| std::iter::repeat_n(value[c], plane)).collect();
        Self::new(space, width, height, data)
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.pixel_count();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        let p = self.pixel_count();
        match self.space {
            Space::Gray => [self.data[i]; 3],
            _ => [self.data[i], self.data[p + i], self.data[2 * p + i]],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub(crate) fn expect_space(&self, expected: Space) -> Result<()> {
        if self.space == expected {
            Ok(())
        } else {
            Err(ColorError::WrongSpace { expected, found: self.space })
        }
    }

    /// Applies `f` to every pixel of a three-channel image.
    pub fn map_pixels(&self, space: Space, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Self> {
        if self.channels() != 3 || space.channels() != 3 {
            return Err(ColorError::Unsupported(self.space, space));
        }
        let p = self.pixel_count();
        let mut out = vec![0.0; 3 * p];
        for i in 0..p {
            let q = f(self.pixel(i));
            out[i] = q[0];
            out[p + i] = q[1];
            out[2 * p + i] = q[2];
        }
        Self::new(space, self.width, self.height, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Converts between RGB, YUV, XYZ and Lab without clipping.
pub fn convert(image: &ColorImage, to: Space, wp: &WhitePoint) -> Result<ColorImage> {
    let from = image.space();
    if from == to {
        return Ok(image.clone());
    }
    image.map_pixels(to, |p| convert_px(from, to, p, wp).expect("three-channel spaces"))
}

fn tagged(image: &ColorImage, from: Space, to: Space, wp: &WhitePoint) -> Result<ColorImage> {
    image.expect_space(from)?;
    convert(image, to, wp)
}

pub fn rgb_to_yuv(image: &ColorImage) -> Result<ColorImage> {
    tagged(image, Space::Rgb, Space::Yuv, &WhitePoint::default())
}

pub fn yuv_to_rgb(image: &ColorImage) -> Result<ColorImage> {
    tagged(image, Space::Yuv, Space::Rgb, &WhitePoint::default())
}

pub fn rgb_to_xyz(image: &ColorImage) -> Result<ColorImage> {
    tagged(image, Space::Rgb, Space::Xyz, &WhitePoint::default())
}

pub fn xyz_to_rgb(image: &ColorImage) -> Result<ColorImage> {
    tagged(image, Space::Xyz, Space::Rgb, &WhitePoint::default())
}

pub fn rgb_to_lab(image: &ColorImage, wp: &WhitePoint) -> Result<ColorImage> {
    let lab = tagged(image, Space::Rgb, Space::Lab, wp)?;
    let p = lab.pixel_count();
    let outside = lab.data()[p..].iter().filter(|v| v.abs() > AB_RANGE).count();
    if outside > 0 {
        log::warn!("{outside} a/b values outside +-{AB_RANGE}");
    }
    Ok(lab)
}

pub fn lab_to_rgb(image: &ColorImage, wp: &WhitePoint) -> Result<ColorImage> {
    tagged(image, Space::Lab, Space::Rgb, wp)
}

/// Luminance plane of an RGB image.
pub fn luminance(image: &ColorImage) -> Result<ColorImage> {
    image.expect_space(Space::Rgb)?;
    let data = (0..image.pixel_count()).map(|i| luminance_px(image.pixel(i))).collect();
    ColorImage::new(Space::Gray, image.width(), image.height(), data)
}

/// Clips every RGB channel to `[0, 1]`.
pub fn clip_rgb(image: &ColorImage) -> Result<ColorImage> {
    image.expect_space(Space::Rgb)?;
    let data = image.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ColorImage::new(Space::Rgb, image.width(), image.height(), data)
}

/// Combines a gray plane with two normalized chrominance planes into a
/// clipped RGB image.
pub fn assemble(gray: &ColorImage, chroma: &[f64], space: Space, wp: &WhitePoint) -> Result<ColorImage> {
    clip_rgb(&assemble_unclipped(gray, chroma, space, wp)?)
}

/// [`assemble`] before gamut clipping.
///
/// `chroma` is planar `[2, H, W]` in network units: `(U/U_MAX, V/V_MAX)` for
/// YUV, `(a, b) / AB_RANGE` for Lab. The gray plane is relative luminance;
/// for Lab it becomes lightness through `116 f(g) - 16`.
pub fn assemble_unclipped(gray: &ColorImage, chroma: &[f64], space: Space, wp: &WhitePoint) -> Result<ColorImage> {
    gray.expect_space(Space::Gray)?;
    let p = gray.pixel_count();
    if chroma.len() != 2 * p {
        return Err(ColorError::Dimension(format!(
            "chroma needs {} values for {}x{}, got {}",
            2 * p,
            gray.width(),
            gray.height(),
            chroma.len()
        )));
    }
    let (to_first, to_second, lum): (f64, f64, fn(f64) -> f64) = match space {
        Space::Yuv => (U_MAX, V_MAX, |g| g),
        Space::Lab => (AB_RANGE, AB_RANGE, gray_to_lightness),
        other => return Err(ColorError::Unsupported(other, Space::Rgb)),
    };
    let mut out = vec![0.0; 3 * p];
    for i in 0..p {
        let px = [lum(gray.data()[i]), chroma[i] * to_first, chroma[p + i] * to_second];
        let rgb = convert_px(space, Space::Rgb, px, wp)?;
        out[i] = rgb[0];
        out[p + i] = rgb[1];
        out[2 * p + i] = rgb[2];
    }
    ColorImage::new(Space::Rgb, gray.width(), gray.height(), out)
}

/// Default channel-spread tolerance for grayscale detection on 8-bit sources.
pub const GRAY_TOLERANCE: f64 = 2.0 / 255.0;

/// True when the image carries no chrominance beyond `tolerance`.
///
/// Gray images always qualify; RGB images qualify when every pixel's channels
/// agree to within `tolerance`.
pub fn is_grayscale(image: &ColorImage, tolerance: f64) -> Result<bool> {
    match image.space() {
        Space::Gray => Ok(true),
        Space::Rgb => Ok((0..image.pixel_count()).all(|i| {
            let [r, g, b] = image.pixel(i);
            r.max(g).max(b) - r.min(g).min(b) <= tolerance
        })),
        found => Err(ColorError::WrongSpace { expected: Space::Rgb, found }),
    }
}
