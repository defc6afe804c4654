//! Storage of non-RGB images in 8-bit RGB files.
//!
//! Each channel's nominal range is mapped affinely onto `[0, 1]`, so a YUV,
//! XYZ or Lab image can be written and read back as an ordinary PPM.

use chromabench::colorspace::{ColorImage, Result, Space, WhitePoint, AB_RANGE, U_MAX, V_MAX};

/// Nominal `(low, high)` value range of each channel.
pub fn channel_ranges(space: Space, wp: &WhitePoint) -> [(f64, f64); 3] {
    match space {
        Space::Yuv => [(0.0, 1.0), (-U_MAX, U_MAX), (-V_MAX, V_MAX)],
        Space::Lab => [(0.0, 100.0), (-AB_RANGE, AB_RANGE), (-AB_RANGE, AB_RANGE)],
        Space::Xyz => wp.as_array().map(|w| (0.0, w)),
        Space::Rgb | Space::Gray => [(0.0, 1.0); 3],
    }
}

/// Maps channel values onto `[0, 1]` in an RGB-tagged image.
pub fn to_file(image: &ColorImage, wp: &WhitePoint) -> Result<ColorImage> {
    if image.space() == Space::Rgb {
        return Ok(image.clone());
    }
    let r = channel_ranges(image.space(), wp);
    image.map_pixels(Space::Rgb, |p| [0, 1, 2].map(|c| (p[c] - r[c].0) / (r[c].1 - r[c].0)))
}

/// Inverse of [`to_file`]: reads an RGB-tagged image as `space` values.
pub fn from_file(image: &ColorImage, space: Space, wp: &WhitePoint) -> Result<ColorImage> {
    if space == Space::Rgb {
        return Ok(image.clone());
    }
    let r = channel_ranges(space, wp);
    image.map_pixels(space, |p| [0, 1, 2].map(|c| r[c].0 + p[c] * (r[c].1 - r[c].0)))
}
