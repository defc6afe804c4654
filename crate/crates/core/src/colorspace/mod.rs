//! RGB, YUV, CIE XYZ and CIE Lab conversions with analytic Jacobians.
//!
//! All conversions run on unclipped `f64` values; gamut clipping is the separate
//! [`clip_rgb`] step. No gamma linearization is applied: RGB is treated as the
//! linear space the XYZ matrix is defined for.

mod image;

pub use image::{
    assemble, assemble_unclipped, clip_rgb, convert, is_grayscale, lab_to_rgb, luminance, rgb_to_lab, rgb_to_xyz,
    rgb_to_yuv, xyz_to_rgb, yuv_to_rgb, ColorImage, GRAY_TOLERANCE,
};

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::tensor::{Graph, Real, Var};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("expected a {expected} image, got {found}")]
    WrongSpace { expected: Space, found: Space },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("jacobian requested at the Lab branch threshold: {0}")]
    SingularPoint(String),
    #[error("white point components must be strictly positive, got {0:?}")]
    InvalidWhitePoint([f64; 3]),
    #[error("unknown color space `{0}`")]
    UnknownSpace(String),
    #[error("conversion between {0} and {1} is not defined")]
    Unsupported(Space, Space),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ColorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Rgb,
    Yuv,
    Xyz,
    Lab,
    Gray,
}

impl Space {
    pub fn channels(self) -> usize {
        match self {
            Space::Gray => 1,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Rgb => "rgb",
            Space::Yuv => "yuv",
            Space::Xyz => "xyz",
            Space::Lab => "lab",
            Space::Gray => "gray",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Space {
    type Err = ColorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Space::Rgb),
            "yuv" => Ok(Space::Yuv),
            "xyz" => Ok(Space::Xyz),
            "lab" => Ok(Space::Lab),
            "gray" | "grey" | "l" => Ok(Space::Gray),
            _ => Err(ColorError::UnknownSpace(s.to_string())),
        }
    }
}

pub const YUV_MATRIX: Mat3 = [
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51498, -0.10001],
];

/// RGB to CIE XYZ.
pub const XYZ_MATRIX: Mat3 = [
    [2.769, 1.7518, 0.13],
    [1.0, 4.5907, 0.0601],
    [0.0, 0.0565, 5.5943],
];

/// Largest |U| and |V| reachable from the RGB cube; used to normalize chrominance.
pub const U_MAX: f64 = 0.436;
pub const V_MAX: f64 = 0.615;
/// Normalization range for a and b (8-bit Lab convention).
pub const AB_RANGE: f64 = 128.0;

/// `(6/29)^3`: below it `lab_f` switches to its affine branch.
pub const LAB_T0: f64 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
pub const LAB_S0: f64 = 6.0 / 29.0;
/// Distance to the branch threshold under which a Jacobian request is rejected.
pub const THRESHOLD_TOLERANCE: f64 = 1e-9;

fn invert(m: &Mat3) -> Mat3 {
    let inv = Matrix3::from_fn(|r, c| m[r][c])
        .try_inverse()
        .expect("constant conversion matrix is invertible");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
}

static YUV_INVERSE: LazyLock<Mat3> = LazyLock::new(|| invert(&YUV_MATRIX));
static XYZ_INVERSE: LazyLock<Mat3> = LazyLock::new(|| invert(&XYZ_MATRIX));

pub fn yuv_inverse() -> &'static Mat3 {
    &YUV_INVERSE
}

pub fn xyz_inverse() -> &'static Mat3 {
    &XYZ_INVERSE
}

pub fn mat_vec(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

/// CIE reference white `(Xn, Yn, Zn)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitePoint {
    pub xn: f64,
    pub yn: f64,
    pub zn: f64,
}

impl WhitePoint {
    pub fn new(xn: f64, yn: f64, zn: f64) -> Result<Self> {
        if [xn, yn, zn].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self { xn, yn, zn })
        } else {
            Err(ColorError::InvalidWhitePoint([xn, yn, zn]))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.xn, self.yn, self.zn]
    }
}

impl Default for WhitePoint {
    /// XYZ of RGB white, so that (1,1,1) maps to L=100, a=b=0.
    fn default() -> Self {
        let [xn, yn, zn] = rgb_to_xyz_px([1.0, 1.0, 1.0]);
        Self { xn, yn, zn }
    }
}

pub fn luminance_px(rgb: [f64; 3]) -> f64 {
    let m = &YUV_MATRIX;
    m[0][0] * rgb[0] + m[0][1] * rgb[1] + m[0][2] * rgb[2]
}

pub fn rgb_to_yuv_px(rgb: [f64; 3]) -> [f64; 3] {
    mat_vec(&YUV_MATRIX, rgb)
}

pub fn yuv_to_rgb_px(yuv: [f64; 3]) -> [f64; 3] {
    mat_vec(yuv_inverse(), yuv)
}

pub fn rgb_to_xyz_px(rgb: [f64; 3]) -> [f64; 3] {
    mat_vec(&XYZ_MATRIX, rgb)
}

pub fn xyz_to_rgb_px(xyz: [f64; 3]) -> [f64; 3] {
    mat_vec(xyz_inverse(), xyz)
}

pub fn lab_f(t: f64) -> f64 {
    if t > LAB_T0 {
        t.cbrt()
    } else {
        (29.0 / 6.0) * (29.0 / 6.0) * t / 3.0 + 4.0 / 29.0
    }
}

pub fn lab_f_inv(s: f64) -> f64 {
    if s > LAB_S0 {
        s * s * s
    } else {
        3.0 * LAB_S0 * LAB_S0 * (s - 4.0 / 29.0)
    }
}

fn lab_f_deriv(t: f64) -> f64 {
    if t > LAB_T0 {
        1.0 / (3.0 * t.cbrt() * t.cbrt())
    } else {
        (29.0 / 6.0) * (29.0 / 6.0) / 3.0
    }
}

fn lab_f_inv_deriv(s: f64) -> f64 {
    if s > LAB_S0 {
        3.0 * s * s
    } else {
        3.0 * LAB_S0 * LAB_S0
    }
}

pub fn xyz_to_lab_px(xyz: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let fx = lab_f(xyz[0] / wp.xn);
    let fy = lab_f(xyz[1] / wp.yn);
    let fz = lab_f(xyz[2] / wp.zn);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_arguments(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0]
}

pub fn lab_to_xyz_px(lab: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let [fx, fy, fz] = lab_arguments(lab);
    [wp.xn * lab_f_inv(fx), wp.yn * lab_f_inv(fy), wp.zn * lab_f_inv(fz)]
}

pub fn rgb_to_lab_px(rgb: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    xyz_to_lab_px(rgb_to_xyz_px(rgb), wp)
}

pub fn lab_to_rgb_px(lab: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    xyz_to_rgb_px(lab_to_xyz_px(lab, wp))
}

/// Lightness of a neutral pixel whose relative luminance is `gray` (0 -> 0, 1 -> 100).
pub fn gray_to_lightness(gray: f64) -> f64 {
    116.0 * lab_f(gray) - 16.0
}

pub fn lightness_to_gray(lightness: f64) -> f64 {
    lab_f_inv((lightness + 16.0) / 116.0)
}

fn to_rgb_px(from: Space, p: [f64; 3], wp: &WhitePoint) -> Result<[f64; 3]> {
    match from {
        Space::Rgb => Ok(p),
        Space::Yuv => Ok(yuv_to_rgb_px(p)),
        Space::Xyz => Ok(xyz_to_rgb_px(p)),
        Space::Lab => Ok(lab_to_rgb_px(p, wp)),
        Space::Gray => Err(ColorError::Unsupported(Space::Gray, Space::Rgb)),
    }
}

fn from_rgb_px(to: Space, rgb: [f64; 3], wp: &WhitePoint) -> Result<[f64; 3]> {
    match to {
        Space::Rgb => Ok(rgb),
        Space::Yuv => Ok(rgb_to_yuv_px(rgb)),
        Space::Xyz => Ok(rgb_to_xyz_px(rgb)),
        Space::Lab => Ok(rgb_to_lab_px(rgb, wp)),
        Space::Gray => Err(ColorError::Unsupported(Space::Rgb, Space::Gray)),
    }
}

/// Converts one three-channel pixel between any two of RGB, YUV, XYZ and Lab.
pub fn convert_px(from: Space, to: Space, p: [f64; 3], wp: &WhitePoint) -> Result<[f64; 3]> {
    if from == to && from != Space::Gray {
        return Ok(p);
    }
    from_rgb_px(to, to_rgb_px(from, p, wp)?, wp)
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn xyz_to_lab_jacobian(xyz: [f64; 3], wp: &WhitePoint) -> Mat3 {
    let dx = lab_f_deriv(xyz[0] / wp.xn) / wp.xn;
    let dy = lab_f_deriv(xyz[1] / wp.yn) / wp.yn;
    let dz = lab_f_deriv(xyz[2] / wp.zn) / wp.zn;
    [[0.0, 116.0 * dy, 0.0], [500.0 * dx, -500.0 * dy, 0.0], [0.0, 200.0 * dy, -200.0 * dz]]
}

fn lab_to_xyz_jacobian(lab: [f64; 3], wp: &WhitePoint) -> Mat3 {
    let [fx, fy, fz] = lab_arguments(lab);
    let gx = wp.xn * lab_f_inv_deriv(fx);
    let gy = wp.yn * lab_f_inv_deriv(fy);
    let gz = wp.zn * lab_f_inv_deriv(fz);
    [
        [gx / 116.0, gx / 500.0, 0.0],
        [gy / 116.0, 0.0, 0.0],
        [gz / 116.0, 0.0, -gz / 200.0],
    ]
}

fn jacobian_to_rgb(from: Space, p: [f64; 3], wp: &WhitePoint) -> Result<Mat3> {
    match from {
        Space::Rgb => Ok(IDENTITY),
        Space::Yuv => Ok(*yuv_inverse()),
        Space::Xyz => Ok(*xyz_inverse()),
        Space::Lab => Ok(mat_mul(xyz_inverse(), &lab_to_xyz_jacobian(p, wp))),
        Space::Gray => Err(ColorError::Unsupported(Space::Gray, Space::Rgb)),
    }
}

fn jacobian_from_rgb(to: Space, rgb: [f64; 3], wp: &WhitePoint) -> Result<Mat3> {
    match to {
        Space::Rgb => Ok(IDENTITY),
        Space::Yuv => Ok(YUV_MATRIX),
        Space::Xyz => Ok(XYZ_MATRIX),
        Space::Lab => Ok(mat_mul(&xyz_to_lab_jacobian(rgb_to_xyz_px(rgb), wp), &XYZ_MATRIX)),
        Space::Gray => Err(ColorError::Unsupported(Space::Rgb, Space::Gray)),
    }
}

/// Jacobian using the branch the forward conversion takes, even at the threshold.
pub fn jacobian_unchecked(from: Space, to: Space, p: [f64; 3], wp: &WhitePoint) -> Result<Mat3> {
    if from == to && from != Space::Gray {
        return Ok(IDENTITY);
    }
    let rgb = to_rgb_px(from, p, wp)?;
    Ok(mat_mul(&jacobian_from_rgb(to, rgb, wp)?, &jacobian_to_rgb(from, p, wp)?))
}

fn near_threshold(point: [f64; 3], threshold: f64) -> Option<f64> {
    point.into_iter().find(|v| (v - threshold).abs() < THRESHOLD_TOLERANCE)
}

/// Analytic Jacobian `d to / d from` at `p`.
///
/// Errors when a Lab leg of the conversion evaluates `lab_f` (or its inverse)
/// within [`THRESHOLD_TOLERANCE`] of its branch point, where it is only C1 in
/// one direction.
pub fn jacobian(from: Space, to: Space, p: [f64; 3], wp: &WhitePoint) -> Result<Mat3> {
    if from != to {
        if from == Space::Lab {
            if let Some(s) = near_threshold(lab_arguments(p), LAB_S0) {
                return Err(ColorError::SingularPoint(format!("f^-1 argument {s}")));
            }
        }
        if to == Space::Lab {
            let xyz = rgb_to_xyz_px(to_rgb_px(from, p, wp)?);
            let ratios = [xyz[0] / wp.xn, xyz[1] / wp.yn, xyz[2] / wp.zn];
            if let Some(t) = near_threshold(ratios, LAB_T0) {
                return Err(ColorError::SingularPoint(format!("f argument {t}")));
            }
        }
    }
    jacobian_unchecked(from, to, p, wp)
}

/// Records a per-pixel color conversion of an `[N,3,H,W]` tensor on the graph.
pub fn convert_var<T: Real>(g: &mut Graph<T>, x: Var, from: Space, to: Space, wp: &WhitePoint) -> Result<Var> {
    if from == Space::Gray || to == Space::Gray {
        return Err(ColorError::Unsupported(from, to));
    }
    let wp = *wp;
    Ok(g.pixel_map3(x, move |p| {
        let y = convert_px(from, to, p, &wp).expect("three-channel spaces");
        let j = jacobian_unchecked(from, to, p, &wp).expect("three-channel spaces");
        (y, j)
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_matrices_are_inverses() {
        for (m, inv) in [(&YUV_MATRIX, yuv_inverse()), (&XYZ_MATRIX, xyz_inverse())] {
            let p = mat_mul(m, inv);
            for (r, row) in p.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lab_f_endpoints_and_continuity() {
        assert_eq!(lab_f(1.0), 1.0);
        assert!((lab_f(0.0) - 4.0 / 29.0).abs() < 1e-15);
        assert!((lab_f(LAB_T0) - LAB_S0).abs() < 1e-15);
        assert!((LAB_T0.cbrt() - LAB_S0).abs() < 1e-15);
        assert!((lab_f_inv(LAB_S0) - LAB_T0).abs() < 1e-15);
    }

    #[test]
    fn lab_f_inverse_round_trip() {
        for t in [1e-4, 0.008, 0.5, 1.0] {
            assert!((lab_f_inv(lab_f(t)) - t).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn space_names_parse() {
        for s in [Space::Rgb, Space::Yuv, Space::Xyz, Space::Lab, Space::Gray] {
            assert_eq!(s.name().parse::<Space>().unwrap(), s);
        }
        assert!(matches!("hsv".parse::<Space>(), Err(ColorError::UnknownSpace(_))));
    }

    #[test]
    fn white_point_must_be_positive() {
        assert!(WhitePoint::new(1.0, 0.0, 1.0).is_err());
        let wp = WhitePoint::default();
        assert!((wp.xn - 4.6508).abs() < 1e-12);
        assert!((wp.yn - 5.6508).abs() < 1e-12);
        assert!((wp.zn - 5.6508).abs() < 1e-12);
    }

    #[test]
    fn lab_jacobian_rejects_threshold_points() {
        let wp = WhitePoint::default();
        // gray with Y/Yn exactly at the threshold
        let g = LAB_T0;
        assert!(matches!(
            jacobian(Space::Rgb, Space::Lab, [g, g, g], &wp),
            Err(ColorError::SingularPoint(_))
        ));
        let lab = [116.0 * LAB_S0 - 16.0, 0.0, 0.0];
        assert!(matches!(
            jacobian(Space::Lab, Space::Rgb, lab, &wp),
            Err(ColorError::SingularPoint(_))
        ));
        assert!(jacobian(Space::Rgb, Space::Yuv, [g, g, g], &wp).is_ok());
    }
}
