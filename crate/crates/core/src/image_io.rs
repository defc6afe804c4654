//! Image files: binary PPM/PGM always, PNG behind the `png` feature.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::colorspace::{ColorImage, Space};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("cannot encode a {0} image; convert to rgb or gray first")]
    Unencodable(Space),
    #[error("{0}: unsupported image format")]
    UnsupportedFormat(PathBuf),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// File extensions recognized when scanning directories.
pub fn is_supported_extension(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm" | "pgm" | "pnm") => true,
        Some("png") => cfg!(feature = "png"),
        _ => false,
    }
}

/// Writes through a sibling temporary file renamed into place on success.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a PNM file".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| format!("bad header field at byte {start}"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing raster separator".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    Ok(Header { magic, width, height, maxval, data_start: pos + 1 })
}

/// Decodes binary P6 (to RGB) or P5 (to Gray), 8- or 16-bit.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<ColorImage, String> {
    let h = parse_header(bytes)?;
    let channels = match &h.magic {
        b"P6" => 3,
        b"P5" => 1,
        m => return Err(format!("unsupported PNM variant {}", String::from_utf8_lossy(m))),
    };
    let sample_bytes = if h.maxval > 255 { 2 } else { 1 };
    let pixels = h.width * h.height;
    let needed = pixels * channels * sample_bytes;
    let raster = &bytes[h.data_start.min(bytes.len())..];
    if raster.len() < needed {
        return Err(format!("raster truncated: need {needed} bytes, have {}", raster.len()));
    }
    let scale = h.maxval as f64;
    let mut data = vec![0.0; pixels * channels];
    for i in 0..pixels {
        for c in 0..channels {
            let k = (i * channels + c) * sample_bytes;
            let v = if sample_bytes == 2 {
                u16::from_be_bytes([raster[k], raster[k + 1]]) as usize
            } else {
                raster[k] as usize
            };
            if v > h.maxval {
                return Err(format!("sample {v} exceeds maxval {}", h.maxval));
            }
            data[c * pixels + i] = v as f64 / scale;
        }
    }
    let space = if channels == 3 { Space::Rgb } else { Space::Gray };
    ColorImage::new(space, h.width, h.height, data).map_err(|e| e.to_string())
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an RGB image as 8-bit P6 or a Gray image as 8-bit P5.
pub fn encode_pnm(image: &ColorImage) -> Result<Vec<u8>> {
    let (magic, channels) = match image.space() {
        Space::Rgb => ("P6", 3),
        Space::Gray => ("P5", 1),
        other => return Err(ImageError::Unencodable(other)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    let p = image.pixel_count();
    out.reserve(p * channels);
    for i in 0..p {
        for c in 0..channels {
            out.push(quantize(image.data()[c * p + i]));
        }
    }
    Ok(out)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<ColorImage, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let p = w * h;
    let mut data = vec![0.0; 3 * p];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * p + i] = px[c] as f64 / 255.0;
        }
    }
    ColorImage::new(Space::Rgb, w, h, data).map_err(|e| e.to_string())
}

pub fn read_image(path: &Path) -> Result<ColorImage> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io { path: path.into(), source })?;
    let decode_err = |detail: String| ImageError::Decode { path: path.into(), detail };
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(&bytes).map_err(decode_err);
    }
    #[cfg(feature = "png")]
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(&bytes).map_err(decode_err);
    }
    Err(ImageError::UnsupportedFormat(path.into()))
}

/// Reads an image and returns it as RGB, replicating a gray plane if needed.
pub fn read_rgb(path: &Path) -> Result<ColorImage> {
    let img = read_image(path)?;
    if img.space() == Space::Rgb {
        return Ok(img);
    }
    let p = img.pixel_count();
    let data = img.data().iter().cycle().take(3 * p).copied().collect();
    Ok(ColorImage::new(Space::Rgb, img.width(), img.height(), data).expect("length matches"))
}

pub fn write_image(path: &Path, image: &ColorImage) -> Result<()> {
    let bytes = encode_pnm(image)?;
    atomic_write(path, &bytes).map_err(|source| ImageError::Io { path: path.into(), source })
}
