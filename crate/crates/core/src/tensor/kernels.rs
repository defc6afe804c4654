//! Raw convolution kernels over single `[C,H,W]` images.

use super::Real;

/// Geometry of a 2D sliding window over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// A 1x1, stride 1, unpadded window is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output-position range `[lo, hi)` whose input coordinate `o*stride + k - pad` is in `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= len - 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `image` (`[C,H,W]`) into `cols` (`[C*kh*kw, Ho*Wo]`).
pub(crate) fn im2col<T: Real>(image: &[T], win: &Window, cols: &mut [T]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let plane = win.height * win.width;
    debug_assert_eq!(cols.len(), win.col_rows() * ho * wo);
    for c in 0..win.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..win.kh {
            let (oy_lo, oy_hi) = valid_range(ki, win.pad, win.stride, win.height, ho);
            for kj in 0..win.kw {
                let (ox_lo, ox_hi) = valid_range(kj, win.pad, win.stride, win.width, wo);
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * win.stride + ki - win.pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let srow = &src[iy * win.width..(iy + 1) * win.width];
                    if win.stride == 1 {
                        let ix0 = ox_lo + kj - win.pad;
                        drow[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = srow[ox * win.stride + kj - win.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `image`, accumulating overlapping contributions.
pub(crate) fn col2im<T: Real>(cols: &[T], win: &Window, image: &mut [T]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let plane = win.height * win.width;
    for c in 0..win.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..win.kh {
            let (oy_lo, oy_hi) = valid_range(ki, win.pad, win.stride, win.height, ho);
            for kj in 0..win.kw {
                let (ox_lo, ox_hi) = valid_range(kj, win.pad, win.stride, win.width, wo);
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in oy_lo..oy_hi {
                    let iy = oy * win.stride + ki - win.pad;
                    let drow = &mut dst[iy * win.width..(iy + 1) * win.width];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in ox_lo..ox_hi {
                        drow[ox * win.stride + kj - win.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(image: &[f64], win: &Window) -> Vec<f64> {
        let (ho, wo) = (win.out_height(), win.out_width());
        let mut cols = vec![0.0; win.col_rows() * ho * wo];
        for c in 0..win.channels {
            for ki in 0..win.kh {
                for kj in 0..win.kw {
                    let row = (c * win.kh + ki) * win.kw + kj;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                            let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < win.height
                                && (ix as usize) < win.width
                            {
                                cols[row * ho * wo + oy * wo + ox] = image
                                    [(c * win.height + iy as usize) * win.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive_for_assorted_geometries() {
        for &(h, w, k, s, p) in
            &[(5, 4, 3, 1, 1), (6, 6, 4, 2, 1), (7, 5, 3, 2, 0), (3, 3, 1, 1, 0), (4, 6, 2, 2, 0)]
        {
            let win = Window { channels: 2, height: h, width: w, kh: k, kw: k, stride: s, pad: p };
            let image: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; win.col_rows() * win.col_cols()];
            im2col(&image, &win, &mut cols);
            assert_eq!(cols, naive_im2col(&image, &win), "geometry {h}x{w} k{k} s{s} p{p}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let win = Window { channels: 3, height: 6, width: 6, kh: 4, kw: 4, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..3 * 36).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> =
            (0..win.col_rows() * win.col_cols()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cx = vec![0.0; y.len()];
        im2col(&x, &win, &mut cx);
        let mut ty = vec![0.0; x.len()];
        col2im(&y, &win, &mut ty);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
