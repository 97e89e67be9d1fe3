//! Raw array kernels shared by the graph ops: im2col convolution helpers,
//! nearest-neighbour upsampling, cropping and separable Gaussian filtering.

use super::Scalar;

/// Unfold one `[c, h, w]` image into a `[c·k·k, h·w]` column matrix with zero
/// "same" padding (`k` odd).
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto a `[c, h, w]` image.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// `[planes, h, w]` → `[planes, 2h, 2w]` by pixel replication.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let d = &mut dst[(y / 2) * w + xo / 2];
                *d = *d + src[y * ow + xo];
            }
        }
    }
    out
}

/// Copy the `[oh, ow]` window at (`top`, `left`) out of every `[h, w]` plane.
#[allow(clippy::too_many_arguments)]
pub fn crop<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let start = p * h * w + (top + y) * w + left;
            out.extend_from_slice(&x[start..start + ow]);
        }
    }
    out
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" correlation of an `[h, w]` plane with `taps ⊗ taps`.
/// Output is `[h − k + 1, w − k + 1]`.
pub fn filter_valid<T: Scalar>(x: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for xo in 0..ow {
            let mut s = T::zero();
            for (t, &g) in taps.iter().enumerate() {
                s = s + g * row[xo + t];
            }
            tmp[y * ow + xo] = s;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for yo in 0..oh {
        for (t, &g) in taps.iter().enumerate() {
            let src = &tmp[(yo + t) * ow..(yo + t + 1) * ow];
            let dst = &mut out[yo * ow..(yo + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + g * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: maps an `[h − k + 1, w − k + 1]` plane back to `[h, w]`.
pub fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for yo in 0..oh {
        let src = &g[yo * ow..(yo + 1) * ow];
        for (t, &tap) in taps.iter().enumerate() {
            let dst = &mut tmp[(yo + t) * ow..(yo + t + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + tap * s;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (xo, &s) in src.iter().enumerate() {
            for (t, &tap) in taps.iter().enumerate() {
                dst[xo + t] = dst[xo + t] + tap * s;
            }
        }
    }
    out
}
