//! Slice-level compute kernels behind the graph operators.
//!
//! Everything here works on a single image (`C×H×W` planes, row-major) so
//! batch loops stay in the graph layer.

use super::scalar::{matmul, Float};

/// Sliding-window geometry shared by convolution, its transpose and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input` (`C×H×W`) into `col` (`C·kh·kw × Ho·Wo`).
pub fn im2col<T: Float>(input: &[T], win: &Window, col: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w) = (win.height as isize, win.width as isize);
    let pad = win.pad as isize;
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &input[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `out` (`C×H×W`).
pub fn col2im<T: Float>(col: &[T], win: &Window, out: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w) = (win.height as isize, win.width as isize);
    let pad = win.pad as isize;
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &mut out[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution of one image. `weight` is `O×(C·kh·kw)`, `out` is `O×Ho·Wo`.
pub fn conv_forward<T: Float>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    win: &Window,
    out_channels: usize,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let (k, n) = (win.col_rows(), win.col_cols());
    let col: &[T] = if win.is_pointwise() {
        input
    } else {
        scratch.resize(k * n, T::zero());
        im2col(input, win, scratch);
        scratch
    };
    matmul(out_channels, k, n, weight, false, col, false, out, false);
    if let Some(bias) = bias {
        for (o, &b) in bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Backward convolution of one image; accumulates into `grad_input` / `grad_weight`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Float>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    win: &Window,
    out_channels: usize,
    scratch: &mut Vec<T>,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
) {
    let (k, n) = (win.col_rows(), win.col_cols());
    if let Some(gw) = grad_weight {
        let col: &[T] = if win.is_pointwise() {
            input
        } else {
            scratch.resize(k * n, T::zero());
            im2col(input, win, scratch);
            scratch
        };
        matmul(out_channels, n, k, grad_out, false, col, true, gw, true);
    }
    if let Some(gi) = grad_input {
        if win.is_pointwise() {
            matmul(k, out_channels, n, weight, true, grad_out, false, gi, true);
        } else {
            scratch.resize(k * n, T::zero());
            matmul(k, out_channels, n, weight, true, grad_out, false, scratch, false);
            col2im(scratch, win, gi);
        }
    }
}

/// Output extent of a transposed convolution.
pub fn deconv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Average pooling of one `C×H×W` image without padding.
pub fn avgpool_forward<T: Float>(input: &[T], win: &Window, out: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let norm = T::from_usize(win.kernel_h * win.kernel_w).unwrap().recip();
    for c in 0..win.channels {
        let plane = &input[c * win.height * win.width..];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..win.kernel_h {
                    let row = &plane[(oy * win.stride + ky) * win.width + ox * win.stride..];
                    for &v in &row[..win.kernel_w] {
                        acc += v;
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
}

pub fn avgpool_backward<T: Float>(grad_out: &[T], win: &Window, grad_in: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let norm = T::from_usize(win.kernel_h * win.kernel_w).unwrap().recip();
    for c in 0..win.channels {
        let plane = &mut grad_in[c * win.height * win.width..];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(c * oh + oy) * ow + ox] * norm;
                for ky in 0..win.kernel_h {
                    let row = &mut plane[(oy * win.stride + ky) * win.width + ox * win.stride..];
                    for v in &mut row[..win.kernel_w] {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Max pooling of one image with implicit `-inf` padding; records the flat
/// input index that won each window.
pub fn maxpool_forward<T: Float>(input: &[T], win: &Window, out: &mut [T], argmax: &mut [usize]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let pad = win.pad as isize;
    for c in 0..win.channels {
        let base = c * win.height * win.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for ky in 0..win.kernel_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    for kx in 0..win.kernel_w {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix < 0 || ix >= win.width as isize {
                            continue;
                        }
                        let at = base + iy as usize * win.width + ix as usize;
                        if input[at] > best || best_at == usize::MAX {
                            best = input[at];
                            best_at = at;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_at;
            }
        }
    }
}

/// Source index of nearest-neighbour resampling: `floor(dst · src_len / dst_len)`.
pub fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len / dst_len).min(src_len - 1)
}

/// Half-pixel-centred linear interpolation taps `(i0, i1, w1)` for one axis.
pub fn linear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
    (i0, i1, w1)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `input` (with `shape`) into the axis order `perm`.
pub fn permute<T: Float>(input: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(input.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..input.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(input[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let win = Window {
            channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &win, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_taps_clamp_at_borders() {
        assert_eq!(linear_taps(0, 4, 8), (0, 1, 0.0));
        let (i0, i1, w) = linear_taps(7, 4, 8);
        assert_eq!((i0, i1, w), (3, 3, 0.0));
        let (i0, i1, w) = linear_taps(3, 4, 8);
        assert_eq!((i0, i1), (1, 2));
        assert!((w - 0.25).abs() < 1e-12);
    }

    #[test]
    fn permute_swaps_axes() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
