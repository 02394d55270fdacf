//! Slice-level convolution and pooling routines used by the tape.
//!
//! Convolutions are lowered to GEMM through an explicit column buffer.
//! Layouts are row-major: images are `[C, H, W]`, conv kernels are
//! `[C_out, C_in, k, k]`, transposed-conv kernels are `[C_in, C_out, k, k]`.

use crate::tensor::Real;

/// Treats subnormal floats as zero on this thread until dropped.
///
/// Saturated sigmoids late in training push gradients into the subnormal
/// range, where x86 arithmetic is many times slower.
pub(crate) struct FlushDenormals {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    saved: u32,
}

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
        #[allow(deprecated)]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // FTZ (bit 15) and DAZ (bit 6).
            // SAFETY: only the flush modes change; SSE is enabled for this target.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            Self { saved }
        }
        #[cfg(not(all(target_arch = "x86_64", target_feature = "sse")))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
        #[allow(deprecated)]
        // SAFETY: restores the mode read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution over a `channels x height x width` image.
    /// `None` when the padded image is smaller than the kernel.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the column buffer is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`, with optional
/// transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// 2x2 max pooling with stride 2; returns the flat argmax index per output
/// cell. Ties go to the first cell in row-major order.
pub(crate) fn maxpool2x2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
