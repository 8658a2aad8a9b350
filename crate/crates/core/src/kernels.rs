//! Forward and backward kernels over raw row-major buffers.
//!
//! These are free of any recording machinery; [`crate::autodiff::Tape`]
//! wires them into the reverse pass.

use crate::tensor::{dims4, expect_rank, Result, TensorError};

/// Spatial padding rule for convolution and pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(window - 1) / 2`; output extent is `ceil(extent / stride)`.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    fn amount(self, window: usize) -> usize {
        match self {
            Padding::Same => (window - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

fn out_extent(op: &'static str, axis: &'static str, size: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::Invalid(format!("{op}: stride must be positive")));
    }
    if size + 2 * pad < window {
        return Err(TensorError::Dimension {
            op,
            axis,
            expected: window,
            found: size + 2 * pad,
        });
    }
    Ok((size + 2 * pad - window) / stride + 1)
}

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], bias: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", kernel, 4)?;
        let [n, c, h, w] = dims4(x);
        let [filters, kc, kh, kw] = dims4(kernel);
        if kc != c {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "channel",
                expected: kc,
                found: c,
            });
        }
        if kh != kw {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "kernel width",
                expected: kh,
                found: kw,
            });
        }
        if padding == Padding::Same && kh % 2 == 0 {
            return Err(TensorError::Invalid("conv2d: same padding needs an odd kernel".into()));
        }
        if bias != [filters] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: filters,
                found: bias.iter().product(),
            });
        }
        let pad = padding.amount(kh);
        let oh = out_extent("conv2d", "height", h, kh, stride, pad)?;
        let ow = out_extent("conv2d", "width", w, kh, stride, pad)?;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            filters,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.filters, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `(C, H, W)` into `cols` of shape `(C*k*k, OH*OW)`.
fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.plane();
    for ci in 0..g.c {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `cols` back, accumulating into `img`.
fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let plane = g.plane();
    for ci in 0..g.c {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` for row-major operands given with
/// explicit strides, so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements inside the checked slices
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with a fixed reduction order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.plane();
    let patch = g.patch();
    let img = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.filters * plane];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.n {
        im2col(&x[n * img..(n + 1) * img], g, &mut cols);
        let dst = &mut out[n * g.filters * plane..(n + 1) * g.filters * plane];
        for (f, row) in dst.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[f]);
        }
        gemm(g.filters, patch, plane, kernel, (patch, 1), &cols, (plane, 1), 1.0, dst);
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let plane = g.plane();
    let patch = g.patch();
    let img = g.c * g.h * g.w;
    if let Some(db) = dbias {
        for n in 0..g.n {
            for f in 0..g.filters {
                let s: f64 = dout[(n * g.filters + f) * plane..(n * g.filters + f + 1) * plane].iter().sum();
                db[f] += s;
            }
        }
    }
    let mut cols = vec![0.0; patch * plane];
    let mut dcols = vec![0.0; patch * plane];
    let mut dk = dkernel;
    for n in 0..g.n {
        let dplane = &dout[n * g.filters * plane..(n + 1) * g.filters * plane];
        if let Some(dk) = dk.as_deref_mut() {
            // dK (F x R) += dOut (F x P) * cols^T (P x R)
            im2col(&x[n * img..(n + 1) * img], g, &mut cols);
            gemm(g.filters, plane, patch, dplane, (plane, 1), &cols, (1, plane), 1.0, dk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols (R x P) = K^T (R x F) * dOut (F x P)
            gemm(patch, g.filters, plane, kernel, (1, patch), dplane, (plane, 1), 0.0, &mut dcols);
            col2im(&dcols, g, &mut dx[n * img..(n + 1) * img]);
        }
    }
}

/// Shape bookkeeping for a square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(op: &'static str, x: &[usize], window: usize, stride: usize, padding: Padding) -> Result<Self> {
        expect_rank(op, x, 4)?;
        if window == 0 {
            return Err(TensorError::Invalid(format!("{op}: window must be positive")));
        }
        let [n, c, h, w] = dims4(x);
        let pad = padding.amount(window);
        let oh = out_extent(op, "height", h, window, stride, pad)?;
        let ow = out_extent(op, "width", w, window, stride, pad)?;
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            window,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }

    /// Clipped input ranges `[y0, y1) x [x0, x1)` covered by output cell `(oy, ox)`.
    fn window_at(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        let y1 = (y0 + self.window as isize).min(self.h as isize);
        let x1 = (x0 + self.window as isize).min(self.w as isize);
        (y0.max(0) as usize, y1 as usize, x0.max(0) as usize, x1 as usize)
    }
}

/// Window maximum; also returns the flat input index of each winner
/// (first occurrence in row-major order on ties).
pub fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(planes * g.oh * g.ow);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_at(oy, ox);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + y0 * g.w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = base + iy * g.w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Window mean over the in-bounds positions only.
pub fn avgpool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_at(oy, ox);
                let mut s = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += x[base + iy * g.w + ix];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn avgpool_backward(dout: &[f64], g: &PoolGeom, dx: &mut [f64]) {
    let planes = g.n * g.c;
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_at(oy, ox);
                let share = dout[(p * g.oh + oy) * g.ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * g.w + ix] += share;
                    }
                }
            }
        }
    }
}
