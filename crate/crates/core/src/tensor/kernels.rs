//! Convolution and matrix-product kernels.
//!
//! Convolutions lower to im2col + GEMM per image. Accumulation happens in
//! `f64` and results are rounded to `f32` once at the end.

use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`.
///
/// `a` and `b` are addressed through explicit (row, column) strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
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

/// Geometry of a 2-D convolution mapping `[B, in_c, in_h, in_w]` to
/// `[B, out_c, out_h, out_w]` with an `[out_c, in_c, k, k]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn conv_out_len(axis: &str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv2d",
            format!("{axis}: padded extent {padded} smaller than kernel {k}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("{axis}: ({len} + 2*{pad} - {k}) not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    /// Geometry of `conv2d(input, weight)`.
    pub fn conv(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_c, in_h, in_w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be [B,C,H,W], got {input:?}"))),
        };
        let (out_c, wc, kh, kw) = match *weight {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("weight must be [O,C,k,k], got {weight:?}"))),
        };
        if kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", format!("kernel axes {kh}x{kw} must be square and non-empty")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if wc != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis (dim 1) is {in_c} but weight channel axis (dim 1) is {wc}"),
            ));
        }
        let out_h = conv_out_len("height (dim 2)", in_h, kh, stride, pad)?;
        let out_w = conv_out_len("width (dim 3)", in_w, kw, stride, pad)?;
        Ok(ConvGeom { batch, in_c, in_h, in_w, out_c, k: kh, stride, pad, out_h, out_w })
    }

    /// Geometry of the convolution whose adjoint is
    /// `conv2d_transpose(input, weight)`: its *output* is the transpose's input.
    pub fn transpose(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c, h, w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("conv2d_transpose", format!("input must be [B,C,H,W], got {input:?}"))),
        };
        let (wo, wc, kh, kw) = match *weight {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::shape("conv2d_transpose", format!("weight must be [I,O,k,k], got {weight:?}"))),
        };
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::shape("conv2d_transpose", "kernel must be square, stride >= 1"));
        }
        if wo != c {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input channel axis (dim 1) is {c} but weight axis 0 is {wo}"),
            ));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h < 2 * pad + 1 || full_w < 2 * pad + 1 {
            return Err(Error::shape("conv2d_transpose", format!("padding {pad} removes the whole output")));
        }
        Ok(ConvGeom {
            batch,
            in_c: wc,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_c: c,
            k: kh,
            stride,
            pad,
            out_h: h,
            out_w: w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Unfolds one `[in_c, in_h, in_w]` image into `[in_c*k*k, out_h*out_w]`.
    fn im2col(&self, img: &[f32], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_c {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize] as f64
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds `[in_c*k*k, out_h*out_w]` columns back, accumulating into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_c {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Sums per-image partial results in image order.
fn reduce_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::conv(input.shape(), weight.shape(), stride, pad)?;
    let w = to_f64(weight.data());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0f32; g.batch * g.out_plane()];
    exec::for_each_chunk_mut(&mut out, g.out_plane().max(1), |b, dst| {
        let img = &input.data()[b * g.in_plane()..(b + 1) * g.in_plane()];
        let mut cols = vec![0.0f64; rows * ncols];
        g.im2col(img, &mut cols);
        let mut acc = vec![0.0f64; g.out_plane()];
        gemm(g.out_c, rows, ncols, &w, (rows, 1), &cols, (ncols, 1), 0.0, &mut acc);
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Tensor::new([g.batch, g.out_c, g.out_h, g.out_w], out)
}

/// Gradients of `conv2d` with respect to input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Vec<f32>>, Vec<f32>)> {
    let g = ConvGeom::conv(input.shape(), weight.shape(), stride, pad)?;
    let w = to_f64(weight.data());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let parts = exec::map_indexed(g.batch, |b| {
        let img = &input.data()[b * g.in_plane()..(b + 1) * g.in_plane()];
        let gy = to_f64(&grad_out[b * g.out_plane()..(b + 1) * g.out_plane()]);
        let mut cols = vec![0.0f64; rows * ncols];
        g.im2col(img, &mut cols);
        let mut dw = vec![0.0f64; g.out_c * rows];
        // dW = gy [O, N] * cols^T [N, R]
        gemm(g.out_c, ncols, rows, &gy, (ncols, 1), &cols, (1, ncols), 0.0, &mut dw);
        let dx = want_input.then(|| {
            // dcols = W^T [R, O] * gy [O, N]
            gemm(rows, g.out_c, ncols, &w, (1, rows), &gy, (ncols, 1), 0.0, &mut cols);
            let mut dx = vec![0.0f64; g.in_plane()];
            g.col2im(&cols, &mut dx);
            dx.into_iter().map(|v| v as f32).collect::<Vec<f32>>()
        });
        (dx, dw)
    });
    let mut dws = Vec::with_capacity(parts.len());
    let mut dx_all = want_input.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    for (dx, dw) in parts {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    Ok((dx_all, reduce_in_order(dws, g.out_c * rows)))
}

/// Transposed convolution: the adjoint of `conv2d` in its input argument.
/// `weight` is `[in_channels, out_channels, k, k]` from this op's point of view.
pub fn conv2d_transpose_forward(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::transpose(input.shape(), weight.shape(), stride, pad)?;
    let w = to_f64(weight.data());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0f32; g.batch * g.in_plane()];
    exec::for_each_chunk_mut(&mut out, g.in_plane().max(1), |b, dst| {
        let y = to_f64(&input.data()[b * g.out_plane()..(b + 1) * g.out_plane()]);
        let mut cols = vec![0.0f64; rows * ncols];
        gemm(rows, g.out_c, ncols, &w, (1, rows), &y, (ncols, 1), 0.0, &mut cols);
        let mut img = vec![0.0f64; g.in_plane()];
        g.col2im(&cols, &mut img);
        for (d, v) in dst.iter_mut().zip(img) {
            *d = v as f32;
        }
    });
    Tensor::new([g.batch, g.in_c, g.in_h, g.in_w], out)
}

pub fn conv2d_transpose_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Vec<f32>>, Vec<f32>)> {
    let g = ConvGeom::transpose(input.shape(), weight.shape(), stride, pad)?;
    let w = to_f64(weight.data());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let parts = exec::map_indexed(g.batch, |b| {
        let y = to_f64(&input.data()[b * g.out_plane()..(b + 1) * g.out_plane()]);
        let mut cols = vec![0.0f64; rows * ncols];
        g.im2col(&grad_out[b * g.in_plane()..(b + 1) * g.in_plane()], &mut cols);
        let mut dw = vec![0.0f64; g.out_c * rows];
        gemm(g.out_c, ncols, rows, &y, (ncols, 1), &cols, (1, ncols), 0.0, &mut dw);
        let dy = want_input.then(|| {
            let mut dy = vec![0.0f64; g.out_plane()];
            gemm(g.out_c, rows, ncols, &w, (rows, 1), &cols, (ncols, 1), 0.0, &mut dy);
            dy.into_iter().map(|v| v as f32).collect::<Vec<f32>>()
        });
        (dy, dw)
    });
    let mut dws = Vec::with_capacity(parts.len());
    let mut dy_all = want_input.then(|| Vec::with_capacity(g.batch * g.out_plane()));
    for (dy, dw) in parts {
        dws.push(dw);
        if let (Some(all), Some(dy)) = (dy_all.as_mut(), dy) {
            all.extend(dy);
        }
    }
    Ok((dy_all, reduce_in_order(dws, g.out_c * rows)))
}

/// `[B, in] x [in, out] -> [B, out]`.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, n_in, n_out) = matmul_dims(x, w)?;
    let xd = to_f64(x.data());
    let wd = to_f64(w.data());
    let mut acc = vec![0.0f64; b * n_out];
    gemm(b, n_in, n_out, &xd, (n_in, 1), &wd, (n_out, 1), 0.0, &mut acc);
    Tensor::new([b, n_out], acc.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn matmul_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        (&[b, i], &[wi, o]) if i == wi => Ok((b, i, o)),
        (xs, ws) => Err(Error::shape(
            "dense",
            format!("input {xs:?} (dim 1) incompatible with weight {ws:?} (dim 0)"),
        )),
    }
}

/// Gradients of `matmul` with respect to `x` and `w`.
pub fn matmul_backward(x: &Tensor, w: &Tensor, grad_out: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, n_in, n_out) = matmul_dims(x, w)?;
    let xd = to_f64(x.data());
    let wd = to_f64(w.data());
    let gy = to_f64(grad_out);
    let mut dx = vec![0.0f64; b * n_in];
    gemm(b, n_out, n_in, &gy, (n_out, 1), &wd, (1, n_out), 0.0, &mut dx);
    let mut dw = vec![0.0f64; n_in * n_out];
    gemm(n_in, b, n_out, &xd, (1, n_in), &gy, (n_out, 1), 0.0, &mut dw);
    Ok((
        dx.into_iter().map(|v| v as f32).collect(),
        dw.into_iter().map(|v| v as f32).collect(),
    ))
}
