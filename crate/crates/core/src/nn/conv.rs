//! Same-padding 2-D convolution, forward and backward.
//!
//! The inner product is an im2col + GEMM pair. Output spatial dims are
//! `ceil(H/stride) x ceil(W/stride)` with implicit zero padding of
//! `(k-1)/2` on each side, so stride 1 preserves the grid and stride 2
//! halves it.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Output spatial size for same-padding convolution.
pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    dim.div_ceil(stride)
}

fn check_args<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize)> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "kernel must be odd square, got {}x{}",
            ws.h, ws.w
        )));
    }
    if ws.c != xs.c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            ws.c, xs.c
        )));
    }
    if bias.shape() != Shape::new(1, ws.n, 1, 1) {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {} does not match {} output channels",
            bias.shape(),
            ws.n
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArg(format!("unsupported stride {stride}")));
    }
    if stride == 2 && (xs.h < ws.h || xs.w < ws.w) {
        return Err(Error::InvalidArg(format!(
            "stride-2 conv needs input at least {}x{}, got {}x{}",
            ws.h, ws.w, xs.h, xs.w
        )));
    }
    Ok((conv_out_dim(xs.h, stride), conv_out_dim(xs.w, stride)))
}

/// Unfold one example into a `[c*k*k, oh*ow]` row-major patch matrix.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    example: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let xs = input.shape();
    let (h, w) = (xs.h, xs.w);
    let pad = (k - 1) / 2;
    let x = input.data();
    let ohw = oh * ow;
    debug_assert_eq!(col.len(), xs.c * k * k * ohw);
    for ci in 0..xs.c {
        let chan = &x[xs.index(example, ci, 0, 0)..xs.index(example, ci, 0, 0) + h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    // valid ox range: 0 <= ox*stride + kw - pad < w
                    let off = kw as isize - pad as isize;
                    let ox_lo = if off >= 0 {
                        0
                    } else {
                        ((-off) as usize).div_ceil(stride)
                    };
                    let ox_hi = {
                        // largest ox with ox*stride + off <= w-1
                        let lim = w as isize - 1 - off;
                        if lim < 0 {
                            0
                        } else {
                            (lim as usize / stride + 1).min(ow)
                        }
                    };
                    dst[..ox_lo.min(ow)].fill(T::zero());
                    if ox_hi < ow {
                        dst[ox_hi..].fill(T::zero());
                    }
                    if stride == 1 {
                        let lo = ox_lo.min(ow);
                        let hi = ox_hi.max(lo);
                        let src0 = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src_row[src0..src0 + (hi - lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src_row[(ox as isize * stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a `[c*k*k, oh*ow]` patch matrix back, accumulating into one example.
fn col2im_accumulate<T: Scalar>(
    col: &[T],
    out: &mut Tensor<T>,
    example: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let xs = out.shape();
    let (h, w) = (xs.h, xs.w);
    let pad = (k - 1) / 2;
    let ohw = oh * ow;
    for ci in 0..xs.c {
        let base = xs.index(example, ci, 0, 0);
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let off = kw as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = ox as isize * stride as isize + off;
                        if ix >= 0 && ix < w as isize {
                            out.data_mut()[base + iy as usize * w + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `out[n,co] = bias[co] + sum w[co,ci,kh,kw] * x[...]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_args(input, weight, bias, stride)?;
    let xs = input.shape();
    let ws = weight.shape();
    let (co, k) = (ws.n, ws.h);
    let ckk = xs.c * k * k;
    let ohw = oh * ow;
    let mut out = Tensor::zeros(Shape::new(xs.n, co, oh, ow));
    let mut col = vec![T::zero(); ckk * ohw];
    for n in 0..xs.n {
        im2col(input, n, k, stride, oh, ow, &mut col);
        let dst = &mut out.data_mut()[n * co * ohw..(n + 1) * co * ohw];
        crate::tensor::gemm_rm(co, ckk, ohw, weight.data(), &col, T::zero(), dst);
        for c in 0..co {
            let b = bias.data()[c];
            for v in &mut dst[c * ohw..(c + 1) * ohw] {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Gradients of the convolution w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xs = input.shape();
    let ws = weight.shape();
    let (co, k) = (ws.n, ws.h);
    let (oh, ow) = (conv_out_dim(xs.h, stride), conv_out_dim(xs.w, stride));
    let gs = grad_out.shape();
    if gs != Shape::new(xs.n, co, oh, ow) {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {} does not match conv output ({},{},{},{})",
            gs, xs.n, co, oh, ow
        )));
    }
    let ckk = xs.c * k * k;
    let ohw = oh * ow;

    let mut grad_input = Tensor::zeros(xs);
    let mut grad_weight = Tensor::zeros(ws);
    let mut grad_bias = Tensor::zeros(Shape::new(1, co, 1, 1));

    let mut col = vec![T::zero(); ckk * ohw];
    let mut grad_col = vec![T::zero(); ckk * ohw];
    for n in 0..xs.n {
        let g = &grad_out.data()[n * co * ohw..(n + 1) * co * ohw];

        // bias: sum over spatial positions
        for c in 0..co {
            let mut acc = T::zero();
            for &v in &g[c * ohw..(c + 1) * ohw] {
                acc += v;
            }
            grad_bias.data_mut()[c] += acc;
        }

        // weight: G [co, ohw] x col^T [ohw, ckk], accumulated across examples
        im2col(input, n, k, stride, oh, ow, &mut col);
        T::gemm(
            co,
            ohw,
            ckk,
            T::one(),
            g,
            ohw as isize,
            1,
            &col,
            1,
            ohw as isize,
            T::one(),
            grad_weight.data_mut(),
            ckk as isize,
            1,
        );

        // input: W^T [ckk, co] x G [co, ohw] -> grad_col, folded back
        T::gemm(
            ckk,
            co,
            ohw,
            T::one(),
            weight.data(),
            1,
            ckk as isize,
            g,
            ohw as isize,
            1,
            T::zero(),
            &mut grad_col,
            ohw as isize,
            1,
        );
        col2im_accumulate(&grad_col, &mut grad_input, n, k, stride, oh, ow);
    }
    Ok((grad_input, grad_weight, grad_bias))
}
