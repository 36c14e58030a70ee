//! Convolution and resampling kernels backing the graph ops.
//!
//! Convolution materializes the padded input, lowers each sample to a column
//! matrix, and runs single-threaded GEMMs. Everything here is deterministic:
//! fixed loop order, no threading inside an op.

use super::graph::PadMode;
use super::Tensor;
use crate::error::{Error, Result};

/// `c[m,n] = a[m,k] . b[k,n] + beta * c`, all row-major.
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] = a[m,k] . b^T` where `bt` is the row-major `[n,k]` matrix.
fn sgemm_bt(m: usize, k: usize, n: usize, a: &[f32], bt: &[f32], beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(bt.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            bt.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] = a^T . b + beta * c` where `at` is the row-major `[k,m]` matrix.
fn sgemm_at(m: usize, k: usize, n: usize, at: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    assert_eq!(at.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            at.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, kci, kh, kw) = kernel.dims4()?;
    if kci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: input.shape().to_vec(),
            got: kernel.shape().to_vec(),
        });
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if kh > hp || kw > wp {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![n, ci, hp, wp],
            got: kernel.shape().to_vec(),
        });
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    Ok(ConvDims {
        n,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        pad,
        hp,
        wp,
        ho,
        wo,
    })
}

/// Materialize one padded sample plane-by-plane.
fn pad_sample(input: &[f32], d: &ConvDims, mode: PadMode, out: &mut [f32]) {
    debug_assert_eq!(out.len(), d.ci * d.hp * d.wp);
    if d.pad == 0 {
        out.copy_from_slice(input);
        return;
    }
    let p = d.pad as isize;
    for ci in 0..d.ci {
        let src = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        let dst = &mut out[ci * d.hp * d.wp..(ci + 1) * d.hp * d.wp];
        for yp in 0..d.hp {
            for xp in 0..d.wp {
                let ys = yp as isize - p;
                let xs = xp as isize - p;
                dst[yp * d.wp + xp] = match mode {
                    PadMode::Zero => {
                        if ys >= 0 && ys < d.h as isize && xs >= 0 && xs < d.w as isize {
                            src[ys as usize * d.w + xs as usize]
                        } else {
                            0.0
                        }
                    }
                    PadMode::Replicate => {
                        let yc = ys.clamp(0, d.h as isize - 1) as usize;
                        let xc = xs.clamp(0, d.w as isize - 1) as usize;
                        src[yc * d.w + xc]
                    }
                };
            }
        }
    }
}

/// Lower one padded sample into the `[ci*kh*kw, ho*wo]` column matrix.
fn im2col(padded: &[f32], d: &ConvDims, col: &mut [f32]) {
    debug_assert_eq!(col.len(), d.ci * d.kh * d.kw * d.ho * d.wo);
    let owo = d.ho * d.wo;
    let mut row = 0usize;
    for ci in 0..d.ci {
        let plane = &padded[ci * d.hp * d.wp..(ci + 1) * d.hp * d.wp];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst = &mut col[row * owo..(row + 1) * owo];
                let mut idx = 0usize;
                for oy in 0..d.ho {
                    let y = oy * d.stride + ky;
                    let base = y * d.wp + kx;
                    for ox in 0..d.wo {
                        dst[idx] = plane[base + ox * d.stride];
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter the column gradient back onto the padded sample gradient.
fn col2im_accumulate(col: &[f32], d: &ConvDims, padded_grad: &mut [f32]) {
    let owo = d.ho * d.wo;
    let mut row = 0usize;
    for ci in 0..d.ci {
        let plane_start = ci * d.hp * d.wp;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let src = &col[row * owo..(row + 1) * owo];
                let mut idx = 0usize;
                for oy in 0..d.ho {
                    let y = oy * d.stride + ky;
                    let base = plane_start + y * d.wp + kx;
                    for ox in 0..d.wo {
                        padded_grad[base + ox * d.stride] += src[idx];
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold one padded-sample gradient back onto the unpadded sample gradient.
fn unpad_accumulate(padded_grad: &[f32], d: &ConvDims, mode: PadMode, out: &mut [f32]) {
    let p = d.pad as isize;
    for ci in 0..d.ci {
        let src = &padded_grad[ci * d.hp * d.wp..(ci + 1) * d.hp * d.wp];
        let dst = &mut out[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for yp in 0..d.hp {
            for xp in 0..d.wp {
                let ys = yp as isize - p;
                let xs = xp as isize - p;
                match mode {
                    PadMode::Zero => {
                        if ys >= 0 && ys < d.h as isize && xs >= 0 && xs < d.w as isize {
                            dst[ys as usize * d.w + xs as usize] += src[yp * d.wp + xp];
                        }
                    }
                    PadMode::Replicate => {
                        let yc = ys.clamp(0, d.h as isize - 1) as usize;
                        let xc = xs.clamp(0, d.w as isize - 1) as usize;
                        dst[yc * d.w + xc] += src[yp * d.wp + xp];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, stride, padding)?;
    let owo = d.ho * d.wo;
    let kdim = d.ci * d.kh * d.kw;
    let mut out = vec![0.0f32; d.n * d.co * owo];
    let mut padded = vec![0.0f32; d.ci * d.hp * d.wp];
    let mut col = vec![0.0f32; kdim * owo];
    for ni in 0..d.n {
        let sample = &input.data()[ni * d.ci * d.h * d.w..(ni + 1) * d.ci * d.h * d.w];
        pad_sample(sample, &d, mode, &mut padded);
        im2col(&padded, &d, &mut col);
        sgemm(
            d.co,
            kdim,
            owo,
            kernel.data(),
            &col,
            0.0,
            &mut out[ni * d.co * owo..(ni + 1) * d.co * owo],
        );
    }
    Tensor::new(vec![d.n, d.co, d.ho, d.wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    mode: PadMode,
    grad_out: &Tensor,
    needs_input: bool,
    needs_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let d = conv_dims(input, kernel, stride, padding)?;
    let owo = d.ho * d.wo;
    let kdim = d.ci * d.kh * d.kw;
    let mut grad_input = needs_input.then(|| vec![0.0f32; input.numel()]);
    let mut grad_kernel = needs_kernel.then(|| vec![0.0f32; kernel.numel()]);
    let mut padded = vec![0.0f32; d.ci * d.hp * d.wp];
    let mut col = vec![0.0f32; kdim * owo];
    let mut dcol = vec![0.0f32; kdim * owo];
    let mut dpadded = vec![0.0f32; d.ci * d.hp * d.wp];
    for ni in 0..d.n {
        let gy = &grad_out.data()[ni * d.co * owo..(ni + 1) * d.co * owo];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            let sample = &input.data()[ni * d.ci * d.h * d.w..(ni + 1) * d.ci * d.h * d.w];
            pad_sample(sample, &d, mode, &mut padded);
            im2col(&padded, &d, &mut col);
            // dK[co, kdim] += gy[co, owo] . col^T
            sgemm_bt(d.co, owo, kdim, gy, &col, 1.0, gk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcol[kdim, owo] = K^T . gy
            sgemm_at(kdim, d.co, owo, kernel.data(), gy, 0.0, &mut dcol);
            dpadded.iter_mut().for_each(|v| *v = 0.0);
            col2im_accumulate(&dcol, &d, &mut dpadded);
            unpad_accumulate(
                &dpadded,
                &d,
                mode,
                &mut gi[ni * d.ci * d.h * d.w..(ni + 1) * d.ci * d.h * d.w],
            );
        }
    }
    Ok((
        grad_input.map(|g| Tensor::new(input.shape().to_vec(), g).expect("same shape")),
        grad_kernel.map(|g| Tensor::new(kernel.shape().to_vec(), g).expect("same shape")),
    ))
}

/// Source coordinate and lerp weight for one output index (half-pixel rule).
fn bilinear_axis(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f32) {
    let src = (out_idx as f32 + 0.5) / factor as f32 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f32)
}

pub(crate) fn bilinear_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let ys: Vec<_> = (0..oh).map(|i| bilinear_axis(i, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|i| bilinear_axis(i, factor, w)).collect();
    for nc in 0..n * c {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + tx * (v01 - v00);
                let bot = v10 + tx * (v11 - v10);
                dst[oy * ow + ox] = top + ty * (bot - top);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn bilinear_backward(input: &Tensor, factor: usize, gy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(gy.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut gi = vec![0.0f32; input.numel()];
    let ys: Vec<_> = (0..oh).map(|i| bilinear_axis(i, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|i| bilinear_axis(i, factor, w)).collect();
    for nc in 0..n * c {
        let g = &gy.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gi[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                dst[y0 * w + x1] += gv * (1.0 - ty) * tx;
                dst[y1 * w + x0] += gv * ty * (1.0 - tx);
                dst[y1 * w + x1] += gv * ty * tx;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gi)
}

pub(crate) fn nearest_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let y = oy / factor;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[y * w + ox / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn nearest_backward(input: &Tensor, factor: usize, gy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(gy.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut gi = vec![0.0f32; input.numel()];
    for nc in 0..n * c {
        let g = &gy.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gi[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let y = oy / factor;
            for ox in 0..ow {
                dst[y * w + ox / factor] += g[oy * ow + ox];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gi)
}
