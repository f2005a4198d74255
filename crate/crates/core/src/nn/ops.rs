//! Tensor ops with explicit backward passes.
//!
//! Everything is written for a single CPU core. Convolutions iterate kernel
//! taps in the outer loops and sweep contiguous output rows in the inner
//! loop (a shifted-row axpy), which the compiler autovectorizes; that one
//! shape of loop carries both training and inference.

use crate::error::{shape_err, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

// ============================================================
// Convolution
// ============================================================

/// Valid output-column range for one kernel tap: the `ow` for which
/// `iw = ow*stride + kw - padding` lands inside `[0, w)`. Stride-1 callers
/// get a contiguous range they can slice directly.
#[inline]
fn tap_range(out_w: usize, in_w: usize, kw: usize, padding: usize) -> (usize, usize, isize) {
    let shift = kw as isize - padding as isize;
    let start = (-shift).max(0) as usize;
    let end = ((in_w as isize - shift).max(0) as usize).min(out_w);
    (start, end.max(start), shift)
}

fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = in_dim + 2 * padding;
    if padded < k {
        return Err(shape_err!(
            "kernel {k} larger than padded input {padded}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of NCHW input with OIHW weights.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(shape_err!("conv2d: input has {cin} channels, weight wants {wcin}"));
    }
    if b.shape() != [cout] {
        return Err(shape_err!("conv2d: bias shape {:?}, want [{cout}]", b.shape()));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d: stride must be >= 1"));
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(wd, kw, stride, padding)?;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);

    if stride == 1 {
        for ni in 0..n {
            for co in 0..cout {
                let bias = b.data()[co];
                for r in 0..oh {
                    for v in y.row4_mut(ni, co, r) {
                        *v = bias;
                    }
                }
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = w.at4(co, ci, ki, kj);
                            if wv == T::zero() {
                                continue;
                            }
                            let (ws, we, shift) = tap_range(ow, wd, kj, padding);
                            if ws >= we {
                                continue;
                            }
                            for r in 0..oh {
                                let ih = r as isize + ki as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xs = (ws as isize + shift) as usize;
                                let xrow = &x.row4(ni, ci, ih as usize)[xs..xs + (we - ws)];
                                let yrow = &mut y.row4_mut(ni, co, r)[ws..we];
                                for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                    *yv += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        // General strided path; only exercised by tests, the networks are
        // stride-1 throughout.
        for ni in 0..n {
            for co in 0..cout {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                let ih = (r * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let iw = (c * stride + kj) as isize - padding as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at4(co, ci, ki, kj)
                                        * x.at4(ni, ci, ih as usize, iw as usize);
                                }
                            }
                        }
                        *y.at4_mut(ni, co, r, c) = acc;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv2d_forward` w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let (gn, gc, oh, ow) = gy.dims4()?;
    if gn != n || gc != cout {
        return Err(shape_err!("conv2d backward: gy shape {:?} mismatched", gy.shape()));
    }
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = Tensor::zeros(&[cout]);

    if stride == 1 {
        for ni in 0..n {
            for co in 0..cout {
                let mut bsum = T::zero();
                for r in 0..oh {
                    for &g in gy.row4(ni, co, r) {
                        bsum += g;
                    }
                }
                gb.data_mut()[co] += bsum;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let (ws, we, shift) = tap_range(ow, wd, kj, padding);
                            if ws >= we {
                                continue;
                            }
                            let wv = w.at4(co, ci, ki, kj);
                            let mut wacc = T::zero();
                            for r in 0..oh {
                                let ih = r as isize + ki as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xs = (ws as isize + shift) as usize;
                                let grow = &gy.row4(ni, co, r)[ws..we];
                                {
                                    let xrow = &x.row4(ni, ci, ih as usize)[xs..xs + (we - ws)];
                                    for (&g, &xv) in grow.iter().zip(xrow) {
                                        wacc += g * xv;
                                    }
                                }
                                let gxrow =
                                    &mut gx.row4_mut(ni, ci, ih as usize)[xs..xs + (we - ws)];
                                for (gxv, &g) in gxrow.iter_mut().zip(grow) {
                                    *gxv += wv * g;
                                }
                            }
                            *gw.at4_mut(co, ci, ki, kj) += wacc;
                        }
                    }
                }
            }
        }
    } else {
        for ni in 0..n {
            for co in 0..cout {
                for r in 0..oh {
                    for c in 0..ow {
                        let g = gy.at4(ni, co, r, c);
                        gb.data_mut()[co] += g;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                let ih = (r * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let iw = (c * stride + kj) as isize - padding as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    *gw.at4_mut(co, ci, ki, kj) +=
                                        g * x.at4(ni, ci, ih as usize, iw as usize);
                                    *gx.at4_mut(ni, ci, ih as usize, iw as usize) +=
                                        g * w.at4(co, ci, ki, kj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

// ============================================================
// Depthwise convolution (stride 1, no bias)
// ============================================================

/// Per-channel k×k convolution; weight shape (C, 1, KH, KW).
pub fn depthwise_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (wc, one, kh, kw) = w.dims4()?;
    if wc != c || one != 1 {
        return Err(shape_err!(
            "depthwise conv: weight {:?} does not match {c} channels",
            w.shape()
        ));
    }
    let oh = conv_out_dim(h, kh, 1, padding)?;
    let ow = conv_out_dim(wd, kw, 1, padding)?;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = w.at4(ci, 0, ki, kj);
                    let (ws, we, shift) = tap_range(ow, wd, kj, padding);
                    if ws >= we {
                        continue;
                    }
                    for r in 0..oh {
                        let ih = r as isize + ki as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xs = (ws as isize + shift) as usize;
                        let xrow = &x.row4(ni, ci, ih as usize)[xs..xs + (we - ws)];
                        let yrow = &mut y.row4_mut(ni, ci, r)[ws..we];
                        for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let (_, _, oh, ow) = gy.dims4()?;
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let (ws, we, shift) = tap_range(ow, wd, kj, padding);
                    if ws >= we {
                        continue;
                    }
                    let wv = w.at4(ci, 0, ki, kj);
                    let mut wacc = T::zero();
                    for r in 0..oh {
                        let ih = r as isize + ki as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xs = (ws as isize + shift) as usize;
                        let grow = &gy.row4(ni, ci, r)[ws..we];
                        {
                            let xrow = &x.row4(ni, ci, ih as usize)[xs..xs + (we - ws)];
                            for (&g, &xv) in grow.iter().zip(xrow) {
                                wacc += g * xv;
                            }
                        }
                        let gxrow = &mut gx.row4_mut(ni, ci, ih as usize)[xs..xs + (we - ws)];
                        for (gxv, &g) in gxrow.iter_mut().zip(grow) {
                            *gxv += wv * g;
                        }
                    }
                    *gw.at4_mut(ci, 0, ki, kj) += wacc;
                }
            }
        }
    }
    Ok((gx, gw))
}

// ============================================================
// Squeeze-and-excitation
// ============================================================

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct SeCache<T: Scalar> {
    /// Global average pool, length N*C.
    pub gap: Vec<T>,
    /// Pre-ReLU hidden, length N*Cr.
    pub pre1: Vec<T>,
    /// Post-ReLU hidden, length N*Cr.
    pub h1: Vec<T>,
    /// Channel scales, length N*C.
    pub s: Vec<T>,
}

/// Channel attention: `s = sigmoid(W2 · relu(W1 · gap(x)))`, output
/// `y[n,c] = s[n,c] * x[n,c]`. W1 is (Cr, C), W2 is (C, Cr); no biases.
pub fn se_forward<T: Scalar>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
) -> Result<(Tensor<T>, SeCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if w1.shape().len() != 2 || w1.shape()[1] != c {
        return Err(shape_err!("se: w1 shape {:?}, want [Cr, {c}]", w1.shape()));
    }
    let cr = w1.shape()[0];
    if w2.shape() != [c, cr] {
        return Err(shape_err!("se: w2 shape {:?}, want [{c}, {cr}]", w2.shape()));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut gap = vec![T::zero(); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = T::zero();
            for r in 0..h {
                for &v in x.row4(ni, ci, r) {
                    acc += v;
                }
            }
            gap[ni * c + ci] = acc / area;
        }
    }
    let mut pre1 = vec![T::zero(); n * cr];
    let mut h1 = vec![T::zero(); n * cr];
    for ni in 0..n {
        for j in 0..cr {
            let mut acc = T::zero();
            for ci in 0..c {
                acc += w1.data()[j * c + ci] * gap[ni * c + ci];
            }
            pre1[ni * cr + j] = acc;
            h1[ni * cr + j] = if acc > T::zero() { acc } else { T::zero() };
        }
    }
    let mut s = vec![T::zero(); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = T::zero();
            for j in 0..cr {
                acc += w2.data()[ci * cr + j] * h1[ni * cr + j];
            }
            s[ni * c + ci] = sigmoid_scalar(acc);
        }
    }
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let sc = s[ni * c + ci];
            for r in 0..h {
                for v in y.row4_mut(ni, ci, r) {
                    *v *= sc;
                }
            }
        }
    }
    Ok((
        y,
        SeCache {
            gap,
            pre1,
            h1,
            s,
        },
    ))
}

pub fn se_backward<T: Scalar>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    cache: &SeCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let cr = w1.shape()[0];
    let area = T::from_usize(h * w).unwrap();

    // dL/ds[n,c] = sum_{h,w} gy * x; and the direct path gx = s * gy.
    let mut gs = vec![T::zero(); n * c];
    let mut gx = gy.clone();
    for ni in 0..n {
        for ci in 0..c {
            let sc = cache.s[ni * c + ci];
            let mut acc = T::zero();
            for r in 0..h {
                let xr = x.row4(ni, ci, r);
                let gr = gy.row4(ni, ci, r);
                for (&xv, &g) in xr.iter().zip(gr) {
                    acc += xv * g;
                }
            }
            gs[ni * c + ci] = acc;
            for r in 0..h {
                for v in gx.row4_mut(ni, ci, r) {
                    *v *= sc;
                }
            }
        }
    }
    // Through the sigmoid.
    let mut gz = vec![T::zero(); n * c];
    for i in 0..n * c {
        let s = cache.s[i];
        gz[i] = gs[i] * s * (T::one() - s);
    }
    // Through W2 and the ReLU.
    let mut gw2 = w2.zeros_like();
    let mut gh1 = vec![T::zero(); n * cr];
    for ni in 0..n {
        for ci in 0..c {
            let g = gz[ni * c + ci];
            for j in 0..cr {
                gw2.data_mut()[ci * cr + j] += g * cache.h1[ni * cr + j];
                gh1[ni * cr + j] += g * w2.data()[ci * cr + j];
            }
        }
    }
    for i in 0..n * cr {
        if cache.pre1[i] <= T::zero() {
            gh1[i] = T::zero();
        }
    }
    // Through W1 back to the pooled vector, then uniformly over pixels.
    let mut gw1 = w1.zeros_like();
    let mut ggap = vec![T::zero(); n * c];
    for ni in 0..n {
        for j in 0..cr {
            let g = gh1[ni * cr + j];
            for ci in 0..c {
                gw1.data_mut()[j * c + ci] += g * cache.gap[ni * c + ci];
                ggap[ni * c + ci] += g * w1.data()[j * c + ci];
            }
        }
    }
    for ni in 0..n {
        for ci in 0..c {
            let g = ggap[ni * c + ci] / area;
            for r in 0..h {
                for v in gx.row4_mut(ni, ci, r) {
                    *v += g;
                }
            }
        }
    }
    Ok((gx, gw1, gw2))
}

// ============================================================
// Pooling and upsampling
// ============================================================

/// 2×2 max pooling; returns the flat input index of each maximum so the
/// backward pass can route gradients. Ties go to the first index in window
/// scan order (top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("maxpool2 needs even dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut oidx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..oh {
                for cw in 0..ow {
                    let base = ((ni * c + ci) * h + 2 * r) * w + 2 * cw;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    let mut bv = x.data()[cand[0]];
                    for &idx in &cand[1..] {
                        let v = x.data()[idx];
                        if v > bv {
                            bv = v;
                            best = idx;
                        }
                    }
                    y.data_mut()[oidx] = bv;
                    arg[oidx] = best as u32;
                    oidx += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    argmax: &[u32],
    gy: &Tensor<T>,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != gy.len() {
        return Err(shape_err!("maxpool2 backward: argmax/gy length mismatch"));
    }
    let mut gx = Tensor::zeros(in_shape);
    for (i, &g) in gy.data().iter().enumerate() {
        gx.data_mut()[argmax[i] as usize] += g;
    }
    Ok(gx)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                let src = x.row4(ni, ci, r).to_vec();
                for dr in 0..2 {
                    let dst = y.row4_mut(ni, ci, 2 * r + dr);
                    for (cw, &v) in src.iter().enumerate() {
                        dst[2 * cw] = v;
                        dst[2 * cw + 1] = v;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Each input pixel fans out to a 2×2 block, so its gradient is the block sum.
pub fn upsample2_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = gy.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(shape_err!("upsample2 backward needs even dims, got {h2}x{w2}"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                for cw in 0..w {
                    let g = gy.at4(ni, ci, 2 * r, 2 * cw)
                        + gy.at4(ni, ci, 2 * r, 2 * cw + 1)
                        + gy.at4(ni, ci, 2 * r + 1, 2 * cw)
                        + gy.at4(ni, ci, 2 * r + 1, 2 * cw + 1);
                    *gx.at4_mut(ni, ci, r, cw) = g;
                }
            }
        }
    }
    Ok(gx)
}

// ============================================================
// Elementwise activations
// ============================================================

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through ReLU given the *output* y (y > 0 iff the unit was live).
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = gy.clone();
    for (g, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split by sign to avoid overflow in exp.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward through sigmoid given the output y: dy/dx = y(1-y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = gy.clone();
    for (g, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
        *g *= yv * (T::one() - yv);
    }
    gx
}

// ============================================================
// Channel concatenation
// ============================================================

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(shape_err!("concat_channels: empty input list"));
    }
    let (n, _, h, w) = xs[0].dims4()?;
    let mut ctot = 0;
    for t in xs {
        let (tn, tc, th, tw) = t.dims4()?;
        if tn != n || th != h || tw != w {
            return Err(shape_err!(
                "concat_channels: shape {:?} incompatible with {:?}",
                t.shape(),
                xs[0].shape()
            ));
        }
        ctot += tc;
    }
    let mut y = Tensor::zeros(&[n, ctot, h, w]);
    for ni in 0..n {
        let mut co = 0;
        for t in xs {
            let tc = t.shape()[1];
            for ci in 0..tc {
                for r in 0..h {
                    y.row4_mut(ni, co + ci, r).copy_from_slice(t.row4(ni, ci, r));
                }
            }
            co += tc;
        }
    }
    Ok(y)
}

/// Split a gradient back into per-input channel groups.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = g.dims4()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(shape_err!(
            "split_channels: sizes {:?} do not sum to {c}",
            sizes
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut co = 0;
    for &sz in sizes {
        let mut t = Tensor::zeros(&[n, sz, h, w]);
        for ni in 0..n {
            for ci in 0..sz {
                for r in 0..h {
                    t.row4_mut(ni, ci, r).copy_from_slice(g.row4(ni, co + ci, r));
                }
            }
        }
        out.push(t);
        co += sz;
    }
    Ok(out)
}
