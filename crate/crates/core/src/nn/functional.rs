//! Convolution, pooling and normalization primitives on `[N, C, H, W]` maps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

fn expect_rank4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected [N, C, H, W]".into(),
        }),
    }
}

fn channel_mismatch(op: &'static str, x: &[usize], w: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    }
}

/// Per-channel `k×k` convolution, stride 1, zero "same" padding `k/2`.
/// Kernel shape `[C, 1, k, k]`; channels are never mixed.
pub fn depthwise_conv2d<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let (n, c, h, wd) = expect_rank4("depthwise_conv2d", xv.shape())?;
    let k = match *wv.shape() {
        [wc, 1, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 => k1,
        _ => return Err(channel_mismatch("depthwise_conv2d", xv.shape(), wv.shape())),
    };
    let pad = k / 2;
    let plane = h * wd;
    let mut out = vec![T::zero(); xv.numel()];
    let (xd, wdat) = (xv.data(), wv.data());
    for b in 0..n {
        for ch in 0..c {
            let src = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let dst = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let kern = &wdat[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kern[ky * k + kx];
                    for_each_overlap(h, wd, ky, kx, pad, |oy, iy, ox0, ix0, len| {
                        let o = &mut dst[oy * wd + ox0..oy * wd + ox0 + len];
                        let i = &src[iy * wd + ix0..iy * wd + ix0 + len];
                        for (ov, &iv) in o.iter_mut().zip(i) {
                            *ov = *ov + kv * iv;
                        }
                    });
                }
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    Ok(x.tape().push_op(Rc::new(out), &[x, w], move |g| {
        let (xd, wdat, gd) = (xv.data(), wv.data(), g.data());
        let mut gx = vec![T::zero(); xd.len()];
        let mut gw = vec![T::zero(); wdat.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let src = &xd[base..base + plane];
                let gout = &gd[base..base + plane];
                let gin = &mut gx[base..base + plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = wdat[ch * k * k + ky * k + kx];
                        let mut acc = T::zero();
                        for_each_overlap(h, wd, ky, kx, pad, |oy, iy, ox0, ix0, len| {
                            let go = &gout[oy * wd + ox0..oy * wd + ox0 + len];
                            let xi = &src[iy * wd + ix0..iy * wd + ix0 + len];
                            let gi = &mut gin[iy * wd + ix0..iy * wd + ix0 + len];
                            for ((gi, &gv), &xv) in gi.iter_mut().zip(go).zip(xi) {
                                *gi = *gi + kv * gv;
                                acc = acc + gv * xv;
                            }
                        });
                        gw[ch * k * k + ky * k + kx] = gw[ch * k * k + ky * k + kx] + acc;
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
            Some(Tensor::new(wv.shape().to_vec(), gw).expect("shape")),
        ]
    }))
}

/// For kernel tap `(ky, kx)`, visit each output row `oy` with its input row
/// `iy = oy + ky − pad` and the contiguous column run that stays in bounds.
fn for_each_overlap(
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let dy = ky as isize - pad as isize;
    let dx = kx as isize - pad as isize;
    let ox0 = (-dx).max(0) as usize;
    let ox1 = (w as isize - dx).min(w as isize);
    if ox1 <= ox0 as isize {
        return;
    }
    let len = ox1 as usize - ox0;
    let ix0 = (ox0 as isize + dx) as usize;
    for oy in 0..h {
        let iy = oy as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        f(oy, iy as usize, ox0, ix0, len);
    }
}

/// 1×1 convolution `[C_out, C, 1, 1]` plus bias `[C_out]`; mixes channels only.
pub fn pointwise_conv2d<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, wv, bv) = (x.value(), w.value(), bias.value());
    let (n, c, h, wd) = expect_rank4("pointwise_conv2d", xv.shape())?;
    let co = match *wv.shape() {
        [co, wc, 1, 1] if wc == c && bv.shape() == [co] => co,
        _ => return Err(channel_mismatch("pointwise_conv2d", xv.shape(), wv.shape())),
    };
    let hw = h * wd;
    let mut out = vec![T::zero(); n * co * hw];
    for b in 0..n {
        let dst = &mut out[b * co * hw..(b + 1) * co * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bv.data()[o]);
        }
        T::gemm(co, c, hw, wv.data(), false, &xv.data()[b * c * hw..(b + 1) * c * hw], false, dst, true);
    }
    let out = Tensor::new(vec![n, co, h, wd], out)?;
    Ok(x.tape().push_op(Rc::new(out), &[x, w, bias], move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); xv.numel()];
        let mut gw = vec![T::zero(); wv.numel()];
        let mut gb = vec![T::zero(); co];
        for b in 0..n {
            let gs = &gd[b * co * hw..(b + 1) * co * hw];
            let xs = &xv.data()[b * c * hw..(b + 1) * c * hw];
            T::gemm(c, co, hw, wv.data(), true, gs, false, &mut gx[b * c * hw..(b + 1) * c * hw], false);
            T::gemm(co, hw, c, gs, false, xs, true, &mut gw, true);
            for (o, row) in gs.chunks(hw).enumerate() {
                gb[o] = gb[o] + row.iter().copied().sum::<T>();
            }
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
            Some(Tensor::new(wv.shape().to_vec(), gw).expect("shape")),
            Some(Tensor::new(vec![co], gb).expect("shape")),
        ]
    }))
}

/// Unfold one `[C, H, W]` sample into `[C·k·k, H·W]` columns (same padding).
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    col.fill(T::zero());
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let plane = &src[ch * hw..(ch + 1) * hw];
                for_each_overlap(h, w, ky, kx, pad, |oy, iy, ox0, ix0, len| {
                    dst[oy * w + ox0..oy * w + ox0 + len].copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + len]);
                });
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let plane = &mut dst[ch * hw..(ch + 1) * hw];
                for_each_overlap(h, w, ky, kx, pad, |oy, iy, ox0, ix0, len| {
                    let s = &src[oy * w + ox0..oy * w + ox0 + len];
                    for (d, &v) in plane[iy * w + ix0..iy * w + ix0 + len].iter_mut().zip(s) {
                        *d = *d + v;
                    }
                });
            }
        }
    }
}

/// Dense `k×k` convolution, stride 1, same padding; kernel `[C_out, C_in, k, k]`,
/// bias `[C_out]`.
pub fn conv2d_same<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, wv, bv) = (x.value(), w.value(), bias.value());
    let (n, c, h, wd) = expect_rank4("conv2d", xv.shape())?;
    let (co, k) = match *wv.shape() {
        [co, wc, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 && bv.shape() == [co] => (co, k1),
        _ => return Err(channel_mismatch("conv2d", xv.shape(), wv.shape())),
    };
    let hw = h * wd;
    let ckk = c * k * k;
    let mut col = vec![T::zero(); ckk * hw];
    let mut out = vec![T::zero(); n * co * hw];
    for b in 0..n {
        im2col(&xv.data()[b * c * hw..(b + 1) * c * hw], c, h, wd, k, &mut col);
        let dst = &mut out[b * co * hw..(b + 1) * co * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bv.data()[o]);
        }
        T::gemm(co, ckk, hw, wv.data(), false, &col, false, dst, true);
    }
    let out = Tensor::new(vec![n, co, h, wd], out)?;
    Ok(x.tape().push_op(Rc::new(out), &[x, w, bias], move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); xv.numel()];
        let mut gw = vec![T::zero(); wv.numel()];
        let mut gb = vec![T::zero(); co];
        let mut col = vec![T::zero(); ckk * hw];
        let mut gcol = vec![T::zero(); ckk * hw];
        for b in 0..n {
            let gs = &gd[b * co * hw..(b + 1) * co * hw];
            im2col(&xv.data()[b * c * hw..(b + 1) * c * hw], c, h, wd, k, &mut col);
            T::gemm(co, hw, ckk, gs, false, &col, true, &mut gw, true);
            T::gemm(ckk, co, hw, wv.data(), true, gs, false, &mut gcol, false);
            col2im(&gcol, c, h, wd, k, &mut gx[b * c * hw..(b + 1) * c * hw]);
            for (o, row) in gs.chunks(hw).enumerate() {
                gb[o] = gb[o] + row.iter().copied().sum::<T>();
            }
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
            Some(Tensor::new(wv.shape().to_vec(), gw).expect("shape")),
            Some(Tensor::new(vec![co], gb).expect("shape")),
        ]
    }))
}

/// Stride-2 transposed convolution with a `[C_in, C_out, 2, 2]` kernel:
/// `out[n, o, 2i+a, 2j+b] = Σ_c x[n, c, i, j] · k[c, o, a, b]`.
pub fn conv_transpose2x2<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let (n, ci, h, wd) = expect_rank4("conv_transpose2x2", xv.shape())?;
    let co = match *wv.shape() {
        [wc, co, 2, 2] if wc == ci => co,
        _ => return Err(channel_mismatch("conv_transpose2x2", xv.shape(), wv.shape())),
    };
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut cols = vec![T::zero(); co * 4 * hw];
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        T::gemm(co * 4, ci, hw, wv.data(), true, &xv.data()[b * ci * hw..(b + 1) * ci * hw], false, &mut cols, false);
        let dst = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &cols[((o * 2 + a) * 2 + bb) * hw..((o * 2 + a) * 2 + bb + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            dst[(o * oh + 2 * i + a) * ow + 2 * j + bb] = row[i * wd + j];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![n, co, oh, ow], out)?;
    Ok(x.tape().push_op(Rc::new(out), &[x, w], move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); xv.numel()];
        let mut gw = vec![T::zero(); wv.numel()];
        let mut gcols = vec![T::zero(); co * 4 * hw];
        for b in 0..n {
            let src = &gd[b * co * oh * ow..(b + 1) * co * oh * ow];
            for o in 0..co {
                for a in 0..2 {
                    for bb in 0..2 {
                        let r = ((o * 2 + a) * 2 + bb) * hw;
                        for i in 0..h {
                            for j in 0..wd {
                                gcols[r + i * wd + j] = src[(o * oh + 2 * i + a) * ow + 2 * j + bb];
                            }
                        }
                    }
                }
            }
            let xs = &xv.data()[b * ci * hw..(b + 1) * ci * hw];
            T::gemm(ci, co * 4, hw, wv.data(), false, &gcols, false, &mut gx[b * ci * hw..(b + 1) * ci * hw], false);
            T::gemm(ci, hw, co * 4, xs, false, &gcols, true, &mut gw, true);
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
            Some(Tensor::new(wv.shape().to_vec(), gw).expect("shape")),
        ]
    }))
}

/// 2×2 max pooling, stride 2. Gradient routes to the first maximal element of
/// each window in row-major window order.
pub fn maxpool2x2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = expect_rank4("maxpool2x2", xv.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2x2",
            shape: xv.shape().to_vec(),
            reason: "spatial extents must be even".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = xv.data();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + a) * w + 2 * j + b;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().push_op(Rc::new(out), &[x], move |g| {
        let mut gx = Tensor::zeros(in_shape.clone());
        let gxd = gx.data_mut();
        for (&i, &v) in argmax.iter().zip(g.data()) {
            gxd[i] = gxd[i] + v;
        }
        vec![Some(gx)]
    }))
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

/// Training-mode batch normalization over `(N, H, W)` per channel.
pub fn batch_norm_train<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (n, c, h, w) = expect_rank4("batch_norm", xv.shape())?;
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(channel_mismatch("batch_norm", xv.shape(), gv.shape()));
    }
    let count = n * h * w;
    if count < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            shape: xv.shape().to_vec(),
            reason: "training mode needs N·H·W ≥ 2".into(),
        });
    }
    let hw = h * w;
    let cnt = T::cst(count as f64);
    let eps = T::cst(eps);
    let xd = xv.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] = mean[ch] + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / cnt);
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] = var[ch]
                + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / cnt);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let hv = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = hv;
                out[i] = hv * gv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    let stats = BatchStats {
        mean,
        var,
        count,
    };
    let shape = xv.shape().to_vec();
    let var = x.tape().push_op(Rc::new(out), &[x, gamma, beta], move |g| {
        let gd = g.data();
        let mut sum_dh = vec![T::zero(); c];
        let mut sum_dh_h = vec![T::zero(); c];
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    gg[ch] = gg[ch] + gd[i] * xhat[i];
                    gb[ch] = gb[ch] + gd[i];
                }
            }
        }
        for ch in 0..c {
            sum_dh[ch] = gb[ch] * gv.data()[ch];
            sum_dh_h[ch] = gg[ch] * gv.data()[ch];
        }
        let mut gx = vec![T::zero(); gd.len()];
        for b in 0..n {
            for ch in 0..c {
                let md = sum_dh[ch] / cnt;
                let mdh = sum_dh_h[ch] / cnt;
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    let dh = gd[i] * gv.data()[ch];
                    gx[i] = inv_std[ch] * (dh - md - xhat[i] * mdh);
                }
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), gx).expect("shape")),
            Some(Tensor::new(vec![c], gg).expect("shape")),
            Some(Tensor::new(vec![c], gb).expect("shape")),
        ]
    });
    Ok((var, stats))
}

/// Inference-mode batch normalization: a fixed per-channel affine map built
/// from running statistics.
pub fn batch_norm_eval<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (n, c, h, w) = expect_rank4("batch_norm", xv.shape())?;
    if gv.shape() != [c] || bv.shape() != [c] || running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(channel_mismatch("batch_norm", xv.shape(), gv.shape()));
    }
    let hw = h * w;
    let eps = T::cst(eps);
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let rm = running_mean.data().to_vec();
    let xd = xv.data();
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                out[i] = (xd[i] - rm[ch]) * inv_std[ch] * gv.data()[ch] + bv.data()[ch];
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    let shape = xv.shape().to_vec();
    Ok(x.tape().push_op(Rc::new(out), &[x, gamma, beta], move |g| {
        let (gd, xd) = (g.data(), xv.data());
        let mut gx = vec![T::zero(); gd.len()];
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    gx[i] = gd[i] * inv_std[ch] * gv.data()[ch];
                    gg[ch] = gg[ch] + gd[i] * (xd[i] - rm[ch]) * inv_std[ch];
                    gb[ch] = gb[ch] + gd[i];
                }
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), gx).expect("shape")),
            Some(Tensor::new(vec![c], gg).expect("shape")),
            Some(Tensor::new(vec![c], gb).expect("shape")),
        ]
    }))
}
