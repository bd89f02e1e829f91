//! Differentiable primitives. Each op computes its forward value eagerly and
//! records a closure producing the parents' gradients.

use std::rc::Rc;

use super::{strides_of, Real, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn unary<'t, T: Real>(
    x: Var<'t, T>,
    fwd: impl Fn(T) -> T,
    // derivative from (input, output)
    deriv: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let out = Rc::new(xv.map(fwd));
    let saved = Rc::clone(&out);
    x.tape().push_op(out, &[x], move |g| {
        let d: Vec<T> = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(saved.data()))
            .map(|(&g, (&x, &y))| g * deriv(x, y))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), d).expect("same shape"))]
    })
}

pub fn add<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("add", &av, &bv)?;
    let out = av.zip_map(&bv, |x, y| x + y)?;
    Ok(a.tape().push_op(Rc::new(out), &[a, b], |g| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("sub", &av, &bv)?;
    let out = av.zip_map(&bv, |x, y| x - y)?;
    Ok(a.tape().push_op(Rc::new(out), &[a, b], |g| {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }))
}

pub fn mul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("mul", &av, &bv)?;
    let out = av.zip_map(&bv, |x, y| x * y)?;
    Ok(a.tape().push_op(Rc::new(out), &[a, b], move |g| {
        vec![
            Some(g.zip_map(&bv, |g, y| g * y).expect("shape")),
            Some(g.zip_map(&av, |g, x| g * x).expect("shape")),
        ]
    }))
}

pub fn div<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("div", &av, &bv)?;
    let out = av.zip_map(&bv, |x, y| x / y)?;
    Ok(a.tape().push_op(Rc::new(out), &[a, b], move |g| {
        let ga = g.zip_map(&bv, |g, y| g / y).expect("shape");
        let gb: Vec<T> = g
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&g, (&x, &y))| -g * x / (y * y))
            .collect();
        vec![Some(ga), Some(Tensor::new(g.shape().to_vec(), gb).expect("shape"))]
    }))
}

pub fn scale<'t, T: Real>(x: Var<'t, T>, s: f64) -> Var<'t, T> {
    let s = T::cst(s);
    unary(x, move |v| v * s, move |_, _| s)
}

pub fn add_scalar<'t, T: Real>(x: Var<'t, T>, s: f64) -> Var<'t, T> {
    let s = T::cst(s);
    unary(x, move |v| v + s, |_, _| T::one())
}

/// `a + b` where `b.shape` is a suffix of `a.shape`; `b` is repeated over the
/// leading axes.
pub fn add_broadcast<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    let (ash, bsh) = (av.shape(), bv.shape());
    if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
        return Err(Error::ShapeMismatch {
            op: "add_broadcast",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let inner = bv.numel();
    let mut out = av.data().to_vec();
    for chunk in out.chunks_mut(inner) {
        for (o, &v) in chunk.iter_mut().zip(bv.data()) {
            *o = *o + v;
        }
    }
    let out = Tensor::new(ash.to_vec(), out)?;
    let bshape = bsh.to_vec();
    Ok(a.tape().push_op(Rc::new(out), &[a, b], move |g| {
        let mut gb = vec![T::zero(); inner];
        for chunk in g.data().chunks(inner) {
            for (acc, &v) in gb.iter_mut().zip(chunk) {
                *acc = *acc + v;
            }
        }
        vec![
            Some(g.clone()),
            Some(Tensor::new(bshape.clone(), gb).expect("shape")),
        ]
    }))
}

pub fn relu<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary(
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |x, _| if x > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn tanh<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let half = T::cst(0.5);
    let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::cst(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    unary(
        x,
        move |v| half * v * (T::one() + (v * inv_sqrt2).erf()),
        move |v, _| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            cdf + v * pdf
        },
    )
}

pub fn log<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary(x, |v| v.ln(), |x, _| T::one() / x)
}

pub fn exp<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary(x, |v| v.exp(), |_, y| y)
}

/// Clamp into `[lo, hi]`; gradient passes where the input lies inside the
/// closed interval.
pub fn clamp<'t, T: Real>(x: Var<'t, T>, lo: f64, hi: f64) -> Var<'t, T> {
    let (lo, hi) = (T::cst(lo), T::cst(hi));
    unary(
        x,
        move |v| v.max(lo).min(hi),
        move |x, _| {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        },
    )
}

pub fn sum_all<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let out = Tensor::scalar(xv.sum());
    x.tape().push_op(Rc::new(out), &[x], move |g| {
        vec![Some(Tensor::full(shape.clone(), g.item()))]
    })
}

pub fn mean_all<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let n = x.value().numel() as f64;
    scale(sum_all(x), 1.0 / n)
}

/// Batched matrix product over the last two axes. Batch prefixes must be
/// equal, or one operand must be a plain matrix shared across the batch.
pub fn matmul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: ash.clone(),
        rhs: bsh.clone(),
    };
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (pa, pb) = (&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
    let mode = if pb.is_empty() {
        MatmulMode::SharedRhs
    } else if pa.is_empty() {
        MatmulMode::SharedLhs
    } else if pa == pb {
        MatmulMode::Batched
    } else {
        return Err(mismatch());
    };
    let prefix = if pa.is_empty() { pb.to_vec() } else { pa.to_vec() };
    let batch: usize = prefix.iter().product();
    let mut out_shape = prefix;
    out_shape.extend_from_slice(&[m, n]);

    let mut out = vec![T::zero(); batch * m * n];
    match mode {
        MatmulMode::SharedRhs => {
            T::gemm(batch * m, k, n, av.data(), false, bv.data(), false, &mut out, false)
        }
        _ => {
            for i in 0..batch {
                let a_s = if mode == MatmulMode::SharedLhs { 0 } else { i * m * k };
                let b_s = if mode == MatmulMode::Batched || mode == MatmulMode::SharedLhs {
                    i * k * n
                } else {
                    0
                };
                T::gemm(
                    m,
                    k,
                    n,
                    &av.data()[a_s..a_s + m * k],
                    false,
                    &bv.data()[b_s..b_s + k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
    }
    let out = Tensor::new(out_shape, out)?;
    Ok(a.tape().push_op(Rc::new(out), &[a, b], move |g| {
        let gd = g.data();
        let mut ga = vec![T::zero(); av.numel()];
        let mut gb = vec![T::zero(); bv.numel()];
        match mode {
            MatmulMode::SharedRhs => {
                // dA = dC·Bᵀ, dB = Aᵀ·dC over the folded batch
                T::gemm(batch * m, n, k, gd, false, bv.data(), true, &mut ga, false);
                T::gemm(k, batch * m, n, av.data(), true, gd, false, &mut gb, false);
            }
            MatmulMode::SharedLhs => {
                for i in 0..batch {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let bs = &bv.data()[i * k * n..(i + 1) * k * n];
                    T::gemm(m, n, k, gs, false, bs, true, &mut ga, true);
                    T::gemm(k, m, n, av.data(), true, gs, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
            MatmulMode::Batched => {
                for i in 0..batch {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let as_ = &av.data()[i * m * k..(i + 1) * m * k];
                    let bs = &bv.data()[i * k * n..(i + 1) * k * n];
                    T::gemm(m, n, k, gs, false, bs, true, &mut ga[i * m * k..(i + 1) * m * k], false);
                    T::gemm(k, m, n, as_, true, gs, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
        }
        vec![
            Some(Tensor::new(av.shape().to_vec(), ga).expect("shape")),
            Some(Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
        ]
    }))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MatmulMode {
    SharedRhs,
    SharedLhs,
    Batched,
}

/// Plain-tensor softmax over the last axis with max subtraction.
pub fn softmax_lastdim_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax on rank-0 tensor");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

pub fn softmax_lastdim<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let out = Rc::new(softmax_lastdim_tensor(&x.value()));
    let y = Rc::clone(&out);
    let d = *y.shape().last().expect("rank ≥ 1");
    x.tape().push_op(out, &[x], move |g| {
        let mut gx = vec![T::zero(); g.numel()];
        for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
            for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                *o = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::new(g.shape().to_vec(), gx).expect("shape"))]
    })
}

pub fn reshape<'t, T: Real>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let xv = x.value();
    let old = xv.shape().to_vec();
    let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
    Ok(x.tape().push_op(Rc::new(out), &[x], move |g| {
        vec![Some(Tensor::new(old.clone(), g.data().to_vec()).expect("shape"))]
    }))
}

/// Source offsets such that `out.data[i] = x.data[idx[i]]` realises an axis
/// permutation (`out` axis `j` is input axis `axes[j]`).
pub(crate) fn permutation_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(numel);
    let mut coord = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        idx.push(offset);
        for ax in (0..coord.len()).rev() {
            coord[ax] += 1;
            offset += src_strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    (idx, out_shape)
}

pub fn permute<'t, T: Real>(x: Var<'t, T>, axes: &[usize]) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::InvalidShape {
            op: "permute",
            shape,
            reason: format!("axes {axes:?} are not a permutation"),
        });
    }
    let (idx, out_shape) = permutation_index(&shape, axes);
    gather(x, Rc::new(idx), &out_shape)
}

/// `out.data[i] = x.data[index[i]]`; gradients scatter-add back.
pub fn gather<'t, T: Real>(x: Var<'t, T>, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'t, T>> {
    let xv = x.value();
    let numel: usize = out_shape.iter().product();
    if numel != index.len() || index.iter().any(|&i| i >= xv.numel()) {
        return Err(Error::InvalidShape {
            op: "gather",
            shape: out_shape.to_vec(),
            reason: format!("index of length {} does not fit source of {} elements", index.len(), xv.numel()),
        });
    }
    let src = xv.data();
    let out = Tensor::new(out_shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().push_op(Rc::new(out), &[x], move |g| {
        let mut gx = Tensor::zeros(in_shape.clone());
        let gxd = gx.data_mut();
        for (&i, &v) in index.iter().zip(g.data()) {
            gxd[i] = gxd[i] + v;
        }
        vec![Some(gx)]
    }))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub fn concat<'t, T: Real>(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::InvalidShape {
            op: "concat",
            shape: base,
            reason: format!("axis {axis} out of range"),
        });
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, inner) = split_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &sz) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let out = Tensor::new(out_shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().push_op(Rc::new(out), xs, move |g| {
        let gd = g.data();
        let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (p, &sz) in parts.iter_mut().zip(&sizes) {
                p.extend_from_slice(&gd[off..off + sz * inner]);
                off += sz * inner;
            }
        }
        parts
            .into_iter()
            .zip(&shapes)
            .map(|(p, s)| Some(Tensor::new(s.clone(), p).expect("shape")))
            .collect()
    }))
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<'t, T: Real>(x: Var<'t, T>, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::InvalidShape {
            op: "narrow",
            shape,
            reason: format!("range {start}..{} on axis {axis}", start + len),
        });
    }
    let (outer, inner) = split_axis(&shape, axis);
    let extent = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * extent + start) * inner;
        out.extend_from_slice(&xv.data()[s..s + len * inner]);
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let out = Tensor::new(out_shape, out)?;
    Ok(x.tape().push_op(Rc::new(out), &[x], move |g| {
        let mut gx = Tensor::zeros(shape.clone());
        let gxd = gx.data_mut();
        for (o, chunk) in g.data().chunks(len * inner).enumerate() {
            let s = (o * extent + start) * inner;
            gxd[s..s + len * inner].copy_from_slice(chunk);
        }
        vec![Some(gx)]
    }))
}

/// LayerNorm over the last axis with per-feature affine `gamma`, `beta`.
pub fn layer_norm<'t, T: Real>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let c = *xv.shape().last().ok_or_else(|| Error::InvalidShape {
        op: "layer_norm",
        shape: vec![],
        reason: "rank-0 input".into(),
    })?;
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: xv.shape().to_vec(),
            rhs: gv.shape().to_vec(),
        });
    }
    let eps = T::cst(eps);
    let cn = T::cst(c as f64);
    let rows = xv.numel() / c;
    let mut xhat = vec![T::zero(); xv.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xv.numel()];
    for r in 0..rows {
        let row = &xv.data()[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..c {
            let h = (row[j] - mean) * istd;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gv.data()[j] + bv.data()[j];
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    let shape = xv.shape().to_vec();
    Ok(x.tape().push_op(Rc::new(out), &[x, gamma, beta], move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); gd.len()];
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for r in 0..rows {
            let (gr, hr) = (&gd[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
            let mut mean_dh = T::zero();
            let mut mean_dh_h = T::zero();
            for j in 0..c {
                let dh = gr[j] * gv.data()[j];
                mean_dh = mean_dh + dh;
                mean_dh_h = mean_dh_h + dh * hr[j];
                gg[j] = gg[j] + gr[j] * hr[j];
                gb[j] = gb[j] + gr[j];
            }
            mean_dh = mean_dh / cn;
            mean_dh_h = mean_dh_h / cn;
            for j in 0..c {
                let dh = gr[j] * gv.data()[j];
                gx[r * c + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), gx).expect("shape")),
            Some(Tensor::new(vec![c], gg).expect("shape")),
            Some(Tensor::new(vec![c], gb).expect("shape")),
        ]
    }))
}
