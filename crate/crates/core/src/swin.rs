//! Shifted-window self-attention blocks applied to a feature map whose pixels
//! are treated as tokens.
//!
//! A [`SwinBlockPair`] runs a plain-window block followed by a block whose
//! windows are displaced by `⌊M/2⌋` through a cyclic roll. Tokens that the
//! roll brings together from distant parts of the map are kept apart by an
//! additive `−1e9` mask.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{ops, Real, Tensor, Var};

pub const MASK_VALUE: f64 = -1e9;

/// Memory order of a feature map handed to the window ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[N, C, H, W]`
    Nchw,
    /// `[N, H, W, C]`
    Nhwc,
}

/// Geometry of a window tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(n: usize, c: usize, h: usize, w: usize, m: usize, shift: usize) -> Result<Self> {
        if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::InvalidShape {
                op: "window_partition",
                shape: vec![n, c, h, w],
                reason: format!("spatial extents must be divisible by window size {m}"),
            });
        }
        if shift != 0 && shift != m / 2 {
            return Err(Error::InvalidArgument(format!(
                "window shift must be 0 or {}, got {shift}",
                m / 2
            )));
        }
        Ok(Self { n, c, h, w, m, shift })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.h / self.m) * (self.w / self.m)
    }

    pub fn num_windows(&self) -> usize {
        self.n * self.windows_per_image()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.m * self.m
    }

    pub fn token_shape(&self) -> [usize; 3] {
        [self.num_windows(), self.tokens_per_window(), self.c]
    }

    fn map_shape(&self, layout: Layout) -> Vec<usize> {
        match layout {
            Layout::Nchw => vec![self.n, self.c, self.h, self.w],
            Layout::Nhwc => vec![self.n, self.h, self.w, self.c],
        }
    }

    /// Rolled map position `(y, x)` of token `t` in window `win` (both within
    /// one image).
    fn source_pixel(&self, win: usize, t: usize) -> (usize, usize) {
        let per_row = self.w / self.m;
        let (wy, wx) = (win / per_row, win % per_row);
        let (iy, ix) = (t / self.m, t % self.m);
        (
            (wy * self.m + iy + self.shift) % self.h,
            (wx * self.m + ix + self.shift) % self.w,
        )
    }

    /// For each token slot, the flat offset of the map element it reads.
    fn partition_index(&self, layout: Layout) -> Vec<usize> {
        let (nw, tw, c) = (self.windows_per_image(), self.tokens_per_window(), self.c);
        let mut idx = Vec::with_capacity(self.n * nw * tw * c);
        for n in 0..self.n {
            for win in 0..nw {
                for t in 0..tw {
                    let (y, x) = self.source_pixel(win, t);
                    for ch in 0..c {
                        idx.push(match layout {
                            Layout::Nchw => ((n * c + ch) * self.h + y) * self.w + x,
                            Layout::Nhwc => ((n * self.h + y) * self.w + x) * c + ch,
                        });
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of [`Self::partition_index`].
    fn merge_index(&self, layout: Layout) -> Vec<usize> {
        let fwd = self.partition_index(layout);
        let mut inv = vec![0; fwd.len()];
        for (slot, &src) in fwd.iter().enumerate() {
            inv[src] = slot;
        }
        inv
    }
}

/// Window-major token sequences `[N·windows, M², C]` and the geometry needed
/// to put them back.
#[derive(Clone, Copy)]
pub struct WindowGrid<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub spec: WindowSpec,
}

fn map_dims(x: &[usize], layout: Layout) -> Result<(usize, usize, usize, usize)> {
    match (x, layout) {
        (&[n, c, h, w], Layout::Nchw) | (&[n, h, w, c], Layout::Nhwc) => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op: "window_partition",
            shape: x.to_vec(),
            reason: "expected a rank-4 feature map".into(),
        }),
    }
}

pub fn window_partition_layout<'t, T: Real>(
    x: Var<'t, T>,
    layout: Layout,
    m: usize,
    shift: usize,
) -> Result<WindowGrid<'t, T>> {
    let (n, c, h, w) = map_dims(&x.shape(), layout)?;
    let spec = WindowSpec::new(n, c, h, w, m, shift)?;
    let tokens = ops::gather(x, Rc::new(spec.partition_index(layout)), &spec.token_shape())?;
    Ok(WindowGrid { tokens, spec })
}

pub fn window_merge_layout<'t, T: Real>(grid: WindowGrid<'t, T>, layout: Layout) -> Result<Var<'t, T>> {
    let spec = grid.spec;
    if grid.tokens.shape() != spec.token_shape() {
        return Err(Error::ShapeMismatch {
            op: "window_merge",
            lhs: grid.tokens.shape(),
            rhs: spec.token_shape().to_vec(),
        });
    }
    ops::gather(grid.tokens, Rc::new(spec.merge_index(layout)), &spec.map_shape(layout))
}

/// Roll an `[N, C, H, W]` map by `(−shift, −shift)` and tile it into `M×M`
/// windows.
pub fn window_partition<'t, T: Real>(x: Var<'t, T>, m: usize, shift: usize) -> Result<WindowGrid<'t, T>> {
    window_partition_layout(x, Layout::Nchw, m, shift)
}

/// Inverse of [`window_partition`], returning `[N, C, H, W]`.
pub fn window_merge<'t, T: Real>(grid: WindowGrid<'t, T>) -> Result<Var<'t, T>> {
    window_merge_layout(grid, Layout::Nchw)
}

/// Additive mask `[windows_per_image, M², M²]` for a shifted tiling: `0` where
/// both tokens come from the same region of the rolled map, `−1e9` otherwise.
/// Returns `None` when `shift == 0`.
pub fn shift_mask<T: Real>(spec: &WindowSpec) -> Option<Tensor<T>> {
    if spec.shift == 0 {
        return None;
    }
    let (m, s) = (spec.m, spec.shift);
    let band = |v: usize, extent: usize| -> usize {
        if v < extent - m {
            0
        } else if v < extent - s {
            1
        } else {
            2
        }
    };
    let per_row = spec.w / m;
    let tw = spec.tokens_per_window();
    let nw = spec.windows_per_image();
    let mut data = Vec::with_capacity(nw * tw * tw);
    for win in 0..nw {
        let (wy, wx) = (win / per_row, win % per_row);
        let labels: Vec<usize> = (0..tw)
            .map(|t| 3 * band(wy * m + t / m, spec.h) + band(wx * m + t % m, spec.w))
            .collect();
        for &a in &labels {
            for &b in &labels {
                data.push(if a == b { T::zero() } else { T::cst(MASK_VALUE) });
            }
        }
    }
    Some(Tensor::new(vec![nw, tw, tw], data).expect("mask shape"))
}

/// Flat index into a `(2M−1)²` bias table for every token pair of an `M×M`
/// window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let tw = m * m;
    let side = 2 * m - 1;
    let mut idx = Vec::with_capacity(tw * tw);
    for i in 0..tw {
        let (ri, ci) = (i / m, i % m);
        for j in 0..tw {
            let (rj, cj) = (j / m, j % m);
            idx.push((ri + m - 1 - rj) * side + (ci + m - 1 - cj));
        }
    }
    idx
}

/// Multi-head attention inside each window with a learned relative-position
/// bias shared by all windows.
#[derive(Debug, Clone)]
pub struct SwinAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `[heads, (2M−1)²]`
    pub bias_table: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
    rel_index: Rc<Vec<usize>>,
}

impl SwinAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {dim} is not divisible by {heads} heads")));
        }
        let side = 2 * window - 1;
        // head-major: index h·T² + p reads table entry h·(2M−1)² + rel(p)
        let rel = relative_position_index(window);
        let rel_index = (0..heads)
            .flat_map(|h| rel.iter().map(move |&r| h * side * side + r))
            .collect();
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, dim)?,
            bias_table: store.add(
                format!("{name}.relative_bias"),
                Tensor::zeros(vec![heads, side * side]),
                ParamKind::Trainable,
            )?,
            heads,
            head_dim: dim / heads,
            window,
            rel_index: Rc::new(rel_index),
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn num_params(dim: usize, heads: usize, window: usize) -> usize {
        4 * Linear::num_params(dim, dim) + heads * (2 * window - 1) * (2 * window - 1)
    }

    /// `[heads, M², M²]` bias gathered from the table.
    pub fn bias<'t, T: Real>(&self, store: &ParamStore<T>, tape: &'t crate::tensor::Tape<T>) -> Result<Var<'t, T>> {
        let tw = self.window * self.window;
        ops::gather(
            tape.param(store, self.bias_table),
            Rc::clone(&self.rel_index),
            &[self.heads, tw, tw],
        )
    }

    /// Attends within each window. `mask` is `[windows_per_image, M², M²]`.
    /// Returns the projected output and the post-softmax weights
    /// `[N·windows, heads, M², M²]`.
    pub fn forward_with_weights<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        grid: WindowGrid<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(WindowGrid<'t, T>, Var<'t, T>)> {
        let spec = grid.spec;
        let x = grid.tokens;
        let [b, tw, c] = spec.token_shape();
        if c != self.dim() || tw != self.window * self.window {
            return Err(Error::ShapeMismatch {
                op: "window_attention",
                lhs: x.shape(),
                rhs: vec![self.window * self.window, self.dim()],
            });
        }
        let (h, d) = (self.heads, self.head_dim);
        let split = |v: Var<'t, T>, axes: &[usize]| -> Result<Var<'t, T>> {
            ops::permute(ops::reshape(v, &[b, tw, h, d])?, axes)
        };
        let q = split(self.q.forward(store, x)?, &[0, 2, 1, 3])?;
        let kt = split(self.k.forward(store, x)?, &[0, 2, 3, 1])?;
        let v = split(self.v.forward(store, x)?, &[0, 2, 1, 3])?;

        let scores = ops::scale(ops::matmul(q, kt)?, 1.0 / (d as f64).sqrt());
        let mut scores = ops::add_broadcast(scores, self.bias(store, x.tape())?)?;
        if let Some(mask) = mask {
            let nw = spec.windows_per_image();
            if mask.shape() != [nw, tw, tw] {
                return Err(Error::ShapeMismatch {
                    op: "window_attention mask",
                    lhs: mask.shape().to_vec(),
                    rhs: vec![nw, tw, tw],
                });
            }
            let mut expanded = Vec::with_capacity(nw * h * tw * tw);
            for win in mask.data().chunks(tw * tw) {
                for _ in 0..h {
                    expanded.extend_from_slice(win);
                }
            }
            let mask = x.tape().constant(Tensor::new(vec![nw, h, tw, tw], expanded)?);
            let s = ops::reshape(scores, &[spec.n, nw, h, tw, tw])?;
            scores = ops::reshape(ops::add_broadcast(s, mask)?, &[b, h, tw, tw])?;
        }
        let weights = ops::softmax_lastdim(scores);
        let ctx = ops::permute(ops::matmul(weights, v)?, &[0, 2, 1, 3])?;
        let out = self.proj.forward(store, ops::reshape(ctx, &[b, tw, c])?)?;
        Ok((WindowGrid { tokens: out, spec }, weights))
    }

    pub fn forward<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        grid: WindowGrid<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<WindowGrid<'t, T>> {
        Ok(self.forward_with_weights(store, grid, mask)?.0)
    }
}

/// `softmax(QKᵀ/√d + B + mask)·V` per window and head, concatenated over
/// heads and projected.
pub fn window_attention<'t, T: Real>(
    attn: &SwinAttention,
    store: &ParamStore<T>,
    grid: WindowGrid<'t, T>,
    mask: Option<&Tensor<T>>,
) -> Result<WindowGrid<'t, T>> {
    attn.forward(store, grid, mask)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc2.forward(store, ops::gelu(self.fc1.forward(store, x)?))
    }
}

/// One transformer block: `x + MSA(LN(x))` then `x + MLP(LN(x))`, with the
/// attention windows shifted by `shift`.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: SwinAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shift: usize,
}

impl SwinBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &SwinConfig,
        dim: usize,
        shift: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SwinAttention::new(store, init, &format!("{name}.attn"), dim, cfg.heads, cfg.window)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, dim * cfg.mlp_ratio)?,
            shift,
        })
    }

    /// The residual attention sub-layer alone on an `[N, H, W, C]` map.
    pub fn attention_sublayer<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.norm1.forward(store, x)?;
        let grid = window_partition_layout(y, Layout::Nhwc, self.attn.window, self.shift)?;
        let mask = shift_mask::<T>(&grid.spec);
        let out = self.attn.forward(store, grid, mask.as_ref())?;
        ops::add(window_merge_layout(out, Layout::Nhwc)?, x)
    }

    /// Applies the block to an `[N, H, W, C]` map.
    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.attention_sublayer(store, x)?;
        let y = self.mlp.forward(store, self.norm2.forward(store, x)?)?;
        ops::add(y, x)
    }

    pub fn num_params(dim: usize, cfg: &SwinConfig) -> usize {
        let hidden = dim * cfg.mlp_ratio;
        4 * dim
            + SwinAttention::num_params(dim, cfg.heads, cfg.window)
            + Linear::num_params(dim, hidden)
            + Linear::num_params(hidden, dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SwinConfig {
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            window: 8,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// A plain-window block followed by a shifted-window block.
#[derive(Debug, Clone)]
pub struct SwinBlockPair {
    pub block1: SwinBlock,
    pub block2: SwinBlock,
}

impl SwinBlockPair {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &SwinConfig, dim: usize) -> Result<Self> {
        Ok(Self {
            block1: SwinBlock::new(store, init, &format!("{name}.block1"), cfg, dim, 0)?,
            block2: SwinBlock::new(store, init, &format!("{name}.block2"), cfg, dim, cfg.window / 2)?,
        })
    }

    /// `[N, C, H, W] → [N, C, H, W]`.
    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tokens = ops::permute(x, &[0, 2, 3, 1])?;
        let z = self.block1.forward(store, tokens)?;
        let z = self.block2.forward(store, z)?;
        ops::permute(z, &[0, 3, 1, 2])
    }

    pub fn num_params(dim: usize, cfg: &SwinConfig) -> usize {
        2 * SwinBlock::num_params(dim, cfg)
    }
}

pub fn swin_pair_forward<'t, T: Real>(
    blocks: &SwinBlockPair,
    store: &ParamStore<T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    blocks.forward(store, x)
}
