//! Multi-head self-attention over window tokens, in its cross-slice form
//! and the plain single-slice form.

use std::sync::Arc;

use rand::Rng;

use super::window::{
    cyclic_shift, from_joint_windows, partition_windows, relative_position_index, shift_attention_mask,
    to_joint_windows, JointLayout,
};
use crate::error::{dim_err, Result};
use crate::tensor::nn::{Ctx, Init, Linear};
use crate::tensor::{Element, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Projections and relative-position bias of one attention layer.
#[derive(Clone, Debug)]
pub struct Msa {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[heads, (2M−1)²]`, one table per head.
    pub bias_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
}

impl Msa {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(dim_err!("dim {dim} not divisible by {heads} heads"));
        }
        if window == 0 {
            return Err(dim_err!("window size must be positive"));
        }
        let span = 2 * window - 1;
        Ok(Self {
            qkv: Linear::new(store, init, &format!("{prefix}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, init, &format!("{prefix}.proj"), dim, dim),
            bias_table: store.insert(
                format!("{prefix}.bias_table"),
                init.normal(&[heads, span * span], 0.02),
                ParamKind::Weight,
            ),
            heads,
            dim,
            window,
        })
    }

    /// Attention probabilities `[B·heads, T, T]` and values `[B·heads, T, dh]`
    /// for window tokens `[B, T, d]`. `mask` is `[nW, heads, T, T]`, with
    /// `B` a multiple of `nW`.
    pub fn probs<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        tokens: Var<'a, T>,
        bias_index: &Arc<Vec<u32>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'a, T>, Var<'a, T>)> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(dim_err!("attention tokens {shape:?}, expected [B, T, {}]", self.dim));
        }
        let (b, t, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;
        let qkv = self
            .qkv
            .forward(ctx, tokens)?
            .reshape(&[b, t, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b * h, t, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.bmm(k, false, true)?.scale(T::of(1.0 / (dh as f64).sqrt()));
        let bias = ctx.p(self.bias_table).gather(bias_index.clone(), &[h, t, t])?;
        let mut scores = scores.reshape(&[b, h, t, t])?.add_broadcast(bias)?;
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            if mask.shape() != [nw, h, t, t] || b % nw != 0 {
                return Err(dim_err!("mask {:?} for {b} windows of {t} tokens", mask.shape()));
            }
            scores = scores
                .reshape(&[b / nw, nw, h, t, t])?
                .add_broadcast(ctx.graph.constant(mask.clone()))?;
        }
        Ok((scores.reshape(&[b * h, t, t])?.softmax_lastdim(), v))
    }

    /// Attention output `[B, T, d]` after the output projection.
    pub fn attend<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        tokens: Var<'a, T>,
        bias_index: &Arc<Vec<u32>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'a, T>> {
        let shape = tokens.shape();
        let (b, t, h) = (shape[0], shape[1], self.heads);
        let (attn, v) = self.probs(ctx, tokens, bias_index, mask)?;
        let out = attn
            .bmm(v, false, false)?
            .reshape(&[b, h, t, self.dim / h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        self.proj.forward(ctx, out)
    }
}

/// Cross-slice window attention over `2s+1` channel-last maps `[N, H, W, d]`.
///
/// Every spatial window gathers its `M²` tokens from all slices into one
/// joint window; `shift > 0` selects the shifted partition with its mask.
/// Returns the updated maps of the slices listed in `which`.
pub fn csw_msa<'a, T: Element>(
    ctx: Ctx<'a, T>,
    slices: &[Var<'a, T>],
    msa: &Msa,
    shift: usize,
    which: &[usize],
) -> Result<Vec<Var<'a, T>>> {
    let layout = joint_layout(slices, msa, shift)?;
    if let Some(&bad) = which.iter().find(|&&s| s >= slices.len()) {
        return Err(dim_err!("slice {bad} requested from {} slices", slices.len()));
    }
    let joint = to_joint_windows(slices, &layout)?;
    let bias = Arc::new(layout.bias_index(msa.heads));
    let mask = layout.mask::<T>(msa.heads)?;
    let out = msa.attend(ctx, joint, &bias, mask.as_ref())?;
    from_joint_windows(out, &layout, which)
}

pub(crate) fn joint_layout<T: Element>(slices: &[Var<'_, T>], msa: &Msa, shift: usize) -> Result<JointLayout> {
    let first = slices.first().ok_or_else(|| dim_err!("cross-slice attention over zero slices"))?;
    let shape = first.shape();
    if shape.len() != 4 || shape[3] != msa.dim {
        return Err(dim_err!("slice map {shape:?}, expected [N, H, W, {}]", msa.dim));
    }
    if let Some(other) = slices.iter().map(|s| s.shape()).find(|s| *s != shape) {
        return Err(dim_err!("slice maps disagree: {shape:?} vs {other:?}"));
    }
    if shift >= msa.window {
        return Err(dim_err!("shift {shift} must be smaller than window {}", msa.window));
    }
    Ok(JointLayout {
        slices: slices.len(),
        batch: shape[0],
        height: shape[1],
        width: shape[2],
        channels: shape[3],
        window: msa.window,
        shift,
    })
}

/// Single-slice window attention on `[N, H, W, d]` built from the explicit
/// roll → partition → reverse → unroll sequence. `H` and `W` must be
/// multiples of the window.
pub fn w_msa<'a, T: Element>(ctx: Ctx<'a, T>, x: Var<'a, T>, msa: &Msa, shift: usize) -> Result<Var<'a, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[3] != msa.dim {
        return Err(dim_err!("map {shape:?}, expected [N, H, W, {}]", msa.dim));
    }
    let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let m = msa.window;
    // Source positions of every windowed token, obtained by running the
    // index map itself through roll and partition.
    let plane = Tensor::<f64>::from_fn(&[1, h, w], |i| i as f64);
    let rolled = cyclic_shift(&plane, -(shift as isize), -(shift as isize));
    let grid = partition_windows(&rolled, m)?;
    let nw = grid.tokens.shape()[0];
    let t = m * m;
    let mut gather = Vec::with_capacity(n * h * w * d);
    for b in 0..n {
        for &pix in grid.tokens.data() {
            let base = (b * h * w + pix as usize) * d;
            gather.extend((0..d).map(|c| (base + c) as u32));
        }
    }
    let tokens = x.gather(Arc::new(gather), &[n * nw, t, d])?;

    let rel = relative_position_index(m);
    let span = (2 * m - 1) * (2 * m - 1);
    let bias: Vec<u32> = (0..msa.heads)
        .flat_map(|hd| rel.iter().flatten().map(move |&r| (hd * span + r) as u32).collect::<Vec<_>>())
        .collect();
    let mask = if shift > 0 {
        let base = shift_attention_mask(h, w, m, shift)?;
        let data: Vec<T> = (0..nw)
            .flat_map(|win| {
                let block = &base.data()[win * t * t..(win + 1) * t * t];
                std::iter::repeat_n(block, msa.heads).flatten().map(|&v| T::of(v))
            })
            .collect();
        Some(Tensor::new(vec![nw, msa.heads, t, t], data)?)
    } else {
        None
    };
    let out = msa.attend(ctx, tokens, &Arc::new(bias), mask.as_ref())?;

    // Token k of the windowed output sits at raster position grid[k].
    let mut inverse = vec![0u32; n * h * w * d];
    for b in 0..n {
        for (k, &pix) in grid.tokens.data().iter().enumerate() {
            for c in 0..d {
                inverse[(b * h * w + pix as usize) * d + c] = ((b * nw * t + k) * d + c) as u32;
            }
        }
    }
    out.gather(Arc::new(inverse), &[n, h, w, d])
}
