//! Segmentation losses: pixel-wise cross-entropy, soft Dice, and their
//! weighted sum over the three decoder resolutions.
//!
//! Logits are `[N, C0, h, w]`; labels are class indices in row-major
//! `[N, h, w]` order.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::LogitStack;
use crate::tensor::{Element, Tensor, Var};

/// Smoothing added to the numerator and denominator of every Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weights of the full, half and quarter resolution terms.
    pub lambda: [f64; 3],
    /// Weights of cross-entropy and Dice within one resolution.
    pub alpha: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: [0.5, 0.25, 0.125],
            alpha: [0.8, 1.2],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.alpha).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Values of the individual terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleTerms {
    pub ce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<'g, T: Element> {
    pub total: Var<'g, T>,
    /// Full, half and quarter resolution.
    pub scales: [ScaleTerms; 3],
}

/// Checks `logits` against `labels` and returns `(N, C0, h·w)`.
fn dims<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(dim_err!("logits {s:?} must be [N, C0, h, w]"));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != n * plane {
        return Err(dim_err!("{} labels for logits {s:?}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    Ok((n, c, plane))
}

/// Channel softmax at every pixel, same layout as the logits.
fn softmax_channels<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut p = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for i in 0..plane {
            let at = |k: usize| base + k * plane + i;
            let max = (0..c).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
            let mut sum = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                p[at(k)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for k in 0..c {
                p[at(k)] *= inv;
            }
        }
    }
    p
}

/// Mean over pixels of `−log softmax(logits)[label]`.
pub fn ce_loss<'g, T: Element>(logits: Var<'g, T>, labels: &[u8]) -> Result<Var<'g, T>> {
    let x = logits.value();
    let (n, c, plane) = dims(&x, labels)?;
    let xd = x.data();
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * c * plane;
        for i in 0..plane {
            let at = |k: usize| base + k * plane + i;
            let max = (0..c).fold(f64::NEG_INFINITY, |m, k| m.max(xd[at(k)].as_f64()));
            let lse = max + (0..c).map(|k| (xd[at(k)].as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - xd[at(labels[b * plane + i] as usize)].as_f64();
        }
    }
    let count = (n * plane) as f64;
    let labels = labels.to_vec();
    let out = Tensor::scalar(T::of(total / count));
    Ok(logits.graph().push(out, &[logits], move |g, _| {
        let mut dx = softmax_channels(x.data(), n, c, plane);
        let scale = g[0] / T::of(count);
        for b in 0..n {
            for i in 0..plane {
                dx[(b * c + labels[b * plane + i] as usize) * plane + i] -= T::one();
            }
        }
        dx.iter_mut().for_each(|v| *v *= scale);
        vec![Some(dx)]
    }))
}

/// `1 − mean_c (2Σp·g + ε) / (Σp + Σg + ε)` with sums over every pixel of
/// the batch and every class, background included.
pub fn dice_loss<'g, T: Element>(logits: Var<'g, T>, labels: &[u8]) -> Result<Var<'g, T>> {
    let x = logits.value();
    let (n, c, plane) = dims(&x, labels)?;
    let p = softmax_channels(x.data(), n, c, plane);
    // Per class: Σ p·g and Σ p + Σ g.
    let mut inter = vec![0.0f64; c];
    let mut denom = vec![0.0f64; c];
    for b in 0..n {
        for k in 0..c {
            let row = &p[(b * c + k) * plane..(b * c + k + 1) * plane];
            let lab = &labels[b * plane..(b + 1) * plane];
            for (&pv, &l) in row.iter().zip(lab) {
                let pv = pv.as_f64();
                denom[k] += pv;
                if l as usize == k {
                    inter[k] += pv;
                    denom[k] += 1.0;
                }
            }
        }
    }
    let mean_dice = (0..c).map(|k| (2.0 * inter[k] + DICE_EPS) / (denom[k] + DICE_EPS)).sum::<f64>() / c as f64;
    let labels = labels.to_vec();
    let out = Tensor::scalar(T::of(1.0 - mean_dice));
    Ok(logits.graph().push(out, &[logits], move |g, _| {
        // dL/dp[k,i] = −(2·g[k,i]·D_k − (2I_k + ε)) / (C0 · D_k²), D_k = Σp + Σg + ε.
        let coef: Vec<(T, T)> = (0..c)
            .map(|k| {
                let d = denom[k] + DICE_EPS;
                let a = -2.0 / (c as f64 * d);
                let b = (2.0 * inter[k] + DICE_EPS) / (c as f64 * d * d);
                (T::of(a), T::of(b))
            })
            .collect();
        let mut dx = vec![T::zero(); p.len()];
        let mut dp = vec![T::zero(); c];
        for bi in 0..n {
            for i in 0..plane {
                let at = |k: usize| (bi * c + k) * plane + i;
                let l = labels[bi * plane + i] as usize;
                let mut dot = T::zero();
                for k in 0..c {
                    let (a, b) = coef[k];
                    dp[k] = if k == l { a + b } else { b };
                    dot += p[at(k)] * dp[k];
                }
                for k in 0..c {
                    dx[at(k)] = g[0] * p[at(k)] * (dp[k] - dot);
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Nearest-neighbor downsampling of `[N, h, w]` labels by an integer
/// `factor`: output pixel `(y, x)` takes input `(factor·y, factor·x)`.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if labels.len() != n * h * w {
        return Err(dim_err!("{} labels for [{n}, {h}, {w}]", labels.len()));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("label map {h}×{w} not divisible by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.push(labels[(b * h + y * factor) * w + x * factor]);
            }
        }
    }
    Ok(out)
}

/// `α1·CE + α2·Dice` at one resolution.
pub fn scale_loss<'g, T: Element>(logits: Var<'g, T>, labels: &[u8], alpha: [f64; 2]) -> Result<(Var<'g, T>, ScaleTerms)> {
    let ce = ce_loss(logits, labels)?;
    let dice = dice_loss(logits, labels)?;
    let terms = ScaleTerms {
        ce: ce.item().as_f64(),
        dice: dice.item().as_f64(),
    };
    Ok((ce.scale(T::of(alpha[0])).add(dice.scale(T::of(alpha[1])))?, terms))
}

/// `λ1·L(full) + λ2·L(half) + λ3·L(quarter)` against full-resolution
/// labels `[N, H, W]`.
pub fn deep_supervision_loss<'g, T: Element>(
    stack: &LogitStack<'g, T>,
    labels: &[u8],
    weights: &LossWeights,
) -> Result<LossBreakdown<'g, T>> {
    weights.validate()?;
    let s = stack.full.shape();
    if s.len() != 4 {
        return Err(dim_err!("full-resolution logits {s:?} must be [N, C0, H, W]"));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut per_scale = Vec::with_capacity(3);
    let mut scales = [ScaleTerms::default(); 3];
    for (i, (logits, factor)) in [(stack.full, 1), (stack.half, 2), (stack.quarter, 4)].into_iter().enumerate() {
        let ls = logits.shape();
        if ls.len() != 4 || ls[2] * factor != h || ls[3] * factor != w || ls[0] != n {
            return Err(dim_err!("logits {ls:?} are not 1/{factor} of {s:?}"));
        }
        let lab = if factor == 1 { labels.to_vec() } else { downsample_labels(labels, n, h, w, factor)? };
        let (l, terms) = scale_loss(logits, &lab, weights.alpha)?;
        scales[i] = terms;
        per_scale.push(l);
    }
    Ok(LossBreakdown {
        total: combine_scales([per_scale[0], per_scale[1], per_scale[2]], weights.lambda)?,
        scales,
    })
}

/// `λ1·l[0] + λ2·l[1] + λ3·l[2]`.
pub fn combine_scales<'g, T: Element>(l: [Var<'g, T>; 3], lambda: [f64; 3]) -> Result<Var<'g, T>> {
    l[0].scale(T::of(lambda[0]))
        .add(l[1].scale(T::of(lambda[1])))?
        .add(l[2].scale(T::of(lambda[2])))
}
