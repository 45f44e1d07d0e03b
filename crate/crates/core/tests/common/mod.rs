//! Test-side reference implementations. Deliberately naive: plain loops over
//! `f64` slices, no shared code with the library kernels.

#![allow(dead_code)]

use mosformer_core::attention::{csw_msa, Msa};
use mosformer_core::metrics::Point;
use mosformer_core::tensor::nn::{Ctx, Init};
use mosformer_core::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences (step 1e-5) over every input tensor.
pub fn fd_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let h = 1e-5;
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let scalar = |xs: &[Tensor<f64>]| {
        let g = Graph::no_grad();
        let vs: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vs).value().data()[0]
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[i].numel()]);
        let mut num = Vec::new();
        for c in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            let mut d = inputs[i].data().to_vec();
            d[c] += h;
            xs[i] = Tensor::new(inputs[i].shape().to_vec(), d.clone()).unwrap();
            let up = scalar(&xs);
            d[c] -= 2.0 * h;
            xs[i] = Tensor::new(inputs[i].shape().to_vec(), d).unwrap();
            num.push((up - scalar(&xs)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random coefficients: a scalar loss whose
/// gradient is non-degenerate in every output element.
pub fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = y.graph().constant(random(&y.shape(), seed));
    y.mul(w).unwrap().sum_all()
}

/// Direct cross-correlation over `[N, C, H, W]` with `[O, C, kh, kw]`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.get(&[b, ic, iy as usize, ix as usize]) * w.get(&[oc, ic, i, j]);
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    x.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter()
                .enumerate()
                .map(move |(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `x · w + b` with `x: rows × din`, `w: din × dout` (row-major).
pub fn affine(x: &[f64], w: &[f64], b: &[f64], din: usize) -> Vec<f64> {
    let dout = b.len();
    x.chunks(din)
        .flat_map(|r| {
            (0..dout)
                .map(|o| b[o] + (0..din).map(|i| r[i] * w[i * dout + o]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// Weights of one attention layer, laid out as in the parameter store.
pub struct AttnWeights {
    pub wqkv: Vec<f64>,
    pub bqkv: Vec<f64>,
    pub wproj: Vec<f64>,
    pub bproj: Vec<f64>,
    /// `[heads, (2M−1)²]`
    pub table: Vec<f64>,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
}

/// Plain multi-head attention over an explicit token list. `pos[i]` is the
/// in-plane position of token `i`; the bias looks up the displacement.
/// `allowed(p, q)` removes pairs from the softmax entirely.
pub fn attention(
    tokens: &[Vec<f64>],
    pos: &[(isize, isize)],
    w: &AttnWeights,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let (d, h) = (w.dim, w.heads);
    let dh = d / h;
    let m = w.window as isize;
    let span = (2 * m - 1) as usize;
    let qkv: Vec<Vec<f64>> = tokens.iter().map(|t| affine(t, &w.wqkv, &w.bqkv, d)).collect();
    let n = tokens.len();
    let mut out = vec![vec![0.0; d]; n];
    for head in 0..h {
        for p in 0..n {
            let q = &qkv[p][head * dh..(head + 1) * dh];
            let mut logits = Vec::new();
            let mut keys = Vec::new();
            for qq in 0..n {
                if !allowed(p, qq) {
                    continue;
                }
                let k = &qkv[qq][d + head * dh..d + (head + 1) * dh];
                let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                let dr = (pos[p].0 - pos[qq].0 + m - 1) as usize;
                let dc = (pos[p].1 - pos[qq].1 + m - 1) as usize;
                logits.push(dot / (dh as f64).sqrt() + w.table[head * span * span + dr * span + dc]);
                keys.push(qq);
            }
            let a = softmax(&logits);
            for (wgt, &qq) in a.iter().zip(&keys) {
                let v = &qkv[qq][2 * d + head * dh..2 * d + (head + 1) * dh];
                for c in 0..dh {
                    out[p][head * dh + c] += wgt * v[c];
                }
            }
        }
    }
    out.iter().map(|o| affine(o, &w.wproj, &w.bproj, d)).collect()
}

/// Cross-slice attention over true (unrolled) windows. `maps[s]` is
/// `[H, W, d]` flattened; windows start at `−shift` modulo `M` and are cut
/// at the map border instead of wrapping. Returns updated maps.
pub fn displaced_window_attention(
    maps: &[Vec<f64>],
    h: usize,
    wd: usize,
    w: &AttnWeights,
    shift: usize,
) -> Vec<Vec<f64>> {
    let (d, m) = (w.dim, w.window);
    let group = |v: usize| (v + m - shift) / m;
    let mut out = vec![vec![0.0; h * wd * d]; maps.len()];
    let gy_max = group(h - 1);
    let gx_max = group(wd - 1);
    for gy in 0..=gy_max {
        for gx in 0..=gx_max {
            let mut toks = Vec::new();
            let mut pos = Vec::new();
            let mut addr = Vec::new();
            for (s, map) in maps.iter().enumerate() {
                for y in 0..h {
                    for x in 0..wd {
                        if group(y) == gy && group(x) == gx {
                            let base = (y * wd + x) * d;
                            toks.push(map[base..base + d].to_vec());
                            pos.push((y as isize, x as isize));
                            addr.push((s, base));
                        }
                    }
                }
            }
            if toks.is_empty() {
                continue;
            }
            let res = attention(&toks, &pos, w, |_, _| true);
            for (r, (s, base)) in res.into_iter().zip(addr) {
                out[s][base..base + d].copy_from_slice(&r);
            }
        }
    }
    out
}

/// Like [`fd_error`], but over every weight of a parameter store.
pub fn fd_error_store<F>(store: &mosformer_core::tensor::ParamStore<f64>, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &'g mosformer_core::tensor::ParamStore<f64>) -> Var<'g, f64>,
{
    use mosformer_core::tensor::ParamKind;
    let h = 1e-5;
    let g = Graph::new();
    let grads = g.backward(f(&g, store));
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(id, _)| id).collect();
    for id in ids {
        let base = store.value(id).clone();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; base.numel()]);
        let mut num = Vec::new();
        for c in 0..base.numel() {
            let mut eval = |delta: f64| {
                let mut d = base.data().to_vec();
                d[c] += delta;
                work.set_value(id, Tensor::new(base.shape().to_vec(), d).unwrap()).unwrap();
                let g = Graph::no_grad();
                f(&g, &work).value().data()[0]
            };
            let up = eval(h);
            num.push((up - eval(-h)) / (2.0 * h));
        }
        work.set_value(id, base).unwrap();
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

// Attention fixtures.

pub fn msa_store(dim: usize, heads: usize, m: usize, seed: u64, gain: f64) -> (ParamStore<f64>, Msa) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let msa = Msa::new(&mut store, &mut Init { rng: &mut r }, "a", dim, heads, m).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random(&shape, seed * 100 + k as u64).map(|v| v * gain)).unwrap();
    }
    (store, msa)
}

pub fn weights(store: &ParamStore<f64>, prefix: &str, heads: usize, dim: usize, window: usize) -> AttnWeights {
    let get = |n: &str| store.value(store.id(&format!("{prefix}.{n}")).unwrap()).data().to_vec();
    AttnWeights {
        wqkv: get("qkv.weight"),
        bqkv: get("qkv.bias"),
        wproj: get("proj.weight"),
        bproj: get("proj.bias"),
        table: get("bias_table"),
        heads,
        dim,
        window,
    }
}

/// `[N=1, H, W, d]` maps flattened per slice.
pub fn maps(slices: usize, h: usize, w: usize, d: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..slices).map(|s| random(&[1, h, w, d], seed + s as u64)).collect()
}

pub fn run_csw(store: &ParamStore<f64>, msa: &Msa, xs: &[Tensor<f64>], shift: usize) -> Vec<Tensor<f64>> {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, false);
    let vars: Vec<Var<'_, f64>> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let all: Vec<usize> = (0..xs.len()).collect();
    csw_msa(ctx, &vars, msa, shift, &all).unwrap().iter().map(|v| v.value()).collect()
}

// Loss oracles.

pub fn random_labels(count: usize, classes: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..count).map(|_| r.random_range(0..classes) as u8).collect()
}

/// Logit vector of pixel `(b, y, x)` from an `[N, C, h, w]` tensor.
pub fn pixel(x: &Tensor<f64>, b: usize, y: usize, xx: usize) -> Vec<f64> {
    (0..x.shape()[1]).map(|k| x.get(&[b, k, y, xx])).collect()
}

pub fn ce_oracle(x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let p = softmax(&pixel(x, b, y, xx));
                total -= p[labels[(b * h + y) * w + xx] as usize].ln();
            }
        }
    }
    total / (n * h * w) as f64
}

pub fn dice_oracle(x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut sum_dice = 0.0;
    for k in 0..c {
        let (mut pg, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let p = softmax(&pixel(x, b, y, xx))[k];
                    let g = if labels[(b * h + y) * w + xx] as usize == k { 1.0 } else { 0.0 };
                    pg += p * g;
                    sp += p;
                    sg += g;
                }
            }
        }
        sum_dice += (2.0 * pg + 1e-5) / (sp + sg + 1e-5);
    }
    1.0 - sum_dice / c as f64
}

/// Nearest downsampling written out independently: every `f`-th row and
/// column starting at zero.
pub fn every_nth(labels: &[u8], n: usize, h: usize, w: usize, f: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for b in 0..n {
        for y in (0..h).step_by(f) {
            for x in (0..w).step_by(f) {
                out.push(labels[b * h * w + y * w + x]);
            }
        }
    }
    out
}

// Metric oracles.

pub fn random_points(n: usize, extent: usize, seed: u64) -> Vec<Point> {
    let mut r = rng(seed);
    (0..n).map(|_| [r.random_range(0..extent), r.random_range(0..extent), r.random_range(0..extent)]).collect()
}

/// All pairwise distances, then the interpolated 95th percentile of each
/// directed set of minima.
pub fn brute_hd95(p: &[Point], g: &[Point], sp: [f64; 3]) -> f64 {
    let dist = |a: &Point, b: &Point| {
        let dy = (a[0] as f64 - b[0] as f64) * sp[0];
        let dx = (a[1] as f64 - b[1] as f64) * sp[1];
        let dz = (a[2] as f64 - b[2] as f64) * sp[2];
        (dy * dy + dx * dx + dz * dz).sqrt()
    };
    let directed = |a: &[Point], b: &[Point]| {
        let mut mins: Vec<f64> = a.iter().map(|x| b.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min)).collect();
        mins.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = 0.95 * (mins.len() - 1) as f64;
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        mins[lo] + (rank - lo as f64) * (mins[hi] - mins[lo])
    };
    directed(p, g).max(directed(g, p))
}
