use std::cell::Cell;
use std::sync::Arc;

use super::kernels::{self, bilinear_taps, ConvGeom};
use super::{numel, Element, Graph, Tensor, Var};
use crate::error::{dim_err, Result};

/// Sentinel in gather indices: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Hooks for negative-control tests of the gradient checker.
pub mod testing {
    use super::Cell;

    thread_local! {
        pub(super) static CORRUPT_LN_BACKWARD: Cell<bool> = const { Cell::new(false) };
    }

    /// Makes layer-norm backward on this thread return a wrong input
    /// gradient, so gradient checks must catch it.
    pub fn corrupt_layer_norm_backward(on: bool) {
        CORRUPT_LN_BACKWARD.with(|c| c.set(on));
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<'g, T: Element> Var<'g, T> {
    fn g(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x + y));
        Ok(self.g().push(out, &[self, other], |g, need| {
            vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x - y));
        Ok(self.g().push(out, &[self, other], |g, need| {
            vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), |x, y| x * y));
        Ok(self.g().push(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| zip_map(g, b.data(), |d, y| d * y)),
                need[1].then(|| zip_map(g, a.data(), |d, x| d * x)),
            ]
        }))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * c);
        self.g().push(out, &[self], move |g, _| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    /// Adds `other`, whose shape is a suffix of `self`'s shape, repeated
    /// over the leading axes.
    pub fn add_broadcast(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(dim_err!("add_broadcast: {sb:?} is not a suffix of {sa:?}"));
        }
        let inner = b.numel();
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            chunk.iter_mut().zip(b.data()).for_each(|(o, &v)| *o += v);
        }
        let out = Tensor::from_parts(sa.to_vec(), out);
        Ok(self.g().push(out, &[self, other], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for chunk in g.chunks(inner) {
                    acc.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                }
                acc
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Adds a per-channel vector along `axis`.
    pub fn add_bias(self, bias: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape().to_vec();
        if axis >= shape.len() || b.numel() != shape[axis] {
            return Err(dim_err!(
                "add_bias: bias of {} entries for axis {axis} of {shape:?}",
                b.numel()
            ));
        }
        let c = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = x.data().to_vec();
        if inner == 1 {
            for row in out.chunks_exact_mut(c) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
        } else {
            for (i, block) in out.chunks_exact_mut(inner).enumerate() {
                let bv = b.data()[i % c];
                block.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.g().push(out, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); c];
                if inner == 1 {
                    for row in g.chunks_exact(c) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                } else {
                    for (i, block) in g.chunks_exact(inner).enumerate() {
                        acc[i % c] += block.iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
                acc
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }))
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v <= T::zero() { T::zero() } else { v });
        self.g().push(out, &[self], move |g, _| {
            vec![Some(zip_map(g, x.data(), |d, v| if v > T::zero() { d } else { T::zero() }))]
        })
    }

    /// GELU, tanh form.
    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let a = T::of((2.0 / std::f64::consts::PI).sqrt());
        let b = T::of(0.044_715);
        let half = T::of(0.5);
        let out = x.map(|v| half * v * (T::one() + tanh(a * (v + b * v * v * v))));
        self.g().push(out, &[self], move |g, _| {
            let three = T::of(3.0);
            vec![Some(zip_map(g, x.data(), |d, v| {
                let t = tanh(a * (v + b * v * v * v));
                let dt = a * (T::one() + three * b * v * v);
                d * (half * (T::one() + t) + half * v * (T::one() - t * t) * dt)
            }))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.g().push(out, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// Covers permutation, padding, cropping, rolling and window
    /// partitioning with one adjoint (scatter-add).
    pub fn gather(self, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if index.len() != numel(out_shape) {
            return Err(dim_err!(
                "gather: {} indices for output {out_shape:?}",
                index.len()
            ));
        }
        let src = x.data();
        let n_in = src.len();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= n_in) {
            return Err(dim_err!("gather: index {bad} out of range {n_in}"));
        }
        let out: Vec<T> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i as usize] })
            .collect();
        let out = Tensor::from_parts(out_shape.to_vec(), out);
        Ok(self.g().push(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); n_in];
            for (&i, &d) in index.iter().zip(g) {
                if i != GATHER_ZERO {
                    dx[i as usize] += d;
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_permutation(shape.len(), axes)?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = Tensor::from_parts(out_shape.clone(), permute_copy(x.data(), &shape, axes));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.g().push(out, &[self], move |g, _| vec![Some(permute_copy(g, &out_shape, &inverse))]))
    }

    /// Sub-range `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow: {start}+{len} on axis {axis} of {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n_in = x.numel();
        Ok(self.g().push(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut dx = vec![T::zero(); n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.numel();
        let s = x.data().iter().fold(T::zero(), |a, &b| a + b);
        self.g().push(Tensor::scalar(s), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum_all().scale(T::one() / T::of(n as f64))
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {sa:?} × {sb:?}"));
        }
        let a3 = self.reshape(&[1, sa[0], sa[1]])?;
        let b3 = other.reshape(&[1, sb[0], sb[1]])?;
        a3.bmm(b3, false, false)?.reshape(&[sa[0], sb[1]])
    }

    /// Batched `op(self) · op(other)` on rank-3 nodes `[batch, ·, ·]`.
    pub fn bmm(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm: {sa:?} × {sb:?}"));
        }
        let batch = sa[0];
        let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(dim_err!(
                "bmm: inner extents {ka} and {kb} differ ({sa:?} × {sb:?}, trans {trans_a}/{trans_b})"
            ));
        }
        let k = ka;
        let mut c = vec![T::zero(); batch * m * n];
        kernels::gemm_batched(batch, trans_a, trans_b, m, n, k, a.data(), b.data(), &mut c);
        let out = Tensor::from_parts(vec![batch, m, n], c);
        Ok(self.g().push(out, &[self, other], move |g, need| {
            // C = op(A)·op(B):  dop(A) = dC·op(B)ᵀ,  dop(B) = op(A)ᵀ·dC.
            let da = need[0].then(|| {
                let mut da = vec![T::zero(); batch * m * k];
                if trans_a {
                    // A is k×m: dA = op(B)·dCᵀ.
                    kernels::gemm_batched(batch, trans_b, true, k, m, n, b.data(), g, &mut da);
                } else {
                    kernels::gemm_batched(batch, false, !trans_b, m, k, n, g, b.data(), &mut da);
                }
                da
            });
            let db = need[1].then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                if trans_b {
                    // B is n×k: dB = dCᵀ·op(A).
                    kernels::gemm_batched(batch, true, trans_a, n, k, m, g, a.data(), &mut db);
                } else {
                    kernels::gemm_batched(batch, !trans_a, false, k, n, m, a.data(), g, &mut db);
                }
                db
            });
            vec![da, db]
        }))
    }

    /// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_bias(b, 1),
            None => Ok(y),
        }
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().expect("rank ≥ 1");
        let mut y = x.data().to_vec();
        kernels::for_each_chunk(&mut y, d, x.numel(), |_, row| softmax_row(row));
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let y_saved = y.clone();
        self.g().push(y, &[self], move |g, _| {
            let yv = y_saved.data();
            let mut dx = vec![T::zero(); yv.len()];
            kernels::for_each_chunk(&mut dx, d, yv.len(), |r, out| {
                let yr = &yv[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for ((o, &yy), &gg) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yy * (gg - dot);
                }
            });
            vec![Some(dx)]
        })
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x.shape().last().expect("rank ≥ 1");
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.numel() != d || bt.numel() != d {
            return Err(dim_err!(
                "layer_norm: affine of {}/{} entries for last dim {d}",
                gm.numel(),
                bt.numel()
            ));
        }
        let rows = x.numel() / d;
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = xr.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *o = (v - mean) * rs;
            }
        }
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gm.data()[i % d] + bt.data()[i % d])
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let corrupt = testing::CORRUPT_LN_BACKWARD.with(|c| c.get());
        Ok(self.g().push(out, &[self, gamma, beta], move |g, need| {
            let gmv = gm.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let (hr, gr) = (&xhat[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gmv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    if corrupt {
                        m2 = T::zero();
                    }
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (gr[j] * gmv[j] - m1 - hr[j] * m2);
                    }
                }
                dx
            });
            let (dg, db) = if need[1] || need[2] {
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (i, (&gv, &h)) in g.iter().zip(&xhat).enumerate() {
                    dg[i % d] += gv * h;
                    db[i % d] += gv;
                }
                (Some(dg), Some(db))
            } else {
                (None, None)
            };
            vec![dx, dg, db]
        }))
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(dim_err!("conv2d: input {sx:?} with kernel {sw:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: zero stride"));
        }
        let (n, o) = (sx[0], sw[0]);
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if geom.height + 2 * pad < geom.kh || geom.width + 2 * pad < geom.kw {
            return Err(dim_err!(
                "conv2d: kernel {}×{} does not fit padded input {}×{}",
                geom.kh,
                geom.kw,
                geom.height + 2 * pad,
                geom.width + 2 * pad
            ));
        }
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let plane = ho * wo;
        let ckk = geom.col_rows();
        let in_sz = geom.channels * geom.height * geom.width;
        let cols_all = move || {
            // `(C·kh·kw) × (N·plane)`: every image unfolded side by side.
            let mut cols = vec![T::zero(); ckk * n * plane];
            for i in 0..n {
                kernels::im2col_ld(&x.data()[i * in_sz..(i + 1) * in_sz], &geom, &mut cols, n * plane, i * plane);
            }
            cols
        };
        let cols = cols_all();
        let mut y_all = vec![T::zero(); o * n * plane];
        kernels::gemm(false, false, o, n * plane, ckk, w.data(), &cols, &mut y_all);
        drop(cols);
        let out = Tensor::from_parts(vec![n, o, ho, wo], fold_batch(&y_all, o, n, plane, false));
        let out_var = self.g().push(out, &[self, weight], move |g, need| {
            let dy_all = fold_batch(g, o, n, plane, true);
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); o * ckk];
                kernels::gemm(false, true, o, ckk, n * plane, &dy_all, &cols_all(), &mut dw);
                dw
            });
            let dx = need[0].then(|| {
                let mut dcols = vec![T::zero(); ckk * n * plane];
                kernels::gemm(true, false, ckk, n * plane, o, w.data(), &dy_all, &mut dcols);
                let mut dx = vec![T::zero(); n * in_sz];
                for i in 0..n {
                    kernels::col2im_ld(&dcols, &geom, &mut dx[i * in_sz..(i + 1) * in_sz], n * plane, i * plane);
                }
                dx
            });
            vec![dx, dw]
        });
        match bias {
            Some(b) => out_var.add_bias(b, 1),
            None => Ok(out_var),
        }
    }

    /// Batch normalization over `(N, H, W)` per channel using the batch's
    /// own statistics. Returns the output with the batch mean and biased
    /// variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: f64,
    ) -> Result<(Var<'g, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || gamma.value().numel() != s[1] || beta.value().numel() != s[1] {
            return Err(dim_err!("batch_norm: input {s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let cnt = T::of((n * hw) as f64);
        let eps = T::of(eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let stats: Vec<(T, T)> = kernels::map_range(c, x.numel(), |ch| {
            let mut sum = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                sum += x.data()[base..base + hw].iter().fold(T::zero(), |a, &b| a + b);
            }
            let mean = sum / cnt;
            let mut sq = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                sq += x.data()[base..base + hw]
                    .iter()
                    .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean));
            }
            (mean, sq / cnt)
        });
        let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
        let var: Vec<T> = stats.iter().map(|s| s.1).collect();
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for (idx, v) in xhat.iter_mut().enumerate() {
            let ch = (idx / hw) % c;
            *v = (*v - mean[ch]) * rstd[ch];
        }
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(idx, &h)| {
                let ch = (idx / hw) % c;
                h * gm.data()[ch] + bt.data()[ch]
            })
            .collect();
        let out = Tensor::from_parts(s.clone(), y);
        let var_out = var.clone();
        let mean_out = mean.clone();
        let v = self.g().push(out, &[self, gamma, beta], move |g, need| {
            // Per-channel reductions Σ dy and Σ dy·x̂.
            let sums: Vec<(T, T)> = kernels::map_range(c, g.len(), |ch| {
                let mut sd = T::zero();
                let mut sdh = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        sd += g[j];
                        sdh += g[j] * xhat[j];
                    }
                }
                (sd, sdh)
            });
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                for (idx, o) in dx.iter_mut().enumerate() {
                    let ch = (idx / hw) % c;
                    let (sd, sdh) = sums[ch];
                    *o = gm.data()[ch] * rstd[ch] / cnt * (cnt * g[idx] - sd - xhat[idx] * sdh);
                }
                dx
            });
            let dg = need[1].then(|| sums.iter().map(|s| s.1).collect());
            let db = need[2].then(|| sums.iter().map(|s| s.0).collect());
            vec![dx, dg, db]
        });
        Ok((v, mean_out, var_out))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || mean.len() != s[1] || var.len() != s[1] {
            return Err(dim_err!("batch_norm: input {s:?}"));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let eps = T::of(eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let y: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let ch = (idx / hw) % c;
                (v - mean[ch]) * rstd[ch] * gm.data()[ch] + bt.data()[ch]
            })
            .collect();
        let out = Tensor::from_parts(s, y);
        Ok(self.g().push(out, &[self, gamma, beta], move |g, need| {
            let dx = need[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(idx, &d)| {
                        let ch = (idx / hw) % c;
                        d * rstd[ch] * gm.data()[ch]
                    })
                    .collect()
            });
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            if need[1] || need[2] {
                for (idx, &d) in g.iter().enumerate() {
                    let ch = (idx / hw) % c;
                    dg[ch] += d * (x.data()[idx] - mean[ch]) * rstd[ch];
                    db[ch] += d;
                }
            }
            vec![dx, need[1].then_some(dg), need[2].then_some(db)]
        }))
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`
    /// (half-pixel centres).
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(dim_err!("upsample: input {s:?} to {out_h}×{out_w}"));
        }
        let (h, w) = (s[2], s[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let planes = s[0] * s[1];
        let mut y = vec![T::zero(); planes * out_h * out_w];
        kernels::for_each_chunk(&mut y, out_h * out_w, planes * out_h * out_w, |p, out| {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (oy, t) in ty.iter().enumerate() {
                let fy = T::of(t.frac);
                for (ox, u) in tx.iter().enumerate() {
                    let fx = T::of(u.frac);
                    let top = src[t.lo * w + u.lo] * (T::one() - fx) + src[t.lo * w + u.hi] * fx;
                    let bot = src[t.hi * w + u.lo] * (T::one() - fx) + src[t.hi * w + u.hi] * fx;
                    out[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        });
        let out = Tensor::from_parts(vec![s[0], s[1], out_h, out_w], y);
        Ok(self.g().push(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); planes * h * w];
            kernels::for_each_chunk(&mut dx, h * w, g.len(), |p, dst| {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, t) in ty.iter().enumerate() {
                    let fy = T::of(t.frac);
                    for (ox, u) in tx.iter().enumerate() {
                        let fx = T::of(u.frac);
                        let d = gp[oy * out_w + ox];
                        let (dt, db) = (d * (T::one() - fy), d * fy);
                        dst[t.lo * w + u.lo] += dt * (T::one() - fx);
                        dst[t.lo * w + u.hi] += dt * fx;
                        dst[t.hi * w + u.lo] += db * (T::one() - fx);
                        dst[t.hi * w + u.hi] += db * fx;
                    }
                }
            });
            vec![Some(dx)]
        }))
    }
}

/// Concatenates nodes along `axis`.
pub fn concat<'g, T: Element>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero nodes"))?;
    let graph = first.graph;
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(dim_err!("concat: axis {axis} for rank {}", base.len()));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
        {
            return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
        }
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &wd) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total / inner;
    Ok(graph.push(Tensor::from_parts(shape, out), parts, move |g, need| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for (&wd, &nd) in widths.iter().zip(need) {
            if nd {
                let mut d = Vec::with_capacity(outer * wd);
                for o in 0..outer {
                    d.extend_from_slice(&g[o * total + offset..o * total + offset + wd]);
                }
                grads.push(Some(d));
            } else {
                grads.push(None);
            }
            offset += wd;
        }
        grads
    }))
}

fn check_permutation(rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(dim_err!("permute: {axes:?} is not a permutation of rank {rank}"));
    }
    Ok(())
}

/// `src` (row-major, `shape`) with its axes reordered to `axes`.
fn permute_copy<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let total = numel(shape);
    if rank == 0 || total == 0 {
        return src.to_vec();
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let (inner, inner_stride) = (out_shape[rank - 1], out_strides[rank - 1]);
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..total / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            base += out_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= counter[d] * out_strides[d];
            counter[d] = 0;
        }
    }
    out
}

/// Row-major source index for every element of `x.permute(axes)`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<Vec<u32>> {
    let rank = shape.len();
    check_permutation(rank, axes)?;
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let src: usize = counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum();
        index.push(src as u32);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok(index)
}

pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Swaps the two leading axes of a `[a, b, plane]` buffer: `[o, n, plane]`
/// to `[n, o, plane]`, or back when `to_channel_major` is set.
fn fold_batch<T: Element>(src: &[T], o: usize, n: usize, plane: usize, to_channel_major: bool) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for i in 0..n {
        for oc in 0..o {
            let (a, b) = ((oc * n + i) * plane, (i * o + oc) * plane);
            let (from, to) = if to_channel_major { (b, a) } else { (a, b) };
            dst[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
    dst
}

/// `tanh` through one `exp`; saturates cleanly at ±1.
#[inline]
fn tanh<T: Element>(z: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}
