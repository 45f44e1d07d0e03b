//! Raw slice kernels behind the differentiable ops.
//!
//! Every kernel computes each output element on exactly one thread with a
//! fixed reduction order, so results are bitwise identical whatever the
//! partitioning and whether the `parallel` feature is on.

use std::sync::atomic::{AtomicBool, Ordering};

use super::Element;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch between the rayon path and the sequential fallback.
/// Has no effect when the crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Caps the worker count. One worker switches to the sequential path. The
/// pool can only be sized once per process; later calls only toggle the
/// switch.
pub fn set_threads(n: usize) {
    set_parallel(n > 1);
    #[cfg(feature = "parallel")]
    if n > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already sized: {e}");
        }
    }
}

/// Below this many output elements the sequential path wins.
const PAR_MIN_WORK: usize = 1 << 14;

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PAR_MIN_WORK && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PAR_MIN_WORK && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

const MR: usize = 6;
const NR: usize = 32;
/// Depth of one packed block.
const KC: usize = 256;
/// Rows per task; a multiple of `MR`.
const MC: usize = MR * 16;
/// Columns per packed block of `op(b)`; a multiple of `NR`.
const NC: usize = NR * 16;

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

/// `c = op(a) · op(b)` with `op(a)` of shape `m × k` and `op(b)` of shape
/// `k × n`. When `trans_a` is set, `a` is stored as `k × m`; likewise `b`
/// as `n × k` under `trans_b`. `c` is overwritten.
///
/// Every element is a single fused multiply-add chain over `p = 0..k` in
/// order, independent of blocking and threading.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    gemm_blocked(Op { trans_a, trans_b, m, n, k }, a, b, c, true);
}

#[derive(Clone, Copy)]
struct Op {
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
}

fn gemm_blocked<T: Element>(op: Op, a: &[T], b: &[T], c: &mut [T], split: bool) {
    let Op { trans_a, trans_b, m, n, k } = op;
    if k == 0 {
        c.fill(T::zero());
        return;
    }
    let mut b_block = Vec::new();
    for j0 in (0..n).step_by(NC) {
        let nc = NC.min(n - j0);
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            pack_b(trans_b, k, n, b, k0, kc, j0, nc, &mut b_block);
            let tile = |blk: usize, c_rows: &mut [T]| {
                let rows = c_rows.len() / n;
                let a_block = pack_a(trans_a, m, k, a, blk * MC, rows, k0, kc);
                macro_kernel(rows, n, j0, nc, kc, k0 > 0, &a_block, &b_block, c_rows);
            };
            if split {
                for_each_chunk(c, MC * n, m * nc * kc, tile);
            } else {
                c.chunks_mut(MC * n).enumerate().for_each(|(i, ch)| tile(i, ch));
            }
        }
    }
}

/// Packs `op(b)[k0..k0+kc, j0..j0+nc]` into zero-padded panels of width
/// `NR`: panel `jb`, depth `p` at `[(jb·kc + p)·NR ..][..NR]`.
#[allow(clippy::too_many_arguments)]
fn pack_b<T: Element>(trans: bool, k: usize, n: usize, b: &[T], k0: usize, kc: usize, j0: usize, nc: usize, out: &mut Vec<T>) {
    let panels = nc.div_ceil(NR);
    out.clear();
    out.resize(panels * kc * NR, T::zero());
    for jb in 0..panels {
        let c0 = j0 + jb * NR;
        let cols = NR.min(j0 + nc - c0);
        let dst = &mut out[jb * kc * NR..(jb + 1) * kc * NR];
        if trans {
            for j in 0..cols {
                let col = &b[(c0 + j) * k + k0..(c0 + j) * k + k0 + kc];
                for (p, &v) in col.iter().enumerate() {
                    dst[p * NR + j] = v;
                }
            }
        } else {
            for p in 0..kc {
                let src = (k0 + p) * n + c0;
                dst[p * NR..p * NR + cols].copy_from_slice(&b[src..src + cols]);
            }
        }
    }
}

/// Packs `op(a)[i0..i0+rows, k0..k0+kc]` into zero-padded panels of height
/// `MR`: panel `ib`, depth `p` at `[(ib·kc + p)·MR ..][..MR]`.
#[allow(clippy::too_many_arguments)]
fn pack_a<T: Element>(trans: bool, m: usize, k: usize, a: &[T], i0: usize, rows: usize, k0: usize, kc: usize) -> Vec<T> {
    let panels = rows.div_ceil(MR);
    let mut packed = vec![T::zero(); panels * kc * MR];
    for ib in 0..panels {
        let dst = &mut packed[ib * kc * MR..(ib + 1) * kc * MR];
        for r in 0..MR.min(rows - ib * MR) {
            let i = i0 + ib * MR + r;
            if trans {
                for p in 0..kc {
                    dst[p * MR + r] = a[(k0 + p) * m + i];
                }
            } else {
                for (p, &v) in a[i * k + k0..i * k + k0 + kc].iter().enumerate() {
                    dst[p * MR + r] = v;
                }
            }
        }
    }
    packed
}

/// Updates `c_rows[.., j0..j0+nc]` with one packed block product, either
/// overwriting (`accumulate == false`) or continuing the existing chains.
#[allow(clippy::too_many_arguments)]
fn macro_kernel<T: Element>(
    rows: usize,
    n: usize,
    j0: usize,
    nc: usize,
    kc: usize,
    accumulate: bool,
    a_block: &[T],
    b_block: &[T],
    c: &mut [T],
) {
    for jb in 0..nc.div_ceil(NR) {
        let c0 = j0 + jb * NR;
        let cols = NR.min(j0 + nc - c0);
        let bp = &b_block[jb * kc * NR..(jb + 1) * kc * NR];
        for ib in 0..rows.div_ceil(MR) {
            let rr = MR.min(rows - ib * MR);
            let ap = &a_block[ib * kc * MR..(ib + 1) * kc * MR];
            let mut acc = [[T::zero(); NR]; MR];
            if accumulate {
                for (r, acc_r) in acc.iter_mut().enumerate().take(rr) {
                    let off = (ib * MR + r) * n + c0;
                    acc_r[..cols].copy_from_slice(&c[off..off + cols]);
                }
            }
            micro_kernel(ap, bp, &mut acc);
            for (r, acc_r) in acc.iter().enumerate().take(rr) {
                let off = (ib * MR + r) * n + c0;
                c[off..off + cols].copy_from_slice(&acc_r[..cols]);
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Element>(ap: &[T], bp: &[T], acc: &mut [[T; NR]; MR]) {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        let av: &[T; MR] = av.try_into().unwrap();
        let bv: &[T; NR] = bv.try_into().unwrap();
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] = av[r].mul_add(bv[j], acc[r][j]);
            }
        }
    }
}

/// Batched `c[i] = op(a[i]) · op(b[i])` over `batch` independent products.
#[allow(clippy::too_many_arguments)]
pub fn gemm_batched<T: Element>(
    batch: usize,
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    assert_eq!(a.len(), batch * sa);
    assert_eq!(b.len(), batch * sb);
    assert_eq!(c.len(), batch * sc);
    if batch == 1 {
        gemm(trans_a, trans_b, m, n, k, a, b, c);
        return;
    }
    let op = Op { trans_a, trans_b, m, n, k };
    for_each_chunk(c, sc, batch * m * n * k, |i, ci| {
        gemm_blocked(op, &a[i * sa..(i + 1) * sa], &b[i * sb..(i + 1) * sb], ci, false);
    });
}

/// Direct triple loop; reference for the blocked kernel.
pub fn gemm_reference<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                s = s + a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// 1×1, stride 1, no padding: the input already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

impl ConvGeom {
    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let wo = self.out_w();
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.width + self.pad > kj {
            ((self.width + self.pad - kj - 1) / self.stride + 1).min(wo)
        } else {
            0
        };
        lo.min(hi)..hi
    }
}

/// Unfolds one `C × H × W` image into a `(C·kh·kw) × (Ho·Wo)` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_h() * g.out_w();
    im2col_ld(x, g, cols, plane, 0);
}

/// [`im2col`] into a wider matrix: row `r` occupies
/// `cols[r·ld + off ..][..Ho·Wo]`; other columns are left untouched.
pub fn im2col_ld<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let taps = g.kh * g.kw;
    debug_assert_eq!(cols.len(), g.col_rows() * ld);
    let ranges: Vec<_> = (0..g.kw).map(|kj| g.valid_cols(kj)).collect();
    for_each_chunk(cols, taps * ld, g.col_rows() * ho * wo, |c, block| {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let t = ki * g.kw + kj;
                let row = &mut block[t * ld + off..t * ld + off + ho * wo];
                let valid = ranges[kj].clone();
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    dst[..valid.start].fill(T::zero());
                    dst[valid.end..].fill(T::zero());
                    let ix0 = valid.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[valid.clone()].copy_from_slice(&src_row[ix0..ix0 + valid.len()]);
                    } else {
                        for (i, d) in dst[valid.clone()].iter_mut().enumerate() {
                            *d = src_row[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates columns back into a `C × H × W`
/// image (overwriting `x`).
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.out_h() * g.out_w();
    col2im_ld(cols, g, x, plane, 0);
}

/// Adjoint of [`im2col_ld`].
pub fn col2im_ld<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let taps = g.kh * g.kw;
    let hw = g.height * g.width;
    let ranges: Vec<_> = (0..g.kw).map(|kj| g.valid_cols(kj)).collect();
    for_each_chunk(x, hw, g.col_rows() * ho * wo, |c, dst| {
        dst.fill(T::zero());
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let t = (c * taps + ki * g.kw + kj) * ld + off;
                let row = &cols[t..t + ho * wo];
                let valid = ranges[kj].clone();
                if valid.is_empty() {
                    continue;
                }
                let ix0 = valid.start * g.stride + kj - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &row[oy * wo + valid.start..oy * wo + valid.end];
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            drow[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    });
}

/// One output coordinate of a bilinear resize: two source taps and the
/// weight of the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre bilinear taps (`align_corners = false`).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}
