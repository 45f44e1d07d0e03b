//! Index arithmetic for window attention: partitioning a channel-last map
//! into `M × M` windows, cyclic shifts, the shifted-window mask and the
//! relative-position index.
//!
//! Everything here is a pure function of extents; the tensor-level
//! operations are expressed as gathers over these maps.

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor, Var};

/// Additive mask value for token pairs that must not attend to each other.
pub const MASK_NEG: f64 = -1e9;

/// Windows of one map: `[num_windows, M·M, d]` tokens plus the raster
/// origin of every window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor<T>,
    /// `(row, col)` of each window's top-left pixel.
    pub origins: Vec<(usize, usize)>,
}

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(dim_err!("extent {h}×{w} not divisible by window {m}"));
    }
    Ok(())
}

/// Splits a `d × H × W` map into raster-ordered windows of `M²` tokens.
pub fn partition_windows<T: Element>(fmap: &Tensor<T>, m: usize) -> Result<WindowGrid<T>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(dim_err!("partition expects d×H×W, got {s:?}"));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    check_divisible(h, w, m)?;
    let (nh, nw) = (h / m, w / m);
    let mut data = Vec::with_capacity(fmap.numel());
    let mut origins = Vec::with_capacity(nh * nw);
    for wy in 0..nh {
        for wx in 0..nw {
            origins.push((wy * m, wx * m));
            for ty in 0..m {
                for tx in 0..m {
                    for c in 0..d {
                        data.push(fmap.data()[(c * h + wy * m + ty) * w + wx * m + tx]);
                    }
                }
            }
        }
    }
    Ok(WindowGrid {
        window: m,
        height: h,
        width: w,
        tokens: Tensor::new(vec![nh * nw, m * m, d], data)?,
        origins,
    })
}

/// Exact inverse of [`partition_windows`].
pub fn reverse_windows<T: Element>(grid: &WindowGrid<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let m = grid.window;
    check_divisible(h, w, m)?;
    let s = grid.tokens.shape();
    if grid.height != h || grid.width != w || s.len() != 3 || s[0] != (h / m) * (w / m) || s[1] != m * m {
        return Err(dim_err!(
            "window grid {s:?} (M={m}, {}×{}) inconsistent with {h}×{w}",
            grid.height,
            grid.width
        ));
    }
    let d = s[2];
    let nw = w / m;
    let mut out = vec![T::zero(); d * h * w];
    for (win, chunk) in grid.tokens.data().chunks(m * m * d).enumerate() {
        let (wy, wx) = (win / nw, win % nw);
        for t in 0..m * m {
            let (y, x) = (wy * m + t / m, wx * m + t % m);
            for c in 0..d {
                out[(c * h + y) * w + x] = chunk[t * d + c];
            }
        }
    }
    Tensor::new(vec![d, h, w], out)
}

/// Toroidal roll of the last two axes: `out[y][x] = in[y − Δh][x − Δw]`
/// (indices modulo the extent).
pub fn cyclic_shift<T: Element>(fmap: &Tensor<T>, dh: isize, dw: isize) -> Tensor<T> {
    let s = fmap.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = fmap.numel() / (h * w);
    let mut out = Vec::with_capacity(fmap.numel());
    for p in 0..planes {
        for y in 0..h {
            let sy = (y as isize - dh).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dw).rem_euclid(w as isize) as usize;
                out.push(fmap.data()[(p * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Region label of every pixel of an `H × W` map that was rolled by
/// `−shift` before partitioning. Pixels in different regions come from
/// non-adjacent parts of the original map.
fn shift_regions(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let band = |v: usize, e: usize| -> usize {
        if v < e - m {
            0
        } else if v < e - shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(band(y, h) * 3 + band(x, w));
        }
    }
    ids
}

/// Additive attention mask `[num_windows, M², M²]` for the shifted layer:
/// 0 for pairs from the same pre-shift region, [`MASK_NEG`] otherwise. All
/// zeros when `shift == 0`.
pub fn shift_attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<Tensor<f64>> {
    check_divisible(h, w, m)?;
    let (nh, nw) = (h / m, w / m);
    let t = m * m;
    let mut mask = vec![0.0; nh * nw * t * t];
    if shift > 0 {
        let ids = shift_regions(h, w, m, shift);
        for wy in 0..nh {
            for wx in 0..nw {
                let base = (wy * nw + wx) * t * t;
                let region = |k: usize| ids[(wy * m + k / m) * w + wx * m + k % m];
                for p in 0..t {
                    for q in 0..t {
                        if region(p) != region(q) {
                            mask[base + p * t + q] = MASK_NEG;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, t, t], mask)
}

/// `index[p][q] = (Δrow + M − 1)·(2M − 1) + (Δcol + M − 1)` for tokens `p`,
/// `q` of one window (raster order), `Δ = pos(p) − pos(q)`.
pub fn relative_position_index(m: usize) -> Vec<Vec<usize>> {
    let t = m * m;
    let span = 2 * m - 1;
    (0..t)
        .map(|p| {
            (0..t)
                .map(|q| {
                    let dr = (p / m) as isize - (q / m) as isize + m as isize - 1;
                    let dc = (p % m) as isize - (q % m) as isize + m as isize - 1;
                    dr as usize * span + dc as usize
                })
                .collect()
        })
        .collect()
}

/// Layout of the joint cross-slice windows for one feature-map geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointLayout {
    pub slices: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub shift: usize,
}

impl JointLayout {
    pub fn padded(&self) -> (usize, usize) {
        let m = self.window;
        (self.height.div_ceil(m) * m, self.width.div_ceil(m) * m)
    }

    pub fn windows_per_image(&self) -> usize {
        let (hp, wp) = self.padded();
        (hp / self.window) * (wp / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.slices * self.window * self.window
    }

    /// Padded-and-rolled coordinate → original coordinate, `None` inside
    /// the zero padding.
    fn source_pixel(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (hp, wp) = self.padded();
        let sy = (y + self.shift) % hp;
        let sx = (x + self.shift) % wp;
        (sy < self.height && sx < self.width).then_some((sy, sx))
    }

    /// Gather index from the stacked `[S, N, H, W, d]` slices to the joint
    /// windows `[N·nW, S·M², d]` (slice-major within a window).
    pub fn gather_index(&self) -> Vec<u32> {
        let (m, d) = (self.window, self.channels);
        let (_, wp) = self.padded();
        let nwx = wp / m;
        let nwin = self.windows_per_image();
        let t = self.tokens_per_window();
        let mut idx = Vec::with_capacity(self.batch * nwin * t * d);
        for n in 0..self.batch {
            for win in 0..nwin {
                let (wy, wx) = (win / nwx, win % nwx);
                for s in 0..self.slices {
                    for k in 0..m * m {
                        let (y, x) = (wy * m + k / m, wx * m + k % m);
                        match self.source_pixel(y, x) {
                            Some((sy, sx)) => {
                                let base = (((s * self.batch + n) * self.height + sy) * self.width + sx) * d;
                                idx.extend((0..d).map(|c| (base + c) as u32));
                            }
                            None => idx.extend(std::iter::repeat_n(crate::tensor::GATHER_ZERO, d)),
                        }
                    }
                }
            }
        }
        idx
    }

    /// Gather index from joint windows back to slice `s` as `[N, H, W, d]`.
    pub fn scatter_index(&self, s: usize) -> Vec<u32> {
        let (m, d) = (self.window, self.channels);
        let (hp, wp) = self.padded();
        let nwx = wp / m;
        let nwin = self.windows_per_image();
        let t = self.tokens_per_window();
        let mut idx = Vec::with_capacity(self.batch * self.height * self.width * d);
        for n in 0..self.batch {
            for y in 0..self.height {
                for x in 0..self.width {
                    // Position of original pixel (y, x) in the rolled map.
                    let ry = (y + hp - self.shift % hp) % hp;
                    let rx = (x + wp - self.shift % wp) % wp;
                    let win = (ry / m) * nwx + rx / m;
                    let k = (ry % m) * m + rx % m;
                    let base = ((n * nwin + win) * t + s * m * m + k) * d;
                    idx.extend((0..d).map(|c| (base + c) as u32));
                }
            }
        }
        idx
    }

    /// Relative-bias gather index `[heads, T, T]` into a `[heads, (2M−1)²]`
    /// table; the in-plane displacement is shared across slice offsets.
    pub fn bias_index(&self, heads: usize) -> Vec<u32> {
        let m = self.window;
        let rel = relative_position_index(m);
        let t = self.tokens_per_window();
        let table = (2 * m - 1) * (2 * m - 1);
        let mut idx = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for p in 0..t {
                for q in 0..t {
                    idx.push((h * table + rel[p % (m * m)][q % (m * m)]) as u32);
                }
            }
        }
        idx
    }

    /// Shift mask broadcast to `[nW, heads, T, T]`, or `None` for the
    /// regular layer.
    pub fn mask<T: Element>(&self, heads: usize) -> Result<Option<Tensor<T>>> {
        if self.shift == 0 {
            return Ok(None);
        }
        let (hp, wp) = self.padded();
        let m = self.window;
        let base = shift_attention_mask(hp, wp, m, self.shift)?;
        let (nwin, mm, t) = (self.windows_per_image(), m * m, self.tokens_per_window());
        let mut data = Vec::with_capacity(nwin * heads * t * t);
        for win in 0..nwin {
            for _ in 0..heads {
                for p in 0..t {
                    for q in 0..t {
                        data.push(T::of(base.data()[(win * mm + p % mm) * mm + q % mm]));
                    }
                }
            }
        }
        Ok(Some(Tensor::new(vec![nwin, heads, t, t], data)?))
    }
}

/// Stacks `[N, H, W, d]` slices and gathers joint windows `[N·nW, T, d]`.
pub fn to_joint_windows<'g, T: Element>(slices: &[Var<'g, T>], layout: &JointLayout) -> Result<Var<'g, T>> {
    let parts: Vec<Var<'g, T>> = slices
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend(s.shape());
            s.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    let stacked = crate::tensor::concat(&parts, 0)?;
    let shape = [
        layout.batch * layout.windows_per_image(),
        layout.tokens_per_window(),
        layout.channels,
    ];
    stacked.gather(Arc::new(layout.gather_index()), &shape)
}

/// Splits joint windows back into per-slice `[N, H, W, d]` maps.
pub fn from_joint_windows<'g, T: Element>(
    joint: Var<'g, T>,
    layout: &JointLayout,
    which: &[usize],
) -> Result<Vec<Var<'g, T>>> {
    let shape = [layout.batch, layout.height, layout.width, layout.channels];
    which
        .iter()
        .map(|&s| joint.gather(Arc::new(layout.scatter_index(s)), &shape))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn four_by_four_into_two_by_two_windows() {
        let x = ramp(&[1, 4, 4]);
        let g = partition_windows(&x, 2).unwrap();
        assert_eq!(g.tokens.shape(), &[4, 4, 1]);
        assert_eq!(g.origins, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        // First window holds pixels (0,0) (0,1) (1,0) (1,1).
        assert_eq!(&g.tokens.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(reverse_windows(&g, 4, 4).unwrap(), x);
    }

    #[test]
    fn full_map_window() {
        let x = ramp(&[3, 5, 5]);
        let g = partition_windows(&x, 5).unwrap();
        assert_eq!(g.tokens.shape(), &[1, 25, 3]);
        assert_eq!(reverse_windows(&g, 5, 5).unwrap(), x);
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        assert!(partition_windows(&ramp(&[1, 5, 4]), 2).is_err());
        let g = partition_windows(&ramp(&[1, 4, 4]), 2).unwrap();
        assert!(reverse_windows(&g, 4, 6).is_err());
    }

    #[test]
    fn shift_two_by_two() {
        // [[a,b],[c,d]] rolled by (1,1) → [[d,c],[b,a]]
        let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = cyclic_shift(&x, 1, 1);
        assert_eq!(y.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&x, 0, 0), x);
    }

    #[test]
    fn unshifted_mask_is_zero() {
        let m = shift_attention_mask(8, 8, 4, 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_window_mask_by_region_ids() {
        // 4×4, M=2, roll by −1: the bottom-right window gathers pixels from
        // four regions of the original map.
        let (h, w, m, shift) = (4, 4, 2, 1);
        let mask = shift_attention_mask(h, w, m, shift).unwrap();
        // Brute force: region of rolled pixel = which displaced window the
        // original pixel falls in (boundaries at `shift`, `shift + M`, …).
        let region = |y: usize, x: usize| {
            let (oy, ox) = ((y + shift) % h, (x + shift) % w);
            ((oy + m - shift) / m, (ox + m - shift) / m)
        };
        for wy in 0..2 {
            for wx in 0..2 {
                let win = wy * 2 + wx;
                for p in 0..4 {
                    for q in 0..4 {
                        let pp = (wy * m + p / m, wx * m + p % m);
                        let qq = (wy * m + q / m, wx * m + q % m);
                        let expect = if region(pp.0, pp.1) == region(qq.0, qq.1) { 0.0 } else { MASK_NEG };
                        assert_eq!(mask.get(&[win, p, q]), expect, "window {win} pair {p},{q}");
                    }
                }
            }
        }
        let corner: Vec<f64> = mask.data()[3 * 16..4 * 16].to_vec();
        let blocked = corner.iter().filter(|&&v| v != 0.0).count();
        // Four singleton regions: only the diagonal is open.
        assert_eq!(blocked, 12);
    }

    #[test]
    fn relative_index_small_cases() {
        assert_eq!(relative_position_index(1), vec![vec![0]]);
        let r = relative_position_index(2);
        for (p, row) in r.iter().enumerate() {
            assert_eq!(row[p], 4);
        }
    }

    #[test]
    fn relative_index_mirror_pairs() {
        for m in 1..=4 {
            let r = relative_position_index(m);
            let top = (2 * m - 1) * (2 * m - 1) - 1;
            for p in 0..m * m {
                for q in 0..m * m {
                    assert!(r[p][q] <= top);
                    assert_eq!(r[p][q] + r[q][p], top, "M={m} p={p} q={q}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_round_trip(d in 1usize..4, nh in 1usize..4, nw in 1usize..4, m in 1usize..5, seed in 0u64..1000) {
            let (h, w) = (nh * m, nw * m);
            let x = Tensor::<f64>::from_fn(&[d, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64);
            let g = partition_windows(&x, m).unwrap();
            prop_assert_eq!(g.tokens.shape()[0], nh * nw);
            prop_assert_eq!(reverse_windows(&g, h, w).unwrap(), x);
        }

        #[test]
        fn shift_round_trip(h in 1usize..9, w in 1usize..9, dh in -9isize..9, dw in -9isize..9) {
            let x = Tensor::<f64>::from_fn(&[2, h, w], |i| i as f64);
            let back = cyclic_shift(&cyclic_shift(&x, dh, dw), -dh, -dw);
            prop_assert_eq!(back, x);
        }

        #[test]
        fn joint_gather_scatter_round_trip(
            slices in 1usize..4, batch in 1usize..3, h in 1usize..7, w in 1usize..7,
            m in 1usize..4, shifted in any::<bool>(),
        ) {
            let layout = JointLayout {
                slices, batch, height: h, width: w, channels: 2, window: m,
                shift: if shifted { m / 2 } else { 0 },
            };
            let g = crate::tensor::Graph::<f64>::no_grad();
            let maps: Vec<_> = (0..slices)
                .map(|s| g.constant(Tensor::from_fn(&[batch, h, w, 2], |i| (s * 1000 + i) as f64)))
                .collect();
            let joint = to_joint_windows(&maps, &layout).unwrap();
            let all: Vec<usize> = (0..slices).collect();
            let back = from_joint_windows(joint, &layout, &all).unwrap();
            for (a, b) in maps.iter().zip(&back) {
                prop_assert_eq!(a.value(), b.value());
            }
        }
    }
}
