//! Overlap and surface-distance metrics on label volumes.
//!
//! Volumes are `[H, W, D]` with `D` fastest (`(y·W + x)·D + z`); spacing is
//! given in the same axis order. Background (class 0) is not reported.

use std::io::Write;

use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels::map_range;

/// Voxel coordinate `(y, x, z)`.
pub type Point = [usize; 3];

/// `2|P∩G| / (|P| + |G|)`, or 1 when both are empty.
pub fn dsc(p: &[bool], g: &[bool]) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::Input(format!("dsc over grids of {} and {} voxels", p.len(), g.len())));
    }
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        inter += (a && b) as usize;
        sp += a as usize;
        sg += b as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

fn check_dims(len: usize, dims: [usize; 3]) -> Result<()> {
    if dims.iter().product::<usize>() != len {
        return Err(dim_err!("{len} voxels for grid {dims:?}"));
    }
    Ok(())
}

/// Mask voxels with at least one face neighbor outside the mask; the grid
/// border counts as outside. 6-connectivity, or 4-connectivity in-plane
/// when `D == 1`.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Result<Vec<Point>> {
    check_dims(mask.len(), dims)?;
    let [h, w, d] = dims;
    let at = |y: usize, x: usize, z: usize| mask[(y * w + x) * d + z];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                if !at(y, x, z) {
                    continue;
                }
                let mut edge = y == 0 || y + 1 == h || x == 0 || x + 1 == w;
                edge = edge || !at(y - 1, x, z) || !at(y + 1, x, z) || !at(y, x - 1, z) || !at(y, x + 1, z);
                if d > 1 {
                    edge = edge || z == 0 || z + 1 == d || !at(y, x, z - 1) || !at(y, x, z + 1);
                }
                if edge {
                    out.push([y, x, z]);
                }
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &Point, b: &Point, spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let t = (a[i] as f64 - b[i] as f64) * spacing[i];
        s += t * t;
    }
    s
}

/// Physical distance from every point of `from` to its nearest point of
/// `to`, which must be nonempty. Exact: candidates are scanned outward
/// along the first axis until that axis alone exceeds the best distance.
pub fn nearest_distances(from: &[Point], to: &[Point], spacing: [f64; 3]) -> Vec<f64> {
    assert!(!to.is_empty(), "nearest neighbor in an empty set");
    let mut sorted = to.to_vec();
    sorted.sort_unstable();
    let axis = |p: &Point, q: &Point| {
        let t = (p[0] as f64 - q[0] as f64) * spacing[0];
        t * t
    };
    map_range(from.len(), from.len() * 64, |i| {
        let p = &from[i];
        let start = sorted.partition_point(|q| q[0] < p[0]);
        let mut best = f64::INFINITY;
        for q in sorted[start..].iter() {
            if axis(p, q) > best {
                break;
            }
            best = best.min(sq_dist(p, q, spacing));
        }
        for q in sorted[..start].iter().rev() {
            if axis(p, q) > best {
                break;
            }
            best = best.min(sq_dist(p, q, spacing));
        }
        best.sqrt()
    })
}

/// `q`-th percentile (`0 ≤ q ≤ 100`) with linear interpolation between
/// order statistics. `values` must be nonempty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn symmetric_percentile(p: &[Point], g: &[Point], spacing: [f64; 3], q: f64) -> Option<f64> {
    if p.is_empty() || g.is_empty() {
        return None;
    }
    let d_pg = percentile(&nearest_distances(p, g, spacing), q);
    let d_gp = percentile(&nearest_distances(g, p, spacing), q);
    Some(d_pg.max(d_gp))
}

/// Symmetric 95th-percentile Hausdorff distance between two boundary sets;
/// `None` when either is empty.
pub fn hd95(p: &[Point], g: &[Point], spacing: [f64; 3]) -> Option<f64> {
    symmetric_percentile(p, g, spacing, 95.0)
}

/// Classic (maximum) Hausdorff distance.
pub fn hausdorff(p: &[Point], g: &[Point], spacing: [f64; 3]) -> Option<f64> {
    symmetric_percentile(p, g, spacing, 100.0)
}

/// One labelled case to score.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub pred: Vec<u8>,
    pub truth: Vec<u8>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub case_id: String,
    pub class_id: u8,
    /// Fraction in `[0, 1]`.
    pub dsc: f64,
    /// Physical units; `None` when the class is absent from either volume.
    pub hd95: Option<f64>,
}

/// Scores of every foreground class of one case.
pub fn evaluate_case(case: &Case, classes: usize) -> Result<Vec<ClassMetrics>> {
    check_dims(case.pred.len(), case.dims)?;
    check_dims(case.truth.len(), case.dims)?;
    if let Some(&bad) = case.pred.iter().chain(&case.truth).find(|&&l| l as usize >= classes) {
        return Err(Error::Config(format!("case {}: label {bad} outside {classes} classes", case.id)));
    }
    (1..classes)
        .map(|c| {
            let c = c as u8;
            let p: Vec<bool> = case.pred.iter().map(|&l| l == c).collect();
            let g: Vec<bool> = case.truth.iter().map(|&l| l == c).collect();
            Ok(ClassMetrics {
                case_id: case.id.clone(),
                class_id: c,
                dsc: dsc(&p, &g)?,
                hd95: hd95(&boundary(&p, case.dims)?, &boundary(&g, case.dims)?, case.spacing),
            })
        })
        .collect()
}

/// Per-class scores of a set of cases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub classes: usize,
    pub rows: Vec<ClassMetrics>,
}

/// Averages over cases for one class (or all classes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanMetrics {
    pub dsc: f64,
    /// Mean over defined values only.
    pub hd95: Option<f64>,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a ClassMetrics> + Clone) -> MeanMetrics {
    let n = rows.clone().count();
    let dsc = rows.clone().map(|r| r.dsc).sum::<f64>() / n.max(1) as f64;
    let hd: Vec<f64> = rows.filter_map(|r| r.hd95).collect();
    MeanMetrics {
        dsc,
        hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
    }
}

impl MetricReport {
    /// Scores every case, in input order. Cases run concurrently.
    pub fn evaluate(cases: &[Case], classes: usize) -> Result<Self> {
        let work = cases.iter().map(|c| c.pred.len() * classes).sum();
        let per_case = map_range(cases.len(), work, |i| evaluate_case(&cases[i], classes));
        let mut rows = Vec::new();
        for r in per_case {
            rows.extend(r?);
        }
        Ok(Self { classes, rows })
    }

    pub fn class_mean(&self, class_id: u8) -> MeanMetrics {
        mean_of(self.rows.iter().filter(move |r| r.class_id == class_id))
    }

    /// Mean over every (case, class) row.
    pub fn mean(&self) -> MeanMetrics {
        mean_of(self.rows.iter())
    }

    /// `case_id,class_id,dsc_percent,hd95,undefined_flag`, one row per case
    /// and class, then a `mean` row per class and a final `mean,all` row.
    /// Undefined distances are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["case_id", "class_id", "dsc_percent", "hd95", "undefined_flag"])?;
        let fmt = |m: Option<f64>| m.map(|v| v.to_string()).unwrap_or_default();
        let flag = |m: Option<f64>| if m.is_some() { "0" } else { "1" };
        for r in &self.rows {
            w.write_record([
                r.case_id.clone(),
                r.class_id.to_string(),
                (100.0 * r.dsc).to_string(),
                fmt(r.hd95),
                flag(r.hd95).into(),
            ])?;
        }
        for c in 1..self.classes {
            let m = self.class_mean(c as u8);
            w.write_record(["mean".into(), c.to_string(), (100.0 * m.dsc).to_string(), fmt(m.hd95), flag(m.hd95).into()])?;
        }
        let m = self.mean();
        w.write_record(["mean".into(), "all".into(), (100.0 * m.dsc).to_string(), fmt(m.hd95), flag(m.hd95).to_string()])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_examples() {
        let t = [true, true, true, true, false, false];
        let half = [true, true, false, false, true, true];
        assert_eq!(dsc(&t, &t).unwrap(), 1.0);
        assert_eq!(dsc(&t[..2], &[false, false]).unwrap(), 0.0);
        assert_eq!(dsc(&t, &half).unwrap(), 0.5);
        assert_eq!(dsc(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dsc(&t, &half[..3]).is_err());
    }

    #[test]
    fn hd95_examples() {
        assert_eq!(hd95(&[[0, 0, 0]], &[[3, 4, 0]], [1.0; 3]), Some(5.0));
        let p = [[1, 2, 3], [4, 5, 6]];
        assert_eq!(hd95(&p, &p, [1.0, 1.0, 4.0]), Some(0.0));
        assert_eq!(hd95(&p, &[], [1.0; 3]), None);
    }

    #[test]
    fn spacing_scales_distances() {
        assert_eq!(hd95(&[[0, 0, 0]], &[[0, 0, 2]], [1.0, 1.0, 4.0]), Some(8.0));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert!((percentile(&v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_filled_square() {
        // 4×4 plane, 2D mode: the 12 outer voxels are boundary.
        let mask = vec![true; 16];
        let b = boundary(&mask, [4, 4, 1]).unwrap();
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&[1, 1, 0]));
        // 3×3×3 cube in 3D: only the center is interior.
        let b = boundary(&[true; 27], [3, 3, 3]).unwrap();
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[1, 1, 1]));
    }
}
