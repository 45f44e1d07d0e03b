//! Manifests, labelled volumes, in-plane resizing and slice batches.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::VolumeFile;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

/// `image,label,split` rows; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let entries = rd.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Image `[C, H, W, D]` with its label grid `[H, W, D]`.
#[derive(Clone, Debug)]
pub struct LabelledVolume<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub labels: Vec<u8>,
    pub spacing: [f64; 3],
}

impl<T: Element> LabelledVolume<T> {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    /// Image resized bilinearly and labels by nearest neighbor to
    /// `size × size` in-plane; depth unchanged.
    pub fn resized(&self, size: usize) -> Self {
        let [h, w, d] = self.dims();
        if (h, w) == (size, size) {
            return self.clone();
        }
        Self {
            id: self.id.clone(),
            image: resize_volume(&self.image, size, size),
            labels: resize_labels(&self.labels, [h, w, d], size, size),
            spacing: [
                self.spacing[0] * h as f64 / size as f64,
                self.spacing[1] * w as f64 / size as f64,
                self.spacing[2],
            ],
        }
    }
}

/// Loads every volume of `split`. Label files must declare `classes`.
pub fn load_split<T: Element>(manifest: &Manifest, split: Split, classes: usize) -> Result<Vec<LabelledVolume<T>>> {
    manifest
        .split(split)
        .map(|e| {
            let (ip, lp) = (manifest.resolve(&e.image), manifest.resolve(&e.label));
            let img = VolumeFile::load(&ip)?;
            let lbl = VolumeFile::load(&lp)?;
            if lbl.classes != Some(classes as u32) {
                return Err(Error::Config(format!(
                    "{} declares {:?} classes, model has {classes}",
                    lp.display(),
                    lbl.classes
                )));
            }
            if img.dims() != lbl.dims() {
                return Err(Error::Data(format!(
                    "{} is {:?} but its labels are {:?}",
                    ip.display(),
                    img.dims(),
                    lbl.dims()
                )));
            }
            let id = e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LabelledVolume {
                id,
                image: img.to_tensor()?,
                labels: lbl.label_data()?.to_vec(),
                spacing: img.spacing,
            })
        })
        .collect()
}

/// Source coordinate of output index `i` under half-pixel alignment.
fn source(i: usize, inn: usize, out: usize) -> f64 {
    ((i as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64)
}

/// Bilinear in-plane resize of a `[C, H, W, D]` volume.
pub fn resize_volume<T: Element>(v: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = v.shape();
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    let src = v.data();
    let mut out = Vec::with_capacity(c * oh * ow * d);
    for ch in 0..c {
        for y in 0..oh {
            let sy = source(y, h, oh);
            let (y0, fy) = (sy.floor() as usize, T::of(sy.fract()));
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..ow {
                let sx = source(x, w, ow);
                let (x0, fx) = (sx.floor() as usize, T::of(sx.fract()));
                let x1 = (x0 + 1).min(w - 1);
                let at = |yy: usize, xx: usize, z: usize| src[((ch * h + yy) * w + xx) * d + z];
                for z in 0..d {
                    let top = at(y0, x0, z) + fx * (at(y0, x1, z) - at(y0, x0, z));
                    let bot = at(y1, x0, z) + fx * (at(y1, x1, z) - at(y1, x0, z));
                    out.push(top + fy * (bot - top));
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow, d], out).expect("sized above")
}

/// Nearest-neighbor in-plane resize of a `[H, W, D]` label grid.
pub fn resize_labels(labels: &[u8], [h, w, d]: [usize; 3], oh: usize, ow: usize) -> Vec<u8> {
    let near = |i: usize, inn: usize, out: usize| (((i as f64 + 0.5) * inn as f64 / out as f64) as usize).min(inn - 1);
    let mut out = Vec::with_capacity(oh * ow * d);
    for y in 0..oh {
        let sy = near(y, h, oh);
        for x in 0..ow {
            let sx = near(x, w, ow);
            out.extend_from_slice(&labels[(sy * w + sx) * d..(sy * w + sx + 1) * d]);
        }
    }
    out
}

/// One training batch: targets `[N, C, H, W]`, the `2s` neighbor batches
/// and labels `[N, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub target: Tensor<T>,
    pub neighbors: Vec<Tensor<T>>,
    pub labels: Vec<u8>,
    /// `(volume, slice)` of every sample.
    pub picks: Vec<(usize, usize)>,
}

/// Flips the two trailing axes of a `[1, C, H, W]` or `[H, W]` buffer.
fn flip_plane<E: Copy>(data: &[E], h: usize, w: usize, fy: bool, fx: bool) -> Vec<E> {
    let planes = data.len() / (h * w);
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in 0..h {
            let sy = if fy { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if fx { w - 1 - x } else { x };
                out.push(data[(p * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Draws slices uniformly over every slice of every volume.
pub fn sample_batch<T: Element>(
    model: &Model,
    volumes: &[LabelledVolume<T>],
    batch: usize,
    flips: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let total: usize = volumes.iter().map(|v| v.dims()[2]).sum();
    if total == 0 {
        return Err(Error::Input("no training slices".into()));
    }
    let mut targets = Vec::with_capacity(batch);
    let mut neighbors: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(batch); 2 * model.cfg.s];
    let mut labels = Vec::new();
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut k = rng.random_range(0..total);
        let mut vi = 0;
        while k >= volumes[vi].dims()[2] {
            k -= volumes[vi].dims()[2];
            vi += 1;
        }
        let vol = &volumes[vi];
        let [h, w, d] = vol.dims();
        let (fy, fx) = if flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
        let flip = |t: Tensor<T>| Tensor::new(t.shape().to_vec(), flip_plane(t.data(), h, w, fy, fx));
        let (t, nb) = model.gather_slices(&vol.image, &[k])?;
        targets.push(flip(t)?);
        for (slot, n) in neighbors.iter_mut().zip(nb) {
            slot.push(flip(n)?);
        }
        let plane: Vec<u8> = (0..h * w).map(|p| vol.labels[p * d + k]).collect();
        labels.extend(flip_plane(&plane, h, w, fy, fx));
        picks.push((vi, k));
    }
    Ok(Batch {
        target: Tensor::cat0(&targets)?,
        neighbors: neighbors.iter().map(|n| Tensor::cat0(n)).collect::<Result<_>>()?,
        labels,
        picks,
    })
}
