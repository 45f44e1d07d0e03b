//! Synthetic labelled volumes: ellipsoids in physical coordinates over a
//! noisy background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{LabelledVolume, Manifest, ManifestEntry, Split};
use super::volume::VolumeFile;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Axis-aligned ellipsoid; center and radii in physical units along
/// (H, W, D). Voxel `(y, x, z)` sits at `(y·sy, x·sx, z·sz)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub class: u8,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut r = 0.0;
        for i in 0..3 {
            let t = (p[i] - self.center[i]) / self.radii[i];
            r += t * t;
        }
        r <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[H, W, D]`.
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// `C0`, background included.
    pub classes: usize,
    /// Drawn in order; later shapes overwrite earlier ones.
    pub shapes: Vec<Ellipsoid>,
    /// Mean intensity per class.
    pub intensities: Vec<f64>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Per-volume center offsets are uniform in `±jitter` (physical units).
    pub jitter: f64,
    /// Per-volume radii are scaled by a factor uniform in `1 ± radius_jitter`.
    pub radius_jitter: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// 20 + 5 volumes of 64×64×24 at spacing 1:1:4 with three organs.
    pub fn desk() -> Self {
        Self {
            extents: [64, 64, 24],
            spacing: [1.0, 1.0, 4.0],
            classes: 4,
            shapes: vec![
                Ellipsoid { center: [22.0, 20.0, 44.0], radii: [13.0, 10.0, 30.0], class: 1 },
                Ellipsoid { center: [40.0, 43.0, 50.0], radii: [10.0, 13.0, 26.0], class: 2 },
                Ellipsoid { center: [45.0, 18.0, 40.0], radii: [7.0, 7.0, 18.0], class: 3 },
            ],
            intensities: vec![0.0, 1.0, -1.0, 2.0],
            noise: 1.0,
            jitter: 4.0,
            radius_jitter: 0.15,
            train: 20,
            test: 5,
            seed: 0,
        }
    }

    /// Eight organs on a 128×128×32 grid, resized to the network input
    /// under `Preset::Paper`.
    pub fn paper() -> Self {
        let mut shapes = Vec::new();
        for (i, &y) in [30.0, 70.0].iter().enumerate() {
            for (j, &x) in [18.0, 40.0, 62.0, 84.0].iter().enumerate() {
                let class = (4 * i + j + 1) as u8;
                shapes.push(Ellipsoid { center: [y, x, 46.0], radii: [12.0, 9.0, 30.0], class });
            }
        }
        Self {
            extents: [128, 128, 32],
            spacing: [0.8, 0.8, 3.0],
            classes: 9,
            shapes,
            intensities: (0..9).map(|c| [0.0, 1.0, -1.0][c % 3] + (c / 3) as f64).collect(),
            ..Self::desk()
        }
    }

    /// Complete spec from a TOML file, validated.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::Config(format!("phantom extents {:?} must be positive", self.extents)));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("phantom spacing {:?} must be positive", self.spacing)));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("phantom class count {} outside 2..=256", self.classes)));
        }
        if self.intensities.len() != self.classes {
            return Err(Error::Config(format!(
                "{} intensities for {} classes",
                self.intensities.len(),
                self.classes
            )));
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0) || !(0.0..1.0).contains(&self.radius_jitter) {
            return Err(Error::Config("noise and jitter must be nonnegative, radius jitter below 1".into()));
        }
        if self.train + self.test == 0 {
            return Err(Error::Config("phantom dataset is empty".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.class == 0 || s.class as usize >= self.classes {
                return Err(Error::Config(format!("shape {i}: class {} outside 1..{}", s.class, self.classes)));
            }
            for a in 0..3 {
                let top = (self.extents[a] - 1) as f64 * self.spacing[a];
                if !(s.radii[a] > 0.0) || !(0.0..=top).contains(&s.center[a]) {
                    return Err(Error::Config(format!("shape {i} lies outside the grid")));
                }
            }
        }
        Ok(())
    }

    /// Label grid `[H, W, D]` (D fastest) of `shapes` drawn in order. The
    /// second value counts labelled voxels that a later shape overwrote.
    pub fn rasterize(&self, shapes: &[Ellipsoid]) -> (Vec<u8>, usize) {
        let [h, w, d] = self.extents;
        let sp = self.spacing;
        let mut labels = vec![0u8; h * w * d];
        let mut overwritten = 0;
        for s in shapes {
            // Index range covering the bounding box.
            let range = |a: usize, n: usize| {
                let lo = ((s.center[a] - s.radii[a]) / sp[a]).floor().max(0.0) as usize;
                let hi = ((s.center[a] + s.radii[a]) / sp[a]).ceil().max(0.0) as usize;
                lo.min(n)..(hi + 1).min(n)
            };
            for y in range(0, h) {
                for x in range(1, w) {
                    for z in range(2, d) {
                        if s.contains([y as f64 * sp[0], x as f64 * sp[1], z as f64 * sp[2]]) {
                            let l = &mut labels[(y * w + x) * d + z];
                            overwritten += (*l != 0 && *l != s.class) as usize;
                            *l = s.class;
                        }
                    }
                }
            }
        }
        (labels, overwritten)
    }

    /// Image `[1, H, W, D]` and labels of volume `index`. Deterministic in
    /// `(seed, index)`.
    pub fn generate(&self, index: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let shapes: Vec<Ellipsoid> = self
            .shapes
            .iter()
            .map(|s| {
                let mut e = *s;
                for a in 0..3 {
                    if self.jitter > 0.0 {
                        e.center[a] += rng.random_range(-self.jitter..=self.jitter);
                    }
                }
                if self.radius_jitter > 0.0 {
                    let f = rng.random_range(1.0 - self.radius_jitter..=1.0 + self.radius_jitter);
                    e.radii = e.radii.map(|r| r * f);
                }
                e
            })
            .collect();
        let (labels, overwritten) = self.rasterize(&shapes);
        if overwritten > 0 {
            log::warn!("phantom {index}: {overwritten} voxels overwritten by later shapes");
        }
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let [h, w, d] = self.extents;
        let image = Tensor::from_fn(&[1, h, w, d], |i| {
            let base = self.intensities[labels[i] as usize];
            let n = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n) as f32
        });
        Ok((image, labels))
    }

    /// Volumes of `split` as the loader would return them after
    /// `write_dataset`: train cases first, then test cases.
    pub fn volumes<T: Element>(&self, split: Split) -> Result<Vec<LabelledVolume<T>>> {
        let range = match split {
            Split::Train => 0..self.train,
            Split::Test => self.train..self.train + self.test,
            Split::Val => 0..0,
        };
        range
            .map(|i| {
                let (image, labels) = self.generate(i)?;
                Ok(LabelledVolume { id: format!("case_{i:03}_img"), image: image.cast(), labels, spacing: self.spacing })
            })
            .collect()
    }

    /// Writes `case_NNN_img.mvol` / `case_NNN_lbl.mvol` for every volume and
    /// `manifest.csv` into `dir`.
    pub fn write_dataset(&self, dir: &Path) -> Result<Manifest> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for i in 0..self.train + self.test {
            let (image, labels) = self.generate(i)?;
            let img = format!("case_{i:03}_img.mvol");
            let lbl = format!("case_{i:03}_lbl.mvol");
            VolumeFile::image(&image, self.spacing)?.save(&dir.join(&img))?;
            VolumeFile::labels(labels, self.extents, self.spacing, self.classes as u32)?.save(&dir.join(&lbl))?;
            entries.push(ManifestEntry {
                image: img.into(),
                label: lbl.into(),
                split: if i < self.train { Split::Train } else { Split::Test },
            });
        }
        let manifest = Manifest { root: dir.to_path_buf(), entries };
        manifest.save(&dir.join("manifest.csv"))?;
        Ok(manifest)
    }
}
