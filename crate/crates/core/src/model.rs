//! Full network: dual encoding, per-scale slice fusion, U-shaped decoder,
//! segmentation and deep-supervision heads, and slice-wise volume
//! inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{IfTrans, IfTransConfig, NeighborUpdate};
use crate::encoders::{DualEncoder, EncoderConfig, EncoderMode, Pyramid, PYRAMID_LEVELS};
use crate::error::{dim_err, Error, Result};
use crate::tensor::nn::{BatchNorm2d, Conv2d, Ctx, Init};
use crate::tensor::{concat, Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Feature scales that can host a fusion block, as input-size divisors.
pub const FUSION_SCALES: [usize; 4] = [2, 4, 8, 16];

/// How neighbor indices beyond the first or last slice are resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Repeat the edge slice.
    #[default]
    Clamp,
    /// Reflect about the edge slice.
    Mirror,
}

impl BoundaryMode {
    pub fn resolve(self, index: isize, depth: usize) -> usize {
        let last = depth as isize - 1;
        match self {
            BoundaryMode::Clamp => index.clamp(0, last) as usize,
            BoundaryMode::Mirror => {
                if last == 0 {
                    return 0;
                }
                let period = 2 * last;
                let r = index.rem_euclid(period);
                (if r > last { period - r } else { r }) as usize
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels `C`.
    pub in_channels: usize,
    /// Label classes `C0`, background included.
    pub classes: usize,
    /// Neighbors on each side of the target slice.
    pub s: usize,
    /// Subset of [`FUSION_SCALES`].
    pub fusion_scales: Vec<usize>,
    pub encoder: EncoderConfig,
    pub encoder_mode: EncoderMode,
    pub window: usize,
    /// Channels per attention head.
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub neighbor_update: NeighborUpdate,
    /// Output channels of the five decoder blocks, coarse to fine.
    pub decoder_channels: [usize; 5],
    pub boundary: BoundaryMode,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            classes: 4,
            s: 1,
            fusion_scales: FUSION_SCALES.to_vec(),
            encoder: EncoderConfig::desk(),
            encoder_mode: EncoderMode::DualMomentum,
            window: 4,
            head_dim: 16,
            mlp_ratio: 4.0,
            neighbor_update: NeighborUpdate::Joint,
            decoder_channels: [64, 32, 16, 16, 16],
            boundary: BoundaryMode::Clamp,
        }
    }

    pub fn paper() -> Self {
        Self {
            classes: 9,
            encoder: EncoderConfig::resnet50(),
            window: 7,
            head_dim: 32,
            decoder_channels: [512, 256, 128, 64, 32],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.fusion_scales.is_empty() {
            return Err(Error::Config("fusion scale set is empty".into()));
        }
        if let Some(bad) = self.fusion_scales.iter().find(|s| !FUSION_SCALES.contains(s)) {
            return Err(Error::Config(format!("fusion scale {bad} not one of {FUSION_SCALES:?}")));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        self.encoder.validate()?;
        for k in 0..PYRAMID_LEVELS {
            self.fusion_config(k).validate()?;
        }
        Ok(())
    }

    /// Fusion block settings for pyramid level `k` (0-based).
    pub fn fusion_config(&self, k: usize) -> IfTransConfig {
        let dim = self.encoder.level_channels()[k];
        IfTransConfig {
            window: self.window,
            dim,
            heads: (dim / self.head_dim.max(1)).max(1),
            s: self.s,
            mlp_ratio: self.mlp_ratio,
            neighbor_update: self.neighbor_update,
        }
    }

    /// Whether pyramid level `k` is fused. Both 1/16 maps follow scale 16.
    pub fn fuses_level(&self, k: usize) -> bool {
        let scale = FUSION_SCALES[k.min(FUSION_SCALES.len() - 1)];
        self.fusion_scales.contains(&scale)
    }
}

/// Logits at full, half and quarter resolution, `[N, C0, ·, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct LogitStack<'a, T: Element> {
    pub full: Var<'a, T>,
    pub half: Var<'a, T>,
    pub quarter: Var<'a, T>,
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), cin, cout, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        Ok(self.bn.forward(ctx, self.conv.forward(ctx, x)?)?.relu())
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    upsample: bool,
    convs: [ConvBnRelu; 2],
}

impl DecoderBlock {
    fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>, skip: Option<Var<'a, T>>) -> Result<Var<'a, T>> {
        let mut h = x;
        if self.upsample {
            let s = h.shape();
            h = h.upsample_bilinear(2 * s[2], 2 * s[3])?;
        }
        if let Some(skip) = skip {
            h = concat(&[h, skip], 1)?;
        }
        let h = self.convs[0].forward(ctx, h)?;
        self.convs[1].forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoders: DualEncoder,
    /// One fusion block per pyramid level, `None` where fusion is off.
    pub fusion: Vec<Option<IfTrans>>,
    decoder: Vec<DecoderBlock>,
    head_full: Conv2d,
    head_half: Conv2d,
    head_quarter: Conv2d,
}

impl Model {
    /// Builds the network and registers its parameters in `store`. `m` is the
    /// momentum coefficient of the neighborhood encoder.
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: ModelConfig, m: f64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init { rng };
        let encoders = DualEncoder::new(store, &mut init, cfg.in_channels, &cfg.encoder, cfg.encoder_mode, m)?;
        let fusion = (0..PYRAMID_LEVELS)
            .map(|k| {
                cfg.fuses_level(k)
                    .then(|| IfTrans::new(store, &mut init, &format!("ift.k{}", k + 1), cfg.fusion_config(k)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let lc = cfg.encoder.level_channels();
        let dc = cfg.decoder_channels;
        // (input channels, upsample) per block; skips are levels 3, 2, 1, 0, none.
        let inputs = [
            (lc[4] + lc[3], false),
            (dc[0] + lc[2], true),
            (dc[1] + lc[1], true),
            (dc[2] + lc[0], true),
            (dc[3], true),
        ];
        let decoder = inputs
            .iter()
            .enumerate()
            .map(|(i, &(cin, upsample))| DecoderBlock {
                upsample,
                convs: [
                    ConvBnRelu::new(store, &mut init, &format!("dec.b{i}.c1"), cin, dc[i]),
                    ConvBnRelu::new(store, &mut init, &format!("dec.b{i}.c2"), dc[i], dc[i]),
                ],
            })
            .collect();
        let c0 = cfg.classes;
        let head_full = Conv2d::new(store, &mut init, "head.full", dc[4], c0, 1, 1, 0, true);
        let head_half = Conv2d::new(store, &mut init, "head.half", dc[2], c0, 1, 1, 0, true);
        let head_quarter = Conv2d::new(store, &mut init, "head.quarter", dc[1], c0, 1, 1, 0, true);
        Ok(Self {
            cfg,
            encoders,
            fusion,
            decoder,
            head_full,
            head_half,
            head_quarter,
        })
    }

    /// Weights updated by the optimizer: everything except a momentum
    /// encoder.
    pub fn trainable_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    /// Momentum-encoder parameters (empty unless in momentum mode).
    pub fn momentum_ids(&self) -> Vec<ParamId> {
        if self.cfg.encoder_mode == EncoderMode::DualMomentum {
            self.encoders.pairs().iter().map(|&(_, m)| m).collect()
        } else {
            Vec::new()
        }
    }

    /// Fused per-level target maps.
    fn fuse<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        target: &Pyramid<'a, T>,
        neighbors: &[Pyramid<'a, T>],
    ) -> Result<Vec<Var<'a, T>>> {
        let s = self.cfg.s;
        (0..PYRAMID_LEVELS)
            .map(|k| match &self.fusion[k] {
                None => Ok(target.levels[k]),
                Some(block) => {
                    let mut slices: Vec<Var<'a, T>> = neighbors[..s].iter().map(|p| p.levels[k]).collect();
                    slices.push(target.levels[k]);
                    slices.extend(neighbors[s..].iter().map(|p| p.levels[k]));
                    block.forward(ctx, &slices)
                }
            })
            .collect()
    }

    /// `target: [N, C, H, W]`; `neighbors` are the `2s` slices ordered
    /// `i−s, …, i−1, i+1, …, i+s`.
    pub fn forward<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        target: Var<'a, T>,
        neighbors: &[Var<'a, T>],
    ) -> Result<LogitStack<'a, T>> {
        let shape = target.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(dim_err!(
                "input {shape:?} does not match [N, {}, H, W]",
                self.cfg.in_channels
            ));
        }
        let (tp, np) = self.encoders.encode(ctx, target, neighbors, 2 * self.cfg.s)?;
        let f = self.fuse(ctx, &tp, &np)?;
        let d0 = self.decoder[0].forward(ctx, f[4], Some(f[3]))?;
        let d1 = self.decoder[1].forward(ctx, d0, Some(f[2]))?;
        let d2 = self.decoder[2].forward(ctx, d1, Some(f[1]))?;
        let d3 = self.decoder[3].forward(ctx, d2, Some(f[0]))?;
        let d4 = self.decoder[4].forward(ctx, d3, None)?;
        let up2 = |x: Var<'a, T>| {
            let s = x.shape();
            x.upsample_bilinear(2 * s[2], 2 * s[3])
        };
        Ok(LogitStack {
            full: self.head_full.forward(ctx, d4)?,
            half: self.head_half.forward(ctx, up2(d2)?)?,
            quarter: self.head_quarter.forward(ctx, up2(d1)?)?,
        })
    }

    /// Argmax labels `[H, W, D]` for a volume `[C, H, W, D]`, one slice at a
    /// time in eval mode, `batch` target slices per forward pass.
    pub fn predict_volume<T: Element>(&self, store: &ParamStore<T>, volume: &Tensor<T>, batch: usize) -> Result<Vec<u8>> {
        let s = volume.shape();
        if s.len() != 4 {
            return Err(dim_err!("volume {s:?} must be [C, H, W, D]"));
        }
        let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "volume has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        if d == 0 {
            return Err(Error::Input("empty volume".into()));
        }
        let mut labels = vec![0u8; h * w * d];
        let batch = batch.max(1);
        let starts: Vec<usize> = (0..d).step_by(batch).collect();
        for start in starts {
            let idx: Vec<usize> = (start..(start + batch).min(d)).collect();
            let (target, neighbors) = self.gather_slices(volume, &idx)?;
            let g = Graph::no_grad();
            let ctx = Ctx::new(&g, store, false);
            let nb: Vec<Var<'_, T>> = neighbors.into_iter().map(|t| g.constant(t)).collect();
            let logits = self.forward(ctx, g.constant(target), &nb)?.full.value();
            let c0 = self.cfg.classes;
            for (bi, &z) in idx.iter().enumerate() {
                for p in 0..h * w {
                    let mut best = 0;
                    let mut best_v = logits.data()[(bi * c0) * h * w + p];
                    for k in 1..c0 {
                        let v = logits.data()[(bi * c0 + k) * h * w + p];
                        if v > best_v {
                            best = k;
                            best_v = v;
                        }
                    }
                    labels[p * d + z] = best as u8;
                }
            }
        }
        Ok(labels)
    }

    /// Target batch `[n, C, H, W]` and the `2s` neighbor batches for slices
    /// `indices` of a `[C, H, W, D]` volume.
    pub fn gather_slices<T: Element>(&self, volume: &Tensor<T>, indices: &[usize]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let s = self.cfg.s as isize;
        let depth = volume.shape()[3];
        let offsets: Vec<isize> = (-s..=s).filter(|&o| o != 0).collect();
        let take = |off: isize| -> Result<Tensor<T>> {
            let slices: Vec<Tensor<T>> = indices
                .iter()
                .map(|&i| slice_of(volume, self.cfg.boundary.resolve(i as isize + off, depth)))
                .collect();
            Tensor::cat0(&slices)
        };
        Ok((take(0)?, offsets.into_iter().map(take).collect::<Result<_>>()?))
    }
}

/// Slice `z` of a `[C, H, W, D]` volume as `[1, C, H, W]`.
pub fn slice_of<T: Element>(volume: &Tensor<T>, z: usize) -> Tensor<T> {
    let s = volume.shape();
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    let data = volume.data();
    Tensor::from_fn(&[1, c, h, w], |i| data[i * d + z])
}
