//! Residual CNN encoder and the target / neighborhood encoder pair.
//!
//! The target encoder (θ1) is trained by backpropagation. Depending on
//! [`EncoderMode`], neighbor slices go through θ1 as well, through an
//! independently trained copy, or through a momentum copy θ2 that only
//! changes via [`DualEncoder::momentum_update`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::nn::{BatchNorm2d, Conv2d, Ctx, Init};
use crate::tensor::{concat, Element, ParamId, ParamStore, Var};

/// Strides of the four residual stages after the stride-2 stem.
pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];

/// Number of maps in a [`Pyramid`]: four scales plus the stride-1 bottom.
pub const PYRAMID_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (4× reduction).
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: [usize; 4],
    pub blocks: [usize; 4],
    pub block: BlockKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small encoder used for tests and synthetic runs.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: 3,
            stage_channels: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            block: BlockKind::Basic,
        }
    }

    /// ResNet-50 layout with the last stage kept at stride 1.
    pub fn resnet50() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stage_channels: [256, 512, 1024, 2048],
            blocks: [3, 4, 6, 3],
            block: BlockKind::Bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config("every encoder stage needs at least one block".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config(format!("stem kernel {} must be odd", self.stem_kernel)));
        }
        if self.block == BlockKind::Bottleneck && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("bottleneck stage channels must be multiples of 4".into()));
        }
        Ok(())
    }

    /// Channels of the five pyramid maps.
    pub fn level_channels(&self) -> [usize; PYRAMID_LEVELS] {
        let s = self.stage_channels;
        [self.stem_channels, s[0], s[1], s[2], s[3]]
    }
}

/// Encoder outputs for one batch: maps at 1/2, 1/4, 1/8, 1/16 of the input,
/// then the stride-1 bottom map at 1/16.
#[derive(Clone, Debug)]
pub struct Pyramid<'a, T: Element> {
    pub levels: Vec<Var<'a, T>>,
}

impl<'a, T: Element> Pyramid<'a, T> {
    pub fn bottom(&self) -> Var<'a, T> {
        self.levels[PYRAMID_LEVELS - 1]
    }

    /// Rows `start..start+len` of every level.
    fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            levels: self.levels.iter().map(|l| l.narrow(0, start, len)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    body: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        kind: BlockKind,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let body = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(store, init, &format!("{name}.a"), cin, cout, 3, stride),
                ConvBn::new(store, init, &format!("{name}.b"), cout, cout, 3, 1),
            ],
            BlockKind::Bottleneck => {
                let mid = cout / 4;
                vec![
                    ConvBn::new(store, init, &format!("{name}.a"), cin, mid, 1, 1),
                    ConvBn::new(store, init, &format!("{name}.b"), mid, mid, 3, stride),
                    ConvBn::new(store, init, &format!("{name}.c"), mid, cout, 1, 1),
                ]
            }
        };
        let shortcut =
            (cin != cout || stride != 1).then(|| ConvBn::new(store, init, &format!("{name}.down"), cin, cout, 1, stride));
        Self { body, shortcut }
    }

    fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let mut h = x;
        for (i, layer) in self.body.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i + 1 < self.body.len() {
                h = h.relu();
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

/// One encoder: stem plus four residual stages, parameters under `prefix`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub prefix: String,
    stem: ConvBn,
    stages: Vec<Vec<ResBlock>>,
}

impl Encoder {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        in_channels: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBn::new(
            store,
            init,
            &format!("{prefix}.stem"),
            in_channels,
            cfg.stem_channels,
            cfg.stem_kernel,
            2,
        );
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (si, (&cout, &count)) in cfg.stage_channels.iter().zip(&cfg.blocks).enumerate() {
            let blocks = (0..count)
                .map(|b| {
                    let stride = if b == 0 { STAGE_STRIDES[si] } else { 1 };
                    let block = ResBlock::new(
                        store,
                        init,
                        &format!("{prefix}.stage{}.block{b}", si + 1),
                        cfg.block,
                        cin,
                        cout,
                        stride,
                    );
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self {
            prefix: prefix.to_string(),
            stem,
            stages,
        })
    }

    /// `x: [N, C, H, W]` with `H`, `W` multiples of 16.
    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Pyramid<'a, T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(dim_err!("encoder input {s:?} must be [N, C, H, W] with H, W multiples of 16"));
        }
        let mut h = self.stem.forward(ctx, x)?.relu();
        let mut levels = vec![h];
        for stage in &self.stages {
            for block in stage {
                h = block.forward(ctx, h)?;
            }
            levels.push(h);
        }
        Ok(Pyramid { levels })
    }

    /// Parameter ids in registration order.
    pub fn param_ids<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let prefix = format!("{}.", self.prefix);
        store.ids_with_prefix(&prefix).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Target and neighbors share θ1.
    Single,
    /// A second encoder θ2 (initialized from θ1) trained by backpropagation.
    DualIndependent,
    /// θ2 follows θ1 through the momentum update only.
    #[default]
    DualMomentum,
}

/// Target encoder, optional neighborhood encoder, and the update rule that
/// ties them.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub mode: EncoderMode,
    pub target: Encoder,
    pub momentum: Option<Encoder>,
    /// Momentum coefficient `m` in `θ2 ← m·θ2 + (1 − m)·θ1`.
    pub m: f64,
    /// Blend normalization running statistics like weights; otherwise copy
    /// them from θ1.
    pub blend_running_stats: bool,
    pairs: Vec<(ParamId, ParamId)>,
}

impl DualEncoder {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        in_channels: usize,
        cfg: &EncoderConfig,
        mode: EncoderMode,
        m: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("momentum coefficient {m} outside [0, 1)")));
        }
        let target = Encoder::new(store, init, "enc.target", in_channels, cfg)?;
        let mut pairs = Vec::new();
        let momentum = if mode == EncoderMode::Single {
            None
        } else {
            let ids = target.param_ids(store);
            let mut copy = Vec::with_capacity(ids.len());
            for id in ids {
                let p = store.get(id);
                let name = p.name.replacen("enc.target.", "enc.momentum.", 1);
                let (value, kind) = (p.value.clone(), p.kind);
                copy.push((id, store.insert(name, value, kind)));
            }
            pairs = copy;
            // Same architecture, so construction only needs the names; the
            // values were copied above.
            let enc = Encoder::rebind(&target, "enc.momentum", store)?;
            if mode == EncoderMode::DualMomentum {
                for &(_, id) in &pairs {
                    store.set_requires_grad(id, false);
                }
            }
            Some(enc)
        };
        Ok(Self {
            mode,
            target,
            momentum,
            m,
            blend_running_stats: true,
            pairs,
        })
    }

    /// `(θ1 id, θ2 id)` for every parameter of the encoder pair.
    pub fn pairs(&self) -> &[(ParamId, ParamId)] {
        &self.pairs
    }

    /// `θ2 ← m·θ2 + (1 − m)·θ1`, elementwise with `1 − m` formed in the
    /// element type. A no-op outside [`EncoderMode::DualMomentum`].
    pub fn momentum_update<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.mode != EncoderMode::DualMomentum {
            return Ok(());
        }
        let m = T::of(self.m);
        let one_minus = T::one() - m;
        for &(t, mo) in &self.pairs {
            let (src, dst) = (store.get(t), store.get(mo));
            if src.value.shape() != dst.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{} {:?} vs {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            let copy = src.kind == crate::tensor::ParamKind::Buffer && !self.blend_running_stats;
            let next = if copy {
                src.value.clone()
            } else {
                let data = dst
                    .value
                    .data()
                    .iter()
                    .zip(src.value.data())
                    .map(|(&a, &b)| m * a + one_minus * b)
                    .collect();
                crate::tensor::Tensor::new(dst.value.shape().to_vec(), data)?
            };
            store.set_value(mo, next)?;
        }
        Ok(())
    }

    /// Encodes the target batch and the `neighbors` batches. Returns the
    /// target pyramid and one pyramid per neighbor, in order.
    pub fn encode<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        target: Var<'a, T>,
        neighbors: &[Var<'a, T>],
        expected_neighbors: usize,
    ) -> Result<(Pyramid<'a, T>, Vec<Pyramid<'a, T>>)> {
        if neighbors.len() != expected_neighbors {
            return Err(Error::Input(format!(
                "expected {expected_neighbors} neighbor slices, got {}",
                neighbors.len()
            )));
        }
        let shape = target.shape();
        if let Some(bad) = neighbors.iter().map(|n| n.shape()).find(|s| *s != shape) {
            return Err(dim_err!("neighbor slice {bad:?} differs from target {shape:?}"));
        }
        let n = shape[0];
        let split = |p: Pyramid<'a, T>, count: usize, skip: usize| -> Result<Vec<Pyramid<'a, T>>> {
            (0..count).map(|i| p.narrow_batch((i + skip) * n, n)).collect()
        };
        match (self.mode, &self.momentum) {
            (_, _) if neighbors.is_empty() => Ok((self.target.forward(ctx, target)?, Vec::new())),
            (EncoderMode::Single, _) => {
                let mut all = vec![target];
                all.extend_from_slice(neighbors);
                let p = self.target.forward(ctx, concat(&all, 0)?)?;
                let tp = p.narrow_batch(0, n)?;
                Ok((tp, split(p, neighbors.len(), 1)?))
            }
            (mode, Some(enc)) => {
                let tp = self.target.forward(ctx, target)?;
                let nctx = if mode == EncoderMode::DualMomentum { ctx.frozen() } else { ctx };
                let batch = if neighbors.len() == 1 { neighbors[0] } else { concat(neighbors, 0)? };
                let p = enc.forward(nctx, batch)?;
                Ok((tp, split(p, neighbors.len(), 0)?))
            }
            (_, None) => unreachable!("dual modes always build a second encoder"),
        }
    }
}

impl Encoder {
    /// Same layer structure as `other`, bound to the parameters registered
    /// under `prefix`.
    fn rebind<T: Element>(other: &Encoder, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        let map = |id: ParamId| -> Result<ParamId> {
            let name = &store.get(id).name;
            let renamed = format!("{prefix}{}", &name[other.prefix.len()..]);
            store
                .id(&renamed)
                .ok_or_else(|| Error::Config(format!("missing parameter {renamed}")))
        };
        let conv_bn = |c: &ConvBn| -> Result<ConvBn> {
            Ok(ConvBn {
                conv: Conv2d {
                    weight: map(c.conv.weight)?,
                    bias: c.conv.bias.map(map).transpose()?,
                    stride: c.conv.stride,
                    pad: c.conv.pad,
                },
                bn: BatchNorm2d {
                    gamma: map(c.bn.gamma)?,
                    beta: map(c.bn.beta)?,
                    running_mean: map(c.bn.running_mean)?,
                    running_var: map(c.bn.running_var)?,
                },
            })
        };
        let stages = other
            .stages
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|b| {
                        Ok(ResBlock {
                            body: b.body.iter().map(conv_bn).collect::<Result<_>>()?,
                            shortcut: b.shortcut.as_ref().map(conv_bn).transpose()?,
                        })
                    })
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            prefix: prefix.to_string(),
            stem: conv_bn(&other.stem)?,
            stages,
        })
    }
}
