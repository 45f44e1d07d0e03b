//! The two-layer inter-slice fusion block: a regular then a shifted
//! cross-slice window layer, each pre-norm attention + MLP with residuals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::msa::{csw_msa, Msa};
use crate::error::{dim_err, Error, Result};
use crate::tensor::nn::{Ctx, Init, LayerNorm, Linear};
use crate::tensor::{Element, ParamStore, Var};

/// What the second layer sees for the neighbor slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborUpdate {
    /// Neighbors pass through the first layer alongside the target.
    #[default]
    Joint,
    /// Neighbors keep their encoder features in both layers.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfTransConfig {
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    /// Neighbors on each side of the target.
    pub s: usize,
    pub mlp_ratio: f64,
    #[serde(default)]
    pub neighbor_update: NeighborUpdate,
}

impl IfTransConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || (self.mlp_ratio * self.dim as f64).round() < 1.0 {
            return Err(Error::Config(format!("mlp ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        2 * self.s + 1
    }
}

#[derive(Clone, Debug)]
pub struct IfTransLayer {
    pub ln1: LayerNorm,
    pub msa: Msa,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub shift: usize,
}

impl IfTransLayer {
    fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: &IfTransConfig,
        shift: usize,
    ) -> Result<Self> {
        let hidden = (cfg.mlp_ratio * cfg.dim as f64).round() as usize;
        // The bias tables hang off the layer prefix rather than the MSA.
        let msa = Msa::new(store, init, prefix, cfg.dim, cfg.heads, cfg.window)?;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.dim),
            msa,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.dim),
            mlp1: Linear::new(store, init, &format!("{prefix}.mlp1"), cfg.dim, hidden),
            mlp2: Linear::new(store, init, &format!("{prefix}.mlp2"), hidden, cfg.dim),
            shift,
        })
    }

    /// One layer over channel-last maps; returns the slices in `which`.
    pub fn forward<'a, T: Element>(
        &self,
        ctx: Ctx<'a, T>,
        maps: &[Var<'a, T>],
        which: &[usize],
    ) -> Result<Vec<Var<'a, T>>> {
        let normed: Vec<Var<'a, T>> = maps.iter().map(|&x| self.ln1.forward(ctx, x)).collect::<Result<_>>()?;
        let attended = csw_msa(ctx, &normed, &self.msa, self.shift, which)?;
        which
            .iter()
            .zip(attended)
            .map(|(&s, a)| {
                let x = maps[s].add(a)?;
                let h = self.mlp1.forward(ctx, self.ln2.forward(ctx, x)?)?.gelu();
                x.add(self.mlp2.forward(ctx, h)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct IfTrans {
    pub cfg: IfTransConfig,
    pub layers: [IfTransLayer; 2],
}

impl IfTrans {
    /// Registers parameters as `{prefix}.l{0,1}.{qkv,proj,ln1,ln2,mlp1,mlp2,bias_table}`.
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: IfTransConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let l0 = IfTransLayer::new(store, init, &format!("{prefix}.l0"), &cfg, 0)?;
        let l1 = IfTransLayer::new(store, init, &format!("{prefix}.l1"), &cfg, cfg.window / 2)?;
        Ok(Self { cfg, layers: [l0, l1] })
    }

    /// Fuses `2s+1` maps `[N, d, H, W]` (target in the middle) and returns the
    /// fused target map with the same shape.
    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, slices: &[Var<'a, T>]) -> Result<Var<'a, T>> {
        let n = self.cfg.slices();
        if slices.len() != n {
            return Err(dim_err!("fusion block expects {n} slices, got {}", slices.len()));
        }
        let target = self.cfg.s;
        let maps: Vec<Var<'a, T>> = slices
            .iter()
            .map(|&x| x.permute(&[0, 2, 3, 1]))
            .collect::<Result<_>>()?;
        let all: Vec<usize> = (0..n).collect();
        let mut mid = self.layers[0].forward(ctx, &maps, &all)?;
        if self.cfg.neighbor_update == NeighborUpdate::Frozen {
            for (s, m) in mid.iter_mut().enumerate() {
                if s != target {
                    *m = maps[s];
                }
            }
        }
        let out = self.layers[1].forward(ctx, &mid, &[target])?;
        out[0].permute(&[0, 3, 1, 2])
    }
}
