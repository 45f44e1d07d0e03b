//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in
//! a [`ParamStore`] and are bound into a [`Graph`] through a [`Ctx`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics blend.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;

/// How a forward pass binds parameters.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Element> {
    pub graph: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    /// Batch statistics in normalization layers.
    pub train: bool,
    /// Parameters enter as constants: no gradient reaches them.
    pub frozen: bool,
    /// Record running-statistic updates (only meaningful with `train`).
    pub track_stats: bool,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            frozen: false,
            track_stats: train,
        }
    }

    pub fn frozen(self) -> Self {
        Self {
            frozen: true,
            track_stats: false,
            ..self
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'a, T> {
        if self.frozen || !self.graph.grad_enabled() {
            self.graph.constant(self.store.value(id).clone())
        } else {
            self.graph.param(self.store, id)
        }
    }
}

/// Parameter initialization helpers. All draws come from the caller's RNG,
/// so construction order fixes the values.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(self.rng)))
    }

    /// Kaiming normal for ReLU networks, fan-in mode.
    pub fn kaiming<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            init.kaiming(&[cout, cin, kernel, kernel]),
            ParamKind::Weight,
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Weight),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Weight),
            running_mean: store.insert(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.insert(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if !ctx.train {
            let mean = ctx.store.value(self.running_mean);
            let var = ctx.store.value(self.running_var);
            return x.batch_norm_eval(gamma, beta, mean.data(), var.data(), BN_EPS);
        }
        let shape = x.shape();
        let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS)?;
        if ctx.track_stats {
            let cnt = (shape[0] * shape[2] * shape[3]) as f64;
            let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
            let m = T::of(BN_RUNNING_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T], k: f64| {
                Tensor::from_parts(
                    old.shape().to_vec(),
                    old.data()
                        .iter()
                        .zip(new)
                        .map(|(&o, &v)| m * o + (T::one() - m) * v * T::of(k))
                        .collect(),
                )
            };
            let rm = blend(ctx.store.value(self.running_mean), &mean, 1.0);
            let rv = blend(ctx.store.value(self.running_var), &var, unbias);
            ctx.graph.record_stat(self.running_mean, rm);
            ctx.graph.record_stat(self.running_var, rv);
        }
        Ok(y)
    }
}

/// Affine map on the last axis; the weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        Self {
            weight: store.insert(format!("{name}.weight"), init.normal(&[din, dout], 0.02), ParamKind::Weight),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::Weight),
        }
    }

    /// `x: [..., in]` → `[..., out]`.
    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let shape = x.shape();
        let din = *shape.last().expect("rank ≥ 1");
        let rows = x.value().numel() / din;
        let w = ctx.p(self.weight);
        let dout = ctx.store.value(self.weight).shape()[1];
        let y = x.reshape(&[rows, din])?.linear(w, Some(ctx.p(self.bias)))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]), ParamKind::Weight),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Weight),
        }
    }

    pub fn forward<'a, T: Element>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }
}
