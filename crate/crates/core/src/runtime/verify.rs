//! Finite-difference checks of every differentiable op, the attention and
//! fusion blocks, the losses and a tiny full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{csw_msa, w_msa, IfTrans, IfTransConfig, Msa, NeighborUpdate};
use crate::encoders::{BlockKind, EncoderConfig};
use crate::error::Result;
use crate::losses::{ce_loss, deep_supervision_loss, dice_loss, LossWeights};
use crate::model::{LogitStack, Model, ModelConfig};
use crate::tensor::gradcheck::{check_inputs, check_params, check_params_joint, FdConfig};
use crate::tensor::nn::{Ctx, Init};
use crate::tensor::{concat, DType, Element, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Tolerance on the norm-wise relative error at 64-bit.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct UnitReport {
    pub name: &'static str,
    pub error: f64,
}

fn rand_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(r.random_range(-1.0..1.0)))
}

/// Values bounded away from zero so a finite step never crosses a kink.
fn off_zero<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    rand_tensor::<T>(shape, seed).map(|v| v + v.signum() * T::of(0.1))
}

fn labels(n: usize, classes: usize, seed: u64) -> Vec<u8> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(0..classes) as u8).collect()
}

/// Weighted sum with fixed random coefficients.
fn probe<'g, T: Element>(y: Var<'g, T>, seed: u64) -> Result<Var<'g, T>> {
    let w = y.graph().constant(rand_tensor(&y.shape(), seed));
    Ok(y.mul(w)?.sum_all())
}

type InputFn<T> = Box<dyn for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>>;

fn input_units<T: Element>() -> Vec<(&'static str, Vec<Tensor<T>>, InputFn<T>)> {
    let r = rand_tensor::<T>;
    let idx: std::sync::Arc<Vec<u32>> = std::sync::Arc::new(vec![5, 0, 0, 11, 3, 7]);
    vec![
        ("add", vec![r(&[3, 4], 1), r(&[3, 4], 2)], Box::new(|_, v| probe(v[0].add(v[1])?, 3))),
        ("sub", vec![r(&[3, 4], 4), r(&[3, 4], 5)], Box::new(|_, v| probe(v[0].sub(v[1])?, 6))),
        ("mul", vec![r(&[3, 4], 7), r(&[3, 4], 8)], Box::new(|_, v| probe(v[0].mul(v[1])?, 9))),
        ("scale", vec![r(&[5], 10)], Box::new(|_, v| probe(v[0].scale(T::of(-1.7)), 11))),
        ("relu", vec![off_zero(&[6], 12)], Box::new(|_, v| probe(v[0].relu(), 13))),
        ("gelu", vec![r(&[6], 14).map(|x| x * T::of(3.0))], Box::new(|_, v| probe(v[0].gelu(), 15))),
        ("sum_all", vec![r(&[2, 3], 16)], Box::new(|_, v| Ok(v[0].mul(v[0])?.sum_all()))),
        ("mean_all", vec![r(&[2, 3], 17)], Box::new(|_, v| Ok(v[0].mul(v[0])?.mean_all()))),
        (
            "add_broadcast",
            vec![r(&[2, 3, 4], 18), r(&[3, 4], 19)],
            Box::new(|_, v| probe(v[0].add_broadcast(v[1])?, 20)),
        ),
        ("add_bias", vec![r(&[2, 3, 4], 21), r(&[3], 22)], Box::new(|_, v| probe(v[0].add_bias(v[1], 1)?, 23))),
        ("reshape", vec![r(&[2, 6], 24)], Box::new(|_, v| probe(v[0].reshape(&[3, 4])?, 25))),
        ("gather", vec![r(&[12], 26)], Box::new(move |_, v| probe(v[0].gather(idx.clone(), &[2, 3])?, 27))),
        ("permute", vec![r(&[2, 3, 4], 28)], Box::new(|_, v| probe(v[0].permute(&[2, 0, 1])?, 29))),
        ("narrow", vec![r(&[2, 5, 3], 30)], Box::new(|_, v| probe(v[0].narrow(1, 1, 3)?, 31))),
        ("concat", vec![r(&[2, 2, 3], 32), r(&[2, 1, 3], 33)], Box::new(|_, v| probe(concat(&[v[0], v[1]], 1)?, 34))),
        ("matmul", vec![r(&[3, 4], 35), r(&[4, 2], 36)], Box::new(|_, v| probe(v[0].matmul(v[1])?, 37))),
        (
            "bmm",
            vec![r(&[2, 4, 3], 38), r(&[2, 2, 4], 39)],
            Box::new(|_, v| probe(v[0].bmm(v[1], true, true)?, 40)),
        ),
        (
            "linear",
            vec![r(&[6, 4], 41), r(&[4, 5], 42), r(&[5], 43)],
            Box::new(|_, v| probe(v[0].linear(v[1], Some(v[2]))?, 44)),
        ),
        ("softmax", vec![r(&[3, 5], 45)], Box::new(|_, v| probe(v[0].softmax_lastdim(), 46))),
        (
            "ln_matmul_softmax",
            vec![r(&[3, 4], 70), r(&[4], 71), r(&[4], 72), r(&[4, 5], 73)],
            Box::new(|_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?.matmul(v[3])?.softmax_lastdim(), 74)),
        ),
        (
            "layer_norm",
            vec![r(&[3, 5], 47), r(&[5], 48), r(&[5], 49)],
            Box::new(|_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?, 50)),
        ),
        (
            "conv2d",
            vec![r(&[2, 2, 5, 5], 51), r(&[3, 2, 3, 3], 52), r(&[3], 53)],
            Box::new(|_, v| probe(v[0].conv2d(v[1], Some(v[2]), 2, 1)?, 54)),
        ),
        (
            "batch_norm_train",
            vec![r(&[3, 2, 3, 3], 55), r(&[2], 56), r(&[2], 57)],
            Box::new(|_, v| probe(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, 58)),
        ),
        (
            "batch_norm_eval",
            vec![r(&[3, 2, 3, 3], 59), r(&[2], 60), r(&[2], 61)],
            Box::new(|_, v| {
                let (mean, var) = ([T::of(0.1), T::of(-0.2)], [T::of(0.5), T::of(2.0)]);
                probe(v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)?, 62)
            }),
        ),
        (
            "upsample_bilinear",
            vec![r(&[1, 2, 3, 4], 63)],
            Box::new(|_, v| probe(v[0].upsample_bilinear(6, 8)?, 64)),
        ),
        (
            "ce_loss",
            vec![r(&[2, 3, 2, 3], 65).map(|x| x * T::of(2.0))],
            Box::new(|_, v| ce_loss(v[0], &labels(12, 3, 66))),
        ),
        (
            "dice_loss",
            vec![r(&[2, 3, 2, 3], 67).map(|x| x * T::of(2.0))],
            Box::new(|_, v| dice_loss(v[0], &labels(12, 3, 68))),
        ),
        (
            "deep_supervision_loss",
            vec![r(&[1, 3, 8, 8], 69), r(&[1, 3, 4, 4], 70), r(&[1, 3, 2, 2], 71)],
            Box::new(|_, v| {
                let stack = LogitStack { full: v[0], half: v[1], quarter: v[2] };
                Ok(deep_supervision_loss(&stack, &labels(64, 3, 72), &LossWeights::default())?.total)
            }),
        ),
    ]
}

/// Every parameter of `store` drawn afresh with roughly unit scale, so each
/// path contributes to the loss.
fn randomize<T: Element>(store: &mut ParamStore<T>, seed: u64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get(id);
        if p.kind != ParamKind::Weight {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let v = rand_tensor::<T>(&shape, seed + k as u64);
        let v = if p.name.ends_with("gamma") { v.map(|x| T::one() + T::of(0.3) * x) } else { v.map(|x| T::of(0.5) * x) };
        store.set_value(id, v).expect("same shape");
    }
}

/// Inputs registered as weights so one parameter check covers both.
fn input_params<T: Element>(store: &mut ParamStore<T>, count: usize, shape: &[usize], seed: u64) -> Vec<ParamId> {
    (0..count)
        .map(|i| store.insert(format!("input{i}"), rand_tensor(shape, seed + i as u64), ParamKind::Weight))
        .collect()
}

fn all_ids<T: Element>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(id, _)| id).collect()
}

fn attention_unit<T: Element>(shift: usize, cross: bool) -> Result<f64> {
    let mut store = ParamStore::<T>::new();
    let mut r = ChaCha8Rng::seed_from_u64(100 + shift as u64);
    let msa = Msa::new(&mut store, &mut Init { rng: &mut r }, "a", 4, 2, 2)?;
    randomize(&mut store, 200);
    let slices = if cross { 3 } else { 1 };
    let xs = input_params(&mut store, slices, &[1, 4, 4, 4], 300);
    let ids = all_ids(&store);
    check_params(&store, &ids, FdConfig::for_type::<T>(), |g, st| {
        let ctx = Ctx::new(g, st, true);
        let vars: Vec<_> = xs.iter().map(|&id| ctx.p(id)).collect();
        if cross {
            let out = csw_msa(ctx, &vars, &msa, shift, &[0, 1, 2])?;
            probe(concat(&out, 0)?, 301)
        } else {
            probe(w_msa(ctx, vars[0], &msa, shift)?, 302)
        }
    })
}

fn if_trans_unit<T: Element>() -> Result<f64> {
    let mut store = ParamStore::<T>::new();
    let mut r = ChaCha8Rng::seed_from_u64(400);
    let cfg = IfTransConfig {
        window: 2,
        dim: 4,
        heads: 2,
        s: 1,
        mlp_ratio: 2.0,
        neighbor_update: NeighborUpdate::Joint,
    };
    let block = IfTrans::new(&mut store, &mut Init { rng: &mut r }, "ift.k1", cfg)?;
    randomize(&mut store, 500);
    let xs = input_params(&mut store, 3, &[1, 4, 4, 4], 600);
    let ids = all_ids(&store);
    check_params(&store, &ids, FdConfig::for_type::<T>(), |g, st| {
        let ctx = Ctx::new(g, st, true);
        let vars: Vec<_> = xs.iter().map(|&id| ctx.p(id)).collect();
        probe(block.forward(ctx, &vars)?, 601)
    })
}

/// Smallest configuration that still exercises every model path.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        classes: 3,
        s: 1,
        encoder: EncoderConfig {
            stem_channels: 4,
            stem_kernel: 3,
            stage_channels: [4, 8, 8, 8],
            blocks: [1, 1, 1, 1],
            block: BlockKind::Basic,
        },
        window: 2,
        head_dim: 4,
        mlp_ratio: 2.0,
        decoder_channels: [8, 8, 4, 4, 4],
        ..ModelConfig::desk()
    }
}

fn model_unit<T: Element>() -> Result<f64> {
    let mut store = ParamStore::<T>::new();
    let mut r = ChaCha8Rng::seed_from_u64(700);
    let model = Model::new(&mut store, &mut r, tiny_model_config(), 0.1)?;
    let shape = [2, 1, 32, 32];
    let target = rand_tensor::<T>(&shape, 701);
    let neighbors = [rand_tensor::<T>(&shape, 702), rand_tensor::<T>(&shape, 703)];
    let lab = labels(2 * 32 * 32, 3, 704);
    let ids = model.trainable_ids(&store);
    // ReLU kinks make the whole network piecewise smooth; a 64-bit step of
    // 1e-5 on a BN shift crosses some of them. The whole gradient is
    // compared as one vector since many fusion gradients start near zero.
    let mut cfg = FdConfig { max_coords: 3, ..FdConfig::for_type::<T>() };
    if T::DTYPE == DType::F64 {
        cfg.step = 1e-6;
    }
    check_params_joint(&store, &ids, cfg, |g, st| {
        let ctx = Ctx::new(g, st, true);
        let nb: Vec<_> = neighbors.iter().map(|t| g.constant(t.clone())).collect();
        let out = model.forward(ctx, g.constant(target.clone()), &nb)?;
        Ok(deep_supervision_loss(&out, &lab, &LossWeights::default())?.total)
    })
}

/// Worst relative error of every unit, in a fixed order. Runs on the
/// calling thread's tape.
pub fn run_suite<T: Element>() -> Result<Vec<UnitReport>> {
    let mut out = Vec::new();
    for (name, inputs, f) in input_units::<T>() {
        let error = check_inputs(&inputs, FdConfig::for_type::<T>(), |g, v| f(g, v))?;
        out.push(UnitReport { name, error });
    }
    out.push(UnitReport { name: "csw_msa", error: attention_unit::<T>(0, true)? });
    out.push(UnitReport { name: "scsw_msa", error: attention_unit::<T>(1, true)? });
    out.push(UnitReport { name: "w_msa_shifted", error: attention_unit::<T>(1, false)? });
    out.push(UnitReport { name: "if_trans", error: if_trans_unit::<T>()? });
    out.push(UnitReport { name: "tiny_model", error: model_unit::<T>()? });
    Ok(out)
}

/// Units whose error exceeds `tol` (or is not a number).
pub fn failures(reports: &[UnitReport], tol: f64) -> Vec<&UnitReport> {
    reports.iter().filter(|r| !(r.error < tol)).collect()
}
