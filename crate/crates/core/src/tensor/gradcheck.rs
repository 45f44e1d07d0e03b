//! Central finite-difference comparison of tape gradients.

use super::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Comparison settings. Coordinates beyond `max_coords` per tensor are
/// sampled with a fixed stride so large parameters stay affordable.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub max_coords: usize,
}

impl FdConfig {
    /// Step suited to the element width: 1e-5 for 64-bit, 1e-3 for 32-bit.
    pub fn for_type<T: Element>() -> Self {
        let step = if T::DTYPE == super::DType::F64 { 1e-5 } else { 1e-3 };
        Self { step, max_coords: usize::MAX }
    }
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let stride = n as f64 / max as f64;
    (0..max).map(|i| (i as f64 * stride) as usize).collect()
}

/// Worst relative error over all `inputs` of a scalar function built by `f`.
pub fn check_inputs<T, F>(inputs: &[Tensor<T>], cfg: FdConfig, f: F) -> Result<f64>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        Ok(f(&g, &vars)?.item().as_f64())
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&g, &vars)?;
    if loss.value().numel() != 1 {
        return Err(Error::Input("gradient check needs a scalar function".into()));
    }
    let grads = g.backward(loss);
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())).to_f64_vec();
        let picked = coords(inputs[i].numel(), cfg.max_coords);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let mut xs = inputs.to_vec();
            let mut probe = |delta: f64| -> Result<f64> {
                let mut d = inputs[i].data().to_vec();
                d[c] = T::of(d[c].as_f64() + delta);
                xs[i] = Tensor::new(inputs[i].shape().to_vec(), d)?;
                eval(&xs)
            };
            numeric.push((probe(cfg.step)? - probe(-cfg.step)?) / (2.0 * cfg.step));
        }
        let a: Vec<f64> = picked.iter().map(|&c| analytic[c]).collect();
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

/// Analytic and numeric gradients at the sampled coordinates of every
/// parameter in `ids`.
fn sample_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], cfg: FdConfig, f: F) -> Result<Vec<(Vec<f64>, Vec<f64>)>>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    if loss.value().numel() != 1 {
        return Err(Error::Input("gradient check needs a scalar function".into()));
    }
    let grads = g.backward(loss);
    drop(g);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.value(id).clone();
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(base.shape())).to_f64_vec();
        let picked = coords(base.numel(), cfg.max_coords);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut d = base.data().to_vec();
                d[c] = T::of(d[c].as_f64() + delta);
                work.set_value(id, Tensor::new(base.shape().to_vec(), d)?)?;
                let g = Graph::no_grad();
                let v = f(&g, &work)?.item().as_f64();
                Ok(v)
            };
            let up = probe(cfg.step)?;
            let down = probe(-cfg.step)?;
            numeric.push((up - down) / (2.0 * cfg.step));
        }
        work.set_value(id, base)?;
        out.push((picked.iter().map(|&c| analytic[c]).collect(), numeric));
    }
    Ok(out)
}

/// Worst relative error over the parameters `ids` of a scalar function of
/// a parameter store.
pub fn check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], cfg: FdConfig, f: F) -> Result<f64>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let pairs = sample_params(store, ids, cfg, f)?;
    Ok(pairs.iter().map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

/// Relative error of the whole gradient: the sampled coordinates of all
/// `ids` form one vector.
pub fn check_params_joint<T, F>(store: &ParamStore<T>, ids: &[ParamId], cfg: FdConfig, f: F) -> Result<f64>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let pairs = sample_params(store, ids, cfg, f)?;
    let a: Vec<f64> = pairs.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let n: Vec<f64> = pairs.iter().flat_map(|(_, n)| n.iter().copied()).collect();
    Ok(relative_error(&a, &n))
}
