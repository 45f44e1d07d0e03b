//! Variant sweeps: train and score one model per (variant, seed).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::LabelledVolume;
use super::eval::evaluate;
use super::train::Trainer;
use crate::encoders::EncoderMode;
use crate::error::{Error, Result};
use crate::metrics::MeanMetrics;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    S,
    M,
    Scales,
    EncoderMode,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Axis::S),
            "m" => Ok(Axis::M),
            "scales" => Ok(Axis::Scales),
            "encoder_mode" | "encoder-mode" => Ok(Axis::EncoderMode),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::S => "s",
            Axis::M => "m",
            Axis::Scales => "scales",
            Axis::EncoderMode => "encoder_mode",
        }
    }
}

/// Fusion scale subsets, coarsest first.
pub const SCALE_SUBSETS: [&[usize]; 4] = [&[16], &[8, 16], &[4, 8, 16], &[2, 4, 8, 16]];

pub fn scales_label(scales: &[usize]) -> String {
    scales.iter().map(|s| format!("/{s}")).collect::<Vec<_>>().join(",")
}

pub fn mode_label(mode: EncoderMode) -> &'static str {
    match mode {
        EncoderMode::Single => "single",
        EncoderMode::DualIndependent => "dual_independent",
        EncoderMode::DualMomentum => "dual_momentum",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub cfg: RunConfig,
}

/// Every setting of `axis`, the rest taken from `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Vec<Variant> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant { label, cfg }
    };
    match axis {
        Axis::S => (0..=2).map(|s| with(s.to_string(), &|c| c.model.s = s)).collect(),
        Axis::M => (0..10)
            .map(|i| {
                let m = i as f64 / 10.0;
                with(m.to_string(), &|c| c.m = m)
            })
            .collect(),
        Axis::Scales => SCALE_SUBSETS
            .iter()
            .map(|s| with(scales_label(s), &|c| c.model.fusion_scales = s.to_vec()))
            .collect(),
        Axis::EncoderMode => [EncoderMode::Single, EncoderMode::DualIndependent, EncoderMode::DualMomentum]
            .into_iter()
            .map(|m| with(mode_label(m).to_string(), &|c| c.model.encoder_mode = m))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MeanMetrics,
}

/// Trains `cfg` on `train`, scores it on `test`. Run artifacts go to `out`.
pub fn train_and_score<T: Element>(
    cfg: &RunConfig,
    train: &[LabelledVolume<T>],
    test: &[LabelledVolume<T>],
    out: &Path,
) -> Result<MeanMetrics> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    trainer.run(train, out)?;
    let report = evaluate(&trainer.model, &trainer.store, test, cfg.data.input_size, cfg.eval_batch)?;
    Ok(report.mean())
}

/// Every variant under every seed, in that order.
pub fn run<T: Element>(
    variants: &[Variant],
    seeds: &[u64],
    train: &[LabelledVolume<T>],
    test: &[LabelledVolume<T>],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = v.cfg.clone();
            cfg.seed = seed;
            let dir = out.join(format!("{}_seed{seed}", v.label.replace(['/', ','], "_")));
            let metrics = train_and_score(&cfg, train, test, &dir)?;
            log::info!("{} seed {seed}: mean DSC {:.4}", v.label, metrics.dsc);
            rows.push(AblationRow { variant: v.label.clone(), seed, metrics });
        }
    }
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median DSC of `variant` across its seeds.
pub fn median_dsc(rows: &[AblationRow], variant: &str) -> f64 {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.metrics.dsc).collect();
    median(&mut v)
}

/// `axis,variant,seed,dsc_percent,hd95`, then one `median` row per variant.
pub fn write_csv<W: Write>(axis: Axis, rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis", "variant", "seed", "dsc_percent", "hd95"])?;
    let hd = |h: Option<f64>| h.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            axis.name().to_string(),
            r.variant.clone(),
            r.seed.to_string(),
            (100.0 * r.metrics.dsc).to_string(),
            hd(r.metrics.hd95),
        ])?;
    }
    let mut seen: Vec<&str> = Vec::new();
    for r in rows {
        if seen.contains(&r.variant.as_str()) {
            continue;
        }
        seen.push(&r.variant);
        let mut h: Vec<f64> = rows.iter().filter(|x| x.variant == r.variant).filter_map(|x| x.metrics.hd95).collect();
        let hd_med = (!h.is_empty()).then(|| median(&mut h));
        w.write_record([
            axis.name().to_string(),
            r.variant.clone(),
            "median".into(),
            (100.0 * median_dsc(rows, &r.variant)).to_string(),
            hd(hd_med),
        ])?;
    }
    w.flush()?;
    Ok(())
}
