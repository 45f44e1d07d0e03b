//! Training loop: uniform slice batches, deep-supervision loss, SGD on the
//! trainable weights, then the momentum update of the neighborhood encoder.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{sample_batch, Batch, LabelledVolume};
use crate::error::{Error, Result};
use crate::losses::{deep_supervision_loss, ScaleTerms};
use crate::model::Model;
use crate::tensor::checkpoint;
use crate::tensor::nn::Ctx;
use crate::tensor::optim::{LrSchedule, Sgd};
use crate::tensor::{Element, Graph, ParamId, ParamStore};

pub const LOG_HEADER: [&str; 10] = [
    "epoch", "iter", "lr", "loss", "ce_full", "dice_full", "ce_half", "dice_half", "ce_quarter", "dice_quarter",
];

pub const CHECKPOINT_FILE: &str = "checkpoint.mosf";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub scales: [ScaleTerms; 3],
}

impl StepLog {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.epoch.to_string(), self.iter.to_string(), self.lr.to_string(), self.loss.to_string()];
        for s in &self.scales {
            r.push(s.ce.to_string());
            r.push(s.dice.to_string());
        }
        r
    }
}

/// Model, weights and optimizer state of one run.
pub struct Trainer<T: Element> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub sgd: Sgd<T>,
    schedule: LrSchedule,
    trainable: Vec<ParamId>,
    sampler: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    /// Weights come from `seed`; batches from an independent stream of it.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&mut store, &mut init, cfg.model.clone(), cfg.m)?;
        let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
        sampler.set_stream(1);
        let trainable = model.trainable_ids(&store);
        Ok(Self {
            cfg: cfg.clone(),
            sgd: Sgd::new(cfg.optim.lr_max, cfg.optim.momentum, cfg.optim.weight_decay)?,
            schedule: cfg.schedule(),
            model,
            store,
            trainable,
            sampler,
        })
    }

    pub fn iters_per_epoch(&self, volumes: &[LabelledVolume<T>]) -> usize {
        let slices: usize = volumes.iter().map(|v| v.dims()[2]).sum();
        self.cfg.iters_per_epoch.unwrap_or_else(|| slices.div_ceil(self.cfg.batch).max(1))
    }

    pub fn next_batch(&mut self, volumes: &[LabelledVolume<T>]) -> Result<Batch<T>> {
        sample_batch(&self.model, volumes, self.cfg.batch, self.cfg.data.flips, &mut self.sampler)
    }

    /// Loss terms of `batch` and the gradient step, without touching θ2.
    /// Returns `None` for the log when the loss is not finite; weights are
    /// then left unchanged.
    pub fn sgd_step(&mut self, batch: &Batch<T>, epoch: usize, iter: usize) -> Result<Option<StepLog>> {
        let lr = self.schedule.lr_at(epoch)?;
        self.sgd.lr = lr;
        let (log, grads, stats) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store, true);
            let nb: Vec<_> = batch.neighbors.iter().map(|t| g.constant(t.clone())).collect();
            let logits = self.model.forward(ctx, g.constant(batch.target.clone()), &nb)?;
            let loss = deep_supervision_loss(&logits, &batch.labels, &self.cfg.loss)?;
            let total = loss.total.item().as_f64();
            let log = StepLog { epoch, iter, lr, loss: total, scales: loss.scales };
            if !total.is_finite() {
                return Ok(None);
            }
            (log, g.backward(loss.total), g.take_stat_updates())
        };
        self.store.set_grads(&grads);
        self.store.apply_stat_updates(stats);
        self.sgd.step(&mut self.store, &self.trainable);
        self.store.zero_grads();
        Ok(Some(log))
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        self.model.encoders.momentum_update(&mut self.store)
    }

    /// Full run. Writes the log and a checkpoint after every epoch into
    /// `out`; a non-finite loss aborts with a dump there.
    pub fn run(&mut self, volumes: &[LabelledVolume<T>], out: &Path) -> Result<TrainSummary> {
        std::fs::create_dir_all(out)?;
        let iters = self.iters_per_epoch(volumes);
        let log_path = out.join(LOG_FILE);
        let mut log = csv::Writer::from_path(&log_path)?;
        log.write_record(LOG_HEADER)?;
        let ckpt = out.join(CHECKPOINT_FILE);
        let mut epoch_means = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut sum = 0.0;
            for iter in 0..iters {
                let batch = self.next_batch(volumes)?;
                let Some(row) = self.sgd_step(&batch, epoch, iter)? else {
                    let dump = self.dump_non_finite(out, &batch, epoch, iter)?;
                    log.flush()?;
                    return Err(Error::NonFinite { epoch, iter, dump });
                };
                self.momentum_update()?;
                log.write_record(row.record())?;
                sum += row.loss;
            }
            log.flush()?;
            checkpoint::save(&self.store, &ckpt)?;
            let mean = sum / iters as f64;
            log::info!("epoch {epoch}: mean loss {mean:.5}, lr {:.5}", self.sgd.lr);
            epoch_means.push(mean);
        }
        Ok(TrainSummary { epoch_means, iters_per_epoch: iters, checkpoint: ckpt, log: log_path })
    }

    fn dump_non_finite(&self, out: &Path, batch: &Batch<T>, epoch: usize, iter: usize) -> Result<PathBuf> {
        let path = out.join("nan_dump.txt");
        let mut f = File::create(&path)?;
        writeln!(f, "epoch {epoch} iter {iter} lr {}", self.sgd.lr)?;
        writeln!(f, "samples (volume, slice): {:?}", batch.picks)?;
        let range = |d: &[T]| {
            d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())))
        };
        writeln!(f, "input range {:?}", range(batch.target.data()))?;
        for (_, p) in self.store.iter() {
            let bad = p.value.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                writeln!(f, "{}: {bad} non-finite values", p.name)?;
            }
        }
        checkpoint::save(&self.store, &out.join("nan_dump.mosf"))?;
        Ok(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epoch_means: Vec<f64>,
    pub iters_per_epoch: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}
