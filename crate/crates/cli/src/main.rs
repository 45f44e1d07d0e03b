use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mosformer_core::runtime::ablate::{self, Axis};
use mosformer_core::runtime::data::{load_split, Manifest, Split};
use mosformer_core::runtime::eval::{evaluate, predict};
use mosformer_core::runtime::phantom::PhantomSpec;
use mosformer_core::runtime::verify::{self, TOLERANCE};
use mosformer_core::runtime::{LabelledVolume, Precision, Preset, RunConfig, Trainer, VolumeFile};
use mosformer_core::tensor::{checkpoint, kernels, Element};

#[derive(Parser)]
#[command(name = "mosformer", version, about = "2.5D slice-fusion segmentation: train, evaluate, predict")]
struct Cli {
    /// Preset the config file is layered over.
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    /// TOML overrides for the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset; writes checkpoint, log and config to --out.
    Train {
        /// Initial weights instead of the seeded initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split; writes the metric CSV to --out or stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image volume into a label volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image volume file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured phantom dataset and its manifest.
    GenPhantoms {
        /// Phantom spec in TOML; defaults to the config's `data.phantom`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "phantoms")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op, block and a tiny model.
    Gradcheck,
    /// Train and score every value of one setting.
    Ablate {
        #[arg(long)]
        axis: Axis,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("MOSF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MOSF_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("MOSF_THREADS must be at least 1");
        }
        kernels::set_threads(n);
    }
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg),
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::preset(cli.preset);
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(&base, path)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch<T: Element>(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Train { checkpoint, out } => train::<T>(cfg, checkpoint.as_deref(), out),
        Command::Eval { checkpoint, out } => eval::<T>(cfg, checkpoint, out.as_deref()),
        Command::Predict { checkpoint, input, out } => predict_file::<T>(cfg, checkpoint, input, out),
        Command::GenPhantoms { spec, out } => gen_phantoms(cfg, spec.as_deref(), out),
        Command::Gradcheck => gradcheck(),
        Command::Ablate { axis, seeds, out } => run_ablation::<T>(cfg, *axis, seeds, out),
    }
}

/// Volumes of `split` at their stored resolution.
fn volumes<T: Element>(cfg: &RunConfig, split: Split) -> Result<Vec<LabelledVolume<T>>> {
    let vols = match &cfg.data.manifest {
        Some(path) => {
            let manifest = Manifest::load(path)?;
            load_split(&manifest, split, cfg.model.classes)?
        }
        None => cfg.data.phantom.volumes(split)?,
    };
    if vols.is_empty() {
        bail!("no {split:?} volumes in the dataset");
    }
    Ok(vols)
}

/// Volumes resized to the network input, for training.
fn training_volumes<T: Element>(cfg: &RunConfig, split: Split) -> Result<Vec<LabelledVolume<T>>> {
    let vols = volumes(cfg, split)?;
    Ok(match cfg.data.input_size {
        Some(size) => vols.iter().map(|v| v.resized(size)).collect(),
        None => vols,
    })
}

fn trainer<T: Element>(cfg: &RunConfig, weights: Option<&Path>) -> Result<Trainer<T>> {
    let mut t = Trainer::<T>::new(cfg)?;
    if let Some(path) = weights {
        checkpoint::load(&mut t.store, path).with_context(|| format!("loading {}", path.display()))?;
    }
    Ok(t)
}

fn train<T: Element>(cfg: &RunConfig, weights: Option<&Path>, out: &Path) -> Result<()> {
    let vols = training_volumes::<T>(cfg, Split::Train)?;
    let mut t = trainer::<T>(cfg, weights)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let summary = t.run(&vols, out)?;
    let first = summary.epoch_means.first().copied().unwrap_or(f64::NAN);
    let last = summary.epoch_means.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs × {} iterations, mean loss {first:.4} → {last:.4}",
        summary.epoch_means.len(),
        summary.iters_per_epoch
    );
    println!("checkpoint {}", summary.checkpoint.display());
    println!("log {}", summary.log.display());
    Ok(())
}

fn eval<T: Element>(cfg: &RunConfig, weights: &Path, out: Option<&Path>) -> Result<()> {
    let vols = volumes::<T>(cfg, Split::Test)?;
    let t = trainer::<T>(cfg, Some(weights))?;
    let report = evaluate(&t.model, &t.store, &vols, cfg.data.input_size, cfg.eval_batch)?;
    match out {
        Some(path) => {
            report.write_csv(std::fs::File::create(path)?)?;
            let mean = report.mean();
            let hd = mean.hd95.map(|h| format!("{h:.2}")).unwrap_or_else(|| "undefined".into());
            println!("{} cases, mean DSC {:.2}%, mean HD95 {hd}", vols.len(), 100.0 * mean.dsc);
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn predict_file<T: Element>(cfg: &RunConfig, weights: &Path, input: &Path, out: &Path) -> Result<()> {
    let file = VolumeFile::load(input)?;
    let image = file.to_tensor::<T>()?;
    if image.shape()[0] != cfg.model.in_channels {
        bail!("{} has {} channels, model expects {}", input.display(), image.shape()[0], cfg.model.in_channels);
    }
    let t = trainer::<T>(cfg, Some(weights))?;
    let labels = predict(&t.model, &t.store, &image, cfg.data.input_size, cfg.eval_batch)?;
    VolumeFile::labels(labels, file.dims(), file.spacing, cfg.model.classes as u32)?.save(out)?;
    println!("labels {}", out.display());
    Ok(())
}

fn gen_phantoms(cfg: &RunConfig, spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(path) => PhantomSpec::load(path)?,
        None => cfg.data.phantom.clone(),
    };
    let manifest = spec.write_dataset(out)?;
    println!("{} volumes, manifest {}", manifest.entries.len(), out.join("manifest.csv").display());
    Ok(())
}

fn gradcheck() -> Result<()> {
    let wide = verify::run_suite::<f64>()?;
    let narrow = verify::run_suite::<f32>()?;
    println!("{:<24} {:>12} {:>12}", "unit", "f64", "f32");
    for (a, b) in wide.iter().zip(&narrow) {
        let flag = if a.error < TOLERANCE { "" } else { "  FAIL" };
        println!("{:<24} {:>12.3e} {:>12.3e}{flag}", a.name, a.error, b.error);
    }
    let failed = verify::failures(&wide, TOLERANCE);
    if !failed.is_empty() {
        let names: Vec<_> = failed.iter().map(|r| r.name).collect();
        bail!("{} units above {TOLERANCE:e} at 64-bit: {}", failed.len(), names.join(", "));
    }
    println!("all {} units below {TOLERANCE:e} at 64-bit", wide.len());
    Ok(())
}

fn run_ablation<T: Element>(cfg: &RunConfig, axis: Axis, seeds: &[u64], out: &Path) -> Result<()> {
    let train = training_volumes::<T>(cfg, Split::Train)?;
    let test = volumes::<T>(cfg, Split::Test)?;
    let variants = ablate::variants(cfg, axis);
    let rows = ablate::run(&variants, seeds, &train, &test, out)?;
    let path = out.join(format!("ablation_{}.csv", axis.name()));
    ablate::write_csv(axis, &rows, std::fs::File::create(&path)?)?;
    for v in &variants {
        println!("{:<20} median DSC {:.2}%", v.label, 100.0 * ablate::median_dsc(&rows, &v.label));
    }
    println!("table {}", path.display());
    Ok(())
}
