use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nucleiseg::dataio::{load_pairs_dir, read_image, write_labels};
use nucleiseg::infer::{threshold_sweep, Pipeline};
use nucleiseg::network::WeightSnapshot;
use nucleiseg::segtrain::Scheme;
use nucleiseg_experiments::config::{check_device, ExperimentConfig};
use nucleiseg_experiments::{
    load_records, report, run_cell, run_grid, test_metrics, train_denoiser, write_synthetic_dataset, DenoiserCache,
    DenoiserKey, RunKey,
};

#[derive(Parser)]
#[command(name = "nucleiseg", version, about = "Denoising-assisted nuclei segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration value, e.g. `--set schedule.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for runs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut sets = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("data.root", self.data.as_ref().map(|p| toml_string(p)));
        push("output.dir", self.out.as_ref().map(|p| toml_string(p)));
        push("schedule.epochs", self.epochs.map(|v| v.to_string()));
        push("schedule.steps_per_epoch", self.steps_per_epoch.map(|v| v.to_string()));
        push("schedule.batch_size", self.batch_size.map(|v| v.to_string()));
        push("schedule.initial_lr", self.lr.map(|v| v.to_string()));
        sets.extend(self.sets.iter().cloned());
        ExperimentConfig::load(self.config.as_deref(), &sets).context("loading configuration")
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic nuclei dataset with train and test splits.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the dataset, materialize its noisy variants and report split sizes.
    PrepareData(ConfigArgs),
    /// Train the blind-spot denoiser of one noise level.
    TrainDenoiser {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Noise label such as `n40`; defaults to the first configured level.
        #[arg(long)]
        noise: Option<String>,
        /// Checkpoint path; defaults to the denoiser cache.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one grid cell.
    RunScheme {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value_t = 1)]
        subset: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Denoiser checkpoint; defaults to the (possibly freshly trained) cached one.
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Run every cell of the configured grid, skipping completed ones.
    RunGrid(ConfigArgs),
    /// Score a saved pipeline on an `images/` + `masks/` directory.
    Evaluate {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Per-image CSV output.
        #[arg(long)]
        per_image: Option<PathBuf>,
    },
    /// Pick the AP-maximizing threshold of a saved pipeline on validation data.
    SweepThreshold {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Store the chosen threshold in the pipeline.
        #[arg(long)]
        write: bool,
    },
    /// Segment images with a saved pipeline into 32-bit label TIFFs.
    Predict {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Aggregate run records into a CSV table, SVG plots and a JSON manifest.
    Report {
        /// Grid output directory (or its `runs/`).
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to `<runs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    check_device()?;
    match Cli::parse().command {
        Command::SynthData { out, train, test, size, seed } => {
            write_synthetic_dataset(&out, train, test, size, seed)?;
            println!("wrote {train} training and {test} test images to {}", out.display());
        }
        Command::PrepareData(args) => {
            let cfg = args.load()?;
            for (&std, label) in cfg.data.noise_levels.iter().zip(cfg.noise_labels()) {
                let split = cfg.load_split(std).with_context(|| format!("preparing {label}"))?;
                let (tr, va, te) = split.counts();
                println!("{label}: {tr} train, {va} validation, {te} test");
            }
        }
        Command::TrainDenoiser { cfg, noise, checkpoint } => {
            let cfg = cfg.load()?;
            let grid = cfg.to_grid()?;
            let noise = noise.unwrap_or_else(|| grid.noise_levels[0].clone());
            let split = cfg.load_split(cfg.noise_std(&noise)?)?;
            let key = DenoiserKey::for_grid(&grid, &noise);
            let path = checkpoint.unwrap_or_else(|| cfg.cache_dir().join(key.id()).join("denoiser.safetensors"));
            train_denoiser(&key, &split, Some(&path))?;
            println!("{}", path.display());
        }
        Command::RunScheme { cfg, scheme, noise, subset, repeat, denoiser } => {
            let cfg = cfg.load()?;
            let mut grid = cfg.to_grid()?;
            let noise = noise.unwrap_or_else(|| grid.noise_levels[0].clone());
            grid.schemes = vec![scheme];
            grid.noise_levels = vec![noise.clone()];
            grid.subset_indices = vec![subset];
            grid.repeats = repeat + 1;
            grid.validate()?;
            let split = cfg.load_split(cfg.noise_std(&noise)?)?;
            let snap = match (scheme.needs_denoiser(), denoiser) {
                (false, _) => None,
                (true, Some(p)) => Some((p.display().to_string(), WeightSnapshot::load(&p)?)),
                (true, None) => Some(
                    DenoiserCache::new(Some(cfg.cache_dir()))
                        .get_or_train(&DenoiserKey::for_grid(&grid, &noise), &split)?,
                ),
            };
            let key = RunKey { scheme, noise, subset_index: subset, repeat };
            let record = run_cell(&grid, &key, &split, snap.as_ref().map(|(i, s)| (i.as_str(), s)), &cfg.output.dir)?;
            let path = cfg.output.dir.join("runs").join(format!("{}.json", key.id()));
            std::fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| path.display().to_string())?;
            println!(
                "{}: test AP {:.4}, SEG {:.4} at threshold {:.2}",
                key, record.metrics.ap, record.metrics.seg, record.sweep.best_threshold
            );
        }
        Command::RunGrid(args) => {
            let cfg = args.load()?;
            let grid = cfg.to_grid()?;
            let splits = cfg.load_splits()?;
            let mut cache = DenoiserCache::new(Some(cfg.cache_dir()));
            let summary = run_grid(&grid, &splits, &cfg.output.dir, &mut cache)?;
            println!(
                "{} runs executed, {} already complete, {} busy elsewhere, {} failed",
                summary.executed,
                summary.skipped,
                summary.busy.len(),
                summary.failures.len()
            );
            for f in &summary.failures {
                println!("FAILED {}: {}", f.key, f.error);
            }
            if !summary.failures.is_empty() {
                bail!("{} grid cells failed", summary.failures.len());
            }
        }
        Command::Evaluate { pipeline, data, threshold, per_image } => {
            let mut p = Pipeline::load(&pipeline)?;
            if let Some(t) = threshold {
                p.config.threshold = t;
            }
            let pairs = load_pairs_dir(&data)?;
            let metrics = test_metrics(&mut p, &pairs)?;
            if let Some(path) = per_image {
                std::fs::write(&path, metrics.per_image_csv()).with_context(|| path.display().to_string())?;
            }
            println!(
                "AP {:.4}  SEG {:.4}  TP {}  FP {}  FN {}  threshold {:.2}",
                metrics.ap, metrics.seg, metrics.tp, metrics.fp, metrics.fn_, p.config.threshold
            );
        }
        Command::SweepThreshold { pipeline, data, write } => {
            let mut p = Pipeline::load(&pipeline)?;
            let pairs = load_pairs_dir(&data)?;
            let sweep = threshold_sweep(&mut p, &pairs, &nucleiseg::infer::default_threshold_grid())?;
            for (t, ap) in sweep.grid.iter().zip(&sweep.ap_per_threshold) {
                println!("{t:.2}\t{ap:.4}");
            }
            println!("best threshold {:.2} (AP {:.4})", sweep.best_threshold, sweep.best_ap);
            if write {
                p.config.threshold = sweep.best_threshold;
                p.save(&pipeline)?;
            }
        }
        Command::Predict { pipeline, out, threshold, images } => {
            let mut p = Pipeline::load(&pipeline)?;
            if let Some(t) = threshold {
                p.config.threshold = t;
            }
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for path in images {
                let labels = p.segment(&read_image(&path)?)?;
                let stem = path.file_stem().context("image path has no file name")?;
                let dst = out.join(stem).with_extension("tif");
                write_labels(&dst, &labels)?;
                println!("{} -> {} ({} objects)", path.display(), dst.display(), labels.iter().max().unwrap_or(&0));
            }
        }
        Command::Report { runs, out } => {
            let records = load_records(&runs)?;
            let out = out.unwrap_or_else(|| runs.join("report"));
            let files = report(&records, &out)?;
            println!("{}", files.table.display());
            for p in &files.plots {
                println!("{}", p.display());
            }
            println!("{}", files.manifest.display());
        }
    }
    Ok(())
}
