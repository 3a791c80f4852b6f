use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nucleiseg::dataio::{make_subsets, normalize, DatasetSplit};
use nucleiseg::denoise::{train_n2v, N2VConfig};
use nucleiseg::eval::{MetricsReport, DEFAULT_IOU_MIN};
use nucleiseg::infer::{threshold_sweep, ThresholdSweepResult};
use nucleiseg::network::{Head, NetworkSpec, WeightSnapshot};
use nucleiseg::segtrain::{run_scheme, LossCurve, SchemeConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::grid::{stable_hash, ExperimentGrid, RunKey};
use crate::{Error, Result};

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RunKey,
    pub subset_size: usize,
    pub seed: u64,
    pub subset_seed: u64,
    /// Cache id of the denoiser used, if any.
    pub denoiser: Option<String>,
    pub best_epoch: usize,
    pub curve: LossCurve,
    /// Validation sweep that picked the test threshold.
    pub sweep: ThresholdSweepResult,
    /// Test-set metrics at the swept threshold.
    pub metrics: MetricsReport,
    pub wall_time_s: f64,
    /// Artifact directory and checkpoints, relative to the grid output directory.
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub key: RunKey,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    /// Records of every completed cell, including ones finished earlier.
    pub records: Vec<RunRecord>,
    pub executed: usize,
    pub skipped: usize,
    /// Cells claimed by another live process.
    pub busy: Vec<RunKey>,
    pub failures: Vec<RunFailure>,
}

/// What determines a denoiser. Subset coordinates are deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiserKey {
    pub noise: String,
    pub spec: NetworkSpec,
    pub n2v: N2VConfig,
    pub schedule: TrainSchedule,
    pub percentiles: (f64, f64),
}

impl DenoiserKey {
    pub fn for_grid(grid: &ExperimentGrid, noise: &str) -> Self {
        let s = &grid.settings;
        Self {
            noise: noise.to_string(),
            spec: s.options.spec.with_head(Head::Joint),
            n2v: s.n2v,
            schedule: TrainSchedule {
                seed: grid.denoiser_seed(noise),
                ..s.denoiser_schedule
            },
            percentiles: s.options.percentiles,
        }
    }

    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("key serializes");
        format!("{}-{:016x}", self.noise, stable_hash(json.as_bytes()))
    }
}

/// Trained denoisers, in memory and optionally on disk under
/// `<dir>/<key id>/denoiser.safetensors`.
#[derive(Debug, Default)]
pub struct DenoiserCache {
    dir: Option<PathBuf>,
    memory: HashMap<String, WeightSnapshot>,
    trained: usize,
}

impl DenoiserCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            ..Self::default()
        }
    }

    /// Number of denoisers trained (not loaded) by this cache.
    pub fn trained(&self) -> usize {
        self.trained
    }

    pub fn get_or_train(&mut self, key: &DenoiserKey, split: &DatasetSplit) -> Result<(String, WeightSnapshot)> {
        let id = key.id();
        if let Some(s) = self.memory.get(&id) {
            return Ok((id, s.clone()));
        }
        let file = self.dir.as_ref().map(|d| d.join(&id).join("denoiser.safetensors"));
        if let Some(f) = file.as_ref().filter(|f| f.exists()) {
            info!("loading cached denoiser {id}");
            let snap = WeightSnapshot::load(f)?;
            self.memory.insert(id.clone(), snap.clone());
            return Ok((id, snap));
        }
        info!("training denoiser {id}");
        let snap = train_denoiser(key, split, file.as_deref())?;
        self.trained += 1;
        self.memory.insert(id.clone(), snap.clone());
        Ok((id, snap))
    }
}

/// Trains a blind-spot denoiser on the normalized train and validation
/// imagery of `split` and optionally writes it (plus its key and loss curve)
/// next to `file`.
pub fn train_denoiser(key: &DenoiserKey, split: &DatasetSplit, file: Option<&Path>) -> Result<WeightSnapshot> {
    let (lo, hi) = key.percentiles;
    let imagery = split
        .denoiser_imagery()
        .iter()
        .map(|im| normalize(im, lo, hi))
        .collect::<nucleiseg::Result<Vec<_>>>()?;
    let outcome = train_n2v(&imagery, key.spec, &key.n2v, &key.schedule)?;
    let mut best = outcome.best;
    best.meta.provenance = format!("n2v/{}", key.id());
    if let Some(file) = file {
        let dir = file.parent().expect("cache file has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("key.json"), &serde_json::to_string_pretty(key).expect("key serializes"))?;
        write_text(&dir.join("curve.csv"), &outcome.curve.to_csv())?;
        let tmp = file.with_extension("tmp");
        best.save(&tmp)?;
        fs::rename(&tmp, file).map_err(|e| Error::io(file, e))?;
    }
    Ok(best)
}

/// Trains, sweeps and tests one cell, writing artifacts under `out_dir/runs/<id>/`.
pub fn run_cell(
    grid: &ExperimentGrid,
    key: &RunKey,
    split: &DatasetSplit,
    denoiser: Option<(&str, &WeightSnapshot)>,
    out_dir: &Path,
) -> Result<RunRecord> {
    let start = Instant::now();
    let s = &grid.settings;
    if split.test.is_empty() {
        return Err(Error::Grid(format!("noise level {} has no test images", key.noise)));
    }
    let subset_seed = grid.subset_seed(key.repeat);
    // the plan is a prefix of one permutation, so truncating the sizes keeps subsets identical
    let sizes = &s.subset_sizes[..key.subset_index.min(s.subset_sizes.len())];
    let plan = make_subsets(split.train.len(), sizes, subset_seed)?;
    let seed = grid.train_seed(key);
    let schedule = TrainSchedule { seed, ..s.schedule };
    let config = SchemeConfig {
        scheme: key.scheme,
        denoiser: denoiser
            .filter(|_| key.scheme.needs_denoiser())
            .map(|(_, snap)| snap.clone()),
        subset_index: key.subset_index,
        noise_label: key.noise.clone(),
    };
    let mut run = run_scheme(&config, split, &plan, &schedule, &s.options)?;

    let n_val = schedule.max_val_images.unwrap_or(usize::MAX).min(split.validation.len());
    let sweep_pairs = if n_val > 0 {
        &split.validation[..n_val]
    } else {
        return Err(Error::Grid("threshold sweep needs validation images".into()));
    };
    let sweep = threshold_sweep(&mut run.pipeline, sweep_pairs, &s.thresholds)?;
    run.pipeline.config.threshold = sweep.best_threshold;
    let metrics = test_metrics(&mut run.pipeline, &split.test)?;

    let rel = PathBuf::from("runs").join(key.id());
    let dir = out_dir.join(&rel);
    run.save(&dir)?;
    write_text(&dir.join("sweep.json"), &serde_json::to_string_pretty(&sweep).expect("sweep serializes"))?;
    write_text(&dir.join("test_per_image.csv"), &metrics.per_image_csv())?;

    Ok(RunRecord {
        key: key.clone(),
        subset_size: run.manifest.subset_size,
        seed,
        subset_seed,
        denoiser: config.denoiser.as_ref().and(denoiser.map(|(id, _)| id.to_string())),
        best_epoch: run.outcome.best_epoch,
        curve: run.outcome.curve,
        sweep,
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoints: ["best.safetensors", "last.safetensors", "pipeline"]
            .iter()
            .map(|f| rel.join(f))
            .collect(),
        run_dir: rel,
    })
}

/// Segments every test image at the pipeline's threshold.
pub fn test_metrics(pipeline: &mut nucleiseg::infer::Pipeline, pairs: &[nucleiseg::dataio::ImagePair]) -> Result<MetricsReport> {
    let preds = pairs
        .iter()
        .map(|p| pipeline.segment(&p.image))
        .collect::<nucleiseg::Result<Vec<_>>>()?;
    Ok(MetricsReport::evaluate(
        pairs.iter().zip(&preds).map(|(p, l)| (p.name.as_str(), &p.labels, l)),
        pipeline.config.threshold,
        DEFAULT_IOU_MIN,
    )?)
}

/// Runs every cell of `grid` whose record is not yet in `out_dir/runs/`.
///
/// `splits` maps each noise label to its data. Cells are claimed through
/// atomic file creation, so several processes may share one output
/// directory. A failing cell is recorded in `runs/<id>.failed.json` and
/// retried on the next invocation.
pub fn run_grid(
    grid: &ExperimentGrid,
    splits: &BTreeMap<String, DatasetSplit>,
    out_dir: &Path,
    cache: &mut DenoiserCache,
) -> Result<GridSummary> {
    grid.validate()?;
    if let Some(missing) = grid.noise_levels.iter().find(|n| !splits.contains_key(*n)) {
        return Err(Error::MissingNoiseLevel(missing.clone()));
    }
    let runs = out_dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    write_text(&out_dir.join("grid.json"), &serde_json::to_string_pretty(grid).expect("grid serializes"))?;

    let mut summary = GridSummary::default();
    for key in grid.cells() {
        let id = key.id();
        let record_path = runs.join(format!("{id}.json"));
        if record_path.exists() {
            summary.records.push(read_record(&record_path)?);
            summary.skipped += 1;
            continue;
        }
        let claim = runs.join(format!("{id}.claim"));
        if !try_claim(&claim)? {
            warn!("{id} is claimed by another process");
            summary.busy.push(key);
            continue;
        }
        let split = &splits[&key.noise];
        let result = (|| {
            let denoiser = if key.scheme.needs_denoiser() {
                Some(cache.get_or_train(&DenoiserKey::for_grid(grid, &key.noise), split)?)
            } else {
                None
            };
            run_cell(grid, &key, split, denoiser.as_ref().map(|(id, s)| (id.as_str(), s)), out_dir)
        })();
        let failed_path = runs.join(format!("{id}.failed.json"));
        match result {
            Ok(record) => {
                info!("{id}: test AP {:.4} at threshold {:.2}", record.metrics.ap, record.sweep.best_threshold);
                write_json_atomic(&record_path, &record)?;
                let _ = fs::remove_file(&failed_path);
                summary.records.push(record);
                summary.executed += 1;
            }
            Err(e) => {
                warn!("{id} failed: {e}");
                let failure = RunFailure {
                    key: key.clone(),
                    error: e.to_string(),
                };
                write_json_atomic(&failed_path, &failure)?;
                summary.failures.push(failure);
            }
        }
        fs::remove_file(&claim).map_err(|e| Error::io(&claim, e))?;
    }
    write_json_atomic(&out_dir.join("grid_summary.json"), &summary)?;
    Ok(summary)
}

/// Creates the claim file; a leftover claim of a dead process is taken over.
fn try_claim(path: &Path) -> Result<bool> {
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(path, e))?;
                return Ok(true);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if !claim_is_stale(path) {
                    return Ok(false);
                }
                let _ = fs::remove_file(path);
            }
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(false)
}

fn claim_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    // cells run sequentially, so our own pid can only be a leftover
    pid == std::process::id() || (cfg!(target_os = "linux") && !Path::new(&format!("/proc/{pid}")).exists())
}

/// Reads every completed record in `dir` (a grid output directory or its `runs/`).
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = if dir.join("runs").is_dir() { dir.join("runs") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| Error::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| e == "json")
                && !p.to_string_lossy().ends_with(".failed.json")
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p)).collect()
}

fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_text(&tmp, &serde_json::to_string_pretty(value).expect("value serializes"))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
