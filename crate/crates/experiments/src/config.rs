//! The TOML run configuration and its `key.path=value` flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nucleiseg::dataio::{
    extract_patches, load_dataset, materialize_noisy_variant, DatasetLayout, DatasetSplit, NoiseSpec,
    BBBC_SUBSET_SIZES, DSB_SUBSET_SIZES,
};
use nucleiseg::segtrain::{LrPolicy, Scheme, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::grid::{ExperimentGrid, RunSettings, SchedulePreset};
use crate::{Error, Result};

/// Directory for cached denoisers, overriding `output.cache_dir`.
pub const CACHE_DIR_ENV: &str = "NUCLEISEG_CACHE_DIR";
/// Compute device; only `cpu` exists.
pub const DEVICE_ENV: &str = "NUCLEISEG_DEVICE";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: SchedulePreset,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub schedule: ScheduleOverrides,
    /// Applied on top of `schedule` for the blind-spot denoiser.
    pub denoiser_schedule: ScheduleOverrides,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub n2v: N2VOverrides,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub layout: LayoutConfig,
    /// Seed of the validation holdout for the preset layouts.
    pub holdout_seed: u64,
    /// Gaussian noise standard deviations; `0` is the clean data.
    pub noise_levels: Vec<f32>,
    pub noise_seed: u64,
    /// Tiles training and validation images into square patches.
    pub patch_size: Option<usize>,
    pub percentiles: Option<(f64, f64)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            layout: LayoutConfig::Preset("dsb".into()),
            holdout_seed: 0,
            noise_levels: vec![40.0],
            noise_seed: 0,
            patch_size: None,
            percentiles: None,
        }
    }
}

/// `"dsb"`, `"bbbc"`, `"flat"`, or an explicit layout table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutConfig {
    Preset(String),
    Custom(DatasetLayout),
}

impl LayoutConfig {
    pub fn resolve(&self, holdout_seed: u64) -> Result<DatasetLayout> {
        match self {
            LayoutConfig::Custom(l) => Ok(l.clone()),
            LayoutConfig::Preset(name) => match name.as_str() {
                "dsb" => Ok(DatasetLayout::dsb(holdout_seed)),
                "bbbc" => Ok(DatasetLayout::bbbc(holdout_seed)),
                "flat" => Ok(DatasetLayout::flat()),
                other => Err(Error::Grid(format!("unknown dataset layout {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub schemes: Vec<String>,
    pub subset_sizes: SubsetSizes,
    pub subset_indices: Vec<usize>,
    /// Defaults to the preset's repeat count.
    pub repeats: Option<usize>,
    pub thresholds: Option<Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            schemes: vec!["baseline_unet".into(), "sequential_unet".into()],
            subset_sizes: SubsetSizes::Named("dsb".into()),
            subset_indices: vec![1],
            repeats: None,
            thresholds: None,
        }
    }
}

/// `"dsb"`, `"bbbc"` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetSizes {
    Named(String),
    List(Vec<usize>),
}

impl SubsetSizes {
    pub fn resolve(&self) -> Result<Vec<usize>> {
        match self {
            SubsetSizes::List(v) => Ok(v.clone()),
            SubsetSizes::Named(n) if n == "dsb" => Ok(DSB_SUBSET_SIZES.to_vec()),
            SubsetSizes::Named(n) if n == "bbbc" => Ok(BBBC_SUBSET_SIZES.to_vec()),
            SubsetSizes::Named(n) => Err(Error::Grid(format!("unknown subset sizes {n:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub initial_lr: Option<f32>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    /// `0` trains on whole images.
    pub patch_size: Option<usize>,
    pub augment: Option<bool>,
    /// `0` scores every validation image.
    pub max_val_images: Option<usize>,
    /// `false` keeps the learning rate constant.
    pub plateau: Option<bool>,
    pub plateau_factor: Option<f32>,
    pub plateau_patience: Option<usize>,
    pub min_lr: Option<f32>,
}

impl ScheduleOverrides {
    pub fn apply(&self, mut s: TrainSchedule) -> TrainSchedule {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        set!(initial_lr, batch_size, epochs, steps_per_epoch, augment);
        if let Some(p) = self.patch_size {
            s.patch_size = (p > 0).then_some(p);
        }
        if let Some(m) = self.max_val_images {
            s.max_val_images = (m > 0).then_some(m);
        }
        let (mut factor, mut patience, mut min_lr) = match s.lr_policy {
            LrPolicy::Plateau { factor, patience, min_lr } => (factor, patience, min_lr),
            LrPolicy::Constant => match LrPolicy::default() {
                LrPolicy::Plateau { factor, patience, min_lr } => (factor, patience, min_lr),
                LrPolicy::Constant => unreachable!("default policy is a plateau"),
            },
        };
        factor = self.plateau_factor.unwrap_or(factor);
        patience = self.plateau_patience.unwrap_or(patience);
        min_lr = self.min_lr.unwrap_or(min_lr);
        let plateau = self.plateau.unwrap_or(matches!(s.lr_policy, LrPolicy::Plateau { .. }));
        s.lr_policy = if plateau {
            LrPolicy::Plateau { factor, patience, min_lr }
        } else {
            LrPolicy::Constant
        };
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: Option<usize>,
    pub base_features: Option<usize>,
    pub batch_norm: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub border_weight: Option<f32>,
    pub distance_weight: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct N2VOverrides {
    pub mask_fraction: Option<f64>,
    pub replacement_radius: Option<usize>,
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Defaults to `<dir>/denoisers`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies `key.path=value`
    /// overrides; values are parsed as TOML, falling back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|source| Error::Toml {
                    path: p.to_path_buf(),
                    source,
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value).try_into().map_err(|source| Error::Toml {
            path: path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<flags>")),
            source,
        })
    }

    pub fn noise_labels(&self) -> Vec<String> {
        self.data
            .noise_levels
            .iter()
            .map(|&s| NoiseSpec::new(s, self.data.noise_seed).label())
            .collect()
    }

    pub fn schemes(&self) -> Result<Vec<Scheme>> {
        Ok(self
            .grid
            .schemes
            .iter()
            .map(|s| s.parse())
            .collect::<nucleiseg::Result<Vec<Scheme>>>()?)
    }

    pub fn settings(&self) -> Result<RunSettings> {
        let mut s = RunSettings::from_preset(self.preset);
        s.schedule = self.schedule.apply(s.schedule);
        s.denoiser_schedule = self.denoiser_schedule.apply(self.schedule.apply(s.denoiser_schedule));
        let spec = &mut s.options.spec;
        spec.depth = self.network.depth.unwrap_or(spec.depth);
        spec.base_features = self.network.base_features.unwrap_or(spec.base_features);
        spec.batch_norm = self.network.batch_norm.unwrap_or(spec.batch_norm);
        let loss = &mut s.options.loss;
        loss.border_weight = self.loss.border_weight.unwrap_or(loss.border_weight);
        loss.distance_weight = self.loss.distance_weight.unwrap_or(loss.distance_weight);
        if let Some(p) = self.data.percentiles {
            s.options.percentiles = p;
        }
        let n2v = &mut s.n2v;
        n2v.mask_fraction = self.n2v.mask_fraction.unwrap_or(n2v.mask_fraction);
        n2v.replacement_radius = self.n2v.replacement_radius.unwrap_or(n2v.replacement_radius);
        n2v.val_fraction = self.n2v.val_fraction.unwrap_or(n2v.val_fraction);
        s.subset_sizes = self.grid.subset_sizes.resolve()?;
        if let Some(t) = &self.grid.thresholds {
            s.thresholds = t.clone();
        }
        Ok(s)
    }

    pub fn to_grid(&self) -> Result<ExperimentGrid> {
        let mut grid = ExperimentGrid::new(
            self.schemes()?,
            self.noise_labels(),
            self.grid.subset_indices.clone(),
            self.preset,
        );
        grid.repeats = self.grid.repeats.unwrap_or(grid.repeats);
        grid.seed = self.seed;
        grid.settings = self.settings()?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn layout(&self) -> Result<DatasetLayout> {
        self.data.layout.resolve(self.data.holdout_seed)
    }

    /// Loads (materializing if needed) the variant of one noise level,
    /// tiling train and validation images when a patch size is configured.
    pub fn load_split(&self, std: f32) -> Result<DatasetSplit> {
        let layout = self.layout()?;
        let root = if std == 0.0 {
            self.data.root.clone()
        } else {
            materialize_noisy_variant(&self.data.root, &layout, &NoiseSpec::new(std, self.data.noise_seed))?
        };
        let mut split = load_dataset(&root, &layout)?;
        if let Some(p) = self.data.patch_size {
            split.train = extract_patches(&split.train, p);
            split.validation = extract_patches(&split.validation, p);
        }
        Ok(split)
    }

    pub fn load_splits(&self) -> Result<BTreeMap<String, DatasetSplit>> {
        self.data
            .noise_levels
            .iter()
            .zip(self.noise_labels())
            .map(|(&s, label)| Ok((label, self.load_split(s)?)))
            .collect()
    }

    pub fn noise_std(&self, label: &str) -> Result<f32> {
        self.data
            .noise_levels
            .iter()
            .zip(self.noise_labels())
            .find(|(_, l)| l == label)
            .map(|(&s, _)| s)
            .ok_or_else(|| Error::MissingNoiseLevel(label.to_string()))
    }

    /// `$NUCLEISEG_CACHE_DIR`, then `output.cache_dir`, then `<output.dir>/denoisers`.
    pub fn cache_dir(&self) -> PathBuf {
        std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output.cache_dir.clone())
            .unwrap_or_else(|| self.output.dir.join("denoisers"))
    }
}

/// Fails unless the requested device (if any) is the CPU.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(Error::Grid(format!(
            "{DEVICE_ENV}={d}: only the cpu device is available"
        ))),
        _ => Ok(()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Grid(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Grid(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
