use std::collections::BTreeSet;
use std::fmt;

use nucleiseg::dataio::DSB_SUBSET_SIZES;
use nucleiseg::denoise::N2VConfig;
use nucleiseg::infer::default_threshold_grid;
use nucleiseg::network::Head;
use nucleiseg::segtrain::{Scheme, SchemeOptions, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    Paper,
    #[default]
    Desk,
}

impl SchedulePreset {
    pub fn schedule(self, seed: u64) -> TrainSchedule {
        match self {
            SchedulePreset::Paper => TrainSchedule::paper(seed),
            SchedulePreset::Desk => TrainSchedule::desk(seed),
        }
    }

    pub fn default_repeats(self) -> usize {
        match self {
            SchedulePreset::Paper => 8,
            SchedulePreset::Desk => 3,
        }
    }
}

/// Everything a cell needs besides its coordinates. Schedule seeds are
/// ignored; each cell derives its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub schedule: TrainSchedule,
    pub denoiser_schedule: TrainSchedule,
    pub options: SchemeOptions,
    pub n2v: N2VConfig,
    /// Nested training subset sizes `P1..Pn`.
    pub subset_sizes: Vec<usize>,
    /// Candidate thresholds swept on validation data.
    pub thresholds: Vec<f64>,
}

impl RunSettings {
    pub fn from_preset(preset: SchedulePreset) -> Self {
        Self {
            schedule: preset.schedule(0),
            denoiser_schedule: preset.schedule(0),
            options: SchemeOptions::default(),
            n2v: N2VConfig::default(),
            subset_sizes: DSB_SUBSET_SIZES.to_vec(),
            thresholds: default_threshold_grid(),
        }
    }
}

/// Scheme × noise level × training subset × repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub schemes: Vec<Scheme>,
    /// Noise level labels such as `n40`; each must have a dataset split.
    pub noise_levels: Vec<String>,
    /// 1-based subset indices.
    pub subset_indices: Vec<usize>,
    pub repeats: usize,
    pub schedule_preset: SchedulePreset,
    /// Root of every derived seed.
    pub seed: u64,
    pub settings: RunSettings,
}

impl ExperimentGrid {
    pub fn new(
        schemes: Vec<Scheme>,
        noise_levels: Vec<String>,
        subset_indices: Vec<usize>,
        preset: SchedulePreset,
    ) -> Self {
        Self {
            schemes,
            noise_levels,
            subset_indices,
            repeats: preset.default_repeats(),
            schedule_preset: preset,
            seed: 0,
            settings: RunSettings::from_preset(preset),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Grid(m));
        if self.schemes.is_empty() || self.noise_levels.is_empty() || self.subset_indices.is_empty() {
            return fail("schemes, noise levels and subsets must all be non-empty".into());
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if has_duplicates(&self.schemes) || has_duplicates(&self.noise_levels) || has_duplicates(&self.subset_indices) {
            return fail("grid axes must not repeat values".into());
        }
        let n = self.settings.subset_sizes.len();
        if let Some(i) = self.subset_indices.iter().find(|&&i| i == 0 || i > n) {
            return fail(format!("subset index {i} outside 1..={n}"));
        }
        if self.settings.thresholds.is_empty() {
            return fail("threshold grid is empty".into());
        }
        if self.settings.options.spec.head != Head::Joint {
            return fail("network options must use the joint head; schemes pick their own".into());
        }
        self.settings.schedule.validate()?;
        if self.schemes.iter().any(|s| s.needs_denoiser()) {
            self.settings.denoiser_schedule.validate()?;
        }
        Ok(())
    }

    /// Every cell, noise level outermost so one denoiser serves a block of cells.
    pub fn cells(&self) -> Vec<RunKey> {
        let mut out = Vec::with_capacity(self.len());
        for noise in &self.noise_levels {
            for repeat in 0..self.repeats {
                for &subset_index in &self.subset_indices {
                    for &scheme in &self.schemes {
                        out.push(RunKey {
                            scheme,
                            noise: noise.clone(),
                            subset_index,
                            repeat,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.schemes.len() * self.noise_levels.len() * self.subset_indices.len() * self.repeats
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training seed of one cell.
    pub fn train_seed(&self, key: &RunKey) -> u64 {
        derive_seed(
            self.seed,
            &[
                "train",
                key.scheme.name(),
                &key.noise,
                &key.subset_index.to_string(),
                &key.repeat.to_string(),
            ],
        )
    }

    /// Seed of the subset permutation. Shared by all schemes, subsets and
    /// noise levels of one repeat, so their comparisons are paired.
    pub fn subset_seed(&self, repeat: usize) -> u64 {
        derive_seed(self.seed, &["subsets", &repeat.to_string()])
    }

    /// Seed of the denoiser for one noise level.
    pub fn denoiser_seed(&self, noise: &str) -> u64 {
        derive_seed(self.seed, &["denoiser", noise])
    }
}

fn has_duplicates<T: Ord>(v: &[T]) -> bool {
    v.iter().collect::<BTreeSet<_>>().len() != v.len()
}

/// Grid coordinates of one run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub scheme: Scheme,
    pub noise: String,
    pub subset_index: usize,
    pub repeat: usize,
}

impl RunKey {
    /// File-system safe identifier.
    pub fn id(&self) -> String {
        format!(
            "{}__{}__p{:02}__r{:02}",
            self.noise, self.scheme, self.subset_index, self.repeat
        )
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Stable 64-bit FNV-1a; `std`'s hasher is not guaranteed stable across releases.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Pure function of the root seed and the labelled coordinates.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut z = root ^ stable_hash(parts.join("/").as_bytes());
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> ExperimentGrid {
        let mut g = ExperimentGrid::new(
            vec![Scheme::BaselineUNet, Scheme::SequentialUNet],
            vec!["n40".into()],
            vec![1, 2],
            SchedulePreset::Desk,
        );
        g.repeats = 2;
        g
    }

    #[test]
    fn cell_count_is_the_product() {
        let g = grid();
        g.validate().unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 8);
        let unique: BTreeSet<_> = cells.iter().map(RunKey::id).collect();
        assert_eq!(unique.len(), 8);
    }

    #[test]
    fn seeds_are_distinct_and_reproducible() {
        let g = grid();
        let seeds: BTreeSet<_> = g.cells().iter().map(|k| g.train_seed(k)).collect();
        assert_eq!(seeds.len(), 8);
        let again: BTreeSet<_> = grid().cells().iter().map(|k| grid().train_seed(k)).collect();
        assert_eq!(seeds, again);
        assert_ne!(g.subset_seed(0), g.subset_seed(1));
        let mut other = grid();
        other.seed = 1;
        assert_ne!(other.train_seed(&g.cells()[0]), g.train_seed(&g.cells()[0]));
    }

    #[test]
    fn paper_grid_has_sixty_setups_per_noise_level() {
        let mut g = ExperimentGrid::new(Scheme::ALL.to_vec(), vec!["n40".into()], (1..=10).collect(), SchedulePreset::Paper);
        g.repeats = 1;
        g.validate().unwrap();
        assert_eq!(g.len(), 60);
        assert_eq!(SchedulePreset::Paper.default_repeats(), 8);
    }

    #[test]
    fn invalid_grids_rejected() {
        let mut g = grid();
        g.repeats = 0;
        assert!(g.validate().is_err());
        let mut g = grid();
        g.subset_indices = vec![11];
        assert!(g.validate().is_err());
        let mut g = grid();
        g.schemes.clear();
        assert!(g.validate().is_err());
        let mut g = grid();
        g.noise_levels = vec!["n40".into(), "n40".into()];
        assert!(g.validate().is_err());
    }

    #[test]
    fn fnv_matches_reference_vector() {
        assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
