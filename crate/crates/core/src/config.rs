//! Experiment configuration: size profiles, TOML files merged onto them, and
//! path overrides from the environment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rfssl_numerics::{OptimizerConfig, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datastore::SplitSpec;
use crate::downstream::{CellSpec, ComparisonSpec, FineTuneConfig, MatrixSpec, Task};
use crate::error::{Error, Result};
use crate::sigsynth::{derive_seed, ArrayGeometry, DatasetGrid, Modulation};
use crate::ssl::{Capacity, EncoderConfig, MoCoConfig};

/// Current configuration file format.
pub const CONFIG_VERSION: u32 = 1;

pub const ENV_OUT_DIR: &str = "RFSSL_OUT_DIR";
pub const ENV_DATA_DIR: &str = "RFSSL_DATA_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Seconds-scale run for CI.
    Smoke,
    /// Tens of minutes on one CPU core.
    #[default]
    Desk,
    /// Full-size hyperparameters; needs far more memory and time.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smoke" => Ok(Profile::Smoke),
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub grid: DatasetGrid,
    /// Recordings per (azimuth, elevation, modulation) cell.
    pub per_cell: usize,
    /// Hop between consecutive frames of a recording.
    pub frame_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub encoder: EncoderConfig,
    pub moco: MoCoConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSection {
    pub tasks: Vec<Task>,
    pub ratios: Vec<f64>,
    pub head_layers: Vec<usize>,
    /// Adds fine-tuned and supervised-from-scratch cells.
    pub finetune: bool,
    /// Explicit cells replace the generated grid when non-empty.
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub comparisons: Vec<ComparisonSpec>,
}

impl MatrixSection {
    pub fn spec(&self) -> MatrixSpec {
        if self.cells.is_empty() {
            MatrixSpec::standard(&self.tasks, &self.ratios, &self.head_layers, self.finetune)
        } else {
            MatrixSpec {
                cells: self.cells.clone(),
                comparisons: self.comparisons.clone(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSection {
    pub finetune: FineTuneConfig,
    pub matrix: MatrixSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub profile: Profile,
    /// Root seed; every section's seed derives from it.
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub split: SplitSpec,
    pub pretrain: PretrainSection,
    pub downstream: DownstreamSection,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let seed = 7;
        let angles = DatasetGrid::even_angles(5);
        let grid = |per_axis: usize, frames: usize, stride: usize| DatasetGrid {
            azimuths_deg: if per_axis == 5 {
                angles.clone()
            } else {
                DatasetGrid::even_angles(per_axis)
            },
            elevations_deg: if per_axis == 5 {
                angles.clone()
            } else {
                DatasetGrid::even_angles(per_axis)
            },
            modulations: Modulation::ALL.to_vec(),
            snr_db: [0.0, 20.0],
            samples_per_symbol: 8,
            phase_noise_std_rad: 0.05,
            recording_len: crate::FRAME_LEN + stride * (frames - 1),
            geometry: ArrayGeometry::default(),
            seed,
        };
        let moco = |batch: usize, steps: usize, hidden: usize, out: usize, warmup: usize| MoCoConfig {
            mlp_hidden: hidden,
            out_dim: out,
            batch_size: batch,
            epochs: 0,
            max_steps: Some(steps),
            lr_schedule: ScheduleKind::LinearWarmupThenCosine,
            warmup_steps: warmup,
            ..MoCoConfig::default()
        };
        let finetune = |epochs: usize, batch: usize| FineTuneConfig {
            epochs,
            batch_size: batch,
            optimizer: OptimizerConfig::adamw(1e-2, 1e-2),
            ..FineTuneConfig::default()
        };
        let (dataset, pre, down) = match profile {
            Profile::Smoke => (
                DatasetSection {
                    grid: grid(3, 20, 512),
                    per_cell: 1,
                    frame_stride: 512,
                },
                moco(32, 100, 256, 128, 10),
                DownstreamSection {
                    finetune: finetune(5, 64),
                    matrix: MatrixSection {
                        tasks: vec![Task::Aoa, Task::Amc],
                        ratios: vec![1.0],
                        head_layers: vec![1],
                        finetune: false,
                        cells: Vec::new(),
                        comparisons: Vec::new(),
                    },
                },
            ),
            Profile::Desk => (
                DatasetSection {
                    grid: grid(5, 171, 512),
                    per_cell: 2,
                    frame_stride: 512,
                },
                moco(128, 1000, 256, 128, 50),
                DownstreamSection {
                    finetune: finetune(15, 256),
                    matrix: MatrixSection {
                        tasks: vec![Task::Aoa, Task::Amc],
                        ratios: vec![1.0],
                        head_layers: vec![1, 2],
                        finetune: false,
                        cells: Vec::new(),
                        comparisons: Vec::new(),
                    },
                },
            ),
            Profile::Full => (
                DatasetSection {
                    grid: grid(5, 977, 1024),
                    per_cell: 4,
                    frame_stride: 1024,
                },
                MoCoConfig {
                    batch_size: 1024,
                    epochs: 20,
                    ..MoCoConfig::default()
                },
                DownstreamSection {
                    finetune: finetune(50, 256),
                    matrix: MatrixSection {
                        tasks: vec![Task::Aoa, Task::Amc],
                        ratios: vec![0.001, 0.01, 0.1, 1.0],
                        head_layers: vec![1, 2],
                        finetune: true,
                        cells: Vec::new(),
                        comparisons: Vec::new(),
                    },
                },
            ),
        };
        let capacity = match profile {
            Profile::Full => Capacity::Medium,
            _ => Capacity::Small,
        };
        let mut cfg = ExperimentConfig {
            version: CONFIG_VERSION,
            profile,
            seed,
            paths: Paths {
                data_dir: PathBuf::from("data"),
                out_dir: PathBuf::from("out"),
            },
            dataset,
            split: SplitSpec::default(),
            pretrain: PretrainSection {
                encoder: EncoderConfig::new(capacity),
                moco: pre,
                augment: AugmentConfig::default(),
            },
            downstream: down,
        };
        cfg.propagate_seed();
        cfg
    }

    /// Overwrites every section's seed with one derived from the root seed.
    pub fn propagate_seed(&mut self) {
        self.dataset.grid.seed = derive_seed(self.seed, 0);
        self.split.seed = derive_seed(self.seed, 1);
        self.downstream.finetune.seed = derive_seed(self.seed, 3);
    }

    /// Seed of the pretraining run.
    pub fn pretrain_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    /// Seed of the downstream matrix.
    pub fn downstream_seed(&self) -> u64 {
        self.downstream.finetune.seed
    }

    /// Parses TOML text and merges it onto the defaults of the profile it
    /// names (or `fallback`). Keys absent from the text keep their defaults.
    pub fn from_toml_str(text: &str, fallback: Profile) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let version = user
            .get("version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::config("configuration must set `version`"))?;
        if version != CONFIG_VERSION as i64 {
            return Err(Error::config(format!(
                "configuration version {version} is not supported (expected {CONFIG_VERSION})"
            )));
        }
        let profile = match user.get("profile").and_then(|v| v.as_str()) {
            Some(p) => p.parse()?,
            None => fallback,
        };
        let base = ExperimentConfig::for_profile(profile);
        let mut merged = toml::Value::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, user);
        let mut cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the bare profile when `path` is `None`, then applies
    /// environment path overrides.
    pub fn load(path: Option<&Path>, profile: Profile) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text, profile)?
            }
            None => Self::for_profile(profile),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Only paths may come from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_OUT_DIR).filter(|v| !v.is_empty()) {
            self.paths.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_DATA_DIR).filter(|v| !v.is_empty()) {
            self.paths.data_dir = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported configuration version {}",
                self.version
            )));
        }
        self.dataset.grid.validate()?;
        if self.dataset.per_cell == 0 || self.dataset.frame_stride == 0 {
            return Err(Error::config("per_cell and frame_stride must be positive"));
        }
        if self.dataset.grid.recording_len < crate::FRAME_LEN {
            return Err(Error::config("recording_len is shorter than one frame"));
        }
        if self.pretrain.encoder.n_rx != self.dataset.grid.geometry.n_rx {
            return Err(Error::config(format!(
                "encoder expects {} antennas, array has {}",
                self.pretrain.encoder.n_rx, self.dataset.grid.geometry.n_rx
            )));
        }
        self.split.validate()?;
        self.pretrain.encoder.validate()?;
        self.pretrain.moco.validate()?;
        self.pretrain.augment.validate()?;
        self.downstream.finetune.validate()?;
        self.downstream.matrix.spec().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Recursive table merge; values in `over` win.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for p in [Profile::Smoke, Profile::Desk, Profile::Full] {
            let cfg = ExperimentConfig::for_profile(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text, Profile::Desk).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_merges_onto_profile() {
        let text = "version = 1\nprofile = \"smoke\"\nseed = 11\n[pretrain.moco]\nbatch_size = 16\n";
        let cfg = ExperimentConfig::from_toml_str(text, Profile::Desk).unwrap();
        assert_eq!(cfg.profile, Profile::Smoke);
        assert_eq!(cfg.pretrain.moco.batch_size, 16);
        assert_eq!(cfg.pretrain.moco.max_steps, Some(100));
        assert_eq!(cfg.dataset.grid.seed, derive_seed(11, 0));
    }

    #[test]
    fn version_is_required() {
        assert!(ExperimentConfig::from_toml_str("seed = 1", Profile::Smoke).is_err());
        assert!(ExperimentConfig::from_toml_str("version = 2", Profile::Smoke).is_err());
    }

    #[test]
    fn env_overrides_paths_only() {
        let mut cfg = ExperimentConfig::for_profile(Profile::Smoke);
        let before = cfg.clone();
        cfg.apply_env(|k| (k == ENV_OUT_DIR).then(|| "/tmp/x".to_string()));
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/tmp/x"));
        cfg.paths = before.paths.clone();
        assert_eq!(cfg, before);
    }
}
