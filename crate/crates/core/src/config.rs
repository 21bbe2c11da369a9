//! Experiment configuration (JSON).
//!
//! All physical quantities are SI: metres, seconds, hertz, m/s, kg/m³.
//! Environment entries are either inline, a path to an environment file
//! (resolved relative to the config file), or for `env_e2` a perturbation
//! of `env_e1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, RangeBinning};
use crate::feast::FeastOptions;
use crate::mfp::{MfpError, MfpGridSpec};
use crate::network::{CheckpointPolicy, TrainConfig};
use crate::scenario::{NoiseSpec, Sampling, SourceDomain, TrajectorySpec};
use crate::waveguide::{ArrayGeometry, BottomCondition, SoundSpeedProfile, WaveguideEnv, WaveguideError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("schema_version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Waveguide(#[from] WaveguideError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mfp(#[from] MfpError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Environment file contents: `(depth, speed)` pairs plus boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub ssp: Vec<[f64; 2]>,
    pub water_depth: f64,
    pub bottom: BottomCondition,
    pub density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seabed_speed: Option<f64>,
    /// Informational; the experiment frequency comes from the config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

impl EnvSpec {
    pub fn to_env(&self) -> Result<WaveguideEnv> {
        let depths: Vec<f64> = self.ssp.iter().map(|p| p[0]).collect();
        let speeds: Vec<f64> = self.ssp.iter().map(|p| p[1]).collect();
        let ssp = SoundSpeedProfile::new(depths, speeds)?;
        if (ssp.bottom_depth() - self.water_depth).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "water_depth {} differs from last profile depth {}",
                self.water_depth,
                ssp.bottom_depth()
            )));
        }
        Ok(WaveguideEnv::new(ssp, self.bottom, self.density)?.with_seabed_speed(self.seabed_speed)?)
    }

    pub fn from_env(env: &WaveguideEnv) -> Self {
        Self {
            ssp: env.ssp.depths().iter().zip(env.ssp.speeds()).map(|(z, c)| [*z, *c]).collect(),
            water_depth: env.water_depth(),
            bottom: env.bottom,
            density: env.density,
            seabed_speed: env.seabed_speed,
            frequency: None,
        }
    }
}

/// Sound-speed offset over the upper water column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SspPerturbation {
    pub above_depth: f64,
    pub offset: f64,
    #[serde(default = "default_ramp")]
    pub ramp: f64,
}

fn default_ramp() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    File { file: PathBuf },
    PerturbedE1 { perturb_e1: SspPerturbation },
    Inline(EnvSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArraySpec {
    Uniform { top: f64, bottom: f64, count: usize },
    Explicit { depths: Vec<f64> },
}

impl ArraySpec {
    pub fn to_geometry(&self) -> Result<ArrayGeometry> {
        Ok(match self {
            Self::Uniform { top, bottom, count } => ArrayGeometry::uniform(*top, *bottom, *count)?,
            Self::Explicit { depths } => ArrayGeometry::new(depths.clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetSpec {
    pub n_samples: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetSpec {
    #[serde(flatten)]
    pub trajectory: TrajectorySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MfpConfig {
    /// One range per bin center, `fan` depths spaced `step` around `nominal_depth`.
    Fan { nominal_depth: f64, fan: usize, step: f64 },
    Explicit(MfpGridSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub frequency: f64,
    /// Vertical step of the mode solver grid.
    pub grid_step: f64,
    pub array: ArraySpec,
    pub env_e1: EnvSource,
    pub env_e2: EnvSource,
    pub domain: SourceDomain,
    pub binning: RangeBinning,
    pub train: TrainSetSpec,
    pub test: TestSetSpec,
    pub network: TrainConfig,
    #[serde(default)]
    pub feast: FeastOptions,
    pub mfp: MfpConfig,
    /// Epochs whose tracks go into the plot bundle (`selected` and `final`
    /// are always added).
    #[serde(default = "default_plot_epochs")]
    pub plot_epochs: Vec<usize>,
}

fn default_plot_epochs() -> Vec<usize> {
    vec![10]
}

/// Mild downward-refracting thermocline over a 216.5 m water column.
pub fn thermocline_e1() -> EnvSpec {
    EnvSpec {
        ssp: vec![
            [0.0, 1521.5],
            [10.0, 1521.0],
            [20.0, 1518.0],
            [30.0, 1510.0],
            [40.0, 1501.0],
            [50.0, 1496.0],
            [60.0, 1493.5],
            [80.0, 1491.5],
            [100.0, 1490.5],
            [150.0, 1489.0],
            [216.5, 1488.2],
        ],
        water_depth: 216.5,
        bottom: BottomCondition::Rigid,
        density: 1000.0,
        seabed_speed: Some(1572.0),
        frequency: Some(232.0),
    }
}

impl ExperimentConfig {
    /// Laptop-scale default: 2000 training samples, [462, 128, 128, 201],
/// 1000 epochs of batch 16 (a few minutes on one core).
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            frequency: 232.0,
            grid_step: 0.1,
            array: ArraySpec::Uniform { top: 94.125, bottom: 212.25, count: 21 },
            env_e1: EnvSource::Inline(thermocline_e1()),
            env_e2: EnvSource::PerturbedE1 {
                perturb_e1: SspPerturbation { above_depth: 50.0, offset: 2.0, ramp: 1.0 },
            },
            domain: SourceDomain { r_min: 1100.0, r_max: 5000.0, z_min: 1.0, z_max: 30.0 },
            binning: RangeBinning::new(1100.0, 5000.0, 201).expect("valid binning"),
            train: TrainSetSpec { n_samples: 2000, sampling: Sampling::Grid, noise: None },
            test: TestSetSpec {
                trajectory: TrajectorySpec {
                    start_range: 1200.0,
                    speed: 2.5,
                    source_depth: 9.0,
                    interval: 10.0,
                    count: 80,
                },
                noise: None,
            },
            // Long enough for the training loss to flatten out, which is
            // when the track-misfit term starts to decide the epoch.
            network: TrainConfig {
                batch_size: 16,
                max_epochs: 1000,
                checkpoints: CheckpointPolicy::Ring { capacity: 16 },
                ..TrainConfig::desk()
            },
            feast: FeastOptions::default(),
            mfp: MfpConfig::Fan { nominal_depth: 9.0, fan: 5, step: 1.0 },
            plot_epochs: default_plot_epochs(),
        }
    }

    /// 12000 samples, four 1024-unit hidden layers, 2000 epochs. Long-running.
    pub fn paper() -> Self {
        Self {
            train: TrainSetSpec { n_samples: 12000, sampling: Sampling::Grid, noise: None },
            network: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: origin.into(), source })?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion { found, expected: SCHEMA_VERSION });
        }
        serde_json::from_value(value).map_err(|source| ConfigError::Parse { path: origin.into(), source })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates every section and materializes the physical objects.
    /// Relative environment paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        if !(self.frequency > 0.0) {
            return Err(ConfigError::Invalid("frequency must be positive".into()));
        }
        let load_env = |src: &EnvSource, e1: Option<&WaveguideEnv>| -> Result<WaveguideEnv> {
            match src {
                EnvSource::Inline(spec) => spec.to_env(),
                EnvSource::File { file } => {
                    let path = base_dir.join(file);
                    let text =
                        fs::read_to_string(&path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
                    let spec: EnvSpec =
                        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path, source })?;
                    spec.to_env()
                }
                EnvSource::PerturbedE1 { perturb_e1: p } => {
                    let base = e1.ok_or_else(|| ConfigError::Invalid("env_e1 cannot perturb itself".into()))?;
                    let ssp = base.ssp.with_offset_above(p.above_depth, p.offset, p.ramp)?;
                    Ok(WaveguideEnv::new(ssp, base.bottom, base.density)?.with_seabed_speed(base.seabed_speed)?)
                }
            }
        };
        let e1 = load_env(&self.env_e1, None)?;
        let e2 = load_env(&self.env_e2, Some(&e1))?;
        if (e1.water_depth() - e2.water_depth()).abs() > 1e-9 {
            return Err(ConfigError::Invalid("E1 and E2 must share the water depth".into()));
        }
        let array = self.array.to_geometry()?;
        array.check_within(e1.water_depth())?;
        if (self.binning.r_min() - self.domain.r_min).abs() > 1e-9 || (self.binning.r_max() - self.domain.r_max).abs() > 1e-9 {
            return Err(ConfigError::Invalid("binning must span the domain's range interval".into()));
        }
        self.network.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mfp_grid = match &self.mfp {
            MfpConfig::Fan { nominal_depth, fan, step } => {
                MfpGridSpec::from_binning(&self.binning, *nominal_depth, *fan, *step)?
            }
            MfpConfig::Explicit(spec) => spec.clone(),
        };
        mfp_grid.validate(e1.water_depth())?;
        Ok(Experiment { config: self.clone(), e1, e2, array, mfp_grid })
    }
}

/// A validated configuration with its environments built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub e1: WaveguideEnv,
    pub e2: WaveguideEnv,
    pub array: ArrayGeometry,
    pub mfp_grid: MfpGridSpec,
}
