//! Training sets, moving-source test tracks and their on-disk formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{self, diagonal_real_positions, elements_for_feature_len, FeatureError, RangeBinning};
use crate::waveguide::{self, ArrayGeometry, ModeSet, PressureVector, WaveguideEnv, WaveguideError};

pub const DATASET_MAGIC: &str = "FEAST-DATASET";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const IMPORT_HEADER_PREFIX: &str = "FEAST-IMPORT v1, n=";
const MANIFEST_END: &[u8] = b"\n---\n";
const IMPORT_TRACE_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Waveguide(#[from] WaveguideError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("cannot factor {0} samples into a range x depth grid")]
    GridFactorization(usize),
    #[error("invalid source domain: {0}")]
    InvalidDomain(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("track leaves the source domain at sample {index} (range {range} m)")]
    TrackLeavesDomain { index: usize, range: f64 },
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("dataset has no sample times")]
    MissingTimes,
    #[error("dataset has no truth ranges")]
    MissingTruth,
    #[error("dataset shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("dataset format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("dataset checksum mismatch")]
    ChecksumMismatch,
    #[error("import line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("import line {line}: diagonal sums to {trace}, expected 1")]
    TraceViolation { line: usize, trace: f64 },
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Region of candidate source positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceDomain {
    pub r_min: f64,
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl SourceDomain {
    pub fn validate(&self, water_depth: f64) -> Result<()> {
        if !(0.0 < self.r_min && self.r_min < self.r_max) {
            return Err(ScenarioError::InvalidDomain(format!(
                "need 0 < r_min < r_max, got {} .. {}",
                self.r_min, self.r_max
            )));
        }
        if !(0.0 < self.z_min && self.z_min < self.z_max && self.z_max < water_depth) {
            return Err(ScenarioError::InvalidDomain(format!(
                "need 0 < z_min < z_max < {water_depth}, got {} .. {}",
                self.z_min, self.z_max
            )));
        }
        Ok(())
    }
}

/// Constant-velocity source track sampled every `interval` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start_range: f64,
    pub speed: f64,
    pub source_depth: f64,
    pub interval: f64,
    pub count: usize,
}

impl TrajectorySpec {
    pub fn times(&self) -> Vec<f64> {
        (0..self.count).map(|i| i as f64 * self.interval).collect()
    }

    pub fn ranges(&self) -> Vec<f64> {
        self.times().iter().map(|t| self.start_range + self.speed * t).collect()
    }
}

/// How training positions fill the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Cell centers of an `n_r × n_z` grid.
    #[default]
    Grid,
    /// Independent uniform draws.
    Random { seed: u64 },
}

/// Additive complex circular Gaussian noise applied to each snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

/// Solved modes plus receiver geometry; produces one feature row per source position.
#[derive(Debug, Clone)]
pub struct Simulator {
    modes: ModeSet,
    array: ArrayGeometry,
}

impl Simulator {
    pub fn new(env: &WaveguideEnv, array: &ArrayGeometry, frequency: f64, grid_step: f64) -> Result<Self> {
        array.check_within(env.water_depth())?;
        let modes = waveguide::solve_modes(env, frequency, grid_step)?;
        Ok(Self { modes, array: array.clone() })
    }

    pub fn from_modes(modes: ModeSet, array: ArrayGeometry) -> Self {
        Self { modes, array }
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn array(&self) -> &ArrayGeometry {
        &self.array
    }

    pub fn water_depth(&self) -> f64 {
        self.modes.water_depth()
    }

    pub fn pressure(&self, range: f64, depth: f64) -> Result<PressureVector> {
        Ok(waveguide::pressure_field(&self.modes, range, depth, &self.array)?)
    }

    /// Feature row for one position. `noise` carries the SNR and a per-row stream.
    pub fn feature(&self, range: f64, depth: f64, noise: Option<(NoiseSpec, u64)>) -> Result<Vec<f64>> {
        let mut p = self.pressure(range, depth)?;
        if let Some((spec, stream)) = noise {
            add_noise(&mut p, spec, stream);
        }
        Ok(features::covariance_feature(&p)?.0)
    }

    fn rows(&self, positions: &[(f64, f64)], noise: Option<NoiseSpec>) -> Result<Array2<f64>> {
        let dim = features::feature_len(self.array.len());
        let rows: Vec<Vec<f64>> = positions
            .par_iter()
            .enumerate()
            .map(|(i, &(r, z))| self.feature(r, z, noise.map(|n| (n, i as u64))))
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((positions.len(), dim), flat)
            .map_err(|e| ScenarioError::ShapeMismatch(e.to_string()))
    }
}

fn add_noise(p: &mut PressureVector, spec: NoiseSpec, stream: u64) {
    let n = p.len() as f64;
    let signal = p.norm_sqr() / n;
    let variance = signal / 10f64.powf(spec.snr_db / 10.0);
    let normal = Normal::new(0.0, (variance / 2.0).sqrt()).expect("finite variance");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    for v in p.0.iter_mut() {
        *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
    }
}

/// Splits `n_samples` into `(n_r, n_z)` with range cells about ten times
/// wider than depth cells.
pub fn grid_factorization(n_samples: usize, domain: &SourceDomain) -> Result<(usize, usize)> {
    if n_samples < 2 {
        return Err(ScenarioError::GridFactorization(n_samples));
    }
    let target = ((domain.r_max - domain.r_min) / (10.0 * (domain.z_max - domain.z_min))).ln();
    let mut best: Option<(f64, usize)> = None;
    for n_r in (2..=n_samples).rev() {
        if !n_samples.is_multiple_of(n_r) {
            continue;
        }
        let n_z = n_samples / n_r;
        let score = ((n_r as f64 / n_z as f64).ln() - target).abs();
        if best.is_none_or(|(s, _)| score < s - 1e-12) {
            best = Some((score, n_r));
        }
    }
    best.map(|(_, n_r)| (n_r, n_samples / n_r)).ok_or(ScenarioError::GridFactorization(n_samples))
}

/// Source positions `(range, depth)` in row order of the generated training set.
pub fn training_positions(domain: &SourceDomain, n_samples: usize, sampling: Sampling) -> Result<Vec<(f64, f64)>> {
    match sampling {
        Sampling::Grid => {
            let (n_r, n_z) = grid_factorization(n_samples, domain)?;
            let dr = (domain.r_max - domain.r_min) / n_r as f64;
            let dz = (domain.z_max - domain.z_min) / n_z as f64;
            Ok((0..n_r)
                .flat_map(|i| {
                    let r = domain.r_min + (i as f64 + 0.5) * dr;
                    (0..n_z).map(move |j| (r, domain.z_min + (j as f64 + 0.5) * dz))
                })
                .collect())
        }
        Sampling::Random { seed } => {
            if n_samples == 0 {
                return Err(ScenarioError::GridFactorization(0));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n_samples)
                .map(|_| {
                    let r = rng.random_range(domain.r_min..domain.r_max);
                    let z = rng.random_range(domain.z_min..domain.z_max);
                    (r, z)
                })
                .collect())
        }
    }
}

/// Feature matrix with optional labels, times and evaluation-only truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Option<Array2<f64>>,
    pub times: Option<Vec<f64>>,
    pub truth_ranges: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Option<Array2<f64>>,
        times: Option<Vec<f64>>,
        truth_ranges: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if labels.as_ref().is_some_and(|l| l.nrows() != n) {
            return Err(ScenarioError::ShapeMismatch("label rows differ from input rows".into()));
        }
        if times.as_ref().is_some_and(|t| t.len() != n) {
            return Err(ScenarioError::ShapeMismatch("time count differs from input rows".into()));
        }
        if truth_ranges.as_ref().is_some_and(|t| t.len() != n) {
            return Err(ScenarioError::ShapeMismatch("truth count differs from input rows".into()));
        }
        Ok(Self { inputs, labels, times, truth_ranges })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.ncols())
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&Array2<f64>> {
        self.labels.as_ref().ok_or(ScenarioError::MissingLabels)
    }

    pub fn times(&self) -> Result<&[f64]> {
        self.times.as_deref().ok_or(ScenarioError::MissingTimes)
    }

    pub fn truth(&self) -> Result<&[f64]> {
        self.truth_ranges.as_deref().ok_or(ScenarioError::MissingTruth)
    }

    /// Copy with truth ranges removed.
    pub fn without_truth(&self) -> Self {
        Self { truth_ranges: None, ..self.clone() }
    }

    /// Label bin index of each row.
    pub fn label_bins(&self) -> Result<Vec<usize>> {
        let labels = self.labels()?;
        Ok(labels
            .rows()
            .into_iter()
            .map(|row| row.iter().position(|v| *v == 1.0).unwrap_or(0))
            .collect())
    }
}

pub fn gen_training_set(
    sim: &Simulator,
    domain: &SourceDomain,
    n_samples: usize,
    binning: &RangeBinning,
    sampling: Sampling,
    noise: Option<NoiseSpec>,
) -> Result<Dataset> {
    domain.validate(sim.water_depth())?;
    let positions = training_positions(domain, n_samples, sampling)?;
    let inputs = sim.rows(&positions, noise)?;
    let mut labels = Array2::zeros((positions.len(), binning.n_bins()));
    for (i, (r, _)) in positions.iter().enumerate() {
        let label = features::encode_range(*r, binning)?;
        labels[[i, label.bin_index]] = 1.0;
    }
    let ranges = positions.iter().map(|p| p.0).collect();
    Dataset::new(inputs, Some(labels), None, Some(ranges))
}

pub fn gen_test_track(
    sim: &Simulator,
    traj: &TrajectorySpec,
    domain: &SourceDomain,
    noise: Option<NoiseSpec>,
) -> Result<Dataset> {
    domain.validate(sim.water_depth())?;
    if traj.count < 2 {
        return Err(ScenarioError::InvalidTrajectory(format!("need at least 2 samples, got {}", traj.count)));
    }
    if !(traj.speed >= 0.0) || !(traj.interval > 0.0) {
        return Err(ScenarioError::InvalidTrajectory("speed must be >= 0 and interval > 0".into()));
    }
    if !(traj.source_depth > 0.0 && traj.source_depth < sim.water_depth()) {
        return Err(ScenarioError::InvalidTrajectory(format!(
            "source depth {} outside the water column",
            traj.source_depth
        )));
    }
    let times = traj.times();
    let ranges = traj.ranges();
    if let Some((index, &range)) =
        ranges.iter().enumerate().find(|(_, r)| **r < domain.r_min || **r > domain.r_max)
    {
        return Err(ScenarioError::TrackLeavesDomain { index, range });
    }
    let positions: Vec<(f64, f64)> = ranges.iter().map(|r| (*r, traj.source_depth)).collect();
    let inputs = sim.rows(&positions, noise)?;
    Dataset::new(inputs, None, Some(times), Some(ranges))
}

fn f64s_to_bytes(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    f64s_to_bytes(&mut blob, d.inputs.iter().copied());
    if let Some(l) = &d.labels {
        f64s_to_bytes(&mut blob, l.iter().copied());
    }
    if let Some(t) = &d.times {
        f64s_to_bytes(&mut blob, t.iter().copied());
    }
    if let Some(t) = &d.truth_ranges {
        f64s_to_bytes(&mut blob, t.iter().copied());
    }
    let checksum = hex::encode(Sha256::digest(&blob));
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{DATASET_MAGIC}");
    let _ = writeln!(manifest, "format_version={DATASET_FORMAT_VERSION}");
    let _ = writeln!(manifest, "n_samples={}", d.n_samples());
    let _ = writeln!(manifest, "input_dim={}", d.input_dim());
    let _ = writeln!(manifest, "label_dim={}", d.label_dim());
    let _ = writeln!(manifest, "has_times={}", u8::from(d.times.is_some()));
    let _ = writeln!(manifest, "has_truth={}", u8::from(d.truth_ranges.is_some()));
    let _ = writeln!(manifest, "blob_bytes={}", blob.len());
    let _ = write!(manifest, "checksum=sha256:{checksum}");
    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(MANIFEST_END);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

/// Parsed dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n_samples: usize,
    pub input_dim: usize,
    pub label_dim: usize,
    pub has_times: bool,
    pub has_truth: bool,
    pub blob_bytes: usize,
    pub checksum: String,
}

fn split_manifest(bytes: &[u8]) -> Result<(DatasetHeader, &[u8])> {
    let end = bytes
        .windows(MANIFEST_END.len())
        .position(|w| w == MANIFEST_END)
        .ok_or_else(|| ScenarioError::Format("manifest terminator not found".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| ScenarioError::Format("manifest is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_MAGIC) {
        return Err(ScenarioError::Format("missing dataset magic".into()));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ScenarioError::Format(format!("bad manifest line {line:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| -> Result<&str> {
        fields.get(k).copied().ok_or_else(|| ScenarioError::Format(format!("manifest lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| ScenarioError::Format(format!("manifest field {k} is not a number")))
    };
    let flag = |k: &str| -> Result<bool> {
        match get(k)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(ScenarioError::Format(format!("manifest field {k} must be 0 or 1, got {other}"))),
        }
    };
    let format_version = num("format_version")? as u32;
    if format_version != DATASET_FORMAT_VERSION {
        return Err(ScenarioError::FormatVersionMismatch { found: format_version, expected: DATASET_FORMAT_VERSION });
    }
    let checksum = get("checksum")?
        .strip_prefix("sha256:")
        .ok_or_else(|| ScenarioError::Format("unsupported checksum kind".into()))?
        .to_string();
    let header = DatasetHeader {
        format_version,
        n_samples: num("n_samples")?,
        input_dim: num("input_dim")?,
        label_dim: num("label_dim")?,
        has_times: flag("has_times")?,
        has_truth: flag("has_truth")?,
        blob_bytes: num("blob_bytes")?,
        checksum,
    };
    Ok((header, &bytes[end + MANIFEST_END.len()..]))
}

/// Reads only the manifest of a dataset file.
pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    let bytes = fs::read(path)?;
    Ok(split_manifest(&bytes)?.0)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (h, blob) = split_manifest(&bytes)?;
    let n = h.n_samples;
    let expected_values = n * h.input_dim
        + n * h.label_dim
        + if h.has_times { n } else { 0 }
        + if h.has_truth { n } else { 0 };
    if blob.len() != h.blob_bytes || blob.len() != expected_values * 8 {
        return Err(ScenarioError::Format(format!(
            "blob is {} bytes, manifest implies {}",
            blob.len(),
            expected_values * 8
        )));
    }
    if hex::encode(Sha256::digest(blob)) != h.checksum {
        return Err(ScenarioError::ChecksumMismatch);
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |count: usize| -> Vec<f64> { values.by_ref().take(count).collect() };
    let shape_err = |e: ndarray::ShapeError| ScenarioError::Format(e.to_string());
    let inputs = Array2::from_shape_vec((n, h.input_dim), take(n * h.input_dim)).map_err(shape_err)?;
    let labels = if h.label_dim > 0 {
        Some(Array2::from_shape_vec((n, h.label_dim), take(n * h.label_dim)).map_err(shape_err)?)
    } else {
        None
    };
    let times = h.has_times.then(|| take(n));
    let truth = h.has_truth.then(|| take(n));
    Dataset::new(inputs, labels, times, truth)
}

/// Writes inputs and times in the plain-text import format.
pub fn export_series(d: &Dataset, path: &Path) -> Result<()> {
    let times = d.times()?;
    let n = elements_for_feature_len(d.input_dim())?;
    let mut out = format!("{IMPORT_HEADER_PREFIX}{n}\n");
    for (t, row) in times.iter().zip(d.inputs.rows()) {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an externally produced covariance series (unlabeled, no truth).
pub fn import_external_series(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(ScenarioError::MalformedRow { line: 1, reason: "empty file".into() })?;
    let n: usize = header
        .trim()
        .strip_prefix(IMPORT_HEADER_PREFIX)
        .and_then(|s| s.trim().parse().ok())
        .filter(|n| *n >= 1)
        .ok_or_else(|| ScenarioError::MalformedRow {
            line: 1,
            reason: format!("expected header \"{IMPORT_HEADER_PREFIX}<elements>\""),
        })?;
    let dim = features::feature_len(n);
    let diag = diagonal_real_positions(n);
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ScenarioError::MalformedRow { line: line_no, reason: e.to_string() })?;
        if values.len() != dim + 1 {
            return Err(ScenarioError::MalformedRow {
                line: line_no,
                reason: format!("expected {} values, found {}", dim + 1, values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ScenarioError::MalformedRow { line: line_no, reason: "non-finite value".into() });
        }
        let trace: f64 = diag.iter().map(|&i| values[1 + i]).sum();
        if (trace - 1.0).abs() > IMPORT_TRACE_TOL {
            return Err(ScenarioError::TraceViolation { line: line_no, trace });
        }
        times.push(values[0]);
        flat.extend_from_slice(&values[1..]);
    }
    let rows = times.len();
    let inputs = Array2::from_shape_vec((rows, dim), flat).map_err(|e| ScenarioError::ShapeMismatch(e.to_string()))?;
    Dataset::new(inputs, None, Some(times), None)
}
