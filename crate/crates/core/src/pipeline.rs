//! File-based experiment stages sharing one run directory.
//!
//! ```text
//! train.ds  test.ds          gen
//! trace.csv  predictions.bin train   (+ checkpoints/, final.ckpt)
//! feast_report.csv           select  (+ selected.ckpt on request)
//! eval.csv                   eval
//! mfp.csv                    mfp
//! plot/*.csv                 plotdata
//! ```
//!
//! `train` and `select` never read truth ranges.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, Experiment};
use crate::feast::{self, FeastError, FeastTrace};
use crate::mfp::{self, MfpError};
use crate::network::{self, EpochRecord, EpochTrace, NetworkError, TrainConfig};
use crate::scenario::{self, Dataset, ScenarioError, Simulator};
use crate::waveguide::WaveguideError;

const PREDICTIONS_MAGIC: &[u8; 10] = b"FEASTPRED1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("missing artifact {0} (run the earlier stage first)")]
    MissingArtifact(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },
    #[error(transparent)]
    Waveguide(#[from] WaveguideError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feast(#[from] FeastError),
    #[error(transparent)]
    Mfp(#[from] MfpError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Broad failure class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Config => 2,
            Self::Numeric => 3,
            Self::Io => 4,
        }
    }
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        use ScenarioError as S;
        match self {
            Self::Config(ConfigError::Read { .. }) => ErrorClass::Io,
            Self::Config(_) | Self::Usage(_) => ErrorClass::Config,
            Self::MissingArtifact(_) | Self::Io { .. } | Self::BadArtifact { .. } => ErrorClass::Io,
            Self::Scenario(
                S::Io(_)
                | S::Format(_)
                | S::FormatVersionMismatch { .. }
                | S::ChecksumMismatch
                | S::MalformedRow { .. }
                | S::TraceViolation { .. },
            ) => ErrorClass::Io,
            Self::Network(NetworkError::Io(_) | NetworkError::BadCheckpoint(_)) => ErrorClass::Io,
            Self::Feast(FeastError::BadReport(_)) => ErrorClass::Io,
            Self::Scenario(S::InvalidDomain(_) | S::InvalidTrajectory(_) | S::TrackLeavesDomain { .. }) => {
                ErrorClass::Config
            }
            Self::Network(NetworkError::InvalidConfig(_)) => ErrorClass::Config,
            _ => ErrorClass::Numeric,
        }
    }
}

/// Well-known file locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_set(&self) -> PathBuf {
        self.root.join("train.ds")
    }

    pub fn test_set(&self) -> PathBuf {
        self.root.join("test.ds")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.bin")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:05}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn selected_checkpoint(&self) -> PathBuf {
        self.root.join("selected.ckpt")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("feast_report.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn mfp(&self) -> PathBuf {
        self.root.join("mfp.csv")
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.root.join("plot")
    }

    fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|source| PipelineError::Io { path: self.root.clone(), source })
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact(path.into()))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require(path)?;
    Ok(scenario::load_dataset(path)?)
}

/// Environment of the test track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestEnv {
    /// Same environment as training (no mismatch).
    E1,
    #[default]
    E2,
}

impl std::str::FromStr for TestEnv {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e1" => Ok(Self::E1),
            "e2" => Ok(Self::E2),
            _ => Err(PipelineError::Usage(format!("unknown environment {s:?} (expected e1 or e2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub bins_covered: usize,
    pub n_bins: usize,
    pub modes_e1: usize,
    pub modes_test: usize,
}

pub fn simulator(exp: &Experiment, which: TestEnv) -> Result<Simulator> {
    let env = match which {
        TestEnv::E1 => &exp.e1,
        TestEnv::E2 => &exp.e2,
    };
    Ok(Simulator::new(env, &exp.array, exp.config.frequency, exp.config.grid_step)?)
}

/// Simulates the training set (always E1) and the test track (E1 or E2).
pub fn gen(exp: &Experiment, which: TestEnv, run: &RunDir) -> Result<GenSummary> {
    let cfg = &exp.config;
    run.create()?;
    let sim_train = simulator(exp, TestEnv::E1)?;
    let sim_test = if which == TestEnv::E1 { sim_train.clone() } else { simulator(exp, which)? };
    let train =
        scenario::gen_training_set(&sim_train, &cfg.domain, cfg.train.n_samples, &cfg.binning, cfg.train.sampling, cfg.train.noise)?;
    let test = scenario::gen_test_track(&sim_test, &cfg.test.trajectory, &cfg.domain, cfg.test.noise)?;
    scenario::save_dataset(&train, &run.train_set())?;
    scenario::save_dataset(&test, &run.test_set())?;
    let mut bins = train.label_bins()?;
    bins.sort_unstable();
    bins.dedup();
    Ok(GenSummary {
        n_train: train.n_samples(),
        n_test: test.n_samples(),
        input_dim: train.input_dim(),
        bins_covered: bins.len(),
        n_bins: cfg.binning.n_bins(),
        modes_e1: sim_train.modes().num_modes(),
        modes_test: sim_test.modes().num_modes(),
    })
}

/// `epoch,train_loss` CSV.
pub fn format_trace_csv(trace: &EpochTrace) -> String {
    let mut out = String::from("epoch,train_loss\n");
    for r in &trace.records {
        let _ = writeln!(out, "{},{}", r.epoch, r.train_loss);
    }
    out
}

/// Per-epoch predicted ranges as a little-endian binary matrix.
pub fn encode_predictions(trace: &EpochTrace) -> Vec<u8> {
    let m = trace.n_test();
    let mut out = Vec::with_capacity(26 + 8 * trace.len() * (m + 1));
    out.extend_from_slice(PREDICTIONS_MAGIC);
    out.extend_from_slice(&(trace.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for r in &trace.records {
        out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
        for v in &r.predicted_ranges {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads `trace.csv` and `predictions.bin` back into an [`EpochTrace`].
pub fn load_trace(run: &RunDir) -> Result<EpochTrace> {
    let csv_path = run.trace();
    let bin_path = run.predictions();
    let text = read_text(&csv_path)?;
    require(&bin_path)?;
    let bytes = fs::read(&bin_path).map_err(|source| PipelineError::Io { path: bin_path.clone(), source })?;
    let bad = |path: &Path, reason: String| PipelineError::BadArtifact { path: path.into(), reason };

    let mut losses = Vec::new();
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_loss") {
        return Err(bad(&csv_path, "unexpected header".into()));
    }
    for (i, line) in lines.enumerate() {
        let (e, l) = line.split_once(',').ok_or_else(|| bad(&csv_path, format!("line {}: expected 2 fields", i + 2)))?;
        let e: usize = e.parse().map_err(|_| bad(&csv_path, format!("line {}: bad epoch", i + 2)))?;
        let l: f64 = l.parse().map_err(|_| bad(&csv_path, format!("line {}: bad loss", i + 2)))?;
        losses.push((e, l));
    }

    let word = |at: usize| -> Option<u64> { Some(u64::from_le_bytes(bytes.get(at..at + 8)?.try_into().ok()?)) };
    if !bytes.starts_with(PREDICTIONS_MAGIC) {
        return Err(bad(&bin_path, "bad magic".into()));
    }
    let header = PREDICTIONS_MAGIC.len();
    let (n_epochs, m) = match (word(header), word(header + 8)) {
        (Some(a), Some(b)) => (a as usize, b as usize),
        _ => return Err(bad(&bin_path, "truncated header".into())),
    };
    let row = 8 * (m + 1);
    if bytes.len() != header + 16 + n_epochs * row {
        return Err(bad(&bin_path, "size does not match header".into()));
    }
    if n_epochs != losses.len() {
        return Err(bad(&bin_path, format!("{n_epochs} epochs, trace.csv has {}", losses.len())));
    }
    let mut records = Vec::with_capacity(n_epochs);
    for (k, (epoch, train_loss)) in losses.into_iter().enumerate() {
        let at = header + 16 + k * row;
        if word(at) != Some(epoch as u64) {
            return Err(bad(&bin_path, format!("epoch mismatch at row {k}")));
        }
        let predicted_ranges = (0..m)
            .map(|j| f64::from_le_bytes(bytes[at + 8 + 8 * j..at + 16 + 8 * j].try_into().expect("8 bytes")))
            .collect();
        records.push(EpochRecord { epoch, train_loss, predicted_ranges });
    }
    Ok(EpochTrace { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub checkpoints_written: Vec<usize>,
}

/// Effective network settings after command-line overrides.
pub fn train_config(exp: &Experiment, seed: Option<u64>, epochs: Option<usize>) -> TrainConfig {
    let mut cfg = exp.config.network.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.max_epochs = e;
    }
    cfg
}

/// Trains on `train.ds`, recording the loss and test-track predictions each epoch.
pub fn train(
    exp: &Experiment,
    run: &RunDir,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let train = load_dataset(&run.train_set())?;
    let test = load_dataset(&run.test_set())?.without_truth();
    let outcome = network::train_with_callback(&train, &test, cfg, &exp.config.binning, on_epoch)?;
    write_file(&run.trace(), format_trace_csv(&outcome.trace))?;
    write_file(&run.predictions(), encode_predictions(&outcome.trace))?;
    let dir = run.checkpoints();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    }
    fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    for (epoch, params) in outcome.checkpoints.iter() {
        network::save_checkpoint(params, &run.checkpoint(epoch))?;
    }
    network::save_checkpoint(&outcome.params, &run.final_checkpoint())?;
    Ok(TrainSummary {
        epochs: outcome.trace.len(),
        final_loss: outcome.trace.records.last().map_or(f64::NAN, |r| r.train_loss),
        checkpoints_written: outcome.checkpoints.epochs(),
    })
}

/// Applies FEAST to the recorded trace and writes `feast_report.csv`.
/// With `export_weights`, also writes the selected epoch's parameters,
/// retraining deterministically if that checkpoint was not retained.
pub fn select(exp: &Experiment, run: &RunDir, cfg: &TrainConfig, export_weights: bool) -> Result<FeastTrace> {
    let trace = load_trace(run)?;
    let test = load_dataset(&run.test_set())?;
    let ft = feast::feast_curve(&trace, test.times()?, &exp.config.feast)?;
    write_file(&run.report(), feast::format_report(&ft))?;
    if export_weights {
        let epoch = ft.selected_epoch();
        let stored = run.checkpoint(epoch);
        let params = if stored.exists() {
            network::load_checkpoint(&stored)?
        } else {
            let train = load_dataset(&run.train_set())?;
            network::retrain_to_epoch(&train, cfg, epoch)?
        };
        network::save_checkpoint(&params, &run.selected_checkpoint())?;
    }
    Ok(ft)
}

/// Truth ranges from the test set, or from a `time,range` CSV.
pub fn load_truth(run: &RunDir, external: Option<&Path>) -> Result<Vec<f64>> {
    match external {
        None => Ok(load_dataset(&run.test_set())?.truth()?.to_vec()),
        Some(path) => {
            let text = read_text(path)?;
            let bad = |reason: String| PipelineError::BadArtifact { path: path.into(), reason };
            let mut lines = text.lines();
            if lines.next().map(str::trim) != Some("time,range") {
                return Err(bad("expected header time,range".into()));
            }
            lines
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    l.split(',')
                        .nth(1)
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| bad(format!("line {}: expected time,range", i + 2)))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub selected_epoch: usize,
    pub rmse_selected: f64,
    pub best_epoch: usize,
    pub rmse_best: f64,
    pub final_epoch: usize,
    pub rmse_final: f64,
    /// `(epoch, rmse)` for every recorded epoch.
    pub curve: Vec<(usize, f64)>,
}

pub fn rmse_curve(trace: &EpochTrace, truth: &[f64]) -> Result<Vec<(usize, f64)>> {
    trace
        .records
        .iter()
        .map(|r| Ok((r.epoch, feast::rmse(&r.predicted_ranges, truth)?)))
        .collect()
}

/// Scores the FEAST-selected epoch against truth and writes `eval.csv`.
pub fn eval(run: &RunDir, truth_file: Option<&Path>) -> Result<EvalSummary> {
    let trace = load_trace(run)?;
    let report = feast::parse_report(&read_text(&run.report())?)?;
    let test = load_dataset(&run.test_set())?;
    let times = test.times()?;
    let truth = load_truth(run, truth_file)?;
    let curve = rmse_curve(&trace, &truth)?;
    let idx = trace
        .records
        .iter()
        .position(|r| r.epoch == report.selected_epoch)
        .ok_or_else(|| PipelineError::BadArtifact {
            path: run.report(),
            reason: format!("selected epoch {} not in trace", report.selected_epoch),
        })?;
    let mut best = 0;
    for (i, (_, v)) in curve.iter().enumerate() {
        if *v < curve[best].1 {
            best = i;
        }
    }
    let mut csv = String::from("time,predicted,truth\n");
    for ((t, p), r) in times.iter().zip(&trace.records[idx].predicted_ranges).zip(&truth) {
        let _ = writeln!(csv, "{t},{p},{r}");
    }
    write_file(&run.eval(), csv)?;
    let last = curve.len() - 1;
    Ok(EvalSummary {
        selected_epoch: report.selected_epoch,
        rmse_selected: curve[idx].1,
        best_epoch: curve[best].0,
        rmse_best: curve[best].1,
        final_epoch: curve[last].0,
        rmse_final: curve[last].1,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfpRow {
    pub time: f64,
    pub estimate: mfp::MfpEstimate,
}

/// Bartlett estimates for every test sample against E1 replicas; writes
/// `mfp.csv` and, when `surface_sample` is given, that sample's full surface.
pub fn mfp(exp: &Experiment, run: &RunDir, surface_sample: Option<usize>) -> Result<Vec<MfpRow>> {
    let test = load_dataset(&run.test_set())?;
    let times = test.times()?;
    let sim = simulator(exp, TestEnv::E1)?;
    let grid = mfp::build_replicas(&sim, &exp.mfp_grid)?;
    let rows: Vec<MfpRow> = test
        .inputs
        .rows()
        .into_iter()
        .zip(times)
        .map(|(x, &time)| {
            let x = x.to_vec();
            Ok(MfpRow { time, estimate: mfp::bartlett_from_feature(&x, &grid)? })
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("time,range,depth,peak\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.time, r.estimate.range, r.estimate.depth, r.estimate.peak);
    }
    write_file(&run.mfp(), csv)?;
    if let Some(k) = surface_sample {
        if k >= test.n_samples() {
            return Err(PipelineError::Usage(format!("sample {k} out of range (test set has {})", test.n_samples())));
        }
        let x = test.inputs.row(k).to_vec();
        let c = crate::features::unvectorize(&x).map_err(MfpError::from)?;
        let surface = mfp::bartlett_surface(&c, &grid)?;
        write_file(&run.root().join(format!("mfp_surface_{k:03}.csv")), mfp::format_surface(&grid, &surface))?;
    }
    Ok(rows)
}

fn read_mfp_ranges(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| PipelineError::BadArtifact {
                path: path.into(),
                reason: format!("bad row {l:?}"),
            })
        })
        .collect()
}

/// Epoch chosen for a plotted track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochSpec {
    Number(usize),
    Selected,
    Final,
}

impl std::str::FromStr for EpochSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "selected" => Ok(Self::Selected),
            "final" => Ok(Self::Final),
            n => n
                .parse()
                .ok()
                .filter(|n| *n >= 1)
                .map(Self::Number)
                .ok_or_else(|| PipelineError::Usage(format!("bad epoch {s:?} (number, selected or final)"))),
        }
    }
}

/// Parses a comma-separated epoch list such as `10,selected,final`.
pub fn parse_epoch_list(s: &str) -> Result<Vec<EpochSpec>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

/// Writes the figure-ready CSVs into `plot/` and returns their paths.
///
/// * `loss_curves.csv`: `epoch,train_loss,misfit,l_feast`
/// * `rmse_curve.csv`: `epoch,rmse` (only when truth is available)
/// * `track_<label>.csv`: `time,predicted,fitted[,truth][,mfp]` per requested epoch
pub fn plotdata(exp: &Experiment, run: &RunDir, epochs: &[EpochSpec], truth_file: Option<&Path>) -> Result<Vec<PathBuf>> {
    let trace = load_trace(run)?;
    let test = load_dataset(&run.test_set())?;
    let times = test.times()?;
    let ft = feast::feast_curve(&trace, times, &exp.config.feast)?;
    let truth = match (truth_file, test.truth_ranges.is_some()) {
        (Some(_), _) | (None, true) => Some(load_truth(run, truth_file)?),
        (None, false) => None,
    };
    let mfp_ranges = if run.mfp().exists() { Some(read_mfp_ranges(&run.mfp())?) } else { None };

    let dir = run.plot_dir();
    fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    let mut written = Vec::new();

    let mut loss = String::from("epoch,train_loss,misfit,l_feast\n");
    for e in &ft.epochs {
        let _ = writeln!(loss, "{},{},{},{}", e.epoch, e.train_loss, e.misfit, e.l_feast);
    }
    let path = dir.join("loss_curves.csv");
    write_file(&path, loss)?;
    written.push(path);

    if let Some(truth) = &truth {
        let mut csv = String::from("epoch,rmse\n");
        for (e, v) in rmse_curve(&trace, truth)? {
            let _ = writeln!(csv, "{e},{v}");
        }
        let path = dir.join("rmse_curve.csv");
        write_file(&path, csv)?;
        written.push(path);
    }

    let last = trace.records.last().map_or(0, |r| r.epoch);
    for spec in epochs {
        let (epoch, label) = match spec {
            EpochSpec::Number(n) => (*n, format!("epoch_{n:05}")),
            EpochSpec::Selected => (ft.selected_epoch(), "selected".to_string()),
            EpochSpec::Final => (last, "final".to_string()),
        };
        let idx = trace
            .records
            .iter()
            .position(|r| r.epoch == epoch)
            .ok_or_else(|| PipelineError::Usage(format!("epoch {epoch} not in trace (1..={last})")))?;
        let track = &ft.epochs[idx].track;
        let mut header = String::from("time,predicted,fitted");
        if truth.is_some() {
            header.push_str(",truth");
        }
        if mfp_ranges.is_some() {
            header.push_str(",mfp");
        }
        let mut csv = format!("# epoch={epoch}\n{header}\n");
        for (i, (t, p)) in times.iter().zip(&trace.records[idx].predicted_ranges).enumerate() {
            let _ = write!(csv, "{t},{p},{}", track.eval(*t));
            if let Some(tr) = &truth {
                let _ = write!(csv, ",{}", tr[i]);
            }
            if let Some(m) = &mfp_ranges {
                let _ = write!(csv, ",{}", m[i]);
            }
            csv.push('\n');
        }
        let path = dir.join(format!("track_{label}.csv"));
        write_file(&path, csv)?;
        written.push(path);
    }
    Ok(written)
}

/// Converts an external covariance series into the run's `test.ds`.
pub fn import(input: &Path, run: &RunDir) -> Result<usize> {
    require(input)?;
    run.create()?;
    let d = scenario::import_external_series(input)?;
    scenario::save_dataset(&d, &run.test_set())?;
    Ok(d.n_samples())
}
