//! Normal modes of a range-independent ocean waveguide.
//!
//! The depth equation
//!
//! ```text
//! ψ'' + (ω²/c(z)² − k²) ψ = 0,   ψ(0) = 0,   ψ'(D) = 0 (rigid) or ψ(D) = 0
//! ```
//!
//! is discretized with second-order central differences on a uniform grid.
//! The rigid-bottom row is symmetrized by a diagonal similarity, so the
//! discrete problem is a real symmetric tridiagonal eigenproblem in `k²`.
//! Eigenvalues are isolated by Sturm-sequence bisection and eigenvectors
//! recovered by inverse iteration, both fully deterministic.
//!
//! Only propagating modes (`k² > 0`) are kept. Mode functions are scaled so
//! that the trapezoidal rule on the grid gives `∫ψ_m ψ_n dz = δ_mn`.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveguideError {
    #[error("invalid sound speed profile: {0}")]
    InvalidProfile(String),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("invalid array geometry: {0}")]
    InvalidArray(String),
    #[error("grid too coarse or incompatible: {0}")]
    GridTooCoarse(String),
    #[error("no propagating modes at {frequency} Hz")]
    NoPropagatingModes { frequency: f64 },
    #[error("mode set is empty")]
    EmptyModeSet,
    #[error("source range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("source depth {depth} outside (0, {water_depth})")]
    SourceDepthOutOfRange { depth: f64, water_depth: f64 },
    #[error("invalid mode set: {0}")]
    InvalidModeSet(String),
}

pub type Result<T> = std::result::Result<T, WaveguideError>;

/// Sound speed sampled at strictly increasing depths, starting at the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SspRepr", into = "SspRepr")]
pub struct SoundSpeedProfile {
    depths: Vec<f64>,
    speeds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SspRepr {
    depths: Vec<f64>,
    speeds: Vec<f64>,
}

impl TryFrom<SspRepr> for SoundSpeedProfile {
    type Error = WaveguideError;
    fn try_from(r: SspRepr) -> Result<Self> {
        SoundSpeedProfile::new(r.depths, r.speeds)
    }
}

impl From<SoundSpeedProfile> for SspRepr {
    fn from(s: SoundSpeedProfile) -> Self {
        SspRepr { depths: s.depths, speeds: s.speeds }
    }
}

impl SoundSpeedProfile {
    pub fn new(depths: Vec<f64>, speeds: Vec<f64>) -> Result<Self> {
        if depths.len() != speeds.len() {
            return Err(WaveguideError::InvalidProfile(format!(
                "{} depths but {} speeds",
                depths.len(),
                speeds.len()
            )));
        }
        if depths.len() < 2 {
            return Err(WaveguideError::InvalidProfile("need at least 2 samples".into()));
        }
        if depths[0] != 0.0 {
            return Err(WaveguideError::InvalidProfile("first depth must be 0".into()));
        }
        if depths.windows(2).any(|w| !(w[1] > w[0])) || depths.iter().any(|d| !d.is_finite()) {
            return Err(WaveguideError::InvalidProfile(
                "depths must be finite and strictly increasing".into(),
            ));
        }
        if let Some(c) = speeds.iter().find(|c| !(**c > 100.0 && **c < 10000.0)) {
            return Err(WaveguideError::InvalidProfile(format!("speed {c} outside (100, 10000) m/s")));
        }
        Ok(Self { depths, speeds })
    }

    pub fn isovelocity(speed: f64, water_depth: f64) -> Result<Self> {
        Self::new(vec![0.0, water_depth], vec![speed, speed])
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn bottom_depth(&self) -> f64 {
        *self.depths.last().expect("profile has >= 2 samples")
    }

    pub fn min_speed(&self) -> f64 {
        self.speeds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Linear interpolation, constant extrapolation outside the sampled span.
    pub fn speed_at(&self, z: f64) -> f64 {
        let d = &self.depths;
        if z <= d[0] {
            return self.speeds[0];
        }
        let last = d.len() - 1;
        if z >= d[last] {
            return self.speeds[last];
        }
        let i = d.partition_point(|&x| x <= z) - 1;
        let t = (z - d[i]) / (d[i + 1] - d[i]);
        self.speeds[i] + t * (self.speeds[i + 1] - self.speeds[i])
    }

    /// Returns a copy with `offset` added at every depth `≤ above_depth`,
    /// blending back to the original profile over `ramp` metres below it.
    pub fn with_offset_above(&self, above_depth: f64, offset: f64, ramp: f64) -> Result<Self> {
        let bottom = self.bottom_depth();
        if !(above_depth > 0.0 && above_depth + ramp < bottom && ramp > 0.0) {
            return Err(WaveguideError::InvalidProfile(format!(
                "perturbation layer 0..{above_depth} m (+{ramp} m ramp) must lie inside 0..{bottom} m"
            )));
        }
        let end = above_depth + ramp;
        let mut depths = Vec::with_capacity(self.depths.len() + 2);
        let mut speeds = Vec::with_capacity(self.depths.len() + 2);
        for (&z, &c) in self.depths.iter().zip(&self.speeds) {
            if z < above_depth {
                depths.push(z);
                speeds.push(c + offset);
            }
        }
        depths.push(above_depth);
        speeds.push(self.speed_at(above_depth) + offset);
        depths.push(end);
        speeds.push(self.speed_at(end));
        for (&z, &c) in self.depths.iter().zip(&self.speeds) {
            if z > end {
                depths.push(z);
                speeds.push(c);
            }
        }
        Self::new(depths, speeds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottomCondition {
    /// ψ'(D) = 0
    Rigid,
    /// ψ(D) = 0
    PressureRelease,
}

/// Range-independent waveguide. The water depth is the last profile depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveguideEnv {
    pub ssp: SoundSpeedProfile,
    pub bottom: BottomCondition,
    pub density: f64,
    /// Sound speed of a seabed below the reflecting boundary. Modes whose
    /// phase speed exceeds it would radiate into the bottom and are dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seabed_speed: Option<f64>,
}

impl WaveguideEnv {
    pub fn new(ssp: SoundSpeedProfile, bottom: BottomCondition, density: f64) -> Result<Self> {
        let env = Self { ssp, bottom, density, seabed_speed: None };
        env.validate()?;
        Ok(env)
    }

    pub fn with_seabed_speed(mut self, speed: Option<f64>) -> Result<Self> {
        self.seabed_speed = speed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(WaveguideError::InvalidEnvironment(format!(
                "density must be positive, got {}",
                self.density
            )));
        }
        if let Some(c) = self.seabed_speed {
            if !(c > 0.0 && c.is_finite()) {
                return Err(WaveguideError::InvalidEnvironment(format!("seabed speed must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn water_depth(&self) -> f64 {
        self.ssp.bottom_depth()
    }
}

/// Receiver depths of a vertical line array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    element_depths: Vec<f64>,
}

impl ArrayGeometry {
    pub fn new(element_depths: Vec<f64>) -> Result<Self> {
        if element_depths.len() < 2 {
            return Err(WaveguideError::InvalidArray("need at least 2 elements".into()));
        }
        if element_depths.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
            return Err(WaveguideError::InvalidArray("element depths must be positive".into()));
        }
        if element_depths.windows(2).any(|w| w[1] < w[0]) {
            return Err(WaveguideError::InvalidArray("element depths must be ascending".into()));
        }
        Ok(Self { element_depths })
    }

    /// `count` equally spaced elements from `top` to `bottom` inclusive.
    pub fn uniform(top: f64, bottom: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(WaveguideError::InvalidArray("need at least 2 elements".into()));
        }
        let step = (bottom - top) / (count - 1) as f64;
        Self::new((0..count).map(|i| top + step * i as f64).collect())
    }

    pub fn depths(&self) -> &[f64] {
        &self.element_depths
    }

    pub fn len(&self) -> usize {
        self.element_depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_depths.is_empty()
    }

    pub fn check_within(&self, water_depth: f64) -> Result<()> {
        match self.element_depths.iter().find(|z| **z >= water_depth) {
            Some(z) => Err(WaveguideError::InvalidArray(format!(
                "element at {z} m is not above the bottom at {water_depth} m"
            ))),
            None => Ok(()),
        }
    }
}

/// Horizontal wavenumbers and depth-sampled mode functions.
///
/// `mode_functions` has one row per grid depth and one column per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    pub frequency: f64,
    pub grid_depths: Vec<f64>,
    pub wavenumbers: Vec<f64>,
    pub mode_functions: Array2<f64>,
}

impl ModeSet {
    /// Builds a mode set from explicit parts. The grid must be uniform and
    /// start at 0.
    pub fn from_parts(
        frequency: f64,
        grid_depths: Vec<f64>,
        wavenumbers: Vec<f64>,
        mode_functions: Array2<f64>,
    ) -> Result<Self> {
        if grid_depths.len() < 2 || grid_depths[0] != 0.0 {
            return Err(WaveguideError::InvalidModeSet("grid must start at 0 with >= 2 points".into()));
        }
        let h = grid_depths[1] - grid_depths[0];
        let uniform = grid_depths
            .iter()
            .enumerate()
            .all(|(i, z)| (z - h * i as f64).abs() <= 1e-9 * h.max(1.0) * (i as f64 + 1.0));
        if !(h > 0.0) || !uniform {
            return Err(WaveguideError::InvalidModeSet("grid must be uniform and increasing".into()));
        }
        if mode_functions.nrows() != grid_depths.len() || mode_functions.ncols() != wavenumbers.len() {
            return Err(WaveguideError::InvalidModeSet(format!(
                "mode matrix is {}x{}, expected {}x{}",
                mode_functions.nrows(),
                mode_functions.ncols(),
                grid_depths.len(),
                wavenumbers.len()
            )));
        }
        if wavenumbers.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(WaveguideError::InvalidModeSet("wavenumbers must be positive".into()));
        }
        Ok(Self { frequency, grid_depths, wavenumbers, mode_functions })
    }

    pub fn num_modes(&self) -> usize {
        self.wavenumbers.len()
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_depths[1] - self.grid_depths[0]
    }

    pub fn water_depth(&self) -> f64 {
        *self.grid_depths.last().expect("non-empty grid")
    }

    /// All mode amplitudes at depth `z`, linearly interpolated on the grid.
    pub fn amplitudes_at(&self, z: f64) -> Vec<f64> {
        let h = self.grid_step();
        let last = self.grid_depths.len() - 1;
        let pos = (z / h).clamp(0.0, last as f64);
        let i = (pos.floor() as usize).min(last - 1);
        let t = pos - i as f64;
        let lo = self.mode_functions.row(i);
        let hi = self.mode_functions.row(i + 1);
        lo.iter().zip(hi.iter()).map(|(a, b)| a + t * (b - a)).collect()
    }

    /// Trapezoidal `∫ψ_m ψ_n dz` over the grid.
    pub fn overlap(&self, m: usize, n: usize) -> f64 {
        let h = self.grid_step();
        let a = self.mode_functions.column(m);
        let b = self.mode_functions.column(n);
        let last = a.len() - 1;
        let interior: f64 = (1..last).map(|j| a[j] * b[j]).sum();
        h * (interior + 0.5 * (a[0] * b[0] + a[last] * b[last]))
    }
}

/// Complex pressure at each array element.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureVector(pub Vec<Complex64>);

impl PressureVector {
    pub fn values(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Solves for the propagating modes of `env` at `frequency` on a grid of
/// spacing `grid_step`.
pub fn solve_modes(env: &WaveguideEnv, frequency: f64, grid_step: f64) -> Result<ModeSet> {
    env.validate()?;
    if !(frequency > 0.0 && frequency.is_finite()) {
        return Err(WaveguideError::InvalidEnvironment(format!("frequency must be positive, got {frequency}")));
    }
    let depth = env.water_depth();
    if !(grid_step > 0.0) {
        return Err(WaveguideError::GridTooCoarse(format!("grid step {grid_step} must be positive")));
    }
    let steps_f = depth / grid_step;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-9 * steps.max(1.0) || steps < 2.0 {
        return Err(WaveguideError::GridTooCoarse(format!(
            "grid step {grid_step} m does not divide water depth {depth} m"
        )));
    }
    let max_step = env.ssp.min_speed() / (10.0 * frequency);
    if grid_step > max_step * (1.0 + 1e-12) {
        return Err(WaveguideError::GridTooCoarse(format!(
            "grid step {grid_step} m exceeds {max_step:.6} m (10 points per wavelength)"
        )));
    }
    let n_steps = steps as usize;
    let h = depth / n_steps as f64;
    let omega = 2.0 * PI * frequency;
    let grid: Vec<f64> = (0..=n_steps).map(|j| j as f64 * h).collect();

    // Unknowns are grid points 1..=n_steps (rigid) or 1..n_steps (pressure release).
    let n_unknown = match env.bottom {
        BottomCondition::Rigid => n_steps,
        BottomCondition::PressureRelease => n_steps - 1,
    };
    let inv_h2 = 1.0 / (h * h);
    let diag: Vec<f64> = (1..=n_unknown)
        .map(|j| {
            let c = env.ssp.speed_at(grid[j]);
            -2.0 * inv_h2 + (omega / c).powi(2)
        })
        .collect();
    let mut off = vec![inv_h2; n_unknown - 1];
    if env.bottom == BottomCondition::Rigid {
        // Ghost point ψ_{N+1} = ψ_{N-1} doubles the coupling in the last row;
        // scaling ψ_N by 1/√2 restores symmetry.
        off[n_unknown - 2] = std::f64::consts::SQRT_2 * inv_h2;
    }

    let tri = SymTridiagonal { diag, off };
    let cutoff = env.seabed_speed.map_or(0.0, |c| (omega / c).powi(2));
    let n_prop = n_unknown - tri.count_below(cutoff);
    if n_prop == 0 {
        return Err(WaveguideError::NoPropagatingModes { frequency });
    }

    let upper = tri.gershgorin_upper();
    let mut eigvecs: Vec<Vec<f64>> = Vec::with_capacity(n_prop);
    let mut wavenumbers = Vec::with_capacity(n_prop);
    for rank in 0..n_prop {
        // rank-th largest eigenvalue = (n_unknown - rank)-th smallest
        let lambda = tri.bisect(n_unknown - 1 - rank, cutoff, upper);
        let v = tri.inverse_iteration(lambda, &eigvecs);
        eigvecs.push(v);
        wavenumbers.push(lambda.sqrt());
    }

    let inv_sqrt_h = 1.0 / h.sqrt();
    let mut modes = Array2::<f64>::zeros((n_steps + 1, n_prop));
    for (m, y) in eigvecs.iter().enumerate() {
        let sign = y
            .iter()
            .find(|v| v.abs() > 1e-300)
            .map_or(1.0, |v| v.signum());
        for (j, v) in y.iter().enumerate() {
            modes[[j + 1, m]] = sign * v * inv_sqrt_h;
        }
        if env.bottom == BottomCondition::Rigid {
            modes[[n_steps, m]] *= std::f64::consts::SQRT_2;
        }
    }

    Ok(ModeSet { frequency, grid_depths: grid, wavenumbers, mode_functions: modes })
}

/// Modal sum `p(r, z) = Σ ψ_m(z_s) ψ_m(z) e^{i k_m r} / √(k_m r)`.
///
/// The Green's-function prefactor is dropped; it cancels in the normalized
/// covariance.
pub fn pressure_field(
    modes: &ModeSet,
    source_range: f64,
    source_depth: f64,
    array: &ArrayGeometry,
) -> Result<PressureVector> {
    if modes.num_modes() == 0 {
        return Err(WaveguideError::EmptyModeSet);
    }
    if !(source_range > 0.0) {
        return Err(WaveguideError::NonPositiveRange(source_range));
    }
    let water_depth = modes.water_depth();
    if !(source_depth > 0.0 && source_depth < water_depth) {
        return Err(WaveguideError::SourceDepthOutOfRange { depth: source_depth, water_depth });
    }
    let src = modes.amplitudes_at(source_depth);
    let phasors: Vec<Complex64> = modes
        .wavenumbers
        .iter()
        .zip(&src)
        .map(|(&k, &a)| Complex64::from_polar(a / (k * source_range).sqrt(), k * source_range))
        .collect();
    let values = array
        .depths()
        .iter()
        .map(|&z| {
            modes
                .amplitudes_at(z)
                .iter()
                .zip(&phasors)
                .fold(Complex64::new(0.0, 0.0), |acc, (&psi, &ph)| acc + ph * psi)
        })
        .collect();
    Ok(PressureVector(values))
}

/// Real symmetric tridiagonal matrix.
struct SymTridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SymTridiagonal {
    fn len(&self) -> usize {
        self.diag.len()
    }

    /// Number of eigenvalues strictly below `x` (Sturm sequence).
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.len() {
            let denom = if q == 0.0 { f64::EPSILON * self.off[i - 1].abs().max(f64::MIN_POSITIVE) } else { q };
            q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / denom;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn gershgorin_upper(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let left = if i > 0 { self.off[i - 1].abs() } else { 0.0 };
                let right = if i + 1 < self.len() { self.off[i].abs() } else { 0.0 };
                self.diag[i] + left + right
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The `index`-th smallest eigenvalue (0-based), known to lie in `[lo, hi]`.
    fn bisect(&self, index: usize, mut lo: f64, mut hi: f64) -> f64 {
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                return mid;
            }
            if self.count_below(mid) > index {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }

    /// Unit eigenvector for eigenvalue `lambda`, orthogonalized against `previous`.
    fn inverse_iteration(&self, lambda: f64, previous: &[Vec<f64>]) -> Vec<f64> {
        let n = self.len();
        let scale = self.diag.iter().map(|d| d.abs()).fold(0.0, f64::max).max(1.0);
        let shift = lambda + 4.0 * f64::EPSILON * scale;
        let lu = TridiagonalLu::factor(&self.diag, &self.off, shift);
        // deterministic, non-degenerate start vector
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7548776662).sin()).collect();
        for _ in 0..3 {
            lu.solve_in_place(&mut v);
            for u in previous {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// LU factorization with partial pivoting of `T − shift·I` for tridiagonal `T`.
struct TridiagonalLu {
    /// U has main diagonal `u0` and two superdiagonals `u1`, `u2`.
    u0: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    /// multipliers and whether rows i and i+1 were swapped
    mult: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(diag: &[f64], off: &[f64], shift: f64) -> Self {
        let n = diag.len();
        let tiny = f64::EPSILON * diag.iter().map(|d| (d - shift).abs()).fold(0.0, f64::max).max(1.0);
        let mut u0: Vec<f64> = diag.iter().map(|d| d - shift).collect();
        let mut u1: Vec<f64> = off.to_vec();
        u1.push(0.0);
        let mut u2 = vec![0.0; n];
        let sub = off;
        let mut mult = vec![0.0; n.saturating_sub(1)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if sub[i].abs() > u0[i].abs() {
                // swap rows i and i+1
                swapped[i] = true;
                let (a0, a1, a2) = (u0[i], u1[i], u2[i]);
                u0[i] = sub[i];
                u1[i] = u0[i + 1];
                u2[i] = u1[i + 1];
                let m = a0 / u0[i];
                mult[i] = m;
                u0[i + 1] = a1 - m * u1[i];
                u1[i + 1] = a2 - m * u2[i];
            } else {
                if u0[i] == 0.0 {
                    u0[i] = tiny;
                }
                let m = sub[i] / u0[i];
                mult[i] = m;
                u0[i + 1] -= m * u1[i];
                // u2[i] stays 0, row i+1 superdiagonal unaffected
            }
        }
        if n > 0 && u0[n - 1] == 0.0 {
            u0[n - 1] = tiny;
        }
        Self { u0, u1, u2, mult, swapped }
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                b.swap(i, i + 1);
            }
            b[i + 1] -= self.mult[i] * b[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= self.u1[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= self.u2[i] * b[i + 2];
            }
            b[i] = s / self.u0[i];
        }
    }
}
