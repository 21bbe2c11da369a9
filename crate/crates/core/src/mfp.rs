//! Bartlett matched-field processing over a range/depth replica grid.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, HermitianMatrix, RangeBinning};
use crate::scenario::{ScenarioError, Simulator};

#[derive(Debug, Error)]
pub enum MfpError {
    #[error("replica grid is empty")]
    EmptyGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("covariance is {got}x{got}, replicas have {expected} elements")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

pub type Result<T> = std::result::Result<T, MfpError>;

/// Candidate source positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfpGridSpec {
    pub ranges: Vec<f64>,
    pub depths: Vec<f64>,
}

impl MfpGridSpec {
    /// One range per bin center, depths `nominal ± k·step` for `k` up to `fan / 2`.
    pub fn from_binning(binning: &RangeBinning, nominal_depth: f64, fan: usize, step: f64) -> Result<Self> {
        let ranges = (0..binning.n_bins())
            .map(|i| features::decode_bin(i, binning))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let half = (fan.max(1) - 1) as f64 / 2.0;
        let depths = (0..fan.max(1)).map(|k| nominal_depth + (k as f64 - half) * step).collect();
        Ok(Self { ranges, depths })
    }

    pub fn validate(&self, water_depth: f64) -> Result<()> {
        if self.ranges.is_empty() || self.depths.is_empty() {
            return Err(MfpError::EmptyGrid);
        }
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !ascending(&self.ranges) || !ascending(&self.depths) {
            return Err(MfpError::InvalidGrid("ranges and depths must be strictly ascending".into()));
        }
        if self.ranges[0] <= 0.0 {
            return Err(MfpError::InvalidGrid("ranges must be positive".into()));
        }
        if self.depths[0] <= 0.0 || *self.depths.last().expect("non-empty") >= water_depth {
            return Err(MfpError::InvalidGrid(format!("depths must lie in (0, {water_depth})")));
        }
        Ok(())
    }
}

/// Unit-norm replica vectors, range-major (`index = i_range · n_depths + i_depth`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaGrid {
    pub ranges: Vec<f64>,
    pub depths: Vec<f64>,
    pub replicas: Vec<Vec<Complex64>>,
}

impl ReplicaGrid {
    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn position(&self, index: usize) -> (f64, f64) {
        let nz = self.depths.len();
        (self.ranges[index / nz], self.depths[index % nz])
    }

    pub fn n_elements(&self) -> usize {
        self.replicas.first().map_or(0, Vec::len)
    }
}

pub fn build_replicas(sim: &Simulator, spec: &MfpGridSpec) -> Result<ReplicaGrid> {
    spec.validate(sim.water_depth())?;
    let positions: Vec<(f64, f64)> =
        spec.ranges.iter().flat_map(|&r| spec.depths.iter().map(move |&z| (r, z))).collect();
    let replicas = positions
        .par_iter()
        .map(|&(r, z)| {
            let p = sim.pressure(r, z)?;
            let norm = p.norm_sqr().sqrt();
            if norm == 0.0 {
                return Err(FeatureError::ZeroVector.into());
            }
            Ok(p.0.into_iter().map(|v| v / norm).collect())
        })
        .collect::<std::result::Result<Vec<_>, ScenarioError>>()?;
    Ok(ReplicaGrid { ranges: spec.ranges.clone(), depths: spec.depths.clone(), replicas })
}

/// Best-matching grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfpEstimate {
    pub range: f64,
    pub depth: f64,
    pub peak: f64,
}

/// `B = wᴴ C w` at every grid point, in grid order.
pub fn bartlett_surface(c: &HermitianMatrix, grid: &ReplicaGrid) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(MfpError::EmptyGrid);
    }
    if c.dim() != grid.n_elements() {
        return Err(MfpError::DimMismatch { expected: grid.n_elements(), got: c.dim() });
    }
    Ok(grid.replicas.iter().map(|w| c.quadratic_form(w)).collect())
}

/// Argmax of the Bartlett surface; ties go to the smaller range, then depth.
pub fn bartlett_range(c: &HermitianMatrix, grid: &ReplicaGrid) -> Result<MfpEstimate> {
    let surface = bartlett_surface(c, grid)?;
    let mut best = 0;
    for (i, v) in surface.iter().enumerate().skip(1) {
        if *v > surface[best] {
            best = i;
        }
    }
    let (range, depth) = grid.position(best);
    Ok(MfpEstimate { range, depth, peak: surface[best] })
}

/// Estimate from a flattened covariance feature.
pub fn bartlett_from_feature(x: &[f64], grid: &ReplicaGrid) -> Result<MfpEstimate> {
    bartlett_range(&features::unvectorize(x)?, grid)
}

/// `range,depth,power` rows in grid order.
pub fn format_surface(grid: &ReplicaGrid, surface: &[f64]) -> String {
    let mut out = String::from("range,depth,power\n");
    for (i, b) in surface.iter().enumerate() {
        let (r, z) = grid.position(i);
        let _ = writeln!(out, "{r},{z},{b}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveguide::{ArrayGeometry, BottomCondition, PressureVector, SoundSpeedProfile, WaveguideEnv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim() -> Simulator {
        let ssp = SoundSpeedProfile::new(vec![0.0, 30.0, 120.0], vec![1515.0, 1495.0, 1490.0]).unwrap();
        let env = WaveguideEnv::new(ssp, BottomCondition::Rigid, 1000.0).unwrap();
        Simulator::new(&env, &ArrayGeometry::uniform(50.0, 110.0, 8).unwrap(), 150.0, 0.25).unwrap()
    }

    fn spec() -> MfpGridSpec {
        MfpGridSpec { ranges: (0..10).map(|i| 1000.0 + 50.0 * i as f64).collect(), depths: vec![5.0, 7.0, 9.0, 11.0, 13.0] }
    }

    #[test]
    fn replicas_are_unit_norm_and_counted() {
        let s = sim();
        let grid = build_replicas(&s, &spec()).unwrap();
        assert_eq!(grid.len(), 50);
        for w in &grid.replicas {
            let n: f64 = w.iter().map(|v| v.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let p = s.pressure(1150.0, 9.0).unwrap();
        let norm = p.norm_sqr().sqrt();
        let idx = 3 * 5 + 2;
        assert_eq!(grid.position(idx), (1150.0, 9.0));
        for (a, b) in grid.replicas[idx].iter().zip(p.values()) {
            assert!((a - b / norm).norm() < 1e-15);
        }
    }

    #[test]
    fn perfect_match_peaks_at_one() {
        let s = sim();
        let grid = build_replicas(&s, &spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let i = rng.random_range(0..grid.len());
            let (r, z) = grid.position(i);
            let c = features::normalized_covariance(&s.pressure(r, z).unwrap()).unwrap();
            let est = bartlett_range(&c, &grid).unwrap();
            assert_eq!((est.range, est.depth), (r, z));
            assert!((est.peak - 1.0).abs() < 1e-10);
            let surface = bartlett_surface(&c, &grid).unwrap();
            assert!(surface.iter().all(|b| *b >= -1e-12 && *b <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn orthogonal_vector_gives_zero_peak() {
        // two-element replicas all along [1, 1]; probe with [1, −1]
        let w = vec![Complex64::new(0.5f64.sqrt(), 0.0); 2];
        let grid = ReplicaGrid { ranges: vec![1.0, 2.0], depths: vec![1.0], replicas: vec![w.clone(), w] };
        let c = features::normalized_covariance(&PressureVector(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(-1.0, 0.0),
        ]))
        .unwrap();
        let est = bartlett_range(&c, &grid).unwrap();
        assert!(est.peak.abs() < 1e-15);
        assert_eq!(est.range, 1.0);
    }

    #[test]
    fn three_point_brute_force() {
        let norm = |v: Vec<Complex64>| {
            let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let cx = Complex64::new;
        let replicas = vec![
            norm(vec![cx(1.0, 0.0), cx(0.0, 1.0), cx(0.5, 0.5)]),
            norm(vec![cx(0.2, -0.3), cx(1.0, 0.0), cx(-0.4, 0.1)]),
            norm(vec![cx(0.0, 1.0), cx(0.3, 0.3), cx(1.0, -1.0)]),
        ];
        let grid = ReplicaGrid { ranges: vec![100.0, 200.0, 300.0], depths: vec![5.0], replicas: replicas.clone() };
        let p = vec![cx(0.1, 0.9), cx(0.35, 0.2), cx(0.8, -1.1)];
        let c = features::normalized_covariance(&PressureVector(p.clone())).unwrap();
        let pn: f64 = p.iter().map(|x| x.norm_sqr()).sum();
        // wᴴ p pᴴ w / ‖p‖² = |wᴴp|² / ‖p‖²
        let oracle: Vec<f64> = replicas
            .iter()
            .map(|w| w.iter().zip(&p).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr() / pn)
            .collect();
        let surface = bartlett_surface(&c, &grid).unwrap();
        for (a, b) in surface.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
        let best = (0..3).max_by(|&i, &j| oracle[i].total_cmp(&oracle[j])).unwrap();
        assert_eq!(bartlett_range(&c, &grid).unwrap().range, grid.ranges[best]);
    }

    #[test]
    fn unit_phase_invariance() {
        let s = sim();
        let grid = build_replicas(&s, &spec()).unwrap();
        let p = s.pressure(1234.0, 8.0).unwrap();
        let rotated = PressureVector(p.values().iter().map(|v| v * Complex64::from_polar(1.0, 1.1)).collect());
        let a = bartlett_surface(&features::normalized_covariance(&p).unwrap(), &grid).unwrap();
        let b = bartlett_surface(&features::normalized_covariance(&rotated).unwrap(), &grid).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn grid_errors() {
        let s = sim();
        let empty = MfpGridSpec { ranges: vec![], depths: vec![5.0] };
        assert!(matches!(build_replicas(&s, &empty), Err(MfpError::EmptyGrid)));
        let deep = MfpGridSpec { ranges: vec![100.0], depths: vec![500.0] };
        assert!(matches!(build_replicas(&s, &deep), Err(MfpError::InvalidGrid(_))));
        let grid = ReplicaGrid { ranges: vec![], depths: vec![], replicas: vec![] };
        let c = features::normalized_covariance(&PressureVector(vec![Complex64::new(1.0, 0.0); 2])).unwrap();
        assert!(matches!(bartlett_range(&c, &grid), Err(MfpError::EmptyGrid)));
    }

    #[test]
    fn binning_grid_layout() {
        let b = RangeBinning::new(1100.0, 5000.0, 201).unwrap();
        let g = MfpGridSpec::from_binning(&b, 9.0, 5, 1.0).unwrap();
        assert_eq!(g.ranges.len(), 201);
        assert_eq!(g.depths, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
