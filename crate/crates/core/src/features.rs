//! Network inputs and range labels.
//!
//! A pressure snapshot `p` becomes the unit-trace outer product
//! `C = p pᴴ / ‖p‖²`, which is then flattened as the upper triangle
//! (`i ≤ j`, row-major) with `(Re, Im)` interleaved. Diagonal imaginary parts
//! are kept, so 21 elements give 462 values.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveguide::PressureVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("pressure vector has zero norm")]
    ZeroVector,
    #[error("pressure vector has non-finite entries")]
    NonFinite,
    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("range {range} m outside [{r_min}, {r_max}]")]
    OutOfDomain { range: f64, r_min: f64, r_max: f64 },
    #[error("bin index {index} out of range for {n_bins} bins")]
    IndexOutOfRange { index: usize, n_bins: usize },
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("feature length {0} is not 2·n(n+1)/2 for any n")]
    BadFeatureLength(usize),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

const HERMITIAN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(Array2<Complex64>);

impl HermitianMatrix {
    pub fn new(m: Array2<Complex64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(FeatureError::NotSquare(r, c));
        }
        let dev = hermitian_deviation(&m);
        if dev > HERMITIAN_TOL {
            return Err(FeatureError::NotHermitian(dev));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<Complex64> {
        &self.0
    }

    pub fn trace(&self) -> Complex64 {
        self.0.diag().sum()
    }

    /// `wᴴ C w`, real part (the imaginary part vanishes for Hermitian C).
    pub fn quadratic_form(&self, w: &[Complex64]) -> f64 {
        let n = self.dim();
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..n {
                row += self.0[[i, j]] * w[j];
            }
            acc += w[i].conj() * row;
        }
        acc.re
    }
}

fn hermitian_deviation(m: &Array2<Complex64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    dev
}

/// Flattened covariance, `2·n(n+1)/2` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFeature(pub Vec<f64>);

impl CovarianceFeature {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Feature length for an `n`-element array.
pub fn feature_len(n: usize) -> usize {
    n * (n + 1)
}

/// Element count `n` for a feature of length `len`, if one exists.
pub fn elements_for_feature_len(len: usize) -> Result<usize> {
    let n = ((len as f64).sqrt()) as usize;
    (n.saturating_sub(1)..=n + 1)
        .find(|&k| k > 0 && feature_len(k) == len)
        .ok_or(FeatureError::BadFeatureLength(len))
}

/// Positions within a feature vector that hold the diagonal real parts.
pub fn diagonal_real_positions(n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for i in 0..n {
        out.push(pos);
        pos += 2 * (n - i);
    }
    out
}

pub fn normalized_covariance(p: &PressureVector) -> Result<HermitianMatrix> {
    let v = p.values();
    if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    let norm2 = p.norm_sqr();
    if norm2 == 0.0 {
        return Err(FeatureError::ZeroVector);
    }
    let n = v.len();
    let c = Array2::from_shape_fn((n, n), |(i, j)| v[i] * v[j].conj() / norm2);
    Ok(HermitianMatrix(c))
}

pub fn vectorize(c: &HermitianMatrix) -> CovarianceFeature {
    let n = c.dim();
    let m = c.as_array();
    let mut x = Vec::with_capacity(feature_len(n));
    for i in 0..n {
        for j in i..n {
            x.push(m[[i, j]].re);
            x.push(m[[i, j]].im);
        }
    }
    CovarianceFeature(x)
}

/// Inverse of [`vectorize`]: rebuilds the full Hermitian matrix.
pub fn unvectorize(x: &[f64]) -> Result<HermitianMatrix> {
    let n = elements_for_feature_len(x.len())?;
    let mut m = Array2::<Complex64>::zeros((n, n));
    let mut pos = 0;
    for i in 0..n {
        for j in i..n {
            let v = Complex64::new(x[pos], x[pos + 1]);
            m[[i, j]] = v;
            m[[j, i]] = v.conj();
            pos += 2;
        }
    }
    HermitianMatrix::new(m)
}

/// Shorthand for `vectorize(normalized_covariance(p))`.
pub fn covariance_feature(p: &PressureVector) -> Result<CovarianceFeature> {
    Ok(vectorize(&normalized_covariance(p)?))
}

/// Uniform partition of `[r_min, r_max]` into `n_bins` range classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinningRepr", into = "BinningRepr")]
pub struct RangeBinning {
    r_min: f64,
    r_max: f64,
    n_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct BinningRepr {
    r_min: f64,
    r_max: f64,
    n_bins: usize,
}

impl TryFrom<BinningRepr> for RangeBinning {
    type Error = FeatureError;
    fn try_from(b: BinningRepr) -> Result<Self> {
        RangeBinning::new(b.r_min, b.r_max, b.n_bins)
    }
}

impl From<RangeBinning> for BinningRepr {
    fn from(b: RangeBinning) -> Self {
        BinningRepr { r_min: b.r_min, r_max: b.r_max, n_bins: b.n_bins }
    }
}

impl RangeBinning {
    pub fn new(r_min: f64, r_max: f64, n_bins: usize) -> Result<Self> {
        if !(r_min.is_finite() && r_max.is_finite() && r_min < r_max) {
            return Err(FeatureError::InvalidBinning(format!("need r_min < r_max, got {r_min}, {r_max}")));
        }
        if n_bins < 2 {
            return Err(FeatureError::InvalidBinning(format!("need at least 2 bins, got {n_bins}")));
        }
        Ok(Self { r_min, r_max, n_bins })
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn width(&self) -> f64 {
        (self.r_max - self.r_min) / self.n_bins as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeLabel {
    pub bin_index: usize,
    pub one_hot: Vec<f64>,
}

pub fn encode_range(r: f64, binning: &RangeBinning) -> Result<RangeLabel> {
    if !(r >= binning.r_min && r <= binning.r_max) {
        return Err(FeatureError::OutOfDomain { range: r, r_min: binning.r_min, r_max: binning.r_max });
    }
    let raw = ((r - binning.r_min) / binning.width()).floor() as usize;
    let bin_index = raw.min(binning.n_bins - 1);
    let mut one_hot = vec![0.0; binning.n_bins];
    one_hot[bin_index] = 1.0;
    Ok(RangeLabel { bin_index, one_hot })
}

/// Bin center.
pub fn decode_bin(bin_index: usize, binning: &RangeBinning) -> Result<f64> {
    if bin_index >= binning.n_bins {
        return Err(FeatureError::IndexOutOfRange { index: bin_index, n_bins: binning.n_bins });
    }
    Ok(binning.r_min + (bin_index as f64 + 0.5) * binning.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn paper_binning() -> RangeBinning {
        RangeBinning::new(1100.0, 5000.0, 201).unwrap()
    }

    #[test]
    fn covariance_of_1_i() {
        let cov = normalized_covariance(&PressureVector(vec![c(1.0, 0.0), c(0.0, 1.0)])).unwrap();
        let m = cov.as_array();
        assert_eq!(m[[0, 0]], c(0.5, 0.0));
        assert_eq!(m[[0, 1]], c(0.0, -0.5));
        assert_eq!(m[[1, 0]], c(0.0, 0.5));
        assert_eq!(m[[1, 1]], c(0.5, 0.0));
        assert_eq!(vectorize(&cov).0, vec![0.5, 0.0, 0.0, -0.5, 0.5, 0.0]);
    }

    #[test]
    fn covariance_of_1_0() {
        let cov = normalized_covariance(&PressureVector(vec![c(1.0, 0.0), c(0.0, 0.0)])).unwrap();
        let m = cov.as_array();
        assert_eq!(m[[0, 0]], c(1.0, 0.0));
        assert_eq!(m[[0, 1]], c(0.0, 0.0));
        assert_eq!(m[[1, 1]], c(0.0, 0.0));
    }

    #[test]
    fn half_identity_vectorizes() {
        let m = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { c(0.5, 0.0) } else { c(0.0, 0.0) });
        let x = vectorize(&HermitianMatrix::new(m).unwrap());
        assert_eq!(x.0, vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn twenty_one_elements_give_462() {
        let p = PressureVector((0..21).map(|i| c(i as f64 + 1.0, -(i as f64))).collect());
        let x = covariance_feature(&p).unwrap();
        assert_eq!(x.len(), 462);
        assert_eq!(elements_for_feature_len(462).unwrap(), 21);
        let trace: f64 = diagonal_real_positions(21).iter().map(|&i| x.0[i]).sum();
        assert!((trace - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_and_non_hermitian_rejected() {
        assert_eq!(
            normalized_covariance(&PressureVector(vec![c(0.0, 0.0); 3])),
            Err(FeatureError::ZeroVector)
        );
        let m = Array2::from_shape_fn((2, 2), |(i, j)| c((i * 2 + j) as f64, 0.0));
        assert!(matches!(HermitianMatrix::new(m), Err(FeatureError::NotHermitian(_))));
    }

    #[test]
    fn brute_force_outer_product() {
        let p: Vec<Complex64> = (0..21).map(|i| c((i as f64 * 1.3).sin(), (i as f64 * 0.7).cos())).collect();
        let norm2: f64 = p.iter().map(|v| v.re * v.re + v.im * v.im).sum();
        let cov = normalized_covariance(&PressureVector(p.clone())).unwrap();
        for i in 0..21 {
            for j in 0..21 {
                let re = (p[i].re * p[j].re + p[i].im * p[j].im) / norm2;
                let im = (p[i].im * p[j].re - p[i].re * p[j].im) / norm2;
                let got = cov.as_array()[[i, j]];
                assert!((got.re - re).abs() < 1e-14 && (got.im - im).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn encode_examples() {
        let b = paper_binning();
        assert!((b.width() - 19.40298507).abs() < 1e-8);
        assert_eq!(encode_range(1105.0, &b).unwrap().bin_index, 0);
        assert_eq!(encode_range(5000.0, &b).unwrap().bin_index, 200);
        let w = b.width();
        assert_eq!(encode_range(1100.0 + 100.0 * w + w / 2.0, &b).unwrap().bin_index, 100);
        assert!(matches!(encode_range(1099.9, &b), Err(FeatureError::OutOfDomain { .. })));
        assert!(matches!(encode_range(f64::NAN, &b), Err(FeatureError::OutOfDomain { .. })));
        let label = encode_range(3000.0, &b).unwrap();
        assert_eq!(label.one_hot.iter().sum::<f64>(), 1.0);
        assert_eq!(label.one_hot[label.bin_index], 1.0);
    }

    #[test]
    fn decode_examples() {
        let b = paper_binning();
        // 1100 + 0.5 * 3900/201 and 1100 + 100.5 * 3900/201
        assert!((decode_bin(0, &b).unwrap() - 1109.7014925).abs() < 1e-6);
        assert!((decode_bin(100, &b).unwrap() - 3050.0).abs() < 1e-9);
        assert!(matches!(decode_bin(201, &b), Err(FeatureError::IndexOutOfRange { .. })));
        for m in 0..201 {
            assert_eq!(encode_range(decode_bin(m, &b).unwrap(), &b).unwrap().bin_index, m);
        }
    }

    #[test]
    fn binning_validation() {
        assert!(RangeBinning::new(10.0, 5.0, 10).is_err());
        assert!(RangeBinning::new(0.0, 5.0, 1).is_err());
    }

    fn pressure_strategy() -> impl Strategy<Value = Vec<Complex64>> {
        prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..24)
            .prop_map(|v| v.into_iter().map(|(a, b)| c(a, b)).collect())
            .prop_filter("non-zero", |v: &Vec<Complex64>| v.iter().any(|x| x.norm() > 1e-3))
    }

    proptest! {
        #[test]
        fn scale_invariance(p in pressure_strategy(), mag in 1e-3f64..1e3, phase in 0.0f64..std::f64::consts::TAU) {
            let s = Complex64::from_polar(mag, phase);
            let x = covariance_feature(&PressureVector(p.clone())).unwrap();
            let y = covariance_feature(&PressureVector(p.iter().map(|v| v * s).collect())).unwrap();
            for (a, b) in x.0.iter().zip(&y.0) {
                prop_assert!((a - b).abs() < 1e-13);
            }
        }

        #[test]
        fn unit_trace_and_round_trip(p in pressure_strategy()) {
            let n = p.len();
            let cov = normalized_covariance(&PressureVector(p)).unwrap();
            prop_assert!((cov.trace() - c(1.0, 0.0)).norm() < 1e-12);
            let x = vectorize(&cov);
            let diag: f64 = diagonal_real_positions(n).iter().map(|&i| x.0[i]).sum();
            prop_assert!((diag - 1.0).abs() < 1e-12);
            prop_assert_eq!(unvectorize(&x.0).unwrap(), cov);
        }

        #[test]
        fn decode_encode_within_half_width(r in 1100.0f64..=5000.0) {
            let b = paper_binning();
            let back = decode_bin(encode_range(r, &b).unwrap().bin_index, &b).unwrap();
            prop_assert!((back - r).abs() <= b.width() / 2.0 + 1e-9);
        }
    }
}
