//! Fitting-based early stopping.
//!
//! For each recorded epoch the predicted test ranges `g_α(x̂_i)` are fitted
//! by least squares to a polynomial track in time (a straight line
//! `a·t + b` by default). The misfit is weighted by `λ` and added to the
//! training loss:
//!
//! ```text
//! L_FEAST(α) = L(α) + λ · √( (1/M) Σ_i [g_α(x̂_i) − F(t_i; a_α, b_α)]² )
//! λ          = √M · max_α L(α) / max_α √( Σ_i [g_α(x̂_i) − F(t_i; a_α, b_α)]² )
//! ```
//!
//! so both terms peak at the same height. The stopping epoch is the argmin
//! of `L_FEAST`. Truth ranges are never consulted here; [`rmse`] is only for
//! scoring afterwards.

use std::fmt::Write as _;

use thiserror::Error;

use crate::network::EpochTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeastError {
    #[error("need at least {needed} points for an order-{order} fit, got {got}")]
    TooFewPoints { needed: usize, got: usize, order: usize },
    #[error("sample times are degenerate for an order-{0} fit")]
    DegenerateTimes(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all residual norms are zero; lambda is undefined")]
    ZeroResidualEverywhere,
    #[error("maximum training loss must be positive")]
    NonPositiveLoss,
    #[error("empty trace")]
    EmptyTrace,
    #[error("truth range must be positive, got {0}")]
    NonPositiveTruth(f64),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("malformed report: {0}")]
    BadReport(String),
}

pub type Result<T> = std::result::Result<T, FeastError>;

/// `F(t) = a·t + b`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTrack {
    pub a: f64,
    pub b: f64,
}

impl LinearTrack {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * t + self.b
    }
}

/// `F(t) = Σ_k coeffs[k]·t^k`
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialTrack {
    pub coeffs: Vec<f64>,
}

impl PolynomialTrack {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Slope and intercept; higher-order coefficients are ignored.
    pub fn linear_part(&self) -> LinearTrack {
        LinearTrack { a: self.coeffs.get(1).copied().unwrap_or(0.0), b: self.coeffs[0] }
    }

    pub fn residual_norm(&self, times: &[f64], values: &[f64]) -> f64 {
        times
            .iter()
            .zip(values)
            .map(|(t, g)| (g - self.eval(*t)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Least-squares polynomial of the given order.
///
/// Times are centered and scaled before forming the normal equations, then
/// the coefficients are mapped back to powers of raw `t`.
pub fn fit_polynomial(times: &[f64], values: &[f64], order: usize) -> Result<PolynomialTrack> {
    if times.len() != values.len() {
        return Err(FeastError::LengthMismatch(times.len(), values.len()));
    }
    let m = times.len();
    let n = order + 1;
    if m < n || m < 2 {
        return Err(FeastError::TooFewPoints { needed: n.max(2), got: m, order });
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(FeastError::NonFinite);
    }
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < n.max(2) {
        return Err(FeastError::DegenerateTimes(order));
    }

    let center = times.iter().sum::<f64>() / m as f64;
    let scale = times.iter().map(|t| (t - center).abs()).fold(0.0, f64::max);
    let u: Vec<f64> = times.iter().map(|t| (t - center) / scale).collect();

    let mut gram = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (ui, gi) in u.iter().zip(values) {
        let mut powers = vec![1.0; 2 * n - 1];
        for k in 1..powers.len() {
            powers[k] = powers[k - 1] * ui;
        }
        for r in 0..n {
            rhs[r] += powers[r] * gi;
            for c in 0..n {
                gram[r][c] += powers[r + c];
            }
        }
    }
    let scaled = solve_dense(gram, rhs).ok_or(FeastError::DegenerateTimes(order))?;

    // Σ_k s_k ((t − center)/scale)^k expanded in powers of t.
    let mut coeffs = vec![0.0; n];
    for (k, sk) in scaled.iter().enumerate() {
        let factor = sk / scale.powi(k as i32);
        for j in 0..=k {
            coeffs[j] += factor * binomial(k, j) * (-center).powi((k - j) as i32);
        }
    }
    Ok(PolynomialTrack { coeffs })
}

pub fn fit_linear(times: &[f64], values: &[f64]) -> Result<LinearTrack> {
    Ok(fit_polynomial(times, values, 1)?.linear_part())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[pivot][col].abs() > 1e-14 * scale) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// `λ = √M · max L / max residual_norm`.
pub fn compute_lambda(losses: &[f64], residual_norms: &[f64], m: usize) -> Result<f64> {
    if losses.is_empty() || residual_norms.is_empty() {
        return Err(FeastError::EmptyTrace);
    }
    let max_loss = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_res = residual_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max_loss.is_finite() || !max_res.is_finite() {
        return Err(FeastError::NonFinite);
    }
    if max_res <= 0.0 {
        return Err(FeastError::ZeroResidualEverywhere);
    }
    if max_loss <= 0.0 {
        return Err(FeastError::NonPositiveLoss);
    }
    Ok((m as f64).sqrt() * max_loss / max_res)
}

/// Which epochs enter the maxima of `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    /// All recorded epochs.
    #[default]
    PostHoc,
    /// Only the first `epochs` epochs, so `λ` is fixed early in training.
    Warmup { epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeastOptions {
    /// Polynomial order of the track model.
    pub order: usize,
    pub lambda_mode: LambdaMode,
}

impl Default for FeastOptions {
    fn default() -> Self {
        Self { order: 1, lambda_mode: LambdaMode::PostHoc }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeastEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub track: PolynomialTrack,
    pub residual_norm: f64,
    /// `residual_norm / √M`
    pub misfit: f64,
    pub l_feast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeastTrace {
    pub epochs: Vec<FeastEpoch>,
    pub lambda: f64,
    /// `λ` fell back to 1 because every residual norm was zero.
    pub lambda_fallback: bool,
    /// Index into `epochs` of the argmin.
    pub selected: usize,
    pub n_test: usize,
}

impl FeastTrace {
    pub fn selected_epoch(&self) -> usize {
        self.epochs[self.selected].epoch
    }

    pub fn curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.l_feast).collect()
    }
}

pub fn feast_curve(trace: &EpochTrace, times: &[f64], opts: &FeastOptions) -> Result<FeastTrace> {
    if trace.is_empty() {
        return Err(FeastError::EmptyTrace);
    }
    let m = times.len();
    let mut fits = Vec::with_capacity(trace.len());
    for rec in &trace.records {
        if rec.predicted_ranges.len() != m {
            return Err(FeastError::LengthMismatch(rec.predicted_ranges.len(), m));
        }
        let track = fit_polynomial(times, &rec.predicted_ranges, opts.order)?;
        let residual_norm = track.residual_norm(times, &rec.predicted_ranges);
        fits.push((track, residual_norm));
    }
    let window = match opts.lambda_mode {
        LambdaMode::PostHoc => trace.len(),
        LambdaMode::Warmup { epochs } => epochs.clamp(1, trace.len()),
    };
    let losses: Vec<f64> = trace.records[..window].iter().map(|r| r.train_loss).collect();
    let norms: Vec<f64> = fits[..window].iter().map(|(_, r)| *r).collect();
    let (lambda, lambda_fallback) = match compute_lambda(&losses, &norms, m) {
        Ok(l) => (l, false),
        Err(FeastError::ZeroResidualEverywhere) => (1.0, true),
        Err(e) => return Err(e),
    };
    let sqrt_m = (m as f64).sqrt();
    let epochs: Vec<FeastEpoch> = trace
        .records
        .iter()
        .zip(fits)
        .map(|(rec, (track, residual_norm))| {
            let misfit = residual_norm / sqrt_m;
            FeastEpoch {
                epoch: rec.epoch,
                train_loss: rec.train_loss,
                track,
                residual_norm,
                misfit,
                l_feast: rec.train_loss + lambda * misfit,
            }
        })
        .collect();
    let curve: Vec<f64> = epochs.iter().map(|e| e.l_feast).collect();
    let selected = select_epoch(&curve)?;
    Ok(FeastTrace { epochs, lambda, lambda_fallback, selected, n_test: m })
}

/// Argmin, ties to the earliest index.
pub fn select_epoch(curve: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in curve.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v < curve[b]) {
            best = Some(i);
        }
    }
    best.ok_or(FeastError::EmptyTrace)
}

/// Relative ranging error `√((1/M) Σ (Rp − Rt)² / Rt²)`.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(FeastError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(FeastError::EmptyTrace);
    }
    if let Some(t) = truth.iter().find(|t| !(**t > 0.0)) {
        return Err(FeastError::NonPositiveTruth(*t));
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| ((p - t) / t).powi(2)).sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

/// Comma-separated report with `lambda=` and `selected_epoch=` footer lines.
pub fn format_report(ft: &FeastTrace) -> String {
    let order = ft.epochs.first().map_or(1, |e| e.track.order());
    let mut out = String::from("epoch,train_loss,a,b");
    for k in 2..=order {
        let _ = write!(out, ",c{k}");
    }
    out.push_str(",residual_norm,l_feast\n");
    for e in &ft.epochs {
        let lin = e.track.linear_part();
        let _ = write!(out, "{},{},{},{}", e.epoch, e.train_loss, lin.a, lin.b);
        for c in e.track.coeffs.iter().skip(2) {
            let _ = write!(out, ",{c}");
        }
        let _ = writeln!(out, ",{},{}", e.residual_norm, e.l_feast);
    }
    let _ = writeln!(out, "lambda={}", ft.lambda);
    let _ = writeln!(out, "selected_epoch={}", ft.selected_epoch());
    out
}

/// Summary values read back from a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub lambda: f64,
    pub selected_epoch: usize,
    pub epochs: Vec<usize>,
    pub l_feast: Vec<f64>,
}

pub fn parse_report(text: &str) -> Result<ReportSummary> {
    let bad = |m: String| FeastError::BadReport(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty report".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"epoch") || cols.last() != Some(&"l_feast") {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut summary = ReportSummary { lambda: f64::NAN, selected_epoch: 0, epochs: vec![], l_feast: vec![] };
    let mut have_sel = false;
    for line in lines {
        if let Some(v) = line.strip_prefix("lambda=") {
            summary.lambda = v.parse().map_err(|_| bad(format!("bad lambda {v:?}")))?;
        } else if let Some(v) = line.strip_prefix("selected_epoch=") {
            summary.selected_epoch = v.parse().map_err(|_| bad(format!("bad selected_epoch {v:?}")))?;
            have_sel = true;
        } else if !line.is_empty() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!("row has {} fields, expected {}", fields.len(), cols.len())));
            }
            summary.epochs.push(fields[0].parse().map_err(|_| bad(format!("bad epoch {:?}", fields[0])))?);
            let last = fields[fields.len() - 1];
            summary.l_feast.push(last.parse().map_err(|_| bad(format!("bad l_feast {last:?}")))?);
        }
    }
    if !have_sel {
        return Err(bad("missing selected_epoch footer".into()));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::EpochRecord;
    use proptest::prelude::*;

    fn trace_from(losses: &[f64], preds: &[Vec<f64>]) -> EpochTrace {
        EpochTrace {
            records: losses
                .iter()
                .zip(preds)
                .enumerate()
                .map(|(i, (l, p))| EpochRecord { epoch: i + 1, train_loss: *l, predicted_ranges: p.clone() })
                .collect(),
        }
    }

    #[test]
    fn exact_line() {
        let fit = fit_linear(&[0.0, 1.0, 2.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-14 && (fit.b - 3.0).abs() < 1e-14);
    }

    #[test]
    fn normal_equation_fixture() {
        let fit = fit_linear(&[0.0, 1.0, 2.0], &[0.0, 1.0, 3.0]).unwrap();
        assert!((fit.a - 1.5).abs() < 1e-12);
        assert!((fit.b + 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_linear(&[1.0], &[1.0]), Err(FeastError::TooFewPoints { .. })));
        assert!(matches!(fit_linear(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(FeastError::DegenerateTimes(1))));
        assert!(matches!(fit_linear(&[0.0, 1.0], &[1.0]), Err(FeastError::LengthMismatch(2, 1))));
        assert!(matches!(
            fit_polynomial(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 2),
            Err(FeastError::DegenerateTimes(2))
        ));
    }

    #[test]
    fn quadratic_track_recovered() {
        let times: Vec<f64> = (0..30).map(|i| i as f64 * 10.0).collect();
        let values: Vec<f64> = times.iter().map(|t| 1500.0 + 2.0 * t + 0.004 * t * t).collect();
        let fit = fit_polynomial(&times, &values, 2).unwrap();
        assert!((fit.coeffs[0] - 1500.0).abs() < 1e-8);
        assert!((fit.coeffs[1] - 2.0).abs() < 1e-10);
        assert!((fit.coeffs[2] - 0.004).abs() < 1e-13);
    }

    #[test]
    fn lambda_examples() {
        assert!((compute_lambda(&[1.0, 6.0], &[30.0, 2.0], 25).unwrap() - 1.0).abs() < 1e-15);
        assert!((compute_lambda(&[6.0], &[30.0], 100).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(compute_lambda(&[6.0], &[0.0, 0.0], 10), Err(FeastError::ZeroResidualEverywhere));
    }

    #[test]
    fn linear_epoch_has_no_penalty() {
        let times = [0.0, 10.0, 20.0, 30.0];
        let line: Vec<f64> = times.iter().map(|t| 1200.0 + 2.5 * t).collect();
        let wiggle = vec![1200.0, 1300.0, 1210.0, 1400.0];
        let ft = feast_curve(&trace_from(&[2.0, 1.0], &[wiggle, line]), &times, &FeastOptions::default()).unwrap();
        assert!((ft.epochs[1].l_feast - 1.0).abs() < 1e-9);
        assert_eq!(ft.selected, 1);
        assert_eq!(ft.selected_epoch(), 2);
    }

    #[test]
    fn two_epoch_substitution() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let flat = vec![5.0; 4];
        let bumped = vec![5.0, 5.0 + 5.0, 5.0 - 5.0, 5.0];
        let ft = feast_curve(&trace_from(&[1.0, 1.0], &[flat, bumped.clone()]), &times, &FeastOptions::default())
            .unwrap();
        let rn = fit_polynomial(&times, &bumped, 1).unwrap().residual_norm(&times, &bumped);
        assert!((ft.epochs[1].residual_norm - rn).abs() < 1e-12);
        let lambda = 2.0 * 1.0 / rn;
        assert!((ft.lambda - lambda).abs() < 1e-12);
        assert!((ft.epochs[0].l_feast - 1.0).abs() < 1e-12);
        assert!((ft.epochs[1].l_feast - (1.0 + lambda * rn / 2.0)).abs() < 1e-12);
        assert_eq!(ft.selected, 0);
    }

    #[test]
    fn hand_computed_curve() {
        let times = [0.0, 1.0, 2.0];
        // [0, 1, 3] fits to a = 1.5, b = −1/6 with residuals (1/6, −1/3, 1/6)
        let preds = vec![vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 6.0], vec![1.0, 2.0, 3.0]];
        let losses = [3.0, 2.0, 1.5];
        let ft = feast_curve(&trace_from(&losses, &preds), &times, &FeastOptions::default()).unwrap();
        let rn = [(1.0f64 / 6.0).sqrt(), 2.0 * (1.0f64 / 6.0).sqrt(), 0.0];
        let lambda = 3f64.sqrt() * 3.0 / rn[1];
        for i in 0..3 {
            assert!((ft.epochs[i].residual_norm - rn[i]).abs() < 1e-12);
            let expect = losses[i] + lambda * rn[i] / 3f64.sqrt();
            assert!((ft.epochs[i].l_feast - expect).abs() < 1e-12, "epoch {i}");
        }
        // L_FEAST = [4.5, 5.0, 1.5]
        assert_eq!(ft.selected, 2);
    }

    #[test]
    fn zero_residuals_fall_back_to_unit_lambda() {
        let times = [0.0, 1.0, 2.0];
        let line = vec![1.0, 2.0, 3.0];
        let ft = feast_curve(&trace_from(&[3.0, 1.0, 2.0], &[line.clone(), line.clone(), line]), &times, &FeastOptions::default())
            .unwrap();
        assert!(ft.lambda_fallback);
        assert_eq!(ft.lambda, 1.0);
        assert_eq!(ft.selected, 1);
    }

    #[test]
    fn warmup_lambda_uses_prefix() {
        let times = [0.0, 1.0, 2.0];
        let preds = vec![vec![0.0, 1.0, 3.0], vec![0.0, 1.0, 3.0], vec![0.0, 4.0, 12.0]];
        let opts = FeastOptions { order: 1, lambda_mode: LambdaMode::Warmup { epochs: 2 } };
        let ft = feast_curve(&trace_from(&[2.0, 1.0, 1.0], &preds), &times, &opts).unwrap();
        let rn = (1.0f64 / 6.0).sqrt();
        assert!((ft.lambda - 3f64.sqrt() * 2.0 / rn).abs() < 1e-12);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_epoch(&[5.0, 3.0, 1.0, 2.0, 4.0]).unwrap(), 2);
        assert_eq!(select_epoch(&[5.0, 4.0, 3.0, 2.0]).unwrap(), 3);
        assert_eq!(select_epoch(&[2.0, 1.0, 1.0]).unwrap(), 1);
        assert_eq!(select_epoch(&[]), Err(FeastError::EmptyTrace));
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[110.0], &[100.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(rmse(&[100.0, 200.0], &[100.0, 200.0]).unwrap(), 0.0);
        let expected = ((0.01f64 + 0.0025) / 2.0).sqrt();
        assert!((rmse(&[110.0, 95.0], &[100.0, 100.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.0790569).abs() < 1e-7);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(FeastError::LengthMismatch(1, 2))));
        assert!(matches!(rmse(&[1.0], &[0.0]), Err(FeastError::NonPositiveTruth(_))));
    }

    #[test]
    fn report_round_trip() {
        let times = [0.0, 1.0, 2.0];
        let preds = vec![vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 6.0]];
        let ft = feast_curve(&trace_from(&[3.0, 2.0], &preds), &times, &FeastOptions::default()).unwrap();
        let text = format_report(&ft);
        assert!(text.starts_with("epoch,train_loss,a,b,residual_norm,l_feast\n"));
        let s = parse_report(&text).unwrap();
        assert_eq!(s.selected_epoch, ft.selected_epoch());
        assert_eq!(s.lambda, ft.lambda);
        assert_eq!(s.l_feast, ft.curve());
        assert!(parse_report("epoch,l_feast\n1,2\n").is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..40).prop_flat_map(|m| {
            (prop::collection::vec(0.0f64..800.0, m), prop::collection::vec(1000.0f64..4000.0, m))
        })
    }

    proptest! {
        #[test]
        fn fit_is_a_local_minimum((times, values) in instance()) {
            let fit = fit_linear(&times, &values).unwrap();
            let base = PolynomialTrack { coeffs: vec![fit.b, fit.a] };
            let r0 = base.residual_norm(&times, &values);
            for (da, db) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let p = PolynomialTrack { coeffs: vec![fit.b + db, fit.a + da] };
                prop_assert!(p.residual_norm(&times, &values) >= r0);
            }
            let resid: Vec<f64> = times.iter().zip(&values).map(|(t, g)| g - fit.eval(*t)).collect();
            let dot_t: f64 = resid.iter().zip(&times).map(|(r, t)| r * t).sum();
            let scale_t: f64 = resid.iter().zip(&times).map(|(r, t)| (r * t).abs()).sum();
            let dot_1: f64 = resid.iter().sum();
            let scale_1: f64 = resid.iter().map(|r| r.abs()).sum();
            prop_assert!(dot_t.abs() <= 1e-9 * scale_t.max(1.0));
            prop_assert!(dot_1.abs() <= 1e-9 * scale_1.max(1.0));
        }

        #[test]
        fn translation_equivariance((times, values) in instance(), shift in -500.0f64..500.0) {
            let a = fit_linear(&times, &values).unwrap();
            let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let b = fit_linear(&times, &moved).unwrap();
            prop_assert!((a.a - b.a).abs() < 1e-9);
            prop_assert!((a.b + shift - b.b).abs() < 1e-8);
        }

        #[test]
        fn argmin_scale_invariance(curve in prop::collection::vec(0.0f64..10.0, 1..50), k in 0.01f64..100.0) {
            let scaled: Vec<f64> = curve.iter().map(|v| v * k).collect();
            prop_assert_eq!(select_epoch(&curve).unwrap(), select_epoch(&scaled).unwrap());
        }

        #[test]
        fn lambda_equalizes_maxima(
            losses in prop::collection::vec(0.01f64..10.0, 1..30),
            norms in prop::collection::vec(0.01f64..1e4, 1..30),
            m in 2usize..200,
        ) {
            let lambda = compute_lambda(&losses, &norms, m).unwrap();
            let max_l = losses.iter().copied().fold(0.0, f64::max);
            let max_r = norms.iter().copied().fold(0.0, f64::max);
            prop_assert!((max_l - lambda * max_r / (m as f64).sqrt()).abs() < 1e-12 * max_l.max(1.0));
        }
    }
}
