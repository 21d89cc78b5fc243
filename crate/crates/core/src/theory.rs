//! Closed-form scale, conditioning, and hyperparameter quantities, plus the
//! Monte-Carlo covariance certification.
//!
//! Spectral norms and extreme singular values are computed by dense SVD
//! (symmetric eigendecomposition for covariance matrices); empirical
//! covariances are mean-centered with `1/N` normalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::simulator::{stream_rng, SystemParams};
use crate::{Error, Result};

/// Horizon for the state-scale sequence `B_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(u64),
    Infinite,
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0f64, |a, s| a.max(*s))
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(f64::INFINITY, |a, s| a.min(*s))
}

/// Σ_{i=0}^{t−1} x^{2i}, evaluated by direct summation so the removable
/// singularity at `x = 1` needs no special casing.
fn geometric_sum_even(x: f64, t: u64) -> f64 {
    let q = x * x;
    let mut acc = 0.0;
    let mut term = 1.0;
    for _ in 0..t {
        acc += term;
        term *= q;
    }
    acc
}

/// State-scale sequence `B_t = ‖B‖·√((1 − ‖A‖^{2t})/(1 − ‖A‖²))`, with the
/// limits `B_t = ‖B‖·√t` at `‖A‖ = 1` and `B_∞ = ‖B‖/√(1 − ‖A‖²)` for
/// `‖A‖ < 1`. `B_0 = 0`.
pub fn b_t(a_norm: f64, b_norm: f64, horizon: Horizon) -> Result<f64> {
    if !(a_norm >= 0.0 && a_norm.is_finite()) || !(b_norm >= 0.0 && b_norm.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "norms must be finite and nonnegative, got a = {a_norm}, b = {b_norm}"
        )));
    }
    match horizon {
        Horizon::Infinite => {
            if a_norm >= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "the infinite-horizon scale requires spectral norm < 1, got {a_norm}"
                )));
            }
            Ok(b_norm / (1.0 - a_norm * a_norm).sqrt())
        }
        Horizon::Finite(0) => Ok(0.0),
        Horizon::Finite(t) => {
            if a_norm == 1.0 {
                Ok(b_norm * (t as f64).sqrt())
            } else {
                let q = a_norm * a_norm;
                Ok(b_norm * ((1.0 - q.powf(t as f64)) / (1.0 - q)).sqrt())
            }
        }
    }
}

/// Shared validation for the conditioning ratios: extracts
/// `(a_norm, b_norm, b_min, beta)` and rejects degenerate systems.
fn conditioning_inputs(params: &SystemParams) -> Result<(f64, f64, f64, f64)> {
    let beta = params.act().min_slope();
    if beta <= 0.0 {
        return Err(Error::InvalidParameter(
            "conditioning ratios require a strictly positive slope bound".into(),
        ));
    }
    if params.input_dim() < params.state_dim() {
        return Err(Error::InvalidParameter(format!(
            "conditioning ratios require at least as many inputs as states, got p = {} < n = {}",
            params.input_dim(),
            params.state_dim()
        )));
    }
    let a_norm = spectral_norm(params.a());
    let b_norm = spectral_norm(params.b());
    let b_min = min_singular_value(params.b());
    if b_min <= 0.0 {
        return Err(Error::InvalidParameter(
            "conditioning ratios require a full-row-rank input matrix".into(),
        ));
    }
    Ok((a_norm, b_norm, b_min, beta))
}

/// Conditioning ratio for stable systems:
/// `ρ = (‖B‖/σ_min(B))² / (β²(1 − ‖A‖²))`. Requires `‖A‖ < 1`, `β > 0`,
/// and a full-row-rank `B` (so `p ≥ n`).
pub fn rho_stable(params: &SystemParams) -> Result<f64> {
    let (a_norm, b_norm, b_min, beta) = conditioning_inputs(params)?;
    if a_norm >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "the stable conditioning ratio requires spectral norm < 1, got {a_norm}"
        )));
    }
    Ok((b_norm / b_min).powi(2) / (beta * beta * (1.0 - a_norm * a_norm)))
}

/// Conditioning ratio for multi-trajectory sampling at horizon `t0`:
/// `ρ̄ = B_{t0}² / (β²·σ_min(B)²)`, sharpened for scalar states by the
/// factor `1/Σ_{i=1}^{t0} (β‖A‖)^{2(i−1)}` (evaluated as a direct sum, so
/// `β‖A‖ = 1` is handled by its limit). Valid for any spectral norm.
pub fn rho_unstable(params: &SystemParams, t0: u64) -> Result<f64> {
    if t0 < 1 {
        return Err(Error::InvalidParameter("sampling horizon t0 must be at least 1".into()));
    }
    let (a_norm, b_norm, b_min, beta) = conditioning_inputs(params)?;
    let bt0 = b_t(a_norm, b_norm, Horizon::Finite(t0))?;
    let rho_bar = (bt0 / (beta * b_min)).powi(2);
    if params.state_dim() == 1 {
        Ok(rho_bar / geometric_sum_even(beta * a_norm, t0))
    } else {
        Ok(rho_bar)
    }
}

/// Truncation/sampling length `L = ⌈1 − log(c·n·ρ)/log(‖A‖)⌉`, clamped to be
/// at least 2. Requires `0 < ‖A‖ < 1` and `c·n·ρ ≥ 1`.
pub fn truncation_length(n: usize, rho: f64, a_norm: f64, c: f64) -> Result<u64> {
    if !(a_norm > 0.0 && a_norm < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "the truncation length requires 0 < spectral norm < 1, got {a_norm}"
        )));
    }
    let cnr = c * n as f64 * rho;
    if !(cnr >= 1.0 && cnr.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "the truncation length requires c·n·ρ ≥ 1, got {cnr}"
        )));
    }
    let raw = (1.0 - cnr.ln() / a_norm.ln()).ceil();
    Ok((raw as u64).max(2))
}

/// Free constants in the hyperparameter recipes; all default to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Truncation-length constant `c`.
    pub c: f64,
    /// Sample-complexity constant `C`.
    pub big_c: f64,
    /// Step-size constant `c0`.
    pub c0: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        TheoryConstants { c: 1.0, big_c: 1.0, c0: 1.0 }
    }
}

impl TheoryConstants {
    fn validate(&self) -> Result<()> {
        if self.c > 0.0 && self.big_c > 0.0 && self.c0 > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "theory constants must be positive, got c = {}, C = {}, c0 = {}",
                self.c, self.big_c, self.c0
            )))
        }
    }
}

/// Which convergence regime the hyperparameter recipe targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeMode {
    /// Single stable trajectory.
    Stable,
    /// Single stable trajectory with an odd activation; the state dimension
    /// drops out of the step size and rate.
    Odd,
    /// Multi-trajectory sampling at horizon `t0`; admits any spectral norm.
    Unstable { t0: u64 },
}

/// Scaling, step size, contraction rate, and sample floor for one regime.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoreticalHparams {
    pub mu: f64,
    pub eta: f64,
    pub rate: f64,
    pub n_min: u64,
    pub rho: f64,
    /// Truncation/sampling length; absent in the multi-trajectory regime.
    pub l: Option<u64>,
}

/// Hyperparameter recipes.
///
/// * stable: `μ = 1/B_∞`, `η = c0·β²/(ρ·n·(n+p))`,
///   `rate = 1 − c0·β⁴/(2ρ²·n·(n+p))`, `N_min = ⌈C·L·ρ²·(n+p)⌉`;
/// * odd: the factor `n` drops from `η` and from the rate;
/// * multi-trajectory at horizon `t0`: `ρ` from [`rho_unstable`],
///   `μ = 1/B_{t0}` (the reciprocal of the horizon scale, matching the
///   general `μ = 1/√γ₊` recipe with `γ₊ = B_{t0}²`), stable-form `η` and
///   rate, `N_min = ⌈C·ρ²·(n+p)⌉`.
///
/// The mode is the caller's assertion; oddness of the activation is not
/// re-derived here.
pub fn theoretical_hparams(
    params: &SystemParams,
    mode: RegimeMode,
    consts: &TheoryConstants,
) -> Result<TheoreticalHparams> {
    consts.validate()?;
    let n = params.state_dim();
    let p = params.input_dim();
    let beta = params.act().min_slope();
    let dims = (n + p) as f64;
    let a_norm = spectral_norm(params.a());
    let b_norm = spectral_norm(params.b());
    match mode {
        RegimeMode::Stable | RegimeMode::Odd => {
            let rho = rho_stable(params)?;
            let mu = 1.0 / b_t(a_norm, b_norm, Horizon::Infinite)?;
            let l = truncation_length(n, rho, a_norm, consts.c)?;
            let n_min = (consts.big_c * l as f64 * rho * rho * dims).ceil() as u64;
            let dim_factor = if mode == RegimeMode::Odd { dims } else { n as f64 * dims };
            let eta = consts.c0 * beta * beta / (rho * dim_factor);
            let rate = 1.0 - consts.c0 * beta.powi(4) / (2.0 * rho * rho * dim_factor);
            Ok(TheoreticalHparams { mu, eta, rate, n_min, rho, l: Some(l) })
        }
        RegimeMode::Unstable { t0 } => {
            let rho = rho_unstable(params, t0)?;
            let mu = 1.0 / b_t(a_norm, b_norm, Horizon::Finite(t0))?;
            let n_min = (consts.big_c * rho * rho * dims).ceil() as u64;
            let eta = consts.c0 * beta * beta / (rho * n as f64 * dims);
            let rate = 1.0 - consts.c0 * beta.powi(4) / (2.0 * rho * rho * n as f64 * dims);
            Ok(TheoreticalHparams { mu, eta, rate, n_min, rho, l: None })
        }
    }
}

/// Measured conditioning of a scaled dataset: `γ₊ I ⪰ (1/N)Σxxᵀ ⪰ γ₋ I`
/// with mean-norm parameter `θ` and truncation length `L`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AssumptionParams {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub theta: f64,
    pub l: u64,
}

impl AssumptionParams {
    pub fn new(gamma_plus: f64, gamma_minus: f64, theta: f64, l: u64) -> Result<Self> {
        if !(gamma_minus > 0.0 && gamma_plus >= gamma_minus) {
            return Err(Error::InvalidParameter(format!(
                "conditioning bounds must satisfy γ₊ ≥ γ₋ > 0, got γ₊ = {gamma_plus}, γ₋ = {gamma_minus}"
            )));
        }
        if !(theta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "the mean-norm parameter must be nonnegative, got {theta}"
            )));
        }
        if l < 1 {
            return Err(Error::InvalidParameter("the window length must be at least 1".into()));
        }
        Ok(AssumptionParams { gamma_plus, gamma_minus, theta, l })
    }
}

/// Hyperparameters from measured conditioning, for any system meeting the
/// assumption: `ρ = γ₊/γ₋`, `μ = 1/√γ₊`, `η = c0·β²/(ρ(θ+√2)²(n+p))`,
/// `rate = 1 − c0·β⁴/(2ρ²(θ+√2)²(n+p))`, `N_min = ⌈C·L·ρ²·(n+p)⌉`.
pub fn general_hparams(
    ap: &AssumptionParams,
    beta: f64,
    n: usize,
    p: usize,
    consts: &TheoryConstants,
) -> Result<TheoreticalHparams> {
    consts.validate()?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "the slope bound must lie in (0, 1], got {beta}"
        )));
    }
    let rho = ap.gamma_plus / ap.gamma_minus;
    let dims = (n + p) as f64;
    let spread = (ap.theta + 2.0f64.sqrt()).powi(2);
    Ok(TheoreticalHparams {
        mu: 1.0 / ap.gamma_plus.sqrt(),
        eta: consts.c0 * beta * beta / (rho * spread * dims),
        rate: 1.0 - consts.c0 * beta.powi(4) / (2.0 * rho * rho * spread * dims),
        n_min: (consts.big_c * ap.l as f64 * rho * rho * dims).ceil() as u64,
        rho,
        l: Some(ap.l),
    })
}

/// Everything the closed-form theory says about one system in one regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub a_norm: f64,
    pub b_norm: f64,
    pub b_min: f64,
    pub beta: f64,
    /// Horizon the `b_t` field was evaluated at.
    pub t: u64,
    pub b_t: f64,
    /// Finite only for spectral norm < 1; `null` otherwise.
    pub b_inf: Option<f64>,
    pub rho: f64,
    /// Truncation/sampling length; absent in the multi-trajectory regime.
    pub l: Option<u64>,
    pub n_min: u64,
    pub mu: f64,
    pub eta: f64,
    pub rate: f64,
}

/// Assemble a [`TheoryReport`]. When `t` is not given it defaults to the
/// computed truncation length (stable/odd) or the sampling horizon
/// (multi-trajectory).
pub fn theory_report(
    params: &SystemParams,
    mode: RegimeMode,
    t: Option<u64>,
    consts: &TheoryConstants,
) -> Result<TheoryReport> {
    let hp = theoretical_hparams(params, mode, consts)?;
    let a_norm = spectral_norm(params.a());
    let b_norm = spectral_norm(params.b());
    let t = t.unwrap_or(match mode {
        RegimeMode::Unstable { t0 } => t0,
        _ => hp.l.expect("stable regimes always carry a truncation length"),
    });
    Ok(TheoryReport {
        a_norm,
        b_norm,
        b_min: min_singular_value(params.b()),
        beta: params.act().min_slope(),
        t,
        b_t: b_t(a_norm, b_norm, Horizon::Finite(t))?,
        b_inf: if a_norm < 1.0 {
            Some(b_t(a_norm, b_norm, Horizon::Infinite)?)
        } else {
            None
        },
        rho: hp.rho,
        l: hp.l,
        n_min: hp.n_min,
        mu: hp.mu,
        eta: hp.eta,
        rate: hp.rate,
    })
}

/// Extreme eigenvalues of `XᵀX/N` plus the largest row norm, by dense SVD.
/// Requires at least as many rows (samples) as columns.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DataMatrixCondition {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub max_row_norm: f64,
}

pub fn data_matrix_condition(x: &DMatrix<f64>) -> Result<DataMatrixCondition> {
    let (nrows, ncols) = x.shape();
    if nrows < ncols {
        return Err(Error::NotEnoughSamples { need: ncols, got: nrows });
    }
    let sv = x.singular_values();
    let n = nrows as f64;
    let mut max_row_norm = 0.0f64;
    for i in 0..nrows {
        max_row_norm = max_row_norm.max(x.row(i).norm());
    }
    Ok(DataMatrixCondition {
        lambda_max: sv.iter().fold(0.0f64, |a, s| a.max(s * s / n)),
        lambda_min: sv.iter().fold(f64::INFINITY, |a, s| a.min(s * s / n)),
        max_row_norm,
    })
}

/// Mean-centered empirical covariance with `1/N` normalization.
pub fn empirical_covariance(samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if samples.len() < 2 {
        return Err(Error::NotEnoughSamples { need: 2, got: samples.len() });
    }
    let d = samples[0].len();
    for s in samples {
        if s.len() != d {
            return Err(Error::Dimension(format!(
                "covariance samples must share one dimension, got {} and {d}",
                s.len()
            )));
        }
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = DVector::zeros(d);
    for s in samples {
        centered.copy_from(s);
        centered -= &mean;
        cov.ger(1.0 / n, &centered, &centered, 1.0);
    }
    Ok(cov)
}

fn symmetric_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    let max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    (min, max)
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
}

/// Monte-Carlo certification of the state-covariance bounds at time `t`.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceBoundsReport {
    pub eig_min: f64,
    pub eig_max: f64,
    /// `β²·σ_min(BBᵀ)`; zero when `p < n` or `β = 0`.
    pub lower_bound: f64,
    /// `B_t²`.
    pub upper_bound: f64,
    pub tol_lower: f64,
    pub tol_upper: f64,
    pub pass_lower: bool,
    pub pass_upper: bool,
    pub mean_norm: f64,
    /// Present only for odd activations, whose states have zero mean.
    pub mean_tol: Option<f64>,
    pub pass_mean: Option<bool>,
    /// Present only for scalar states, which satisfy the sharper
    /// geometric-sum variance bound.
    pub miso_variance: Option<f64>,
    pub miso_bound: Option<f64>,
    pub miso_tol: Option<f64>,
    pub pass_miso: Option<bool>,
    pub samples_used: usize,
    pub pass: bool,
}

const COVARIANCE_BATCHES: usize = 10;

/// Estimate the covariance of `h_t` from independent trajectories and test
/// it against the closed-form bounds; statistical tolerances are three
/// standard errors estimated from 10 batches. Failures are reported, not
/// raised. Needs `num_samples ≥ 1000` and `t ≥ 1`; uses per-trajectory
/// generator streams of `master_seed`, so estimates don't depend on
/// evaluation order.
pub fn covariance_bounds_check(
    params: &SystemParams,
    t: usize,
    num_samples: usize,
    master_seed: u64,
) -> CovarianceBoundsReport {
    assert!(t >= 1, "covariance certification needs t >= 1");
    assert!(num_samples >= 1000, "covariance certification needs at least 1000 samples");
    let n = params.state_dim();
    let p = params.input_dim();
    let per_batch = num_samples / COVARIANCE_BATCHES;
    let used = per_batch * COVARIANCE_BATCHES;

    // Final states, one column per trajectory.
    let mut finals = DMatrix::zeros(n, used);
    let mut h = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let mut u = DVector::zeros(p);
    for i in 0..used {
        let mut rng = stream_rng(master_seed, i as u64);
        h.fill(0.0);
        for _ in 0..t {
            for v in u.iter_mut() {
                *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            }
            params.step_into(&h, &u, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        finals.column_mut(i).copy_from(&h);
    }

    let columns = |range: std::ops::Range<usize>| -> Vec<DVector<f64>> {
        range.map(|i| finals.column(i).into_owned()).collect()
    };

    let all = columns(0..used);
    let cov = empirical_covariance(&all).expect("at least 1000 samples");
    let (eig_min, eig_max) = symmetric_extremes(&cov);
    let mut mean = DVector::zeros(n);
    for c in &all {
        mean += c;
    }
    mean /= used as f64;

    // Batch statistics for the standard errors.
    let mut batch_mins = Vec::with_capacity(COVARIANCE_BATCHES);
    let mut batch_maxs = Vec::with_capacity(COVARIANCE_BATCHES);
    let mut batch_means: Vec<DVector<f64>> = Vec::with_capacity(COVARIANCE_BATCHES);
    let mut batch_vars = Vec::with_capacity(COVARIANCE_BATCHES);
    for b in 0..COVARIANCE_BATCHES {
        let chunk = columns(b * per_batch..(b + 1) * per_batch);
        let bcov = empirical_covariance(&chunk).expect("batches hold at least 100 samples");
        let (lo, hi) = symmetric_extremes(&bcov);
        batch_mins.push(lo);
        batch_maxs.push(hi);
        batch_vars.push(bcov[(0, 0)]);
        let mut bm = DVector::zeros(n);
        for c in &chunk {
            bm += c;
        }
        bm /= per_batch as f64;
        batch_means.push(bm);
    }
    let root_b = (COVARIANCE_BATCHES as f64).sqrt();
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se_min = sample_std(&batch_mins, mean_of(&batch_mins)) / root_b;
    let se_max = sample_std(&batch_maxs, mean_of(&batch_maxs)) / root_b;

    let beta = params.act().min_slope();
    let a_norm = spectral_norm(params.a());
    let b_norm = spectral_norm(params.b());
    let smin_bbt = if p >= n {
        let s = min_singular_value(params.b());
        s * s
    } else {
        0.0
    };
    let lower_bound = beta * beta * smin_bbt;
    let upper_bound = b_t(a_norm, b_norm, Horizon::Finite(t as u64))
        .expect("norms of a realized system are finite")
        .powi(2);
    let tol_lower = 3.0 * se_min;
    let tol_upper = 3.0 * se_max;
    let pass_lower = eig_min >= lower_bound - tol_lower;
    let pass_upper = eig_max <= upper_bound + tol_upper;

    let mean_norm = mean.norm();
    let (mean_tol, pass_mean) = if params.act().is_odd() {
        // Coordinatewise standard errors of the mean, aggregated in l2; if
        // every coordinate sits within 3 SE of zero, the norm sits within
        // the aggregate.
        let mut se_sq = 0.0;
        for j in 0..n {
            let coords: Vec<f64> = batch_means.iter().map(|m| m[j]).collect();
            let se_j = sample_std(&coords, mean_of(&coords)) / root_b;
            se_sq += se_j * se_j;
        }
        let tol = 3.0 * se_sq.sqrt();
        (Some(tol), Some(mean_norm <= tol))
    } else {
        (None, None)
    };

    let (miso_variance, miso_bound, miso_tol, pass_miso) = if n == 1 {
        let variance = cov[(0, 0)];
        let bound = beta * beta * b_norm * b_norm * geometric_sum_even(beta * a_norm, t as u64);
        let tol = 3.0 * sample_std(&batch_vars, mean_of(&batch_vars)) / root_b;
        (Some(variance), Some(bound), Some(tol), Some(variance >= bound - tol))
    } else {
        (None, None, None, None)
    };

    let pass = pass_lower
        && pass_upper
        && pass_mean.unwrap_or(true)
        && pass_miso.unwrap_or(true);
    CovarianceBoundsReport {
        eig_min,
        eig_max,
        lower_bound,
        upper_bound,
        tol_lower,
        tol_upper,
        pass_lower,
        pass_upper,
        mean_norm,
        mean_tol,
        pass_mean,
        miso_variance,
        miso_bound,
        miso_tol,
        pass_miso,
        samples_used: used,
        pass,
    }
}
