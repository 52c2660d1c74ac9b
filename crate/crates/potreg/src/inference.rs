//! Post-fit analysis: PIT/KS goodness of fit, exceedance classification,
//! sequence simulation, marginal and conditional return levels, Bayes
//! factor and DIC comparison, monthly cross-validation, and reduced-flow
//! scenario studies.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    build_design_matrix, is_daylight, DesignMatrix, DesignRow, FeatureError, FeatureSpec,
    ObservationRecord, Pollutant, Standardizer,
};
use crate::gpd::GpdParams;
use crate::link::{log_likelihood, LinkError, ModelParams};
use crate::sampler::{quantile_sorted, PosteriorSampleSet, SamplerError};

/// 15-minute observations per year: 4 · 24 · 365.
pub const OBS_PER_YEAR: f64 = 35_136.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("empty sample")]
    EmptySample,
    #[error("no exceedances available")]
    NoExceedances,
    #[error("empty below-threshold resampling pool")]
    EmptyPool,
    #[error("link failure: {0}")]
    Link(#[from] LinkError),
    #[error("gpd failure: {0}")]
    Gpd(#[from] crate::gpd::GpdError),
    #[error("feature failure: {0}")]
    Feature(#[from] FeatureError),
    #[error("sampler failure: {0}")]
    Sampler(#[from] SamplerError),
    #[error("exceedance probability p = {p} is not below the local rate rho = {rho}; the level lies at or below the threshold")]
    LevelBelowThreshold { p: f64, rho: f64 },
    #[error("simulation length {n} too small for p = {p}; need at least {required}")]
    TooFewSimulations { n: usize, p: f64, required: usize },
    #[error("invalid probability {0}; must lie in (0, 1)")]
    InvalidProbability(f64),
    #[error("no valid posterior draws for this functional")]
    NoValidDraws,
    #[error("evidence estimator unstable (effective sample size {ess:.2})")]
    EstimatorUnstable { ess: f64 },
    #[error("bridge estimator requires a fixed model: disable variable selection")]
    BridgeWithSelection,
    #[error("reduction must lie in [0, 1), got {0}")]
    InvalidReduction(f64),
    #[error("plug-in coefficient estimate has non-finite likelihood")]
    BadPlugIn,
}

// ---------------------------------------------------------------------------
// goodness of fit
// ---------------------------------------------------------------------------

/// Probability integral transform of the exceedances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitResult {
    pub values: Vec<f64>,
    /// Exceedances that fell outside their local GPD support (recorded
    /// as w = 0).
    pub out_of_support: usize,
}

/// `w_t = P(X > x_t | σ(c_t), ξ(c_t))` for each exceedance `x_t = X_t − u`;
/// uniform on [0, 1] when the model is correct. Non-exceedance rows are
/// ignored.
pub fn pit_transform(
    rows: &[DesignRow],
    theta: &ModelParams<f64>,
    u: f64,
) -> Result<PitResult, InferenceError> {
    let mut values = Vec::new();
    let mut out_of_support = 0usize;
    for row in rows.iter().filter(|r| r.exceeds) {
        let lg = theta.local(u, &row.c_tilde)?;
        let gpd = GpdParams::new(lg.sigma, lg.xi)?;
        let w = gpd.survival(row.response - u);
        if w == 0.0 {
            out_of_support += 1;
        }
        values.push(w);
    }
    if values.is_empty() {
        return Err(InferenceError::NoExceedances);
    }
    Ok(PitResult { values, out_of_support })
}

/// Complementary CDF of the Kolmogorov distribution, `Q(λ) = P(K > λ)`,
/// with both series branches; terms are truncated below 1e-12.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // fast-converging small-λ form of the same distribution
        let mut cdf = 0.0;
        let pref = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        for k in 1..1000 {
            let a = (2 * k - 1) as f64;
            let term = (-a * a * std::f64::consts::PI * std::f64::consts::PI
                / (8.0 * lambda * lambda))
                .exp();
            cdf += term;
            if term < 1e-12 {
                break;
            }
        }
        (1.0 - pref * cdf).clamp(0.0, 1.0)
    } else {
        let mut q = 0.0;
        for k in 1..1000 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            q += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
            if term < 1e-12 {
                break;
            }
        }
        q.clamp(0.0, 1.0)
    }
}

/// Kolmogorov–Smirnov test of the sample against Uniform(0, 1):
/// `D_n = max_i max{ i/n − U_(i), U_(i) − (i−1)/n }`, p-value from the
/// asymptotic Kolmogorov distribution at `√n · D_n`.
pub fn ks_uniform_test(sample: &[f64]) -> Result<(f64, f64), InferenceError> {
    if sample.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let i1 = (i + 1) as f64;
        d = d.max(i1 / n - x).max(x - i as f64 / n);
    }
    Ok((d, kolmogorov_q(n.sqrt() * d)))
}

/// Optimal probability cutoff for classifying rows as extreme from the
/// fitted rate alone: scans 0 and every distinct fitted rho, classifies a
/// row as extreme when `rho(c) > cutoff`, and minimizes false positives +
/// false negatives, breaking ties toward the larger cutoff. Returns
/// `(cutoff, misclassification rate)`.
pub fn misclassification(
    rows: &[DesignRow],
    theta: &ModelParams<f64>,
    u: f64,
) -> Result<(f64, f64), InferenceError> {
    if rows.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    let scored: Vec<(f64, bool)> = rows
        .iter()
        .map(|r| Ok((theta.local(u, &r.c_tilde)?.rho, r.exceeds)))
        .collect::<Result<_, LinkError>>()?;
    let mut candidates: Vec<f64> = std::iter::once(0.0)
        .chain(scored.iter().map(|(rho, _)| *rho))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best = (0.0f64, usize::MAX);
    for &cut in &candidates {
        let errors = scored
            .iter()
            .filter(|&&(rho, exceeds)| (rho > cut) != exceeds)
            .count();
        if errors < best.1 || (errors == best.1 && cut > best.0) {
            best = (cut, errors);
        }
    }
    Ok((best.0, best.1 as f64 / rows.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub pit_values: Vec<f64>,
    pub pit_out_of_support: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub misclassification_rate: f64,
    pub optimal_class_threshold: f64,
    pub n_rows: usize,
    pub n_exceedances: usize,
}

/// PIT + KS + misclassification in one pass, at a single plug-in theta.
pub fn fit_diagnostics(
    rows: &[DesignRow],
    theta: &ModelParams<f64>,
    u: f64,
) -> Result<FitDiagnostics, InferenceError> {
    let pit = pit_transform(rows, theta, u)?;
    let (ks, p) = ks_uniform_test(&pit.values)?;
    let (cutoff, rate) = misclassification(rows, theta, u)?;
    Ok(FitDiagnostics {
        n_rows: rows.len(),
        n_exceedances: pit.values.len(),
        pit_values: pit.values,
        pit_out_of_support: pit.out_of_support,
        ks_statistic: ks,
        ks_p_value: p,
        misclassification_rate: rate,
        optimal_class_threshold: cutoff,
    })
}

/// Posterior plug-in coefficients: mean of the indicator-masked draws,
/// falling back to the coordinatewise median when the mean violates the
/// model constraints. Returns the plug-in and whether the fallback fired.
pub fn posterior_plug_in(
    samples: &PosteriorSampleSet,
    rows: &[DesignRow],
    u: f64,
) -> Result<(ModelParams<f64>, bool), InferenceError> {
    if samples.draws.is_empty() {
        return Err(InferenceError::NoValidDraws);
    }
    let flats: Vec<Vec<f64>> = samples
        .draws
        .iter()
        .map(|d| d.effective_theta().to_flat())
        .collect();
    let dim = flats[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|i| flats.iter().map(|f| f[i]).sum::<f64>() / flats.len() as f64)
        .collect();
    let theta = ModelParams::from_flat(samples.kind, samples.m, &mean).expect("shape");
    if log_likelihood(&theta, rows, u).is_finite() {
        return Ok((theta, false));
    }
    let median: Vec<f64> = (0..dim)
        .map(|i| {
            let mut col: Vec<f64> = flats.iter().map(|f| f[i]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            quantile_sorted(&col, 0.5)
        })
        .collect();
    let theta = ModelParams::from_flat(samples.kind, samples.m, &median).expect("shape");
    if log_likelihood(&theta, rows, u).is_finite() {
        Ok((theta, true))
    } else {
        Err(InferenceError::BadPlugIn)
    }
}

// ---------------------------------------------------------------------------
// simulation and return levels
// ---------------------------------------------------------------------------

/// Everything a sequence simulation needs besides the coefficients: the
/// covariate trajectory, which design columns are the target's lags, the
/// transform those columns were standardized with, and the raw
/// below-threshold pool for non-exceedance steps.
#[derive(Debug, Clone)]
pub struct SimulationInput<'a> {
    pub rows: &'a [DesignRow],
    pub lag_cols: Vec<usize>,
    pub standardizer: Option<&'a Standardizer>,
    pub below_pool: &'a [f64],
    pub u: f64,
    /// Feed emitted values back into the target's lag columns. Scenario
    /// runs precompute their lag columns instead and turn this off.
    pub feed_lags: bool,
    /// Simulation length; when longer than the trajectory, the covariate
    /// rows are traversed cyclically. Defaults to one pass.
    pub n_sim: Option<usize>,
}

impl<'a> SimulationInput<'a> {
    pub fn from_design(dm: &'a DesignMatrix, target: Pollutant, lag_count: usize, pool: &'a [f64]) -> Self {
        Self {
            rows: &dm.rows,
            lag_cols: dm.lag_columns(target, lag_count),
            standardizer: dm.standardizer.as_ref(),
            below_pool: pool,
            u: dm.threshold,
            feed_lags: true,
            n_sim: None,
        }
    }

    pub fn sim_len(&self) -> usize {
        self.n_sim.unwrap_or(self.rows.len())
    }
}

/// Raw below-threshold responses, the non-exceedance resampling pool.
pub fn below_threshold_pool(rows: &[DesignRow], u: f64) -> Vec<f64> {
    rows.iter()
        .filter(|r| !r.exceeds)
        .map(|r| r.response.min(u))
        .collect()
}

/// Simulates one concentration sequence along the covariate trajectory.
/// The first `lag_cols.len()` values repeat the first observed response;
/// afterwards each step draws U: when `ρ(c_t) > U` it emits `u` plus a
/// local GPD draw, otherwise a value resampled from the below-threshold
/// pool. Emitted values feed the target's lag covariates when
/// `feed_lags` is on.
pub fn simulate_sequence<R: Rng>(
    input: &SimulationInput,
    theta: &ModelParams<f64>,
    rng: &mut R,
) -> Result<Vec<f64>, InferenceError> {
    if input.rows.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    if input.below_pool.is_empty() {
        return Err(InferenceError::EmptyPool);
    }
    let n = input.sim_len();
    let warm_up = input.lag_cols.len().min(n);
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..warm_up {
        out.push(input.rows[0].response);
    }
    let mut c = Vec::new();
    for t in warm_up..n {
        let row = &input.rows[t % input.rows.len()];
        c.clear();
        c.extend_from_slice(&row.c_tilde);
        if input.feed_lags {
            for (j, &col) in input.lag_cols.iter().enumerate() {
                let raw = out[t - 1 - j];
                c[col] = match input.standardizer {
                    Some(st) => st.apply_value(col, raw),
                    None => raw,
                };
            }
        }
        let lg = theta.local(input.u, &c)?;
        let unif: f64 = rng.gen();
        if lg.rho > unif {
            let gpd = GpdParams::new(lg.sigma, lg.xi)?;
            out.push(input.u + gpd.sample(rng));
        } else {
            out.push(input.below_pool[rng.gen_range(0..input.below_pool.len())]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnLevelKind {
    Marginal,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelEstimate {
    pub p: f64,
    pub level: f64,
    pub credible_interval: (f64, f64),
    pub kind: ReturnLevelKind,
    pub horizon_years: Option<f64>,
    /// Per-replicate (marginal) or per-draw (conditional) estimates
    /// behind the interval, in sorted order.
    #[serde(default)]
    pub replicates: Vec<f64>,
}

/// Exceedance probability for a T-year return level on the 15-minute
/// grid: `p = 1 / (35 136 · T)`.
pub fn horizon_probability(years: f64) -> f64 {
    1.0 / (OBS_PER_YEAR * years)
}

/// The ⌈Np⌉-th largest value of the sample.
pub fn upper_order_statistic(values: &[f64], p: f64) -> Result<f64, InferenceError> {
    if values.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(InferenceError::InvalidProbability(p));
    }
    let n = values.len();
    let k = ((n as f64 * p).ceil() as usize).clamp(1, n);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[k - 1])
}

/// Marginal return level by simulation: each replicate simulates the
/// trajectory under an independent posterior draw and takes the ⌈Np⌉-th
/// largest value; the point estimate pools all replicates' values, the
/// 95% interval comes from the per-replicate estimates.
pub fn marginal_return_level<R: Rng>(
    input: &SimulationInput,
    samples: &PosteriorSampleSet,
    p: f64,
    n_replicates: usize,
    horizon_years: Option<f64>,
    rng: &mut R,
) -> Result<ReturnLevelEstimate, InferenceError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(InferenceError::InvalidProbability(p));
    }
    let n = input.sim_len();
    let required = (20.0 / p).ceil() as usize;
    if n < required {
        return Err(InferenceError::TooFewSimulations { n, p, required });
    }
    if samples.draws.is_empty() {
        return Err(InferenceError::NoValidDraws);
    }
    let reps = n_replicates.max(1);
    let mut per_replicate = Vec::with_capacity(reps);
    let mut pooled = Vec::with_capacity(reps * n);
    for _ in 0..reps {
        // a draw whose parameters overflow the link somewhere along the
        // trajectory is numerically unusable; redraw a bounded number of
        // times rather than fail the whole estimate on one bad draw
        let mut attempts = 0;
        let seq = loop {
            let draw = &samples.draws[rng.gen_range(0..samples.draws.len())];
            match simulate_sequence(input, &draw.effective_theta(), rng) {
                Ok(seq) => break seq,
                Err(e @ (InferenceError::EmptySample | InferenceError::EmptyPool)) => {
                    return Err(e)
                }
                Err(e) => {
                    attempts += 1;
                    if attempts >= 20 {
                        return Err(e);
                    }
                }
            }
        };
        per_replicate.push(upper_order_statistic(&seq, p)?);
        pooled.extend(seq);
    }
    let level = upper_order_statistic(&pooled, p)?;
    per_replicate.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ReturnLevelEstimate {
        p,
        level,
        credible_interval: (
            quantile_sorted(&per_replicate, 0.025),
            quantile_sorted(&per_replicate, 0.975),
        ),
        kind: ReturnLevelKind::Marginal,
        horizon_years,
        replicates: per_replicate,
    })
}

/// Conditional return level at a covariate point from one parameter set:
/// `ℓ_p = u + (σ/ξ)((p/ρ)^{−ξ} − 1)`, with the ξ→0 limit
/// `u + σ ln(ρ/p)`. Requires `p <= ρ(c)`; equality puts the level at u.
pub fn conditional_return_level(
    local: &crate::link::LocalGpd<f64>,
    u: f64,
    p: f64,
) -> Result<f64, InferenceError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(InferenceError::InvalidProbability(p));
    }
    if p > local.rho {
        return Err(InferenceError::LevelBelowThreshold { p, rho: local.rho });
    }
    let lr = (local.rho / p).ln();
    if local.xi.abs() < crate::gpd::XI_TOLERANCE {
        Ok(u + local.sigma * lr)
    } else {
        // (p/ρ)^{−ξ} − 1 = expm1(ξ · ln(ρ/p))
        Ok(u + local.sigma / local.xi * (local.xi * lr).exp_m1())
    }
}

/// Per-draw conditional levels over the posterior, summarized by the
/// median and the 2.5%/97.5% quantiles. Draws where the level is
/// unsupported (p ≥ ρ) are skipped; all draws failing is an error.
pub fn conditional_return_level_posterior(
    samples: &PosteriorSampleSet,
    c_tilde: &[f64],
    u: f64,
    p: f64,
) -> Result<ReturnLevelEstimate, InferenceError> {
    let mut levels = Vec::with_capacity(samples.draws.len());
    for draw in &samples.draws {
        let theta = draw.effective_theta();
        if let Ok(local) = theta.local(u, c_tilde) {
            if let Ok(l) = conditional_return_level(&local, u, p) {
                levels.push(l);
            }
        }
    }
    if levels.is_empty() {
        return Err(InferenceError::NoValidDraws);
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ReturnLevelEstimate {
        p,
        level: quantile_sorted(&levels, 0.5),
        credible_interval: (quantile_sorted(&levels, 0.025), quantile_sorted(&levels, 0.975)),
        kind: ReturnLevelKind::Conditional,
        horizon_years: None,
        replicates: levels,
    })
}

/// Observed vs simulated order statistics with per-rank 2.5%/97.5%
/// simulation envelopes, for QQ plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqData {
    pub observed: Vec<f64>,
    pub simulated_median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn qq_simulation<R: Rng>(
    input: &SimulationInput,
    samples: &PosteriorSampleSet,
    n_replicates: usize,
    rng: &mut R,
) -> Result<QqData, InferenceError> {
    if samples.draws.is_empty() {
        return Err(InferenceError::NoValidDraws);
    }
    // QQ compares like-for-like order statistics, so the simulation
    // length is pinned to the observed trajectory
    let mut input = input.clone();
    input.n_sim = Some(input.rows.len());
    let n = input.rows.len();
    let reps = n_replicates.max(2);
    let mut per_rank: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); n];
    for _ in 0..reps {
        let draw = &samples.draws[rng.gen_range(0..samples.draws.len())];
        let mut seq = simulate_sequence(&input, &draw.effective_theta(), rng)?;
        seq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (rank, v) in seq.into_iter().enumerate() {
            per_rank[rank].push(v);
        }
    }
    let mut observed: Vec<f64> = input.rows.iter().map(|r| r.response).collect();
    observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut med = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for mut vals in per_rank {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        med.push(quantile_sorted(&vals, 0.5));
        lo.push(quantile_sorted(&vals, 0.025));
        hi.push(quantile_sorted(&vals, 0.975));
    }
    Ok(QqData { observed, simulated_median: med, lower: lo, upper: hi })
}

// ---------------------------------------------------------------------------
// model comparison
// ---------------------------------------------------------------------------

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihood {
    pub log_value: f64,
    /// Importance-weight effective sample size of the estimator.
    pub ess: f64,
    pub n_used: usize,
}

/// Stabilized harmonic-mean estimator of the log marginal likelihood over
/// posterior draws: the lowest 10% of log-likelihoods are dropped before
/// `ln m̂ = ln n − logsumexp(−ℓ_i)`.
pub fn harmonic_mean_log_marginal(log_liks: &[f64]) -> Result<MarginalLikelihood, InferenceError> {
    let mut lls: Vec<f64> = log_liks.iter().copied().filter(|x| x.is_finite()).collect();
    if lls.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    lls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = lls.len() / 10;
    let kept = &lls[drop..];
    let n = kept.len() as f64;
    let neg = kept.iter().map(|&x| -x).collect::<Vec<_>>();
    let lse = logsumexp(neg.iter().copied());
    let ess = (2.0 * lse - logsumexp(neg.iter().map(|&x| 2.0 * x))).exp();
    Ok(MarginalLikelihood {
        log_value: n.ln() - lse,
        ess,
        n_used: kept.len(),
    })
}

/// Bridge-sampling estimator with a diagonal Gaussian proposal moment-
/// matched to the posterior draws, iterated to convergence. Requires a
/// fixed model (no selection), since the proposal lives on one
/// coefficient space.
pub fn bridge_log_marginal<R: Rng>(
    samples: &PosteriorSampleSet,
    rows: &[DesignRow],
    u: f64,
    rng: &mut R,
) -> Result<MarginalLikelihood, InferenceError> {
    if samples.config.variable_selection {
        return Err(InferenceError::BridgeWithSelection);
    }
    let n1 = samples.draws.len();
    if n1 < 10 {
        return Err(InferenceError::NoValidDraws);
    }
    let flats: Vec<Vec<f64>> = samples.draws.iter().map(|d| d.theta.to_flat()).collect();
    let dim = flats[0].len();
    let mut mu = vec![0.0; dim];
    for i in 0..dim {
        mu[i] = flats.iter().map(|f| f[i]).sum::<f64>() / n1 as f64;
    }
    // full moment-matched covariance: GPD scale and shape coefficients are
    // strongly correlated a posteriori, and a diagonal proposal there gives
    // a uselessly small overlap. A small ridge keeps the factor stable
    // when draws are few relative to the dimension.
    let mut cov = vec![vec![0.0; dim]; dim];
    for f in &flats {
        for i in 0..dim {
            let di = f[i] - mu[i];
            for j in 0..=i {
                cov[i][j] += di * (f[j] - mu[j]);
            }
        }
    }
    let mut trace = 0.0;
    for i in 0..dim {
        for j in 0..=i {
            cov[i][j] /= n1 as f64;
        }
        trace += cov[i][i];
    }
    let ridge = (1e-8 * trace / dim as f64).max(1e-12);
    for i in 0..dim {
        cov[i][i] += ridge;
    }
    let chol = cholesky(&cov).ok_or(InferenceError::EstimatorUnstable { ess: 0.0 })?;
    let log_det_half: f64 = (0..dim).map(|i| chol[i][i].ln()).sum();
    let log_q2 = |x: &[f64]| -> f64 {
        // z = L^{-1} (x - mu) by forward substitution
        let mut z = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = x[i] - mu[i];
            for j in 0..i {
                acc -= chol[i][j] * z[j];
            }
            z[i] = acc / chol[i][i];
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half - 0.5 * quad
    };
    // log importance ratios on the posterior side (flat prior: the
    // unnormalized posterior density is the likelihood itself)
    let log_l1: Vec<f64> = samples
        .draws
        .iter()
        .zip(&flats)
        .map(|(d, f)| d.log_lik - log_q2(f))
        .collect();
    // proposal side
    let n2 = n1;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let log_l2: Vec<f64> = (0..n2)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| std_normal.sample(rng)).collect();
            let x: Vec<f64> = (0..dim)
                .map(|i| mu[i] + (0..=i).map(|j| chol[i][j] * z[j]).sum::<f64>())
                .collect();
            let theta = ModelParams::from_flat(samples.kind, samples.m, &x).expect("shape");
            log_likelihood(&theta, rows, u) - log_q2(&x)
        })
        .collect();

    let mut shifted: Vec<f64> = log_l1.iter().copied().filter(|x| x.is_finite()).collect();
    shifted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if shifted.is_empty() {
        return Err(InferenceError::EstimatorUnstable { ess: 0.0 });
    }
    let shift = quantile_sorted(&shifted, 0.5);
    let s1 = n1 as f64 / (n1 + n2) as f64;
    let s2 = n2 as f64 / (n1 + n2) as f64;
    let finite_l2: Vec<f64> = log_l2.iter().map(|&x| x - shift).collect();
    let finite_l1: Vec<f64> = log_l1.iter().map(|&x| x - shift).collect();
    let mut r = {
        let lse = logsumexp(finite_l2.iter().copied());
        (lse - (n2 as f64).ln()).exp().max(1e-300)
    };
    for _ in 0..200 {
        let num: f64 = finite_l2
            .iter()
            .map(|&a| {
                if a == f64::NEG_INFINITY {
                    0.0
                } else {
                    1.0 / (s1 + s2 * r * (-a).exp())
                }
            })
            .sum::<f64>()
            / n2 as f64;
        let den: f64 = finite_l1
            .iter()
            .map(|&b| {
                if b == f64::NEG_INFINITY {
                    0.0
                } else {
                    (-b).exp() / (s1 + s2 * r * (-b).exp())
                }
            })
            .sum::<f64>()
            / n1 as f64;
        let next = num / den;
        if !next.is_finite() || next <= 0.0 {
            return Err(InferenceError::EstimatorUnstable { ess: 0.0 });
        }
        let rel = ((next - r) / r).abs();
        r = next;
        if rel < 1e-12 {
            break;
        }
    }
    let lse2 = logsumexp(finite_l2.iter().copied());
    let ess = (2.0 * lse2 - logsumexp(finite_l2.iter().map(|&x| 2.0 * x))).exp();
    Ok(MarginalLikelihood {
        log_value: r.ln() + shift,
        ess,
        n_used: n1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceEstimator {
    HarmonicMean,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactor {
    /// `β₂₁ = 2 ln(m₂ / m₁)`; positive favors the second model.
    pub beta_21: f64,
    pub category: String,
    pub evidence_1: MarginalLikelihood,
    pub evidence_2: MarginalLikelihood,
    pub unstable: bool,
}

/// Kass–Raftery reading of `β = 2 ln(BF)`: 0–2 weak, 2–5 positive,
/// 5–10 strong, above 10 decisive.
pub fn kass_raftery_category(beta_21: f64) -> String {
    let (mag, favored) = if beta_21 >= 0.0 {
        (beta_21, "second model")
    } else {
        (-beta_21, "first model")
    };
    let word = if mag < 2.0 {
        "weak"
    } else if mag < 5.0 {
        "positive"
    } else if mag < 10.0 {
        "strong"
    } else {
        "decisive"
    };
    format!("{word} ({favored})")
}

const ESS_FLOOR: f64 = 10.0;

pub fn bayes_log_factor<R: Rng>(
    samples_1: &PosteriorSampleSet,
    samples_2: &PosteriorSampleSet,
    rows: &[DesignRow],
    u: f64,
    estimator: EvidenceEstimator,
    rng: &mut R,
) -> Result<BayesFactor, InferenceError> {
    let evidence = |s: &PosteriorSampleSet, rng: &mut R| match estimator {
        EvidenceEstimator::HarmonicMean => {
            let lls: Vec<f64> = s.draws.iter().map(|d| d.log_lik).collect();
            harmonic_mean_log_marginal(&lls)
        }
        EvidenceEstimator::Bridge => bridge_log_marginal(s, rows, u, rng),
    };
    let e1 = evidence(samples_1, rng)?;
    let e2 = evidence(samples_2, rng)?;
    let beta = 2.0 * (e2.log_value - e1.log_value);
    Ok(BayesFactor {
        beta_21: beta,
        category: kass_raftery_category(beta),
        unstable: e1.ess < ESS_FLOOR || e2.ess < ESS_FLOOR,
        evidence_1: e1,
        evidence_2: e2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub dic: f64,
    pub mean_deviance: f64,
    pub p_d: f64,
    /// The posterior-mean plug-in violated the model constraints and the
    /// coordinatewise median was used instead.
    pub median_fallback: bool,
}

/// `DIC = D̄ + p_D` with `D(θ) = −2 ℓ(θ)` and `p_D = D̄ − D(θ̄)` at the
/// posterior mean of the effective coefficients.
pub fn dic(
    samples: &PosteriorSampleSet,
    rows: &[DesignRow],
    u: f64,
) -> Result<DicResult, InferenceError> {
    if samples.draws.is_empty() {
        return Err(InferenceError::NoValidDraws);
    }
    let mean_dev = samples
        .draws
        .iter()
        .map(|d| -2.0 * d.log_lik)
        .sum::<f64>()
        / samples.draws.len() as f64;
    let (plug_in, median_fallback) = posterior_plug_in(samples, rows, u)?;
    let d_hat = -2.0 * log_likelihood(&plug_in, rows, u);
    let p_d = mean_dev - d_hat;
    Ok(DicResult {
        dic: mean_dev + p_d,
        mean_deviance: mean_dev,
        p_d,
        median_fallback,
    })
}

// ---------------------------------------------------------------------------
// cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthDiagnostics {
    pub year: i32,
    pub month: u32,
    pub n_train: usize,
    pub n_validate: usize,
    pub diagnostics: Option<FitDiagnostics>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub months: Vec<MonthDiagnostics>,
    /// Diagnostics over all validation rows pooled.
    pub validation: FitDiagnostics,
    /// The same diagnostics on the pooled training rows, for the
    /// overfitting comparison.
    pub training: FitDiagnostics,
    pub plug_in_median_fallback: bool,
}

/// Per calendar month, the first 75% of rows train and the last 25%
/// validate; one model is fitted on the pooled training rows and
/// evaluated per month and overall. Months whose validation slice has
/// fewer than `min_exceedances` exceedances are skipped with a reason.
pub fn cross_validate(
    rows: &[DesignRow],
    u: f64,
    config: &crate::sampler::ChainConfig,
    min_exceedances: usize,
) -> Result<CrossValidation, InferenceError> {
    use chrono::Datelike;
    if rows.is_empty() {
        return Err(InferenceError::EmptySample);
    }
    // group in time order by calendar month
    let mut groups: Vec<((i32, u32), Vec<&DesignRow>)> = Vec::new();
    for row in rows {
        let key = (row.timestamp.year(), row.timestamp.month());
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(row),
            _ => groups.push((key, vec![row])),
        }
    }

    let mut train: Vec<DesignRow> = Vec::new();
    let mut splits: Vec<((i32, u32), Vec<DesignRow>, usize)> = Vec::new();
    for ((y, mo), group) in groups {
        let n_train = (group.len() as f64 * 0.75).floor() as usize;
        train.extend(group[..n_train].iter().map(|r| (*r).clone()));
        let validate: Vec<DesignRow> = group[n_train..].iter().map(|r| (*r).clone()).collect();
        splits.push(((y, mo), validate, n_train));
    }

    let samples = crate::sampler::run_chain(config, &train, u)?;
    let (plug_in, fallback) = posterior_plug_in(&samples, &train, u)?;

    let mut months = Vec::new();
    let mut pooled_validation: Vec<DesignRow> = Vec::new();
    for ((year, month), validate, n_train) in splits {
        let n_exc = validate.iter().filter(|r| r.exceeds).count();
        let entry = if validate.is_empty() {
            MonthDiagnostics {
                year,
                month,
                n_train,
                n_validate: 0,
                diagnostics: None,
                skipped: Some("no validation rows".to_string()),
            }
        } else if n_exc < min_exceedances {
            MonthDiagnostics {
                year,
                month,
                n_train,
                n_validate: validate.len(),
                diagnostics: None,
                skipped: Some(format!(
                    "only {n_exc} exceedances in validation (need {min_exceedances})"
                )),
            }
        } else {
            let diag = fit_diagnostics(&validate, &plug_in, u)?;
            pooled_validation.extend(validate.iter().cloned());
            MonthDiagnostics {
                year,
                month,
                n_train,
                n_validate: validate.len(),
                diagnostics: Some(diag),
                skipped: None,
            }
        };
        months.push(entry);
    }
    if pooled_validation.is_empty() {
        return Err(InferenceError::NoExceedances);
    }
    let validation = fit_diagnostics(&pooled_validation, &plug_in, u)?;
    let training = fit_diagnostics(&train, &plug_in, u)?;
    Ok(CrossValidation {
        months,
        validation,
        training,
        plug_in_median_fallback: fallback,
    })
}

// ---------------------------------------------------------------------------
// scenario simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Fraction by which both flow covariates are reduced.
    pub reduction: f64,
    /// Donors for lag resampling must have observed total flow within
    /// `(1 − reduction ± this)` times the flow at t.
    pub flow_window_halfwidth: f64,
    /// Disable to keep the observed lag values (identity check).
    pub resample_lags: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            reduction: 0.25,
            flow_window_halfwidth: 0.05,
            resample_lags: true,
        }
    }
}

/// Builds the reduced-flow covariate trajectory: flows scaled by
/// `1 − reduction` (regimes recomputed from the scaled flows), and lagged
/// concentrations resampled from below-threshold donor records in the
/// same daylight (7am–8pm) or night window whose observed total flow lies
/// in the reduction window around the flow at t. An empty donor pool
/// keeps the observed lags. Returns rows on the fitted (standardized)
/// covariate scale.
pub fn scenario_rows<R: Rng>(
    records: &[ObservationRecord],
    target: Pollutant,
    u: f64,
    spec: &FeatureSpec,
    standardizer: &Standardizer,
    scenario: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<DesignRow>, InferenceError> {
    if !(0.0..1.0).contains(&scenario.reduction) {
        return Err(InferenceError::InvalidReduction(scenario.reduction));
    }
    let keep = 1.0 - scenario.reduction;
    let scaled: Vec<ObservationRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.tf_ldv = r.tf_ldv.map(|x| x * keep);
            r.tf_hgv = r.tf_hgv.map(|x| x * keep);
            r
        })
        .collect();
    let mut dm = build_design_matrix(&scaled, target, u, spec)?;

    if scenario.resample_lags {
        // donor records: below-threshold target with all three pollutants
        // and total flow observed
        let donors: Vec<(&ObservationRecord, f64)> = records
            .iter()
            .filter(|r| {
                r.pollutant(target).map_or(false, |v| v <= u)
                    && Pollutant::ALL.iter().all(|&p| r.pollutant(p).is_some())
            })
            .filter_map(|r| match (r.tf_ldv, r.tf_hgv) {
                (Some(a), Some(b)) => Some((r, a + b)),
                _ => None,
            })
            .collect();
        let flow_at: std::collections::HashMap<chrono::NaiveDateTime, f64> = records
            .iter()
            .filter_map(|r| match (r.tf_ldv, r.tf_hgv) {
                (Some(a), Some(b)) => Some((r.timestamp, a + b)),
                _ => None,
            })
            .collect();
        let lag_cols: Vec<Vec<usize>> = Pollutant::ALL
            .iter()
            .map(|&p| dm.lag_columns(p, spec.lag_count))
            .collect();
        let lo_f = keep - scenario.flow_window_halfwidth;
        let hi_f = keep + scenario.flow_window_halfwidth;
        for row in &mut dm.rows {
            let flow = match flow_at.get(&row.timestamp) {
                Some(&f) => f,
                None => continue,
            };
            let daylight = is_daylight(row.timestamp);
            let pool: Vec<&ObservationRecord> = donors
                .iter()
                .filter(|(r, f)| {
                    is_daylight(r.timestamp) == daylight && *f > lo_f * flow && *f < hi_f * flow
                })
                .map(|(r, _)| *r)
                .collect();
            if pool.is_empty() {
                continue; // keep the observed lag values at t
            }
            for (p_idx, &p) in Pollutant::ALL.iter().enumerate() {
                for &col in &lag_cols[p_idx] {
                    let donor = pool[rng.gen_range(0..pool.len())];
                    row.c_tilde[col] = donor.pollutant(p).expect("donor filtered for presence");
                }
            }
        }
    }

    // onto the fitted covariate scale
    for row in &mut dm.rows {
        standardizer.apply_vec(&mut row.c_tilde);
    }
    Ok(dm.rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{LocalGpd, ModelIParams};
    use crate::sampler::{ChainConfig, PosteriorDraw};
    use approx::assert_relative_eq;
    use chrono::NaiveDateTime;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts() -> NaiveDateTime {
        "2008-06-01T12:00:00".parse().unwrap()
    }

    fn row(response: f64, c_tilde: Vec<f64>, u: f64) -> DesignRow {
        let exceeds = response > u;
        DesignRow {
            timestamp: ts(),
            response,
            c_tilde,
            exceeds,
            exceedance: if exceeds { Some(response - u) } else { None },
        }
    }

    /// Coefficient-free helper: Model I with given intercepts only.
    fn theta_with(s0: f64, k0: f64, r0: f64, m: usize) -> ModelParams<f64> {
        let mut t = ModelIParams::zeros(m);
        t.s_u[0] = s0;
        t.kappa[0] = k0;
        t.r_u[0] = r0;
        ModelParams::I(t)
    }

    fn single_draw_samples(theta: ModelParams<f64>, m: usize, u: f64, ll: f64) -> PosteriorSampleSet {
        PosteriorSampleSet {
            kind: crate::link::ModelKind::ModelI,
            m,
            threshold: u,
            draws: vec![PosteriorDraw {
                iteration: 1,
                theta,
                indicators: vec![true; m],
                log_lik: ll,
            }],
            acceptance_rate: 0.5,
            config: ChainConfig::default(),
            stuck: false,
            tuning_log: vec![],
            final_scales: vec![],
        }
    }

    #[test]
    fn pit_boundary_values() {
        let u = 10.0;
        let theta = theta_with(0.0, 0.0, 0.0, 0); // sigma = 1, xi = 0
        // exceedance just above the threshold: survival at 0+ is 1
        // (u + 1e-300 would round back to u, so nudge by one ulp-ish step)
        let rows = vec![row(u * (1.0 + 1e-15), vec![1.0], u)];
        let pit = pit_transform(&rows, &theta, u).unwrap();
        assert_relative_eq!(pit.values[0], 1.0, epsilon = 1e-12);
        // exceedance at the local median
        let med = crate::gpd::GpdParams::new(1.0, 0.0).unwrap().median();
        let rows = vec![row(u + med, vec![1.0], u)];
        let pit = pit_transform(&rows, &theta, u).unwrap();
        assert_relative_eq!(pit.values[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pit_flags_out_of_support() {
        let u = 10.0;
        // xi = -0.5, sigma = 1 → support width 2
        let theta = theta_with(0.0, -0.5, 0.0, 0);
        let rows = vec![row(u + 1.0, vec![1.0], u), row(u + 3.0, vec![1.0], u)];
        let pit = pit_transform(&rows, &theta, u).unwrap();
        assert_eq!(pit.out_of_support, 1);
        assert_eq!(pit.values[1], 0.0);
    }

    #[test]
    fn ks_examples() {
        let n = 999usize;
        let grid: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let (d, p) = ks_uniform_test(&grid).unwrap();
        assert_relative_eq!(d, 1.0 / (n + 1) as f64, epsilon = 1e-12);
        assert!(p > 0.999, "p = {p}");

        let degenerate = vec![0.5; 100];
        let (d, _) = ks_uniform_test(&degenerate).unwrap();
        assert_relative_eq!(d, 0.5, epsilon = 1e-12);

        // sqrt(n) D = 1.36 is the classic 5% point
        assert!((kolmogorov_q(1.36) - 0.0495).abs() < 0.001);
        // the two series must agree where the branch switches
        assert!((kolmogorov_q(1.18 - 1e-12) - kolmogorov_q(1.18 + 1e-12)).abs() < 1e-9);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn misclassification_cases() {
        let u = 10.0;
        // separable: covariate 1 sets rho near 0 or 1 and matches the label
        let mut t = ModelIParams::zeros(1);
        t.r_u = vec![0.0, 10.0];
        let theta = ModelParams::I(t);
        let rows = vec![
            row(12.0, vec![1.0, 1.0], u),
            row(11.0, vec![1.0, 1.0], u),
            row(3.0, vec![1.0, -1.0], u),
            row(4.0, vec![1.0, -1.0], u),
        ];
        let (_, rate) = misclassification(&rows, &theta, u).unwrap();
        assert_eq!(rate, 0.0);

        // constant rho: forced rate = min(shares)
        let theta = theta_with(0.0, 0.0, 0.0, 0);
        let rows: Vec<DesignRow> = (0..10)
            .map(|i| row(if i < 3 { 12.0 } else { 4.0 }, vec![1.0], u))
            .collect();
        let (_, rate) = misclassification(&rows, &theta, u).unwrap();
        assert_relative_eq!(rate, 0.3);
    }

    #[test]
    fn misclassification_matches_brute_force() {
        let u = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = ModelIParams::zeros(1);
        t.r_u = vec![-0.5, 2.0];
        let theta = ModelParams::I(t);
        let rows: Vec<DesignRow> = (0..200)
            .map(|_| {
                let c = rng.gen::<f64>() * 2.0 - 1.0;
                let resp = if rng.gen::<f64>() < 0.5 { 12.0 } else { 4.0 };
                row(resp, vec![1.0, c], u)
            })
            .collect();
        let (cut, rate) = misclassification(&rows, &theta, u).unwrap();
        // brute force over a fine grid of cutoffs
        let mut best = (0.0f64, usize::MAX);
        for i in 0..=10_000 {
            let c = i as f64 / 10_000.0;
            let errors = rows
                .iter()
                .filter(|r| {
                    let rho = theta.local(u, &r.c_tilde).unwrap().rho;
                    (rho > c) != r.exceeds
                })
                .count();
            if errors < best.1 {
                best = (c, errors);
            }
        }
        assert_eq!(rate, best.1 as f64 / 200.0, "cutoff {cut} vs grid {}", best.0);
    }

    #[test]
    fn simulation_branches() {
        let u = 10.0;
        let pool = vec![1.0, 2.0, 3.0];
        let rows: Vec<DesignRow> = (0..200).map(|_| row(5.0, vec![1.0], u)).collect();
        let input = SimulationInput {
            rows: &rows,
            lag_cols: vec![],
            standardizer: None,
            below_pool: &pool,
            u,
            feed_lags: false,
            n_sim: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // rho ~ 1
        let seq = simulate_sequence(&input, &theta_with(0.0, 0.0, 40.0, 0), &mut rng).unwrap();
        assert!(seq.iter().all(|&x| x > u));
        // rho ~ 0
        let seq = simulate_sequence(&input, &theta_with(0.0, 0.0, -40.0, 0), &mut rng).unwrap();
        assert!(seq.iter().all(|&x| pool.contains(&x)));
        // empty pool is an error
        let empty = SimulationInput { below_pool: &[], ..input.clone() };
        assert!(matches!(
            simulate_sequence(&empty, &theta_with(0.0, 0.0, 0.0, 0), &mut rng),
            Err(InferenceError::EmptyPool)
        ));
    }

    #[test]
    fn simulation_exceedance_frequency() {
        let u = 10.0;
        let n = 100_000;
        let rho = 0.2;
        let r0 = (rho / (1.0f64 - rho)).ln();
        let pool = vec![5.0];
        let rows: Vec<DesignRow> = (0..n).map(|_| row(5.0, vec![1.0], u)).collect();
        let input = SimulationInput {
            rows: &rows,
            lag_cols: vec![],
            standardizer: None,
            below_pool: &pool,
            u,
            feed_lags: false,
            n_sim: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = simulate_sequence(&input, &theta_with(0.0, 0.0, r0, 0), &mut rng).unwrap();
        let freq = seq.iter().filter(|&&x| x > u).count() as f64 / n as f64;
        let se = (rho * (1.0 - rho) / n as f64).sqrt();
        assert!((freq - rho).abs() < 3.0 * se, "freq = {freq}");
    }

    #[test]
    fn simulation_warm_up_and_lag_feedback() {
        let u = 10.0;
        // design with one covariate used as lag-1 of the target
        let rows: Vec<DesignRow> = (0..6).map(|i| row(2.0 + i as f64, vec![1.0, 0.0], u)).collect();
        let lag_cols = vec![1usize];
        let pool = vec![7.0];
        let input = SimulationInput {
            rows: &rows,
            lag_cols: lag_cols.clone(),
            standardizer: None,
            below_pool: &pool,
            u,
            feed_lags: true,
            n_sim: None,
        };
        // rho depends strongly on the lag covariate: rho ≈ 1 iff lag > 6
        let mut t = ModelIParams::zeros(1);
        t.r_u = vec![-240.0, 40.0];
        let theta = ModelParams::I(t);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = simulate_sequence(&input, &theta, &mut rng).unwrap();
        // warm-up emits the first observed response
        assert_eq!(seq[0], rows[0].response);
        // first live step sees lag = 2.0 → rho ≈ 0 → pool value 7.0;
        // every later step sees lag = 7.0 → rho ≈ 1 → exceedance
        assert_eq!(seq[1], 7.0);
        assert!(seq[2..].iter().all(|&x| x > u));
    }

    #[test]
    fn order_statistic_and_horizon() {
        let vals: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(upper_order_statistic(&vals, 0.2).unwrap(), 9.0); // 2nd largest
        assert_relative_eq!(horizon_probability(1.0), 2.846e-5, max_relative = 1e-3);
    }

    #[test]
    fn marginal_return_level_stationary_oracle() {
        // constant rho = 0.1, sigma = 1, xi = 0, u = 50:
        // closed form u + ln(rho/p) = 50 + ln 100
        let u = 50.0;
        let p = 1e-3;
        let n = 200_000;
        let rows: Vec<DesignRow> = (0..n).map(|_| row(25.0, vec![1.0], u)).collect();
        let pool = vec![25.0];
        let input = SimulationInput {
            rows: &rows,
            lag_cols: vec![],
            standardizer: None,
            below_pool: &pool,
            u,
            feed_lags: false,
            n_sim: None,
        };
        let r0 = (0.1f64 / 0.9).ln();
        let samples = single_draw_samples(theta_with(0.0, 0.0, r0, 0), 0, u, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let est = marginal_return_level(&input, &samples, p, 5, None, &mut rng).unwrap();
        let truth = 50.0 + 100.0f64.ln();
        assert!((est.level - truth).abs() / truth < 0.05, "level = {}", est.level);
        assert!(est.credible_interval.0 <= est.level && est.level <= est.credible_interval.1);

        // too small a trajectory for the target p
        let short_rows: Vec<DesignRow> = rows[..100].to_vec();
        let short = SimulationInput { rows: &short_rows, ..input.clone() };
        assert!(matches!(
            marginal_return_level(&short, &samples, p, 2, None, &mut rng),
            Err(InferenceError::TooFewSimulations { .. })
        ));
    }

    #[test]
    fn conditional_return_level_examples() {
        // boundary: p = rho → level = u
        let lg = LocalGpd { sigma: 1.0, xi: 0.0, rho: 0.1 };
        assert_relative_eq!(conditional_return_level(&lg, 50.0, 0.1).unwrap(), 50.0);
        // limit formula
        assert_relative_eq!(
            conditional_return_level(&lg, 50.0, 0.01).unwrap(),
            50.0 + 10.0f64.ln(),
            epsilon = 1e-12
        );
        // xi = 0.5 direct substitution
        let lg = LocalGpd { sigma: 1.0, xi: 0.5, rho: 0.1 };
        assert_relative_eq!(
            conditional_return_level(&lg, 0.0, 0.01).unwrap(),
            2.0 * (10.0f64.sqrt() - 1.0),
            epsilon = 1e-12
        );
        // p above rho is unsupported
        assert!(matches!(
            conditional_return_level(&lg, 0.0, 0.2),
            Err(InferenceError::LevelBelowThreshold { .. })
        ));
    }

    #[test]
    fn return_levels_monotone_in_p() {
        let lg = LocalGpd { sigma: 2.0, xi: 0.2, rho: 0.15 };
        let mut last = f64::INFINITY;
        for p in [1e-5, 1e-4, 1e-3, 1e-2, 0.1] {
            let l = conditional_return_level(&lg, 30.0, p).unwrap();
            assert!(l <= last, "level increased at p = {p}");
            last = l;
        }
    }

    proptest! {
        /// Inversion round trip: propagating rho to the threshold u + (ℓ_p − u)
        /// must give back p.
        #[test]
        fn conditional_level_round_trip(
            sigma in 0.1f64..5.0,
            xi in -0.4f64..1.0,
            rho_logit in -3.0f64..1.0,
            p_frac in 0.01f64..0.99,
        ) {
            let rho = 1.0 / (1.0 + (-rho_logit as f64).exp());
            let p = p_frac * rho;
            let lg = LocalGpd { sigma, xi, rho };
            let u = 20.0;
            let level = conditional_return_level(&lg, u, p).unwrap();
            let shifted = crate::link::shift_threshold(&lg, level - u).unwrap();
            prop_assert!((shifted.rho - p).abs() < 1e-10, "rho' = {}, p = {p}", shifted.rho);
        }
    }

    #[test]
    fn harmonic_mean_identities() {
        // constant log-likelihoods: the estimator returns them exactly
        let a = harmonic_mean_log_marginal(&vec![-5.0; 100]).unwrap();
        assert_relative_eq!(a.log_value, -5.0, epsilon = 1e-12);
        let b = harmonic_mean_log_marginal(&vec![-4.0; 100]).unwrap();
        let beta = 2.0 * (b.log_value - a.log_value);
        assert_relative_eq!(beta, 2.0, epsilon = 1e-10);
        assert_relative_eq!(a.ess, 90.0, epsilon = 1e-6); // 10% trimmed
        // identical inputs → beta = 0
        let c = harmonic_mean_log_marginal(&vec![-5.0; 100]).unwrap();
        assert_eq!(a.log_value, c.log_value);
    }

    #[test]
    fn kass_raftery_labels() {
        assert!(kass_raftery_category(3.0).starts_with("positive"));
        assert!(kass_raftery_category(7.0).starts_with("strong"));
        assert!(kass_raftery_category(-7.0).contains("first model"));
        assert!(kass_raftery_category(0.5).starts_with("weak"));
        assert!(kass_raftery_category(15.0).starts_with("decisive"));
    }

    #[test]
    fn dic_degenerate_posterior() {
        let u = 10.0;
        let rows = vec![row(5.0, vec![1.0], u), row(12.0, vec![1.0], u)];
        let theta = theta_with(0.1, 0.0, -0.3, 0);
        let ll = crate::link::log_likelihood(&theta, &rows, u);
        let samples = single_draw_samples(theta, 0, u, ll);
        let d = dic(&samples, &rows, u).unwrap();
        assert_relative_eq!(d.p_d, 0.0, epsilon = 1e-10);
        assert_relative_eq!(d.dic, -2.0 * ll, epsilon = 1e-10);
        assert!(!d.median_fallback);
    }

    #[test]
    fn bridge_matches_conjugate_oracle() {
        // Gaussian data with a flat prior on the mean: the marginal
        // likelihood has a closed form. The MH draws come from the exact
        // posterior via the generic kernel; a likelihood-only wrapper is
        // enough to exercise the bridge iteration against the oracle.
        // Instead of wiring a fake model, check internal consistency:
        // bridge and harmonic mean must agree within tolerance on a
        // well-behaved single-parameter fit.
        let u = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<DesignRow> = (0..400)
            .map(|_| {
                let resp = if rng.gen::<f64>() < 0.2 {
                    u + rng.gen::<f64>()
                } else {
                    u * rng.gen::<f64>()
                };
                row(resp, vec![1.0], u)
            })
            .collect();
        let config = ChainConfig {
            n_iterations: 6000,
            burn_in: 2000,
            thin: 10,
            seed: 99,
            ..ChainConfig::default()
        };
        let samples = crate::sampler::run_chain(&config, &rows, u).unwrap();
        let hm = {
            let lls: Vec<f64> = samples.draws.iter().map(|d| d.log_lik).collect();
            harmonic_mean_log_marginal(&lls).unwrap()
        };
        let br = bridge_log_marginal(&samples, &rows, u, &mut rng).unwrap();
        assert!(br.ess > ESS_FLOOR, "bridge ess = {}", br.ess);
        // the harmonic mean is biased toward the likelihood maximum, so
        // only loose agreement is expected; it must still sit on the same
        // scale and on the expected side (harmonic above bridge)
        assert!(hm.log_value >= br.log_value - 1.0, "harmonic should not undershoot");
        assert!(
            (br.log_value - hm.log_value).abs() < 15.0,
            "bridge {} vs harmonic {}",
            br.log_value,
            hm.log_value
        );

        // selection on → bridge refuses
        let mut sel = samples.clone();
        sel.config.variable_selection = true;
        assert!(matches!(
            bridge_log_marginal(&sel, &rows, u, &mut rng),
            Err(InferenceError::BridgeWithSelection)
        ));
    }

    #[test]
    fn cross_validate_splits_and_aggregates() {
        use chrono::Duration;
        let u = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t0: NaiveDateTime = "2008-01-01T00:00:00".parse().unwrap();
        // two months of 15-minute rows; ~20% exceedances
        let rows: Vec<DesignRow> = (0..(5800))
            .map(|i| {
                let t = t0 + Duration::minutes(15 * i as i64);
                let resp = if rng.gen::<f64>() < 0.2 {
                    u + rng.gen::<f64>()
                } else {
                    u * rng.gen::<f64>()
                };
                let mut r = row(resp, vec![1.0, rng.gen::<f64>() - 0.5], u);
                r.timestamp = t;
                r
            })
            .collect();
        let config = ChainConfig {
            n_iterations: 3000,
            burn_in: 1000,
            thin: 10,
            seed: 7,
            ..ChainConfig::default()
        };
        let cv = cross_validate(&rows, u, &config, 5).unwrap();
        assert!(cv.months.len() >= 2);
        for m in &cv.months {
            if m.skipped.is_none() {
                let total = m.n_train + m.n_validate;
                assert_eq!(m.n_train, (total as f64 * 0.75).floor() as usize);
            }
        }
        // same generating process: validation within 5 points of training
        assert!(
            (cv.validation.misclassification_rate - cv.training.misclassification_rate).abs()
                < 0.05
        );
    }

    #[test]
    fn cross_validate_skips_sparse_months() {
        use chrono::Duration;
        let u = 10.0;
        let t0: NaiveDateTime = "2008-01-01T00:00:00".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut rows: Vec<DesignRow> = (0..2000)
            .map(|i| {
                let resp = if rng.gen::<f64>() < 0.2 {
                    u + rng.gen::<f64>()
                } else {
                    u * rng.gen::<f64>()
                };
                let mut r = row(resp, vec![1.0], u);
                r.timestamp = t0 + Duration::minutes(15 * i as i64);
                r
            })
            .collect();
        // append a sparse month with no exceedances
        let t1: NaiveDateTime = "2008-03-01T00:00:00".parse().unwrap();
        for i in 0..40 {
            let mut r = row(1.0, vec![1.0], u);
            r.timestamp = t1 + Duration::minutes(15 * i as i64);
            rows.push(r);
        }
        let config = ChainConfig {
            n_iterations: 2000,
            burn_in: 500,
            thin: 10,
            seed: 3,
            ..ChainConfig::default()
        };
        let cv = cross_validate(&rows, u, &config, 5).unwrap();
        let sparse = cv.months.iter().find(|m| m.month == 3).unwrap();
        assert!(sparse.skipped.is_some());
    }

    fn scenario_records(n: usize) -> Vec<ObservationRecord> {
        use chrono::Duration;
        let t0: NaiveDateTime = "2008-01-01T00:00:00".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        (0..n)
            .map(|i| {
                let conc = 5.0 + 10.0 * rng.gen::<f64>();
                ObservationRecord {
                    timestamp: t0 + Duration::minutes(15 * i as i64),
                    no: Some(conc),
                    no2: Some(conc * 0.8),
                    o3: Some(conc * 0.5),
                    tf_ldv: Some(100.0 + 200.0 * rng.gen::<f64>()),
                    tf_hgv: Some(20.0 + 40.0 * rng.gen::<f64>()),
                    ts_ldv: Some(35.0 + 20.0 * rng.gen::<f64>()),
                    ts_hgv: Some(30.0 + 20.0 * rng.gen::<f64>()),
                    rh: Some(50.0 + 40.0 * rng.gen::<f64>()),
                    sr: Some(200.0 * rng.gen::<f64>()),
                    ws: Some(1.0 + 5.0 * rng.gen::<f64>()),
                    wd: Some(360.0 * rng.gen::<f64>()),
                    temp: Some(5.0 + 15.0 * rng.gen::<f64>()),
                }
            })
            .collect()
    }

    #[test]
    fn scenario_identity_and_exact_scaling() {
        let records = scenario_records(300);
        let spec = FeatureSpec::default();
        let u = 12.0;
        let mut baseline = build_design_matrix(&records, Pollutant::No, u, &spec).unwrap();
        baseline.standardize();
        let st = baseline.standardizer.clone().unwrap();

        // identity: zero reduction, lag resampling off
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = ScenarioConfig { reduction: 0.0, resample_lags: false, ..Default::default() };
        let rows = scenario_rows(&records, Pollutant::No, u, &spec, &st, &cfg, &mut rng).unwrap();
        assert_eq!(rows, baseline.rows);

        // flows scaled by exactly 0.75 (check on the raw design scale)
        let cfg = ScenarioConfig { reduction: 0.25, resample_lags: false, ..Default::default() };
        let raw_scenario = {
            let keep = 0.75;
            let scaled: Vec<ObservationRecord> = records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.tf_ldv = r.tf_ldv.map(|x| x * keep);
                    r.tf_hgv = r.tf_hgv.map(|x| x * keep);
                    r
                })
                .collect();
            build_design_matrix(&scaled, Pollutant::No, u, &spec).unwrap()
        };
        let raw_baseline = build_design_matrix(&records, Pollutant::No, u, &spec).unwrap();
        let tf_col = raw_baseline.column("tf_ldv").unwrap();
        for (s, b) in raw_scenario.rows.iter().zip(&raw_baseline.rows) {
            assert_relative_eq!(s.c_tilde[tf_col], 0.75 * b.c_tilde[tf_col], epsilon = 1e-12);
        }
        // and the library path agrees with the hand-built scaling
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let rows = scenario_rows(&records, Pollutant::No, u, &spec, &st, &cfg, &mut rng).unwrap();
        for (lib, hand) in rows.iter().zip(&raw_scenario.rows) {
            let mut h = hand.c_tilde.clone();
            st.apply_vec(&mut h);
            for (a, b) in lib.c_tilde.iter().zip(&h) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }

        assert!(matches!(
            scenario_rows(
                &records,
                Pollutant::No,
                u,
                &spec,
                &st,
                &ScenarioConfig { reduction: 1.5, ..Default::default() },
                &mut rng
            ),
            Err(InferenceError::InvalidReduction(_))
        ));
    }

    #[test]
    fn scenario_reduces_level_when_flow_drives_rate() {
        // one-covariate stand-in: covariate 1 is "flow", positive in r_u
        let u = 10.0;
        let n = 30_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let flows: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut t = ModelIParams::zeros(1);
        t.r_u = vec![-2.0, 2.0];
        let theta = ModelParams::I(t);
        let baseline_rows: Vec<DesignRow> = flows.iter().map(|&f| row(5.0, vec![1.0, f], u)).collect();
        let scenario_rows_: Vec<DesignRow> =
            flows.iter().map(|&f| row(5.0, vec![1.0, 0.75 * f], u)).collect();
        let pool = vec![5.0];
        let samples = single_draw_samples(theta, 1, u, -1.0);
        let p = 1e-3;
        let level = |rows: &[DesignRow], seed: u64| {
            let input = SimulationInput {
                rows,
                lag_cols: vec![],
                standardizer: None,
                below_pool: &pool,
                u,
                feed_lags: false,
                n_sim: None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            marginal_return_level(&input, &samples, p, 4, None, &mut rng)
                .unwrap()
                .level
        };
        assert!(
            level(&scenario_rows_, 41) < level(&baseline_rows, 41),
            "reduced flow should lower the return level"
        );
    }

    #[test]
    fn pit_closed_loop_uniformity() {
        // data generated from the fitted link passes KS most of the time
        let u = 10.0;
        let mut pass = 0;
        let reps = 20;
        for seed in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut t = ModelIParams::zeros(1);
            t.s_u = vec![0.2, 0.3];
            t.kappa = vec![0.1, 0.0];
            t.r_u = vec![0.0, 0.0];
            let theta = ModelParams::I(t);
            let rows: Vec<DesignRow> = (0..500)
                .map(|_| {
                    let c = vec![1.0, rng.gen::<f64>() - 0.5];
                    let lg = theta.local(u, &c).unwrap();
                    let g = crate::gpd::GpdParams::new(lg.sigma, lg.xi).unwrap();
                    row(u + g.sample(&mut rng), c, u)
                })
                .collect();
            let pit = pit_transform(&rows, &theta, u).unwrap();
            let (_, p) = ks_uniform_test(&pit.values).unwrap();
            if p > 0.01 {
                pass += 1;
            }
        }
        assert!(pass as f64 >= 0.95 * reps as f64, "passed {pass}/{reps}");
    }
}
