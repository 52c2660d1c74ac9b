//! Random-walk Metropolis–Hastings over the link coefficients, with flat
//! priors, proposal-scale tuning to a 30–70% acceptance band during
//! burn-in, and indicator-based variable selection.
//!
//! Selection keeps an inclusion indicator per covariate; excluded
//! coefficients are zeroed (in the likelihood and in the stored state)
//! and frozen in proposals, so re-inclusion restarts likelihood-neutral
//! from zero rather than from a stale value that would block re-entry.
//! Two indicator schemes are available: unconditional i.i.d.
//! Bernoulli(0.5) resampling each step, and a corrected variant that
//! proposes single-indicator flips accepted by likelihood ratio.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DesignRow;
use crate::link::{log_likelihood, ModelIIParams, ModelIParams, ModelKind, ModelParams};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid chain config: {0}")]
    InvalidConfig(String),
    #[error("empty data")]
    EmptyData,
    #[error("initial state has non-finite log-likelihood")]
    BadInit,
    #[error("parameter guard tripped at iteration {iteration}: |theta[{coordinate}]| = {value:.3e} exceeds {guard:.3e}")]
    GuardTripped {
        iteration: usize,
        coordinate: usize,
        value: f64,
        guard: f64,
    },
    #[error("variable selection was not enabled for this run")]
    SelectionDisabled,
}

/// How inclusion indicators evolve when selection is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionScheme {
    /// Unconditional i.i.d. Bernoulli(0.5) resampling each step.
    Iid,
    /// Single-indicator flip proposals accepted by likelihood ratio.
    Flip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial per-coordinate proposal standard deviation.
    pub proposal_scale: f64,
    /// Explicit proposal-scale diagonal; overrides `proposal_scale`.
    pub proposal_scales: Option<Vec<f64>>,
    pub seed: u64,
    pub variable_selection: bool,
    pub selection_scheme: SelectionScheme,
    pub model_kind: ModelKind,
    /// Reshape per-coordinate scales from windowed draw spread during
    /// burn-in (in addition to the acceptance-band factor).
    pub adapt_component_scales: bool,
    /// Allow covariate-dependent β in Model II. Off by default: β is then
    /// an intercept-only (constant) coefficient, which keeps the shape link
    /// ξ = β·exp(γ) covariate-informative about γ itself. With β free per
    /// covariate, each (a_j, b_j, g_j) triple has a near-flat direction
    /// (an exponential in γ mimicking a linear α/β trend over a bounded
    /// covariate range) that the chain can fall into.
    pub model2_full_beta: bool,
    /// Any |coefficient| beyond this aborts the run with a diagnostic.
    pub parameter_guard: f64,
    pub tuning_window: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iterations: 200_000,
            burn_in: 50_000,
            thin: 100,
            proposal_scale: 0.05,
            proposal_scales: None,
            seed: 0,
            variable_selection: false,
            selection_scheme: SelectionScheme::Iid,
            model_kind: ModelKind::ModelI,
            adapt_component_scales: true,
            model2_full_beta: false,
            parameter_guard: 1e6,
            tuning_window: 500,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_iterations == 0 || self.burn_in >= self.n_iterations {
            return Err(SamplerError::InvalidConfig(
                "require 0 <= burn_in < n_iterations".into(),
            ));
        }
        if self.thin == 0 {
            return Err(SamplerError::InvalidConfig("thin must be >= 1".into()));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(SamplerError::InvalidConfig(
                "proposal_scale must be positive".into(),
            ));
        }
        if let Some(s) = &self.proposal_scales {
            if s.iter().any(|&x| !(x > 0.0)) {
                return Err(SamplerError::InvalidConfig(
                    "proposal_scales must all be positive".into(),
                ));
            }
        }
        if !(self.parameter_guard > 0.0) {
            return Err(SamplerError::InvalidConfig(
                "parameter_guard must be positive".into(),
            ));
        }
        if self.tuning_window == 0 {
            return Err(SamplerError::InvalidConfig(
                "tuning_window must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn initial_scales(&self, dim: usize) -> Result<Vec<f64>, SamplerError> {
        match &self.proposal_scales {
            None => Ok(vec![self.proposal_scale; dim]),
            Some(s) if s.len() == dim => Ok(s.clone()),
            Some(s) if s.len() == 1 => Ok(vec![s[0]; dim]),
            Some(s) => Err(SamplerError::InvalidConfig(format!(
                "proposal_scales has length {} but the parameter vector has length {dim}",
                s.len()
            ))),
        }
    }
}

/// Current chain position: raw coefficients, inclusion indicators, and
/// the cached log-likelihood of the indicator-masked coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: ModelParams<f64>,
    pub indicators: Vec<bool>,
    pub log_lik: f64,
}

/// Standard initial position: Model I all-zero coefficients, Model II
/// a-intercept 1 and everything else 0 (which satisfies the α + uβ > 0
/// constraint at every covariate value). All covariates start included;
/// the log-likelihood cache is unset until the chain sees data.
pub fn init_state(model_kind: ModelKind, m: usize) -> ChainState {
    let theta = match model_kind {
        ModelKind::ModelI => ModelParams::I(ModelIParams::zeros(m)),
        ModelKind::ModelII => ModelParams::II(ModelIIParams::init(m)),
    };
    ChainState {
        theta,
        indicators: vec![true; m],
        log_lik: f64::NAN,
    }
}

/// Independent Bernoulli(0.5) indicator draw for each covariate.
pub fn resample_indicators<R: Rng>(rng: &mut R, m: usize) -> Vec<bool> {
    (0..m).map(|_| rng.gen::<f64>() < 0.5).collect()
}

/// The Metropolis accept rule for a symmetric proposal under flat
/// priors: accept with probability min{1, exp(log_ratio)}.
pub fn mh_accept(log_ratio: f64, unif: f64) -> bool {
    log_ratio >= 0.0 || unif < log_ratio.exp()
}

/// Multiplicative band tuning: scales grow by 1.25 when the windowed
/// acceptance rate exceeds 0.70, shrink by 0.8 below 0.30, and are left
/// alone inside the band. Only ever called during burn-in.
pub fn tune_proposals(scales: &mut [f64], windowed_acceptance: f64) -> f64 {
    let factor = if windowed_acceptance > 0.70 {
        1.25
    } else if windowed_acceptance < 0.30 {
        0.8
    } else {
        1.0
    };
    if factor != 1.0 {
        for s in scales.iter_mut() {
            *s *= factor;
        }
    }
    factor
}

/// One full-vector random-walk step on the coefficients at fixed
/// indicators. Coordinates of excluded covariates are frozen. Returns the
/// (possibly retained) state and whether the proposal was accepted.
pub fn mh_step<R: Rng>(
    state: &ChainState,
    scales: &[f64],
    rows: &[DesignRow],
    u: f64,
    full_beta: bool,
    rng: &mut R,
) -> (ChainState, bool) {
    let kind = state.theta.kind();
    let m = state.theta.m();
    let mut flat = state.theta.to_flat();
    debug_assert_eq!(flat.len(), scales.len());
    let n = m + 1;
    for (i, x) in flat.iter_mut().enumerate() {
        let j = i % n;
        // The threshold-stable parameterisation is invariant under scaling
        // (a, b) by a common positive factor while shifting the log-scale
        // intercept to compensate, so under flat priors the raw coefficients
        // drift along that ridge. Pinning the α intercept at its initial
        // value is a pure normalisation (the likelihood never depends on the
        // pinned direction) and makes the remaining coefficients identified.
        // The β covariate coefficients (indices in the second block) stay at
        // zero unless `model2_full_beta` is set.
        let pinned = kind == ModelKind::ModelII
            && (i == 0 || (!full_beta && j > 0 && i / n == 1));
        let frozen = pinned || (j > 0 && !state.indicators[j - 1]);
        // the normal draw is consumed either way so the random stream does
        // not depend on the current indicator pattern
        let z: f64 = StandardNormal.sample(rng);
        if !frozen {
            *x += scales[i] * z;
        }
    }
    let proposal = ModelParams::from_flat(kind, m, &flat).expect("shape preserved");
    let prop_ll = log_likelihood(&proposal.masked(&state.indicators), rows, u);
    let unif: f64 = rng.gen();
    if prop_ll.is_finite() && mh_accept(prop_ll - state.log_lik, unif) {
        (
            ChainState {
                theta: proposal,
                indicators: state.indicators.clone(),
                log_lik: prop_ll,
            },
            true,
        )
    } else {
        (state.clone(), false)
    }
}

/// One recorded posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub iteration: usize,
    pub theta: ModelParams<f64>,
    pub indicators: Vec<bool>,
    pub log_lik: f64,
}

impl PosteriorDraw {
    /// Indicator-masked coefficients, the ones the likelihood saw.
    pub fn effective_theta(&self) -> ModelParams<f64> {
        self.theta.masked(&self.indicators)
    }
}

/// A burn-in tuning checkpoint, kept for the post-run audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEvent {
    pub iteration: usize,
    pub windowed_acceptance: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    pub kind: ModelKind,
    pub m: usize,
    pub threshold: f64,
    pub draws: Vec<PosteriorDraw>,
    /// Coefficient-move acceptance rate over the whole run.
    pub acceptance_rate: f64,
    pub config: ChainConfig,
    /// True when some full post-burn-in window saw zero acceptances.
    pub stuck: bool,
    pub tuning_log: Vec<TuningEvent>,
    pub final_scales: Vec<f64>,
}

impl PosteriorSampleSet {
    pub fn coefficient_names(&self) -> Vec<String> {
        coefficient_names(self.kind, self.m)
    }

    /// Componentwise mean of the indicator draws.
    pub fn inclusion_probabilities(&self) -> Result<Vec<f64>, SamplerError> {
        if !self.config.variable_selection {
            return Err(SamplerError::SelectionDisabled);
        }
        Ok(inclusion_probabilities_of(&self.draws, self.m))
    }

    /// A posterior functional evaluated per draw; each draw carries its
    /// own visited model through the indicators, so summarizing these
    /// values across draws is model-averaged inference.
    pub fn posterior_functional<F: Fn(&ModelParams<f64>, &[bool]) -> f64>(
        &self,
        f: F,
    ) -> Vec<f64> {
        self.draws
            .iter()
            .map(|d| f(&d.theta, &d.indicators))
            .collect()
    }

    /// Per-coefficient posterior summaries. With selection on, slope
    /// summaries condition on the draws where the covariate is included,
    /// reported next to its inclusion probability.
    pub fn coefficient_summaries(&self) -> Vec<CoefficientSummary> {
        let names = self.coefficient_names();
        let n = self.m + 1;
        let inclusion = if self.config.variable_selection {
            inclusion_probabilities_of(&self.draws, self.m)
        } else {
            vec![1.0; self.m]
        };
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let j = i % n;
                let mut values: Vec<f64> = self
                    .draws
                    .iter()
                    .filter(|d| j == 0 || d.indicators[j - 1])
                    .map(|d| d.theta.to_flat()[i])
                    .collect();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                CoefficientSummary {
                    name: name.clone(),
                    median: quantile_sorted(&values, 0.5),
                    lower: quantile_sorted(&values, 0.025),
                    upper: quantile_sorted(&values, 0.975),
                    inclusion_probability: if j == 0 { 1.0 } else { inclusion[j - 1] },
                    conditioning_draws: values.len(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub inclusion_probability: f64,
    pub conditioning_draws: usize,
}

/// Flat coefficient column names: `s_0..s_m`, `k_0..`, `r_0..` for
/// Model I; `a_0..`, `b_0..`, `g_0..`, `r_0..` for Model II.
pub fn coefficient_names(kind: ModelKind, m: usize) -> Vec<String> {
    kind.block_prefixes()
        .iter()
        .flat_map(|p| (0..=m).map(move |j| format!("{p}_{j}")))
        .collect()
}

fn inclusion_probabilities_of(draws: &[PosteriorDraw], m: usize) -> Vec<f64> {
    let n = draws.len().max(1) as f64;
    (0..m)
        .map(|j| draws.iter().filter(|d| d.indicators[j]).count() as f64 / n)
        .collect()
}

/// Mean of a posterior functional across draws (model-averaged when
/// selection was on).
pub fn model_average<F: Fn(&ModelParams<f64>, &[bool]) -> f64>(
    samples: &PosteriorSampleSet,
    f: F,
) -> f64 {
    let vals = samples.posterior_functional(f);
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Interpolated quantile of an already sorted, nonempty slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generic random-walk Metropolis kernel over an arbitrary log-density;
/// returns every state visited plus the acceptance rate. This is the same
/// accept rule the data sampler uses, exposed for direct checking against
/// known targets.
pub fn mh_chain<R: Rng, F: Fn(&[f64]) -> f64>(
    log_target: F,
    init: Vec<f64>,
    scales: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, f64) {
    let mut state = init;
    let mut lt = log_target(&state);
    assert!(lt.is_finite(), "initial point must have finite log-density");
    let mut states = Vec::with_capacity(n_steps);
    let mut accepted = 0usize;
    for _ in 0..n_steps {
        let mut prop = state.clone();
        for (x, &s) in prop.iter_mut().zip(scales) {
            let z: f64 = StandardNormal.sample(rng);
            *x += s * z;
        }
        let plt = log_target(&prop);
        let unif: f64 = rng.gen();
        if plt.is_finite() && mh_accept(plt - lt, unif) {
            state = prop;
            lt = plt;
            accepted += 1;
        }
        states.push(state.clone());
    }
    (states, accepted as f64 / n_steps as f64)
}

/// Runs one chain from the standard initial state.
pub fn run_chain(
    config: &ChainConfig,
    rows: &[DesignRow],
    u: f64,
) -> Result<PosteriorSampleSet, SamplerError> {
    if rows.is_empty() {
        return Err(SamplerError::EmptyData);
    }
    let m = rows[0].c_tilde.len() - 1;
    run_chain_from(config, rows, u, init_state(config.model_kind, m))
}

/// Runs one chain from an explicit initial state (multi-chain driver uses
/// perturbed starts).
pub fn run_chain_from(
    config: &ChainConfig,
    rows: &[DesignRow],
    u: f64,
    mut state: ChainState,
) -> Result<PosteriorSampleSet, SamplerError> {
    config.validate()?;
    if rows.is_empty() {
        return Err(SamplerError::EmptyData);
    }
    let m = rows[0].c_tilde.len() - 1;
    assert_eq!(state.theta.m(), m, "initial state dimension mismatch");
    let dim = config.model_kind.block_count() * (m + 1);
    let mut scales = config.initial_scales(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    state.log_lik = log_likelihood(&state.theta.masked(&state.indicators), rows, u);
    if !state.log_lik.is_finite() {
        return Err(SamplerError::BadInit);
    }

    let mut draws = Vec::new();
    let mut tuning_log = Vec::new();
    let mut total_accepts = 0usize;
    let mut window_accepts = 0usize;
    let mut stuck = false;
    // per-coordinate window moments for optional shape adaptation
    let mut wsum = vec![0.0f64; dim];
    let mut wsq = vec![0.0f64; dim];

    for t in 1..=config.n_iterations {
        if config.variable_selection && m > 0 {
            match config.selection_scheme {
                SelectionScheme::Iid => {
                    // unconditional resample; recompute the cached
                    // log-likelihood under the new mask. A mask that kills
                    // the likelihood entirely is retained instead of
                    // adopted, to keep the state live.
                    let proposed = resample_indicators(&mut rng, m);
                    let ll = log_likelihood(&state.theta.masked(&proposed), rows, u);
                    if ll.is_finite() {
                        state.indicators = proposed;
                        // zero the excluded coefficients so a later
                        // re-inclusion restarts likelihood-neutral instead
                        // of at a stale value that blocks re-entry
                        state.theta = state.theta.masked(&state.indicators);
                        state.log_lik = ll;
                    }
                }
                SelectionScheme::Flip => {
                    let j = rng.gen_range(0..m);
                    let mut proposed = state.indicators.clone();
                    proposed[j] = !proposed[j];
                    let ll = log_likelihood(&state.theta.masked(&proposed), rows, u);
                    let unif: f64 = rng.gen();
                    if ll.is_finite() && mh_accept(ll - state.log_lik, unif) {
                        state.indicators = proposed;
                        state.theta = state.theta.masked(&state.indicators);
                        state.log_lik = ll;
                    }
                }
            }
        }

        let (next, accepted) = mh_step(&state, &scales, rows, u, config.model2_full_beta, &mut rng);
        state = next;
        if accepted {
            total_accepts += 1;
            window_accepts += 1;
            let flat = state.theta.to_flat();
            for (i, &x) in flat.iter().enumerate() {
                if x.abs() > config.parameter_guard {
                    return Err(SamplerError::GuardTripped {
                        iteration: t,
                        coordinate: i,
                        value: x.abs(),
                        guard: config.parameter_guard,
                    });
                }
            }
        }

        let in_burn_in = t <= config.burn_in;
        if in_burn_in && config.adapt_component_scales {
            let flat = state.theta.to_flat();
            for i in 0..dim {
                wsum[i] += flat[i];
                wsq[i] += flat[i] * flat[i];
            }
        }

        if t % config.tuning_window == 0 {
            let rate = window_accepts as f64 / config.tuning_window as f64;
            if in_burn_in {
                let factor = tune_proposals(&mut scales, rate);
                if config.adapt_component_scales {
                    // geometric blend toward the window's per-coordinate
                    // draw spread, keeping the band factor's overall pull
                    let w = config.tuning_window as f64;
                    for i in 0..dim {
                        let var = (wsq[i] - wsum[i] * wsum[i] / w) / w;
                        if var > 0.0 {
                            let candidate = 2.4 * var.sqrt() / (dim as f64).sqrt();
                            scales[i] = (scales[i] * candidate).sqrt();
                        }
                    }
                }
                wsum.iter_mut().for_each(|x| *x = 0.0);
                wsq.iter_mut().for_each(|x| *x = 0.0);
                tuning_log.push(TuningEvent {
                    iteration: t,
                    windowed_acceptance: rate,
                    factor,
                });
            } else if window_accepts == 0 {
                stuck = true;
            }
            window_accepts = 0;
        }

        if t > config.burn_in && (t - config.burn_in) % config.thin == 0 {
            draws.push(PosteriorDraw {
                iteration: t,
                theta: state.theta.clone(),
                indicators: state.indicators.clone(),
                log_lik: state.log_lik,
            });
        }
    }

    Ok(PosteriorSampleSet {
        kind: config.model_kind,
        m,
        threshold: u,
        draws,
        acceptance_rate: total_accepts as f64 / config.n_iterations as f64,
        config: config.clone(),
        stuck,
        tuning_log,
        final_scales: scales,
    })
}

/// Several independent chains with distinct seeds and perturbed starts,
/// plus a per-coordinate between/within variance ratio (split-free
/// potential scale reduction) for convergence checking.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChain {
    pub chains: Vec<PosteriorSampleSet>,
    pub psrf: Vec<f64>,
}

impl MultiChain {
    pub fn pooled_draws(&self) -> impl Iterator<Item = &PosteriorDraw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }
}

pub fn run_chains(
    config: &ChainConfig,
    rows: &[DesignRow],
    u: f64,
    n_chains: usize,
) -> Result<MultiChain, SamplerError> {
    if n_chains == 0 {
        return Err(SamplerError::InvalidConfig("n_chains must be >= 1".into()));
    }
    if rows.is_empty() {
        return Err(SamplerError::EmptyData);
    }
    let m = rows[0].c_tilde.len() - 1;
    let mut chains = Vec::with_capacity(n_chains);
    for k in 0..n_chains {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(k as u64);
        let mut init = init_state(config.model_kind, m);
        // perturb only coordinates that cannot break the Model II
        // constraint: the rate intercept and the log-scale/gamma intercept
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let delta = 0.2 * k as f64 * sign;
        match &mut init.theta {
            ModelParams::I(t) => {
                t.r_u[0] += delta;
                t.s_u[0] += 0.5 * delta;
            }
            ModelParams::II(t) => {
                t.r_u[0] += delta;
                t.g[0] += 0.5 * delta;
            }
        }
        chains.push(run_chain_from(&cfg, rows, u, init)?);
    }
    let psrf = psrf_of(&chains);
    Ok(MultiChain { chains, psrf })
}

fn psrf_of(chains: &[PosteriorSampleSet]) -> Vec<f64> {
    let k = chains.len();
    if k < 2 || chains.iter().any(|c| c.draws.len() < 2) {
        return Vec::new();
    }
    let n = chains.iter().map(|c| c.draws.len()).min().unwrap();
    let dim = chains[0].draws[0].theta.to_flat().len();
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let per_chain: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.draws[..n].iter().map(|d| d.theta.to_flat()[i]).collect())
            .collect();
        let means: Vec<f64> = per_chain.iter().map(|v| v.iter().sum::<f64>() / n as f64).collect();
        let grand = means.iter().sum::<f64>() / k as f64;
        let b_over_n = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1) as f64;
        let w = per_chain
            .iter()
            .zip(&means)
            .map(|(v, m)| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64)
            .sum::<f64>()
            / k as f64;
        if w <= 0.0 {
            out.push(1.0);
        } else {
            let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
            out.push((var_plus / w).sqrt());
        }
    }
    out
}
