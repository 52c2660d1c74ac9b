//! Links between regression coefficients and local GPD parameters.
//!
//! Model I (direct links): `ln σ_u = s_u·c̃`, `ξ = κ·c̃`,
//! `logit ρ_u = r_u·c̃`.
//!
//! Model II (threshold-stable): `σ_u = (α + uβ)e^γ`, `ξ = βe^γ` with
//! `α = a·c̃`, `β = b·c̃`, `γ = g·c̃`, subject to `α + uβ > 0`; the rate
//! link is as in Model I. Under Model II the excess distribution over any
//! higher threshold `u + x` keeps the same coefficient vectors, which is
//! the threshold-stability property [`shift_threshold`] exercises.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DesignRow;
use crate::gpd::GpdParams;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    ModelI,
    ModelII,
}

impl ModelKind {
    /// Number of coefficient blocks (each of length m + 1).
    pub fn block_count(&self) -> usize {
        match self {
            ModelKind::ModelI => 3,
            ModelKind::ModelII => 4,
        }
    }

    pub fn block_prefixes(&self) -> &'static [&'static str] {
        match self {
            ModelKind::ModelI => &["s", "k", "r"],
            ModelKind::ModelII => &["a", "b", "g", "r"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("coefficient vectors must all have length m + 1")]
    DimensionMismatch,
    #[error("model II constraint alpha + u*beta <= 0")]
    ConstraintViolated,
    #[error("link evaluation overflowed")]
    Overflow,
    #[error("shift x = {0} degenerates the scale (beyond the xi < 0 support width)")]
    DegenerateShift(f64),
}

/// Model I coefficients: log-scale, shape and logit-rate blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIParams<F = f64> {
    pub s_u: Vec<F>,
    pub kappa: Vec<F>,
    pub r_u: Vec<F>,
}

/// Model II coefficients. `a`, `b`, `g` carry no threshold subscript:
/// fitted once, they apply at every threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIIParams<F = f64> {
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub g: Vec<F>,
    pub r_u: Vec<F>,
}

/// Local GPD parameters plus exceedance rate at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGpd<F = f64> {
    pub sigma: F,
    pub xi: F,
    pub rho: F,
}

fn dot<F: Real>(coef: &[F], c: &[F]) -> F {
    debug_assert_eq!(coef.len(), c.len());
    let mut acc = F::zero();
    for i in 0..coef.len() {
        acc = acc + coef[i] * c[i];
    }
    acc
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp<F: Real>(x: F) -> F {
    let cut = F::from_f64(33.0).unwrap();
    if x > cut {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic<F: Real>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

impl<F: Real> ModelIParams<F> {
    pub fn zeros(m: usize) -> Self {
        Self {
            s_u: vec![F::zero(); m + 1],
            kappa: vec![F::zero(); m + 1],
            r_u: vec![F::zero(); m + 1],
        }
    }

    pub fn dim(&self) -> Result<usize, LinkError> {
        let n = self.s_u.len();
        if n == 0 || self.kappa.len() != n || self.r_u.len() != n {
            return Err(LinkError::DimensionMismatch);
        }
        Ok(n)
    }
}

impl<F: Real> ModelIIParams<F> {
    /// Initial state: `a` intercept 1, everything else 0, which satisfies
    /// `α + uβ > 0` for every covariate value.
    pub fn init(m: usize) -> Self {
        let mut a = vec![F::zero(); m + 1];
        a[0] = F::one();
        Self {
            a,
            b: vec![F::zero(); m + 1],
            g: vec![F::zero(); m + 1],
            r_u: vec![F::zero(); m + 1],
        }
    }

    pub fn dim(&self) -> Result<usize, LinkError> {
        let n = self.a.len();
        if n == 0 || self.b.len() != n || self.g.len() != n || self.r_u.len() != n {
            return Err(LinkError::DimensionMismatch);
        }
        Ok(n)
    }
}

/// `σ = exp(s·c̃)`, `ξ = κ·c̃`, `ρ = logistic(r·c̃)`.
pub fn model1_link<F: Real>(theta: &ModelIParams<F>, c_tilde: &[F]) -> Result<LocalGpd<F>, LinkError> {
    if theta.dim()? != c_tilde.len() {
        return Err(LinkError::DimensionMismatch);
    }
    let sigma = dot(&theta.s_u, c_tilde).exp();
    if !sigma.is_finite() || sigma <= F::zero() {
        return Err(LinkError::Overflow);
    }
    let xi = dot(&theta.kappa, c_tilde);
    if !xi.is_finite() {
        return Err(LinkError::Overflow);
    }
    Ok(LocalGpd {
        sigma,
        xi,
        rho: logistic(dot(&theta.r_u, c_tilde)),
    })
}

/// `σ = (α + uβ)e^γ`, `ξ = βe^γ`, with the constraint `α + uβ > 0`.
pub fn model2_link<F: Real>(
    theta: &ModelIIParams<F>,
    u: F,
    c_tilde: &[F],
) -> Result<LocalGpd<F>, LinkError> {
    if theta.dim()? != c_tilde.len() {
        return Err(LinkError::DimensionMismatch);
    }
    let alpha = dot(&theta.a, c_tilde);
    let beta = dot(&theta.b, c_tilde);
    let lin = alpha + u * beta;
    if !(lin > F::zero()) {
        return Err(LinkError::ConstraintViolated);
    }
    let eg = dot(&theta.g, c_tilde).exp();
    let sigma = lin * eg;
    let xi = beta * eg;
    if !sigma.is_finite() || sigma <= F::zero() || !xi.is_finite() {
        return Err(LinkError::Overflow);
    }
    Ok(LocalGpd {
        sigma,
        xi,
        rho: logistic(dot(&theta.r_u, c_tilde)),
    })
}

/// Moves a local GPD to the higher threshold `u + x`:
/// `σ' = σ + xξ`, `ξ' = ξ`, `ρ' = ρ · P(X^u > x)`.
pub fn shift_threshold<F: Real>(local: &LocalGpd<F>, x: F) -> Result<LocalGpd<F>, LinkError> {
    if x < F::zero() {
        return Err(LinkError::DegenerateShift(x.to_f64().unwrap_or(f64::NAN)));
    }
    let sigma = local.sigma + x * local.xi;
    if !(sigma > F::zero()) {
        return Err(LinkError::DegenerateShift(x.to_f64().unwrap_or(f64::NAN)));
    }
    let gpd = GpdParams::new(local.sigma, local.xi).map_err(|_| LinkError::Overflow)?;
    Ok(LocalGpd {
        sigma,
        xi: local.xi,
        rho: local.rho * gpd.survival(x),
    })
}

/// Either model's coefficients, as the sampler and inference carry them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams<F = f64> {
    I(ModelIParams<F>),
    II(ModelIIParams<F>),
}

impl<F: Real> ModelParams<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::I(_) => ModelKind::ModelI,
            ModelParams::II(_) => ModelKind::ModelII,
        }
    }

    /// Covariate count m (coefficient blocks have length m + 1).
    pub fn m(&self) -> usize {
        let n = match self {
            ModelParams::I(t) => t.s_u.len(),
            ModelParams::II(t) => t.a.len(),
        };
        n - 1
    }

    pub fn local(&self, u: F, c_tilde: &[F]) -> Result<LocalGpd<F>, LinkError> {
        match self {
            ModelParams::I(t) => model1_link(t, c_tilde),
            ModelParams::II(t) => model2_link(t, u, c_tilde),
        }
    }

    pub fn blocks(&self) -> Vec<&[F]> {
        match self {
            ModelParams::I(t) => vec![&t.s_u, &t.kappa, &t.r_u],
            ModelParams::II(t) => vec![&t.a, &t.b, &t.g, &t.r_u],
        }
    }

    pub fn to_flat(&self) -> Vec<F> {
        self.blocks().concat()
    }

    pub fn from_flat(kind: ModelKind, m: usize, flat: &[F]) -> Result<Self, LinkError> {
        let n = m + 1;
        if flat.len() != kind.block_count() * n {
            return Err(LinkError::DimensionMismatch);
        }
        let block = |i: usize| flat[i * n..(i + 1) * n].to_vec();
        Ok(match kind {
            ModelKind::ModelI => ModelParams::I(ModelIParams {
                s_u: block(0),
                kappa: block(1),
                r_u: block(2),
            }),
            ModelKind::ModelII => ModelParams::II(ModelIIParams {
                a: block(0),
                b: block(1),
                g: block(2),
                r_u: block(3),
            }),
        })
    }

    /// Effective coefficients under an inclusion-indicator vector of
    /// length m: excluded covariates have their coefficients zeroed in
    /// every block (the intercept slot is always kept).
    pub fn masked(&self, indicators: &[bool]) -> Self {
        assert_eq!(indicators.len(), self.m());
        let mask = |v: &[F]| -> Vec<F> {
            let mut out = v.to_vec();
            for (j, &inc) in indicators.iter().enumerate() {
                if !inc {
                    out[j + 1] = F::zero();
                }
            }
            out
        };
        match self {
            ModelParams::I(t) => ModelParams::I(ModelIParams {
                s_u: mask(&t.s_u),
                kappa: mask(&t.kappa),
                r_u: mask(&t.r_u),
            }),
            ModelParams::II(t) => ModelParams::II(ModelIIParams {
                a: mask(&t.a),
                b: mask(&t.b),
                g: mask(&t.g),
                r_u: mask(&t.r_u),
            }),
        }
    }
}

/// One row's contribution to the log-likelihood:
/// `(1−δ) ln(1−ρ) + δ (ln ρ + ln f_GPD(X−u; σ, ξ))`.
fn row_log_likelihood(theta: &ModelParams<f64>, row: &DesignRow, u: f64) -> f64 {
    let c = row.c_tilde.as_slice();
    let eta_rho = match theta {
        ModelParams::I(t) => dot(&t.r_u, c),
        ModelParams::II(t) => dot(&t.r_u, c),
    };
    if !row.exceeds {
        // ln(1 - rho) = -ln(1 + e^eta)
        return -log1p_exp(eta_rho);
    }
    let x = row.response - u;
    let (sigma, xi) = match theta {
        ModelParams::I(t) => {
            let sigma = dot(&t.s_u, c).exp();
            (sigma, dot(&t.kappa, c))
        }
        ModelParams::II(t) => {
            let lin = dot(&t.a, c) + u * dot(&t.b, c);
            if lin <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let eg = dot(&t.g, c).exp();
            (lin * eg, dot(&t.b, c) * eg)
        }
    };
    if !sigma.is_finite() || sigma <= 0.0 || !xi.is_finite() {
        return f64::NEG_INFINITY;
    }
    // ln rho = eta - ln(1 + e^eta)
    let log_rho = eta_rho - log1p_exp(eta_rho);
    let log_density = if xi.abs() < crate::gpd::XI_TOLERANCE {
        -sigma.ln() - x / sigma
    } else {
        let t = xi * x / sigma;
        if t <= -1.0 {
            return f64::NEG_INFINITY;
        }
        -sigma.ln() - (1.0 + xi.recip()) * t.ln_1p()
    };
    log_rho + log_density
}

/// Full-data log-likelihood at threshold `u`. Returns `−∞` when any
/// exceedance falls outside its local GPD support or any link is invalid.
/// Rows are summed in order, so the result is bit-reproducible.
pub fn log_likelihood(theta: &ModelParams<f64>, rows: &[DesignRow], u: f64) -> f64 {
    let mut acc = 0.0;
    for row in rows {
        let term = row_log_likelihood(theta, row, u);
        if term == f64::NEG_INFINITY || term.is_nan() {
            return f64::NEG_INFINITY;
        }
        acc += term;
    }
    acc
}
