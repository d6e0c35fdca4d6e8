//! Action-centered Bayesian linear regression with smoothed posterior
//! sampling.
//!
//! The reward model is
//! `r = f(s)ᵀα₀ + π f(s)ᵀα₁ + (a − π) f(s)ᵀβ + ε`, `ε ~ N(0, σ²)`,
//! with a Gaussian prior on `θ = [α₀, α₁, β]` and a known noise variance, so the
//! posterior stays Gaussian. The advantage of sending a prompt is `f(s)ᵀβ`, and
//! the action probability is `E_β[ρ(f(s)ᵀβ)]` for a bounded logistic `ρ`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{AlgState, ALG_DIM};
use crate::quadrature::GaussHermite;
use crate::{Error, Result};

/// Length of `θ = [α₀, α₁, β]`.
pub const THETA_DIM: usize = 3 * ALG_DIM;
const BETA_OFFSET: usize = 2 * ALG_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prior {
    pub sigma2: f64,
    pub mu_alpha0: [f64; ALG_DIM],
    /// Standard deviations; the covariance is `diag(sd²)`.
    pub sd_alpha0: [f64; ALG_DIM],
    pub mu_beta: [f64; ALG_DIM],
    pub sd_beta: [f64; ALG_DIM],
}

impl Default for Prior {
    /// Values used in the deployed trial.
    fn default() -> Self {
        Self {
            sigma2: 3878.0,
            mu_alpha0: [18.0, 0.0, 30.0, 0.0, 73.0],
            sd_alpha0: [73.0, 25.0, 95.0, 27.0, 83.0],
            mu_beta: [0.0, 0.0, 0.0, 53.0, 0.0],
            sd_beta: [12.0, 33.0, 35.0, 56.0, 17.0],
        }
    }
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config("prior sigma2 must be positive".into()));
        }
        let sds = self.sd_alpha0.iter().chain(&self.sd_beta);
        if sds.clone().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("prior standard deviations must be positive".into()));
        }
        let means = self.mu_alpha0.iter().chain(&self.mu_beta);
        if means.clone().any(|m| !m.is_finite()) {
            return Err(Error::Config("prior means must be finite".into()));
        }
        Ok(())
    }

    /// Block-diagonal prior over `[α₀, α₁, β]`; `α₁` shares the `β` prior.
    pub fn to_posterior(&self) -> PosteriorState {
        let mut mu = DVector::zeros(THETA_DIM);
        let mut sigma = DMatrix::zeros(THETA_DIM, THETA_DIM);
        for k in 0..ALG_DIM {
            let blocks = [
                (0, self.mu_alpha0[k], self.sd_alpha0[k]),
                (ALG_DIM, self.mu_beta[k], self.sd_beta[k]),
                (BETA_OFFSET, self.mu_beta[k], self.sd_beta[k]),
            ];
            for (offset, m, sd) in blocks {
                mu[offset + k] = m;
                sigma[(offset + k, offset + k)] = sd * sd;
            }
        }
        PosteriorState { mu, sigma, tau_index: 0 }
    }
}

/// Gaussian belief over `θ`. `tau_index` 0 denotes the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub tau_index: u32,
}

impl PosteriorState {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Checks shape, symmetry within 1e-10 (relative to the largest entry)
    /// and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if self.sigma.nrows() != n || self.sigma.ncols() != n {
            return Err(Error::input(format!(
                "covariance is {}x{} but mean has length {n}",
                self.sigma.nrows(),
                self.sigma.ncols()
            )));
        }
        let scale = self.sigma.amax().max(1.0);
        let asym = (&self.sigma - self.sigma.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::Numerical(format!("covariance asymmetric by {asym:e}")));
        }
        if self.sigma.clone().cholesky().is_none() {
            return Err(Error::Numerical("covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// Mean and covariance of the advantage block `β`.
    pub fn beta_block(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mu = self.mu.rows(BETA_OFFSET, ALG_DIM).into_owned();
        let sigma = self
            .sigma
            .view((BETA_OFFSET, BETA_OFFSET), (ALG_DIM, ALG_DIM))
            .into_owned();
        (mu, sigma)
    }
}

/// `φ = [f, π f, (a − π) f]`, so that `φᵀθ` is the model's mean reward.
pub fn design_vector(f: &AlgState, action: u8, pi: f64) -> [f64; THETA_DIM] {
    let centered = action as f64 - pi;
    let mut phi = [0.0; THETA_DIM];
    for (k, x) in f.0.iter().enumerate() {
        phi[k] = *x;
        phi[ALG_DIM + k] = pi * x;
        phi[BETA_OFFSET + k] = centered * x;
    }
    phi
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "{what} is not positive definite (min diagonal {:e})",
            m.diagonal().min()
        ))
    })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Conjugate update of `N(μ, Σ)` on observations `(φ, r)` with known noise
/// variance: `Σ' = (Σ⁻¹ + σ⁻²ΦᵀΦ)⁻¹`, `μ' = Σ'(Σ⁻¹μ + σ⁻²Φᵀr)`.
pub fn posterior_update<'a, I>(prior: &PosteriorState, sigma2: f64, batch: I) -> Result<PosteriorState>
where
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let n = prior.dim();
    if prior.sigma.nrows() != n || prior.sigma.ncols() != n {
        return Err(Error::input("prior covariance shape does not match mean"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::input("noise variance must be positive"));
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut xty = DVector::<f64>::zeros(n);
    let mut count = 0usize;
    for (phi, r) in batch {
        if phi.len() != n {
            return Err(Error::input(format!(
                "design vector has length {}, expected {n}",
                phi.len()
            )));
        }
        for i in 0..n {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            xty[i] += pi * r;
            for j in 0..n {
                gram[(i, j)] += pi * phi[j];
            }
        }
        count += 1;
    }
    if count == 0 {
        prior.validate()?;
        return Ok(prior.clone());
    }
    let prior_precision = inverse_spd(&prior.sigma, "prior covariance")?;
    let precision = &prior_precision + gram / sigma2;
    let sigma = inverse_spd(&precision, "posterior precision")?;
    let rhs = &prior_precision * &prior.mu + xty / sigma2;
    let mu = &sigma * rhs;
    Ok(PosteriorState { mu, sigma, tau_index: prior.tau_index })
}

/// Refit from the prior on a batch of `(f, π, a, r)` rows.
pub fn fit_reward_model<'a, I>(prior: &Prior, rows: I) -> Result<PosteriorState>
where
    I: IntoIterator<Item = (&'a AlgState, f64, u8, f64)>,
{
    let designs: Vec<([f64; THETA_DIM], f64)> = rows
        .into_iter()
        .map(|(f, pi, a, r)| (design_vector(f, a, pi), r))
        .collect();
    posterior_update(
        &prior.to_posterior(),
        prior.sigma2,
        designs.iter().map(|(phi, r)| (&phi[..], *r)),
    )
}

/// Posterior mean and variance of the advantage `f(s)ᵀβ`.
pub fn advantage_distribution(posterior: &PosteriorState, f: &AlgState) -> (f64, f64) {
    let mut m = 0.0;
    let mut v = 0.0;
    for i in 0..ALG_DIM {
        m += posterior.mu[BETA_OFFSET + i] * f.0[i];
        for j in 0..ALG_DIM {
            v += f.0[i] * posterior.sigma[(BETA_OFFSET + i, BETA_OFFSET + j)] * f.0[j];
        }
    }
    (m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub l_min: f64,
    pub l_max: f64,
    /// Logistic slope per second of advantage.
    pub steepness: f64,
    pub quadrature_nodes: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { l_min: 0.2, l_max: 0.8, steepness: 0.05, quadrature_nodes: 50 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.l_min && self.l_min < self.l_max && self.l_max < 1.0) {
            return Err(Error::Config("smoothing bounds need 0 < l_min < l_max < 1".into()));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(Error::Config("smoothing steepness must be positive".into()));
        }
        if self.quadrature_nodes == 0 {
            return Err(Error::Config("quadrature_nodes must be positive".into()));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bounded logistic `l_min + (l_max − l_min)·logistic(steepness·x)`.
pub fn smoothing_rho(x: f64, cfg: &SmoothingConfig) -> f64 {
    cfg.l_min + (cfg.l_max - cfg.l_min) * logistic(cfg.steepness * x)
}

/// Smoothed posterior-sampling action probabilities.
#[derive(Debug, Clone)]
pub struct ActionSelector {
    cfg: SmoothingConfig,
    rule: GaussHermite,
}

impl ActionSelector {
    pub fn new(cfg: SmoothingConfig) -> Result<Self> {
        cfg.validate()?;
        let rule = GaussHermite::new(cfg.quadrature_nodes)?;
        Ok(Self { cfg, rule })
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.cfg
    }

    /// `E[ρ(X)]` for `X ~ N(m, v)`.
    pub fn smoothed_prob(&self, m: f64, v: f64) -> f64 {
        let v = if v < 0.0 {
            warn!("negative advantage variance {v:e}; clamping to 0");
            0.0
        } else {
            v
        };
        if v == 0.0 {
            return smoothing_rho(m, &self.cfg);
        }
        let p = self.rule.gaussian_expectation(m, v, |x| smoothing_rho(x, &self.cfg));
        p.clamp(self.cfg.l_min, self.cfg.l_max)
    }

    pub fn action_prob(&self, posterior: &PosteriorState, f: &AlgState) -> f64 {
        let (m, v) = advantage_distribution(posterior, f);
        self.smoothed_prob(m, v)
    }
}

/// Bernoulli(`pi`) draw.
pub fn select_action<R: Rng + ?Sized>(pi: f64, rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    (u < pi) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Policy,
    FallbackIi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub day_index: u32,
    pub slot: u8,
    pub pi: f64,
    pub action: u8,
    pub provenance: Provenance,
}

/// Per-participant list of scheduled actions for the remaining days.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSchedule {
    pub participant_id: u32,
    /// Day index on which the schedule was built.
    pub created_day: u32,
    pub entries: Vec<ScheduleEntry>,
}

impl ActionSchedule {
    pub fn entry(&self, day_index: u32, slot: u8) -> Option<&ScheduleEntry> {
        self.entries.iter().find(|e| e.day_index == day_index && e.slot == slot)
    }

    pub fn last_day(&self) -> Option<u32> {
        self.entries.last().map(|e| e.day_index)
    }
}

/// Schedule for days `first_day..first_day + horizon_days`. Each entry's
/// probability uses `state` with only the time-of-day feature switched.
pub fn make_schedule<R: Rng + ?Sized>(
    participant_id: u32,
    posterior: &PosteriorState,
    state: &AlgState,
    first_day: u32,
    horizon_days: u32,
    selector: &ActionSelector,
    rng: &mut R,
) -> ActionSchedule {
    let probs = [
        selector.action_prob(posterior, &state.with_slot(0)),
        selector.action_prob(posterior, &state.with_slot(1)),
    ];
    let mut entries = Vec::with_capacity(2 * horizon_days as usize);
    for day_index in first_day..first_day + horizon_days {
        for slot in 0..2u8 {
            let pi = probs[slot as usize];
            entries.push(ScheduleEntry {
                day_index,
                slot,
                pi,
                action: select_action(pi, rng),
                provenance: Provenance::Policy,
            });
        }
    }
    ActionSchedule { participant_id, created_day: first_day, entries }
}

/// Cost term subtracted from OSCB when forming the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostHook {
    #[default]
    Zero,
    /// Cost equal to the action indicator.
    ActionIndicator,
}

impl CostHook {
    pub fn cost(self, action: u8) -> f64 {
        match self {
            CostHook::Zero => 0.0,
            CostHook::ActionIndicator => action as f64,
        }
    }
}

/// `R = Q − weight·cost(a)`.
pub fn reward(oscb: f64, action: u8, weight: f64, hook: CostHook) -> f64 {
    oscb - weight * hook.cost(action)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    FullPooling,
    NoPooling,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::FullPooling => "full_pooling",
            PolicyMode::NoPooling => "no_pooling",
        }
    }
}
