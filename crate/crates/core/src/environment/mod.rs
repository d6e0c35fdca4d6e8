//! Participant environment: zero-inflated Poisson OSCB outcomes, app
//! engagement, MAP fitting and null-environment construction.
//!
//! For environment state `g` and action `a`:
//!
//! ```text
//! Z ~ Bernoulli(1 − sigmoid(gᵀw_b − a·max(Δ_Bᵀg, 0)))
//! S ~ Poisson(exp(gᵀw_p + a·max(Δ_Nᵀg, 0)))
//! Q = Z·S   (capped at 181 s when sampled)
//! ```

mod fit;
mod null;
mod synthetic;

pub use fit::{
    ln_factorial, map_fit, zip_log_posterior, zip_log_posterior_grad, FitOptions, FitResult, Observation,
    PARAM_DIM,
};
pub use null::{
    build_tilde_state, default_state_grid, make_null_environment, project_null, projection_objective,
    NullProjectionSpec, Projection, StateGrid, TILDE_DAY_NORM, TILDE_WEEKEND,
};
pub use synthetic::{gen_synthetic_models, grid_zero_fraction, SyntheticOptions};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::features::{EnvState, ENV_DIM, OSCB_CAP};
use crate::{Error, Result};

/// Largest log Poisson rate accepted by the sampler.
pub const MAX_LOG_RATE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEnvModel {
    pub participant_id: u32,
    pub w_b: [f64; ENV_DIM],
    pub w_p: [f64; ENV_DIM],
    pub delta_b: [f64; ENV_DIM],
    pub delta_n: [f64; ENV_DIM],
    pub p_app: f64,
    #[serde(default)]
    pub fit_log_posterior: Option<f64>,
}

pub(crate) fn dot(a: &[f64; ENV_DIM], b: &[f64; ENV_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max(Δᵀg, 0)`, with dot products within rounding error of zero read as
/// zero so that a projected null model has no effect at its target state.
pub(crate) fn hinge(delta: &[f64; ENV_DIM], g: &[f64; ENV_DIM]) -> f64 {
    let s = dot(delta, g);
    let scale: f64 = delta.iter().zip(g).map(|(x, y)| (x * y).abs()).sum();
    if s <= 8.0 * ENV_DIM as f64 * f64::EPSILON * scale {
        0.0
    } else {
        s
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear predictors of one decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipPredictors {
    /// `gᵀw_b − a·max(Δ_Bᵀg, 0)`; the brushing probability is `sigmoid(−eta_b)`.
    pub eta_b: f64,
    /// Log Poisson rate.
    pub eta_p: f64,
}

impl ParticipantEnvModel {
    /// Model with every weight zero and the given app-open probability.
    pub fn zeros(participant_id: u32, p_app: f64) -> Self {
        Self {
            participant_id,
            w_b: [0.0; ENV_DIM],
            w_p: [0.0; ENV_DIM],
            delta_b: [0.0; ENV_DIM],
            delta_n: [0.0; ENV_DIM],
            p_app,
            fit_log_posterior: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .w_b
            .iter()
            .chain(&self.w_p)
            .chain(&self.delta_b)
            .chain(&self.delta_n)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::ModelSanity(format!(
                "participant {} has non-finite weights",
                self.participant_id
            )));
        }
        if !(0.0..=1.0).contains(&self.p_app) {
            return Err(Error::ModelSanity(format!(
                "participant {} has p_app {} outside [0, 1]",
                self.participant_id, self.p_app
            )));
        }
        Ok(())
    }

    pub fn predictors(&self, g: &EnvState, action: u8) -> ZipPredictors {
        let a = action as f64;
        ZipPredictors {
            eta_b: dot(&g.0, &self.w_b) - a * hinge(&self.delta_b, &g.0),
            eta_p: dot(&g.0, &self.w_p) + a * hinge(&self.delta_n, &g.0),
        }
    }

    /// `P(Z = 1)`.
    pub fn brush_prob(&self, g: &EnvState, action: u8) -> f64 {
        sigmoid(-self.predictors(g, action).eta_b)
    }

    pub fn rate(&self, g: &EnvState, action: u8) -> f64 {
        self.predictors(g, action).eta_p.exp()
    }

    /// `P(Q = 0)` under the uncapped model.
    pub fn zero_prob(&self, g: &EnvState, action: u8) -> f64 {
        let p = self.brush_prob(g, action);
        (1.0 - p) + p * (-self.rate(g, action)).exp()
    }

    /// Treatment effect `E[Q | a=1] − E[Q | a=0]` at `g`.
    pub fn treatment_effect(&self, g: &EnvState) -> f64 {
        zip_mean(self, g, 1) - zip_mean(self, g, 0)
    }
}

/// Uncapped analytic mean `P(Z=1)·λ`.
pub fn zip_mean(model: &ParticipantEnvModel, g: &EnvState, action: u8) -> f64 {
    model.brush_prob(g, action) * model.rate(g, action)
}

/// Draws one OSCB value in seconds, capped at 181.
///
/// Both the Bernoulli and the Poisson draw are always taken so that stream
/// consumption does not depend on the outcome.
pub fn zip_sample<R: Rng + ?Sized>(
    model: &ParticipantEnvModel,
    g: &EnvState,
    action: u8,
    rng: &mut R,
) -> Result<u32> {
    let pred = model.predictors(g, action);
    if !(pred.eta_p <= MAX_LOG_RATE) {
        return Err(Error::ModelSanity(format!(
            "participant {}: Poisson log-rate {} exceeds {MAX_LOG_RATE}",
            model.participant_id, pred.eta_p
        )));
    }
    let brush = rng.random::<f64>() < sigmoid(-pred.eta_b);
    let rate = pred.eta_p.exp();
    let count = if rate > 0.0 {
        Poisson::new(rate)
            .map_err(|e| Error::ModelSanity(format!("Poisson rate {rate}: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    let q = if brush { count.min(OSCB_CAP) } else { 0.0 };
    Ok(q as u32)
}

/// End-of-day app-open indicator.
pub fn app_open_sample<R: Rng + ?Sized>(p_app: f64, rng: &mut R) -> u8 {
    (rng.random::<f64>() < p_app) as u8
}
