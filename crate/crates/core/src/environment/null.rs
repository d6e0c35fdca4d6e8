//! Null environments: advantage weights projected so that a chosen state has
//! no treatment effect while effects elsewhere on a state grid change as
//! little as possible (in mean squared error over the grid).

use log::warn;
use nalgebra::{SMatrix, SVector};

use super::ParticipantEnvModel;
use crate::features::{EnvState, ENV_DIM};
use crate::{Error, Result};

/// Mean weekend indicator substituted into the target state.
pub const TILDE_WEEKEND: f64 = 2.0 / 7.0;
/// Mean normalized day-in-trial substituted into the target state.
pub const TILDE_DAY_NORM: f64 = 0.0;

const RIDGE: f64 = 1e-8;

type Vec7 = SVector<f64, ENV_DIM>;
type Mat7 = SMatrix<f64, ENV_DIM, ENV_DIM>;

#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    states: Vec<EnvState>,
}

impl StateGrid {
    pub fn new(states: Vec<EnvState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::input("state grid must contain at least one state"));
        }
        if let Some(bad) = states.iter().position(|g| !g.is_valid()) {
            return Err(Error::input(format!("grid state {bad} violates the environment-state ranges")));
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `GᵀG / K`.
    fn second_moment(&self) -> Mat7 {
        let mut m = Mat7::zeros();
        for g in &self.states {
            let v = Vec7::from_column_slice(&g.0);
            m += v * v.transpose();
        }
        m / self.states.len() as f64
    }
}

/// Cartesian grid over time of day, the quartile anchors of the two
/// exponential averages, app engagement, weekend and three trial phases.
pub fn default_state_grid() -> StateGrid {
    let mut states = Vec::with_capacity(600);
    for tod in [0.0, 1.0] {
        for b in [-1.0, -0.7, 0.0, 0.1, 1.0] {
            for a in [-1.0, -0.6, -0.1, 0.0, 1.0] {
                for app in [0.0, 1.0] {
                    for weekend in [0.0, 1.0] {
                        for day in [-1.0, 0.0, 1.0] {
                            states.push(EnvState::new([tod, b, a, app, weekend, day, 1.0]));
                        }
                    }
                }
            }
        }
    }
    StateGrid { states }
}

/// `g` with the weekend and day-in-trial features replaced by their means.
pub fn build_tilde_state(g: &EnvState) -> EnvState {
    let mut out = *g;
    out.0[4] = TILDE_WEEKEND;
    out.0[5] = TILDE_DAY_NORM;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullProjectionSpec {
    pub target_state: EnvState,
    pub tilde_state: EnvState,
    pub grid: StateGrid,
}

impl NullProjectionSpec {
    pub fn new(target_state: EnvState, grid: StateGrid) -> Self {
        Self { tilde_state: build_tilde_state(&target_state), target_state, grid }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub delta: [f64; ENV_DIM],
    /// True when the grid moment matrix was singular and a ridge was added.
    pub ridged: bool,
}

/// `(1/K) Σ_k (g_kᵀ candidate − g_kᵀ delta)²`.
pub fn projection_objective(grid: &StateGrid, delta: &[f64; ENV_DIM], candidate: &[f64; ENV_DIM]) -> f64 {
    let diff: Vec<f64> = candidate.iter().zip(delta).map(|(c, d)| c - d).collect();
    grid.states()
        .iter()
        .map(|g| {
            let r: f64 = g.0.iter().zip(&diff).map(|(x, y)| x * y).sum();
            r * r
        })
        .sum::<f64>()
        / grid.len() as f64
}

/// Closed-form equality-constrained least squares:
/// `projΔ = Δ − M⁻¹g̃ (g̃ᵀΔ)/(g̃ᵀM⁻¹g̃)` with `M = GᵀG/K`.
pub fn project_null(delta: &[f64; ENV_DIM], spec: &NullProjectionSpec) -> Result<Projection> {
    let tilde = Vec7::from_column_slice(&spec.tilde_state.0);
    if tilde.norm() == 0.0 {
        return Err(Error::input("null projection needs a nonzero target state"));
    }
    let moment = spec.grid.second_moment();
    let (chol, ridged) = match moment.cholesky() {
        Some(c) if c.l().diagonal().min() > 1e-7 * c.l().diagonal().max() => (c, false),
        _ => {
            warn!("state-grid moment matrix is singular; adding a {RIDGE:e} ridge");
            let c = (moment + Mat7::identity() * RIDGE)
                .cholesky()
                .ok_or_else(|| Error::Numerical("ridged grid moment matrix is not positive definite".into()))?;
            (c, true)
        }
    };
    let m_inv_tilde = chol.solve(&tilde);
    let denom = tilde.dot(&m_inv_tilde);
    let mut proj = Vec7::from_column_slice(delta);
    // Second pass removes rounding residue; the map is idempotent.
    for _ in 0..2 {
        let violation = tilde.dot(&proj);
        proj -= m_inv_tilde * (violation / denom);
    }
    let mut out = [0.0; ENV_DIM];
    out.copy_from_slice(proj.as_slice());
    Ok(Projection { delta: out, ridged })
}

/// Copies of `models` whose `Δ_B` and `Δ_N` are projected to give zero
/// advantage at `target_state`'s mean-calendar version.
pub fn make_null_environment(
    models: &[ParticipantEnvModel],
    target_state: &EnvState,
    grid: &StateGrid,
) -> Result<Vec<ParticipantEnvModel>> {
    let spec = NullProjectionSpec::new(*target_state, grid.clone());
    models
        .iter()
        .map(|m| {
            let mut out = m.clone();
            out.delta_b = project_null(&m.delta_b, &spec)?.delta;
            out.delta_n = project_null(&m.delta_n, &spec)?.delta;
            Ok(out)
        })
        .collect()
}
