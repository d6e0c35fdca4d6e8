//! MAP fitting of the zero-inflated Poisson outcome model under independent
//! standard-normal priors on all four weight vectors.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::OnceLock;

use log::debug;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{dot, hinge, ParticipantEnvModel};
use crate::features::{EnvState, ENV_DIM};
use crate::{Error, Result};

/// `[w_b, w_p, Δ_B, Δ_N]`.
pub const PARAM_DIM: usize = 4 * ENV_DIM;

/// One `(g, a, Q)` datum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub g: EnvState,
    pub action: u8,
    pub oscb: u32,
}

const FACTORIAL_TABLE: usize = 4096;

/// `ln q!`, exact summation below 4096 and Stirling's series above.
pub fn ln_factorial(q: u32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0; FACTORIAL_TABLE];
        for k in 2..FACTORIAL_TABLE {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    });
    if (q as usize) < FACTORIAL_TABLE {
        return table[q as usize];
    }
    let n = q as f64;
    n * n.ln() - n + 0.5 * (2.0 * PI * n).ln() + 1.0 / (12.0 * n) - 1.0 / (360.0 * n.powi(3))
}

fn split(params: &[f64]) -> [&[f64; ENV_DIM]; 4] {
    let chunk = |k: usize| -> &[f64; ENV_DIM] {
        params[k * ENV_DIM..(k + 1) * ENV_DIM].try_into().expect("chunk length")
    };
    [chunk(0), chunk(1), chunk(2), chunk(3)]
}

pub(crate) fn to_params(model: &ParticipantEnvModel) -> [f64; PARAM_DIM] {
    let mut p = [0.0; PARAM_DIM];
    for (k, block) in [&model.w_b, &model.w_p, &model.delta_b, &model.delta_n].into_iter().enumerate() {
        p[k * ENV_DIM..(k + 1) * ENV_DIM].copy_from_slice(block);
    }
    p
}

pub(crate) fn from_params(participant_id: u32, params: &[f64], p_app: f64) -> ParticipantEnvModel {
    let [w_b, w_p, delta_b, delta_n] = split(params);
    ParticipantEnvModel {
        participant_id,
        w_b: *w_b,
        w_p: *w_p,
        delta_b: *delta_b,
        delta_n: *delta_n,
        p_app,
        fit_log_posterior: None,
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-likelihood of one datum and its derivatives with respect to the two
/// linear predictors.
fn datum_terms(eta_b: f64, eta_p: f64, q: u32) -> (f64, f64, f64) {
    let lambda = eta_p.exp();
    // log P(Z=1) = log sigmoid(-eta_b), log P(Z=0) = log sigmoid(eta_b)
    let log_brush = -softplus(eta_b);
    let log_skip = -softplus(-eta_b);
    if q == 0 {
        let log_zero_given_brush = log_brush - lambda;
        let ll = log_add_exp(log_skip, log_zero_given_brush);
        // Posterior weight on "brushed but zero seconds".
        let w = (log_zero_given_brush - ll).exp();
        let skip = (log_skip - ll).exp();
        // dL/deta_b = s·p·(1 − e^{−λ}) / P(Q=0) = skip − P(Z=0)
        let d_eta_b = skip - super::sigmoid(eta_b);
        let d_eta_p = -w * lambda;
        (ll, d_eta_b, d_eta_p)
    } else {
        let qf = q as f64;
        let ll = log_brush + qf * eta_p - lambda - ln_factorial(q);
        (ll, -super::sigmoid(eta_b), qf - lambda)
    }
}

fn log_prior(params: &[f64]) -> f64 {
    let sq: f64 = params.iter().map(|x| x * x).sum();
    -0.5 * sq - 0.5 * params.len() as f64 * (2.0 * PI).ln()
}

fn objective(params: &[f64], data: &[Observation], grad: Option<&mut [f64]>) -> f64 {
    let [w_b, w_p, delta_b, delta_n] = split(params);
    let mut total = log_prior(params);
    let mut g_acc = [0.0; PARAM_DIM];
    let want_grad = grad.is_some();
    for obs in data {
        let g = &obs.g.0;
        let a = obs.action as f64;
        let adv_b = dot(delta_b, g);
        let adv_n = dot(delta_n, g);
        let eta_b = dot(g, w_b) - a * hinge(delta_b, g);
        let eta_p = dot(g, w_p) + a * hinge(delta_n, g);
        let (ll, d_b, d_p) = datum_terms(eta_b, eta_p, obs.oscb);
        total += ll;
        if want_grad {
            // Subgradient of max(x, 0) taken as 1 at x = 0 so the zero start can move.
            let on_b = if obs.action == 1 && adv_b >= 0.0 { 1.0 } else { 0.0 };
            let on_n = if obs.action == 1 && adv_n >= 0.0 { 1.0 } else { 0.0 };
            for k in 0..ENV_DIM {
                g_acc[k] += d_b * g[k];
                g_acc[ENV_DIM + k] += d_p * g[k];
                g_acc[2 * ENV_DIM + k] -= d_b * on_b * g[k];
                g_acc[3 * ENV_DIM + k] += d_p * on_n * g[k];
            }
        }
    }
    if let Some(grad) = grad {
        for (k, out) in grad.iter_mut().enumerate() {
            *out = g_acc[k] - params[k];
        }
    }
    total
}

/// Log likelihood of the data plus the `N(0, I)` log prior density of the weights.
pub fn zip_log_posterior(model: &ParticipantEnvModel, data: &[Observation]) -> f64 {
    objective(&to_params(model), data, None)
}

/// Log posterior and its gradient with respect to `[w_b, w_p, Δ_B, Δ_N]`.
pub fn zip_log_posterior_grad(params: &[f64], data: &[Observation]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; PARAM_DIM];
    let value = objective(params, data, Some(&mut grad));
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Random standard-normal starts in addition to the zero vector.
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub memory: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 20, max_iter: 1000, grad_tol: 1e-6, rel_tol: 1e-12, memory: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: ParticipantEnvModel,
    pub log_posterior: f64,
    pub starts: usize,
    pub converged_starts: usize,
    /// Best log posterior reached from each start, zero start first.
    pub start_values: Vec<f64>,
    /// Log posterior at each start point.
    pub initial_values: Vec<f64>,
}

struct Ascent {
    params: Vec<f64>,
    value: f64,
    initial: f64,
    converged: bool,
}

/// Limited-memory BFGS ascent with a backtracking Armijo line search.
fn lbfgs_ascent(start: Vec<f64>, data: &[Observation], opts: &FitOptions) -> Ascent {
    let n = start.len();
    let mut x = start;
    let (mut fx, mut gx) = zip_log_posterior_grad(&x, data);
    let initial = fx;
    if !fx.is_finite() {
        return Ascent { params: x, value: fx, initial, converged: false };
    }
    // Minimize the negative log posterior.
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for _ in 0..opts.max_iter {
        let neg_grad: Vec<f64> = gx.iter().map(|g| -g).collect();
        if norm(&neg_grad) <= opts.grad_tol * (1.0 + fx.abs()) {
            return Ascent { params: x, value: fx, initial, converged: true };
        }
        // Two-loop recursion on the minimization gradient.
        let mut q = neg_grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let alpha = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                q[i] -= alpha * y[i];
            }
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = history.back() {
            let yy: f64 = y.iter().map(|v| v * v).sum();
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let scale = sy / yy;
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                q[i] += s[i] * (alpha - beta);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope: f64 = dir.iter().zip(&neg_grad).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            history.clear();
            dir = gx.clone();
            slope = -gx.iter().map(|v| v * v).sum::<f64>();
        }
        let mut step = if history.is_empty() { 1.0 / norm(&dir).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (ft, gt) = zip_log_posterior_grad(&trial, data);
            if ft.is_finite() && -ft <= -fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gxn)) = accepted else {
            // No further ascent is possible along any tried step.
            return Ascent { params: x, value: fx, initial, converged: true };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gxn.iter().zip(&gx).map(|(a, b)| -(a - b)).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fxn - fx;
        x = xn;
        fx = fxn;
        gx = gxn;
        if sy > 1e-12 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        if improvement.abs() <= opts.rel_tol * (1.0 + fx.abs()) {
            return Ascent { params: x, value: fx, initial, converged: true };
        }
    }
    Ascent { params: x, value: fx, initial, converged: false }
}

/// MAP estimate from the zero vector plus `restarts` standard-normal starts;
/// the start reaching the highest log posterior wins.
pub fn map_fit<R: Rng + ?Sized>(
    participant_id: u32,
    data: &[Observation],
    opts: &FitOptions,
    rng: &mut R,
) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::input(format!("participant {participant_id}: no data to fit")));
    }
    let mut starts = vec![vec![0.0; PARAM_DIM]];
    for _ in 0..opts.restarts {
        starts.push((0..PARAM_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    }
    let runs: Vec<Ascent> = starts.into_iter().map(|s| lbfgs_ascent(s, data, opts)).collect();
    let converged_starts = runs.iter().filter(|r| r.converged && r.value.is_finite()).count();
    if converged_starts == 0 {
        let values: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.value)).collect();
        return Err(Error::Fit(format!(
            "participant {participant_id}: none of {} starts converged (final values {})",
            runs.len(),
            values.join(", ")
        )));
    }
    let best = runs
        .iter()
        .filter(|r| r.value.is_finite())
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one finite run");
    debug!(
        "participant {participant_id}: best log posterior {:.4} ({converged_starts}/{} converged)",
        best.value,
        runs.len()
    );
    let mut model = from_params(participant_id, &best.params, 0.5);
    model.fit_log_posterior = Some(best.value);
    Ok(FitResult {
        model,
        log_posterior: best.value,
        starts: runs.len(),
        converged_starts,
        start_values: runs.iter().map(|r| r.value).collect(),
        initial_values: runs.iter().map(|r| r.initial).collect(),
    })
}
