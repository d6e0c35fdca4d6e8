//! Post-deployment analyses: the standardized predicted advantage, the
//! did-we-learn resampling procedure, pooling comparisons and the outcome and
//! error metrics used to judge a simulation environment.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{PolicyMode, PosteriorState};
use crate::environment::{make_null_environment, StateGrid, TILDE_DAY_NORM, TILDE_WEEKEND};
use crate::features::{AlgState, EnvState};
use crate::orchestrator::{run_trial, TrialInputs};
use crate::rng::rep_seed;
use crate::trial::{PosteriorSnapshot, TrialHistory};
use crate::{Error, Result};

/// Linear-interpolation quantile of already sorted data: position
/// `q·(n−1)` between its floor and ceiling order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Analysis(format!("quantile {q} of {} values", sorted.len())));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample variance with the `n − 1` divisor; `None` below two values.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    Some(values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
}

/// `μ_βᵀf / √(fᵀΣ_βf)`.
pub fn standardized_predicted_advantage(
    mu_beta: &[f64],
    sigma_beta: &nalgebra::DMatrix<f64>,
    f: &AlgState,
) -> Result<f64> {
    let f = nalgebra::DVector::from_column_slice(f.as_slice());
    if mu_beta.len() != f.len() || sigma_beta.nrows() != f.len() || sigma_beta.ncols() != f.len() {
        return Err(Error::Analysis("advantage block dimensions do not match the state".into()));
    }
    let num: f64 = mu_beta.iter().zip(f.iter()).map(|(m, x)| m * x).sum();
    let var = f.dot(&(sigma_beta * &f));
    if !(var > 0.0) {
        return Err(Error::Analysis(format!("standardized advantage undefined: fᵀΣf = {var}")));
    }
    Ok(num / var.sqrt())
}

pub fn posterior_statistic(posterior: &PosteriorState, f: &AlgState) -> Result<f64> {
    let (mu, sigma) = posterior.beta_block();
    standardized_predicted_advantage(mu.as_slice(), &sigma, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTrajectory {
    pub taus: Vec<u32>,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

/// Statistic at every pooled snapshot, in update order.
pub fn advantage_trajectory(snapshots: &[PosteriorSnapshot], f: &AlgState) -> Result<AdvantageTrajectory> {
    let mut out = AdvantageTrajectory { taus: Vec::new(), dates: Vec::new(), values: Vec::new() };
    for snap in snapshots {
        if snap.participant_id.is_some() {
            return Err(Error::Analysis("did-we-learn needs pooled snapshots".into()));
        }
        if out.taus.last().is_some_and(|t| *t >= snap.tau.index) {
            return Err(Error::Analysis("snapshots are not strictly ordered by update time".into()));
        }
        out.taus.push(snap.tau.index);
        out.dates.push(snap.tau.date);
        out.values.push(posterior_statistic(&snap.posterior, f)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullBand {
    pub q_low: f64,
    pub q_high: f64,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// `rep_values[k][r]`: statistic at the k-th update time in rep r.
    pub rep_values: Vec<Vec<f64>>,
}

impl NullBand {
    pub fn from_rep_values(rep_values: Vec<Vec<f64>>, q_low: f64, q_high: f64) -> Result<Self> {
        if q_low > q_high {
            return Err(Error::Analysis(format!("quantile levels {q_low} > {q_high}")));
        }
        let mut low = Vec::with_capacity(rep_values.len());
        let mut high = Vec::with_capacity(rep_values.len());
        for vals in &rep_values {
            if vals.len() < 2 {
                return Err(Error::Analysis("a null band needs at least 2 reps".into()));
            }
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            low.push(quantile_sorted(&sorted, q_low)?);
            high.push(quantile_sorted(&sorted, q_high)?);
        }
        Ok(Self { q_low, q_high, low, high, rep_values })
    }

    pub fn contains(&self, k: usize, value: f64) -> bool {
        self.low[k] <= value && value <= self.high[k]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DwlOptions {
    pub reps: usize,
    pub q_low: f64,
    pub q_high: f64,
    pub seed: u64,
}

impl Default for DwlOptions {
    fn default() -> Self {
        Self { reps: 500, q_low: 0.025, q_high: 0.975, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwlResult {
    pub state: AlgState,
    pub reference: AdvantageTrajectory,
    pub band: NullBand,
}

impl DwlResult {
    pub fn fraction_inside(&self) -> f64 {
        let n = self.reference.values.len();
        let inside = (0..n).filter(|&k| self.band.contains(k, self.reference.values[k])).count();
        inside as f64 / n.max(1) as f64
    }
}

/// Environment state at which the null environment removes the advantage:
/// `f`'s first four features with the mean weekend indicator and mid-trial day.
pub fn null_target_state(f: &AlgState) -> EnvState {
    EnvState::from_alg(f, TILDE_WEEKEND, TILDE_DAY_NORM)
}

/// Reruns the trial `reps` times in the null environment for `f` and compares
/// the reference trajectory with the per-update-time distribution of the
/// statistic. `inputs.models` are the non-null models; the policy mode must be
/// full pooling.
pub fn did_we_learn(
    reference: &[PosteriorSnapshot],
    inputs: TrialInputs<'_>,
    grid: &StateGrid,
    f: &AlgState,
    opts: &DwlOptions,
) -> Result<DwlResult> {
    if inputs.mode != PolicyMode::FullPooling {
        return Err(Error::Analysis("did-we-learn reruns the pooled algorithm".into()));
    }
    if opts.reps < 2 {
        return Err(Error::Analysis(format!("did-we-learn needs at least 2 reps, got {}", opts.reps)));
    }
    let reference = advantage_trajectory(reference, f)?;
    let null_models = make_null_environment(inputs.models, &null_target_state(f), grid)?;
    let null_inputs = TrialInputs { models: &null_models, ..inputs };
    let reps: Vec<Vec<f64>> = (0..opts.reps as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let run = run_trial(null_inputs, rep_seed(opts.seed, r))?;
            let traj = advantage_trajectory(run.history.snapshots(), f)?;
            if traj.taus != reference.taus || traj.dates != reference.dates {
                return Err(Error::Analysis(format!(
                    "update calendar mismatch: reference has {} update times ({:?}..), rep {r} has {} ({:?}..)",
                    reference.taus.len(),
                    reference.dates.first(),
                    traj.taus.len(),
                    traj.dates.first()
                )));
            }
            Ok(traj.values)
        })
        .collect::<Result<_>>()?;
    let per_tau: Vec<Vec<f64>> = (0..reference.taus.len()).map(|k| reps.iter().map(|r| r[k]).collect()).collect();
    let band = NullBand::from_rep_values(per_tau, opts.q_low, opts.q_high)?;
    Ok(DwlResult { state: *f, reference, band })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunValue {
    pub mean: f64,
    pub first_quartile: f64,
}

/// Per-participant time-averaged OSCB.
pub fn participant_averages(history: &TrialHistory) -> BTreeMap<u32, f64> {
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in history.records() {
        let e = sums.entry(r.point.participant_id).or_default();
        e.0 += r.oscb as f64;
        e.1 += 1;
    }
    sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect()
}

pub fn value_from_averages(averages: &[f64]) -> Result<RunValue> {
    let mean = mean(averages).ok_or_else(|| Error::Analysis("no participants to average".into()))?;
    Ok(RunValue { mean, first_quartile: quantile(averages, 0.25)? })
}

pub fn value_metrics(history: &TrialHistory) -> Result<RunValue> {
    let avgs: Vec<f64> = participant_averages(history).into_values().collect();
    value_from_averages(&avgs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    pub mode: PolicyMode,
    pub mean: f64,
    pub mean_se: f64,
    pub q1: f64,
    pub q1_se: f64,
    pub reps: usize,
    /// Set when only one rep ran, in which case both SEs are 0.
    pub single_rep: bool,
    pub rep_values: Vec<RunValue>,
}

fn summarize(mode: PolicyMode, rep_values: Vec<RunValue>) -> ValueSummary {
    let reps = rep_values.len();
    let means: Vec<f64> = rep_values.iter().map(|v| v.mean).collect();
    let q1s: Vec<f64> = rep_values.iter().map(|v| v.first_quartile).collect();
    let se = |xs: &[f64]| sample_variance(xs).map_or(0.0, |v| (v / xs.len() as f64).sqrt());
    ValueSummary {
        mode,
        mean: mean(&means).unwrap_or(f64::NAN),
        mean_se: se(&means),
        q1: mean(&q1s).unwrap_or(f64::NAN),
        q1_se: se(&q1s),
        reps,
        single_rep: reps == 1,
        rep_values,
    }
}

/// Runs every mode in `modes` on the same environments with the same per-rep
/// seeds; rows come back in the order of `modes`.
pub fn pooling_experiment(
    inputs: TrialInputs<'_>,
    modes: &[PolicyMode],
    reps: usize,
    seed: u64,
) -> Result<Vec<ValueSummary>> {
    if reps == 0 {
        return Err(Error::Analysis("pooling experiment needs at least one rep".into()));
    }
    let per_rep: Vec<Vec<RunValue>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            modes
                .iter()
                .map(|&mode| value_metrics(&run_trial(TrialInputs { mode, ..inputs }, rep_seed(seed, r))?.history))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(modes
        .iter()
        .enumerate()
        .map(|(k, &mode)| summarize(mode, per_rep.iter().map(|r| r[k]).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub proportion_zero: f64,
    pub avg_of_avg_nonzero_participant: Option<f64>,
    pub avg_nonzero_in_trial: Option<f64>,
    pub var_of_avg_nonzero_participant: Option<f64>,
    pub var_nonzero_in_trial: Option<f64>,
    pub var_of_avg_participant: Option<f64>,
    pub avg_of_var_participant: Option<f64>,
    /// Participants without a single non-zero outcome, left out of the
    /// non-zero participant averages.
    pub skipped_all_zero_participants: Vec<u32>,
}

fn by_participant(history: &TrialHistory) -> BTreeMap<u32, Vec<f64>> {
    let mut out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in history.records() {
        out.entry(r.point.participant_id).or_default().push(r.oscb as f64);
    }
    out
}

/// The seven outcome metrics. Undefined values (no non-zero outcome, fewer
/// than two values for a variance) are `None`.
pub fn outcome_metrics(history: &TrialHistory) -> Result<OutcomeMetrics> {
    if history.is_empty() {
        return Err(Error::Analysis("outcome metrics of an empty history".into()));
    }
    let groups = by_participant(history);
    let all: Vec<f64> = history.records().iter().map(|r| r.oscb as f64).collect();
    let nonzero: Vec<f64> = all.iter().copied().filter(|q| *q > 0.0).collect();

    let mut skipped = Vec::new();
    let mut nonzero_avgs = Vec::new();
    let mut avgs = Vec::new();
    let mut vars = Vec::new();
    for (id, qs) in &groups {
        let nz: Vec<f64> = qs.iter().copied().filter(|q| *q > 0.0).collect();
        match mean(&nz) {
            Some(m) => nonzero_avgs.push(m),
            None => skipped.push(*id),
        }
        avgs.push(mean(qs).expect("participant has records"));
        vars.extend(sample_variance(qs));
    }
    Ok(OutcomeMetrics {
        proportion_zero: (all.len() - nonzero.len()) as f64 / all.len() as f64,
        avg_of_avg_nonzero_participant: mean(&nonzero_avgs),
        avg_nonzero_in_trial: mean(&nonzero),
        var_of_avg_nonzero_participant: sample_variance(&nonzero_avgs),
        var_nonzero_in_trial: sample_variance(&nonzero),
        var_of_avg_participant: sample_variance(&avgs),
        avg_of_var_participant: (vars.len() == groups.len()).then(|| mean(&vars)).flatten(),
        skipped_all_zero_participants: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

/// Errors of simulated against reference OSCB over all aligned
/// `(participant, t)` pairs.
pub fn error_metrics(sim: &TrialHistory, reference: &TrialHistory) -> Result<ErrorMetrics> {
    let key = |h: &TrialHistory| -> BTreeMap<(u32, u32), f64> {
        h.records().iter().map(|r| ((r.point.participant_id, r.point.t), r.oscb as f64)).collect()
    };
    let (a, b) = (key(sim), key(reference));
    let ka: BTreeSet<_> = a.keys().copied().collect();
    let kb: BTreeSet<_> = b.keys().copied().collect();
    if ka != kb {
        let describe = |s: BTreeSet<&(u32, u32)>| {
            let shown: Vec<String> = s.iter().take(10).map(|(i, t)| format!("({i},{t})")).collect();
            let more = s.len().saturating_sub(10);
            format!("{}{}", shown.join(" "), if more > 0 { format!(" and {more} more") } else { String::new() })
        };
        return Err(Error::Analysis(format!(
            "histories are misaligned; missing from reference: [{}]; missing from simulation: [{}]",
            describe(ka.difference(&kb).collect()),
            describe(kb.difference(&ka).collect())
        )));
    }
    if a.is_empty() {
        return Err(Error::Analysis("error metrics of empty histories".into()));
    }
    let n = a.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (k, q_sim) in &a {
        let d = q_sim - b[k];
        se += d * d;
        ae += d.abs();
    }
    let mse = se / n;
    Ok(ErrorMetrics { mse, rmse: mse.sqrt(), mae: ae / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::Prior;
    use nalgebra::DMatrix;

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[100.0, 40.0, 70.0], 0.25).unwrap(), 55.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[7.0], 0.9).unwrap(), 7.0);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn prior_statistic() {
        let post = Prior::default().to_posterior();
        let f = AlgState::new([0.0, -0.7, -0.6, 1.0, 1.0]);
        let v = posterior_statistic(&post, &f).unwrap();
        let want = 53.0 / (0.7f64.powi(2) * 33.0f64.powi(2) + 0.36 * 35.0f64.powi(2) + 56.0f64.powi(2) + 17.0f64.powi(2)).sqrt();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.7990).abs() < 1e-4);
    }

    #[test]
    fn statistic_zero_denominator() {
        let f = AlgState::new([0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(standardized_predicted_advantage(&[0.0; 5], &DMatrix::zeros(5, 5), &f).is_err());
    }

    #[test]
    fn band_rejects_single_rep() {
        assert!(NullBand::from_rep_values(vec![vec![1.0]], 0.025, 0.975).is_err());
        let b = NullBand::from_rep_values(vec![vec![1.0, 2.0, 3.0]], 0.0, 1.0).unwrap();
        assert_eq!((b.low[0], b.high[0]), (1.0, 3.0));
    }

    #[test]
    fn variance_divisor() {
        assert_eq!(sample_variance(&[1.0, 3.0]), Some(2.0));
        assert_eq!(sample_variance(&[1.0]), None);
    }
}
