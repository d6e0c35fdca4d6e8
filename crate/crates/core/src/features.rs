//! Algorithm state `f(s)` (5 features) and environment state `g(s)`
//! (7 features) built from raw observables.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Decision times in the exponential-average window (7 days, 2 per day).
pub const WINDOW: usize = 14;
/// Discount used by both exponential averages.
pub const GAMMA: f64 = 13.0 / 14.0;
/// Per-decision OSCB cap in seconds.
pub const OSCB_CAP: f64 = 181.0;
const OSCB_MID: f64 = OSCB_CAP / 2.0;

pub const ALG_DIM: usize = 5;
pub const ENV_DIM: usize = 7;

/// `[time_of_day, b_bar_norm, a_bar_norm, prior_day_app, intercept]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgState(pub [f64; ALG_DIM]);

/// `[time_of_day, b_bar_norm, a_bar_norm, prior_day_app, weekend, day_norm, intercept]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState(pub [f64; ENV_DIM]);

impl AlgState {
    pub fn new(values: [f64; ALG_DIM]) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Same state with the time-of-day feature set to `slot`.
    pub fn with_slot(mut self, slot: u8) -> Self {
        self.0[0] = slot as f64;
        self
    }

    /// Checks the binary/bounded feature ranges and the unit intercept.
    pub fn is_valid(&self) -> bool {
        let f = &self.0;
        is_binary(f[0])
            && in_unit_ball(f[1])
            && in_unit_ball(f[2])
            && is_binary(f[3])
            && f[4] == 1.0
    }

    /// Parse a comma-separated literal such as `"1,-0.7,-0.6,0,1"`.
    pub fn parse_literal(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::input(format!("state literal {text:?}: {e}")))?;
        let arr: [f64; ALG_DIM] = values.try_into().map_err(|v: Vec<f64>| {
            Error::input(format!("state literal needs {ALG_DIM} values, got {}", v.len()))
        })?;
        Ok(Self(arr))
    }
}

impl EnvState {
    pub fn new(values: [f64; ENV_DIM]) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn with_slot(mut self, slot: u8) -> Self {
        self.0[0] = slot as f64;
        self
    }

    /// The algorithm features embedded in this environment state.
    pub fn alg_part(&self) -> AlgState {
        let g = &self.0;
        AlgState([g[0], g[1], g[2], g[3], 1.0])
    }

    /// Environment state sharing `f`'s features with the given calendar features.
    pub fn from_alg(f: &AlgState, weekend: f64, day_norm: f64) -> Self {
        let f = &f.0;
        Self([f[0], f[1], f[2], f[3], weekend, day_norm, 1.0])
    }

    pub fn is_valid(&self) -> bool {
        let g = &self.0;
        is_binary(g[0])
            && in_unit_ball(g[1])
            && in_unit_ball(g[2])
            && is_binary(g[3])
            && (0.0..=1.0).contains(&g[4])
            && in_unit_ball(g[5])
            && g[6] == 1.0
    }
}

fn is_binary(x: f64) -> bool {
    x == 0.0 || x == 1.0
}

fn in_unit_ball(x: f64) -> bool {
    (-1.0..=1.0).contains(&x)
}

/// Raw per-decision observables from which both states are built.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservables {
    pub slot: u8,
    /// Most recent first; zero-padded before trial start.
    pub past_oscb: [f64; WINDOW],
    /// Most recent first; zero-padded before trial start.
    pub past_actions: [f64; WINDOW],
    pub opened_app_prior_day: u8,
    pub is_weekend: u8,
    pub day_in_trial: u32,
}

impl RawObservables {
    /// Observables for a participant with no history yet.
    pub fn fresh(slot: u8, day_in_trial: u32, is_weekend: bool) -> Self {
        Self {
            slot,
            past_oscb: [0.0; WINDOW],
            past_actions: [0.0; WINDOW],
            opened_app_prior_day: 0,
            is_weekend: is_weekend as u8,
            day_in_trial,
        }
    }
}

/// Normalizing constant `c_γ = (1-γ)/(1-γ^14)`.
pub fn c_gamma(gamma: f64) -> f64 {
    (1.0 - gamma) / (1.0 - gamma.powi(WINDOW as i32))
}

/// Discounted average `c_γ Σ_j γ^{j-1} window[j]` over a most-recent-first window.
pub fn exp_average(window: &[f64], gamma: f64) -> Result<f64> {
    if window.len() != WINDOW {
        return Err(Error::input(format!(
            "exponential-average window must have {WINDOW} entries, got {}",
            window.len()
        )));
    }
    let c = c_gamma(gamma);
    let mut weight = 1.0;
    let mut acc = 0.0;
    for &x in window {
        acc += weight * x;
        weight *= gamma;
    }
    Ok(c * acc)
}

/// A normalized feature value plus whether the input had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub value: f64,
    pub clamped: bool,
}

/// Maps `[0, 181]` seconds affinely onto `[-1, 1]`, with 90.5 s at zero.
pub fn normalize_oscb_avg(seconds: f64) -> Normalized {
    let clamped = !(0.0..=OSCB_CAP).contains(&seconds);
    if clamped {
        warn!("OSCB average {seconds} outside [0, {OSCB_CAP}]; clamping");
    }
    let s = seconds.clamp(0.0, OSCB_CAP);
    Normalized { value: (s - OSCB_MID) / OSCB_MID, clamped }
}

/// Maps a prompt fraction in `[0, 1]` onto `[-1, 1]`.
pub fn normalize_dosage_avg(fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!("dosage fraction {fraction} outside [0, 1]")));
    }
    Ok((fraction - 0.5) / 0.5)
}

/// Maps day 1..=70 onto `[-1, 1]`.
pub fn normalize_day_in_trial(day: u32, days_per_participant: u32) -> Result<f64> {
    if day == 0 || day > days_per_participant {
        return Err(Error::input(format!(
            "day_in_trial {day} outside 1..={days_per_participant}"
        )));
    }
    if days_per_participant == 1 {
        return Ok(0.0);
    }
    let mid = (1.0 + days_per_participant as f64) / 2.0;
    let half = (days_per_participant as f64 - 1.0) / 2.0;
    Ok((day as f64 - mid) / half)
}

pub fn build_alg_state(raw: &RawObservables) -> Result<AlgState> {
    if raw.slot > 1 || raw.opened_app_prior_day > 1 {
        return Err(Error::input("slot and app indicator must be 0 or 1"));
    }
    if raw.past_oscb.iter().any(|q| *q < 0.0) {
        return Err(Error::input("negative OSCB in window"));
    }
    let b_bar = normalize_oscb_avg(exp_average(&raw.past_oscb, GAMMA)?).value;
    let a_bar = normalize_dosage_avg(exp_average(&raw.past_actions, GAMMA)?.clamp(0.0, 1.0))?;
    Ok(AlgState([
        raw.slot as f64,
        b_bar,
        a_bar,
        raw.opened_app_prior_day as f64,
        1.0,
    ]))
}

/// Environment state for a 70-day participant window.
pub fn build_env_state(raw: &RawObservables) -> Result<EnvState> {
    build_env_state_with_horizon(raw, 70)
}

pub fn build_env_state_with_horizon(raw: &RawObservables, days: u32) -> Result<EnvState> {
    let f = build_alg_state(raw)?;
    let day_norm = normalize_day_in_trial(raw.day_in_trial, days)?;
    Ok(EnvState::from_alg(&f, raw.is_weekend as f64, day_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Direct weighted sum, written out without the shared helper.
    fn oracle_average(window: &[f64]) -> f64 {
        let g: f64 = 13.0 / 14.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, x) in window.iter().enumerate() {
            num += g.powi(j as i32) * x;
            den += g.powi(j as i32);
        }
        num / den
    }

    #[test]
    fn exp_average_examples() {
        assert!((exp_average(&[100.0; WINDOW], GAMMA).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(exp_average(&[0.0; WINDOW], GAMMA).unwrap(), 0.0);
        let mut w = [0.0; WINDOW];
        w[0] = 181.0;
        let v = exp_average(&w, GAMMA).unwrap();
        assert!((v - oracle_average(&w)).abs() < 1e-12);
        assert!((v - 20.02).abs() < 1e-2, "got {v}");
        assert!(exp_average(&[1.0; 13], GAMMA).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let c = c_gamma(GAMMA);
        let total: f64 = (0..WINDOW).map(|j| c * GAMMA.powi(j as i32)).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn oscb_normalization_anchors() {
        assert_eq!(normalize_oscb_avg(90.5).value, 0.0);
        assert_eq!(normalize_oscb_avg(0.0).value, -1.0);
        assert_eq!(normalize_oscb_avg(181.0).value, 1.0);
        let v = normalize_oscb_avg(28.0).value;
        assert!((v - (-0.690_607_734_806_629_8)).abs() < 1e-12);
        let high = normalize_oscb_avg(250.0);
        assert!(high.clamped && high.value == 1.0);
        assert!(!normalize_oscb_avg(10.0).clamped);
    }

    #[test]
    fn dosage_normalization_anchors() {
        assert_eq!(normalize_dosage_avg(0.5).unwrap(), 0.0);
        assert!((normalize_dosage_avg(0.2).unwrap() + 0.6).abs() < 1e-12);
        assert_eq!(normalize_dosage_avg(0.0).unwrap(), -1.0);
        assert!(normalize_dosage_avg(1.2).is_err());
    }

    #[test]
    fn new_participant_state() {
        let raw = RawObservables::fresh(0, 1, false);
        assert_eq!(build_alg_state(&raw).unwrap().0, [0.0, -1.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn steady_state_maps_to_zero_features() {
        let mut actions = [0.0; WINDOW];
        // A 50% prompt average needs weights summing to one half; alternate
        // values do not give exactly 0.5 under geometric weights, so use a
        // constant 0.5 window as the "half the time" dose.
        actions.iter_mut().for_each(|a| *a = 0.5);
        let raw = RawObservables {
            slot: 1,
            past_oscb: [90.5; WINDOW],
            past_actions: actions,
            opened_app_prior_day: 1,
            is_weekend: 0,
            day_in_trial: 10,
        };
        let f = build_alg_state(&raw).unwrap();
        for (got, want) in f.0.iter().zip([1.0, 0.0, 0.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn slot_flip_changes_only_first_feature() {
        let mut raw = RawObservables::fresh(0, 5, false);
        raw.past_oscb[2] = 60.0;
        raw.past_actions[0] = 1.0;
        let a = build_alg_state(&raw).unwrap();
        raw.slot = 1;
        let b = build_alg_state(&raw).unwrap();
        assert_ne!(a.0[0], b.0[0]);
        assert_eq!(a.0[1..], b.0[1..]);
    }

    #[test]
    fn day_normalization() {
        assert_eq!(normalize_day_in_trial(1, 70).unwrap(), -1.0);
        assert_eq!(normalize_day_in_trial(70, 70).unwrap(), 1.0);
        let d36 = normalize_day_in_trial(36, 70).unwrap();
        assert!((d36 - 0.5 / 34.5).abs() < 1e-15);
        assert!((d36 - 0.0145).abs() < 1e-4);
        assert!(normalize_day_in_trial(0, 70).is_err());
        assert!(normalize_day_in_trial(71, 70).is_err());
    }

    #[test]
    fn env_state_weekend_flag() {
        let mut raw = RawObservables::fresh(1, 1, true);
        let g = build_env_state(&raw).unwrap();
        assert_eq!(g.0[4], 1.0);
        assert_eq!(g.0[5], -1.0);
        raw.day_in_trial = 71;
        assert!(build_env_state(&raw).is_err());
    }

    #[test]
    fn parse_state_literal() {
        let f = AlgState::parse_literal("0,-0.7,-0.6,0,1").unwrap();
        assert_eq!(f.0, [0.0, -0.7, -0.6, 0.0, 1.0]);
        assert!(AlgState::parse_literal("0,1").is_err());
        assert!(AlgState::parse_literal("a,b,c,d,e").is_err());
    }

    fn raw_strategy() -> impl Strategy<Value = RawObservables> {
        (
            0u8..2,
            proptest::array::uniform14(0.0f64..=181.0),
            proptest::array::uniform14(0u8..2),
            0u8..2,
            0u8..2,
            1u32..=70,
        )
            .prop_map(|(slot, oscb, acts, app, weekend, day)| RawObservables {
                slot,
                past_oscb: oscb,
                past_actions: acts.map(|a| a as f64),
                opened_app_prior_day: app,
                is_weekend: weekend,
                day_in_trial: day,
            })
    }

    proptest! {
        #[test]
        fn built_states_satisfy_invariants(raw in raw_strategy()) {
            let f = build_alg_state(&raw).unwrap();
            let g = build_env_state(&raw).unwrap();
            prop_assert!(f.is_valid());
            prop_assert!(g.is_valid());
            prop_assert_eq!(g.alg_part(), f);
        }

        #[test]
        fn exp_average_is_linear(
            a in proptest::array::uniform14(-100.0f64..100.0),
            b in proptest::array::uniform14(-100.0f64..100.0),
            s in -3.0f64..3.0,
        ) {
            let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let lhs = exp_average(&combo, GAMMA).unwrap();
            let rhs = exp_average(&a, GAMMA).unwrap() + s * exp_average(&b, GAMMA).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
            prop_assert!((exp_average(&a, GAMMA).unwrap() - oracle_average(&a)).abs() < 1e-9);
        }
    }
}
