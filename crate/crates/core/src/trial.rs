//! Trial calendar, recruitment, decision-time indexing and the canonical
//! history store shared by the simulator and the analyses.

use std::collections::{BTreeMap, HashSet};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::bandit::{CostHook, PosteriorState};
use crate::features::{AlgState, EnvState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub num_participants: u32,
    pub days_per_participant: u32,
    pub decisions_per_day: u32,
    pub cohort_size: u32,
    pub cohort_interval_days: u32,
    pub trial_start_date: NaiveDate,
    pub update_weekday: Weekday,
    pub master_seed: u64,
    pub reward_cost_weight: f64,
    pub reward_cost_hook: CostHook,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            num_participants: 72,
            days_per_participant: 70,
            decisions_per_day: 2,
            cohort_size: 5,
            cohort_interval_days: 14,
            trial_start_date: NaiveDate::from_ymd_opt(2023, 9, 1).expect("valid date"),
            update_weekday: Weekday::Sun,
            master_seed: 0,
            reward_cost_weight: 0.0,
            reward_cost_hook: CostHook::Zero,
        }
    }
}

impl TrialConfig {
    /// Decision times per participant.
    pub fn horizon(&self) -> u32 {
        self.days_per_participant * self.decisions_per_day
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_participants", self.num_participants),
            ("days_per_participant", self.days_per_participant),
            ("cohort_size", self.cohort_size),
            ("cohort_interval_days", self.cohort_interval_days),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decisions_per_day != 2 {
            return Err(Error::Config(
                "decisions_per_day must be 2 (morning and evening)".into(),
            ));
        }
        if !(self.reward_cost_weight >= 0.0 && self.reward_cost_weight.is_finite()) {
            return Err(Error::Config("reward_cost_weight must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Start dates for every participant, in id order.
    pub fn recruitment(&self) -> Vec<(u32, NaiveDate)> {
        recruitment_schedule(self)
    }

    /// Last calendar day on which any participant has a decision time.
    pub fn last_trial_date(&self) -> NaiveDate {
        let last_start = self
            .recruitment()
            .last()
            .map(|(_, d)| *d)
            .unwrap_or(self.trial_start_date);
        add_days(last_start, self.days_per_participant as i64 - 1)
    }

    /// Total calendar span of the trial in days.
    pub fn trial_span_days(&self) -> i64 {
        (self.last_trial_date() - self.trial_start_date).num_days() + 1
    }
}

pub(crate) fn add_days(date: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        date.checked_add_days(Days::new(days as u64))
    } else {
        date.checked_sub_days(Days::new(days.unsigned_abs()))
    }
    .expect("date arithmetic within calendar range")
}

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Participants in cohorts of `cohort_size`, cohorts `cohort_interval_days`
/// apart, starting on `trial_start_date`. Ids are dense `1..=N`.
pub fn recruitment_schedule(config: &TrialConfig) -> Vec<(u32, NaiveDate)> {
    let cohort = config.cohort_size.max(1);
    (1..=config.num_participants)
        .map(|id| {
            let cohort_index = (id - 1) / cohort;
            let offset = cohort_index as i64 * config.cohort_interval_days as i64;
            (id, add_days(config.trial_start_date, offset))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UpdateTime {
    /// 1-based counter of weekly updates.
    pub index: u32,
    pub date: NaiveDate,
}

/// Weekly update times on `update_weekday`, from the first such weekday on or
/// after the trial start through the last participant's final day.
pub fn update_times(config: &TrialConfig) -> Vec<UpdateTime> {
    let start = config.trial_start_date;
    let ahead = (7 + config.update_weekday.num_days_from_monday() as i64
        - start.weekday().num_days_from_monday() as i64)
        % 7;
    let last = config.last_trial_date();
    let mut out = Vec::new();
    let mut date = add_days(start, ahead);
    let mut index = 1;
    while date <= last {
        out.push(UpdateTime { index, date });
        index += 1;
        date = add_days(date, 7);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub participant_id: u32,
    /// Decision index, 1-based.
    pub t: u32,
    pub date: NaiveDate,
    /// 0 = morning, 1 = evening.
    pub slot: u8,
}

impl DecisionPoint {
    pub fn new(participant_id: u32, start: NaiveDate, day_index: u32, slot: u8) -> Self {
        debug_assert!(day_index >= 1 && slot <= 1);
        Self {
            participant_id,
            t: decision_index(day_index, slot),
            date: add_days(start, day_index as i64 - 1),
            slot,
        }
    }

    /// Day in trial, 1-based.
    pub fn day_index(&self) -> u32 {
        (self.t - 1) / 2 + 1
    }
}

pub fn decision_index(day_index: u32, slot: u8) -> u32 {
    2 * (day_index - 1) + slot as u32 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    MethodI,
    MethodIi,
}

impl Fallback {
    pub fn as_str(self) -> &'static str {
        match self {
            Fallback::None => "none",
            Fallback::MethodI => "method_i",
            Fallback::MethodIi => "method_ii",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Fallback::None),
            "method_i" => Some(Fallback::MethodI),
            "method_ii" => Some(Fallback::MethodIi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub point: DecisionPoint,
    pub alg_state: AlgState,
    pub env_state: EnvState,
    pub pi: f64,
    pub action: u8,
    pub oscb: u32,
    pub reward: f64,
    pub fallback: Fallback,
    pub excluded_from_update: bool,
}

/// One row of the data used to refit the reward model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRow {
    pub participant_id: u32,
    pub alg_state: AlgState,
    pub pi: f64,
    pub action: u8,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    pub tau: UpdateTime,
    /// Set only when each participant has their own posterior.
    pub participant_id: Option<u32>,
    pub posterior: PosteriorState,
}

/// Append-only store of decision records and posterior snapshots.
#[derive(Debug, Clone, Default)]
pub struct TrialHistory {
    records: Vec<DecisionRecord>,
    keys: HashSet<(u32, u32)>,
    snapshots: Vec<PosteriorSnapshot>,
    start_dates: BTreeMap<u32, NaiveDate>,
}

impl TrialHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_participant(&mut self, participant_id: u32, start: NaiveDate) {
        self.start_dates.insert(participant_id, start);
    }

    pub fn start_dates(&self) -> &BTreeMap<u32, NaiveDate> {
        &self.start_dates
    }

    pub fn push(&mut self, record: DecisionRecord) -> Result<()> {
        let key = (record.point.participant_id, record.point.t);
        if !self.keys.insert(key) {
            return Err(Error::input(format!(
                "duplicate decision record for participant {} at t={}",
                key.0, key.1
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_snapshot(&mut self, snapshot: PosteriorSnapshot) -> Result<()> {
        if let Some(last) = self.snapshots.last() {
            let ordered = (last.tau.index, last.participant_id) < (snapshot.tau.index, snapshot.participant_id);
            if !ordered {
                return Err(Error::input(format!(
                    "snapshot for update {} is out of order",
                    snapshot.tau.index
                )));
            }
        }
        self.snapshots.push(snapshot);
        Ok(())
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> impl Iterator<Item = &mut DecisionRecord> {
        self.records.iter_mut()
    }

    pub fn snapshots(&self) -> &[PosteriorSnapshot] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records for one participant in decision order.
    pub fn participant_records(&self, participant_id: u32) -> Vec<&DecisionRecord> {
        let mut rows: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.point.participant_id == participant_id)
            .collect();
        rows.sort_by_key(|r| r.point.t);
        rows
    }

    /// Build a history directly from records (e.g. after reading a CSV).
    pub fn from_records(records: Vec<DecisionRecord>) -> Result<Self> {
        let mut history = Self::new();
        for record in records {
            history.push(record)?;
        }
        Ok(history)
    }
}

/// Non-excluded records with decision date strictly before `tau_date`.
pub fn batch_for_update(history: &TrialHistory, tau_date: NaiveDate) -> Vec<BatchRow> {
    history
        .records()
        .iter()
        .filter(|r| !r.excluded_from_update && r.point.date < tau_date)
        .map(|r| BatchRow {
            participant_id: r.point.participant_id,
            alg_state: r.alg_state,
            pi: r.pi,
            action: r.action,
            reward: r.reward,
        })
        .collect()
}
