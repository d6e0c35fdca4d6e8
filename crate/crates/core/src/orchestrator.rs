//! Day-by-day replay of the deployed pipeline.
//!
//! Each simulated morning runs the daily job (batch ingest, then action
//! selection and schedule push) for every participant in the trial; each
//! update weekday first refits the reward model from the prior on all data
//! observed before that date. Injected faults trigger the fallback methods:
//!
//! - (i) service down: the participant keeps executing the last pushed schedule;
//! - (ii) schedule construction failure: a fresh schedule with every action
//!   drawn with probability 0.5;
//! - (iii) data retrieval failure: the day's records are stored but excluded
//!   from every update batch.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{
    fit_reward_model, make_schedule, reward, select_action, ActionSchedule, ActionSelector, PolicyMode,
    PosteriorState, Prior, Provenance, ScheduleEntry, SmoothingConfig,
};
use crate::environment::{app_open_sample, zip_sample, ParticipantEnvModel};
use crate::features::{build_alg_state, build_env_state_with_horizon, RawObservables, WINDOW};
use crate::rng::{stream, StreamLabel};
use crate::trial::{
    add_days, batch_for_update, is_weekend, update_times, DecisionPoint, DecisionRecord, Fallback,
    PosteriorSnapshot, TrialConfig, TrialHistory, UpdateTime,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    ServiceDown,
    ScheduleConstructionFailure,
    DataRetrievalFailure,
}

impl FaultType {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultType::ServiceDown => "service_down",
            FaultType::ScheduleConstructionFailure => "schedule_construction_failure",
            FaultType::DataRetrievalFailure => "data_retrieval_failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::ServiceDown, Self::ScheduleConstructionFailure, Self::DataRetrievalFailure]
            .into_iter()
            .find(|f| f.as_str() == s)
    }

    /// The fallback method that handles this fault.
    pub fn fallback(self) -> FallbackMethod {
        match self {
            FaultType::ServiceDown => FallbackMethod::I,
            FaultType::ScheduleConstructionFailure => FallbackMethod::Ii,
            FaultType::DataRetrievalFailure => FallbackMethod::Iii,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMethod {
    I,
    Ii,
    Iii,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Affected {
    All(AllMarker),
    Participants(Vec<u32>),
}

/// Serialized as the string `"all"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllMarker {
    All,
}

impl Affected {
    pub fn all() -> Self {
        Affected::All(AllMarker::All)
    }

    pub fn contains(&self, participant_id: u32) -> bool {
        match self {
            Affected::All(_) => true,
            Affected::Participants(ids) => ids.contains(&participant_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub date: NaiveDate,
    pub fault_type: FaultType,
    pub participants: Affected,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultPlan {
    pub faults: Vec<Fault>,
}

impl FaultPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self, config: &TrialConfig) -> Result<()> {
        let (first, last) = (config.trial_start_date, config.last_trial_date());
        for fault in &self.faults {
            if fault.date < first || fault.date > last {
                return Err(Error::Setup(format!(
                    "fault on {} lies outside the trial span {first}..={last}",
                    fault.date
                )));
            }
        }
        Ok(())
    }

    /// Fault types active for a participant on a date.
    pub fn active(&self, date: NaiveDate, participant_id: u32) -> BTreeSet<FaultType> {
        self.faults
            .iter()
            .filter(|f| f.date == date && f.participants.contains(participant_id))
            .map(|f| f.fault_type)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Recruit,
    DailyJob,
    SchedulePushed,
    FallbackI,
    FallbackIi,
    FallbackIii,
    PolicyUpdate,
    FaultInjected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub date: NaiveDate,
    pub event: EventKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub participant_id: Option<u32>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, date: NaiveDate, event: EventKind, participant_id: Option<u32>, detail: impl Into<String>) {
        debug_assert!(self.events.last().is_none_or(|e| e.date <= date));
        self.events.push(Event { date, event, participant_id, detail: detail.into() });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn from_events(events: Vec<Event>) -> Result<Self> {
        if events.windows(2).any(|w| w[0].date > w[1].date) {
            return Err(Error::Data("event log is not chronologically ordered".into()));
        }
        Ok(Self { events })
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.event == kind).count()
    }
}

/// Everything `run_trial` needs besides the seed.
#[derive(Debug, Clone, Copy)]
pub struct TrialInputs<'a> {
    pub config: &'a TrialConfig,
    pub prior: &'a Prior,
    pub smoothing: &'a SmoothingConfig,
    pub mode: PolicyMode,
    pub models: &'a [ParticipantEnvModel],
    pub faults: &'a FaultPlan,
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub history: TrialHistory,
    pub events: EventLog,
}

/// Schedule whose every entry has probability 0.5, independent of the policy
/// and the state.
pub fn apply_fallback_ii<R: Rng + ?Sized>(
    participant_id: u32,
    first_day: u32,
    horizon_days: u32,
    rng: &mut R,
) -> ActionSchedule {
    let entries = (first_day..first_day + horizon_days)
        .flat_map(|day_index| (0..2u8).map(move |slot| (day_index, slot)))
        .map(|(day_index, slot)| ScheduleEntry {
            day_index,
            slot,
            pi: 0.5,
            action: select_action(0.5, rng),
            provenance: Provenance::FallbackIi,
        })
        .collect();
    ActionSchedule { participant_id, created_day: first_day, entries }
}

/// Marks a record as stored but unusable for updates.
pub fn apply_fallback_iii(mut record: DecisionRecord) -> DecisionRecord {
    record.excluded_from_update = true;
    record
}

struct ParticipantState {
    id: u32,
    start: NaiveDate,
    /// OSCB and actions in decision order.
    outcomes: Vec<f64>,
    actions: Vec<f64>,
    opened_app_yesterday: u8,
    last_schedule: Option<ActionSchedule>,
}

impl ParticipantState {
    fn raw(&self, day_index: u32, date: NaiveDate) -> RawObservables {
        let mut past_oscb = [0.0; WINDOW];
        let mut past_actions = [0.0; WINDOW];
        for (j, (q, a)) in self.outcomes.iter().rev().zip(self.actions.iter().rev()).take(WINDOW).enumerate() {
            past_oscb[j] = *q;
            past_actions[j] = *a;
        }
        RawObservables {
            slot: 0,
            past_oscb,
            past_actions,
            opened_app_prior_day: self.opened_app_yesterday,
            is_weekend: is_weekend(date) as u8,
            day_in_trial: day_index,
        }
    }
}

enum Policy {
    Pooled(PosteriorState),
    PerParticipant(BTreeMap<u32, PosteriorState>, PosteriorState),
}

impl Policy {
    fn posterior_for(&self, participant_id: u32) -> &PosteriorState {
        match self {
            Policy::Pooled(p) => p,
            Policy::PerParticipant(map, prior) => map.get(&participant_id).unwrap_or(prior),
        }
    }
}

fn refit(
    history: &mut TrialHistory,
    policy: &mut Policy,
    prior: &Prior,
    tau: UpdateTime,
    started: &[u32],
) -> Result<()> {
    let batch = batch_for_update(history, tau.date);
    match policy {
        Policy::Pooled(current) => {
            let mut post = fit_reward_model(prior, batch.iter().map(|r| (&r.alg_state, r.pi, r.action, r.reward)))?;
            post.tau_index = tau.index;
            history.push_snapshot(PosteriorSnapshot { tau, participant_id: None, posterior: post.clone() })?;
            *current = post;
        }
        Policy::PerParticipant(map, _) => {
            for &pid in started {
                let rows = batch.iter().filter(|r| r.participant_id == pid);
                let mut post = fit_reward_model(prior, rows.map(|r| (&r.alg_state, r.pi, r.action, r.reward)))?;
                post.tau_index = tau.index;
                history.push_snapshot(PosteriorSnapshot { tau, participant_id: Some(pid), posterior: post.clone() })?;
                map.insert(pid, post);
            }
        }
    }
    Ok(())
}

/// Simulates the whole trial. Deterministic given the inputs and `seed`.
pub fn run_trial(inputs: TrialInputs<'_>, seed: u64) -> Result<TrialRun> {
    let TrialInputs { config, prior, smoothing, mode, models, faults } = inputs;
    config.validate().map_err(|e| Error::Setup(e.to_string()))?;
    prior.validate().map_err(|e| Error::Setup(e.to_string()))?;
    faults.validate(config)?;
    if models.len() < config.num_participants as usize {
        return Err(Error::Setup(format!(
            "{} environment models supplied for {} participants",
            models.len(),
            config.num_participants
        )));
    }
    for m in models {
        m.validate().map_err(|e| Error::Setup(e.to_string()))?;
    }
    let selector = ActionSelector::new(smoothing.clone()).map_err(|e| Error::Setup(e.to_string()))?;
    let days = config.days_per_participant;

    let mut history = TrialHistory::new();
    let mut events = EventLog::new();
    let mut participants: Vec<ParticipantState> = config
        .recruitment()
        .into_iter()
        .map(|(id, start)| {
            history.register_participant(id, start);
            ParticipantState {
                id,
                start,
                outcomes: Vec::new(),
                actions: Vec::new(),
                opened_app_yesterday: 0,
                last_schedule: None,
            }
        })
        .collect();
    let prior_state = prior.to_posterior();
    let mut policy = match mode {
        PolicyMode::FullPooling => Policy::Pooled(prior_state.clone()),
        PolicyMode::NoPooling => Policy::PerParticipant(BTreeMap::new(), prior_state.clone()),
    };
    let mut taus = update_times(config).into_iter().peekable();

    let mut date = config.trial_start_date;
    let last = config.last_trial_date();
    while date <= last {
        if let Some(tau) = taus.next_if(|t| t.date == date) {
            let started: Vec<u32> = participants.iter().filter(|p| p.start < date).map(|p| p.id).collect();
            refit(&mut history, &mut policy, prior, tau, &started)?;
            events.push(date, EventKind::PolicyUpdate, None, format!("tau={}", tau.index));
        }
        for p in participants.iter().filter(|p| p.start == date) {
            events.push(date, EventKind::Recruit, Some(p.id), "");
        }
        let active: Vec<usize> = participants
            .iter()
            .enumerate()
            .filter(|(_, p)| p.start <= date && date < add_days(p.start, days as i64))
            .map(|(k, _)| k)
            .collect();
        for &k in &active {
            for fault in faults.active(date, participants[k].id) {
                events.push(date, EventKind::FaultInjected, Some(participants[k].id), fault.as_str());
            }
        }
        if !active.is_empty() {
            events.push(date, EventKind::DailyJob, None, format!("participants={}", active.len()));
        }
        for k in active {
            let p = &mut participants[k];
            let model = &models[k];
            let day_index = (date - p.start).num_days() as u32 + 1;
            let remaining = days - day_index + 1;
            let active_faults = faults.active(date, p.id);

            let raw = p.raw(day_index, date);
            let morning_f = build_alg_state(&raw)?;
            let morning_g = build_env_state_with_horizon(&raw, days)?;

            let service_down = active_faults.contains(&FaultType::ServiceDown);
            let construction_failed = active_faults.contains(&FaultType::ScheduleConstructionFailure);
            let usable_old = p
                .last_schedule
                .as_ref()
                .is_some_and(|s| s.entry(day_index, 1).is_some());
            let schedule_fallback = if service_down && usable_old {
                events.push(date, EventKind::FallbackI, Some(p.id), FaultType::ServiceDown.as_str());
                Fallback::MethodI
            } else if service_down || construction_failed {
                let cause = if construction_failed {
                    FaultType::ScheduleConstructionFailure
                } else {
                    FaultType::ServiceDown
                };
                let mut rng = stream(seed, StreamLabel::Fallback, &[p.id as u64, day_index as u64]);
                p.last_schedule = Some(apply_fallback_ii(p.id, day_index, remaining, &mut rng));
                events.push(date, EventKind::FallbackIi, Some(p.id), cause.as_str());
                Fallback::MethodIi
            } else {
                let mut rng = stream(seed, StreamLabel::Policy, &[p.id as u64, day_index as u64]);
                let posterior = policy.posterior_for(p.id);
                p.last_schedule = Some(make_schedule(p.id, posterior, &morning_f, day_index, remaining, &selector, &mut rng));
                events.push(date, EventKind::SchedulePushed, Some(p.id), "");
                Fallback::None
            };
            let data_missing = active_faults.contains(&FaultType::DataRetrievalFailure);
            if data_missing {
                events.push(date, EventKind::FallbackIii, Some(p.id), FaultType::DataRetrievalFailure.as_str());
            }
            let schedule = p.last_schedule.as_ref().expect("schedule pushed or retained");
            for slot in 0..2u8 {
                let entry = *schedule
                    .entry(day_index, slot)
                    .ok_or_else(|| Error::Setup(format!("participant {} schedule misses day {day_index}", p.id)))?;
                let point = DecisionPoint::new(p.id, p.start, day_index, slot);
                let f = morning_f.with_slot(slot);
                let g = morning_g.with_slot(slot);
                let mut rng = stream(seed, StreamLabel::Outcome, &[p.id as u64, point.t as u64]);
                let q = zip_sample(model, &g, entry.action, &mut rng)?;
                let record = DecisionRecord {
                    point,
                    alg_state: f,
                    env_state: g,
                    pi: entry.pi,
                    action: entry.action,
                    oscb: q,
                    reward: reward(q as f64, entry.action, config.reward_cost_weight, config.reward_cost_hook),
                    fallback: schedule_fallback,
                    excluded_from_update: false,
                };
                history.push(if data_missing { apply_fallback_iii(record) } else { record })?;
                p.outcomes.push(q as f64);
                p.actions.push(entry.action as f64);
            }
            let mut rng = stream(seed, StreamLabel::App, &[p.id as u64, day_index as u64]);
            p.opened_app_yesterday = app_open_sample(model.p_app, &mut rng);
        }
        date = add_days(date, 1);
    }
    Ok(TrialRun { history, events })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReportRow {
    pub date: NaiveDate,
    pub fault_type: FaultType,
    pub fallback: FallbackMethod,
    pub participants_affected: usize,
    pub fallback_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReport {
    pub rows: Vec<FaultReportRow>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Distinct dates on which the method ran.
    pub dates: usize,
    /// Participant-days handled by the method.
    pub participant_days: usize,
}

impl FaultReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn by_method(&self) -> BTreeMap<FallbackMethod, MethodSummary> {
        let mut out: BTreeMap<FallbackMethod, (BTreeSet<NaiveDate>, usize)> = BTreeMap::new();
        for row in &self.rows {
            let entry = out.entry(row.fallback).or_default();
            entry.0.insert(row.date);
            entry.1 += row.fallback_events;
        }
        out.into_iter()
            .map(|(m, (dates, n))| (m, MethodSummary { dates: dates.len(), participant_days: n }))
            .collect()
    }
}

/// One row per `(date, fault type)` with the participants affected and the
/// fallback executions attributed to it.
pub fn fault_report(log: &EventLog) -> FaultReport {
    let mut affected: BTreeMap<(NaiveDate, FaultType), BTreeSet<u32>> = BTreeMap::new();
    for e in log.events().iter().filter(|e| e.event == EventKind::FaultInjected) {
        if let Some(ft) = FaultType::parse(&e.detail) {
            affected.entry((e.date, ft)).or_default().extend(e.participant_id);
        }
    }
    let rows = affected
        .into_iter()
        .map(|((date, fault_type), pids)| {
            let fallback_events = log
                .events()
                .iter()
                .filter(|e| {
                    e.date == date
                        && e.detail == fault_type.as_str()
                        && matches!(
                            e.event,
                            EventKind::FallbackI | EventKind::FallbackIi | EventKind::FallbackIii
                        )
                })
                .count();
            let fallback = log
                .events()
                .iter()
                .find(|e| e.date == date && e.detail == fault_type.as_str() && e.event != EventKind::FaultInjected)
                .map(|e| match e.event {
                    EventKind::FallbackI => FallbackMethod::I,
                    EventKind::FallbackIi => FallbackMethod::Ii,
                    _ => FallbackMethod::Iii,
                })
                .unwrap_or_else(|| fault_type.fallback());
            FaultReportRow { date, fault_type, fallback, participants_affected: pids.len(), fallback_events }
        })
        .collect();
    FaultReport { rows }
}

/// One engineering issue from the deployed trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialIssue {
    pub id: u32,
    /// `(year, month, day)` of every affected date.
    pub dates: &'static [(i32, u32, u32)],
    pub fault_type: FaultType,
    pub participants: usize,
}

const fn issue(id: u32, dates: &'static [(i32, u32, u32)], fault_type: FaultType, participants: usize) -> TrialIssue {
    TrialIssue { id, dates, fault_type, participants }
}

/// Engineering issues seen in the deployed trial.
pub const TRIAL_ISSUES: &[TrialIssue] = &[
    issue(1, &[(2023, 10, 30)], FaultType::ScheduleConstructionFailure, 1),
    issue(2, &[(2023, 11, 16), (2023, 11, 17)], FaultType::ServiceDown, 23),
    issue(3, &[(2023, 11, 17)], FaultType::ScheduleConstructionFailure, 1),
    issue(
        4,
        &[(2023, 11, 25), (2023, 11, 26), (2023, 11, 27), (2023, 11, 28), (2023, 11, 29), (2023, 11, 30)],
        FaultType::DataRetrievalFailure,
        1,
    ),
    issue(5, &[(2023, 12, 15), (2023, 12, 16)], FaultType::DataRetrievalFailure, 1),
    issue(6, &[(2024, 1, 24), (2024, 1, 25)], FaultType::ServiceDown, 24),
    issue(7, &[(2024, 2, 21)], FaultType::ScheduleConstructionFailure, 5),
];

/// Fault plan reproducing [`TRIAL_ISSUES`] under `config`'s calendar.
///
/// Each issue hits the lowest-id participants that are in the trial on all of
/// its dates, were recruited before the first of them, and are not already hit
/// by another issue on the same date. Issues outside the trial span are skipped.
pub fn trial_issue_fault_plan(config: &TrialConfig) -> FaultPlan {
    let roster = config.recruitment();
    let days = config.days_per_participant as i64;
    let (first, last) = (config.trial_start_date, config.last_trial_date());
    let mut taken: BTreeMap<NaiveDate, BTreeSet<u32>> = BTreeMap::new();
    let mut faults = Vec::new();
    for &TrialIssue { dates, fault_type, participants: count, .. } in TRIAL_ISSUES {
        let dates: Vec<NaiveDate> = dates
            .iter()
            .map(|&(y, m, d)| NaiveDate::from_ymd_opt(y, m, d).expect("valid issue date"))
            .collect();
        if dates.iter().any(|d| *d < first || *d > last) {
            continue;
        }
        let chosen: Vec<u32> = roster
            .iter()
            .filter(|(id, start)| {
                dates.iter().all(|d| {
                    *start < *d
                        && *d < add_days(*start, days)
                        && !taken.get(d).is_some_and(|t| t.contains(id))
                })
            })
            .map(|(id, _)| *id)
            .take(count)
            .collect();
        if chosen.is_empty() {
            continue;
        }
        for d in &dates {
            taken.entry(*d).or_default().extend(&chosen);
            faults.push(Fault { date: *d, fault_type, participants: Affected::Participants(chosen.clone()) });
        }
    }
    faults.sort_by_key(|f| f.date);
    FaultPlan { faults }
}
