//! Reading and writing run artifacts: `history.csv`, `snapshots.jsonl`,
//! `events.jsonl`, model and fault-plan JSON, and analysis outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{DwlResult, ErrorMetrics, OutcomeMetrics, ValueSummary};
use crate::bandit::{PosteriorState, THETA_DIM};
use crate::environment::ParticipantEnvModel;
use crate::features::{AlgState, EnvState, ALG_DIM};
use crate::orchestrator::{Event, EventLog, FaultPlan};
use crate::trial::{add_days, DecisionPoint, DecisionRecord, Fallback, PosteriorSnapshot, TrialHistory, UpdateTime};
use crate::{Error, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRow {
    participant_id: u32,
    t: u32,
    date: NaiveDate,
    slot: u8,
    f1: f64,
    f2: f64,
    f3: f64,
    f4: f64,
    f5: f64,
    g1: f64,
    g2: f64,
    g3: f64,
    g4: f64,
    g5: f64,
    g6: f64,
    g7: f64,
    pi: f64,
    action: u8,
    fallback: String,
    excluded: u8,
    oscb: u32,
    reward: f64,
}

impl From<&DecisionRecord> for HistoryRow {
    fn from(r: &DecisionRecord) -> Self {
        let [f1, f2, f3, f4, f5] = r.alg_state.0;
        let [g1, g2, g3, g4, g5, g6, g7] = r.env_state.0;
        HistoryRow {
            participant_id: r.point.participant_id,
            t: r.point.t,
            date: r.point.date,
            slot: r.point.slot,
            f1,
            f2,
            f3,
            f4,
            f5,
            g1,
            g2,
            g3,
            g4,
            g5,
            g6,
            g7,
            pi: r.pi,
            action: r.action,
            fallback: r.fallback.as_str().to_string(),
            excluded: r.excluded_from_update as u8,
            oscb: r.oscb,
            reward: r.reward,
        }
    }
}

impl HistoryRow {
    fn into_record(self) -> std::result::Result<DecisionRecord, String> {
        if self.slot > 1 {
            return Err(format!("slot {} is not 0 or 1", self.slot));
        }
        if self.t == 0 || (self.t - 1) % 2 != self.slot as u32 {
            return Err(format!("t={} does not match slot {}", self.t, self.slot));
        }
        if self.action > 1 || self.excluded > 1 {
            return Err("action and excluded must be 0 or 1".into());
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(format!("pi={} outside [0, 1]", self.pi));
        }
        let fallback = Fallback::parse(&self.fallback).ok_or_else(|| format!("unknown fallback {:?}", self.fallback))?;
        let alg_state = AlgState::new([self.f1, self.f2, self.f3, self.f4, self.f5]);
        let env_state = EnvState::new([self.g1, self.g2, self.g3, self.g4, self.g5, self.g6, self.g7]);
        Ok(DecisionRecord {
            point: DecisionPoint { participant_id: self.participant_id, t: self.t, date: self.date, slot: self.slot },
            alg_state,
            env_state,
            pi: self.pi,
            action: self.action,
            oscb: self.oscb,
            reward: self.reward,
            fallback,
            excluded_from_update: self.excluded == 1,
        })
    }
}

pub fn write_history_csv<W: Write>(history: &TrialHistory, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in history.records() {
        w.serialize(HistoryRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a history CSV. All malformed rows are reported together, numbered
/// from 1 for the first data row after the header.
pub fn read_history_csv<R: std::io::Read>(reader: R) -> Result<TrialHistory> {
    let mut rd = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (k, row) in rd.deserialize::<HistoryRow>().enumerate() {
        match row.map_err(|e| e.to_string()).and_then(HistoryRow::into_record) {
            Ok(rec) => records.push(rec),
            Err(msg) => bad.push(format!("row {}: {msg}", k + 1)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!("malformed history CSV; {}", bad.join("; "))));
    }
    let mut history = TrialHistory::new();
    for rec in &records {
        let start = add_days(rec.point.date, -(rec.point.day_index() as i64 - 1));
        match history.start_dates().get(&rec.point.participant_id) {
            Some(s) if *s != start => {
                return Err(Error::Data(format!(
                    "participant {} has inconsistent dates (t={} on {})",
                    rec.point.participant_id, rec.point.t, rec.point.date
                )))
            }
            Some(_) => {}
            None => history.register_participant(rec.point.participant_id, start),
        }
    }
    for rec in records {
        history.push(rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(history)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotLine {
    tau_index: u32,
    date: NaiveDate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    participant_id: Option<u32>,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
}

pub fn write_snapshots_jsonl<W: Write>(snapshots: &[PosteriorSnapshot], mut writer: W) -> Result<()> {
    for s in snapshots {
        let line = SnapshotLine {
            tau_index: s.tau.index,
            date: s.tau.date,
            participant_id: s.participant_id,
            mu: s.posterior.mu.iter().copied().collect(),
            sigma: s.posterior.sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_snapshots_jsonl<R: std::io::Read>(reader: R) -> Result<Vec<PosteriorSnapshot>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Data(format!("snapshot line {}: {msg}", k + 1));
        let s: SnapshotLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if s.mu.len() != THETA_DIM || s.sigma.len() != THETA_DIM || s.sigma.iter().any(|r| r.len() != THETA_DIM) {
            return Err(bad(format!("expected mu[{THETA_DIM}] and sigma[{THETA_DIM}][{THETA_DIM}]")));
        }
        let posterior = PosteriorState {
            mu: DVector::from_vec(s.mu),
            sigma: DMatrix::from_row_iterator(THETA_DIM, THETA_DIM, s.sigma.into_iter().flatten()),
            tau_index: s.tau_index,
        };
        out.push(PosteriorSnapshot {
            tau: UpdateTime { index: s.tau_index, date: s.date },
            participant_id: s.participant_id,
            posterior,
        });
    }
    Ok(out)
}

pub fn write_events_jsonl<W: Write>(log: &EventLog, mut writer: W) -> Result<()> {
    for e in log.events() {
        serde_json::to_writer(&mut writer, e)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_events_jsonl<R: std::io::Read>(reader: R) -> Result<EventLog> {
    let mut events = Vec::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event =
            serde_json::from_str(&line).map_err(|err| Error::Data(format!("event line {}: {err}", k + 1)))?;
        events.push(e);
    }
    EventLog::from_events(events)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_history(history: &TrialHistory, path: &Path) -> Result<()> {
    write_history_csv(history, create(path)?)
}

pub fn load_history(path: &Path) -> Result<TrialHistory> {
    read_history_csv(open(path)?).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_snapshots(snapshots: &[PosteriorSnapshot], path: &Path) -> Result<()> {
    write_snapshots_jsonl(snapshots, create(path)?)
}

pub fn load_snapshots(path: &Path) -> Result<Vec<PosteriorSnapshot>> {
    read_snapshots_jsonl(open(path)?)
}

pub fn save_events(log: &EventLog, path: &Path) -> Result<()> {
    write_events_jsonl(log, create(path)?)
}

pub fn load_events(path: &Path) -> Result<EventLog> {
    read_events_jsonl(open(path)?)
}

pub fn save_models(models: &[ParticipantEnvModel], path: &Path) -> Result<()> {
    write_json(path, models)
}

pub fn load_models(path: &Path) -> Result<Vec<ParticipantEnvModel>> {
    let models: Vec<ParticipantEnvModel> = read_json(path)?;
    for m in &models {
        m.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(models)
}

pub fn save_fault_plan(plan: &FaultPlan, path: &Path) -> Result<()> {
    write_json(path, plan)
}

pub fn load_fault_plan(path: &Path) -> Result<FaultPlan> {
    read_json(path)
}

#[derive(Debug, Serialize)]
struct DwlFile<'a> {
    state: [f64; ALG_DIM],
    taus: &'a [u32],
    dates: &'a [NaiveDate],
    reference: &'a [f64],
    band_low: &'a [f64],
    band_high: &'a [f64],
    q_low: f64,
    q_high: f64,
    rep_values: &'a [Vec<f64>],
}

/// `dwl.json`; `rep_values[k]` holds every rep's statistic at update time k.
pub fn save_dwl(result: &DwlResult, path: &Path) -> Result<()> {
    write_json(
        path,
        &DwlFile {
            state: result.state.0,
            taus: &result.reference.taus,
            dates: &result.reference.dates,
            reference: &result.reference.values,
            band_low: &result.band.low,
            band_high: &result.band.high,
            q_low: result.band.q_low,
            q_high: result.band.q_high,
            rep_values: &result.band.rep_values,
        },
    )
}

#[derive(Debug, Serialize)]
struct PoolingRow<'a> {
    mode: &'a str,
    mean: f64,
    mean_se: f64,
    q1: f64,
    q1_se: f64,
    reps: usize,
    single_rep: bool,
}

pub fn write_pooling_csv<W: Write>(rows: &[ValueSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(PoolingRow {
            mode: r.mode.as_str(),
            mean: r.mean,
            mean_se: r.mean_se,
            q1: r.q1,
            q1_se: r.q1_se,
            reps: r.reps,
            single_rep: r.single_rep,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_pooling(rows: &[ValueSummary], path: &Path) -> Result<()> {
    write_pooling_csv(rows, create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub outcome: OutcomeMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub errors: Option<ErrorMetrics>,
}

pub fn save_metrics(metrics: &MetricsFile, path: &Path) -> Result<()> {
    write_json(path, metrics)
}

/// Checks that `dir` exists or can be created.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
