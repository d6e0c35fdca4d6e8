use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mrtsim::analysis::{did_we_learn, error_metrics, outcome_metrics, pooling_experiment, DwlOptions};
use mrtsim::bandit::PolicyMode;
use mrtsim::config::RunConfig;
use mrtsim::environment::{
    default_state_grid, gen_synthetic_models, grid_zero_fraction, map_fit, FitOptions, Observation,
    ParticipantEnvModel,
};
use mrtsim::features::AlgState;
use mrtsim::io;
use mrtsim::orchestrator::{fault_report, run_trial, trial_issue_fault_plan, FaultPlan, TrialInputs};
use mrtsim::rng::{stream, StreamLabel};

const BUILTIN_TRIAL_ISSUES: &str = "builtin:trial-issues";

/// Simulation lab for a Thompson-sampling mobile-health trial.
#[derive(Debug, Parser)]
#[command(name = "mrtsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic participant environment models.
    GenEnv {
        #[command(flatten)]
        common: Common,
    },
    /// Fit participant environment models to a history CSV.
    FitEnv {
        #[command(flatten)]
        common: Common,
        /// History CSV to fit.
        #[arg(long)]
        data: PathBuf,
        /// Random restarts in addition to the zero start.
        #[arg(long, default_value_t = 20)]
        restarts: usize,
    },
    /// Run one simulated trial.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Model JSON; synthetic models are generated when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Fault plan JSON, or `builtin:trial-issues`.
        #[arg(long)]
        faults: Option<String>,
    },
    /// Compare full pooling with no pooling over paired reps.
    Pooling {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Null-environment resampling for a query state.
    DidWeLearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Algorithm state as five comma-separated values, e.g. "0,-0.7,-0.6,0,1".
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long)]
        reps: Option<usize>,
        /// Reference posterior snapshots (snapshots.jsonl).
        #[arg(long)]
        reference: PathBuf,
    },
    /// Outcome metrics of a history, and error metrics against a reference.
    Metrics {
        /// Simulated history CSV.
        #[arg(long)]
        sim: PathBuf,
        /// Reference history CSV.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<mrtsim::Error> for Failure {
    fn from(e: mrtsim::Error) -> Self {
        match e {
            mrtsim::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.trial.master_seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    io::ensure_dir(&config.output_dir)?;
    Ok(config)
}

fn load_or_generate_models(path: Option<&Path>, config: &RunConfig) -> CliResult<Vec<ParticipantEnvModel>> {
    match path {
        Some(p) => Ok(io::load_models(p)?),
        None => {
            info!("no --models given; generating synthetic models from the master seed");
            Ok(gen_synthetic_models(
                config.trial.num_participants,
                config.trial.master_seed,
                &default_state_grid(),
                &config.synthetic,
            )?)
        }
    }
}

fn load_faults(arg: Option<&str>, config: &RunConfig) -> CliResult<FaultPlan> {
    let source = arg.map(String::from).or_else(|| config.fault_plan.as_ref().map(|p| p.display().to_string()));
    match source.as_deref() {
        None => Ok(FaultPlan::empty()),
        Some(BUILTIN_TRIAL_ISSUES) => Ok(trial_issue_fault_plan(&config.trial)),
        Some(path) => Ok(io::load_fault_plan(Path::new(path))?),
    }
}

fn inputs<'a>(config: &'a RunConfig, models: &'a [ParticipantEnvModel], faults: &'a FaultPlan) -> TrialInputs<'a> {
    TrialInputs {
        config: &config.trial,
        prior: &config.prior,
        smoothing: &config.smoothing,
        mode: config.policy_mode,
        models,
        faults,
    }
}

fn gen_env(common: &Common) -> CliResult {
    let config = load_config(common)?;
    let grid = default_state_grid();
    let models = gen_synthetic_models(config.trial.num_participants, config.trial.master_seed, &grid, &config.synthetic)?;
    let path = config.output_dir.join("models.json");
    io::save_models(&models, &path)?;
    let zero: Vec<f64> = models.iter().map(|m| grid_zero_fraction(m, &grid, 0)).collect();
    let baseline: Vec<f64> = models
        .iter()
        .map(|m| grid.states().iter().map(|g| mrtsim::environment::zip_mean(m, g, 0)).sum::<f64>() / grid.len() as f64)
        .collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        format!("{lo:.3}..{hi:.3}")
    };
    println!("wrote {} models to {}", models.len(), path.display());
    println!("grid zero fraction (no prompt): {}", range(&zero));
    println!("grid mean OSCB (no prompt): {}", range(&baseline));
    Ok(())
}

/// Share of days with the app opened, read off the prior-day app feature of
/// morning decision times after the first day.
fn estimate_p_app(records: &[&mrtsim::trial::DecisionRecord]) -> f64 {
    let days: Vec<f64> = records
        .iter()
        .filter(|r| r.point.slot == 0 && r.point.day_index() > 1)
        .map(|r| r.alg_state.0[3])
        .collect();
    if days.is_empty() {
        0.5
    } else {
        days.iter().sum::<f64>() / days.len() as f64
    }
}

fn fit_env(common: &Common, data: &Path, restarts: usize) -> CliResult {
    let config = load_config(common)?;
    let history = io::load_history(data)?;
    let mut by_participant: BTreeMap<u32, Vec<&mrtsim::trial::DecisionRecord>> = BTreeMap::new();
    for id in history.start_dates().keys() {
        by_participant.insert(*id, Vec::new());
    }
    for r in history.records() {
        by_participant.entry(r.point.participant_id).or_default().push(r);
    }
    let opts = FitOptions { restarts, ..FitOptions::default() };
    let mut models = Vec::new();
    for (id, records) in by_participant {
        if records.is_empty() {
            warn!("participant {id} has no records; skipped");
            continue;
        }
        let obs: Vec<Observation> =
            records.iter().map(|r| Observation { g: r.env_state, action: r.action, oscb: r.oscb }).collect();
        let mut rng = stream(config.trial.master_seed, StreamLabel::Fit, &[id as u64]);
        let fit = map_fit(id, &obs, &opts, &mut rng)?;
        let mut model = fit.model;
        model.p_app = estimate_p_app(&records);
        println!(
            "participant {id}: {} records, log posterior {:.4}, {}/{} starts converged",
            obs.len(),
            fit.log_posterior,
            fit.converged_starts,
            fit.starts
        );
        models.push(model);
    }
    let path = config.output_dir.join("models.json");
    io::save_models(&models, &path)?;
    println!("wrote {} models to {}", models.len(), path.display());
    Ok(())
}

fn simulate(common: &Common, models: Option<&Path>, faults: Option<&str>) -> CliResult {
    let config = load_config(common)?;
    let models = load_or_generate_models(models, &config)?;
    let plan = load_faults(faults, &config)?;
    let run = run_trial(inputs(&config, &models, &plan), config.trial.master_seed)?;
    let dir = &config.output_dir;
    io::save_history(&run.history, &dir.join(io::HISTORY_FILE))?;
    io::save_snapshots(run.history.snapshots(), &dir.join(io::SNAPSHOTS_FILE))?;
    io::save_events(&run.events, &dir.join(io::EVENTS_FILE))?;
    let report = fault_report(&run.events);
    println!(
        "simulated {} decision times, {} posterior snapshots; outputs in {}",
        run.history.len(),
        run.history.snapshots().len(),
        dir.display()
    );
    for row in &report.rows {
        println!(
            "{} {:<30} participants {:>3}  fallback {:?} x{}",
            row.date,
            row.fault_type.as_str(),
            row.participants_affected,
            row.fallback,
            row.fallback_events
        );
    }
    for (method, s) in report.by_method() {
        println!("fallback {method:?}: {} dates, {} participant-days", s.dates, s.participant_days);
    }
    Ok(())
}

fn pooling(common: &Common, models: Option<&Path>, reps: Option<usize>) -> CliResult {
    let config = load_config(common)?;
    let models = load_or_generate_models(models, &config)?;
    let plan = load_faults(None, &config)?;
    let reps = reps.unwrap_or(config.reps);
    let rows = pooling_experiment(
        inputs(&config, &models, &plan),
        &[PolicyMode::FullPooling, PolicyMode::NoPooling],
        reps,
        config.trial.master_seed,
    )?;
    let path = config.output_dir.join("pooling.csv");
    io::save_pooling(&rows, &path)?;
    for r in &rows {
        let flag = if r.single_rep { " (single rep, SE not estimated)" } else { "" };
        println!(
            "{:<13} mean {:.3} ({:.3})  first quartile {:.3} ({:.3}){flag}",
            r.mode.as_str(),
            r.mean,
            r.mean_se,
            r.q1,
            r.q1_se
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn did_we_learn_cmd(
    common: &Common,
    models: Option<&Path>,
    state: &str,
    reps: Option<usize>,
    reference: &Path,
) -> CliResult {
    let f = AlgState::parse_literal(state).map_err(|e| Failure::Usage(e.to_string()))?;
    if !f.is_valid() {
        return Err(Failure::Usage(format!("state literal {state:?} is not a valid algorithm state")));
    }
    let mut config = load_config(common)?;
    config.policy_mode = PolicyMode::FullPooling;
    let models = load_or_generate_models(models, &config)?;
    let reference = io::load_snapshots(reference)?;
    let plan = FaultPlan::empty();
    let opts = DwlOptions { reps: reps.unwrap_or(config.reps), seed: config.trial.master_seed, ..DwlOptions::default() };
    let result = did_we_learn(&reference, inputs(&config, &models, &plan), &default_state_grid(), &f, &opts)?;
    let path = config.output_dir.join("dwl.json");
    io::save_dwl(&result, &path)?;
    for k in 0..result.reference.taus.len() {
        let v = result.reference.values[k];
        let mark = if result.band.contains(k, v) { "" } else { "  outside" };
        println!(
            "tau {:>2} {}  statistic {v:>8.3}  band [{:.3}, {:.3}]{mark}",
            result.reference.taus[k], result.reference.dates[k], result.band.low[k], result.band.high[k]
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn metrics(sim: &Path, reference: Option<&Path>, out: Option<&Path>) -> CliResult {
    let sim = io::load_history(sim)?;
    let outcome = outcome_metrics(&sim)?;
    let errors = match reference {
        Some(p) => Some(error_metrics(&sim, &io::load_history(p)?)?),
        None => None,
    };
    let file = io::MetricsFile { outcome, errors };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    io::ensure_dir(&dir)?;
    let path = dir.join("metrics.json");
    io::save_metrics(&file, &path)?;
    let show = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    let o = &file.outcome;
    println!("proportion of decision times with OSCB = 0: {:.3}", o.proportion_zero);
    println!("average of average non-zero participant OSCB: {}", show(o.avg_of_avg_nonzero_participant));
    println!("average non-zero OSCB in trial: {}", show(o.avg_nonzero_in_trial));
    println!("variance of average non-zero participant OSCB: {}", show(o.var_of_avg_nonzero_participant));
    println!("variance of non-zero OSCB in trial: {}", show(o.var_nonzero_in_trial));
    println!("variance of average participant OSCB: {}", show(o.var_of_avg_participant));
    println!("average of variances of participant OSCB: {}", show(o.avg_of_var_participant));
    if !o.skipped_all_zero_participants.is_empty() {
        println!("participants without non-zero OSCB: {:?}", o.skipped_all_zero_participants);
    }
    if let Some(e) = file.errors {
        println!("MSE {:.3}  RMSE {:.3}  MAE {:.3}", e.mse, e.rmse, e.mae);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenEnv { common } => gen_env(&common),
        Command::FitEnv { common, data, restarts } => fit_env(&common, &data, restarts),
        Command::Simulate { common, models, faults } => simulate(&common, models.as_deref(), faults.as_deref()),
        Command::Pooling { common, models, reps } => pooling(&common, models.as_deref(), reps),
        Command::DidWeLearn { common, models, state, reps, reference } => {
            did_we_learn_cmd(&common, models.as_deref(), &state, reps, &reference)
        }
        Command::Metrics { sim, reference, out } => metrics(&sim, reference.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRT_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
