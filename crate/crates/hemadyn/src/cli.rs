//! Command-line front end: simulate | cohort | fit | evaluate.
//!
//! All data goes to files, stdout carries only progress lines. A master
//! seed (flag, config file or `HEMADYN_SEED`) expands into per-patient
//! seeds via [`derive_seed`], so reruns are byte-identical.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::cohort::{
    derive_seed, generate_virtual_cohort, Density, ParameterSpread, ScheduleTemplate,
    VirtualCohortSpec,
};
use crate::data::{
    infer_cycle_length, ingest_patients, split_by_cycles, write_patients, Group,
    PatientRecord, TreatmentSchedule,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, emit_report, test_smse, PatientEval, ReportMeta, DEFAULT_SIGNIFICANCE,
};
use crate::mech::{simulate, MechModel, MechParams};
use crate::ode::DEFAULT_STEP;
use crate::pipeline::{
    default_penalty, fit_mechanistic, train_arx_gru, train_ude_add, train_ude_rep,
    FitResult, FittedModel, PipelineConfig,
};
use crate::ude::simulate_ude;

pub const SEED_ENV: &str = "HEMADYN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum ModelId {
    Friberg,
    Henrich,
    Ms,
    MsRev,
    UdeAdd,
    UdeRep,
    ArxGru,
}

impl ModelId {
    pub fn id(self) -> &'static str {
        match self {
            ModelId::Friberg => "friberg",
            ModelId::Henrich => "henrich",
            ModelId::Ms => "ms",
            ModelId::MsRev => "ms-rev",
            ModelId::UdeAdd => "ude-add",
            ModelId::UdeRep => "ude-rep",
            ModelId::ArxGru => "arx-gru",
        }
    }

    fn from_id(id: &str) -> Result<Self> {
        <Self as ValueEnum>::from_str(id, false)
            .map_err(|_| Error::Invalid(format!("unknown model id {id}")))
    }

    fn mech(self) -> Option<MechModel> {
        MechModel::from_id(self.id())
    }
}

/// Split list: either a comma list ("1,3,5") or an inclusive range
/// ("1..5").
pub fn parse_splits(s: &str) -> Result<Vec<usize>> {
    let invalid = || Error::Invalid(format!("cannot parse split range {s:?}"));
    let values: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| invalid())?;
        let b: usize = b.trim().parse().map_err(|_| invalid())?;
        if a > b {
            return Err(invalid());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse().map_err(|_| invalid()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(Error::Invalid("splits must be positive cycle counts".into()));
    }
    Ok(values)
}

#[derive(Debug, Parser)]
#[command(name = "hemadyn", version, about = "Platelet forecasting under multicycle chemotherapy")]
pub struct Cli {
    /// JSON run configuration; values present in the file override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parallel patient workers (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Master seed; falls back to the HEMADYN_SEED environment variable.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a model under a treatment schedule and write the daily
    /// trajectory CSV.
    Simulate(SimulateArgs),
    /// Generate a virtual patient cohort (observation, schedule and truth
    /// files).
    Cohort(CohortArgs),
    /// Fit selected models to each patient at each train/test split.
    Evaluate(EvaluateArgs),
    /// Train/fit models; writes one JSON artifact per (patient, model,
    /// n_train).
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model to simulate; ude-add/ude-rep need --checkpoint.
    #[arg(long)]
    pub model: ModelId,
    /// Schedule CSV with columns day,relative_dose,cycle_start.
    #[arg(long)]
    pub schedule: PathBuf,
    /// Horizon in days; the output has days + 1 daily rows.
    #[arg(long)]
    pub days: i64,
    /// Output trajectory CSV.
    #[arg(long, default_value = "trajectory.csv")]
    pub out: PathBuf,
    /// Mechanistic parameter JSON overriding population values.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Fit-result JSON holding a trained hybrid model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DensityArg {
    Dense,
    Sparse,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Number of virtual patients.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value = "14")]
    pub cycle_length: i64,
    #[arg(long, value_enum, default_value = "dense")]
    pub density: DensityArg,
    #[arg(long, default_value = "6")]
    pub n_cycles: usize,
    /// Lognormal multiplicative noise sd on counts.
    #[arg(long, default_value = "0.05")]
    pub noise: f64,
    /// Lognormal CV applied to every Friberg parameter.
    #[arg(long, default_value = "0.2")]
    pub spread_cv: f64,
    /// Cumulative-toxicity deformation strength (0 = pure Friberg).
    #[arg(long, default_value = "0")]
    pub toxicity: f64,
    /// Patient id prefix.
    #[arg(long, default_value = "virtual")]
    pub id_prefix: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Observation CSV (patient_id,time_days,platelet_count_per_l).
    #[arg(long)]
    pub obs: PathBuf,
    /// Schedule CSV (patient_id,day,relative_dose,cycle_start).
    #[arg(long)]
    pub schedules: PathBuf,
    /// Models to fit.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<ModelId>,
    /// Training-cycle counts, e.g. "1..5" or "1,3".
    #[arg(long, default_value = "1..5")]
    pub splits: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub schedules: PathBuf,
    /// Directory holding fit artifacts written by `fit`.
    #[arg(long)]
    pub fits_dir: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<ModelId>,
    #[arg(long, default_value = "1..5")]
    pub splits: String,
    /// p-value threshold for the not-inferior flag.
    #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE)]
    pub significance: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Optional overrides loaded from `--config run.json`; present fields win
/// over the corresponding flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub models: Option<Vec<String>>,
    pub splits: Option<String>,
    pub significance: Option<f64>,
    /// Hyperparameter overrides for the training pipelines; omitted fields
    /// keep their defaults.
    pub pipeline: Option<PipelineConfig>,
}

/// Flags merged with the config file and environment, as executed.
struct Resolved {
    seed: Option<u64>,
    models: Vec<ModelId>,
    splits: Vec<usize>,
    significance: f64,
    pipeline: PipelineConfig,
}

fn resolve(
    cli_seed: Option<u64>,
    file: &FileConfig,
    models: &[ModelId],
    splits: &str,
    significance: f64,
) -> Result<Resolved> {
    let seed = file
        .seed
        .or(cli_seed)
        .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()));
    let models = match &file.models {
        Some(ids) => ids.iter().map(|s| ModelId::from_id(s)).collect::<Result<_>>()?,
        None => models.to_vec(),
    };
    let splits = parse_splits(file.splits.as_deref().unwrap_or(splits))?;
    Ok(Resolved {
        seed,
        models,
        splits,
        significance: file.significance.unwrap_or(significance),
        pipeline: file.pipeline.clone().unwrap_or_default(),
    })
}

fn require_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| {
        Error::Invalid(format!("a master seed is required (--seed, config file or {SEED_ENV})"))
    })
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(FileConfig::default()),
    }
}

fn configure_jobs(cli: Option<usize>, file: Option<usize>) {
    if let Some(n) = file.or(cli) {
        // a later global pool wins only once per process; ignore repeats
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `std::env::args` and runs the selected command.
pub fn run() -> Result<()> {
    execute(Cli::parse())
}

pub fn execute(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    configure_jobs(cli.jobs, file.jobs);
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Cohort(args) => cmd_cohort(args, require_seed(file.seed.or(cli.seed).or_else(env_seed))?),
        Command::Fit(args) => {
            let r = resolve(cli.seed, &file, &args.models, &args.splits, DEFAULT_SIGNIFICANCE)?;
            cmd_fit(args, &r)
        }
        Command::Evaluate(args) => {
            let r = resolve(cli.seed, &file, &args.models, &args.splits, args.significance)?;
            cmd_evaluate(args, &r)
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

#[derive(Debug, Deserialize)]
struct BareScheduleRow {
    day: i64,
    relative_dose: f64,
    cycle_start: u8,
}

/// Reads a single-patient schedule CSV (day,relative_dose,cycle_start).
pub fn read_schedule_csv(path: &Path) -> Result<TreatmentSchedule> {
    let mut events = Vec::new();
    let mut cycle_starts = Vec::new();
    let mut rdr = csv::Reader::from_path(path)?;
    for (i, row) in rdr.deserialize::<BareScheduleRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
        if row.relative_dose > 0.0 {
            events.push((row.day, row.relative_dose));
        }
        if row.cycle_start == 1 {
            cycle_starts.push(row.day);
        }
    }
    cycle_starts.sort_unstable();
    cycle_starts.dedup();
    let cycle_length = infer_cycle_length("schedule", &cycle_starts)?;
    TreatmentSchedule::new(events, cycle_starts, cycle_length)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let schedule = read_schedule_csv(&args.schedule)?;
    let traj = match args.model {
        ModelId::ArxGru => {
            return Err(Error::Invalid(
                "arx-gru forecasts patient data and cannot be simulated from a schedule alone"
                    .into(),
            ))
        }
        ModelId::UdeAdd | ModelId::UdeRep => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Invalid(format!("--checkpoint required for {}", args.model.id()))
            })?;
            let fit: FitResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let FittedModel::Ude(model) = &fit.fitted else {
                return Err(Error::Invalid(format!(
                    "checkpoint {} does not hold a hybrid model",
                    path.display()
                )));
            };
            if model.variant.id() != args.model.id() {
                return Err(Error::Invalid(format!(
                    "checkpoint holds {}, requested {}",
                    model.variant.id(),
                    args.model.id()
                )));
            }
            simulate_ude(model, &schedule, args.days, DEFAULT_STEP)?
        }
        _ => {
            let model = args.model.mech().unwrap();
            let params = match &args.params {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => MechParams::population(model),
            };
            simulate(model, &params, &schedule, args.days, None)?
        }
    };
    traj.write_csv(&args.out)?;
    println!("wrote {} daily rows to {}", traj.states.len(), args.out.display());
    Ok(())
}

fn cmd_cohort(args: &CohortArgs, seed: u64) -> Result<()> {
    let density = match args.density {
        DensityArg::Dense => Density::Dense,
        DensityArg::Sparse => Density::Sparse,
    };
    let template = ScheduleTemplate {
        n_cycles: args.n_cycles,
        ..ScheduleTemplate::new(args.cycle_length, density)
    };
    let spec = VirtualCohortSpec {
        spread: ParameterSpread::uniform(args.spread_cv),
        noise_sd: args.noise,
        cumulative_toxicity: args.toxicity,
        id_prefix: args.id_prefix.clone(),
        ..VirtualCohortSpec::new(args.n, vec![template], seed)
    };
    let cohort = generate_virtual_cohort(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let records: Vec<PatientRecord> = cohort.iter().map(|p| p.record.clone()).collect();
    write_patients(
        &records,
        &args.out_dir.join("observations.csv"),
        &args.out_dir.join("schedules.csv"),
    )?;
    let truth: std::collections::BTreeMap<&str, _> =
        cohort.iter().map(|p| (p.record.id.as_str(), &p.truth)).collect();
    std::fs::write(
        args.out_dir.join("truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    println!("wrote {} virtual patients to {}", cohort.len(), args.out_dir.display());
    Ok(())
}

fn fit_path(dir: &Path, patient: &str, model: &str, n_train: usize) -> PathBuf {
    dir.join(format!("{patient}__{model}__{n_train}.json"))
}

/// Fits one patient at one split for every requested model. The Friberg
/// fit is always computed first because the hybrid and data-driven
/// pipelines start from it.
fn fit_patient_split(
    record: &PatientRecord,
    n_train: usize,
    models: &[ModelId],
    config: &PipelineConfig,
) -> Result<Vec<FitResult>> {
    let split = split_by_cycles(record, n_train)?;
    let friberg = fit_mechanistic(
        MechModel::Friberg,
        record,
        &split,
        &default_penalty(MechModel::Friberg),
        &config.nm,
    )?;
    let mut out = Vec::new();
    for &m in models {
        let fit = match m {
            ModelId::Friberg => friberg.clone(),
            ModelId::Henrich | ModelId::Ms | ModelId::MsRev => {
                let mech = m.mech().unwrap();
                fit_mechanistic(mech, record, &split, &default_penalty(mech), &config.nm)?
            }
            ModelId::UdeAdd => train_ude_add(record, &split, &friberg, config)?,
            ModelId::UdeRep => train_ude_rep(record, &split, &friberg, config)?,
            ModelId::ArxGru => train_arx_gru(record, &split, &friberg, config)?,
        };
        out.push(fit);
    }
    Ok(out)
}

fn cmd_fit(args: &FitArgs, r: &Resolved) -> Result<()> {
    let master = require_seed(r.seed)?;
    let records = ingest_patients(&args.obs, &args.schedules)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let tasks: Vec<(&PatientRecord, usize)> = records
        .iter()
        .flat_map(|rec| r.splits.iter().map(move |&n| (rec, n)))
        .collect();
    let fits: Vec<Vec<FitResult>> = tasks
        .par_iter()
        .map(|(rec, n)| {
            let mut config = r.pipeline.clone();
            config.seed = derive_seed(master, &format!("{}|{}", rec.id, n));
            fit_patient_split(rec, *n, &r.models, &config)
        })
        .collect::<Result<_>>()?;
    for fit in fits.iter().flatten() {
        let path = fit_path(&args.out_dir, &fit.patient_id, &fit.model_id, fit.n_train_cycles);
        std::fs::write(&path, serde_json::to_string_pretty(fit)?)?;
    }
    println!(
        "fitted {} models x {} splits for {} patients into {}",
        r.models.len(),
        r.splits.len(),
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, r: &Resolved) -> Result<()> {
    let records = ingest_patients(&args.obs, &args.schedules)?;
    let mut tasks = Vec::new();
    let mut missing = Vec::new();
    for rec in &records {
        for &m in &r.models {
            for &n in &r.splits {
                if n >= rec.schedule.n_cycles() {
                    continue; // no held-out cycle at this split
                }
                let path = fit_path(&args.fits_dir, &rec.id, m.id(), n);
                if path.exists() {
                    tasks.push((rec, m, n, path));
                } else {
                    missing.push(format!("({}, {}, n_train={n})", rec.id, m.id()));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "fit artifacts for {} cells: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let evals: Vec<PatientEval> = tasks
        .par_iter()
        .map(|(rec, m, n, path)| {
            let fit: FitResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let split = split_by_cycles(rec, *n)?;
            let smse = test_smse(&fit, rec, &split)?;
            Ok(PatientEval {
                patient_id: rec.id.clone(),
                model_id: m.id().to_string(),
                group: rec.group,
                n_train_cycles: *n,
                smse,
            })
        })
        .collect::<Result<_>>()?;

    let groups: Vec<Group> = records
        .iter()
        .map(|rec| rec.group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let models: Vec<String> = r.models.iter().map(|m| m.id().to_string()).collect();
    let meta = ReportMeta {
        seed: r.seed.unwrap_or(0),
        config_hash: run_hash(&models, &r.splits, r.significance, &r.pipeline)?,
        significance: r.significance,
    };
    let report = aggregate(&evals, &models, &groups, &r.splits, &meta)?;
    emit_report(&report, &args.out_dir)?;
    println!(
        "evaluated {} cells over {} patients; report in {}",
        report.cells.len(),
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// SHA-256 over the resolved run settings, hex encoded.
fn run_hash(
    models: &[String],
    splits: &[usize],
    significance: f64,
    pipeline: &PipelineConfig,
) -> Result<String> {
    let canon = serde_json::to_vec(&serde_json::json!({
        "models": models,
        "splits": splits,
        "significance": significance,
        "pipeline": pipeline,
    }))?;
    let digest = Sha256::new().chain_update(&canon).finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
