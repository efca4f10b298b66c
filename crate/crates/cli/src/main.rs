//! volt-sim: end-to-end harness for the volunteer-computing simulator.
//!
//! Stages exchange plain CSV/JSON artifacts: generate -> preprocess ->
//! train -> simulate -> report, plus a sweep over densification intervals
//! and schedulers. Errors leave as single-line JSON on stderr with a
//! non-zero exit code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use voltsim_core::analysis;
use voltsim_core::config::{thread_cap_from_env, Config};
use voltsim_core::io;
use voltsim_core::model::Fleet;
use voltsim_core::pipeline;
use voltsim_core::predictors::{AccuracyHistory, PredictorChoice};
use voltsim_core::preprocess::MonthId;
use voltsim_core::schedulers::SchedulerKind;
use voltsim_core::simulator::SimulationReport;

#[derive(Parser)]
#[command(name = "volt-sim", version, about = "Trace-driven volunteer-computing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration JSON; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the target month range, e.g. 2009-04..2009-06.
    #[arg(long)]
    months: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic bundle: interactive trace, tasks, energy
    /// profiles, and reboot schedule.
    GenTrace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Splits idle periods on reboots and derives per-logout idle targets.
    Preprocess {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        energy: PathBuf,
        #[arg(long)]
        reboots: PathBuf,
        /// Output records CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monthly retraining: annotates records with predicted idle times.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        energy: PathBuf,
        /// Densification interval override, minutes.
        #[arg(long)]
        delta: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replays the traces under one scheduler and writes the report JSON.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// random | crystal | ml:rf | ml:mlp | ml:max | ml:min | ml:avg |
        /// ml:lastmonth | ml:bestavg
        #[arg(long)]
        scheduler: String,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        energy: PathBuf,
        #[arg(long)]
        reboots: PathBuf,
        /// Annotated trace (required for ml:* schedulers).
        #[arg(long)]
        annotated: Option<PathBuf>,
        /// Reboot-prediction annex (required for ml:* schedulers).
        #[arg(long)]
        annex: Option<PathBuf>,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also writes the event log CSV for replay debugging.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Summarizes reports into comparison tables.
    Report {
        /// Report JSON files.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Baseline scheduler for the relative table.
        #[arg(long, default_value = "random")]
        baseline: String,
        /// Accuracy CSV; adds the box-plot summary when given.
        #[arg(long)]
        accuracy: Option<PathBuf>,
        /// Display floor for r-squared values.
        #[arg(long, default_value_t = -3.2)]
        r2_floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the full pipeline over a densification and scheduler grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Densification intervals in minutes, e.g. 5,10,20.
        #[arg(long, default_value = "10")]
        delta: String,
        /// Schedulers to run (comma separated); defaults to all.
        #[arg(long)]
        scheduler: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            kind: "usage",
            message: message.into(),
        }
    }
}

macro_rules! from_error {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError {
                    kind: $kind,
                    message: e.to_string(),
                }
            }
        }
    };
}

from_error!(voltsim_core::config::ConfigError, "config");
from_error!(io::IoError, "io");
from_error!(pipeline::PipelineError, "pipeline");
from_error!(std::io::Error, "io");

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        let payload = serde_json::json!({
            "error": { "kind": e.kind, "message": e.message }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config, CliError> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(months) = &args.months {
        let (first, last) = parse_month_range(months)?;
        cfg.train.first_target_month = first;
        cfg.train.last_target_month = last;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_month_range(s: &str) -> Result<(MonthId, MonthId), CliError> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| CliError::usage(format!("bad month range {s:?}, expected A..B")))?;
    let first: MonthId = a
        .parse()
        .map_err(|_| CliError::usage(format!("bad month {a:?}")))?;
    let last: MonthId = b
        .parse()
        .map_err(|_| CliError::usage(format!("bad month {b:?}")))?;
    if first > last {
        return Err(CliError::usage("month range is reversed"));
    }
    Ok((first, last))
}

fn parse_delta_list(s: &str) -> Result<Vec<i64>, CliError> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<i64>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| CliError::usage(format!("bad delta {part:?}")))
        })
        .collect()
}

fn parse_scheduler(s: &str) -> Result<SchedulerKind, CliError> {
    SchedulerKind::parse(s)
        .ok_or_else(|| CliError::usage(format!("unknown scheduler {s:?}")))
}

/// Loads the fleet the way every stage does: cluster profiles from the
/// energy table, machine registry from the computers named in the trace.
fn load_fleet(trace: &Path, energy: &Path) -> Result<(Vec<io::RawSession>, Fleet), CliError> {
    let raw = io::read_interactive_csv(trace)?;
    let profiles = io::read_energy_csv(energy)?;
    let fleet = io::fleet_from_trace(&raw, &profiles)?;
    Ok((raw, fleet))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenTrace { config, out } => {
            let cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let bundle = pipeline::generate(&cfg)?;
            io::write_interactive_csv(&out.join("interactive.csv"), &bundle.sessions, &bundle.fleet)?;
            io::write_tasks_csv(&out.join("tasks.csv"), &bundle.tasks)?;
            io::write_energy_csv(&out.join("energy.csv"), &bundle.fleet)?;
            io::write_reboots_csv(&out.join("reboots.csv"), &bundle.schedule, &bundle.fleet)?;
            cfg.save(&out.join("config.json"))?;
            println!(
                "generated {} machines, {} sessions, {} tasks into {}",
                bundle.fleet.machine_count(),
                bundle.sessions.len(),
                bundle.tasks.len(),
                out.display()
            );
            Ok(())
        }

        Command::Preprocess {
            config,
            trace,
            energy,
            reboots,
            out,
        } => {
            let cfg = load_config(&config)?;
            let (raw, fleet) = load_fleet(&trace, &energy)?;
            let sessions = io::resolve_sessions(&raw, &fleet)?;
            let schedule = io::read_reboots_csv(&reboots, &fleet)?;
            let bundle = pipeline::Bundle {
                fleet: fleet.clone(),
                sessions,
                tasks: Vec::new(),
                schedule,
            };
            let records = pipeline::preprocess(&bundle, &cfg)?;
            io::write_records_csv(&out, &records, &fleet)?;
            println!("wrote {} idle records to {}", records.len(), out.display());
            Ok(())
        }

        Command::Train {
            config,
            records,
            energy,
            delta,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(minutes) = delta {
                if minutes <= 0 {
                    return Err(CliError::usage("delta must be positive"));
                }
                cfg.preprocess.delta_minutes = minutes;
            }
            std::fs::create_dir_all(&out)?;
            let profiles = io::read_energy_csv(&energy)?;
            // Records name every fleet machine (reboot markers cover the
            // silent ones), so the registry can be rebuilt from them.
            let fleet = records_fleet(&records, &profiles)?;
            let rows = io::read_records_csv(&records, &fleet)?;
            let predictions = pipeline::train(&rows, &cfg, thread_cap_from_env())?;
            for choice in PredictorChoice::ALL {
                let resolved = predictions.resolve(choice);
                io::write_annotated_csv(
                    &out.join(format!("annotated_{}.csv", choice.as_str())),
                    &out.join(format!("annex_{}.csv", choice.as_str())),
                    &resolved,
                    &fleet,
                )?;
            }
            io::write_accuracy_csv(&out.join("accuracy.csv"), &predictions.history, &fleet)?;
            println!(
                "trained {} computer-months, wrote annotations for {} predictors to {}",
                predictions.history.entries.len() / 2,
                PredictorChoice::ALL.len(),
                out.display()
            );
            Ok(())
        }

        Command::Simulate {
            config,
            scheduler,
            trace,
            tasks,
            energy,
            reboots,
            annotated,
            annex,
            out,
            event_log,
        } => {
            let mut cfg = load_config(&config)?;
            if event_log.is_some() {
                cfg.sim.record_event_log = true;
            }
            let kind = parse_scheduler(&scheduler)?;
            let (raw, fleet) = load_fleet(&trace, &energy)?;
            let sessions = io::resolve_sessions(&raw, &fleet)?;
            let schedule = io::read_reboots_csv(&reboots, &fleet)?;
            let task_list = io::read_tasks_csv(&tasks)?;

            let annotations = match (kind.needs_annotations(), annotated, annex) {
                (false, _, _) => None,
                (true, Some(a), Some(x)) => Some(io::read_annotations(&a, &x, &fleet)?),
                (true, _, _) => {
                    return Err(CliError::usage(
                        "ml schedulers need --annotated and --annex",
                    ))
                }
            };

            let bundle = pipeline::Bundle {
                fleet,
                sessions,
                tasks: task_list,
                schedule,
            };
            let sim = pipeline::simulate(&bundle, &cfg, kind, annotations.as_ref())?;
            io::write_report_json(&out, &sim.report)?;
            if let (Some(path), Some(log)) = (event_log, &sim.event_log) {
                io::write_event_log_csv(&path, log)?;
            }
            println!(
                "{}: {} completed, {} queued, {:.2} MWh total HTC energy",
                sim.report.scheduler,
                sim.report.tasks_completed,
                sim.report.tasks_queued_at_horizon,
                sim.report.total_htc_mwh
            );
            Ok(())
        }

        Command::Report {
            reports,
            baseline,
            accuracy,
            r2_floor,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let loaded: Vec<SimulationReport> = reports
                .iter()
                .map(|p| io::read_report_json(p))
                .collect::<Result<_, _>>()?;
            io::write_comparison_csv(&out.join("comparison.csv"), &loaded)?;
            let relative = analysis::relative_report(&loaded, &baseline).map_err(|e| CliError {
                kind: "analysis",
                message: e.to_string(),
            })?;
            io::write_relative_csv(&out.join("relative.csv"), &relative)?;
            if let Some(path) = accuracy {
                let history = read_accuracy_loose(&path)?;
                let rows = analysis::accuracy_summary(&history, r2_floor);
                io::write_accuracy_summary_csv(&out.join("accuracy_summary.csv"), &rows)?;
            }
            println!("wrote comparison tables for {} reports to {}", loaded.len(), out.display());
            Ok(())
        }

        Command::Sweep {
            config,
            delta,
            scheduler,
            out,
        } => {
            let cfg = load_config(&config)?;
            let deltas = parse_delta_list(&delta)?;
            let schedulers: Vec<SchedulerKind> = match scheduler {
                None => SchedulerKind::ALL.to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|s| parse_scheduler(s.trim()))
                    .collect::<Result<_, _>>()?,
            };
            std::fs::create_dir_all(&out)?;
            run_sweep(&cfg, &deltas, &schedulers, &out)
        }
    }
}

/// Rebuilds the fleet registry from a records CSV: reboot markers cover
/// every machine, so the name set matches the interactive trace's.
fn records_fleet(
    records_path: &Path,
    profiles: &BTreeMap<String, voltsim_core::model::EnergyProfile>,
) -> Result<Fleet, CliError> {
    let text = std::fs::read_to_string(records_path)?;
    let mut names = Vec::new();
    for line in text.lines().skip(2) {
        if let Some(name) = line.split(',').nth(1) {
            names.push(name.to_string());
        }
    }
    let raw: Vec<io::RawSession> = names
        .into_iter()
        .map(|computer| io::RawSession {
            login_ms: 0,
            computer,
            logout_ms: 0,
        })
        .collect();
    Ok(io::fleet_from_trace(&raw, profiles)?)
}

/// Reads an accuracy CSV without a fleet registry, assigning computer ids
/// from the order names first appear; the summary only needs identity.
fn read_accuracy_loose(path: &Path) -> Result<AccuracyHistory, CliError> {
    use voltsim_core::model::ComputerId;
    use voltsim_core::predictors::{AccuracyEntry, ModelKind};

    let text = std::fs::read_to_string(path)?;
    let mut ids: BTreeMap<String, u32> = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("computer,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::usage(format!(
                "{} line {}: expected 5 fields",
                path.display(),
                i + 1
            )));
        }
        let next = ids.len() as u32;
        let machine = *ids.entry(fields[0].to_string()).or_insert(next);
        let model = match fields[2] {
            "rf" => ModelKind::Forest,
            "mlp" => ModelKind::Mlp,
            other => return Err(CliError::usage(format!("unknown model {other:?}"))),
        };
        entries.push(AccuracyEntry {
            computer: ComputerId {
                cluster: 0,
                machine,
            },
            month: fields[1]
                .parse()
                .map_err(|_| CliError::usage(format!("bad month {:?}", fields[1])))?,
            model,
            mse: fields[3]
                .parse()
                .map_err(|_| CliError::usage(format!("bad mse {:?}", fields[3])))?,
            r2: if fields[4].is_empty() {
                None
            } else {
                Some(
                    fields[4]
                        .parse()
                        .map_err(|_| CliError::usage(format!("bad r2 {:?}", fields[4])))?,
                )
            },
        });
    }
    Ok(AccuracyHistory { entries })
}

fn run_sweep(
    cfg: &Config,
    deltas: &[i64],
    schedulers: &[SchedulerKind],
    out: &Path,
) -> Result<(), CliError> {
    let bundle = pipeline::generate(cfg)?;
    let threads = thread_cap_from_env();

    let mut comparison_rows: Vec<Vec<String>> = Vec::new();
    let mut accuracy_rows: Vec<Vec<String>> = Vec::new();

    for &delta in deltas {
        let mut delta_cfg = cfg.clone();
        delta_cfg.preprocess.delta_minutes = delta;
        let records = pipeline::preprocess(&bundle, &delta_cfg)?;
        let needs_training = schedulers.iter().any(|s| s.needs_annotations());
        let predictions = if needs_training {
            Some(pipeline::train(&records, &delta_cfg, threads)?)
        } else {
            None
        };

        if let Some(predictions) = &predictions {
            for e in &predictions.history.entries {
                accuracy_rows.push(vec![
                    delta.to_string(),
                    bundle.fleet.computer_name(e.computer),
                    e.month.to_string(),
                    e.model.as_str().to_string(),
                    e.mse.to_string(),
                    e.r2.map(|v| v.to_string()).unwrap_or_default(),
                ]);
            }
        }

        for &kind in schedulers {
            let index = match (&predictions, kind) {
                (Some(p), SchedulerKind::Ml(choice)) => {
                    Some(pipeline::annotation_index(p, choice))
                }
                _ => None,
            };
            let report = pipeline::simulate(&bundle, &delta_cfg, kind, index.as_ref())?.report;
            comparison_rows.push(vec![
                delta.to_string(),
                report.scheduler.clone(),
                format!("{:.2}", report.mean_overhead_minutes),
                format!("{:.2}", report.total_htc_mwh),
                format!("{:.2}", report.productive_mwh),
                format!("{:.2}", report.wasted_mwh),
            ]);
        }
    }

    write_sweep_csv(
        &out.join("sweep_comparison.csv"),
        &[
            "delta_minutes",
            "scheduler",
            "overhead_min",
            "total_MWh",
            "productive_MWh",
            "wasted_MWh",
        ],
        &comparison_rows,
    )?;
    write_sweep_csv(
        &out.join("sweep_accuracy.csv"),
        &["delta_minutes", "computer", "month", "model", "mse", "r2"],
        &accuracy_rows,
    )?;
    println!(
        "swept {} deltas x {} schedulers into {}",
        deltas.len(),
        schedulers.len(),
        out.display()
    );
    Ok(())
}

fn write_sweep_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = format!("# voltsim-schema: sweep/v{}\n", io::SCHEMA_VERSION);
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
