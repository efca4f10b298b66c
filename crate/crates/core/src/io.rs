//! Readers and writers for every pipeline artifact. All CSVs are UTF-8 with
//! LF line endings and mandatory headers, preceded by one comment line
//! naming the artifact kind and schema version; a stage rejects inputs whose
//! version tag disagrees with its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::analysis::{AccuracySummaryRow, RelativeRow};
use crate::model::{
    ComputerId, DurationMs, EnergyProfile, Fleet, IdleRecord, InteractiveSession, ModelError,
    RebootSchedule, SessionKind, Task, TaskId, TimeMs,
};
use crate::predictors::{AccuracyEntry, AccuracyHistory, ModelKind};
use crate::preprocess::MonthId;
use crate::simulator::{AnnotationIndex, EventLogEntry, SimulationReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: expected {expected} artifact, found schema tag {found:?}")]
    SchemaMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn schema_tag(kind: &str) -> String {
    format!("# voltsim-schema: {kind}/v{SCHEMA_VERSION}")
}

/// Splits off and checks the leading schema comment. Untagged files are
/// accepted as current-version for interoperability with hand-made inputs.
fn strip_schema_line<'a>(path: &Path, kind: &str, text: &'a str) -> Result<&'a str, IoError> {
    if let Some(first) = text.lines().next() {
        if let Some(tag) = first.strip_prefix("# voltsim-schema: ") {
            let expected = format!("{kind}/v{SCHEMA_VERSION}");
            if tag.trim() != expected {
                return Err(IoError::SchemaMismatch {
                    path: path.display().to_string(),
                    expected,
                    found: tag.trim().to_string(),
                });
            }
            return Ok(&text[first.len() + 1..]);
        }
    }
    Ok(text)
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Malformed {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_csv(path: &Path, kind: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>, IoError> {
    let text = std::fs::read_to_string(path)?;
    let body = strip_schema_line(path, kind, &text)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(body.as_bytes());
    let got = reader.headers()?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(malformed(
            path,
            1,
            format!("header {:?}, expected {:?}", got, header.join(",")),
        ));
    }
    Ok(reader.records().collect::<Result<_, _>>()?)
}

fn write_csv(
    path: &Path,
    kind: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), IoError> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", schema_tag(kind));
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_i64(path: &Path, line: usize, field: &str, value: &str) -> Result<i64, IoError> {
    value
        .parse::<i64>()
        .map_err(|_| malformed(path, line, format!("bad {field} {value:?}")))
}

fn parse_f64(path: &Path, line: usize, field: &str, value: &str) -> Result<f64, IoError> {
    value
        .parse::<f64>()
        .map_err(|_| malformed(path, line, format!("bad {field} {value:?}")))
}

// ---- interactive trace: login_ms,computer,logout_ms ------------------------

/// A trace row before the fleet registry exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSession {
    pub login_ms: i64,
    pub computer: String,
    pub logout_ms: i64,
}

pub fn write_interactive_csv(
    path: &Path,
    sessions: &[InteractiveSession],
    fleet: &Fleet,
) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = sessions
        .iter()
        .filter(|s| s.kind == SessionKind::Real)
        .map(|s| {
            vec![
                s.login.0.to_string(),
                fleet.computer_name(s.computer),
                s.logout.0.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        "interactive",
        &["login_ms", "computer", "logout_ms"],
        &rows,
    )
}

pub fn read_interactive_csv(path: &Path) -> Result<Vec<RawSession>, IoError> {
    let records = read_csv(path, "interactive", &["login_ms", "computer", "logout_ms"])?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RawSession {
                login_ms: parse_i64(path, i + 2, "login_ms", &r[0])?,
                computer: r[1].to_string(),
                logout_ms: parse_i64(path, i + 2, "logout_ms", &r[2])?,
            })
        })
        .collect()
}

/// Builds the fleet registry from the computers named in a raw trace plus the
/// per-cluster energy table. Index assignment is lexicographic and therefore
/// stable across runs.
pub fn fleet_from_trace(
    raw: &[RawSession],
    energy: &BTreeMap<String, EnergyProfile>,
) -> Result<Fleet, IoError> {
    let pairs: Vec<(String, String)> = raw
        .iter()
        .map(|r| {
            r.computer
                .split_once('/')
                .map(|(c, m)| (c.to_string(), m.to_string()))
                .ok_or_else(|| ModelError::BadComputerName(r.computer.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(Fleet::from_names(pairs, energy)?)
}

pub fn resolve_sessions(
    raw: &[RawSession],
    fleet: &Fleet,
) -> Result<Vec<InteractiveSession>, IoError> {
    raw.iter()
        .map(|r| {
            Ok(InteractiveSession::real(
                TimeMs(r.login_ms),
                fleet.resolve(&r.computer)?,
                TimeMs(r.logout_ms),
            ))
        })
        .collect()
}

// ---- task trace: task_id,submit_ms,duration_ms -----------------------------

pub fn write_tasks_csv(path: &Path, tasks: &[Task]) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = tasks
        .iter()
        .map(|t| {
            vec![
                t.id.0.to_string(),
                t.submit.0.to_string(),
                t.duration.0.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        "tasks",
        &["task_id", "submit_ms", "duration_ms"],
        &rows,
    )
}

pub fn read_tasks_csv(path: &Path) -> Result<Vec<Task>, IoError> {
    let records = read_csv(path, "tasks", &["task_id", "submit_ms", "duration_ms"])?;
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let id = parse_i64(path, i + 2, "task_id", &r[0])? as u64;
            if !seen.insert(id) {
                return Err(malformed(path, i + 2, format!("duplicate task_id {id}")));
            }
            let duration = parse_i64(path, i + 2, "duration_ms", &r[2])?;
            if duration < 0 {
                return Err(malformed(path, i + 2, "negative duration"));
            }
            Ok(Task::new(
                TaskId(id),
                TimeMs(parse_i64(path, i + 2, "submit_ms", &r[1])?),
                DurationMs(duration),
            ))
        })
        .collect()
}

// ---- energy profiles: clusterName,active_w,idle_w,sleep_w -------------------

pub fn write_energy_csv(path: &Path, fleet: &Fleet) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = (0..fleet.cluster_count() as u32)
        .map(|c| {
            let p = fleet.profile(ComputerId {
                cluster: c,
                machine: 0,
            });
            vec![
                fleet.cluster_name(c).to_string(),
                p.active_w.to_string(),
                p.idle_w.to_string(),
                p.sleep_w.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        "energy",
        &["clusterName", "active_w", "idle_w", "sleep_w"],
        &rows,
    )
}

pub fn read_energy_csv(path: &Path) -> Result<BTreeMap<String, EnergyProfile>, IoError> {
    let records = read_csv(
        path,
        "energy",
        &["clusterName", "active_w", "idle_w", "sleep_w"],
    )?;
    let mut out = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let profile = EnergyProfile {
            active_w: parse_f64(path, i + 2, "active_w", &r[1])?,
            idle_w: parse_f64(path, i + 2, "idle_w", &r[2])?,
            sleep_w: parse_f64(path, i + 2, "sleep_w", &r[3])?,
        };
        profile.validate()?;
        out.insert(r[0].to_string(), profile);
    }
    Ok(out)
}

// ---- reboot schedule: clusterName,reboot_time_ms ----------------------------

pub fn write_reboots_csv(
    path: &Path,
    schedule: &RebootSchedule,
    fleet: &Fleet,
) -> Result<(), IoError> {
    let mut rows = Vec::new();
    for (cluster, times) in schedule.clusters() {
        for t in times {
            rows.push(vec![
                fleet.cluster_name(cluster).to_string(),
                t.0.to_string(),
            ]);
        }
    }
    write_csv(path, "reboots", &["clusterName", "reboot_time_ms"], &rows)
}

pub fn read_reboots_csv(path: &Path, fleet: &Fleet) -> Result<RebootSchedule, IoError> {
    let records = read_csv(path, "reboots", &["clusterName", "reboot_time_ms"])?;
    let by_name: BTreeMap<String, u32> = (0..fleet.cluster_count() as u32)
        .map(|c| (fleet.cluster_name(c).to_string(), c))
        .collect();
    let mut schedule = RebootSchedule::new();
    for (i, r) in records.iter().enumerate() {
        let cluster = *by_name
            .get(&r[0])
            .ok_or_else(|| malformed(path, i + 2, format!("unknown cluster {:?}", &r[0])))?;
        schedule.add(
            cluster,
            TimeMs(parse_i64(path, i + 2, "reboot_time_ms", &r[1])?),
        );
    }
    schedule.normalize();
    Ok(schedule)
}

// ---- annotated records: login_ms,computer,logout_ms,idle_ms,kind ------------

pub fn write_records_csv(
    path: &Path,
    records: &[IdleRecord],
    fleet: &Fleet,
) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.session.login.0.to_string(),
                fleet.computer_name(r.session.computer),
                r.session.logout.0.to_string(),
                r.idle.0.to_string(),
                r.session.kind.as_str().to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        "records",
        &["login_ms", "computer", "logout_ms", "idle_ms", "kind"],
        &rows,
    )
}

pub fn read_records_csv(path: &Path, fleet: &Fleet) -> Result<Vec<IdleRecord>, IoError> {
    let records = read_csv(
        path,
        "records",
        &["login_ms", "computer", "logout_ms", "idle_ms", "kind"],
    )?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let kind = SessionKind::parse(&r[4])
                .ok_or_else(|| malformed(path, i + 2, format!("unknown kind {:?}", &r[4])))?;
            Ok(IdleRecord {
                session: InteractiveSession {
                    login: TimeMs(parse_i64(path, i + 2, "login_ms", &r[0])?),
                    computer: fleet.resolve(&r[1])?,
                    logout: TimeMs(parse_i64(path, i + 2, "logout_ms", &r[2])?),
                    kind,
                },
                idle: DurationMs(parse_i64(path, i + 2, "idle_ms", &r[3])?),
            })
        })
        .collect()
}

// ---- annotated trace + reboot annex -----------------------------------------

/// Writes the per-logout predictions for real sessions and routes reboot
/// markers into the separate annex file keyed by reboot time.
pub fn write_annotated_csv(
    trace_path: &Path,
    annex_path: &Path,
    resolved: &[(InteractiveSession, DurationMs)],
    fleet: &Fleet,
) -> Result<(), IoError> {
    let mut trace_rows = Vec::new();
    let mut annex_rows = Vec::new();
    for (session, predicted) in resolved {
        match session.kind {
            SessionKind::Real => trace_rows.push(vec![
                session.login.0.to_string(),
                fleet.computer_name(session.computer),
                session.logout.0.to_string(),
                predicted.0.to_string(),
            ]),
            SessionKind::RebootSynthetic => annex_rows.push(vec![
                fleet.computer_name(session.computer),
                session.logout.0.to_string(),
                predicted.0.to_string(),
            ]),
            SessionKind::DensifySynthetic => {}
        }
    }
    write_csv(
        trace_path,
        "annotated",
        &["login_ms", "computer", "logout_ms", "predicted_idle_ms"],
        &trace_rows,
    )?;
    write_csv(
        annex_path,
        "annex",
        &["computer", "reboot_ms", "predicted_idle_ms"],
        &annex_rows,
    )
}

/// Loads the annotated trace plus annex into the lookup the simulator uses.
pub fn read_annotations(
    trace_path: &Path,
    annex_path: &Path,
    fleet: &Fleet,
) -> Result<AnnotationIndex, IoError> {
    let mut index = AnnotationIndex::new();
    let trace = read_csv(
        trace_path,
        "annotated",
        &["login_ms", "computer", "logout_ms", "predicted_idle_ms"],
    )?;
    for (i, r) in trace.iter().enumerate() {
        index.add_logout(
            fleet.resolve(&r[1])?,
            TimeMs(parse_i64(trace_path, i + 2, "logout_ms", &r[2])?),
            DurationMs(parse_i64(
                trace_path,
                i + 2,
                "predicted_idle_ms",
                &r[3],
            )?),
        );
    }
    let annex = read_csv(
        annex_path,
        "annex",
        &["computer", "reboot_ms", "predicted_idle_ms"],
    )?;
    for (i, r) in annex.iter().enumerate() {
        index.add_reboot(
            fleet.resolve(&r[0])?,
            TimeMs(parse_i64(annex_path, i + 2, "reboot_ms", &r[1])?),
            DurationMs(parse_i64(
                annex_path,
                i + 2,
                "predicted_idle_ms",
                &r[2],
            )?),
        );
    }
    Ok(index)
}

// ---- accuracy history: computer,month,model,mse,r2 ---------------------------

pub fn write_accuracy_csv(
    path: &Path,
    history: &AccuracyHistory,
    fleet: &Fleet,
) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = history
        .entries
        .iter()
        .map(|e| {
            vec![
                fleet.computer_name(e.computer),
                e.month.to_string(),
                e.model.as_str().to_string(),
                e.mse.to_string(),
                e.r2.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        path,
        "accuracy",
        &["computer", "month", "model", "mse", "r2"],
        &rows,
    )
}

pub fn read_accuracy_csv(path: &Path, fleet: &Fleet) -> Result<AccuracyHistory, IoError> {
    let records = read_csv(path, "accuracy", &["computer", "month", "model", "mse", "r2"])?;
    let entries = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let model = match &r[2] {
                "rf" => ModelKind::Forest,
                "mlp" => ModelKind::Mlp,
                other => return Err(malformed(path, i + 2, format!("unknown model {other:?}"))),
            };
            let month: MonthId = r[1]
                .parse()
                .map_err(|_| malformed(path, i + 2, format!("bad month {:?}", &r[1])))?;
            Ok(AccuracyEntry {
                computer: fleet.resolve(&r[0])?,
                month,
                model,
                mse: parse_f64(path, i + 2, "mse", &r[3])?,
                r2: if r[4].is_empty() {
                    None
                } else {
                    Some(parse_f64(path, i + 2, "r2", &r[4])?)
                },
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(AccuracyHistory { entries })
}

// ---- simulation report JSON ---------------------------------------------------

pub fn write_report_json(path: &Path, report: &SimulationReport) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<SimulationReport, IoError> {
    let text = std::fs::read_to_string(path)?;
    let report: SimulationReport = serde_json::from_str(&text)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaMismatch {
            path: path.display().to_string(),
            expected: format!("report/v{SCHEMA_VERSION}"),
            found: format!("report/v{}", report.schema_version),
        });
    }
    Ok(report)
}

// ---- event log ------------------------------------------------------------------

pub fn write_event_log_csv(path: &Path, log: &[EventLogEntry]) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.time_ms.to_string(),
                e.event.to_string(),
                e.computer.clone(),
                e.task.map(|t| t.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        path,
        "eventlog",
        &["time_ms", "event", "computer", "task"],
        &rows,
    )
}

// ---- analysis outputs -------------------------------------------------------------

/// Table-style comparison, MWh rounded to two decimals.
pub fn write_comparison_csv(path: &Path, reports: &[SimulationReport]) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.scheduler.clone(),
                format!("{:.2}", r.mean_overhead_minutes),
                format!("{:.2}", r.total_htc_mwh),
                format!("{:.2}", r.productive_mwh),
                format!("{:.2}", r.wasted_mwh),
            ]
        })
        .collect();
    write_csv(
        path,
        "comparison",
        &[
            "scheduler",
            "overhead_min",
            "total_MWh",
            "productive_MWh",
            "wasted_MWh",
        ],
        &rows,
    )
}

pub fn write_relative_csv(path: &Path, rows: &[RelativeRow]) -> Result<(), IoError> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scheduler.clone(),
                format!("{:.2}", r.energy_pct),
                format!("{:.2}", r.overhead_pct),
            ]
        })
        .collect();
    write_csv(
        path,
        "relative",
        &["scheduler", "energy_pct", "overhead_pct"],
        &out,
    )
}

pub fn write_accuracy_summary_csv(
    path: &Path,
    rows: &[AccuracySummaryRow],
) -> Result<(), IoError> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.month.to_string(),
                r.model.as_str().to_string(),
                r.computers.to_string(),
                format!("{:.4}", r.median),
                format!("{:.4}", r.q1),
                format!("{:.4}", r.q3),
                format!("{:.4}", r.whisker_low),
                format!("{:.4}", r.whisker_high),
            ]
        })
        .collect();
    write_csv(
        path,
        "accuracy-summary",
        &[
            "month",
            "model",
            "computers",
            "median",
            "q1",
            "q3",
            "whisker_low",
            "whisker_high",
        ],
        &out,
    )
}
