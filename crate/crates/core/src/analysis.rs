//! Report post-processing: overhead, energy decomposition, comparisons
//! against the Random baseline, autocorrelation, and prediction-accuracy
//! summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Task;
use crate::predictors::{AccuracyHistory, ModelKind};
use crate::preprocess::MonthId;
use crate::simulator::SimulationReport;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{0} tasks have not completed")]
    IncompleteTasks(usize),
    #[error("no report from the baseline scheduler {0:?}")]
    MissingBaseline(String),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("series length {len} does not exceed max lag {max_lag}")]
    SeriesTooShort { len: usize, max_lag: usize },
    #[error("empty input")]
    EmptyInput,
}

/// Mean task overhead in minutes: time in the system beyond the pure
/// execution time, averaged over the task set. Every task must be complete.
pub fn mean_overhead(tasks: &[Task]) -> Result<f64, AnalysisError> {
    if tasks.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let incomplete = tasks.iter().filter(|t| !t.completed()).count();
    if incomplete > 0 {
        return Err(AnalysisError::IncompleteTasks(incomplete));
    }
    let total_ms: i64 = tasks
        .iter()
        .map(|t| {
            let finish = t.finish_time().expect("completed");
            finish.0 - t.submit.0 - t.duration.0
        })
        .sum();
    Ok(total_ms as f64 / tasks.len() as f64 / 60_000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnergyDecomposition {
    #[serde(rename = "productiveMWh")]
    pub productive_mwh: f64,
    #[serde(rename = "wastedMWh")]
    pub wasted_mwh: f64,
    #[serde(rename = "totalMWh")]
    pub total_mwh: f64,
}

/// Splits a report's HTC energy: productive is the completed attempts,
/// wasted the aborted ones; the total is exactly their sum.
pub fn energy_decompose(report: &SimulationReport) -> EnergyDecomposition {
    EnergyDecomposition {
        productive_mwh: report.productive_mwh,
        wasted_mwh: report.wasted_mwh,
        total_mwh: report.productive_mwh + report.wasted_mwh,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub scheduler: String,
    /// Total HTC energy as a percentage of the baseline's.
    pub energy_pct: f64,
    /// Mean overhead as a percentage of the baseline's.
    pub overhead_pct: f64,
    /// 100 - energy_pct.
    pub energy_saving_pct: f64,
}

/// Scales every report's energy and overhead to a percentage of the baseline
/// scheduler's (the baseline row itself comes out at exactly 100%).
pub fn relative_report(
    reports: &[SimulationReport],
    baseline: &str,
) -> Result<Vec<RelativeRow>, AnalysisError> {
    let base = reports
        .iter()
        .find(|r| r.scheduler == baseline)
        .ok_or_else(|| AnalysisError::MissingBaseline(baseline.to_string()))?;
    let pct = |value: f64, base: f64| {
        if base == 0.0 {
            if value == 0.0 {
                100.0
            } else {
                f64::INFINITY
            }
        } else {
            value / base * 100.0
        }
    };
    Ok(reports
        .iter()
        .map(|r| {
            let energy_pct = pct(r.total_htc_mwh, base.total_htc_mwh);
            RelativeRow {
                scheduler: r.scheduler.clone(),
                energy_pct,
                overhead_pct: pct(r.mean_overhead_minutes, base.mean_overhead_minutes),
                energy_saving_pct: 100.0 - energy_pct,
            }
        })
        .collect())
}

/// Sample autocorrelation at lags 1..=max_lag. Uses the biased estimator
/// normalized by the full-series variance, so every value lies in [-1, 1].
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>, AnalysisError> {
    if series.len() <= max_lag {
        return Err(AnalysisError::SeriesTooShort {
            len: series.len(),
            max_lag,
        });
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
    if denom == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((1..=max_lag)
        .map(|k| {
            let num: f64 = (0..n - k)
                .map(|t| (series[t] - mean) * (series[t + k] - mean))
                .sum();
            num / denom
        })
        .collect())
}

/// One box-and-whisker line of the r-squared distribution across computers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummaryRow {
    pub month: MonthId,
    pub model: ModelKind,
    pub computers: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Per month and model: median, quartiles, and Tukey whiskers of the
/// per-computer r-squared values, clipped at `floor` for display.
pub fn accuracy_summary(history: &AccuracyHistory, floor: f64) -> Vec<AccuracySummaryRow> {
    use std::collections::BTreeMap;
    let mut grouped: BTreeMap<(MonthId, ModelKind), Vec<f64>> = BTreeMap::new();
    for e in &history.entries {
        if let Some(r2) = e.r2 {
            grouped.entry((e.month, e.model)).or_default().push(r2);
        }
    }
    grouped
        .into_iter()
        .map(|((month, model), mut values)| {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q1 = quantile(&values, 0.25);
            let q3 = quantile(&values, 0.75);
            let iqr = q3 - q1;
            let lo_fence = q1 - 1.5 * iqr;
            let hi_fence = q3 + 1.5 * iqr;
            let whisker_low = values
                .iter()
                .copied()
                .find(|&v| v >= lo_fence)
                .unwrap_or(values[0]);
            let whisker_high = values
                .iter()
                .rev()
                .copied()
                .find(|&v| v <= hi_fence)
                .unwrap_or(values[values.len() - 1]);
            let clip = |v: f64| v.max(floor);
            AccuracySummaryRow {
                month,
                model,
                computers: values.len(),
                median: clip(quantile(&values, 0.5)),
                q1: clip(q1),
                q3: clip(q3),
                whisker_low: clip(whisker_low),
                whisker_high: clip(whisker_high),
            }
        })
        .collect()
}

/// Linear-interpolation quantile over a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attempt, AttemptOutcome, ComputerId, DurationMs, TaskId, TimeMs};
    use crate::predictors::AccuracyEntry;
    use proptest::prelude::*;

    fn completed_task(submit_min: i64, finish_min: i64, duration_min: i64) -> Task {
        let mut t = Task::new(
            TaskId(finish_min as u64),
            TimeMs(submit_min * 60_000),
            DurationMs::from_minutes(duration_min),
        );
        t.attempts.push(Attempt {
            computer: ComputerId {
                cluster: 0,
                machine: 0,
            },
            start: TimeMs((finish_min - duration_min) * 60_000),
            end: TimeMs(finish_min * 60_000),
            outcome: AttemptOutcome::Completed,
        });
        t
    }

    #[test]
    fn overhead_is_time_in_system_minus_execution() {
        // Submit 0, finish 25 min, duration 10 min: overhead 15 min.
        let tasks = vec![completed_task(0, 25, 10)];
        assert_eq!(mean_overhead(&tasks).unwrap(), 15.0);
    }

    #[test]
    fn instant_start_has_zero_overhead() {
        let tasks = vec![completed_task(0, 10, 10)];
        assert_eq!(mean_overhead(&tasks).unwrap(), 0.0);
    }

    #[test]
    fn overhead_averages_across_tasks() {
        let tasks = vec![completed_task(0, 20, 10), completed_task(0, 30, 10)];
        assert_eq!(mean_overhead(&tasks).unwrap(), 15.0);
    }

    #[test]
    fn incomplete_tasks_are_rejected() {
        let t = Task::new(TaskId(1), TimeMs(0), DurationMs::from_minutes(5));
        assert_eq!(
            mean_overhead(&[t]),
            Err(AnalysisError::IncompleteTasks(1))
        );
    }

    fn report_with(scheduler: &str, productive_mwh: f64, wasted_mwh: f64, overhead: f64) -> SimulationReport {
        let j = crate::simulator::JOULES_PER_MWH;
        SimulationReport {
            schema_version: 1,
            scheduler: scheduler.to_string(),
            seed: 0,
            window_start_ms: 0,
            horizon_ms: 0,
            mean_overhead_minutes: overhead,
            total_htc_mwh: productive_mwh + wasted_mwh,
            productive_mwh,
            wasted_mwh,
            total_htc_joules: (productive_mwh + wasted_mwh) * j,
            productive_joules: productive_mwh * j,
            wasted_joules: wasted_mwh * j,
            tasks_completed: 0,
            tasks_queued_at_horizon: 0,
            fleet_active_mwh: 0.0,
            fleet_idle_mwh: 0.0,
            fleet_sleep_mwh: 0.0,
            per_machine: Vec::new(),
            per_task: Vec::new(),
        }
    }

    #[test]
    fn decomposition_reproduces_the_random_row() {
        // 33.85 productive + 87.68 wasted = 121.53 total.
        let r = report_with("random", 33.85, 87.68, 14.61);
        let d = energy_decompose(&r);
        assert!((d.total_mwh - 121.53).abs() / 121.53 < 1e-12);
        assert_eq!(d.total_mwh, d.productive_mwh + d.wasted_mwh);
    }

    #[test]
    fn zero_abort_run_has_zero_waste() {
        let r = report_with("crystal", 32.07, 0.0, 20.90);
        let d = energy_decompose(&r);
        assert_eq!(d.wasted_mwh, 0.0);
        assert_eq!(d.total_mwh, 32.07);
    }

    #[test]
    fn empty_task_set_decomposes_to_zero() {
        let r = report_with("random", 0.0, 0.0, 0.0);
        let d = energy_decompose(&r);
        assert_eq!(d.total_mwh, 0.0);
        assert_eq!(d.productive_mwh, 0.0);
        assert_eq!(d.wasted_mwh, 0.0);
    }

    #[test]
    fn relative_report_recovers_published_savings() {
        let reports = vec![
            report_with("random", 33.85, 87.68, 14.61),
            report_with("ml:min", 33.91, 25.21, 15.32),
            report_with("ml:max", 32.89, 30.63, 11.80),
        ];
        let rows = relative_report(&reports, "random").unwrap();
        let min = rows.iter().find(|r| r.scheduler == "ml:min").unwrap();
        assert!((min.energy_saving_pct - 51.4).abs() < 0.1);
        let max = rows.iter().find(|r| r.scheduler == "ml:max").unwrap();
        assert!((100.0 - max.overhead_pct - 19.3).abs() < 0.1);
    }

    #[test]
    fn baseline_against_itself_is_exactly_100() {
        let reports = vec![report_with("random", 30.0, 70.0, 12.0)];
        let rows = relative_report(&reports, "random").unwrap();
        assert_eq!(rows[0].energy_pct, 100.0);
        assert_eq!(rows[0].overhead_pct, 100.0);
        assert_eq!(rows[0].energy_saving_pct, 0.0);
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let reports = vec![report_with("crystal", 1.0, 0.0, 1.0)];
        assert_eq!(
            relative_report(&reports, "random"),
            Err(AnalysisError::MissingBaseline("random".to_string()))
        );
    }

    #[test]
    fn alternating_series_has_acf_near_minus_one() {
        let n = 1_000;
        let series: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = acf(&series, 1).unwrap();
        assert!((r[0] + 1.0).abs() < 2.0 / n as f64);
    }

    #[test]
    fn white_noise_acf_stays_inside_significance_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let n = 10_000;
        let series: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = acf(&series, 50).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        let inside = r.iter().filter(|v| v.abs() < bound).count();
        assert!(inside >= 45, "only {inside}/50 lags inside the bound");
    }

    #[test]
    fn constant_bursts_have_high_lag_one_acf() {
        // 100-long bursts of alternating levels.
        let series: Vec<f64> = (0..2_000)
            .map(|i| if (i / 100) % 2 == 0 { 5.0 } else { 1.0 })
            .collect();
        let r = acf(&series, 1).unwrap();
        assert!(r[0] > 0.9, "acf(1) = {}", r[0]);
    }

    #[test]
    fn zero_variance_series_is_rejected() {
        assert_eq!(acf(&[2.0; 50], 3), Err(AnalysisError::ZeroVariance));
    }

    proptest! {
        #[test]
        fn acf_is_bounded(series in prop::collection::vec(-100.0f64..100.0, 12..80)) {
            prop_assume!(series.iter().any(|&x| x != series[0]));
            let r = acf(&series, 10).unwrap();
            for v in r {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
            }
        }
    }

    fn entry(month: u32, machine: u32, model: ModelKind, r2: Option<f64>) -> AccuracyEntry {
        AccuracyEntry {
            computer: ComputerId {
                cluster: 0,
                machine,
            },
            month: MonthId::new(2010, month),
            model,
            mse: 1.0,
            r2,
        }
    }

    #[test]
    fn perfect_predictions_summarize_to_median_one() {
        let history = AccuracyHistory {
            entries: (0..5)
                .map(|m| entry(1, m, ModelKind::Forest, Some(1.0)))
                .collect(),
        };
        let rows = accuracy_summary(&history, -3.2);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].median, 1.0);
        assert_eq!(rows[0].computers, 5);
    }

    #[test]
    fn constant_mean_predictions_summarize_to_zero() {
        let history = AccuracyHistory {
            entries: (0..4)
                .map(|m| entry(2, m, ModelKind::Mlp, Some(0.0)))
                .collect(),
        };
        let rows = accuracy_summary(&history, -3.2);
        assert_eq!(rows[0].median, 0.0);
    }

    #[test]
    fn summary_clips_at_the_display_floor() {
        let history = AccuracyHistory {
            entries: vec![
                entry(1, 0, ModelKind::Forest, Some(-50.0)),
                entry(1, 1, ModelKind::Forest, Some(-40.0)),
                entry(1, 2, ModelKind::Forest, Some(0.5)),
            ],
        };
        let rows = accuracy_summary(&history, -3.2);
        assert!(rows[0].whisker_low >= -3.2);
        assert!(rows[0].q1 >= -3.2);
    }

    #[test]
    fn entries_without_r2_are_skipped() {
        let history = AccuracyHistory {
            entries: vec![
                entry(1, 0, ModelKind::Forest, None),
                entry(1, 1, ModelKind::Forest, Some(0.7)),
            ],
        };
        let rows = accuracy_summary(&history, -3.2);
        assert_eq!(rows[0].computers, 1);
    }
}
