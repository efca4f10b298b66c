//! Synthetic workload generation: seasonal interactive sessions, bursty HTC
//! tasks with autocorrelated durations, periodic reboot schedules, and fleet
//! energy profiles. Everything is seeded and deterministic; per-machine
//! streams derive their own sub-seed so output does not depend on iteration
//! order.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    DurationMs, EnergyProfile, Fleet, InteractiveSession, RebootSchedule, Task, TaskId, TimeMs,
    MS_PER_DAY, MS_PER_HOUR, MS_PER_MINUTE,
};
use crate::preprocess::{TermCalendar, TzOffset};

#[derive(Debug, Error, PartialEq)]
pub enum TraceGenError {
    #[error("expected peak occupancy {0:.2} exceeds 100%")]
    InfeasibleRates(f64),
    #[error("fleet spec must have at least one cluster and machine")]
    EmptyFleet,
    #[error("span must cover at least two months")]
    SpanTooShort,
}

/// Shape of the synthetic fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct FleetSpec {
    pub cluster_count: u32,
    pub machines_per_cluster: u32,
    pub active_w_range: (f64, f64),
    pub idle_w_range: (f64, f64),
    pub sleep_w_range: (f64, f64),
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            cluster_count: 5,
            machines_per_cluster: 10,
            active_w_range: (90.0, 160.0),
            idle_w_range: (35.0, 65.0),
            sleep_w_range: (2.0, 5.0),
        }
    }
}

impl FleetSpec {
    /// Draws one energy profile per cluster and assembles the fleet.
    /// Machine names are zero-padded so the lexicographic index assignment
    /// matches numeric order.
    pub fn generate(&self, seed: u64) -> Result<Fleet, TraceGenError> {
        if self.cluster_count == 0 || self.machines_per_cluster == 0 {
            return Err(TraceGenError::EmptyFleet);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xF1EE7);
        let mut profiles = BTreeMap::new();
        let mut pairs = Vec::new();
        for c in 0..self.cluster_count {
            let name = format!("c{c:02}");
            let active_w = rng.random_range(self.active_w_range.0..=self.active_w_range.1);
            let idle_w = rng
                .random_range(self.idle_w_range.0..=self.idle_w_range.1)
                .min(active_w);
            let sleep_w = rng
                .random_range(self.sleep_w_range.0..=self.sleep_w_range.1)
                .min(idle_w);
            profiles.insert(
                name.clone(),
                EnergyProfile {
                    active_w,
                    idle_w,
                    sleep_w,
                },
            );
            for m in 0..self.machines_per_cluster {
                pairs.push((name.clone(), format!("m{m:03}")));
            }
        }
        Ok(Fleet::from_names(pairs, &profiles).expect("profiles cover all clusters"))
    }
}

/// Login-rate structure: weekday/weekend and term multipliers over a diurnal
/// profile, with lognormal session lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SeasonalitySpec {
    /// Mean logins per machine on an out-of-term weekday.
    pub weekday_logins_mean: f64,
    pub weekend_multiplier: f64,
    pub in_term_multiplier: f64,
    /// Relative login weight per hour of day; normalized internally.
    pub diurnal: Vec<f64>,
    pub session_mean_minutes: f64,
    pub session_sigma: f64,
    /// Hard cap on the busy fraction of any machine over the span.
    pub occupancy_ceiling: f64,
}

impl Default for SeasonalitySpec {
    fn default() -> Self {
        // Office-hours bell: quiet nights, 09:00-18:00 bulk.
        let diurnal = vec![
            0.2, 0.1, 0.05, 0.05, 0.05, 0.1, 0.3, 1.0, 3.0, 6.0, 7.0, 7.0, 6.0, 6.5, 7.0, 6.5,
            5.0, 4.0, 2.5, 1.5, 1.0, 0.8, 0.5, 0.3,
        ];
        SeasonalitySpec {
            weekday_logins_mean: 2.0,
            weekend_multiplier: 0.25,
            in_term_multiplier: 1.8,
            diurnal,
            session_mean_minutes: 85.0,
            session_sigma: 0.7,
            occupancy_ceiling: 0.9,
        }
    }
}

impl SeasonalitySpec {
    fn validate(&self) -> Result<(), TraceGenError> {
        let peak_mult = self.in_term_multiplier.max(1.0) * self.weekend_multiplier.max(1.0);
        let peak_busy_minutes =
            self.weekday_logins_mean * peak_mult * self.session_mean_minutes;
        if peak_busy_minutes > 24.0 * 60.0 {
            return Err(TraceGenError::InfeasibleRates(
                peak_busy_minutes / (24.0 * 60.0),
            ));
        }
        Ok(())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates non-overlapping per-machine sessions whose daily login counts
/// follow the configured weekday/weekend/term structure.
pub fn gen_interactive(
    fleet: &Fleet,
    seasonality: &SeasonalitySpec,
    calendar: &TermCalendar,
    tz: TzOffset,
    span: (TimeMs, TimeMs),
    seed: u64,
) -> Result<Vec<InteractiveSession>, TraceGenError> {
    seasonality.validate()?;
    let (start, end) = span;
    if end.0 - start.0 < 56 * MS_PER_DAY {
        return Err(TraceGenError::SpanTooShort);
    }
    let span_ms = (end.0 - start.0) as f64;
    let diurnal_total: f64 = seasonality.diurnal.iter().sum();
    let session_len = LogNormal::new(
        seasonality.session_mean_minutes.ln() - seasonality.session_sigma.powi(2) / 2.0,
        seasonality.session_sigma,
    )
    .expect("valid lognormal");

    let mut sessions = Vec::new();
    for machine in fleet.machines() {
        let sub_seed = seed ^ mix64(((machine.cluster as u64) << 32) | machine.machine as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(sub_seed);

        // Candidate logins day by day.
        let mut starts: Vec<(TimeMs, DurationMs)> = Vec::new();
        let mut day = start;
        while day < end {
            let civil = tz.civil(day);
            let date = civil.date_naive();
            let weekday = civil.weekday().number_from_monday();
            let mut rate = seasonality.weekday_logins_mean;
            if weekday >= 6 {
                rate *= seasonality.weekend_multiplier;
            }
            if calendar.lookup(date).is_some() {
                rate *= seasonality.in_term_multiplier;
            }
            let count = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as i64
            } else {
                0
            };
            for _ in 0..count {
                // Hour drawn from the diurnal profile, uniform within it.
                let mut pick = rng.random_range(0.0..diurnal_total);
                let mut hour = 0usize;
                for (h, w) in seasonality.diurnal.iter().enumerate() {
                    if pick < *w {
                        hour = h;
                        break;
                    }
                    pick -= w;
                }
                let at = TimeMs(
                    day.0 + hour as i64 * MS_PER_HOUR + rng.random_range(0..MS_PER_HOUR),
                );
                let minutes = session_len.sample(&mut rng).clamp(1.0, 12.0 * 60.0);
                starts.push((at, DurationMs((minutes * MS_PER_MINUTE as f64) as i64)));
            }
            day = day + DurationMs(MS_PER_DAY);
        }
        starts.sort();

        // Enforce non-overlap and the occupancy ceiling.
        let mut busy_ms = 0i64;
        let mut cursor = start;
        let mut machine_sessions = Vec::new();
        for (login, len) in starts {
            if login < cursor {
                continue;
            }
            let logout = TimeMs((login.0 + len.0).min(end.0));
            if logout <= login {
                continue;
            }
            if (busy_ms + (logout.0 - login.0)) as f64 / span_ms > seasonality.occupancy_ceiling {
                continue;
            }
            busy_ms += logout.0 - login.0;
            cursor = logout;
            machine_sessions.push(InteractiveSession::real(login, machine, logout));
        }

        // Every machine must appear in the trace at least once so the fleet
        // can be reconstructed from it; give silent machines one short
        // maintenance login on the first day.
        if machine_sessions.is_empty() {
            let login = TimeMs(start.0 + 10 * MS_PER_HOUR);
            machine_sessions.push(InteractiveSession::real(
                login,
                machine,
                login + DurationMs::from_minutes(30),
            ));
        }
        sessions.extend(machine_sessions);
    }
    Ok(sessions)
}

/// Burst structure for the task trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BurstSpec {
    pub total_tasks: u64,
    pub burst_size_mean: f64,
    /// (mean minutes, lognormal sigma) per duration regime; bursts cycle
    /// through regimes so distant tasks anti-correlate.
    pub duration_regimes_minutes: Vec<(f64, f64)>,
    /// Lognormal spread of task durations around their burst's mean.
    pub within_burst_sigma: f64,
    /// Mean spacing between submissions inside one burst, seconds.
    pub in_burst_spacing_seconds: f64,
}

impl Default for BurstSpec {
    fn default() -> Self {
        BurstSpec {
            total_tasks: 10_000,
            burst_size_mean: 60.0,
            duration_regimes_minutes: vec![(25.0, 0.3), (150.0, 0.3)],
            within_burst_sigma: 0.15,
            in_burst_spacing_seconds: 20.0,
        }
    }
}

/// Tasks arrive in bursts; durations within a burst share a regime mean, so
/// the submission-ordered duration sequence is strongly autocorrelated at
/// short lags. Bursts cycle through the regimes in time order, which turns
/// the correlation negative once the lag crosses burst boundaries.
pub fn gen_tasks(spec: &BurstSpec, span: (TimeMs, TimeMs), seed: u64) -> Vec<Task> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7A5C);
    let (start, end) = span;
    let spacing = Exp::new(1.0 / spec.in_burst_spacing_seconds.max(0.001)).expect("positive rate");

    let mut submissions: Vec<(TimeMs, DurationMs)> = Vec::new();
    let mut regime = 0usize;
    while (submissions.len() as u64) < spec.total_tasks {
        // Burst start times laid out in time order so the regime cycle is
        // visible along the submission sequence.
        let expected_bursts =
            (spec.total_tasks as f64 / spec.burst_size_mean.max(1.0)).ceil() as usize + 1;
        let mut starts: Vec<i64> = (0..expected_bursts)
            .map(|_| rng.random_range(start.0..end.0))
            .collect();
        starts.sort();

        for burst_start in starts {
            if (submissions.len() as u64) >= spec.total_tasks {
                break;
            }
            let size = 1 + Poisson::new((spec.burst_size_mean - 1.0).max(0.001))
                .expect("positive mean")
                .sample(&mut rng) as u64;
            let (regime_mean, regime_sigma) = spec.duration_regimes_minutes
                [regime % spec.duration_regimes_minutes.len()];
            regime += 1;
            let burst_mean = LogNormal::new(regime_mean.ln(), regime_sigma)
                .expect("valid lognormal")
                .sample(&mut rng);
            let within = LogNormal::new(
                burst_mean.ln() - spec.within_burst_sigma.powi(2) / 2.0,
                spec.within_burst_sigma,
            )
            .expect("valid lognormal");

            let mut at = TimeMs(burst_start);
            for _ in 0..size {
                if (submissions.len() as u64) >= spec.total_tasks {
                    break;
                }
                let minutes = within.sample(&mut rng).clamp(1.0, 24.0 * 60.0);
                if at < end {
                    submissions.push((at, DurationMs((minutes * MS_PER_MINUTE as f64) as i64)));
                }
                at = at + DurationMs((spacing.sample(&mut rng) * 1_000.0) as i64 + 1);
            }
        }
    }

    submissions.sort();
    submissions
        .into_iter()
        .enumerate()
        .map(|(i, (submit, duration))| Task::new(TaskId(i as u64 + 1), submit, duration))
        .collect()
}

/// Periodic reboot cadence, local wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RebootCadence {
    pub every_days: u32,
    pub at_hour: u8,
    /// Stagger between consecutive clusters.
    pub per_cluster_offset_minutes: i64,
}

impl Default for RebootCadence {
    fn default() -> Self {
        RebootCadence {
            every_days: 1,
            at_hour: 3,
            per_cluster_offset_minutes: 0,
        }
    }
}

/// Produces the periodic schedule (default nightly 03:00) per cluster.
pub fn gen_reboots(
    fleet: &Fleet,
    cadence: &RebootCadence,
    tz: TzOffset,
    span: (TimeMs, TimeMs),
) -> RebootSchedule {
    let mut schedule = RebootSchedule::new();
    let (start, end) = span;
    let every = cadence.every_days.max(1) as i64;
    for cluster in 0..fleet.cluster_count() as u32 {
        let offset = cluster as i64 * cadence.per_cluster_offset_minutes * MS_PER_MINUTE;
        let first_day = tz.civil(start).date_naive();
        let mut day = first_day;
        loop {
            let at = TimeMs(tz.instant(day, cadence.at_hour as u32, 0, 0).0 + offset);
            if at.0 >= end.0 {
                break;
            }
            if at.0 >= start.0 {
                schedule.add(cluster, at);
            }
            day = day
                .checked_add_days(chrono::Days::new(every as u64))
                .expect("date in range");
        }
    }
    schedule.normalize();
    schedule
}
