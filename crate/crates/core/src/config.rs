//! The single JSON configuration document shared by every pipeline stage.
//! Every field has a sensible default, so `{}` is a runnable desk-scale
//! setup: 50 machines in 5 clusters over a 6-month span with monthly
//! retraining at a 10-minute densification interval.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::ForestConfig;
use crate::mlp::MlpConfig;
use crate::model::{ClusterPolicy, DurationMs, TimeMs};
use crate::predictors::TrainSetup;
use crate::preprocess::{Feature, MonthId, Term, TermCalendar, TzOffset};
use crate::tracegen::{BurstSpec, FleetSpec, RebootCadence, SeasonalitySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config schema version {found} is not {expected}")]
    SchemaMismatch { expected: u32, found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SpanConfig {
    pub start_month: MonthId,
    pub months: u32,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            start_month: MonthId::new(2009, 1),
            months: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PreprocessConfig {
    pub delta_minutes: i64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { delta_minutes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub first_target_month: MonthId,
    pub last_target_month: MonthId,
    pub features: Vec<Feature>,
    /// Annotate with observed idles instead of model output.
    pub oracle_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            first_target_month: MonthId::new(2009, 4),
            last_target_month: MonthId::new(2009, 6),
            features: Feature::DEFAULT_SET.to_vec(),
            oracle_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PolicyConfig {
    pub sleep_after_minutes: i64,
    pub logout_grace_minutes: i64,
    pub wake_allowed: bool,
    pub wake_latency_seconds: i64,
    pub reboot_duration_minutes: i64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            sleep_after_minutes: 15,
            logout_grace_minutes: 2,
            wake_allowed: true,
            wake_latency_seconds: 30,
            reboot_duration_minutes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SimConfig {
    /// Simulation window start; defaults to the first target month, where
    /// annotations begin.
    pub window_start_month: Option<MonthId>,
    pub record_event_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            window_start_month: None,
            record_event_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub timezone_offset_minutes: i32,
    pub calendar: TermCalendar,
    pub span: SpanConfig,
    pub fleet: FleetSpec,
    pub seasonality: SeasonalitySpec,
    pub tasks: BurstSpec,
    pub reboots: RebootCadence,
    pub preprocess: PreprocessConfig,
    pub forest: ForestConfig,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub sim: SimConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: crate::io::SCHEMA_VERSION,
            seed: 42,
            timezone_offset_minutes: 0,
            calendar: default_calendar(),
            span: SpanConfig::default(),
            fleet: FleetSpec::default(),
            seasonality: SeasonalitySpec::default(),
            tasks: BurstSpec::default(),
            reboots: RebootCadence::default(),
            preprocess: PreprocessConfig::default(),
            forest: ForestConfig::default(),
            mlp: MlpConfig::default(),
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

/// Two ten-week teaching terms inside the default half-year span.
fn default_calendar() -> TermCalendar {
    let date = |y, m, d| chrono::NaiveDate::from_ymd_opt(y, m, d).expect("valid date");
    TermCalendar {
        terms: vec![
            Term {
                term: 1,
                start: date(2009, 1, 12),
                end: date(2009, 3, 20),
            },
            Term {
                term: 2,
                start: date(2009, 4, 20),
                end: date(2009, 6, 26),
            },
        ],
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != crate::io::SCHEMA_VERSION {
            return Err(ConfigError::SchemaMismatch {
                expected: crate::io::SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if self.preprocess.delta_minutes <= 0 {
            return Err(ConfigError::Invalid("delta must be positive".into()));
        }
        if self.span.months < 2 {
            return Err(ConfigError::Invalid("span must cover >= 2 months".into()));
        }
        if self.train.first_target_month > self.train.last_target_month {
            return Err(ConfigError::Invalid(
                "firstTargetMonth is after lastTargetMonth".into(),
            ));
        }
        if self.train.first_target_month <= self.span.start_month {
            return Err(ConfigError::Invalid(
                "firstTargetMonth needs at least one month of history".into(),
            ));
        }
        if self.train.features.is_empty() {
            return Err(ConfigError::Invalid("feature set is empty".into()));
        }
        self.policy()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.calendar
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn tz(&self) -> TzOffset {
        TzOffset {
            minutes: self.timezone_offset_minutes,
        }
    }

    pub fn delta(&self) -> DurationMs {
        DurationMs::from_minutes(self.preprocess.delta_minutes)
    }

    /// Full trace span `(start, horizon)`.
    pub fn span(&self) -> (TimeMs, TimeMs) {
        let start = self.span.start_month.start(self.tz());
        let mut end = self.span.start_month;
        for _ in 0..self.span.months {
            end = end.next();
        }
        (start, end.start(self.tz()))
    }

    /// Simulation window `(start, horizon)`: the annotated months by default.
    pub fn sim_window(&self) -> (TimeMs, TimeMs) {
        let (_, horizon) = self.span();
        let start_month = self
            .sim
            .window_start_month
            .unwrap_or(self.train.first_target_month);
        (start_month.start(self.tz()), horizon)
    }

    pub fn policy(&self) -> ClusterPolicy {
        ClusterPolicy {
            sleep_after: DurationMs::from_minutes(self.policy.sleep_after_minutes),
            logout_grace: DurationMs::from_minutes(self.policy.logout_grace_minutes),
            wake_allowed: self.policy.wake_allowed,
            wake_latency: DurationMs::from_seconds(self.policy.wake_latency_seconds),
            reboot_duration: DurationMs::from_minutes(self.policy.reboot_duration_minutes),
        }
    }

    /// Assembles the monthly-training driver setup. `threads` caps training
    /// parallelism (the VOLT_SIM_THREADS contract); `None` uses all cores.
    pub fn train_setup(&self, threads: Option<usize>) -> TrainSetup {
        let mut forest = self.forest.clone();
        forest.seed = forest.seed ^ self.seed;
        let mut mlp = self.mlp.clone();
        mlp.seed = mlp.seed ^ self.seed;
        TrainSetup {
            forest,
            mlp,
            features: self.train.features.clone(),
            delta: self.delta(),
            calendar: self.calendar.clone(),
            tz: self.tz(),
            first_target: self.train.first_target_month,
            last_target: self.train.last_target_month,
            oracle_mode: self.train.oracle_mode,
            threads,
        }
    }
}

/// Reads the VOLT_SIM_THREADS cap from the environment.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("VOLT_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}
