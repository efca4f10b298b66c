//! Turns a raw interactive trace into ML-ready rows: reboot splitting,
//! sparsity densification, calendar feature extraction, per-feature scaling,
//! and monthly train/predict splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, TimeZone, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    DurationMs, Fleet, IdleRecord, InteractiveSession, RebootSchedule, SessionKind, TimeMs,
};

/// Fixed UTC offset used for every calendar-derived feature. The trace itself
/// stays in epoch milliseconds; only feature extraction and month boundaries
/// interpret wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TzOffset {
    pub minutes: i32,
}

impl TzOffset {
    pub const UTC: TzOffset = TzOffset { minutes: 0 };

    fn chrono_offset(self) -> FixedOffset {
        FixedOffset::east_opt(self.minutes * 60).expect("offset within +/-24h")
    }

    /// Civil date-time of an epoch instant in this offset.
    pub fn civil(self, t: TimeMs) -> DateTime<FixedOffset> {
        DateTime::from_timestamp_millis(t.0)
            .expect("timestamp in range")
            .with_timezone(&self.chrono_offset())
    }

    /// Epoch instant of a civil date-time in this offset.
    pub fn instant(self, date: NaiveDate, hour: u32, minute: u32, second: u32) -> TimeMs {
        let naive = date
            .and_hms_opt(hour, minute, second)
            .expect("valid wall time");
        let dt = self
            .chrono_offset()
            .from_local_datetime(&naive)
            .single()
            .expect("fixed offsets are unambiguous");
        TimeMs(dt.timestamp_millis())
    }
}

impl Default for TzOffset {
    fn default() -> Self {
        TzOffset::UTC
    }
}

/// A calendar month, the unit of the retraining protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MonthId {
    pub year: i32,
    pub month: u32,
}

impl MonthId {
    pub fn new(year: i32, month: u32) -> MonthId {
        assert!((1..=12).contains(&month), "month out of range");
        MonthId { year, month }
    }

    pub fn next(self) -> MonthId {
        if self.month == 12 {
            MonthId::new(self.year + 1, 1)
        } else {
            MonthId::new(self.year, self.month + 1)
        }
    }

    /// First instant of the month in the given offset.
    pub fn start(self, tz: TzOffset) -> TimeMs {
        let date = NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month");
        tz.instant(date, 0, 0, 0)
    }

    /// Month containing the given instant.
    pub fn containing(t: TimeMs, tz: TzOffset) -> MonthId {
        let civil = tz.civil(t);
        MonthId::new(civil.year(), civil.month())
    }

    /// Inclusive iteration from `self` through `last`.
    pub fn through(self, last: MonthId) -> impl Iterator<Item = MonthId> {
        let mut cur = self;
        std::iter::from_fn(move || {
            if cur > last {
                None
            } else {
                let out = cur;
                cur = cur.next();
                Some(out)
            }
        })
    }
}

impl fmt::Display for MonthId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for MonthId {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| PreprocessError::BadMonth(s.to_string()))?;
        let year: i32 = y.parse().map_err(|_| PreprocessError::BadMonth(s.to_string()))?;
        let month: u32 = m.parse().map_err(|_| PreprocessError::BadMonth(s.to_string()))?;
        if !(1..=12).contains(&month) {
            return Err(PreprocessError::BadMonth(s.to_string()));
        }
        Ok(MonthId { year, month })
    }
}

impl TryFrom<String> for MonthId {
    type Error = PreprocessError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MonthId> for String {
    fn from(m: MonthId) -> String {
        m.to_string()
    }
}

/// One teaching term: index 1-3 and an inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub term: u8,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// The academic year structure; dates outside every term map to the -1
/// sentinel in term features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TermCalendar {
    pub terms: Vec<Term>,
}

impl TermCalendar {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let mut sorted = self.terms.clone();
        sorted.sort_by_key(|t| t.start);
        for t in &sorted {
            if t.end < t.start || !(1..=3).contains(&t.term) {
                return Err(PreprocessError::BadCalendar);
            }
            // At most ten whole weeks.
            if (t.end - t.start).num_days() >= 70 {
                return Err(PreprocessError::BadCalendar);
            }
        }
        for pair in sorted.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(PreprocessError::BadCalendar);
            }
        }
        Ok(())
    }

    /// `(term, week-of-term)` for a date, or `None` outside all terms.
    pub fn lookup(&self, date: NaiveDate) -> Option<(u8, u8)> {
        self.terms
            .iter()
            .find(|t| date >= t.start && date <= t.end)
            .map(|t| {
                let week = (date - t.start).num_days() / 7 + 1;
                (t.term, week as u8)
            })
    }
}

/// Everything the models see about one idle record, prior to scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub epoch_login: f64,
    pub epoch_logout: f64,
    pub active_duration: f64,
    pub minute: f64,
    pub hour_of_day: f64,
    pub day_of_week: f64,
    pub day_of_month: f64,
    pub month: f64,
    pub year: f64,
    pub term_weeks: f64,
    pub term: f64,
    pub cluster_index: f64,
    pub machine_index: f64,
}

impl FeatureVector {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::EpochLogin => self.epoch_login,
            Feature::EpochLogout => self.epoch_logout,
            Feature::ActiveDuration => self.active_duration,
            Feature::Minute => self.minute,
            Feature::HourOfDay => self.hour_of_day,
            Feature::DayOfWeek => self.day_of_week,
            Feature::DayOfMonth => self.day_of_month,
            Feature::Month => self.month,
            Feature::Year => self.year,
            Feature::TermWeeks => self.term_weeks,
            Feature::Term => self.term,
            Feature::ClusterIndex => self.cluster_index,
            Feature::MachineIndex => self.machine_index,
        }
    }
}

/// Every extractable feature, in the fixed order used for matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Feature {
    EpochLogin,
    EpochLogout,
    ActiveDuration,
    Minute,
    HourOfDay,
    DayOfWeek,
    DayOfMonth,
    Month,
    Year,
    TermWeeks,
    Term,
    ClusterIndex,
    MachineIndex,
}

impl Feature {
    pub const ALL: [Feature; 13] = [
        Feature::EpochLogin,
        Feature::EpochLogout,
        Feature::ActiveDuration,
        Feature::Minute,
        Feature::HourOfDay,
        Feature::DayOfWeek,
        Feature::DayOfMonth,
        Feature::Month,
        Feature::Year,
        Feature::TermWeeks,
        Feature::Term,
        Feature::ClusterIndex,
        Feature::MachineIndex,
    ];

    /// The feature subset found best by importance analysis; the default for
    /// both models.
    pub const DEFAULT_SET: [Feature; 7] = [
        Feature::EpochLogin,
        Feature::EpochLogout,
        Feature::ActiveDuration,
        Feature::HourOfDay,
        Feature::DayOfWeek,
        Feature::DayOfMonth,
        Feature::Month,
    ];

    /// Features whose -1 means "outside of a term" rather than a magnitude.
    pub fn is_sentinel_bearing(self) -> bool {
        matches!(self, Feature::TermWeeks | Feature::Term)
    }

    /// The fixed divisor for bounded calendar features; data-driven features
    /// return `None` and take their divisor from the training span.
    fn fixed_divisor(self) -> Option<f64> {
        match self {
            Feature::Minute => Some(59.0),
            Feature::HourOfDay => Some(23.0),
            Feature::DayOfWeek => Some(7.0),
            Feature::DayOfMonth => Some(31.0),
            Feature::Month => Some(12.0),
            Feature::TermWeeks => Some(10.0),
            Feature::Term => Some(3.0),
            _ => None,
        }
    }
}

/// Per-feature divisors fixed at training time and reused verbatim when
/// predicting, plus the divisor for the idle-duration target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    divisors: BTreeMap<Feature, f64>,
    pub target_divisor: f64,
}

impl ScalingSpec {
    /// Fits divisors on training vectors: bounded calendar features use their
    /// range maximum, the rest the maximum seen in training. Divisors are
    /// clamped to at least 1 so they stay positive on degenerate data.
    pub fn fit(vectors: &[FeatureVector], targets_ms: &[f64]) -> ScalingSpec {
        let mut divisors = BTreeMap::new();
        for f in Feature::ALL {
            let d = match f.fixed_divisor() {
                Some(d) => d,
                None => vectors
                    .iter()
                    .map(|v| v.get(f))
                    .fold(0.0_f64, f64::max)
                    .max(1.0),
            };
            divisors.insert(f, d);
        }
        let target_divisor = targets_ms.iter().copied().fold(0.0_f64, f64::max).max(1.0);
        ScalingSpec {
            divisors,
            target_divisor,
        }
    }

    /// All divisors 1: scaling becomes the identity.
    pub fn identity() -> ScalingSpec {
        ScalingSpec {
            divisors: Feature::ALL.iter().map(|&f| (f, 1.0)).collect(),
            target_divisor: 1.0,
        }
    }

    pub fn divisor(&self, f: Feature) -> Option<f64> {
        self.divisors.get(&f).copied()
    }

    pub fn scale_target(&self, idle_ms: f64) -> f64 {
        idle_ms / self.target_divisor
    }

    pub fn unscale_target(&self, y: f64) -> f64 {
        y * self.target_divisor
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("term calendar is empty")]
    CalendarError,
    #[error("term calendar has overlapping or over-long terms")]
    BadCalendar,
    #[error("scaling spec has no divisor for feature {0:?}")]
    MissingDivisor(Feature),
    #[error("no training rows before target month {0}")]
    EmptyTrainSet(MonthId),
    #[error("bad month literal {0:?}, expected YYYY-MM")]
    BadMonth(String),
    #[error("densification interval must be positive")]
    BadDelta,
}

/// Inserts a zero-length reboot marker for every scheduled reboot that does
/// not land inside a real session (reboots during a session are postponed to
/// the logout and change nothing here). A machine with no sessions at all
/// gets one marker per scheduled reboot. Case C of long gaps falls out
/// naturally: each reboot in the gap contributes its own marker.
///
/// A session covers `r` when `login <= r < logout`, so a reboot at the exact
/// logout instant executes while idle and does get a marker.
pub fn split_on_reboots(
    sessions: &[InteractiveSession],
    fleet: &Fleet,
    schedule: &RebootSchedule,
) -> Vec<InteractiveSession> {
    let mut by_computer: BTreeMap<_, Vec<InteractiveSession>> = BTreeMap::new();
    for machine in fleet.machines() {
        by_computer.insert(machine, Vec::new());
    }
    for s in sessions {
        by_computer.entry(s.computer).or_default().push(*s);
    }

    let mut out = Vec::with_capacity(sessions.len());
    for (machine, mut group) in by_computer {
        group.sort_by_key(|s| (s.login, s.logout));
        let reboots = schedule.for_cluster(machine.cluster);
        let mut merged = Vec::with_capacity(group.len() + reboots.len());
        let mut next = group.iter().peekable();
        for &r in reboots {
            while next.peek().is_some_and(|s| s.logout <= r) {
                merged.push(*next.next().unwrap());
            }
            let covered = next
                .peek()
                .is_some_and(|s| s.login <= r && r < s.logout);
            if !covered {
                merged.push(InteractiveSession::reboot_marker(r, machine));
            }
        }
        merged.extend(next.copied());
        merged.sort_by_key(|s| (s.login, s.logout));
        out.extend(merged);
    }
    out
}

/// Appends overlapping synthetic users inside each idle period: for a record
/// with idle `i`, one synthetic per k in 1..=floor(i/delta) whose idle start
/// (the logout) is shifted by k*delta and whose target shrinks to i - k*delta.
/// Synthetics that would have a zero target are dropped; originals are kept.
pub fn densify(
    records: &[IdleRecord],
    delta: DurationMs,
) -> Result<Vec<IdleRecord>, PreprocessError> {
    if delta.0 <= 0 {
        return Err(PreprocessError::BadDelta);
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(*r);
        let n = r.idle.0 / delta.0;
        for k in 1..=n {
            let residual = r.idle.0 - k * delta.0;
            if residual == 0 {
                continue;
            }
            out.push(IdleRecord {
                session: InteractiveSession {
                    login: r.session.login,
                    computer: r.session.computer,
                    logout: r.session.logout + DurationMs(k * delta.0),
                    kind: SessionKind::DensifySynthetic,
                },
                idle: DurationMs(residual),
            });
        }
    }
    Ok(out)
}

/// Extracts the feature vector for one record. All calendar fields derive
/// from the logout instant in the configured offset; term fields fall back to
/// -1 outside every term.
pub fn extract_features(
    record: &IdleRecord,
    calendar: &TermCalendar,
    tz: TzOffset,
) -> Result<FeatureVector, PreprocessError> {
    if calendar.terms.is_empty() {
        return Err(PreprocessError::CalendarError);
    }
    let s = &record.session;
    let civil = tz.civil(s.logout);
    let (term, term_weeks) = match calendar.lookup(civil.date_naive()) {
        Some((t, w)) => (t as f64, w as f64),
        None => (-1.0, -1.0),
    };
    Ok(FeatureVector {
        epoch_login: s.login.0 as f64,
        epoch_logout: s.logout.0 as f64,
        active_duration: s.active_duration().0 as f64,
        minute: civil.minute() as f64,
        hour_of_day: civil.hour() as f64,
        day_of_week: civil.weekday().number_from_monday() as f64,
        day_of_month: civil.day() as f64,
        month: civil.month() as f64,
        year: civil.year() as f64,
        term_weeks,
        term,
        cluster_index: s.computer.cluster as f64,
        machine_index: s.computer.machine as f64,
    })
}

/// Projects a vector onto `features` in their declared order, dividing each
/// component by its divisor from `spec`.
pub fn scale_and_select(
    vec: &FeatureVector,
    spec: &ScalingSpec,
    features: &[Feature],
) -> Result<Vec<f64>, PreprocessError> {
    features
        .iter()
        .map(|&f| {
            let d = spec
                .divisor(f)
                .ok_or(PreprocessError::MissingDivisor(f))?;
            Ok(vec.get(f) / d)
        })
        .collect()
}

/// Splits records around a target month: training is everything with a logout
/// strictly before the month's first instant, prediction is the month itself.
/// Densification synthetics never enter the prediction set; any that drifted
/// past the boundary are dropped.
pub fn monthly_split(
    records: &[IdleRecord],
    target: MonthId,
    tz: TzOffset,
) -> Result<(Vec<IdleRecord>, Vec<IdleRecord>), PreprocessError> {
    let start = target.start(tz);
    let end = target.next().start(tz);
    let mut train = Vec::new();
    let mut predict = Vec::new();
    for r in records {
        let logout = r.session.logout;
        if logout < start {
            train.push(*r);
        } else if logout < end && r.session.kind != SessionKind::DensifySynthetic {
            predict.push(*r);
        }
    }
    if train.is_empty() {
        return Err(PreprocessError::EmptyTrainSet(target));
    }
    Ok((train, predict))
}
