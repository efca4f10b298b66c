//! Domain types shared by every stage: time, fleet, sessions, tasks, policy,
//! plus trace validation and idle-gap derivation.
//!
//! All timestamps are integer milliseconds since the Unix epoch and all
//! durations are non-negative integer milliseconds, so event ordering never
//! depends on float comparisons.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MS_PER_SECOND: i64 = 1_000;
pub const MS_PER_MINUTE: i64 = 60 * MS_PER_SECOND;
pub const MS_PER_HOUR: i64 = 60 * MS_PER_MINUTE;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// A point in time, in milliseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeMs(pub i64);

/// A non-negative span of time in milliseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DurationMs(pub i64);

impl TimeMs {
    /// Signed distance from `earlier` to `self`, in milliseconds.
    pub fn millis_since(self, earlier: TimeMs) -> i64 {
        self.0 - earlier.0
    }

    /// Non-negative distance from `earlier` to `self`; `None` if `self < earlier`.
    pub fn duration_since(self, earlier: TimeMs) -> Option<DurationMs> {
        let d = self.0 - earlier.0;
        (d >= 0).then_some(DurationMs(d))
    }
}

impl DurationMs {
    pub const ZERO: DurationMs = DurationMs(0);

    pub fn from_seconds(s: i64) -> Self {
        DurationMs(s * MS_PER_SECOND)
    }

    pub fn from_minutes(m: i64) -> Self {
        DurationMs(m * MS_PER_MINUTE)
    }

    pub fn from_hours(h: i64) -> Self {
        DurationMs(h * MS_PER_HOUR)
    }

    pub fn as_minutes_f64(self) -> f64 {
        self.0 as f64 / MS_PER_MINUTE as f64
    }

    pub fn as_seconds_f64(self) -> f64 {
        self.0 as f64 / MS_PER_SECOND as f64
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl std::ops::Add<DurationMs> for TimeMs {
    type Output = TimeMs;
    fn add(self, rhs: DurationMs) -> TimeMs {
        TimeMs(self.0 + rhs.0)
    }
}

impl std::ops::Sub<DurationMs> for TimeMs {
    type Output = TimeMs;
    fn sub(self, rhs: DurationMs) -> TimeMs {
        TimeMs(self.0 - rhs.0)
    }
}

impl std::ops::Add for DurationMs {
    type Output = DurationMs;
    fn add(self, rhs: DurationMs) -> DurationMs {
        DurationMs(self.0 + rhs.0)
    }
}

impl fmt::Display for TimeMs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

impl fmt::Display for DurationMs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Integer-encoded identity of one computer: cluster index plus machine index
/// within the cluster. Indices are assigned lexicographically from the names
/// seen at ingestion, so they are stable across runs over the same trace.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ComputerId {
    pub cluster: u32,
    pub machine: u32,
}

impl fmt::Display for ComputerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.cluster, self.machine)
    }
}

/// Power draw of one machine type, in watts, per state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub active_w: f64,
    pub idle_w: f64,
    pub sleep_w: f64,
}

impl EnergyProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.sleep_w >= 0.0
            && self.sleep_w <= self.idle_w
            && self.idle_w <= self.active_w
            && self.active_w.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidEnergyProfile {
                active_w: self.active_w,
                idle_w: self.idle_w,
                sleep_w: self.sleep_w,
            })
        }
    }
}

/// The fleet: cluster and machine names mapped to integer indices
/// (lexicographic by cluster name, then machine name), and the per-cluster
/// energy profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fleet {
    clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClusterEntry {
    name: String,
    profile: EnergyProfile,
    machines: Vec<String>,
}

impl Fleet {
    /// Builds the fleet from `(cluster, machine)` name pairs and per-cluster
    /// profiles. Names are deduplicated and sorted before index assignment.
    pub fn from_names<I, S>(pairs: I, profiles: &BTreeMap<String, EnergyProfile>) -> Result<Fleet, ModelError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (c, m) in pairs {
            grouped.entry(c.into()).or_default().push(m.into());
        }
        let mut clusters = Vec::with_capacity(grouped.len());
        for (name, mut machines) in grouped {
            machines.sort();
            machines.dedup();
            let profile = *profiles
                .get(&name)
                .ok_or_else(|| ModelError::UnknownCluster(name.clone()))?;
            profile.validate()?;
            clusters.push(ClusterEntry { name, profile, machines });
        }
        Ok(Fleet { clusters })
    }

    pub fn machine_count(&self) -> usize {
        self.clusters.iter().map(|c| c.machines.len()).sum()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn machines(&self) -> impl Iterator<Item = ComputerId> + '_ {
        self.clusters.iter().enumerate().flat_map(|(ci, c)| {
            (0..c.machines.len()).map(move |mi| ComputerId {
                cluster: ci as u32,
                machine: mi as u32,
            })
        })
    }

    pub fn cluster_name(&self, cluster: u32) -> &str {
        &self.clusters[cluster as usize].name
    }

    pub fn profile(&self, id: ComputerId) -> EnergyProfile {
        self.clusters[id.cluster as usize].profile
    }

    /// "clusterName/machineName", the external spelling of a computer.
    pub fn computer_name(&self, id: ComputerId) -> String {
        let c = &self.clusters[id.cluster as usize];
        format!("{}/{}", c.name, c.machines[id.machine as usize])
    }

    pub fn resolve(&self, name: &str) -> Result<ComputerId, ModelError> {
        let (cname, mname) = name
            .split_once('/')
            .ok_or_else(|| ModelError::BadComputerName(name.to_string()))?;
        let ci = self
            .clusters
            .binary_search_by(|c| c.name.as_str().cmp(cname))
            .map_err(|_| ModelError::BadComputerName(name.to_string()))?;
        let mi = self.clusters[ci]
            .machines
            .binary_search_by(|m| m.as_str().cmp(mname))
            .map_err(|_| ModelError::BadComputerName(name.to_string()))?;
        Ok(ComputerId {
            cluster: ci as u32,
            machine: mi as u32,
        })
    }
}

/// Origin of a session row: a real user, a zero-length reboot marker, or a
/// densification pseudo-user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Real,
    #[serde(rename = "reboot")]
    RebootSynthetic,
    #[serde(rename = "densify")]
    DensifySynthetic,
}

impl SessionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionKind::Real => "real",
            SessionKind::RebootSynthetic => "reboot",
            SessionKind::DensifySynthetic => "densify",
        }
    }

    pub fn parse(s: &str) -> Option<SessionKind> {
        match s {
            "real" => Some(SessionKind::Real),
            "reboot" => Some(SessionKind::RebootSynthetic),
            "densify" => Some(SessionKind::DensifySynthetic),
            _ => None,
        }
    }
}

/// One primary-user occupancy interval on one computer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractiveSession {
    pub login: TimeMs,
    pub computer: ComputerId,
    pub logout: TimeMs,
    pub kind: SessionKind,
}

impl InteractiveSession {
    pub fn real(login: TimeMs, computer: ComputerId, logout: TimeMs) -> Self {
        InteractiveSession {
            login,
            computer,
            logout,
            kind: SessionKind::Real,
        }
    }

    /// Zero-length marker standing in for a reboot executed while idle.
    pub fn reboot_marker(at: TimeMs, computer: ComputerId) -> Self {
        InteractiveSession {
            login: at,
            computer,
            logout: at,
            kind: SessionKind::RebootSynthetic,
        }
    }

    pub fn active_duration(&self) -> DurationMs {
        DurationMs(self.logout.0 - self.login.0)
    }
}

/// A session annotated with the idle duration that followed it. During
/// preprocessing `idle` is the observed gap; after prediction it is a model
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleRecord {
    pub session: InteractiveSession,
    pub idle: DurationMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Completed,
    AbortedLogin,
    AbortedReboot,
}

/// One execution attempt of a task on one machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub computer: ComputerId,
    pub start: TimeMs,
    pub end: TimeMs,
    pub outcome: AttemptOutcome,
}

/// An HTC task: submission time, execution duration, and the attempts it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub submit: TimeMs,
    pub duration: DurationMs,
    pub attempts: Vec<Attempt>,
}

impl Task {
    pub fn new(id: TaskId, submit: TimeMs, duration: DurationMs) -> Self {
        Task {
            id,
            submit,
            duration,
            attempts: Vec::new(),
        }
    }

    pub fn completed(&self) -> bool {
        self.attempts
            .last()
            .is_some_and(|a| a.outcome == AttemptOutcome::Completed)
    }

    pub fn finish_time(&self) -> Option<TimeMs> {
        self.attempts
            .last()
            .filter(|a| a.outcome == AttemptOutcome::Completed)
            .map(|a| a.end)
    }

    /// Longest prior attempt span; the ML scheduler's lower bound `p`.
    pub fn max_previous_run(&self) -> DurationMs {
        DurationMs(
            self.attempts
                .iter()
                .map(|a| a.end.0 - a.start.0)
                .max()
                .unwrap_or(0),
        )
    }
}

/// Site policy for every cluster: sleep timeout, post-logout grace, wake
/// permission and latency, reboot duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterPolicy {
    pub sleep_after: DurationMs,
    pub logout_grace: DurationMs,
    pub wake_allowed: bool,
    pub wake_latency: DurationMs,
    pub reboot_duration: DurationMs,
}

impl ClusterPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.logout_grace.0 >= 0 && self.sleep_after > self.logout_grace {
            Ok(())
        } else {
            Err(ModelError::InvalidPolicy)
        }
    }
}

impl Default for ClusterPolicy {
    fn default() -> Self {
        ClusterPolicy {
            sleep_after: DurationMs::from_minutes(15),
            logout_grace: DurationMs::from_minutes(2),
            wake_allowed: true,
            wake_latency: DurationMs::from_seconds(30),
            reboot_duration: DurationMs::from_minutes(5),
        }
    }
}

/// Scheduled reboot instants, per cluster (every machine of a cluster reboots
/// at the cluster's times).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RebootSchedule {
    by_cluster: BTreeMap<u32, Vec<TimeMs>>,
}

impl RebootSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, cluster: u32, at: TimeMs) {
        self.by_cluster.entry(cluster).or_default().push(at);
    }

    /// Sorts and deduplicates every cluster's times; call once after loading.
    pub fn normalize(&mut self) {
        for times in self.by_cluster.values_mut() {
            times.sort();
            times.dedup();
        }
    }

    pub fn for_cluster(&self, cluster: u32) -> &[TimeMs] {
        self.by_cluster
            .get(&cluster)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.by_cluster.values().all(Vec::is_empty)
    }

    pub fn clusters(&self) -> impl Iterator<Item = (u32, &[TimeMs])> {
        self.by_cluster.iter().map(|(c, v)| (*c, v.as_slice()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("trace contains no sessions")]
    EmptyTrace,
    #[error("energy profile violates sleep <= idle <= active: active={active_w} idle={idle_w} sleep={sleep_w}")]
    InvalidEnergyProfile {
        active_w: f64,
        idle_w: f64,
        sleep_w: f64,
    },
    #[error("cluster policy requires sleep_after > logout_grace >= 0")]
    InvalidPolicy,
    #[error("no energy profile for cluster {0}")]
    UnknownCluster(String),
    #[error("computer name {0:?} is not clusterName/machineName or is unknown")]
    BadComputerName(String),
}

/// A defect found in an interactive trace. Violations are data, not errors:
/// validation always returns, reporting one entry per offending record or pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceViolation {
    /// Session at input index `index` has logout < login.
    OrderViolation { index: usize },
    /// Sessions at input indices `first` and `second` overlap on `computer`.
    OverlapViolation {
        computer: ComputerId,
        first: usize,
        second: usize,
    },
}

/// Checks that every session has login <= logout and that, per computer, no
/// two sessions overlap. An empty result means the trace is valid.
///
/// Touching intervals (one logout equal to the next login) are not overlaps.
pub fn validate_trace(sessions: &[InteractiveSession]) -> Vec<TraceViolation> {
    let mut violations = Vec::new();
    let mut by_computer: BTreeMap<ComputerId, Vec<usize>> = BTreeMap::new();

    for (i, s) in sessions.iter().enumerate() {
        if s.logout < s.login {
            violations.push(TraceViolation::OrderViolation { index: i });
        } else {
            by_computer.entry(s.computer).or_default().push(i);
        }
    }

    for (computer, mut idx) in by_computer {
        idx.sort_by_key(|&i| (sessions[i].login, sessions[i].logout, i));
        // After sorting by login, every overlap partner of i follows it while
        // its login is still before sessions[i].logout. Zero-length sessions
        // sitting exactly on another session's boundary do not intersect.
        for (pos, &i) in idx.iter().enumerate() {
            for &j in &idx[pos + 1..] {
                if sessions[j].login >= sessions[i].logout {
                    break;
                }
                let (first, second) = if i < j { (i, j) } else { (j, i) };
                violations.push(TraceViolation::OverlapViolation {
                    computer,
                    first,
                    second,
                });
            }
        }
    }
    violations
}

/// Derives the idle gap following every session: for consecutive sessions on
/// one computer the gap runs logout -> next login; the last session of each
/// computer is closed against `horizon`, so every logout has an idle target.
///
/// Input order does not matter; sessions are grouped and sorted internally.
/// `horizon` must not precede any logout.
pub fn idle_gaps(
    sessions: &[InteractiveSession],
    horizon: TimeMs,
) -> Result<Vec<IdleRecord>, ModelError> {
    if sessions.is_empty() {
        return Err(ModelError::EmptyTrace);
    }
    let mut by_computer: BTreeMap<ComputerId, Vec<&InteractiveSession>> = BTreeMap::new();
    for s in sessions {
        by_computer.entry(s.computer).or_default().push(s);
    }

    let mut out = Vec::with_capacity(sessions.len());
    for group in by_computer.values_mut() {
        group.sort_by_key(|s| (s.login, s.logout));
        for pair in group.windows(2) {
            let idle = pair[1]
                .login
                .duration_since(pair[0].logout)
                .unwrap_or(DurationMs::ZERO);
            out.push(IdleRecord {
                session: *pair[0],
                idle,
            });
        }
        let last = group[group.len() - 1];
        let idle = horizon.duration_since(last.logout).unwrap_or(DurationMs::ZERO);
        out.push(IdleRecord {
            session: *last,
            idle,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cid(c: u32, m: u32) -> ComputerId {
        ComputerId {
            cluster: c,
            machine: m,
        }
    }

    fn real(login: i64, c: ComputerId, logout: i64) -> InteractiveSession {
        InteractiveSession::real(TimeMs(login), c, TimeMs(logout))
    }

    #[test]
    fn disjoint_sessions_are_valid() {
        let c = cid(0, 0);
        let sessions = vec![real(0, c, 100), real(200, c, 300)];
        assert!(validate_trace(&sessions).is_empty());
    }

    #[test]
    fn inverted_interval_is_an_order_violation() {
        let c = cid(0, 0);
        let sessions = vec![real(500, c, 400)];
        assert_eq!(
            validate_trace(&sessions),
            vec![TraceViolation::OrderViolation { index: 0 }]
        );
    }

    #[test]
    fn overlapping_sessions_are_reported() {
        let c = cid(0, 0);
        let sessions = vec![real(100, c, 200), real(150, c, 300)];
        assert_eq!(
            validate_trace(&sessions),
            vec![TraceViolation::OverlapViolation {
                computer: c,
                first: 0,
                second: 1
            }]
        );
    }

    #[test]
    fn touching_sessions_do_not_overlap() {
        let c = cid(0, 0);
        let sessions = vec![real(100, c, 200), real(200, c, 300)];
        assert!(validate_trace(&sessions).is_empty());
    }

    #[test]
    fn same_interval_on_different_computers_is_fine() {
        let sessions = vec![real(100, cid(0, 0), 200), real(100, cid(0, 1), 200)];
        assert!(validate_trace(&sessions).is_empty());
    }

    /// Brute-force pairwise interval intersection, the oracle for overlap
    /// detection.
    fn overlap_pairs_oracle(sessions: &[InteractiveSession]) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..sessions.len() {
            for j in i + 1..sessions.len() {
                let (a, b) = (&sessions[i], &sessions[j]);
                if a.computer != b.computer || a.logout < a.login || b.logout < b.login {
                    continue;
                }
                if a.login < b.logout && b.login < a.logout {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    #[test]
    fn overlap_detection_matches_pairwise_oracle() {
        let c = cid(0, 0);
        // One long session covering two later ones, plus a disjoint tail.
        let sessions = vec![
            real(0, c, 100),
            real(10, c, 20),
            real(30, c, 40),
            real(200, c, 250),
        ];
        let expected = overlap_pairs_oracle(&sessions);
        assert_eq!(expected, vec![(0, 1), (0, 2)]);
        let mut got: Vec<(usize, usize)> = validate_trace(&sessions)
            .into_iter()
            .map(|v| match v {
                TraceViolation::OverlapViolation { first, second, .. } => (first, second),
                other => panic!("unexpected violation {other:?}"),
            })
            .collect();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn idle_gap_is_direct_subtraction() {
        let c = cid(0, 0);
        let sessions = vec![real(0, c, 100_000), real(160_000, c, 170_000)];
        let gaps = idle_gaps(&sessions, TimeMs(200_000)).unwrap();
        assert_eq!(gaps[0].idle, DurationMs(60_000));
    }

    #[test]
    fn back_to_back_sessions_have_zero_gap() {
        let c = cid(0, 0);
        let sessions = vec![real(0, c, 100), real(100, c, 200)];
        let gaps = idle_gaps(&sessions, TimeMs(500)).unwrap();
        assert_eq!(gaps[0].idle, DurationMs::ZERO);
    }

    #[test]
    fn three_sessions_yield_two_interior_gaps_plus_horizon() {
        let c = cid(0, 0);
        let sessions = vec![real(0, c, 10), real(20, c, 30), real(50, c, 60)];
        let gaps = idle_gaps(&sessions, TimeMs(100)).unwrap();
        // Count oracle: one record per session.
        assert_eq!(gaps.len(), sessions.len());
        assert_eq!(gaps[0].idle, DurationMs(10));
        assert_eq!(gaps[1].idle, DurationMs(20));
        assert_eq!(gaps[2].idle, DurationMs(40)); // horizon closure
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert_eq!(idle_gaps(&[], TimeMs(0)), Err(ModelError::EmptyTrace));
    }

    #[test]
    fn fleet_indices_are_lexicographic() {
        let mut profiles = BTreeMap::new();
        let p = EnergyProfile {
            active_w: 100.0,
            idle_w: 50.0,
            sleep_w: 3.0,
        };
        profiles.insert("beta".to_string(), p);
        profiles.insert("alpha".to_string(), p);
        let fleet = Fleet::from_names(
            vec![("beta", "m1"), ("alpha", "m2"), ("alpha", "m1"), ("beta", "m1")],
            &profiles,
        )
        .unwrap();
        assert_eq!(fleet.machine_count(), 3);
        assert_eq!(fleet.resolve("alpha/m1").unwrap(), cid(0, 0));
        assert_eq!(fleet.resolve("alpha/m2").unwrap(), cid(0, 1));
        assert_eq!(fleet.resolve("beta/m1").unwrap(), cid(1, 0));
        assert_eq!(fleet.computer_name(cid(1, 0)), "beta/m1");
        assert!(fleet.resolve("gamma/m1").is_err());
    }

    #[test]
    fn energy_profile_ordering_is_enforced() {
        assert!(EnergyProfile {
            active_w: 10.0,
            idle_w: 20.0,
            sleep_w: 1.0
        }
        .validate()
        .is_err());
        assert!(EnergyProfile {
            active_w: 100.0,
            idle_w: 40.0,
            sleep_w: 2.0
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn policy_requires_sleep_after_beyond_grace() {
        let mut p = ClusterPolicy::default();
        p.sleep_after = DurationMs::from_minutes(1);
        p.logout_grace = DurationMs::from_minutes(5);
        assert!(p.validate().is_err());
        assert!(ClusterPolicy::default().validate().is_ok());
    }

    /// Strategy for a valid per-computer session layout: interleaved
    /// busy/idle stretches starting at a random origin.
    fn session_layout() -> impl Strategy<Value = (Vec<InteractiveSession>, TimeMs)> {
        (
            0i64..1_000_000,
            prop::collection::vec((1i64..10_000, 0i64..10_000), 1..20),
            0i64..50_000,
        )
            .prop_map(|(origin, segments, tail)| {
                let c = cid(0, 0);
                let mut t = origin;
                let mut sessions = Vec::new();
                for (busy, gap) in segments {
                    sessions.push(real(t, c, t + busy));
                    t += busy + gap;
                }
                (sessions, TimeMs(t + tail))
            })
    }

    proptest! {
        /// Session time + idle time (horizon closure included) tiles the span
        /// from first login to horizon exactly.
        #[test]
        fn gaps_and_sessions_tile_the_span((sessions, horizon) in session_layout()) {
            let gaps = idle_gaps(&sessions, horizon).unwrap();
            let busy: i64 = sessions.iter().map(|s| s.active_duration().0).sum();
            let idle: i64 = gaps.iter().map(|g| g.idle.0).sum();
            let first_login = sessions.iter().map(|s| s.login.0).min().unwrap();
            prop_assert_eq!(busy + idle, horizon.0 - first_login);
        }

        /// idle_gaps sorts internally, so any input permutation produces the
        /// same records.
        #[test]
        fn gap_derivation_is_permutation_insensitive(
            (sessions, horizon) in session_layout(),
            seed in 0u64..1_000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = sessions.clone();
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let a = idle_gaps(&sessions, horizon).unwrap();
            let b = idle_gaps(&shuffled, horizon).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
