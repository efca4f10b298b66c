//! Deterministic discrete-event engine: replays interactive sessions,
//! scheduled reboots, and task arrivals over the fleet, enforcing cluster
//! policy and integrating energy piecewise-constant per state.
//!
//! Events at one timestamp are processed in a fixed kind order (state
//! settlement first, logins before anything the scheduler does), then the
//! scheduler runs once for that timestamp. Identical inputs and seed replay
//! to the identical report.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Attempt, AttemptOutcome, ClusterPolicy, ComputerId, DurationMs, EnergyProfile, Fleet,
    InteractiveSession, RebootSchedule, Task, TaskId, TimeMs,
};
use crate::schedulers::{
    self, Candidate, FutureKnowledge, Placement, SchedulerKind,
};

pub const JOULES_PER_MWH: f64 = 3.6e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MachineState {
    UserActive,
    TaskActive,
    IdleAwake,
    IdleSleep,
    Rebooting,
}

impl MachineState {
    fn rate(self, profile: &EnergyProfile) -> f64 {
        match self {
            MachineState::UserActive | MachineState::TaskActive | MachineState::Rebooting => {
                profile.active_w
            }
            MachineState::IdleAwake => profile.idle_w,
            MachineState::IdleSleep => profile.sleep_w,
        }
    }
}

/// Joules accumulated per rate class, plus the task-attributed split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyAccumulator {
    pub active_joules: f64,
    pub idle_joules: f64,
    pub sleep_joules: f64,
}

impl EnergyAccumulator {
    pub fn total(&self) -> f64 {
        self.active_joules + self.idle_joules + self.sleep_joules
    }
}

/// Live state of one machine inside the engine.
#[derive(Debug, Clone)]
pub struct MachineRuntime {
    pub id: ComputerId,
    pub profile: EnergyProfile,
    pub state: MachineState,
    pub state_entered_at: TimeMs,
    pub last_logout: TimeMs,
    pub predicted_idle: DurationMs,
    pub current_task: Option<TaskId>,
    pub energy: EnergyAccumulator,
    /// First instant the scheduler may use this machine again.
    schedulable_at: TimeMs,
    /// Bumped on every transition; timed events carry the epoch they were
    /// scheduled under and are dropped when stale.
    epoch: u64,
    /// A reboot arrived during the current user session and runs at logout.
    pending_reboot: bool,
    /// Attempt start for the task currently bound to this machine.
    attempt_started: TimeMs,
    /// False while a bound task is still waiting out the wake latency; no
    /// attempt exists yet in that state.
    attempt_running: bool,
}

impl MachineRuntime {
    fn new(id: ComputerId, profile: EnergyProfile, start: TimeMs) -> MachineRuntime {
        MachineRuntime {
            id,
            profile,
            state: MachineState::IdleAwake,
            state_entered_at: start,
            last_logout: start,
            predicted_idle: DurationMs::ZERO,
            current_task: None,
            energy: EnergyAccumulator::default(),
            schedulable_at: start,
            epoch: 0,
            pending_reboot: false,
            attempt_started: start,
            attempt_running: false,
        }
    }

    /// Remaining predicted idle at `t` for an idle or sleeping machine.
    pub fn predicted_idle_remaining(&self, t: TimeMs) -> Result<DurationMs, SimError> {
        match self.state {
            MachineState::IdleAwake | MachineState::IdleSleep => Ok(DurationMs(
                (self.last_logout.0 + self.predicted_idle.0 - t.0).max(0),
            )),
            _ => Err(SimError::NotIdle(self.id)),
        }
    }

    fn accrue(&mut self, now: TimeMs) {
        let dt = now.0 - self.state_entered_at.0;
        debug_assert!(dt >= 0, "time moved backwards");
        let joules = dt as f64 / 1_000.0 * self.state.rate(&self.profile);
        match self.state {
            MachineState::UserActive | MachineState::TaskActive | MachineState::Rebooting => {
                self.energy.active_joules += joules
            }
            MachineState::IdleAwake => self.energy.idle_joules += joules,
            MachineState::IdleSleep => self.energy.sleep_joules += joules,
        }
        self.state_entered_at = now;
    }

    fn enter(&mut self, state: MachineState, now: TimeMs) -> u64 {
        self.accrue(now);
        self.state = state;
        self.epoch += 1;
        self.epoch
    }
}

/// Event kinds, in tie-break priority order: state settlement (logouts,
/// completions, reboot/wake endings) first, then logins and reboot starts,
/// then timers, with task submissions last. The scheduler itself runs only
/// after every event at the timestamp has been handled.
#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    UserLogout { machine: usize, session: usize },
    TaskComplete { machine: usize, task: usize, epoch: u64 },
    RebootEnd { machine: usize, epoch: u64, annex_key: Option<TimeMs> },
    WakeComplete { machine: usize, task: usize, epoch: u64 },
    UserLogin { machine: usize, session: usize },
    RebootStart { machine: usize },
    SleepTimeout { machine: usize, epoch: u64 },
    GraceEnd { machine: usize, epoch: u64 },
    TaskSubmit { task: usize },
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::UserLogout { .. } => 0,
            EventKind::TaskComplete { .. } => 1,
            EventKind::RebootEnd { .. } => 2,
            EventKind::WakeComplete { .. } => 3,
            EventKind::UserLogin { .. } => 4,
            EventKind::RebootStart { .. } => 5,
            EventKind::SleepTimeout { .. } => 6,
            EventKind::GraceEnd { .. } => 7,
            EventKind::TaskSubmit { .. } => 8,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            EventKind::UserLogout { .. } => "user_logout",
            EventKind::TaskComplete { .. } => "task_complete",
            EventKind::RebootEnd { .. } => "reboot_end",
            EventKind::WakeComplete { .. } => "wake_complete",
            EventKind::UserLogin { .. } => "user_login",
            EventKind::RebootStart { .. } => "reboot_start",
            EventKind::SleepTimeout { .. } => "sleep_timeout",
            EventKind::GraceEnd { .. } => "grace_end",
            EventKind::TaskSubmit { .. } => "task_submit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SimEvent {
    time: TimeMs,
    ordinal: u64,
    kind: EventKind,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed for the max-heap: earliest (time, priority, ordinal) pops first.
        (other.time, other.kind.priority(), other.ordinal).cmp(&(
            self.time,
            self.kind.priority(),
            self.ordinal,
        ))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Predicted idle durations keyed by the exact logout (or scheduled reboot)
/// instant, as produced by the training stage.
#[derive(Debug, Clone, Default)]
pub struct AnnotationIndex {
    logout_pred: HashMap<(ComputerId, i64), i64>,
    reboot_pred: HashMap<(ComputerId, i64), i64>,
}

impl AnnotationIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_logout(&mut self, computer: ComputerId, logout: TimeMs, predicted: DurationMs) {
        self.logout_pred.insert((computer, logout.0), predicted.0);
    }

    pub fn add_reboot(&mut self, computer: ComputerId, reboot: TimeMs, predicted: DurationMs) {
        self.reboot_pred.insert((computer, reboot.0), predicted.0);
    }

    fn logout(&self, computer: ComputerId, logout: TimeMs) -> DurationMs {
        DurationMs(
            self.logout_pred
                .get(&(computer, logout.0))
                .copied()
                .unwrap_or(0),
        )
    }

    fn reboot(&self, computer: ComputerId, reboot: TimeMs) -> DurationMs {
        DurationMs(
            self.reboot_pred
                .get(&(computer, reboot.0))
                .copied()
                .unwrap_or(0),
        )
    }

    pub fn len(&self) -> usize {
        self.logout_pred.len() + self.reboot_pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logout_pred.is_empty() && self.reboot_pred.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("machine {0} is not idle or sleeping")]
    NotIdle(ComputerId),
    #[error("illegal transition on machine {machine}: {event} while {state:?}")]
    IllegalTransition {
        machine: ComputerId,
        state: MachineState,
        event: &'static str,
    },
    #[error("waking sleeping machines is forbidden by policy")]
    WakeForbidden,
    #[error("interactive trace has {0} validation violations")]
    InvalidTrace(usize),
    #[error("scheduler {0} needs an annotated trace")]
    MissingAnnotations(String),
    #[error("simulation window start must precede the horizon")]
    BadWindow,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Per-machine energy line in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MachineReport {
    pub computer: String,
    pub active_joules: f64,
    pub idle_joules: f64,
    pub sleep_joules: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttemptReport {
    pub computer: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskReport {
    pub id: u64,
    pub submit_ms: i64,
    pub duration_ms: i64,
    pub completed: bool,
    pub finish_ms: Option<i64>,
    pub overhead_ms: Option<i64>,
    pub productive_joules: f64,
    pub wasted_joules: f64,
    pub attempts: Vec<AttemptReport>,
}

/// The simulation result: HTC energy split into productive and wasted
/// attempt energy, fleet energy by state, and per-task accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimulationReport {
    pub schema_version: u32,
    pub scheduler: String,
    pub seed: u64,
    pub window_start_ms: i64,
    pub horizon_ms: i64,
    pub mean_overhead_minutes: f64,
    #[serde(rename = "totalHtcMWh")]
    pub total_htc_mwh: f64,
    #[serde(rename = "productiveMWh")]
    pub productive_mwh: f64,
    #[serde(rename = "wastedMWh")]
    pub wasted_mwh: f64,
    pub total_htc_joules: f64,
    pub productive_joules: f64,
    pub wasted_joules: f64,
    pub tasks_completed: u64,
    pub tasks_queued_at_horizon: u64,
    #[serde(rename = "fleetActiveMWh")]
    pub fleet_active_mwh: f64,
    #[serde(rename = "fleetIdleMWh")]
    pub fleet_idle_mwh: f64,
    #[serde(rename = "fleetSleepMWh")]
    pub fleet_sleep_mwh: f64,
    pub per_machine: Vec<MachineReport>,
    pub per_task: Vec<TaskReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventLogEntry {
    pub time_ms: i64,
    pub event: &'static str,
    pub computer: String,
    pub task: Option<u64>,
}

pub struct SimInputs<'a> {
    pub fleet: &'a Fleet,
    pub sessions: &'a [InteractiveSession],
    pub tasks: &'a [Task],
    pub policy: ClusterPolicy,
    pub schedule: &'a RebootSchedule,
    pub scheduler: SchedulerKind,
    pub annotations: Option<&'a AnnotationIndex>,
    pub window_start: TimeMs,
    pub horizon: TimeMs,
    pub seed: u64,
    pub record_event_log: bool,
}

pub struct SimOutput {
    pub report: SimulationReport,
    pub event_log: Option<Vec<EventLogEntry>>,
}

struct Engine<'a> {
    inputs: &'a SimInputs<'a>,
    machines: Vec<MachineRuntime>,
    machine_index: BTreeMap<ComputerId, usize>,
    tasks: Vec<Task>,
    task_index: HashMap<TaskId, usize>,
    queue: BTreeSet<usize>,
    heap: BinaryHeap<SimEvent>,
    ordinal: u64,
    rng: ChaCha12Rng,
    knowledge: FutureKnowledge,
    annotations: AnnotationIndex,
    sessions: Vec<InteractiveSession>,
    productive: Vec<f64>,
    wasted: Vec<f64>,
    log: Vec<EventLogEntry>,
    last_event_time: TimeMs,
}

/// Replays the traces under one scheduler and returns the report.
pub fn run(inputs: &SimInputs) -> Result<SimOutput, SimError> {
    if inputs.window_start >= inputs.horizon {
        return Err(SimError::BadWindow);
    }
    inputs.policy.validate()?;
    let violations = crate::model::validate_trace(inputs.sessions);
    if !violations.is_empty() {
        return Err(SimError::InvalidTrace(violations.len()));
    }
    if inputs.scheduler.needs_annotations() && inputs.annotations.is_none() {
        return Err(SimError::MissingAnnotations(inputs.scheduler.as_str()));
    }

    let mut engine = Engine::new(inputs);
    engine.seed_events();
    engine.run_loop();
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(inputs: &'a SimInputs<'a>) -> Engine<'a> {
        let ws = inputs.window_start;
        let horizon = inputs.horizon;

        let machine_index: BTreeMap<ComputerId, usize> = inputs
            .fleet
            .machines()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let mut machines: Vec<MachineRuntime> = inputs
            .fleet
            .machines()
            .map(|id| MachineRuntime::new(id, inputs.fleet.profile(id), ws))
            .collect();

        // Only real sessions are replayed; synthetic rows belong to
        // preprocessing. Sessions straddling the window start leave their
        // machine user-active from the first instant.
        let mut sessions: Vec<InteractiveSession> = inputs
            .sessions
            .iter()
            .filter(|s| {
                s.kind == crate::model::SessionKind::Real && s.login < horizon && s.logout >= ws
            })
            .copied()
            .collect();
        sessions.sort_by_key(|s| (s.computer, s.login, s.logout));

        // Pre-window history: the latest logout at or before the start seeds
        // the initial idle anchor.
        let mut pre_logout: BTreeMap<ComputerId, TimeMs> = BTreeMap::new();
        for s in inputs.sessions {
            if s.kind == crate::model::SessionKind::Real && s.logout <= ws {
                let slot = pre_logout.entry(s.computer).or_insert(s.logout);
                *slot = (*slot).max(s.logout);
            }
        }
        for (id, logout) in pre_logout {
            if let Some(&mi) = machine_index.get(&id) {
                machines[mi].last_logout = logout;
            }
        }

        // Reboots executed while a user is logged in are postponed to the
        // logout, so they never interrupt a task; only idle-executed reboots
        // abort. The oracle sees exactly the events the engine will replay.
        let mut window_schedule = RebootSchedule::new();
        for (cluster, times) in inputs.schedule.clusters() {
            for &t in times {
                if t >= ws && t < horizon {
                    window_schedule.add(cluster, t);
                }
            }
        }
        window_schedule.normalize();
        let knowledge = FutureKnowledge::build(&sessions, &window_schedule, inputs.fleet);

        let task_index: HashMap<TaskId, usize> = inputs
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id, i))
            .collect();

        Engine {
            inputs,
            machines,
            machine_index,
            tasks: inputs.tasks.to_vec(),
            task_index,
            queue: BTreeSet::new(),
            heap: BinaryHeap::new(),
            ordinal: 0,
            rng: ChaCha12Rng::seed_from_u64(inputs.seed),
            knowledge,
            annotations: inputs.annotations.cloned().unwrap_or_default(),
            sessions,
            productive: vec![0.0; inputs.tasks.len()],
            wasted: vec![0.0; inputs.tasks.len()],
            log: Vec::new(),
            last_event_time: inputs.window_start,
        }
    }

    fn push(&mut self, time: TimeMs, kind: EventKind) {
        self.ordinal += 1;
        self.heap.push(SimEvent {
            time,
            ordinal: self.ordinal,
            kind,
        });
    }

    /// Sleep and grace timers influence nothing past the horizon; dropping
    /// them keeps the post-horizon tail limited to in-flight work.
    fn push_timer(&mut self, time: TimeMs, kind: EventKind) {
        if time < self.inputs.horizon {
            self.push(time, kind);
        }
    }

    fn seed_events(&mut self) {
        let ws = self.inputs.window_start;
        let horizon = self.inputs.horizon;

        for si in 0..self.sessions.len() {
            let s = self.sessions[si];
            let mi = match self.machine_index.get(&s.computer) {
                Some(&mi) => mi,
                None => continue,
            };
            if s.login >= ws {
                self.push(s.login, EventKind::UserLogin { machine: mi, session: si });
            } else {
                // Already logged in at the window start.
                let m = &mut self.machines[mi];
                m.state = MachineState::UserActive;
                m.state_entered_at = ws;
            }
            self.push(s.logout, EventKind::UserLogout { machine: mi, session: si });
        }

        let reboots: Vec<(usize, TimeMs)> = self
            .machines
            .iter()
            .enumerate()
            .flat_map(|(mi, m)| {
                self.inputs
                    .schedule
                    .for_cluster(m.id.cluster)
                    .iter()
                    .filter(|&&t| t >= ws && t < horizon)
                    .map(move |&t| (mi, t))
                    .collect::<Vec<_>>()
            })
            .collect();
        for (mi, t) in reboots {
            self.push(t, EventKind::RebootStart { machine: mi });
        }

        for ti in 0..self.tasks.len() {
            let submit = self.tasks[ti].submit;
            self.push(submit, EventKind::TaskSubmit { task: ti });
        }

        // Machines idle at the window start resume their idle period: a
        // machine already past its sleep timeout begins asleep, one still
        // inside the post-logout grace serves it out. Machines with no prior
        // history are free immediately.
        for mi in 0..self.machines.len() {
            if self.machines[mi].state != MachineState::IdleAwake {
                continue;
            }
            let last_logout = self.machines[mi].last_logout;
            let epoch = self.machines[mi].epoch;
            let grace_due = if last_logout < ws {
                (last_logout + self.inputs.policy.logout_grace).max(ws)
            } else {
                ws
            };
            self.machines[mi].schedulable_at = grace_due;
            if grace_due > ws {
                self.push_timer(grace_due, EventKind::GraceEnd { machine: mi, epoch });
            }
            let sleep_due = last_logout + self.inputs.policy.sleep_after;
            if sleep_due <= ws {
                self.machines[mi].state = MachineState::IdleSleep;
            } else {
                self.push_timer(sleep_due, EventKind::SleepTimeout { machine: mi, epoch });
            }
        }
    }

    fn log_event(&mut self, time: TimeMs, kind: &EventKind) {
        if !self.inputs.record_event_log {
            return;
        }
        let (computer, task) = match kind {
            EventKind::UserLogout { machine, .. }
            | EventKind::UserLogin { machine, .. }
            | EventKind::RebootStart { machine }
            | EventKind::RebootEnd { machine, .. }
            | EventKind::SleepTimeout { machine, .. }
            | EventKind::GraceEnd { machine, .. } => (
                self.inputs.fleet.computer_name(self.machines[*machine].id),
                None,
            ),
            EventKind::TaskComplete { machine, task, .. }
            | EventKind::WakeComplete { machine, task, .. } => (
                self.inputs.fleet.computer_name(self.machines[*machine].id),
                Some(self.tasks[*task].id.0),
            ),
            EventKind::TaskSubmit { task } => (String::new(), Some(self.tasks[*task].id.0)),
        };
        self.log.push(EventLogEntry {
            time_ms: time.0,
            event: kind.name(),
            computer,
            task,
        });
    }

    fn run_loop(&mut self) {
        while let Some(head) = self.heap.peek() {
            let now = head.time;
            self.last_event_time = self.last_event_time.max(now);
            let mut need_dispatch = false;
            while self.heap.peek().is_some_and(|e| e.time == now) {
                let event = self.heap.pop().expect("peeked");
                self.log_event(now, &event.kind);
                need_dispatch |= self.handle(now, event.kind);
            }
            if need_dispatch && now < self.inputs.horizon {
                self.dispatch(now);
            }
        }
    }

    /// Handles one event; returns whether the scheduler should run at this
    /// timestamp.
    fn handle(&mut self, now: TimeMs, kind: EventKind) -> bool {
        match kind {
            EventKind::UserLogin { machine, .. } => self.on_login(machine, now),
            EventKind::UserLogout { machine, .. } => self.on_logout(machine, now),
            EventKind::RebootStart { machine } => self.on_reboot_start(machine, now),
            EventKind::RebootEnd {
                machine,
                epoch,
                annex_key,
            } => self.on_reboot_end(machine, now, epoch, annex_key),
            EventKind::SleepTimeout { machine, epoch } => {
                let m = &mut self.machines[machine];
                if m.epoch == epoch && m.state == MachineState::IdleAwake {
                    m.enter(MachineState::IdleSleep, now);
                }
                false
            }
            EventKind::GraceEnd { machine, epoch } => {
                let m = &self.machines[machine];
                m.epoch == epoch && m.state == MachineState::IdleAwake
            }
            EventKind::TaskSubmit { task } => {
                self.queue.insert(task);
                true
            }
            EventKind::TaskComplete {
                machine,
                task,
                epoch,
            } => self.on_task_complete(machine, task, now, epoch),
            EventKind::WakeComplete {
                machine,
                task,
                epoch,
            } => {
                let m = &mut self.machines[machine];
                if m.epoch == epoch && m.current_task == Some(self.tasks[task].id) {
                    m.attempt_started = now;
                    m.attempt_running = true;
                    let due = now + self.tasks[task].duration;
                    let epoch = m.epoch;
                    self.push(due, EventKind::TaskComplete { machine, task, epoch });
                }
                false
            }
        }
    }

    /// A login preempts everything: a running task aborts, a pending wake is
    /// cancelled, a reboot in progress is cut short.
    fn on_login(&mut self, machine: usize, now: TimeMs) -> bool {
        let mut need_dispatch = false;
        match self.machines[machine].state {
            MachineState::TaskActive => {
                need_dispatch = self.abort_current(machine, now, AttemptOutcome::AbortedLogin);
            }
            MachineState::Rebooting
            | MachineState::IdleAwake
            | MachineState::IdleSleep
            | MachineState::UserActive => {}
        }
        self.machines[machine].enter(MachineState::UserActive, now);
        need_dispatch
    }

    fn on_logout(&mut self, machine: usize, now: TimeMs) -> bool {
        let id = self.machines[machine].id;
        let predicted = self.annotations.logout(id, now);
        {
            let m = &mut self.machines[machine];
            m.last_logout = now;
            m.predicted_idle = predicted;
        }
        if self.machines[machine].pending_reboot {
            self.machines[machine].pending_reboot = false;
            self.start_reboot(machine, now, None);
        } else {
            let epoch = self.machines[machine].enter(MachineState::IdleAwake, now);
            let grace_end = now + self.inputs.policy.logout_grace;
            self.machines[machine].schedulable_at = grace_end;
            self.push_timer(grace_end, EventKind::GraceEnd { machine, epoch });
            self.push_timer(
                now + self.inputs.policy.sleep_after,
                EventKind::SleepTimeout { machine, epoch },
            );
        }
        false
    }

    fn on_reboot_start(&mut self, machine: usize, now: TimeMs) -> bool {
        match self.machines[machine].state {
            MachineState::UserActive => {
                self.machines[machine].pending_reboot = true;
                false
            }
            MachineState::Rebooting => false,
            MachineState::TaskActive => {
                let need = self.abort_current(machine, now, AttemptOutcome::AbortedReboot);
                self.start_reboot(machine, now, Some(now));
                need
            }
            MachineState::IdleAwake | MachineState::IdleSleep => {
                self.start_reboot(machine, now, Some(now));
                false
            }
        }
    }

    fn start_reboot(&mut self, machine: usize, now: TimeMs, annex_key: Option<TimeMs>) {
        let epoch = self.machines[machine].enter(MachineState::Rebooting, now);
        self.push(
            now + self.inputs.policy.reboot_duration,
            EventKind::RebootEnd {
                machine,
                epoch,
                annex_key,
            },
        );
    }

    fn on_reboot_end(
        &mut self,
        machine: usize,
        now: TimeMs,
        epoch: u64,
        annex_key: Option<TimeMs>,
    ) -> bool {
        if self.machines[machine].epoch != epoch {
            return false;
        }
        let id = self.machines[machine].id;
        if let Some(key) = annex_key {
            // The reboot marker owns the idle period that starts at its
            // scheduled instant; remaining time decays from there.
            let predicted = self.annotations.reboot(id, key);
            let m = &mut self.machines[machine];
            m.last_logout = key;
            m.predicted_idle = predicted;
        }
        let new_epoch = self.machines[machine].enter(MachineState::IdleAwake, now);
        self.machines[machine].schedulable_at = now;
        self.push_timer(
            now + self.inputs.policy.sleep_after,
            EventKind::SleepTimeout {
                machine,
                epoch: new_epoch,
            },
        );
        true
    }

    fn on_task_complete(&mut self, machine: usize, task: usize, now: TimeMs, epoch: u64) -> bool {
        let m = &self.machines[machine];
        if m.epoch != epoch || m.current_task != Some(self.tasks[task].id) {
            return false;
        }
        let start = m.attempt_started;
        let id = m.id;
        let watts = m.profile.active_w;
        self.tasks[task].attempts.push(Attempt {
            computer: id,
            start,
            end: now,
            outcome: AttemptOutcome::Completed,
        });
        self.productive[task] += (now.0 - start.0) as f64 / 1_000.0 * watts;

        let m = &mut self.machines[machine];
        m.current_task = None;
        m.attempt_running = false;
        let epoch = m.enter(MachineState::IdleAwake, now);
        m.schedulable_at = now;
        self.push_timer(
            now + self.inputs.policy.sleep_after,
            EventKind::SleepTimeout { machine, epoch },
        );
        true
    }

    /// Ends the current attempt as aborted and puts the task back in queue.
    /// A task still waiting out its wake latency never started an attempt;
    /// it just requeues.
    fn abort_current(&mut self, machine: usize, now: TimeMs, outcome: AttemptOutcome) -> bool {
        let m = &self.machines[machine];
        let task_id = match m.current_task {
            Some(t) => t,
            None => return false,
        };
        let ti = self.task_index[&task_id];
        if m.attempt_running {
            let started = m.attempt_started;
            let watts = m.profile.active_w;
            let id = m.id;
            self.tasks[ti].attempts.push(Attempt {
                computer: id,
                start: started,
                end: now,
                outcome,
            });
            self.wasted[ti] += (now.0 - started.0) as f64 / 1_000.0 * watts;
        }
        let m = &mut self.machines[machine];
        m.current_task = None;
        m.attempt_running = false;
        self.queue.insert(ti);
        true
    }

    fn candidates(&self, now: TimeMs) -> (Vec<Candidate>, Vec<Candidate>) {
        let mut idle = Vec::new();
        let mut sleeping = Vec::new();
        for m in &self.machines {
            if m.current_task.is_some() {
                continue;
            }
            let c = Candidate {
                computer: m.id,
                active_w: m.profile.active_w,
                last_logout: m.last_logout,
                predicted_idle: m.predicted_idle,
            };
            match m.state {
                MachineState::IdleAwake if now >= m.schedulable_at => idle.push(c),
                MachineState::IdleSleep if self.inputs.policy.wake_allowed => sleeping.push(c),
                _ => {}
            }
        }
        (idle, sleeping)
    }

    fn dispatch(&mut self, now: TimeMs) {
        loop {
            if self.queue.is_empty() {
                return;
            }
            let (idle, sleeping) = self.candidates(now);
            if idle.is_empty() && sleeping.is_empty() {
                return;
            }

            let mut ordered: Vec<usize> = self.queue.iter().copied().collect();
            schedulers::order_queue(self.inputs.scheduler.discipline(), &self.tasks, &mut ordered);

            let mut placed = None;
            for ti in ordered {
                let task = &self.tasks[ti];
                let placement = match self.inputs.scheduler {
                    SchedulerKind::Random => {
                        schedulers::random_place(&idle, &sleeping, &mut self.rng)
                    }
                    SchedulerKind::Crystal => schedulers::crystal_place(
                        task,
                        &idle,
                        &sleeping,
                        &self.knowledge,
                        self.inputs.policy.wake_latency,
                        now,
                    ),
                    SchedulerKind::Ml(_) => schedulers::ml_place(now, task, &idle, &sleeping),
                };
                if let Some(p) = placement {
                    placed = Some((ti, p));
                    break;
                }
                if matches!(self.inputs.scheduler, SchedulerKind::Random) {
                    // Random ignores the task; if it failed once it fails for all.
                    return;
                }
            }

            match placed {
                None => return,
                Some((ti, Placement { computer, wake })) => {
                    self.queue.remove(&ti);
                    let mi = self.machine_index[&computer];
                    let epoch = self.machines[mi].enter(MachineState::TaskActive, now);
                    self.machines[mi].current_task = Some(self.tasks[ti].id);
                    if wake {
                        // The machine draws active watts from the wake request
                        // on, but the attempt begins after the latency.
                        self.machines[mi].attempt_running = false;
                        self.push(
                            now + self.inputs.policy.wake_latency,
                            EventKind::WakeComplete {
                                machine: mi,
                                task: ti,
                                epoch,
                            },
                        );
                    } else {
                        self.machines[mi].attempt_started = now;
                        self.machines[mi].attempt_running = true;
                        self.push(
                            now + self.tasks[ti].duration,
                            EventKind::TaskComplete {
                                machine: mi,
                                task: ti,
                                epoch,
                            },
                        );
                    }
                }
            }
        }
    }

    fn finish(mut self) -> SimOutput {
        // Energy runs to the horizon, or to the last event when in-flight
        // work straggled past it.
        let final_t = self.inputs.horizon.max(self.last_event_time);
        for m in &mut self.machines {
            m.accrue(final_t);
        }

        let productive_joules: f64 = self.productive.iter().sum();
        let wasted_joules: f64 = self.wasted.iter().sum();
        let total_htc_joules = productive_joules + wasted_joules;

        let mut overhead_sum_ms = 0i64;
        let mut completed = 0u64;
        let mut per_task = Vec::with_capacity(self.tasks.len());
        for (ti, task) in self.tasks.iter().enumerate() {
            let finish = task.finish_time();
            let overhead = finish.map(|f| f.0 - task.submit.0 - task.duration.0);
            if let Some(o) = overhead {
                overhead_sum_ms += o;
                completed += 1;
            }
            per_task.push(TaskReport {
                id: task.id.0,
                submit_ms: task.submit.0,
                duration_ms: task.duration.0,
                completed: finish.is_some(),
                finish_ms: finish.map(|f| f.0),
                overhead_ms: overhead,
                productive_joules: self.productive[ti],
                wasted_joules: self.wasted[ti],
                attempts: task
                    .attempts
                    .iter()
                    .map(|a| AttemptReport {
                        computer: self.inputs.fleet.computer_name(a.computer),
                        start_ms: a.start.0,
                        end_ms: a.end.0,
                        outcome: a.outcome,
                    })
                    .collect(),
            });
        }
        let mean_overhead_minutes = if completed > 0 {
            overhead_sum_ms as f64 / completed as f64 / 60_000.0
        } else {
            0.0
        };

        let per_machine: Vec<MachineReport> = self
            .machines
            .iter()
            .map(|m| MachineReport {
                computer: self.inputs.fleet.computer_name(m.id),
                active_joules: m.energy.active_joules,
                idle_joules: m.energy.idle_joules,
                sleep_joules: m.energy.sleep_joules,
            })
            .collect();
        let fleet_active: f64 = self.machines.iter().map(|m| m.energy.active_joules).sum();
        let fleet_idle: f64 = self.machines.iter().map(|m| m.energy.idle_joules).sum();
        let fleet_sleep: f64 = self.machines.iter().map(|m| m.energy.sleep_joules).sum();

        let report = SimulationReport {
            schema_version: crate::io::SCHEMA_VERSION,
            scheduler: self.inputs.scheduler.as_str(),
            seed: self.inputs.seed,
            window_start_ms: self.inputs.window_start.0,
            horizon_ms: self.inputs.horizon.0,
            mean_overhead_minutes,
            total_htc_mwh: total_htc_joules / JOULES_PER_MWH,
            productive_mwh: productive_joules / JOULES_PER_MWH,
            wasted_mwh: wasted_joules / JOULES_PER_MWH,
            total_htc_joules,
            productive_joules,
            wasted_joules,
            tasks_completed: completed,
            tasks_queued_at_horizon: self.tasks.len() as u64 - completed,
            fleet_active_mwh: fleet_active / JOULES_PER_MWH,
            fleet_idle_mwh: fleet_idle / JOULES_PER_MWH,
            fleet_sleep_mwh: fleet_sleep / JOULES_PER_MWH,
            per_machine,
            per_task,
        };
        SimOutput {
            report,
            event_log: if self.inputs.record_event_log {
                Some(self.log)
            } else {
                None
            },
        }
    }
}
