//! Placement policies: the Random baseline, the Crystal oracle with future
//! knowledge, and the ML scheduler driven by predicted idle times.
//!
//! These are pure decision functions over snapshots of schedulable machines;
//! the event loop owns all state and calls them single-threaded.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::model::{
    ComputerId, DurationMs, Fleet, InteractiveSession, RebootSchedule, Task, TimeMs,
};
use crate::predictors::PredictorChoice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    Random,
    Crystal,
    Ml(PredictorChoice),
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 9] = [
        SchedulerKind::Random,
        SchedulerKind::Crystal,
        SchedulerKind::Ml(PredictorChoice::Forest),
        SchedulerKind::Ml(PredictorChoice::Mlp),
        SchedulerKind::Ml(PredictorChoice::Ensemble(crate::predictors::EnsembleKind::Max)),
        SchedulerKind::Ml(PredictorChoice::Ensemble(crate::predictors::EnsembleKind::Min)),
        SchedulerKind::Ml(PredictorChoice::Ensemble(crate::predictors::EnsembleKind::Average)),
        SchedulerKind::Ml(PredictorChoice::Ensemble(crate::predictors::EnsembleKind::LastMonth)),
        SchedulerKind::Ml(PredictorChoice::Ensemble(
            crate::predictors::EnsembleKind::BestOnAverage,
        )),
    ];

    pub fn as_str(self) -> String {
        match self {
            SchedulerKind::Random => "random".to_string(),
            SchedulerKind::Crystal => "crystal".to_string(),
            SchedulerKind::Ml(choice) => format!("ml:{}", choice.as_str()),
        }
    }

    pub fn parse(s: &str) -> Option<SchedulerKind> {
        match s {
            "random" => Some(SchedulerKind::Random),
            "crystal" => Some(SchedulerKind::Crystal),
            _ => s
                .strip_prefix("ml:")
                .and_then(PredictorChoice::parse)
                .map(SchedulerKind::Ml),
        }
    }

    /// Crystal drains long tasks first; everything else is submit-order FIFO.
    pub fn discipline(self) -> QueueDiscipline {
        match self {
            SchedulerKind::Crystal => QueueDiscipline::LongestDurationFirst,
            _ => QueueDiscipline::Fifo,
        }
    }

    pub fn needs_annotations(self) -> bool {
        matches!(self, SchedulerKind::Ml(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueDiscipline {
    Fifo,
    LongestDurationFirst,
}

/// Orders queued task indices for one dispatch pass.
pub fn order_queue(discipline: QueueDiscipline, tasks: &[Task], queue: &mut [usize]) {
    match discipline {
        QueueDiscipline::Fifo => queue.sort_by_key(|&i| (tasks[i].submit, tasks[i].id)),
        QueueDiscipline::LongestDurationFirst => queue.sort_by_key(|&i| {
            (
                std::cmp::Reverse(tasks[i].duration),
                tasks[i].submit,
                tasks[i].id,
            )
        }),
    }
}

/// Snapshot of one schedulable machine as the policies see it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub computer: ComputerId,
    pub active_w: f64,
    pub last_logout: TimeMs,
    pub predicted_idle: DurationMs,
}

impl Candidate {
    /// Remaining predicted idle at `t`: max(0, lastLogout + idle - t).
    pub fn predicted_remaining(&self, t: TimeMs) -> DurationMs {
        DurationMs((self.last_logout.0 + self.predicted_idle.0 - t.0).max(0))
    }
}

/// A placement decision: the machine, and whether it must be woken first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub computer: ComputerId,
    pub wake: bool,
}

/// Uniform choice over the idle set, falling back to the sleeping set. The
/// engine passes an empty sleeping set when policy forbids wakes.
pub fn random_place(
    idle: &[Candidate],
    sleeping: &[Candidate],
    rng: &mut impl Rng,
) -> Option<Placement> {
    if let Some(c) = idle.choose(rng) {
        return Some(Placement {
            computer: c.computer,
            wake: false,
        });
    }
    sleeping.choose(rng).map(|c| Placement {
        computer: c.computer,
        wake: true,
    })
}

/// True next-interruption times per machine, derived from the trace itself:
/// every real login, plus every scheduled reboot that executes while idle
/// (reboots inside a session are postponed to the logout, where no task can
/// be running, so they never abort anything).
#[derive(Debug, Clone, Default)]
pub struct FutureKnowledge {
    aborts: BTreeMap<ComputerId, Vec<TimeMs>>,
}

impl FutureKnowledge {
    pub fn build(
        sessions: &[InteractiveSession],
        schedule: &RebootSchedule,
        fleet: &Fleet,
    ) -> FutureKnowledge {
        let mut per_machine: BTreeMap<ComputerId, Vec<&InteractiveSession>> = BTreeMap::new();
        for s in sessions {
            per_machine.entry(s.computer).or_default().push(s);
        }
        let mut aborts = BTreeMap::new();
        for machine in fleet.machines() {
            let mut times = Vec::new();
            let mut covered = Vec::new();
            if let Some(group) = per_machine.get_mut(&machine) {
                group.sort_by_key(|s| (s.login, s.logout));
                for s in group.iter() {
                    times.push(s.login);
                    covered.push((s.login, s.logout));
                }
            }
            for &r in schedule.for_cluster(machine.cluster) {
                let inside = covered
                    .iter()
                    .any(|&(login, logout)| login <= r && r < logout);
                if !inside {
                    times.push(r);
                }
            }
            times.sort();
            times.dedup();
            aborts.insert(machine, times);
        }
        FutureKnowledge { aborts }
    }

    /// First abort event strictly after `t`, if any remain.
    pub fn next_abort(&self, machine: ComputerId, t: TimeMs) -> Option<TimeMs> {
        let times = self.aborts.get(&machine)?;
        let at = times.partition_point(|&x| x <= t);
        times.get(at).copied()
    }

    /// Guaranteed interruption-free span from `t` on this machine.
    pub fn true_remaining(&self, machine: ComputerId, t: TimeMs) -> DurationMs {
        match self.next_abort(machine, t) {
            Some(abort) => DurationMs((abort.0 - t.0).max(0)),
            // No interruption ever again; effectively unbounded.
            None => DurationMs(i64::MAX / 4),
        }
    }
}

/// Best fit under full knowledge: the machine whose true remaining idle is
/// the smallest value that still covers the task (plus wake latency when the
/// machine sleeps). Never places a task that would be interrupted.
pub fn crystal_place(
    task: &Task,
    idle: &[Candidate],
    sleeping: &[Candidate],
    knowledge: &FutureKnowledge,
    wake_latency: DurationMs,
    t: TimeMs,
) -> Option<Placement> {
    let mut best: Option<(DurationMs, f64, ComputerId, bool)> = None;
    for (set, wake) in [(idle, false), (sleeping, true)] {
        for c in set {
            let remaining = knowledge.true_remaining(c.computer, t);
            let required = if wake {
                DurationMs(task.duration.0 + wake_latency.0)
            } else {
                task.duration
            };
            if remaining < required {
                continue;
            }
            let key = (remaining, c.active_w, c.computer, wake);
            if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, _, computer, wake)| Placement { computer, wake })
}

/// The machine with the longest predicted remaining idle; ties break to the
/// lower active draw, then the smaller id, so the order is total.
fn find_longest_idle(set: &[Candidate], t: TimeMs) -> Option<(Candidate, DurationMs)> {
    set.iter()
        .map(|c| (*c, c.predicted_remaining(t)))
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then_with(|| b.0.active_w.partial_cmp(&a.0.active_w).unwrap())
                .then_with(|| b.0.computer.cmp(&a.0.computer))
        })
}

/// Prediction-driven placement: take the longest prior attempt as a lower
/// bound `p` on the runtime, pick the idle machine with the longest predicted
/// remaining idle if that beats `p`, otherwise try the sleeping machines,
/// otherwise place nothing.
pub fn ml_place(
    t: TimeMs,
    task: &Task,
    idle: &[Candidate],
    sleeping: &[Candidate],
) -> Option<Placement> {
    let p = if task.attempts.is_empty() {
        DurationMs::ZERO
    } else {
        task.max_previous_run()
    };
    if let Some((c, remaining)) = find_longest_idle(idle, t) {
        if remaining > p {
            return Some(Placement {
                computer: c.computer,
                wake: false,
            });
        }
    }
    if let Some((c, remaining)) = find_longest_idle(sleeping, t) {
        if remaining > p {
            return Some(Placement {
                computer: c.computer,
                wake: true,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttemptOutcome, TaskId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cid(c: u32, m: u32) -> ComputerId {
        ComputerId {
            cluster: c,
            machine: m,
        }
    }

    fn cand(m: u32, last_logout_s: i64, predicted_s: i64) -> Candidate {
        Candidate {
            computer: cid(0, m),
            active_w: 100.0,
            last_logout: TimeMs(last_logout_s * 1_000),
            predicted_idle: DurationMs(predicted_s * 1_000),
        }
    }

    fn task_with_attempt(duration_min: i64, prev_min: Option<i64>) -> Task {
        let mut t = Task::new(
            TaskId(1),
            TimeMs(0),
            DurationMs::from_minutes(duration_min),
        );
        if let Some(prev) = prev_min {
            t.attempts.push(crate::model::Attempt {
                computer: cid(0, 9),
                start: TimeMs(0),
                end: TimeMs(prev * 60_000),
                outcome: AttemptOutcome::AbortedLogin,
            });
        }
        t
    }

    #[test]
    fn remaining_is_logout_plus_idle_minus_now() {
        let c = cand(0, 1_000, 600);
        assert_eq!(c.predicted_remaining(TimeMs(1_200_000)), DurationMs(400_000));
    }

    #[test]
    fn remaining_at_logout_is_the_full_prediction() {
        let c = cand(0, 1_000, 600);
        assert_eq!(c.predicted_remaining(TimeMs(1_000_000)), DurationMs(600_000));
    }

    #[test]
    fn remaining_clamps_at_zero_after_expiry() {
        let c = cand(0, 1_000, 600);
        assert_eq!(c.predicted_remaining(TimeMs(2_000_000)), DurationMs::ZERO);
    }

    #[test]
    fn random_singleton_is_chosen() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let idle = [cand(3, 0, 10)];
        let p = random_place(&idle, &[], &mut rng).unwrap();
        assert_eq!(p.computer, cid(0, 3));
        assert!(!p.wake);
    }

    #[test]
    fn random_falls_back_to_sleeping() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let sleeping = [cand(5, 0, 10)];
        let p = random_place(&[], &sleeping, &mut rng).unwrap();
        assert_eq!(p.computer, cid(0, 5));
        assert!(p.wake);
    }

    #[test]
    fn random_with_no_capacity_returns_none() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(random_place(&[], &[], &mut rng), None);
    }

    #[test]
    fn random_draws_are_reproducible_and_uniform() {
        let idle: Vec<Candidate> = (0..5).map(|m| cand(m, 0, 10)).collect();
        let draws = 10_000usize;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..draws {
            let p = random_place(&idle, &[], &mut rng).unwrap();
            counts[p.computer.machine as usize] += 1;
        }
        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        let first = random_place(&idle, &[], &mut rng2).unwrap();
        let mut rng3 = ChaCha12Rng::seed_from_u64(42);
        assert_eq!(first, random_place(&idle, &[], &mut rng3).unwrap());
        // 3-sigma binomial bound around draws/5.
        let expectation = draws as f64 / 5.0;
        let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expectation).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma of {expectation}"
            );
        }
    }

    fn knowledge_with(aborts: Vec<(u32, Vec<i64>)>) -> FutureKnowledge {
        FutureKnowledge {
            aborts: aborts
                .into_iter()
                .map(|(m, times)| (cid(0, m), times.into_iter().map(TimeMs).collect()))
                .collect(),
        }
    }

    #[test]
    fn crystal_best_fit_picks_the_smallest_sufficient_idle() {
        // Remaining idles 8, 12, 50 minutes; a 10-minute task fits best on 12.
        let idle = [cand(0, 0, 0), cand(1, 0, 0), cand(2, 0, 0)];
        let k = knowledge_with(vec![
            (0, vec![8 * 60_000]),
            (1, vec![12 * 60_000]),
            (2, vec![50 * 60_000]),
        ]);
        let task = task_with_attempt(10, None);
        let p = crystal_place(&task, &idle, &[], &k, DurationMs::ZERO, TimeMs(0)).unwrap();
        assert_eq!(p.computer, cid(0, 1));
    }

    #[test]
    fn crystal_places_nothing_when_nothing_fits() {
        let idle = [cand(0, 0, 0)];
        let k = knowledge_with(vec![(0, vec![5 * 60_000])]);
        let task = task_with_attempt(10, None);
        assert_eq!(
            crystal_place(&task, &idle, &[], &k, DurationMs::ZERO, TimeMs(0)),
            None
        );
    }

    #[test]
    fn crystal_wake_requires_latency_headroom() {
        let sleeping = [cand(0, 0, 0)];
        let k = knowledge_with(vec![(0, vec![10 * 60_000 + 20_000])]);
        let task = task_with_attempt(10, None);
        // 10 min + 30 s wake > 10 min 20 s remaining: no placement.
        assert_eq!(
            crystal_place(&task, &[], &sleeping, &k, DurationMs::from_seconds(30), TimeMs(0)),
            None
        );
        // 10 s of slack is enough once the wake fits.
        let k2 = knowledge_with(vec![(0, vec![10 * 60_000 + 40_000])]);
        let p = crystal_place(&task, &[], &sleeping, &k2, DurationMs::from_seconds(30), TimeMs(0))
            .unwrap();
        assert!(p.wake);
    }

    #[test]
    fn longest_duration_first_orders_the_queue() {
        let t30 = task_with_attempt(30, None);
        let mut t5 = task_with_attempt(5, None);
        t5.id = TaskId(2);
        let tasks = vec![t30, t5];
        let mut queue = vec![1, 0];
        order_queue(QueueDiscipline::LongestDurationFirst, &tasks, &mut queue);
        assert_eq!(queue, vec![0, 1]); // 30-minute task first
        let mut queue = vec![1, 0];
        order_queue(QueueDiscipline::Fifo, &tasks, &mut queue);
        assert_eq!(queue, vec![0, 1]); // equal submit, lower id first
    }

    // Table-driven replay of the ML scheduler's three branches.
    #[test]
    fn ml_fresh_task_takes_the_longest_idle() {
        let idle = [cand(0, 0, 5 * 60), cand(1, 0, 30 * 60)];
        let task = task_with_attempt(10, None);
        let p = ml_place(TimeMs(0), &task, &idle, &[]).unwrap();
        assert_eq!(p.computer, cid(0, 1));
        assert!(!p.wake);
    }

    #[test]
    fn ml_falls_through_to_sleeping_when_idle_is_too_short() {
        // Previous attempt ran 40 minutes; best idle 35 < 40, best sleeping 60 > 40.
        let idle = [cand(0, 0, 35 * 60)];
        let sleeping = [cand(1, 0, 60 * 60)];
        let task = task_with_attempt(45, Some(40));
        let p = ml_place(TimeMs(0), &task, &idle, &sleeping).unwrap();
        assert_eq!(p.computer, cid(0, 1));
        assert!(p.wake);
    }

    #[test]
    fn ml_returns_none_when_no_prediction_beats_p() {
        let idle = [cand(0, 0, 35 * 60)];
        let sleeping = [cand(1, 0, 20 * 60)];
        let task = task_with_attempt(45, Some(40));
        assert_eq!(ml_place(TimeMs(0), &task, &idle, &sleeping), None);
    }

    #[test]
    fn ml_requires_strictly_more_than_p() {
        let idle = [cand(0, 0, 40 * 60)];
        let task = task_with_attempt(45, Some(40));
        // remaining == p exactly: the strict comparison refuses it.
        assert_eq!(ml_place(TimeMs(0), &task, &idle, &[]), None);
    }

    #[test]
    fn ml_tie_breaks_to_lower_watts_then_id() {
        let mut a = cand(1, 0, 600);
        a.active_w = 120.0;
        let mut b = cand(2, 0, 600);
        b.active_w = 90.0;
        let task = task_with_attempt(1, None);
        let p = ml_place(TimeMs(0), &task, &[a, b], &[]).unwrap();
        assert_eq!(p.computer, cid(0, 2));
        let mut c = cand(3, 0, 600);
        c.active_w = 90.0;
        let p = ml_place(TimeMs(0), &task, &[b, c], &[]).unwrap();
        assert_eq!(p.computer, cid(0, 2)); // same watts, smaller id
    }
}
