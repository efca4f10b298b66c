//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`). The heavyweight default
//! bundle is trained once and shared by the criteria that need it.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use voltsim_core::config::Config;
use voltsim_core::forest::{ForestConfig, RandomForest};
use voltsim_core::mlp::{gradient_check, Mlp, MlpConfig};
use voltsim_core::model::{DurationMs, IdleRecord, InteractiveSession, TimeMs};
use voltsim_core::pipeline;
use voltsim_core::predictors::{
    ensemble_combine, AccuracyHistory, EnsembleKind, ModelKind, PredictorChoice,
};
use voltsim_core::preprocess::{densify, MonthId};
use voltsim_core::schedulers::{ml_place, Candidate, SchedulerKind};
use voltsim_core::simulator::SimulationReport;

struct Verdict {
    criterion: usize,
    name: &'static str,
}

impl Verdict {
    fn new(criterion: usize, name: &'static str) -> Verdict {
        Verdict { criterion, name }
    }

    fn pass(self) {
        println!("ACCEPTANCE {:>2} {:<28} PASS", self.criterion, self.name);
    }

    fn fail(self, detail: &str) -> ! {
        println!("ACCEPTANCE {:>2} {:<28} FAIL ({detail})", self.criterion, self.name);
        panic!("criterion {} failed: {detail}", self.criterion);
    }
}

/// The default desk-scale bundle, trained once: reports for Random plus all
/// seven ML variants, and the accuracy history.
struct DefaultRun {
    reports: Vec<SimulationReport>,
    history: AccuracyHistory,
}

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = Config::default();
        let bundle = pipeline::generate(&cfg).expect("generate default bundle");
        let records = pipeline::preprocess(&bundle, &cfg).expect("preprocess");
        let predictions = pipeline::train(&records, &cfg, None).expect("train");

        let mut reports = Vec::new();
        let random = pipeline::simulate(&bundle, &cfg, SchedulerKind::Random, None)
            .expect("random sim")
            .report;
        reports.push(random);
        for choice in PredictorChoice::ALL {
            let index = pipeline::annotation_index(&predictions, choice);
            let report = pipeline::simulate(&bundle, &cfg, SchedulerKind::Ml(choice), Some(&index))
                .expect("ml sim")
                .report;
            reports.push(report);
        }
        DefaultRun {
            reports,
            history: predictions.history,
        }
    })
}

/// Criterion 1: totalHtcMWh = productiveMWh + wastedMWh to relative error
/// <= 1e-12 on every report, mirroring the published row structure
/// (33.85 + 87.68 = 121.53).
#[test]
fn criterion_01_accounting_identity() {
    let v = Verdict::new(1, "accounting identity");

    let table_row: f64 = 33.85 + 87.68;
    if ((table_row - 121.53) / 121.53).abs() > 1e-12 {
        v.fail("published row does not sum");
    }

    for report in &default_run().reports {
        let total = report.total_htc_mwh;
        let sum = report.productive_mwh + report.wasted_mwh;
        let denom = total.abs().max(1e-30);
        if ((total - sum) / denom).abs() > 1e-12 {
            v.fail(&format!(
                "{}: total {total} != {sum}",
                report.scheduler
            ));
        }
    }
    v.pass();
}

/// Criterion 2: on 20 generated bundles (50 machines, 6 months, ~10k tasks,
/// varied seeds) the Crystal scheduler wastes exactly nothing and uses
/// strictly less total HTC energy than Random.
#[test]
fn criterion_02_crystal_zero_waste() {
    let v = Verdict::new(2, "crystal zero waste");
    for i in 0..20u64 {
        let mut cfg = Config::default();
        cfg.seed = 1_000 + i;
        // Simulate the full six-month span; Crystal and Random need no
        // annotations.
        cfg.sim.window_start_month = Some(cfg.span.start_month);
        let bundle = pipeline::generate(&cfg).expect("generate");
        let crystal = pipeline::simulate(&bundle, &cfg, SchedulerKind::Crystal, None)
            .expect("crystal sim")
            .report;
        let random = pipeline::simulate(&bundle, &cfg, SchedulerKind::Random, None)
            .expect("random sim")
            .report;
        if crystal.wasted_joules != 0.0 {
            v.fail(&format!("seed {}: wasted {} J", cfg.seed, crystal.wasted_joules));
        }
        if crystal.total_htc_mwh >= random.total_htc_mwh {
            v.fail(&format!(
                "seed {}: crystal {} >= random {}",
                cfg.seed, crystal.total_htc_mwh, random.total_htc_mwh
            ));
        }
    }
    v.pass();
}

/// Criterion 3: on the default bundle every ML variant cuts wasted energy by
/// at least 30% against Random, and no variant's mean overhead exceeds
/// Random's by more than 10%.
#[test]
fn criterion_03_directional_energy_saving() {
    let v = Verdict::new(3, "directional energy saving");
    let run = default_run();
    let random = run
        .reports
        .iter()
        .find(|r| r.scheduler == "random")
        .expect("random report");
    for report in run.reports.iter().filter(|r| r.scheduler.starts_with("ml:")) {
        let waste_cut = 1.0 - report.wasted_mwh / random.wasted_mwh;
        if waste_cut < 0.30 {
            v.fail(&format!(
                "{} cuts waste only {:.1}% ({:.4} vs {:.4} MWh)",
                report.scheduler,
                waste_cut * 100.0,
                report.wasted_mwh,
                random.wasted_mwh
            ));
        }
        if report.mean_overhead_minutes > random.mean_overhead_minutes * 1.10 {
            v.fail(&format!(
                "{} overhead {:.2} min exceeds random {:.2} min by >10%",
                report.scheduler, report.mean_overhead_minutes, random.mean_overhead_minutes
            ));
        }
    }
    v.pass();
}

/// Criterion 4: over 1e5 random prediction pairs Min <= Average <= Max holds
/// exactly, with Max and Min equal to the elementwise extremes.
#[test]
fn criterion_04_ensemble_ordering() {
    let v = Verdict::new(4, "ensemble ordering");
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let history = AccuracyHistory::default();
    let c = voltsim_core::model::ComputerId {
        cluster: 0,
        machine: 0,
    };
    let month = MonthId::new(2009, 4);
    for _ in 0..100_000 {
        let rf = DurationMs(rng.random_range(0..10_000_000));
        let mlp = DurationMs(rng.random_range(0..10_000_000));
        let max = ensemble_combine(EnsembleKind::Max, rf, mlp, &history, c, month);
        let min = ensemble_combine(EnsembleKind::Min, rf, mlp, &history, c, month);
        let avg = ensemble_combine(EnsembleKind::Average, rf, mlp, &history, c, month);
        if max != rf.max(mlp) || min != rf.min(mlp) {
            v.fail("max/min are not elementwise extremes");
        }
        if !(min <= avg && avg <= max) {
            v.fail(&format!("ordering violated: {min} {avg} {max}"));
        }
    }
    v.pass();
}

/// Criterion 5: the densification law over 1e4 random (idle, delta) pairs:
/// synthetic count is floor(i/delta) minus the zero-residual exclusion and
/// every synthetic target is positive.
#[test]
fn criterion_05_densification_law() {
    let v = Verdict::new(5, "densification law");
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let c = voltsim_core::model::ComputerId {
        cluster: 0,
        machine: 0,
    };
    for _ in 0..10_000 {
        let idle = rng.random_range(0..50_000_000i64);
        let delta = rng.random_range(1..5_000_000i64);
        let record = IdleRecord {
            session: InteractiveSession::real(TimeMs(0), c, TimeMs(1_000)),
            idle: DurationMs(idle),
        };
        let out = densify(&[record], DurationMs(delta)).expect("densify");
        let n = idle / delta;
        let zero_excluded = i64::from(n > 0 && idle % delta == 0);
        let expected = 1 + n - zero_excluded;
        if out.len() as i64 != expected {
            v.fail(&format!(
                "idle {idle} delta {delta}: {} rows, expected {expected}",
                out.len()
            ));
        }
        if out[1..].iter().any(|r| r.idle.0 <= 0) {
            v.fail("non-positive synthetic target");
        }
    }
    v.pass();
}

/// Criterion 6: analytic MLP gradients match central finite differences
/// within relative error 1e-4 on 50 random small networks.
#[test]
fn criterion_06_mlp_gradient_check() {
    let v = Verdict::new(6, "mlp gradient check");
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < 50 {
        let d = rng.random_range(1..=5);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=5)).collect();
        let n = rng.random_range(2..=20);
        let net = Mlp::new(
            d,
            &hidden,
            voltsim_core::mlp::Activation::Relu,
            rng.random(),
        )
        .expect("net");
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        // Finite differences are undefined across the ReLU kink; resample
        // configurations that sit within the probe step of it.
        if net.min_preactivation_margin(&x) < 1e-3 {
            continue;
        }
        let err = gradient_check(&net, &x, &y, 1e-5);
        if err >= 1e-4 {
            v.fail(&format!("relative error {err}"));
        }
        checked += 1;
    }
    v.pass();
}

/// Criterion 7: a single unlimited-depth tree memorizes distinct rows with
/// zero training error, and mean-aggregated forest predictions always stay
/// inside the training target range.
#[test]
fn criterion_07_forest_memorization() {
    let v = Verdict::new(7, "forest memorization");
    let mut rng = ChaCha12Rng::seed_from_u64(7);

    // Distinct random rows, one unrestricted tree.
    let n = 128;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
    let single = ForestConfig {
        tree_count: 1,
        bootstrap: false,
        max_features_per_split: Some(3),
        ..ForestConfig::default()
    };
    let tree = RandomForest::fit(&x, 3, &y, &single).expect("fit");
    let mse: f64 = (0..n)
        .map(|i| {
            let p = tree.predict_mean(&x[i * 3..(i + 1) * 3]).expect("predict");
            (p - y[i]).powi(2)
        })
        .sum::<f64>()
        / n as f64;
    if mse != 0.0 {
        v.fail(&format!("single-tree training MSE {mse}"));
    }

    // Bootstrapped forests stay within [min(y), max(y)] under mean
    // aggregation at arbitrary probes.
    let forest = RandomForest::fit(&x, 3, &y, &ForestConfig::default()).expect("fit");
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..500 {
        let probe: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..2.0)).collect();
        let p = forest.predict_mean(&probe).expect("predict");
        if !(lo..=hi).contains(&p) {
            v.fail(&format!("prediction {p} outside [{lo}, {hi}]"));
        }
    }
    v.pass();
}

/// Criterion 8: on the seasonal synthetic trace the per-computer r-squared
/// median across months is positive for both base models.
#[test]
fn criterion_08_prediction_skill() {
    let v = Verdict::new(8, "prediction skill");
    let history = &default_run().history;
    for model in [ModelKind::Forest, ModelKind::Mlp] {
        let mut values: Vec<f64> = history
            .entries
            .iter()
            .filter(|e| e.model == model)
            .filter_map(|e| e.r2)
            .collect();
        if values.is_empty() {
            v.fail(&format!("{model:?}: no r2 values"));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = values[values.len() / 2];
        if median <= 0.0 {
            v.fail(&format!("{model:?}: median r2 {median}"));
        }
    }
    v.pass();
}

/// Criterion 9: two full pipeline runs with identical config and seed
/// produce byte-identical report JSON.
#[test]
fn criterion_09_determinism() {
    let v = Verdict::new(9, "determinism");
    let mut cfg = Config::default();
    cfg.fleet.cluster_count = 2;
    cfg.fleet.machines_per_cluster = 5;
    cfg.span.months = 4;
    cfg.train.first_target_month = MonthId::new(2009, 3);
    cfg.train.last_target_month = MonthId::new(2009, 4);
    cfg.tasks.total_tasks = 1_000;
    cfg.forest.tree_count = 25;
    cfg.mlp.max_epochs = 40;
    cfg.seed = 99;

    let run_once = || {
        let bundle = pipeline::generate(&cfg).expect("generate");
        let records = pipeline::preprocess(&bundle, &cfg).expect("preprocess");
        let predictions = pipeline::train(&records, &cfg, Some(2)).expect("train");
        let index = pipeline::annotation_index(
            &predictions,
            PredictorChoice::Ensemble(EnsembleKind::Average),
        );
        let ml = pipeline::simulate(
            &bundle,
            &cfg,
            SchedulerKind::Ml(PredictorChoice::Ensemble(EnsembleKind::Average)),
            Some(&index),
        )
        .expect("ml sim");
        let random = pipeline::simulate(&bundle, &cfg, SchedulerKind::Random, None).expect("rand");
        (
            serde_json::to_string(&ml.report).expect("json"),
            serde_json::to_string(&random.report).expect("json"),
        )
    };

    let (ml_a, random_a) = run_once();
    let (ml_b, random_b) = run_once();
    if ml_a != ml_b {
        v.fail("ml report JSON differs between runs");
    }
    if random_a != random_b {
        v.fail("random report JSON differs between runs");
    }
    v.pass();
}

/// Criterion 10: table-driven replay of the ML placement algorithm's three
/// branches against the hand-traced oracle.
#[test]
fn criterion_10_ml_place_conformance() {
    let v = Verdict::new(10, "ml placement conformance");

    fn cand(machine: u32, remaining_min: i64, t: TimeMs) -> Candidate {
        Candidate {
            computer: voltsim_core::model::ComputerId {
                cluster: 0,
                machine,
            },
            active_w: 100.0,
            last_logout: t,
            predicted_idle: DurationMs::from_minutes(remaining_min),
        }
    }

    fn task_with_prev(prev_min: Option<i64>) -> voltsim_core::model::Task {
        let mut t = voltsim_core::model::Task::new(
            voltsim_core::model::TaskId(1),
            TimeMs(0),
            DurationMs::from_minutes(10),
        );
        if let Some(prev) = prev_min {
            t.attempts.push(voltsim_core::model::Attempt {
                computer: voltsim_core::model::ComputerId {
                    cluster: 0,
                    machine: 99,
                },
                start: TimeMs(0),
                end: TimeMs(prev * 60_000),
                outcome: voltsim_core::model::AttemptOutcome::AbortedLogin,
            });
        }
        t
    }

    let t = TimeMs(0);
    // Case 1: fresh task, idle remainings {5, 30} -> the 30-minute machine.
    let idle = [cand(0, 5, t), cand(1, 30, t)];
    let p = ml_place(t, &task_with_prev(None), &idle, &[]);
    match p {
        Some(p) if p.computer.machine == 1 && !p.wake => {}
        other => v.fail(&format!("case 1: {other:?}")),
    }

    // Case 2: previous attempt 40 min; best idle 35, best sleeping 60 ->
    // wake the sleeping machine.
    let idle = [cand(0, 35, t)];
    let sleeping = [cand(1, 60, t)];
    let p = ml_place(t, &task_with_prev(Some(40)), &idle, &sleeping);
    match p {
        Some(p) if p.computer.machine == 1 && p.wake => {}
        other => v.fail(&format!("case 2: {other:?}")),
    }

    // Case 3: previous attempt 40; best idle 35, best sleeping 20 -> null.
    let idle = [cand(0, 35, t)];
    let sleeping = [cand(1, 20, t)];
    if ml_place(t, &task_with_prev(Some(40)), &idle, &sleeping).is_some() {
        v.fail("case 3: expected no placement");
    }

    // The comparison is strict: remaining == p places nothing.
    let idle = [cand(0, 40, t)];
    if ml_place(t, &task_with_prev(Some(40)), &idle, &[]).is_some() {
        v.fail("strictness: remaining == p must not place");
    }
    v.pass();
}
