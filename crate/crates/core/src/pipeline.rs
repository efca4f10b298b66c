//! In-memory orchestration of the pipeline stages: generate, preprocess,
//! train, simulate. The CLI wraps these with file artifacts; tests drive
//! them directly.

use thiserror::Error;

use crate::config::Config;
use crate::model::{Fleet, IdleRecord, InteractiveSession, RebootSchedule, Task};
use crate::predictors::{AnnotatedPredictions, PredictorChoice, PredictorError};
use crate::preprocess;
use crate::schedulers::SchedulerKind;
use crate::simulator::{self, AnnotationIndex, SimInputs, SimOutput};
use crate::tracegen::{self, TraceGenError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    TraceGen(#[from] TraceGenError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Sim(#[from] simulator::SimError),
    #[error("trace has {0} validation violations")]
    InvalidTrace(usize),
}

/// One self-consistent synthetic workload: fleet, interactive sessions over
/// the whole span, tasks over the simulation window, and the reboot schedule.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub fleet: Fleet,
    pub sessions: Vec<InteractiveSession>,
    pub tasks: Vec<Task>,
    pub schedule: RebootSchedule,
}

pub fn generate(cfg: &Config) -> Result<Bundle, PipelineError> {
    let fleet = cfg.fleet.generate(cfg.seed)?;
    let span = cfg.span();
    let sessions = tracegen::gen_interactive(
        &fleet,
        &cfg.seasonality,
        &cfg.calendar,
        cfg.tz(),
        span,
        cfg.seed,
    )?;
    let tasks = tracegen::gen_tasks(&cfg.tasks, cfg.sim_window(), cfg.seed);
    let schedule = tracegen::gen_reboots(&fleet, &cfg.reboots, cfg.tz(), span);
    Ok(Bundle {
        fleet,
        sessions,
        tasks,
        schedule,
    })
}

/// Reboot splitting plus idle-gap derivation against the span horizon.
pub fn preprocess(bundle: &Bundle, cfg: &Config) -> Result<Vec<IdleRecord>, PipelineError> {
    let violations = crate::model::validate_trace(&bundle.sessions);
    if !violations.is_empty() {
        return Err(PipelineError::InvalidTrace(violations.len()));
    }
    let split = preprocess::split_on_reboots(&bundle.sessions, &bundle.fleet, &bundle.schedule);
    let (_, horizon) = cfg.span();
    Ok(crate::model::idle_gaps(&split, horizon)?)
}

/// Monthly retraining over preprocessed records.
pub fn train(
    records: &[IdleRecord],
    cfg: &Config,
    threads: Option<usize>,
) -> Result<AnnotatedPredictions, PipelineError> {
    Ok(crate::predictors::train_all_monthly(
        records,
        &cfg.train_setup(threads),
    )?)
}

/// Resolves one predictor choice into the lookup the simulator consumes.
pub fn annotation_index(
    predictions: &AnnotatedPredictions,
    choice: PredictorChoice,
) -> AnnotationIndex {
    let mut index = AnnotationIndex::new();
    for (session, predicted) in predictions.resolve(choice) {
        match session.kind {
            crate::model::SessionKind::Real => {
                index.add_logout(session.computer, session.logout, predicted)
            }
            crate::model::SessionKind::RebootSynthetic => {
                index.add_reboot(session.computer, session.logout, predicted)
            }
            crate::model::SessionKind::DensifySynthetic => {}
        }
    }
    index
}

pub fn simulate(
    bundle: &Bundle,
    cfg: &Config,
    scheduler: SchedulerKind,
    annotations: Option<&AnnotationIndex>,
) -> Result<SimOutput, PipelineError> {
    let (window_start, horizon) = cfg.sim_window();
    let inputs = SimInputs {
        fleet: &bundle.fleet,
        sessions: &bundle.sessions,
        tasks: &bundle.tasks,
        policy: cfg.policy(),
        schedule: &bundle.schedule,
        scheduler,
        annotations,
        window_start,
        horizon,
        seed: cfg.seed,
        record_event_log: cfg.sim.record_event_log,
    };
    Ok(simulator::run(&inputs)?)
}
