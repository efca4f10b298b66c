//! Per-computer idle-duration predictors: the trained-model wrapper around
//! the forest and MLP, ensemble combiners, accuracy metrics, and the monthly
//! retrain-and-annotate driver.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{ForestAggregation, ForestConfig, ForestError, RandomForest};
use crate::mlp::{Mlp, MlpConfig, MlpError};
use crate::model::{ComputerId, DurationMs, InteractiveSession, ModelError, SessionKind, TimeMs};
use crate::preprocess::{
    self, Feature, MonthId, PreprocessError, ScalingSpec, TermCalendar, TzOffset,
};

/// One of the two base learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Forest,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Forest => "rf",
            ModelKind::Mlp => "mlp",
        }
    }
}

/// Rule merging the two base predictions into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Max,
    Min,
    Average,
    LastMonth,
    BestOnAverage,
}

/// What the scheduler (or the annotation writer) asks for: a single model or
/// an ensemble of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorChoice {
    Forest,
    Mlp,
    Ensemble(EnsembleKind),
}

impl PredictorChoice {
    pub const ALL: [PredictorChoice; 7] = [
        PredictorChoice::Forest,
        PredictorChoice::Mlp,
        PredictorChoice::Ensemble(EnsembleKind::Max),
        PredictorChoice::Ensemble(EnsembleKind::Min),
        PredictorChoice::Ensemble(EnsembleKind::Average),
        PredictorChoice::Ensemble(EnsembleKind::LastMonth),
        PredictorChoice::Ensemble(EnsembleKind::BestOnAverage),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorChoice::Forest => "rf",
            PredictorChoice::Mlp => "mlp",
            PredictorChoice::Ensemble(EnsembleKind::Max) => "max",
            PredictorChoice::Ensemble(EnsembleKind::Min) => "min",
            PredictorChoice::Ensemble(EnsembleKind::Average) => "avg",
            PredictorChoice::Ensemble(EnsembleKind::LastMonth) => "lastmonth",
            PredictorChoice::Ensemble(EnsembleKind::BestOnAverage) => "bestavg",
        }
    }

    pub fn parse(s: &str) -> Option<PredictorChoice> {
        Some(match s {
            "rf" => PredictorChoice::Forest,
            "mlp" => PredictorChoice::Mlp,
            "max" => PredictorChoice::Ensemble(EnsembleKind::Max),
            "min" => PredictorChoice::Ensemble(EnsembleKind::Min),
            "avg" => PredictorChoice::Ensemble(EnsembleKind::Average),
            "lastmonth" => PredictorChoice::Ensemble(EnsembleKind::LastMonth),
            "bestavg" => PredictorChoice::Ensemble(EnsembleKind::BestOnAverage),
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no training rows anywhere in the fleet before {0}")]
    NoFleetHistory(MonthId),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("actual and predicted lengths differ ({actual} vs {predicted})")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("metric over an empty series")]
    Empty,
    #[error("actual values have zero variance, r^2 undefined")]
    ZeroVariance,
}

/// Mean squared residual.
pub fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>()
        / actual.len() as f64)
}

/// Coefficient of determination, 1 - SS_res/SS_tot.
pub fn r2(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Merges per-tree outputs already converted to milliseconds: the mean, or
/// the mode after rounding to the nearest minute (ties to the smaller value).
pub fn aggregate_tree_outputs(values_ms: &[f64], rule: ForestAggregation) -> f64 {
    match rule {
        ForestAggregation::Mean => values_ms.iter().sum::<f64>() / values_ms.len() as f64,
        ForestAggregation::Modal => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for v in values_ms {
                let minute = (v / crate::model::MS_PER_MINUTE as f64).round() as i64;
                *counts.entry(minute).or_insert(0) += 1;
            }
            let (&minute, _) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty tree outputs");
            (minute * crate::model::MS_PER_MINUTE) as f64
        }
    }
}

/// A fitted per-computer model plus everything needed to apply it: the
/// scaling fixed at training time and the feature subset. Immutable once
/// built; predictions are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub computer: ComputerId,
    pub scaling: ScalingSpec,
    pub features: Vec<Feature>,
    pub training_range: (MonthId, MonthId),
    params: ModelParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ModelParams {
    Forest(RandomForest),
    Mlp(Mlp),
}

impl TrainedModel {
    /// Predicts the idle duration for a scaled feature row, inverse-scaling
    /// the output and clamping at zero.
    pub fn predict(&self, scaled_row: &[f64]) -> Result<DurationMs, PredictorError> {
        let ms = match &self.params {
            ModelParams::Forest(f) => {
                let per_tree = f.tree_predictions(scaled_row)?;
                let unscaled: Vec<f64> = per_tree
                    .iter()
                    .map(|&p| self.scaling.unscale_target(p))
                    .collect();
                aggregate_tree_outputs(&unscaled, f.aggregation)
            }
            ModelParams::Mlp(m) => self.scaling.unscale_target(m.forward(scaled_row)?),
        };
        Ok(DurationMs((ms.max(0.0).min(i64::MAX as f64 / 2.0)).round() as i64))
    }
}

/// Accuracy of one model on one computer-month of held-out records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub computer: ComputerId,
    pub month: MonthId,
    pub model: ModelKind,
    /// Mean squared error in minutes squared.
    pub mse: f64,
    /// `None` when the month's actual idles have zero variance.
    pub r2: Option<f64>,
}

/// Per-model, per-month MSE history used by the history-based ensembles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistory {
    pub entries: Vec<AccuracyEntry>,
}

impl AccuracyHistory {
    /// `(rf_mse, mlp_mse)` pairs for one computer, keyed by month.
    fn months_for(&self, computer: ComputerId) -> BTreeMap<MonthId, (Option<f64>, Option<f64>)> {
        let mut out: BTreeMap<MonthId, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.computer == computer) {
            let slot = out.entry(e.month).or_default();
            match e.model {
                ModelKind::Forest => slot.0 = Some(e.mse),
                ModelKind::Mlp => slot.1 = Some(e.mse),
            }
        }
        out
    }

    /// The model with the lower MSE in the latest month strictly before
    /// `target` (the immediately preceding month under the monthly protocol).
    /// Ties go to the forest; `None` when no history exists yet.
    pub fn last_month_winner(&self, computer: ComputerId, target: MonthId) -> Option<ModelKind> {
        let months = self.months_for(computer);
        let (_, &(rf, mlp)) = months.range(..target).next_back()?;
        match (rf, mlp) {
            (Some(rf), Some(mlp)) if mlp < rf => Some(ModelKind::Mlp),
            (Some(_), _) => Some(ModelKind::Forest),
            (None, Some(_)) => Some(ModelKind::Mlp),
            (None, None) => None,
        }
    }

    /// The model with the lower mean MSE over every month strictly before
    /// `target`. Ties go to the forest; `None` without history.
    pub fn best_on_average_winner(
        &self,
        computer: ComputerId,
        target: MonthId,
    ) -> Option<ModelKind> {
        let months = self.months_for(computer);
        let mut rf_sum = 0.0;
        let mut rf_n = 0usize;
        let mut mlp_sum = 0.0;
        let mut mlp_n = 0usize;
        for (_, &(rf, mlp)) in months.range(..target) {
            if let Some(v) = rf {
                rf_sum += v;
                rf_n += 1;
            }
            if let Some(v) = mlp {
                mlp_sum += v;
                mlp_n += 1;
            }
        }
        match (rf_n, mlp_n) {
            (0, 0) => None,
            (_, 0) => Some(ModelKind::Forest),
            (0, _) => Some(ModelKind::Mlp),
            _ => {
                if mlp_sum / (mlp_n as f64) < rf_sum / rf_n as f64 {
                    Some(ModelKind::Mlp)
                } else {
                    Some(ModelKind::Forest)
                }
            }
        }
    }
}

/// Combines the two base predictions under an ensemble rule. The
/// history-based rules fall back to Average on the cold-start month.
pub fn ensemble_combine(
    kind: EnsembleKind,
    rf: DurationMs,
    mlp: DurationMs,
    history: &AccuracyHistory,
    computer: ComputerId,
    target: MonthId,
) -> DurationMs {
    match kind {
        EnsembleKind::Max => rf.max(mlp),
        EnsembleKind::Min => rf.min(mlp),
        EnsembleKind::Average => DurationMs((rf.0 + mlp.0) / 2),
        EnsembleKind::LastMonth => match history.last_month_winner(computer, target) {
            Some(ModelKind::Forest) => rf,
            Some(ModelKind::Mlp) => mlp,
            None => DurationMs((rf.0 + mlp.0) / 2),
        },
        EnsembleKind::BestOnAverage => match history.best_on_average_winner(computer, target) {
            Some(ModelKind::Forest) => rf,
            Some(ModelKind::Mlp) => mlp,
            None => DurationMs((rf.0 + mlp.0) / 2),
        },
    }
}

/// One annotated record: the session, its observed idle, and both base
/// predictions. Ensemble columns are derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedRecord {
    pub session: InteractiveSession,
    pub actual_idle: DurationMs,
    pub rf: DurationMs,
    pub mlp: DurationMs,
}

/// Output of the monthly driver: predictions for every real and
/// reboot-marker logout in the target months, plus the accuracy history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedPredictions {
    pub records: Vec<PredictedRecord>,
    pub history: AccuracyHistory,
    pub tz: TzOffset,
}

impl AnnotatedPredictions {
    /// The chosen prediction for every record under one predictor choice.
    pub fn resolve(&self, choice: PredictorChoice) -> Vec<(InteractiveSession, DurationMs)> {
        self.records
            .iter()
            .map(|r| {
                let p = match choice {
                    PredictorChoice::Forest => r.rf,
                    PredictorChoice::Mlp => r.mlp,
                    PredictorChoice::Ensemble(kind) => ensemble_combine(
                        kind,
                        r.rf,
                        r.mlp,
                        &self.history,
                        r.session.computer,
                        MonthId::containing(r.session.logout, self.tz),
                    ),
                };
                (r.session, p)
            })
            .collect()
    }
}

/// Everything the monthly driver needs beyond the trace itself.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub forest: ForestConfig,
    pub mlp: MlpConfig,
    pub features: Vec<Feature>,
    pub delta: DurationMs,
    pub calendar: TermCalendar,
    pub tz: TzOffset,
    pub first_target: MonthId,
    pub last_target: MonthId,
    /// Annotate with the observed idle instead of model output.
    pub oracle_mode: bool,
    /// Training thread cap; `None` uses every core.
    pub threads: Option<usize>,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, computer: ComputerId, month: MonthId, salt: u64) -> u64 {
    base ^ mix64(
        ((computer.cluster as u64) << 40)
            ^ ((computer.machine as u64) << 20)
            ^ ((month.year as u64) << 4)
            ^ month.month as u64
            ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

struct MonthJobResult {
    computer: ComputerId,
    month: MonthId,
    rows: Vec<PredictedRecord>,
    accuracy: Vec<AccuracyEntry>,
}

/// Runs the monthly protocol over preprocessed idle records (reboot-split,
/// not yet densified): for every computer and every target month, train both
/// models on all of that computer's records before the month (densified),
/// predict the idle time of every real or reboot logout inside the month,
/// and record per-model accuracy. Computers with no usable training rows
/// predict the fleet-median training idle for that month.
pub fn train_all_monthly(
    all_records: &[crate::model::IdleRecord],
    setup: &TrainSetup,
) -> Result<AnnotatedPredictions, PredictorError> {
    if all_records.is_empty() {
        return Err(PredictorError::Model(ModelError::EmptyTrace));
    }
    let mut per_computer: BTreeMap<ComputerId, Vec<crate::model::IdleRecord>> = BTreeMap::new();
    for r in all_records {
        per_computer.entry(r.session.computer).or_default().push(*r);
    }

    let months: Vec<MonthId> = setup.first_target.through(setup.last_target).collect();

    // Fleet-median training idle per target month, the fallback for
    // computers without their own training rows.
    let mut fallback: BTreeMap<MonthId, DurationMs> = BTreeMap::new();
    for &month in &months {
        let start = month.start(setup.tz);
        let mut idles: Vec<i64> = all_records
            .iter()
            .filter(|r| r.session.logout < start)
            .map(|r| r.idle.0)
            .collect();
        if idles.is_empty() {
            return Err(PredictorError::NoFleetHistory(month));
        }
        idles.sort();
        fallback.insert(month, DurationMs(idles[idles.len() / 2]));
    }

    let jobs: Vec<(ComputerId, MonthId)> = per_computer
        .keys()
        .flat_map(|&c| months.iter().map(move |&m| (c, m)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.threads.unwrap_or(0))
        .build()
        .expect("thread pool");
    let results: Result<Vec<MonthJobResult>, PredictorError> = pool.install(|| {
        jobs.par_iter()
            .map(|&(computer, month)| {
                run_month_job(
                    computer,
                    month,
                    &per_computer[&computer],
                    fallback[&month],
                    setup,
                )
            })
            .collect()
    });
    let mut results = results?;
    results.sort_by_key(|r| (r.computer, r.month));

    let mut records = Vec::new();
    let mut entries = Vec::new();
    for r in results {
        records.extend(r.rows);
        entries.extend(r.accuracy);
    }
    records.sort_by_key(|r| (r.session.computer, r.session.logout, r.session.login));
    Ok(AnnotatedPredictions {
        records,
        history: AccuracyHistory { entries },
        tz: setup.tz,
    })
}

fn run_month_job(
    computer: ComputerId,
    month: MonthId,
    records: &[crate::model::IdleRecord],
    fallback: DurationMs,
    setup: &TrainSetup,
) -> Result<MonthJobResult, PredictorError> {
    let start = month.start(setup.tz);
    let end = month.next().start(setup.tz);

    let predict: Vec<_> = records
        .iter()
        .filter(|r| r.session.logout >= start && r.session.logout < end)
        .copied()
        .collect();
    if predict.is_empty() {
        return Ok(MonthJobResult {
            computer,
            month,
            rows: Vec::new(),
            accuracy: Vec::new(),
        });
    }

    let rows: Vec<PredictedRecord> = if setup.oracle_mode {
        predict
            .iter()
            .map(|r| PredictedRecord {
                session: r.session,
                actual_idle: r.idle,
                rf: r.idle,
                mlp: r.idle,
            })
            .collect()
    } else {
        let train: Vec<_> = records
            .iter()
            .filter(|r| r.session.logout < start)
            .copied()
            .collect();
        let (rf_model, mlp_model) = fit_pair(computer, month, &train, setup)?;

        predict
            .iter()
            .map(|r| -> Result<PredictedRecord, PredictorError> {
                let vec = preprocess::extract_features(r, &setup.calendar, setup.tz)?;
                let apply = |m: &Option<TrainedModel>| -> Result<DurationMs, PredictorError> {
                    match m {
                        None => Ok(fallback),
                        Some(model) => {
                            let row =
                                preprocess::scale_and_select(&vec, &model.scaling, &model.features)?;
                            model.predict(&row)
                        }
                    }
                };
                Ok(PredictedRecord {
                    session: r.session,
                    actual_idle: r.idle,
                    rf: apply(&rf_model)?,
                    mlp: apply(&mlp_model)?,
                })
            })
            .collect::<Result<_, _>>()?
    };

    let actual_min: Vec<f64> = rows.iter().map(|r| r.actual_idle.as_minutes_f64()).collect();
    let mut accuracy = Vec::new();
    for (model, preds) in [
        (ModelKind::Forest, rows.iter().map(|r| r.rf).collect::<Vec<_>>()),
        (ModelKind::Mlp, rows.iter().map(|r| r.mlp).collect::<Vec<_>>()),
    ] {
        let pred_min: Vec<f64> = preds.iter().map(|p| p.as_minutes_f64()).collect();
        accuracy.push(AccuracyEntry {
            computer,
            month,
            model,
            mse: mse(&actual_min, &pred_min).expect("non-empty predict set"),
            r2: r2(&actual_min, &pred_min).ok(),
        });
    }

    Ok(MonthJobResult {
        computer,
        month,
        rows,
        accuracy,
    })
}

/// Fits the forest and MLP for one computer-month. Either slot comes back
/// `None` when that model cannot train (no rows for the forest, fewer than
/// two for the MLP); the caller substitutes the fallback constant.
fn fit_pair(
    computer: ComputerId,
    month: MonthId,
    train: &[crate::model::IdleRecord],
    setup: &TrainSetup,
) -> Result<(Option<TrainedModel>, Option<TrainedModel>), PredictorError> {
    let densified = preprocess::densify(train, setup.delta)?;
    if densified.is_empty() {
        return Ok((None, None));
    }

    let vectors: Vec<_> = densified
        .iter()
        .map(|r| preprocess::extract_features(r, &setup.calendar, setup.tz))
        .collect::<Result<_, _>>()?;
    let targets_ms: Vec<f64> = densified.iter().map(|r| r.idle.0 as f64).collect();
    let scaling = ScalingSpec::fit(&vectors, &targets_ms);

    let width = setup.features.len();
    let mut x = Vec::with_capacity(vectors.len() * width);
    for v in &vectors {
        x.extend(preprocess::scale_and_select(v, &scaling, &setup.features)?);
    }
    let y: Vec<f64> = targets_ms.iter().map(|&t| scaling.scale_target(t)).collect();

    let first_month = MonthId::containing(densified[0].session.logout, setup.tz);
    let range = (first_month, month);

    let mut forest_cfg = setup.forest.clone();
    forest_cfg.seed = derive_seed(setup.forest.seed, computer, month, 1);
    let rf = RandomForest::fit(&x, width, &y, &forest_cfg)?;
    let rf_model = TrainedModel {
        kind: ModelKind::Forest,
        computer,
        scaling: scaling.clone(),
        features: setup.features.clone(),
        training_range: range,
        params: ModelParams::Forest(rf),
    };

    let mlp_model = if y.len() >= 2 {
        let mut mlp_cfg = setup.mlp.clone();
        mlp_cfg.seed = derive_seed(setup.mlp.seed, computer, month, 2);
        let net = Mlp::fit(&x, width, &y, &mlp_cfg)?;
        Some(TrainedModel {
            kind: ModelKind::Mlp,
            computer,
            scaling,
            features: setup.features.clone(),
            training_range: range,
            params: ModelParams::Mlp(net),
        })
    } else {
        None
    };

    Ok((Some(rf_model), mlp_model))
}
