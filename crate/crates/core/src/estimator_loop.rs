//! The processor side of the loop: fetch the newest frames, estimate each
//! server's busy threads, turn estimates into weights and publish them.

use crate::feature_pipeline::{feature_names, FrameReducer, NormStats, N_FEATURES};
use crate::policies::{MAX_WEIGHT, MIN_WEIGHT};
use crate::telemetry::FeatureFetcher;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub const DEFAULT_PERIOD: f64 = 0.250;
pub const BIAS_NAME: &str = "__bias__";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimatorError {
    #[error("{0}")]
    Failed(String),
    #[error("non-finite prediction {value} for dip {dip}")]
    NonFinite { dip: u32, value: f64 },
    #[error("expected {expected} features, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum ModelLoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: unknown columns: {}", names.join(", "))]
    Unknown { path: String, names: Vec<String> },
    #[error("{path}: missing columns: {}", names.join(", "))]
    Missing { path: String, names: Vec<String> },
}

/// One row handed to an estimator.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorInput<'a> {
    pub dip: u32,
    pub time: f64,
    /// `N_FEATURES` values, standardized with [`Estimator::normalization`]
    /// when the estimator provides stats.
    pub features: &'a [f64],
}

/// Predicts a server's busy threads from its latest reduced frame.
pub trait Estimator: Send {
    fn predict(&mut self, input: &EstimatorInput<'_>) -> Result<f64, EstimatorError>;

    fn describe(&self) -> String;

    /// Stats applied to raw features before `predict`. `None` passes raw
    /// features through.
    fn normalization(&self) -> Option<&NormStats> {
        None
    }
}

/// `bias + coefficients · features`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimator {
    pub bias: f64,
    pub coefficients: Vec<f64>,
    pub stats: Option<NormStats>,
}

impl LinearEstimator {
    pub fn new(bias: f64, coefficients: Vec<f64>) -> Self {
        assert_eq!(coefficients.len(), N_FEATURES);
        LinearEstimator { bias, coefficients, stats: None }
    }

    pub fn with_stats(mut self, stats: NormStats) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn eval(&self, features: &[f64]) -> f64 {
        self.bias + self.coefficients.iter().zip(features).map(|(c, x)| c * x).sum::<f64>()
    }
}

impl Estimator for LinearEstimator {
    fn predict(&mut self, input: &EstimatorInput<'_>) -> Result<f64, EstimatorError> {
        if input.features.len() != self.coefficients.len() {
            return Err(EstimatorError::Arity { expected: self.coefficients.len(), got: input.features.len() });
        }
        Ok(self.eval(input.features))
    }

    fn describe(&self) -> String {
        "linear".into()
    }

    fn normalization(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }
}

/// Reads a `name,value` coefficient file with one row per feature plus a
/// `__bias__` row. Rows may come in any order; a header row `name,value` is
/// allowed.
pub fn load_coefficients(path: impl AsRef<Path>) -> Result<LinearEstimator, ModelLoadError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| ModelLoadError::Io { path: p.clone(), source })?;
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(file);
    let mut values = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| ModelLoadError::Csv { path: p.clone(), source })?;
        let line = i + 1;
        let parse_err = |reason: String| ModelLoadError::Parse { path: p.clone(), line, reason };
        if rec.len() != 2 {
            return Err(parse_err(format!("expected name,value, got {} fields", rec.len())));
        }
        if i == 0 && &rec[0] == "name" && &rec[1] == "value" {
            continue;
        }
        let v: f64 = rec[1].parse().map_err(|_| parse_err(format!("bad value `{}`", &rec[1])))?;
        if values.insert(rec[0].to_string(), v).is_some() {
            return Err(parse_err(format!("duplicate column `{}`", &rec[0])));
        }
    }
    let names = feature_names();
    let known: BTreeSet<&str> = names.iter().map(String::as_str).chain([BIAS_NAME]).collect();
    let unknown: Vec<String> = values.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(ModelLoadError::Unknown { path: p, names: unknown });
    }
    let missing: Vec<String> = known.iter().filter(|k| !values.contains_key(**k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(ModelLoadError::Missing { path: p, names: missing });
    }
    let coefficients = names.iter().map(|n| values[n]).collect();
    Ok(LinearEstimator::new(values[BIAS_NAME], coefficients))
}

/// Ground-truth values published by the simulator for the oracle, one slot
/// per DIP. Lock-free so it never couples the two sides.
#[derive(Debug)]
pub struct GroundTruthFeed {
    slots: Box<[AtomicU64]>,
}

impl GroundTruthFeed {
    pub fn new(max_dips: usize) -> Arc<Self> {
        Arc::new(GroundTruthFeed { slots: (0..max_dips).map(|_| AtomicU64::new(f64::NAN.to_bits())).collect() })
    }

    pub fn set(&self, dip: u32, busy_threads: f64) {
        self.slots[dip as usize].store(busy_threads.to_bits(), Ordering::Release);
    }

    /// `None` until the simulator has published a value for `dip`.
    pub fn get(&self, dip: u32) -> Option<f64> {
        let v = f64::from_bits(self.slots.get(dip as usize)?.load(Ordering::Acquire));
        (!v.is_nan()).then_some(v)
    }
}

/// Passes true busy threads through; an upper bound for learned estimators.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    feed: Arc<GroundTruthFeed>,
}

impl OracleEstimator {
    pub fn new(feed: Arc<GroundTruthFeed>) -> Self {
        OracleEstimator { feed }
    }
}

impl Estimator for OracleEstimator {
    fn predict(&mut self, input: &EstimatorInput<'_>) -> Result<f64, EstimatorError> {
        self.feed.get(input.dip).ok_or_else(|| EstimatorError::Failed(format!("no ground truth for dip {}", input.dip)))
    }

    fn describe(&self) -> String {
        "oracle".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Off,
    Linear,
    Oracle,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Off => "off",
            EstimatorKind::Linear => "linear",
            EstimatorKind::Oracle => "oracle",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(EstimatorKind::Off),
            "linear" => Ok(EstimatorKind::Linear),
            "oracle" => Ok(EstimatorKind::Oracle),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

/// Maps load predictions to weights: the least loaded server gets `w_max`,
/// and each server's weight shrinks linearly with its distance from the
/// most loaded one, never below 1.
pub fn weights_from_predictions(preds: &BTreeMap<u32, f64>, w_max: u32) -> BTreeMap<u32, u32> {
    let max = preds.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: BTreeMap<u32, f64> = preds.iter().map(|(&d, &p)| (d, max - p + 1.0)).collect();
    let max_raw = raw.values().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.into_iter().map(|(d, r)| (d, ((w_max as f64 * r / max_raw).round() as u32).clamp(MIN_WEIGHT, w_max))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoOpReason {
    TooEarly,
    NoFrames,
    NoActiveBackends,
    EstimatorFailed,
    RegisterWrite,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TickOutcome {
    Applied { generation: u64, weights: BTreeMap<u32, u32> },
    NoOp(NoOpReason),
}

/// Counters kept across ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlStats {
    pub ticks: u64,
    pub applied: u64,
    pub no_frames: u64,
    pub failures: u64,
}

/// Loop state: tick schedule, per-DIP reduction state and the last prediction
/// for every DIP seen.
#[derive(Debug)]
pub struct ControlState {
    pub period: f64,
    pub last_tick: Option<f64>,
    pub w_max: u32,
    pub generation: u64,
    pub stats: ControlStats,
    fetcher: FeatureFetcher,
    reducer: FrameReducer,
    last_pred: BTreeMap<u32, f64>,
    scratch: Vec<f64>,
}

impl ControlState {
    pub fn new(fetcher: FeatureFetcher, period: f64) -> Self {
        ControlState {
            period,
            last_tick: None,
            w_max: MAX_WEIGHT,
            generation: fetcher.store().actions().generation(),
            stats: ControlStats::default(),
            fetcher,
            reducer: FrameReducer::new(),
            last_pred: BTreeMap::new(),
            scratch: Vec::with_capacity(N_FEATURES),
        }
    }

    pub fn fetcher(&self) -> &FeatureFetcher {
        &self.fetcher
    }

    pub fn last_predictions(&self) -> &BTreeMap<u32, f64> {
        &self.last_pred
    }

    /// Whether a tick at `now` is due.
    pub fn due(&self, now: f64) -> bool {
        self.last_tick.is_none_or(|t| now + 1e-9 >= t + self.period)
    }
}

/// One control decision at `now`.
///
/// Fetches frames newer than the last tick, reduces and standardizes them,
/// predicts per active DIP and applies the resulting weights. Any estimator
/// error leaves the registers untouched. Active DIPs without a fresh frame
/// reuse their previous prediction.
pub fn control_tick(state: &mut ControlState, est: &mut dyn Estimator, now: f64) -> TickOutcome {
    if !state.due(now) {
        return TickOutcome::NoOp(NoOpReason::TooEarly);
    }
    state.last_tick = Some(now);
    state.stats.ticks += 1;

    let store = Arc::clone(state.fetcher.store());
    let frames = state.fetcher.fetch_latest(now);
    if frames.is_empty() {
        state.stats.no_frames += 1;
        return TickOutcome::NoOp(NoOpReason::NoFrames);
    }

    let mut fresh = BTreeMap::new();
    for (dip, frame) in &frames {
        let reduced = state.reducer.reduce(store.vip(), *dip, frame);
        state.scratch.clear();
        state.scratch.extend_from_slice(&reduced.features);
        if let Some(stats) = est.normalization() {
            stats.apply(&mut state.scratch);
        }
        let input = EstimatorInput { dip: *dip, time: now, features: &state.scratch };
        match est.predict(&input) {
            Ok(p) if p.is_finite() => {
                fresh.insert(*dip, p);
            }
            Ok(value) => return fail(state, est, EstimatorError::NonFinite { dip: *dip, value }),
            Err(e) => return fail(state, est, e),
        }
    }
    state.last_pred.extend(fresh);

    let active = store.active_dips();
    let preds: BTreeMap<u32, f64> = active.iter().filter_map(|d| state.last_pred.get(d).map(|&p| (*d, p))).collect();
    if preds.is_empty() {
        return TickOutcome::NoOp(NoOpReason::NoActiveBackends);
    }
    let weights = weights_from_predictions(&preds, state.w_max);
    match store.actions().apply_weights(&weights, now) {
        Ok(generation) => {
            state.generation = generation;
            state.stats.applied += 1;
            TickOutcome::Applied { generation, weights }
        }
        Err(e) => {
            log::error!("weight update rejected: {e}");
            state.stats.failures += 1;
            TickOutcome::NoOp(NoOpReason::RegisterWrite)
        }
    }
}

fn fail(state: &mut ControlState, est: &dyn Estimator, e: EstimatorError) -> TickOutcome {
    state.stats.failures += 1;
    log::warn!("estimator {} failed, keeping weights: {e}", est.describe());
    TickOutcome::NoOp(NoOpReason::EstimatorFailed)
}
