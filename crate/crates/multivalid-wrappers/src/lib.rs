//! Black-box residual wrapping and online-to-batch conversion.
//!
//! Two ways to reuse the online predictors outside their native setting.
//! [`ResidualWrapper`] turns an arbitrary point predictor f into a
//! prediction-interval predictor: each round it runs the interval machinery
//! on the centered residual y′ = ½ + ½·(y − f(x)) ∈ [0, 1] and maps the
//! produced interval back to the prediction scale, so every multivalidity
//! guarantee of the inner predictor transfers verbatim to the residual
//! stream. [`BatchModel`] freezes one online run over a training set; a
//! batch prediction draws t uniformly from the T recorded rounds, rebuilds
//! the state the online learner had entering round t, and samples from it,
//! which makes the uniform mixture (1/T)·Σₜ hₜ available as a randomized
//! batch predictor whose calibration error inherits the online bound.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use multivalid_core::{
    BucketGrid, CoreError, Example, GridPoint, GroupId, GroupSystem, Prediction, RoundRecord,
    StateDelta,
};
use multivalid_interval::{IntervalError, IntervalPrediction, IntervalState};
use multivalid_mean::{MeanError, MeanState};
use multivalid_moment::{MomentError, MomentState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WrapperError {
    #[error("point prediction {value} is outside [0, 1]")]
    PointPredictionOutOfRange { value: f64 },
    #[error("widening parameter {value} must be finite and nonnegative")]
    InvalidWidening { value: f64 },
    #[error("solver tolerance {value} must be positive and finite")]
    InvalidTolerance { value: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset row {row} carries no label")]
    MissingLabel { row: usize },
    #[error("dataset row {row} label {value} is outside [0, 1]")]
    LabelOutOfRange { row: usize, value: f64 },
    #[error("model container rejected: {reason}")]
    ModelFormat { reason: String },
    #[error("model serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Mean(#[from] MeanError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

/// Maps a label onto the residual scale: ½ + ½·(y − fx). With y, fx ∈ [0, 1]
/// the result lies in [0, 1]; zero residual maps to ½.
pub fn center_residual(y: f64, fx: f64) -> f64 {
    assert!((0.0..=1.0).contains(&y), "label outside [0, 1]");
    assert!((0.0..=1.0).contains(&fx), "point prediction outside [0, 1]");
    0.5 + 0.5 * (y - fx)
}

/// Maps a residual-scale interval back to the prediction scale and widens it
/// by `epsilon`: (fx + 2ℓ − 1 − ε, fx + 2u − 1 + ε). At ε = 0 the label lies
/// in the output exactly when its centered residual lies in [ℓ, u) (closed
/// at u = 1); endpoints may leave [0, 1], which `cover` accepts.
pub fn decenter_interval(interval: (f64, f64), fx: f64, epsilon: f64) -> (f64, f64) {
    let (lower, upper) = interval;
    assert!(lower <= upper, "interval endpoints out of order");
    assert!(epsilon >= 0.0, "widening must be nonnegative");
    (fx + 2.0 * lower - 1.0 - epsilon, fx + 2.0 * upper - 1.0 + epsilon)
}

/// One wrapped round's output: the inner prediction on the residual scale
/// and the decentered, ε-widened interval on the prediction scale.
#[derive(Clone, Debug)]
pub struct WrappedPrediction {
    pub residual: IntervalPrediction,
    pub interval: (f64, f64),
}

/// Interval predictor for the residuals of an arbitrary point predictor.
/// The caller supplies f(x) each round; the wrapper never inspects f itself,
/// so any black-box model qualifies.
#[derive(Clone, Debug)]
pub struct ResidualWrapper {
    inner: IntervalState,
    epsilon: f64,
}

impl ResidualWrapper {
    pub fn new(inner: IntervalState, epsilon: f64) -> Result<Self, WrapperError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(WrapperError::InvalidWidening { value: epsilon });
        }
        Ok(Self { inner, epsilon })
    }

    pub fn inner(&self) -> &IntervalState {
        &self.inner
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Predicts an interval for the round's residual and returns it both on
    /// the residual scale and decentered around `fx`.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Example,
        fx: f64,
        rng: &mut R,
        lp_epsilon: f64,
    ) -> Result<WrappedPrediction, WrapperError> {
        check_point_prediction(fx)?;
        let residual = self.inner.predict(x, rng, lp_epsilon);
        let interval = decenter_interval(
            (residual.lower.value(), residual.upper.value()),
            fx,
            self.epsilon,
        );
        Ok(WrappedPrediction { residual, interval })
    }

    /// Records the revealed label by feeding its centered residual to the
    /// inner predictor. `residual_interval` is the residual-scale interval
    /// the round published.
    pub fn update(
        &mut self,
        x: &Example,
        residual_interval: (GridPoint, GridPoint),
        y: f64,
        fx: f64,
    ) -> Result<Vec<StateDelta>, WrapperError> {
        check_point_prediction(fx)?;
        if !(0.0..=1.0).contains(&y) || y.is_nan() {
            return Err(WrapperError::Core(CoreError::LabelOutOfRange { value: y }));
        }
        let y_prime = center_residual(y, fx);
        Ok(self.inner.update(x, residual_interval, y_prime)?)
    }
}

fn check_point_prediction(fx: f64) -> Result<(), WrapperError> {
    if !(0.0..=1.0).contains(&fx) || fx.is_nan() {
        return Err(WrapperError::PointPredictionOutOfRange { value: fx });
    }
    Ok(())
}

/// Hyperparameters of a frozen online run, one variant per predictor kind.
/// `lp_epsilon` is the per-round game tolerance where the kind solves one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchConfig {
    Mean {
        groups: u32,
        max_membership: u32,
        n: u32,
        r: u32,
        eta: f64,
    },
    Moment {
        groups: u32,
        max_membership: u32,
        n: u32,
        n_prime: u32,
        r: u32,
        k: u32,
        eta: f64,
        lp_epsilon: f64,
    },
    Interval {
        groups: u32,
        max_membership: u32,
        n: u32,
        r: u32,
        delta: f64,
        rho: f64,
        eta: f64,
        lp_epsilon: f64,
    },
}

impl BatchConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BatchConfig::Mean { .. } => "mean",
            BatchConfig::Moment { .. } => "moment",
            BatchConfig::Interval { .. } => "interval",
        }
    }

    pub fn group_count(&self) -> u32 {
        match *self {
            BatchConfig::Mean { groups, .. }
            | BatchConfig::Moment { groups, .. }
            | BatchConfig::Interval { groups, .. } => groups,
        }
    }
}

/// Live predictor state of whichever kind the config names, carrying the
/// solver tolerance where one applies.
enum LiveState {
    Mean(MeanState),
    Moment(MomentState, f64),
    Interval(IntervalState, f64),
}

impl LiveState {
    fn fresh(config: &BatchConfig) -> Result<Self, WrapperError> {
        match *config {
            BatchConfig::Mean { groups, max_membership, n, r, eta } => {
                let system = GroupSystem::new(groups, max_membership)?;
                let grid = BucketGrid::new(n, r)?;
                Ok(LiveState::Mean(MeanState::new(system, grid, eta)?))
            }
            BatchConfig::Moment {
                groups,
                max_membership,
                n,
                n_prime,
                r,
                k,
                eta,
                lp_epsilon,
            } => {
                check_tolerance(lp_epsilon)?;
                let system = GroupSystem::new(groups, max_membership)?;
                let grid = BucketGrid::with_moment_buckets(n, n_prime, r)?;
                Ok(LiveState::Moment(MomentState::new(system, grid, k, eta)?, lp_epsilon))
            }
            BatchConfig::Interval {
                groups,
                max_membership,
                n,
                r,
                delta,
                rho,
                eta,
                lp_epsilon,
            } => {
                check_tolerance(lp_epsilon)?;
                let system = GroupSystem::new(groups, max_membership)?;
                let grid = BucketGrid::new(n, r)?;
                Ok(LiveState::Interval(
                    IntervalState::new(system, grid, delta, rho, eta)?,
                    lp_epsilon,
                ))
            }
        }
    }

    /// One live round: publish a prediction, record the label, return both
    /// the published form and the state increments it induced.
    fn round<R: Rng + ?Sized>(
        &mut self,
        x: &Example,
        y: f64,
        rng: &mut R,
    ) -> Result<(Prediction, Vec<StateDelta>), WrapperError> {
        match self {
            LiveState::Mean(state) => {
                let point = state.predict(x, rng);
                let deltas = state.update(x, point, y)?;
                Ok((Prediction::Mean { value: point.value() }, deltas))
            }
            LiveState::Moment(state, lp_epsilon) => {
                let pred = state.predict(x, rng, *lp_epsilon);
                let deltas = state.update(x, (pred.mean, pred.moment), y)?;
                Ok((
                    Prediction::Moment {
                        mean: pred.mean.value(),
                        moment: pred.moment.value(),
                    },
                    deltas,
                ))
            }
            LiveState::Interval(state, lp_epsilon) => {
                let pred = state.predict(x, rng, *lp_epsilon);
                let deltas = state.update(x, (pred.lower, pred.upper), y)?;
                Ok((
                    Prediction::Interval {
                        lower: pred.lower.value(),
                        upper: pred.upper.value(),
                    },
                    deltas,
                ))
            }
        }
    }

    fn apply(&mut self, deltas: &[StateDelta]) {
        match self {
            LiveState::Mean(state) => state.apply_deltas(deltas),
            LiveState::Moment(state, _) => state.apply_deltas(deltas),
            LiveState::Interval(state, _) => state.apply_deltas(deltas),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, x: &Example, rng: &mut R) -> BatchOutput {
        match self {
            LiveState::Mean(state) => BatchOutput::Mean(state.predict(x, rng)),
            LiveState::Moment(state, lp_epsilon) => {
                let pred = state.predict(x, rng, *lp_epsilon);
                BatchOutput::Moment {
                    mean: pred.mean,
                    moment: pred.moment,
                    converged: pred.converged,
                }
            }
            LiveState::Interval(state, lp_epsilon) => {
                let pred = state.predict(x, rng, *lp_epsilon);
                BatchOutput::Interval {
                    lower: pred.lower,
                    upper: pred.upper,
                    converged: pred.converged,
                }
            }
        }
    }
}

fn check_tolerance(value: f64) -> Result<(), WrapperError> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(WrapperError::InvalidTolerance { value });
    }
    Ok(())
}

/// A sampled prediction of whichever kind the model holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchOutput {
    Mean(GridPoint),
    Moment { mean: GridPoint, moment: GridPoint, converged: bool },
    Interval { lower: GridPoint, upper: GridPoint, converged: bool },
}

/// One batch prediction: the number of training rounds whose state the draw
/// replayed (t − 1 for a uniform t ∈ [T]) and the sampled output.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDraw {
    pub prefix_rounds: usize,
    pub output: BatchOutput,
}

/// A frozen online run: hyperparameters, the training seed, and every
/// round's record with its state increments materialized. Immutable after
/// training; predictions only read it, so independent rng streams may query
/// one model concurrently.
#[derive(Clone, Debug)]
pub struct BatchModel {
    config: BatchConfig,
    seed: u64,
    records: Vec<RoundRecord>,
}

/// Serialized model layout. Round records drop their delta caches on
/// serialization; loading recomputes them from predictions and labels, which
/// is bit-exact because float parsing is correctly rounded.
#[derive(Serialize, Deserialize)]
struct ModelContainer {
    version: u32,
    config: BatchConfig,
    seed: u64,
    rounds: Vec<RoundRecord>,
}

const MODEL_VERSION: u32 = 1;

/// Runs the configured online predictor once over `dataset` in order,
/// deterministically in `seed`, and freezes the transcript. Every row must
/// carry a label in [0, 1]; the first offending row aborts training.
pub fn batch_train(
    dataset: &[Example],
    config: &BatchConfig,
    seed: u64,
) -> Result<BatchModel, WrapperError> {
    if dataset.is_empty() {
        return Err(WrapperError::EmptyDataset);
    }
    let mut state = LiveState::fresh(config)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(dataset.len());
    for (row, x) in dataset.iter().enumerate() {
        let y = x.label().ok_or(WrapperError::MissingLabel { row })?;
        if !(0.0..=1.0).contains(&y) || y.is_nan() {
            return Err(WrapperError::LabelOutOfRange { row, value: y });
        }
        let (prediction, deltas) = state.round(x, y, &mut rng)?;
        records.push(RoundRecord {
            round: row as u64,
            group_ids: x.group_ids().to_vec(),
            prediction,
            label: y,
            deltas,
        });
    }
    Ok(BatchModel { config: config.clone(), seed, records })
}

/// Rebuilds the state increments a stored round induced, or explains why the
/// record cannot belong to this model kind.
fn rebuild_deltas(config: &BatchConfig, record: &RoundRecord) -> Result<Vec<StateDelta>, String> {
    match (config, &record.prediction) {
        (BatchConfig::Mean { n, .. }, Prediction::Mean { value }) => {
            multivalid_mean::round_deltas(*n, &record.group_ids, *value, record.label)
                .map_err(|e| e.to_string())
        }
        (BatchConfig::Moment { n, n_prime, k, .. }, Prediction::Moment { mean, moment }) => {
            multivalid_moment::round_deltas(
                *n,
                *n_prime,
                *k,
                &record.group_ids,
                *mean,
                *moment,
                record.label,
            )
            .map_err(|e| e.to_string())
        }
        (BatchConfig::Interval { n, delta, .. }, Prediction::Interval { lower, upper }) => {
            multivalid_interval::round_deltas(
                *n,
                *delta,
                &record.group_ids,
                *lower,
                *upper,
                record.label,
            )
            .map_err(|e| e.to_string())
        }
        _ => Err("prediction kind does not match the model kind".to_string()),
    }
}

/// Upper bound on in-flight (prefix, point, seed) jobs per reconstruction
/// sweep; larger batches are served in chunks to keep memory flat.
const SWEEP_JOB_LIMIT: usize = 1 << 20;

impl BatchModel {
    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of training rounds T.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Draws t uniformly from the T training rounds, rebuilds the state the
    /// online learner had entering round t from the recorded increments of
    /// the groups in 𝒢(x) only, and samples that state's prediction.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Example,
        rng: &mut R,
    ) -> Result<BatchDraw, WrapperError> {
        let prefix = rng.random_range(0..self.records.len());
        let mut state = LiveState::fresh(&self.config)?;
        let kept: Vec<StateDelta> = self.records[..prefix]
            .iter()
            .flat_map(|record| record.deltas.iter())
            .filter(|d| x.group_ids().binary_search(&d.group).is_ok())
            .copied()
            .collect();
        if !kept.is_empty() {
            state.apply(&kept);
        }
        Ok(BatchDraw { prefix_rounds: prefix, output: state.sample(x, rng) })
    }

    /// Serves `draws` independent batch predictions for every example,
    /// calling `visit(point_index, output)` once per draw in unspecified
    /// order. Distributionally identical to repeated [`BatchModel::predict`]
    /// calls but reconstructs each distinct group signature's states in one
    /// chronological sweep instead of once per draw. Deterministic in the
    /// rng seed; each draw samples from its own child stream.
    pub fn for_each_draw<R, F>(
        &self,
        xs: &[Example],
        draws: usize,
        rng: &mut R,
        mut visit: F,
    ) -> Result<(), WrapperError>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, BatchOutput),
    {
        if draws == 0 || xs.is_empty() {
            return Ok(());
        }
        let mut by_signature: BTreeMap<Vec<GroupId>, Vec<usize>> = BTreeMap::new();
        for (idx, x) in xs.iter().enumerate() {
            by_signature.entry(x.group_ids().to_vec()).or_default().push(idx);
        }
        let points_per_chunk = (SWEEP_JOB_LIMIT / draws).max(1);
        for (signature, points) in &by_signature {
            for chunk in points.chunks(points_per_chunk) {
                let mut jobs: Vec<(usize, usize, u64)> = Vec::with_capacity(chunk.len() * draws);
                for &point in chunk {
                    for _ in 0..draws {
                        let prefix = rng.random_range(0..self.records.len());
                        jobs.push((prefix, point, rng.random()));
                    }
                }
                jobs.sort_by_key(|&(prefix, _, _)| prefix);

                let mut state = LiveState::fresh(&self.config)?;
                let mut cursor = 0usize;
                for &(prefix, point, child_seed) in &jobs {
                    while cursor < prefix {
                        let kept: Vec<StateDelta> = self.records[cursor]
                            .deltas
                            .iter()
                            .filter(|d| signature.binary_search(&d.group).is_ok())
                            .copied()
                            .collect();
                        if !kept.is_empty() {
                            state.apply(&kept);
                        }
                        cursor += 1;
                    }
                    let mut child = ChaCha12Rng::seed_from_u64(child_seed);
                    visit(point, state.sample(&xs[point], &mut child));
                }
            }
        }
        Ok(())
    }

    /// [`BatchModel::for_each_draw`] with the outputs collected per example.
    pub fn predict_many<R: Rng + ?Sized>(
        &self,
        xs: &[Example],
        draws: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<BatchOutput>>, WrapperError> {
        let mut out: Vec<Vec<BatchOutput>> = vec![Vec::with_capacity(draws); xs.len()];
        self.for_each_draw(xs, draws, rng, |point, output| out[point].push(output))?;
        Ok(out)
    }

    /// Writes the versioned JSON container: hyperparameters, seed, rounds.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), WrapperError> {
        let container = ModelContainer {
            version: MODEL_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            rounds: self.records.clone(),
        };
        Ok(serde_json::to_writer(writer, &container)?)
    }

    /// Loads a container, validates it, and recomputes every round's state
    /// increments; the recomputation is bit-exact with the trained model's.
    pub fn read_json<R: Read>(reader: R) -> Result<Self, WrapperError> {
        let container: ModelContainer = serde_json::from_reader(reader)?;
        if container.version != MODEL_VERSION {
            return Err(WrapperError::ModelFormat {
                reason: format!(
                    "unsupported version {} (expected {MODEL_VERSION})",
                    container.version
                ),
            });
        }
        if container.rounds.is_empty() {
            return Err(WrapperError::ModelFormat { reason: "no rounds".to_string() });
        }
        // Also validates the hyperparameters themselves.
        LiveState::fresh(&container.config)?;
        let group_count = container.config.group_count();
        let mut records = container.rounds;
        for (idx, record) in records.iter_mut().enumerate() {
            if record.round != idx as u64 {
                return Err(WrapperError::ModelFormat {
                    reason: format!("round {idx}: stored index {}", record.round),
                });
            }
            if let Some(&g) = record.group_ids.iter().find(|&&g| g >= group_count) {
                return Err(WrapperError::ModelFormat {
                    reason: format!("round {idx}: group id {g} outside the {group_count} groups"),
                });
            }
            record.deltas = rebuild_deltas(&container.config, record)
                .map_err(|reason| WrapperError::ModelFormat {
                    reason: format!("round {idx}: {reason}"),
                })?;
        }
        Ok(Self { config: container.config, seed: container.seed, records })
    }
}
