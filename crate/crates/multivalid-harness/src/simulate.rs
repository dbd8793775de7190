//! Seeded round-protocol simulations.
//!
//! Each round runs the protocol in order: the stream rng draws the example's
//! group memberships, the learner publishes its mixed strategy over
//! predictions, the adversary commits a label distribution as a pure
//! function of public data, the label is drawn, and only then does the
//! learner's realized prediction matter for the update. Moment and interval
//! predictors sample their realized prediction inside the same call that
//! solves for the published distribution; the adversary never receives the
//! sample, so the commitment ordering holds by interface shape (see the
//! adversary module).
//!
//! Randomness is split into three independently seeded streams (stream,
//! learner, adversary), so changing the learner seed cannot move the
//! membership sequence or the adversary's draws.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use multivalid_core::{
    cover, BucketGrid, Example, GridPoint, GroupId, GroupSystem, Prediction, RoundRecord,
    StateDelta, Transcript,
};
use multivalid_interval::{perturb_label, widen_interval, IntervalState, PerturbationConfig};
use multivalid_mean::{EtaMode, MeanState};
use multivalid_moment::{reduced_grid, MomentState};

use crate::adversary::{Adversary, AdversaryConfig, LearnerView, PublishedStrategy};
use crate::report::{
    interval_default_eta, moment_default_eta, multivalidity_report, MultivalidityReport,
    ReportKind,
};
use crate::HarnessError;

/// How an interval simulation obtains the smoothness its guarantee needs:
/// either the configured adversary is trusted to be (ρ, rn)-smooth already,
/// or labels are perturbed on the way in (ρ = 1/√T, r = ⌈√T/(2nε)⌉) and the
/// transcript lives on the perturbed scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Smoothing {
    AssumeSmooth { r: u32, rho: f64 },
    Perturb { epsilon: f64 },
}

/// Which predictor drives the simulation, with its hyperparameters. An
/// absent η falls back to the rate the matching theorem bound assumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    Mean { n: u32, r: u32, eta: Option<f64> },
    Moment { n: u32, n_prime: u32, r: u32, k: u32, eta: Option<f64>, lp_epsilon: f64 },
    Interval { n: u32, delta: f64, smoothing: Smoothing, eta: Option<f64>, lp_epsilon: f64 },
}

/// A full simulation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub t: u64,
    pub group_count: u32,
    /// Each example joins each group independently with this probability.
    pub membership_rate: f64,
    pub predictor: PredictorSpec,
    pub adversary: AdversaryConfig,
    pub lambda: f64,
    pub learner_seed: u64,
    pub stream_seed: u64,
}

/// A finished simulation: the transcript, its audit, and (perturbation mode
/// only) how often the ε-widened intervals covered the TRUE labels.
#[derive(Clone, Debug)]
pub struct SimulationOutcome {
    pub transcript: Transcript,
    pub report: MultivalidityReport,
    pub widened_coverage: Option<(u64, u64)>,
}

enum Learner {
    Mean(MeanState),
    Moment { state: MomentState, lp_epsilon: f64, strategies: Vec<(GridPoint, GridPoint)> },
    Interval { state: IntervalState, lp_epsilon: f64 },
}

enum Realized {
    Mean(GridPoint),
    Pair(GridPoint, GridPoint),
}

impl Learner {
    /// Publishes the round's mixed strategy and samples the realized
    /// prediction from it with the learner rng.
    fn play(&self, x: &Example, rng: &mut ChaCha12Rng) -> (PublishedStrategy, Realized) {
        match self {
            Learner::Mean(state) => {
                let published = state
                    .predict_distribution(x)
                    .into_iter()
                    .map(|(gp, w)| (Prediction::Mean { value: gp.value() }, w))
                    .collect();
                (published, Realized::Mean(state.predict(x, rng)))
            }
            Learner::Moment { state, lp_epsilon, strategies } => {
                let pred = state.predict(x, rng, *lp_epsilon);
                let published = pred
                    .distribution
                    .iter()
                    .map(|&(idx, w)| {
                        let (mu, m) = strategies[idx];
                        (Prediction::Moment { mean: mu.value(), moment: m.value() }, w)
                    })
                    .collect();
                (published, Realized::Pair(pred.mean, pred.moment))
            }
            Learner::Interval { state, lp_epsilon } => {
                let pred = state.predict(x, rng, *lp_epsilon);
                let rn = state.grid().denominator();
                let published = pred
                    .distribution
                    .iter()
                    .map(|&(idx, w)| {
                        let (a_l, a_u) = multivalid_interval::interval_endpoints(idx, rn);
                        (
                            Prediction::Interval {
                                lower: state.grid().point(a_l).value(),
                                upper: state.grid().point(a_u).value(),
                            },
                            w,
                        )
                    })
                    .collect();
                (published, Realized::Pair(pred.lower, pred.upper))
            }
        }
    }

    fn update(
        &mut self,
        x: &Example,
        realized: &Realized,
        y: f64,
    ) -> Result<(Prediction, Vec<StateDelta>), HarnessError> {
        Ok(match (self, realized) {
            (Learner::Mean(state), Realized::Mean(gp)) => {
                let deltas = state.update(x, *gp, y)?;
                (Prediction::Mean { value: gp.value() }, deltas)
            }
            (Learner::Moment { state, .. }, Realized::Pair(a, b)) => {
                let deltas = state.update(x, (*a, *b), y)?;
                (Prediction::Moment { mean: a.value(), moment: b.value() }, deltas)
            }
            (Learner::Interval { state, .. }, Realized::Pair(a, b)) => {
                let deltas = state.update(x, (*a, *b), y)?;
                (Prediction::Interval { lower: a.value(), upper: b.value() }, deltas)
            }
            _ => unreachable!("realized prediction always matches the learner kind"),
        })
    }
}

fn check_unit_rate(field: &'static str, value: f64) -> Result<(), HarnessError> {
    if (0.0..=1.0).contains(&value) && !value.is_nan() {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig { field, reason: format!("{value} is not in [0, 1]") })
    }
}

/// Runs one fully seeded simulation and audits its transcript.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationOutcome, HarnessError> {
    check_unit_rate("membership_rate", config.membership_rate)?;
    if !(config.lambda > 0.0 && config.lambda < 1.0) {
        return Err(HarnessError::InvalidConfig {
            field: "lambda",
            reason: format!("{} is not in (0, 1)", config.lambda),
        });
    }
    let groups = GroupSystem::new(config.group_count, config.group_count)?;
    let g = config.group_count;
    let t = config.t;

    // Resolve grid, report kind, and perturbation schedule.
    let (grid, kind, perturb) = match config.predictor {
        PredictorSpec::Mean { n, r, .. } => (BucketGrid::new(n, r)?, ReportKind::Mean, None),
        PredictorSpec::Moment { n, n_prime, r, k, lp_epsilon, .. } => (
            BucketGrid::with_moment_buckets(n, n_prime, r)?,
            ReportKind::Moment { k, lp_epsilon },
            None,
        ),
        PredictorSpec::Interval { n, delta, smoothing, lp_epsilon, .. } => {
            let (r, rho, perturb) = match smoothing {
                Smoothing::AssumeSmooth { r, rho } => (r, rho, None),
                Smoothing::Perturb { epsilon } => {
                    if t == 0 {
                        // Nothing runs; any admissible placeholder schedule
                        // produces the same empty report (bound = ∞).
                        (1, f64::INFINITY, None)
                    } else {
                        let p = PerturbationConfig::new(epsilon, t, n)?;
                        (p.r(), p.rho(), Some(p))
                    }
                }
            };
            (BucketGrid::new(n, r)?, ReportKind::Interval { delta, rho, lp_epsilon }, perturb)
        }
    };

    let mut transcript = Transcript::new();
    let mut widened: Option<(u64, u64)> = perturb.map(|_| (0, 0));

    if t > 0 {
        // An absent η falls back to the rate the matching theorem assumes;
        // λ enters the bound, not the rate.
        let eta = match config.predictor {
            PredictorSpec::Mean { n, eta, .. } => match eta {
                Some(v) => v,
                None => multivalid_mean::default_eta(
                    t,
                    &groups,
                    n,
                    EtaMode::FiniteGroups,
                    config.lambda,
                )?,
            },
            PredictorSpec::Moment { n, n_prime, eta, lp_epsilon, .. } => {
                eta.unwrap_or_else(|| moment_default_eta(t, g, n, n_prime, lp_epsilon))
            }
            PredictorSpec::Interval { n, eta, lp_epsilon, .. } => {
                eta.unwrap_or_else(|| interval_default_eta(t, g, n, lp_epsilon))
            }
        };

        let mut learner = match config.predictor {
            PredictorSpec::Mean { .. } => {
                Learner::Mean(MeanState::new(groups.clone(), grid, eta)?)
            }
            PredictorSpec::Moment { n, n_prime, k, lp_epsilon, .. } => Learner::Moment {
                state: MomentState::new(groups.clone(), grid, k, eta)?,
                lp_epsilon,
                strategies: reduced_grid(grid.r(), n, n_prime),
            },
            PredictorSpec::Interval { delta, lp_epsilon, .. } => Learner::Interval {
                state: IntervalState::new(
                    groups.clone(),
                    grid,
                    delta,
                    match kind {
                        ReportKind::Interval { rho, .. } => rho,
                        _ => unreachable!(),
                    },
                    eta,
                )?,
                lp_epsilon,
            },
        };

        let view = match config.predictor {
            PredictorSpec::Mean { n, .. } => LearnerView::Mean { n },
            PredictorSpec::Moment { n, n_prime, k, .. } => {
                LearnerView::Moment { n, n_prime, k }
            }
            PredictorSpec::Interval { n, delta, .. } => LearnerView::Interval { n, delta },
        };
        let mut adversary = Adversary::new(config.adversary.clone(), view, eta, g)?;

        use rand::SeedableRng;
        let mut learner_rng = ChaCha12Rng::seed_from_u64(config.learner_seed);
        let mut stream_rng = ChaCha12Rng::seed_from_u64(config.stream_seed);

        for round in 0..t {
            let ids: Vec<GroupId> =
                (0..g).filter(|_| stream_rng.random_bool(config.membership_rate)).collect();
            let x = Example::new(&groups, ids.clone(), None)?;

            let (published, realized) = learner.play(&x, &mut learner_rng);
            let law = adversary.commit(round, x.group_ids(), &published);
            let y_true = adversary.draw(law);

            // Perturbation mode trains and reports on the rescaled label.
            let y_train = match &perturb {
                Some(p) => perturb_label(y_true, p, &mut learner_rng),
                None => y_true,
            };
            if let (Some(p), Some(counts), Realized::Pair(l, u)) =
                (&perturb, widened.as_mut(), &realized)
            {
                let (wl, wu) = widen_interval((l.value(), u.value()), p.epsilon());
                counts.1 += 1;
                counts.0 += u64::from(cover(wl, wu, y_true));
            }

            let (prediction, deltas) = learner.update(&x, &realized, y_train)?;
            let record =
                RoundRecord { round, group_ids: ids, prediction, label: y_train, deltas };
            adversary.observe(&record)?;
            transcript.push(record);
        }
    }

    let report = multivalidity_report(&transcript, &groups, &grid, kind, config.lambda)?;
    Ok(SimulationOutcome { transcript, report, widened_coverage: widened })
}
