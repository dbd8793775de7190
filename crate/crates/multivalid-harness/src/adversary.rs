//! Label adversaries for simulations.
//!
//! The round protocol lets the adversary pick the label distribution AFTER
//! seeing the learner's published mixed strategy for the round but BEFORE
//! the realized prediction is sampled. That contract is enforced by shape:
//! [`Adversary::commit`] takes `&self` plus public data only (the round
//! index, the example's groups, and the published strategy), so the label
//! law is a deterministic function of those inputs, reproducible after the
//! fact from the transcript.
//!
//! Three families:
//!   iid      per-group stationary laws, averaged over the example's groups
//!   shift    same, but switching to a second law set at a fixed round
//!   adaptive picks y ∈ {0, 1} maximizing the learner's expected surrogate
//!            increase against the published strategy, tracking the
//!            learner's error tables from the public transcript

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use multivalid_core::{CellKey, GroupId, Prediction, RoundRecord, SignedLog, StateDelta};

use crate::HarnessError;

/// A per-group stationary label law: `Bernoulli(rate)` when `spread` is 0,
/// otherwise uniform on [rate − spread/2, rate + spread/2]. Mean `rate`,
/// variance `spread²/12`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLaw {
    pub rate: f64,
    pub spread: f64,
}

impl GroupLaw {
    pub fn bernoulli(rate: f64) -> Self {
        Self { rate, spread: 0.0 }
    }

    fn validate(&self, field: &'static str) -> Result<(), HarnessError> {
        let reject = |reason: String| Err(HarnessError::InvalidConfig { field, reason });
        if !(0.0..=1.0).contains(&self.rate) || self.rate.is_nan() {
            return reject(format!("rate {} is outside [0, 1]", self.rate));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return reject(format!("spread {} is negative or non-finite", self.spread));
        }
        let half = self.spread / 2.0;
        if self.rate - half < 0.0 || self.rate + half > 1.0 {
            return reject(format!(
                "window [{}, {}] leaves [0, 1]",
                self.rate - half,
                self.rate + half
            ));
        }
        Ok(())
    }
}

/// Adversary family selector plus family-specific data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryKind {
    Iid,
    Shift { shifted_laws: Vec<GroupLaw>, shift_round: u64 },
    Adaptive,
}

/// Full adversary configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    /// Indexed by group id; may be empty for the adaptive kind, which
    /// ignores laws entirely.
    pub laws: Vec<GroupLaw>,
    pub seed: u64,
}

impl AdversaryConfig {
    pub fn iid(laws: Vec<GroupLaw>, seed: u64) -> Self {
        Self { kind: AdversaryKind::Iid, laws, seed }
    }

    pub fn adaptive(seed: u64) -> Self {
        Self { kind: AdversaryKind::Adaptive, laws: Vec::new(), seed }
    }

    fn validate(&self, group_count: u32) -> Result<(), HarnessError> {
        let check_set = |laws: &[GroupLaw], field: &'static str| -> Result<(), HarnessError> {
            if laws.len() != group_count as usize {
                return Err(HarnessError::InvalidConfig {
                    field,
                    reason: format!("{} laws given for {} groups", laws.len(), group_count),
                });
            }
            laws.iter().try_for_each(|l| l.validate(field))
        };
        match &self.kind {
            AdversaryKind::Iid => check_set(&self.laws, "laws"),
            AdversaryKind::Shift { shifted_laws, .. } => {
                check_set(&self.laws, "laws")?;
                check_set(shifted_laws, "shifted_laws")
            }
            AdversaryKind::Adaptive => Ok(()),
        }
    }
}

/// What the learner publishes in one round, as the adversary sees it: the
/// support of its mixed strategy with sampling weights. Values are the
/// concrete prediction coordinates, so the adversary can reconstruct per-cell
/// error-table increments without any private learner state.
pub type PublishedStrategy = Vec<(Prediction, f64)>;

/// A committed label distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelLaw {
    Bernoulli { p: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// The learner's table geometry, as needed to mirror its updates from public
/// transcript records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LearnerView {
    Mean { n: u32 },
    Moment { n: u32, n_prime: u32, k: u32 },
    Interval { n: u32, delta: f64 },
}

#[derive(Clone, Copy, Debug, Default)]
struct MirrorCell {
    v: f64,
    m: f64,
}

/// A seeded adversary instance. `commit` is pure; `draw` consumes the
/// adversary's own rng; `observe` folds a finished public round into the
/// adaptive kind's mirror of the learner's error tables.
#[derive(Clone, Debug)]
pub struct Adversary {
    config: AdversaryConfig,
    view: LearnerView,
    eta: f64,
    rng: ChaCha12Rng,
    mirror: BTreeMap<(GroupId, CellKey), MirrorCell>,
}

impl Adversary {
    pub fn new(
        config: AdversaryConfig,
        view: LearnerView,
        eta: f64,
        group_count: u32,
    ) -> Result<Self, HarnessError> {
        config.validate(group_count)?;
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(HarnessError::InvalidConfig {
                field: "eta",
                reason: format!("{eta} is not positive and finite"),
            });
        }
        use rand::SeedableRng;
        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        Ok(Self { config, view, eta, rng, mirror: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdversaryConfig {
        &self.config
    }

    /// Commits the round's label distribution. Pure: a deterministic
    /// function of the public transcript (via the mirror), the round index,
    /// the example's groups, and the published strategy.
    pub fn commit(
        &self,
        round: u64,
        group_ids: &[GroupId],
        published: &PublishedStrategy,
    ) -> LabelLaw {
        match &self.config.kind {
            AdversaryKind::Iid => blended_law(&self.config.laws, group_ids),
            AdversaryKind::Shift { shifted_laws, shift_round } => {
                let active = if round >= *shift_round { shifted_laws } else { &self.config.laws };
                blended_law(active, group_ids)
            }
            AdversaryKind::Adaptive => {
                let gain0 = self.surrogate_gain(group_ids, published, 0.0);
                let gain1 = self.surrogate_gain(group_ids, published, 1.0);
                // Ties break toward 1 so the choice is deterministic.
                let p = if gain1.cmp_value(&gain0).is_ge() { 1.0 } else { 0.0 };
                LabelLaw::Bernoulli { p }
            }
        }
    }

    /// Draws a label from a committed law using the adversary's private rng.
    pub fn draw(&mut self, law: LabelLaw) -> f64 {
        match law {
            LabelLaw::Bernoulli { p } => {
                if self.rng.random_bool(p) {
                    1.0
                } else {
                    0.0
                }
            }
            LabelLaw::Uniform { lo, hi } => self.rng.random_range(lo..hi),
        }
    }

    /// Folds one finished round (now public) into the mirror tables. The
    /// increments are recomputed from the recorded prediction and label, the
    /// same way the learner computes its own.
    pub fn observe(&mut self, record: &RoundRecord) -> Result<(), HarnessError> {
        if !matches!(self.config.kind, AdversaryKind::Adaptive) {
            return Ok(());
        }
        for delta in self.record_deltas(record, record.label)? {
            let cell = self.mirror.entry((delta.group, delta.cell)).or_default();
            cell.v += delta.value_delta;
            cell.m += delta.moment_delta.unwrap_or(0.0);
        }
        Ok(())
    }

    /// Expected increase of the learner's surrogate loss if the label is
    /// `y`, under the published strategy: Σ_p w_p Σ_cells [Φ(V+d) − Φ(V)]
    /// with Φ(v) = e^{ηv} + e^{−ηv}, evaluated in the log domain.
    fn surrogate_gain(
        &self,
        group_ids: &[GroupId],
        published: &PublishedStrategy,
        y: f64,
    ) -> SignedLog {
        let eta = self.eta;
        let mut total = SignedLog::ZERO;
        for &(prediction, weight) in published {
            let record = RoundRecord {
                round: 0,
                group_ids: group_ids.to_vec(),
                prediction,
                label: y,
                deltas: Vec::new(),
            };
            let deltas = self
                .record_deltas(&record, y)
                .expect("published predictions land on the learner's own grid");
            for delta in deltas {
                let cell =
                    self.mirror.get(&(delta.group, delta.cell)).copied().unwrap_or_default();
                let mut change = SignedLog::sym_exp_sum(eta * (cell.v + delta.value_delta))
                    .sub(&SignedLog::sym_exp_sum(eta * cell.v));
                if let Some(dm) = delta.moment_delta {
                    change = change.add(
                        &SignedLog::sym_exp_sum(eta * (cell.m + dm))
                            .sub(&SignedLog::sym_exp_sum(eta * cell.m)),
                    );
                }
                total = total.add(&change.scale(weight));
            }
        }
        total
    }

    /// The error-table increments one (prediction, label) pair induces,
    /// per the learner geometry this adversary was built against.
    fn record_deltas(
        &self,
        record: &RoundRecord,
        y: f64,
    ) -> Result<Vec<StateDelta>, HarnessError> {
        let wrong_kind = || HarnessError::InvalidConfig {
            field: "view",
            reason: "transcript prediction kind differs from the learner view".to_string(),
        };
        Ok(match self.view {
            LearnerView::Mean { n } => {
                let value = record.prediction.as_mean().ok_or_else(wrong_kind)?;
                multivalid_mean::round_deltas(n, &record.group_ids, value, y)?
            }
            LearnerView::Moment { n, n_prime, k } => {
                let (mean, moment) = record.prediction.as_moment().ok_or_else(wrong_kind)?;
                multivalid_moment::round_deltas(n, n_prime, k, &record.group_ids, mean, moment, y)?
            }
            LearnerView::Interval { n, delta } => {
                let (lower, upper) = record.prediction.as_interval().ok_or_else(wrong_kind)?;
                multivalid_interval::round_deltas(n, delta, &record.group_ids, lower, upper, y)?
            }
        })
    }
}

/// Componentwise average of the member groups' laws; examples in no group
/// get Bernoulli(1/2). Averaging keeps the window inside [0, 1] because each
/// member window is.
fn blended_law(laws: &[GroupLaw], group_ids: &[GroupId]) -> LabelLaw {
    if group_ids.is_empty() {
        return LabelLaw::Bernoulli { p: 0.5 };
    }
    let count = group_ids.len() as f64;
    let rate = group_ids.iter().map(|&g| laws[g as usize].rate).sum::<f64>() / count;
    let spread = group_ids.iter().map(|&g| laws[g as usize].spread).sum::<f64>() / count;
    if spread == 0.0 {
        LabelLaw::Bernoulli { p: rate }
    } else {
        LabelLaw::Uniform { lo: rate - spread / 2.0, hi: rate + spread / 2.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use multivalid_core::Prediction;

    fn mean_view() -> LearnerView {
        LearnerView::Mean { n: 2 }
    }

    #[test]
    fn bad_laws_name_their_field() {
        let cfg = AdversaryConfig::iid(vec![GroupLaw::bernoulli(1.2)], 0);
        let err = Adversary::new(cfg, mean_view(), 0.1, 1).unwrap_err();
        assert!(matches!(err, HarnessError::InvalidConfig { field: "laws", .. }), "{err}");

        let cfg = AdversaryConfig::iid(vec![GroupLaw::bernoulli(0.5)], 0);
        let err = Adversary::new(cfg, mean_view(), 0.1, 2).unwrap_err();
        assert!(matches!(err, HarnessError::InvalidConfig { field: "laws", .. }), "{err}");

        let cfg = AdversaryConfig {
            kind: AdversaryKind::Shift {
                shifted_laws: vec![GroupLaw { rate: 0.9, spread: 0.5 }],
                shift_round: 5,
            },
            laws: vec![GroupLaw::bernoulli(0.5)],
            seed: 0,
        };
        let err = Adversary::new(cfg, mean_view(), 0.1, 1).unwrap_err();
        assert!(
            matches!(err, HarnessError::InvalidConfig { field: "shifted_laws", .. }),
            "{err}"
        );
    }

    #[test]
    fn iid_blends_member_laws() {
        let cfg = AdversaryConfig::iid(
            vec![GroupLaw::bernoulli(0.2), GroupLaw { rate: 0.6, spread: 0.4 }],
            0,
        );
        let adv = Adversary::new(cfg, mean_view(), 0.1, 2).unwrap();
        let published = vec![(Prediction::Mean { value: 0.5 }, 1.0)];
        assert_eq!(adv.commit(0, &[0], &published), LabelLaw::Bernoulli { p: 0.2 });
        assert_eq!(adv.commit(0, &[], &published), LabelLaw::Bernoulli { p: 0.5 });
        // Both groups: rate (0.2+0.6)/2 = 0.4, spread 0.2.
        let LabelLaw::Uniform { lo, hi } = adv.commit(0, &[0, 1], &published) else {
            panic!("expected a uniform window")
        };
        assert!((lo - 0.3).abs() < 1e-15 && (hi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shift_switches_laws_at_the_configured_round() {
        let cfg = AdversaryConfig {
            kind: AdversaryKind::Shift {
                shifted_laws: vec![GroupLaw::bernoulli(0.9)],
                shift_round: 10,
            },
            laws: vec![GroupLaw::bernoulli(0.1)],
            seed: 0,
        };
        let adv = Adversary::new(cfg, mean_view(), 0.1, 1).unwrap();
        let published = vec![(Prediction::Mean { value: 0.5 }, 1.0)];
        assert_eq!(adv.commit(9, &[0], &published), LabelLaw::Bernoulli { p: 0.1 });
        assert_eq!(adv.commit(10, &[0], &published), LabelLaw::Bernoulli { p: 0.9 });
    }

    #[test]
    fn adaptive_pushes_against_the_published_mean() {
        // Fresh tables: Φ is symmetric, so the gain of y is larger when
        // |y − μ̄| is larger. A low published mean invites y = 1.
        let adv = Adversary::new(AdversaryConfig::adaptive(0), mean_view(), 0.2, 1).unwrap();
        let low = vec![(Prediction::Mean { value: 0.1 }, 1.0)];
        assert_eq!(adv.commit(0, &[0], &low), LabelLaw::Bernoulli { p: 1.0 });
        let high = vec![(Prediction::Mean { value: 0.9 }, 1.0)];
        assert_eq!(adv.commit(0, &[0], &high), LabelLaw::Bernoulli { p: 0.0 });
        // Exactly centered: both labels gain the same, ties go to 1.
        let mid = vec![(Prediction::Mean { value: 0.5 }, 1.0)];
        assert_eq!(adv.commit(0, &[0], &mid), LabelLaw::Bernoulli { p: 1.0 });
    }

    #[test]
    fn adaptive_tracks_the_public_transcript() {
        let mut adv =
            Adversary::new(AdversaryConfig::adaptive(0), mean_view(), 0.2, 1).unwrap();
        // Feed rounds where the learner predicted 0.5 in bucket 1's grid and
        // the label was 1: V climbs, so pushing y = 1 keeps growing Φ while
        // y = 0 would shrink it back.
        for round in 0..5 {
            let record = RoundRecord {
                round,
                group_ids: vec![0],
                prediction: Prediction::Mean { value: 0.4 },
                label: 1.0,
                deltas: Vec::new(),
            };
            adv.observe(&record).unwrap();
        }
        let published = vec![(Prediction::Mean { value: 0.4 }, 1.0)];
        assert_eq!(adv.commit(5, &[0], &published), LabelLaw::Bernoulli { p: 1.0 });
        // After opposite history the same strategy invites y = 0.
        let mut adv2 =
            Adversary::new(AdversaryConfig::adaptive(0), mean_view(), 0.2, 1).unwrap();
        for round in 0..5 {
            let record = RoundRecord {
                round,
                group_ids: vec![0],
                prediction: Prediction::Mean { value: 0.6 },
                label: 0.0,
                deltas: Vec::new(),
            };
            adv2.observe(&record).unwrap();
        }
        let published = vec![(Prediction::Mean { value: 0.6 }, 1.0)];
        assert_eq!(adv2.commit(5, &[0], &published), LabelLaw::Bernoulli { p: 0.0 });
    }

    #[test]
    fn draws_are_deterministic_per_seed_and_law_bound() {
        let cfg = AdversaryConfig::iid(vec![GroupLaw { rate: 0.5, spread: 0.6 }], 42);
        let mut a = Adversary::new(cfg.clone(), mean_view(), 0.1, 1).unwrap();
        let mut b = Adversary::new(cfg, mean_view(), 0.1, 1).unwrap();
        for _ in 0..200 {
            let law = LabelLaw::Uniform { lo: 0.2, hi: 0.8 };
            let ya = a.draw(law);
            assert_eq!(ya, b.draw(law));
            assert!((0.2..0.8).contains(&ya));
        }
        let mut bern = Adversary::new(
            AdversaryConfig::iid(vec![GroupLaw::bernoulli(1.0)], 7),
            mean_view(),
            0.1,
            1,
        )
        .unwrap();
        assert_eq!(bern.draw(LabelLaw::Bernoulli { p: 1.0 }), 1.0);
        assert_eq!(bern.draw(LabelLaw::Bernoulli { p: 0.0 }), 0.0);
    }

    #[test]
    fn adaptive_gain_handles_interval_strategies() {
        let view = LearnerView::Interval { n: 2, delta: 0.1 };
        let adv = Adversary::new(AdversaryConfig::adaptive(0), view, 0.2, 1).unwrap();
        // An interval covering only high labels: y = 0 escapes coverage and
        // the uncovered increment −(1−δ) has larger magnitude than δ, so
        // fresh tables gain more from y = 0.
        let published = vec![(Prediction::Interval { lower: 0.5, upper: 1.0 }, 1.0)];
        assert_eq!(adv.commit(0, &[0], &published), LabelLaw::Bernoulli { p: 0.0 });
    }
}
