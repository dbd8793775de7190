//! Online mean multicalibration.
//!
//! A [`MeanState`] plays the following repeated game. Each round an example
//! arrives, visible through its group memberships 𝒢(x). The predictor
//! publishes a distribution over grid means μ̄ ∈ 𝒫^{rn}, an adversary
//! (who may know that distribution) fixes a label law over [0,1], and the
//! realized pair updates the error tables V^{G,i} += y − μ̄ for every group
//! G ∋ x, where i is the bucket of μ̄. Multicalibration asks that every
//! (G, i) cell keep |V^{G,i}|/T small simultaneously.
//!
//! The per-round game on the exponential surrogate
//! L_s = Σ_{G,i} (e^{ηV} + e^{−ηV}) has a closed-form equilibrium: with
//! C^i = Σ_{G∈𝒢(x)} (e^{ηV^{G,i}} − e^{−ηV^{G,i}}), predict 1 when every
//! C^i > 0, predict 0 when every C^i < 0, and otherwise randomize between
//! the two grid points i*/n − 1/(rn) and i*/n that straddle the first sign
//! change, with weights chosen so the expected coefficient vanishes. That
//! caps the surrogate's per-round growth at L_s/(rn) no matter what label
//! law the adversary picked.

use std::collections::BTreeMap;

use multivalid_core::{
    bucket_index, BucketGrid, CellKey, CoreError, Example, GridPoint, GroupId, GroupSystem,
    SignedLog, StateDelta,
};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeanError {
    #[error("learning rate {eta} outside (0, 1/2)")]
    InvalidEta { eta: f64 },
    #[error("{given} rounds is too few for this configuration; need at least {minimum}")]
    TooFewRounds { given: u64, minimum: u64 },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Which high-probability regime the learning rate targets: a finite group
/// collection, or an infinite one where each example meets at most d groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaMode {
    FiniteGroups,
    BoundedMembership,
}

/// State of the online mean predictor: the sparse error tables V^{G,i} plus
/// the grid and rate that define its per-round game.
#[derive(Clone, Debug)]
pub struct MeanState {
    groups: GroupSystem,
    grid: BucketGrid,
    eta: f64,
    v: BTreeMap<(GroupId, u32), f64>,
    rounds: u64,
}

impl MeanState {
    pub fn new(groups: GroupSystem, grid: BucketGrid, eta: f64) -> Result<Self, MeanError> {
        if !(eta > 0.0 && eta < 0.5) {
            return Err(MeanError::InvalidEta { eta });
        }
        Ok(Self { groups, grid, eta, v: BTreeMap::new(), rounds: 0 })
    }

    pub fn grid(&self) -> &BucketGrid {
        &self.grid
    }

    pub fn groups(&self) -> &GroupSystem {
        &self.groups
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Raw error-table entry V^{G,i} (0 for untouched cells).
    pub fn table_entry(&self, group: GroupId, bucket: u32) -> f64 {
        *self.v.get(&(group, bucket)).unwrap_or(&0.0)
    }

    /// Iterates over the nonzero error-table entries.
    pub fn table_iter(&self) -> impl Iterator<Item = (GroupId, u32, f64)> + '_ {
        self.v.iter().map(|(&(g, i), &v)| (g, i, v))
    }

    /// C^i(x) = Σ_{G ∈ 𝒢(x)} e^{ηV^{G,i}} − e^{−ηV^{G,i}}, in signed-log
    /// form so large ηV cannot overflow.
    pub fn bucket_coefficient(&self, x: &Example, i: u32) -> SignedLog {
        debug_assert!(i >= 1 && i <= self.grid.n());
        let mut c = SignedLog::ZERO;
        for &g in x.group_ids() {
            c = c.add(&SignedLog::sym_exp_diff(self.eta * self.table_entry(g, i)));
        }
        c
    }

    /// The per-round equilibrium distribution over grid means: either a
    /// point mass or a two-point mixture on adjacent grid points straddling
    /// a bucket boundary. Weights are positive and sum to 1 up to one ulp.
    pub fn predict_distribution(&self, x: &Example) -> Vec<(GridPoint, f64)> {
        let n = self.grid.n();
        let rn = self.grid.denominator();
        let c: Vec<SignedLog> = (1..=n).map(|i| self.bucket_coefficient(x, i)).collect();

        if c.iter().all(|v| v.sign() > 0) {
            return vec![(self.grid.point(rn), 1.0)];
        }
        if c.iter().all(|v| v.sign() < 0) {
            return vec![(self.grid.point(0), 1.0)];
        }
        if n == 1 {
            // Single bucket with C = 0: every prediction already has game
            // value 0; fix the all-positive branch's output for determinism.
            return vec![(self.grid.point(rn), 1.0)];
        }

        // First adjacent pair whose signs differ or vanish: the product
        // C^{i*}·C^{i*+1} ≤ 0 test in sign space.
        let star = (0..(n as usize - 1))
            .find(|&i| i32::from(c[i].sign()) * i32::from(c[i + 1].sign()) <= 0)
            .expect("mixed signs guarantee a boundary pair");
        let lo_mag = c[star].ln_abs();
        let hi_mag = c[star + 1].ln_abs();
        // q = |C^{i*+1}| / (|C^{i*}| + |C^{i*+1}|), with 0/0 = 1. Both
        // weights are formed as direct ratios so each keeps full relative
        // precision even when the split is extreme; 1 - q would erase the
        // smaller weight. Their float sum can miss 1 by one ulp.
        let (q, q_upper) = if lo_mag == f64::NEG_INFINITY && hi_mag == f64::NEG_INFINITY {
            (1.0, 0.0)
        } else {
            let m = lo_mag.max(hi_mag);
            let a = (lo_mag - m).exp();
            let b = (hi_mag - m).exp();
            (b / (a + b), a / (a + b))
        };

        let i_star = star as u32 + 1;
        let lower = self.grid.point(i_star * self.grid.r() - 1);
        let upper = self.grid.point(i_star * self.grid.r());
        debug_assert_eq!(self.grid.bucket_of(lower), i_star);
        debug_assert_eq!(self.grid.bucket_of(upper), i_star + 1);
        if q >= 1.0 || q_upper <= 0.0 {
            vec![(lower, 1.0)]
        } else if q <= 0.0 {
            vec![(upper, 1.0)]
        } else {
            vec![(lower, q), (upper, q_upper)]
        }
    }

    /// Samples a grid mean from the equilibrium distribution.
    pub fn predict<R: Rng + ?Sized>(&self, x: &Example, rng: &mut R) -> GridPoint {
        let dist = self.predict_distribution(x);
        if dist.len() == 1 {
            return dist[0].0;
        }
        let u: f64 = rng.random();
        if u < dist[0].1 {
            dist[0].0
        } else {
            dist[1].0
        }
    }

    /// Records the revealed label: V^{G,i} += y − μ̄ for every G ∋ x, where
    /// i is the bucket of μ̄. Returns the applied increments.
    pub fn update(
        &mut self,
        x: &Example,
        prediction: GridPoint,
        y: f64,
    ) -> Result<Vec<StateDelta>, MeanError> {
        let deltas = round_deltas(self.grid.n(), x.group_ids(), prediction.value(), y)?;
        self.apply_deltas(&deltas);
        Ok(deltas)
    }

    /// Applies precomputed increments (the replay path used when a state is
    /// rebuilt from a transcript).
    pub fn apply_deltas(&mut self, deltas: &[StateDelta]) {
        for d in deltas {
            let CellKey::Bucket { i } = d.cell else {
                panic!("mean state updated with a non-bucket cell");
            };
            *self.v.entry((d.group, i)).or_insert(0.0) += d.value_delta;
        }
        self.rounds += 1;
    }

    /// ln of the surrogate loss L_s = Σ_{G,i} (e^{ηV^{G,i}} + e^{−ηV^{G,i}}),
    /// counting every cell of the full |𝒢|×n table (untouched cells
    /// contribute 2 each).
    pub fn surrogate_loss(&self) -> f64 {
        let total_cells = u64::from(self.groups.group_count()) * u64::from(self.grid.n());
        let implicit = total_cells - self.v.len() as u64;
        let mut terms: Vec<f64> = self
            .v
            .values()
            .map(|&v| SignedLog::sym_exp_sum(self.eta * v).ln_abs())
            .collect();
        if implicit > 0 {
            terms.push((2.0 * implicit as f64).ln());
        }
        log_sum_exp(&terms)
    }
}

/// ln(Σ exp(term)) with the usual max shift.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// The error-table increments a finished round induces, computed from the
/// serialized float form of the prediction so that recomputing from a loaded
/// transcript reproduces increments bit for bit.
pub fn round_deltas(
    n: u32,
    group_ids: &[GroupId],
    mean_value: f64,
    y: f64,
) -> Result<Vec<StateDelta>, MeanError> {
    if !(0.0..=1.0).contains(&y) || y.is_nan() {
        return Err(MeanError::Core(CoreError::LabelOutOfRange { value: y }));
    }
    let i = bucket_index(mean_value, n)?;
    let delta = y - mean_value;
    Ok(group_ids
        .iter()
        .map(|&g| StateDelta {
            group: g,
            cell: CellKey::Bucket { i },
            value_delta: delta,
            moment_delta: None,
        })
        .collect())
}

/// The learning rate minimizing the theorem's error bound: finite-groups
/// mode returns √(ln(2|𝒢|n)/(2T)); bounded-membership mode replaces the
/// group count with the per-example membership bound d via √(ln(1+2dT)/(2T)).
/// The failure probability λ enters the error bound, not the rate; the
/// parameter is kept so callers configure both from one place.
pub fn default_eta(
    t: u64,
    groups: &GroupSystem,
    n: u32,
    mode: EtaMode,
    _lambda: f64,
) -> Result<f64, MeanError> {
    let eta = eta_formula(t.max(1), groups, n, mode);
    if t >= 1 && eta < 0.5 {
        return Ok(eta);
    }
    // Both formulas are positive and decreasing in T, so the minimum
    // admissible horizon is found by doubling then bisection.
    let mut lo = t.max(1);
    let mut hi = lo;
    while eta_formula(hi, groups, n, mode) >= 0.5 {
        hi = hi.saturating_mul(2);
    }
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if eta_formula(mid, groups, n, mode) < 0.5 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(MeanError::TooFewRounds { given: t, minimum: hi })
}

fn eta_formula(t: u64, groups: &GroupSystem, n: u32, mode: EtaMode) -> f64 {
    let t = t as f64;
    match mode {
        EtaMode::FiniteGroups => {
            let cells = 2.0 * f64::from(groups.group_count()) * f64::from(n);
            (cells.ln() / (2.0 * t)).sqrt()
        }
        EtaMode::BoundedMembership => {
            let d = f64::from(groups.max_membership());
            ((1.0 + 2.0 * d * t).ln() / (2.0 * t)).sqrt()
        }
    }
}

/// The grid refinement that makes the discretization term 1/(rn) at most
/// `epsilon_prime` times the statistical error term:
/// r = ⌈√T / (ε′·n·√(2 ln(2|𝒢|n)))⌉.
pub fn default_refinement(t: u64, groups: &GroupSystem, n: u32, epsilon_prime: f64) -> u32 {
    assert!(epsilon_prime > 0.0);
    let cells = 2.0 * f64::from(groups.group_count()) * f64::from(n);
    let r = (t as f64).sqrt() / (epsilon_prime * f64::from(n) * (2.0 * cells.ln()).sqrt());
    (r.ceil() as u32).max(1)
}
