//! Online mean-conditioned k-th moment multicalibration.
//!
//! Each round the predictor publishes a pair (μ̄, m̄ᵏ): a grid mean and a
//! claimed k-th central moment about the midpoint μ̂_i = (2i−1)/(2n) of the
//! mean's bucket. Two error tables accumulate per (group, bucket pair):
//! V^{G,i,j} += y − μ̄ and M^{G,i,j} += (y − μ̂_i)ᵏ − m̄ᵏ. Keeping both small
//! forces the claimed moments to match the realized central moments on every
//! (group, bucket-pair) slice simultaneously.
//!
//! The per-round game on the exponential surrogate is linearized by replacing
//! the adversary's label y with its first k powers ψ_ℓ ∈ [0,1]: with
//! C = Σ_G e^{ηV} − e^{−ηV} and D = Σ_G e^{ηM} − e^{−ηM} per cell,
//!
//!   u((μ̄, m̄ᵏ), ψ) = −μ̄·C + μ̂ᵏ·D − m̄ᵏ·D + Σ_ℓ ψ_ℓ·F_ℓ,
//!   F_1 = C − k·μ̂^{k−1}·D,   F_ℓ = C(k,ℓ)·(−μ̂)^{k−ℓ}·D  (ℓ ≥ 2),
//!
//! which is exactly (y−μ̄)C + ((y−μ̂)ᵏ − m̄ᵏ)D when ψ_ℓ = yˡ. Only the 2ᵏ
//! vertices of the ψ-cube matter, the adversary's exact best response is a
//! coordinatewise sign test on the F_ℓ, and the learner can restrict itself
//! to a reduced grid of two prediction points per bucket (4nn′ pairs in all)
//! at the cost of 1/(rn) + 1/(rn′) in game value. The per-round LP is solved
//! to ε with truncated dyadic coefficients.

use std::collections::BTreeMap;

use multivalid_core::{
    bucket_index, BucketGrid, CellKey, CoreError, Example, GridPoint, GroupId, GroupSystem,
    SignedLog, StateDelta,
};
use multivalid_lp::{solve, truncate_coefficients, MinimaxProblem};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("moment order {k} is odd; only even orders are supported")]
    OddMomentOrder { k: u32 },
    #[error("moment order {k} exceeds the supported maximum of 62")]
    MomentOrderTooLarge { k: u32 },
    #[error("grid has no moment buckets; construct it with moment buckets n′")]
    MissingMomentBuckets,
    #[error("grid refinement {r} is too coarse; the reduced grid needs r ≥ 2")]
    RefinementTooCoarse { r: u32 },
    #[error("learning rate {eta} outside (0, 1/2)")]
    InvalidEta { eta: f64 },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Midpoint μ̂_i = (2i−1)/(2n) of bucket i.
pub fn bucket_midpoint(i: u32, n: u32) -> f64 {
    assert!(i >= 1 && i <= n);
    f64::from(2 * i - 1) / f64::from(2 * n)
}

/// The 2n-point reduced prediction axis: the lower endpoint (i−1)/n and the
/// top interior point i/n − 1/(rn) of every bucket i < n, plus (n−1)/n and 1
/// for the last bucket. Sorted ascending; exactly two points per bucket, so
/// position a maps to bucket a/2 + 1.
pub fn reduced_axis(r: u32, n: u32) -> Vec<GridPoint> {
    assert!(r >= 2, "reduced axis needs r ≥ 2");
    let den = r * n;
    let mut points = Vec::with_capacity(2 * n as usize);
    for i in 1..n {
        points.push(GridPoint::new((i - 1) * r, den));
        points.push(GridPoint::new(i * r - 1, den));
    }
    points.push(GridPoint::new((n - 1) * r, den));
    points.push(GridPoint::new(den, den));
    points
}

/// The full reduced strategy grid: the Cartesian product of the mean axis
/// (2n points) and the moment axis (2n′ points), mean-major. Size 4nn′.
pub fn reduced_grid(r: u32, n: u32, n_prime: u32) -> Vec<(GridPoint, GridPoint)> {
    let means = reduced_axis(r, n);
    let moments = reduced_axis(r, n_prime);
    let mut grid = Vec::with_capacity(means.len() * moments.len());
    for &mu in &means {
        for &m in &moments {
            grid.push((mu, m));
        }
    }
    grid
}

/// Bucket pair of a reduced-grid strategy index (mean-major layout).
pub fn strategy_cell(idx: usize, n_prime: u32) -> (u32, u32) {
    let per_mean = 2 * n_prime as usize;
    let a = idx / per_mean;
    let b = idx % per_mean;
    ((a / 2) as u32 + 1, (b / 2) as u32 + 1)
}

/// Per-cell coefficients of the linearized round objective.
#[derive(Clone, Debug)]
pub struct MomentCoefficients {
    k: u32,
    n: u32,
    n_prime: u32,
    c: Vec<SignedLog>,
    d: Vec<SignedLog>,
    f: Vec<Vec<SignedLog>>,
}

impl MomentCoefficients {
    fn cell_index(&self, i: u32, j: u32) -> usize {
        assert!(i >= 1 && i <= self.n && j >= 1 && j <= self.n_prime);
        ((i - 1) * self.n_prime + (j - 1)) as usize
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn c(&self, i: u32, j: u32) -> SignedLog {
        self.c[self.cell_index(i, j)]
    }

    pub fn d(&self, i: u32, j: u32) -> SignedLog {
        self.d[self.cell_index(i, j)]
    }

    /// F_ℓ for ℓ ∈ [k].
    pub fn f(&self, i: u32, j: u32, ell: u32) -> SignedLog {
        assert!(ell >= 1 && ell <= self.k);
        self.f[self.cell_index(i, j)][(ell - 1) as usize]
    }
}

/// Exact adversary best response to a distribution over reduced-grid
/// strategies: ψ_ℓ = 1 iff the Q-weighted sum of F_ℓ over bucket pairs is
/// ≥ 0. Returned as a bitmask with bit ℓ−1 carrying ψ_ℓ.
pub fn adversary_best_response(coeffs: &MomentCoefficients, q: &[(usize, f64)]) -> u64 {
    // Accumulate Q's mass per bucket pair once.
    let cells = (coeffs.n * coeffs.n_prime) as usize;
    let mut mass = vec![0.0f64; cells];
    for &(idx, w) in q {
        let (i, j) = strategy_cell(idx, coeffs.n_prime);
        mass[((i - 1) * coeffs.n_prime + (j - 1)) as usize] += w;
    }
    let mut psi = 0u64;
    for ell in 1..=coeffs.k {
        let mut total = SignedLog::ZERO;
        for cell in 0..cells {
            if mass[cell] > 0.0 {
                total = total.add(&coeffs.f[cell][(ell - 1) as usize].scale(mass[cell]));
            }
        }
        if total.sign() >= 0 {
            psi |= 1 << (ell - 1);
        }
    }
    psi
}

/// Binomial coefficient as a float (exact for the orders used here).
fn binom(k: u32, ell: u32) -> f64 {
    let mut out = 1.0f64;
    for step in 1..=ell.min(k - ell) {
        out = out * f64::from(k - ell.min(k - ell) + step) / f64::from(step);
    }
    out
}

/// Outcome of one moment prediction round.
#[derive(Clone, Debug)]
pub struct MomentPrediction {
    pub mean: GridPoint,
    pub moment: GridPoint,
    /// Whether the per-round LP certified its tolerance.
    pub converged: bool,
    /// Certified worst-case objective of the played distribution, in units
    /// of the current surrogate loss L_s.
    pub normalized_value: f64,
    /// The equilibrium distribution over reduced-grid strategy indices.
    pub distribution: Vec<(usize, f64)>,
}

/// State of the online moment predictor.
#[derive(Clone, Debug)]
pub struct MomentState {
    groups: GroupSystem,
    grid: BucketGrid,
    eta: f64,
    k: u32,
    v: BTreeMap<(GroupId, (u32, u32)), f64>,
    m: BTreeMap<(GroupId, (u32, u32)), f64>,
    rounds: u64,
}

impl MomentState {
    pub fn new(
        groups: GroupSystem,
        grid: BucketGrid,
        k: u32,
        eta: f64,
    ) -> Result<Self, MomentError> {
        if k % 2 != 0 || k == 0 {
            return Err(MomentError::OddMomentOrder { k });
        }
        if k > 62 {
            return Err(MomentError::MomentOrderTooLarge { k });
        }
        if grid.n_prime().is_none() {
            return Err(MomentError::MissingMomentBuckets);
        }
        if grid.r() < 2 {
            return Err(MomentError::RefinementTooCoarse { r: grid.r() });
        }
        if !(eta > 0.0 && eta < 0.5) {
            return Err(MomentError::InvalidEta { eta });
        }
        Ok(Self { groups, grid, eta, k, v: BTreeMap::new(), m: BTreeMap::new(), rounds: 0 })
    }

    pub fn grid(&self) -> &BucketGrid {
        &self.grid
    }

    pub fn groups(&self) -> &GroupSystem {
        &self.groups
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    fn n_prime(&self) -> u32 {
        self.grid.n_prime().expect("checked at construction")
    }

    pub fn value_entry(&self, group: GroupId, i: u32, j: u32) -> f64 {
        *self.v.get(&(group, (i, j))).unwrap_or(&0.0)
    }

    pub fn moment_entry(&self, group: GroupId, i: u32, j: u32) -> f64 {
        *self.m.get(&(group, (i, j))).unwrap_or(&0.0)
    }

    /// Nonzero cells of both tables as (group, i, j, V, M).
    pub fn table_iter(&self) -> impl Iterator<Item = (GroupId, u32, u32, f64, f64)> + '_ {
        let mut keys: Vec<(GroupId, (u32, u32))> = self.v.keys().chain(self.m.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter().map(|(g, (i, j))| {
            (g, i, j, self.value_entry(g, i, j), self.moment_entry(g, i, j))
        })
    }

    /// The linearized objective's per-cell coefficients at x.
    pub fn coefficients(&self, x: &Example) -> MomentCoefficients {
        let n = self.grid.n();
        let n_prime = self.n_prime();
        let cells = (n * n_prime) as usize;
        let mut c = vec![SignedLog::ZERO; cells];
        let mut d = vec![SignedLog::ZERO; cells];
        for &g in x.group_ids() {
            for i in 1..=n {
                for j in 1..=n_prime {
                    let cell = ((i - 1) * n_prime + (j - 1)) as usize;
                    c[cell] =
                        c[cell].add(&SignedLog::sym_exp_diff(self.eta * self.value_entry(g, i, j)));
                    d[cell] = d[cell]
                        .add(&SignedLog::sym_exp_diff(self.eta * self.moment_entry(g, i, j)));
                }
            }
        }
        let mut f = vec![vec![SignedLog::ZERO; self.k as usize]; cells];
        for i in 1..=n {
            let mu_hat = bucket_midpoint(i, n);
            for j in 1..=n_prime {
                let cell = ((i - 1) * n_prime + (j - 1)) as usize;
                // F_1 = C − k·μ̂^{k−1}·D; the power of −μ̂ is odd for even k.
                f[cell][0] = c[cell]
                    .add(&d[cell].scale(-f64::from(self.k) * mu_hat.powi(self.k as i32 - 1)));
                for ell in 2..=self.k {
                    let factor = binom(self.k, ell) * (-mu_hat).powi((self.k - ell) as i32);
                    f[cell][(ell - 1) as usize] = d[cell].scale(factor);
                }
            }
        }
        MomentCoefficients { k: self.k, n, n_prime, c, d, f }
    }

    /// ln of the surrogate loss L_s = Σ_{G,i,j} (e^{ηV}+e^{−ηV}+e^{ηM}+e^{−ηM});
    /// a fresh state gives L_0 = 4|𝒢|nn′.
    pub fn surrogate_loss(&self) -> f64 {
        let total_cells =
            u64::from(self.groups.group_count()) * u64::from(self.grid.n()) * u64::from(self.n_prime());
        let mut terms: Vec<f64> = Vec::with_capacity(self.v.len() + self.m.len() + 1);
        for &v in self.v.values() {
            terms.push(SignedLog::sym_exp_sum(self.eta * v).ln_abs());
        }
        for &m in self.m.values() {
            terms.push(SignedLog::sym_exp_sum(self.eta * m).ln_abs());
        }
        let implicit = 2 * total_cells - (self.v.len() + self.m.len()) as u64;
        if implicit > 0 {
            terms.push((2.0 * implicit as f64).ln());
        }
        log_sum_exp(&terms)
    }

    /// Plays one round: builds the linearized objective normalized by the
    /// surrogate loss, truncates its coefficients onto a dyadic grid (total
    /// perturbation ≤ ε/2), solves the game to ε/2 with the exact
    /// best-response oracle, and samples a reduced-grid pair.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Example,
        rng: &mut R,
        epsilon: f64,
    ) -> MomentPrediction {
        assert!(epsilon > 0.0);
        let n_prime = self.n_prime();
        let strategies = reduced_grid(self.grid.r(), self.grid.n(), n_prime);
        let coeffs = self.coefficients(x);
        let ln_ls = self.surrogate_loss();
        let normalize = |s: SignedLog| f64::from(s.sign()) * (s.ln_abs() - ln_ls).exp();

        // Per-strategy constant term and per-cell ψ terms, each truncated so
        // the whole objective moves by at most ε/2: k+1 terms per payoff,
        // each within ε/(2(k+1)) of its input.
        let cells = (self.grid.n() * n_prime) as usize;
        let term_eps = epsilon / f64::from(self.k + 1);
        let base: Vec<f64> = strategies
            .iter()
            .enumerate()
            .map(|(idx, &(mu, m))| {
                let (i, j) = strategy_cell(idx, n_prime);
                let c = normalize(coeffs.c(i, j));
                let d = normalize(coeffs.d(i, j));
                let mu_hat = bucket_midpoint(i, self.grid.n());
                -mu.value() * c + mu_hat.powi(self.k as i32) * d - m.value() * d
            })
            .collect();
        let base = truncate_coefficients(&base, term_eps);
        let mut f_trunc: Vec<Vec<f64>> = Vec::with_capacity(cells);
        for i in 1..=self.grid.n() {
            for j in 1..=n_prime {
                let row: Vec<f64> =
                    (1..=self.k).map(|ell| normalize(coeffs.f(i, j, ell))).collect();
                f_trunc.push(truncate_coefficients(&row, term_eps));
            }
        }

        let payoff = |idx: usize, psi: &u64| -> f64 {
            let (i, j) = strategy_cell(idx, n_prime);
            let cell = ((i - 1) * n_prime + (j - 1)) as usize;
            let mut u = base[idx];
            for ell in 0..self.k {
                if psi & (1 << ell) != 0 {
                    u += f_trunc[cell][ell as usize];
                }
            }
            u
        };
        // Best response against the truncated cells, exact for the game the
        // LP sees.
        let oracle = |q: &[(usize, f64)]| -> u64 {
            let mut mass = vec![0.0f64; cells];
            for &(idx, w) in q {
                let (i, j) = strategy_cell(idx, n_prime);
                mass[((i - 1) * n_prime + (j - 1)) as usize] += w;
            }
            let mut psi = 0u64;
            for ell in 0..self.k {
                let total: f64 = (0..cells).map(|c| mass[c] * f_trunc[c][ell as usize]).sum();
                if total >= 0.0 {
                    psi |= 1 << ell;
                }
            }
            psi
        };

        // With 2ᵏ small enough, seed every adversary vertex and every learner
        // strategy: the restricted game is the whole game and one solve is
        // exact. For larger k the oracle grows the constraint set on demand.
        let initial_adversary: Vec<u64> =
            if self.k <= 12 { (0..(1u64 << self.k)).collect() } else { Vec::new() };
        let problem = MinimaxProblem {
            num_strategies: strategies.len(),
            payoff: &payoff,
            oracle: &oracle,
            learner_oracle: None,
            initial_learner: (0..strategies.len()).collect(),
            initial_adversary,
            iteration_cap: None,
        };
        let result = solve(&problem, epsilon / 2.0);

        // Sample from the equilibrium mixture.
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = result.distribution.last().map_or(0, |&(i, _)| i);
        for &(idx, w) in &result.distribution {
            acc += w;
            if u < acc {
                chosen = idx;
                break;
            }
        }
        let (mean, moment) = strategies[chosen];
        MomentPrediction {
            mean,
            moment,
            converged: result.converged,
            normalized_value: result.value_upper,
            distribution: result.distribution,
        }
    }

    /// Records the revealed label: V^{G,i,j} += y − μ̄ and
    /// M^{G,i,j} += (y − μ̂_i)ᵏ − m̄ᵏ for every G ∋ x.
    pub fn update(
        &mut self,
        x: &Example,
        prediction: (GridPoint, GridPoint),
        y: f64,
    ) -> Result<Vec<StateDelta>, MomentError> {
        let deltas = round_deltas(
            self.grid.n(),
            self.n_prime(),
            self.k,
            x.group_ids(),
            prediction.0.value(),
            prediction.1.value(),
            y,
        )?;
        self.apply_deltas(&deltas);
        Ok(deltas)
    }

    /// Applies precomputed increments (the transcript replay path).
    pub fn apply_deltas(&mut self, deltas: &[StateDelta]) {
        for d in deltas {
            let CellKey::BucketPair { i, j } = d.cell else {
                panic!("moment state updated with a non-pair cell");
            };
            *self.v.entry((d.group, (i, j))).or_insert(0.0) += d.value_delta;
            let dm = d.moment_delta.expect("moment rounds carry a moment increment");
            *self.m.entry((d.group, (i, j))).or_insert(0.0) += dm;
        }
        self.rounds += 1;
    }
}

/// The table increments one finished round induces, computed from the
/// serialized float forms so that replaying a loaded transcript reproduces
/// them bit for bit.
pub fn round_deltas(
    n: u32,
    n_prime: u32,
    k: u32,
    group_ids: &[GroupId],
    mean_value: f64,
    moment_value: f64,
    y: f64,
) -> Result<Vec<StateDelta>, MomentError> {
    if !(0.0..=1.0).contains(&y) || y.is_nan() {
        return Err(MomentError::Core(CoreError::LabelOutOfRange { value: y }));
    }
    let i = bucket_index(mean_value, n)?;
    let j = bucket_index(moment_value, n_prime)?;
    let mu_hat = bucket_midpoint(i, n);
    let value_delta = y - mean_value;
    let moment_delta = (y - mu_hat).powi(k as i32) - moment_value;
    Ok(group_ids
        .iter()
        .map(|&g| StateDelta {
            group: g,
            cell: CellKey::BucketPair { i, j },
            value_delta,
            moment_delta: Some(moment_delta),
        })
        .collect())
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
