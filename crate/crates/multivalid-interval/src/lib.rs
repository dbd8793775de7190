//! Online multivalid prediction intervals at target coverage 1 − δ.
//!
//! Each round is a zero-sum game between the learner, who mixes over grid
//! intervals (ℓ̄, ū) ∈ 𝒫^{rn} × 𝒫^{rn} with ℓ̄ ≤ ū, and an adversary who
//! answers with a (ρ, rn)-smooth label distribution on the rn+1 grid atoms.
//! The payoff weights the coverage deviation v_δ = Cover − (1 − δ) by the
//! signed exponential coefficient C^{i,j} of the interval's bucket pair, so
//! driving the game value down keeps every group/bucket-pair cell of the
//! coverage table near zero.
//!
//! The adversary's best response is a fractional knapsack: rank atoms by the
//! covering weight W and greedily fill ρ-capped mass in decreasing order
//! ([`greedy_smooth_response`], used by [`separation_oracle`]). The learner's
//! best response scans bucket pairs with prefix sums in O(rn + n²). Both are
//! exact, so [`IntervalState::predict`] certifies its value ≤ ρ·L_s + ε.
//!
//! Smoothness can be assumed outright or manufactured by label perturbation:
//! ŷ = (y + ε + U(−ε, ε))/(1 + 2ε) has density at most (1 + 2ε)/(2ε), and
//! [`widen_interval`] undoes the affine rescale with an ε margin so coverage
//! of ŷ implies coverage of the original y.

use std::collections::BTreeMap;

use multivalid_core::{
    bucket_index, bucket_of_numerator, cover, BucketGrid, CellKey, CoreError, Example, GridPoint,
    GroupId, GroupSystem, SignedLog, StateDelta,
};
use multivalid_lp::{solve, MinimaxProblem};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntervalError {
    #[error("failure probability {delta} is outside [0, 1]")]
    InvalidDelta { delta: f64 },
    #[error("smoothness parameter {rho} is outside (0, 1]")]
    InvalidRho { rho: f64 },
    #[error("learning rate {eta} is outside (0, 1/2)")]
    InvalidEta { eta: f64 },
    #[error("perturbation half-width {epsilon} must be positive and finite")]
    InvalidPerturbation { epsilon: f64 },
    #[error("horizon {given} is too short; the default learning rate needs at least {minimum}")]
    TooFewRounds { given: u64, minimum: u64 },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Cover((ℓ,u), y) − (1 − δ): +δ when the interval covers y, −(1 − δ) when
/// it misses.
pub fn coverage_deviation(interval: (f64, f64), y: f64, delta: f64) -> f64 {
    let covered = if cover(interval.0, interval.1, y) { 1.0 } else { 0.0 };
    covered - (1.0 - delta)
}

/// All grid intervals (ℓ, u) with ℓ ≤ u, ordered lexicographically by
/// numerator pair; there are (rn+1)(rn+2)/2 of them.
pub fn interval_strategies(r: u32, n: u32) -> Vec<(GridPoint, GridPoint)> {
    let rn = r * n;
    let mut out = Vec::with_capacity(strategy_count(rn));
    for a_l in 0..=rn {
        for a_u in a_l..=rn {
            out.push((GridPoint::new(a_l, rn), GridPoint::new(a_u, rn)));
        }
    }
    out
}

/// (rn+1)(rn+2)/2.
pub fn strategy_count(rn: u32) -> usize {
    let k = rn as usize;
    (k + 1) * (k + 2) / 2
}

fn index_offset(a_l: u64, rn: u64) -> u64 {
    a_l * (rn + 1) - a_l * a_l.saturating_sub(1) / 2
}

/// Position of (a_l, a_u) in the lexicographic strategy order.
pub fn interval_index(a_l: u32, a_u: u32, rn: u32) -> usize {
    assert!(a_l <= a_u && a_u <= rn);
    (index_offset(u64::from(a_l), u64::from(rn)) + u64::from(a_u - a_l)) as usize
}

/// Inverse of [`interval_index`].
pub fn interval_endpoints(idx: usize, rn: u32) -> (u32, u32) {
    assert!(idx < strategy_count(rn));
    let target = idx as u64;
    let rn64 = u64::from(rn);
    let (mut lo, mut hi) = (0u64, rn64);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if index_offset(mid, rn64) <= target {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let a_l = lo;
    let a_u = a_l + (target - index_offset(a_l, rn64));
    (a_l as u32, a_u as u32)
}

/// Whether the interval with endpoint numerators (a_l, a_u) covers the atom
/// a/rn. Integer form of the half-open convention: closed only when the
/// upper endpoint is exactly 1.
pub fn covers_atom(a_l: u32, a_u: u32, atom: u32, rn: u32) -> bool {
    a_l <= atom && (atom < a_u || a_u == rn)
}

/// The exact fractional-knapsack maximizer of Σ mass(i)·w[i] over
/// (ρ, rn)-smooth distributions: fill atoms in decreasing-w order (ties to
/// the smaller index), each capped at ρ. Returned sparse and sorted by atom.
pub fn greedy_smooth_response(w: &[f64], rho: f64) -> Vec<(u32, f64)> {
    assert!(rho > 0.0 && rho <= 1.0, "smoothness parameter outside (0, 1]");
    let mut order: Vec<usize> = (0..w.len()).collect();
    // Stable sort keeps ascending atom order within equal weights.
    order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).expect("atom weights must not be NaN"));
    let mut out = Vec::new();
    let mut remaining = 1.0f64;
    for atom in order {
        if remaining <= 0.0 {
            break;
        }
        let take = rho.min(remaining);
        out.push((atom as u32, take));
        remaining -= take;
    }
    out.sort_unstable_by_key(|&(a, _)| a);
    out
}

/// Outcome of one separation query against the interval LP.
#[derive(Clone, Debug, PartialEq)]
pub enum SeparationOutcome {
    /// Every smooth adversary keeps the objective at or below γ and the
    /// queried weights form a probability distribution.
    Feasible,
    /// A violated constraint: the greedy smooth distribution and the
    /// objective value Σ mass·W it attains.
    Violated { distribution: Vec<(u32, f64)>, objective: f64 },
}

/// Builds a degenerate-δ-aware online coverage state.
#[derive(Clone, Debug)]
pub struct IntervalState {
    groups: GroupSystem,
    grid: BucketGrid,
    eta: f64,
    delta: f64,
    rho: f64,
    v: BTreeMap<(GroupId, (u32, u32)), f64>,
    rounds: u64,
}

impl IntervalState {
    pub fn new(
        groups: GroupSystem,
        grid: BucketGrid,
        delta: f64,
        rho: f64,
        eta: f64,
    ) -> Result<Self, IntervalError> {
        if !(0.0..=1.0).contains(&delta) || delta.is_nan() {
            return Err(IntervalError::InvalidDelta { delta });
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(IntervalError::InvalidRho { rho });
        }
        if !(eta > 0.0 && eta < 0.5) {
            return Err(IntervalError::InvalidEta { eta });
        }
        Ok(Self { groups, grid, eta, delta, rho, v: BTreeMap::new(), rounds: 0 })
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

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// δ ∈ {0, 1} makes the coverage target degenerate (the empty or full
    /// interval dominates); accepted, but callers should surface this.
    pub fn degenerate_delta(&self) -> bool {
        self.delta == 0.0 || self.delta == 1.0
    }

    pub fn table_entry(&self, group: GroupId, i: u32, j: u32) -> f64 {
        *self.v.get(&(group, (i, j))).unwrap_or(&0.0)
    }

    /// Sorted (group, i, j, V) rows of the sparse coverage table.
    pub fn table_iter(&self) -> impl Iterator<Item = (GroupId, u32, u32, f64)> + '_ {
        self.v.iter().map(|(&(g, (i, j)), &v)| (g, i, j, v))
    }

    /// C^{i,j}(x) = Σ_{G ∋ x} e^{ηV^{G,(i,j)}} − e^{−ηV^{G,(i,j)}}.
    pub fn bucket_coefficient(&self, x: &Example, i: u32, j: u32) -> SignedLog {
        let mut total = SignedLog::ZERO;
        for &g in x.group_ids() {
            let v = self.table_entry(g, i, j);
            total = total.add(&SignedLog::sym_exp_diff(self.eta * v));
        }
        total
    }

    /// All C^{i,j} for i ≤ j, indexed by [`pair_index`].
    pub fn coefficients(&self, x: &Example) -> Vec<SignedLog> {
        let n = self.grid.n();
        let mut out = Vec::with_capacity((n * (n + 1) / 2) as usize);
        for i in 1..=n {
            for j in i..=n {
                out.push(self.bucket_coefficient(x, i, j));
            }
        }
        out
    }

    /// ln L_s. The surrogate sums e^{ηV} + e^{−ηV} over all |𝒢|·n² ordered
    /// bucket pairs; pairs with i > j never receive updates and contribute 2
    /// each, so the fresh value is L_0 = 2|𝒢|n².
    pub fn surrogate_loss(&self) -> f64 {
        let total_cells =
            u64::from(self.groups.group_count()) * u64::from(self.grid.n()).pow(2);
        let mut terms: Vec<f64> = Vec::with_capacity(self.v.len() + 1);
        for &v in self.v.values() {
            terms.push(SignedLog::sym_exp_sum(self.eta * v).ln_abs());
        }
        let implicit = total_cells - self.v.len() as u64;
        if implicit > 0 {
            terms.push((2.0 * implicit as f64).ln());
        }
        log_sum_exp(&terms)
    }

    /// Solves the round's minimax game to additive ε (on the raw payoff
    /// scale; internally the game is normalized by e^{−ln L_s}) and samples
    /// an interval. The certified worst case over all (ρ, rn)-smooth
    /// adversaries is at most ρ·L_s + ε; non-convergence is flagged on the
    /// result and the best distribution found is sampled anyway.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Example,
        rng: &mut R,
        epsilon: f64,
    ) -> IntervalPrediction {
        assert!(epsilon > 0.0);
        let n = self.grid.n();
        let r = self.grid.r();
        let rn = r * n;
        let atoms = (rn + 1) as usize;
        let rho = self.rho;
        let one_minus_delta = 1.0 - self.delta;

        let ln_ls = self.surrogate_loss();
        let coeffs = self.coefficients(x);
        let cn: Vec<f64> = coeffs
            .iter()
            .map(|c| f64::from(c.sign()) * (c.ln_abs() - ln_ls).exp())
            .collect();
        let cn_of = |idx: usize| -> f64 {
            let (a_l, a_u) = interval_endpoints(idx, rn);
            let i = bucket_of_numerator(a_l, r, n);
            let j = bucket_of_numerator(a_u, r, n);
            cn[pair_index(i, j, n)]
        };

        // Payoff of one interval against a sparse atom distribution.
        let payoff = |idx: usize, adv: &Vec<(u32, f64)>| -> f64 {
            let (a_l, a_u) = interval_endpoints(idx, rn);
            let mut covered = 0.0f64;
            let mut total = 0.0f64;
            for &(a, mass) in adv {
                total += mass;
                if covers_atom(a_l, a_u, a, rn) {
                    covered += mass;
                }
            }
            cn_of(idx) * (covered - one_minus_delta * total)
        };

        // Adversary best response: covering weights per atom via a
        // difference array, then the exact greedy knapsack fill. The
        // −(1−δ)·Σ Q·C shift is constant across atoms and cannot change the
        // greedy order.
        let oracle = |q: &[(usize, f64)]| -> Vec<(u32, f64)> {
            let mut diff = vec![0.0f64; atoms + 1];
            for &(idx, weight) in q {
                let (a_l, a_u) = interval_endpoints(idx, rn);
                let hi = if a_u == rn { atoms } else { a_u as usize };
                if (a_l as usize) < hi {
                    let wc = weight * cn_of(idx);
                    diff[a_l as usize] += wc;
                    diff[hi] -= wc;
                }
            }
            let mut w = vec![0.0f64; atoms];
            let mut acc = 0.0;
            for (a, slot) in w.iter_mut().enumerate() {
                acc += diff[a];
                *slot = acc;
            }
            greedy_smooth_response(&w, rho)
        };

        // Learner best response in O(rn + n²): within a bucket pair the
        // coefficient is constant, so only the covered mass varies, and
        // prefix sums give its exact extrema per pair.
        let learner_oracle = |mix: &[(&Vec<(u32, f64)>, f64)]| -> usize {
            let mut p = vec![0.0f64; atoms];
            for &(dist, weight) in mix {
                for &(a, mass) in dist {
                    p[a as usize] += weight * mass;
                }
            }
            let total: f64 = p.iter().sum();
            let mut prefix = vec![0.0f64; atoms + 1];
            for a in 0..atoms {
                prefix[a + 1] = prefix[a] + p[a];
            }
            // Covered mass of (a_l, a_u) is reach(a_u) − prefix[a_l].
            let reach =
                |a_u: u32| prefix[a_u as usize] + if a_u == rn { p[rn as usize] } else { 0.0 };
            let positions = |b: u32| -> (u32, u32) {
                let lo = (b - 1) * r;
                let hi = if b == n { rn } else { b * r - 1 };
                (lo, hi)
            };

            struct Extrema {
                min_s: f64,
                arg_min_s: u32,
                max_s: f64,
                arg_max_s: u32,
                min_e: f64,
                arg_min_e: u32,
                max_e: f64,
                arg_max_e: u32,
            }
            let per_bucket: Vec<Extrema> = (1..=n)
                .map(|b| {
                    let (lo, hi) = positions(b);
                    let mut e = Extrema {
                        min_s: f64::INFINITY,
                        arg_min_s: lo,
                        max_s: f64::NEG_INFINITY,
                        arg_max_s: lo,
                        min_e: f64::INFINITY,
                        arg_min_e: lo,
                        max_e: f64::NEG_INFINITY,
                        arg_max_e: lo,
                    };
                    for a in lo..=hi {
                        let s = prefix[a as usize];
                        let t = reach(a);
                        if s < e.min_s {
                            e.min_s = s;
                            e.arg_min_s = a;
                        }
                        if s > e.max_s {
                            e.max_s = s;
                            e.arg_max_s = a;
                        }
                        if t < e.min_e {
                            e.min_e = t;
                            e.arg_min_e = a;
                        }
                        if t > e.max_e {
                            e.max_e = t;
                            e.arg_max_e = a;
                        }
                    }
                    e
                })
                .collect();

            let mut best_value = f64::INFINITY;
            let mut best_pair = (0u32, 0u32);
            for i in 1..=n {
                for j in i..=n {
                    let c = cn[pair_index(i, j, n)];
                    let (cov, endpoints) = if i < j {
                        let ei = &per_bucket[(i - 1) as usize];
                        let ej = &per_bucket[(j - 1) as usize];
                        if c > 0.0 {
                            (ej.min_e - ei.max_s, (ei.arg_max_s, ej.arg_min_e))
                        } else {
                            (ej.max_e - ei.min_s, (ei.arg_min_s, ej.arg_max_e))
                        }
                    } else {
                        // Diagonal pair: ℓ and u share the bucket, so keep
                        // running extrema of prefix over ℓ ≤ u.
                        let (lo, hi) = positions(i);
                        let mut run_min = f64::INFINITY;
                        let mut arg_run_min = lo;
                        let mut run_max = f64::NEG_INFINITY;
                        let mut arg_run_max = lo;
                        let mut cov_min = f64::INFINITY;
                        let mut pair_min = (lo, lo);
                        let mut cov_max = f64::NEG_INFINITY;
                        let mut pair_max = (lo, lo);
                        for a in lo..=hi {
                            let s = prefix[a as usize];
                            if s < run_min {
                                run_min = s;
                                arg_run_min = a;
                            }
                            if s > run_max {
                                run_max = s;
                                arg_run_max = a;
                            }
                            let t = reach(a);
                            if t - run_max < cov_min {
                                cov_min = t - run_max;
                                pair_min = (arg_run_max, a);
                            }
                            if t - run_min > cov_max {
                                cov_max = t - run_min;
                                pair_max = (arg_run_min, a);
                            }
                        }
                        if c > 0.0 {
                            (cov_min, pair_min)
                        } else {
                            (cov_max, pair_max)
                        }
                    };
                    let value = if c == 0.0 {
                        0.0
                    } else {
                        c * (cov - one_minus_delta * total)
                    };
                    let endpoints = if c == 0.0 {
                        (positions(i).0, positions(j).0)
                    } else {
                        endpoints
                    };
                    if value < best_value {
                        best_value = value;
                        best_pair = endpoints;
                    }
                }
            }
            interval_index(best_pair.0, best_pair.1, rn)
        };

        let eps_scaled = (epsilon * (-ln_ls).exp()).max(1e-300);
        let problem = MinimaxProblem {
            num_strategies: strategy_count(rn),
            payoff: &payoff,
            oracle: &oracle,
            learner_oracle: Some(&learner_oracle),
            initial_learner: vec![0],
            initial_adversary: Vec::new(),
            iteration_cap: None,
        };
        let result = solve(&problem, eps_scaled);

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
        let (a_l, a_u) = interval_endpoints(chosen, rn);
        IntervalPrediction {
            lower: GridPoint::new(a_l, rn),
            upper: GridPoint::new(a_u, rn),
            converged: result.converged,
            normalized_value: result.value_upper,
            distribution: result.distribution,
        }
    }

    /// Records the revealed label: V^{G,(i,j)} += Cover − (1 − δ) for the
    /// interval's bucket pair and every G ∋ x.
    pub fn update(
        &mut self,
        x: &Example,
        interval: (GridPoint, GridPoint),
        y: f64,
    ) -> Result<Vec<StateDelta>, IntervalError> {
        let deltas = round_deltas(
            self.grid.n(),
            self.delta,
            x.group_ids(),
            interval.0.value(),
            interval.1.value(),
            y,
        )?;
        self.apply_deltas(&deltas);
        Ok(deltas)
    }

    /// Applies precomputed increments (the transcript replay path).
    pub fn apply_deltas(&mut self, deltas: &[StateDelta]) {
        for d in deltas {
            let CellKey::BucketPair { i, j } = d.cell else {
                panic!("interval state updated with a non-pair cell");
            };
            assert!(i <= j, "interval bucket pairs are ordered");
            *self.v.entry((d.group, (i, j))).or_insert(0.0) += d.value_delta;
        }
        self.rounds += 1;
    }
}

/// A solved round: the sampled interval plus the equilibrium certificate.
#[derive(Clone, Debug)]
pub struct IntervalPrediction {
    pub lower: GridPoint,
    pub upper: GridPoint,
    /// Whether the game solve certified its tolerance before the cap.
    pub converged: bool,
    /// Certified worst case of `distribution` on the e^{−ln L_s} scale.
    pub normalized_value: f64,
    /// The full equilibrium mixture over strategy indices.
    pub distribution: Vec<(usize, f64)>,
}

/// Row index of the ordered bucket pair (i, j), i ≤ j, in the packed upper
/// triangle.
pub fn pair_index(i: u32, j: u32, n: u32) -> usize {
    assert!(1 <= i && i <= j && j <= n);
    let i = i as usize;
    let j = j as usize;
    let n = n as usize;
    (i - 1) * (2 * n - i + 2) / 2 + (j - i)
}

/// The table increments one finished round induces, computed from the
/// serialized float forms so that replaying a loaded transcript reproduces
/// them bit for bit.
pub fn round_deltas(
    n: u32,
    delta: f64,
    group_ids: &[GroupId],
    lower_value: f64,
    upper_value: f64,
    y: f64,
) -> Result<Vec<StateDelta>, IntervalError> {
    if !(0.0..=1.0).contains(&y) || y.is_nan() {
        return Err(IntervalError::Core(CoreError::LabelOutOfRange { value: y }));
    }
    let i = bucket_index(lower_value, n)?;
    let j = bucket_index(upper_value, n)?;
    debug_assert!(i <= j, "bucketing is monotone on ordered endpoints");
    let value_delta = coverage_deviation((lower_value, upper_value), y, delta);
    Ok(group_ids
        .iter()
        .map(|&g| StateDelta {
            group: g,
            cell: CellKey::BucketPair { i, j },
            value_delta,
            moment_delta: None,
        })
        .collect())
}

/// Label-perturbation schedule: ρ = 1/√T and r = ⌈√T/(2nε)⌉, so perturbed
/// labels are (ρ, rn)-smooth by construction.
#[derive(Clone, Copy, Debug)]
pub struct PerturbationConfig {
    epsilon: f64,
    rho: f64,
    r: u32,
}

impl PerturbationConfig {
    pub fn new(epsilon: f64, t: u64, n: u32) -> Result<Self, IntervalError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(IntervalError::InvalidPerturbation { epsilon });
        }
        if t == 0 {
            return Err(IntervalError::TooFewRounds { given: 0, minimum: 1 });
        }
        let sqrt_t = (t as f64).sqrt();
        let r = (sqrt_t / (2.0 * f64::from(n) * epsilon)).ceil().max(1.0) as u32;
        Ok(Self { epsilon, rho: 1.0 / sqrt_t, r })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn r(&self) -> u32 {
        self.r
    }
}

/// The perturbation map at a fixed noise draw: ŷ = (y + ε + noise)/(1 + 2ε).
/// With noise ∈ (−ε, ε) the image always lies strictly inside (0, 1) and the
/// induced density is at most (1 + 2ε)/(2ε).
pub fn perturb_with_noise(y: f64, epsilon: f64, noise: f64) -> f64 {
    (y + epsilon + noise) / (1.0 + 2.0 * epsilon)
}

/// Draws uniform noise and rescales the label into (0, 1).
pub fn perturb_label<R: Rng + ?Sized>(y: f64, config: &PerturbationConfig, rng: &mut R) -> f64 {
    let noise = rng.random_range(-config.epsilon..config.epsilon);
    perturb_with_noise(y, config.epsilon, noise)
}

/// Maps an interval from the rescaled space back to the original label
/// scale: inverse affine on each endpoint, widened by ε per side, clipped to
/// [0, 1]. If the perturbed label was covered, the original label is covered
/// by the widened interval.
pub fn widen_interval(interval: (f64, f64), epsilon: f64) -> (f64, f64) {
    assert!(epsilon >= 0.0);
    let unmap = |e: f64| e * (1.0 + 2.0 * epsilon) - epsilon;
    let lower = (unmap(interval.0) - epsilon).clamp(0.0, 1.0);
    let upper = (unmap(interval.1) + epsilon).clamp(0.0, 1.0);
    (lower, upper)
}

/// The fractional-knapsack separation query: W_i sums Q(ℓ,u)·C^{ℓ,u} over
/// intervals covering atom i/rn (coefficients on the e^{−ln L_s} scale), the
/// greedy fill maximizes Σ mass·W over (ρ, rn)-smooth distributions, and the
/// constraint is violated when that optimum exceeds γ or the weights are not
/// a probability distribution.
pub fn separation_oracle(
    state: &IntervalState,
    x: &Example,
    q: &[(usize, f64)],
    gamma: f64,
    rho: f64,
) -> SeparationOutcome {
    assert!(rho > 0.0 && rho <= 1.0);
    let n = state.grid().n();
    let r = state.grid().r();
    let rn = r * n;
    let atoms = (rn + 1) as usize;
    let total_strategies = strategy_count(rn);

    let ln_ls = state.surrogate_loss();
    let coeffs = state.coefficients(x);
    let cn: Vec<f64> =
        coeffs.iter().map(|c| f64::from(c.sign()) * (c.ln_abs() - ln_ls).exp()).collect();

    let mut mass_total = 0.0f64;
    let mut valid = true;
    let mut diff = vec![0.0f64; atoms + 1];
    for &(idx, weight) in q {
        if idx >= total_strategies || weight < 0.0 || weight.is_nan() {
            valid = false;
            continue;
        }
        mass_total += weight;
        let (a_l, a_u) = interval_endpoints(idx, rn);
        let i = bucket_of_numerator(a_l, r, n);
        let j = bucket_of_numerator(a_u, r, n);
        let hi = if a_u == rn { atoms } else { a_u as usize };
        if (a_l as usize) < hi {
            let wc = weight * cn[pair_index(i, j, n)];
            diff[a_l as usize] += wc;
            diff[hi] -= wc;
        }
    }
    if (mass_total - 1.0).abs() > 1e-9 {
        valid = false;
    }

    let mut w = vec![0.0f64; atoms];
    let mut acc = 0.0;
    for (a, slot) in w.iter_mut().enumerate() {
        acc += diff[a];
        *slot = acc;
    }
    let distribution = greedy_smooth_response(&w, rho);
    let objective: f64 = distribution.iter().map(|&(a, mass)| mass * w[a as usize]).sum();
    if !valid || objective > gamma {
        SeparationOutcome::Violated { distribution, objective }
    } else {
        SeparationOutcome::Feasible
    }
}

/// √(ln(2|𝒢|n²)/(2T)), the rate that balances the fresh surrogate
/// L_0 = 2|𝒢|n² against the horizon; errors when T is too short to keep it
/// below 1/2.
pub fn default_eta(t: u64, groups: &GroupSystem, n: u32) -> Result<f64, IntervalError> {
    let ln_l0 = (2.0 * f64::from(groups.group_count()) * f64::from(n).powi(2)).ln();
    let formula = |t: u64| (ln_l0 / (2.0 * t as f64)).sqrt();
    if t >= 1 && formula(t) < 0.5 {
        return Ok(formula(t));
    }
    let mut minimum = (2.0 * ln_l0).floor().max(1.0) as u64;
    while formula(minimum) >= 0.5 {
        minimum += 1;
    }
    Err(IntervalError::TooFewRounds { given: t, minimum })
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
