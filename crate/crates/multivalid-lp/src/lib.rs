//! Minimax solving for per-round prediction games.
//!
//! Each predictor in this workspace reduces its round to a zero-sum game:
//! the learner picks a distribution over finitely many pure strategies, an
//! adversary answers with the worst constraint from a (possibly huge but
//! oracle-searchable) set, and the learner wants a distribution whose worst
//! case is within ε of the game value min over Q^L of max over Q^A.
//!
//! [`solve`] runs a double-oracle cutting-plane loop: keep restricted sets of
//! learner strategies and adversary constraints, solve the restricted game
//! exactly ([`solve_matrix`], a Bland-rule primal simplex), ask each side's
//! best-response oracle for a violated strategy, and stop when the certified
//! duality gap closes to ε. The result carries an explicit certificate:
//! `value_upper` is the oracle-verified worst case of the returned
//! distribution, `value_lower` a payoff some adversary mixture forces on
//! every learner strategy.
//!
//! [`truncate_coefficients`] snaps payoff coefficients to a dyadic grid
//! 2^{−b} ≤ ε/2 (rounding toward −∞), which perturbs any game value by at
//! most ε/2 while keeping coefficients exactly representable.

mod simplex;

pub use simplex::{solve_matrix, MatrixSolution};

/// A per-round minimax problem. Learner pure strategies are the indices
/// `0..num_strategies`; the caller keeps whatever list those indices point
/// into. Adversary strategies are opaque values produced by `oracle`.
pub struct MinimaxProblem<'a, A> {
    /// Number of learner pure strategies.
    pub num_strategies: usize,
    /// Payoff (cost to the learner, reward to the adversary) of a learner
    /// pure strategy against an adversary strategy. Must be bounded on the
    /// instance.
    pub payoff: &'a dyn Fn(usize, &A) -> f64,
    /// Exact adversary best response: given a learner mixture as sparse
    /// `(strategy index, weight)` pairs (sorted by index, weights summing to
    /// 1), returns an adversary strategy maximizing expected payoff.
    pub oracle: &'a dyn Fn(&[(usize, f64)]) -> A,
    /// Exact learner best response: given an adversary mixture, returns the
    /// index of a learner pure strategy minimizing expected payoff, breaking
    /// ties toward the smallest index. `None` means brute force over all
    /// strategies.
    pub learner_oracle: Option<&'a dyn Fn(&[(&A, f64)]) -> usize>,
    /// Learner strategies seeded into the restricted game.
    pub initial_learner: Vec<usize>,
    /// Adversary strategies seeded into the restricted game.
    pub initial_adversary: Vec<A>,
    /// Overrides the default iteration cap of `10·num_strategies + 1000`.
    pub iteration_cap: Option<usize>,
}

/// An ε-equilibrium certificate.
#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Learner distribution as sorted `(strategy index, weight)` pairs with
    /// positive weights summing to 1.
    pub distribution: Vec<(usize, f64)>,
    /// Oracle-certified worst-case expected payoff of `distribution`.
    pub value_upper: f64,
    /// Best lower bound on the game value: an adversary mixture seen during
    /// the run forces at least this payoff on every learner strategy.
    pub value_lower: f64,
    /// Whether the duality gap closed to ε (plus arithmetic slack) before
    /// the iteration cap.
    pub converged: bool,
    /// Restricted-game solves performed.
    pub iterations: usize,
}

impl SolveResult {
    /// The duality gap `value_upper − value_lower`.
    pub fn gap(&self) -> f64 {
        self.value_upper - self.value_lower
    }
}

/// Solves the minimax problem to additive `epsilon` with a duality-gap
/// certificate. Deterministic: restricted games are solved by a fixed-pivot
/// simplex and all ties break toward smaller indices, so a given problem
/// always returns the identical distribution.
///
/// If the iteration cap is exceeded the best certificate found so far is
/// returned with `converged: false`.
pub fn solve<A: Clone + PartialEq>(problem: &MinimaxProblem<'_, A>, epsilon: f64) -> SolveResult {
    assert!(epsilon > 0.0, "tolerance must be positive");
    assert!(problem.num_strategies > 0, "learner needs at least one strategy");
    let cap = problem.iteration_cap.unwrap_or(10 * problem.num_strategies + 1000);

    let mut learner: Vec<usize> = Vec::new();
    for &i in &problem.initial_learner {
        assert!(i < problem.num_strategies, "seed strategy out of range");
        if !learner.contains(&i) {
            learner.push(i);
        }
    }
    if learner.is_empty() {
        learner.push(0);
    }
    let mut adversary: Vec<A> = Vec::new();
    for a in &problem.initial_adversary {
        if !adversary.contains(a) {
            adversary.push(a.clone());
        }
    }
    if adversary.is_empty() {
        adversary.push((problem.oracle)(&[(learner[0], 1.0)]));
    }

    // Payoff cache for the restricted matrix, grown as the sets grow.
    let mut matrix: Vec<Vec<f64>> = learner
        .iter()
        .map(|&i| adversary.iter().map(|a| (problem.payoff)(i, a)).collect())
        .collect();
    let mut scale: f64 = 1.0;
    for row in &matrix {
        for &v in row {
            scale = scale.max(v.abs());
        }
    }

    let mut best_dist: Vec<(usize, f64)> = Vec::new();
    let mut best_upper = f64::INFINITY;
    let mut best_lower = f64::NEG_INFINITY;
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        iterations += 1;
        let restricted = solve_matrix(&matrix);

        // Learner mixture on global indices, sorted for determinism.
        let mut x: Vec<(usize, f64)> = restricted
            .row_strategy
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(pos, &w)| (learner[pos], w))
            .collect();
        x.sort_unstable_by_key(|&(i, _)| i);

        // Adversary best response certifies this mixture's true worst case.
        let a_star = (problem.oracle)(&x);
        let upper: f64 = x.iter().map(|&(i, w)| w * (problem.payoff)(i, &a_star)).sum();
        scale = scale.max(upper.abs());
        if upper < best_upper {
            best_upper = upper;
            best_dist = x;
        }

        // Learner best response against the restricted adversary mixture
        // certifies a lower bound on the game value.
        let y: Vec<(&A, f64)> = restricted
            .col_strategy
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(pos, &w)| (&adversary[pos], w))
            .collect();
        let i_star = match problem.learner_oracle {
            Some(oracle) => oracle(&y),
            None => {
                let mut best_i = 0usize;
                let mut best_v = f64::INFINITY;
                for i in 0..problem.num_strategies {
                    let v: f64 =
                        y.iter().map(|&(a, w)| w * (problem.payoff)(i, a)).sum();
                    if v < best_v {
                        best_v = v;
                        best_i = i;
                    }
                }
                best_i
            }
        };
        let lower: f64 = y.iter().map(|&(a, w)| w * (problem.payoff)(i_star, a)).sum();
        scale = scale.max(lower.abs());
        best_lower = best_lower.max(lower);

        if best_upper - best_lower <= epsilon + 1e-12 * scale.max(1.0) {
            converged = true;
            break;
        }
        if iterations >= cap {
            break;
        }

        let mut grew = false;
        if !learner.contains(&i_star) {
            learner.push(i_star);
            matrix.push(adversary.iter().map(|a| (problem.payoff)(i_star, a)).collect());
            grew = true;
        }
        if !adversary.contains(&a_star) {
            for (pos, &i) in learner.iter().enumerate() {
                matrix[pos].push((problem.payoff)(i, &a_star));
            }
            adversary.push(a_star);
            grew = true;
        }
        for row in &matrix {
            for &v in row {
                scale = scale.max(v.abs());
            }
        }
        if !grew {
            // Both best responses already sit in the restricted game, so the
            // remaining gap is arithmetic noise; report it honestly.
            break;
        }
    }

    SolveResult {
        distribution: best_dist,
        value_upper: best_upper,
        value_lower: best_lower,
        converged,
        iterations,
    }
}

/// The dyadic grid step for [`truncate_coefficients`]: the largest power of
/// two not exceeding `epsilon / 2`.
pub fn truncation_unit(epsilon: f64) -> f64 {
    assert!(epsilon > 0.0 && epsilon.is_finite(), "tolerance must be positive");
    let mut unit = 1.0f64;
    while unit > epsilon / 2.0 {
        unit *= 0.5;
    }
    unit
}

/// Snaps each value down (toward −∞) to a multiple of a power of two
/// 2^{−b} ≤ ε/2. Every output is exactly representable on that grid and
/// within ε/2 below its input, so substituting truncated coefficients moves
/// any game value by at most ε/2.
pub fn truncate_coefficients(values: &[f64], epsilon: f64) -> Vec<f64> {
    let unit = truncation_unit(epsilon);
    values
        .iter()
        .map(|&v| {
            assert!(v.is_finite(), "coefficients must be finite");
            // Division and multiplication by a power of two are exact.
            (v / unit).floor() * unit
        })
        .collect()
}

/// Error-free transformation: returns `(s, e)` with `s = fl(a + b)` and
/// `a + b = s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Sign of `Σ terms` evaluated in exact real arithmetic: `1`, `-1`, or `0`.
///
/// Accumulates the terms into a nonoverlapping floating-point expansion, so
/// the result does not depend on summation order and is immune to the
/// cancellation and rounding that make naive f64 comparisons of two nearly
/// equal sums unreliable. Used to certify optimality claims (candidate A is
/// at least as good as candidate B) without a tolerance.
///
/// Panics if any term is not finite.
pub fn exact_sum_sign(terms: &[f64]) -> i8 {
    // Invariant: `expansion` holds nonoverlapping components in increasing
    // magnitude whose exact sum equals the exact sum of the terms consumed
    // so far. Growing it by two_sum against each component preserves that,
    // and the largest component then carries the sign of the whole sum.
    let mut expansion: Vec<f64> = Vec::new();
    for &t in terms {
        assert!(t.is_finite(), "terms must be finite");
        let mut carry = t;
        let mut next: Vec<f64> = Vec::with_capacity(expansion.len() + 1);
        for &component in &expansion {
            let (sum, err) = two_sum(carry, component);
            if err != 0.0 {
                next.push(err);
            }
            carry = sum;
        }
        if carry != 0.0 {
            next.push(carry);
        }
        expansion = next;
    }
    match expansion.last() {
        None => 0,
        Some(&top) if top > 0.0 => 1,
        Some(_) => -1,
    }
}
