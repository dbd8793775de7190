//! Exact equilibrium of a finite zero-sum matrix game.
//!
//! Rows minimize, columns maximize. The game is reduced to the classical
//! linear program over a shifted-positive matrix P = shift − M: maximizing
//! 1ᵀu subject to Pu ≤ 1, u ≥ 0 yields the column strategy u/Σu and game
//! value shift − 1/Σu, while the duals under the slack columns yield the row
//! strategy. The simplex uses Bland's rule throughout, so pivoting is
//! deterministic and cannot cycle.

/// Pivot threshold on the normalized tableau (entries are O(1) by
/// construction).
const TOL: f64 = 1e-12;

/// An exact mixed equilibrium of a finite matrix game.
#[derive(Clone, Debug)]
pub struct MatrixSolution {
    /// Game value from the row (minimizing) player's perspective.
    pub value: f64,
    /// Row player's optimal mixture, indexed like the input rows.
    pub row_strategy: Vec<f64>,
    /// Column player's optimal mixture, indexed like the input columns.
    pub col_strategy: Vec<f64>,
}

/// Solves min over row mixtures of max over column mixtures of xᵀMy.
///
/// Every row must have the same length and every entry must be finite. The
/// matrix is rescaled by a power of two before pivoting, so multiplying all
/// payoffs by a power of two reproduces the identical pivot path and returns
/// bitwise-identical strategies.
pub fn solve_matrix(payoffs: &[Vec<f64>]) -> MatrixSolution {
    let rows = payoffs.len();
    assert!(rows > 0, "matrix game needs at least one row");
    let cols = payoffs[0].len();
    assert!(cols > 0, "matrix game needs at least one column");

    let mut max_abs = 0.0f64;
    let mut max_entry = f64::NEG_INFINITY;
    for row in payoffs {
        assert_eq!(row.len(), cols, "ragged payoff matrix");
        for &v in row {
            assert!(v.is_finite(), "non-finite payoff");
            max_abs = max_abs.max(v.abs());
            max_entry = max_entry.max(v);
        }
    }
    // Normalize by a power of two so pivot decisions are scale-invariant.
    let norm = if max_abs == 0.0 { 1.0 } else { max_abs.log2().floor().exp2() };
    let shifted_max = max_entry / norm;
    let shift = 1.0 + shifted_max;

    // Tableau for: maximize Σu subject to (shift − M/norm)·u ≤ 1, u ≥ 0.
    // Columns 0..cols are u, columns cols..cols+rows are slacks.
    let width = cols + rows;
    let mut tab: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            let mut row: Vec<f64> = (0..width).map(|_| 0.0).collect();
            for c in 0..cols {
                row[c] = shift - payoffs[r][c] / norm;
            }
            row[cols + r] = 1.0;
            row
        })
        .collect();
    let mut rhs: Vec<f64> = (0..rows).map(|_| 1.0).collect();
    let mut basis: Vec<usize> = (0..rows).map(|r| cols + r).collect();
    // Reduced costs c_j − z_j for the maximization.
    let mut reduced: Vec<f64> = (0..width).map(|j| if j < cols { 1.0 } else { 0.0 }).collect();

    // Columns whose positive reduced cost is unsupported by any pivotable
    // tableau entry under the current basis. The exact LP is bounded (every
    // constraint coefficient starts at 1 or above), so such a column's
    // apparent improvement is accumulated float noise in `reduced`; it is
    // ignored until the basis next changes.
    let mut dismissed: Vec<bool> = (0..width).map(|_| false).collect();

    loop {
        // Bland: smallest improving column index not dismissed as noise.
        let Some(enter) = (0..width).find(|&j| reduced[j] > TOL && !dismissed[j]) else {
            break;
        };
        // Ratio test; among minimal ratios, leave by smallest basis index.
        let mut best_ratio = f64::INFINITY;
        for r in 0..rows {
            if tab[r][enter] > TOL {
                best_ratio = best_ratio.min(rhs[r] / tab[r][enter]);
            }
        }
        if !best_ratio.is_finite() {
            dismissed[enter] = true;
            continue;
        }
        // Tie band scaled by |best_ratio|: the ratio can go negative when a
        // sub-threshold column entry let a row's rhs drift below zero, and
        // the band must stay positive there so the argmin row qualifies.
        let band = TOL * (1.0 + best_ratio.abs());
        let leave = (0..rows)
            .filter(|&r| tab[r][enter] > TOL && rhs[r] / tab[r][enter] <= best_ratio + band)
            .min_by_key(|&r| basis[r])
            .expect("ratio test found a row");
        for flag in &mut dismissed {
            *flag = false;
        }

        // Pivot.
        let pivot = tab[leave][enter];
        for j in 0..width {
            tab[leave][j] /= pivot;
        }
        rhs[leave] /= pivot;
        for r in 0..rows {
            if r != leave && tab[r][enter].abs() > 0.0 {
                let factor = tab[r][enter];
                for j in 0..width {
                    tab[r][j] -= factor * tab[leave][j];
                }
                rhs[r] -= factor * rhs[leave];
                if rhs[r].abs() < TOL {
                    rhs[r] = rhs[r].max(0.0);
                }
            }
        }
        let factor = reduced[enter];
        for j in 0..width {
            reduced[j] -= factor * tab[leave][j];
        }
        basis[leave] = enter;
    }

    // Column strategy from the basic u variables.
    let mut u: Vec<f64> = (0..cols).map(|_| 0.0).collect();
    for r in 0..rows {
        if basis[r] < cols {
            u[basis[r]] = rhs[r].max(0.0);
        }
    }
    let sum_u: f64 = u.iter().sum();
    assert!(sum_u > 0.0, "positive game must have a positive optimum");
    let col_strategy: Vec<f64> = u.iter().map(|&v| v / sum_u).collect();

    // Row strategy from the duals under the slack columns.
    let mut w: Vec<f64> = (0..rows).map(|r| (-reduced[cols + r]).max(0.0)).collect();
    let sum_w: f64 = w.iter().sum();
    assert!(sum_w > 0.0, "dual optimum must be positive");
    for v in &mut w {
        *v /= sum_w;
    }

    MatrixSolution { value: norm * (shift - 1.0 / sum_u), row_strategy: w, col_strategy }
}
