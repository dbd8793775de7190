//! End-to-end checks for the moment calibrator: finished streams satisfy the
//! deterministic consistency chain linking table magnitudes to empirical
//! central moments, sampled equilibria respect the game value bound under the
//! exact (untruncated) payoffs, the dense-seeded solve agrees with a direct
//! matrix solution, and transcript replay rebuilds the state bit for bit.

use std::collections::BTreeMap;

use multivalid_core::{
    bucket_index, BucketGrid, CellKey, Example, GridPoint, GroupId, GroupSystem, Prediction,
    RoundRecord, StateDelta, Transcript,
};
use multivalid_lp::solve_matrix;
use multivalid_moment::{
    adversary_best_response, bucket_midpoint, reduced_grid, round_deltas, strategy_cell,
    MomentState,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn mk_state(groups: u32, n: u32, n_prime: u32, r: u32, k: u32, eta: f64) -> MomentState {
    let sys = GroupSystem::new(groups, groups).unwrap();
    let grid = BucketGrid::with_moment_buckets(n, n_prime, r).unwrap();
    MomentState::new(sys, grid, k, eta).unwrap()
}

fn poke(state: &mut MomentState, g: GroupId, i: u32, j: u32, dv: f64, dm: f64) {
    state.apply_deltas(&[StateDelta {
        group: g,
        cell: CellKey::BucketPair { i, j },
        value_delta: dv,
        moment_delta: Some(dm),
    }]);
}

/// Runs a full prediction stream and checks, per populated cell, the chain
/// |m^k(S) − m̄ᵏ(S)| ≤ (|M| + k·|V|)/|S| + k/(2n) where m^k(S) is the
/// empirical central moment of the labels landing in that cell. The chain is
/// pure algebra over the update rule, so it must hold on every stream. The
/// tables are recomputed from the raw round records first and must agree
/// with the incremental state exactly.
#[test]
fn finished_streams_satisfy_the_moment_consistency_chain() {
    let t = 2000;
    let (groups, n, n_prime, r, k) = (3u32, 4u32, 4u32, 2u32, 2u32);
    let mut state = mk_state(groups, n, n_prime, r, k, 0.05);
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut records: Vec<(Vec<GroupId>, f64, f64, f64)> = Vec::with_capacity(t);

    for _ in 0..t {
        let side = if rng.random_bool(0.5) { 1 } else { 2 };
        let ids = vec![0u32, side];
        let x = Example::new(state.groups(), ids.clone(), None).unwrap();
        let pred = state.predict(&x, &mut rng, 1e-4);
        assert!(pred.converged);
        let y: f64 = if side == 1 {
            rng.random_range(0.0..0.6)
        } else {
            rng.random_range(0.4..1.0)
        };
        state
            .update(&x, (pred.mean, pred.moment), y)
            .unwrap();
        records.push((ids, pred.mean.value(), pred.moment.value(), y));
    }

    // Independent table reconstruction straight from the stored rounds.
    let mut v: BTreeMap<(GroupId, (u32, u32)), f64> = BTreeMap::new();
    let mut m: BTreeMap<(GroupId, (u32, u32)), f64> = BTreeMap::new();
    let mut cells: BTreeMap<(GroupId, (u32, u32)), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (ids, mu, mk, y) in &records {
        let i = bucket_index(*mu, n).unwrap();
        let j = bucket_index(*mk, n_prime).unwrap();
        let mu_hat = bucket_midpoint(i, n);
        for &g in ids {
            *v.entry((g, (i, j))).or_insert(0.0) += y - mu;
            *m.entry((g, (i, j))).or_insert(0.0) += (y - mu_hat).powi(k as i32) - mk;
            cells.entry((g, (i, j))).or_default().push((*mu, *mk, *y));
        }
    }
    let incremental: Vec<_> = state.table_iter().collect();
    let rebuilt: Vec<_> = cells
        .keys()
        .map(|&(g, (i, j))| (g, i, j, v[&(g, (i, j))], m[&(g, (i, j))]))
        .collect();
    assert_eq!(incremental.len(), rebuilt.len());
    for (a, b) in incremental.iter().zip(&rebuilt) {
        assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2));
        assert_eq!(a.3.to_bits(), b.3.to_bits(), "value table drifted at {a:?}");
        assert_eq!(a.4.to_bits(), b.4.to_bits(), "moment table drifted at {a:?}");
    }

    let mut populated = 0;
    for (&(g, (i, j)), rounds) in &cells {
        let s = rounds.len() as f64;
        if rounds.len() < 30 {
            continue;
        }
        populated += 1;
        let y_bar = rounds.iter().map(|r| r.2).sum::<f64>() / s;
        let mu_bar = rounds.iter().map(|r| r.0).sum::<f64>() / s;
        let m_bar = rounds.iter().map(|r| r.1).sum::<f64>() / s;
        let central = rounds.iter().map(|r| (r.2 - y_bar).powi(k as i32)).sum::<f64>() / s;
        let v_cell = v[&(g, (i, j))];
        let m_cell = m[&(g, (i, j))];

        // V is exactly |S|·(ȳ − μ̄) up to float summation noise.
        assert!(
            (y_bar - mu_bar - v_cell / s).abs() <= 1e-9,
            "cell ({g},{i},{j}): mean identity broke"
        );
        let bound = (m_cell.abs() + f64::from(k) * v_cell.abs()) / s
            + f64::from(k) / (2.0 * f64::from(n));
        assert!(
            (central - m_bar).abs() <= bound + 1e-9,
            "cell ({g},{i},{j}): |{central} − {m_bar}| > {bound}"
        );
    }
    assert!(populated >= 4, "stream too concentrated to exercise the chain");
}

/// The mixed strategy returned by predict must hold the untruncated game to
/// its value bound 1/rn + 1/rn′ + O(ε): truncation moves each payoff by at
/// most ε/2 and the solve certifies the truncated game to ε/2, so the exact
/// worst case over all 2ᵏ adversary vertices stays within 2ε of the bound.
#[test]
fn sampled_equilibria_respect_the_untruncated_value_bound() {
    let (n, n_prime, r, k) = (2u32, 2u32, 2u32, 2u32);
    let epsilon = 1e-3;
    let bound = 1.0 / f64::from(r * n) + 1.0 / f64::from(r * n_prime);
    let mut rng = ChaCha12Rng::seed_from_u64(23);

    for rep in 0..100 {
        let mut state = mk_state(1, n, n_prime, r, k, 0.2);
        for _ in 0..rng.random_range(1..=4usize) {
            let i = rng.random_range(1..=n);
            let j = rng.random_range(1..=n_prime);
            poke(&mut state, 0, i, j, rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        }
        let x = Example::new(state.groups(), vec![0], None).unwrap();
        let pred = state.predict(&x, &mut rng, epsilon);
        assert!(pred.converged, "rep {rep}: dense-seeded solve must converge");
        assert!(
            pred.normalized_value <= bound + epsilon + 1e-9,
            "rep {rep}: certified value {} above {bound}",
            pred.normalized_value
        );

        // Exact payoffs, no truncation anywhere.
        let coeffs = state.coefficients(&x);
        let ln_ls = state.surrogate_loss();
        let strategies = reduced_grid(r, n, n_prime);
        let norm = |s: multivalid_core::SignedLog| {
            f64::from(s.sign()) * (s.ln_abs() - ln_ls).exp()
        };
        let exact = |idx: usize, mask: u64| -> f64 {
            let (i, j) = strategy_cell(idx, n_prime);
            let (mu, mv) = strategies[idx];
            let c = norm(coeffs.c(i, j));
            let d = norm(coeffs.d(i, j));
            let mut u = -mu.value() * c + bucket_midpoint(i, n).powi(k as i32) * d
                - mv.value() * d;
            for ell in 1..=k {
                if mask & (1 << (ell - 1)) != 0 {
                    u += norm(coeffs.f(i, j, ell));
                }
            }
            u
        };
        let worst = (0..(1u64 << k))
            .map(|mask| {
                pred.distribution
                    .iter()
                    .map(|&(idx, w)| w * exact(idx, mask))
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            worst <= bound + 2.0 * epsilon,
            "rep {rep}: exact worst case {worst} exceeds {bound} + 2ε"
        );
    }
}

/// With every learner strategy and every adversary vertex seeded, the double
/// oracle solves the full finite game in one shot; its certified value must
/// match an independent simplex solution of the explicitly built matrix.
#[test]
fn dense_seeded_solve_matches_a_direct_matrix_solution() {
    let (n, n_prime, r, k) = (2u32, 2u32, 2u32, 4u32);
    let epsilon = 1e-6;
    let mut rng = ChaCha12Rng::seed_from_u64(37);

    for rep in 0..30 {
        let mut state = mk_state(2, n, n_prime, r, k, 0.15);
        for _ in 0..rng.random_range(1..=5usize) {
            let g = rng.random_range(0..2u32);
            let i = rng.random_range(1..=n);
            let j = rng.random_range(1..=n_prime);
            poke(&mut state, g, i, j, rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        }
        let x = Example::new(state.groups(), vec![0, 1], None).unwrap();
        let pred = state.predict(&x, &mut rng, epsilon);
        assert!(pred.converged);

        // Rebuild the truncated payoff matrix exactly as the solver saw it.
        let coeffs = state.coefficients(&x);
        let ln_ls = state.surrogate_loss();
        let strategies = reduced_grid(r, n, n_prime);
        let norm = |s: multivalid_core::SignedLog| {
            f64::from(s.sign()) * (s.ln_abs() - ln_ls).exp()
        };
        let term_eps = epsilon / f64::from(k + 1);
        let base: Vec<f64> = strategies
            .iter()
            .enumerate()
            .map(|(idx, &(mu, mv))| {
                let (i, j) = strategy_cell(idx, n_prime);
                -mu.value() * norm(coeffs.c(i, j))
                    + bucket_midpoint(i, n).powi(k as i32) * norm(coeffs.d(i, j))
                    - mv.value() * norm(coeffs.d(i, j))
            })
            .collect();
        let base = multivalid_lp::truncate_coefficients(&base, term_eps);
        let mut f_rows: Vec<Vec<f64>> = Vec::new();
        for i in 1..=n {
            for j in 1..=n_prime {
                let row: Vec<f64> = (1..=k).map(|ell| norm(coeffs.f(i, j, ell))).collect();
                f_rows.push(multivalid_lp::truncate_coefficients(&row, term_eps));
            }
        }
        let matrix: Vec<Vec<f64>> = (0..strategies.len())
            .map(|idx| {
                let (i, j) = strategy_cell(idx, n_prime);
                let cell = ((i - 1) * n_prime + (j - 1)) as usize;
                (0..(1u64 << k))
                    .map(|mask| {
                        let mut u = base[idx];
                        for ell in 0..k {
                            if mask & (1 << ell) != 0 {
                                u += f_rows[cell][ell as usize];
                            }
                        }
                        u
                    })
                    .collect()
            })
            .collect();
        let reference = solve_matrix(&matrix);
        assert!(
            (pred.normalized_value - reference.value).abs() <= 1e-8,
            "rep {rep}: {} vs simplex {}",
            pred.normalized_value,
            reference.value
        );
    }
}

/// The bitwise best response must achieve exactly the maximum that exhaustive
/// enumeration over all 2ᵏ sign vectors finds, for every even order k.
#[test]
fn best_response_matches_exhaustive_enumeration() {
    let (n, n_prime) = (3u32, 3u32);
    let mut rng = ChaCha12Rng::seed_from_u64(41);

    for k in [2u32, 4, 6, 8, 10] {
        for rep in 0..40 {
            let mut state = mk_state(2, n, n_prime, 2, k, 0.1);
            for _ in 0..rng.random_range(1..=6usize) {
                let g = rng.random_range(0..2u32);
                let i = rng.random_range(1..=n);
                let j = rng.random_range(1..=n_prime);
                poke(&mut state, g, i, j, rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            }
            let x = Example::new(state.groups(), vec![0, 1], None).unwrap();
            let coeffs = state.coefficients(&x);

            let total = reduced_grid(2, n, n_prime).len();
            let mut q: Vec<(usize, f64)> = (0..3)
                .map(|_| (rng.random_range(0..total), rng.random::<f64>()))
                .collect();
            let z: f64 = q.iter().map(|&(_, w)| w).sum();
            for entry in &mut q {
                entry.1 /= z;
            }

            let chosen = adversary_best_response(&coeffs, &q);

            // Mass per cell, then the ψ-dependent part of the payoff for
            // every sign vector, with one shared evaluation path.
            let cells = (n * n_prime) as usize;
            let mut mass = vec![0.0f64; cells];
            for &(idx, w) in &q {
                let (i, j) = strategy_cell(idx, n_prime);
                mass[((i - 1) * n_prime + (j - 1)) as usize] += w;
            }
            let value_of = |mask: u64| -> f64 {
                (1..=k)
                    .filter(|ell| mask & (1 << (ell - 1)) != 0)
                    .map(|ell| {
                        (0..cells)
                            .map(|c| {
                                let i = c as u32 / n_prime + 1;
                                let j = c as u32 % n_prime + 1;
                                mass[c] * coeffs.f(i, j, ell).to_value()
                            })
                            .sum::<f64>()
                    })
                    .sum()
            };
            let best = (0..(1u64 << k))
                .map(value_of)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(
                value_of(chosen),
                best,
                "k={k} rep={rep}: oracle mask {chosen:#b} is not optimal"
            );
        }
    }
}

/// Round increments survive JSONL serialization: recomputing deltas from the
/// parsed float forms and replaying them rebuilds both tables bit for bit.
#[test]
fn replayed_deltas_rebuild_the_state_bit_for_bit() {
    let t = 500;
    let (groups, n, n_prime, r, k) = (2u32, 5u32, 4u32, 3u32, 2u32);
    let mut state = mk_state(groups, n, n_prime, r, k, 0.08);
    let mut rng = ChaCha12Rng::seed_from_u64(53);
    let mut transcript = Transcript::default();

    for round in 0..t {
        let ids = if rng.random_bool(0.5) { vec![0u32] } else { vec![0u32, 1] };
        let x = Example::new(state.groups(), ids.clone(), None).unwrap();
        let pred = state.predict(&x, &mut rng, 1e-3);
        let y: f64 = rng.random();
        state.update(&x, (pred.mean, pred.moment), y).unwrap();
        transcript.push(RoundRecord {
            round,
            group_ids: ids,
            prediction: Prediction::Moment {
                mean: pred.mean.value(),
                moment: pred.moment.value(),
            },
            label: y,
            deltas: Vec::new(),
        });
    }

    let mut buf = Vec::new();
    transcript.write_jsonl(&mut buf).unwrap();
    let parsed = Transcript::read_jsonl(buf.as_slice()).unwrap();

    let mut replayed = mk_state(groups, n, n_prime, r, k, 0.08);
    for record in parsed.rounds() {
        let Prediction::Moment { mean, moment } = record.prediction else {
            panic!("stream kind changed mid-transcript");
        };
        let deltas =
            round_deltas(n, n_prime, k, &record.group_ids, mean, moment, record.label).unwrap();
        replayed.apply_deltas(&deltas);
    }

    let a: Vec<_> = state.table_iter().collect();
    let b: Vec<_> = replayed.table_iter().collect();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.0, x.1, x.2), (y.0, y.1, y.2));
        assert_eq!(x.3.to_bits(), y.3.to_bits());
        assert_eq!(x.4.to_bits(), y.4.to_bits());
    }
    assert_eq!(state.rounds(), replayed.rounds());
}

/// Identical seeds give identical predictions, including the full support.
#[test]
fn prediction_is_deterministic_for_a_fixed_seed() {
    let mut state = mk_state(2, 3, 2, 2, 2, 0.12);
    poke(&mut state, 0, 1, 1, 2.5, -1.0);
    poke(&mut state, 1, 3, 2, -1.75, 0.5);
    let x = Example::new(state.groups(), vec![0, 1], None).unwrap();

    let mut rng_a = ChaCha12Rng::seed_from_u64(97);
    let mut rng_b = ChaCha12Rng::seed_from_u64(97);
    let a = state.predict(&x, &mut rng_a, 1e-4);
    let b = state.predict(&x, &mut rng_b, 1e-4);

    assert_eq!(a.mean, b.mean);
    assert_eq!(a.moment, b.moment);
    assert_eq!(a.distribution.len(), b.distribution.len());
    for (p, q) in a.distribution.iter().zip(&b.distribution) {
        assert_eq!(p.0, q.0);
        assert_eq!(p.1.to_bits(), q.1.to_bits());
    }
    assert_eq!(a.normalized_value.to_bits(), b.normalized_value.to_bits());
}
