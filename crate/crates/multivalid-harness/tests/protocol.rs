//! End-to-end protocol checks: the label adversary commits before seeing the
//! realized prediction, reports agree with a brute-force recount of the raw
//! transcript, reruns are bit-identical, and the command-line surface writes
//! the artifacts it promises.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use multivalid_core::{
    bucket_index, cover, BucketGrid, Example, GroupSystem, Prediction, RoundRecord, Transcript,
};
use multivalid_harness::{
    multivalidity_report, run_simulation, Adversary, AdversaryConfig, GroupLaw, LearnerView,
    MultivalidityReport, PredictorSpec, ReportKind, SimulationConfig, Smoothing,
};
use multivalid_mean::MeanState;
use multivalid_moment::bucket_midpoint;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn mean_config(t: u64, learner_seed: u64, adversary: AdversaryConfig) -> SimulationConfig {
    SimulationConfig {
        t,
        group_count: 2,
        membership_rate: 0.7,
        predictor: PredictorSpec::Mean { n: 4, r: 3, eta: None },
        adversary,
        lambda: 0.05,
        learner_seed,
        stream_seed: 9,
    }
}

fn two_laws() -> Vec<GroupLaw> {
    vec![GroupLaw::bernoulli(0.3), GroupLaw { rate: 0.6, spread: 0.4 }]
}

// ---------------------------------------------------------------------------
// Commitment order.
// ---------------------------------------------------------------------------

/// A fresh adversary fed only public data (group memberships, published mixed
/// strategies, finished round records) reproduces every committed label law
/// of a live run. Nothing private to the learner can enter the commitment.
#[test]
fn adaptive_commitments_replay_from_public_data_alone() {
    let groups = GroupSystem::new(3, 3).unwrap();
    let grid = BucketGrid::new(4, 5).unwrap();
    let eta = 0.05;
    let mut learner = MeanState::new(groups, grid, eta).unwrap();
    let config = AdversaryConfig::adaptive(7);
    let view = LearnerView::Mean { n: 4 };
    let mut adversary = Adversary::new(config.clone(), view, eta, 3).unwrap();
    let mut learner_rng = ChaCha12Rng::seed_from_u64(11);
    let mut stream_rng = ChaCha12Rng::seed_from_u64(13);

    let mut trace = Vec::new();
    for round in 0..40u64 {
        let ids: Vec<u32> = (0..3).filter(|_| stream_rng.random_bool(0.6)).collect();
        let x = Example::new(&groups, ids.clone(), None).unwrap();
        let published: Vec<(Prediction, f64)> = learner
            .predict_distribution(&x)
            .into_iter()
            .map(|(gp, w)| (Prediction::Mean { value: gp.value() }, w))
            .collect();
        let law = adversary.commit(round, &ids, &published);
        // Committing twice must not change the answer: no hidden state moves.
        assert_eq!(law, adversary.commit(round, &ids, &published));
        // The label is fixed before the learner realizes its draw.
        let y = adversary.draw(law);
        let realized = learner.predict(&x, &mut learner_rng);
        let deltas = learner.update(&x, realized, y).unwrap();
        let record = RoundRecord {
            round,
            group_ids: ids.clone(),
            prediction: Prediction::Mean { value: realized.value() },
            label: y,
            deltas,
        };
        adversary.observe(&record).unwrap();
        trace.push((ids, published, law, record));
    }

    let mut replay = Adversary::new(config, view, eta, 3).unwrap();
    for (round, (ids, published, law, record)) in trace.iter().enumerate() {
        let recommitted = replay.commit(round as u64, ids, published);
        assert_eq!(recommitted, *law, "commitment diverged at round {round}");
        replay.observe(record).unwrap();
    }
}

/// Swapping the learner's seed changes its realized draws but cannot move the
/// adversary: memberships are identical, the round-0 label (committed while
/// both learner states are still identical) is identical, and with a
/// non-adaptive adversary the whole label sequence is identical.
#[test]
fn learner_randomness_never_reaches_the_adversary() {
    let adaptive = AdversaryConfig::adaptive(5);
    let a = run_simulation(&mean_config(60, 1, adaptive.clone())).unwrap();
    let b = run_simulation(&mean_config(60, 2, adaptive)).unwrap();
    let (ra, rb) = (a.transcript.rounds(), b.transcript.rounds());
    for (x, y) in ra.iter().zip(rb) {
        assert_eq!(x.group_ids, y.group_ids, "stream draws moved with the learner seed");
    }
    assert_eq!(ra[0].label, rb[0].label, "round-0 commitment saw learner randomness");
    assert!(
        ra.iter().zip(rb).any(|(x, y)| x.prediction != y.prediction),
        "learner seeds 1 and 2 realized identical prediction sequences"
    );

    let iid = AdversaryConfig::iid(two_laws(), 5);
    let a = run_simulation(&mean_config(60, 1, iid.clone())).unwrap();
    let b = run_simulation(&mean_config(60, 2, iid)).unwrap();
    for (x, y) in a.transcript.rounds().iter().zip(b.transcript.rounds()) {
        assert_eq!(x.label, y.label, "iid labels moved with the learner seed");
    }
}

// ---------------------------------------------------------------------------
// Report vs brute-force recount.
// ---------------------------------------------------------------------------

fn assert_cells_match<K: Ord + std::fmt::Debug>(
    report: &MultivalidityReport,
    oracle: &BTreeMap<K, (u64, f64, f64, f64)>,
    key_of: impl Fn(&multivalid_harness::ReportCell) -> K,
) {
    assert_eq!(report.cells.len(), oracle.len());
    for cell in &report.cells {
        let key = key_of(cell);
        let &(count, stat_true, stat_pred, err) = oracle.get(&key).unwrap_or_else(|| {
            panic!("report invented cell {key:?}");
        });
        assert_eq!(cell.count, count, "count of {key:?}");
        assert!(close(cell.stat_true, stat_true), "stat_true of {key:?}");
        assert!(close(cell.stat_pred, stat_pred), "stat_pred of {key:?}");
        assert!(close(cell.abs_error_over_t, err), "error of {key:?}");
    }
}

#[test]
fn mean_report_matches_a_brute_force_recount() {
    let outcome = run_simulation(&mean_config(400, 3, AdversaryConfig::iid(two_laws(), 5))).unwrap();
    let t = outcome.report.t as f64;

    // count, sum_y, sum_mu, v per (group, bucket).
    let mut acc: BTreeMap<(u32, u32), (u64, f64, f64, f64)> = BTreeMap::new();
    for rec in outcome.transcript.rounds() {
        let mu = rec.prediction.as_mean().unwrap();
        let i = bucket_index(mu, 4).unwrap();
        for &g in &rec.group_ids {
            let e = acc.entry((g, i)).or_default();
            e.0 += 1;
            e.1 += rec.label;
            e.2 += mu;
            e.3 += rec.label - mu;
        }
    }
    let oracle: BTreeMap<(u32, u32), (u64, f64, f64, f64)> = acc
        .into_iter()
        .map(|(k, (c, sy, sm, v))| (k, (c, sy / c as f64, sm / c as f64, v.abs() / t)))
        .collect();
    let alpha = oracle.values().map(|e| e.3).fold(0.0, f64::max);

    assert_cells_match(&outcome.report, &oracle, |c| (c.group, c.bucket_i));
    assert!(close(outcome.report.alpha, alpha));
    assert!(outcome.report.beta.is_none() && outcome.report.coverage.is_none());
}

#[test]
fn moment_report_matches_a_brute_force_recount() {
    let (n, n_prime, k) = (3u32, 3u32, 2u32);
    let config = SimulationConfig {
        t: 300,
        group_count: 2,
        membership_rate: 0.7,
        predictor: PredictorSpec::Moment { n, n_prime, r: 2, k, eta: None, lp_epsilon: 1e-6 },
        adversary: AdversaryConfig::iid(
            vec![GroupLaw { rate: 0.4, spread: 0.5 }, GroupLaw { rate: 0.6, spread: 0.3 }],
            5,
        ),
        lambda: 0.05,
        learner_seed: 3,
        stream_seed: 9,
    };
    let outcome = run_simulation(&config).unwrap();
    let t = outcome.report.t as f64;

    // count, sum_y, v, m per (group, i, j); second pass for the central moment.
    let mut acc: BTreeMap<(u32, u32, u32), (u64, f64, f64, f64, f64)> = BTreeMap::new();
    for rec in outcome.transcript.rounds() {
        let (mean, moment) = rec.prediction.as_moment().unwrap();
        let i = bucket_index(mean, n).unwrap();
        let j = bucket_index(moment, n_prime).unwrap();
        for &g in &rec.group_ids {
            let e = acc.entry((g, i, j)).or_default();
            e.0 += 1;
            e.1 += rec.label;
            e.2 += rec.label - mean;
            e.3 += (rec.label - bucket_midpoint(i, n)).powi(k as i32) - moment;
            e.4 += moment;
        }
    }
    let mut central: BTreeMap<(u32, u32, u32), f64> = BTreeMap::new();
    for rec in outcome.transcript.rounds() {
        let (mean, moment) = rec.prediction.as_moment().unwrap();
        let i = bucket_index(mean, n).unwrap();
        let j = bucket_index(moment, n_prime).unwrap();
        for &g in &rec.group_ids {
            let e = acc[&(g, i, j)];
            *central.entry((g, i, j)).or_default() +=
                (rec.label - e.1 / e.0 as f64).powi(k as i32);
        }
    }
    let oracle: BTreeMap<(u32, u32, u32), (u64, f64, f64, f64)> = acc
        .iter()
        .map(|(&key, &(c, _, v, m, sp))| {
            let err = (v.abs() / t).max(m.abs() / t);
            (key, (c, central[&key] / c as f64, sp / c as f64, err))
        })
        .collect();
    let alpha = oracle.values().map(|e| e.3).fold(0.0, f64::max);

    assert_cells_match(&outcome.report, &oracle, |c| (c.group, c.bucket_i, c.bucket_j.unwrap()));
    assert!(close(outcome.report.alpha, alpha));
    let beta = f64::from(k + 1) * alpha + f64::from(k) / (2.0 * f64::from(n));
    assert!(close(outcome.report.beta.unwrap(), beta));

    // The published per-cell detail carries the mean-side tables too.
    for cell in &outcome.report.cells {
        let key = (cell.group, cell.bucket_i, cell.bucket_j.unwrap());
        let (count, sum_y, v, ..) = acc[&key];
        let detail = cell.detail.as_ref().unwrap();
        assert!(close(detail.mean_true, sum_y / count as f64));
        assert!(close(detail.mean_error_over_t, v.abs() / t));
    }
}

#[test]
fn interval_report_matches_a_brute_force_recount() {
    let (n, delta) = (3u32, 0.2f64);
    let config = SimulationConfig {
        t: 300,
        group_count: 2,
        membership_rate: 0.7,
        predictor: PredictorSpec::Interval {
            n,
            delta,
            smoothing: Smoothing::AssumeSmooth { r: 2, rho: 0.2 },
            eta: None,
            lp_epsilon: 1e-4,
        },
        adversary: AdversaryConfig::iid(
            vec![GroupLaw { rate: 0.5, spread: 0.8 }, GroupLaw { rate: 0.4, spread: 0.4 }],
            5,
        ),
        lambda: 0.05,
        learner_seed: 3,
        stream_seed: 9,
    };
    let outcome = run_simulation(&config).unwrap();
    let t = outcome.report.t as f64;

    let mut covered_rounds = 0u64;
    let mut acc: BTreeMap<(u32, u32, u32), (u64, f64)> = BTreeMap::new();
    for rec in outcome.transcript.rounds() {
        let (lower, upper) = rec.prediction.as_interval().unwrap();
        let covered = cover(lower, upper, rec.label);
        covered_rounds += u64::from(covered);
        let v = if covered { delta } else { -(1.0 - delta) };
        let key_i = bucket_index(lower, n).unwrap();
        let key_j = bucket_index(upper, n).unwrap();
        for &g in &rec.group_ids {
            let e = acc.entry((g, key_i, key_j)).or_default();
            e.0 += 1;
            e.1 += v;
        }
    }
    let oracle: BTreeMap<(u32, u32, u32), (u64, f64, f64, f64)> = acc
        .into_iter()
        .map(|(key, (c, v))| (key, (c, v / c as f64 + (1.0 - delta), 1.0 - delta, v.abs() / t)))
        .collect();
    let alpha = oracle.values().map(|e| e.3).fold(0.0, f64::max);

    assert_cells_match(&outcome.report, &oracle, |c| (c.group, c.bucket_i, c.bucket_j.unwrap()));
    assert!(close(outcome.report.alpha, alpha));
    assert!(close(outcome.report.coverage.unwrap(), covered_rounds as f64 / t));
}

// ---------------------------------------------------------------------------
// Determinism and serialization.
// ---------------------------------------------------------------------------

#[test]
fn transcripts_rerun_bit_identical_and_survive_jsonl() {
    let config = mean_config(120, 4, AdversaryConfig::adaptive(6));
    let a = run_simulation(&config).unwrap();
    let b = run_simulation(&config).unwrap();

    let mut ja = Vec::new();
    let mut jb = Vec::new();
    a.transcript.write_jsonl(&mut ja).unwrap();
    b.transcript.write_jsonl(&mut jb).unwrap();
    assert_eq!(ja, jb, "identical configs produced different transcripts");

    let read = Transcript::read_jsonl(BufReader::new(&ja[..])).unwrap();
    let groups = GroupSystem::new(2, 2).unwrap();
    let grid = BucketGrid::new(4, 3).unwrap();
    let audited = multivalidity_report(&read, &groups, &grid, ReportKind::Mean, 0.05).unwrap();
    assert_eq!(
        serde_json::to_string(&audited).unwrap(),
        serde_json::to_string(&a.report).unwrap(),
        "auditing the stored transcript changed the report"
    );
}

// ---------------------------------------------------------------------------
// Command-line surface.
// ---------------------------------------------------------------------------

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("multivalid-protocol-{tag}-{}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_multivalid")).args(args).output().unwrap()
}

fn last_json_line(out: &std::process::Output) -> serde_json::Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(stdout.lines().last().expect("no stdout")).unwrap()
}

#[test]
fn cli_simulation_artifacts_audit_back_to_the_same_alpha() {
    let dir = scratch("sim-mean");
    let csv = dir.join("cells.csv");
    let summary = dir.join("summary.json");
    let transcript = dir.join("transcript.jsonl");
    let out = run_cli(&[
        "simulate-mean",
        "--t",
        "200",
        "--groups",
        "2",
        "--n",
        "4",
        "--r",
        "3",
        "--rates",
        "0.3,0.7",
        "--report-csv",
        csv.to_str().unwrap(),
        "--summary-json",
        summary.to_str().unwrap(),
        "--transcript-out",
        transcript.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let printed = last_json_line(&out);
    assert_eq!(printed["kind"], "mean");
    assert_eq!(printed["t"], 200);
    let header = fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("group_id,bucket_i,bucket_j,count,stat_true,stat_pred,abs_error_over_T"));
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(stored["alpha"], printed["alpha"]);

    let audit = run_cli(&[
        "report",
        "--transcript",
        transcript.to_str().unwrap(),
        "--kind",
        "mean",
        "--groups",
        "2",
        "--n",
        "4",
        "--r",
        "3",
    ]);
    assert!(audit.status.success(), "stderr: {}", String::from_utf8_lossy(&audit.stderr));
    assert_eq!(last_json_line(&audit)["alpha"], printed["alpha"]);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_enforce_bound_separates_pass_from_fail() {
    let dir = scratch("enforce");
    let make = |label: f64, path: &PathBuf| {
        let mut transcript = Transcript::new();
        for round in 0..5000u64 {
            transcript.push(RoundRecord {
                round,
                group_ids: vec![0],
                prediction: Prediction::Mean { value: 0.0 },
                label,
                deltas: Vec::new(),
            });
        }
        transcript.write_jsonl(BufWriter::new(File::create(path).unwrap())).unwrap();
    };
    let failing = dir.join("failing.jsonl");
    let passing = dir.join("passing.jsonl");
    make(1.0, &failing);
    make(0.0, &passing);

    let base = |path: &PathBuf| {
        vec![
            "report".to_string(),
            "--transcript".to_string(),
            path.to_str().unwrap().to_string(),
            "--kind".to_string(),
            "mean".to_string(),
            "--groups".to_string(),
            "1".to_string(),
            "--n".to_string(),
            "2".to_string(),
            "--r".to_string(),
            "10".to_string(),
            "--enforce-bound".to_string(),
        ]
    };
    let args_fail = base(&failing);
    let args_pass = base(&passing);
    let out = run_cli(&args_fail.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json_line(&out)["pass"], false);

    let out = run_cli(&args_pass.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json_line(&out)["pass"], true);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_wrap_residuals_emits_an_interval_per_row() {
    let dir = scratch("wrap");
    let input = dir.join("stream.csv");
    let intervals = dir.join("intervals.csv");
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let mut csv = String::from("groups,label,point_prediction\n");
    for i in 0..40 {
        let fx: f64 = rng.random_range(0.3..0.7);
        let y = (fx + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0);
        let groups = if i % 3 == 0 { "0;1" } else if i % 3 == 1 { "0" } else { "1" };
        csv.push_str(&format!("{groups},{y},{fx}\n"));
    }
    fs::write(&input, &csv).unwrap();

    let out = run_cli(&[
        "wrap-residuals",
        "--input",
        input.to_str().unwrap(),
        "--groups",
        "2",
        "--n",
        "3",
        "--r",
        "4",
        "--delta",
        "0.2",
        "--rho",
        "0.25",
        "--widen",
        "0.05",
        "--intervals-out",
        intervals.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json_line(&out)["kind"], "interval");

    let rows: Vec<String> = fs::read_to_string(&intervals)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(rows[0], "row,point_prediction,label,lower,upper,covered");
    assert_eq!(rows.len(), 41);
    for row in &rows[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6);
        let lower: f64 = fields[3].parse().unwrap();
        let upper: f64 = fields[4].parse().unwrap();
        assert!(lower <= upper);
        assert!(fields[5] == "true" || fields[5] == "false");
    }
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_batch_train_then_eval_round_trips_a_model() {
    let dir = scratch("batch");
    let train = dir.join("train.csv");
    let eval = dir.join("eval.csv");
    let model = dir.join("model.json");
    let preds = dir.join("preds.csv");
    let mut csv = String::from("groups,label\n");
    for i in 0..50 {
        let (groups, label) = match i % 4 {
            0 => ("0", 0.2),
            1 => ("1", 0.8),
            2 => ("0;1", 0.5),
            _ => ("", 0.4),
        };
        csv.push_str(&format!("{groups},{label}\n"));
    }
    fs::write(&train, &csv).unwrap();
    fs::write(&eval, "groups,label\n0,0\n1,0\n0;1,0\n").unwrap();

    let out = run_cli(&[
        "batch-train",
        "--input",
        train.to_str().unwrap(),
        "--groups",
        "2",
        "--kind",
        "mean",
        "--n",
        "3",
        "--r",
        "3",
        "--model-out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let trained = last_json_line(&out);
    assert_eq!(trained["kind"], "mean");
    assert_eq!(trained["rounds"], 50);

    let out = run_cli(&[
        "batch-eval",
        "--model",
        model.to_str().unwrap(),
        "--input",
        eval.to_str().unwrap(),
        "--draws",
        "5",
        "--seed",
        "3",
        "--predictions-out",
        preds.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> =
        fs::read_to_string(&preds).unwrap().lines().map(str::to_string).collect();
    assert_eq!(rows[0], "row,draws,mean");
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1], "5");
        let avg: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&avg));
    }
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_rejects_bad_configs_with_distinct_exit_codes() {
    // Domain validation: exit 1, error names the field.
    let out = run_cli(&["simulate-mean", "--t", "10", "--membership-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("membership_rate"));

    // Argument wiring: perturbation and assumed smoothness are exclusive.
    let out = run_cli(&[
        "simulate-interval",
        "--perturb-epsilon",
        "0.1",
        "--r",
        "3",
        "--rho",
        "0.2",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot be used with"));
}
