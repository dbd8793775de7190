//! Command-line front end: seeded simulations, residual wrapping, batch
//! training and evaluation, and transcript audits. Every command prints the
//! machine-readable summary JSON on stdout; `--enforce-bound` turns a failed
//! theorem-bound check into exit code 2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use multivalid_core::{cover, Example, GroupSystem, Prediction, RoundRecord, Transcript};
use multivalid_harness::{
    interval_default_eta, moment_default_eta, multivalidity_report, run_simulation,
    write_report_csv, AdversaryConfig, AdversaryKind, GroupLaw, HarnessError, MultivalidityReport,
    PredictorSpec, ReportKind, Smoothing, SimulationConfig,
};
use multivalid_interval::IntervalState;
use multivalid_mean::EtaMode;
use multivalid_wrappers::{batch_train, BatchConfig, BatchModel, BatchOutput, ResidualWrapper};

#[derive(Parser)]
#[command(
    name = "multivalid",
    version,
    about = "Online multivalid prediction: simulations, wrappers, batch conversion, audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate online mean multicalibration against a label adversary.
    SimulateMean(SimulateMeanArgs),
    /// Simulate mean-conditioned k-th moment multicalibration.
    SimulateMoment(SimulateMomentArgs),
    /// Simulate multivalid prediction intervals.
    SimulateInterval(SimulateIntervalArgs),
    /// Run the residual wrapper over a CSV stream with point predictions.
    WrapResiduals(WrapResidualsArgs),
    /// Train a batch model from a labeled CSV stream.
    BatchTrain(BatchTrainArgs),
    /// Sample batch predictions from a trained model over a CSV stream.
    BatchEval(BatchEvalArgs),
    /// Audit a stored transcript against a theorem bound.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AdversaryChoice {
    Iid,
    Shift,
    Adaptive,
}

#[derive(Args)]
struct AdversaryArgs {
    /// Adversary family.
    #[arg(long, value_enum, default_value_t = AdversaryChoice::Iid)]
    adversary: AdversaryChoice,
    /// Per-group label means, comma separated (default 0.5 everywhere).
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Per-group uniform window widths, comma separated (default 0:
    /// Bernoulli labels).
    #[arg(long, value_delimiter = ',')]
    spreads: Vec<f64>,
    /// Post-shift per-group means (shift adversary only).
    #[arg(long, value_delimiter = ',')]
    shift_rates: Vec<f64>,
    /// Post-shift window widths (shift adversary only).
    #[arg(long, value_delimiter = ',')]
    shift_spreads: Vec<f64>,
    /// Round at which the shift adversary switches laws.
    #[arg(long, default_value_t = 0)]
    shift_round: u64,
    #[arg(long, default_value_t = 2)]
    adversary_seed: u64,
}

impl AdversaryArgs {
    fn build(&self, groups: u32) -> Result<AdversaryConfig, HarnessError> {
        let laws = laws_from(&self.rates, &self.spreads, groups, "rates")?;
        let kind = match self.adversary {
            AdversaryChoice::Iid => AdversaryKind::Iid,
            AdversaryChoice::Adaptive => {
                return Ok(AdversaryConfig::adaptive(self.adversary_seed))
            }
            AdversaryChoice::Shift => AdversaryKind::Shift {
                shifted_laws: laws_from(
                    &self.shift_rates,
                    &self.shift_spreads,
                    groups,
                    "shift_rates",
                )?,
                shift_round: self.shift_round,
            },
        };
        Ok(AdversaryConfig { kind, laws, seed: self.adversary_seed })
    }
}

fn laws_from(
    rates: &[f64],
    spreads: &[f64],
    groups: u32,
    field: &'static str,
) -> Result<Vec<GroupLaw>, HarnessError> {
    let rates: Vec<f64> =
        if rates.is_empty() { vec![0.5; groups as usize] } else { rates.to_vec() };
    if rates.len() != groups as usize {
        return Err(HarnessError::InvalidConfig {
            field,
            reason: format!("{} values given for {groups} groups", rates.len()),
        });
    }
    if !(spreads.is_empty() || spreads.len() == groups as usize) {
        return Err(HarnessError::InvalidConfig {
            field: "spreads",
            reason: format!("{} values given for {groups} groups", spreads.len()),
        });
    }
    Ok(rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| GroupLaw { rate, spread: spreads.get(i).copied().unwrap_or(0.0) })
        .collect())
}

#[derive(Args)]
struct OutputArgs {
    /// Write the per-cell audit table here.
    #[arg(long)]
    report_csv: Option<PathBuf>,
    /// Write the summary JSON here (always also printed on stdout).
    #[arg(long)]
    summary_json: Option<PathBuf>,
    /// Write the transcript here as JSON lines.
    #[arg(long)]
    transcript_out: Option<PathBuf>,
    /// Exit with code 2 when the audit exceeds the theorem bound.
    #[arg(long)]
    enforce_bound: bool,
}

impl OutputArgs {
    fn emit(
        &self,
        report: &MultivalidityReport,
        transcript: Option<&Transcript>,
    ) -> Result<u8, HarnessError> {
        if let Some(path) = &self.report_csv {
            write_report_csv(report, BufWriter::new(File::create(path)?))?;
        }
        if let Some(path) = &self.summary_json {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, &report.summary())?;
            writeln!(w)?;
        }
        if let Some(path) = &self.transcript_out {
            match transcript {
                Some(t) => t.write_jsonl(BufWriter::new(File::create(path)?))?,
                None => {
                    return Err(HarnessError::InvalidConfig {
                        field: "transcript_out",
                        reason: "this command does not produce a transcript".to_string(),
                    })
                }
            }
        }
        println!("{}", serde_json::to_string(&report.summary())?);
        Ok(if self.enforce_bound && !report.pass { 2 } else { 0 })
    }
}

#[derive(Args)]
struct CommonSim {
    /// Number of rounds.
    #[arg(long, default_value_t = 1000)]
    t: u64,
    /// Number of groups; each example joins each group independently.
    #[arg(long, default_value_t = 2)]
    groups: u32,
    /// Probability an example joins each group.
    #[arg(long, default_value_t = 0.5)]
    membership_rate: f64,
    /// Failure probability of the theorem bound.
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    learner_seed: u64,
    #[arg(long, default_value_t = 1)]
    stream_seed: u64,
    #[command(flatten)]
    adversary: AdversaryArgs,
    #[command(flatten)]
    output: OutputArgs,
}

impl CommonSim {
    fn config(&self, predictor: PredictorSpec) -> Result<SimulationConfig, HarnessError> {
        Ok(SimulationConfig {
            t: self.t,
            group_count: self.groups,
            membership_rate: self.membership_rate,
            predictor,
            adversary: self.adversary.build(self.groups)?,
            lambda: self.lambda,
            learner_seed: self.learner_seed,
            stream_seed: self.stream_seed,
        })
    }

    fn run(&self, predictor: PredictorSpec) -> Result<u8, HarnessError> {
        let outcome = run_simulation(&self.config(predictor)?)?;
        if let Some((covered, total)) = outcome.widened_coverage {
            eprintln!(
                "widened true-label coverage: {covered}/{total} = {:.4}",
                covered as f64 / total as f64
            );
        }
        self.output.emit(&outcome.report, Some(&outcome.transcript))
    }
}

#[derive(Args)]
struct SimulateMeanArgs {
    /// Calibration buckets.
    #[arg(long, default_value_t = 10)]
    n: u32,
    /// Grid refinement; defaults to the rate-balancing choice at ε′.
    #[arg(long)]
    r: Option<u32>,
    /// Discretization slack for the default refinement.
    #[arg(long, default_value_t = 0.1)]
    epsilon_prime: f64,
    /// Learning rate; defaults to the theorem's choice.
    #[arg(long)]
    eta: Option<f64>,
    #[command(flatten)]
    common: CommonSim,
}

#[derive(Args)]
struct SimulateMomentArgs {
    /// Mean calibration buckets.
    #[arg(long, default_value_t = 10)]
    n: u32,
    /// Moment calibration buckets.
    #[arg(long, default_value_t = 5)]
    n_prime: u32,
    /// Grid refinement.
    #[arg(long, default_value_t = 2)]
    r: u32,
    /// Moment order (positive even).
    #[arg(long, default_value_t = 2)]
    k: u32,
    /// Learning rate; defaults to the theorem's choice.
    #[arg(long)]
    eta: Option<f64>,
    /// Per-round LP tolerance.
    #[arg(long, default_value_t = 1e-6)]
    lp_epsilon: f64,
    #[command(flatten)]
    common: CommonSim,
}

#[derive(Args)]
struct SimulateIntervalArgs {
    /// Endpoint buckets.
    #[arg(long, default_value_t = 5)]
    n: u32,
    /// Miscoverage target: intervals aim at 1−δ coverage.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Label perturbation scale; omit to assume the adversary is already
    /// smooth and supply --r and --rho instead.
    #[arg(long, conflicts_with_all = ["r", "rho"])]
    perturb_epsilon: Option<f64>,
    /// Grid refinement (assumed-smooth mode).
    #[arg(long, requires = "rho")]
    r: Option<u32>,
    /// Assumed label smoothness: no atom carries more than ρ mass.
    #[arg(long, requires = "r")]
    rho: Option<f64>,
    /// Learning rate; defaults to the theorem's choice.
    #[arg(long)]
    eta: Option<f64>,
    /// Per-round LP tolerance.
    #[arg(long, default_value_t = 1e-4)]
    lp_epsilon: f64,
    #[command(flatten)]
    common: CommonSim,
}

#[derive(Args)]
struct WrapResidualsArgs {
    /// CSV stream with header groups,label,point_prediction.
    #[arg(long)]
    input: PathBuf,
    /// Number of groups.
    #[arg(long, default_value_t = 2)]
    groups: u32,
    /// Endpoint buckets on the residual scale.
    #[arg(long, default_value_t = 5)]
    n: u32,
    /// Grid refinement on the residual scale.
    #[arg(long, default_value_t = 10)]
    r: u32,
    /// Miscoverage target.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Assumed residual smoothness.
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Widening applied to each decentered endpoint.
    #[arg(long, default_value_t = 0.0)]
    widen: f64,
    /// Learning rate; defaults to the theorem's choice.
    #[arg(long)]
    eta: Option<f64>,
    /// Per-round LP tolerance.
    #[arg(long, default_value_t = 1e-4)]
    lp_epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-row intervals here (CSV).
    #[arg(long)]
    intervals_out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum KindChoice {
    Mean,
    Moment,
    Interval,
}

#[derive(Args)]
struct BatchTrainArgs {
    /// CSV stream with header groups,label.
    #[arg(long)]
    input: PathBuf,
    /// Number of groups.
    #[arg(long, default_value_t = 2)]
    groups: u32,
    /// Predictor kind to train.
    #[arg(long, value_enum, default_value_t = KindChoice::Mean)]
    kind: KindChoice,
    #[arg(long, default_value_t = 10)]
    n: u32,
    #[arg(long, default_value_t = 5)]
    n_prime: u32,
    /// Grid refinement; defaults to the mean rate-balancing choice for the
    /// mean kind and 2 otherwise.
    #[arg(long)]
    r: Option<u32>,
    #[arg(long, default_value_t = 2)]
    k: u32,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Learning rate; defaults to the matching theorem's choice.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    lp_epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the model container here.
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args)]
struct BatchEvalArgs {
    /// Trained model container.
    #[arg(long)]
    model: PathBuf,
    /// CSV stream with header groups,label (labels are ignored).
    #[arg(long)]
    input: PathBuf,
    /// Independent draws per row.
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-row averaged predictions here (CSV, default stdout).
    #[arg(long)]
    predictions_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Transcript to audit (JSON lines, as written by --transcript-out).
    #[arg(long)]
    transcript: PathBuf,
    /// Multivalidity notion to audit against.
    #[arg(long, value_enum)]
    kind: KindChoice,
    #[arg(long, default_value_t = 2)]
    groups: u32,
    #[arg(long, default_value_t = 10)]
    n: u32,
    #[arg(long, default_value_t = 5)]
    n_prime: u32,
    #[arg(long, default_value_t = 2)]
    r: u32,
    #[arg(long, default_value_t = 2)]
    k: u32,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Smoothness parameter entering the interval bound.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.0)]
    lp_epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::SimulateMean(args) => {
            let groups = GroupSystem::new(args.common.groups, args.common.groups)?;
            let r = match args.r {
                Some(r) => r,
                None => multivalid_mean::default_refinement(
                    args.common.t.max(1),
                    &groups,
                    args.n,
                    args.epsilon_prime,
                ),
            };
            args.common.run(PredictorSpec::Mean { n: args.n, r, eta: args.eta })
        }
        Command::SimulateMoment(args) => args.common.run(PredictorSpec::Moment {
            n: args.n,
            n_prime: args.n_prime,
            r: args.r,
            k: args.k,
            eta: args.eta,
            lp_epsilon: args.lp_epsilon,
        }),
        Command::SimulateInterval(args) => {
            let smoothing = match (args.perturb_epsilon, args.r, args.rho) {
                (Some(epsilon), _, _) => Smoothing::Perturb { epsilon },
                (None, Some(r), Some(rho)) => Smoothing::AssumeSmooth { r, rho },
                // Neither given: perturb at the spec default scale.
                (None, _, _) => Smoothing::Perturb { epsilon: 0.05 },
            };
            args.common.run(PredictorSpec::Interval {
                n: args.n,
                delta: args.delta,
                smoothing,
                eta: args.eta,
                lp_epsilon: args.lp_epsilon,
            })
        }
        Command::WrapResiduals(args) => wrap_residuals(args),
        Command::BatchTrain(args) => batch_train_cmd(args),
        Command::BatchEval(args) => batch_eval(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn wrap_residuals(args: WrapResidualsArgs) -> Result<u8, HarnessError> {
    let rows = multivalid_harness::load_stream(&args.input)?;
    let groups = GroupSystem::new(args.groups, args.groups)?;
    let eta = args
        .eta
        .unwrap_or_else(|| interval_default_eta(rows.len().max(1) as u64, args.groups, args.n, args.lp_epsilon));
    let inner = IntervalState::new(
        groups.clone(),
        multivalid_core::BucketGrid::new(args.n, args.r)?,
        args.delta,
        args.rho,
        eta,
    )?;
    let mut wrapper = ResidualWrapper::new(inner, args.widen)?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let mut transcript = Transcript::new();
    let mut intervals_csv = String::from("row,point_prediction,label,lower,upper,covered\n");

    for (row, stream_row) in rows.iter().enumerate() {
        let fx = stream_row.point_prediction.ok_or(HarnessError::Parse {
            line: row + 2,
            reason: "wrap-residuals needs the point_prediction column".to_string(),
        })?;
        let y = stream_row.label;
        let x = Example::new(&groups, stream_row.group_ids.clone(), None)?;
        let wrapped = wrapper.predict(&x, fx, &mut rng, args.lp_epsilon)?;
        let (lower, upper) = wrapped.interval;
        let covered = cover(lower, upper, y);
        intervals_csv.push_str(&format!("{row},{fx},{y},{lower},{upper},{covered}\n"));
        let residual_pair = (wrapped.residual.lower, wrapped.residual.upper);
        let deltas = wrapper.update(&x, residual_pair, y, fx)?;
        transcript.push(RoundRecord {
            round: row as u64,
            group_ids: stream_row.group_ids.clone(),
            prediction: Prediction::Interval {
                lower: residual_pair.0.value(),
                upper: residual_pair.1.value(),
            },
            label: multivalid_wrappers::center_residual(y, fx),
            deltas,
        });
    }

    if let Some(path) = &args.intervals_out {
        std::fs::write(path, &intervals_csv)?;
    }
    // The audit runs on the residual scale, where the inner predictor's
    // guarantee lives; decentering preserves per-round coverage.
    let report = multivalidity_report(
        &transcript,
        &groups,
        wrapper.inner().grid(),
        ReportKind::Interval { delta: args.delta, rho: args.rho, lp_epsilon: args.lp_epsilon },
        args.lambda,
    )?;
    args.output.emit(&report, Some(&transcript))
}

fn batch_train_cmd(args: BatchTrainArgs) -> Result<u8, HarnessError> {
    let rows = multivalid_harness::load_stream(&args.input)?;
    let groups = GroupSystem::new(args.groups, args.groups)?;
    let t = rows.len().max(1) as u64;
    let r = args.r.unwrap_or_else(|| match args.kind {
        KindChoice::Mean => multivalid_mean::default_refinement(t, &groups, args.n, 0.1),
        _ => 2,
    });
    let eta = match args.eta {
        Some(v) => v,
        None => match args.kind {
            KindChoice::Mean => multivalid_mean::default_eta(
                t,
                &groups,
                args.n,
                EtaMode::FiniteGroups,
                0.05,
            )?,
            KindChoice::Moment => {
                moment_default_eta(t, args.groups, args.n, args.n_prime, args.lp_epsilon)
            }
            KindChoice::Interval => {
                interval_default_eta(t, args.groups, args.n, args.lp_epsilon)
            }
        },
    };
    let config = match args.kind {
        KindChoice::Mean => BatchConfig::Mean {
            groups: args.groups,
            max_membership: args.groups,
            n: args.n,
            r,
            eta,
        },
        KindChoice::Moment => BatchConfig::Moment {
            groups: args.groups,
            max_membership: args.groups,
            n: args.n,
            n_prime: args.n_prime,
            r,
            k: args.k,
            eta,
            lp_epsilon: args.lp_epsilon,
        },
        KindChoice::Interval => BatchConfig::Interval {
            groups: args.groups,
            max_membership: args.groups,
            n: args.n,
            r,
            delta: args.delta,
            rho: args.rho,
            eta,
            lp_epsilon: args.lp_epsilon,
        },
    };

    let dataset: Result<Vec<Example>, _> = rows
        .iter()
        .map(|row| Example::new(&groups, row.group_ids.clone(), Some(row.label)))
        .collect();
    let model = batch_train(&dataset?, &config, args.seed)?;
    model.write_json(BufWriter::new(File::create(&args.model_out)?))?;
    println!(
        "{}",
        serde_json::json!({
            "kind": config.kind_name(),
            "rounds": model.len(),
            "eta": eta,
            "r": r,
            "model": args.model_out,
        })
    );
    Ok(0)
}

fn batch_eval(args: BatchEvalArgs) -> Result<u8, HarnessError> {
    let model = BatchModel::read_json(BufReader::new(File::open(&args.model)?))?;
    let rows = multivalid_harness::load_stream(&args.input)?;
    let groups = GroupSystem::new(model.config().group_count(), model.config().group_count())?;
    let xs: Result<Vec<Example>, _> = rows
        .iter()
        .map(|row| Example::new(&groups, row.group_ids.clone(), None))
        .collect();
    let xs = xs?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let outputs = model.predict_many(&xs, args.draws, &mut rng)?;

    let mut csv = String::new();
    match model.config().kind_name() {
        "mean" => csv.push_str("row,draws,mean\n"),
        "moment" => csv.push_str("row,draws,mean,moment\n"),
        _ => csv.push_str("row,draws,lower,upper\n"),
    }
    for (row, draws) in outputs.iter().enumerate() {
        let count = draws.len() as f64;
        match draws.first() {
            Some(BatchOutput::Mean(_)) => {
                let avg = draws
                    .iter()
                    .map(|o| match o {
                        BatchOutput::Mean(gp) => gp.value(),
                        _ => unreachable!("one model kind per container"),
                    })
                    .sum::<f64>()
                    / count;
                csv.push_str(&format!("{row},{},{avg}\n", draws.len()));
            }
            Some(BatchOutput::Moment { .. }) => {
                let (mut a, mut b) = (0.0, 0.0);
                for o in draws {
                    let BatchOutput::Moment { mean, moment, .. } = o else { unreachable!() };
                    a += mean.value();
                    b += moment.value();
                }
                csv.push_str(&format!("{row},{},{},{}\n", draws.len(), a / count, b / count));
            }
            Some(BatchOutput::Interval { .. }) => {
                let (mut a, mut b) = (0.0, 0.0);
                for o in draws {
                    let BatchOutput::Interval { lower, upper, .. } = o else { unreachable!() };
                    a += lower.value();
                    b += upper.value();
                }
                csv.push_str(&format!("{row},{},{},{}\n", draws.len(), a / count, b / count));
            }
            None => csv.push_str(&format!("{row},0\n")),
        }
    }
    match &args.predictions_out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn report_cmd(args: ReportArgs) -> Result<u8, HarnessError> {
    let transcript = Transcript::read_jsonl(BufReader::new(File::open(&args.transcript)?))?;
    let groups = GroupSystem::new(args.groups, args.groups)?;
    let (grid, kind) = match args.kind {
        KindChoice::Mean => {
            (multivalid_core::BucketGrid::new(args.n, args.r)?, ReportKind::Mean)
        }
        KindChoice::Moment => (
            multivalid_core::BucketGrid::with_moment_buckets(args.n, args.n_prime, args.r)?,
            ReportKind::Moment { k: args.k, lp_epsilon: args.lp_epsilon },
        ),
        KindChoice::Interval => (
            multivalid_core::BucketGrid::new(args.n, args.r)?,
            ReportKind::Interval { delta: args.delta, rho: args.rho, lp_epsilon: args.lp_epsilon },
        ),
    };
    let report = multivalidity_report(&transcript, &groups, &grid, kind, args.lambda)?;
    args.output.emit(&report, Some(&transcript))
}
