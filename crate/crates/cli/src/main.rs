//! Command-line front door: schedule inspection, composition calculator,
//! single runs, parameter sweeps, and the permuted-selection experiment.
//!
//! Exit status: 0 success, 1 usage error, 2 infeasible schedule,
//! 3 property-check failure, 4 I/O error.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dplinf::accounting::{advanced_compose, basic_compose, PrivacyBudget, Profile, Schedule};
use dplinf::harness::{
    run_sweep, wilson_interval, MechanismId, SweepCell, SweepConfig, SweepOutput, WorkloadKind,
    SUMMARY_CSV_HEADER, TRIAL_CSV_HEADER,
};
use dplinf::noise::{NoiseMode, NoiseSource};
use dplinf::sparse_vector::permuted_above_threshold;
use dplinf::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_PROPERTY: u8 = 3;
const EXIT_IO: u8 = 4;

/// Differentially private multi-query release: mechanisms, accounting, and
/// measurement.
#[derive(Parser)]
#[command(name = "dplinf", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage table and budget chain for one (k, epsilon, delta).
    Schedule(ScheduleArgs),
    /// Composition calculator.
    Compose(ComposeArgs),
    /// Run one mechanism cell and write per-trial rows.
    Run(RunArgs),
    /// Run a grid of (mechanism, k, epsilon, delta) cells.
    Sweep(SweepArgs),
    /// Measure the permuted-selection success rate on a planted instance.
    Lemma1(Lemma1Args),
}

/// delta spellings: a decimal ("0.001"), "2^-N" (exact binary power), or
/// "e^-N" (natural exponential).
fn parse_delta(s: &str) -> Result<f64, String> {
    if let Some(rest) = s.strip_prefix("2^") {
        let exp: i32 = rest
            .parse()
            .map_err(|e| format!("bad exponent in '{s}': {e}"))?;
        Ok(2f64.powi(exp))
    } else if let Some(rest) = s.strip_prefix("e^") {
        let exp: f64 = rest
            .parse()
            .map_err(|e| format!("bad exponent in '{s}': {e}"))?;
        Ok(exp.exp())
    } else {
        s.parse::<f64>().map_err(|e| format!("bad delta '{s}': {e}"))
    }
}

/// "key=value" overrides for the named profile constants.
fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let value: f64 = value
        .parse()
        .map_err(|e| format!("bad value in '{s}': {e}"))?;
    Ok((key.to_string(), value))
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// Constants profile: paper (analysis defaults) or practical
    /// (desk-scale defaults).
    #[arg(long, default_value = "practical")]
    profile: String,
    /// Override a named constant (eps0_divisor, w_mult, w_lognum, m_min,
    /// c_frac, alpha_mult); repeatable.
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, f64)>,
}

impl ProfileArgs {
    fn build(&self) -> Result<Profile, Error> {
        let mut p = Profile::by_name(&self.profile)?;
        for (key, value) in &self.overrides {
            p.set(key, *value)?;
        }
        Ok(p)
    }
}

#[derive(Args)]
struct ScheduleArgs {
    /// Number of queries (k >= 2).
    #[arg(long)]
    k: usize,
    /// Total privacy parameter epsilon, in (0, 1].
    #[arg(long)]
    epsilon: f64,
    /// Total privacy parameter delta, in (0, 0.5]; decimal, 2^-N, or e^-N.
    #[arg(long, value_parser = parse_delta)]
    delta: f64,
    #[command(flatten)]
    profile: ProfileArgs,
    /// Emit the machine-readable comma-separated table instead of text.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(subcommand)]
    which: ComposeCommand,
}

#[derive(Subcommand)]
enum ComposeCommand {
    /// Sum (epsilon, delta) pairs: prints "<sum_eps> <sum_delta>".
    Basic {
        /// Pairs as "epsilon,delta"; the empty list composes to 0 0.
        pairs: Vec<String>,
    },
    /// m-fold advanced composition of an epsilon-DP computation:
    /// sqrt(2 m ln(1/delta'))*eps + m*eps*(e^eps - 1).
    Advanced {
        /// Number of invocations (m >= 1).
        m: usize,
        /// Per-invocation epsilon.
        epsilon: f64,
        /// Slack delta' in (0, 1); decimal, 2^-N, or e^-N.
        #[arg(value_parser = parse_delta)]
        delta_prime: f64,
    },
}

#[derive(Args, Clone)]
struct ExecArgs {
    /// Trials per cell.
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Master seed; per-trial noise streams derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Workload shape: zeros, uniform, or spread.
    #[arg(long, default_value = "zeros")]
    workload: String,
    /// Lower edge of the uniform workload range.
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    /// Upper edge of the uniform workload range.
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
    /// Per-trial rows are written here.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Summary format on standard output: table or csv.
    #[arg(long, default_value = "table")]
    format: String,
    /// Worker threads; 0 picks the runtime default. Overrides
    /// DPLINF_PARALLELISM.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Failure bar as a multiple of B(k, epsilon, delta); defaults to the
    /// Gaussian baseline's analytic p99 ratio.
    #[arg(long)]
    fail_multiple: Option<f64>,
    /// Use the zero-noise oracle instead of real noise.
    #[arg(long)]
    zero_noise: bool,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Mechanism: iterative, high_prob, expected_error, gaussian, or
    /// laplace_split.
    mechanism: String,
    /// Number of queries.
    k: usize,
    /// Total epsilon, in (0, 1].
    epsilon: f64,
    /// Total delta, in (0, 0.5]; decimal, 2^-N, or e^-N.
    #[arg(value_parser = parse_delta)]
    delta: f64,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated mechanism list.
    #[arg(long, value_delimiter = ',')]
    mechanisms: Vec<String>,
    /// Comma-separated k list.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Comma-separated epsilon list.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Comma-separated delta list; each entry decimal, 2^-N, or e^-N.
    #[arg(long, value_delimiter = ',', value_parser = parse_delta)]
    delta: Vec<f64>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct Lemma1Args {
    /// Fraction gamma of coordinates planted above the selection margin.
    #[arg(long)]
    gamma: f64,
    /// Number of queries.
    #[arg(long)]
    k: usize,
    /// Planted count with gap T + w; defaults to ceil(gamma * k).
    #[arg(long)]
    good: Option<usize>,
    /// Planted count with gap inside (T - w, T + w); defaults to good / 2.
    #[arg(long)]
    bad: Option<usize>,
    /// Selector privacy parameter.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Selection threshold T.
    #[arg(long, default_value_t = 100.0)]
    threshold: f64,
    /// Margin width w; defaults to (8/epsilon) * ln(400/gamma).
    #[arg(long)]
    w: Option<f64>,
    /// Placement of the in-margin coordinates inside (T - w, T + w):
    /// gap = T - w + 2w * frac.
    #[arg(long, default_value_t = 0.5)]
    bad_gap_frac: f64,
    /// Trials.
    #[arg(long, default_value_t = 2000)]
    trials: u64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail (exit 3) when the Wilson lower bound drops below 0.6 - slack
    /// while the instance conditions hold.
    #[arg(long, default_value_t = 0.02)]
    slack: f64,
    /// Use the zero-noise oracle instead of real noise.
    #[arg(long)]
    zero_noise: bool,
    /// Worker threads; 0 picks the runtime default. Overrides
    /// DPLINF_PARALLELISM.
    #[arg(long)]
    parallelism: Option<usize>,
}

fn error_code(err: &Error) -> u8 {
    match err {
        Error::InvalidParameter(_) => EXIT_USAGE,
        Error::InfeasibleSchedule { .. } => EXIT_INFEASIBLE,
        Error::Trial { source, .. } => error_code(source),
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(error_code(err))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match cli.command {
        Command::Schedule(args) => cmd_schedule(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Lemma1(args) => cmd_lemma1(args),
    }
}

fn cmd_schedule(args: ScheduleArgs) -> ExitCode {
    let profile = match args.profile.build() {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let budget = match PrivacyBudget::new(args.epsilon, args.delta) {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    match Schedule::build(args.k, &budget, &profile) {
        Ok(schedule) => {
            if args.csv {
                print!("{}", schedule.to_csv());
            } else {
                print!("{}", schedule.render_table());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn cmd_compose(args: ComposeArgs) -> ExitCode {
    match args.which {
        ComposeCommand::Basic { pairs } => {
            let mut parsed = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let Some((e, d)) = p.split_once(',') else {
                    eprintln!("error: expected epsilon,delta pair, got '{p}'");
                    return ExitCode::from(EXIT_USAGE);
                };
                match (e.trim().parse::<f64>(), d.trim().parse::<f64>()) {
                    (Ok(e), Ok(d)) => parsed.push((e, d)),
                    _ => {
                        eprintln!("error: bad pair '{p}'");
                        return ExitCode::from(EXIT_USAGE);
                    }
                }
            }
            match basic_compose(&parsed) {
                Ok((e, d)) => {
                    println!("{e} {d}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        ComposeCommand::Advanced {
            m,
            epsilon,
            delta_prime,
        } => match advanced_compose(m, epsilon, delta_prime) {
            Ok(v) => {
                println!("{v}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}

fn resolve_parallelism(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("DPLINF_PARALLELISM")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn parse_workload(name: &str, lo: f64, hi: f64) -> Result<WorkloadKind, Error> {
    match name {
        "zeros" => Ok(WorkloadKind::Zeros),
        "uniform" => Ok(WorkloadKind::Uniform { lo, hi }),
        "spread" => Ok(WorkloadKind::AdversarialSpread),
        other => Err(Error::invalid(format!(
            "unknown workload '{other}' (expected zeros, uniform, or spread)"
        ))),
    }
}

fn execute_cells(cells: Vec<SweepCell>, exec: &ExecArgs) -> ExitCode {
    let profile = match exec.profile.build() {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let workload = match parse_workload(&exec.workload, exec.lo, exec.hi) {
        Ok(w) => w,
        Err(e) => return fail(&e),
    };
    if exec.format != "table" && exec.format != "csv" {
        eprintln!(
            "error: unknown format '{}' (expected table or csv)",
            exec.format
        );
        return ExitCode::from(EXIT_USAGE);
    }
    let mut config = SweepConfig::new(exec.trials, exec.seed);
    config.parallelism = resolve_parallelism(exec.parallelism);
    config.mode = if exec.zero_noise {
        NoiseMode::Zero
    } else {
        NoiseMode::Random
    };
    config.profile = profile;
    config.workload = workload;
    config.fail_multiple = exec.fail_multiple;

    let output = match run_sweep(&cells, &config) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_rows(&exec.out, &output) {
        eprintln!("error: cannot write '{}': {e}", exec.out.display());
        return ExitCode::from(EXIT_IO);
    }
    print_summaries(&output, &config, &exec.format);
    ExitCode::SUCCESS
}

fn write_rows(path: &PathBuf, output: &SweepOutput) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{TRIAL_CSV_HEADER}")?;
    for row in &output.rows {
        writeln!(file, "{}", row.csv_row())?;
    }
    Ok(())
}

fn print_summaries(output: &SweepOutput, config: &SweepConfig, format: &str) {
    println!(
        "profile: {}   seed: {}   trials/cell: {}",
        config.profile.name, config.master_seed, config.trials
    );
    if format == "csv" {
        println!("{SUMMARY_CSV_HEADER}");
        for s in &output.summaries {
            println!("{}", s.csv_row());
        }
    } else {
        println!(
            "{:<15} {:>9} {:>8} {:>12} {:>7} {:>12} {:>12} {:>12} {:>11} {:>9}",
            "mechanism",
            "k",
            "epsilon",
            "delta",
            "trials",
            "mean_linf",
            "median_linf",
            "p95_linf",
            "mean_ratio",
            "fail_freq"
        );
        for s in &output.summaries {
            println!(
                "{:<15} {:>9} {:>8} {:>12.4e} {:>7} {:>12.5e} {:>12.5e} {:>12.5e} {:>11.4} {:>9.4}",
                s.mechanism.to_string(),
                s.k,
                s.epsilon,
                s.delta,
                s.trials,
                s.mean_linf,
                s.median_linf,
                s.p95_linf,
                s.mean_ratio,
                s.fail_freq
            );
        }
    }
    for failure in &output.failures {
        eprintln!("trial failure: {failure}");
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mechanism: MechanismId = match args.mechanism.parse() {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    if let Err(e) = PrivacyBudget::new(args.epsilon, args.delta) {
        return fail(&e);
    }
    let cells = vec![SweepCell {
        mechanism,
        k: args.k,
        epsilon: args.epsilon,
        delta: args.delta,
    }];
    execute_cells(cells, &args.exec)
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    if args.mechanisms.is_empty()
        || args.k.is_empty()
        || args.epsilon.is_empty()
        || args.delta.is_empty()
    {
        eprintln!("error: sweep needs --mechanisms, --k, --epsilon, and --delta");
        return ExitCode::from(EXIT_USAGE);
    }
    let mut mechanisms = Vec::new();
    for name in &args.mechanisms {
        match name.parse::<MechanismId>() {
            Ok(m) => mechanisms.push(m),
            Err(e) => return fail(&e),
        }
    }
    let mut cells = Vec::new();
    for &mechanism in &mechanisms {
        for &k in &args.k {
            for &epsilon in &args.epsilon {
                for &delta in &args.delta {
                    if let Err(e) = PrivacyBudget::new(epsilon, delta) {
                        return fail(&e);
                    }
                    cells.push(SweepCell {
                        mechanism,
                        k,
                        epsilon,
                        delta,
                    });
                }
            }
        }
    }
    execute_cells(cells, &args.exec)
}

fn cmd_lemma1(args: Lemma1Args) -> ExitCode {
    if !(args.gamma > 0.0 && args.gamma < 1.0) {
        eprintln!("error: gamma must lie in (0, 1), got {}", args.gamma);
        return ExitCode::from(EXIT_USAGE);
    }
    if args.k < 2 || args.trials == 0 {
        eprintln!("error: lemma1 requires k >= 2 and trials >= 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if !(args.bad_gap_frac > 0.0 && args.bad_gap_frac < 1.0) {
        eprintln!("error: bad-gap-frac must lie in (0, 1) so the gap stays inside the margin band");
        return ExitCode::from(EXIT_USAGE);
    }
    let good = args
        .good
        .unwrap_or((args.gamma * args.k as f64).ceil() as usize);
    let bad = args.bad.unwrap_or(good / 2);
    if good + bad > args.k {
        eprintln!("error: good + bad = {} exceeds k = {}", good + bad, args.k);
        return ExitCode::from(EXIT_USAGE);
    }
    if good == 0 {
        eprintln!("error: the instance needs at least one planted coordinate");
        return ExitCode::from(EXIT_USAGE);
    }
    let w_required = (8.0 / args.epsilon) * (400.0 / args.gamma).ln();
    let w = args.w.unwrap_or(w_required);

    // Instance conditions; violations warn but the run proceeds so the
    // necessity of each condition can be explored.
    let mut conditions_held = true;
    if (good as f64) < args.gamma * args.k as f64 {
        eprintln!(
            "warning: condition (i) violated: good = {good} < gamma*k = {}",
            args.gamma * args.k as f64
        );
        conditions_held = false;
    }
    if w < w_required * (1.0 - 1e-12) {
        eprintln!("warning: condition (ii) violated: w = {w} < required {w_required}");
        conditions_held = false;
    }
    if good < 2 * bad {
        eprintln!(
            "warning: condition (iii) violated: good = {good} < 2*bad = {}",
            2 * bad
        );
        conditions_held = false;
    }

    let mut gaps = vec![0.0f64; args.k];
    for g in gaps.iter_mut().take(good) {
        *g = args.threshold + w;
    }
    let bad_gap = args.threshold - w + 2.0 * w * args.bad_gap_frac;
    for g in gaps.iter_mut().skip(good).take(bad) {
        *g = bad_gap;
    }

    let mode = if args.zero_noise {
        NoiseMode::Zero
    } else {
        NoiseMode::Random
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_parallelism(args.parallelism))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let outcomes: Vec<Result<bool, Error>> = pool.install(|| {
        (0..args.trials)
            .into_par_iter()
            .map(|t| {
                let mut src = NoiseSource::for_trial(args.seed, mode, t);
                let got = permuted_above_threshold(&gaps, args.threshold, args.epsilon, &mut src)?;
                Ok(got.is_some_and(|i| i < good))
            })
            .collect()
    });
    let mut successes = 0u64;
    for o in outcomes {
        match o {
            Ok(true) => successes += 1,
            Ok(false) => {}
            Err(e) => return fail(&e),
        }
    }
    let rate = successes as f64 / args.trials as f64;
    let (lo, hi) = wilson_interval(successes, args.trials, 1.96);
    println!(
        "instance: k={} good={} bad={} gamma={} T={} w={:.6} bad_gap={:.6}",
        args.k, good, bad, args.gamma, args.threshold, w, bad_gap
    );
    println!(
        "success rate {rate:.4} ({successes}/{}), wilson95 [{lo:.4}, {hi:.4}]",
        args.trials
    );
    if conditions_held && lo < 0.6 - args.slack {
        eprintln!(
            "property check failed: wilson lower bound {lo:.4} < {:.4}",
            0.6 - args.slack
        );
        return ExitCode::from(EXIT_PROPERTY);
    }
    ExitCode::SUCCESS
}
