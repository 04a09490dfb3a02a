//! Workload generation, Monte Carlo trial execution, I-set stage tracing,
//! and sweep aggregation.
//!
//! The harness is the only component that compares released answers against
//! the workload's true values; mechanisms never compute their own errors.
//! Trials are embarrassingly parallel and derive their noise from
//! (master seed, cell index, trial index), so results are identical for any
//! parallelism degree.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::accounting::{bound, PrivacyBudget, Profile, Schedule};
use crate::error::{Error, Result};
use crate::mechanisms::{
    expected_error_answer, gaussian_mechanism, gaussian_sigma, high_prob_answer, iterative_svc_traced,
    laplace_split_baseline, AnswerVector, Workload,
};
use crate::noise::{NoiseMode, NoiseSource};

/// Shapes of synthetic workloads. Mechanism error is translation invariant,
/// so the content only matters for the readability of traces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WorkloadKind {
    Zeros,
    Uniform { lo: f64, hi: f64 },
    AdversarialSpread,
}

/// Deterministic workload from (kind, k, seed).
pub fn make_workload(kind: WorkloadKind, k: usize, seed: u64) -> Result<Workload> {
    match kind {
        WorkloadKind::Zeros => Workload::new(vec![0.0; k]),
        WorkloadKind::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "uniform workload requires finite lo < hi, got [{lo}, {hi})"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Workload::new((0..k).map(|_| rng.gen_range(lo..hi)).collect())
        }
        WorkloadKind::AdversarialSpread => {
            // Widely spaced, alternating-sign values so traces identify
            // coordinates at a glance.
            Workload::new(
                (0..k)
                    .map(|i| {
                        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                        sign * 1000.0 * (i as f64 + 1.0)
                    })
                    .collect(),
            )
        }
    }
}

/// The mechanisms the harness can drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MechanismId {
    Iterative,
    HighProb,
    ExpectedError,
    Gaussian,
    LaplaceSplit,
}

impl MechanismId {
    pub const ALL: [MechanismId; 5] = [
        MechanismId::Iterative,
        MechanismId::HighProb,
        MechanismId::ExpectedError,
        MechanismId::Gaussian,
        MechanismId::LaplaceSplit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MechanismId::Iterative => "iterative",
            MechanismId::HighProb => "high_prob",
            MechanismId::ExpectedError => "expected_error",
            MechanismId::Gaussian => "gaussian",
            MechanismId::LaplaceSplit => "laplace_split",
        }
    }
}

impl fmt::Display for MechanismId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MechanismId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(MechanismId::Iterative),
            "high_prob" => Ok(MechanismId::HighProb),
            "expected_error" => Ok(MechanismId::ExpectedError),
            "gaussian" => Ok(MechanismId::Gaussian),
            "laplace_split" => Ok(MechanismId::LaplaceSplit),
            other => Err(Error::invalid(format!(
                "unknown mechanism '{other}' (expected one of iterative, high_prob, \
                 expected_error, gaussian, laplace_split)"
            ))),
        }
    }
}

/// Everything measured about one mechanism invocation.
#[derive(Clone, Debug)]
pub struct TrialReport {
    pub mechanism: MechanismId,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Trial index within its cell.
    pub trial: u64,
    /// Derived per-trial stream id (the seed column of the wire format).
    pub seed: u64,
    /// Maximum |q_i − a_i|; +infinity when a coordinate was never released.
    pub linf: f64,
    pub ratio_to_bound: f64,
    /// Exceedance counts at labelled error levels.
    pub violation_counts: Vec<(String, u64)>,
    /// Per-stage |I_l^l| for the iterative mechanism; `None` otherwise.
    pub stage_trace: Option<Vec<u64>>,
    pub budget_spent: (f64, f64),
    pub wall_ms: f64,
}

pub const TRIAL_CSV_HEADER: &str =
    "mechanism,k,epsilon,delta,trial,seed,linf,ratio_to_bound,stage_trace_json,wall_ms";

pub const SUMMARY_CSV_HEADER: &str =
    "mechanism,k,epsilon,delta,trials,mean_linf,median_linf,p95_linf,mean_ratio,fail_freq";

fn trace_json(trace: &Option<Vec<u64>>) -> String {
    match trace {
        None => "[]".to_string(),
        Some(t) => {
            let inner: Vec<String> = t.iter().map(|v| v.to_string()).collect();
            format!("[{}]", inner.join(","))
        }
    }
}

impl TrialReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},\"{}\",{}",
            self.mechanism,
            self.k,
            self.epsilon,
            self.delta,
            self.trial,
            self.seed,
            self.linf,
            self.ratio_to_bound,
            trace_json(&self.stage_trace),
            self.wall_ms
        )
    }

    /// The row with the timing column blanked, for byte-identical
    /// reproducibility comparisons.
    pub fn csv_row_untimed(&self) -> String {
        let row = self.csv_row();
        match row.rfind(',') {
            Some(pos) => format!("{}{}", &row[..pos + 1], "-"),
            None => row,
        }
    }
}

/// Count, for each t in 0..=L_eff, the indices with |q_i − a_i| ≥ τ_t.
/// Unreleased (+infinity) answers count against every threshold.
pub fn measure_i_sets(workload: &Workload, answers: &[f64], schedule: &Schedule) -> Vec<u64> {
    let q = workload.true_answers();
    (0..=schedule.effective_stages())
        .map(|t| {
            let tau = schedule.tau(t);
            q.iter()
                .zip(answers)
                .filter(|(qi, ai)| (**qi - **ai).abs() >= tau)
                .count() as u64
        })
        .collect()
}

/// ℓ∞ error of released answers against the workload.
pub fn linf_error(workload: &Workload, answers: &[f64]) -> f64 {
    workload
        .true_answers()
        .iter()
        .zip(answers)
        .map(|(q, a)| (q - a).abs())
        .fold(0.0, f64::max)
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 over (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// The harness's default failure bar, as a multiple of B(k, ε, δ): the 0.99
/// quantile of the Gaussian baseline's ℓ∞ error, from the max-of-k
/// half-normal law. An analytic stand-in for calibrating against an actual
/// Gaussian baseline run.
pub fn gaussian_p99_ratio(k: usize, budget: &PrivacyBudget) -> Result<f64> {
    let sigma = gaussian_sigma(k, budget);
    let p = 0.5 * (1.0 + 0.99f64.powf(1.0 / k as f64));
    Ok(sigma * inverse_normal_cdf(p) / bound(k, budget.epsilon(), budget.delta())?)
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    assert!(trials > 0, "wilson interval needs at least one trial");
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * ((p * (1.0 - p) + z2 / (4.0 * n)) / n).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// One cell of a sweep grid.
#[derive(Clone, Copy, Debug)]
pub struct SweepCell {
    pub mechanism: MechanismId,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
}

/// Sweep-wide configuration.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub trials: u64,
    pub master_seed: u64,
    /// 0 lets rayon pick; any value yields identical results.
    pub parallelism: usize,
    pub mode: NoiseMode,
    pub profile: Profile,
    pub workload: WorkloadKind,
    /// Failure bar as a multiple of B; defaults to the Gaussian p99 ratio.
    pub fail_multiple: Option<f64>,
}

impl SweepConfig {
    pub fn new(trials: u64, master_seed: u64) -> Self {
        SweepConfig {
            trials,
            master_seed,
            parallelism: 0,
            mode: NoiseMode::Random,
            profile: Profile::practical(),
            workload: WorkloadKind::Zeros,
            fail_multiple: None,
        }
    }
}

/// Per-cell aggregate statistics.
#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub mechanism: MechanismId,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: u64,
    pub mean_linf: f64,
    pub median_linf: f64,
    pub p95_linf: f64,
    pub mean_ratio: f64,
    pub fail_freq: f64,
}

impl SweepSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.mechanism,
            self.k,
            self.epsilon,
            self.delta,
            self.trials,
            self.mean_linf,
            self.median_linf,
            self.p95_linf,
            self.mean_ratio,
            self.fail_freq
        )
    }
}

/// Outcome of a sweep: every trial row in deterministic (cell, trial) order,
/// per-cell summaries, and any per-trial failures (the sweep continues past
/// them).
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<TrialReport>,
    pub summaries: Vec<SweepSummary>,
    pub failures: Vec<String>,
}

/// Run one mechanism invocation against `workload` with a per-trial noise
/// source and measure it. `stream` identifies the trial's noise stream;
/// `trial` is its index within the cell.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    mechanism: MechanismId,
    workload: &Workload,
    budget: &PrivacyBudget,
    profile: &Profile,
    mode: NoiseMode,
    master_seed: u64,
    trial: u64,
    stream: u64,
    fail_multiple: Option<f64>,
) -> Result<TrialReport> {
    let attach = |e: Error| e.in_trial(mechanism.as_str(), workload.k(), stream);
    let k = workload.k();
    let started = Instant::now();
    let mut source = NoiseSource::for_trial(master_seed, mode, stream);

    let mut stage_trace = None;
    let released: AnswerVector = match mechanism {
        MechanismId::Iterative => {
            let schedule = Schedule::build(k, budget, profile).map_err(attach)?;
            let mut trace = Vec::with_capacity(schedule.effective_stages());
            let out = iterative_svc_traced(workload, budget, &schedule, &mut source, |l, answers| {
                let tau = schedule.tau(l);
                let count = workload
                    .true_answers()
                    .iter()
                    .zip(answers)
                    .filter(|(q, a)| (**q - **a).abs() >= tau)
                    .count() as u64;
                trace.push(count);
            })
            .map_err(attach)?;
            stage_trace = Some(trace);
            out
        }
        MechanismId::HighProb => {
            high_prob_answer(workload, budget, profile, &mut source).map_err(attach)?
        }
        MechanismId::ExpectedError => {
            expected_error_answer(workload, budget, profile, &mut source).map_err(attach)?
        }
        MechanismId::Gaussian => gaussian_mechanism(workload, budget, &mut source).map_err(attach)?,
        MechanismId::LaplaceSplit => {
            laplace_split_baseline(workload, budget, &mut source).map_err(attach)?
        }
    };
    let wall_ms = started.elapsed().as_secs_f64() * 1000.0;

    let b = bound(k, budget.epsilon(), budget.delta()).map_err(attach)?;
    let linf = linf_error(workload, &released.answers);
    let fail_bar = fail_multiple
        .map(Ok)
        .unwrap_or_else(|| gaussian_p99_ratio(k, budget))
        .map_err(attach)?;

    let q = workload.true_answers();
    let count_above = |level: f64| {
        q.iter()
            .zip(&released.answers)
            .filter(|(qi, ai)| (**qi - **ai).abs() > level)
            .count() as u64
    };
    let violation_counts = vec![
        ("1B".to_string(), count_above(b)),
        ("2B".to_string(), count_above(2.0 * b)),
        ("4B".to_string(), count_above(4.0 * b)),
        ("8B".to_string(), count_above(8.0 * b)),
        ("fail_target".to_string(), count_above(fail_bar * b)),
    ];

    Ok(TrialReport {
        mechanism,
        k,
        epsilon: budget.epsilon(),
        delta: budget.delta(),
        trial,
        seed: stream,
        linf,
        ratio_to_bound: linf / b,
        violation_counts,
        stage_trace,
        budget_spent: released.budget_spent,
        wall_ms,
    })
}

fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn summarize(cell: &SweepCell, reports: &[&TrialReport], fail_bar_ratio: f64) -> SweepSummary {
    let mut linfs: Vec<f64> = reports.iter().map(|r| r.linf).collect();
    linfs.sort_by(f64::total_cmp);
    let n = linfs.len();
    let mean_linf = linfs.iter().sum::<f64>() / n as f64;
    let median_linf = if n % 2 == 1 {
        linfs[n / 2]
    } else {
        0.5 * (linfs[n / 2 - 1] + linfs[n / 2])
    };
    let p95_linf = percentile_nearest_rank(&linfs, 0.95);
    let mean_ratio = reports.iter().map(|r| r.ratio_to_bound).sum::<f64>() / n as f64;
    let fails = reports
        .iter()
        .filter(|r| r.ratio_to_bound > fail_bar_ratio)
        .count();
    SweepSummary {
        mechanism: cell.mechanism,
        k: cell.k,
        epsilon: cell.epsilon,
        delta: cell.delta,
        trials: n as u64,
        mean_linf,
        median_linf,
        p95_linf,
        mean_ratio,
        fail_freq: fails as f64 / n as f64,
    }
}

/// Execute `trials` runs of every cell. Per-trial noise streams are
/// (cell index << 32) | trial index over the shared master seed, so the
/// output is a pure function of (grid, trials, master seed) at any
/// parallelism degree. Trial failures are recorded and skipped in the
/// aggregates.
pub fn run_sweep(cells: &[SweepCell], config: &SweepConfig) -> Result<SweepOutput> {
    if cells.is_empty() {
        return Err(Error::invalid("sweep grid must be non-empty"));
    }
    if config.trials == 0 {
        return Err(Error::invalid("sweep requires at least one trial per cell"));
    }
    if cells.len() as u64 > u32::MAX as u64 || config.trials > u32::MAX as u64 {
        return Err(Error::invalid("sweep grid too large for stream derivation"));
    }

    // Pre-build workloads and budgets per cell so trials share them.
    let mut workloads = Vec::with_capacity(cells.len());
    let mut budgets = Vec::with_capacity(cells.len());
    let mut fail_bars = Vec::with_capacity(cells.len());
    for cell in cells {
        let budget = PrivacyBudget::new(cell.epsilon, cell.delta)?;
        workloads.push(make_workload(config.workload, cell.k, config.master_seed)?);
        fail_bars.push(match config.fail_multiple {
            Some(m) => m,
            None => gaussian_p99_ratio(cell.k, &budget)?,
        });
        budgets.push(budget);
    }

    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|ci| (0..config.trials).map(move |t| (ci, t)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("failed to build thread pool: {e}")))?;

    let results: Vec<std::result::Result<TrialReport, String>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ci, t)| {
                let stream = ((ci as u64) << 32) | t;
                run_trial(
                    cells[ci].mechanism,
                    &workloads[ci],
                    &budgets[ci],
                    &config.profile,
                    config.mode,
                    config.master_seed,
                    t,
                    stream,
                    Some(fail_bars[ci]),
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for ((ci, _t), result) in tasks.iter().zip(results) {
        match result {
            Ok(report) => {
                per_cell[*ci].push(rows.len());
                rows.push(report);
            }
            Err(msg) => failures.push(msg),
        }
    }

    let mut summaries = Vec::with_capacity(cells.len());
    for (ci, cell) in cells.iter().enumerate() {
        let cell_rows: Vec<&TrialReport> = per_cell[ci].iter().map(|&i| &rows[i]).collect();
        if !cell_rows.is_empty() {
            summaries.push(summarize(cell, &cell_rows, fail_bars[ci]));
        }
    }

    Ok(SweepOutput {
        rows,
        summaries,
        failures,
    })
}
