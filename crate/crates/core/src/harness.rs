//! Seeded experiments: configuration, running a stack, regret, the
//! two-property audit, sweeps over `(T, V_T)`, and CSV input/output.
//!
//! Every CSV starts with a `# config_hash=<hex>` line; readers skip `#`
//! lines. Files for one run are named `<hash>_seed<seed>_<kind>.csv`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{grid_ucb_policy, wrap, GridUcbConfig, GridUcbPolicy, Wrapped};
use crate::base::{derive_params, BaseOptimizer, BaseParams, ProblemConstants};
use crate::environment::{
    build_sequence, CurvatureBounds, DriftKind, FeedbackSource, ObjectiveSequence,
    QuadraticObjective, SequenceSpec, SimulatedFeedback,
};
use crate::error::{Error, Result};
use crate::master::{ChangeTest, Master, MasterTrace, RestartEvent, RhoFunction, TraceStep};
use crate::{par, vector, UcbLearner};

/// Slack used by the audit when comparing floating-point sums.
pub const AUDIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stack {
    Base,
    MasterBase,
    MasterAdapter,
}

impl std::fmt::Display for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stack::Base => "base",
            Stack::MasterBase => "master-base",
            Stack::MasterAdapter => "master-adapter",
        })
    }
}

impl std::str::FromStr for Stack {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stack::Base),
            "master-base" => Ok(Stack::MasterBase),
            "master-adapter" => Ok(Stack::MasterAdapter),
            other => Err(Error::InvalidConfig(format!("unknown stack {other:?}"))),
        }
    }
}

/// Grid-UCB settings for the `master-adapter` stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub arm_count: usize,
    pub certificate_constant: f64,
    pub confidence_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { arm_count: 9, certificate_constant: 1.0, confidence_width: 2.0 }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub stack: Stack,
    /// `L`
    pub smoothness: f64,
    /// `σ`
    pub strong_concavity: f64,
    #[serde(default = "one")]
    pub kappa_scale: f64,
    /// Starting point for base learners; the domain center when absent.
    #[serde(default)]
    pub initial_point: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: GridSpec,
}

/// A complete, serializable experiment. `B_X = 2R` and `c₀` are read from
/// the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: SequenceSpec,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        hash_of(self)
    }

    pub fn bounds(&self) -> CurvatureBounds {
        CurvatureBounds {
            smoothness: self.algorithm.smoothness,
            strong_concavity: self.algorithm.strong_concavity,
        }
    }

    pub fn constants(&self) -> ProblemConstants {
        let domain = &self.environment.domain;
        ProblemConstants {
            smoothness: self.algorithm.smoothness,
            strong_concavity: self.algorithm.strong_concavity,
            dimension: domain.dimension(),
            horizon: self.environment.horizon as u64,
            diameter: domain.diameter(),
            interior_margin: domain.interior_margin,
        }
    }

    pub fn base_params(&self) -> Result<BaseParams> {
        derive_params(&self.constants(), self.algorithm.kappa_scale)
    }

    pub fn grid_config(&self) -> GridUcbConfig {
        GridUcbConfig {
            arm_count: self.algorithm.grid.arm_count,
            horizon: self.environment.horizon as u64,
            smoothness: self.algorithm.smoothness,
            certificate_constant: self.algorithm.grid.certificate_constant,
            confidence_width: self.algorithm.grid.confidence_width,
        }
    }

    pub fn grid_policy(&self) -> Result<GridUcbPolicy> {
        grid_ucb_policy(&self.environment.domain, &self.grid_config())
    }

    /// The `(ρ, λ)` pair the selected stack's statistic is audited against.
    pub fn radius(&self) -> Result<(RhoFunction, f64)> {
        match self.algorithm.stack {
            Stack::Base | Stack::MasterBase => {
                let p = self.base_params()?;
                Ok((p.rho_function(), p.lambda()))
            }
            Stack::MasterAdapter => {
                let policy = self.grid_policy()?;
                let wrapped = wrap(policy, self.environment.horizon as u64)?;
                Ok((wrapped.rho(), wrapped.lambda()))
            }
        }
    }

    /// Checks everything that can be checked without generating a sequence.
    pub fn validate(&self) -> Result<()> {
        self.environment.domain.validate()?;
        if self.environment.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        match self.algorithm.stack {
            Stack::Base | Stack::MasterBase => {
                let params = self.base_params()?;
                let start = self.initial_point();
                BaseOptimizer::with_initial_point(params, &self.environment.domain, start)?;
            }
            Stack::MasterAdapter => {
                self.radius()?;
            }
        }
        Ok(())
    }

    fn initial_point(&self) -> Vec<f64> {
        self.algorithm
            .initial_point
            .clone()
            .unwrap_or_else(|| self.environment.domain.center.clone())
    }

    pub fn build_sequence(&self, seed: u64) -> Result<ObjectiveSequence> {
        build_sequence(&self.environment, Some(&self.bounds()), seed)
    }
}

/// Independent RNG streams derived from one run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FEEDBACK_STREAM: u64 = 1;
const SCHEDULER_STREAM: u64 = 2;

/// Runs a learner on its own for the whole horizon. Scheduler columns of
/// the trace are left empty.
pub fn run_solo<L: UcbLearner, E: FeedbackSource + ?Sized>(
    learner: &mut L,
    env: &mut E,
    horizon: usize,
) -> MasterTrace {
    let mut steps = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let action = learner.next_action();
        let feedback = env.observe(t, &action);
        let rbar = learner.ingest(feedback);
        steps.push(TraceStep {
            t: t as u64,
            block_order: None,
            thread_order: None,
            action,
            feedback,
            rbar,
            running_min: None,
            restart: false,
            test_fired: None,
        });
    }
    MasterTrace { steps, restarts: Vec::new() }
}

/// Runs the configured stack against `sequence`.
pub fn run_stack(config: &ExperimentConfig, sequence: &ObjectiveSequence, seed: u64) -> Result<MasterTrace> {
    let horizon = sequence.horizon();
    let mut env = SimulatedFeedback::new(sequence, stream_seed(seed, FEEDBACK_STREAM));
    let scheduler_seed = stream_seed(seed, SCHEDULER_STREAM);
    match config.algorithm.stack {
        Stack::Base => {
            let mut learner = BaseOptimizer::with_initial_point(
                config.base_params()?,
                &sequence.domain,
                config.initial_point(),
            )?;
            Ok(run_solo(&mut learner, &mut env, horizon))
        }
        Stack::MasterBase => {
            let template = BaseOptimizer::with_initial_point(
                config.base_params()?,
                &sequence.domain,
                config.initial_point(),
            )?;
            let rho = template.params().rho_function();
            let master = Master::new(horizon as u64, rho, || template.clone(), scheduler_seed);
            Ok(master.run(&mut env))
        }
        Stack::MasterAdapter => {
            let template: Wrapped<GridUcbPolicy> = wrap(config.grid_policy()?, horizon as u64)?;
            let rho = template.rho();
            let master = Master::new(horizon as u64, rho, || template.clone(), scheduler_seed);
            Ok(master.run(&mut env))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub sequence: ObjectiveSequence,
    pub trace: MasterTrace,
}

/// Builds the sequence for `seed` and runs the configured stack on it.
pub fn simulate(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let sequence = config.build_sequence(seed)?;
    let trace = run_stack(config, &sequence, seed)?;
    Ok(RunResult { seed, sequence, trace })
}

// ---------------------------------------------------------------------------
// Regret

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub t: u64,
    /// `f_t(x_t*) - f_t(x_t)`
    pub instantaneous: f64,
    pub cumulative_dynamic: f64,
    /// `max_x Σ_{τ≤t} f_τ(x) - Σ_{τ≤t} f_τ(x_τ)`
    pub cumulative_stationary: f64,
}

fn check_lengths(trace: &MasterTrace, sequence: &ObjectiveSequence) -> Result<()> {
    if trace.steps.len() != sequence.horizon() {
        return Err(Error::LengthMismatch { trace: trace.steps.len(), sequence: sequence.horizon() });
    }
    if let Some(step) = trace.steps.first() {
        if step.action.len() != sequence.dimension() {
            return Err(Error::DimensionMismatch {
                expected: sequence.dimension(),
                got: step.action.len(),
            });
        }
    }
    Ok(())
}

/// Running maximum of `Σ_{τ≤t} f_τ` over the domain.
///
/// For quadratics `b - (σ_f/2)‖x-θ‖²` the sum is maximized at the
/// curvature-weighted mean of the peaks, which lies in the domain because
/// every peak does. The maximum equals `Σb - S/2` where `S` is the weighted
/// scatter about that mean, updated incrementally.
#[derive(Debug, Clone, Default)]
struct BestFixedPoint {
    weight: f64,
    mean: Vec<f64>,
    scatter: f64,
    peak_sum: f64,
}

impl BestFixedPoint {
    fn push(&mut self, obj: &QuadraticObjective) {
        let w = obj.curvature;
        if self.mean.is_empty() {
            self.mean = vec![0.0; obj.dimension()];
        }
        let before = vector::sub(&obj.peak_location, &self.mean);
        self.weight += w;
        let share = w / self.weight;
        for (m, d) in self.mean.iter_mut().zip(&before) {
            *m += share * d;
        }
        let after = vector::sub(&obj.peak_location, &self.mean);
        self.scatter += w * vector::dot(&before, &after);
        self.peak_sum += obj.peak_value;
    }

    fn value(&self) -> f64 {
        self.peak_sum - 0.5 * self.scatter
    }
}

/// The maximizer of `Σ_t f_t` over the domain.
pub fn best_fixed_point(objectives: &[QuadraticObjective]) -> Vec<f64> {
    let mut acc = BestFixedPoint::default();
    for obj in objectives {
        acc.push(obj);
    }
    acc.mean
}

pub fn regret_rows(trace: &MasterTrace, sequence: &ObjectiveSequence) -> Result<Vec<RegretRow>> {
    check_lengths(trace, sequence)?;
    let mut rows = Vec::with_capacity(trace.steps.len());
    let mut dynamic = 0.0;
    let mut collected = 0.0;
    let mut best = BestFixedPoint::default();
    for (i, step) in trace.steps.iter().enumerate() {
        let obj = sequence.objective(i + 1);
        let value = obj.evaluate(&step.action);
        let instantaneous = obj.peak_value - value;
        dynamic += instantaneous;
        collected += value;
        best.push(obj);
        rows.push(RegretRow {
            t: (i + 1) as u64,
            instantaneous,
            cumulative_dynamic: dynamic,
            cumulative_stationary: best.value() - collected,
        });
    }
    Ok(rows)
}

/// `Σ_t (f_t* - f_t(x_t))`
pub fn dynamic_regret(trace: &MasterTrace, sequence: &ObjectiveSequence) -> Result<f64> {
    check_lengths(trace, sequence)?;
    Ok(trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let obj = sequence.objective(i + 1);
            obj.peak_value - obj.evaluate(&step.action)
        })
        .sum())
}

/// `max_{x ∈ X} Σ_t f_t(x) - Σ_t f_t(x_t)`
pub fn stationary_regret(trace: &MasterTrace, sequence: &ObjectiveSequence) -> Result<f64> {
    check_lengths(trace, sequence)?;
    let x_star = best_fixed_point(sequence.objectives());
    Ok(trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let obj = sequence.objective(i + 1);
            obj.evaluate(&x_star) - obj.evaluate(&step.action)
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Audit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub t: u64,
    pub in_scope: bool,
    pub property1: bool,
    pub property2: bool,
    pub rho: f64,
    pub lambda: f64,
    /// `Δ_{[1,t]}`
    pub variation: f64,
    pub rbar: f64,
    /// `min_{τ≤t} f_τ*`
    pub min_optimum: f64,
    /// `(1/t) Σ_{τ≤t} (r̄_τ - y_τ)`
    pub average_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub in_scope: usize,
    pub property1_violations: usize,
    pub property2_violations: usize,
}

impl AuditReport {
    fn from_rows(rows: Vec<AuditRow>) -> Self {
        let scoped = || rows.iter().filter(|r| r.in_scope);
        AuditReport {
            in_scope: scoped().count(),
            property1_violations: scoped().filter(|r| !r.property1).count(),
            property2_violations: scoped().filter(|r| !r.property2).count(),
            rows,
        }
    }

    pub fn property1_rate(&self) -> f64 {
        rate(self.property1_violations, self.in_scope)
    }

    pub fn property2_rate(&self) -> f64 {
        rate(self.property2_violations, self.in_scope)
    }

    pub fn violations(&self) -> usize {
        self.property1_violations + self.property2_violations
    }
}

fn rate(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Checks both properties at every `t`. Only `t` with `λΔ_{[1,t]} ≤ ρ(t)`
/// count towards the violation totals.
pub fn audit_ucb_properties(
    trace: &MasterTrace,
    sequence: &ObjectiveSequence,
    rho: &RhoFunction,
    lambda: f64,
) -> Result<AuditReport> {
    check_lengths(trace, sequence)?;
    let mut rows = Vec::with_capacity(trace.steps.len());
    let mut min_optimum = f64::INFINITY;
    let mut gap_sum = 0.0;
    for (i, step) in trace.steps.iter().enumerate() {
        let t = i + 1;
        min_optimum = min_optimum.min(sequence.objective(t).peak_value);
        gap_sum += step.rbar - step.feedback;
        let variation = sequence.variation_through(t);
        let rho_t = rho.eval(t as f64);
        let slack = lambda * variation;
        let average_gap = gap_sum / t as f64;
        rows.push(AuditRow {
            t: t as u64,
            in_scope: slack <= rho_t,
            property1: step.rbar >= min_optimum - slack - AUDIT_TOLERANCE,
            property2: average_gap <= rho_t + slack + AUDIT_TOLERANCE,
            rho: rho_t,
            lambda,
            variation,
            rbar: step.rbar,
            min_optimum,
            average_gap,
        });
    }
    Ok(AuditReport::from_rows(rows))
}

// ---------------------------------------------------------------------------
// CSV

fn create(path: &Path, config_hash: &str) -> Result<File> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# config_hash={config_hash}").map_err(|e| Error::io(path, e))?;
    Ok(file)
}

fn write_rows<T: Serialize>(path: &Path, config_hash: &str, rows: &[T], header: &[&str]) -> Result<()> {
    let file = create(path, config_hash)?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    writer.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let found = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::malformed(path, format!("expected header {header:?}, found {found:?}")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Reads the `config_hash` from a file written by this module.
pub fn read_config_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("# config_hash="))
        .map(|s| s.trim().to_string())
        .ok_or_else(|| Error::malformed(path, "missing config_hash line"))
}

pub const REGRET_HEADER: &[&str] = &["t", "instantaneous", "cumulative_dynamic", "cumulative_stationary"];
pub const AUDIT_HEADER: &[&str] = &[
    "t", "in_scope", "property1", "property2", "rho", "lambda", "variation", "rbar", "min_optimum",
    "average_gap",
];
pub const RESTART_HEADER: &[&str] = &["t", "test", "thread_order", "block_n", "block_start"];

pub fn write_regret_csv(path: &Path, config_hash: &str, rows: &[RegretRow]) -> Result<()> {
    write_rows(path, config_hash, rows, REGRET_HEADER)
}

pub fn read_regret_csv(path: &Path) -> Result<Vec<RegretRow>> {
    read_rows(path, REGRET_HEADER)
}

pub fn write_audit_csv(path: &Path, config_hash: &str, report: &AuditReport) -> Result<()> {
    write_rows(path, config_hash, &report.rows, AUDIT_HEADER)
}

pub fn read_audit_csv(path: &Path) -> Result<AuditReport> {
    Ok(AuditReport::from_rows(read_rows(path, AUDIT_HEADER)?))
}

#[derive(Serialize, Deserialize)]
struct RestartRow {
    t: u64,
    test: u8,
    thread_order: Option<u32>,
    block_n: u32,
    block_start: u64,
}

fn test_from_code(code: u8) -> Option<ChangeTest> {
    match code {
        1 => Some(ChangeTest::Test1),
        2 => Some(ChangeTest::Test2),
        _ => None,
    }
}

pub fn write_restarts_csv(path: &Path, config_hash: &str, restarts: &[RestartEvent]) -> Result<()> {
    let rows: Vec<RestartRow> = restarts
        .iter()
        .map(|r| RestartRow {
            t: r.t,
            test: r.test.code(),
            thread_order: r.thread_order,
            block_n: r.block_order,
            block_start: r.block_start,
        })
        .collect();
    write_rows(path, config_hash, &rows, RESTART_HEADER)
}

pub fn read_restarts_csv(path: &Path) -> Result<Vec<RestartEvent>> {
    read_rows::<RestartRow>(path, RESTART_HEADER)?
        .into_iter()
        .map(|r| {
            Ok(RestartEvent {
                t: r.t,
                test: test_from_code(r.test)
                    .ok_or_else(|| Error::malformed(path, format!("bad test code {}", r.test)))?,
                thread_order: r.thread_order,
                block_order: r.block_n,
                block_start: r.block_start,
            })
        })
        .collect()
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Trace CSV: `t, block_n, thread_order, x_1..x_d, y, rbar, U, restart_flag,
/// test_fired` with `test_fired` 0 (none), 1 or 2. Scheduler columns are
/// empty for a learner run on its own.
pub fn write_trace_csv(path: &Path, config_hash: &str, trace: &MasterTrace) -> Result<()> {
    let d = trace.steps.first().map_or(0, |s| s.action.len());
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash}");
    let mut header = vec!["t".to_string(), "block_n".into(), "thread_order".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend(["y", "rbar", "U", "restart_flag", "test_fired"].map(String::from));
    let _ = writeln!(out, "{}", header.join(","));
    for s in &trace.steps {
        let _ = write!(out, "{},{},{}", s.t, opt(s.block_order), opt(s.thread_order));
        for x in &s.action {
            let _ = write!(out, ",{x}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            s.feedback,
            s.rbar,
            opt(s.running_min),
            u8::from(s.restart),
            s.test_fired.map_or(0, ChangeTest::code)
        );
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a trace CSV. Restart events are rebuilt from the flags; their
/// thread and block fields come from the same row.
pub fn read_trace_csv(path: &Path) -> Result<MasterTrace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let n = headers.len();
    if n < 8 || &headers[0] != "t" || &headers[n - 1] != "test_fired" {
        return Err(Error::malformed(path, format!("unexpected trace header {headers:?}")));
    }
    let d = n - 8;
    let mut trace = MasterTrace::default();
    let mut block_start = 1;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let bad = |i: usize| Error::malformed(path, format!("bad field {:?} in column {}", &record[i], &headers[i]));
        let num = |i: usize| record[i].parse::<f64>().map_err(|_| bad(i));
        let maybe_u32 = |i: usize| -> Result<Option<u32>> {
            if record[i].is_empty() {
                Ok(None)
            } else {
                record[i].parse().map(Some).map_err(|_| bad(i))
            }
        };
        let t: u64 = record[0].parse().map_err(|_| bad(0))?;
        let block_order = maybe_u32(1)?;
        let thread_order = maybe_u32(2)?;
        let action = (0..d).map(|j| num(3 + j)).collect::<Result<Vec<_>>>()?;
        let running_min = if record[3 + d + 2].is_empty() { None } else { Some(num(3 + d + 2)?) };
        let restart = match &record[3 + d + 3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(3 + d + 3)),
        };
        let code: u8 = record[3 + d + 4].parse().map_err(|_| bad(3 + d + 4))?;
        let test_fired = match code {
            0 => None,
            c => Some(test_from_code(c).ok_or_else(|| bad(3 + d + 4))?),
        };
        if running_min.is_none() || trace.steps.last().is_some_and(|p: &TraceStep| p.restart || p.block_order != block_order) {
            block_start = t;
        }
        if let (true, Some(test), Some(order)) = (restart, test_fired, block_order) {
            trace.restarts.push(RestartEvent {
                t,
                test,
                thread_order: if test == ChangeTest::Test1 { thread_order } else { None },
                block_order: order,
                block_start,
            });
        }
        trace.steps.push(TraceStep {
            t,
            block_order,
            thread_order,
            action,
            feedback: num(3 + d)?,
            rbar: num(3 + d + 1)?,
            running_min,
            restart,
            test_fired,
        });
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Experiments

/// Paths written for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub seed: u64,
    pub trace: PathBuf,
    pub restarts: PathBuf,
    pub regret: PathBuf,
    pub audit: PathBuf,
    pub sequence: PathBuf,
    pub final_dynamic_regret: f64,
    pub restart_count: usize,
    pub audit_violations: usize,
}

pub fn run_file_stem(config_hash: &str, seed: u64) -> String {
    format!("{config_hash}_seed{seed}")
}

/// Runs every seed of `config` and writes its CSVs into `out_dir`. The
/// configuration and every seed's sequence are validated before any run
/// starts.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunFiles>> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig("no seeds given".into()));
    }
    let sequences = par::map(&config.seeds, |&seed| config.build_sequence(seed).map(|s| (seed, s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = config.config_hash();
    let (rho, lambda) = config.radius()?;
    par::map(&sequences, |(seed, sequence)| {
        let trace = run_stack(config, sequence, *seed)?;
        let regret = regret_rows(&trace, sequence)?;
        let audit = audit_ucb_properties(&trace, sequence, &rho, lambda)?;
        let stem = run_file_stem(&hash, *seed);
        let files = RunFiles {
            seed: *seed,
            trace: out_dir.join(format!("{stem}_trace.csv")),
            restarts: out_dir.join(format!("{stem}_restarts.csv")),
            regret: out_dir.join(format!("{stem}_regret.csv")),
            audit: out_dir.join(format!("{stem}_audit.csv")),
            sequence: out_dir.join(format!("{stem}_sequence.csv")),
            final_dynamic_regret: regret.last().map_or(0.0, |r| r.cumulative_dynamic),
            restart_count: trace.restarts.len(),
            audit_violations: audit.violations(),
        };
        write_trace_csv(&files.trace, &hash, &trace)?;
        write_restarts_csv(&files.restarts, &hash, &trace.restarts)?;
        write_regret_csv(&files.regret, &hash, &regret)?;
        write_audit_csv(&files.audit, &hash, &audit)?;
        sequence.write_csv(&files.sequence, &hash)?;
        Ok(files)
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub horizons: Vec<usize>,
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    /// For sinusoidal drift, set `periods = max(1, ceil(p·V_T))` per cell.
    #[serde(default)]
    pub periods_per_unit_budget: Option<f64>,
}

impl SweepSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn config_hash(&self) -> String {
        hash_of(self)
    }

    /// The experiment run in cell `(T, V_T)`.
    pub fn cell_config(&self, horizon: usize, budget: f64) -> ExperimentConfig {
        let mut config = self.base.clone();
        config.environment.horizon = horizon;
        config.environment.drift.target_budget = Some(budget);
        if let (Some(p), DriftKind::Sinusoidal { periods, .. }) =
            (self.periods_per_unit_budget, &mut config.environment.drift.kind)
        {
            *periods = (p * budget).ceil().max(1.0);
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "V_T")]
    pub budget: f64,
    pub seed: u64,
    pub regret: Option<f64>,
    pub restarts: Option<usize>,
    pub runtime_ms: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "V_T")]
    pub budget: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean_regret: Option<f64>,
    /// Standard error of the mean; empty with fewer than two runs.
    pub stderr_regret: Option<f64>,
    pub mean_restarts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    #[serde(rename = "V_T")]
    pub budget: f64,
    pub points: usize,
    /// Least-squares slope of `log₂ mean_regret` against `log₂ T`.
    pub slope: f64,
    /// Empty with fewer than three points.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
    pub slopes: Vec<SlopeFit>,
}

pub const SWEEP_ROW_HEADER: &[&str] = &["T", "V_T", "seed", "regret", "restarts", "runtime_ms", "error"];
pub const SWEEP_SUMMARY_HEADER: &[&str] =
    &["T", "V_T", "runs", "failures", "mean_regret", "stderr_regret", "mean_restarts"];
pub const SWEEP_SLOPE_HEADER: &[&str] = &["V_T", "points", "slope", "stderr"];

/// Runs one seed of one cell.
pub fn sweep_cell(spec: &SweepSpec, horizon: usize, budget: f64, seed: u64) -> SweepRow {
    let start = Instant::now();
    let config = spec.cell_config(horizon, budget);
    let outcome = config
        .validate()
        .and_then(|_| simulate(&config, seed))
        .and_then(|run| Ok((dynamic_regret(&run.trace, &run.sequence)?, run.trace.restarts.len())));
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((regret, restarts)) => SweepRow {
            horizon,
            budget,
            seed,
            regret: Some(regret),
            restarts: Some(restarts),
            runtime_ms,
            error: String::new(),
        },
        Err(e) => SweepRow {
            horizon,
            budget,
            seed,
            regret: None,
            restarts: None,
            runtime_ms,
            error: e.to_string(),
        },
    }
}

/// Runs the whole grid (cells and seeds in parallel). Failed runs are kept
/// as rows with an error message.
pub fn sweep(spec: &SweepSpec) -> SweepSummary {
    let mut jobs = Vec::new();
    for &horizon in &spec.horizons {
        for &budget in &spec.budgets {
            for &seed in &spec.seeds {
                jobs.push((horizon, budget, seed));
            }
        }
    }
    let rows = par::map(&jobs, |&(h, v, s)| sweep_cell(spec, h, v, s));
    summarize(rows)
}

fn mean_and_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

/// Ordinary least squares of `y` on `x`: `(slope, stderr of slope)`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<(f64, Option<f64>)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let stderr = (n > 2).then(|| {
        let intercept = my - slope * mx;
        let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (ssr / (n - 2) as f64 / sxx).sqrt()
    });
    Some((slope, stderr))
}

/// Per-cell means and per-budget slopes, in order of first appearance.
pub fn summarize(rows: Vec<SweepRow>) -> SweepSummary {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    let mut groups: HashMap<(usize, u64), Vec<&SweepRow>> = HashMap::new();
    for row in &rows {
        let key = (row.horizon, row.budget.to_bits());
        groups.entry(key).or_insert_with(|| {
            keys.push((row.horizon, row.budget));
            Vec::new()
        });
        groups.get_mut(&key).unwrap().push(row);
    }
    let aggregates: Vec<SweepAggregate> = keys
        .iter()
        .map(|&(horizon, budget)| {
            let group = &groups[&(horizon, budget.to_bits())];
            let regrets: Vec<f64> = group.iter().filter_map(|r| r.regret).collect();
            let restarts: Vec<f64> = group.iter().filter_map(|r| r.restarts.map(|n| n as f64)).collect();
            let (mean_regret, stderr_regret) = mean_and_stderr(&regrets);
            SweepAggregate {
                horizon,
                budget,
                runs: regrets.len(),
                failures: group.len() - regrets.len(),
                mean_regret,
                stderr_regret,
                mean_restarts: mean_and_stderr(&restarts).0,
            }
        })
        .collect();

    let mut budgets: Vec<f64> = Vec::new();
    for a in &aggregates {
        if !budgets.iter().any(|b| b.to_bits() == a.budget.to_bits()) {
            budgets.push(a.budget);
        }
    }
    let slopes = budgets
        .into_iter()
        .filter_map(|budget| {
            let (x, y): (Vec<f64>, Vec<f64>) = aggregates
                .iter()
                .filter(|a| a.budget.to_bits() == budget.to_bits())
                .filter_map(|a| match a.mean_regret {
                    Some(m) if m > 0.0 => Some(((a.horizon as f64).log2(), m.log2())),
                    _ => None,
                })
                .unzip();
            fit_slope(&x, &y).map(|(slope, stderr)| SlopeFit { budget, points: x.len(), slope, stderr })
        })
        .collect();
    SweepSummary { rows, aggregates, slopes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub slopes: PathBuf,
}

pub fn write_sweep(summary: &SweepSummary, out_dir: &Path, config_hash: &str) -> Result<SweepFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = SweepFiles {
        rows: out_dir.join(format!("{config_hash}_sweep_rows.csv")),
        summary: out_dir.join(format!("{config_hash}_sweep_summary.csv")),
        slopes: out_dir.join(format!("{config_hash}_sweep_slopes.csv")),
    };
    write_rows(&files.rows, config_hash, &summary.rows, SWEEP_ROW_HEADER)?;
    write_rows(&files.summary, config_hash, &summary.aggregates, SWEEP_SUMMARY_HEADER)?;
    write_rows(&files.slopes, config_hash, &summary.slopes, SWEEP_SLOPE_HEADER)?;
    Ok(files)
}

pub fn read_sweep_rows(path: &Path) -> Result<Vec<SweepRow>> {
    read_rows(path, SWEEP_ROW_HEADER)
}

pub fn read_sweep_summary(path: &Path) -> Result<Vec<SweepAggregate>> {
    read_rows(path, SWEEP_SUMMARY_HEADER)
}

pub fn read_sweep_slopes(path: &Path) -> Result<Vec<SlopeFit>> {
    read_rows(path, SWEEP_SLOPE_HEADER)
}

// ---------------------------------------------------------------------------
// Parameters

/// Human-readable table of the derived base-learner constants.
pub fn describe_params(constants: &ProblemConstants, kappa_scale: f64) -> Result<String> {
    let params = derive_params(constants, kappa_scale)?;
    let terms = constants.kappa_terms();
    let mut out = String::new();
    let _ = writeln!(out, "eta0   = {}", params.step_size);
    let _ = writeln!(out, "gamma  = {}", params.contraction);
    let _ = writeln!(out, "N0     = {}", params.initial_batch);
    let _ = writeln!(out, "kappa0 = {}  (kappa_scale {kappa_scale})", params.ucb_constant);
    let _ = writeln!(
        out,
        "  terms: noise {} smoothness {} epochs {} diameter {} curvature {}",
        terms.noise, terms.smoothness, terms.epochs, terms.diameter, terms.curvature
    );
    let _ = writeln!(out, "lambda = {}", params.lambda());
    let _ = writeln!(out, "{:>12} {:>16}", "t", "rho(t)");
    let mut t = 1u64;
    while t <= constants.horizon {
        let _ = writeln!(out, "{:>12} {:>16.6e}", t, params.rho(t as f64));
        t *= 4;
    }
    Ok(out)
}
