//! Drifting sequences of concave quadratics over a Euclidean ball.
//!
//! Every objective has the form `f(x) = b - (σ_f / 2) ‖x - θ‖²`. The family
//! keeps optima, optimal values and the sup-norm change between consecutive
//! objectives in closed form, so regret and variation accounting are exact.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

/// Slack used when checking membership and boundedness invariants.
const TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallDomain {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Distance `c₀` the maximizers (and the learner's iterates) keep from
    /// the boundary.
    pub interior_margin: f64,
}

impl BallDomain {
    pub fn new(center: Vec<f64>, radius: f64, interior_margin: f64) -> Result<Self> {
        let domain = BallDomain { center, radius, interior_margin };
        domain.validate()?;
        Ok(domain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.is_empty() {
            return Err(Error::InvalidConfig("domain dimension must be at least 1".into()));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("domain center must be finite".into()));
        }
        if !(self.interior_margin > 0.0 && self.interior_margin < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "interior margin must lie in (0, 1), got {}",
                self.interior_margin
            )));
        }
        if !(self.radius.is_finite() && self.radius > self.interior_margin) {
            return Err(Error::InvalidConfig(format!(
                "radius {} must exceed the interior margin {}",
                self.radius, self.interior_margin
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.center.len()
    }

    /// `B_X = 2R`.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    /// Radius `R - c₀` of the interior ball `X°(c₀)`.
    pub fn interior_radius(&self) -> f64 {
        self.radius - self.interior_margin
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        vector::dist(x, &self.center) <= self.radius + TOL
    }

    pub fn in_interior(&self, x: &[f64]) -> bool {
        vector::dist(x, &self.center) <= self.interior_radius() + TOL
    }

    /// Euclidean projection onto `X°(c₀)`, the ball of radius `R - c₀` about
    /// the center.
    pub fn project_interior(&self, z: &[f64]) -> Vec<f64> {
        let r = self.interior_radius();
        let offset = vector::sub(z, &self.center);
        let n = vector::norm(&offset);
        if n <= r {
            return z.to_vec();
        }
        vector::axpy(&self.center, r / n, &offset)
    }
}

/// Curvature bounds `σ ≤ σ_f ≤ L` shared by every objective in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBounds {
    /// `L`: bound on gradient norm and Hessian operator norm.
    pub smoothness: f64,
    /// `σ`: strong-concavity constant.
    pub strong_concavity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    pub peak_value: f64,
    pub curvature: f64,
    pub peak_location: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(peak_value: f64, curvature: f64, peak_location: Vec<f64>) -> Self {
        QuadraticObjective { peak_value, curvature, peak_location }
    }

    pub fn dimension(&self) -> usize {
        self.peak_location.len()
    }

    /// `b - (σ_f / 2) ‖x - θ‖²`
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.peak_location).map(|(a, b)| (a - b) * (a - b)).sum();
        self.peak_value - 0.5 * self.curvature * d2
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.peak_location)
            .map(|(xi, ti)| -self.curvature * (xi - ti))
            .collect()
    }

    /// Maximizer and maximum. The vertex is feasible because the peak lies
    /// in the interior of the domain.
    pub fn optimum(&self) -> (Vec<f64>, f64) {
        (self.peak_location.clone(), self.peak_value)
    }

    /// Lowest value over the domain, attained at the boundary point farthest
    /// from the peak.
    pub fn min_over(&self, domain: &BallDomain) -> f64 {
        let far = vector::dist(&self.peak_location, &domain.center) + domain.radius;
        self.peak_value - 0.5 * self.curvature * far * far
    }

    /// `sup_{x ∈ X} |f(x)|`.
    pub fn sup_abs(&self, domain: &BallDomain) -> f64 {
        self.peak_value.abs().max(self.min_over(domain).abs())
    }

    /// Checks the interior-maximizer, boundedness and curvature invariants.
    pub fn check(
        &self,
        domain: &BallDomain,
        noise_amplitude: f64,
        bounds: Option<&CurvatureBounds>,
    ) -> std::result::Result<(), String> {
        if self.dimension() != domain.dimension() {
            return Err(format!(
                "peak has dimension {}, domain has {}",
                self.dimension(),
                domain.dimension()
            ));
        }
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            return Err(format!("curvature must be positive, got {}", self.curvature));
        }
        if !self.peak_value.is_finite() || self.peak_location.iter().any(|v| !v.is_finite()) {
            return Err("non-finite objective parameters".into());
        }
        if !domain.in_interior(&self.peak_location) {
            return Err(format!(
                "peak {:?} lies outside the interior ball of radius {}",
                self.peak_location,
                domain.interior_radius()
            ));
        }
        let sup = self.sup_abs(domain);
        if sup + noise_amplitude > 1.0 + TOL {
            return Err(format!(
                "sup |f| + noise = {} + {} exceeds 1",
                sup, noise_amplitude
            ));
        }
        if let Some(b) = bounds {
            if self.curvature < b.strong_concavity - TOL || self.curvature > b.smoothness + TOL {
                return Err(format!(
                    "curvature {} outside [σ, L] = [{}, {}]",
                    self.curvature, b.strong_concavity, b.smoothness
                ));
            }
            if self.curvature * domain.diameter() > b.smoothness + TOL {
                return Err(format!(
                    "gradient bound σ_f·B_X = {} exceeds L = {}",
                    self.curvature * domain.diameter(),
                    b.smoothness
                ));
            }
        }
        Ok(())
    }
}

/// One noisy observation. `mean` is kept for auditing and is never shown to
/// a learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSample {
    pub value: f64,
    pub mean: f64,
}

/// Draws `f(x) + ξ` with `ξ` uniform on `[-ν, ν]`. Boundedness is guaranteed
/// by construction-time validation, so nothing is clipped.
pub fn sample_feedback<R: Rng + ?Sized>(
    obj: &QuadraticObjective,
    x: &[f64],
    noise_amplitude: f64,
    rng: &mut R,
) -> FeedbackSample {
    let mean = obj.evaluate(x);
    let value = if noise_amplitude > 0.0 {
        mean + rng.random_range(-noise_amplitude..=noise_amplitude)
    } else {
        mean
    };
    FeedbackSample { value, mean }
}

/// `sup_{x ∈ X} |f_b(x) - f_a(x)|`, exact.
///
/// The difference of two isotropic quadratics is `α/2 ‖y‖² + w·y + g(c)` in
/// the centered coordinate `y = x - c`, with `α = σ_a - σ_b`. For a fixed
/// radius `r = ‖y‖` the linear term ranges over `[-‖w‖ r, ‖w‖ r]`, which
/// reduces the problem to two one-dimensional quadratics on `[0, R]`.
pub fn step_variation(
    a: &QuadraticObjective,
    b: &QuadraticObjective,
    domain: &BallDomain,
) -> Result<f64> {
    let d = domain.dimension();
    for obj in [a, b] {
        if obj.dimension() != d {
            return Err(Error::DimensionMismatch { expected: d, got: obj.dimension() });
        }
    }
    let c = &domain.center;
    let r = domain.radius;
    let g_center = b.evaluate(c) - a.evaluate(c);
    // w = ∇(f_b - f_a)(c)
    let w: Vec<f64> = (0..d)
        .map(|i| {
            -b.curvature * (c[i] - b.peak_location[i]) + a.curvature * (c[i] - a.peak_location[i])
        })
        .collect();
    let k = vector::norm(&w);
    let alpha = a.curvature - b.curvature;

    if alpha == 0.0 {
        // Affine difference: the sup sits on the boundary along ±w.
        return Ok(g_center.abs() + k * r);
    }

    let mut best = g_center.abs();
    for sign in [1.0, -1.0] {
        let h = |s: f64| 0.5 * alpha * s * s + sign * k * s + g_center;
        best = best.max(h(r).abs());
        let vertex = -sign * k / alpha;
        if vertex > 0.0 && vertex < r {
            best = best.max(h(vertex).abs());
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftKind {
    /// The peak alternates between the anchor and `anchor + jump·u` at
    /// `changes` evenly spaced times; the peak value alternates between `b`
    /// and `b + peak_jump`.
    PiecewiseConstant {
        changes: usize,
        jump: f64,
        #[serde(default)]
        peak_jump: f64,
    },
    /// The peak sweeps linearly from `anchor - amplitude·u` to
    /// `anchor + amplitude·u` over the horizon.
    LinearDrift { amplitude: f64 },
    /// `θ_t = anchor + amplitude·sin(2π·periods·(t-1)/T)·u`.
    Sinusoidal { amplitude: f64, periods: f64 },
    /// Gaussian steps of scale `step_scale`, projected back into `X°(c₀)`.
    RandomWalk { step_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    #[serde(flatten)]
    pub kind: DriftKind,
    /// Reference point for the peak; defaults to the domain center.
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
    /// Drift direction `u`; drawn uniformly on the sphere when absent.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    /// Seed for the drift's own randomness. When absent the run seed is used,
    /// so each run sees a different realization.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Rescale the drift magnitude so that `V_T` lands within 1% of this.
    #[serde(default)]
    pub target_budget: Option<f64>,
}

impl DriftSchedule {
    pub fn new(kind: DriftKind) -> Self {
        DriftSchedule { kind, anchor: None, direction: None, seed: None, target_budget: None }
    }

    pub fn stationary() -> Self {
        Self::new(DriftKind::PiecewiseConstant { changes: 0, jump: 0.0, peak_jump: 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveFamily {
    pub peak_value: f64,
    pub curvature: f64,
}

/// Everything needed to build an [`ObjectiveSequence`] apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub domain: BallDomain,
    pub family: ObjectiveFamily,
    pub drift: DriftSchedule,
    #[serde(default)]
    pub noise_amplitude: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSequence {
    pub domain: BallDomain,
    pub noise_amplitude: f64,
    objectives: Vec<QuadraticObjective>,
    /// `Δ(t)` for `t = 1..T-1`, stored zero-based.
    step_variation: Vec<f64>,
    /// `Δ_{[1,t]}` for `t = 1..T`, stored zero-based.
    prefix_variation: Vec<f64>,
    total_budget: f64,
}

impl ObjectiveSequence {
    /// Validates every objective and computes the exact variation profile.
    pub fn from_objectives(
        domain: BallDomain,
        noise_amplitude: f64,
        objectives: Vec<QuadraticObjective>,
        bounds: Option<&CurvatureBounds>,
    ) -> Result<Self> {
        domain.validate()?;
        if !(noise_amplitude >= 0.0 && noise_amplitude.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise amplitude must be non-negative, got {noise_amplitude}"
            )));
        }
        if objectives.is_empty() {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        for (i, obj) in objectives.iter().enumerate() {
            obj.check(&domain, noise_amplitude, bounds)
                .map_err(|reason| Error::InvalidObjective { t: i + 1, reason })?;
        }
        let step_variation = objectives
            .windows(2)
            .map(|w| step_variation(&w[0], &w[1], &domain))
            .collect::<Result<Vec<_>>>()?;
        let mut prefix_variation = Vec::with_capacity(objectives.len());
        let mut acc = 0.0;
        prefix_variation.push(0.0);
        for v in &step_variation {
            acc += v;
            prefix_variation.push(acc);
        }
        Ok(ObjectiveSequence {
            domain,
            noise_amplitude,
            objectives,
            step_variation,
            prefix_variation,
            total_budget: acc,
        })
    }

    pub fn horizon(&self) -> usize {
        self.objectives.len()
    }

    pub fn dimension(&self) -> usize {
        self.domain.dimension()
    }

    pub fn objectives(&self) -> &[QuadraticObjective] {
        &self.objectives
    }

    /// Objective `f_t` for `t` in `1..=T`.
    pub fn objective(&self, t: usize) -> &QuadraticObjective {
        &self.objectives[t - 1]
    }

    /// `Δ(t) = ‖f_{t+1} - f_t‖_∞` for `t` in `1..T`.
    pub fn step_variation(&self, t: usize) -> f64 {
        self.step_variation[t - 1]
    }

    pub fn step_variations(&self) -> &[f64] {
        &self.step_variation
    }

    /// `Δ_{[1,t]} = Σ_{τ<t} Δ(τ)`.
    pub fn variation_through(&self, t: usize) -> f64 {
        self.prefix_variation[t - 1]
    }

    /// `V_T`.
    pub fn total_budget(&self) -> f64 {
        self.total_budget
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, x: &[f64], rng: &mut R) -> FeedbackSample {
        sample_feedback(self.objective(t), x, self.noise_amplitude, rng)
    }

    /// Audit CSV: `t, b, sigma_f, theta_1..theta_d, delta_t`. The last row has
    /// an empty `delta_t`. Domain and noise metadata ride along as `#` lines.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash={config_hash}");
        let center: Vec<String> = self.domain.center.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "# center={} radius={} interior_margin={} noise_amplitude={}",
            center.join(";"),
            self.domain.radius,
            self.domain.interior_margin,
            self.noise_amplitude
        );
        let mut header = vec!["t".to_string(), "b".into(), "sigma_f".into()];
        header.extend((1..=self.dimension()).map(|i| format!("theta_{i}")));
        header.push("delta_t".into());
        let _ = writeln!(out, "{}", header.join(","));
        for (i, obj) in self.objectives.iter().enumerate() {
            let _ = write!(out, "{},{},{}", i + 1, obj.peak_value, obj.curvature);
            for v in &obj.peak_location {
                let _ = write!(out, ",{v}");
            }
            match self.step_variation.get(i) {
                Some(delta) => {
                    let _ = writeln!(out, ",{delta}");
                }
                None => out.push_str(",\n"),
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a sequence written by [`write_csv`](Self::write_csv) and
    /// recomputes the variation profile from the objectives.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut meta = std::collections::HashMap::new();
        for line in text.lines().filter(|l| l.starts_with('#')) {
            for kv in line.trim_start_matches('#').split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let num = |key: &str| -> Result<f64> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::malformed(path, format!("missing metadata {key}")))
        };
        let center: Vec<f64> = meta
            .get("center")
            .ok_or_else(|| Error::malformed(path, "missing metadata center"))?
            .split(';')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        let domain = BallDomain::new(center, num("radius")?, num("interior_margin")?)?;
        let noise = num("noise_amplitude")?;
        let d = domain.dimension();

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.len() != d + 4 {
            return Err(Error::malformed(
                path,
                format!("expected {} columns, found {}", d + 4, headers.len()),
            ));
        }
        let mut objectives = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let field = |i: usize| -> Result<f64> {
                record[i]
                    .parse()
                    .map_err(|_| Error::malformed(path, format!("bad number {:?}", &record[i])))
            };
            let theta = (0..d).map(|j| field(3 + j)).collect::<Result<Vec<_>>>()?;
            objectives.push(QuadraticObjective::new(field(1)?, field(2)?, theta));
        }
        ObjectiveSequence::from_objectives(domain, noise, objectives, None)
    }
}

/// A source of scalar bandit feedback indexed by global time.
pub trait FeedbackSource {
    fn dimension(&self) -> usize;

    /// Observe the feedback for playing `x` at global time `t` (1-based).
    fn observe(&mut self, t: usize, x: &[f64]) -> f64;
}

/// Feedback drawn from an [`ObjectiveSequence`] with its own RNG stream.
pub struct SimulatedFeedback<'a> {
    sequence: &'a ObjectiveSequence,
    rng: ChaCha8Rng,
}

impl<'a> SimulatedFeedback<'a> {
    pub fn new(sequence: &'a ObjectiveSequence, seed: u64) -> Self {
        SimulatedFeedback { sequence, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl FeedbackSource for SimulatedFeedback<'_> {
    fn dimension(&self) -> usize {
        self.sequence.dimension()
    }

    fn observe(&mut self, t: usize, x: &[f64]) -> f64 {
        self.sequence.sample(t, x, &mut self.rng).value
    }
}

/// Generates the sequence described by `spec`, validating every objective
/// against `bounds`. Deterministic in `seed` (or in `spec.drift.seed` when
/// that is set).
pub fn build_sequence(
    spec: &SequenceSpec,
    bounds: Option<&CurvatureBounds>,
    seed: u64,
) -> Result<ObjectiveSequence> {
    spec.domain.validate()?;
    if spec.horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if !(spec.noise_amplitude >= 0.0) {
        return Err(Error::InvalidConfig("noise amplitude must be non-negative".into()));
    }
    let draws = DriftDraws::new(spec, spec.drift.seed.unwrap_or(seed))?;
    let build = |scale: f64| -> Result<ObjectiveSequence> {
        let objectives = draws.objectives(spec, scale);
        ObjectiveSequence::from_objectives(
            spec.domain.clone(),
            spec.noise_amplitude,
            objectives,
            bounds,
        )
    };
    match spec.drift.target_budget {
        None => build(1.0),
        Some(target) => hit_budget(target, build),
    }
}

/// Finds a magnitude scale whose budget is within 1% of `target`.
fn hit_budget<F>(target: f64, build: F) -> Result<ObjectiveSequence>
where
    F: Fn(f64) -> Result<ObjectiveSequence>,
{
    if !(target >= 0.0 && target.is_finite()) {
        return Err(Error::InvalidConfig(format!("target budget must be >= 0, got {target}")));
    }
    let within = |seq: &ObjectiveSequence| (seq.total_budget() - target).abs() <= 0.01 * target;
    let zero = build(0.0)?;
    if within(&zero) {
        return Ok(zero);
    }
    if zero.total_budget() > target {
        return Err(Error::BudgetUnattainable {
            target,
            reason: format!("unscaled drift still varies by {}", zero.total_budget()),
        });
    }

    // Grow the scale until the budget overshoots or the drift leaves X°(c₀).
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut hi_ok = false;
    for _ in 0..60 {
        match build(hi) {
            Ok(seq) if within(&seq) => return Ok(seq),
            Ok(seq) if seq.total_budget() > target => {
                hi_ok = true;
                break;
            }
            Ok(_) => {
                lo = hi;
                hi *= 2.0;
            }
            Err(_) => break,
        }
    }
    let mut best: Option<ObjectiveSequence> = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match build(mid) {
            Ok(seq) => {
                if within(&seq) {
                    return Ok(seq);
                }
                if seq.total_budget() < target {
                    lo = mid;
                } else {
                    hi = mid;
                    hi_ok = true;
                }
                best = Some(seq);
            }
            Err(_) => hi = mid,
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    Err(Error::BudgetUnattainable {
        target,
        reason: match (best, hi_ok) {
            (Some(seq), true) => format!("closest budget reached {}", seq.total_budget()),
            (Some(seq), false) => format!(
                "drift leaves the interior ball before the budget is reached (max {})",
                seq.total_budget()
            ),
            (None, _) => "no feasible drift magnitude".into(),
        },
    })
}

/// Randomness for a drift schedule, drawn once so that rescaling the drift
/// magnitude reuses the same realization.
struct DriftDraws {
    anchor: Vec<f64>,
    direction: Vec<f64>,
    steps: Vec<Vec<f64>>,
}

impl DriftDraws {
    fn new(spec: &SequenceSpec, seed: u64) -> Result<Self> {
        let d = spec.domain.dimension();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = spec.drift.anchor.clone().unwrap_or_else(|| spec.domain.center.clone());
        if anchor.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: anchor.len() });
        }
        let direction = match &spec.drift.direction {
            Some(u) => {
                if u.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: u.len() });
                }
                vector::unit_or_none(u)
                    .ok_or_else(|| Error::InvalidConfig("drift direction must be nonzero".into()))?
            }
            None => loop {
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                if let Some(u) = vector::unit_or_none(&g) {
                    break u;
                }
            },
        };
        let steps = match spec.drift.kind {
            DriftKind::RandomWalk { .. } => (1..spec.horizon)
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
            _ => Vec::new(),
        };
        Ok(DriftDraws { anchor, direction, steps })
    }

    fn objectives(&self, spec: &SequenceSpec, scale: f64) -> Vec<QuadraticObjective> {
        let horizon = spec.horizon;
        let b0 = spec.family.peak_value;
        let sigma = spec.family.curvature;
        let at = |offset: f64| vector::axpy(&self.anchor, offset, &self.direction);
        let make = |b: f64, theta: Vec<f64>| QuadraticObjective::new(b, sigma, theta);

        match spec.drift.kind {
            DriftKind::PiecewiseConstant { changes, jump, peak_jump } => {
                let change_times: Vec<usize> = (1..=changes)
                    .map(|k| 1 + ((k as f64) * horizon as f64 / (changes as f64 + 1.0)).round() as usize)
                    .collect();
                let mut phase = 0usize;
                (1..=horizon)
                    .map(|t| {
                        while phase < change_times.len() && change_times[phase] <= t {
                            phase += 1;
                        }
                        if phase % 2 == 0 {
                            make(b0, self.anchor.clone())
                        } else {
                            make(b0 + scale * peak_jump, at(scale * jump))
                        }
                    })
                    .collect()
            }
            DriftKind::LinearDrift { amplitude } => (0..horizon)
                .map(|i| {
                    let frac = if horizon > 1 {
                        2.0 * i as f64 / (horizon - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    make(b0, at(scale * amplitude * frac))
                })
                .collect(),
            DriftKind::Sinusoidal { amplitude, periods } => (0..horizon)
                .map(|i| {
                    let phase = 2.0 * PI * periods * i as f64 / horizon as f64;
                    make(b0, at(scale * amplitude * phase.sin()))
                })
                .collect(),
            DriftKind::RandomWalk { step_scale } => {
                let mut theta = self.anchor.clone();
                let mut out = Vec::with_capacity(horizon);
                out.push(make(b0, theta.clone()));
                for step in &self.steps {
                    theta = spec
                        .domain
                        .project_interior(&vector::axpy(&theta, scale * step_scale, step));
                    out.push(make(b0, theta.clone()));
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_domain(d: usize, margin: f64) -> BallDomain {
        BallDomain::new(vec![0.0; d], 1.0, margin).unwrap()
    }

    /// Brute-force sup over a uniform grid on [-1, 1].
    fn grid_sup_1d(a: &QuadraticObjective, b: &QuadraticObjective, points: usize) -> f64 {
        (0..points)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
                (b.evaluate(&[x]) - a.evaluate(&[x])).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn evaluate_examples() {
        let obj = QuadraticObjective::new(0.5, 1.0, vec![0.0]);
        assert_eq!(obj.evaluate(&[0.0]), 0.5);
        assert_abs_diff_eq!(obj.evaluate(&[0.2]), 0.48, epsilon = 1e-15);
        let obj = QuadraticObjective::new(0.3, 0.7, vec![0.1, -0.2]);
        assert_eq!(obj.evaluate(&[0.4, 0.1]), obj.evaluate(&[-0.2, -0.5]));
        let (x, v) = obj.optimum();
        assert_eq!(obj.evaluate(&x), v);
    }

    #[test]
    fn single_jump_variation_matches_grid() {
        let domain = unit_domain(1, 0.25);
        let a = QuadraticObjective::new(0.5, 1.0, vec![0.0]);
        let b = QuadraticObjective::new(0.5, 1.0, vec![0.1]);
        let grid = grid_sup_1d(&a, &b, 1_000_001);
        assert_abs_diff_eq!(grid, 0.105, epsilon = 1e-9);
        let exact = step_variation(&a, &b, &domain).unwrap();
        assert_abs_diff_eq!(exact, 0.105, epsilon = 1e-12);
        assert_eq!(step_variation(&b, &a, &domain).unwrap(), exact);
        assert_eq!(step_variation(&a, &a, &domain).unwrap(), 0.0);
    }

    #[test]
    fn unequal_curvature_variation_matches_grid() {
        let domain = unit_domain(1, 0.25);
        let cases = [
            (QuadraticObjective::new(0.2, 0.3, vec![0.5]), QuadraticObjective::new(0.1, 0.6, vec![-0.3])),
            (QuadraticObjective::new(0.0, 0.4, vec![0.0]), QuadraticObjective::new(0.0, 0.41, vec![0.0])),
            (QuadraticObjective::new(0.5, 0.9, vec![-0.7]), QuadraticObjective::new(-0.1, 0.2, vec![0.7])),
        ];
        for (a, b) in cases {
            let grid = grid_sup_1d(&a, &b, 200_001);
            let exact = step_variation(&a, &b, &domain).unwrap();
            assert_abs_diff_eq!(exact, grid, epsilon = 1e-8);
        }
    }

    #[test]
    fn variation_rejects_dimension_mismatch() {
        let domain = unit_domain(2, 0.25);
        let a = QuadraticObjective::new(0.0, 0.4, vec![0.0]);
        assert!(matches!(
            step_variation(&a, &a, &domain),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn projection_examples() {
        let domain = BallDomain::new(vec![0.0, 0.0], 1.0, 0.2).unwrap();
        assert_eq!(domain.project_interior(&[0.1, 0.3]), vec![0.1, 0.3]);
        let p = domain.project_interior(&[2.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.0);
        assert_eq!(domain.project_interior(&p), p);
    }

    #[test]
    fn domain_validation() {
        assert!(BallDomain::new(vec![0.0], 0.2, 0.25).is_err());
        assert!(BallDomain::new(vec![0.0], 1.0, 1.0).is_err());
        assert!(BallDomain::new(vec![], 1.0, 0.5).is_err());
        assert_eq!(unit_domain(3, 0.5).diameter(), 2.0);
    }

    fn spec(kind: DriftKind, horizon: usize) -> SequenceSpec {
        SequenceSpec {
            domain: unit_domain(1, 0.25),
            family: ObjectiveFamily { peak_value: 0.5, curvature: 0.4 },
            drift: DriftSchedule { direction: Some(vec![1.0]), ..DriftSchedule::new(kind) },
            noise_amplitude: 0.2,
            horizon,
        }
    }

    #[test]
    fn stationary_sequence_has_zero_budget() {
        let seq = build_sequence(
            &spec(DriftKind::PiecewiseConstant { changes: 0, jump: 0.3, peak_jump: 0.0 }, 50),
            None,
            7,
        )
        .unwrap();
        assert_eq!(seq.total_budget(), 0.0);
        assert!(seq.step_variations().iter().all(|&v| v == 0.0));
        assert_eq!(seq.horizon(), 50);
    }

    #[test]
    fn single_change_point_budget() {
        let mut s = spec(DriftKind::PiecewiseConstant { changes: 1, jump: 0.1, peak_jump: 0.0 }, 10);
        s.family.curvature = 1.0;
        let bounds = CurvatureBounds { smoothness: 2.0, strong_concavity: 0.5 };
        let seq = build_sequence(&s, Some(&bounds), 0).unwrap();
        let nonzero: Vec<f64> = seq.step_variations().iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_abs_diff_eq!(nonzero[0], 0.105, epsilon = 1e-12);
        assert_abs_diff_eq!(seq.total_budget(), 0.105, epsilon = 1e-12);
    }

    #[test]
    fn sinusoidal_is_deterministic_in_seed() {
        let mut s = spec(DriftKind::Sinusoidal { amplitude: 0.5, periods: 3.0 }, 200);
        s.drift.direction = None;
        s.domain = unit_domain(3, 0.25);
        s.family.peak_value = 0.2;
        let a = build_sequence(&s, None, 11).unwrap();
        let b = build_sequence(&s, None, 11).unwrap();
        assert_eq!(a, b);
        let c = build_sequence(&s, None, 12).unwrap();
        assert_ne!(a.objectives(), c.objectives());
    }

    #[test]
    fn rejects_unbounded_and_exterior_objectives() {
        let mut s = spec(DriftKind::LinearDrift { amplitude: 0.9 }, 20);
        assert!(matches!(build_sequence(&s, None, 0), Err(Error::InvalidObjective { .. })));
        s.drift.kind = DriftKind::LinearDrift { amplitude: 0.1 };
        s.noise_amplitude = 0.9;
        assert!(matches!(build_sequence(&s, None, 0), Err(Error::InvalidObjective { .. })));
        s.noise_amplitude = 0.1;
        let tight = CurvatureBounds { smoothness: 0.5, strong_concavity: 0.1 };
        // σ_f·B_X = 0.8 > L
        assert!(build_sequence(&s, Some(&tight), 0).is_err());
    }

    #[test]
    fn target_budget_within_one_percent() {
        for kind in [
            DriftKind::LinearDrift { amplitude: 0.1 },
            DriftKind::Sinusoidal { amplitude: 0.1, periods: 4.0 },
            DriftKind::RandomWalk { step_scale: 0.01 },
            DriftKind::PiecewiseConstant { changes: 5, jump: 0.1, peak_jump: 0.0 },
        ] {
            let mut s = spec(kind, 500);
            s.drift.target_budget = Some(0.7);
            let seq = build_sequence(&s, None, 3).unwrap();
            assert!((seq.total_budget() - 0.7).abs() <= 0.007, "{:?}", seq.total_budget());
        }
    }

    #[test]
    fn unattainable_target_is_reported() {
        let mut s = spec(DriftKind::LinearDrift { amplitude: 0.1 }, 100);
        s.drift.target_budget = Some(50.0);
        assert!(matches!(build_sequence(&s, None, 0), Err(Error::BudgetUnattainable { .. })));
    }

    #[test]
    fn noiseless_feedback_is_exact() {
        let obj = QuadraticObjective::new(0.3, 0.5, vec![0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_feedback(&obj, &[0.4], 0.0, &mut rng);
        assert_eq!(s.value, s.mean);
        assert_eq!(s.mean, obj.evaluate(&[0.4]));
    }

    #[test]
    fn feedback_is_seed_deterministic() {
        let obj = QuadraticObjective::new(0.3, 0.5, vec![0.1]);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(
                sample_feedback(&obj, &[0.2], 0.4, &mut a),
                sample_feedback(&obj, &[0.2], 0.4, &mut b)
            );
        }
    }

    #[test]
    fn feedback_mean_concentrates() {
        let obj = QuadraticObjective::new(0.3, 0.5, vec![0.1]);
        let nu = 0.6;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sum = 0.0;
        for _ in 0..n {
            let s = sample_feedback(&obj, &[-0.3], nu, &mut rng);
            assert!(s.value.abs() <= 1.0);
            sum += s.value;
        }
        let mean = sum / n as f64;
        let tol = 3.0 * nu / (3.0 * n as f64).sqrt();
        assert!((mean - obj.evaluate(&[-0.3])).abs() <= tol);
    }

    #[test]
    fn sequence_csv_roundtrip() {
        let mut s = spec(DriftKind::Sinusoidal { amplitude: 0.3, periods: 2.0 }, 64);
        s.domain = BallDomain::new(vec![0.5, -0.25], 1.0, 0.3).unwrap();
        s.drift.direction = None;
        s.family.peak_value = 0.2;
        let seq = build_sequence(&s, None, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.csv");
        seq.write_csv(&path, "abc").unwrap();
        let back = ObjectiveSequence::read_csv(&path).unwrap();
        assert_eq!(back, seq);
    }
}
