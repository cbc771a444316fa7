//! Epoch-batched two-point gradient ascent with a fixed step size.
//!
//! Epoch `s` probes every coordinate `j` with `n_s` pairs of symmetric
//! queries `z_s ± δ_s e_j`, forms the central-difference gradient estimate,
//! and takes one projected ascent step onto `X°(c₀)`. After every
//! observation the learner emits `r̄_t = r/t + 2κ₀/√t` computed on its own
//! clock, which makes it safe to suspend and resume.

use serde::{Deserialize, Serialize};

use crate::environment::BallDomain;
use crate::error::{Error, Result};
use crate::master::RhoFunction;
use crate::{vector, UcbLearner};

/// Problem constants the parameters are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// `L`
    pub smoothness: f64,
    /// `σ`
    pub strong_concavity: f64,
    pub dimension: usize,
    pub horizon: u64,
    /// `B_X`
    pub diameter: f64,
    /// `c₀`
    pub interior_margin: f64,
}

/// The five summands of the theoretical confidence constant `κ₀`, before
/// scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaTerms {
    pub noise: f64,
    pub smoothness: f64,
    pub epochs: f64,
    pub diameter: f64,
    pub curvature: f64,
}

impl KappaTerms {
    pub fn total(&self) -> f64 {
        self.noise + self.smoothness + self.epochs + self.diameter + self.curvature
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    /// `η₀`
    pub step_size: f64,
    /// `κ₀` after `kappa_scale` has been applied.
    pub ucb_constant: f64,
    /// `γ`
    pub contraction: f64,
    /// `c₀`
    pub interior_margin: f64,
    /// `N₀`
    pub initial_batch: u64,
    pub dimension: usize,
    pub horizon_hint: u64,
    pub kappa_scale: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return bad(format!("L must be positive, got {}", self.smoothness));
        }
        if !(self.strong_concavity > 0.0) {
            return bad("σ = 0 gives γ = 0".into());
        }
        if self.strong_concavity >= self.smoothness {
            return bad(format!(
                "γ = σ/L = {} must be < 1",
                self.strong_concavity / self.smoothness
            ));
        }
        if self.dimension == 0 {
            return bad("dimension must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return bad(format!("B_X must be positive, got {}", self.diameter));
        }
        if !(self.interior_margin > 0.0 && self.interior_margin < 1.0) {
            return bad(format!("c₀ must lie in (0, 1), got {}", self.interior_margin));
        }
        Ok(())
    }

    /// Summands of `κ₀ = √ln(dT) + L + 2d·lnT/(1-γ) + 16B²d^{3/2}ln⁴(dT)/(c₀(1-γ)³)
    /// + 2L²d^{3/2}ln⁴(dT)/(c₀(1-γ)⁷)`.
    pub fn kappa_terms(&self) -> KappaTerms {
        let d = self.dimension as f64;
        let t = self.horizon as f64;
        let l = self.smoothness;
        let gamma = self.strong_concavity / self.smoothness;
        let c0 = self.interior_margin;
        let ln_dt = (d * t).ln();
        let ln4 = ln_dt.powi(4);
        let d32 = d * d.sqrt();
        KappaTerms {
            noise: ln_dt.sqrt(),
            smoothness: l,
            epochs: 2.0 * d * t.ln() / (1.0 - gamma),
            diameter: 16.0 * self.diameter * self.diameter * d32 * ln4
                / (c0 * (1.0 - gamma).powi(3)),
            curvature: 2.0 * l * l * d32 * ln4 / (c0 * (1.0 - gamma).powi(7)),
        }
    }
}

/// `η₀ = 1/L`, `γ = σ/L`, `N₀ = max(⌈c₀⁻²⌉ + 1, ⌈c₀⁻⁴⌉)` and `κ₀` scaled by
/// `kappa_scale`.
///
/// The `⌈c₀⁻⁴⌉` floor guarantees `δ₀ = N₀^{-1/4} ≤ c₀`, so every probe
/// `z_s ± δ_s e_j` stays inside the domain.
pub fn derive_params(constants: &ProblemConstants, kappa_scale: f64) -> Result<BaseParams> {
    constants.validate()?;
    if !(kappa_scale >= 0.0 && kappa_scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("kappa_scale must be >= 0, got {kappa_scale}")));
    }
    let c0 = constants.interior_margin;
    let initial_batch = ((c0.powi(-2)).ceil() as u64 + 1).max(c0.powi(-4).ceil() as u64);
    Ok(BaseParams {
        step_size: 1.0 / constants.smoothness,
        ucb_constant: kappa_scale * constants.kappa_terms().total(),
        contraction: constants.strong_concavity / constants.smoothness,
        interior_margin: c0,
        initial_batch,
        dimension: constants.dimension,
        horizon_hint: constants.horizon,
        kappa_scale,
    })
}

impl BaseParams {
    /// `ρ(t) = 6κ₀/√t`
    pub fn rho(&self, t: f64) -> f64 {
        6.0 * self.ucb_constant / t.sqrt()
    }

    /// `λ = 6κ₀`
    pub fn lambda(&self) -> f64 {
        6.0 * self.ucb_constant
    }

    pub fn rho_function(&self) -> RhoFunction {
        RhoFunction::inverse_sqrt(6.0 * self.ucb_constant)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad(format!("contraction must lie in (0, 1), got {}", self.contraction));
        }
        if !(self.ucb_constant >= 0.0 && self.ucb_constant.is_finite()) {
            return bad(format!("κ₀ must be >= 0, got {}", self.ucb_constant));
        }
        if self.dimension == 0 || self.initial_batch == 0 {
            return bad("dimension and N₀ must be positive".into());
        }
        let (_, delta0) = epoch_schedule(0, self.initial_batch, self.contraction);
        if delta0 > self.interior_margin {
            return bad(format!(
                "N₀ = {} gives probe radius {} > c₀ = {}",
                self.initial_batch, delta0, self.interior_margin
            ));
        }
        Ok(())
    }
}

/// `n_s = ⌈(1-γ)^{-4s} N₀⌉` and `δ_s = n_s^{-1/4}`. Saturates at `2^62`
/// rather than overflowing.
pub fn epoch_schedule(s: u32, initial_batch: u64, contraction: f64) -> (u64, f64) {
    const CAP: f64 = (1u64 << 62) as f64;
    let growth = (1.0 - contraction).powi(-4).powi(s as i32);
    let raw = (growth * initial_batch as f64).ceil();
    let n = if raw >= CAP { 1u64 << 62 } else { raw as u64 };
    (n, 1.0 / (n as f64).sqrt().sqrt())
}

/// `ĝ_s(j) = (u₊ - u₋) / (2 δ_s n_s)`
pub fn finalize_gradient(plus: f64, minus: f64, delta: f64, n: u64) -> f64 {
    (plus - minus) / (2.0 * delta * n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    pub index: u32,
    /// Zero-based coordinate currently being probed.
    pub coordinate: usize,
    pub batch_size: u64,
    pub probe_radius: f64,
    pub plus_accumulator: f64,
    pub minus_accumulator: f64,
    /// Observations taken on the current coordinate, in `0..2·n_s`. Even
    /// means the next probe is `+δ_s e_j`.
    pub step_in_coordinate: u64,
}

/// A completed epoch: the iterate the gradient was estimated at, and the
/// estimate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub index: u32,
    pub iterate: Vec<f64>,
    pub gradient: Vec<f64>,
    pub batch_size: u64,
    pub probe_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOptimizer {
    params: BaseParams,
    center: Vec<f64>,
    interior_radius: f64,
    iterate: Vec<f64>,
    epoch: EpochState,
    gradient: Vec<f64>,
    cumulative_reward: f64,
    clock: u64,
    history: Vec<EpochRecord>,
}

impl BaseOptimizer {
    /// Starts at the domain center.
    pub fn new(params: BaseParams, domain: &BallDomain) -> Result<Self> {
        Self::with_initial_point(params, domain, domain.center.clone())
    }

    pub fn with_initial_point(
        params: BaseParams,
        domain: &BallDomain,
        initial: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        if params.dimension != domain.dimension() {
            return Err(Error::DimensionMismatch {
                expected: domain.dimension(),
                got: params.dimension,
            });
        }
        if initial.len() != params.dimension {
            return Err(Error::DimensionMismatch { expected: params.dimension, got: initial.len() });
        }
        let interior_radius = domain.radius - params.interior_margin;
        if interior_radius <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "c₀ = {} leaves no interior in a ball of radius {}",
                params.interior_margin, domain.radius
            )));
        }
        if vector::dist(&initial, &domain.center) > interior_radius + 1e-12 {
            return Err(Error::InvalidConfig("initial point must lie in X°(c₀)".into()));
        }
        let (batch_size, probe_radius) = epoch_schedule(0, params.initial_batch, params.contraction);
        Ok(BaseOptimizer {
            params,
            center: domain.center.clone(),
            interior_radius,
            iterate: initial,
            epoch: EpochState {
                index: 0,
                coordinate: 0,
                batch_size,
                probe_radius,
                plus_accumulator: 0.0,
                minus_accumulator: 0.0,
                step_in_coordinate: 0,
            },
            gradient: vec![0.0; params.dimension],
            cumulative_reward: 0.0,
            clock: 0,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> &BaseParams {
        &self.params
    }

    /// Current `z_s`.
    pub fn iterate(&self) -> &[f64] {
        &self.iterate
    }

    pub fn epoch(&self) -> &EpochState {
        &self.epoch
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward
    }

    /// Completed epochs, oldest first.
    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// `r/t + 2κ₀/√t` on the learner's own clock.
    pub fn ucb(&self) -> f64 {
        if self.clock == 0 {
            return f64::INFINITY;
        }
        let t = self.clock as f64;
        self.cumulative_reward / t + 2.0 * self.params.ucb_constant / t.sqrt()
    }

    fn project(&self, z: &[f64]) -> Vec<f64> {
        let offset = vector::sub(z, &self.center);
        let n = vector::norm(&offset);
        if n <= self.interior_radius {
            z.to_vec()
        } else {
            vector::axpy(&self.center, self.interior_radius / n, &offset)
        }
    }

    /// `z_{s+1} = P_{X°(c₀)}(z_s + η₀ ĝ_s)`; moves to the next epoch and
    /// returns the new iterate.
    pub fn advance_epoch(&mut self, gradient: &[f64]) -> Vec<f64> {
        assert_eq!(gradient.len(), self.params.dimension, "gradient dimension");
        self.history.push(EpochRecord {
            index: self.epoch.index,
            iterate: self.iterate.clone(),
            gradient: gradient.to_vec(),
            batch_size: self.epoch.batch_size,
            probe_radius: self.epoch.probe_radius,
        });
        self.iterate = self.project(&vector::axpy(&self.iterate, self.params.step_size, gradient));
        let next = self.epoch.index + 1;
        let (batch_size, probe_radius) =
            epoch_schedule(next, self.params.initial_batch, self.params.contraction);
        self.epoch = EpochState {
            index: next,
            coordinate: 0,
            batch_size,
            probe_radius,
            plus_accumulator: 0.0,
            minus_accumulator: 0.0,
            step_in_coordinate: 0,
        };
        self.gradient.iter_mut().for_each(|g| *g = 0.0);
        self.iterate.clone()
    }
}

impl UcbLearner for BaseOptimizer {
    fn dimension(&self) -> usize {
        self.params.dimension
    }

    /// `z_s + δ_s e_j` on even steps of the coordinate, `z_s - δ_s e_j` on
    /// odd ones.
    fn next_action(&self) -> Vec<f64> {
        let mut x = self.iterate.clone();
        let delta = self.epoch.probe_radius;
        if self.epoch.step_in_coordinate % 2 == 0 {
            x[self.epoch.coordinate] += delta;
        } else {
            x[self.epoch.coordinate] -= delta;
        }
        x
    }

    fn ingest(&mut self, y: f64) -> f64 {
        debug_assert!(y.abs() <= 1.0 + 1e-12, "feedback {y} outside [-1, 1]");
        let epoch = &mut self.epoch;
        if epoch.step_in_coordinate % 2 == 0 {
            epoch.plus_accumulator += y;
        } else {
            epoch.minus_accumulator += y;
        }
        epoch.step_in_coordinate += 1;
        self.cumulative_reward += y;
        self.clock += 1;

        if epoch.step_in_coordinate == 2 * epoch.batch_size {
            self.gradient[epoch.coordinate] = finalize_gradient(
                epoch.plus_accumulator,
                epoch.minus_accumulator,
                epoch.probe_radius,
                epoch.batch_size,
            );
            epoch.coordinate += 1;
            epoch.plus_accumulator = 0.0;
            epoch.minus_accumulator = 0.0;
            epoch.step_in_coordinate = 0;
            if epoch.coordinate == self.params.dimension {
                let g = self.gradient.clone();
                self.advance_epoch(&g);
            }
        }
        self.ucb()
    }

    fn clock(&self) -> u64 {
        self.clock
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn constants() -> ProblemConstants {
        ProblemConstants {
            smoothness: 1.0,
            strong_concavity: 0.5,
            dimension: 1,
            horizon: 1024,
            diameter: 2.0,
            interior_margin: 0.25,
        }
    }

    fn params(d: usize, kappa: f64, n0: u64, gamma: f64, c0: f64) -> BaseParams {
        BaseParams {
            step_size: 1.0,
            ucb_constant: kappa,
            contraction: gamma,
            interior_margin: c0,
            initial_batch: n0,
            dimension: d,
            horizon_hint: 1024,
            kappa_scale: 1.0,
        }
    }

    #[test]
    fn theoretical_kappa_value() {
        // Each summand evaluated independently of KappaTerms.
        let ln_dt = (1024f64).ln();
        let s1 = ln_dt.sqrt();
        let s2 = 1.0;
        let s3 = 2.0 * 1024f64.ln() / 0.5;
        let s4 = 16.0 * 4.0 * ln_dt.powi(4) / (0.25 * 0.125);
        let s5 = 2.0 * ln_dt.powi(4) / (0.25 * 0.5f64.powi(7));
        let expected = s1 + s2 + s3 + s4 + s5;
        let p = derive_params(&constants(), 1.0).unwrap();
        assert_relative_eq!(p.ucb_constant, expected, max_relative = 1e-12);
        assert!((p.ucb_constant - 7.09e6).abs() < 0.005e6, "{}", p.ucb_constant);
        assert_eq!(p.contraction, 0.5);
        assert_eq!(p.step_size, 1.0);
        assert_eq!(p.initial_batch, 256);
        assert_relative_eq!(p.rho(4.0), 3.0 * p.ucb_constant);
        assert_eq!(p.lambda(), 6.0 * p.ucb_constant);
    }

    #[test]
    fn zero_kappa_scale() {
        let p = derive_params(&constants(), 0.0).unwrap();
        assert_eq!(p.ucb_constant, 0.0);
        let domain = BallDomain::new(vec![0.0], 1.0, 0.25).unwrap();
        let mut opt = BaseOptimizer::new(p, &domain).unwrap();
        opt.next_action();
        assert_eq!(opt.ingest(0.4), 0.4);
        opt.next_action();
        assert_abs_diff_eq!(opt.ingest(0.2), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn derive_rejects_degenerate_contraction() {
        let mut c = constants();
        c.strong_concavity = 1.0;
        assert!(derive_params(&c, 1.0).is_err());
        c.strong_concavity = 2.0;
        assert!(derive_params(&c, 1.0).is_err());
        c.strong_concavity = 0.0;
        assert!(derive_params(&c, 1.0).is_err());
    }

    #[test]
    fn initial_batch_keeps_probes_feasible() {
        for c0 in [0.1, 0.25, 0.3, 0.5, 0.7, 0.9] {
            let mut c = constants();
            c.interior_margin = c0;
            let p = derive_params(&c, 1.0).unwrap();
            let (_, delta) = epoch_schedule(0, p.initial_batch, p.contraction);
            assert!(delta <= c0, "c0={c0} delta={delta}");
            assert!(p.initial_batch >= (c0.powi(-2)).ceil() as u64 + 1);
        }
    }

    #[test]
    fn epoch_schedule_examples() {
        let (n, d) = epoch_schedule(0, 5, 0.3);
        assert_eq!(n, 5);
        assert_abs_diff_eq!(d, 0.668_740_304_976_422, epsilon = 1e-12);
        assert_eq!(epoch_schedule(1, 1, 0.5), (16, 0.5));
        for gamma in [0.05, 0.25, 0.5, 0.9] {
            let mut prev = 0;
            for s in 0..30 {
                let (n, _) = epoch_schedule(s, 3, gamma);
                assert!(n >= prev);
                prev = n;
            }
        }
    }

    #[test]
    fn finalize_examples() {
        assert_eq!(finalize_gradient(3.0, 1.0, 0.5, 4), 0.5);
        assert_eq!(finalize_gradient(0.7, 0.7, 0.1, 9), 0.0);
        // f(x) = -(x - 0.3)², z = 0: central difference is exact.
        let f = |x: f64| -(x - 0.3) * (x - 0.3);
        for delta in [0.5, 0.1, 0.013] {
            let g = finalize_gradient(f(delta), f(-delta), delta, 1);
            assert_abs_diff_eq!(g, 0.6, epsilon = 1e-12);
        }
    }

    #[test]
    fn action_pattern_and_purity() {
        let domain = BallDomain::new(vec![0.0, 0.0], 1.0, 0.5).unwrap();
        let mut opt = BaseOptimizer::new(params(2, 0.0, 16, 0.5, 0.5), &domain).unwrap();
        assert_eq!(opt.next_action(), opt.next_action());
        let delta = opt.epoch().probe_radius;
        assert_eq!(delta, 0.5);
        let n = opt.epoch().batch_size;
        for step in 0..2 * n {
            let x = opt.next_action();
            let expected = if step % 2 == 0 { delta } else { -delta };
            assert_eq!(x, vec![expected, 0.0]);
            opt.ingest(0.0);
        }
        // second coordinate
        assert_eq!(opt.next_action(), vec![0.0, delta]);
    }

    #[test]
    fn ucb_arithmetic() {
        let domain = BallDomain::new(vec![0.0], 1.0, 0.5).unwrap();
        let mut opt = BaseOptimizer::new(params(1, 3.0, 16, 0.5, 0.5), &domain).unwrap();
        let mut last = 0.0;
        for i in 0..9 {
            let y = if i < 6 { 0.25 } else { 0.0 };
            last = opt.ingest(y);
        }
        assert_eq!(opt.clock(), 9);
        assert_abs_diff_eq!(last, 1.5 / 9.0 + 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_objective_tracks_value() {
        let domain = BallDomain::new(vec![0.0], 1.0, 0.5).unwrap();
        let mut opt = BaseOptimizer::new(params(1, 0.0, 16, 0.5, 0.5), &domain).unwrap();
        for _ in 0..200 {
            assert_abs_diff_eq!(opt.ingest(0.37), 0.37, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_finalized_after_full_coordinate() {
        let domain = BallDomain::new(vec![0.0], 1.0, 0.5).unwrap();
        let mut opt = BaseOptimizer::new(params(1, 0.0, 16, 0.5, 0.5), &domain).unwrap();
        let (n, delta) = (opt.epoch().batch_size, opt.epoch().probe_radius);
        let ys: Vec<f64> = (0..2 * n).map(|i| ((i * 7919) % 13) as f64 / 20.0 - 0.3).collect();
        let (mut up, mut um) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            if i % 2 == 0 {
                up += y
            } else {
                um += y
            }
            opt.ingest(*y);
        }
        let rec = &opt.history()[0];
        assert_eq!(rec.gradient[0], (up - um) / (2.0 * delta * n as f64));
    }

    #[test]
    fn advance_epoch_examples() {
        let domain = BallDomain::new(vec![0.0, 0.0], 1.0, 0.5).unwrap();
        let mut opt = BaseOptimizer::with_initial_point(
            params(2, 0.0, 16, 0.5, 0.5),
            &domain,
            vec![0.1, -0.2],
        )
        .unwrap();
        assert_eq!(opt.advance_epoch(&[0.0, 0.0]), vec![0.1, -0.2]);
        assert_eq!(opt.epoch().index, 1);
        let z = opt.advance_epoch(&[0.05, 0.1]);
        assert_abs_diff_eq!(z[0], 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], -0.1, epsilon = 1e-15);
        let z = opt.advance_epoch(&[10.0, 0.0]);
        assert_abs_diff_eq!(vector::norm(&z), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_infeasible_setup() {
        let domain = BallDomain::new(vec![0.0], 1.0, 0.25).unwrap();
        // N₀ = 17 gives δ₀ ≈ 0.49 > c₀
        assert!(BaseOptimizer::new(params(1, 0.0, 17, 0.5, 0.25), &domain).is_err());
        assert!(BaseOptimizer::with_initial_point(params(1, 0.0, 256, 0.5, 0.25), &domain, vec![0.9]).is_err());
        assert!(BaseOptimizer::new(params(2, 0.0, 256, 0.5, 0.25), &domain).is_err());
    }
}
