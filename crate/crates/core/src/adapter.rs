//! Turning a stationary-regret certificate into an optimistic statistic.
//!
//! A policy whose average regret against the best fixed point is bounded by
//! `ρ̃(t)` (with high probability, at every `t`) can emit
//! `r̄_t = Σy/t + ρ̃(t) + √(ln(2T)/t)`. The wrapped policy then satisfies the
//! same two properties the master scheduler relies on, with radius
//! `ρ(t) = 2ρ̃(t) + 3√(ln(2T)/t)` and `λ = 2`.

use crate::environment::BallDomain;
use crate::error::{Error, Result};
use crate::master::RhoFunction;
use crate::{vector, UcbLearner};

/// A bandit policy carrying a certificate `ρ̃(t) = coefficient/√t + floor`
/// on its average stationary regret through `t`.
pub trait StationaryPolicy {
    fn dimension(&self) -> usize;
    fn next_action(&self) -> Vec<f64>;
    fn ingest(&mut self, y: f64);
    fn certificate(&self) -> RhoFunction;
}

impl<P: StationaryPolicy + ?Sized> StationaryPolicy for Box<P> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn next_action(&self) -> Vec<f64> {
        (**self).next_action()
    }
    fn ingest(&mut self, y: f64) {
        (**self).ingest(y)
    }
    fn certificate(&self) -> RhoFunction {
        (**self).certificate()
    }
}

/// `Σy/t + ρ̃(t) + √(ln(2T)/t)`
pub fn adapter_ucb(t: u64, reward_sum: f64, rho_tilde_t: f64, horizon: u64) -> f64 {
    let tf = t as f64;
    reward_sum / tf + rho_tilde_t + ((2.0 * horizon as f64).ln() / tf).sqrt()
}

/// A stationary policy wrapped to emit `r̄_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Wrapped<P> {
    policy: P,
    certificate: RhoFunction,
    reward_sum: f64,
    clock: u64,
    horizon: u64,
}

/// Wraps `policy` for a run of length `horizon`. Rejects certificates that
/// are negative or not shaped like a confidence radius on `1..=horizon`.
pub fn wrap<P: StationaryPolicy>(policy: P, horizon: u64) -> Result<Wrapped<P>> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let certificate = policy.certificate();
    if certificate.coefficient < 0.0 || certificate.floor < 0.0 || !certificate.is_well_shaped(horizon) {
        return Err(Error::InvalidConfig(format!(
            "certificate {certificate:?} must be non-increasing with non-decreasing t·ρ̃(t)"
        )));
    }
    Ok(Wrapped { policy, certificate, reward_sum: 0.0, clock: 0, horizon })
}

impl<P: StationaryPolicy> Wrapped<P> {
    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn reward_sum(&self) -> f64 {
        self.reward_sum
    }

    /// `ρ(t) = 2ρ̃(t) + 3√(ln(2T)/t)`
    pub fn rho(&self) -> RhoFunction {
        converted_rho(&self.certificate, self.horizon)
    }

    pub fn lambda(&self) -> f64 {
        2.0
    }
}

/// The radius a wrapped policy with certificate `ρ̃` hands to the master.
pub fn converted_rho(certificate: &RhoFunction, horizon: u64) -> RhoFunction {
    RhoFunction::new(
        2.0 * certificate.coefficient + 3.0 * (2.0 * horizon as f64).ln().sqrt(),
        2.0 * certificate.floor,
    )
}

impl<P: StationaryPolicy> UcbLearner for Wrapped<P> {
    fn dimension(&self) -> usize {
        self.policy.dimension()
    }

    fn next_action(&self) -> Vec<f64> {
        self.policy.next_action()
    }

    fn ingest(&mut self, y: f64) -> f64 {
        self.policy.ingest(y);
        self.reward_sum += y;
        self.clock += 1;
        let t = self.clock;
        adapter_ucb(t, self.reward_sum, self.certificate.eval(t as f64), self.horizon)
    }

    fn clock(&self) -> u64 {
        self.clock
    }
}

/// Always plays a fixed point; used with the true maximizer as a sanity
/// check (its certificate is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointPolicy {
    pub point: Vec<f64>,
}

impl StationaryPolicy for FixedPointPolicy {
    fn dimension(&self) -> usize {
        self.point.len()
    }
    fn next_action(&self) -> Vec<f64> {
        self.point.clone()
    }
    fn ingest(&mut self, _y: f64) {}
    fn certificate(&self) -> RhoFunction {
        RhoFunction::new(0.0, 0.0)
    }
}

/// Optimism over a fixed grid of arms in `X°(c₀)`.
///
/// Arms are pulled once in order, then by the index
/// `mean_i + width·√(ln(KT)/n_i)` (ties to the lowest index). In one
/// dimension the grid is `K` evenly spaced points across the interior ball;
/// in `d` dimensions it is a cube grid with `round(K^{1/d})` points per axis
/// over the interior ball's bounding cube, projected into the ball.
///
/// The certificate is `ρ̃(t) = c·(√((K-1)·ln(KT)/t) + L·h)` where `h` is twice
/// the covering radius of the grid (the spacing, in one dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct GridUcbPolicy {
    arms: Vec<Vec<f64>>,
    counts: Vec<u64>,
    sums: Vec<f64>,
    width: f64,
    log_term: f64,
    certificate: RhoFunction,
    spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridUcbConfig {
    pub arm_count: usize,
    pub horizon: u64,
    /// `L`, used in the discretization term of the certificate.
    pub smoothness: f64,
    /// `c`
    pub certificate_constant: f64,
    pub confidence_width: f64,
}

pub fn grid_ucb_policy(domain: &BallDomain, config: &GridUcbConfig) -> Result<GridUcbPolicy> {
    domain.validate()?;
    if config.arm_count == 0 {
        return Err(Error::InvalidConfig("grid policy needs at least one arm".into()));
    }
    let d = domain.dimension();
    let r = domain.interior_radius();
    let per_axis = if d == 1 {
        config.arm_count
    } else {
        ((config.arm_count as f64).powf(1.0 / d as f64).round() as usize).max(1)
    };
    let ticks: Vec<f64> = if per_axis == 1 {
        vec![0.0]
    } else {
        (0..per_axis).map(|i| -r + 2.0 * r * i as f64 / (per_axis - 1) as f64).collect()
    };
    let mut arms = Vec::new();
    let mut index = vec![0usize; d];
    loop {
        let raw: Vec<f64> = (0..d).map(|k| domain.center[k] + ticks[index[k]]).collect();
        arms.push(domain.project_interior(&raw));
        let mut k = 0;
        while k < d {
            index[k] += 1;
            if index[k] < per_axis {
                break;
            }
            index[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    let covering = if per_axis == 1 {
        r
    } else {
        let h = 2.0 * r / (per_axis - 1) as f64;
        0.5 * h * (d as f64).sqrt()
    };
    let spacing = 2.0 * covering;
    let k = arms.len() as f64;
    let log_term = (k * config.horizon as f64).ln().max(0.0);
    let c = config.certificate_constant;
    let certificate = RhoFunction::new(
        c * ((k - 1.0) * log_term).sqrt(),
        c * config.smoothness * spacing,
    );
    Ok(GridUcbPolicy {
        counts: vec![0; arms.len()],
        sums: vec![0.0; arms.len()],
        arms,
        width: config.confidence_width,
        log_term,
        certificate,
        spacing,
    })
}

impl GridUcbPolicy {
    pub fn arms(&self) -> &[Vec<f64>] {
        &self.arms
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// The `h` entering the certificate's discretization term.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn choose(&self) -> usize {
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return i;
        }
        let mut best = 0;
        let mut best_index = f64::NEG_INFINITY;
        for (i, (&n, &s)) in self.counts.iter().zip(&self.sums).enumerate() {
            let n = n as f64;
            let index = s / n + self.width * (self.log_term / n).sqrt();
            if index > best_index {
                best_index = index;
                best = i;
            }
        }
        best
    }
}

impl StationaryPolicy for GridUcbPolicy {
    fn dimension(&self) -> usize {
        self.arms[0].len()
    }

    fn next_action(&self) -> Vec<f64> {
        self.arms[self.choose()].clone()
    }

    fn ingest(&mut self, y: f64) {
        let i = self.choose();
        self.counts[i] += 1;
        self.sums[i] += y;
    }

    fn certificate(&self) -> RhoFunction {
        self.certificate
    }
}

/// Distance from `x` to the nearest arm.
pub fn distance_to_grid(policy: &GridUcbPolicy, x: &[f64]) -> f64 {
    policy.arms.iter().map(|a| vector::dist(a, x)).fold(f64::INFINITY, f64::min)
}
