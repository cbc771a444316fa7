//! Adaptive non-stationary stochastic optimization with bandit feedback.
//!
//! The crate is organized around four pieces:
//!
//! - [`environment`]: drifting sequences of strongly concave quadratics over a
//!   ball, noisy bounded feedback, and exact per-step variation accounting.
//! - [`base`]: the epoch-batched two-point gradient learner with a fixed step
//!   size that emits an upper-confidence statistic after every observation.
//! - [`master`]: the block-structured multi-scale scheduler that runs copies
//!   of a learner at several time scales and restarts when either change test
//!   fails.
//! - [`adapter`]: a wrapper turning a policy with a stationary-regret
//!   certificate into a learner that emits the same kind of statistic.
//!
//! [`harness`] ties these together into seeded experiments, regret and audit
//! computations, and parameter sweeps. [`par`] holds the seed-parallel map
//! used by the harness; it falls back to a sequential loop when the
//! `parallel` feature is disabled.

pub mod adapter;
pub mod base;
pub mod environment;
pub mod error;
pub mod harness;
pub mod master;
pub mod par;
pub mod vector;

pub use error::{Error, Result};

/// A learner that picks actions, consumes scalar feedback, and emits an
/// optimistic statistic `r̄_t` after every observation.
///
/// `next_action` must be a pure function of the learner state: the master
/// scheduler may query it, suspend the learner for an arbitrary number of
/// global steps, and later resume it.
pub trait UcbLearner {
    fn dimension(&self) -> usize;

    /// The point the learner wants to play next.
    fn next_action(&self) -> Vec<f64>;

    /// Feed back the observation for the action last returned by
    /// [`next_action`](Self::next_action); returns `r̄_t`.
    fn ingest(&mut self, y: f64) -> f64;

    /// Number of observations consumed so far.
    fn clock(&self) -> u64;
}

impl<L: UcbLearner + ?Sized> UcbLearner for Box<L> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn next_action(&self) -> Vec<f64> {
        (**self).next_action()
    }

    fn ingest(&mut self, y: f64) -> f64 {
        (**self).ingest(y)
    }

    fn clock(&self) -> u64 {
        (**self).clock()
    }
}
