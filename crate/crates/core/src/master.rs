//! Block-structured multi-scale scheduling with restart tests.
//!
//! Time is cut into blocks of length `2ⁿ` for `n = 0, 1, 2, …`. At the start
//! of a block, an order-`m` copy of the wrapped learner is scheduled on each
//! aligned window `[t_n + z·2^m, t_n + (z+1)·2^m)` with probability
//! `ρ(2ⁿ)/ρ(2^m)`; the single order-`n` copy always runs. At every step the
//! lowest-order copy covering the step acts; higher-order copies stay frozen
//! until it finishes. Two tests look for evidence of change:
//!
//! - Test 1 fires when a finished window's realized average reward beats the
//!   block's running minimum statistic `U_t` by `9ρ̂(2^m)`.
//! - Test 2 fires when the average of `r̄ - y` since the block start reaches
//!   `3ρ̂(t - t_n + 1)`.
//!
//! Either failure kills every copy and restarts with `n = 0` at the next step.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::FeedbackSource;
use crate::error::{Error, Result};
use crate::UcbLearner;

/// `ρ(t) = coefficient/√t + floor`.
///
/// Both forms that appear in practice fit: `6κ₀/√t` for the gradient learner
/// and `2ρ̃(t) + 3√(ln(2T)/t)` for wrapped stationary policies whose
/// certificate is itself of this shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoFunction {
    pub coefficient: f64,
    #[serde(default)]
    pub floor: f64,
}

impl RhoFunction {
    pub fn new(coefficient: f64, floor: f64) -> Self {
        RhoFunction { coefficient, floor }
    }

    pub fn inverse_sqrt(coefficient: f64) -> Self {
        RhoFunction { coefficient, floor: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coefficient / t.sqrt() + self.floor
    }

    /// `ρ(2ⁿ)/ρ(2^m)`, the probability of scheduling an order-`m` window in an
    /// order-`n` block.
    pub fn inclusion_probability(&self, block_order: u32, order: u32) -> f64 {
        if order >= block_order {
            return 1.0;
        }
        let num = self.eval(2f64.powi(block_order as i32));
        let den = self.eval(2f64.powi(order as i32));
        if den > 0.0 {
            (num / den).min(1.0)
        } else {
            1.0
        }
    }

    /// `ρ` non-increasing and `t·ρ(t)` non-decreasing on `t = 1..=horizon`.
    pub fn is_well_shaped(&self, horizon: u64) -> bool {
        check_radius_shape(|t| self.eval(t), horizon)
    }
}

/// Checks that `rho` is non-increasing and `t·rho(t)` non-decreasing on
/// `1..=horizon`.
pub fn check_radius_shape(rho: impl Fn(f64) -> f64, horizon: u64) -> bool {
    let mut prev = rho(1.0);
    let mut prev_c = prev;
    if !prev.is_finite() || prev < 0.0 {
        return false;
    }
    for t in 2..=horizon {
        let tf = t as f64;
        let r = rho(tf);
        let c = tf * r;
        let slack = 1e-12 * prev.abs().max(1.0);
        if !r.is_finite() || r > prev + slack || c < prev_c - 1e-12 * prev_c.abs().max(1.0) {
            return false;
        }
        prev = r;
        prev_c = c;
    }
    true
}

/// `ρ̂(t) = 6(log₂T + 1)ρ(t)`.
pub fn rho_hat(rho: &RhoFunction, horizon: u64, t: f64) -> f64 {
    6.0 * ((horizon as f64).log2() + 1.0) * rho.eval(t)
}

/// Fails when `(1/2^m) Σ_{τ∈[s,e)} y_τ ≥ U_t + 9ρ̂(2^m)`.
pub fn test1_fails(order: u32, window_reward_sum: f64, running_min: f64, rho_hat_at_len: f64) -> bool {
    let len = 2f64.powi(order as i32);
    window_reward_sum / len >= running_min + 9.0 * rho_hat_at_len
}

/// Fails when `(1/(t - t_n + 1)) Σ_{τ=t_n}^{t} (r̄_τ - y_τ) ≥ 3ρ̂(t - t_n + 1)`.
pub fn test2_fails(gap_sum: f64, elapsed: u64, rho_hat_at_elapsed: f64) -> bool {
    gap_sum / elapsed as f64 >= 3.0 * rho_hat_at_elapsed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThreadStatus {
    Scheduled,
    Running,
    Finished,
    Killed,
}

/// A scheduled copy of the learner living on `[start, end)`, `end - start =
/// 2^order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadRecord {
    /// Insertion index within the block's schedule.
    pub id: usize,
    pub order: u32,
    pub start: u64,
    pub end: u64,
    pub status: ThreadStatus,
}

impl ThreadRecord {
    pub fn new(id: usize, order: u32, start: u64) -> Self {
        ThreadRecord { id, order, start, end: start + (1u64 << order), status: ThreadStatus::Scheduled }
    }

    pub fn covers(&self, t: u64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Draws the schedule of an order-`n` block starting at `t_n`. Orders are
/// visited from `n` down to `0` and windows left to right, which fixes the
/// insertion order used for tie-breaking.
pub fn schedule_block<R: Rng + ?Sized>(
    n: u32,
    block_start: u64,
    rho: &RhoFunction,
    rng: &mut R,
) -> Vec<ThreadRecord> {
    let mut out = Vec::new();
    for m in (0..=n).rev() {
        let p = rho.inclusion_probability(n, m);
        for z in 0..(1u64 << (n - m)) {
            if m == n || rng.random::<f64>() < p {
                out.push(ThreadRecord::new(out.len(), m, block_start + (z << m)));
            }
        }
    }
    out
}

/// The lowest-order live thread covering `t`; ties go to the earliest start,
/// then the earliest insertion. Returns an index into `schedule`.
pub fn active_thread(schedule: &[ThreadRecord], t: u64) -> Option<usize> {
    schedule
        .iter()
        .enumerate()
        .filter(|(_, th)| th.status != ThreadStatus::Killed && th.covers(t))
        .min_by_key(|(_, th)| (th.order, th.start, th.id))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeTest {
    Test1,
    Test2,
}

impl ChangeTest {
    pub fn code(self) -> u8 {
        match self {
            ChangeTest::Test1 => 1,
            ChangeTest::Test2 => 2,
        }
    }
}

/// One step of a run. Scheduler fields are `None` when a learner runs
/// without the master.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: u64,
    pub block_order: Option<u32>,
    pub thread_order: Option<u32>,
    pub action: Vec<f64>,
    pub feedback: f64,
    pub rbar: f64,
    pub running_min: Option<f64>,
    pub restart: bool,
    pub test_fired: Option<ChangeTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartEvent {
    pub t: u64,
    pub test: ChangeTest,
    /// Order of the thread whose window failed Test 1.
    pub thread_order: Option<u32>,
    pub block_order: u32,
    pub block_start: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MasterTrace {
    pub steps: Vec<TraceStep>,
    pub restarts: Vec<RestartEvent>,
}

/// One block: its schedule, the lazily created learner copies, and the
/// statistics the tests need.
struct Block<L> {
    order: u32,
    start: u64,
    threads: Vec<ThreadRecord>,
    states: Vec<Option<L>>,
    steps_run: Vec<u64>,
    /// `slots[m]` maps a window index to the order-`m` thread on it.
    slots: Vec<HashMap<u64, usize>>,
    /// Prefix sums of the block's realized feedback.
    reward_prefix: Vec<f64>,
    gap_sum: f64,
    running_min: f64,
}

impl<L> Block<L> {
    fn new(order: u32, start: u64, threads: Vec<ThreadRecord>) -> Self {
        let mut slots = vec![HashMap::new(); order as usize + 1];
        for (i, th) in threads.iter().enumerate() {
            debug_assert!(th.order <= order && th.start >= start);
            let offset = th.start - start;
            debug_assert_eq!(offset % (1u64 << th.order), 0, "unaligned window");
            slots[th.order as usize].insert(offset >> th.order, i);
        }
        let n = threads.len();
        Block {
            order,
            start,
            threads,
            states: (0..n).map(|_| None).collect(),
            steps_run: vec![0; n],
            slots,
            reward_prefix: vec![0.0],
            gap_sum: 0.0,
            running_min: f64::INFINITY,
        }
    }

    fn len(&self) -> u64 {
        1u64 << self.order
    }

    fn thread_at(&self, order: u32, offset: u64) -> Option<usize> {
        self.slots[order as usize]
            .get(&(offset >> order))
            .copied()
            .filter(|&i| self.threads[i].status != ThreadStatus::Killed)
    }

    fn active(&self, t: u64) -> Option<usize> {
        let offset = t - self.start;
        (0..=self.order).find_map(|m| self.thread_at(m, offset))
    }

    fn kill_all(&mut self) {
        for th in &mut self.threads {
            if th.status != ThreadStatus::Finished {
                th.status = ThreadStatus::Killed;
            }
        }
    }
}

/// Drives learner copies produced by `factory` over the horizon.
pub struct Master<L, F> {
    horizon: u64,
    rho: RhoFunction,
    factory: F,
    rng: ChaCha8Rng,
    order_cap: u32,
    next_order: u32,
    t: u64,
    block: Option<Block<L>>,
    trace: MasterTrace,
}

impl<L, F> Master<L, F>
where
    L: UcbLearner,
    F: FnMut() -> L,
{
    /// `seed` drives only the scheduling coin flips.
    pub fn new(horizon: u64, rho: RhoFunction, factory: F, seed: u64) -> Self {
        let order_cap = if horizon <= 1 { 0 } else { 64 - (horizon - 1).leading_zeros() };
        Master {
            horizon,
            rho,
            factory,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order_cap,
            next_order: 0,
            t: 1,
            block: None,
            trace: MasterTrace::default(),
        }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn rho(&self) -> &RhoFunction {
        &self.rho
    }

    /// `⌈log₂T⌉`
    pub fn order_cap(&self) -> u32 {
        self.order_cap
    }

    /// The next global step to be played, 1-based.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t > self.horizon
    }

    pub fn trace(&self) -> &MasterTrace {
        &self.trace
    }

    pub fn into_trace(self) -> MasterTrace {
        self.trace
    }

    /// Schedule of the current block, if one is open.
    pub fn current_schedule(&self) -> Option<&[ThreadRecord]> {
        self.block.as_ref().map(|b| b.threads.as_slice())
    }

    /// State of a thread in the current block, if it has been activated.
    pub fn thread_state(&self, id: usize) -> Option<&L> {
        self.block.as_ref().and_then(|b| b.states.get(id)).and_then(|s| s.as_ref())
    }

    fn rho_hat(&self, t: f64) -> f64 {
        rho_hat(&self.rho, self.horizon, t)
    }

    fn open_block(&mut self, schedule: Option<Vec<ThreadRecord>>) {
        let n = self.next_order;
        let threads = match schedule {
            Some(s) => s,
            None => schedule_block(n, self.t, &self.rho, &mut self.rng),
        };
        self.block = Some(Block::new(n, self.t, threads));
    }

    /// Opens the next block with a caller-supplied schedule instead of
    /// drawing one. The schedule must contain the order-`order` thread at the
    /// current step, and every thread must sit on an aligned window inside
    /// the block. Thread ids are renumbered by position.
    pub fn start_block(&mut self, order: u32, mut schedule: Vec<ThreadRecord>) -> Result<()> {
        if self.block.is_some() {
            return Err(Error::InvalidConfig("a block is already open".into()));
        }
        if order > self.order_cap || self.t + (1u64 << order) > self.horizon + 1 {
            return Err(Error::InvalidConfig(format!(
                "a block of order {order} does not fit at t = {} with T = {}",
                self.t, self.horizon
            )));
        }
        let start = self.t;
        let end = start + (1u64 << order);
        let mut seen = std::collections::HashSet::new();
        for th in &schedule {
            let aligned = th.start >= start
                && th.order <= order
                && (th.start - start) % (1u64 << th.order) == 0
                && th.end == th.start + (1u64 << th.order)
                && th.end <= end;
            if !aligned || !seen.insert((th.order, th.start)) {
                return Err(Error::InvalidConfig(format!("thread {th:?} is not a distinct aligned window")));
            }
        }
        if !schedule.iter().any(|th| th.order == order && th.start == start) {
            return Err(Error::InvalidConfig(format!("schedule lacks the order-{order} thread")));
        }
        for (i, th) in schedule.iter_mut().enumerate() {
            th.id = i;
            th.status = ThreadStatus::Scheduled;
        }
        self.next_order = order;
        self.open_block(Some(schedule));
        Ok(())
    }

    /// Plays one global step.
    pub fn step<E: FeedbackSource + ?Sized>(&mut self, env: &mut E) -> &TraceStep {
        assert!(!self.is_done(), "master stepped past the horizon");
        if self.block.is_none() {
            self.open_block(None);
        }
        let t = self.t;
        let threshold1: Vec<f64> = (0..=self.block.as_ref().map_or(0, |b| b.order))
            .map(|m| self.rho_hat(2f64.powi(m as i32)))
            .collect();
        let block = self.block.as_mut().expect("open block");
        let offset = t - block.start;
        let idx = block.active(t).expect("the order-n thread covers every step of its block");
        {
            let th = &mut block.threads[idx];
            debug_assert!(th.covers(t));
            th.status = ThreadStatus::Running;
        }
        let state = block.states[idx].get_or_insert_with(&mut self.factory);
        let action = state.next_action();
        let y = env.observe(t as usize, &action);
        let rbar = state.ingest(y);
        block.steps_run[idx] += 1;

        let prev = *block.reward_prefix.last().expect("prefix");
        block.reward_prefix.push(prev + y);
        block.gap_sum += rbar - y;
        block.running_min = block.running_min.min(rbar);
        let running_min = block.running_min;

        // Windows ending at this step, lowest order first.
        let mut fired: Option<(ChangeTest, Option<u32>)> = None;
        for m in 0..=block.order {
            let len = 1u64 << m;
            if (offset + 1) % len != 0 {
                continue;
            }
            let Some(i) = block.thread_at(m, offset) else { continue };
            block.threads[i].status = ThreadStatus::Finished;
            if block.steps_run[i] == 0 || fired.is_some() {
                continue;
            }
            let k = (offset + 1) as usize;
            let window = block.reward_prefix[k] - block.reward_prefix[k - len as usize];
            if test1_fails(m, window, running_min, threshold1[m as usize]) {
                fired = Some((ChangeTest::Test1, Some(m)));
            }
        }
        let elapsed = offset + 1;
        if fired.is_none() {
            let bound = rho_hat(&self.rho, self.horizon, elapsed as f64);
            if test2_fails(block.gap_sum, elapsed, bound) {
                fired = Some((ChangeTest::Test2, None));
            }
        }

        let block_order = block.order;
        let block_start = block.start;
        let thread_order = block.threads[idx].order;
        let block_done = elapsed == block.len();

        if let Some((test, order)) = fired {
            block.kill_all();
            self.trace.restarts.push(RestartEvent {
                t,
                test,
                thread_order: order,
                block_order,
                block_start,
            });
            self.block = None;
            self.next_order = 0;
        } else if block_done {
            self.block = None;
            self.next_order = (self.next_order + 1).min(self.order_cap);
        }

        self.trace.steps.push(TraceStep {
            t,
            block_order: Some(block_order),
            thread_order: Some(thread_order),
            action,
            feedback: y,
            rbar,
            running_min: Some(running_min),
            restart: fired.is_some(),
            test_fired: fired.map(|(test, _)| test),
        });
        self.t += 1;
        self.trace.steps.last().expect("just pushed")
    }

    /// Runs to the horizon and returns the trace.
    pub fn run<E: FeedbackSource + ?Sized>(mut self, env: &mut E) -> MasterTrace {
        while !self.is_done() {
            self.step(env);
        }
        self.trace
    }
}
