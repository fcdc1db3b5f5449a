//! Simulated-annealing search over labeling orders.
//!
//! The chain starts from the first `K * B` entries of a seeded shuffle of
//! the pool. Each step proposes a neighbour with the transition kernel
//! (swap across batches or replace with an unused pool point, each with
//! probability 1/2) and accepts it when a uniform draw falls below
//! `exp(gamma * t * (q_p - q_prev))`. A greedy phase then hill-climbs from
//! the best order found.
//!
//! The search is a resumable state machine: [`Search::checkpoint`] captures
//! the step counter, both orders and the generator position, and restoring
//! it continues the exact same trajectory.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alcore::{ALConfig, Evaluator, Order};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Anything that scores an order; the search maximizes it.
pub trait Objective {
    fn quality(&self, order: &Order) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&Order) -> Result<f64>,
{
    fn quality(&self, order: &Order) -> Result<f64> {
        self(order)
    }
}

/// Validation xi-quality through an evaluator.
#[derive(Clone, Copy, Debug)]
pub struct ValidationQuality<'a> {
    pub evaluator: &'a Evaluator,
    pub xi: u64,
}

impl Objective for ValidationQuality<'_> {
    fn quality(&self, order: &Order) -> Result<f64> {
        self.evaluator.quality_val(order, self.xi)
    }
}

fn default_gamma() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SAConfig {
    /// Annealing steps `T_S`.
    pub anneal_steps: usize,
    /// Greedy steps `T_G`.
    pub greedy_steps: usize,
    /// Linear annealing factor.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub search_seed: u64,
}

impl SAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidSearch(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Swap,
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Anneal,
    Greedy,
}

/// Draws a neighbour of `order`. Swap exchanges one position in each of two
/// distinct batches (batches drawn first, then positions); replace
/// substitutes one used position with an unused pool element. When one
/// move is impossible the other is used.
pub fn propose(order: &Order, pool: &[usize], rng: &mut ChaCha8Rng) -> Result<(Order, ProposalKind)> {
    let cfg = order.config;
    let can_swap = cfg.iterations >= 2;
    let can_replace = pool.len() > cfg.budget();
    let coin_swap = rng.random_bool(0.5);
    let kind = match (can_swap, can_replace) {
        (false, false) => return Err(Error::InvalidSearch("no proposal possible: K = 1 and the pool is exhausted".into())),
        (true, false) => ProposalKind::Swap,
        (false, true) => ProposalKind::Replace,
        (true, true) if coin_swap => ProposalKind::Swap,
        _ => ProposalKind::Replace,
    };
    let mut indices = order.indices.clone();
    let b = cfg.batch_size;
    match kind {
        ProposalKind::Swap => {
            let first = rng.random_range(0..cfg.iterations);
            let mut second = rng.random_range(0..cfg.iterations - 1);
            if second >= first {
                second += 1;
            }
            let p1 = first * b + rng.random_range(0..b);
            let p2 = second * b + rng.random_range(0..b);
            indices.swap(p1, p2);
        }
        ProposalKind::Replace => {
            let used: HashSet<usize> = order.indices.iter().copied().collect();
            let mut unused: Vec<usize> = pool.iter().copied().filter(|i| !used.contains(i)).collect();
            unused.sort_unstable();
            let pos = rng.random_range(0..indices.len());
            indices[pos] = unused[rng.random_range(0..unused.len())];
        }
    }
    Ok((Order::unchecked(cfg, indices), kind))
}

/// `exp(gamma * t * (q_p - q_prev))`; values at or above 1 always accept.
pub fn acceptance_threshold(q_p: f64, q_prev: f64, t: usize, gamma: f64) -> f64 {
    (gamma * t as f64 * (q_p - q_prev)).exp()
}

/// One evaluated proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    /// 1-based step within its phase.
    pub step: usize,
    pub kind: ProposalKind,
    pub q_proposal: f64,
    pub accepted: bool,
    /// Best quality after this step.
    pub q_best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub q_initial: f64,
    pub steps: Vec<StepRecord>,
    pub best_order: Order,
    pub best_quality: f64,
}

/// Serializable search position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SAConfig,
    pub phase: Phase,
    /// Steps completed within the current phase.
    pub completed: usize,
    pub current: Order,
    pub q_current: f64,
    pub best: Order,
    pub q_best: f64,
    pub q_initial: f64,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub rng_word_pos: String,
}

/// A running SA chain.
#[derive(Clone, Debug)]
pub struct Search {
    config: SAConfig,
    pool: Vec<usize>,
    rng: ChaCha8Rng,
    phase: Phase,
    completed: usize,
    current: Order,
    q_current: f64,
    best: Order,
    q_best: f64,
    q_initial: f64,
}

/// The initial order: the first `K * B` entries of a seeded pool shuffle.
pub fn initial_order(pool: &[usize], al: ALConfig, rng: &mut ChaCha8Rng) -> Result<Order> {
    if al.budget() > pool.len() {
        return Err(Error::PoolTooSmall { pool: pool.len(), batch: al.budget() });
    }
    let mut shuffled = pool.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(rng);
    shuffled.truncate(al.budget());
    Order::new(al, shuffled, pool)
}

impl Search {
    pub fn new(objective: &dyn Objective, pool: &[usize], al: ALConfig, config: SAConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.search_seed, Stream::Search);
        let start = initial_order(pool, al, &mut rng)?;
        let q0 = objective.quality(&start)?;
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        let phase = if config.anneal_steps > 0 { Phase::Anneal } else { Phase::Greedy };
        Ok(Self {
            config,
            pool,
            rng,
            phase,
            completed: 0,
            current: start.clone(),
            q_current: q0,
            best: start,
            q_best: q0,
            q_initial: q0,
        })
    }

    pub fn restore(checkpoint: Checkpoint, pool: &[usize]) -> Result<Self> {
        let word_pos: u128 = checkpoint
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad word position {:?}", checkpoint.rng_word_pos)))?;
        checkpoint.current.validate(pool)?;
        checkpoint.best.validate(pool)?;
        let mut rng = rng_for(checkpoint.config.search_seed, Stream::Search);
        rng.set_word_pos(word_pos);
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        Ok(Self {
            config: checkpoint.config,
            pool,
            rng,
            phase: checkpoint.phase,
            completed: checkpoint.completed,
            current: checkpoint.current,
            q_current: checkpoint.q_current,
            best: checkpoint.best,
            q_best: checkpoint.q_best,
            q_initial: checkpoint.q_initial,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            phase: self.phase,
            completed: self.completed,
            current: self.current.clone(),
            q_current: self.q_current,
            best: self.best.clone(),
            q_best: self.q_best,
            q_initial: self.q_initial,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Greedy && self.completed >= self.config.greedy_steps
    }

    pub fn best(&self) -> (&Order, f64) {
        (&self.best, self.q_best)
    }

    pub fn q_initial(&self) -> f64 {
        self.q_initial
    }

    /// Advances one proposal; `None` once both phases are finished.
    pub fn step(&mut self, objective: &dyn Objective) -> Result<Option<StepRecord>> {
        if self.phase == Phase::Anneal && self.completed >= self.config.anneal_steps {
            self.phase = Phase::Greedy;
            self.completed = 0;
        }
        if self.is_done() {
            return Ok(None);
        }
        let t = self.completed + 1;
        let record = match self.phase {
            Phase::Anneal => {
                let (proposal, kind) = propose(&self.current, &self.pool, &mut self.rng)?;
                let q_p = objective.quality(&proposal)?;
                let u: f64 = self.rng.random();
                let accepted = u < acceptance_threshold(q_p, self.q_current, t, self.config.gamma);
                if accepted {
                    if self.q_best < q_p {
                        self.best = proposal.clone();
                        self.q_best = q_p;
                    }
                    self.current = proposal;
                    self.q_current = q_p;
                }
                StepRecord { phase: Phase::Anneal, step: t, kind, q_proposal: q_p, accepted, q_best: self.q_best }
            }
            Phase::Greedy => {
                let (proposal, kind) = propose(&self.best, &self.pool, &mut self.rng)?;
                let q_p = objective.quality(&proposal)?;
                let accepted = q_p > self.q_best;
                if accepted {
                    self.best = proposal;
                    self.q_best = q_p;
                }
                StepRecord { phase: Phase::Greedy, step: t, kind, q_proposal: q_p, accepted, q_best: self.q_best }
            }
        };
        self.completed = t;
        Ok(Some(record))
    }

    /// Runs to completion, handing every step record to `on_step`.
    pub fn run(
        &mut self,
        objective: &dyn Objective,
        mut on_step: impl FnMut(&StepRecord, &Search) -> Result<()>,
    ) -> Result<()> {
        while let Some(record) = self.step(objective)? {
            on_step(&record, self)?;
        }
        Ok(())
    }
}

/// Full annealing plus greedy search; returns the best order, its quality
/// and the step trace. Deterministic given the objective and `search_seed`.
pub fn sa_search(objective: &dyn Objective, pool: &[usize], al: ALConfig, config: SAConfig) -> Result<SearchTrace> {
    let mut search = Search::new(objective, pool, al, config)?;
    let mut steps = Vec::with_capacity(config.anneal_steps + config.greedy_steps);
    search.run(objective, |r, _| {
        steps.push(r.clone());
        Ok(())
    })?;
    Ok(SearchTrace { q_initial: search.q_initial, steps, best_order: search.best.clone(), best_quality: search.q_best })
}

/// Hill-climbing from `(best, q_best)` with the same kernel; only strict
/// improvements are accepted.
pub fn greedy_refine(
    objective: &dyn Objective,
    pool: &[usize],
    best: Order,
    q_best: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Order, f64)> {
    let mut best = best;
    let mut q_best = q_best;
    for _ in 0..steps {
        let (proposal, _) = propose(&best, pool, rng)?;
        let q = objective.quality(&proposal)?;
        if q > q_best {
            best = proposal;
            q_best = q;
        }
    }
    Ok((best, q_best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn diff_positions(a: &Order, b: &Order) -> usize {
        a.indices.iter().zip(&b.indices).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn kernel_moves() {
        let pool: Vec<usize> = (0..20).collect();
        let order = Order::new(ALConfig::new(3, 4), (0..12).collect(), &pool).unwrap();
        let mut rng = rng_for(0, Stream::Search);
        let mut swaps = 0;
        for _ in 0..10_000 {
            let (p, kind) = propose(&order, &pool, &mut rng).unwrap();
            p.validate(&pool).unwrap();
            match kind {
                ProposalKind::Swap => {
                    swaps += 1;
                    assert_eq!(diff_positions(&order, &p), 2);
                    let mut a = order.indices.clone();
                    let mut b = p.indices.clone();
                    a.sort();
                    b.sort();
                    assert_eq!(a, b);
                    // the two changed positions sit in different batches
                    let changed: Vec<usize> = (0..12).filter(|&i| order.indices[i] != p.indices[i]).collect();
                    assert_ne!(changed[0] / 3, changed[1] / 3);
                }
                ProposalKind::Replace => assert_eq!(diff_positions(&order, &p), 1),
            }
        }
        let frac = swaps as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "swap fraction {frac}");
    }

    #[test]
    fn exhausted_pool_forces_swap() {
        let pool: Vec<usize> = (0..6).collect();
        let order = Order::new(ALConfig::new(2, 3), (0..6).collect(), &pool).unwrap();
        let mut rng = rng_for(1, Stream::Search);
        for _ in 0..100 {
            assert_eq!(propose(&order, &pool, &mut rng).unwrap().1, ProposalKind::Swap);
        }
        let single = Order::new(ALConfig::new(6, 1), (0..6).collect(), &pool).unwrap();
        assert!(propose(&single, &pool, &mut rng).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        assert_eq!(acceptance_threshold(0.4, 0.4, 7, 0.1), 1.0);
        assert!(acceptance_threshold(0.5, 0.4, 7, 0.1) > 1.0);
        assert!((acceptance_threshold(0.45, 0.5, 100, 0.1) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((acceptance_threshold(0.45, 0.5, 100, 0.1) - 0.60653).abs() < 1e-5);
        // cooling: worse proposals become less acceptable over time
        assert!(acceptance_threshold(0.4, 0.5, 200, 0.1) < acceptance_threshold(0.4, 0.5, 100, 0.1));
    }

    fn stub(order: &Order) -> Result<f64> {
        // rewards large indices early; depends on batch membership only
        let b = order.config.batch_size;
        let mut q = 0.0;
        for (k, chunk) in order.indices.chunks(b).enumerate() {
            let s: usize = chunk.iter().map(|&i| (i * 7 + 3) % 11).sum();
            q += s as f64 / (k + 1) as f64;
        }
        Ok(q / 100.0)
    }

    #[test]
    fn no_steps_returns_initial() {
        let pool: Vec<usize> = (0..8).collect();
        let al = ALConfig::new(2, 2);
        let cfg = SAConfig { anneal_steps: 0, greedy_steps: 0, gamma: 0.1, search_seed: 3 };
        let trace = sa_search(&stub, &pool, al, cfg).unwrap();
        let expected = initial_order(&pool, al, &mut rng_for(3, Stream::Search)).unwrap();
        assert_eq!(trace.best_order, expected);
        assert_eq!(trace.best_quality, stub(&expected).unwrap());
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn best_is_max_of_all_evaluations_and_monotone() {
        let pool: Vec<usize> = (0..12).collect();
        let seen = RefCell::new(Vec::new());
        let objective = |o: &Order| {
            let q = stub(o)?;
            seen.borrow_mut().push(q);
            Ok(q)
        };
        let cfg = SAConfig { anneal_steps: 300, greedy_steps: 50, gamma: 0.1, search_seed: 9 };
        let trace = sa_search(&objective, &pool, ALConfig::new(2, 3), cfg).unwrap();
        let max = seen.borrow().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(trace.best_quality, max);
        let mut prev = trace.q_initial;
        for r in &trace.steps {
            assert!(r.q_best >= prev);
            prev = r.q_best;
        }
        assert_eq!(stub(&trace.best_order).unwrap(), trace.best_quality);
    }

    #[test]
    fn replay_is_identical() {
        let pool: Vec<usize> = (0..12).collect();
        let cfg = SAConfig { anneal_steps: 200, greedy_steps: 20, gamma: 0.1, search_seed: 4 };
        let a = sa_search(&stub, &pool, ALConfig::new(2, 3), cfg).unwrap();
        let b = sa_search(&stub, &pool, ALConfig::new(2, 3), cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let pool: Vec<usize> = (0..12).collect();
        let al = ALConfig::new(2, 3);
        let cfg = SAConfig { anneal_steps: 120, greedy_steps: 30, gamma: 0.1, search_seed: 8 };
        let full = sa_search(&stub, &pool, al, cfg).unwrap();

        for cut in [0, 57, 120, 135] {
            let mut search = Search::new(&stub, &pool, al, cfg).unwrap();
            let mut steps = Vec::new();
            for _ in 0..cut {
                steps.push(search.step(&stub).unwrap().unwrap());
            }
            let json = serde_json::to_string(&search.checkpoint()).unwrap();
            let mut resumed = Search::restore(serde_json::from_str(&json).unwrap(), &pool).unwrap();
            resumed.run(&stub, |r, _| {
                steps.push(r.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(steps, full.steps, "cut at {cut}");
            assert_eq!(resumed.best().0, &full.best_order);
        }
    }

    #[test]
    fn greedy_refine_never_worsens() {
        let pool: Vec<usize> = (0..10).collect();
        let al = ALConfig::new(2, 2);
        let mut rng = rng_for(2, Stream::Search);
        let start = initial_order(&pool, al, &mut rng).unwrap();
        let q0 = stub(&start).unwrap();
        let (same, q_same) = greedy_refine(&stub, &pool, start.clone(), q0, 0, &mut rng).unwrap();
        assert_eq!((same, q_same), (start.clone(), q0));
        let (_, q) = greedy_refine(&stub, &pool, start, q0, 200, &mut rng).unwrap();
        assert!(q >= q0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn proposals_stay_valid(seed in any::<u64>(), b in 1usize..4, k in 2usize..5, extra in 0usize..5) {
                let pool: Vec<usize> = (0..b * k + extra).map(|i| i * 2 + 1).collect();
                let al = ALConfig::new(b, k);
                let mut rng = rng_for(seed, Stream::Search);
                let mut order = initial_order(&pool, al, &mut rng).unwrap();
                for _ in 0..200 {
                    order = propose(&order, &pool, &mut rng).unwrap().0;
                    prop_assert!(order.validate(&pool).is_ok());
                }
            }
        }
    }
}
