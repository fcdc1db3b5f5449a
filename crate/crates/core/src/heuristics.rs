//! Baseline acquisition functions and the pool-based acquisition loop that
//! turns a strategy into an [`Order`].

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alcore::{ALConfig, Order, Workbench};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learner::Model;
use crate::rng::{rng_for_sub, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    MaxEntropy,
    Bald,
}

fn default_mc_samples() -> usize {
    10
}

/// A scoring acquisition function together with its randomness seed zeta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AcquisitionStrategy {
    pub kind: StrategyKind,
    /// Dropout samples per point (BALD only).
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub zeta: u64,
}

impl AcquisitionStrategy {
    pub fn random(zeta: u64) -> Self {
        Self { kind: StrategyKind::Random, mc_samples: default_mc_samples(), zeta }
    }

    pub fn max_entropy() -> Self {
        Self { kind: StrategyKind::MaxEntropy, mc_samples: default_mc_samples(), zeta: 0 }
    }

    pub fn bald(mc_samples: usize, zeta: u64) -> Self {
        Self { kind: StrategyKind::Bald, mc_samples, zeta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == StrategyKind::Bald && self.mc_samples < 2 {
            return Err(Error::InvalidAcquisition(format!("bald needs at least 2 mc samples, got {}", self.mc_samples)));
        }
        Ok(())
    }

    pub fn needs_model(&self) -> bool {
        self.kind != StrategyKind::Random
    }

    /// Scores every point of `candidates` (higher is acquired first).
    /// `iteration` selects an independent zeta sub-stream per acquisition
    /// round.
    pub fn score_pool(&self, model: Option<&Model>, data: &Dataset, candidates: &[usize], iteration: usize) -> Result<Vec<(usize, f64)>> {
        self.validate()?;
        let need_model = || model.ok_or_else(|| Error::InvalidAcquisition("strategy needs a trained model".into()));
        match self.kind {
            StrategyKind::Random => {
                let mut rng = rng_for_sub(self.zeta, Stream::Acquisition, iteration as u64);
                Ok(candidates.iter().map(|&i| (i, rng.random::<f64>())).collect())
            }
            StrategyKind::MaxEntropy => {
                let model = need_model()?;
                candidates
                    .iter()
                    .map(|&i| Ok((i, entropy_score(&model.probabilities(data.features(i))?)?)))
                    .collect()
            }
            StrategyKind::Bald => {
                let model = need_model()?;
                let mut rng = rng_for_sub(self.zeta, Stream::Acquisition, iteration as u64);
                candidates
                    .iter()
                    .map(|&i| {
                        let samples = model.sample_probabilities(data.features(i), self.mc_samples, &mut rng)?;
                        Ok((i, bald_score(&samples)?))
                    })
                    .collect()
            }
        }
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy_score(p: &[f64]) -> Result<f64> {
    if let Some(&bad) = p.iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidDistribution(format!("negative or NaN entry {bad}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Monte Carlo mutual information `H(mean p) - mean H(p)`, clamped at 0.
pub fn bald_score(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidDistribution("bald needs at least two samples".into()));
    }
    let c = samples[0].len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(Error::InvalidDistribution("samples differ in length".into()));
    }
    if samples.iter().all(|s| s == &samples[0]) {
        // no disagreement; skip the rounding noise of the mean
        return Ok(0.0);
    }
    let t = samples.len() as f64;
    let mut mean = vec![0.0; c];
    let mut mean_entropy = 0.0;
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v / t;
        }
        mean_entropy += entropy_score(s)? / t;
    }
    Ok((entropy_score(&mean)? - mean_entropy).max(0.0))
}

/// The `batch_size` highest-scoring indices, best first; equal scores go
/// to the lower pool index.
pub fn select_batch<I>(scores: I, batch_size: usize) -> Result<Vec<usize>>
where
    I: IntoIterator<Item = (usize, f64)>,
{
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
    if ranked.len() < batch_size {
        return Err(Error::PoolTooSmall { pool: ranked.len(), batch: batch_size });
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(batch_size).map(|(i, _)| i).collect())
}

/// What a selector sees at one acquisition round.
#[derive(Debug)]
pub struct AcquisitionState<'a> {
    pub data: &'a Dataset,
    /// The model trained on `labeled`, when the strategy or selector needs one.
    pub model: Option<&'a Model>,
    pub labeled: &'a [usize],
    /// Pool points not yet acquired, ascending.
    pub remaining: &'a [usize],
    pub iteration: usize,
}

/// Turns pool scores into a batch. The default takes the top `B`; the
/// distribution-matching wrappers restrict each pick to a deficit slice.
pub trait BatchSelector {
    fn needs_model(&self) -> bool {
        false
    }

    fn select(&mut self, state: &AcquisitionState<'_>, scores: &[(usize, f64)], batch_size: usize) -> Result<Vec<usize>>;
}

/// Plain top-`B` selection.
#[derive(Clone, Copy, Debug, Default)]
pub struct TopScores;

impl BatchSelector for TopScores {
    fn select(&mut self, _state: &AcquisitionState<'_>, scores: &[(usize, f64)], batch_size: usize) -> Result<Vec<usize>> {
        select_batch(scores.iter().copied(), batch_size)
    }
}

/// Runs `K` rounds of train, score and select with one xi for every round.
pub fn run_acquisition(strategy: &AcquisitionStrategy, bench: &Workbench, xi: u64, config: ALConfig) -> Result<Order> {
    run_acquisition_with(strategy, bench, xi, config, &mut TopScores)
}

/// As [`run_acquisition`] with a custom batch selector.
pub fn run_acquisition_with(
    strategy: &AcquisitionStrategy,
    bench: &Workbench,
    xi: u64,
    config: ALConfig,
    selector: &mut dyn BatchSelector,
) -> Result<Order> {
    run_acquisition_loop(strategy, &bench.dataset, &bench.splits.warm, &bench.splits.pool, config, selector, |labeled| {
        bench.train_model(labeled, xi)
    })
}

/// The acquisition loop with an injectable trainer.
pub fn run_acquisition_loop(
    strategy: &AcquisitionStrategy,
    data: &Dataset,
    warm: &[usize],
    pool: &[usize],
    config: ALConfig,
    selector: &mut dyn BatchSelector,
    mut trainer: impl FnMut(&[usize]) -> Result<Model>,
) -> Result<Order> {
    strategy.validate()?;
    if config.budget() > pool.len() {
        return Err(Error::PoolTooSmall { pool: pool.len(), batch: config.budget() });
    }
    let mut labeled: Vec<usize> = warm.to_vec();
    labeled.sort_unstable();
    let mut remaining: BTreeSet<usize> = pool.iter().copied().collect();
    let mut indices = Vec::with_capacity(config.budget());

    for k in 0..config.iterations {
        let model = if strategy.needs_model() || selector.needs_model() { Some(trainer(&labeled)?) } else { None };
        let remaining_vec: Vec<usize> = remaining.iter().copied().collect();
        let scores = strategy.score_pool(model.as_ref(), data, &remaining_vec, k)?;
        let state = AcquisitionState { data, model: model.as_ref(), labeled: &labeled, remaining: &remaining_vec, iteration: k };
        let batch = selector.select(&state, &scores, config.batch_size)?;
        if batch.len() != config.batch_size {
            return Err(Error::InvalidAcquisition(format!("selector returned {} points, expected {}", batch.len(), config.batch_size)));
        }
        for &i in &batch {
            if !remaining.remove(&i) {
                return Err(Error::InvalidAcquisition(format!("selector returned {i}, which is not in the remaining pool")));
            }
            labeled.push(i);
        }
        labeled.sort_unstable();
        indices.extend(batch);
    }
    Order::new(config, indices, pool)
}
