//! Orders, labeled prefixes, performance curves and xi-quality.

mod cache;

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::learner::{evaluate, train_with_fingerprint, LearnerSpec, Metric, Model, TrainConfig};

pub use cache::{CacheEntry, CacheStats, ScoreCache, TrainingKey, VerifyReport};

/// Acquisition batch size `B` and iteration count `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ALConfig {
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "K")]
    pub iterations: usize,
}

impl ALConfig {
    pub fn new(batch_size: usize, iterations: usize) -> Self {
        Self { batch_size, iterations }
    }

    /// Number of pool points an order selects, `K * B`.
    pub fn budget(&self) -> usize {
        self.batch_size * self.iterations
    }
}

/// A partial permutation of `K * B` distinct pool indices, read as `K`
/// consecutive batches of `B`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Order {
    pub config: ALConfig,
    pub indices: Vec<usize>,
}

impl Order {
    /// Builds an order and checks it against `pool`.
    pub fn new(config: ALConfig, indices: Vec<usize>, pool: &[usize]) -> Result<Self> {
        let order = Self { config, indices };
        order.validate(pool)?;
        Ok(order)
    }

    /// Builds an order without a pool membership check.
    pub fn unchecked(config: ALConfig, indices: Vec<usize>) -> Self {
        Self { config, indices }
    }

    pub fn validate(&self, pool: &[usize]) -> Result<()> {
        if self.config.batch_size == 0 || self.config.iterations == 0 {
            return Err(Error::InvalidOrder("B and K must be positive".into()));
        }
        if self.indices.len() != self.config.budget() {
            return Err(Error::InvalidOrder(format!(
                "length {} differs from K*B = {}",
                self.indices.len(),
                self.config.budget()
            )));
        }
        let pool: HashSet<usize> = pool.iter().copied().collect();
        let mut seen = HashSet::with_capacity(self.indices.len());
        for &i in &self.indices {
            if !seen.insert(i) {
                return Err(Error::InvalidOrder(format!("index {i} appears twice")));
            }
            if !pool.contains(&i) {
                return Err(Error::InvalidOrder(format!("index {i} is not in the pool")));
            }
        }
        Ok(())
    }

    /// The `k`-th batch, 1-based.
    pub fn batch(&self, k: usize) -> &[usize] {
        let b = self.config.batch_size;
        &self.indices[(k - 1) * b..k * b]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `D^L_0` plus the first `k * B` entries of the order, sorted ascending.
pub fn labeled_prefix(order: &Order, k: usize, splits: &Splits) -> Result<Vec<usize>> {
    if k > order.config.iterations {
        return Err(Error::PrefixOutOfRange { k, max: order.config.iterations });
    }
    let mut set: Vec<usize> = splits.warm.iter().copied().chain(order.indices[..k * order.config.batch_size].iter().copied()).collect();
    set.sort_unstable();
    Ok(set)
}

/// Scores `tau(1..=K)` on one evaluation set, with the warm-start score
/// `tau(0)` kept only for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCurve {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

impl PerformanceCurve {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, initial: None }
    }

    /// `k,score` rows, including `k = 0` when recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,score\n");
        if let Some(v) = self.initial {
            out.push_str(&format!("0,{v}\n"));
        }
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", k + 1));
        }
        out
    }
}

/// Mean of `tau(k)` over `k = 1..=K`; `tau(0)` does not count.
pub fn quality(curve: &PerformanceCurve) -> f64 {
    if curve.values.is_empty() {
        return 0.0;
    }
    curve.values.iter().sum::<f64>() / curve.values.len() as f64
}

/// Curves and qualities of one order under one training seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub order: Order,
    pub xi: u64,
    pub curve_val: PerformanceCurve,
    pub curve_test: PerformanceCurve,
    pub q_val: f64,
    pub q_test: f64,
}

impl QualityRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Which held-out set a score refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Val,
    Test,
}

/// Everything fixed across the orders of one experiment: the data, its
/// splits, the learner and its training protocol.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub dataset: Arc<Dataset>,
    pub splits: Splits,
    pub learner: LearnerSpec,
    pub train: TrainConfig,
    /// Metric for the performance curves.
    pub metric: Metric,
    dataset_fp: String,
    id: String,
}

impl Workbench {
    pub fn new(dataset: Arc<Dataset>, splits: Splits, learner: LearnerSpec, train: TrainConfig, metric: Metric) -> Result<Self> {
        learner.validate()?;
        train.validate()?;
        if splits.modelsel.is_empty() {
            return Err(Error::EmptySet("model-selection"));
        }
        let dataset_fp = dataset.fingerprint();
        let mut h = Sha256::new();
        h.update(dataset_fp.as_bytes());
        h.update(serde_json::to_vec(&splits)?);
        let id = hex::encode(h.finalize());
        Ok(Self { dataset, splits, learner, train, metric, dataset_fp, id })
    }

    /// Same data and splits, different learner.
    pub fn with_learner(&self, learner: LearnerSpec) -> Result<Self> {
        learner.validate()?;
        Ok(Self { learner, ..self.clone() })
    }

    /// Hash of the dataset contents and the splits.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dataset_fingerprint(&self) -> &str {
        &self.dataset_fp
    }

    pub fn eval_indices(&self, set: EvalSet) -> &[usize] {
        match set {
            EvalSet::Val => &self.splits.val,
            EvalSet::Test => &self.splits.test,
        }
    }

    pub fn train_model(&self, labeled: &[usize], xi: u64) -> Result<Model> {
        Ok(train_with_fingerprint(&self.learner, &self.dataset, labeled, &self.splits.modelsel, &self.train, xi, Some(&self.dataset_fp))?.model)
    }

    /// Trains on `labeled` and scores the model on both held-out sets.
    pub fn train_and_score(&self, labeled: &[usize], xi: u64) -> Result<[f64; 2]> {
        let model = self.train_model(labeled, xi)?;
        Ok([
            evaluate(&model, &self.dataset, &self.splits.val, self.metric)?,
            evaluate(&model, &self.dataset, &self.splits.test, self.metric)?,
        ])
    }

    pub fn training_key(&self, labeled: &[usize], xi: u64) -> TrainingKey {
        TrainingKey {
            workbench: self.id.clone(),
            learner: self.learner.clone(),
            train: self.train.clone(),
            metric: self.metric,
            xi,
            labeled: labeled.to_vec(),
        }
    }
}

/// Computes performance curves, optionally through a shared score cache.
#[derive(Clone, Debug)]
pub struct Evaluator {
    bench: Workbench,
    cache: Option<Arc<ScoreCache>>,
}

impl Evaluator {
    /// Recomputes every training.
    pub fn uncached(bench: Workbench) -> Self {
        Self { bench, cache: None }
    }

    /// Memoizes per-prefix scores in `store`.
    pub fn cached(bench: Workbench, store: Arc<ScoreCache>) -> Self {
        Self { bench, cache: Some(store) }
    }

    pub fn workbench(&self) -> &Workbench {
        &self.bench
    }

    pub fn cache(&self) -> Option<&Arc<ScoreCache>> {
        self.cache.as_ref()
    }

    /// Held-out scores of the model trained on the sorted `labeled` set.
    pub fn scores(&self, labeled: &[usize], xi: u64) -> Result<[f64; 2]> {
        match &self.cache {
            None => self.bench.train_and_score(labeled, xi),
            Some(cache) => cache.get_or_compute(&self.bench.training_key(labeled, xi), || self.bench.train_and_score(labeled, xi)),
        }
    }

    fn curves(&self, order: &Order, xi: u64, with_initial: bool) -> Result<(PerformanceCurve, PerformanceCurve)> {
        order.validate(&self.bench.splits.pool)?;
        let start = if with_initial { 0 } else { 1 };
        let scores = (start..=order.config.iterations)
            .into_par_iter()
            .map(|k| {
                let labeled = labeled_prefix(order, k, &self.bench.splits)?;
                self.scores(&labeled, xi)
            })
            .collect::<Result<Vec<_>>>()?;
        let (initial, rest) = if with_initial { (Some(scores[0]), &scores[1..]) } else { (None, &scores[..]) };
        let val = PerformanceCurve { values: rest.iter().map(|s| s[0]).collect(), initial: initial.map(|s| s[0]) };
        let test = PerformanceCurve { values: rest.iter().map(|s| s[1]).collect(), initial: initial.map(|s| s[1]) };
        Ok((val, test))
    }

    /// `tau(1..=K)` on one held-out set; each point is an independent
    /// from-scratch training on the labeled prefix.
    pub fn performance_curve(&self, order: &Order, xi: u64, set: EvalSet) -> Result<PerformanceCurve> {
        let (val, test) = self.curves(order, xi, false)?;
        Ok(match set {
            EvalSet::Val => val,
            EvalSet::Test => test,
        })
    }

    /// Validation quality, the search objective.
    pub fn quality_val(&self, order: &Order, xi: u64) -> Result<f64> {
        Ok(quality(&self.curves(order, xi, false)?.0))
    }

    /// Curves on both held-out sets (with `tau(0)`) and their qualities.
    pub fn evaluate_order(&self, order: &Order, xi: u64) -> Result<QualityRecord> {
        let (curve_val, curve_test) = self.curves(order, xi, true)?;
        Ok(QualityRecord {
            order: order.clone(),
            xi,
            q_val: quality(&curve_val),
            q_test: quality(&curve_test),
            curve_val,
            curve_test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_splits, SplitSpec, SyntheticSpec};

    fn splits() -> Splits {
        Splits { pool: (0..12).collect(), warm: vec![20, 21], modelsel: vec![30], val: vec![40], test: vec![50] }
    }

    #[test]
    fn prefix_arithmetic() {
        let cfg = ALConfig::new(2, 3);
        let s = splits();
        let order = Order::new(cfg, vec![9, 4, 7, 1, 5, 2], &s.pool).unwrap();
        assert_eq!(labeled_prefix(&order, 0, &s).unwrap(), vec![20, 21]);
        assert_eq!(labeled_prefix(&order, 2, &s).unwrap(), vec![1, 4, 7, 9, 20, 21]);
        assert_eq!(labeled_prefix(&order, 3, &s).unwrap().len(), 2 + 6);
        assert!(matches!(labeled_prefix(&order, 4, &s), Err(Error::PrefixOutOfRange { k: 4, max: 3 })));
    }

    #[test]
    fn order_validation() {
        let cfg = ALConfig::new(2, 2);
        let pool: Vec<usize> = (0..6).collect();
        assert!(Order::new(cfg, vec![0, 1, 2, 3], &pool).is_ok());
        assert!(Order::new(cfg, vec![0, 1, 2], &pool).is_err());
        assert!(Order::new(cfg, vec![0, 1, 2, 2], &pool).is_err());
        assert!(Order::new(cfg, vec![0, 1, 2, 9], &pool).is_err());
    }

    #[test]
    fn order_json_layout() {
        let order = Order::unchecked(ALConfig::new(2, 1), vec![3, 1]);
        assert_eq!(order.to_json().unwrap(), r#"{"config":{"B":2,"K":1},"indices":[3,1]}"#);
        assert_eq!(Order::from_json(&order.to_json().unwrap()).unwrap(), order);
    }

    #[test]
    fn quality_is_mean_over_iterations() {
        let q = quality(&PerformanceCurve { values: vec![0.5, 0.7, 0.9], initial: Some(0.0) });
        assert!((q - 0.7).abs() < 1e-12);
        assert_eq!(quality(&PerformanceCurve::new(vec![0.3; 5])), 0.3);
        assert_eq!(quality(&PerformanceCurve::new(vec![1.0; 12])), 1.0);
    }

    #[test]
    fn curve_csv() {
        let c = PerformanceCurve { values: vec![0.5, 0.75], initial: Some(0.25) };
        assert_eq!(c.to_csv(), "k,score\n0,0.25\n1,0.5\n2,0.75\n");
    }

    fn bench() -> Workbench {
        let data = Arc::new(generate_synthetic(&SyntheticSpec::balanced(3, 3, 1.5, 1.0, 200), 0).unwrap());
        let splits = make_splits(&data, &SplitSpec { pool: 30, warm: 6, modelsel: 10, val: 40, test: 40, shuffle_seed: 0 }).unwrap();
        Workbench::new(data, splits, LearnerSpec::Logistic, TrainConfig::with_batch_size(3), Metric::Accuracy).unwrap()
    }

    #[test]
    fn shared_prefix_gives_shared_curve_points() {
        let b = bench();
        let ev = Evaluator::uncached(b.clone());
        let cfg = ALConfig::new(3, 3);
        let p = &b.splits.pool;
        let a = Order::new(cfg, p[..9].to_vec(), p).unwrap();
        let mut other = p[..6].to_vec();
        other.extend_from_slice(&p[20..23]);
        let c = Order::new(cfg, other, p).unwrap();
        let ca = ev.performance_curve(&a, 1, EvalSet::Val).unwrap();
        let cc = ev.performance_curve(&c, 1, EvalSet::Val).unwrap();
        assert_eq!(ca.values[..2], cc.values[..2]);
        assert_eq!(ca, ev.performance_curve(&a, 1, EvalSet::Val).unwrap());
        assert!(ca.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn intra_batch_permutation_is_invisible() {
        let b = bench();
        let ev = Evaluator::uncached(b.clone());
        let cfg = ALConfig::new(3, 2);
        let p = &b.splits.pool;
        let a = Order::new(cfg, p[..6].to_vec(), p).unwrap();
        let permuted = Order::new(cfg, vec![p[2], p[0], p[1], p[5], p[3], p[4]], p).unwrap();
        let ra = ev.evaluate_order(&a, 3).unwrap();
        let rp = ev.evaluate_order(&permuted, 3).unwrap();
        assert_eq!(ra.curve_val, rp.curve_val);
        assert_eq!(ra.curve_test, rp.curve_test);
        assert_eq!(ra.q_val, quality(&ra.curve_val));
        assert!(ra.curve_val.initial.is_some());
    }
}
