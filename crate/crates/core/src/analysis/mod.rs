//! Behavioral analyses of searched and heuristic orders.
//!
//! Every number here is derived from persisted orders through
//! [`Evaluator::evaluate_order`]; this module does no training of its own.

mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::alcore::{labeled_prefix, Evaluator, Order, PerformanceCurve, ScoreCache, Workbench};
use crate::dataset::Dataset;
use crate::dmr::{bin_distribution, label_distribution, BinDistribution, BinFn};
use crate::error::{Error, Result};
use crate::learner::LearnerSpec;

pub use report::{emit_report, render_svg, Report, ReportFormat};

/// Test-quality matrix: `cells[r][c]` is the quality under row `r`'s
/// trainer of column `c`'s order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    /// Per-cell gap: diagonal minus cell for seed matrices, cell minus the
    /// row's random baseline for transfer matrices.
    pub gaps: Vec<Vec<f64>>,
    /// Random-order baseline per row, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<f64>>,
}

impl QualityMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.cells.len().min(self.col_labels.len());
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.cells[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().filter(move |(c, _)| *c != r).map(|(_, &v)| v))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Evaluates every seed's searched order under every seed's trainer.
/// Rows are target seeds, columns source seeds.
pub fn seed_mismatch_matrix(evaluator: &Evaluator, orders: &BTreeMap<u64, Order>, seeds: &[u64]) -> Result<QualityMatrix> {
    for xi in seeds {
        if !orders.contains_key(xi) {
            return Err(Error::MissingInput(format!("no searched order for seed {xi}")));
        }
    }
    let mut cells = Vec::with_capacity(seeds.len());
    for &target in seeds {
        let row = seeds
            .iter()
            .map(|source| Ok(evaluator.evaluate_order(&orders[source], target)?.q_test))
            .collect::<Result<Vec<f64>>>()?;
        cells.push(row);
    }
    let gaps = cells.iter().enumerate().map(|(r, row)| row.iter().map(|v| row[r] - v).collect()).collect();
    let labels: Vec<String> = seeds.iter().map(|s| format!("xi={s}")).collect();
    Ok(QualityMatrix { row_labels: labels.clone(), col_labels: labels, cells, gaps, baseline: None })
}

/// A named architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub learner: LearnerSpec,
}

/// Evaluates each source architecture's order under each target
/// architecture. The baseline of a target row is the mean test quality of
/// `random_orders` under that target and does not depend on any source.
pub fn transfer_matrix(
    bench: &Workbench,
    cache: &std::sync::Arc<ScoreCache>,
    sources: &[(Architecture, Order)],
    targets: &[Architecture],
    random_orders: &[Order],
    xi: u64,
) -> Result<QualityMatrix> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::MissingInput("transfer needs at least one source and one target".into()));
    }
    if random_orders.is_empty() {
        return Err(Error::MissingInput("transfer needs random baseline orders".into()));
    }
    let mut cells = Vec::new();
    let mut baseline = Vec::new();
    for target in targets {
        let ev = Evaluator::cached(bench.with_learner(target.learner.clone())?, cache.clone());
        let row = sources.iter().map(|(_, order)| Ok(ev.evaluate_order(order, xi)?.q_test)).collect::<Result<Vec<f64>>>()?;
        let base = random_orders.iter().map(|o| Ok(ev.evaluate_order(o, xi)?.q_test)).collect::<Result<Vec<f64>>>()?;
        baseline.push(base.iter().sum::<f64>() / base.len() as f64);
        cells.push(row);
    }
    let gaps = cells.iter().zip(&baseline).map(|(row, b)| row.iter().map(|v| v - b).collect()).collect();
    Ok(QualityMatrix {
        row_labels: targets.iter().map(|t| t.name.clone()).collect(),
        col_labels: sources.iter().map(|(s, _)| s.name.clone()).collect(),
        cells,
        gaps,
        baseline: Some(baseline),
    })
}

/// Points shared by two orders with their 1-based ranks in each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub shared_count: usize,
    /// `(pool index, rank in a, rank in b)`, by rank in a.
    pub shared: Vec<(usize, usize, usize)>,
}

pub fn order_overlap(a: &Order, b: &Order) -> Result<OverlapReport> {
    if a.config != b.config {
        return Err(Error::ConfigMismatch(format!("{:?} vs {:?}", a.config, b.config)));
    }
    let rank_b: HashMap<usize, usize> = b.indices.iter().enumerate().map(|(r, &i)| (i, r + 1)).collect();
    let shared: Vec<(usize, usize, usize)> = a
        .indices
        .iter()
        .enumerate()
        .filter_map(|(r, i)| rank_b.get(i).map(|&rb| (*i, r + 1, rb)))
        .collect();
    Ok(OverlapReport { shared_count: shared.len(), shared })
}

/// What to count in a distribution trace.
#[derive(Clone, Debug)]
pub enum Labeler {
    Label,
    Bins(BinFn),
}

impl Labeler {
    fn distribution(&self, data: &Dataset, idx: &[usize]) -> BinDistribution {
        match self {
            Labeler::Label => label_distribution(data, idx, false),
            Labeler::Bins(b) => bin_distribution(data, idx, b),
        }
    }
}

/// Cumulative label (or bin) counts of `D^L_k` for `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionTrace {
    pub counts: Vec<Vec<usize>>,
    /// Distribution of the test set.
    pub reference: BinDistribution,
}

impl DistributionTrace {
    pub fn frequencies(&self, k: usize) -> Vec<f64> {
        BinDistribution::from_counts(self.counts[k].clone()).frequencies
    }

    /// Total-variation distance between `D^L_k` and the reference.
    pub fn tv_distance(&self, k: usize) -> f64 {
        total_variation(&self.frequencies(k), &self.reference.frequencies)
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn distribution_trace(order: &Order, bench: &Workbench, labeler: &Labeler) -> Result<DistributionTrace> {
    order.validate(&bench.splits.pool)?;
    let counts = (0..=order.config.iterations)
        .map(|k| Ok(labeler.distribution(&bench.dataset, &labeled_prefix(order, k, &bench.splits)?).counts))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributionTrace { counts, reference: labeler.distribution(&bench.dataset, &bench.splits.test) })
}

/// A pair of curves where each strictly beats the other somewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub first: usize,
    pub second: usize,
    /// 1-based iteration where `first` is strictly above `second`.
    pub first_ahead_at: usize,
    /// 1-based iteration where `second` is strictly above `first`.
    pub second_ahead_at: usize,
}

/// Strict crossing between two curves, earliest iterations reported.
pub fn curves_cross(a: &PerformanceCurve, b: &PerformanceCurve) -> Option<(usize, usize)> {
    let a_ahead = a.values.iter().zip(&b.values).position(|(x, y)| x > y)?;
    let b_ahead = a.values.iter().zip(&b.values).position(|(x, y)| x < y)?;
    Some((a_ahead + 1, b_ahead + 1))
}

/// First crossing pair in scan order `(0,1), (0,2), ..., (1,2), ...`.
pub fn find_crossing(curves: &[PerformanceCurve]) -> Option<Crossing> {
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            if let Some((ka, kb)) = curves_cross(&curves[i], &curves[j]) {
                return Some(Crossing { first: i, second: j, first_ahead_at: ka, second_ahead_at: kb });
            }
        }
    }
    None
}

/// Result of the crossing scan over random orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingDemo {
    pub orders: Vec<Order>,
    pub curves: Vec<PerformanceCurve>,
    pub crossing: Option<Crossing>,
}

/// Evaluates `orders` under `xi` and scans their test curves for a strict
/// crossing.
pub fn crossing_curves_demo(evaluator: &Evaluator, orders: Vec<Order>, xi: u64) -> Result<CrossingDemo> {
    if orders.len() < 2 {
        return Err(Error::MissingInput("need at least two orders".into()));
    }
    let curves = orders.iter().map(|o| Ok(evaluator.evaluate_order(o, xi)?.curve_test)).collect::<Result<Vec<_>>>()?;
    let crossing = find_crossing(&curves);
    Ok(CrossingDemo { orders, curves, crossing })
}

/// Paired comparison of per-seed values `a` against `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub differences: Vec<f64>,
    pub mean_difference: f64,
    /// Seeds where `a` is strictly greater.
    pub wins: usize,
}

pub fn paired_summary(a: &[f64], b: &[f64]) -> PairedSummary {
    let differences: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_difference = if differences.is_empty() { 0.0 } else { differences.iter().sum::<f64>() / differences.len() as f64 };
    let wins = differences.iter().filter(|d| **d > 0.0).count();
    PairedSummary { differences, mean_difference, wins }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alcore::ALConfig;

    #[test]
    fn overlap_cases() {
        let cfg = ALConfig::new(20, 8);
        let a = Order::unchecked(cfg, (0..160).collect());
        assert_eq!(order_overlap(&a, &a).unwrap().shared_count, 160);
        let disjoint = Order::unchecked(cfg, (1000..1160).collect());
        assert_eq!(order_overlap(&a, &disjoint).unwrap().shared_count, 0);
        let mut first_batch: Vec<usize> = (0..20).collect();
        first_batch.extend(2000..2140);
        let b = Order::unchecked(cfg, first_batch);
        let r = order_overlap(&a, &b).unwrap();
        assert_eq!(r.shared_count, 20);
        assert!(r.shared.iter().enumerate().all(|(n, &(_, ra, rb))| ra == n + 1 && rb == n + 1));
        let other = Order::unchecked(ALConfig::new(10, 16), (0..160).collect());
        assert!(order_overlap(&a, &other).is_err());
    }

    #[test]
    fn crossing_definition() {
        let a = PerformanceCurve::new(vec![0.5, 0.9]);
        let b = PerformanceCurve::new(vec![0.6, 0.8]);
        assert_eq!(curves_cross(&a, &a), None);
        assert_eq!(curves_cross(&a, &b), Some((2, 1)));
        let found = find_crossing(&[a.clone(), b]).unwrap();
        assert_eq!((found.first_ahead_at, found.second_ahead_at), (2, 1));
        // weak dominance is not a crossing
        let c = PerformanceCurve::new(vec![0.5, 0.95]);
        assert_eq!(curves_cross(&a, &c), None);
        assert_eq!(find_crossing(&[a.clone(), a]), None);
    }

    #[test]
    fn matrix_means() {
        let m = QualityMatrix {
            row_labels: vec!["a".into(), "b".into()],
            col_labels: vec!["a".into(), "b".into()],
            cells: vec![vec![0.8, 0.6], vec![0.5, 0.9]],
            gaps: vec![vec![0.0, 0.2], vec![0.4, 0.0]],
            baseline: None,
        };
        assert!((m.diagonal_mean() - 0.85).abs() < 1e-12);
        assert!((m.off_diagonal_mean() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn paired() {
        let s = paired_summary(&[0.5, 0.7, 0.6], &[0.4, 0.7, 0.7]);
        assert_eq!(s.wins, 1);
        assert!((s.mean_difference - 0.0).abs() < 1e-12);
    }
}
