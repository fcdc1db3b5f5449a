//! Behavioral properties on the desk-scale reference task.

use std::collections::HashSet;
use std::sync::Arc;

use oracle_al::alcore::{ALConfig, Evaluator, Order, ScoreCache, Workbench};
use oracle_al::analysis::{distribution_trace, transfer_matrix, Architecture, Labeler};
use oracle_al::dataset::{generate_synthetic, make_splits, SplitSpec, SyntheticSpec};
use oracle_al::dmr::{OdmrSelector, OdmrVariant};
use oracle_al::heuristics::{run_acquisition, run_acquisition_with, AcquisitionStrategy};
use oracle_al::learner::{LearnerSpec, Metric, TrainConfig};
use oracle_al::sasearch::{greedy_refine, initial_order, sa_search, SAConfig, ValidationQuality};
use oracle_al::rng::{rng_for, Stream};

fn al() -> ALConfig {
    ALConfig::new(5, 4)
}

fn bench() -> Workbench {
    let data = Arc::new(generate_synthetic(&SyntheticSpec::reference(), 0).unwrap());
    let split = SplitSpec { pool: 60, warm: 10, modelsel: 20, val: 200, test: 200, shuffle_seed: 0 };
    let splits = make_splits(&data, &split).unwrap();
    Workbench::new(data, splits, LearnerSpec::Logistic, TrainConfig::with_batch_size(5), Metric::Accuracy).unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn validation_quality_generalizes_to_test() {
    let ev = Evaluator::cached(bench(), Arc::new(ScoreCache::in_memory()));
    let (mut qv, mut qt) = (vec![], vec![]);
    for seed in 0..10 {
        let obj = ValidationQuality { evaluator: &ev, xi: 0 };
        let cfg = SAConfig { anneal_steps: 300, greedy_steps: 0, gamma: 0.1, search_seed: seed };
        let trace = sa_search(&obj, &ev.workbench().splits.pool, al(), cfg).unwrap();
        let rec = ev.evaluate_order(&trace.best_order, 0).unwrap();
        assert_eq!(rec.q_val.to_bits(), trace.best_quality.to_bits());
        qv.push(rec.q_val);
        qt.push(rec.q_test);
    }
    let rho = pearson(&ranks(&qv), &ranks(&qt));
    assert!(rho > 0.0, "rank correlation {rho}");
}

#[test]
fn searched_order_tracks_test_label_distribution_better_than_max_entropy() {
    let b = bench();
    let ev = Evaluator::cached(b.clone(), Arc::new(ScoreCache::in_memory()));
    let obj = ValidationQuality { evaluator: &ev, xi: 0 };
    let cfg = SAConfig { anneal_steps: 2000, greedy_steps: 200, gamma: 0.1, search_seed: 0 };
    let best = sa_search(&obj, &b.splits.pool, al(), cfg).unwrap().best_order;
    let entropy = run_acquisition(&AcquisitionStrategy::max_entropy(), &b, 0, al()).unwrap();
    let tv = |o: &Order| distribution_trace(o, &b, &Labeler::Label).unwrap().tv_distance(4);
    assert!(tv(&entropy) > tv(&best), "max-entropy {} vs searched {}", tv(&entropy), tv(&best));
}

#[test]
fn transfer_identity_and_baseline_independence() {
    let b = bench();
    let cache = Arc::new(ScoreCache::in_memory());
    let randoms: Vec<Order> =
        (0..4).map(|z| run_acquisition(&AcquisitionStrategy::random(z), &b, 0, al()).unwrap()).collect();
    let logistic = Architecture { name: "logistic".into(), learner: LearnerSpec::Logistic };
    let mlp = Architecture { name: "mlp".into(), learner: LearnerSpec::mlp(&[8], 0.0) };
    let own = randoms[0].clone();
    let other = randoms[1].clone();
    let one = transfer_matrix(&b, &cache, &[(logistic.clone(), own.clone())], &[logistic.clone(), mlp.clone()], &randoms, 3).unwrap();
    let direct = Evaluator::uncached(b.clone()).evaluate_order(&own, 3).unwrap().q_test;
    assert_eq!(one.cells[0][0].to_bits(), direct.to_bits());
    let two = transfer_matrix(&b, &cache, &[(mlp.clone(), other), (logistic.clone(), own)], &[logistic, mlp], &randoms, 3).unwrap();
    assert_eq!(one.baseline, two.baseline);
    assert_ne!(one.baseline.as_ref().unwrap()[0], one.baseline.as_ref().unwrap()[1]);
    assert_eq!(two.cells[0][1].to_bits(), direct.to_bits());
}

#[test]
fn odmr_variants_return_valid_orders() {
    let b = bench();
    for variant in OdmrVariant::ALL {
        for strategy in [AcquisitionStrategy::max_entropy(), AcquisitionStrategy::random(2)] {
            let mut selector = OdmrSelector::new(&b, variant);
            let order = run_acquisition_with(&strategy, &b, 1, al(), &mut selector).unwrap();
            order.validate(&b.splits.pool).unwrap();
            assert_eq!(order.indices.iter().collect::<HashSet<_>>().len(), 20);
        }
    }
}

#[test]
fn greedy_local_optimum_bounded_by_enumeration() {
    // q = mean over prefixes of summed point values; optimum takes the best
    // points first in descending order
    let values = [0.3, -0.2, 0.9, 0.1, -0.7, 0.5, 0.0, 0.4];
    let f = |o: &Order| -> oracle_al::Result<f64> {
        let k_max = o.config.iterations;
        let b = o.config.batch_size;
        Ok((1..=k_max).map(|k| o.indices[..k * b].iter().map(|&i| values[i]).sum::<f64>()).sum::<f64>() / k_max as f64)
    };
    let pool: Vec<usize> = (0..8).collect();
    let cfg = ALConfig::new(2, 2);
    let mut sorted = pool.clone();
    sorted.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let optimum = f(&Order::unchecked(cfg, sorted[..4].to_vec())).unwrap();
    for seed in 0..5 {
        let start = initial_order(&pool, cfg, &mut rng_for(seed, Stream::Search)).unwrap();
        let q0 = f(&start).unwrap();
        let (order, q) = greedy_refine(&f, &pool, start, q0, 500, &mut rng_for(seed + 100, Stream::Search)).unwrap();
        order.validate(&pool).unwrap();
        assert!(q >= q0 && q <= optimum + 1e-12);
    }
}
