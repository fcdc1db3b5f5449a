//! Distribution-matching regularization.
//!
//! Both wrappers keep a current bin (or label) distribution of the labeled
//! set, find the bin whose frequency falls furthest below a reference
//! distribution, and let the base strategy pick only among pool points in
//! that bin. Input matching (IDMR) bins features and counts pending
//! within-batch picks immediately; output matching (ODMR) bins predicted or
//! true labels and reveals each pick's true label before the next pick.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alcore::Workbench;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::heuristics::{AcquisitionState, BatchSelector};
use crate::rng::{rng_for, Stream};

const KMEANS_MAX_ITERATIONS: usize = 100;

/// How to build bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BinMethod {
    /// k-means in the space of the leading principal components.
    KmeansPca { components: usize },
    /// Equal-frequency cuts on one feature.
    FeatureQuantile { feature: usize },
    /// One bin per class label.
    Label,
}

impl Default for BinMethod {
    fn default() -> Self {
        BinMethod::KmeansPca { components: 2 }
    }
}

/// A fitted total map from examples to bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinFn {
    KmeansPca {
        mean: Vec<f64>,
        /// Row-major `components x d` projection.
        projection: Vec<Vec<f64>>,
        centroids: Vec<Vec<f64>>,
    },
    FeatureQuantile {
        feature: usize,
        /// Ascending cut points; bin = number of cuts `<= x`.
        cuts: Vec<f64>,
    },
    Label {
        num_classes: usize,
    },
}

impl BinFn {
    pub fn num_bins(&self) -> usize {
        match self {
            BinFn::KmeansPca { centroids, .. } => centroids.len(),
            BinFn::FeatureQuantile { cuts, .. } => cuts.len() + 1,
            BinFn::Label { num_classes } => *num_classes,
        }
    }

    /// Bin of dataset example `i`.
    pub fn assign(&self, data: &Dataset, i: usize) -> usize {
        self.assign_example(data.features(i), data.label(i))
    }

    /// Bin of a feature vector (the label is used only by label bins).
    /// Points outside the fitted range go to the nearest centroid or the
    /// outermost quantile bin.
    pub fn assign_example(&self, x: &[f64], label: usize) -> usize {
        match self {
            BinFn::KmeansPca { mean, projection, centroids } => {
                let z = project(x, mean, projection);
                nearest(&z, centroids)
            }
            BinFn::FeatureQuantile { feature, cuts } => cuts.iter().filter(|&&c| c <= x[*feature]).count(),
            BinFn::Label { num_classes } => label.min(num_classes - 1),
        }
    }
}

fn project(x: &[f64], mean: &[f64], projection: &[Vec<f64>]) -> Vec<f64> {
    projection
        .iter()
        .map(|axis| axis.iter().zip(x.iter().zip(mean)).map(|(a, (v, m))| a * (v - m)).sum())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid, lowest index on ties.
fn nearest(z: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(z, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Principal axes (as rows) of the rows of `points`, largest variance first.
/// Each axis is sign-normalized so its largest-magnitude entry is positive.
fn principal_axes(points: &[&[f64]], mean: &[f64], components: usize) -> Vec<Vec<f64>> {
    let d = mean.len();
    let n = points.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        for a in 0..d {
            let da = p[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (p[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(components.min(d))
        .map(|j| {
            let mut axis: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let pivot = axis.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if pivot < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
            axis
        })
        .collect()
}

/// Seeded k-means++ initialization followed by Lloyd iterations until the
/// assignment stops changing or the iteration cap is hit. Empty clusters
/// keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidBins(format!("{} points cannot form {k} clusters", points.len())));
    }
    let mut rng = rng_for(seed, Stream::Bins);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(centroids)
}

/// Fits bins on the examples in `indices` (typically the accessible inputs
/// `D^L_0 + D^U + D^M`).
pub fn fit_bins(data: &Dataset, indices: &[usize], method: BinMethod, num_bins: usize, seed: u64) -> Result<BinFn> {
    if num_bins == 0 {
        return Err(Error::InvalidBins("num_bins must be at least 1".into()));
    }
    if method != BinMethod::Label && indices.len() < num_bins {
        return Err(Error::InvalidBins(format!("{} points cannot fill {num_bins} bins", indices.len())));
    }
    match method {
        BinMethod::KmeansPca { components } => {
            if components == 0 {
                return Err(Error::InvalidBins("need at least one principal component".into()));
            }
            let rows: Vec<&[f64]> = indices.iter().map(|&i| data.features(i)).collect();
            let d = data.feature_dim();
            let mut mean = vec![0.0; d];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(r.iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
            let projection = principal_axes(&rows, &mean, components);
            let projected: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &mean, &projection)).collect();
            let centroids = kmeans(&projected, num_bins, seed)?;
            Ok(BinFn::KmeansPca { mean, projection, centroids })
        }
        BinMethod::FeatureQuantile { feature } => {
            if feature >= data.feature_dim() {
                return Err(Error::InvalidBins(format!("feature {feature} out of range")));
            }
            let mut values: Vec<f64> = indices.iter().map(|&i| data.features(i)[feature]).collect();
            values.sort_by(f64::total_cmp);
            let n = values.len();
            let cuts = (1..num_bins).map(|j| values[j * n / num_bins]).collect();
            Ok(BinFn::FeatureQuantile { feature, cuts })
        }
        BinMethod::Label => Ok(BinFn::Label { num_classes: data.num_classes() }),
    }
}

/// Bin counts with their normalized frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinDistribution {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

impl BinDistribution {
    /// Normalizes counts; all-zero counts give the uniform distribution.
    pub fn from_counts(counts: Vec<usize>) -> Self {
        let total: usize = counts.iter().sum();
        let frequencies = if total == 0 {
            vec![1.0 / counts.len().max(1) as f64; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self { counts, frequencies }
    }

    /// Counts with one pseudo-count added to every bin.
    pub fn smoothed(counts: &[usize]) -> Self {
        let plus_one: Vec<usize> = counts.iter().map(|c| c + 1).collect();
        let total: usize = plus_one.iter().sum();
        Self { counts: counts.to_vec(), frequencies: plus_one.iter().map(|&c| c as f64 / total as f64).collect() }
    }
}

/// Empirical bin distribution of `indices`.
pub fn bin_distribution(data: &Dataset, indices: &[usize], bin_fn: &BinFn) -> BinDistribution {
    let mut counts = vec![0; bin_fn.num_bins()];
    for &i in indices {
        counts[bin_fn.assign(data, i)] += 1;
    }
    BinDistribution::from_counts(counts)
}

/// Label counts of `indices`, optionally add-one smoothed.
pub fn label_distribution(data: &Dataset, indices: &[usize], add_one: bool) -> BinDistribution {
    let mut counts = vec![0; data.num_classes()];
    for &i in indices {
        counts[data.label(i)] += 1;
    }
    if add_one {
        BinDistribution::smoothed(&counts)
    } else {
        BinDistribution::from_counts(counts)
    }
}

/// Bins ordered by `current - reference`, most negative (largest deficit)
/// first; ties go to the lower bin id.
pub fn deficit_order(current: &[f64], reference: &[f64]) -> Vec<usize> {
    let mut bins: Vec<usize> = (0..reference.len()).collect();
    bins.sort_by(|&a, &b| (current[a] - reference[a]).total_cmp(&(current[b] - reference[b])).then(a.cmp(&b)));
    bins
}

/// Top-scoring candidate in the first deficit bin that has any candidate.
fn pick_in_deficit_bin(
    scores: &[(usize, f64)],
    available: &[usize],
    bin_of: impl Fn(usize) -> usize,
    deficits: &[usize],
) -> Result<usize> {
    for &bin in deficits {
        let best = scores
            .iter()
            .filter(|(i, _)| available.binary_search(i).is_ok() && bin_of(*i) == bin)
            .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(&(i, _)) = best {
            return Ok(i);
        }
    }
    Err(Error::EmptySet("pool"))
}

/// One IDMR pick: the base strategy's best point inside the bin with the
/// largest deficit of `labeled + pending` against `d_ref`, falling back to
/// the next deficit bin when a bin has no remaining points.
pub fn idmr_acquire(
    state: &AcquisitionState<'_>,
    scores: &[(usize, f64)],
    pending: &[usize],
    bin_fn: &BinFn,
    d_ref: &BinDistribution,
) -> Result<usize> {
    let available: Vec<usize> = state.remaining.iter().copied().filter(|i| !pending.contains(i)).collect();
    if available.is_empty() {
        return Err(Error::EmptySet("pool"));
    }
    let current: Vec<usize> = state.labeled.iter().chain(pending).copied().collect();
    let d_cur = bin_distribution(state.data, &current, bin_fn);
    let deficits = deficit_order(&d_cur.frequencies, &d_ref.frequencies);
    pick_in_deficit_bin(scores, &available, |i| bin_fn.assign(state.data, i), &deficits)
}

/// Input distribution-matching wrapper around any scoring strategy.
#[derive(Clone, Debug)]
pub struct IdmrSelector {
    pub bin_fn: BinFn,
    pub d_ref: BinDistribution,
}

impl IdmrSelector {
    /// Reference distribution over the accessible inputs
    /// `D^L_0 + D^U + D^M`.
    pub fn new(bench: &Workbench, bin_fn: BinFn) -> Self {
        let d_ref = bin_distribution(&bench.dataset, &accessible_inputs(bench), &bin_fn);
        Self { bin_fn, d_ref }
    }
}

/// `D^L_0 + D^U + D^M`, the inputs available without labels.
pub fn accessible_inputs(bench: &Workbench) -> Vec<usize> {
    let s = &bench.splits;
    s.warm.iter().chain(&s.pool).chain(&s.modelsel).copied().collect()
}

impl BatchSelector for IdmrSelector {
    fn select(&mut self, state: &AcquisitionState<'_>, scores: &[(usize, f64)], batch_size: usize) -> Result<Vec<usize>> {
        let mut pending = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let pick = idmr_acquire(state, scores, &pending, &self.bin_fn, &self.d_ref)?;
            pending.push(pick);
        }
        Ok(pending)
    }
}

/// Where the ODMR reference label distribution comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Labels of `D^L_0 + D^M`.
    Accessible,
    /// Labels of `D^T`.
    Test,
}

/// Which label decides a pool point's slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Predicted,
    Groundtruth,
}

/// One of the four ODMR variants; only accessible + predicted uses no
/// privileged information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OdmrVariant {
    pub reference: ReferenceSource,
    pub labels: LabelSource,
}

impl OdmrVariant {
    pub const ALL: [OdmrVariant; 4] = [
        OdmrVariant { reference: ReferenceSource::Accessible, labels: LabelSource::Predicted },
        OdmrVariant { reference: ReferenceSource::Accessible, labels: LabelSource::Groundtruth },
        OdmrVariant { reference: ReferenceSource::Test, labels: LabelSource::Predicted },
        OdmrVariant { reference: ReferenceSource::Test, labels: LabelSource::Groundtruth },
    ];

    /// Add-one smoothed reference label distribution.
    pub fn reference_distribution(&self, bench: &Workbench) -> BinDistribution {
        let s = &bench.splits;
        let idx: Vec<usize> = match self.reference {
            ReferenceSource::Accessible => s.warm.iter().chain(&s.modelsel).copied().collect(),
            ReferenceSource::Test => s.test.clone(),
        };
        label_distribution(&bench.dataset, &idx, true)
    }
}

/// One ODMR pick. `pending` holds earlier picks of this round, whose true
/// labels count toward the current distribution.
pub fn odmr_acquire(
    state: &AcquisitionState<'_>,
    scores: &[(usize, f64)],
    pending: &[usize],
    variant: OdmrVariant,
    d_ref: &BinDistribution,
) -> Result<usize> {
    let available: Vec<usize> = state.remaining.iter().copied().filter(|i| !pending.contains(i)).collect();
    if available.is_empty() {
        return Err(Error::EmptySet("pool"));
    }
    let current: Vec<usize> = state.labeled.iter().chain(pending).copied().collect();
    let d_cur = label_distribution(state.data, &current, false);
    let deficits = deficit_order(&d_cur.frequencies, &d_ref.frequencies);
    match variant.labels {
        LabelSource::Groundtruth => pick_in_deficit_bin(scores, &available, |i| state.data.label(i), &deficits),
        LabelSource::Predicted => {
            let model = state
                .model
                .ok_or_else(|| Error::InvalidAcquisition("predicted-label ODMR needs a model".into()))?;
            let predicted: Vec<(usize, usize)> = available
                .iter()
                .map(|&i| Ok((i, model.predict(state.data.features(i))?)))
                .collect::<Result<_>>()?;
            let label_of = |i: usize| predicted[predicted.binary_search_by_key(&i, |p| p.0).unwrap()].1;
            pick_in_deficit_bin(scores, &available, label_of, &deficits)
        }
    }
}

/// Output distribution-matching wrapper. The model is retrained per round;
/// labels are revealed one pick at a time.
#[derive(Clone, Debug)]
pub struct OdmrSelector {
    pub variant: OdmrVariant,
    pub d_ref: BinDistribution,
}

impl OdmrSelector {
    pub fn new(bench: &Workbench, variant: OdmrVariant) -> Self {
        Self { variant, d_ref: variant.reference_distribution(bench) }
    }
}

impl BatchSelector for OdmrSelector {
    fn needs_model(&self) -> bool {
        self.variant.labels == LabelSource::Predicted
    }

    fn select(&mut self, state: &AcquisitionState<'_>, scores: &[(usize, f64)], batch_size: usize) -> Result<Vec<usize>> {
        let mut pending = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let pick = odmr_acquire(state, scores, &pending, self.variant, &self.d_ref)?;
            pending.push(pick);
        }
        Ok(pending)
    }
}
