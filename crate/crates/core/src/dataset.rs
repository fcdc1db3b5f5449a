//! Datasets, ingestion and the five-way experiment split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A single labeled example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// An in-memory classification dataset.
///
/// Features are stored row-major in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_dim: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        feature_dim: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidSynthetic(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidSynthetic("feature dimension must be positive".into()));
        }
        let mut features = Vec::with_capacity(examples.len() * feature_dim);
        let mut labels = Vec::with_capacity(examples.len());
        for (i, ex) in examples.into_iter().enumerate() {
            if ex.features.len() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, got: ex.features.len() });
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidSynthetic(format!(
                    "example {i} has label {} but only {num_classes} classes",
                    ex.label
                )));
            }
            features.extend_from_slice(&ex.features);
            labels.push(ex.label);
        }
        Ok(Self { features, labels, num_classes, feature_dim, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> Example {
        Example { features: self.features(i).to_vec(), label: self.labels[i] }
    }

    /// Content hash over shape, labels and the exact feature bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.feature_dim as u64).to_le_bytes());
        h.update((self.labels.len() as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &f in &self.features {
            h.update(f.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Keeps the first `max` examples after a seeded shuffle. Returns the
    /// dataset unchanged when it already fits.
    pub fn subsample(self, max: usize, seed: u64) -> Dataset {
        if self.len() <= max {
            return self;
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, Stream::Subsample));
        idx.truncate(max);
        let d = self.feature_dim;
        let mut features = Vec::with_capacity(max * d);
        let mut labels = Vec::with_capacity(max);
        for &i in &idx {
            features.extend_from_slice(&self.features[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            feature_dim: d,
            provenance: format!("{} [subsample {max} seed {seed}]", self.provenance),
        }
    }
}

/// Gaussian mixture with one isotropic component per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_priors: Vec<f64>,
    /// One mean vector per class.
    pub cluster_means: Vec<Vec<f64>>,
    /// One standard deviation per class.
    pub cluster_scales: Vec<f64>,
    pub n: usize,
}

impl SyntheticSpec {
    /// Balanced classes with means on scaled coordinate axes.
    pub fn balanced(num_classes: usize, feature_dim: usize, separation: f64, scale: f64, n: usize) -> Self {
        let cluster_means = (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c % feature_dim] = separation * if (c / feature_dim).is_multiple_of(2) { 1.0 } else { -1.0 };
                m
            })
            .collect();
        Self {
            num_classes,
            feature_dim,
            class_priors: vec![1.0 / num_classes as f64; num_classes],
            cluster_means,
            cluster_scales: vec![scale; num_classes],
            n,
        }
    }

    /// The imbalanced four-class, ten-dimensional mixture used as the
    /// desk-scale reference task.
    pub fn reference() -> Self {
        let mut spec = Self::balanced(4, 10, 1.6, 1.0, 1000);
        spec.class_priors = vec![0.5, 0.25, 0.15, 0.10];
        spec
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthetic(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.class_priors.len() != self.num_classes
            || self.cluster_means.len() != self.num_classes
            || self.cluster_scales.len() != self.num_classes
        {
            return bad("priors, means and scales need one entry per class".into());
        }
        if self.class_priors.iter().any(|&p| p.is_nan() || p < 0.0) {
            return bad("priors must be non-negative".into());
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {total}, not 1"));
        }
        if self.cluster_means.iter().any(|m| m.len() != self.feature_dim) {
            return bad("every cluster mean must have feature_dim entries".into());
        }
        if self.cluster_scales.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return bad("scales must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Draws `spec.n` examples from the mixture. Bit-identical for identical
/// `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_for(seed, Stream::Synthetic);
    let mut examples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let label = sample_class(&spec.class_priors, rng.random::<f64>());
        let mean = &spec.cluster_means[label];
        let scale = spec.cluster_scales[label];
        let features = mean
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + scale * z
            })
            .collect();
        examples.push(Example { features, label });
    }
    Dataset::new(
        examples,
        spec.num_classes,
        spec.feature_dim,
        format!("synthetic gaussian mixture C={} d={} n={} seed={seed}", spec.num_classes, spec.feature_dim, spec.n),
    )
}

fn sample_class(priors: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = c;
        if u < acc {
            return c;
        }
    }
    last
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx { path: path.to_owned(), reason: "truncated header".into() })
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let magic = read_be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            path: images_path.to_owned(),
            reason: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let magic = read_be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            path: labels_path.to_owned(),
            reason: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }

    let n_images = read_be_u32(&images, 4, images_path)? as usize;
    let rows = read_be_u32(&images, 8, images_path)? as usize;
    let cols = read_be_u32(&images, 12, images_path)? as usize;
    let n_labels = read_be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch { images: n_images, labels: n_labels });
    }
    let dim = rows * cols;
    let pixels = images.get(16..16 + n_images * dim).ok_or_else(|| Error::Idx {
        path: images_path.to_owned(),
        reason: format!("truncated: expected {} pixel bytes", n_images * dim),
    })?;
    let label_bytes = labels.get(8..8 + n_labels).ok_or_else(|| Error::Idx {
        path: labels_path.to_owned(),
        reason: format!("truncated: expected {n_labels} label bytes"),
    })?;

    let num_classes = label_bytes.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    let examples = pixels
        .chunks_exact(dim.max(1))
        .zip(label_bytes)
        .map(|(px, &l)| Example {
            features: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: l as usize,
        })
        .collect();
    Dataset::new(examples, num_classes, dim, format!("idx {}", images_path.display()))
}

/// Reads a CSV file with header `label,f0,f1,...`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Csv(format!("{}: header must be `label,f0,f1,...`", path.display())));
    }
    let dim = headers.len() - 1;
    let mut examples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let parse_err = |col: usize| Error::Csv(format!("{}: row {} column {col} is not a number", path.display(), row + 1));
        let label = record.get(0).and_then(|s| s.trim().parse::<usize>().ok()).ok_or_else(|| parse_err(0))?;
        let features = (1..=dim)
            .map(|c| record.get(c).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| parse_err(c)))
            .collect::<Result<Vec<_>>>()?;
        examples.push(Example { features, label });
    }
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(2).max(2);
    Dataset::new(examples, num_classes, dim, format!("csv {}", path.display()))
}

/// Requested sizes of the five experiment sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub pool: usize,
    pub warm: usize,
    pub modelsel: usize,
    pub val: usize,
    pub test: usize,
    pub shuffle_seed: u64,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.pool + self.warm + self.modelsel + self.val + self.test
    }
}

/// The five disjoint index sets of one experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    /// Unlabeled pool D^U.
    pub pool: Vec<usize>,
    /// Warm-start labeled set D^L_0.
    pub warm: Vec<usize>,
    /// Model-selection set D^M.
    pub modelsel: Vec<usize>,
    /// Validation set D^V.
    pub val: Vec<usize>,
    /// Test set D^T.
    pub test: Vec<usize>,
}

impl Splits {
    pub fn sets(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("pool", &self.pool),
            ("warm", &self.warm),
            ("modelsel", &self.modelsel),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

/// Shuffles all indices with the split stream and cuts consecutive segments
/// for pool, warm, model-selection, validation and test, in that order.
/// Leftover indices are discarded. No stratification.
pub fn make_splits(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let requested = spec.total();
    if requested > dataset.len() {
        return Err(Error::SplitTooLarge { requested, available: dataset.len() });
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng_for(spec.shuffle_seed, Stream::Split));
    let mut rest = idx.as_slice();
    let mut cut = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    Ok(Splits {
        pool: cut(spec.pool),
        warm: cut(spec.warm),
        modelsel: cut(spec.modelsel),
        val: cut(spec.val),
        test: cut(spec.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn binary(c: usize, priors: Vec<f64>, n: usize) -> SyntheticSpec {
        let mut s = SyntheticSpec::balanced(c, 2, 2.0, 1.0, n);
        s.class_priors = priors;
        s
    }

    #[test]
    fn degenerate_prior_yields_single_class() {
        let ds = generate_synthetic(&binary(2, vec![1.0, 0.0], 10), 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn generation_is_bit_identical() {
        let spec = SyntheticSpec::balanced(3, 2, 2.0, 1.0, 300);
        let a = generate_synthetic(&spec, 1).unwrap();
        let b = generate_synthetic(&spec, 1).unwrap();
        let bits = |d: &Dataset| (0..d.len()).flat_map(|i| d.features(i).iter().map(|f| f.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    /// Exact two-sided binomial interval holding at least 99.99% mass.
    fn binomial_interval(n: u64, p: f64, mass: f64) -> (u64, u64) {
        let mut pmf = vec![0.0f64; n as usize + 1];
        // log-space pmf
        let ln_fact: Vec<f64> = (0..=n).scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        }).collect();
        for k in 0..=n {
            let lp = ln_fact[n as usize] - ln_fact[k as usize] - ln_fact[(n - k) as usize]
                + k as f64 * p.ln()
                + (n - k) as f64 * (1.0 - p).ln();
            pmf[k as usize] = lp.exp();
        }
        let tail = (1.0 - mass) / 2.0;
        let mut lo = 0;
        let mut acc = 0.0;
        while acc + pmf[lo] < tail {
            acc += pmf[lo];
            lo += 1;
        }
        let mut hi = n as usize;
        acc = 0.0;
        while acc + pmf[hi] < tail {
            acc += pmf[hi];
            hi -= 1;
        }
        (lo as u64, hi as u64)
    }

    #[test]
    fn class_frequency_matches_prior() {
        let (lo, hi) = binomial_interval(1000, 0.1, 0.9999);
        assert!(lo >= 60 && hi <= 140, "oracle interval [{lo},{hi}]");
        let ds = generate_synthetic(&binary(2, vec![0.9, 0.1], 1000), 3).unwrap();
        let ones = ds.labels().iter().filter(|&&l| l == 1).count() as u64;
        assert!((lo..=hi).contains(&ones), "class-1 count {ones} outside [{lo},{hi}]");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&binary(2, vec![0.7, 0.7], 10), 0).is_err());
        let mut s = binary(2, vec![0.5, 0.5], 10);
        s.feature_dim = 0;
        assert!(generate_synthetic(&s, 0).is_err());
        s = binary(2, vec![0.5, 0.5], 0);
        assert!(generate_synthetic(&s, 0).is_err());
    }

    fn write_idx(dir: &Path, n_img: u32, n_lab: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        let mut f = fs::File::create(&ip).unwrap();
        for v in [IDX_IMAGES_MAGIC, n_img, rows, cols] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        let px: Vec<u8> = (0..(n_img * rows * cols) as usize).map(&fill).collect();
        f.write_all(&px).unwrap();
        let mut f = fs::File::create(&lp).unwrap();
        for v in [IDX_LABELS_MAGIC, n_lab] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        let labels: Vec<u8> = (0..n_lab).map(|i| (i % 10) as u8).collect();
        f.write_all(&labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 10, 10, 28, 28, |i| if i % 2 == 0 { 255 } else { 0 });
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.features(0)[0], 1.0);
        assert_eq!(ds.features(0)[1], 0.0);
        assert_eq!(ds.label(3), 3);
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 10, 9, 28, 28, |_| 0);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 10, labels: 9 })));
    }

    #[test]
    fn idx_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 2, 2, 2, 2, |_| 7);
        // swapped files → magic mismatch
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Idx { .. })));
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })));
    }

    #[test]
    fn csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "label,f0,f1\n0,1.5,2\n2,-1,0.25\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.features(1), &[-1.0, 0.25]);
        fs::write(&p, "y,f0\n0,1\n").unwrap();
        assert!(load_csv(&p).is_err());
    }

    fn assert_disjoint(s: &Splits) {
        let mut seen = HashSet::new();
        for (_, set) in s.sets() {
            for &i in set {
                assert!(seen.insert(i), "index {i} appears twice");
            }
        }
    }

    #[test]
    fn table_sized_splits() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(10, 4, 2.0, 1.0, 10_200), 0).unwrap();
        let spec = SplitSpec { pool: 2000, warm: 50, modelsel: 150, val: 4000, test: 4000, shuffle_seed: 1 };
        let s = make_splits(&ds, &spec).unwrap();
        assert_eq!(
            [s.pool.len(), s.warm.len(), s.modelsel.len(), s.val.len(), s.test.len()],
            [2000, 50, 150, 4000, 4000]
        );
        assert_disjoint(&s);
    }

    #[test]
    fn exact_partition_and_determinism() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(3, 2, 2.0, 1.0, 50), 0).unwrap();
        let spec = SplitSpec { pool: 20, warm: 5, modelsel: 5, val: 10, test: 10, shuffle_seed: 4 };
        let s = make_splits(&ds, &spec).unwrap();
        let mut all: Vec<usize> = s.sets().iter().flat_map(|(_, v)| v.iter().copied()).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(s, make_splits(&ds, &spec).unwrap());

        let warm_sets: HashSet<Vec<usize>> = (0..20)
            .map(|seed| make_splits(&ds, &SplitSpec { shuffle_seed: seed, ..spec }).unwrap().warm)
            .collect();
        assert!(warm_sets.len() > 1);
    }

    #[test]
    fn oversized_split_rejected() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(2, 2, 2.0, 1.0, 10), 0).unwrap();
        let spec = SplitSpec { pool: 5, warm: 5, modelsel: 1, val: 0, test: 0, shuffle_seed: 0 };
        assert!(matches!(make_splits(&ds, &spec), Err(Error::SplitTooLarge { requested: 11, available: 10 })));
    }

    #[test]
    fn warm_sets_are_not_stratified() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(10, 4, 2.0, 1.0, 1000), 0).unwrap();
        let missing = (0..1000u64).any(|seed| {
            let spec = SplitSpec { pool: 0, warm: 50, modelsel: 0, val: 0, test: 0, shuffle_seed: seed };
            let s = make_splits(&ds, &spec).unwrap();
            let classes: HashSet<usize> = s.warm.iter().map(|&i| ds.label(i)).collect();
            classes.len() < 10
        });
        assert!(missing);
    }

    #[test]
    fn subsample_is_deterministic() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(3, 2, 2.0, 1.0, 100), 0).unwrap();
        let a = ds.clone().subsample(30, 5);
        let b = ds.clone().subsample(30, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(ds.clone().subsample(500, 5).len(), 100);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn splits_are_disjoint(sizes in proptest::collection::vec(0usize..20, 5), seed in any::<u64>()) {
                let ds = generate_synthetic(&SyntheticSpec::balanced(2, 1, 1.0, 1.0, 100), 0).unwrap();
                let spec = SplitSpec { pool: sizes[0], warm: sizes[1], modelsel: sizes[2], val: sizes[3], test: sizes[4], shuffle_seed: seed };
                let s = make_splits(&ds, &spec).unwrap();
                assert_disjoint(&s);
                prop_assert_eq!(s.pool.len(), sizes[0]);
                prop_assert_eq!(s.test.len(), sizes[4]);
            }
        }
    }
}
