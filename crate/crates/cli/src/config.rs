//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oracle_al::dataset::{SplitSpec, SyntheticSpec};
use oracle_al::dmr::{BinMethod, LabelSource, OdmrVariant, ReferenceSource};
use oracle_al::heuristics::{AcquisitionStrategy, StrategyKind};
use oracle_al::learner::{LearnerSpec, Metric, TrainConfig};
use oracle_al::sasearch::SAConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    #[serde(default)]
    pub seed: u64,
    /// Mixture for `source = "synthetic"`; the reference task when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_examples: Option<usize>,
    pub splits: SplitSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Defaults to the acquisition batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Model-selection metric; defaults to `al.metric`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlSection {
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "K")]
    pub iterations: usize,
    #[serde(default)]
    pub metric: Metric,
}

fn default_bins() -> usize {
    5
}

fn default_components() -> usize {
    2
}

fn default_bin_method() -> String {
    "kmeans_pca".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DmrSection {
    Idmr {
        #[serde(default = "default_bins")]
        bins: usize,
        /// `kmeans_pca`, `feature_quantile` or `label`.
        #[serde(default = "default_bin_method")]
        method: String,
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        feature: usize,
        #[serde(default)]
        bin_seed: u64,
    },
    Odmr {
        reference: ReferenceSource,
        labels: LabelSource,
    },
}

impl DmrSection {
    pub fn bin_method(&self) -> CliResult<BinMethod> {
        match self {
            DmrSection::Idmr { method, components, feature, .. } => match method.as_str() {
                "kmeans_pca" => Ok(BinMethod::KmeansPca { components: *components }),
                "feature_quantile" => Ok(BinMethod::FeatureQuantile { feature: *feature }),
                "label" => Ok(BinMethod::Label),
                other => Err(CliError::Config(format!(
                    "strategy.dmr.method: unknown bin method {other:?} (expected kmeans_pca, feature_quantile or label)"
                ))),
            },
            DmrSection::Odmr { .. } => Err(CliError::Config("strategy.dmr: odmr has no bin method".into())),
        }
    }

    pub fn odmr_variant(&self) -> Option<OdmrVariant> {
        match self {
            DmrSection::Odmr { reference, labels } => Some(OdmrVariant { reference: *reference, labels: *labels }),
            DmrSection::Idmr { .. } => None,
        }
    }

    fn label(&self) -> String {
        match self {
            DmrSection::Idmr { .. } => "idmr".into(),
            DmrSection::Odmr { reference, labels } => format!(
                "odmr-{}-{}",
                match reference {
                    ReferenceSource::Accessible => "accessible",
                    ReferenceSource::Test => "test",
                },
                match labels {
                    LabelSource::Predicted => "predicted",
                    LabelSource::Groundtruth => "groundtruth",
                }
            ),
        }
    }
}

fn default_kind() -> StrategyKind {
    StrategyKind::MaxEntropy
}

fn default_mc() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "default_kind")]
    pub kind: StrategyKind,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dmr: Option<DmrSection>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self { kind: default_kind(), mc_samples: default_mc(), dmr: None }
    }
}

impl StrategySection {
    pub fn strategy(&self, zeta: u64) -> AcquisitionStrategy {
        AcquisitionStrategy { kind: self.kind, mc_samples: self.mc_samples, zeta }
    }

    /// File-name label such as `idmr-max_entropy`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            StrategyKind::Random => "random",
            StrategyKind::MaxEntropy => "max_entropy",
            StrategyKind::Bald => "bald",
        };
        match &self.dmr {
            Some(d) => format!("{}-{base}", d.label()),
            None => base.into(),
        }
    }
}

fn default_anneal() -> usize {
    2000
}

fn default_greedy() -> usize {
    200
}

fn default_gamma() -> f64 {
    0.1
}

fn default_checkpoint_every() -> usize {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_anneal")]
    pub anneal_steps: usize,
    #[serde(default = "default_greedy")]
    pub greedy_steps: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            anneal_steps: default_anneal(),
            greedy_steps: default_greedy(),
            gamma: default_gamma(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub xi: Vec<u64>,
    #[serde(default)]
    pub zeta: u64,
    #[serde(default)]
    pub search_seed: u64,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out(), cache: None, jobs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureEntry {
    pub name: String,
    pub learner: LearnerSpec,
}

fn default_random_orders() -> usize {
    20
}

fn default_crossing_orders() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub architectures: Vec<ArchitectureEntry>,
    #[serde(default = "default_random_orders")]
    pub random_orders: usize,
    #[serde(default = "default_crossing_orders")]
    pub crossing_orders: usize,
    /// k-means bins for input-space traces; 0 disables them.
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub bin_seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            architectures: Vec::new(),
            random_orders: default_random_orders(),
            crossing_orders: default_crossing_orders(),
            bins: default_bins(),
            bin_seed: 0,
        }
    }
}

fn default_learner() -> LearnerSpec {
    LearnerSpec::Logistic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSection,
    #[serde(default = "default_learner")]
    pub learner: LearnerSpec,
    #[serde(default)]
    pub train: TrainSection,
    pub al: AlSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub search: SearchSection,
    pub seeds: SeedsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl Config {
    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Config::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Config> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.dataset.images);
        fix(&mut self.dataset.labels);
        fix(&mut self.dataset.path);
    }

    /// Fills defaults that depend on other sections so the snapshot is
    /// fully explicit.
    pub fn resolved(mut self) -> Config {
        let t = TrainConfig::with_batch_size(self.al.batch_size);
        let s = &mut self.train;
        s.max_epochs.get_or_insert(t.max_epochs);
        s.patience.get_or_insert(t.patience);
        s.learning_rate.get_or_insert(t.learning_rate);
        s.batch_size.get_or_insert(t.batch_size);
        s.beta1.get_or_insert(t.beta1);
        s.beta2.get_or_insert(t.beta2);
        s.epsilon.get_or_insert(t.epsilon);
        s.metric.get_or_insert(self.al.metric);
        if self.dataset.source == Source::Synthetic && self.dataset.synthetic.is_none() {
            self.dataset.synthetic = Some(SyntheticSpec::reference());
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        let need_file = |field: &str, p: &Option<PathBuf>| -> CliResult<()> {
            match p {
                None => Err(config_err(field, format!("required when dataset.source = {:?}", d.source))),
                Some(p) if !p.is_file() => Err(config_err(field, format!("file not found: {}", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match d.source {
            Source::Synthetic => {}
            Source::Idx => {
                need_file("dataset.images", &d.images)?;
                need_file("dataset.labels", &d.labels)?;
            }
            Source::Csv => need_file("dataset.path", &d.path)?,
        }
        if self.al.batch_size == 0 || self.al.iterations == 0 {
            return Err(config_err("al", "B and K must be positive"));
        }
        let budget = self.al.batch_size * self.al.iterations;
        if budget > d.splits.pool {
            return Err(config_err(
                "dataset.splits.pool",
                format!("pool size {} is smaller than B*K = {budget}", d.splits.pool),
            ));
        }
        for (name, n) in [("warm", d.splits.warm), ("modelsel", d.splits.modelsel), ("val", d.splits.val), ("test", d.splits.test)] {
            if n == 0 {
                return Err(config_err(&format!("dataset.splits.{name}"), "must be positive"));
            }
        }
        if self.seeds.xi.is_empty() {
            return Err(config_err("seeds.xi", "seed list must not be empty"));
        }
        self.learner.validate().map_err(|e| config_err("learner", e))?;
        self.train_config().validate().map_err(|e| config_err("train", e))?;
        self.strategy.strategy(self.seeds.zeta).validate().map_err(|e| config_err("strategy", e))?;
        if let Some(dmr) = &self.strategy.dmr {
            if let DmrSection::Idmr { bins, .. } = dmr {
                dmr.bin_method()?;
                if *bins == 0 {
                    return Err(config_err("strategy.dmr.bins", "must be positive"));
                }
            }
        }
        self.sa_config().validate().map_err(|e| config_err("search", e))?;
        if self.search.checkpoint_every == 0 {
            return Err(config_err("search.checkpoint_every", "must be positive"));
        }
        for (i, a) in self.analysis.architectures.iter().enumerate() {
            a.learner.validate().map_err(|e| config_err(&format!("analysis.architectures[{i}].learner"), e))?;
        }
        if self.analysis.random_orders == 0 {
            return Err(config_err("analysis.random_orders", "must be positive"));
        }
        if self.analysis.crossing_orders < 2 {
            return Err(config_err("analysis.crossing_orders", "need at least 2 orders"));
        }
        if self.output.jobs == Some(0) {
            return Err(config_err("output.jobs", "must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::with_batch_size(self.al.batch_size);
        let s = &self.train;
        TrainConfig {
            max_epochs: s.max_epochs.unwrap_or(d.max_epochs),
            patience: s.patience.unwrap_or(d.patience),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            beta1: s.beta1.unwrap_or(d.beta1),
            beta2: s.beta2.unwrap_or(d.beta2),
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            metric: s.metric.unwrap_or(self.al.metric),
        }
    }

    pub fn sa_config(&self) -> SAConfig {
        SAConfig {
            anneal_steps: self.search.anneal_steps,
            greedy_steps: self.search.greedy_steps,
            gamma: self.search.gamma,
            search_seed: self.seeds.search_seed,
        }
    }

    pub fn snapshot(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
