use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basepool::{Activation, Architecture, TrainOptions};
use crate::ensemble::Metric;
use crate::error::{Error, Result};
use crate::graphbuild::GraphConfig;
use crate::metalearner::{MetaConfig, MetaTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianMixture {
        classes: usize,
        features: usize,
        per_class: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: usize,
    pub classes_per_client: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureAssignment {
    /// Client `k` trains architecture `k mod len`.
    Repeat,
    /// Every client trains every architecture.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSpec {
    pub architectures: Vec<Architecture>,
    pub assignment: ArchitectureAssignment,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// Split each receiver fits temperatures on.
    pub calibration_split: SplitChoice,
}

impl Default for BaseSpec {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            architectures: vec![Architecture::mlp(&[64, 32], Activation::Relu)],
            assignment: ArchitectureAssignment::Repeat,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            folds: 5,
            calibration_split: SplitChoice::Validation,
        }
    }
}

impl BaseSpec {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            ..TrainOptions::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRows {
    Train,
    TrainVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub k_ss: usize,
    pub k_cs: usize,
    pub epsilon: f64,
    /// Rows the classifier node features are computed on.
    pub classifier_feature_rows: FeatureRows,
}

impl Default for GraphSpec {
    fn default() -> Self {
        let g = GraphConfig::default();
        Self {
            k_ss: g.k_ss,
            k_cs: g.k_cs,
            epsilon: g.epsilon,
            classifier_feature_rows: FeatureRows::Train,
        }
    }
}

impl GraphSpec {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            k_ss: self.k_ss,
            k_cs: self.k_cs,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSpec {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub self_loops: bool,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for MetaSpec {
    fn default() -> Self {
        let m = MetaConfig::default();
        let t = MetaTrainConfig::default();
        Self {
            hidden: m.hidden,
            heads: m.heads,
            layers: m.layers,
            dropout: m.dropout,
            self_loops: m.self_loops,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
        }
    }
}

impl MetaSpec {
    pub fn model_config(&self) -> MetaConfig {
        MetaConfig {
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            self_loops: self.self_loops,
        }
    }

    pub fn train_config(&self, seed: u64) -> MetaTrainConfig {
        MetaTrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    /// Balanced accuracy when the dataset's class imbalance exceeds 3:1.
    Auto,
    Accuracy,
    BalancedAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    pub metric: MetricChoice,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            metric: MetricChoice::Auto,
        }
    }
}

/// Imbalance ratio above which `auto` picks balanced accuracy.
pub const AUTO_METRIC_IMBALANCE: f64 = 3.0;

impl MetricChoice {
    pub fn resolve(self, imbalance_ratio: f64) -> Metric {
        match self {
            MetricChoice::Accuracy => Metric::Accuracy,
            MetricChoice::BalancedAccuracy => Metric::BalancedAccuracy,
            MetricChoice::Auto if imbalance_ratio > AUTO_METRIC_IMBALANCE => Metric::BalancedAccuracy,
            MetricChoice::Auto => Metric::Accuracy,
        }
    }
}

/// One experiment, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub base: BaseSpec,
    #[serde(default)]
    pub graph: GraphSpec,
    #[serde(default)]
    pub meta: MetaSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("feddes-out")
}

fn positive(name: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn positive_real(name: &str, value: f64) -> Result<()> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::Config(format!("{name} must be a positive number, got {value}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::GaussianMixture {
                classes,
                features,
                per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("dataset.classes must be at least 2".into()));
                }
                positive("dataset.features", *features)?;
                positive("dataset.per_class", *per_class)?;
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(Error::Config(format!(
                        "dataset.separation must be finite and nonnegative, got {separation}"
                    )));
                }
                if self.partition.classes_per_client > *classes {
                    return Err(Error::Config(format!(
                        "partition.classes_per_client {} exceeds dataset.classes {classes}",
                        self.partition.classes_per_client
                    )));
                }
                if self.partition.clients * self.partition.classes_per_client < *classes {
                    return Err(Error::Config(format!(
                        "{} clients x {} classes each cannot cover {classes} classes",
                        self.partition.clients, self.partition.classes_per_client
                    )));
                }
            }
            DatasetSpec::Csv { path, label_column } => {
                if path.as_os_str().is_empty() || label_column.is_empty() {
                    return Err(Error::Config("dataset.path and dataset.label_column must be set".into()));
                }
            }
        }
        if self.partition.clients < 2 {
            return Err(Error::Config("partition.clients must be at least 2".into()));
        }
        positive("partition.classes_per_client", self.partition.classes_per_client)?;
        positive_real("partition.alpha", self.partition.alpha)?;

        let b = &self.base;
        if b.architectures.is_empty() {
            return Err(Error::Config("base.architectures must not be empty".into()));
        }
        if b.architectures.iter().any(|a| a.hidden.contains(&0)) {
            return Err(Error::Config("base.architectures has a zero-width layer".into()));
        }
        positive_real("base.learning_rate", b.learning_rate)?;
        positive("base.max_epochs", b.max_epochs)?;
        positive("base.patience", b.patience)?;
        positive("base.batch_size", b.batch_size)?;
        if b.folds < 2 {
            return Err(Error::Config("base.folds must be at least 2".into()));
        }

        positive("graph.k_ss", self.graph.k_ss)?;
        positive("graph.k_cs", self.graph.k_cs)?;
        positive_real("graph.epsilon", self.graph.epsilon)?;

        let m = &self.meta;
        self.meta.model_config().validate()?;
        positive_real("meta.learning_rate", m.learning_rate)?;
        positive("meta.max_epochs", m.max_epochs)?;
        positive("meta.patience", m.patience)?;
        positive("meta.batch_size", m.batch_size)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything that affects results
    /// (the output directory is left out).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[dataset]
kind = "gaussian_mixture"
classes = 3
features = 4
per_class = 40
separation = 3.0
[partition]
clients = 3
classes_per_client = 2
alpha = 1.0
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.graph.k_ss, 5);
        assert_eq!(c.graph.k_cs, 3);
        assert_eq!(c.meta.hidden, 128);
        assert_eq!(c.meta.heads, 4);
        assert_eq!(c.base.folds, 5);
        assert_eq!(c.evaluation.metric, MetricChoice::Auto);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.with_seed(4).hash(), c.hash());
        let mut moved = c.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (from, to) in [
            ("alpha = 1.0", "alpha = 0.0"),
            ("classes_per_client = 2", "classes_per_client = 4"),
            ("clients = 3", "clients = 1"),
            ("seed = 3", "seed = 3\nunknown = 1"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(
                matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))),
                "{to}"
            );
        }
        let odd_heads = format!("{MINIMAL}[meta]\nhidden = 10\nheads = 4\n");
        assert!(matches!(ExperimentConfig::from_toml(&odd_heads), Err(Error::Config(_))));
    }

    #[test]
    fn auto_metric_threshold() {
        assert_eq!(MetricChoice::Auto.resolve(3.0), Metric::Accuracy);
        assert_eq!(MetricChoice::Auto.resolve(3.5), Metric::BalancedAccuracy);
        assert_eq!(MetricChoice::Accuracy.resolve(10.0), Metric::Accuracy);
    }
}
