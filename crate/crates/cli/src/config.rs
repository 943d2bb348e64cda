//! Experiment configuration files.

use std::path::{Path, PathBuf};

use exf_core::data::{AugmentConfig, ClusterSpec, DataFormat};
use exf_core::losses::{LossConfig, TransferLoss};
use exf_core::transfer::{DistillWeights, OptimConfig, TransferConfig, TransferMode};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, splitting, initialization and batching.
    #[serde(default)]
    pub seed: u64,
    /// Serial reductions and logs without wall-clock times.
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub dataset: DatasetConfig,
    pub source: SourceSection,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn yes() -> bool {
    true
}

/// Exactly one of `generate` and `load`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<ClusterSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadSpec>,
    #[serde(default)]
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub path: PathBuf,
    /// Inferred from the extension when absent (`.csv` or binary).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DataFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Train and test share no class (retrieval of unseen classes).
    Class,
    /// Every class appears on both sides (classification).
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub by: SplitKind,
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { by: SplitKind::Class, train_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SourceObjective {
    /// Contrastive loss on l2-normalized embeddings.
    Contrastive,
    /// Softmax classifier; used as the teacher for classifier distillation.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub dims: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "contrastive")]
    pub objective: SourceObjective,
    /// Margin of the contrastive objective.
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "single_view")]
    pub augment: AugmentConfig,
}

fn batch_size() -> usize {
    32
}

fn contrastive() -> SourceObjective {
    SourceObjective::Contrastive
}

fn one() -> f64 {
    1.0
}

fn single_view() -> AugmentConfig {
    AugmentConfig::identity(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub mode: TransferMode,
    #[serde(default = "relaxed")]
    pub loss: TransferLoss,
    #[serde(default)]
    pub loss_params: LossConfig,
    pub target_dims: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub distill: DistillWeights,
    /// Extra targets trained with one hyperparameter changed at a time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn relaxed() -> TransferLoss {
    TransferLoss::RelaxedContrastive
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "k_values")]
    pub k_values: Vec<usize>,
    /// Number of pairs listed at each end of the source weight ranking.
    #[serde(default = "pair_ranking_top")]
    pub pair_ranking_top: usize,
}

fn k_values() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn pair_ranking_top() -> usize {
    10
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k_values: k_values(), pair_ranking_top: pair_ranking_top() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = o.deterministic {
            self.deterministic = d;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        self
    }

    /// Seed of the target model, distinct from the source's.
    pub fn target_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        match (&d.generate, &d.load) {
            (Some(g), None) => {
                if g.classes < 2 || g.per_class < 2 || g.dim == 0 {
                    return Err(CliError::Config("dataset.generate needs ≥ 2 classes, ≥ 2 per class and dim ≥ 1".into()));
                }
                if self.source.dims.first() != Some(&g.dim) {
                    return Err(CliError::Config(format!(
                        "source.dims {:?} must start with the feature dim {}",
                        self.source.dims, g.dim
                    )));
                }
            }
            (None, Some(_)) => {}
            _ => return Err(CliError::Config("dataset needs exactly one of `generate` and `load`".into())),
        }
        if !(d.split.train_fraction > 0.0 && d.split.train_fraction < 1.0) {
            return Err(CliError::Config("dataset.split.train_fraction must lie in (0, 1)".into()));
        }
        let s = &self.source;
        if s.dims.len() < 2 || s.dims.contains(&0) {
            return Err(CliError::Config(format!("source.dims {:?} needs at least two positive dims", s.dims)));
        }
        if s.objective == SourceObjective::CrossEntropy && s.dims.len() < 3 {
            return Err(CliError::Config("a classifier source needs a hidden layer".into()));
        }
        if s.batch_size == 0 {
            return Err(CliError::Config("source.batch_size must be positive".into()));
        }
        s.optim.adamw().validate().map_err(CliError::config)?;
        s.augment.validate().map_err(CliError::config)?;
        if self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            return Err(CliError::Config("eval.k_values must be non-empty and positive".into()));
        }
        if self.eval.pair_ranking_top == 0 {
            return Err(CliError::Config("eval.pair_ranking_top must be positive".into()));
        }
        if let Some(t) = &self.transfer {
            self.transfer_config(t).validate().map_err(CliError::config)?;
            let classifier = t.mode == TransferMode::ClassifierDistill;
            if classifier != (s.objective == SourceObjective::CrossEntropy) {
                return Err(CliError::Config(
                    "classifier_distill needs a cross_entropy source, and embedding modes a contrastive one".into(),
                ));
            }
            if classifier && d.split.by != SplitKind::Sample {
                return Err(CliError::Config("classifier_distill needs dataset.split.by = \"sample\"".into()));
            }
            if let Some(sw) = &t.sweep {
                if classifier {
                    return Err(CliError::Config("sweeps apply to embedding transfer modes only".into()));
                }
                for (name, values) in [("sigma", &sw.sigma), ("delta", &sw.delta)] {
                    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                        return Err(CliError::Config(format!("sweep.{name} value {v} must be positive")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn transfer_config(&self, t: &TransferSection) -> TransferConfig {
        TransferConfig {
            mode: t.mode,
            loss: t.loss,
            loss_cfg: t.loss_params,
            source_dims: self.source.dims.clone(),
            target_dims: t.target_dims.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.target_seed(),
            optim: t.optim,
            augment: t.augment,
            distill: t.distill,
        }
    }
}

/// The JSON Schema of [`ExperimentConfig`], pretty-printed.
pub fn schema_json() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"generate": {"classes": 4, "per_class": 8, "dim": 6, "separation": 3.0, "noise": 0.3}},
        "source": {"dims": [6, 16, 8], "epochs": 2}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert!(c.deterministic);
        assert_eq!(c.seed, 0);
        assert_eq!(c.eval.k_values, vec![1, 2, 4, 8]);
        assert_eq!(c.source.batch_size, 32);
        assert_eq!(c.dataset.split, SplitSpec::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replacen("\"source\"", "\"colour\": 1, \"source\"", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Config(_))));
        let nested = MINIMAL.replacen("\"epochs\": 2", "\"epochs\": 2, \"lr\": 0.1", 1);
        assert!(ExperimentConfig::from_json(&nested).is_err());
    }

    #[test]
    fn unknown_loss_tag_is_rejected() {
        let text = MINIMAL.replacen(
            "\"source\"",
            "\"transfer\": {\"mode\": \"self\", \"loss\": \"triplet\", \"target_dims\": [6,16,8], \"epochs\": 1}, \"source\"",
            1,
        );
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("triplet"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap().apply(&Overrides {
            seed: Some(9),
            deterministic: Some(false),
            out: Some("elsewhere".into()),
        });
        assert_eq!((c.seed, c.deterministic), (9, false));
        assert_eq!(c.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(c.target_seed(), 10);
    }

    #[test]
    fn inconsistent_sections_fail_validation() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.source.dims[0] = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.transfer = Some(TransferSection {
            mode: TransferMode::DimReduction,
            loss: TransferLoss::RelaxedContrastive,
            loss_params: LossConfig::default(),
            target_dims: vec![6, 16, 12],
            epochs: 1,
            batch_size: 8,
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            distill: DistillWeights::default(),
            sweep: None,
        });
        assert!(c.validate().is_err());
        c.transfer.as_mut().unwrap().target_dims = vec![6, 16, 2];
        c.validate().unwrap();
        c.transfer.as_mut().unwrap().mode = TransferMode::ClassifierDistill;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schema_lists_sections() {
        let s = schema_json();
        for key in ["dataset", "source", "transfer", "eval", "output", "deterministic", "relaxed_contrastive"] {
            assert!(s.contains(key), "{key}");
        }
    }
}
