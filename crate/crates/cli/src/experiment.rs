//! The experiment pipeline behind the commands: data, source training,
//! transfer, and evaluation, all in memory.

use std::collections::BTreeMap;
use std::fmt;

use exf_core::data::{generate_clusters, load_dataset, split_by_class, split_by_sample, DataFormat, Dataset};
use exf_core::eval::{rank_pairs_by_weight, recall_at_k_with, spectral_decay, PairRanking, RecallOptions, RetrievalReport};
use exf_core::losses::{TransferLoss, LossConfig};
use exf_core::model::MlpModel;
use exf_core::numcore::{gaussian_weights, l2_normalize_rows, pairwise_distances, Exec, Matrix};
use exf_core::transfer::{
    classification_accuracy, distill_classifier_observed, extract_knowledge, train_classifier, train_source,
    train_target_observed, ClassifierConfig, SourceConfig, TrainLog, TransferMode,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SourceObjective, SplitKind, TransferSection};
use crate::error::{CliError, CliResult};

/// Sorts a library error into the CLI's exit-code classes.
pub fn classify(e: exf_core::Error) -> CliError {
    use exf_core::Error as E;
    match e {
        E::Config(_)
        | E::InvalidParameter { .. }
        | E::BatchTooSmall { .. }
        | E::InfeasibleGeometry(_)
        | E::LabelOutOfRange { .. }
        | E::Parse { .. }
        | E::Io { .. } => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn build_data(cfg: &ExperimentConfig) -> CliResult<Splits> {
    let d = &cfg.dataset;
    let ds = match (&d.generate, &d.load) {
        (Some(spec), _) => generate_clusters(spec, cfg.seed).map_err(classify)?,
        (None, Some(l)) => {
            if !l.path.exists() {
                return Err(CliError::Config(format!("dataset file {} does not exist", l.path.display())));
            }
            let fmt = l.format.unwrap_or_else(|| DataFormat::from_path(&l.path));
            load_dataset(&l.path, fmt).map_err(classify)?
        }
        (None, None) => return Err(CliError::Config("dataset needs `generate` or `load`".into())),
    };
    if cfg.source.dims.first() != Some(&ds.dim()) {
        return Err(CliError::Config(format!(
            "source.dims {:?} must start with the feature dim {}",
            cfg.source.dims,
            ds.dim()
        )));
    }
    let (train, test) = match d.split.by {
        SplitKind::Class => split_by_class(&ds, d.split.train_fraction, cfg.seed),
        SplitKind::Sample => split_by_sample(&ds, d.split.train_fraction, cfg.seed),
    }
    .map_err(classify)?;
    Ok(Splits { train, test })
}

/// Which representation of a model is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Model output, l2-normalized.
    Normalized,
    /// Model output as is.
    Raw,
    /// Last hidden activations of a classifier.
    Penultimate,
}

impl EmbeddingKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
            Self::Penultimate => "penultimate",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Self::Normalized, Self::Raw, Self::Penultimate].into_iter().find(|k| k.tag() == tag)
    }

    pub fn embed(self, model: &MlpModel, x: &Matrix) -> CliResult<Matrix> {
        match self {
            Self::Normalized => l2_normalize_rows(&model.predict(x).map_err(classify)?).map_err(CliError::runtime),
            Self::Raw => model.predict(x).map_err(classify),
            Self::Penultimate => Ok(model.predict_with_features(x).map_err(classify)?.0),
        }
    }
}

fn exec(cfg: &ExperimentConfig) -> Exec {
    if cfg.deterministic {
        Exec::Deterministic
    } else {
        Exec::Parallel
    }
}

/// Recall@K of `e`, with K ≥ n reported as a usage error.
pub fn recall(e: &Matrix, labels: &[usize], k_values: &[usize], exec: Exec) -> CliResult<RetrievalReport> {
    if let Some(k) = k_values.iter().find(|&&k| k == 0 || k >= e.rows()) {
        return Err(CliError::Config(format!(
            "K = {k} needs more than {k} samples, the evaluated split has {}",
            e.rows()
        )));
    }
    recall_at_k_with(e, labels, k_values, RecallOptions { normalize: false, exec }).map_err(classify)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub embedding: EmbeddingKind,
    pub train: RetrievalReport,
    pub test: RetrievalReport,
    /// Spectral decay of the test-split embeddings.
    pub rho: f64,
    /// Train minus test recall at the smallest K.
    pub gap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
}

pub fn evaluate(model: &MlpModel, kind: EmbeddingKind, splits: &Splits, cfg: &ExperimentConfig) -> CliResult<ModelEval> {
    let ks = &cfg.eval.k_values;
    let et = kind.embed(model, &splits.train.features)?;
    let ev = kind.embed(model, &splits.test.features)?;
    let train = recall(&et, &splits.train.labels, ks, exec(cfg))?;
    let test = recall(&ev, &splits.test.labels, ks, exec(cfg))?;
    let rho = spectral_decay(&ev).map_err(CliError::runtime)?.rho;
    let test_accuracy = if kind == EmbeddingKind::Penultimate {
        Some(classification_accuracy(model, &splits.test).map_err(classify)?)
    } else {
        None
    };
    Ok(ModelEval { embedding: kind, gap: train.recall[0] - test.recall[0], train, test, rho, test_accuracy })
}

fn source_kind(cfg: &ExperimentConfig) -> EmbeddingKind {
    match cfg.source.objective {
        SourceObjective::Contrastive => EmbeddingKind::Normalized,
        SourceObjective::CrossEntropy => EmbeddingKind::Penultimate,
    }
}

fn target_kind(t: &TransferSection) -> EmbeddingKind {
    if t.mode == TransferMode::ClassifierDistill {
        EmbeddingKind::Penultimate
    } else if t.loss.needs_normalized_input() {
        EmbeddingKind::Normalized
    } else {
        EmbeddingKind::Raw
    }
}

pub struct SourceOutcome {
    pub model: MlpModel,
    pub log: TrainLog,
    pub eval: ModelEval,
}

pub fn run_source(cfg: &ExperimentConfig, splits: &Splits) -> CliResult<SourceOutcome> {
    let s = &cfg.source;
    let (model, log) = match s.objective {
        SourceObjective::Contrastive => train_source(
            &splits.train,
            &SourceConfig {
                dims: s.dims.clone(),
                epochs: s.epochs,
                batch_size: s.batch_size,
                seed: cfg.seed,
                delta: s.delta,
                optim: s.optim,
                augment: s.augment,
            },
        ),
        SourceObjective::CrossEntropy => train_classifier(
            &splits.train,
            &ClassifierConfig {
                dims: s.dims.clone(),
                epochs: s.epochs,
                batch_size: s.batch_size,
                seed: cfg.seed,
                optim: s.optim,
                augment: s.augment,
            },
        ),
    }
    .map_err(classify)?;
    let eval = evaluate(&model, source_kind(cfg), splits, cfg)?;
    Ok(SourceOutcome { model, log, eval })
}

/// Metadata describing how a source model was produced.
pub fn source_metadata(cfg: &ExperimentConfig) -> BTreeMap<String, serde_json::Value> {
    let objective = match cfg.source.objective {
        SourceObjective::Contrastive => "contrastive",
        SourceObjective::CrossEntropy => "cross_entropy",
    };
    BTreeMap::from([
        ("role".into(), "source".into()),
        ("objective".into(), objective.into()),
        ("embedding".into(), source_kind(cfg).tag().into()),
        ("epochs".into(), cfg.source.epochs.into()),
        ("seed".into(), cfg.seed.into()),
    ])
}

pub fn target_metadata(cfg: &ExperimentConfig, t: &TransferSection) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("role".into(), "target".into()),
        ("mode".into(), t.mode.name().into()),
        ("objective".into(), t.loss.name().into()),
        ("embedding".into(), target_kind(t).tag().into()),
        ("epochs".into(), t.epochs.into()),
        ("seed".into(), cfg.target_seed().into()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub delta: f64,
    pub train_recall: Vec<f64>,
    pub test_recall: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub top_same_class_fraction: f64,
    pub bottom_same_class_fraction: f64,
    pub ranking: PairRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub mode: TransferMode,
    pub loss: TransferLoss,
    /// Set for runs that remove label relaxation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation: Option<String>,
    pub sigma: f64,
    pub delta: f64,
    pub k_values: Vec<usize>,
    pub source: ModelEval,
    pub target: ModelEval,
    /// Student trained by cross-entropy alone, for classifier distillation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<ModelEval>,
    pub pairs: PairSummary,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sweep: Vec<SweepRow>,
}

pub struct TransferOutcome {
    pub model: MlpModel,
    pub log: TrainLog,
    pub report: TransferReport,
}

fn section(cfg: &ExperimentConfig) -> CliResult<&TransferSection> {
    cfg.transfer.as_ref().ok_or_else(|| CliError::Config("config has no `transfer` section".into()))
}

/// Checks that a loaded source fits the configured transfer.
pub fn check_source(cfg: &ExperimentConfig, source: &MlpModel) -> CliResult<()> {
    if source.layer_dims() != cfg.source.dims.as_slice() {
        return Err(CliError::Config(format!(
            "source checkpoint has dims {:?}, config expects {:?}",
            source.layer_dims(),
            cfg.source.dims
        )));
    }
    Ok(())
}

pub fn run_transfer(cfg: &ExperimentConfig, source: &MlpModel, splits: &Splits) -> CliResult<TransferOutcome> {
    let t = section(cfg)?;
    check_source(cfg, source)?;
    let (model, log, baseline) = train_one(cfg, t, t.loss_params, source, splits, true)?;
    let sweep = run_sweep(cfg, t, source, splits)?;
    let report = TransferReport {
        mode: t.mode,
        loss: t.loss,
        ablation: (t.loss == TransferLoss::UnrelaxedRelative)
            .then(|| "unrelaxed: binary class labels on relative distances".to_string()),
        sigma: t.loss_params.sigma,
        delta: t.loss_params.delta,
        k_values: cfg.eval.k_values.clone(),
        source: evaluate(source, source_kind(cfg), splits, cfg)?,
        target: evaluate(&model, target_kind(t), splits, cfg)?,
        baseline,
        pairs: pair_summary(cfg, t, source, &splits.train)?,
        sweep,
    };
    Ok(TransferOutcome { model, log, report })
}

/// Trains one target (or distilled student) with the given loss settings.
fn train_one(
    cfg: &ExperimentConfig,
    t: &TransferSection,
    loss_params: LossConfig,
    source: &MlpModel,
    splits: &Splits,
    track: bool,
) -> CliResult<(MlpModel, TrainLog, Option<ModelEval>)> {
    let ks = [1];
    let ex = exec(cfg);
    let kind = target_kind(t);
    let mut observer = |_: usize, m: &MlpModel| -> exf_core::Result<Option<BTreeMap<String, f64>>> {
        let r = |ds: &Dataset| -> exf_core::Result<f64> {
            let e = kind.embed(m, &ds.features).map_err(|e| exf_core::Error::InvalidInput(e.to_string()))?;
            Ok(recall_at_k_with(&e, &ds.labels, &ks, RecallOptions { normalize: false, exec: ex })?.recall[0])
        };
        Ok(Some(BTreeMap::from([
            ("train_recall_at_1".to_string(), r(&splits.train)?),
            ("test_recall_at_1".to_string(), r(&splits.test)?),
        ])))
    };
    let obs = if track { Some(&mut observer as &mut exf_core::transfer::EpochObserver) } else { None };
    if t.mode == TransferMode::ClassifierDistill {
        let ccfg = ClassifierConfig {
            dims: t.target_dims.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: cfg.target_seed(),
            optim: t.optim,
            augment: t.augment,
        };
        let (model, log) =
            distill_classifier_observed(source, &splits.train, &ccfg, &loss_params, t.distill, obs).map_err(classify)?;
        let (plain, _) = train_classifier(&splits.train, &ccfg).map_err(classify)?;
        let baseline = evaluate(&plain, EmbeddingKind::Penultimate, splits, cfg)?;
        Ok((model, log, Some(baseline)))
    } else {
        let mut tcfg = cfg.transfer_config(t);
        tcfg.loss_cfg = loss_params;
        let (model, log) = train_target_observed(source, &splits.train, &tcfg, obs).map_err(classify)?;
        Ok((model, log, None))
    }
}

fn run_sweep(cfg: &ExperimentConfig, t: &TransferSection, source: &MlpModel, splits: &Splits) -> CliResult<Vec<SweepRow>> {
    let Some(sw) = &t.sweep else { return Ok(Vec::new()) };
    let base = t.loss_params;
    let settings = sw
        .sigma
        .iter()
        .map(|&sigma| LossConfig { sigma, ..base })
        .chain(sw.delta.iter().map(|&delta| LossConfig { delta, ..base }));
    let mut rows = Vec::new();
    for lp in settings {
        let (model, _, _) = train_one(cfg, t, lp, source, splits, false)?;
        let e = evaluate(&model, target_kind(t), splits, cfg)?;
        rows.push(SweepRow { sigma: lp.sigma, delta: lp.delta, train_recall: e.train.recall, test_recall: e.test.recall, rho: e.rho });
    }
    Ok(rows)
}

fn pair_summary(cfg: &ExperimentConfig, t: &TransferSection, source: &MlpModel, train: &Dataset) -> CliResult<PairSummary> {
    let w = if t.mode == TransferMode::ClassifierDistill {
        let feats = source.predict_with_features(&train.features).map_err(classify)?.0;
        let unit = l2_normalize_rows(&feats).map_err(CliError::runtime)?;
        gaussian_weights(&pairwise_distances(&unit).map_err(CliError::runtime)?, t.loss_params.sigma).map_err(classify)?
    } else {
        extract_knowledge(source, &train.features, t.loss_params.sigma).map_err(CliError::runtime)?.weights
    };
    let ranking = rank_pairs_by_weight(&w, &train.labels, cfg.eval.pair_ranking_top).map_err(classify)?;
    Ok(PairSummary {
        top_same_class_fraction: PairRanking::same_class_fraction(&ranking.top),
        bottom_same_class_fraction: PairRanking::same_class_fraction(&ranking.bottom),
        ranking,
    })
}

/// Column titles aligned with [`ModelEval`]'s display.
pub fn recall_header(k_values: &[usize]) -> String {
    let ks: String = k_values.iter().map(|k| format!("{:>8}", format!("R@{k}"))).collect();
    format!("{:6}{ks}{:8}{ks}", "", "")
}

fn recall_cells(r: &RetrievalReport) -> String {
    r.recall.iter().map(|v| format!("{v:>8.4}")).collect::<Vec<_>>().join("")
}

impl fmt::Display for ModelEval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "train {} | test {} | rho {:.4} | gap {:+.4}", recall_cells(&self.train), recall_cells(&self.test), self.rho, self.gap)?;
        if let Some(a) = self.test_accuracy {
            write!(f, " | acc {a:.4}")?;
        }
        Ok(())
    }
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {} | loss {} | sigma {} | delta {}", self.mode.name(), self.loss.name(), self.sigma, self.delta)?;
        if let Some(a) = &self.ablation {
            writeln!(f, "ablation: {a}")?;
        }
        writeln!(f, "{:<9}{}", "", recall_header(&self.k_values))?;
        writeln!(f, "{:<9}{}", "source", self.source)?;
        writeln!(f, "{:<9}{}", "target", self.target)?;
        if let Some(b) = &self.baseline {
            writeln!(f, "{:<9}{}", "ce-only", b)?;
        }
        writeln!(
            f,
            "same-class share: top pairs {:.2}, bottom pairs {:.2}",
            self.pairs.top_same_class_fraction, self.pairs.bottom_same_class_fraction
        )?;
        write!(f, "{}", self.pairs.ranking)?;
        if !self.sweep.is_empty() {
            writeln!(f, "sweep")?;
            let k = format!("R@{}", self.k_values[0]);
            writeln!(f, "{:>8} {:>8} {:>10} {:>10} {:>8}", "sigma", "delta", format!("train {k}"), format!("test {k}"), "rho")?;
            for r in &self.sweep {
                writeln!(f, "{:>8} {:>8} {:>10.4} {:>10.4} {:>8.4}", r.sigma, r.delta, r.train_recall[0], r.test_recall[0], r.rho)?;
            }
        }
        Ok(())
    }
}
