//! The embedding-transfer engine.
//!
//! A source model is trained with the contrastive loss on l2-normalized
//! embeddings. Its knowledge is then extracted batch by batch as a Gaussian
//! similarity matrix over the l2-normalized source embeddings of the very
//! same augmented views the target sees, and the target is trained solely by
//! a transfer loss on its own (unnormalized) embeddings.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{contrastive, cross_entropy, hkd_kl, relaxed_contrastive, LossConfig, TransferLoss};
use crate::model::{parameter_count, MlpModel};
use crate::numcore::{gaussian_weights, l2_normalize_rows, l2_normalize_rows_backward, pairwise_distances, Matrix, WeightMatrix};
use crate::optim::{AdamWConfig, AdamWState, Schedule};

/// Learning-rate schedule and AdamW settings.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self { lr: 1e-4, min_lr: 0.0, warmup_epochs: 0, weight_decay: a.weight_decay, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    fn schedule(&self, epochs: usize) -> Result<Schedule> {
        Schedule::new(self.warmup_epochs, epochs, self.lr, self.min_lr)
    }
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[serde(rename = "self")]
    SelfTransfer,
    DimReduction,
    Compression,
    ClassifierDistill,
}

impl TransferMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::SelfTransfer => "self",
            Self::DimReduction => "dim_reduction",
            Self::Compression => "compression",
            Self::ClassifierDistill => "classifier_distill",
        }
    }
}

/// Settings for training a contrastive source embedding model.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub dims: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Margin of the contrastive loss.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_source_augment")]
    pub augment: AugmentConfig,
}

fn default_batch_size() -> usize {
    32
}

fn default_delta() -> f64 {
    1.0
}

fn default_source_augment() -> AugmentConfig {
    AugmentConfig::identity(1)
}

/// Loss weights for classifier distillation.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillWeights {
    pub hkd: f64,
    pub relaxed_contrastive: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self { hkd: 1.0, relaxed_contrastive: 1.0 }
    }
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub mode: TransferMode,
    #[serde(default = "default_loss")]
    pub loss: TransferLoss,
    #[serde(default, rename = "loss_params")]
    pub loss_cfg: LossConfig,
    pub source_dims: Vec<usize>,
    pub target_dims: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub distill: DistillWeights,
}

fn default_loss() -> TransferLoss {
    TransferLoss::RelaxedContrastive
}

impl TransferConfig {
    /// Checks hyperparameters and the regime's architecture constraint.
    pub fn validate(&self) -> Result<()> {
        self.loss_cfg.validate()?;
        self.optim.adamw().validate()?;
        self.augment.validate()?;
        for (name, dims) in [("source_dims", &self.source_dims), ("target_dims", &self.target_dims)] {
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::Config(format!("{name} {dims:?} needs at least two positive dims")));
            }
        }
        if self.source_dims[0] != self.target_dims[0] {
            return Err(Error::Config(format!(
                "source input dim {} differs from target input dim {}",
                self.source_dims[0], self.target_dims[0]
            )));
        }
        if self.epochs > 0 {
            self.optim.schedule(self.epochs)?;
        }
        let (s_out, t_out) = (last(&self.source_dims), last(&self.target_dims));
        match self.mode {
            TransferMode::SelfTransfer => {
                if self.source_dims != self.target_dims {
                    return Err(Error::Config(format!(
                        "self-transfer needs identical architectures, got {:?} and {:?}",
                        self.source_dims, self.target_dims
                    )));
                }
            }
            TransferMode::DimReduction => {
                if t_out > s_out {
                    return Err(Error::Config(format!("dim_reduction target output {t_out} exceeds source output {s_out}")));
                }
            }
            TransferMode::Compression => {
                let (ps, pt) = (parameter_count(&self.source_dims), parameter_count(&self.target_dims));
                if pt >= ps {
                    return Err(Error::Config(format!("compression target has {pt} parameters, source {ps}")));
                }
            }
            TransferMode::ClassifierDistill => {
                if s_out != t_out {
                    return Err(Error::Config(format!(
                        "classifier heads differ: source {s_out} classes, target {t_out}"
                    )));
                }
                let w = self.distill;
                if !(w.hkd >= 0.0 && w.relaxed_contrastive >= 0.0) {
                    return Err(Error::Config("distillation weights must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }
}

fn last(dims: &[usize]) -> usize {
    *dims.last().expect("validated")
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    /// One JSON object per line. Wall-clock times are dropped when
    /// `include_time` is false so that reruns are byte-identical.
    pub fn to_jsonl(&self, include_time: bool) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if !include_time {
                r.wall_time_s = None;
            }
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Per-epoch hook: receives the epoch index and the current model, returns
/// optional metrics to attach to that epoch's record.
pub type EpochObserver<'a> = dyn FnMut(usize, &MlpModel) -> Result<Option<BTreeMap<String, f64>>> + 'a;

/// Relation labels of one (multi-view) batch, from the source space.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBatch {
    pub weights: WeightMatrix,
}

/// Gaussian similarities of the l2-normalized source embeddings of `x`.
pub fn extract_knowledge(source: &MlpModel, x: &Matrix, sigma: f64) -> Result<KnowledgeBatch> {
    let emb = l2_normalize_rows(&source.predict(x)?)?;
    Ok(KnowledgeBatch { weights: gaussian_weights(&pairwise_distances(&emb)?, sigma)? })
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

fn wrap(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Batch { epoch, batch, source: Box::new(e) }
}

fn check_finite(value: f64, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch, message: format!("loss is {value}") })
    }
}

struct Loop<'a> {
    model: MlpModel,
    opt: AdamWState,
    schedule: Option<Schedule>,
    log: TrainLog,
    observer: Option<&'a mut EpochObserver<'a>>,
}

impl<'a> Loop<'a> {
    fn new(model: MlpModel, optim: &OptimConfig, epochs: usize, observer: Option<&'a mut EpochObserver<'a>>) -> Result<Self> {
        let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let schedule = if epochs > 0 { Some(optim.schedule(epochs)?) } else { None };
        Ok(Self { opt: AdamWState::new(optim.adamw(), &lens)?, model, schedule, log: TrainLog::default(), observer })
    }

    fn lr(&self, epoch: usize) -> Result<f64> {
        self.schedule.as_ref().expect("epochs > 0").lr_at(epoch as f64)
    }

    fn apply(&mut self, grads: &crate::model::ParamGrads, lr: f64) -> Result<()> {
        let g = grads.tensors();
        self.opt.step(&mut self.model.tensors_mut(), &g, lr)
    }

    fn finish_epoch(&mut self, epoch: usize, losses: &[f64], lr: f64, started: Instant) -> Result<()> {
        let mean_loss = crate::numcore::sum::neumaier(losses.iter().copied()) / losses.len().max(1) as f64;
        if !mean_loss.is_finite() || !self.model.is_finite() {
            return Err(Error::Diverged { epoch, batch: losses.len(), message: "non-finite loss or parameters".into() });
        }
        let eval = match self.observer.as_mut() {
            Some(obs) => obs(epoch, &self.model)?,
            None => None,
        };
        self.log.records.push(EpochRecord {
            epoch,
            mean_loss,
            lr,
            wall_time_s: Some(started.elapsed().as_secs_f64()),
            eval,
        });
        Ok(())
    }
}

/// Trains a source embedding model with the contrastive loss on
/// l2-normalized outputs and binary class-equivalence labels.
pub fn train_source(ds: &Dataset, cfg: &SourceConfig) -> Result<(MlpModel, TrainLog)> {
    train_source_observed(ds, cfg, None)
}

pub fn train_source_observed<'a>(
    ds: &Dataset,
    cfg: &SourceConfig,
    observer: Option<&'a mut EpochObserver<'a>>,
) -> Result<(MlpModel, TrainLog)> {
    if cfg.dims.first() != Some(&ds.dim()) {
        return Err(Error::Config(format!("source input dim {:?} does not match {} features", cfg.dims.first(), ds.dim())));
    }
    if cfg.delta.is_nan() || cfg.delta <= 0.0 {
        return Err(Error::Config("source margin must be positive".into()));
    }
    let model = MlpModel::init(&cfg.dims, derive_seed(cfg.seed, INIT_STREAM))?;
    if cfg.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let mut batcher = make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, BATCH_STREAM), cfg.augment)?;
    let mut lp = Loop::new(model, &cfg.optim, cfg.epochs, observer)?;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lp.lr(epoch)?;
        let mut losses = Vec::new();
        for (b, batch) in batcher.next_epoch()?.into_iter().enumerate() {
            let (x, labels) = batch.stacked();
            let step = || -> Result<(f64, crate::model::ParamGrads)> {
                let (out, trace) = lp.model.forward(&x)?;
                let unit = l2_normalize_rows(&out)?;
                let res = contrastive(&unit, &WeightMatrix::from_labels(&labels), cfg.delta)?;
                let grad_out = l2_normalize_rows_backward(&out, &res.grad)?;
                Ok((res.value, lp.model.backward(&trace, &grad_out)?.params))
            };
            let (value, grads) = step().map_err(wrap(epoch, b))?;
            check_finite(value, epoch, b)?;
            lp.apply(&grads, lr).map_err(wrap(epoch, b))?;
            losses.push(value);
        }
        lp.finish_epoch(epoch, &losses, lr, started)?;
    }
    Ok((lp.model, lp.log))
}

/// Trains a freshly initialized target model solely by the configured
/// transfer loss against a frozen source.
pub fn train_target(source: &MlpModel, ds: &Dataset, cfg: &TransferConfig) -> Result<(MlpModel, TrainLog)> {
    train_target_observed(source, ds, cfg, None)
}

pub fn train_target_observed<'a>(
    source: &MlpModel,
    ds: &Dataset,
    cfg: &TransferConfig,
    observer: Option<&'a mut EpochObserver<'a>>,
) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    if cfg.mode == TransferMode::ClassifierDistill {
        return Err(Error::Config("classifier_distill runs through distill_classifier".into()));
    }
    if source.layer_dims() != cfg.source_dims.as_slice() {
        return Err(Error::Config(format!(
            "source checkpoint dims {:?} differ from configured {:?}",
            source.layer_dims(),
            cfg.source_dims
        )));
    }
    if source.input_dim() != ds.dim() {
        return Err(Error::dims(format!("{} input features", source.input_dim()), ds.dim()));
    }
    let model = MlpModel::init(&cfg.target_dims, derive_seed(cfg.seed, INIT_STREAM))?;
    if cfg.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let mut batcher = make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, BATCH_STREAM), cfg.augment)?;
    let mut lp = Loop::new(model, &cfg.optim, cfg.epochs, observer)?;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lp.lr(epoch)?;
        let mut losses = Vec::new();
        for (b, batch) in batcher.next_epoch()?.into_iter().enumerate() {
            let (x, labels) = batch.stacked();
            let step = || -> Result<(f64, crate::model::ParamGrads)> {
                let relations = if cfg.loss.uses_class_labels() {
                    WeightMatrix::from_labels(&labels)
                } else {
                    extract_knowledge(source, &x, cfg.loss_cfg.sigma)?.weights
                };
                let (out, trace) = lp.model.forward(&x)?;
                let grad_out = if cfg.loss.needs_normalized_input() {
                    let unit = l2_normalize_rows(&out)?;
                    let res = cfg.loss.evaluate(&unit, &relations, &cfg.loss_cfg)?;
                    (res.value, l2_normalize_rows_backward(&out, &res.grad)?)
                } else {
                    let res = cfg.loss.evaluate(&out, &relations, &cfg.loss_cfg)?;
                    (res.value, res.grad)
                };
                Ok((grad_out.0, lp.model.backward(&trace, &grad_out.1)?.params))
            };
            let (value, grads) = step().map_err(wrap(epoch, b))?;
            check_finite(value, epoch, b)?;
            lp.apply(&grads, lr).map_err(wrap(epoch, b))?;
            losses.push(value);
        }
        lp.finish_epoch(epoch, &losses, lr, started)?;
    }
    Ok((lp.model, lp.log))
}

/// Settings for cross-entropy classifier training (teacher or plain student).
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Input, hidden..., number of classes.
    pub dims: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_source_augment")]
    pub augment: AugmentConfig,
}

/// Plain cross-entropy training of a classifier.
pub fn train_classifier(ds: &Dataset, cfg: &ClassifierConfig) -> Result<(MlpModel, TrainLog)> {
    classifier_loop(None, ds, cfg, &LossConfig::default(), DistillWeights { hkd: 0.0, relaxed_contrastive: 0.0 }, None)
}

/// Distills a classifier: cross-entropy plus weighted soft-target KL against
/// the teacher's logits plus relaxed contrastive loss on the penultimate
/// features, with relations from the teacher's l2-normalized penultimate
/// features.
pub fn distill_classifier(
    teacher: &MlpModel,
    ds: &Dataset,
    cfg: &ClassifierConfig,
    loss_cfg: &LossConfig,
    weights: DistillWeights,
) -> Result<(MlpModel, TrainLog)> {
    distill_classifier_observed(teacher, ds, cfg, loss_cfg, weights, None)
}

pub fn distill_classifier_observed<'a>(
    teacher: &MlpModel,
    ds: &Dataset,
    cfg: &ClassifierConfig,
    loss_cfg: &LossConfig,
    weights: DistillWeights,
    observer: Option<&'a mut EpochObserver<'a>>,
) -> Result<(MlpModel, TrainLog)> {
    if teacher.output_dim() != last(&cfg.dims) {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student {}",
            teacher.output_dim(),
            last(&cfg.dims)
        )));
    }
    if teacher.input_dim() != ds.dim() {
        return Err(Error::dims(format!("{} input features", teacher.input_dim()), ds.dim()));
    }
    classifier_loop(Some(teacher), ds, cfg, loss_cfg, weights, observer)
}

fn classifier_loop<'a>(
    teacher: Option<&MlpModel>,
    ds: &Dataset,
    cfg: &ClassifierConfig,
    loss_cfg: &LossConfig,
    weights: DistillWeights,
    observer: Option<&'a mut EpochObserver<'a>>,
) -> Result<(MlpModel, TrainLog)> {
    loss_cfg.validate()?;
    if cfg.dims.len() < 3 {
        return Err(Error::Config(format!("classifier dims {:?} need a hidden layer for features", cfg.dims)));
    }
    if cfg.dims[0] != ds.dim() {
        return Err(Error::Config(format!("classifier input dim {} does not match {} features", cfg.dims[0], ds.dim())));
    }
    if last(&cfg.dims) < ds.class_count {
        return Err(Error::Config(format!("{} outputs for {} classes", last(&cfg.dims), ds.class_count)));
    }
    let model = MlpModel::init(&cfg.dims, derive_seed(cfg.seed, INIT_STREAM))?;
    if cfg.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let mut batcher = make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, BATCH_STREAM), cfg.augment)?;
    let mut lp = Loop::new(model, &cfg.optim, cfg.epochs, observer)?;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lp.lr(epoch)?;
        let mut losses = Vec::new();
        for (b, batch) in batcher.next_epoch()?.into_iter().enumerate() {
            let (x, labels) = batch.stacked();
            let step = || -> Result<(f64, crate::model::ParamGrads)> {
                let (logits, trace) = lp.model.forward(&x)?;
                let ce = cross_entropy(&logits, &labels)?;
                let mut value = ce.value;
                let mut grad_out = ce.grad;
                let mut feature_grad = None;
                if let Some(t) = teacher {
                    let (t_feat, t_logits) = t.predict_with_features(&x)?;
                    if weights.hkd > 0.0 {
                        let kd = hkd_kl(&logits, &t_logits, loss_cfg.temperature)?;
                        value += weights.hkd * kd.value;
                        grad_out.add_scaled(&kd.grad, weights.hkd)?;
                    }
                    if weights.relaxed_contrastive > 0.0 {
                        let w = gaussian_weights(&pairwise_distances(&l2_normalize_rows(&t_feat)?)?, loss_cfg.sigma)?;
                        let rc = relaxed_contrastive(trace.penultimate(), &w, loss_cfg.delta)?;
                        value += weights.relaxed_contrastive * rc.value;
                        feature_grad = Some(rc.grad.scale(weights.relaxed_contrastive));
                    }
                }
                let back = lp.model.backward_with_feature_grad(&trace, &grad_out, feature_grad.as_ref())?;
                Ok((value, back.params))
            };
            let (value, grads) = step().map_err(wrap(epoch, b))?;
            check_finite(value, epoch, b)?;
            lp.apply(&grads, lr).map_err(wrap(epoch, b))?;
            losses.push(value);
        }
        lp.finish_epoch(epoch, &losses, lr, started)?;
    }
    Ok((lp.model, lp.log))
}

/// Fraction of rows whose arg-max logit is the true label (lowest index wins ties).
pub fn classification_accuracy(model: &MlpModel, ds: &Dataset) -> Result<f64> {
    let logits = model.predict(&ds.features)?;
    let correct = logits
        .row_iter()
        .zip(&ds.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / ds.len() as f64)
}
