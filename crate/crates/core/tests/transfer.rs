use exf_core::data::{augment_views_seeded, generate_clusters, split_by_class, split_by_sample, AugmentConfig, ClusterSpec, Dataset};
use exf_core::eval::recall_at_k;
use exf_core::losses::{hkd_kl, LossConfig, TransferLoss};
use exf_core::model::MlpModel;
use exf_core::numcore::Matrix;
use exf_core::transfer::{
    classification_accuracy, distill_classifier, extract_knowledge, train_classifier, train_source, train_target,
    ClassifierConfig, DistillWeights, OptimConfig, SourceConfig, TransferConfig, TransferMode,
};
use exf_core::Error;

fn clusters(noise: f64, seed: u64) -> Dataset {
    generate_clusters(&ClusterSpec { classes: 8, per_class: 32, dim: 16, separation: 5.0, noise }, seed).unwrap()
}

fn source_cfg(seed: u64, epochs: usize) -> SourceConfig {
    SourceConfig {
        dims: vec![16, 64, 16],
        epochs,
        batch_size: 32,
        seed,
        delta: 1.0,
        optim: OptimConfig { lr: 1e-3, ..Default::default() },
        augment: AugmentConfig::identity(1),
    }
}

fn transfer_cfg(seed: u64, epochs: usize) -> TransferConfig {
    TransferConfig {
        mode: TransferMode::SelfTransfer,
        loss: TransferLoss::RelaxedContrastive,
        loss_cfg: LossConfig::default(),
        source_dims: vec![16, 64, 16],
        target_dims: vec![16, 64, 16],
        epochs,
        batch_size: 32,
        seed,
        optim: OptimConfig { lr: 1e-3, ..Default::default() },
        augment: AugmentConfig { noise_std: 0.3, feature_dropout_prob: 0.0, views: 2 },
        distill: DistillWeights::default(),
    }
}

fn recall1(m: &MlpModel, ds: &Dataset) -> f64 {
    recall_at_k(&m.predict(&ds.features).unwrap(), &ds.labels, &[1]).unwrap().recall[0]
}

#[test]
fn perfect_clusters_give_perfect_source_recall() {
    let ds = clusters(0.0, 5);
    let (source, log) = train_source(&ds, &source_cfg(5, 20)).unwrap();
    assert_eq!(log.records.len(), 20);
    assert_eq!(recall1(&source, &ds), 1.0);
}

#[test]
fn source_training_is_deterministic() {
    let ds = clusters(0.8, 1);
    let (a, la) = train_source(&ds, &source_cfg(3, 5)).unwrap();
    let (b, lb) = train_source(&ds, &source_cfg(3, 5)).unwrap();
    assert_eq!(a.to_flat(), b.to_flat());
    assert_eq!(la.to_jsonl(false), lb.to_jsonl(false));
    let (c, _) = train_source(&ds, &source_cfg(4, 5)).unwrap();
    assert_ne!(a.to_flat(), c.to_flat());
}

#[test]
fn target_training_leaves_source_bit_identical() {
    let ds = clusters(0.8, 2);
    let (train, _) = split_by_class(&ds, 0.5, 2).unwrap();
    let (source, _) = train_source(&train, &source_cfg(2, 3)).unwrap();
    let bits: Vec<u64> = source.to_flat().iter().map(|v| v.to_bits()).collect();
    let (a, la) = train_target(&source, &train, &transfer_cfg(9, 3)).unwrap();
    let after: Vec<u64> = source.to_flat().iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits, after);
    let (b, lb) = train_target(&source, &train, &transfer_cfg(9, 3)).unwrap();
    assert_eq!(a.to_flat(), b.to_flat());
    assert_eq!(la.losses(), lb.losses());
}

#[test]
fn self_transfer_tracks_source_on_unseen_classes() {
    let ds = clusters(0.8, 0);
    let (train, test) = split_by_class(&ds, 0.5, 0).unwrap();
    let (source, _) = train_source(&train, &source_cfg(0, 60)).unwrap();
    let (target, _) = train_target(&source, &train, &transfer_cfg(100, 200)).unwrap();
    let (rs, rt) = (recall1(&source, &test), recall1(&target, &test));
    assert!(rs >= 0.9, "source {rs}");
    assert!(rt >= rs - 0.02, "target {rt} source {rs}");
}

#[test]
fn unknown_loss_tag_is_a_config_error() {
    assert!(matches!("triplet".parse::<TransferLoss>(), Err(Error::Config(_))));
    let mut json = serde_json::to_value(transfer_cfg(0, 1)).unwrap();
    json["loss"] = "triplet".into();
    assert!(serde_json::from_value::<TransferConfig>(json).is_err());
}

#[test]
fn cross_view_pairs_are_near_one_under_mild_augmentation() {
    let ds = clusters(0.8, 3);
    let source = MlpModel::init(&[16, 64, 16], 3).unwrap();
    let x = ds.features.select_rows(&(0..16).collect::<Vec<_>>());
    let cfg = AugmentConfig { noise_std: 0.01, feature_dropout_prob: 0.0, views: 2 };
    let views = augment_views_seeded(&x, &cfg, 3).unwrap();
    let k = extract_knowledge(&source, &Matrix::vstack(&views).unwrap(), 1.0).unwrap();
    for i in 0..16 {
        assert!(k.weights.get(i, i + 16) > 0.99, "view pair {i}: {}", k.weights.get(i, i + 16));
    }
}

fn classifier_cfg(dims: Vec<usize>, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        dims,
        epochs: 200,
        batch_size: 32,
        seed,
        optim: OptimConfig { lr: 3e-3, ..Default::default() },
        augment: AugmentConfig::identity(1),
    }
}

#[test]
fn hkd_starts_at_zero_for_an_identical_teacher() {
    let cfg = classifier_cfg(vec![16, 8, 8], 4);
    let ds = clusters(1.0, 4);
    let teacher = MlpModel::init(&cfg.dims, 0).unwrap();
    let student = teacher.clone();
    let v = hkd_kl(&student.predict(&ds.features).unwrap(), &teacher.predict(&ds.features).unwrap(), 4.0).unwrap().value;
    assert!(v.abs() < 1e-12);
}

#[test]
fn distillation_beats_plain_cross_entropy_on_most_seeds() {
    let mut wins = 0;
    for seed in 0..5u64 {
        let ds = clusters(1.0, seed);
        let (train, test) = split_by_sample(&ds, 0.5, seed).unwrap();
        let (teacher, _) = train_classifier(&train, &classifier_cfg(vec![16, 64, 8], seed)).unwrap();
        let student = classifier_cfg(vec![16, 8, 8], seed + 7);
        let (plain, _) = train_classifier(&train, &student).unwrap();
        let (distilled, _) =
            distill_classifier(&teacher, &train, &student, &LossConfig::default(), DistillWeights::default()).unwrap();
        let (p, d) = (classification_accuracy(&plain, &test).unwrap(), classification_accuracy(&distilled, &test).unwrap());
        if d >= p {
            wins += 1;
        }
    }
    assert!(wins >= 4, "distilled student won {wins} of 5");
}
