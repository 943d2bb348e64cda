//! Datasets of feature vectors: synthetic Gaussian clusters, CSV and binary
//! files, class-disjoint splits, multi-view augmentation and batching.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

const BINARY_MAGIC: &[u8; 4] = b"EXF1";
const CENTER_RETRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize, split: SplitTag) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::dims(format!("{} labels", features.rows()), labels.len()));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::LabelOutOfRange { row, label, classes: class_count });
        }
        if !features.is_finite() {
            return Err(Error::InvalidInput("dataset has non-finite features".into()));
        }
        Ok(Self { features, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn subset(&self, rows: &[usize], split: SplitTag) -> Result<Self> {
        Self::new(
            self.features.select_rows(rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
            split,
        )
    }
}

/// Parameters for [`generate_clusters`].
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
}

/// Isotropic Gaussian clusters around rejection-sampled centers.
///
/// Centers are drawn uniformly from `[0, separation]^dim` and kept only if
/// they lie at least `separation` from every accepted center.
pub fn generate_clusters(spec: &ClusterSpec, seed: u64) -> Result<Dataset> {
    let ClusterSpec { classes, per_class, dim, separation, noise } = *spec;
    if classes < 2 {
        return Err(Error::param("classes", format!("need at least 2, got {classes}")));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::param("per_class", "per_class and dim must be positive"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::param("separation", format!("must be positive, got {separation}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param("noise", format!("must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let mut placed = false;
        for _ in 0..CENTER_RETRIES {
            let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * separation).collect();
            let far = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= separation * separation
            });
            if far {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleGeometry(format!(
                "could not place center {} of {classes} in {dim} dims after {CENTER_RETRIES} draws",
                centers.len() + 1
            )));
        }
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cv in c {
                let z: f64 = rng.sample(StandardNormal);
                data.push(cv + noise * z);
            }
            labels.push(label);
        }
    }
    Dataset::new(Matrix::new(classes * per_class, dim, data)?, labels, classes, SplitTag::Train)
}

/// Class-disjoint split: a random `train_fraction` of the classes (rounded)
/// goes to train, the rest to test.
pub fn split_by_class(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut classes = ds.classes();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes to split, found {}", classes.len())));
    }
    let n_train = (train_fraction * classes.len() as f64).round() as usize;
    if !(0.0..=1.0).contains(&train_fraction) || n_train == 0 || n_train == classes.len() {
        return Err(Error::param(
            "train_fraction",
            format!("{train_fraction} of {} classes leaves one side empty", classes.len()),
        ));
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_classes: BTreeSet<usize> = classes[..n_train].iter().copied().collect();
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| train_classes.contains(&ds.labels[i]));
    Ok((ds.subset(&train_rows, SplitTag::Train)?, ds.subset(&test_rows, SplitTag::Test)?))
}

/// Sample-level split within every class, for classification tasks where
/// train and test share the label set.
pub fn split_by_sample(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param("train_fraction", format!("must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
    for c in ds.classes() {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        rows.shuffle(&mut rng);
        let k = ((train_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len().saturating_sub(1).max(1));
        train_rows.extend_from_slice(&rows[..k]);
        test_rows.extend_from_slice(&rows[k..]);
    }
    if test_rows.is_empty() {
        return Err(Error::param("train_fraction", "test side is empty"));
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok((ds.subset(&train_rows, SplitTag::Train)?, ds.subset(&test_rows, SplitTag::Test)?))
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub feature_dropout_prob: f64,
    pub views: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_std: 0.0, feature_dropout_prob: 0.0, views: 2 }
    }
}

impl AugmentConfig {
    pub fn identity(views: usize) -> Self {
        Self { noise_std: 0.0, feature_dropout_prob: 0.0, views }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::param("noise_std", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_prob) {
            return Err(Error::param("feature_dropout_prob", "must lie in [0, 1)"));
        }
        if self.views == 0 {
            return Err(Error::param("views", "need at least one view"));
        }
        Ok(())
    }
}

/// `cfg.views` independently perturbed copies of `x`: additive Gaussian noise,
/// then each feature zeroed with probability `feature_dropout_prob`.
pub fn augment_views(x: &Matrix, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let mut views = Vec::with_capacity(cfg.views);
    for _ in 0..cfg.views {
        let mut v = x.clone();
        if cfg.noise_std > 0.0 || cfg.feature_dropout_prob > 0.0 {
            for e in v.data_mut() {
                if cfg.noise_std > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    *e += cfg.noise_std * z;
                }
                if cfg.feature_dropout_prob > 0.0 && rng.random::<f64>() < cfg.feature_dropout_prob {
                    *e = 0.0;
                }
            }
        }
        views.push(v);
    }
    Ok(views)
}

/// Seeded convenience wrapper around [`augment_views`].
pub fn augment_views_seeded(x: &Matrix, cfg: &AugmentConfig, seed: u64) -> Result<Vec<Matrix>> {
    augment_views(x, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A minibatch with all of its augmented views.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub views: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Views concatenated row-wise and the matching per-row labels.
    pub fn stacked(&self) -> (Matrix, Vec<usize>) {
        let x = Matrix::vstack(&self.views).expect("views share a shape");
        let labels = self.views.iter().flat_map(|_| self.labels.iter().copied()).collect();
        (x, labels)
    }

    pub fn effective_len(&self) -> usize {
        self.indices.len() * self.views.len()
    }
}

/// Epoch-by-epoch batch source. One RNG stream drives both the permutations
/// and the augmentation, so a run is reproducible end to end from its seed.
#[derive(Debug)]
pub struct Batcher<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
}

/// Builds a [`Batcher`]. Partial trailing batches are dropped.
pub fn make_batches<'a>(ds: &'a Dataset, batch_size: usize, seed: u64, augment: AugmentConfig) -> Result<Batcher<'a>> {
    augment.validate()?;
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::param("batch_size", format!("{batch_size} must lie in [1, {}]", ds.len())));
    }
    if batch_size * augment.views < 3 {
        return Err(Error::param(
            "batch_size",
            format!("{batch_size} x {} views gives fewer than 3 rows per batch", augment.views),
        ));
    }
    Ok(Batcher { ds, batch_size, augment, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl Batcher<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len() / self.batch_size
    }

    /// Draws the next epoch's batches.
    pub fn next_epoch(&mut self) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.ds.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks_exact(self.batch_size)
            .map(|idx| {
                let x = self.ds.features.select_rows(idx);
                let views = augment_views(&x, &self.augment, &mut self.rng)?;
                Ok(Batch { indices: idx.to_vec(), views, labels: idx.iter().map(|&i| self.ds.labels[i]).collect() })
            })
            .collect()
    }
}

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Binary,
}

impl DataFormat {
    /// `.csv` → CSV, anything else → binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Binary,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

/// Loads a dataset; `class_count` is one more than the largest label.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let (features, labels) = match format {
        DataFormat::Csv => read_csv(BufReader::new(file))?,
        DataFormat::Binary => read_binary(BufReader::new(file), path)?,
    };
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, class_count, SplitTag::Train)
}

fn read_csv(reader: impl Read) -> Result<(Matrix, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::Parse { line: 1, message: "header must start with `label`".into() });
    }
    let dim = header.len() - 1;
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Parse { line: 1, message: format!("expected column `f{k}`, found `{name}`") });
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                message: format!("row {} has {} fields, expected {}", labels.len(), rec.len(), dim + 1),
            });
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("invalid label `{}`", &rec[0]) })?;
        labels.push(label);
        for (k, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("invalid value `{field}` in column f{k}") })?;
            data.push(v);
        }
    }
    Ok((Matrix::new(labels.len(), dim, data)?, labels))
}

fn read_binary(mut reader: impl Read, path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(io_err(path))?;
    let truncated = |offset: usize| Error::Parse { line: 0, message: format!("truncated binary dataset at byte {offset}") };
    if buf.len() < 12 || &buf[..4] != BINARY_MAGIC {
        return Err(Error::Parse { line: 0, message: "missing EXF1 magic".into() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let n = u32_at(4) as usize;
    let d = u32_at(8) as usize;
    let record = 4 + 8 * d;
    let expected = 12 + n * record;
    if buf.len() < expected {
        return Err(truncated(buf.len()));
    }
    if buf.len() > expected {
        return Err(Error::Parse { line: 0, message: format!("{} trailing bytes after {n} records", buf.len() - expected) });
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        let base = 12 + r * record;
        labels.push(u32_at(base) as usize);
        for k in 0..d {
            let o = base + 4 + 8 * k;
            data.push(f64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes")));
        }
    }
    Ok((Matrix::new(n, d, data)?, labels))
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        DataFormat::Csv => {
            let mut header = String::from("label");
            for k in 0..ds.dim() {
                header.push_str(&format!(",f{k}"));
            }
            writeln!(w, "{header}").map_err(io_err(path))?;
            for (i, row) in ds.features.row_iter().enumerate() {
                let mut line = ds.labels[i].to_string();
                for v in row {
                    // `{:?}` prints the shortest representation that round-trips
                    line.push_str(&format!(",{v:?}"));
                }
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
        }
        DataFormat::Binary => {
            let n = u32::try_from(ds.len()).map_err(|_| Error::InvalidInput("too many rows for EXF1".into()))?;
            let d = u32::try_from(ds.dim()).map_err(|_| Error::InvalidInput("too many columns for EXF1".into()))?;
            let mut buf = Vec::with_capacity(12 + ds.len() * (4 + 8 * ds.dim()));
            buf.extend_from_slice(BINARY_MAGIC);
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(&d.to_le_bytes());
            for (i, row) in ds.features.row_iter().enumerate() {
                let label = u32::try_from(ds.labels[i]).map_err(|_| Error::InvalidInput("label exceeds u32".into()))?;
                buf.extend_from_slice(&label.to_le_bytes());
                for v in row {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}
