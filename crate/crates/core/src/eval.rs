//! Retrieval and generalization diagnostics.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::sum::neumaier;
use crate::numcore::{l2_normalize_rows, singular_values, Exec, Matrix, WeightMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub n_queries: usize,
}

impl RetrievalReport {
    /// Recall at `k`, if it was evaluated.
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&kk| kk == k).map(|i| self.recall[i])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecallOptions {
    /// l2-normalize embeddings before searching (for source models).
    pub normalize: bool,
    pub exec: Exec,
}

/// Recall@K with Euclidean neighbors; each query is excluded from its own
/// neighbor list and distance ties are broken by index.
pub fn recall_at_k(e: &Matrix, labels: &[usize], k_values: &[usize]) -> Result<RetrievalReport> {
    recall_at_k_with(e, labels, k_values, RecallOptions::default())
}

pub fn recall_at_k_with(e: &Matrix, labels: &[usize], k_values: &[usize], opts: RecallOptions) -> Result<RetrievalReport> {
    let n = e.rows();
    if e.is_empty() || n < 2 {
        return Err(Error::InvalidInput(format!("recall needs at least 2 embeddings, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::dims(format!("{n} labels"), labels.len()));
    }
    if k_values.is_empty() {
        return Err(Error::param("k_values", "no K given"));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::param("k_values", format!("K = {k} must lie in [1, {}] for {n} embeddings", n - 1)));
    }
    let normalized;
    let e = if opts.normalize {
        normalized = l2_normalize_rows(e)?;
        &normalized
    } else {
        e
    };
    // rank (0-based) of the first same-class neighbor, or None if there is none
    let first_hit = |q: usize| -> Option<usize> {
        let key = |j: usize| (sq_dist(e.row(q), e.row(j)), j);
        let best = (0..n).filter(|&j| j != q && labels[j] == labels[q]).map(key).min_by(cmp_key)?;
        Some((0..n).filter(|&j| j != q && cmp_key(&key(j), &best) == Ordering::Less).count())
    };
    let ranks: Vec<Option<usize>> = match opts.exec {
        Exec::Deterministic => (0..n).map(first_hit).collect(),
        Exec::Parallel => (0..n).into_par_iter().map(first_hit).collect(),
    };
    let recall = k_values
        .iter()
        .map(|&k| ranks.iter().filter(|r| matches!(r, Some(rank) if *rank < k)).count() as f64 / n as f64)
        .collect();
    Ok(RetrievalReport { k_values: k_values.to_vec(), recall, n_queries: n })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    neumaier(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

fn cmp_key(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub rho: f64,
    /// Normalized singular values, descending, summing to 1.
    pub spectrum: Vec<f64>,
}

/// Spectral decay of an embedding matrix: KL divergence between the
/// normalized singular-value spectrum of the mean-centered embeddings
/// (zero-padded to the embedding width) and the uniform distribution.
pub fn spectral_decay(e: &Matrix) -> Result<SpectralReport> {
    let (n, d) = e.shape();
    if n < 2 || d == 0 {
        return Err(Error::InvalidInput(format!("spectral decay needs at least 2 rows, got {n}x{d}")));
    }
    let means: Vec<f64> = (0..d).map(|j| neumaier((0..n).map(|i| e[(i, j)])) / n as f64).collect();
    let centered = Matrix::from_fn(n, d, |i, j| e[(i, j)] - means[j]);
    let mut sv = singular_values(&centered)?;
    sv.resize(d, 0.0);
    spectral_decay_of(&sv)
}

/// Spectral decay of a given (unnormalized) singular-value spectrum.
pub fn spectral_decay_of(singular: &[f64]) -> Result<SpectralReport> {
    let total = neumaier(singular.iter().copied());
    if singular.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(Error::DegenerateEmbedding("all singular values are zero (identical embeddings)".into()));
    }
    let mut spectrum: Vec<f64> = singular.iter().map(|s| s / total).collect();
    spectrum.sort_by(|a, b| b.total_cmp(a));
    let d = spectrum.len() as f64;
    let rho = neumaier(spectrum.iter().map(|&p| if p > 0.0 { p * (p * d).ln() } else { 0.0 })).max(0.0);
    Ok(SpectralReport { rho, spectrum })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub same_class: bool,
}

/// Highest- and lowest-weight unordered pairs of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRanking {
    /// Descending by weight.
    pub top: Vec<RankedPair>,
    /// Ascending by weight.
    pub bottom: Vec<RankedPair>,
}

impl PairRanking {
    /// Fraction of same-class pairs among `pairs`.
    pub fn same_class_fraction(pairs: &[RankedPair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        pairs.iter().filter(|p| p.same_class).count() as f64 / pairs.len() as f64
    }
}

/// Ranks the `n(n−1)/2` unordered pairs by weight; ties go to the
/// lexicographically smaller `(i, j)`.
pub fn rank_pairs_by_weight(w: &WeightMatrix, labels: &[usize], top: usize) -> Result<PairRanking> {
    let n = w.n();
    if labels.len() != n {
        return Err(Error::dims(format!("{n} labels"), labels.len()));
    }
    let pairs = n * n.saturating_sub(1) / 2;
    if top == 0 || top > pairs {
        return Err(Error::param("top", format!("{top} must lie in [1, {pairs}]")));
    }
    let mut all: Vec<RankedPair> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| RankedPair { i, j, weight: w.get(i, j), same_class: labels[i] == labels[j] })
        .collect();
    let by_index = |a: &RankedPair, b: &RankedPair| (a.i, a.j).cmp(&(b.i, b.j));
    all.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| by_index(a, b)));
    let top_pairs = all[..top].to_vec();
    all.sort_by(|a, b| a.weight.total_cmp(&b.weight).then_with(|| by_index(a, b)));
    let bottom_pairs = all[..top].to_vec();
    Ok(PairRanking { top: top_pairs, bottom: bottom_pairs })
}

impl fmt::Display for PairRanking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (title, rows) in [("top", &self.top), ("bottom", &self.bottom)] {
            writeln!(f, "{title} pairs")?;
            writeln!(f, "{:>6} {:>6} {:>12} {:>6}", "i", "j", "weight", "same")?;
            for p in rows.iter() {
                writeln!(f, "{:>6} {:>6} {:>12.6} {:>6}", p.i, p.j, p.weight, if p.same_class { "yes" } else { "no" })?;
            }
        }
        Ok(())
    }
}
