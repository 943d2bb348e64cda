//! Pairwise geometry of embedding batches: distances, row normalization,
//! Gaussian similarity weights and anchor-relative distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::sum::neumaier;
use crate::error::{Error, Result};

/// Execution mode for row-parallel kernels.
///
/// Every kernel computes each output entry independently with a fixed
/// summation order, so both modes produce bit-identical results. `Parallel`
/// only changes which thread computes which row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    #[default]
    Deterministic,
    Parallel,
}

/// Squared and plain Euclidean distances between all rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d2: Vec<f64>,
    dist: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d2(&self, i: usize, j: usize) -> f64 {
        self.d2[i * self.n + j]
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn squared(&self) -> Matrix {
        Matrix::new(self.n, self.n, self.d2.clone()).expect("square")
    }

    pub fn euclidean(&self) -> Matrix {
        Matrix::new(self.n, self.n, self.dist.clone()).expect("square")
    }

    /// Distances multiplied by `c > 0` (squared distances by `c²`).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            d2: self.d2.iter().map(|v| v * c * c).collect(),
            dist: self.dist.iter().map(|v| v * c).collect(),
        }
    }
}

/// Symmetric pair weights in `[0, 1]` with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    /// Validates symmetry, unit diagonal and range.
    pub fn new(n: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n {
            return Err(Error::dims(format!("{n}x{n} weights"), format!("{} entries", w.len())));
        }
        for i in 0..n {
            if w[i * n + i] != 1.0 {
                return Err(Error::InvalidInput(format!("weight diagonal ({i},{i}) must be 1")));
            }
            for j in 0..n {
                let v = w[i * n + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("weight ({i},{j}) = {v} outside [0,1]")));
                }
                if v != w[j * n + i] {
                    return Err(Error::InvalidInput(format!("weights not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, w })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::dims("square matrix", format!("{:?}", m.shape())));
        }
        Self::new(m.rows(), m.data().to_vec())
    }

    /// Binary class-equivalence labels: `y[i][j] = 1` iff `labels[i] == labels[j]`.
    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    w[i * n + j] = 1.0;
                }
            }
        }
        Self { n, w }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn is_binary(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::new(self.n, self.n, self.w.clone()).expect("square")
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    neumaier(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

/// Euclidean distances between every pair of rows.
pub fn pairwise_distances(x: &Matrix) -> Result<DistanceMatrix> {
    pairwise_distances_with(x, Exec::Deterministic)
}

pub fn pairwise_distances_with(x: &Matrix, exec: Exec) -> Result<DistanceMatrix> {
    if x.is_empty() {
        return Err(Error::InvalidInput("pairwise distances of an empty matrix".into()));
    }
    let n = x.rows();
    // upper triangle per row, then mirrored so the result is exactly symmetric
    let upper = |i: usize| -> Vec<f64> { ((i + 1)..n).map(|j| squared_distance(x.row(i), x.row(j))).collect() };
    let rows: Vec<Vec<f64>> = match exec {
        Exec::Deterministic => (0..n).map(upper).collect(),
        Exec::Parallel => (0..n).into_par_iter().map(upper).collect(),
    };
    let mut d2 = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let dist = d2.iter().map(|v| v.sqrt()).collect();
    Ok(DistanceMatrix { n, d2, dist })
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let norm = neumaier(x.row(i).iter().map(|v| v * v)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Backpropagates `grad_out` (w.r.t. the normalized rows) through
/// [`l2_normalize_rows`]: `∂/∂x = (g − u (u·g)) / ‖x‖` with `u = x/‖x‖`.
pub fn l2_normalize_rows_backward(x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if x.shape() != grad_out.shape() {
        return Err(Error::dims(format!("{:?}", x.shape()), format!("{:?}", grad_out.shape())));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let norm = neumaier(row.iter().map(|v| v * v)).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        let g = grad_out.row(i);
        let ug = neumaier(row.iter().zip(g).map(|(a, b)| a / norm * b));
        for ((o, &a), &b) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = (b - a / norm * ug) / norm;
        }
    }
    Ok(out)
}

/// Gaussian-kernel similarity `w_ij = exp(−‖f_i − f_j‖² / σ)`.
pub fn gaussian_weights(d: &DistanceMatrix, sigma: f64) -> Result<WeightMatrix> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::param("sigma", format!("must be positive and finite, got {sigma}")));
    }
    let n = d.n();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = if i == j { 1.0 } else { (-d.d2(i, j) / sigma).exp() };
        }
    }
    Ok(WeightMatrix { n, w })
}

/// Per-anchor mean distance `μ_i = (1/n) Σ_k d_ik`, the self-pair included.
pub fn anchor_means(d: &DistanceMatrix) -> Result<Vec<f64>> {
    let n = d.n();
    if n < 3 {
        return Err(Error::BatchTooSmall { n, min: 3 });
    }
    (0..n)
        .map(|i| {
            let mu = neumaier((0..n).map(|k| d.dist(i, k))) / n as f64;
            if mu > 0.0 {
                Ok(mu)
            } else {
                Err(Error::DegenerateBatch { row: i })
            }
        })
        .collect()
}

/// Relative distances `r_ij = d_ij / μ_i`. Not symmetric in general.
pub fn relative_distances(d: &DistanceMatrix) -> Result<Matrix> {
    let mu = anchor_means(d)?;
    let n = d.n();
    Ok(Matrix::from_fn(n, n, |i, j| d.dist(i, j) / mu[i]))
}
