//! Training objectives with closed-form gradients with respect to the
//! embedding matrix.
//!
//! Pair losses are written in terms of per-pair distance derivatives
//! `g_ij = ∂L/∂d_ij` and then pushed onto the embeddings with
//! `∂d_ij/∂f_i = (f_i − f_j)/d_ij`. The relative-distance losses use
//! `r_ij = d_ij / μ_i` with `μ_i = (1/n) Σ_k d_ik`, so every distance in row
//! `i` also moves `μ_i`; that coupling is folded in by [`relative_backward`].
//!
//! Pairs at zero distance contribute no gradient (the direction is undefined
//! and every attracting term vanishes there anyway).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::sum::neumaier;
use crate::numcore::{anchor_means, pairwise_distances, DistanceMatrix, Matrix, WeightMatrix};

/// Hyperparameters shared by the loss family.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin.
    pub delta: f64,
    /// Gaussian kernel bandwidth used to build pair weights.
    pub sigma: f64,
    /// Positive-term scale of the relaxed MS loss.
    pub alpha: f64,
    /// Negative-term scale of the relaxed MS loss.
    pub beta: f64,
    /// Softening temperature for soft-target distillation.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { delta: 1.0, sigma: 1.0, alpha: 1.0, beta: 4.0, temperature: 4.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("sigma", self.sigma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss and its gradient with respect to the input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
}

fn check_pairs(x: &Matrix, w: &WeightMatrix) -> Result<()> {
    if x.rows() != w.n() {
        return Err(Error::dims(format!("{} x {} relation matrix", x.rows(), x.rows()), format!("{} x {}", w.n(), w.n())));
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("empty embedding batch".into()));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput("embedding batch has non-finite entries".into()));
    }
    Ok(())
}

fn check_binary(y: &WeightMatrix) -> Result<()> {
    if !y.is_binary() {
        return Err(Error::InvalidInput("class-equivalence labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Pushes per-ordered-pair distance derivatives onto the embeddings.
fn distance_backward(x: &Matrix, d: &DistanceMatrix, g: impl Fn(usize, usize) -> f64) -> Matrix {
    let n = x.rows();
    let mut grad = Matrix::zeros(n, x.cols());
    for i in 0..n {
        let fi = x.row(i);
        let out = grad.row_mut(i);
        for k in 0..n {
            let dik = d.dist(i, k);
            if k == i || dik == 0.0 {
                continue;
            }
            let coeff = (g(i, k) + g(k, i)) / dik;
            for ((o, a), b) in out.iter_mut().zip(fi).zip(x.row(k)) {
                *o += coeff * (a - b);
            }
        }
    }
    grad
}

/// Given `g_ij = ∂L/∂r_ij`, returns `∂L/∂X` through `r_ij = d_ij/μ_i`.
fn relative_backward(x: &Matrix, d: &DistanceMatrix, mu: &[f64], g: &Matrix) -> Matrix {
    let n = x.rows();
    let nf = n as f64;
    // G_ik = ∂L/∂d_ik holding the mirrored entry fixed
    let mut big_g = Matrix::zeros(n, n);
    for i in 0..n {
        let s = neumaier((0..n).map(|j| g[(i, j)] * d.dist(i, j)));
        for k in 0..n {
            big_g[(i, k)] = g[(i, k)] / mu[i] - s / (nf * mu[i] * mu[i]);
        }
    }
    distance_backward(x, d, |i, k| big_g[(i, k)])
}

/// Derivative of the contrastive loss with respect to one pair distance.
pub fn contrastive_grad_wrt_distance(d: f64, positive: bool, delta: f64, n: usize) -> f64 {
    let scale = 2.0 / n as f64;
    if positive {
        scale * d
    } else if d < delta {
        scale * (d - delta)
    } else {
        0.0
    }
}

/// Original contrastive loss on (already l2-normalized) embeddings with
/// binary class-equivalence labels `y`.
pub fn contrastive(x: &Matrix, y: &WeightMatrix, delta: f64) -> Result<LossResult> {
    check_pairs(x, y)?;
    check_binary(y)?;
    check_delta(delta)?;
    let n = x.rows();
    let d = pairwise_distances(x)?;
    let value = neumaier((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| {
        let dij = d.dist(i, j);
        if y.get(i, j) == 1.0 {
            dij * dij
        } else {
            hinge_sq(delta - dij)
        }
    })) / n as f64;
    let grad = distance_backward(x, &d, |i, j| contrastive_grad_wrt_distance(d.dist(i, j), y.get(i, j) == 1.0, delta, n));
    Ok(LossResult { value, grad })
}

/// Derivative of the absolute relaxed contrastive loss with respect to one
/// pair distance. Vanishes at `d = δ(1 − w)` inside the margin.
pub fn relaxed_contrastive_abs_grad_wrt_distance(d: f64, w: f64, delta: f64, n: usize) -> f64 {
    let scale = 2.0 / n as f64;
    if d < delta {
        scale * (d - delta * (1.0 - w))
    } else {
        scale * w * d
    }
}

/// Relaxed contrastive loss on absolute distances; the caller supplies
/// l2-normalized embeddings.
pub fn relaxed_contrastive_abs(x: &Matrix, w: &WeightMatrix, delta: f64) -> Result<LossResult> {
    check_pairs(x, w)?;
    check_delta(delta)?;
    let n = x.rows();
    let d = pairwise_distances(x)?;
    let value = neumaier(
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| relaxed_term(w.get(i, j), d.dist(i, j), delta)),
    ) / n as f64;
    let grad = distance_backward(x, &d, |i, j| relaxed_contrastive_abs_grad_wrt_distance(d.dist(i, j), w.get(i, j), delta, n));
    Ok(LossResult { value, grad })
}

/// Relaxed contrastive loss on anchor-relative distances. Embeddings are used
/// unnormalized; requires at least three rows and no anchor whose distances
/// to the whole batch are zero.
pub fn relaxed_contrastive(x: &Matrix, w: &WeightMatrix, delta: f64) -> Result<LossResult> {
    check_pairs(x, w)?;
    check_delta(delta)?;
    let n = x.rows();
    let d = pairwise_distances(x)?;
    let mu = anchor_means(&d)?;
    let r = |i: usize, j: usize| d.dist(i, j) / mu[i];
    let value = neumaier((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| relaxed_term(w.get(i, j), r(i, j), delta)))
        / n as f64;
    let scale = 2.0 / n as f64;
    let g = Matrix::from_fn(n, n, |i, j| {
        let (wij, rij) = (w.get(i, j), r(i, j));
        scale * (wij * rij - (1.0 - wij) * (delta - rij).max(0.0))
    });
    Ok(LossResult { value, grad: relative_backward(x, &d, &mu, &g) })
}

/// Ablation of [`relaxed_contrastive`] with binary class labels in place of
/// the relaxed weights.
pub fn unrelaxed_relative(x: &Matrix, y: &WeightMatrix, delta: f64) -> Result<LossResult> {
    check_binary(y)?;
    relaxed_contrastive(x, y, delta)
}

/// Relaxed multi-similarity loss on anchor-relative distances (self-pairs
/// excluded from both inner sums).
pub fn relaxed_ms(x: &Matrix, w: &WeightMatrix, cfg: &LossConfig) -> Result<LossResult> {
    check_pairs(x, w)?;
    cfg.validate()?;
    let (alpha, beta, delta) = (cfg.alpha, cfg.beta, cfg.delta);
    let n = x.rows();
    let d = pairwise_distances(x)?;
    let mu = anchor_means(&d)?;
    let r = |i: usize, j: usize| d.dist(i, j) / mu[i];
    let nf = n as f64;

    let mut terms = Vec::with_capacity(n);
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let pos: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { w.get(i, j) * (alpha * r(i, j)).exp() }).collect();
        let neg: Vec<f64> =
            (0..n).map(|j| if j == i { 0.0 } else { (1.0 - w.get(i, j)) * (beta * (delta - r(i, j))).exp() }).collect();
        let p = neumaier(pos.iter().copied());
        let q = neumaier(neg.iter().copied());
        terms.push(p.ln_1p() / alpha + q.ln_1p() / beta);
        for j in 0..n {
            if j != i {
                g[(i, j)] = (pos[j] / (1.0 + p) - neg[j] / (1.0 + q)) / nf;
            }
        }
    }
    let value = neumaier(terms) / nf;
    if !value.is_finite() {
        return Err(Error::InvalidInput("relaxed MS loss overflowed".into()));
    }
    Ok(LossResult { value, grad: relative_backward(x, &d, &mu, &g) })
}

fn log_softmax_row(z: &[f64], scale: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = max + neumaier(z.iter().map(|&v| (v * scale - max).exp())).ln();
    z.iter().map(|&v| v * scale - lse).collect()
}

/// Temperature-scaled soft-target distillation
/// `T² · mean_i KL(softmax(t_i/T) ‖ softmax(s_i/T))`; gradient is with
/// respect to the student logits only.
pub fn hkd_kl(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<LossResult> {
    if student.shape() != teacher.shape() {
        return Err(Error::dims(format!("{:?}", teacher.shape()), format!("{:?}", student.shape())));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::param("temperature", format!("must be positive, got {temperature}")));
    }
    let (n, c) = student.shape();
    if n == 0 || c == 0 {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    let inv_t = 1.0 / temperature;
    let mut grad = Matrix::zeros(n, c);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let ls = log_softmax_row(student.row(i), inv_t);
        let lt = log_softmax_row(teacher.row(i), inv_t);
        let kl = neumaier(lt.iter().zip(&ls).map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 { 0.0 } else { p * (a - b) }
        }));
        rows.push(kl.max(0.0));
        for (o, (&a, &b)) in grad.row_mut(i).iter_mut().zip(lt.iter().zip(&ls)) {
            *o = temperature * (b.exp() - a.exp()) / n as f64;
        }
    }
    let value = temperature * temperature * neumaier(rows) / n as f64;
    Ok(LossResult { value, grad })
}

/// Mean cross-entropy of integer class labels under softmax logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossResult> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::dims(format!("{n} labels"), format!("{}", labels.len())));
    }
    if n == 0 || c == 0 {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut terms = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { row: i, label: y, classes: c });
        }
        let ls = log_softmax_row(logits.row(i), 1.0);
        terms.push(-ls[y]);
        for (k, (o, l)) in grad.row_mut(i).iter_mut().zip(&ls).enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            *o = (l.exp() - onehot) / n as f64;
        }
    }
    Ok(LossResult { value: neumaier(terms) / n as f64, grad })
}

#[inline]
fn hinge_sq(v: f64) -> f64 {
    let h = v.max(0.0);
    h * h
}

#[inline]
fn relaxed_term(w: f64, dist: f64, delta: f64) -> f64 {
    w * dist * dist + (1.0 - w) * hinge_sq(delta - dist)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param("delta", format!("must be positive and finite, got {delta}")));
    }
    Ok(())
}

/// Objectives available to the transfer engine.
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferLoss {
    RelaxedContrastive,
    RelaxedContrastiveAbs,
    RelaxedMs,
    UnrelaxedRelative,
}

impl TransferLoss {
    pub const ALL: [TransferLoss; 4] =
        [Self::RelaxedContrastive, Self::RelaxedContrastiveAbs, Self::RelaxedMs, Self::UnrelaxedRelative];

    pub fn name(self) -> &'static str {
        match self {
            Self::RelaxedContrastive => "relaxed_contrastive",
            Self::RelaxedContrastiveAbs => "relaxed_contrastive_abs",
            Self::RelaxedMs => "relaxed_ms",
            Self::UnrelaxedRelative => "unrelaxed_relative",
        }
    }

    /// Whether the loss expects l2-normalized target embeddings.
    pub fn needs_normalized_input(self) -> bool {
        matches!(self, Self::RelaxedContrastiveAbs)
    }

    /// Whether the loss is driven by binary class labels rather than source knowledge.
    pub fn uses_class_labels(self) -> bool {
        matches!(self, Self::UnrelaxedRelative)
    }

    /// Evaluates the loss. `relations` is the source weight matrix for relaxed
    /// losses and the binary label matrix for the unrelaxed ablation.
    pub fn evaluate(self, x: &Matrix, relations: &WeightMatrix, cfg: &LossConfig) -> Result<LossResult> {
        match self {
            Self::RelaxedContrastive => relaxed_contrastive(x, relations, cfg.delta),
            Self::RelaxedContrastiveAbs => relaxed_contrastive_abs(x, relations, cfg.delta),
            Self::RelaxedMs => relaxed_ms(x, relations, cfg),
            Self::UnrelaxedRelative => unrelaxed_relative(x, relations, cfg.delta),
        }
    }
}

impl std::str::FromStr for TransferLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}
