//! Central finite-difference verification of every analytical gradient.
//!
//! The error of one instance is the largest entrywise
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)` where the floor
//! is `1e-3` of the largest analytic entry (and at least `1e-8`). Without it,
//! entries that are exactly zero analytically (e.g. output biases under a
//! translation-invariant loss) would be judged against pure roundoff.
//! MLP instances whose rectifier pre-activations sit within `1e-3` of the
//! kink are redrawn, since the derivative does not exist there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    contrastive, cross_entropy, hkd_kl, relaxed_contrastive, relaxed_contrastive_abs, relaxed_ms, unrelaxed_relative,
    LossConfig, LossResult,
};
use crate::model::MlpModel;
use crate::numcore::{gaussian_weights, l2_normalize_rows, pairwise_distances, Matrix, WeightMatrix};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR_FRACTION: f64 = 1e-3;
const FLOOR_MIN: f64 = 1e-8;
const KINK_MARGIN: f64 = 1e-3;

/// Names of all checked operations, in report order.
pub const OPS: [&str; 9] = [
    "contrastive",
    "relaxed_contrastive_abs",
    "relaxed_contrastive",
    "unrelaxed_relative",
    "relaxed_ms(alpha=1,beta=4)",
    "relaxed_ms(alpha=1,beta=2)",
    "hkd_kl",
    "cross_entropy",
    "mlp_backward",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub trials: usize,
    /// Test hook: perturb the analytical gradient of the named op.
    pub corrupt: Option<String>,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (FLOOR_FRACTION * scale).max(FLOOR_MIN);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a matrix.
pub fn numeric_gradient(x: &Matrix, f: impl Fn(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + STEP;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - STEP;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * STEP);
    }
    Ok(grad)
}

/// Compares a loss gradient with central differences at `x`.
pub fn check_loss(x: &Matrix, loss: impl Fn(&Matrix) -> Result<LossResult>) -> Result<f64> {
    check_loss_corrupted(x, loss, false)
}

fn check_loss_corrupted(x: &Matrix, loss: impl Fn(&Matrix) -> Result<LossResult>, corrupt: bool) -> Result<f64> {
    let mut analytic = loss(x)?.grad;
    if corrupt {
        corrupt_in_place(analytic.data_mut());
    }
    let numeric = numeric_gradient(x, |p| Ok(loss(p)?.value))?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// Scales the gradient by 1.01, an error two orders above the tolerance.
fn corrupt_in_place(g: &mut [f64]) {
    g.iter_mut().for_each(|v| *v *= 1.01);
}

fn seed_for(base: u64, op: &str, trial: usize) -> u64 {
    // FNV-1a over the op name keeps per-op streams independent of op order
    let h = op.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    base ^ h ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

struct PairInstance {
    x: Matrix,
    x_unit: Matrix,
    w: WeightMatrix,
    y: WeightMatrix,
}

fn pair_instance(rng: &mut ChaCha8Rng) -> Result<PairInstance> {
    let n = rng.random_range(3..=16);
    let d = rng.random_range(2..=8);
    let x = gaussian(n, d, rng);
    let x_unit = l2_normalize_rows(&x)?;
    let source = l2_normalize_rows(&gaussian(n, rng.random_range(2..=8), rng))?;
    let w = gaussian_weights(&pairwise_distances(&source)?, rng.random_range(0.25..4.0))?;
    let classes = rng.random_range(1..=4);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok(PairInstance { x, x_unit, w, y: WeightMatrix::from_labels(&labels) })
}

/// Error of one instance of `op`.
pub fn check_instance(op: &str, seed: u64) -> Result<f64> {
    check_instance_impl(op, seed, false)
}

fn check_instance_impl(op: &str, seed: u64, corrupt: bool) -> Result<f64> {
    let check_loss = |x: &Matrix, f: &dyn Fn(&Matrix) -> Result<LossResult>| check_loss_corrupted(x, f, corrupt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = 1.0;
    match op {
        "contrastive" => {
            let p = pair_instance(&mut rng)?;
            check_loss(&p.x_unit, &|x| contrastive(x, &p.y, delta))
        }
        "relaxed_contrastive_abs" => {
            let p = pair_instance(&mut rng)?;
            check_loss(&p.x_unit, &|x| relaxed_contrastive_abs(x, &p.w, delta))
        }
        "relaxed_contrastive" => {
            let p = pair_instance(&mut rng)?;
            check_loss(&p.x, &|x| relaxed_contrastive(x, &p.w, delta))
        }
        "unrelaxed_relative" => {
            let p = pair_instance(&mut rng)?;
            check_loss(&p.x, &|x| unrelaxed_relative(x, &p.y, delta))
        }
        "relaxed_ms(alpha=1,beta=4)" | "relaxed_ms(alpha=1,beta=2)" => {
            let beta = if op.ends_with("beta=4)") { 4.0 } else { 2.0 };
            let cfg = LossConfig { alpha: 1.0, beta, ..LossConfig::default() };
            let p = pair_instance(&mut rng)?;
            check_loss(&p.x, &|x| relaxed_ms(x, &p.w, &cfg))
        }
        "hkd_kl" => {
            let n = rng.random_range(3..=16);
            let c = rng.random_range(2..=8);
            let t = rng.random_range(1.0..6.0);
            let teacher = gaussian(n, c, &mut rng).scale(2.0);
            let student = gaussian(n, c, &mut rng).scale(2.0);
            check_loss(&student, &|s| hkd_kl(s, &teacher, t))
        }
        "cross_entropy" => {
            let n = rng.random_range(3..=16);
            let c = rng.random_range(2..=8);
            let logits = gaussian(n, c, &mut rng).scale(2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            check_loss(&logits, &|z| cross_entropy(z, &labels))
        }
        "mlp_backward" => check_mlp(&mut rng, corrupt),
        other => Err(Error::InvalidInput(format!("unknown gradcheck op `{other}`"))),
    }
}

/// End-to-end check of `relaxed_contrastive ∘ forward` over every parameter
/// and the input.
fn check_mlp(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    loop {
        let n = rng.random_range(3..=16);
        let d = rng.random_range(2..=8);
        let hidden = rng.random_range(2..=8);
        let out = rng.random_range(2..=8);
        let model = MlpModel::init(&[d, hidden, out], rng.random())?;
        let x = gaussian(n, d, rng);
        let (_, trace) = model.forward(&x)?;
        if trace.hidden_preactivations().any(|z| z.abs() < KINK_MARGIN) {
            continue;
        }
        let source = l2_normalize_rows(&gaussian(n, 4, rng))?;
        let w = gaussian_weights(&pairwise_distances(&source)?, 1.0)?;
        let loss = |m: &MlpModel, input: &Matrix| -> Result<LossResult> { relaxed_contrastive(&m.predict(input)?, &w, 1.0) };

        let res = loss(&model, &x)?;
        let back = model.backward(&trace, &res.grad)?;
        let mut analytic: Vec<f64> = back.params.flat().into_iter().chain(back.grad_in.data().iter().copied()).collect();

        if corrupt {
            corrupt_in_place(&mut analytic);
        }
        let flat = model.to_flat();
        let dims = model.layer_dims().to_vec();
        let flat_m = Matrix::new(1, flat.len(), flat)?;
        let num_params = numeric_gradient(&flat_m, |p| Ok(loss(&MlpModel::from_flat(&dims, p.data())?, &x)?.value))?;
        let num_input = numeric_gradient(&x, |xi| Ok(loss(&model, xi)?.value))?;
        let numeric: Vec<f64> = num_params.data().iter().chain(num_input.data()).copied().collect();
        return Ok(relative_error(&analytic, &numeric));
    }
}

/// Runs `trials` instances of every op.
pub fn run(opts: &GradCheckOptions) -> Result<Vec<OpReport>> {
    if opts.trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    if let Some(c) = &opts.corrupt {
        if !OPS.contains(&c.as_str()) {
            return Err(Error::InvalidInput(format!("unknown gradcheck op `{c}`")));
        }
    }
    OPS.iter()
        .map(|&op| {
            let mut worst = (0.0f64, seed_for(opts.seed, op, 0));
            for t in 0..opts.trials {
                let s = seed_for(opts.seed, op, t);
                let err = check_instance_impl(op, s, opts.corrupt.as_deref() == Some(op))?;
                if err > worst.0 || !err.is_finite() {
                    worst = (if err.is_finite() { err } else { f64::INFINITY }, s);
                }
            }
            Ok(OpReport {
                op: op.to_string(),
                instances: opts.trials,
                max_rel_err: worst.0,
                worst_seed: worst.1,
                passed: worst.0 < TOLERANCE,
            })
        })
        .collect()
}
