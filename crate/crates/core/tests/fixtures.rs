//! Hand-computed loss fixtures. The expected constants are printed by
//! `tests/oracles/fixtures.py`; the brute-force functions below re-derive the
//! same sums independently of the library for random instances.

use approx::assert_abs_diff_eq;
use exf_core::losses::{hkd_kl, relaxed_contrastive, relaxed_ms, unrelaxed_relative, LossConfig};
use exf_core::numcore::{Matrix, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture() -> (Matrix, WeightMatrix) {
    let x = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
    let w = WeightMatrix::new(3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.5, 0.0, 0.5, 1.0]).unwrap();
    (x, w)
}

fn brute_relative(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d: Vec<Vec<f64>> = x
        .iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()).collect())
        .collect();
    d.iter()
        .map(|row| {
            let mu = row.iter().sum::<f64>() / n as f64;
            row.iter().map(|v| v / mu).collect()
        })
        .collect()
}

fn brute_relaxed_contrastive(x: &[Vec<f64>], w: &[Vec<f64>], delta: f64) -> f64 {
    let r = brute_relative(x);
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += w[i][j] * r[i][j].powi(2) + (1.0 - w[i][j]) * (delta - r[i][j]).max(0.0).powi(2);
        }
    }
    total / n as f64
}

fn brute_relaxed_ms(x: &[Vec<f64>], w: &[Vec<f64>], alpha: f64, beta: f64, delta: f64) -> f64 {
    let r = brute_relative(x);
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mut pos, mut neg) = (0.0, 0.0);
        for j in (0..n).filter(|&j| j != i) {
            pos += w[i][j] * (alpha * r[i][j]).exp();
            neg += (1.0 - w[i][j]) * (beta * (delta - r[i][j])).exp();
        }
        total += (1.0 + pos).ln() / alpha + (1.0 + neg).ln() / beta;
    }
    total / n as f64
}

#[test]
fn relaxed_contrastive_fixture() {
    let (x, w) = fixture();
    let v = relaxed_contrastive(&x, &w, 1.0).unwrap().value;
    assert_abs_diff_eq!(v, 1.4275, epsilon = 1e-6);
}

#[test]
fn relaxed_ms_fixture() {
    let (x, w) = fixture();
    let cfg = LossConfig { alpha: 1.0, beta: 2.0, ..LossConfig::default() };
    let v = relaxed_ms(&x, &w, &cfg).unwrap().value;
    assert_abs_diff_eq!(v, 1.4685, epsilon = 1e-3);
    assert_abs_diff_eq!(v, 1.468515471600907, epsilon = 1e-12);
}

#[test]
fn unrelaxed_equal_spacing_fixture() {
    let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
    let y = WeightMatrix::from_labels(&[0, 0, 0]);
    let v = unrelaxed_relative(&x, &y, 1.0).unwrap().value;
    assert_abs_diff_eq!(v, 4.833333333333333, epsilon = 1e-12);
}

#[test]
fn hkd_fixture() {
    let s = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
    let t = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
    assert_abs_diff_eq!(hkd_kl(&s, &t, 1.0).unwrap().value, 0.32781332547273756, epsilon = 1e-12);
}

#[test]
fn library_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let n = rng.random_range(3..=12);
        let d = rng.random_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut w = vec![vec![1.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in i + 1..n {
                let v: f64 = rng.random();
                w[i][j] = v;
                w[j][i] = v;
            }
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let wm = WeightMatrix::new(n, w.concat()).unwrap();
        let delta = rng.random_range(0.5..1.5);
        let cfg = LossConfig { delta, ..LossConfig::default() };
        let got = relaxed_contrastive(&x, &wm, delta).unwrap().value;
        assert_abs_diff_eq!(got, brute_relaxed_contrastive(&rows, &w, delta), epsilon = 1e-10);
        let got = relaxed_ms(&x, &wm, &cfg).unwrap().value;
        assert_abs_diff_eq!(got, brute_relaxed_ms(&rows, &w, cfg.alpha, cfg.beta, delta), epsilon = 1e-10);
    }
}
