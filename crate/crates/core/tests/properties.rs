use exf_core::eval::{recall_at_k, spectral_decay};
use exf_core::losses::{
    contrastive, relaxed_contrastive, relaxed_contrastive_abs, relaxed_contrastive_abs_grad_wrt_distance, LossConfig,
    TransferLoss,
};
use exf_core::numcore::{gaussian_weights, pairwise_distances, relative_distances, singular_values, Matrix, WeightMatrix};
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Matrix::new(n, d, v).unwrap())
    })
}

fn weights(n: usize) -> impl Strategy<Value = WeightMatrix> {
    prop::collection::vec(0.0f64..=1.0, n * (n - 1) / 2).prop_map(move |upper| {
        let mut w = vec![1.0; n * n];
        let mut it = upper.into_iter();
        for i in 0..n {
            for j in i + 1..n {
                let v = it.next().unwrap();
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        WeightMatrix::new(n, w).unwrap()
    })
}

fn embedding_with_weights() -> impl Strategy<Value = (Matrix, WeightMatrix)> {
    matrix(3..=12, 1..=6).prop_flat_map(|x| {
        let n = x.rows();
        (Just(x), weights(n))
    })
}

fn embedding_with_labels() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    matrix(2..=12, 1..=6).prop_flat_map(|x| {
        let n = x.rows();
        (Just(x), prop::collection::vec(0usize..3, n))
    })
}

/// Full-sort recall oracle: sort every other point by (squared distance, index).
fn recall_by_sorting(x: &Matrix, labels: &[usize], k: usize) -> f64 {
    let n = x.rows();
    let hits = (0..n)
        .filter(|&q| {
            let mut order: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (x.row(q).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            order[..k].iter().any(|&(_, j)| labels[j] == labels[q])
        })
        .count();
    hits as f64 / n as f64
}

fn is_distinct(x: &Matrix) -> bool {
    let d = pairwise_distances(x).unwrap();
    (0..x.rows()).all(|i| (0..x.rows()).all(|j| i == j || d.dist(i, j) > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distances_satisfy_triangle_inequality(x in matrix(3..=10, 1..=5)) {
        let d = pairwise_distances(&x).unwrap();
        let n = x.rows();
        for i in 0..n {
            prop_assert_eq!(d.dist(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.d2(i, j), d.d2(j, i));
                for k in 0..n {
                    prop_assert!(d.dist(i, k) <= d.dist(i, j) + d.dist(j, k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn gaussian_weights_decrease_with_distance(x in matrix(3..=10, 1..=5), sigma in 0.1f64..5.0) {
        let d = pairwise_distances(&x).unwrap();
        let w = gaussian_weights(&d, sigma).unwrap();
        let n = x.rows();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        for &(a, b) in &pairs {
            for &(c, e) in &pairs {
                if d.d2(a, b) < d.d2(c, e) {
                    prop_assert!(w.get(a, b) >= w.get(c, e));
                }
            }
        }
    }

    #[test]
    fn relative_distances_ignore_scale(x in matrix(3..=10, 1..=5), c in 0.05f64..20.0) {
        prop_assume!(is_distinct(&x));
        let r = relative_distances(&pairwise_distances(&x).unwrap()).unwrap();
        let rc = relative_distances(&pairwise_distances(&x.scale(c)).unwrap()).unwrap();
        prop_assert!(r.max_abs_diff(&rc) < 1e-9);
    }

    #[test]
    fn singular_values_agree_with_transpose_and_frobenius(x in matrix(1..=9, 1..=9)) {
        let s = singular_values(&x).unwrap();
        let st = singular_values(&x.transpose()).unwrap();
        prop_assert_eq!(s.len(), x.rows().min(x.cols()));
        for (a, b) in s.iter().zip(&st) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(s.windows(2).all(|p| p[0] >= p[1]));
        let sumsq: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!((sumsq - x.frobenius_norm_sq()).abs() < 1e-9 * (1.0 + sumsq));
    }

    #[test]
    fn singular_values_match_nalgebra(x in matrix(1..=9, 1..=9)) {
        let s = singular_values(&x).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let mut oracle: Vec<f64> = m.singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in s.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", s, oracle);
        }
    }

    #[test]
    fn spectral_decay_is_scale_invariant_and_nonnegative(x in matrix(2..=10, 1..=6), c in 0.1f64..10.0) {
        prop_assume!(is_distinct(&x));
        let a = spectral_decay(&x).unwrap();
        let b = spectral_decay(&x.scale(c)).unwrap();
        prop_assert!(a.rho >= 0.0);
        prop_assert!((a.rho - b.rho).abs() < 1e-9);
        prop_assert!(a.rho <= (x.cols() as f64).ln() + 1e-12);
    }

    #[test]
    fn recall_matches_full_sort(
        grid in (2usize..=24, 1usize..=4).prop_flat_map(|(n, d)| {
            (prop::collection::vec(-8i32..=8, n * d), prop::collection::vec(0usize..4, n), Just((n, d)))
        })
    ) {
        let (coords, labels, (n, d)) = grid;
        let x = Matrix::new(n, d, coords.into_iter().map(|v| v as f64 / 8.0).collect()).unwrap();
        let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
        let report = recall_at_k(&x, &labels, &ks).unwrap();
        for (&k, &r) in ks.iter().zip(&report.recall) {
            prop_assert_eq!(r, recall_by_sorting(&x, &labels, k));
        }
    }

    #[test]
    fn recall_is_monotone_in_k((x, labels) in embedding_with_labels()) {
        let ks: Vec<usize> = (1..x.rows()).collect();
        let r = recall_at_k(&x, &labels, &ks).unwrap().recall;
        prop_assert!(r.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn transfer_losses_are_nonnegative((x, w) in embedding_with_weights()) {
        prop_assume!(is_distinct(&x));
        let binary = WeightMatrix::from_labels(&(0..x.rows()).map(|i| i % 2).collect::<Vec<_>>());
        for loss in TransferLoss::ALL {
            let relations = if loss.uses_class_labels() { &binary } else { &w };
            let input = if loss.needs_normalized_input() {
                exf_core::numcore::l2_normalize_rows(&x).unwrap()
            } else {
                x.clone()
            };
            let v = loss.evaluate(&input, relations, &LossConfig::default()).unwrap().value;
            prop_assert!(v >= 0.0 && v.is_finite(), "{} = {}", loss.name(), v);
        }
    }

    #[test]
    fn binary_weights_reduce_to_contrastive(
        (x, labels) in embedding_with_labels(),
        delta in 0.2f64..3.0,
    ) {
        let y = WeightMatrix::from_labels(&labels);
        let a = relaxed_contrastive_abs(&x, &y, delta).unwrap();
        let b = contrastive(&x, &y, delta).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert!(a.grad.max_abs_diff(&b.grad) < 1e-12);
    }

    #[test]
    fn relaxed_distance_gradient_vanishes_at_equilibrium(w in 0.0f64..=1.0, delta in 0.1f64..3.0, n in 1usize..64) {
        let eq = delta * (1.0 - w);
        prop_assume!(eq < delta);
        prop_assert!(relaxed_contrastive_abs_grad_wrt_distance(eq, w, delta, n).abs() < 1e-12);
    }

    #[test]
    fn relaxed_contrastive_value_is_scale_invariant((x, w) in embedding_with_weights(), c in 0.1f64..10.0) {
        prop_assume!(is_distinct(&x));
        let a = relaxed_contrastive(&x, &w, 1.0).unwrap();
        let b = relaxed_contrastive(&x.scale(c), &w, 1.0).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-9);
        prop_assert!(a.grad.scale(1.0 / c).max_abs_diff(&b.grad) < 1e-8 * (1.0 + a.grad.frobenius_norm_sq().sqrt()));
    }
}
