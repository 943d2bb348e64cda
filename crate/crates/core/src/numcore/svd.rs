//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working matrix are rotated pairwise until every pair is
//! orthogonal to within `TOL` relative to the product of their norms; the
//! singular values are then the column norms.

use super::matrix::Matrix;
use super::sum::neumaier;
use crate::error::{Error, Result};

const TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 60;

/// Singular values of `x`, sorted descending; `min(rows, cols)` of them.
pub fn singular_values(x: &Matrix) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidInput("singular values of an empty matrix".into()));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    // work on the narrower side: k columns of length m with m >= k
    let (m, k) = (x.rows().max(x.cols()), x.rows().min(x.cols()));
    let mut cols: Vec<Vec<f64>> = if x.rows() >= x.cols() {
        (0..k).map(|j| (0..m).map(|i| x[(i, j)]).collect()).collect()
    } else {
        (0..k).map(|i| x.row(i).to_vec()).collect()
    };

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (a, b) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (ap, aq) = (*a, *b);
                    *a = c * ap - s * aq;
                    *b = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    neumaier(a.iter().zip(b).map(|(x, y)| x * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity() {
        assert_eq!(singular_values(&Matrix::identity(2)).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn rank_one() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let s = singular_values(&x).unwrap();
        assert_abs_diff_eq!(s[0], 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_sorted() {
        let x = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        assert_eq!(singular_values(&x).unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn wide_matrix_has_min_dim_values() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let s = singular_values(&x).unwrap();
        assert_eq!(s.len(), 1);
        assert_abs_diff_eq!(s[0], 14f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(singular_values(&Matrix::zeros(0, 0)).is_err());
        let x = Matrix::from_rows(&[[f64::NAN]]).unwrap();
        assert!(singular_values(&x).is_err());
    }
}
