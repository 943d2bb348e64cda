//! Dense matrix primitives, pairwise geometry, similarity kernels and
//! singular values.

mod geometry;
mod matrix;
pub mod sum;
mod svd;

pub use geometry::{
    anchor_means, gaussian_weights, l2_normalize_rows, l2_normalize_rows_backward, pairwise_distances,
    pairwise_distances_with, relative_distances, DistanceMatrix, Exec, WeightMatrix,
};
pub use matrix::Matrix;
pub use svd::singular_values;
