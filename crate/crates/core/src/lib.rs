//! Embedding transfer with relaxed pairwise labels.
//!
//! A frozen source embedding model supplies Gaussian-kernel similarities
//! between the samples of each batch; a target model is trained to reproduce
//! that relational structure with the relaxed contrastive loss (or one of its
//! variants) on scale-free, anchor-relative distances.
//!
//! Modules, bottom-up:
//! - [`numcore`]: matrices, pairwise geometry, singular values
//! - [`losses`]: objectives with closed-form gradients
//! - [`model`]: fully-connected network with forward/backward passes
//! - [`optim`]: AdamW and the cosine schedule
//! - [`data`]: synthetic clusters, dataset files, splits, augmentation, batching
//! - [`transfer`]: source training, knowledge extraction, target training, distillation
//! - [`eval`]: Recall@K, spectral decay, pair ranking
//! - [`gradcheck`]: finite-difference verification of every gradient

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod transfer;

pub use error::{Error, Result};
