//! Masked multi-site genome-wide association pipeline.
//!
//! Parties holding horizontally partitioned genotypes, phenotypes and
//! covariates cooperate through an untrusted server that only ever sees
//! seed-masked matrices. The stages are quality control by additive shares,
//! covariate projection by triple matrix masking, blockwise Level-0 ridge
//! solved by consensus ADMM, stacked Level-1 ridge solved by conjugate
//! gradients, and single-SNP chi-square testing. [`oracle`] is the plaintext
//! centralized reference every stage is checked against.

pub mod error;
pub mod linalg;
pub mod seedcraft;
pub mod blockstore;
pub mod synthgen;
pub mod qc;
pub mod transform;
pub mod ridge_l0;
pub mod ridge_l1;
pub mod assoc;
pub mod config;
pub mod oracle;

pub use error::{Error, Result};
