//! Open-set diagnosis workbench.
//!
//! The crate is organised bottom-up:
//!
//! - [`kbmodel`]: knowledge-base data model and a seeded synthetic generator.
//! - [`casesim`]: clinical vignette simulation from a knowledge base.
//! - [`numerics`]: dense matrices, Jacobi eigendecomposition, softmax, entropy.
//! - [`splits`]: PCA nearest-neighbour label splits, Task 1 datasets, Task 2 site plans.
//! - [`openset`]: the 2-layer MLP with CE / BG / EOS losses, Adam and early stopping.
//! - [`ensemble`]: max-confidence and mixture-of-experts fusion of site experts.
//! - [`metrics`]: OSCR curves, CCR@FPR, recall@k and entropy histograms.

pub mod casesim;
pub mod ensemble;
pub mod error;
pub mod kbmodel;
pub mod metrics;
pub mod numerics;
pub mod openset;
pub mod seed;
pub mod splits;

pub use error::{Error, Result};
