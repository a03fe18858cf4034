//! Scalable Bayesian causal forests for longitudinal treatment-effect
//! estimation.
//!
//! The model decomposes the expected outcome of beneficiary `i` in practice
//! `j` at year `t` as
//!
//! ```text
//! E[Y_ijt | x, z] = mu(x, t) + z * 1{t > 2} * tau(x, t)
//! ```
//!
//! where `mu` (prognostic) and `tau` (treatment effect) are each sums of
//! binary regression trees fit by Gibbs backfitting. Treatment is assigned
//! at the practice level between years 2 and 3, so `tau` is identified for
//! years 3 and 4 under a difference-in-differences argument.
//!
//! The crate is organized around the pipeline
//! `dgp` → `propensity` → `data` → `sampler` → `estimands` → `eval`:
//!
//! - [`data`]: panel ingestion and design-matrix construction;
//! - [`trees`]: regression trees with native categorical splits,
//!   incremental leaf caches, and bit-exact text serialization;
//! - [`priors`]: tree-structure, leaf, noise, and splitting-variable priors;
//! - [`sampler`]: the backfitting sampler and streaming posterior archive;
//! - [`propensity`]: L1-logistic and gradient-boosting propensity scores;
//! - [`estimands`]: ATT / subgroup ATT summaries and the DiD cell oracle;
//! - [`dgp`]: synthetic longitudinal data generator with ground truth;
//! - [`eval`]: replication study harness (RMSE, coverage, interval length);
//! - [`cli`]: command implementations backing the `flexcausal` binary.
//!
//! See the crate's `examples/` directory for one runnable example per major
//! capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod dgp;
pub mod estimands;
pub mod eval;
pub mod priors;
pub mod propensity;
pub mod sampler;
pub mod trees;
