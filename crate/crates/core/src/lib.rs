//! Differentiable knowledge unit (DKU) with implicit concept learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode engine over [`Tensor`]s.
//! - [`rulebase`]: synthetic rule-base generation, validation and I/O.
//! - [`fuzzy`]: differentiable conjunctions, implications and aggregators.
//! - [`dku`]: rule evaluation, logit adjustment and the converse-rule SAT loss.
//! - [`model`]: backbone, class and concept heads, losses and the optimizer.
//! - [`train`]: synthetic tasks, the training loop, metrics and analyses.

pub mod autodiff;
pub mod checks;
pub mod dku;
pub mod fuzzy;
pub mod model;
pub mod provenance;
pub mod rulebase;
pub mod tensor;
pub mod train;

pub use autodiff::{AutodiffError, Graph, Var};
pub use tensor::Tensor;
