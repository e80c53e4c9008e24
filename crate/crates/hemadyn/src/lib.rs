//! Forecasting of individual platelet-count time series under multicycle
//! chemotherapy.
//!
//! The crate bundles three model families behind a common simulation and
//! evaluation interface:
//!
//! - four mechanistic hematopoiesis ODE models (Friberg, Henrich,
//!   Mangas-Sanjuan and a revised Mangas-Sanjuan variant),
//! - two hybrid models where a small feed-forward network augments or
//!   replaces the Friberg feedback term (UDE-add / UDE-rep), trained with
//!   exact gradients through the fixed-step integrator,
//! - a purely data-driven autoregressive GRU forecaster (ARX-GRU) driven
//!   by the treatment signal.
//!
//! Training pipelines (penalized mechanistic fits, two-stage UDE training,
//! ARX-GRU pre-training on virtual therapy scenarios) live in [`pipeline`],
//! and the cycle-split comparison harness (group-mean SMSE matrix plus
//! one-sided Wilcoxon flags) in [`eval`].

pub mod arx;
pub mod cli;
pub mod cohort;
pub mod data;
pub mod error;
pub mod eval;
pub mod mech;
pub mod mlp;
pub mod objective;
pub mod ode;
pub mod opt;
pub mod pipeline;
pub mod ude;

pub use error::{Error, Result};
