//! Treatment-effect estimation for discrete panel outcomes built on transition
//! structure rather than level trends.
//!
//! The estimand is the average treatment effect on the treated (ATT) for a
//! categorical outcome observed over T periods, with treatment switching on
//! after period T0. Identification conditions on each treated unit's last ℓ
//! pre-treatment outcomes and borrows the control group's transition law to
//! construct the counterfactual — the transition-independence alternative to
//! parallel trends. On top of that core the crate provides:
//!
//! - difference-in-differences comparators and an exact decomposition of the
//!   gap between the two estimators ([`effects`]);
//! - flow decompositions, placebo estimates, and pre-treatment transition
//!   diagnostics ([`effects`]);
//! - latent-type heterogeneity via finite mixtures of non-stationary Markov
//!   chains fitted by multistart EM, with BIC type selection ([`mixture`]) and
//!   type-specific second-stage effects ([`mixture_effects`]);
//! - weighted-bootstrap covariance and pointwise plus uniform (sup-t)
//!   confidence bands ([`inference`]);
//! - staggered-adoption cohort estimators ([`staggered`]);
//! - a simulation oracle with exact population effects ([`dgp`]).
//!
//! The `transition-att` binary exposes the same pipeline on CSV panels.

pub mod cli;
pub mod data;
pub mod dgp;
pub mod effects;
pub mod error;
pub mod inference;
pub mod mixture;
pub mod mixture_effects;
pub mod report;
pub mod rng;
pub mod staggered;

pub use error::{Error, Result};
