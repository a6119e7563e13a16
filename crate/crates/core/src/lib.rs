//! Causal neural-SDE trajectory forecasting for longitudinal disability
//! scores, with a synthetic randomized-trial cohort for validation.
//!
//! Pipeline: [`data`] generates or loads a cohort, [`nets`] holds the
//! encoders, dynamics and decoder, [`sde`] integrates the latent SDE,
//! [`model`] composes them into sampled trajectories, [`causal`] turns
//! paired predictions into treatment-effect estimates and [`train`] fits
//! and evaluates models under nested cross-validation.

pub mod data;
pub mod nets;
pub mod sde;
pub mod model;
pub mod causal;
pub mod train;
