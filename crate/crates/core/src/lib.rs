//! Missing-data-aware ordinal regression for survey data.
//!
//! The pipeline screens candidate predictors, multiply imputes missing cells
//! with an EM-bootstrap multivariate normal model, fits a proportional-odds
//! cumulative-logit model to every completed dataset and pools the fits with
//! Rubin's rules.

pub mod config;
pub mod dataset;
pub mod imputation;
pub mod ologit;
pub mod pipeline;
pub mod pooling;
pub mod screening;
pub mod simulate;
