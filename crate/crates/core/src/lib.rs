//! Calibrated log-linear modelling of citation counts against review-report
//! length: ingestion and cleaning, raking, Fisher class breaks, weighted
//! least squares with robust inference, diagnostics and a synthetic corpus
//! generator.

pub mod dataset;
pub mod design;
pub mod diagnostics;
pub mod discretize;
mod linalg;
pub mod pipeline;
pub mod raking;
pub mod regress;
pub mod rng;
pub mod synth;
