//! Counterfactual explanations for black-box classifiers.
//!
//! The pipeline samples a class-balanced latent neighborhood around an input,
//! fits a local entropy decision tree to the black box's labels, turns the
//! tree into a constraint-weighted graph, and searches it for the cheapest
//! feasible paths to contrast-labeled leaves. Each path is a rule set that is
//! realized into a concrete counterfactual instance and checked against the
//! black box.

pub mod blackbox;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod latent;
pub mod metrics;
pub mod neighborhood;
mod nn;
pub mod recourse;
pub mod service;
pub mod surrogate;
pub mod synthetic;
pub mod visual;

pub use error::{Error, FieldError, Result};
