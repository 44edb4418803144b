//! SAGE: per-sample dynamic defense selection for ML-based intrusion
//! detection under adversarial attacks.
//!
//! The pipeline ingests tabular intrusion data, trains a baseline neural
//! classifier, generates adversarial variants of the test pool across a grid
//! of attack kinds and strengths, trains a ten-entry defense portfolio,
//! labels each adversarial sample with its optimal defense, acquires labels
//! with entropic open-set active learning, trains a tree-ensemble selector,
//! and evaluates the resulting per-sample dispatch policy against Oracle,
//! static, random, and recommendation baselines.

pub mod acquisition;
pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod evaluation;
pub mod mat;
pub mod matrix;
pub mod nnet;
pub mod pipeline;
pub mod seed;
pub mod selector;

pub use error::{Result, SageError};
