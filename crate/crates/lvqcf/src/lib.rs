//! Counterfactual explanations for learning vector quantization (LVQ)
//! classifiers.
//!
//! Given an input `x` and a requested label, the engine finds the smallest
//! change `x'` (under a configurable deviation penalty) that the model
//! classifies as requested. It exploits the model structure: for identity
//! and global metrics each candidate prototype yields a linear or convex
//! quadratic program; for per-prototype metrics the feasibility constraints
//! are indefinite quadratics and a penalty convex-concave procedure solves
//! the resulting difference-of-convex program. A derivative-free black-box
//! baseline and a benchmark harness are included for comparison studies.

pub mod baseline;
pub mod bench;
pub mod ccp;
pub mod constraints;
pub mod data;
pub mod engine;
pub mod error;
pub mod fit;
mod math;
pub mod model;
pub mod program;
pub mod regularizer;
pub mod solver;

pub use constraints::UserConstraints;
pub use engine::{explain, explain_with_nearest_fallback, CfRequest, CfResult};
pub use error::{Error, Result};
pub use model::{LvqModel, Metric, Prototype};
pub use regularizer::{build_objective, mad_weights, ObjectiveSpec, Regularizer};
