//! Failure-aware execution of visuomotor policies.
//!
//! A policy is wrapped by a memory-bank anomaly detector (nearest-neighbour
//! distance of the current frame's embedding to embeddings of nominal frames)
//! and a staged recovery controller: pause, local perturbation, and reset to a
//! start state sampled from a Gaussian-mixture success model. A deterministic
//! planar reach simulator with injectable visual anomalies drives everything
//! end to end.
//!
//! Modules:
//! - [`anomaly`]: featurizers, memory bank, classification, threshold calibration
//! - [`successmodel`]: GMM fitting with EM, BIC selection, start-state sampling
//! - [`recovery`]: the escalating recovery controller and stage statistics
//! - [`simenv`]: the reach environment, anomaly injection, rendering, reward
//! - [`policy`]: policy trait, scripted reach policy, gripper majority filter
//! - [`runner`]: data collection, monitored episodes, suites and reports

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod anomaly;
pub mod policy;
pub mod recovery;
pub mod runner;
pub mod seed;
pub mod simenv;
pub mod successmodel;

/// Schema tag written into every persisted JSON artifact.
pub const SCHEMA: &str = "vigil/1";
