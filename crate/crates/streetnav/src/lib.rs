//! Panorama-graph navigation environment, spatial description resolution,
//! evaluation metrics, and the neural models for both tasks, built on a
//! minimal reverse-mode autodiff core.
//!
//! The crate is organized around the task split:
//!
//! - [`graph`]: the panorama graph, agent states, and transitions.
//! - [`routes`]: route sampling, gap repair, and demonstration synthesis.
//! - [`world`]: a seeded synthetic-world generator for desk-scale training
//!   and evaluation, with on-disk serialization.
//! - [`metrics`]: task completion, shortest-path distance, success weighted
//!   by edit distance, and the location-prediction metrics.
//! - [`tensor`]: dense f64 tensors with a reverse-mode gradient tape, an
//!   Adam optimizer, and a finite-difference checker.
//! - [`text`]: LSTM token-sequence encoders shared by both task families.
//! - [`sdr`]: location-prediction models (LingUNet and baselines), Gaussian
//!   targets, and supervised training.
//! - [`nav`]: navigation policies, rollouts, supervised training, and
//!   single-modality ablations.
//! - [`harness`]: dataset loading, experiment configuration, and reports;
//!   the `streetnav` binary is a thin wrapper over it.
//!
//! See the crate `examples/` directory for one runnable walkthrough per
//! capability.

pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nav;
pub mod routes;
pub mod sdr;
pub mod tensor;
pub mod text;
pub mod world;

pub use graph::{Action, Execution, NodeId, PanoGraph, State};
