//! Seeded simulator and optimizer for conjunctive trigger attacks in
//! multi-agent routing pipelines.
//!
//! A labeled query is decomposed into segments, each segment is dispatched
//! to an agent pool through a stochastic, topology-aware router (star,
//! chain, or DAG), and a compromised agent activates only when a trigger
//! key and its injected template meet there. On top of that environment the
//! crate provides:
//!
//! - a four-regime evaluation harness (clean / key-only / template-only /
//!   both) with ASR and false-activation estimation and line-delimited
//!   episode logs,
//! - a differentiable counterpart objective with Gumbel-Softmax relaxation
//!   and exact pathwise gradients for optimizing the attack configuration,
//! - surrogate-fidelity decomposition and correlation analytics with a
//!   two-anchor calibration of the simulator parameters,
//! - calibrated system-level defense policies (tool allowlist and
//!   least-privilege input reduction),
//! - an optional HTTP backend for driving real model endpoints.
//!
//! Every run is deterministic given its configuration and seed.

pub mod agents;
pub mod config;
pub mod defenses;
pub mod error;
pub mod evaluation;
pub mod fidelity;
pub mod optimizer;
pub mod remote;
pub mod routing;
pub mod segmentation;
pub mod types;

pub use error::{Error, Result};
pub use types::{AgentSpec, AttackConfig, Regime, RoutingParams, Segment, TemplateSlot};
