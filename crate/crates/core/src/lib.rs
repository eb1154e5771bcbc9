//! Computerized adaptive testing on unidimensional IRT models.
//!
//! The crate is organized bottom-up:
//!
//! - [`irt`]: response probabilities, Fisher information and log-likelihoods
//!   for the 1PL, 2PL, 3PL and graded response models.
//! - [`estimate`]: EAP, MAP, ML and WLE ability estimation plus the
//!   fallback chain used during live administration.
//! - [`select`]: next-item selection criteria, content balancing and
//!   Sympson-Hetter exposure control.
//! - [`bank`]: item bank ingestion, validation and synthetic generation.
//! - [`engine`]: the per-examinee session state machine and stopping rules.
//! - [`persist`]: session snapshots, event logs, replay and resume tokens.
//! - [`simlab`]: Monte Carlo recovery studies and report emission.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank;
pub mod engine;
pub mod estimate;
pub mod irt;
pub mod persist;
pub mod select;
pub mod simlab;

pub use bank::{ItemBank, Violation};
pub use engine::{Engine, SessionResult, SessionState, StopReason, StudyConfig};
pub use estimate::{AbilityEstimate, Method, Prior, QuadratureGrid};
pub use irt::{Item, Model, Response};
pub use select::{Criterion, ExposureLedger, SelectionWeights};
