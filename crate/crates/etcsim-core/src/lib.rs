//! Simulation library for event-triggered control over a modeled
//! sensor/actuator network.
//!
//! A plant runs in continuous time while its feedback input is held constant
//! between controller updates. Instead of updating on a fixed period, the
//! loop watches trigger conditions on the measurement error and updates only
//! when one of them reaches zero. The conditions can be evaluated centrally
//! on the full state, or split across sensor nodes that each see only a
//! subset of the state; a per-node offset vector (summing to zero) shifts
//! slack between nodes and can be re-tuned at every update from short-horizon
//! state predictions.
//!
//! The crate provides:
//!
//! - [`ode`]: fixed-step RK4 integration with guard-function event
//!   localization,
//! - [`plant`]: a six-state quadruple-tank model (four levels plus two
//!   integral-action states), its stabilizing feedback law and an energy
//!   function that certifies convergence,
//! - [`trigger`]: centralized and per-node trigger conditions and the
//!   inter-update scheduling rule with its minimum-spacing floor,
//! - [`adaptation`]: Taylor-based gap prediction and the per-node offset
//!   re-tuning rule,
//! - [`engine`]: the closed-loop simulation driver (event-triggered and
//!   periodic), mode comparison and actuation-delay handling,
//! - [`config`]: JSON scenario parsing, validation and re-emission,
//! - [`output`]: CSV/JSON result bundles with reproducible formatting.

// Index loops in the numeric kernels mirror the componentwise math they
// implement; iterator rewrites would obscure the correspondence.
#![allow(clippy::needless_range_loop)]

pub mod adaptation;
pub mod config;
pub mod engine;
pub mod error;
pub mod ode;
pub mod output;
pub mod plant;
pub mod trigger;

pub use error::Error;

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
