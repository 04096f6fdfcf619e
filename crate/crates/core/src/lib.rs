//! Gossip-based Gauss-Newton (GGN) for distributed nonlinear least squares.
//!
//! The crate is organised bottom-up:
//!
//! - [`nlls`]: the problem abstraction (sites, box constraints, centralized
//!   Gauss-Newton, finite-difference and constant-estimation oracles).
//! - [`gossip`]: doubly stochastic mixing matrices for the coordinated static
//!   exchange (CSE) and uncoordinated random exchange (URE) protocols.
//! - [`ggn`]: the distributed algorithm itself plus a first-order diffusion
//!   baseline.
//! - [`analysis`]: closed-form convergence constants and trace-driven checks.
//! - [`psse`]: power-system state estimation instances built from MATPOWER
//!   case files.

pub mod analysis;
pub mod error;
pub mod ggn;
pub mod gossip;
pub mod nlls;
pub mod psse;

pub use error::{Error, Result};
