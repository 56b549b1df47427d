//! Robust bi-level data-driven predictive control.
//!
//! Output trajectories are predicted from Hankel matrices of measured data by
//! a regularized least-squares lower level that is solved in closed form, and
//! the control inputs are chosen by an upper-level problem that is robust to a
//! box-bounded forecast of the measurable disturbance. The crate also carries
//! the comparison controllers, a plant simulator, and the experiment runner
//! used by the `rdpc` binary.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod error;
pub mod excitation;
pub mod experiment;
pub mod hankel;
pub mod linalg;
pub mod predictor;
pub mod robust;
pub mod sim;

pub use error::{Error, Result};
pub use hankel::{Dataset, HankelStack};
pub use predictor::{KktFactor, NoiseModel, RegularizerWeights};
pub use robust::{BoxSet, ControlSolution};
