//! Lifted linear (Koopman) models of controlled nonlinear plants, with an
//! unknown load parameter folded into the lifted state, an online
//! least-squares load observer, and a box-constrained MPC tracker.
//!
//! The pipeline, bottom up:
//!
//! - [`numkit`]: SVD pseudoinverse, least squares, PCA.
//! - [`lifting`]: delay embedding and the observable dictionary `g`, plus the
//!   load-augmented lifting `gamma(y, w) = Gamma(y) (1, w)`.
//! - [`edmd`]: snapshot assembly and least-squares fits of `(A, B, C)`.
//! - [`observer`]: windowed load estimation with periodic averaging.
//! - [`mpc`]: condensed QP construction, a dense box-QP solver and the
//!   receding-horizon loop.
//! - [`plant`]: a simulated two-link elastic arm with a tip payload.
//! - [`harness`]: experiment runners and persisted CSV/JSON artifacts.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod edmd;
pub mod error;
pub mod harness;
pub mod lifting;
pub mod mpc;
pub mod numkit;
pub mod observer;
pub mod par;
pub mod plant;

pub use error::{Error, Result};
pub use numkit::Matrix;
