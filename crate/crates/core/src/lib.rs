//! Linear-quadratic fine-tuning (LQF) of small networks.
//!
//! A pre-trained network is replaced by its first-order Taylor expansion in the
//! weights. Trained with a ridge-regularized MSE on scaled one-hot targets, the
//! resulting problem is an ordinary quadratic: it has a closed-form optimum,
//! constant curvature (so a K-FAC preconditioner is estimated once), and exact
//! leave-one-out influence via rank-`C` inverse updates.
//!
//! Loss convention used throughout:
//!
//! ```text
//! L(dw) = 1/(2N) · Σᵢ ‖gᵢ·dw − rᵢ‖² + λ/2 · ‖dw‖²,   rᵢ = α·onehot(yᵢ) − f0(xᵢ)
//! F     = 1/N · JᵀJ,   H = F + λI,   dw* = H⁻¹ · (1/N) Jᵀ r
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod influence;
pub mod kfac;
pub mod lambda;
pub mod linalg;
pub mod net;
pub mod quadratic;
pub mod trainer;
pub mod verify;

pub use error::{ErrorKind, LqfError, Result};
