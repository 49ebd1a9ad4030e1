//! Differentiable scalar types for the adaptation and meta-learning code.
//!
//! Everything numerically interesting in `metadapt` is written once, generic
//! over [`Real`]. Plugging in a concrete type picks the evaluation mode:
//!
//! - `f64`: plain evaluation (online adaptation, control rollouts).
//! - [`Dual<S, N>`]: forward mode with `N` tangent directions, used for
//!   state Jacobians of a single dynamics step.
//! - [`Var`]: reverse mode on a thread-local tape, used to back-propagate a
//!   prediction loss through the whole adaptation procedure.
//!
//! The two compose: `Dual<Var, N>` records a Jacobian evaluation on the tape,
//! so the Jacobian itself can be differentiated.

mod dual;
mod mat;
mod real;
pub mod tape;

pub use dual::Dual;
pub use mat::{CholeskyError, Mat};
pub use real::Real;
pub use tape::{Gradient, Var};
