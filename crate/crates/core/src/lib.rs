//! Effective degrees of freedom and Stein risk estimation for ℓ1-constrained
//! nonlinear least squares, specialised to sparse identification of linear
//! ODE systems `dx/dt = Bx`.
//!
//! * [`linalg`]: matrix exponential, principal logarithm, Fréchet and second
//!   directional derivatives via block exponentials.
//! * [`model`]: mean-value parametrizations and their G/J matrices.
//! * [`solver`]: coordinate descent with Armijo backtracking, λ-paths, KKT audit.
//! * [`dof`]: divergence formulas, SURE, TIC and closed-form projection examples.
//! * [`oracle`]: Monte Carlo and finite-difference checks.
//! * [`modelsearch`]: forward stepwise search over the sparsity pattern of `B`.
//! * [`sim`]: the simulation study harness.

pub mod dof;
pub mod error;
pub mod linalg;
pub mod model;
pub mod modelsearch;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::RealMatrix;
pub use par::Execution;
