//! Numerical laboratory for stochastic optimal control with constant
//! coefficients on a bounded domain: Monte Carlo value estimation for the
//! controlled degenerate diffusion, a monotone finite-difference solver for
//! the associated Bellman Dirichlet problem, quasiderivative couplings with
//! barrier certificates, and a verification harness tying them together.

pub mod coupled;
pub mod fields;
pub mod hjb;
pub mod linalg;
pub mod problem;
pub mod quasi;
pub mod rng;
pub mod sde;
pub mod value;
pub mod verify;

pub use fields::ScalarField;
pub use linalg::Mat;
pub use problem::{DomainFn, ProblemSpec};
pub use sde::{PathRecord, SimConfig};
pub use value::Estimate;
