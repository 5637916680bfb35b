//! Solver library for linearly constrained strongly-convex-strongly-concave
//! finite-sum minimax problems.
//!
//! The method is a variance-reduced stochastic implicit proximal-point
//! iteration: each inner step solves two small nonsmooth systems in conjugate
//! space with a globalized semismooth Newton method, recovers the primal
//! updates through the prox, and ascends the multiplier on the constraint
//! violation. See the `driver` module for the loop, `ssn` for the subproblem
//! solver, and `experiments` for the benchmark generators.

pub mod cli;
pub mod driver;
pub mod experiments;
pub mod io;
pub mod problem;
pub mod props;
pub mod prox;
pub mod report;
pub mod sampling;
pub mod ssn;
pub mod testkit;

pub use driver::{outer_loop, SolverConfig};
pub use problem::{BlockId, IterateState, ProblemSpec, QuadraticComponent, SaddlePoint};
pub use prox::Regularizer;
pub use sampling::{SampleMode, SamplerConfig};
pub use ssn::{solve_subproblem, NewtonParams, SubproblemSpec};
