//! Numerical toolkit for optimal control of semilinear parabolic equations
//! with box constraints on the control and mixed pointwise state-control
//! constraints `g(x,t,y) + eps*u <= 0`.
//!
//! The crate provides:
//!
//! - structured space-time meshes and divergence-form elliptic operators
//!   with homogeneous Dirichlet conditions ([`mesh`]),
//! - problem data (running cost, nonlinearity, constraint functions) with
//!   derivative cross-checks and hypothesis validation ([`problem`]),
//! - implicit-Euler solvers for the state, linearized and adjoint equations,
//!   discretized so the reduced gradient is exact for the discrete objective
//!   ([`pde`]),
//! - active-set classification, Lagrange-multiplier recovery, first-order
//!   residuals, separation margins and a constructive Robinson constraint
//!   qualification check ([`kkt`]),
//! - an augmented-Lagrangian solver with projected-gradient inner iterations
//!   and a dense brute-force oracle for tiny convex instances ([`optimize`]),
//! - second-order condition sampling over the critical cone and quadratic
//!   growth tests ([`soc`]),
//! - empirical Hölder-exponent estimation and discrete maximum-principle
//!   checks ([`regularity`]).

pub mod error;
pub mod field;
pub mod io;
pub mod kkt;
pub mod linalg;
pub mod mesh;
pub mod optimize;
pub mod pde;
pub mod problem;
pub mod qp;
pub mod regularity;
pub mod soc;

pub use error::{CoreError, Result};
pub use field::Field;
pub use kkt::{ActiveSets, KktReport, RobinsonReport};
pub use mesh::{Coefficient, EllipticOperator, Mesh};
pub use optimize::{OptimizeParams, Solution};
pub use problem::ProblemSpec;
pub use regularity::RegularityReport;
pub use soc::{CriticalDirection, SocReport};
