//! Sparse second-order cone programming.
//!
//! Programs are stated as `min cᵀx + c0` subject to `A x + s = b`, `s ∈ K`,
//! where `K` is a product of zero, nonnegative and second-order cones. Build
//! them with [`ProgramBuilder`] and solve with [`solve`].

mod certify;
mod cones;
pub mod dump;
mod equilibrate;
pub mod ldl;
mod program;
mod solver;
pub mod sparse;

pub use certify::{certify, Certificate};
pub use cones::Cone;
pub use program::{ConeProgram, ProgramBuilder, ProgramError};
pub use solver::{solve, SolveResult, SolverConfig, Status};
pub use sparse::CscMatrix;
