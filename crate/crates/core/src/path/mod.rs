//! Interpolated control paths and the CDE/ODE solver.

mod solver;
mod spline;

pub use solver::{integrate_cde, Drive, FnDrive, GradMode, PathBundle, SolverConfig, TimeDrive, VectorField};
pub use spline::ControlPath;
