//! Space-time finite element solver for the Poisson-Nernst-Planck equations
//! in entropy variables.
//!
//! The library discretizes the log-densities u_i = log(c_i) with H1-conforming
//! Pk elements in space and an upwind discontinuous Galerkin method of degree
//! m in time, which keeps the recovered densities c_i = exp(u_i) positive and
//! the discrete free energy non-increasing for any k and m and any step size.
//! Each space-time slab is solved with Newton's method and a sparse direct
//! solver; step sizes are driven by a PI controller fed from an embedded
//! low-order companion solve.
//!
//! Entry points:
//! - [`cli::preset`] builds the bundled problem setups,
//! - [`timeloop::run`] integrates and streams per-step diagnostics,
//! - [`cli::converge`] runs the manufactured-solution accuracy study.

pub mod assembly;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod fespace;
pub mod mesh;
pub mod solver;
pub mod timeloop;

pub use assembly::{
    initial_state, BoundaryCondition, Discretization, PhiGauge, ProblemSpec, SlabState,
    TraceState,
};
pub use diagnostics::DiagnosticsRecord;
pub use error::{Error, Result};
pub use mesh::{build_interval_mesh, build_unit_square_mesh, load_mesh, CoefficientField, Mesh};
pub use solver::{lu_solve, newton_solve, NewtonOptions, NewtonReport, SparseMatrix};
pub use timeloop::{run, run_collect, DtMaxSchedule, RunConfig, StepController, Termination};
