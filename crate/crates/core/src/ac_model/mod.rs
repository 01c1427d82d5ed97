//! AC power flow and the chance-constrained AC dispatch built on it.
//!
//! States are solved in polar form by Newton's method. The same quantities
//! are also available as quadratic forms in rectangular voltages, which the
//! tests use as an independent evaluation.

mod fixed_point;
mod network;
mod quadratic;
mod response;

use thiserror::Error;

use crate::scenario_mip::SelectionError;

pub use fixed_point::{
    fixed_point_distance, fixed_point_solve, generation_cost, linearized_cc_system, solve_deterministic_ac,
    solve_linearized_dispatch, trace_csv, DispatchOutcome, FixedPointOptions, FixedPointResult, TraceRow,
};
pub use network::{pf_solve, pf_solve_warm, AcControls, AcNetwork, AcState, PfOptions, C64};
pub use quadratic::{quadratic_residuals, QuadForm, QuadraticFormModel};
pub use response::{respond, response_jacobian, AcRows, ControlLayout, ResponseJacobian};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcError {
    #[error("bus {0} has no path to the slack bus")]
    Disconnected(i64),
    #[error("the slack bus has no in-service generator")]
    NoSlackGenerator,
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e} p.u.)")]
    NoConvergence { iterations: usize, mismatch: f64 },
    #[error("singular power-flow Jacobian")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("sequential linearization failed: {0}")]
    Slp(String),
    #[error("dispatch cannot satisfy the enforced rows; residual violation {0:.3e} p.u.")]
    Infeasible(f64),
    #[error("fixed-point iteration did not converge; distances {0:?}")]
    FixedPoint(Vec<f64>),
}
