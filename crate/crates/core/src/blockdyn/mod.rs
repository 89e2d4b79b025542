//! Generator-unit dynamic model: control blocks, the composed
//! machine/exciter/governor/stabilizer system, fixed-step integration and
//! steady-state initialisation.

mod block;
mod config;
mod equilibrium;
pub(crate) mod integrate;
mod machine;
mod params;
mod unit;

use thiserror::Error;

pub use block::{Block, BlockKind, DEFAULT_LAG_EPSILON};
pub use config::{
    ParamSpec, Section, StructureFlags, UnitConfig, DEFAULT_OPERATING_P, DEFAULT_OPERATING_Q,
    PARAMETER_TABLE,
};
pub use equilibrium::{init_equilibrium, init_equilibrium_with, EquilibriumOptions};
pub use integrate::{rk4_step, step_rk4, step_rk4_with_inputs};
pub use machine::{MachineParams, StatorSolution};
pub use params::{Assignment, ParamEntry, ParameterSet, DEFAULT_LOWER_FACTOR, DEFAULT_UPPER_FACTOR};
pub use unit::{
    build_unit, compute_output, derivatives, Inputs, Setpoints, SimState, StateLayout, UnitModel,
    FREQUENCY_BASE_HZ,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("missing parameter \"{0}\"")]
    MissingParameter(String),
    #[error("unknown parameter \"{0}\"")]
    UnknownParameter(String),
    #[error("duplicate parameter \"{0}\"")]
    DuplicateParameter(String),
    #[error("parameter \"{0}\" is not finite")]
    NonFiniteParameter(String),
    #[error("parameter \"{name}\": factors must satisfy 0 < lower <= 1 <= upper (got {lower}, {upper})")]
    InvalidFactors { name: String, lower: f64, upper: f64 },
    #[error("nonpositive inertia H = {0}")]
    NonPositiveInertia(f64),
    #[error("nonpositive time constant {name} = {value}")]
    NonPositiveTimeConstant { name: String, value: f64 },
    #[error("reactance ordering violated: {0}")]
    ReactanceOrdering(String),
    #[error("invalid saturation factors S10 = {s10}, S12 = {s12}")]
    InvalidSaturation { s10: f64, s12: f64 },
    #[error("invalid limits {name}: min {lo} exceeds max {hi}")]
    InvalidLimits { name: String, lo: f64, hi: f64 },
    #[error("state length {got} does not match model dimension {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("non-finite state or input at t = {t} s")]
    NonFinite { t: f64 },
    #[error("simulation diverged at t = {t} s")]
    Diverged { t: f64 },
    #[error("nonpositive step size {0}")]
    InvalidStep(f64),
    #[error("terminal voltage must be positive (got {0})")]
    NonPositiveVoltage(f64),
    #[error("operating point infeasible: {0}")]
    Infeasible(String),
    #[error("equilibrium solve did not converge after {iterations} iterations (residual {residual:e})")]
    EquilibriumNotConverged { iterations: usize, residual: f64 },
    #[error("model configuration: {0}")]
    Config(String),
}
