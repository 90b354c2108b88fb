//! Dynamical low-rank (projector-splitting) integrators for the multi-scale
//! linear Boltzmann equation in slab geometry,
//!
//! ```text
//! ∂ₜu = −(v/ε) ∂ₓu + (σ(x)/ε²)(ρ − u),   ρ = ½∫ u dv,
//! ```
//!
//! on a periodic interval, together with a full-grid reference solver, the
//! limiting diffusion solver and the diagnostics used to check the
//! asymptotic behaviour.

pub mod diagnostics;
pub mod error;
pub mod integrators;
pub mod io;
pub mod lowrank;
pub mod mesh;
pub mod problem;
pub mod runner;
pub mod substeps;

pub use error::{Error, Result};
pub use integrators::{
    advance, cnie_step, euler_step, run_algorithm, Discretization, IntegratorConfig, Mode,
    RunReport, StepRecord,
};
pub use lowrank::{DenseField, LowRankState};
pub use mesh::{CrossSection, CrossSectionPreset, FluxScheme, SpatialGrid, VelocityGrid};
pub use problem::{InitialCondition, ProblemSpec, SweepSpec};
