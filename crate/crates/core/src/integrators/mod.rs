//! One-step low-rank integrators (implicit Euler and CNIE), the run driver,
//! and the full-grid / diffusion reference solvers.

mod driver;
mod reference;

pub use driver::{run_algorithm, RunReport, StepKind, StepRecord};
pub use reference::{
    diffusion_operator, diffusion_step, reference_kinetic_step, DiffusionSolver, ReferenceSolver,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{DenseField, LowRankState};
use crate::mesh::{
    CollisionMatrix, CrossSection, FluxDecomposition, FluxScheme, SpatialGrid, VelocityGrid,
};
use crate::substeps::{
    project_coefficients, step_k, step_l, step_s, velocity_mean, TimeScheme,
};

/// Everything about the discrete problem except the state and the time step.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub grid: SpatialGrid,
    pub vgrid: VelocityGrid,
    pub sigma: CrossSection,
    pub flux: FluxDecomposition,
    pub collision: CollisionMatrix,
    pub epsilon: f64,
}

impl Discretization {
    pub fn new(
        grid: SpatialGrid,
        vgrid: VelocityGrid,
        sigma: CrossSection,
        scheme: FluxScheme,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if sigma.values().len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross-section has {} values for {} cells",
                sigma.values().len(),
                grid.len()
            )));
        }
        let flux = FluxDecomposition::build(scheme, &grid, &vgrid, epsilon)?;
        let collision = CollisionMatrix::new(vgrid.len())?;
        Ok(Self {
            grid,
            vgrid,
            sigma,
            flux,
            collision,
            epsilon,
        })
    }

    /// Same grids and cross-section with a different flux scheme.
    pub fn with_flux(&self, scheme: FluxScheme) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.vgrid.clone(),
            self.sigma.clone(),
            scheme,
            self.epsilon,
        )
    }

    fn check_state(&self, state: &LowRankState) -> Result<()> {
        if state.n_x() != self.grid.len() || state.n_v() != self.vgrid.len() {
            return Err(Error::ShapeMismatch(format!(
                "state is {}x{}, discretization {}x{}",
                state.n_x(),
                state.n_v(),
                self.grid.len(),
                self.vgrid.len()
            )));
        }
        Ok(())
    }
}

/// What the driver runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One Euler step with `dt1`, then CNIE steps with `dt2`.
    Algorithm3,
    PureEuler,
    PureCnie,
    /// Full-grid implicit Euler with upwind flux.
    Reference,
    /// Implicit Euler for the limiting diffusion equation.
    Diffusion,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Algorithm3 => "algorithm3",
            Mode::PureEuler => "pure_euler",
            Mode::PureCnie => "pure_cnie",
            Mode::Reference => "reference",
            Mode::Diffusion => "diffusion",
        }
    }

    pub fn is_low_rank(self) -> bool {
        matches!(self, Mode::Algorithm3 | Mode::PureEuler | Mode::PureCnie)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algorithm3" => Ok(Mode::Algorithm3),
            "pure_euler" => Ok(Mode::PureEuler),
            "pure_cnie" => Ok(Mode::PureCnie),
            "reference" => Ok(Mode::Reference),
            "diffusion" => Ok(Mode::Diffusion),
            other => Err(Error::UnknownName {
                kind: "integrator mode",
                name: other.to_owned(),
            }),
        }
    }
}

/// Time-stepping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt1: f64,
    pub dt2: f64,
    pub t_max: f64,
    pub mode: Mode,
    pub flux: FluxScheme,
    pub epsilon: f64,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("dt1", self.dt1),
            ("dt2", self.dt2),
            ("t_max", self.t_max),
            ("epsilon", self.epsilon),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.mode == Mode::Algorithm3 && self.dt1 > self.dt2 {
            return Err(Error::Config(format!(
                "dt1 = {} exceeds dt2 = {}",
                self.dt1, self.dt2
            )));
        }
        Ok(())
    }

    /// `(kind, dt)` of every step the driver will take, in order.
    pub fn schedule(&self) -> Vec<(StepKind, f64)> {
        match self.mode {
            Mode::Algorithm3 => {
                let rest = step_count(self.t_max - self.dt1, self.dt2);
                std::iter::once((StepKind::Euler, self.dt1))
                    .chain(std::iter::repeat((StepKind::Cnie, self.dt2)).take(rest))
                    .collect()
            }
            mode => {
                let kind = match mode {
                    Mode::PureEuler => StepKind::Euler,
                    Mode::PureCnie => StepKind::Cnie,
                    Mode::Reference => StepKind::Reference,
                    _ => StepKind::Diffusion,
                };
                vec![(kind, self.dt2); step_count(self.t_max, self.dt2).max(1)]
            }
        }
    }
}

/// Number of steps of size `dt` needed to cover `span`, ignoring round-off overshoot.
fn step_count(span: f64, dt: f64) -> usize {
    if span <= 0.0 {
        0
    } else {
        (span / dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Wall-clock seconds spent in each substep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstepTimings {
    pub l: f64,
    pub s: f64,
    pub k: f64,
}

impl SubstepTimings {
    pub fn total(&self) -> f64 {
        self.l + self.s + self.k
    }

    pub fn accumulate(&mut self, other: &SubstepTimings) {
        self.l += other.l;
        self.s += other.s;
        self.k += other.k;
    }
}

/// One low-rank step together with what the diagnostics need from inside it.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub state: LowRankState,
    /// `ρ^{n+2/3} = X^n S^{n+2/3} (V^{n+1})ᵀ e / n_v`.
    pub rho_two_thirds: DVector<f64>,
    pub timings: SubstepTimings,
    /// Rank-deficient columns completed by the two QR factorisations.
    pub qr_deficient: usize,
    /// Largest relative residual over the three solves.
    pub max_residual: f64,
}

/// One projector-splitting step; `scheme` selects the L/S time discretisation.
/// The K-step is always implicit Euler.
pub fn advance(
    state: &LowRankState,
    disc: &Discretization,
    dt: f64,
    scheme: TimeScheme,
) -> Result<StepTrace> {
    disc.check_state(state)?;
    let eps = disc.epsilon;
    let x = state.x_factor();

    let started = Instant::now();
    let coeffs = project_coefficients(x, state.v_factor(), &disc.flux, &disc.sigma, &disc.collision)?;
    let l_old = state.core() * state.v_factor().transpose();
    let l = step_l(&l_old, &coeffs, &disc.flux, &disc.collision, dt, eps, scheme)?;
    let t_l = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let coeffs = coeffs.with_velocity_basis(&l.v, &disc.flux, &disc.collision)?;
    let s = step_s(&l.s, &coeffs, dt, eps, scheme)?;
    let t_s = started.elapsed().as_secs_f64();

    let rho_two_thirds = x * (&s.solution * velocity_mean(&l.v));

    let started = Instant::now();
    let k_in = x * &s.solution;
    let k = step_k(
        &k_in,
        &disc.flux,
        &disc.sigma,
        &coeffs.xi_flux,
        &coeffs.gamma,
        dt,
        eps,
    )?;
    let t_k = started.elapsed().as_secs_f64();

    let max_residual = l
        .relative_residual
        .max(s.relative_residual)
        .max(k.relative_residual);
    Ok(StepTrace {
        state: LowRankState::new(k.x, k.s, l.v)?,
        rho_two_thirds,
        timings: SubstepTimings {
            l: t_l,
            s: t_s,
            k: t_k,
        },
        qr_deficient: l.deficient_columns + k.deficient_columns,
        max_residual,
    })
}

/// Implicit Euler projector-splitting step.
pub fn euler_step(state: &LowRankState, disc: &Discretization, dt: f64) -> Result<LowRankState> {
    Ok(advance(state, disc, dt, TimeScheme::ImplicitEuler)?.state)
}

/// Crank–Nicolson for L and S, implicit Euler for K.
pub fn cnie_step(state: &LowRankState, disc: &Discretization, dt: f64) -> Result<LowRankState> {
    Ok(advance(state, disc, dt, TimeScheme::CrankNicolson)?.state)
}

/// Time step used to prepare data: `1e-2 · Δx²`.
pub fn preparation_dt(grid: &SpatialGrid) -> f64 {
    1e-2 * grid.dx() * grid.dx()
}

/// Data close to the diffusive manifold: `u = ρ₀ eᵀ` truncated to `rank`,
/// followed by one implicit Euler step at [`preparation_dt`].
pub fn well_prepared_state(
    rho0: &DVector<f64>,
    disc: &Discretization,
    rank: usize,
) -> Result<LowRankState> {
    if rho0.len() != disc.grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "density has {} entries for {} cells",
            rho0.len(),
            disc.grid.len()
        )));
    }
    let n_v = disc.vgrid.len();
    let u = DenseField::new(DMatrix::from_fn(rho0.len(), n_v, |i, _| rho0[i]))?;
    let state = LowRankState::from_dense(&u, rank)?;
    euler_step(&state, disc, preparation_dt(&disc.grid))
}
