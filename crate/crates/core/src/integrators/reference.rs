use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::lowrank::DenseField;
use crate::mesh::{CrossSection, FluxDecomposition, FluxScheme, SpatialGrid};

use super::Discretization;

type DenseLu = LU<f64, Dyn, Dyn>;

/// Full-grid implicit Euler with upwind transport.
///
/// Per velocity the system is `Aⱼ uⱼ − (σ/ε²) ρ = uⱼⁿ/Δt` with
/// `Aⱼ = (1/Δt + σ/ε²) I + (1/ε) Σₘ Pₘ[j] Dₘ`. Eliminating `uⱼ` leaves an
/// `n_x × n_x` system for `ρ`; all factorisations are built once per `Δt`.
#[derive(Debug, Clone)]
pub struct ReferenceSolver {
    n_x: usize,
    n_v: usize,
    dt: f64,
    coupling: DVector<f64>,
    velocity_lu: Vec<DenseLu>,
    density_lu: DenseLu,
}

impl ReferenceSolver {
    pub fn new(disc: &Discretization, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let eps = disc.epsilon;
        let upwind = FluxDecomposition::build(FluxScheme::Upwind, &disc.grid, &disc.vgrid, eps)?;
        let n_x = disc.grid.len();
        let n_v = disc.vgrid.len();
        let coupling = DVector::from_iterator(n_x, disc.sigma.values().iter().map(|s| s / (eps * eps)));

        let mut velocity_lu = Vec::with_capacity(n_v);
        let mut schur = DMatrix::<f64>::identity(n_x, n_x);
        let coupling_diag = DMatrix::from_diagonal(&coupling);
        for j in 0..n_v {
            let mut a = DMatrix::<f64>::zeros(n_x, n_x);
            for t in upwind.terms() {
                let w = t.velocity[j];
                if w != 0.0 {
                    a += &t.spatial * (w / eps);
                }
            }
            for i in 0..n_x {
                a[(i, i)] += 1.0 / dt + coupling[i];
            }
            let lu = a.lu();
            let z = lu.solve(&coupling_diag).ok_or(Error::SingularSystem {
                context: "reference velocity block",
                condition: f64::INFINITY,
            })?;
            schur -= z / n_v as f64;
            velocity_lu.push(lu);
        }
        let density_lu = schur.lu();
        if !density_lu.is_invertible() {
            return Err(Error::SingularSystem {
                context: "reference density",
                condition: f64::INFINITY,
            });
        }
        Ok(Self {
            n_x,
            n_v,
            dt,
            coupling,
            velocity_lu,
            density_lu,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, u: &DenseField) -> Result<DenseField> {
        if (u.n_x(), u.n_v()) != (self.n_x, self.n_v) {
            return Err(Error::ShapeMismatch(format!(
                "field is {}x{}, solver {}x{}",
                u.n_x(),
                u.n_v(),
                self.n_x,
                self.n_v
            )));
        }
        let singular = || Error::SingularSystem {
            context: "reference step",
            condition: f64::INFINITY,
        };
        let values = u.values();
        let mut partial = DMatrix::zeros(self.n_x, self.n_v);
        let mut mean = DVector::zeros(self.n_x);
        for (j, lu) in self.velocity_lu.iter().enumerate() {
            let b = values.column(j) / self.dt;
            let y = lu.solve(&b).ok_or_else(singular)?;
            mean += &y;
            partial.set_column(j, &y);
        }
        mean /= self.n_v as f64;
        let rho = self.density_lu.solve(&mean).ok_or_else(singular)?;
        let source = rho.component_mul(&self.coupling);
        let mut next = partial;
        for (j, lu) in self.velocity_lu.iter().enumerate() {
            let y = lu.solve(&source).ok_or_else(singular)?;
            let mut col = next.column_mut(j);
            col += y;
        }
        DenseField::new(next)
    }
}

/// One full-grid implicit Euler / upwind step.
pub fn reference_kinetic_step(u: &DenseField, disc: &Discretization, dt: f64) -> Result<DenseField> {
    ReferenceSolver::new(disc, dt)?.step(u)
}

/// `(1/3) ∂ₓ(σ⁻¹ ∂ₓ ·)` in flux form with the face coefficient
/// `2/(σᵢ + σᵢ₊₁)`; symmetric and annihilates constants.
pub fn diffusion_operator(grid: &SpatialGrid, sigma: &CrossSection) -> Result<DMatrix<f64>> {
    let n = grid.len();
    if sigma.values().len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cross-section has {} values for {n} cells",
            sigma.values().len()
        )));
    }
    let s = sigma.values();
    let h2 = grid.dx() * grid.dx();
    let mut op = DMatrix::zeros(n, n);
    for i in 0..n {
        let k = grid.wrap(i as isize + 1);
        let c = 2.0 / (s[i] + s[k]) / (3.0 * h2);
        op[(i, i)] -= c;
        op[(k, k)] -= c;
        op[(i, k)] += c;
        op[(k, i)] += c;
    }
    Ok(op)
}

/// Implicit Euler for the diffusion limit with a cached factorisation.
#[derive(Debug, Clone)]
pub struct DiffusionSolver {
    dt: f64,
    lu: DenseLu,
}

impl DiffusionSolver {
    pub fn new(grid: &SpatialGrid, sigma: &CrossSection, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let op = diffusion_operator(grid, sigma)?;
        let n = grid.len();
        let lu = (DMatrix::<f64>::identity(n, n) - op * dt).lu();
        Ok(Self { dt, lu })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, rho: &DVector<f64>) -> Result<DVector<f64>> {
        if rho.len() != self.lu.l().nrows() {
            return Err(Error::ShapeMismatch(format!(
                "density has {} entries, solver {}",
                rho.len(),
                self.lu.l().nrows()
            )));
        }
        self.lu.solve(rho).ok_or(Error::SingularSystem {
            context: "diffusion step",
            condition: f64::INFINITY,
        })
    }
}

pub fn diffusion_step(
    rho: &DVector<f64>,
    grid: &SpatialGrid,
    sigma: &CrossSection,
    dt: f64,
) -> Result<DVector<f64>> {
    DiffusionSolver::new(grid, sigma, dt)?.step(rho)
}
