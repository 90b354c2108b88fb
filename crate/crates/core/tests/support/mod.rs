//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use kinetic_dlr::integrators::{DiffusionSolver, IntegratorConfig, ReferenceSolver, StepKind};
use kinetic_dlr::lowrank::{qr_columns, DenseField};
use kinetic_dlr::mesh::{CollisionMatrix, CrossSection, FluxDecomposition};
use kinetic_dlr::{Discretization, ProblemSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_orthonormal(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
    // Orthonormalised through nalgebra's Householder QR, not the crate's own.
    let q = random_matrix(rng, p, k).qr().q();
    q.columns(0, k).into_owned()
}

/// Solve `(I/Δt + w Σ (1/ε) Bᵀ⊗A − w (1/ε²) Hᵀ⊗G) vec(U) = vec(rhs)` by
/// explicit Kronecker products and nalgebra's LU.
pub fn kron_solve(
    shape: (usize, usize),
    transport: &[(DMatrix<f64>, DMatrix<f64>)],
    collision: &(DMatrix<f64>, DMatrix<f64>),
    w: f64,
    dt: f64,
    eps: f64,
    rhs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (p, q) = shape;
    let n = p * q;
    let mut m = DMatrix::<f64>::identity(n, n) / dt;
    for (a, b) in transport {
        m += b.transpose().kronecker(a) * (w / eps);
    }
    m -= collision.1.transpose().kronecker(&collision.0) * (w / (eps * eps));
    let x = m
        .lu()
        .solve(&DVector::from_column_slice(rhs.as_slice()))
        .expect("oracle system singular");
    DMatrix::from_column_slice(p, q, x.as_slice())
}

/// `Op(U) = Σ (1/ε) A U B − (1/ε²) G U H`, evaluated densely.
pub fn apply_op(
    transport: &[(DMatrix<f64>, DMatrix<f64>)],
    collision: &(DMatrix<f64>, DMatrix<f64>),
    eps: f64,
    u: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(u.nrows(), u.ncols());
    for (a, b) in transport {
        out += a * u * b / eps;
    }
    out - &collision.0 * u * &collision.1 / (eps * eps)
}

pub fn sigma_diag(sigma: &CrossSection) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(sigma.values()))
}

pub fn collision_dense(n_v: usize) -> DMatrix<f64> {
    DMatrix::from_element(n_v, n_v, 1.0 / n_v as f64) - DMatrix::<f64>::identity(n_v, n_v)
}

pub fn flux_pairs(flux: &FluxDecomposition) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    flux.terms()
        .iter()
        .map(|t| (t.spatial.clone(), DMatrix::from_diagonal(&t.velocity)))
        .collect()
}

pub fn orthonormal_with_constant(rng: &mut ChaCha8Rng, n_v: usize, k: usize) -> DMatrix<f64> {
    let mut raw = random_matrix(rng, n_v, k);
    raw.set_column(0, &DVector::from_element(n_v, 1.0));
    qr_columns(&raw).unwrap().q
}

pub fn check_collision(c: &CollisionMatrix) -> bool {
    (c.matrix() - collision_dense(c.len())).amax() < 1e-15
}

/// Example-I style spec at reduced size.
pub fn scaled(preset: &str, overrides: &[&str]) -> ProblemSpec {
    ProblemSpec::preset(preset)
        .unwrap()
        .with_overrides(overrides)
        .unwrap()
}

/// Diffusion-limit densities on exactly the time levels of `cfg.schedule()`.
pub fn diffusion_on_schedule(
    disc: &Discretization,
    rho0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Vec<DVector<f64>> {
    let mut solvers: Vec<(f64, DiffusionSolver)> = Vec::new();
    let mut rho = rho0.clone();
    let mut out = vec![rho.clone()];
    for (_, dt) in cfg.schedule() {
        let idx = match solvers.iter().position(|(d, _)| *d == dt) {
            Some(i) => i,
            None => {
                solvers.push((dt, DiffusionSolver::new(&disc.grid, &disc.sigma, dt).unwrap()));
                solvers.len() - 1
            }
        };
        rho = solvers[idx].1.step(&rho).unwrap();
        out.push(rho.clone());
    }
    out
}

/// Full-grid implicit Euler / upwind solution on the time levels of `cfg.schedule()`.
pub fn reference_on_schedule(
    disc: &Discretization,
    u0: &DenseField,
    cfg: &IntegratorConfig,
) -> DenseField {
    let mut solvers: Vec<(f64, ReferenceSolver)> = Vec::new();
    let mut u = u0.clone();
    for (kind, dt) in cfg.schedule() {
        assert_ne!(kind, StepKind::Initial);
        let idx = match solvers.iter().position(|(d, _)| *d == dt) {
            Some(i) => i,
            None => {
                solvers.push((dt, ReferenceSolver::new(disc, dt).unwrap()));
                solvers.len() - 1
            }
        };
        u = solvers[idx].1.step(&u).unwrap();
    }
    u
}

pub fn rel_l2(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
