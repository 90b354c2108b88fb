//! The three projector-splitting substeps as matrix equations.
//!
//! Each substep is an instance of
//!
//! ```text
//! U/Δt + w · Op(U) = RHS,    Op(U) = Σₘ (1/ε) Aₘ U Bₘ − (1/ε²) G U H
//! ```
//!
//! with `w = 1` for implicit Euler and `w = ½` for Crank–Nicolson (the other
//! half of the operator is evaluated at the old value and moved into `RHS`).
//! The system is vectorised column-major, `vec(A U B) = (Bᵀ ⊗ A) vec(U)`,
//! and solved by dense LU with partial pivoting.
//!
//! | substep | unknown     | transport terms   | collision term |
//! |---------|-------------|-------------------|----------------|
//! | L       | `r × n_v`   | `(Aₘ, Pₘ)`        | `(A_σ, C)`     |
//! | S       | `r × r`     | `(−Aₘ, Ξₘ)`       | `(−A_σ, Γ)`    |
//! | K       | `n_x × r`   | `(Dₘ, Ξₘ)`        | `(Σ, Γ)`       |
//!
//! The S-step runs the projected dynamics backward, hence the negated left factors.

use faer::linalg::solvers::Solve;
use faer::{MatMut, MatRef};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{qr_columns, ThinQr};
use crate::mesh::{CollisionMatrix, CrossSection, FluxDecomposition};

/// Residual target for substep solves, relative to `‖RHS‖_F`.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

const MAX_REFINEMENT_SWEEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    ImplicitEuler,
    CrankNicolson,
}

impl TimeScheme {
    /// Fraction of the operator taken at the new time level.
    pub fn implicit_weight(self) -> f64 {
        match self {
            TimeScheme::ImplicitEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}

/// Galerkin projections of the transport and collision operators onto the current bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedCoefficients {
    /// `Aₘ = Xᵀ Dₘ X`, one per flux term.
    pub a_flux: Vec<DMatrix<f64>>,
    /// `A_σ = Xᵀ Σ X`.
    pub a_sigma: DMatrix<f64>,
    /// `Ξₘ = Vᵀ Pₘ V`, one per flux term.
    pub xi_flux: Vec<DMatrix<f64>>,
    /// `Γ = Vᵀ C V`.
    pub gamma: DMatrix<f64>,
}

pub fn project_spatial(
    x: &DMatrix<f64>,
    flux: &FluxDecomposition,
    sigma: &CrossSection,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    if x.nrows() != flux.n_x() || sigma.values().len() != flux.n_x() {
        return Err(Error::ShapeMismatch(format!(
            "X has {} rows, flux {} and cross-section {}",
            x.nrows(),
            flux.n_x(),
            sigma.values().len()
        )));
    }
    let a_flux = flux
        .terms()
        .iter()
        .map(|t| x.tr_mul(&(&t.spatial * x)))
        .collect();
    let mut sx = x.clone();
    for (i, mut row) in sx.row_iter_mut().enumerate() {
        row *= sigma.values()[i];
    }
    Ok((a_flux, x.tr_mul(&sx)))
}

pub fn project_velocity(
    v: &DMatrix<f64>,
    flux: &FluxDecomposition,
    c: &CollisionMatrix,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    if v.nrows() != flux.n_v() || c.len() != flux.n_v() {
        return Err(Error::ShapeMismatch(format!(
            "V has {} rows, flux {} and collision {}",
            v.nrows(),
            flux.n_v(),
            c.len()
        )));
    }
    let xi_flux = flux
        .terms()
        .iter()
        .map(|t| {
            let mut pv = v.clone();
            for (j, mut row) in pv.row_iter_mut().enumerate() {
                row *= t.velocity[j];
            }
            v.tr_mul(&pv)
        })
        .collect();
    let gamma = v.tr_mul(&c.apply_right(&v.transpose()).transpose());
    Ok((xi_flux, gamma))
}

pub fn project_coefficients(
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    flux: &FluxDecomposition,
    sigma: &CrossSection,
    c: &CollisionMatrix,
) -> Result<ProjectedCoefficients> {
    let (a_flux, a_sigma) = project_spatial(x, flux, sigma)?;
    let (xi_flux, gamma) = project_velocity(v, flux, c)?;
    Ok(ProjectedCoefficients {
        a_flux,
        a_sigma,
        xi_flux,
        gamma,
    })
}

impl ProjectedCoefficients {
    /// Replace `Ξ` and `Γ` after the velocity basis has changed.
    pub fn with_velocity_basis(
        mut self,
        v: &DMatrix<f64>,
        flux: &FluxDecomposition,
        c: &CollisionMatrix,
    ) -> Result<Self> {
        let (xi_flux, gamma) = project_velocity(v, flux, c)?;
        self.xi_flux = xi_flux;
        self.gamma = gamma;
        Ok(self)
    }
}

/// `left · U · right`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTerm {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl MatrixTerm {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Self {
        Self { left, right }
    }
}

/// One substep matrix equation `U/Δt + w · Op(U) = RHS`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstepSystem {
    rows: usize,
    cols: usize,
    /// Terms scaled by `1/ε`.
    pub transport: Vec<MatrixTerm>,
    /// Term scaled by `−1/ε²`.
    pub collision: Option<MatrixTerm>,
    pub implicit_weight: f64,
}

/// Solution of one substep system.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: DMatrix<f64>,
    /// `‖U/Δt + w·Op(U) − RHS‖_F / ‖RHS‖_F` after refinement.
    pub relative_residual: f64,
    /// Ratio of the largest to smallest LU pivot magnitude.
    pub pivot_ratio: f64,
}

impl SubstepSystem {
    pub fn new(
        rows: usize,
        cols: usize,
        transport: Vec<MatrixTerm>,
        collision: Option<MatrixTerm>,
        implicit_weight: f64,
    ) -> Result<Self> {
        for t in transport.iter().chain(collision.iter()) {
            if t.left.shape() != (rows, rows) || t.right.shape() != (cols, cols) {
                return Err(Error::ShapeMismatch(format!(
                    "term {:?}·U·{:?} does not fit a {rows}x{cols} unknown",
                    t.left.shape(),
                    t.right.shape()
                )));
            }
        }
        if !(implicit_weight > 0.0 && implicit_weight <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "implicit weight must lie in (0, 1], got {implicit_weight}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            transport,
            collision,
            implicit_weight,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check_shape(&self, u: &DMatrix<f64>, what: &str) -> Result<()> {
        if u.shape() != (self.rows, self.cols) {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {:?}, system unknown is {}x{}",
                u.shape(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// `Op(U) = Σ (1/ε) A U B − (1/ε²) G U H`.
    pub fn apply(&self, u: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for t in &self.transport {
            out += (&t.left * u * &t.right) / epsilon;
        }
        if let Some(t) = &self.collision {
            out -= (&t.left * u * &t.right) / (epsilon * epsilon);
        }
        out
    }

    /// Right-hand side for advancing `old` by one step: `old/Δt − (1 − w)·Op(old)`.
    pub fn rhs_from(&self, old: &DMatrix<f64>, dt: f64, epsilon: f64) -> DMatrix<f64> {
        let explicit = 1.0 - self.implicit_weight;
        let mut rhs = old / dt;
        if explicit > 0.0 {
            rhs -= self.apply(old, epsilon) * explicit;
        }
        rhs
    }

    /// `‖U/Δt + w·Op(U) − RHS‖_F`.
    pub fn residual(&self, u: &DMatrix<f64>, dt: f64, epsilon: f64, rhs: &DMatrix<f64>) -> f64 {
        (self.residual_matrix(u, dt, epsilon, rhs)).norm()
    }

    fn residual_matrix(
        &self,
        u: &DMatrix<f64>,
        dt: f64,
        epsilon: f64,
        rhs: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        rhs - (u / dt + self.apply(u, epsilon) * self.implicit_weight)
    }

    /// Dense `(pq) × (pq)` matrix `I/Δt + w Σ (1/ε) Bᵀ⊗A − w (1/ε²) Hᵀ⊗G`.
    pub fn assemble(&self, dt: f64, epsilon: f64) -> DMatrix<f64> {
        let (p, q) = (self.rows, self.cols);
        let n = p * q;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for d in 0..n {
            m[(d, d)] = 1.0 / dt;
        }
        let w = self.implicit_weight;
        let scaled = self
            .transport
            .iter()
            .map(|t| (w / epsilon, t))
            .chain(self.collision.iter().map(|t| (-w / (epsilon * epsilon), t)));
        for (scale, term) in scaled {
            add_kronecker(&mut m, scale, &term.left, &term.right);
        }
        m
    }

    /// Solve `U/Δt + w·Op(U) = rhs`.
    pub fn solve(&self, dt: f64, epsilon: f64, rhs: &DMatrix<f64>) -> Result<SolveOutcome> {
        solve_substep(self, dt, epsilon, rhs)
    }

    /// Advance `old` by one step of this system.
    pub fn advance(&self, old: &DMatrix<f64>, dt: f64, epsilon: f64) -> Result<SolveOutcome> {
        self.check_shape(old, "initial value")?;
        let rhs = self.rhs_from(old, dt, epsilon);
        self.solve(dt, epsilon, &rhs)
    }
}

/// `m += scale · (rightᵀ ⊗ left)`, skipping structural zeros.
fn add_kronecker(m: &mut DMatrix<f64>, scale: f64, left: &DMatrix<f64>, right: &DMatrix<f64>) {
    let p = left.nrows();
    let q = right.nrows();
    // (Bᵀ⊗A)[(j p + i), (l p + k)] = B[l, j] · A[i, k]
    let a_cols: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|k| {
            (0..p)
                .filter_map(|i| {
                    let a = left[(i, k)];
                    (a != 0.0).then_some((i, a))
                })
                .collect()
        })
        .collect();
    let b_rows: Vec<Vec<(usize, f64)>> = (0..q)
        .map(|l| {
            (0..q)
                .filter_map(|j| {
                    let b = right[(l, j)];
                    (b != 0.0).then_some((j, b))
                })
                .collect()
        })
        .collect();
    for (l, b_row) in b_rows.iter().enumerate() {
        for (k, a_col) in a_cols.iter().enumerate() {
            let mut col = m.column_mut(l * p + k);
            for &(j, b) in b_row {
                let sb = scale * b;
                for &(i, a) in a_col {
                    col[j * p + i] += sb * a;
                }
            }
        }
    }
}

/// Solve the vectorised substep system by LU with up to two refinement sweeps.
pub fn solve_substep(
    sys: &SubstepSystem,
    dt: f64,
    epsilon: f64,
    rhs: &DMatrix<f64>,
) -> Result<SolveOutcome> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    sys.check_shape(rhs, "right-hand side")?;
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("substep right-hand side"));
    }

    let (p, q) = sys.shape();
    let n = p * q;
    let dense = sys.assemble(dt, epsilon);
    let lu = MatRef::from_column_major_slice(dense.as_slice(), n, n).partial_piv_lu();

    let (mut min_pivot, mut max_pivot) = (f64::INFINITY, 0.0f64);
    let u_factor = lu.U();
    for d in 0..n {
        let piv = u_factor[(d, d)].abs();
        min_pivot = min_pivot.min(piv);
        max_pivot = max_pivot.max(piv);
    }
    let pivot_ratio = max_pivot / min_pivot;
    if min_pivot.is_nan() || min_pivot <= 0.0 || !pivot_ratio.is_finite() {
        return Err(Error::SingularSystem {
            context: "substep",
            condition: pivot_ratio,
        });
    }

    let lu_solve = |b: &DMatrix<f64>| -> DMatrix<f64> {
        let mut x = b.clone();
        lu.solve_in_place(MatMut::from_column_major_slice_mut(x.as_mut_slice(), n, 1));
        x
    };

    let rhs_norm = rhs.norm();
    let mut u = lu_solve(rhs);
    let mut residual = sys.residual_matrix(&u, dt, epsilon, rhs);
    let mut rel = relative(residual.norm(), rhs_norm);
    for _ in 0..MAX_REFINEMENT_SWEEPS {
        if rel <= SOLVE_RESIDUAL_TOL * 1e-2 {
            break;
        }
        let candidate = &u + lu_solve(&residual);
        let cand_res = sys.residual_matrix(&candidate, dt, epsilon, rhs);
        let cand_rel = relative(cand_res.norm(), rhs_norm);
        if cand_rel >= rel {
            break;
        }
        u = candidate;
        residual = cand_res;
        rel = cand_rel;
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("substep solution"));
    }
    Ok(SolveOutcome {
        solution: u,
        relative_residual: rel,
        pivot_ratio,
    })
}

fn relative(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Output of the L-substep: `L^{n+1/3} = S Vᵀ` with orthonormal `V`.
#[derive(Debug, Clone)]
pub struct LStep {
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `L^{n+1/3}` before re-factoring, `r × n_v`.
    pub l: DMatrix<f64>,
    pub deficient_columns: usize,
    pub relative_residual: f64,
}

/// Output of the K-substep: `K^{n+1} = X S` with orthonormal `X`.
#[derive(Debug, Clone)]
pub struct KStep {
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub deficient_columns: usize,
    pub relative_residual: f64,
}

/// The system solved by the L-substep for `L = S Vᵀ` (`r × n_v`).
pub fn l_system(
    coeffs: &ProjectedCoefficients,
    flux: &FluxDecomposition,
    c: &CollisionMatrix,
    scheme: TimeScheme,
) -> Result<SubstepSystem> {
    if coeffs.a_flux.len() != flux.terms().len() {
        return Err(Error::ShapeMismatch(
            "one projected flux block per flux term".into(),
        ));
    }
    let r = coeffs.a_sigma.nrows();
    let transport = coeffs
        .a_flux
        .iter()
        .zip(flux.terms())
        .map(|(a, t)| MatrixTerm::new(a.clone(), t.velocity_matrix()))
        .collect();
    let collision = MatrixTerm::new(coeffs.a_sigma.clone(), c.matrix().clone());
    SubstepSystem::new(
        r,
        flux.n_v(),
        transport,
        Some(collision),
        scheme.implicit_weight(),
    )
}

/// The backward S-substep system (`r × r`), using `Ξ`, `Γ` of the updated `V`.
pub fn s_system(coeffs: &ProjectedCoefficients, scheme: TimeScheme) -> Result<SubstepSystem> {
    if coeffs.a_flux.len() != coeffs.xi_flux.len() {
        return Err(Error::ShapeMismatch(
            "flux blocks of X and V disagree in count".into(),
        ));
    }
    let r = coeffs.a_sigma.nrows();
    let transport = coeffs
        .a_flux
        .iter()
        .zip(&coeffs.xi_flux)
        .map(|(a, xi)| MatrixTerm::new(-a, xi.clone()))
        .collect();
    let collision = MatrixTerm::new(-&coeffs.a_sigma, coeffs.gamma.clone());
    SubstepSystem::new(r, r, transport, Some(collision), scheme.implicit_weight())
}

/// The K-substep system (`n_x × r`); always implicit Euler.
pub fn k_system(
    flux: &FluxDecomposition,
    sigma: &CrossSection,
    xi_flux: &[DMatrix<f64>],
    gamma: &DMatrix<f64>,
) -> Result<SubstepSystem> {
    if xi_flux.len() != flux.terms().len() {
        return Err(Error::ShapeMismatch(
            "one projected velocity block per flux term".into(),
        ));
    }
    let r = gamma.nrows();
    let transport = flux
        .terms()
        .iter()
        .zip(xi_flux)
        .map(|(t, xi)| MatrixTerm::new(t.spatial.clone(), xi.clone()))
        .collect();
    let collision = MatrixTerm::new(sigma.as_diagonal(), gamma.clone());
    SubstepSystem::new(flux.n_x(), r, transport, Some(collision), 1.0)
}

/// L-substep: advance `L^n` with `X` frozen, then re-orthonormalise via QR of `Lᵀ`.
pub fn step_l(
    l_old: &DMatrix<f64>,
    coeffs: &ProjectedCoefficients,
    flux: &FluxDecomposition,
    c: &CollisionMatrix,
    dt: f64,
    epsilon: f64,
    scheme: TimeScheme,
) -> Result<LStep> {
    let sys = l_system(coeffs, flux, c, scheme)?;
    let out = sys.advance(l_old, dt, epsilon)?;
    let ThinQr { q, r, deficient } = qr_columns(&out.solution.transpose())?;
    Ok(LStep {
        s: r.transpose(),
        v: q,
        l: out.solution,
        deficient_columns: deficient.len(),
        relative_residual: out.relative_residual,
    })
}

/// S-substep (backward in time) on the core matrix.
pub fn step_s(
    s_in: &DMatrix<f64>,
    coeffs: &ProjectedCoefficients,
    dt: f64,
    epsilon: f64,
    scheme: TimeScheme,
) -> Result<SolveOutcome> {
    s_system(coeffs, scheme)?.advance(s_in, dt, epsilon)
}

/// K-substep: implicit Euler on `K = X S` with `V` frozen, then QR `K = X S`.
pub fn step_k(
    k_in: &DMatrix<f64>,
    flux: &FluxDecomposition,
    sigma: &CrossSection,
    xi_flux: &[DMatrix<f64>],
    gamma: &DMatrix<f64>,
    dt: f64,
    epsilon: f64,
) -> Result<KStep> {
    let sys = k_system(flux, sigma, xi_flux, gamma)?;
    let out = sys.advance(k_in, dt, epsilon)?;
    let ThinQr { q, r, deficient } = qr_columns(&out.solution)?;
    Ok(KStep {
        x: q,
        s: r,
        deficient_columns: deficient.len(),
        relative_residual: out.relative_residual,
    })
}

/// Density vector helper shared by the integrators: `(1/n_v) Vᵀ e`.
pub(crate) fn velocity_mean(v: &DMatrix<f64>) -> DVector<f64> {
    v.row_sum().transpose() / v.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LowRankState;
    use crate::mesh::{FluxScheme, SpatialGrid, VelocityGrid};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent route: nalgebra Kronecker products and nalgebra LU.
    fn kron_oracle(sys: &SubstepSystem, dt: f64, eps: f64, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, q) = sys.shape();
        let n = p * q;
        let w = sys.implicit_weight;
        let mut m = DMatrix::<f64>::identity(n, n) / dt;
        for t in &sys.transport {
            m += t.right.transpose().kronecker(&t.left) * (w / eps);
        }
        if let Some(t) = &sys.collision {
            m -= t.right.transpose().kronecker(&t.left) * (w / (eps * eps));
        }
        let b = DVector::from_column_slice(rhs.as_slice());
        let x = m.lu().solve(&b).expect("oracle system singular");
        DMatrix::from_column_slice(p, q, x.as_slice())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormal(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
        qr_columns(&random_matrix(rng, p, k)).unwrap().q
    }

    struct Setup {
        flux: FluxDecomposition,
        sigma: CrossSection,
        c: CollisionMatrix,
        grid: SpatialGrid,
    }

    fn setup(n_x: usize, n_v: usize, scheme: FluxScheme, eps: f64) -> Setup {
        let grid = SpatialGrid::new(n_x, 0.0, 2.0).unwrap();
        let vgrid = VelocityGrid::new(n_v).unwrap();
        let flux = FluxDecomposition::build(scheme, &grid, &vgrid, eps).unwrap();
        let sigma = CrossSection::from_values(
            grid.points().iter().map(|x| 1.0 + 0.5 * (3.0 * x).sin()).collect(),
            "test",
        )
        .unwrap();
        Setup {
            flux,
            sigma,
            c: CollisionMatrix::new(n_v).unwrap(),
            grid,
        }
    }

    #[test]
    fn constant_sigma_projects_to_scaled_identity() {
        let st = setup(8, 4, FluxScheme::Central, 1.0);
        let sigma = CrossSection::constant(3.0, &st.grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = orthonormal(&mut rng, 8, 3);
        let (_, a_sigma) = project_spatial(&x, &st.flux, &sigma).unwrap();
        assert!((a_sigma - DMatrix::<f64>::identity(3, 3) * 3.0).amax() < 1e-14);
    }

    #[test]
    fn gamma_annihilates_constant_velocity_mode() {
        let st = setup(8, 6, FluxScheme::Ccp, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut raw = random_matrix(&mut rng, 6, 3);
        raw.set_column(0, &DVector::from_element(6, 1.0));
        let v = qr_columns(&raw).unwrap().q;
        let (_, gamma) = project_velocity(&v, &st.flux, &st.c).unwrap();
        for k in 0..3 {
            assert!(gamma[(0, k)].abs() < 1e-14);
            assert!(gamma[(k, 0)].abs() < 1e-14);
        }
        let eig = SymmetricEigen::new(gamma.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l <= 1e-14));
        assert!((&gamma - gamma.transpose()).amax() < 1e-15);
    }

    #[test]
    fn central_projection_is_skew() {
        let st = setup(8, 4, FluxScheme::Central, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = orthonormal(&mut rng, 8, 2);
        let (a, a_sigma) = project_spatial(&x, &st.flux, &st.sigma).unwrap();
        assert!((&a[0] + a[0].transpose()).amax() < 1e-14);
        let min_sigma = st.sigma.min();
        let eig = SymmetricEigen::new(a_sigma);
        assert!(eig.eigenvalues.iter().all(|&l| l >= min_sigma - 1e-10));
    }

    #[test]
    fn projection_rejects_mismatched_shapes() {
        let st = setup(8, 4, FluxScheme::Central, 1.0);
        assert!(project_spatial(&DMatrix::zeros(7, 2), &st.flux, &st.sigma).is_err());
        assert!(project_velocity(&DMatrix::zeros(5, 2), &st.flux, &st.c).is_err());
    }

    #[test]
    fn empty_operator_is_identity() {
        let sys = SubstepSystem::new(3, 2, vec![], None, 1.0).unwrap();
        let rhs = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = sys.solve(0.1, 1.0, &(&rhs / 0.1)).unwrap();
        assert!((out.solution - &rhs).amax() < 1e-14);
        let out = sys.advance(&rhs, 0.3, 0.01).unwrap();
        assert!((out.solution - rhs).amax() < 1e-14);
    }

    #[test]
    fn scalar_closed_form() {
        let (a, b, g, h) = (0.7, -1.3, 0.4, -2.0);
        let (dt, eps, rhs) = (0.05, 0.3, 2.5);
        let sys = SubstepSystem::new(
            1,
            1,
            vec![MatrixTerm::new(
                DMatrix::from_element(1, 1, a),
                DMatrix::from_element(1, 1, b),
            )],
            Some(MatrixTerm::new(
                DMatrix::from_element(1, 1, g),
                DMatrix::from_element(1, 1, h),
            )),
            1.0,
        )
        .unwrap();
        let out = sys.solve(dt, eps, &DMatrix::from_element(1, 1, rhs)).unwrap();
        let expect = rhs / (1.0 / dt + a * b / eps - g * h / (eps * eps));
        assert!((out.solution[(0, 0)] - expect).abs() < 1e-14 * expect.abs());
    }

    #[test]
    fn random_systems_match_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(p, q, eps) in &[(2usize, 3usize, 1.0), (3, 2, 1e-2), (4, 5, 0.1)] {
            let transport: Vec<_> = (0..2)
                .map(|_| MatrixTerm::new(random_matrix(&mut rng, p, p), random_matrix(&mut rng, q, q)))
                .collect();
            let coll = MatrixTerm::new(random_matrix(&mut rng, p, p), random_matrix(&mut rng, q, q));
            for w in [1.0, 0.5] {
                let sys = SubstepSystem::new(p, q, transport.clone(), Some(coll.clone()), w)
                    .unwrap();
                let rhs = random_matrix(&mut rng, p, q);
                let got = sys.solve(0.1, eps, &rhs).unwrap();
                let want = kron_oracle(&sys, 0.1, eps, &rhs);
                assert!((&got.solution - &want).norm() <= 1e-12 * want.norm());
                assert!(got.relative_residual <= SOLVE_RESIDUAL_TOL);
            }
        }
    }

    #[test]
    fn assembled_matrix_matches_kronecker_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, q) = (3, 4);
        let t = MatrixTerm::new(random_matrix(&mut rng, p, p), random_matrix(&mut rng, q, q));
        let c = MatrixTerm::new(random_matrix(&mut rng, p, p), random_matrix(&mut rng, q, q));
        let sys = SubstepSystem::new(p, q, vec![t.clone()], Some(c.clone()), 0.5).unwrap();
        let (dt, eps) = (0.2, 0.5);
        let want = DMatrix::<f64>::identity(12, 12) / dt
            + t.right.transpose().kronecker(&t.left) * (0.5 / eps)
            - c.right.transpose().kronecker(&c.left) * (0.5 / (eps * eps));
        assert!((sys.assemble(dt, eps) - want).amax() < 1e-13);
    }

    #[test]
    fn substep_system_rejects_bad_input() {
        let bad = MatrixTerm::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 3));
        assert!(SubstepSystem::new(2, 2, vec![bad], None, 1.0).is_err());
        assert!(SubstepSystem::new(2, 2, vec![], None, 0.0).is_err());
        let sys = SubstepSystem::new(2, 2, vec![], None, 1.0).unwrap();
        assert!(sys.solve(0.0, 1.0, &DMatrix::zeros(2, 2)).is_err());
        assert!(sys.solve(0.1, -1.0, &DMatrix::zeros(2, 2)).is_err());
        assert!(sys.solve(0.1, 1.0, &DMatrix::zeros(3, 2)).is_err());
        let mut nan = DMatrix::zeros(2, 2);
        nan[(0, 0)] = f64::NAN;
        assert!(matches!(sys.solve(0.1, 1.0, &nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn singular_system_is_reported() {
        // 1/dt − g h / ε² = 0 with dt = 1, ε = 1, g = h = 1.
        let sys = SubstepSystem::new(
            1,
            1,
            vec![],
            Some(MatrixTerm::new(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            )),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            sys.solve(1.0, 1.0, &DMatrix::from_element(1, 1, 1.0)),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn l_step_keeps_velocity_independent_rows_without_transport() {
        let st = setup(8, 6, FluxScheme::Central, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = orthonormal(&mut rng, 8, 2);
        let v = orthonormal(&mut rng, 6, 2);
        let mut coeffs = project_coefficients(&x, &v, &st.flux, &st.sigma, &st.c).unwrap();
        for a in &mut coeffs.a_flux {
            a.fill(0.0);
        }
        let l_old = DMatrix::from_fn(2, 6, |a, _| if a == 0 { 1.5 } else { -0.5 });
        for scheme in [TimeScheme::ImplicitEuler, TimeScheme::CrankNicolson] {
            let out = step_l(&l_old, &coeffs, &st.flux, &st.c, 0.1, 0.01, scheme).unwrap();
            assert!((&out.l - &l_old).amax() < 1e-12);
            assert!((&out.s * out.v.transpose() - &l_old).amax() < 1e-12);
        }
    }

    #[test]
    fn l_step_tiny_dt_is_identity() {
        let st = setup(8, 4, FluxScheme::Ccp, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = orthonormal(&mut rng, 8, 2);
        let v = orthonormal(&mut rng, 4, 2);
        let coeffs = project_coefficients(&x, &v, &st.flux, &st.sigma, &st.c).unwrap();
        let l_old = random_matrix(&mut rng, 2, 4);
        let out = step_l(&l_old, &coeffs, &st.flux, &st.c, 1e-12, 1.0, TimeScheme::ImplicitEuler)
            .unwrap();
        assert!((&out.l - &l_old).amax() < 1e-6);
    }

    #[test]
    fn l_step_matches_oracle() {
        let st = setup(8, 4, FluxScheme::Ccp, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = orthonormal(&mut rng, 8, 2);
        let v = orthonormal(&mut rng, 4, 2);
        let coeffs = project_coefficients(&x, &v, &st.flux, &st.sigma, &st.c).unwrap();
        let l_old = random_matrix(&mut rng, 2, 4);
        for scheme in [TimeScheme::ImplicitEuler, TimeScheme::CrankNicolson] {
            let out = step_l(&l_old, &coeffs, &st.flux, &st.c, 0.1, 1.0, scheme).unwrap();
            let sys = l_system(&coeffs, &st.flux, &st.c, scheme).unwrap();
            let want = kron_oracle(&sys, 0.1, 1.0, &sys.rhs_from(&l_old, 0.1, 1.0));
            assert!((&out.l - &want).norm() <= 1e-12 * want.norm());
            let eye = DMatrix::<f64>::identity(2, 2);
            assert!((out.v.tr_mul(&out.v) - eye).norm() < 1e-12);
        }
    }

    #[test]
    fn s_step_zero_coefficients_is_identity() {
        let coeffs = ProjectedCoefficients {
            a_flux: vec![DMatrix::zeros(2, 2)],
            a_sigma: DMatrix::zeros(2, 2),
            xi_flux: vec![DMatrix::zeros(2, 2)],
            gamma: DMatrix::zeros(2, 2),
        };
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        for scheme in [TimeScheme::ImplicitEuler, TimeScheme::CrankNicolson] {
            let out = step_s(&s, &coeffs, 0.3, 1e-3, scheme).unwrap();
            assert!((out.solution - &s).amax() < 1e-14);
        }
    }

    #[test]
    fn s_step_scalar_closed_form() {
        let (a, xi, asig, g) = (0.4, 0.2, 2.0, -0.3);
        let coeffs = ProjectedCoefficients {
            a_flux: vec![DMatrix::from_element(1, 1, a)],
            a_sigma: DMatrix::from_element(1, 1, asig),
            xi_flux: vec![DMatrix::from_element(1, 1, xi)],
            gamma: DMatrix::from_element(1, 1, g),
        };
        let (dt, eps, s0) = (0.01, 0.5, 1.7);
        let out = step_s(&DMatrix::from_element(1, 1, s0), &coeffs, dt, eps, TimeScheme::ImplicitEuler)
            .unwrap();
        let expect = (s0 / dt) / (1.0 / dt - a * xi / eps + asig * g / (eps * eps));
        assert!((out.solution[(0, 0)] - expect).abs() < 1e-13 * expect.abs());
    }

    #[test]
    fn s_step_matches_oracle() {
        let st = setup(10, 6, FluxScheme::Ccp, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = orthonormal(&mut rng, 10, 2);
        let v = orthonormal(&mut rng, 6, 2);
        let coeffs = project_coefficients(&x, &v, &st.flux, &st.sigma, &st.c).unwrap();
        let s = random_matrix(&mut rng, 2, 2);
        for scheme in [TimeScheme::ImplicitEuler, TimeScheme::CrankNicolson] {
            let out = step_s(&s, &coeffs, 0.05, 0.2, scheme).unwrap();
            let sys = s_system(&coeffs, scheme).unwrap();
            let want = kron_oracle(&sys, 0.05, 0.2, &sys.rhs_from(&s, 0.05, 0.2));
            assert!((&out.solution - &want).norm() <= 1e-12 * want.norm());
            assert!(sys.residual(&out.solution, 0.05, 0.2, &sys.rhs_from(&s, 0.05, 0.2))
                <= SOLVE_RESIDUAL_TOL * s.norm() / 0.05);
        }
    }

    #[test]
    fn k_step_without_dynamics_only_refactors() {
        let st = setup(8, 4, FluxScheme::Central, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = random_matrix(&mut rng, 8, 2);
        let xi = vec![DMatrix::zeros(2, 2)];
        let out = step_k(&k, &st.flux, &st.sigma, &xi, &DMatrix::zeros(2, 2), 0.1, 1.0).unwrap();
        assert!((&out.x * &out.s - &k).amax() < 1e-12);

        // Rank one with a constant velocity mode: ⟨v⟩ = 0 and Γ = 0.
        let vg = VelocityGrid::new(4).unwrap();
        let v = DMatrix::from_element(4, 1, 0.5);
        let (xi, gamma) = project_velocity(&v, &st.flux, &CollisionMatrix::new(4).unwrap()).unwrap();
        assert_eq!(vg.len(), 4);
        assert!(xi[0].amax() < 1e-16 && gamma.amax() < 1e-15);
        let k = random_matrix(&mut rng, 8, 1);
        let out = step_k(&k, &st.flux, &st.sigma, &xi, &gamma, 0.1, 1.0).unwrap();
        assert!((&out.x * &out.s - &k).amax() < 1e-12);
    }

    #[test]
    fn k_step_matches_oracle() {
        let st = setup(8, 6, FluxScheme::Ccp, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = orthonormal(&mut rng, 6, 2);
        let (xi, gamma) = project_velocity(&v, &st.flux, &st.c).unwrap();
        let k = random_matrix(&mut rng, 8, 2);
        let out = step_k(&k, &st.flux, &st.sigma, &xi, &gamma, 0.1, 0.5).unwrap();
        let sys = k_system(&st.flux, &st.sigma, &xi, &gamma).unwrap();
        let want = kron_oracle(&sys, 0.1, 0.5, &(&k / 0.1));
        let got = &out.x * &out.s;
        assert!((&got - &want).norm() <= 1e-12 * want.norm());
    }

    #[test]
    fn s_step_reverses_l_operator_on_invariant_subspace() {
        // Zero flux and a V containing the constant mode: span(V) is invariant
        // under C, so the S-operator is exactly the negated L-operator there
        // and a Crank–Nicolson L/S pair returns to the start.
        let st = setup(9, 6, FluxScheme::Central, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = orthonormal(&mut rng, 9, 3);
        let mut raw = random_matrix(&mut rng, 6, 3);
        raw.set_column(0, &DVector::from_element(6, 1.0));
        let v0 = qr_columns(&raw).unwrap().q;
        let mut coeffs = project_coefficients(&x, &v0, &st.flux, &st.sigma, &st.c).unwrap();
        for a in &mut coeffs.a_flux {
            a.fill(0.0);
        }
        let s0 = random_matrix(&mut rng, 3, 3);
        let l0 = &s0 * v0.transpose();
        let eps = 0.3;

        let l_sys = l_system(&coeffs, &st.flux, &st.c, TimeScheme::CrankNicolson).unwrap();
        let s_sys = s_system(&coeffs, TimeScheme::CrankNicolson).unwrap();
        let lhs = s_sys.apply(&s0, eps) * v0.transpose();
        assert!((lhs + l_sys.apply(&l0, eps)).amax() < 1e-12);

        let l = step_l(&l0, &coeffs, &st.flux, &st.c, 0.2, eps, TimeScheme::CrankNicolson).unwrap();
        let coeffs = coeffs.with_velocity_basis(&l.v, &st.flux, &st.c).unwrap();
        let s = step_s(&l.s, &coeffs, 0.2, eps, TimeScheme::CrankNicolson).unwrap();
        let before = &x * &l0;
        let after = &x * &s.solution * l.v.transpose();
        assert!((after - before).amax() < 1e-12);
    }

    #[test]
    fn velocity_mean_of_state() {
        let g = SpatialGrid::new(6, 0.0, 1.0).unwrap();
        let vg = VelocityGrid::new(4).unwrap();
        let s = LowRankState::init_from_function(|x, v| x + v * v, &g, &vg, 2).unwrap();
        let rho = s.x_factor() * (s.core() * velocity_mean(s.v_factor()));
        assert!((rho - s.to_dense().density()).amax() < 1e-14);
    }
}
