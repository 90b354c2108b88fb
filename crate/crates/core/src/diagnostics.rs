//! Spectra, projection errors and the structural checks on the velocity basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{DenseField, LowRankState};
use crate::mesh::{FluxDecomposition, FluxScheme, VelocityGrid};

/// `(‖u − X_l X_lᵀ u‖_F, ‖u − u V_l V_lᵀ‖_F)` with `X_l`, `V_l` the first `l` columns.
pub fn projection_errors(
    u_ref: &DenseField,
    x_factor: &DMatrix<f64>,
    v_factor: &DMatrix<f64>,
    l: usize,
) -> Result<(f64, f64)> {
    let u = u_ref.values();
    if x_factor.nrows() != u.nrows() || v_factor.nrows() != u.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "factors {:?} / {:?} against field {:?}",
            x_factor.shape(),
            v_factor.shape(),
            u.shape()
        )));
    }
    let max = x_factor.ncols().min(v_factor.ncols());
    if l == 0 || l > max {
        return Err(Error::RankOutOfRange { rank: l, max });
    }
    let x = x_factor.columns(0, l);
    let v = v_factor.columns(0, l);
    let err_x = (u - x * x.tr_mul(u)).norm();
    let err_v = (u - (u * v) * v.transpose()).norm();
    Ok((err_x, err_v))
}

/// One row of a projection-error curve, normalised by `‖u‖_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub l: usize,
    pub err_x: f64,
    pub err_v: f64,
}

/// Relative projection errors for `l = 1..=max_l`, using the state's
/// dominant-mode ordering.
pub fn projection_error_curve(
    u_ref: &DenseField,
    state: &LowRankState,
    max_l: usize,
) -> Result<Vec<ProjectionPoint>> {
    let canon = state.canonical()?;
    let norm = u_ref.norm();
    let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
    (1..=max_l)
        .map(|l| {
            let (ex, ev) = projection_errors(u_ref, canon.x_factor(), canon.v_factor(), l)?;
            Ok(ProjectionPoint {
                l,
                err_x: ex * scale,
                err_v: ev * scale,
            })
        })
        .collect()
}

/// `‖u − ρ eᵀ‖_F / ‖u‖_F`, zero for the zero field.
pub fn rank1_deviation(u: &DenseField, vgrid: &VelocityGrid) -> Result<f64> {
    let rho = crate::lowrank::density(u, vgrid)?;
    let norm = u.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut dev = u.values().clone();
    for mut col in dev.column_iter_mut() {
        col -= &rho;
    }
    Ok(dev.norm() / norm)
}

/// Default tolerances are `e_scale·ε²` and `v_scale·ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionTolerances {
    pub e_scale: f64,
    pub v_scale: f64,
}

impl Default for AssumptionTolerances {
    fn default() -> Self {
        Self {
            e_scale: 10.0,
            v_scale: 10.0,
        }
    }
}

/// How far the constant and linear velocity modes are from `span(V)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub residual_e: f64,
    pub residual_v: f64,
    pub epsilon: f64,
    pub tol_e: f64,
    pub tol_v: f64,
    pub e_within: bool,
    pub v_within: bool,
}

pub fn assumption_residuals(
    v_factor: &DMatrix<f64>,
    vgrid: &VelocityGrid,
    epsilon: f64,
) -> Result<AssumptionReport> {
    assumption_residuals_with(v_factor, vgrid, epsilon, AssumptionTolerances::default())
}

pub fn assumption_residuals_with(
    v_factor: &DMatrix<f64>,
    vgrid: &VelocityGrid,
    epsilon: f64,
    tolerances: AssumptionTolerances,
) -> Result<AssumptionReport> {
    let n_v = vgrid.len();
    if v_factor.nrows() != n_v {
        return Err(Error::ShapeMismatch(format!(
            "V has {} rows for {n_v} velocities",
            v_factor.nrows()
        )));
    }
    let e_n = DVector::from_element(n_v, 1.0 / (n_v as f64).sqrt());
    let vel = DVector::from_column_slice(vgrid.points());
    let vel_n = &vel / vel.norm();
    let residual = |w: &DVector<f64>| (w - v_factor * v_factor.tr_mul(w)).norm();
    let residual_e = residual(&e_n);
    let residual_v = residual(&vel_n);
    let tol_e = tolerances.e_scale * epsilon * epsilon;
    let tol_v = tolerances.v_scale * epsilon;
    Ok(AssumptionReport {
        residual_e,
        residual_v,
        epsilon,
        tol_e,
        tol_v,
        e_within: residual_e <= tol_e,
        v_within: residual_v <= tol_v,
    })
}

/// `(D ρ)ᵀ (D ρ)` for the central difference `D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HMatrixCheck {
    pub determinant: f64,
    /// Set when the value is zero to round-off relative to `‖D‖²‖ρ‖²`.
    pub degenerate: bool,
}

pub fn h_matrix_determinant(rho: &DVector<f64>, flux: &FluxDecomposition) -> Result<HMatrixCheck> {
    if flux.scheme() != FluxScheme::Central {
        return Err(Error::InvalidParameter(format!(
            "H-matrix check needs the central flux, got {}",
            flux.scheme()
        )));
    }
    let d = &flux.terms()[0].spatial;
    if rho.len() != d.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "density has {} entries for {} cells",
            rho.len(),
            d.ncols()
        )));
    }
    Ok(h_check(d, rho))
}

pub(crate) fn h_check(d: &DMatrix<f64>, rho: &DVector<f64>) -> HMatrixCheck {
    let g = d * rho;
    let determinant = g.dot(&g);
    let scale = d.amax() * rho.norm();
    HMatrixCheck {
        determinant,
        degenerate: determinant <= (1e-12 * scale).powi(2),
    }
}

/// Singular values `σ₁ ≥ σ₂ ≥ …` and ratios `σ_k/σ₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub values: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl SpectrumReport {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let lead = values.first().copied().unwrap_or(0.0);
        let ratios = values
            .iter()
            .map(|&s| if lead > 0.0 { s / lead } else { 0.0 })
            .collect();
        Self { values, ratios }
    }

    /// Least-squares slope of `ln(σ_k/σ₁)` against `k` over the first `count` values.
    pub fn log_slope(&self, count: usize) -> f64 {
        log_linear_slope(&self.ratios[..count.min(self.ratios.len())])
    }
}

pub fn singular_spectrum(u: &DenseField) -> SpectrumReport {
    SpectrumReport::from_values(u.values().singular_values().iter().copied().collect())
}

pub fn core_spectrum(state: &LowRankState) -> SpectrumReport {
    SpectrumReport::from_values(state.singular_values())
}

/// Least-squares slope of `ln yₖ` against `k = 1, 2, …`. Non-positive
/// entries are clamped to the smallest positive double.
pub fn log_linear_slope(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let ys: Vec<f64> = values
        .iter()
        .map(|&v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let mean_k = (n as f64 + 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dk = (i + 1) as f64 - mean_k;
        num += dk * (y - mean_y);
        den += dk * dk;
    }
    num / den
}
