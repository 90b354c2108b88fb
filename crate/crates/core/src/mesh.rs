//! Grids, cross-sections and the discrete transport/collision operators.
//!
//! Everything here is periodic in space. The transport term `v ∂ₓu` is
//! represented as a short sum `Σₘ Dₘ · u · Pₘ` of spatial difference matrices
//! `Dₘ` (acting on the left of the `n_x × n_v` solution matrix) and diagonal
//! velocity weights `Pₘ` (acting on the right). Upwinding needs two terms
//! because the stencil direction depends on the sign of `v`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform cell-centred periodic grid on `[x_min, x_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    n_x: usize,
    x_min: f64,
    x_max: f64,
    dx: f64,
    points: Vec<f64>,
}

impl SpatialGrid {
    pub fn new(n_x: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::InvalidCount {
                what: "spatial cell",
                value: n_x,
                reason: "need at least 2 cells",
            });
        }
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::DegenerateDomain { x_min, x_max });
        }
        let dx = (x_max - x_min) / n_x as f64;
        let points = (0..n_x).map(|i| x_min + (i as f64 + 0.5) * dx).collect();
        Ok(Self {
            n_x,
            x_min,
            x_max,
            dx,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.n_x == 0
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Periodic index wrap.
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n_x as isize) as usize
    }
}

/// Symmetric midpoint nodes on `[-1, 1]` with equal weights `1/n_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    points: Vec<f64>,
}

impl VelocityGrid {
    pub fn new(n_v: usize) -> Result<Self> {
        if n_v < 2 {
            return Err(Error::InvalidCount {
                what: "velocity node",
                value: n_v,
                reason: "need at least 2 nodes",
            });
        }
        if n_v % 2 != 0 {
            return Err(Error::InvalidCount {
                what: "velocity node",
                value: n_v,
                reason: "must be even so the grid is symmetric about 0",
            });
        }
        // Build the positive half and mirror it so symmetry is bitwise exact.
        let half: Vec<f64> = (0..n_v / 2)
            .map(|k| (2 * k + 1) as f64 / n_v as f64)
            .collect();
        let mut points: Vec<f64> = half.iter().rev().map(|p| -p).collect();
        points.extend_from_slice(&half);
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.points.len() as f64
    }

    /// Quadrature of `v^k`, accumulated in mirrored pairs so odd moments vanish exactly.
    pub fn moment(&self, k: i32) -> f64 {
        let n = self.points.len();
        let mut acc = 0.0;
        for j in 0..n / 2 {
            acc += self.points[j].powi(k) + self.points[n - 1 - j].powi(k);
        }
        acc * self.weight()
    }
}

/// Named cross-section profiles used by the experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossSectionPreset {
    /// `σ ≡ 2`.
    Constant2,
    /// `σ(x) = 100 (x − 1)⁴`.
    Quartic,
    /// `σ = 0.02` on `[0.35, 0.65] ∪ [1.35, 1.65]`, `1` elsewhere.
    Contrast,
}

impl CrossSectionPreset {
    pub fn name(self) -> &'static str {
        match self {
            CrossSectionPreset::Constant2 => "constant2",
            CrossSectionPreset::Quartic => "quartic",
            CrossSectionPreset::Contrast => "contrast",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            CrossSectionPreset::Constant2 => 2.0,
            CrossSectionPreset::Quartic => 100.0 * (x - 1.0).powi(4),
            CrossSectionPreset::Contrast => {
                let thin = (0.35..=0.65).contains(&x) || (1.35..=1.65).contains(&x);
                if thin {
                    0.02
                } else {
                    1.0
                }
            }
        }
    }
}

impl FromStr for CrossSectionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant2" => Ok(Self::Constant2),
            "quartic" => Ok(Self::Quartic),
            "contrast" => Ok(Self::Contrast),
            other => Err(Error::UnknownName {
                kind: "cross-section preset",
                name: other.to_owned(),
            }),
        }
    }
}

/// Scattering cross-section sampled at the cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    values: Vec<f64>,
    tag: String,
}

impl CrossSection {
    pub fn from_preset(preset: CrossSectionPreset, grid: &SpatialGrid) -> Result<Self> {
        let values = grid.points().iter().map(|&x| preset.eval(x)).collect();
        Self::from_values(values, preset.name())
    }

    pub fn constant(value: f64, grid: &SpatialGrid) -> Result<Self> {
        Self::from_values(vec![value; grid.len()], "constant")
    }

    pub fn from_values(values: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "cross-section must be positive, got {v} at cell {i}"
            )));
        }
        Ok(Self {
            values,
            tag: tag.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn as_diagonal(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.values))
    }
}

/// `C = (1/n_v) e eᵀ − I`, the rectangle-rule discretisation of `ρ − u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionMatrix {
    c: DMatrix<f64>,
}

impl CollisionMatrix {
    pub fn new(n_v: usize) -> Result<Self> {
        if n_v < 2 {
            return Err(Error::InvalidCount {
                what: "velocity node",
                value: n_v,
                reason: "need at least 2 nodes",
            });
        }
        let w = 1.0 / n_v as f64;
        let c = DMatrix::from_fn(n_v, n_v, |i, j| if i == j { w - 1.0 } else { w });
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    /// `u · C`, i.e. `ρ eᵀ − u` row by row, without the dense product.
    pub fn apply_right(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mean = u.column_mean();
        let mut out = -u.clone();
        for mut col in out.column_iter_mut() {
            col += &mean;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxScheme {
    Upwind,
    Central,
    Ccp,
}

impl FluxScheme {
    pub fn name(self) -> &'static str {
        match self {
            FluxScheme::Upwind => "upwind",
            FluxScheme::Central => "central",
            FluxScheme::Ccp => "ccp",
        }
    }
}

impl fmt::Display for FluxScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FluxScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upwind" => Ok(Self::Upwind),
            "central" => Ok(Self::Central),
            "ccp" => Ok(Self::Ccp),
            other => Err(Error::UnknownName {
                kind: "flux scheme",
                name: other.to_owned(),
            }),
        }
    }
}

/// One `(Dₘ, Pₘ)` pair; `velocity` holds the diagonal of `Pₘ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxTerm {
    pub spatial: DMatrix<f64>,
    pub velocity: DVector<f64>,
}

impl FluxTerm {
    pub fn velocity_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.velocity)
    }
}

/// Transport discretisation `v ∂ₓu ≈ Σₘ Dₘ u Pₘ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxDecomposition {
    scheme: FluxScheme,
    terms: Vec<FluxTerm>,
}

/// Periodic central difference `(u_{i+1} − u_{i−1}) / 2dx`.
pub fn central_difference(grid: &SpatialGrid) -> DMatrix<f64> {
    let n = grid.len();
    let h = 0.5 / grid.dx();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, grid.wrap(i as isize + 1))] += h;
        d[(i, grid.wrap(i as isize - 1))] -= h;
    }
    d
}

/// Periodic backward difference `(u_i − u_{i−1}) / dx`.
pub fn backward_difference(grid: &SpatialGrid) -> DMatrix<f64> {
    let n = grid.len();
    let h = 1.0 / grid.dx();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] += h;
        d[(i, grid.wrap(i as isize - 1))] -= h;
    }
    d
}

/// Periodic forward difference `(u_{i+1} − u_i) / dx`.
pub fn forward_difference(grid: &SpatialGrid) -> DMatrix<f64> {
    let n = grid.len();
    let h = 1.0 / grid.dx();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, grid.wrap(i as isize + 1))] += h;
        d[(i, i)] -= h;
    }
    d
}

impl FluxDecomposition {
    /// Build the decomposition for `scheme`.
    ///
    /// For `Ccp` the upwind pair is weighted by `min(ε, 1)` and the central
    /// term by `1 − min(ε, 1)`; a zero-weight central term is dropped, so at
    /// `ε ≥ 1` the result is identical to `Upwind`.
    pub fn build(
        scheme: FluxScheme,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        epsilon: f64,
    ) -> Result<Self> {
        let v = DVector::from_column_slice(vgrid.points());
        let v_plus = v.map(|x| x.max(0.0));
        let v_minus = v.map(|x| x.min(0.0));
        let terms = match scheme {
            FluxScheme::Central => vec![FluxTerm {
                spatial: central_difference(grid),
                velocity: v,
            }],
            FluxScheme::Upwind => vec![
                FluxTerm {
                    spatial: backward_difference(grid),
                    velocity: v_plus,
                },
                FluxTerm {
                    spatial: forward_difference(grid),
                    velocity: v_minus,
                },
            ],
            FluxScheme::Ccp => {
                if !(epsilon.is_finite() && epsilon > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "CCP blend needs epsilon > 0, got {epsilon}"
                    )));
                }
                let w = epsilon.min(1.0);
                let mut terms = vec![
                    FluxTerm {
                        spatial: backward_difference(grid) * w,
                        velocity: v_plus,
                    },
                    FluxTerm {
                        spatial: forward_difference(grid) * w,
                        velocity: v_minus,
                    },
                ];
                if w < 1.0 {
                    terms.push(FluxTerm {
                        spatial: central_difference(grid) * (1.0 - w),
                        velocity: v,
                    });
                }
                terms
            }
        };
        Ok(Self { scheme, terms })
    }

    pub fn scheme(&self) -> FluxScheme {
        self.scheme
    }

    pub fn terms(&self) -> &[FluxTerm] {
        &self.terms
    }

    /// Every spatial matrix multiplied by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for t in &mut self.terms {
            t.spatial *= factor;
        }
        self
    }

    pub fn n_x(&self) -> usize {
        self.terms[0].spatial.nrows()
    }

    pub fn n_v(&self) -> usize {
        self.terms[0].velocity.len()
    }

    /// Dense evaluation of `Σₘ Dₘ u Pₘ`.
    pub fn apply(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.nrows() != self.n_x() || u.ncols() != self.n_v() {
            return Err(Error::ShapeMismatch(format!(
                "transport expects {}x{}, got {}x{}",
                self.n_x(),
                self.n_v(),
                u.nrows(),
                u.ncols()
            )));
        }
        let mut out = DMatrix::zeros(u.nrows(), u.ncols());
        for term in &self.terms {
            let mut du = &term.spatial * u;
            for (j, mut col) in du.column_iter_mut().enumerate() {
                col *= term.velocity[j];
            }
            out += du;
        }
        Ok(out)
    }
}
