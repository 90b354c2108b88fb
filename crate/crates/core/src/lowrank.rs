//! The factored solution `u ≈ X S Vᵀ` and the dense matrices it is compared against.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::mesh::{SpatialGrid, VelocityGrid};

/// Orthonormality tolerance on `XᵀX − I` and `VᵀV − I` (Frobenius).
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Relative threshold below which a QR column counts as rank-deficient.
pub const QR_DEFICIENCY_TOL: f64 = 1e-12;

/// Full `n_x × n_v` grid function, `u[(i, j)] ≈ u(xᵢ, vⱼ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    values: DMatrix<f64>,
}

impl DenseField {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense field"));
        }
        Ok(Self { values })
    }

    /// Sample `f(x, v)` on the tensor grid.
    pub fn sample<F>(f: F, grid: &SpatialGrid, vgrid: &VelocityGrid) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64,
    {
        let (xs, vs) = (grid.points(), vgrid.points());
        Self::new(DMatrix::from_fn(xs.len(), vs.len(), |i, j| f(xs[i], vs[j])))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_x(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_v(&self) -> usize {
        self.values.ncols()
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    /// Row averages `(1/n_v) Σⱼ u_{ij}`.
    pub fn density(&self) -> DVector<f64> {
        self.values.column_mean()
    }

    /// `Σ_{ij} u_{ij}`.
    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }
}

/// Density of `u` on `vgrid`: the rectangle-rule average over velocity.
pub fn density(u: &DenseField, vgrid: &VelocityGrid) -> Result<DVector<f64>> {
    if u.n_v() != vgrid.len() {
        return Err(Error::ShapeMismatch(format!(
            "field has {} velocity columns, grid has {}",
            u.n_v(),
            vgrid.len()
        )));
    }
    Ok(u.density())
}

/// Thin QR factors with a nonnegative diagonal in `r`.
#[derive(Debug, Clone)]
pub struct ThinQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Columns whose residual fell below the deficiency threshold; `q` was
    /// completed with an orthonormal complement vector there.
    pub deficient: Vec<usize>,
}

/// Gram–Schmidt (two passes) thin QR of a tall `p × k` matrix.
///
/// A column whose orthogonal residual is below `1e-12 ‖m‖_F` is treated as
/// dependent: its `q` column is replaced by the unit vector most orthogonal
/// to the basis built so far and its diagonal entry in `r` is zero. Entries
/// of that row to the right still carry later columns' components, so
/// `m = q r` holds to the deficiency threshold.
pub fn qr_columns(m: &DMatrix<f64>) -> Result<ThinQr> {
    let (p, k) = m.shape();
    if p < k {
        return Err(Error::ShapeMismatch(format!(
            "thin QR needs rows >= columns, got {p}x{k}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QR input"));
    }
    let tol = QR_DEFICIENCY_TOL * m.norm();
    let mut q = DMatrix::<f64>::zeros(p, k);
    let mut r = DMatrix::<f64>::zeros(k, k);
    let mut deficient = Vec::new();

    for j in 0..k {
        let mut w = m.column(j).clone_owned();
        for _ in 0..2 {
            for c in 0..j {
                let proj = q.column(c).dot(&w);
                r[(c, j)] += proj;
                w.axpy(-proj, &q.column(c), 1.0);
            }
        }
        let norm = w.norm();
        if norm > tol && norm > 0.0 {
            r[(j, j)] = norm;
            q.set_column(j, &(w / norm));
        } else {
            deficient.push(j);
            let basis = complement_vector(&q, j);
            q.set_column(j, &basis);
        }
    }
    Ok(ThinQr { q, r, deficient })
}

/// Unit vector orthogonal to the first `j` columns of `q`, seeded from the
/// standard basis vector with the largest residual.
fn complement_vector(q: &DMatrix<f64>, j: usize) -> DVector<f64> {
    let p = q.nrows();
    let mut best = 0;
    let mut best_res = f64::NEG_INFINITY;
    for row in 0..p {
        let captured: f64 = (0..j).map(|c| q[(row, c)] * q[(row, c)]).sum();
        let res = 1.0 - captured;
        if res > best_res {
            best_res = res;
            best = row;
        }
    }
    let mut w = DVector::zeros(p);
    w[best] = 1.0;
    for _ in 0..2 {
        for c in 0..j {
            let proj = q.column(c).dot(&w);
            w.axpy(-proj, &q.column(c), 1.0);
        }
    }
    let norm = w.norm();
    w / norm
}

/// Rank-`r` factorisation `u = X S Vᵀ` with orthonormal `X` (`n_x × r`) and `V` (`n_v × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl LowRankState {
    /// Assemble a state from factors; only shapes and finiteness are checked.
    pub fn new(x: DMatrix<f64>, s: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = s.nrows();
        if s.ncols() != r || x.ncols() != r || v.ncols() != r {
            return Err(Error::ShapeMismatch(format!(
                "factors X {:?}, S {:?}, V {:?} disagree on rank",
                x.shape(),
                s.shape(),
                v.shape()
            )));
        }
        let max = x.nrows().min(v.nrows());
        if r == 0 || r > max {
            return Err(Error::RankOutOfRange { rank: r, max });
        }
        if x.iter().chain(s.iter()).chain(v.iter()).any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("low-rank factors"));
        }
        Ok(Self { x, s, v })
    }

    /// Truncated SVD of `u`: `X` = leading left vectors, `S` = diag(σ), `V` = leading right vectors.
    pub fn from_dense(u: &DenseField, rank: usize) -> Result<Self> {
        let (n_x, n_v) = (u.n_x(), u.n_v());
        let max = n_x.min(n_v);
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        let svd = SVD::new(u.values().clone(), true, true);
        let (left, right_t) = match (svd.u, svd.v_t) {
            (Some(l), Some(r)) => (l, r),
            _ => return Err(Error::NonFinite("SVD of initial data")),
        };
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let keep = &order[..rank];
        let x = DMatrix::from_fn(n_x, rank, |i, c| left[(i, keep[c])]);
        let v = DMatrix::from_fn(n_v, rank, |j, c| right_t[(keep[c], j)]);
        let s = DMatrix::from_fn(rank, rank, |a, b| {
            if a == b {
                svd.singular_values[keep[a]]
            } else {
                0.0
            }
        });
        Self::new(x, s, v)
    }

    /// Sample `f` on the grids and truncate to `rank`.
    pub fn init_from_function<F>(
        f: F,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        rank: usize,
    ) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64,
    {
        let u = DenseField::sample(f, grid, vgrid)?;
        Self::from_dense(&u, rank)
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_v(&self) -> usize {
        self.v.nrows()
    }

    pub fn x_factor(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn core(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn v_factor(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.x, self.s, self.v)
    }

    pub fn to_dense(&self) -> DenseField {
        DenseField {
            values: &self.x * &self.s * self.v.transpose(),
        }
    }

    /// Density without forming the dense field: `X S (Vᵀ e) / n_v`.
    pub fn density(&self) -> DVector<f64> {
        let v_mean = self.v.row_sum().transpose() / self.n_v() as f64;
        &self.x * (&self.s * v_mean)
    }

    /// `(‖XᵀX − I‖_F, ‖VᵀV − I‖_F)`.
    pub fn orthonormality_residuals(&self) -> (f64, f64) {
        let r = self.rank();
        let eye = DMatrix::<f64>::identity(r, r);
        (
            (self.x.tr_mul(&self.x) - &eye).norm(),
            (self.v.tr_mul(&self.v) - &eye).norm(),
        )
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let (ex, ev) = self.orthonormality_residuals();
        ex <= tol && ev <= tol
    }

    /// Singular values of the core, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv: Vec<f64> = self.s.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    /// The same `u` with `S` rotated to a nonincreasing diagonal, so that
    /// leading columns of `X` and `V` are the dominant modes.
    pub fn canonical(&self) -> Result<Self> {
        let svd = SVD::new(self.s.clone(), true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v)) => (u, v),
            _ => return Err(Error::NonFinite("SVD of core")),
        };
        let r = self.rank();
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = DMatrix::from_fn(r, r, |i, c| u[(i, order[c])]);
        let w = DMatrix::from_fn(r, r, |i, c| v_t[(order[c], i)]);
        let s = DMatrix::from_fn(r, r, |a, b| {
            if a == b {
                svd.singular_values[order[a]]
            } else {
                0.0
            }
        });
        Self::new(&self.x * u, s, &self.v * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grids(n_x: usize, n_v: usize) -> (SpatialGrid, VelocityGrid) {
        (
            SpatialGrid::new(n_x, 0.0, 2.0).unwrap(),
            VelocityGrid::new(n_v).unwrap(),
        )
    }

    fn quadratic(x: f64, v: f64) -> f64 {
        ((x - 1.0).powi(2) + 1.0) * (v * v + 1.0)
    }

    fn bump(x: f64, _v: f64) -> f64 {
        if 0.8 < x && x < 1.2 {
            2.0
        } else {
            0.0
        }
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn separable_initial_data_is_reconstructed() {
        let (g, vg) = grids(40, 16);
        let exact = DenseField::sample(quadratic, &g, &vg).unwrap();
        for r in [1, 2, 5] {
            let s = LowRankState::init_from_function(quadratic, &g, &vg, r).unwrap();
            assert!(rel_err(s.to_dense().values(), exact.values()) <= 1e-12);
            assert!(s.is_orthonormal(ORTHONORMALITY_TOL));
        }
        let exact = DenseField::sample(bump, &g, &vg).unwrap();
        let s = LowRankState::init_from_function(bump, &g, &vg, 1).unwrap();
        assert!(rel_err(s.to_dense().values(), exact.values()) <= 1e-12);
    }

    #[test]
    fn full_rank_round_trip() {
        let (g, vg) = grids(10, 6);
        let f = |x: f64, v: f64| (3.0 * x * v).sin() + x * x - v;
        let exact = DenseField::sample(f, &g, &vg).unwrap();
        let s = LowRankState::init_from_function(f, &g, &vg, 6).unwrap();
        assert!(rel_err(s.to_dense().values(), exact.values()) <= 1e-12);
    }

    #[test]
    fn truncation_error_is_the_singular_value_tail() {
        let (g, vg) = grids(12, 8);
        let f = |x: f64, v: f64| (x * v).exp() + (2.0 * x).cos() * v * v;
        let u = DenseField::sample(f, &g, &vg).unwrap();
        let mut sv: Vec<f64> = u.values().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for r in 1..=8 {
            let s = LowRankState::from_dense(&u, r).unwrap();
            let err = (s.to_dense().values() - u.values()).norm();
            let tail = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - tail).abs() <= 1e-12 * u.norm(), "r={r}");
        }
    }

    #[test]
    fn init_rejects_bad_rank_and_samples() {
        let (g, vg) = grids(6, 4);
        assert!(matches!(
            LowRankState::init_from_function(quadratic, &g, &vg, 5),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            LowRankState::init_from_function(quadratic, &g, &vg, 0),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            LowRankState::init_from_function(|_, _| f64::NAN, &g, &vg, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn to_dense_examples() {
        let mut x = DMatrix::zeros(3, 1);
        x[(0, 0)] = 1.0;
        let mut v = DMatrix::zeros(2, 1);
        v[(0, 0)] = 1.0;
        let s = LowRankState::new(x, DMatrix::from_element(1, 1, 2.0), v).unwrap();
        let d = s.to_dense();
        assert_eq!(d.values()[(0, 0)], 2.0);
        assert_eq!(d.values().iter().filter(|&&e| e != 0.0).count(), 1);

        let (nx, nv) = (4usize, 6usize);
        let x = DMatrix::from_element(nx, 1, 1.0 / (nx as f64).sqrt());
        let v = DMatrix::from_element(nv, 1, 1.0 / (nv as f64).sqrt());
        let s = LowRankState::new(x, DMatrix::from_element(1, 1, 3.0), v).unwrap();
        let expect = 3.0 / ((nx * nv) as f64).sqrt();
        assert!(s.to_dense().values().iter().all(|e| (e - expect).abs() < 1e-15));
    }

    #[test]
    fn qr_of_orthonormal_input_is_identity() {
        let (g, vg) = grids(9, 6);
        let s = LowRankState::init_from_function(
            |x, v| (x * v).sin() + x + v * v,
            &g,
            &vg,
            3,
        )
        .unwrap();
        let qr = qr_columns(s.x_factor()).unwrap();
        assert!((&qr.q - s.x_factor()).amax() < 1e-12);
        assert!((&qr.r - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
        assert!(qr.deficient.is_empty());
    }

    #[test]
    fn qr_of_scaled_identity_columns() {
        let m = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let qr = qr_columns(&m).unwrap();
        assert_eq!(qr.q, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert_eq!(qr.r, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
    }

    #[test]
    fn qr_completes_rank_deficient_input() {
        // Rank one with three columns.
        let col = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 3.0]);
        let m = DMatrix::from_fn(5, 3, |i, j| col[i] * (j as f64 + 1.0));
        let qr = qr_columns(&m).unwrap();
        assert_eq!(qr.deficient, vec![1, 2]);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((qr.q.tr_mul(&qr.q) - eye).norm() < 1e-12);
        assert!((&qr.q * &qr.r - &m).norm() <= 1e-12 * m.norm());
        assert_eq!(qr.r[(1, 1)], 0.0);
        assert_eq!(qr.r[(2, 2)], 0.0);

        let zero = DMatrix::<f64>::zeros(4, 2);
        let qr = qr_columns(&zero).unwrap();
        assert_eq!(qr.deficient, vec![0, 1]);
        assert!((qr.q.tr_mul(&qr.q) - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn qr_rejects_wide_input() {
        assert!(matches!(
            qr_columns(&DMatrix::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn density_examples() {
        let (g, vg) = grids(5, 4);
        let c = DenseField::sample(|_, _| 1.5, &g, &vg).unwrap();
        assert!(density(&c, &vg).unwrap().iter().all(|&r| (r - 1.5).abs() < 1e-15));
        let odd = DenseField::sample(|_, v| v, &g, &vg).unwrap();
        assert!(density(&odd, &vg).unwrap().iter().all(|&r| r.abs() < 1e-16));
        let sq = DenseField::sample(|_, v| v * v, &g, &vg).unwrap();
        assert!(density(&sq, &vg).unwrap().iter().all(|&r| (r - 0.3125).abs() < 1e-15));
        assert!(density(&sq, &VelocityGrid::new(6).unwrap()).is_err());
    }

    #[test]
    fn state_density_matches_dense_density() {
        let (g, vg) = grids(11, 8);
        let s = LowRankState::init_from_function(|x, v| (x - v).cos() + x, &g, &vg, 4).unwrap();
        let a = s.density();
        let b = s.to_dense().density();
        assert!((a - b).amax() < 1e-13);
    }

    #[test]
    fn canonical_form_preserves_field() {
        let (g, vg) = grids(10, 6);
        let base = LowRankState::init_from_function(|x, v| (x * v).sin() + v, &g, &vg, 3).unwrap();
        // Mix the factors with a rotation so S is no longer diagonal.
        let th: f64 = 0.7;
        let mut rot = DMatrix::<f64>::identity(3, 3);
        rot[(0, 0)] = th.cos();
        rot[(0, 1)] = -th.sin();
        rot[(1, 0)] = th.sin();
        rot[(1, 1)] = th.cos();
        let (x, s, v) = base.clone().into_parts();
        let mixed = LowRankState::new(x * &rot, rot.transpose() * s, v).unwrap();
        let canon = mixed.canonical().unwrap();
        assert!((canon.to_dense().values() - base.to_dense().values()).amax() < 1e-12);
        let sv = canon.singular_values();
        for (i, s) in sv.iter().enumerate().take(3) {
            assert!((canon.core()[(i, i)] - s).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn qr_reconstructs_and_is_orthonormal(
            p in 3usize..12,
            k in 1usize..4,
            seed in proptest::collection::vec(-5.0f64..5.0, 48)
        ) {
            let k = k.min(p);
            let m = DMatrix::from_fn(p, k, |i, j| seed[(i * 4 + j) % seed.len()] + (i * j) as f64 * 0.1);
            let qr = qr_columns(&m).unwrap();
            prop_assert!((&qr.q * &qr.r - &m).norm() <= 1e-12 * m.norm().max(1.0));
            let eye = DMatrix::<f64>::identity(k, k);
            prop_assert!((qr.q.tr_mul(&qr.q) - eye).norm() <= 1e-12);
            for i in 0..k {
                prop_assert!(qr.r[(i, i)] >= 0.0);
                for j in 0..i {
                    prop_assert_eq!(qr.r[(i, j)], 0.0);
                }
            }
            // Idempotent on its own orthonormal factor.
            let again = qr_columns(&qr.q).unwrap();
            prop_assert!((&again.q - &qr.q).amax() < 1e-12);
        }

        #[test]
        fn density_is_linear_in_core(scale in 0.1f64..10.0) {
            let (g, vg) = grids(7, 4);
            let s = LowRankState::init_from_function(|x, v| x * v + 1.0, &g, &vg, 2).unwrap();
            let (x, core, v) = s.clone().into_parts();
            let scaled = LowRankState::new(x, core * scale, v).unwrap();
            prop_assert!((scaled.density() - s.density() * scale).amax() < 1e-12 * scale);
        }
    }
}
