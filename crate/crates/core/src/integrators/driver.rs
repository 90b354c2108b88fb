use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{h_check, rank1_deviation, singular_spectrum};
use crate::error::{Error, Result};
use crate::lowrank::{DenseField, LowRankState};
use crate::mesh::central_difference;
use crate::problem::ProblemSpec;
use crate::substeps::TimeScheme;

use super::{
    advance, Discretization, DiffusionSolver, IntegratorConfig, Mode, ReferenceSolver,
    SubstepTimings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Initial,
    Euler,
    Cnie,
    Reference,
    Diffusion,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::Initial => "initial",
            StepKind::Euler => "euler",
            StepKind::Cnie => "cnie",
            StepKind::Reference => "reference",
            StepKind::Diffusion => "diffusion",
        }
    }
}

/// State summary after one step (or of the initial data for `step = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub kind: StepKind,
    pub density: DVector<f64>,
    /// `Δx · Σᵢ ρᵢ`.
    pub mass: f64,
    /// `‖ρ^{n+2/3} − ρⁿ‖₂` for low-rank steps.
    pub drift_two_thirds: Option<f64>,
    /// `‖u − ρ eᵀ‖_F / ‖u‖_F`; absent in diffusion mode.
    pub rank1_deviation: Option<f64>,
    /// Of `S` for low-rank modes, of `u` for the reference.
    pub singular_values: Vec<f64>,
    /// `(‖XᵀX − I‖_F, ‖VᵀV − I‖_F)`.
    pub orthonormality: Option<(f64, f64)>,
    pub qr_deficient: usize,
    pub solve_residual: Option<f64>,
    /// `(D_c ρ)ᵀ(D_c ρ)` with the central difference.
    pub h_determinant: f64,
    pub timings: SubstepTimings,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub spec: ProblemSpec,
    pub config: IntegratorConfig,
    pub records: Vec<StepRecord>,
    pub final_state: Option<LowRankState>,
    pub final_field: Option<DenseField>,
    pub timings: SubstepTimings,
    pub qr_deficient_total: usize,
}

impl RunReport {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("a report always holds the initial record")
    }

    pub fn final_density(&self) -> &DVector<f64> {
        &self.final_record().density
    }

    /// Largest orthonormality residual over the run.
    pub fn max_orthonormality(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.orthonormality.map(|(a, b)| a.max(b)))
            .reduce(f64::max)
    }
}

struct Recorder {
    dx: f64,
    central: nalgebra::DMatrix<f64>,
}

impl Recorder {
    fn base(&self, step: usize, time: f64, kind: StepKind, density: DVector<f64>) -> StepRecord {
        let h = h_check(&self.central, &density);
        StepRecord {
            step,
            time,
            kind,
            mass: density.sum() * self.dx,
            h_determinant: h.determinant,
            density,
            drift_two_thirds: None,
            rank1_deviation: None,
            singular_values: Vec::new(),
            orthonormality: None,
            qr_deficient: 0,
            solve_residual: None,
            timings: SubstepTimings::default(),
        }
    }

    fn low_rank(
        &self,
        step: usize,
        time: f64,
        kind: StepKind,
        state: &LowRankState,
        disc: &Discretization,
    ) -> Result<StepRecord> {
        let mut rec = self.base(step, time, kind, state.density());
        rec.rank1_deviation = Some(rank1_deviation(&state.to_dense(), &disc.vgrid)?);
        rec.singular_values = state.singular_values();
        rec.orthonormality = Some(state.orthonormality_residuals());
        Ok(rec)
    }

    fn dense(
        &self,
        step: usize,
        time: f64,
        kind: StepKind,
        u: &DenseField,
        disc: &Discretization,
    ) -> Result<StepRecord> {
        let mut rec = self.base(step, time, kind, u.density());
        rec.rank1_deviation = Some(rank1_deviation(u, &disc.vgrid)?);
        rec.singular_values = singular_spectrum(u).values;
        Ok(rec)
    }
}

fn abort(step: usize, time: f64, err: Error, last: Option<&LowRankState>) -> Error {
    match err {
        Error::NonFinite(_) | Error::SingularSystem { .. } => Error::NumericalAbort {
            step,
            time,
            reason: err.to_string(),
            last_state: last.map(|s| Box::new(s.clone())),
        },
        other => other,
    }
}

/// Run `spec` under `cfg`: SVD initialisation, then the step schedule of
/// `cfg.mode`. Records one row for the initial data and one per step.
pub fn run_algorithm(spec: &ProblemSpec, cfg: &IntegratorConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut spec = spec.clone();
    spec.epsilon = cfg.epsilon;
    spec.flux = cfg.flux;
    spec.mode = cfg.mode;
    spec.dt1 = Some(cfg.dt1);
    spec.dt2 = Some(cfg.dt2);
    spec.t_max = cfg.t_max;
    spec.validate()?;
    let disc = spec.discretization()?;
    let recorder = Recorder {
        dx: disc.grid.dx(),
        central: central_difference(&disc.grid),
    };
    let schedule = cfg.schedule();
    let mut records = Vec::with_capacity(schedule.len() + 1);
    let mut totals = SubstepTimings::default();
    let mut deficient_total = 0;
    let mut final_state = None;
    let mut final_field = None;

    match cfg.mode {
        Mode::Algorithm3 | Mode::PureEuler | Mode::PureCnie => {
            let mut state = spec.initial_state(&disc)?;
            records.push(recorder.low_rank(0, 0.0, StepKind::Initial, &state, &disc)?);
            let mut time = 0.0;
            for (n, &(kind, dt)) in schedule.iter().enumerate() {
                let scheme = match kind {
                    StepKind::Cnie => TimeScheme::CrankNicolson,
                    _ => TimeScheme::ImplicitEuler,
                };
                let rho_n = state.density();
                let trace = advance(&state, &disc, dt, scheme)
                    .map_err(|e| abort(n + 1, time, e, Some(&state)))?;
                time = step_time(cfg, n + 1);
                state = trace.state;
                let mut rec = recorder.low_rank(n + 1, time, kind, &state, &disc)?;
                rec.drift_two_thirds = Some((&trace.rho_two_thirds - &rho_n).norm());
                rec.qr_deficient = trace.qr_deficient;
                rec.solve_residual = Some(trace.max_residual);
                rec.timings = trace.timings;
                totals.accumulate(&trace.timings);
                deficient_total += trace.qr_deficient;
                records.push(rec);
            }
            final_state = Some(state);
        }
        Mode::Reference => {
            let solver = ReferenceSolver::new(&disc, cfg.dt2)?;
            let mut u = spec.initial_field(&disc)?;
            records.push(recorder.dense(0, 0.0, StepKind::Initial, &u, &disc)?);
            for n in 0..schedule.len() {
                u = solver
                    .step(&u)
                    .map_err(|e| abort(n + 1, step_time(cfg, n), e, None))?;
                records.push(recorder.dense(n + 1, step_time(cfg, n + 1), StepKind::Reference, &u, &disc)?);
            }
            final_field = Some(u);
        }
        Mode::Diffusion => {
            let solver = DiffusionSolver::new(&disc.grid, &disc.sigma, cfg.dt2)?;
            let mut rho = spec.initial_density(&disc)?;
            records.push(recorder.base(0, 0.0, StepKind::Initial, rho.clone()));
            for n in 0..schedule.len() {
                rho = solver
                    .step(&rho)
                    .map_err(|e| abort(n + 1, step_time(cfg, n), e, None))?;
                records.push(recorder.base(n + 1, step_time(cfg, n + 1), StepKind::Diffusion, rho.clone()));
            }
        }
    }

    Ok(RunReport {
        spec,
        config: *cfg,
        records,
        final_state,
        final_field,
        timings: totals,
        qr_deficient_total: deficient_total,
    })
}

/// Time after `steps` steps of the schedule.
fn step_time(cfg: &IntegratorConfig, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    match cfg.mode {
        Mode::Algorithm3 => cfg.dt1 + (steps - 1) as f64 * cfg.dt2,
        _ => steps as f64 * cfg.dt2,
    }
}
