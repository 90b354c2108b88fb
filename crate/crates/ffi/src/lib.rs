//! C ABI over `kinetic-dlr`.
//!
//! Handles are opaque heap objects created by `*_new`/`*_preset` functions
//! and released with the matching `*_free`. Every fallible function returns
//! a [`KdlrStatus`]; on failure a message is available from
//! [`kdlr_last_error_message`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kinetic_dlr::integrators::{advance, DiffusionSolver, IntegratorConfig, ReferenceSolver, StepKind};
use kinetic_dlr::substeps::TimeScheme;
use kinetic_dlr::{DenseField, Discretization, Error, LowRankState, Mode, ProblemSpec};
use nalgebra::DVector;

/// Result codes shared by every function of the C interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdlrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numerical = 4,
    Config = 5,
    Io = 6,
    /// The output buffer is shorter than the required length, which is
    /// still written to `*written`.
    BufferTooSmall = 7,
    /// The schedule is exhausted; no step was taken.
    Finished = 8,
    Panic = 9,
}

/// A validated problem description.
pub struct KdlrProblem {
    spec: ProblemSpec,
}

enum Field {
    LowRank(LowRankState),
    Reference(ReferenceSolver, DenseField),
    Diffusion(DiffusionSolver, DVector<f64>),
}

/// A running solver: the current field plus its position in the schedule.
pub struct KdlrSolver {
    disc: Discretization,
    schedule: Vec<(StepKind, f64)>,
    cfg: IntegratorConfig,
    taken: usize,
    time: f64,
    field: Field,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> KdlrStatus {
    match err.kind() {
        "shape-mismatch" => KdlrStatus::ShapeMismatch,
        "numerical" => KdlrStatus::Numerical,
        "config" => KdlrStatus::Config,
        "io" => KdlrStatus::Io,
        _ => KdlrStatus::InvalidArgument,
    }
}

/// Run `body`, translating errors and panics into status codes.
fn guard<F>(body: F) -> KdlrStatus
where
    F: FnOnce() -> Result<(), (KdlrStatus, String)>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => KdlrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KdlrStatus::Panic
        }
    }
}

fn lib_err(err: Error) -> (KdlrStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (KdlrStatus, String) {
    (KdlrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (KdlrStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (KdlrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize, written: *mut usize) -> Result<(), (KdlrStatus, String)> {
    if written.is_null() {
        return Err(null("written"));
    }
    *written = values.len();
    if len < values.len() {
        return Err((
            KdlrStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn kdlr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kdlr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create a problem from a preset name such as `example1_kinetic`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdlr_problem_preset(name: *const c_char, out: *mut *mut KdlrProblem) -> KdlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = ProblemSpec::preset(read_str(name, "name")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(KdlrProblem { spec }));
        Ok(())
    })
}

/// Create a problem from flat TOML text (same format as spec files).
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdlr_problem_from_toml(text: *const c_char, out: *mut *mut KdlrProblem) -> KdlrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = ProblemSpec::from_toml_str(read_str(text, "text")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(KdlrProblem { spec }));
        Ok(())
    })
}

/// Apply one `key=value` override. Each call validates the whole problem,
/// so lower `rank` before shrinking a grid. The problem is unchanged on failure.
///
/// # Safety
/// `problem` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kdlr_problem_set(problem: *mut KdlrProblem, assignment: *const c_char) -> KdlrStatus {
    guard(|| {
        let problem = problem.as_mut().ok_or_else(|| null("problem"))?;
        let item = read_str(assignment, "assignment")?;
        problem.spec = problem.spec.with_overrides(&[item]).map_err(lib_err)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kdlr_problem_free(problem: *mut KdlrProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

fn build_solver(spec: &ProblemSpec) -> kinetic_dlr::Result<KdlrSolver> {
    let cfg = spec.integrator_config()?;
    let disc = spec.discretization()?;
    let field = match cfg.mode {
        Mode::Algorithm3 | Mode::PureEuler | Mode::PureCnie => Field::LowRank(spec.initial_state(&disc)?),
        Mode::Reference => Field::Reference(ReferenceSolver::new(&disc, cfg.dt2)?, spec.initial_field(&disc)?),
        Mode::Diffusion => Field::Diffusion(
            DiffusionSolver::new(&disc.grid, &disc.sigma, cfg.dt2)?,
            spec.initial_density(&disc)?,
        ),
    };
    Ok(KdlrSolver {
        schedule: cfg.schedule(),
        cfg,
        disc,
        taken: 0,
        time: 0.0,
        field,
    })
}

/// Set up the initial data and step schedule of `problem`.
///
/// # Safety
/// `problem` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_new(problem: *const KdlrProblem, out: *mut *mut KdlrSolver) -> KdlrStatus {
    guard(|| {
        let problem = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let solver = build_solver(&problem.spec).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(solver));
        Ok(())
    })
}

impl KdlrSolver {
    fn step(&mut self) -> kinetic_dlr::Result<bool> {
        let Some(&(kind, dt)) = self.schedule.get(self.taken) else {
            return Ok(false);
        };
        match &mut self.field {
            Field::LowRank(state) => {
                let scheme = if kind == StepKind::Cnie {
                    TimeScheme::CrankNicolson
                } else {
                    TimeScheme::ImplicitEuler
                };
                *state = advance(state, &self.disc, dt, scheme)?.state;
            }
            Field::Reference(solver, u) => *u = solver.step(u)?,
            Field::Diffusion(solver, rho) => *rho = solver.step(rho)?,
        }
        self.taken += 1;
        self.time = match self.cfg.mode {
            Mode::Algorithm3 => self.cfg.dt1 + (self.taken - 1) as f64 * self.cfg.dt2,
            _ => self.taken as f64 * self.cfg.dt2,
        };
        Ok(true)
    }

    fn density(&self) -> DVector<f64> {
        match &self.field {
            Field::LowRank(s) => s.density(),
            Field::Reference(_, u) => u.density(),
            Field::Diffusion(_, rho) => rho.clone(),
        }
    }
}

/// Take the next scheduled step; `KDLR_STATUS_FINISHED` once the schedule is done.
///
/// # Safety
/// `solver` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_step(solver: *mut KdlrSolver) -> KdlrStatus {
    let mut finished = false;
    let status = guard(|| {
        let solver = solver.as_mut().ok_or_else(|| null("solver"))?;
        finished = !solver.step().map_err(lib_err)?;
        Ok(())
    });
    if status == KdlrStatus::Ok && finished {
        KdlrStatus::Finished
    } else {
        status
    }
}

/// Take every remaining step.
///
/// # Safety
/// `solver` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_run(solver: *mut KdlrSolver) -> KdlrStatus {
    guard(|| {
        let solver = solver.as_mut().ok_or_else(|| null("solver"))?;
        while solver.step().map_err(lib_err)? {}
        Ok(())
    })
}

/// Current time and number of steps taken (either output may be null).
///
/// # Safety
/// `solver` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_progress(solver: *const KdlrSolver, time: *mut f64, steps: *mut usize) -> KdlrStatus {
    guard(|| {
        let solver = solver.as_ref().ok_or_else(|| null("solver"))?;
        if let Some(t) = time.as_mut() {
            *t = solver.time;
        }
        if let Some(s) = steps.as_mut() {
            *s = solver.taken;
        }
        Ok(())
    })
}

/// Total number of steps in the schedule.
///
/// # Safety
/// `solver` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_schedule_len(solver: *const KdlrSolver, out: *mut usize) -> KdlrStatus {
    guard(|| {
        let solver = solver.as_ref().ok_or_else(|| null("solver"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = solver.schedule.len();
        Ok(())
    })
}

/// Copy the density `ρᵢ` (length `n_x`) into `out`. `*written` receives
/// the required length even when the buffer is too small.
///
/// # Safety
/// `solver` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_density(solver: *const KdlrSolver, out: *mut f64, len: usize, written: *mut usize) -> KdlrStatus {
    guard(|| {
        let solver = solver.as_ref().ok_or_else(|| null("solver"))?;
        copy_out(solver.density().as_slice(), out, len, written)
    })
}

/// Singular values in decreasing order: of `S` for low-rank modes, of the
/// full field for the reference mode. Empty in diffusion mode.
///
/// # Safety
/// `solver` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_singular_values(solver: *const KdlrSolver, out: *mut f64, len: usize, written: *mut usize) -> KdlrStatus {
    guard(|| {
        let solver = solver.as_ref().ok_or_else(|| null("solver"))?;
        let values = match &solver.field {
            Field::LowRank(s) => s.singular_values(),
            Field::Reference(_, u) => kinetic_dlr::diagnostics::singular_spectrum(u).values,
            Field::Diffusion(..) => Vec::new(),
        };
        copy_out(&values, out, len, written)
    })
}

/// # Safety
/// `solver` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kdlr_solver_free(solver: *mut KdlrSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}
