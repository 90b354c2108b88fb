//! Subcommands behind the `kinetic-dlr` binary. Each writes its artifacts
//! atomically and returns what it wrote, so the binary only parses
//! arguments and reports errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::diagnostics::{projection_error_curve, singular_spectrum, ProjectionPoint, SpectrumReport};
use crate::error::{Error, Result};
use crate::integrators::{advance, run_algorithm, Mode, RunReport};
use crate::io::{
    compare_series, dump_state, fmt_f64, read_density_series, write_atomic, write_comparison_csv,
    write_projection_csv, write_report, write_spectrum_csv, ComparisonRow, DensitySeries,
};
use crate::problem::{ProblemSpec, SweepSpec, PRESET_NAMES};
use crate::substeps::TimeScheme;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "KINETIC_DLR_OUT";

/// Resolve `spec` as a TOML file if it exists, otherwise as a preset name,
/// then apply `mode` and `key=value` overrides in that order.
pub fn load_spec<S: AsRef<str>>(spec: &str, mode: Option<Mode>, overrides: &[S]) -> Result<ProblemSpec> {
    let path = Path::new(spec);
    let mut base = if path.is_file() {
        ProblemSpec::from_toml_str(&fs::read_to_string(path)?)?
    } else if PRESET_NAMES.contains(&spec) {
        ProblemSpec::preset(spec)?
    } else {
        return Err(Error::Config(format!(
            "`{spec}` is neither a readable spec file nor a preset ({})",
            PRESET_NAMES.join(", ")
        )));
    };
    if let Some(mode) = mode {
        base.mode = mode;
    }
    base.with_overrides(overrides)
}

pub fn load_sweep<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<SweepSpec> {
    let mut sweep = SweepSpec::from_toml_str(&fs::read_to_string(path)?)?;
    sweep.base = sweep.base.with_overrides(overrides)?;
    Ok(sweep)
}

/// Machine-readable description of a failure, printed by the binary on stderr.
pub fn error_record(err: &Error) -> serde_json::Value {
    let mut record = serde_json::json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
    });
    if let Error::NumericalAbort { step, time, .. } = err {
        record["step"] = serde_json::json!(step);
        record["time"] = serde_json::json!(time);
    }
    record
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Run one problem and write `<stem>.csv` and `<stem>.json` into `out_dir`.
/// On a numerical abort the last finite low-rank state is dumped as
/// `<stem>_abort_{x,s,v}.csv` and nothing else is written.
pub fn cmd_run(spec: &ProblemSpec, out_dir: &Path) -> Result<RunArtifacts> {
    let cfg = spec.integrator_config()?;
    let report = match run_algorithm(spec, &cfg) {
        Ok(r) => r,
        Err(err) => {
            if let Error::NumericalAbort {
                last_state: Some(state),
                ..
            } = &err
            {
                let stem = format!("{}_abort", spec.file_stem()?);
                // Best effort; the abort itself is the error worth reporting.
                let _ = dump_state(state, out_dir, &stem);
            }
            return Err(err);
        }
    };
    let (csv, json) = write_report(&report, out_dir)?;
    Ok(RunArtifacts { report, csv, json })
}

/// What a run CSV is compared against.
#[derive(Debug, Clone)]
pub enum CompareTarget {
    /// Another run CSV.
    Csv(PathBuf),
    /// A fresh run of the given spec in `diffusion` mode.
    Diffusion(ProblemSpec),
    /// A fresh run of the given spec in `reference` mode.
    Reference(ProblemSpec),
}

/// Relative L2 density error of `run_csv` against `target` over time,
/// written to `out`.
pub fn cmd_compare(run_csv: &Path, target: &CompareTarget, out: &Path) -> Result<Vec<ComparisonRow>> {
    let a = read_density_series(run_csv)?;
    let b = match target {
        CompareTarget::Csv(path) => read_density_series(path)?,
        CompareTarget::Diffusion(spec) => reference_series(spec, Mode::Diffusion, &a)?,
        CompareTarget::Reference(spec) => reference_series(spec, Mode::Reference, &a)?,
    };
    let rows = compare_series(&a, &b)?;
    write_atomic(out, |w| write_comparison_csv(&rows, w))?;
    Ok(rows)
}

/// Run `spec` in `mode` far enough to cover every time of `run`.
fn reference_series(spec: &ProblemSpec, mode: Mode, run: &DensitySeries) -> Result<DensitySeries> {
    let mut spec = spec.clone();
    spec.mode = mode;
    let last = run.times.iter().copied().fold(0.0, f64::max);
    spec.t_max = spec.t_max.max(last);
    let cfg = spec.integrator_config()?;
    Ok(DensitySeries::from_report(&run_algorithm(&spec, &cfg)?))
}

/// Which grid sizes a benchmark ladder varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchAxis {
    /// `n_x` only, at the base `n_v`.
    Space,
    /// `n_x = n_v`.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_x: usize,
    pub n_v: usize,
    pub rank: usize,
    pub l_seconds: f64,
    pub s_seconds: f64,
    pub k_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted exponent of K-substep time against `n_x`.
    pub k_exponent: f64,
    /// Fitted exponent of the total step time against the varied size.
    pub total_exponent: f64,
}

/// Largest linear-system dimension a benchmark may assemble.
pub const DEFAULT_BENCH_CAP: usize = 4096;

/// Time `repeats` CNIE steps per size and report median substep times.
pub fn cmd_bench(
    base: &ProblemSpec,
    sizes: &[usize],
    axis: BenchAxis,
    repeats: usize,
    cap: usize,
    out: &Path,
) -> Result<BenchReport> {
    if sizes.len() < 2 {
        return Err(Error::InvalidParameter("a bench ladder needs at least two sizes".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be positive".into()));
    }
    let mut specs = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut spec = base.clone();
        spec.n_x = n;
        if axis == BenchAxis::Both {
            spec.n_v = n;
        }
        spec.dt1 = None;
        spec.dt2 = None;
        let dim = spec.rank * spec.n_x.max(spec.n_v);
        if dim > cap {
            return Err(Error::InvalidParameter(format!(
                "size {n} needs a {dim}-dimensional substep system, cap is {cap}"
            )));
        }
        spec.validate()?;
        specs.push(spec);
    }

    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let disc = spec.discretization()?;
        let cfg = spec.integrator_config()?;
        let state = spec.initial_state(&disc)?;
        // One untimed step warms caches and allocations.
        advance(&state, &disc, cfg.dt2, TimeScheme::CrankNicolson)?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let trace = advance(&state, &disc, cfg.dt2, TimeScheme::CrankNicolson)?;
            samples.push((trace.timings, start.elapsed().as_secs_f64()));
        }
        let median = |f: &dyn Fn(&(crate::integrators::SubstepTimings, f64)) -> f64| {
            let mut v: Vec<f64> = samples.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        rows.push(BenchRow {
            n_x: spec.n_x,
            n_v: spec.n_v,
            rank: spec.rank,
            l_seconds: median(&|s| s.0.l),
            s_seconds: median(&|s| s.0.s),
            k_seconds: median(&|s| s.0.k),
            total_seconds: median(&|s| s.1),
        });
    }
    let report = BenchReport {
        k_exponent: loglog_slope(&rows, |r| r.n_x as f64, |r| r.k_seconds),
        total_exponent: loglog_slope(&rows, |r| r.n_x as f64, |r| r.total_seconds),
        rows,
    };
    write_atomic(out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["n_x", "n_v", "rank", "l_seconds", "s_seconds", "k_seconds", "total_seconds"])?;
        for r in &report.rows {
            csv.write_record([
                r.n_x.to_string(),
                r.n_v.to_string(),
                r.rank.to_string(),
                fmt_f64(r.l_seconds),
                fmt_f64(r.s_seconds),
                fmt_f64(r.k_seconds),
                fmt_f64(r.total_seconds),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    write_atomic(&out.with_extension("json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(report)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope<T>(rows: &[T], x: impl Fn(&T) -> f64, y: impl Fn(&T) -> f64) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| x(r).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| y(r).max(f64::MIN_POSITIVE).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug)]
pub struct SpectrumArtifacts {
    pub spectrum: SpectrumReport,
    pub spectrum_csv: PathBuf,
    /// Projection errors of the reference against a low-rank run, when requested.
    pub projection: Option<(Vec<ProjectionPoint>, PathBuf)>,
}

/// Singular values of the reference solution at `t_max`. With
/// `projection = Some(l)` also runs the low-rank integrator on the same spec
/// and writes the relative projection errors for `1..=l` modes.
pub fn cmd_svd_spectrum(spec: &ProblemSpec, projection: Option<usize>, out_dir: &Path) -> Result<SpectrumArtifacts> {
    let mut reference = spec.clone();
    reference.mode = Mode::Reference;
    let cfg = reference.integrator_config()?;
    let report = run_algorithm(&reference, &cfg)?;
    let field = report
        .final_field
        .as_ref()
        .ok_or_else(|| Error::Config("reference run produced no field".into()))?;
    let spectrum = singular_spectrum(field);
    let stem = spec.file_stem()?;
    let spectrum_csv = out_dir.join(format!("{stem}_spectrum.csv"));
    write_atomic(&spectrum_csv, |w| write_spectrum_csv(&spectrum, w))?;

    let projection = match projection {
        None => None,
        Some(max_l) => {
            let mut low_rank = spec.clone();
            if !low_rank.mode.is_low_rank() {
                low_rank.mode = Mode::Algorithm3;
            }
            let cfg = low_rank.integrator_config()?;
            let run = run_algorithm(&low_rank, &cfg)?;
            let state = run
                .final_state
                .as_ref()
                .ok_or_else(|| Error::Config("low-rank run produced no state".into()))?;
            let points = projection_error_curve(field, state, max_l)?;
            let path = out_dir.join(format!("{stem}_projection.csv"));
            write_atomic(&path, |w| write_projection_csv(&points, w))?;
            Some((points, path))
        }
    };
    Ok(SpectrumArtifacts {
        spectrum,
        spectrum_csv,
        projection,
    })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub index: usize,
    pub stem: String,
    pub dir: PathBuf,
    pub result: Result<RunArtifacts>,
}

/// Run every point of `sweep` with at most `jobs` runs in flight. Run `i`
/// writes into `out_dir/run_<i>/`; a summary CSV lists every run in order.
pub fn cmd_sweep(sweep: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<Vec<SweepOutcome>> {
    let specs = sweep.expand()?;
    let jobs = jobs.max(1).min(specs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepOutcome>>> = Mutex::new((0..specs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = specs.get(i) else { break };
                let dir = out_dir.join(format!("run_{i:03}"));
                let stem = spec.file_stem().unwrap_or_else(|_| spec.name.clone());
                let result = cmd_run(spec, &dir);
                let outcome = SweepOutcome {
                    index: i,
                    stem,
                    dir,
                    result,
                };
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });

    let outcomes: Vec<SweepOutcome> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|o| o.expect("every index is claimed exactly once"))
        .collect();
    write_atomic(&out_dir.join("sweep_summary.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["index", "stem", "epsilon", "rank", "dt2", "status", "final_time", "final_mass", "error"])?;
        for (o, spec) in outcomes.iter().zip(&specs) {
            let dt2 = spec.integrator_config().map(|c| c.dt2).unwrap_or(f64::NAN);
            let (status, time, mass, error) = match &o.result {
                Ok(a) => {
                    let last = a.report.final_record();
                    ("ok", fmt_f64(last.time), fmt_f64(last.mass), String::new())
                }
                Err(e) => ("error", String::new(), String::new(), e.to_string()),
            };
            csv.write_record([
                o.index.to_string(),
                o.stem.clone(),
                fmt_f64(spec.epsilon),
                spec.rank.to_string(),
                fmt_f64(dt2),
                status.to_owned(),
                time,
                mass,
                error,
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(outcomes)
}
