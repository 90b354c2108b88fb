//! CSV / JSON artifacts. Every file is written to a temporary sibling and
//! renamed into place, so an output path either holds a complete file or
//! nothing.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::diagnostics::{ProjectionPoint, SpectrumReport};
use crate::error::{Error, Result};
use crate::integrators::RunReport;
use crate::substeps::SubstepSystem;

/// Full-precision scientific notation (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Write `path` atomically through `fill`.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_writer(w: &mut dyn Write) -> csv::Writer<&mut dyn Write> {
    csv::WriterBuilder::new().from_writer(w)
}

/// Column names of the run CSV for a given singular-value count and grid size.
pub fn report_header(n_sv: usize, n_x: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "step",
        "time",
        "kind",
        "mass",
        "rho_norm",
        "drift_two_thirds",
        "rank1_deviation",
        "orth_x",
        "orth_v",
        "qr_deficient",
        "solve_residual",
        "h_determinant",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=n_sv).map(|k| format!("sv_{k}")));
    cols.extend((1..=n_x).map(|i| format!("rho_{i}")));
    cols
}

/// One row per record. Timings are deliberately absent so that identical
/// inputs give identical bytes.
pub fn write_report_csv(report: &RunReport, w: &mut dyn Write) -> Result<()> {
    let n_sv = report
        .records
        .iter()
        .map(|r| r.singular_values.len())
        .max()
        .unwrap_or(0);
    let n_x = report.spec.n_x;
    let mut out = csv_writer(w);
    out.write_record(report_header(n_sv, n_x))?;
    for rec in &report.records {
        let mut row = vec![
            rec.step.to_string(),
            fmt_f64(rec.time),
            rec.kind.name().to_owned(),
            fmt_f64(rec.mass),
            fmt_f64(rec.density.norm()),
            fmt_opt(rec.drift_two_thirds),
            fmt_opt(rec.rank1_deviation),
            fmt_opt(rec.orthonormality.map(|o| o.0)),
            fmt_opt(rec.orthonormality.map(|o| o.1)),
            rec.qr_deficient.to_string(),
            fmt_opt(rec.solve_residual),
            fmt_f64(rec.h_determinant),
        ];
        row.extend((0..n_sv).map(|k| fmt_opt(rec.singular_values.get(k).copied())));
        row.extend(rec.density.iter().map(|&v| fmt_f64(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a crate::problem::ProblemSpec,
    config: &'a crate::integrators::IntegratorConfig,
    steps: usize,
    final_time: f64,
    qr_deficient_total: usize,
    max_orthonormality: Option<f64>,
    timings_seconds: crate::integrators::SubstepTimings,
    csv: String,
}

pub fn write_report_json(report: &RunReport, csv_name: &str, w: &mut dyn Write) -> Result<()> {
    let sidecar = Sidecar {
        spec: &report.spec,
        config: &report.config,
        steps: report.records.len() - 1,
        final_time: report.final_record().time,
        qr_deficient_total: report.qr_deficient_total,
        max_orthonormality: report.max_orthonormality(),
        timings_seconds: report.timings,
        csv: csv_name.to_owned(),
    };
    serde_json::to_writer_pretty(&mut *w, &sidecar)?;
    writeln!(w)?;
    Ok(())
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let stem = report.spec.file_stem()?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_atomic(&csv_path, |w| write_report_csv(report, w))?;
    let csv_name = format!("{stem}.csv");
    write_atomic(&json_path, |w| write_report_json(report, &csv_name, w))?;
    Ok((csv_path, json_path))
}

/// Densities over time read back from a run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySeries {
    pub times: Vec<f64>,
    pub densities: Vec<DVector<f64>>,
}

impl DensitySeries {
    pub fn from_report(report: &RunReport) -> Self {
        Self {
            times: report.records.iter().map(|r| r.time).collect(),
            densities: report.records.iter().map(|r| r.density.clone()).collect(),
        }
    }

    pub fn n_x(&self) -> usize {
        self.densities.first().map_or(0, |d| d.len())
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {what} value `{field}`")))
}

pub fn read_density_series(path: &Path) -> Result<DensitySeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let time_col = headers
        .iter()
        .position(|h| h == "time")
        .ok_or_else(|| Error::Config(format!("{}: no `time` column", path.display())))?;
    let rho_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("rho_") && h[4..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if rho_cols.is_empty() {
        return Err(Error::Config(format!("{}: no rho_* columns", path.display())));
    }
    let mut series = DensitySeries {
        times: Vec::new(),
        densities: Vec::new(),
    };
    for row in reader.records() {
        let row = row?;
        series.times.push(parse_f64(&row[time_col], "time")?);
        let rho = rho_cols
            .iter()
            .map(|&c| parse_f64(&row[c], "density"))
            .collect::<Result<Vec<f64>>>()?;
        series.densities.push(DVector::from_vec(rho));
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub time_a: f64,
    pub time_b: f64,
    pub rel_error: f64,
}

/// For every time in `a` inside the time range of `b`, the relative error
/// `‖ρ_a − ρ_b‖₂/‖ρ_b‖₂` against the nearest time of `b`.
pub fn compare_series(a: &DensitySeries, b: &DensitySeries) -> Result<Vec<ComparisonRow>> {
    if a.n_x() != b.n_x() {
        return Err(Error::ShapeMismatch(format!(
            "grid mismatch: {} vs {} cells",
            a.n_x(),
            b.n_x()
        )));
    }
    if a.times.is_empty() || b.times.is_empty() {
        return Err(Error::Config("empty overlap: a series has no rows".into()));
    }
    let (lo, hi) = b
        .times
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &t| (l.min(t), h.max(t)));
    let slack = 1e-12 * hi.abs().max(1.0);
    let mut rows = Vec::new();
    for (ta, rho_a) in a.times.iter().zip(&a.densities) {
        if *ta < lo - slack || *ta > hi + slack {
            continue;
        }
        let (k, _) = b
            .times
            .iter()
            .enumerate()
            .map(|(k, tb)| (k, (tb - ta).abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("nonempty");
        let rho_b = &b.densities[k];
        let denom = rho_b.norm();
        let diff = (rho_a - rho_b).norm();
        rows.push(ComparisonRow {
            time_a: *ta,
            time_b: b.times[k],
            rel_error: if denom > 0.0 { diff / denom } else { diff },
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "empty overlap: no times of the first series lie in [{lo}, {hi}]"
        )));
    }
    Ok(rows)
}

pub fn write_comparison_csv(rows: &[ComparisonRow], w: &mut dyn Write) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["time_a", "time_b", "rel_l2_error"])?;
    for r in rows {
        out.write_record([fmt_f64(r.time_a), fmt_f64(r.time_b), fmt_f64(r.rel_error)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_spectrum_csv(spec: &SpectrumReport, w: &mut dyn Write) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["k", "singular_value", "ratio"])?;
    for (k, (v, r)) in spec.values.iter().zip(&spec.ratios).enumerate() {
        out.write_record([(k + 1).to_string(), fmt_f64(*v), fmt_f64(*r)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_projection_csv(points: &[ProjectionPoint], w: &mut dyn Write) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["l", "err_x_rel", "err_v_rel"])?;
    for p in points {
        out.write_record([p.l.to_string(), fmt_f64(p.err_x), fmt_f64(p.err_v)])?;
    }
    out.flush()?;
    Ok(())
}

/// Row-major matrix CSV preceded by a `# shape: <rows> x <cols>` line.
pub fn write_matrix_csv(m: &DMatrix<f64>, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "# shape: {} x {}", m.nrows(), m.ncols())?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in m.row_iter() {
        out.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let shape = first
        .trim()
        .strip_prefix("# shape:")
        .ok_or_else(|| Error::Config(format!("{}: missing `# shape:` header", path.display())))?;
    let (r, c) = shape
        .split_once('x')
        .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| Error::Config(format!("{}: bad shape `{shape}`", path.display())))?;
    let mut values = Vec::with_capacity(r * c);
    let mut csv = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    for row in csv.records() {
        for field in row?.iter() {
            values.push(parse_f64(field, "matrix")?);
        }
    }
    if values.len() != r * c {
        return Err(Error::ShapeMismatch(format!(
            "{}: header says {r}x{c}, found {} values",
            path.display(),
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(r, c, &values))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, |w| write_matrix_csv(m, w))
}

/// Dump the assembled `(pq) × (pq)` system of a substep for offline inspection.
pub fn dump_substep_system(sys: &SubstepSystem, dt: f64, epsilon: f64, path: &Path) -> Result<()> {
    save_matrix(path, &sys.assemble(dt, epsilon))
}

/// Write the factors of a state as `<stem>_x.csv`, `<stem>_s.csv`, `<stem>_v.csv`.
pub fn dump_state(state: &crate::lowrank::LowRankState, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let parts = [
        ("x", state.x_factor()),
        ("s", state.core()),
        ("v", state.v_factor()),
    ];
    let mut paths = Vec::new();
    for (tag, m) in parts {
        let p = dir.join(format!("{stem}_{tag}.csv"));
        save_matrix(&p, m)?;
        paths.push(p);
    }
    Ok(paths)
}
