use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kinetic_dlr::runner::{
    cmd_bench, cmd_compare, cmd_run, cmd_svd_spectrum, cmd_sweep, error_record, load_spec,
    load_sweep, BenchAxis, CompareTarget, DEFAULT_BENCH_CAP, OUT_DIR_ENV,
};
use kinetic_dlr::{Error, Mode, Result};

#[derive(Parser)]
#[command(name = "kinetic-dlr", version, about = "Low-rank kinetic transport runs, comparisons and benchmarks")]
struct Cli {
    /// Output root; every artifact lands here.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Spec file (flat TOML) or preset name such as `example1_kinetic`.
    #[arg(long)]
    spec: String,
    /// Integrator mode, overriding the spec file.
    #[arg(long)]
    mode: Option<Mode>,
    /// `key=value` override applied after the spec file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one problem and write `<stem>.csv` plus a JSON sidecar.
    Run(SpecArgs),
    /// Relative L2 density error of a run CSV against another run or a fresh reference.
    Compare {
        /// Run CSV to evaluate.
        run: PathBuf,
        /// Second run CSV, used as the reference.
        #[arg(long, conflicts_with_all = ["diffusion", "reference"])]
        against: Option<PathBuf>,
        /// Compare against the diffusion limit of `--spec`.
        #[arg(long, requires = "spec")]
        diffusion: bool,
        /// Compare against the full-grid reference of `--spec`.
        #[arg(long, requires = "spec", conflicts_with = "diffusion")]
        reference: bool,
        #[arg(long)]
        spec: Option<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output file name inside the output root.
        #[arg(long, default_value = "comparison.csv")]
        out: String,
    },
    /// Time substeps over a ladder of grid sizes and fit the scaling exponent.
    Bench {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
        /// Vary `n_v` together with `n_x`.
        #[arg(long)]
        vary_v: bool,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Largest substep system dimension allowed.
        #[arg(long, default_value_t = DEFAULT_BENCH_CAP)]
        cap: usize,
        #[arg(long, default_value = "bench.csv")]
        out: String,
    },
    /// Singular values of the reference solution at `t_max`.
    SvdSpectrum {
        #[command(flatten)]
        spec: SpecArgs,
        /// Also write projection errors of a low-rank run for 1..=L modes.
        #[arg(long, value_name = "L")]
        projection: Option<usize>,
    },
    /// Run every point of a sweep file, up to `--jobs` at a time.
    Sweep {
        /// Sweep file: a base spec plus `sweep_epsilon`, `sweep_rank`, `sweep_dt2` arrays.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        "numerical" => 3,
        "io" => 4,
        _ => 2,
    }
}

fn execute(cli: Cli) -> Result<serde_json::Value> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::Run(args) => {
            let spec = load_spec(&args.spec, args.mode, &args.overrides)?;
            let out = cmd_run(&spec, &out_dir)?;
            let last = out.report.final_record();
            Ok(json!({
                "csv": out.csv,
                "json": out.json,
                "steps": out.report.records.len() - 1,
                "final_time": last.time,
                "final_mass": last.mass,
            }))
        }
        Command::Compare {
            run,
            against,
            diffusion,
            reference,
            spec,
            overrides,
            out,
        } => {
            let target = match (against, spec) {
                (Some(path), _) => CompareTarget::Csv(path),
                (None, Some(spec)) if diffusion || reference => {
                    let spec = load_spec(&spec, None, &overrides)?;
                    if diffusion {
                        CompareTarget::Diffusion(spec)
                    } else {
                        CompareTarget::Reference(spec)
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "compare needs --against <csv>, or --diffusion/--reference with --spec".into(),
                    ))
                }
            };
            let path = out_dir.join(out);
            let rows = cmd_compare(&run, &target, &path)?;
            let last = rows.last().expect("comparison rows are nonempty");
            Ok(json!({
                "csv": path,
                "rows": rows.len(),
                "final_time": last.time_a,
                "final_error": last.rel_error,
                "max_error": rows.iter().map(|r| r.rel_error).fold(0.0, f64::max),
            }))
        }
        Command::Bench {
            spec,
            sizes,
            vary_v,
            repeats,
            cap,
            out,
        } => {
            let base = load_spec(&spec.spec, spec.mode, &spec.overrides)?;
            let axis = if vary_v { BenchAxis::Both } else { BenchAxis::Space };
            let path = out_dir.join(out);
            let report = cmd_bench(&base, &sizes, axis, repeats, cap, &path)?;
            Ok(json!({
                "csv": path,
                "k_exponent": report.k_exponent,
                "total_exponent": report.total_exponent,
            }))
        }
        Command::SvdSpectrum { spec, projection } => {
            let spec = load_spec(&spec.spec, spec.mode, &spec.overrides)?;
            let out = cmd_svd_spectrum(&spec, projection, &out_dir)?;
            let count = out.spectrum.values.len().min(15);
            Ok(json!({
                "csv": out.spectrum_csv,
                "projection_csv": out.projection.as_ref().map(|p| &p.1),
                "log_slope": out.spectrum.log_slope(count),
                "ratio_last": out.spectrum.ratios.get(count.saturating_sub(1)),
            }))
        }
        Command::Sweep {
            spec,
            overrides,
            jobs,
        } => {
            let sweep = load_sweep(&spec, &overrides)?;
            let outcomes = cmd_sweep(&sweep, &out_dir, jobs)?;
            let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
            let summary = json!({
                "summary": out_dir.join("sweep_summary.csv"),
                "runs": outcomes.len(),
                "failed": failed,
            });
            if failed > 0 {
                let first = outcomes
                    .into_iter()
                    .find_map(|o| o.result.err())
                    .expect("a failed run exists");
                eprintln!("{summary}");
                return Err(first);
            }
            Ok(summary)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(mut record) => {
            record["status"] = json!("ok");
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
