//! Problem definitions: named presets, flat TOML config files, `key=value`
//! overrides and parameter sweeps.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{Discretization, IntegratorConfig, Mode};
use crate::lowrank::{DenseField, LowRankState};
use crate::mesh::{CrossSection, CrossSectionPreset, FluxScheme, SpatialGrid, VelocityGrid};

/// Initial data `f(0, x, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    /// `((x − 1)² + 1)(v² + 1)`.
    Quadratic,
    /// `2` on `0.8 < x < 1.2`, `0` elsewhere.
    Bump,
    /// `1 + cos(πx)/2`, independent of `v`.
    Cosine,
}

impl InitialCondition {
    pub fn name(self) -> &'static str {
        match self {
            InitialCondition::Quadratic => "quadratic",
            InitialCondition::Bump => "bump",
            InitialCondition::Cosine => "cosine",
        }
    }

    pub fn eval(self, x: f64, v: f64) -> f64 {
        match self {
            InitialCondition::Quadratic => ((x - 1.0).powi(2) + 1.0) * (v * v + 1.0),
            InitialCondition::Bump => {
                if x > 0.8 && x < 1.2 {
                    2.0
                } else {
                    0.0
                }
            }
            InitialCondition::Cosine => 1.0 + 0.5 * (std::f64::consts::PI * x).cos(),
        }
    }
}

impl fmt::Display for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitialCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "bump" => Ok(Self::Bump),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::UnknownName {
                kind: "initial condition",
                name: other.to_owned(),
            }),
        }
    }
}

fn default_name() -> String {
    "custom".to_owned()
}

fn default_x_min() -> f64 {
    0.0
}

fn default_x_max() -> f64 {
    2.0
}

fn default_flux() -> FluxScheme {
    FluxScheme::Ccp
}

fn default_mode() -> Mode {
    Mode::Algorithm3
}

/// A complete run description. Serialises to a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub epsilon: f64,
    pub cross_section: CrossSectionPreset,
    pub initial_condition: InitialCondition,
    pub n_x: usize,
    pub n_v: usize,
    #[serde(default = "default_x_min")]
    pub x_min: f64,
    #[serde(default = "default_x_max")]
    pub x_max: f64,
    pub rank: usize,
    /// Defaults to `dt2²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt1: Option<f64>,
    /// Defaults to `Δx/3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt2: Option<f64>,
    pub t_max: f64,
    #[serde(default = "default_flux")]
    pub flux: FluxScheme,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Start from `ρ₀ eᵀ` followed by one tiny Euler step instead of sampling `f`.
    #[serde(default)]
    pub well_prepared: bool,
}

pub const PRESET_NAMES: [&str; 6] = [
    "example1_kinetic",
    "example1_diffusive",
    "example2_kinetic",
    "example2_diffusive",
    "example3_kinetic",
    "example3_diffusive",
];

impl ProblemSpec {
    /// Full-size experiment presets (`n_x = 200`, `n_v = 100`, `r = 20`).
    pub fn preset(name: &str) -> Result<Self> {
        let (example, regime) = name.split_once('_').ok_or_else(|| unknown_preset(name))?;
        let (cross_section, initial_condition) = match example {
            "example1" => (CrossSectionPreset::Constant2, InitialCondition::Quadratic),
            "example2" => (CrossSectionPreset::Quartic, InitialCondition::Bump),
            "example3" => (CrossSectionPreset::Contrast, InitialCondition::Bump),
            _ => return Err(unknown_preset(name)),
        };
        let (epsilon, t_max) = match regime {
            "kinetic" => (1.0, 1.0),
            "diffusive" => (1e-3, 0.1),
            _ => return Err(unknown_preset(name)),
        };
        Ok(Self {
            name: name.to_owned(),
            epsilon,
            cross_section,
            initial_condition,
            n_x: 200,
            n_v: 100,
            x_min: 0.0,
            x_max: 2.0,
            rank: 20,
            dt1: None,
            dt2: None,
            t_max,
            flux: FluxScheme::Ccp,
            mode: Mode::Algorithm3,
            well_prepared: false,
        })
    }

    /// Parse a flat TOML table. A `preset` key supplies defaults for every
    /// other key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        Self::from_table(table)
    }

    pub fn from_table(mut table: toml::Table) -> Result<Self> {
        let mut merged = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?.to_table()?,
            Some(other) => {
                return Err(Error::Config(format!(
                    "preset must be a string, got {}",
                    other.type_str()
                )))
            }
            None => toml::Table::new(),
        };
        merged.extend(table);
        let spec: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => Ok(t),
            Ok(_) => Err(Error::Config("spec did not serialise to a table".into())),
            Err(e) => Err(Error::Config(e.to_string())),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value` overrides; values are parsed as TOML, falling back
    /// to a bare string (`flux=upwind`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = self.to_table()?;
        for item in overrides {
            let (key, value) = parse_override(item.as_ref())?;
            if key == "preset" {
                return Err(Error::Config("preset cannot be overridden".into()));
            }
            table.insert(key, value);
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::Config(format!(
                "name `{}` must be nonempty ASCII alphanumerics, `_` or `-`",
                self.name
            )));
        }
        let disc = self.discretization()?;
        let max = self.n_x.min(self.n_v);
        if self.rank == 0 || self.rank > max {
            return Err(Error::RankOutOfRange {
                rank: self.rank,
                max,
            });
        }
        self.integrator_config_for(&disc.grid).validate()
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.n_x, self.x_min, self.x_max)
    }

    pub fn discretization(&self) -> Result<Discretization> {
        let grid = self.spatial_grid()?;
        let vgrid = VelocityGrid::new(self.n_v)?;
        let sigma = CrossSection::from_preset(self.cross_section, &grid)?;
        Discretization::new(grid, vgrid, sigma, self.flux, self.epsilon)
    }

    fn integrator_config_for(&self, grid: &SpatialGrid) -> IntegratorConfig {
        let dt2 = self.dt2.unwrap_or(grid.dx() / 3.0);
        IntegratorConfig {
            dt1: self.dt1.unwrap_or(dt2 * dt2),
            dt2,
            t_max: self.t_max,
            mode: self.mode,
            flux: self.flux,
            epsilon: self.epsilon,
        }
    }

    /// Time-stepping parameters with defaults resolved.
    pub fn integrator_config(&self) -> Result<IntegratorConfig> {
        let cfg = self.integrator_config_for(&self.spatial_grid()?);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn initial_field(&self, disc: &Discretization) -> Result<DenseField> {
        let ic = self.initial_condition;
        DenseField::sample(|x, v| ic.eval(x, v), &disc.grid, &disc.vgrid)
    }

    pub fn initial_density(&self, disc: &Discretization) -> Result<DVector<f64>> {
        Ok(self.initial_field(disc)?.density())
    }

    /// Initial low-rank state: truncated SVD of the samples, or the
    /// well-prepared construction when requested.
    pub fn initial_state(&self, disc: &Discretization) -> Result<LowRankState> {
        if self.well_prepared {
            let rho0 = self.initial_density(disc)?;
            crate::integrators::well_prepared_state(&rho0, disc, self.rank)
        } else {
            LowRankState::from_dense(&self.initial_field(disc)?, self.rank)
        }
    }

    /// `<name>_<eps>_<r>_<dt2>`, used for output files.
    pub fn file_stem(&self) -> Result<String> {
        let cfg = self.integrator_config()?;
        Ok(format!(
            "{}_{:.3e}_{}_{:.3e}",
            self.name, self.epsilon, self.rank, cfg.dt2
        ))
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::UnknownName {
        kind: "preset",
        name: name.to_owned(),
    }
}

/// Split `key=value`, parsing the value as a TOML literal.
pub fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

fn default_max_runs() -> usize {
    64
}

/// A base problem and the axes to sweep over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ProblemSpec,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub rank: Vec<usize>,
    #[serde(default)]
    pub dt2: Vec<f64>,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
}

impl SweepSpec {
    /// Sweep files are flat tables: `sweep_epsilon`, `sweep_rank`,
    /// `sweep_dt2` arrays and `max_runs`, with every other key describing the
    /// base problem.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        fn take<T: serde::de::DeserializeOwned>(
            table: &mut toml::Table,
            key: &str,
        ) -> Result<Option<T>> {
            table
                .remove(key)
                .map(|v| {
                    v.try_into()
                        .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))
                })
                .transpose()
        }
        let epsilon = take::<Vec<f64>>(&mut table, "sweep_epsilon")?;
        let rank = take::<Vec<usize>>(&mut table, "sweep_rank")?;
        let dt2 = take::<Vec<f64>>(&mut table, "sweep_dt2")?;
        let max_runs = take::<usize>(&mut table, "max_runs")?.unwrap_or_else(default_max_runs);
        let base = ProblemSpec::from_table(table)?;
        let sweep = Self {
            base,
            epsilon: epsilon.unwrap_or_default(),
            rank: rank.unwrap_or_default(),
            dt2: dt2.unwrap_or_default(),
            max_runs,
        };
        if sweep.epsilon.is_empty() && sweep.rank.is_empty() && sweep.dt2.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one nonempty sweep_epsilon, sweep_rank or sweep_dt2".into(),
            ));
        }
        Ok(sweep)
    }

    /// Cartesian product of the axes; absent axes keep the base value.
    pub fn expand(&self) -> Result<Vec<ProblemSpec>> {
        let eps: Vec<f64> = if self.epsilon.is_empty() {
            vec![self.base.epsilon]
        } else {
            self.epsilon.clone()
        };
        let ranks: Vec<usize> = if self.rank.is_empty() {
            vec![self.base.rank]
        } else {
            self.rank.clone()
        };
        let dts: Vec<Option<f64>> = if self.dt2.is_empty() {
            vec![self.base.dt2]
        } else {
            self.dt2.iter().map(|&d| Some(d)).collect()
        };
        let total = eps.len() * ranks.len() * dts.len();
        if total > self.max_runs {
            return Err(Error::Config(format!(
                "sweep expands to {total} runs, cap is {}",
                self.max_runs
            )));
        }
        let mut out = Vec::with_capacity(total);
        for &e in &eps {
            for &r in &ranks {
                for &d in &dts {
                    let spec = ProblemSpec {
                        epsilon: e,
                        rank: r,
                        dt2: d,
                        ..self.base.clone()
                    };
                    spec.validate()?;
                    out.push(spec);
                }
            }
        }
        Ok(out)
    }
}
