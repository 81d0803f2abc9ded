//! TOML-configured experiments: solves, regularity checks, NQ certificates,
//! bound sweeps, manufactured-solution studies and exponent tables.
//!
//! Every run writes `report.csv` (prefixed by the resolved config as `#`
//! comment lines), one CSV per field it produced, and `summary.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{bound_formula, moser_sequence, omega, r_exponent, BoundBranch, ExponentContext, LadderVariant};
use crate::format_float as ff;
use crate::fracnorm::{self, ShiftSet};
use crate::grid::{self, GridSpec, ScalarField};
use crate::kirchhoff::{
    self, catalog_example1, catalog_example2, FixedPointOptions, KirchhoffTerm, Nonlinearity, NonlocalProblem,
    NqOutcome, NqSearch,
};
use crate::oracle::{self, RadialProfile};
use crate::plap::{self, LocalProblem};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "PKIRCH_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    VerifyRegularity,
    NqCertificate,
    BoundSweep,
    ManufacturedConvergence,
    ExponentTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub nq: NqConfig,
    #[serde(default)]
    pub regularity: RegularityConfig,
    #[serde(default)]
    pub exponents: ExponentConfig,
    #[serde(default)]
    pub manufactured: ManufacturedConfig,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output() -> String {
    "pkirch-out".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridShape {
    Rectangle,
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kind: GridShape,
    pub cells: Vec<usize>,
    pub lengths: Vec<f64>,
    pub dim: usize,
    pub nodes: usize,
    pub r_min: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            kind: GridShape::Rectangle,
            cells: vec![64, 64],
            lengths: vec![1.0, 1.0],
            dim: 2,
            nodes: 1024,
            r_min: grid::DEFAULT_R_MIN,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<Arc<GridSpec>> {
        match self.kind {
            GridShape::Rectangle => GridSpec::rectangle(&self.cells, &self.lengths),
            GridShape::Radial => GridSpec::radial(self.dim, self.nodes, self.r_min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub p: f64,
    /// Flux regularization; defaults to `1e-6 · diam(Ω)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Overrides the Kirchhoff term the catalog entry comes with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kirchhoff: Option<KirchhoffConfig>,
    pub nonlinearity: NonlinearityConfig,
    pub g: SourceConfig,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            p: 3.0,
            eps: None,
            kirchhoff: None,
            nonlinearity: NonlinearityConfig::Example1 {
                beta: 3.0,
                c: 1.0,
                theta1: 1.0,
                theta2: 1.0,
                nu: Some(1.2),
                c3: None,
            },
            g: SourceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KirchhoffConfig {
    Constant { value: f64 },
    LogGrowth { theta1: f64, theta2: f64 },
    Oscillatory { delta1: f64, delta2: f64 },
    Tabulated { t: Vec<f64>, a: Vec<f64> },
}

impl KirchhoffConfig {
    pub fn build(&self) -> Result<KirchhoffTerm> {
        match self {
            Self::Constant { value } => KirchhoffTerm::constant(*value),
            Self::LogGrowth { theta1, theta2 } => KirchhoffTerm::log_growth(*theta1, *theta2),
            Self::Oscillatory { delta1, delta2 } => KirchhoffTerm::oscillatory(*delta1, *delta2),
            Self::Tabulated { t, a } => KirchhoffTerm::tabulated(t.clone(), a.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NonlinearityConfig {
    Example1 {
        beta: f64,
        c: f64,
        #[serde(default = "one")]
        theta1: f64,
        #[serde(default = "one")]
        theta2: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c3: Option<f64>,
    },
    Example2 {
        eps_exp: f64,
        #[serde(default = "one")]
        delta1: f64,
        #[serde(default = "one")]
        delta2: f64,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu: Option<f64>,
    },
    Linear {
        c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu: Option<f64>,
    },
    Source,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    /// `g(x) = offset + slope · x`.
    Affine { offset: f64, slope: Vec<f64> },
    /// `g(x) = offset + Σ A_k exp(-|x - c_k|^2 / (2 w_k^2))` with seeded
    /// amplitudes in `[-amplitude, amplitude]`; `seed` defaults to the run seed.
    Bumps {
        offset: f64,
        count: usize,
        amplitude: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self::Affine {
            offset: 1.0,
            slope: vec![0.2, 0.0],
        }
    }
}

impl SourceConfig {
    pub fn build(&self, grid: Arc<GridSpec>, run_seed: u64) -> Result<ScalarField> {
        match self {
            Self::Affine { offset, slope } => {
                if slope.len() > 2 {
                    return Err(Error::Validation("affine slope has at most two entries".into()));
                }
                let s = [
                    slope.first().copied().unwrap_or(0.0),
                    slope.get(1).copied().unwrap_or(0.0),
                ];
                ScalarField::from_fn(grid, |c| offset + s[0] * c[0] + s[1] * c[1])
            }
            Self::Bumps {
                offset,
                count,
                amplitude,
                seed,
            } => random_bumps(grid, *offset, *count, *amplitude, seed.unwrap_or(run_seed)),
        }
    }
}

/// `offset + Σ_k A_k exp(-|x - c_k|^2 / (2 w_k^2))`, `A_k ~ U[-amplitude, amplitude]`,
/// centers uniform in the bounding box, widths in `[0.1, 0.3] · diam`.
pub fn random_bumps(grid: Arc<GridSpec>, offset: f64, count: usize, amplitude: f64, seed: u64) -> Result<ScalarField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::Validation(format!(
            "bump amplitude must be finite and >= 0, got {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = match grid.kind() {
        grid::GridKind::Rectangle => [grid.lengths()[0], grid.lengths().get(1).copied().unwrap_or(0.0)],
        grid::GridKind::RadialBall => [1.0, 0.0],
    };
    let diam = grid.diameter();
    let bumps: Vec<(f64, [f64; 2], f64)> = (0..count)
        .map(|_| {
            let a = rng.random_range(-amplitude..=amplitude);
            let c = [rng.random_range(0.0..=extent[0]), rng.random_range(0.0..=extent[1])];
            let w = rng.random_range(0.1..=0.3) * diam;
            (a, c, w)
        })
        .collect();
    ScalarField::from_fn(grid, |x| {
        offset
            + bumps
                .iter()
                .map(|(a, c, w)| {
                    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                    a * (-d2 / (2.0 * w * w)).exp()
                })
                .sum::<f64>()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub schedule: Vec<f64>,
    pub theta: f64,
    pub tol_outer: f64,
    pub tol_res: f64,
    pub tol_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub divergence_ceiling: f64,
    /// Treat a constant converged solution as a failed check.
    pub require_nontrivial: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = FixedPointOptions::default();
        Self {
            schedule: d.schedule,
            theta: d.theta,
            tol_outer: d.tol_outer,
            tol_res: d.tol_res,
            tol_inner: d.tol_inner,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            divergence_ceiling: d.divergence_ceiling,
            require_nontrivial: true,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> FixedPointOptions {
        FixedPointOptions {
            schedule: self.schedule.clone(),
            theta: self.theta,
            tol_outer: self.tol_outer,
            tol_res: self.tol_res,
            tol_inner: self.tol_inner,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            divergence_ceiling: self.divergence_ceiling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NqConfig {
    pub t_max: f64,
    pub n_t: usize,
    pub n_x: usize,
    /// Random bounded fields on which `∫ f(x,u)u <= K` is checked.
    pub random_fields: usize,
}

impl Default for NqConfig {
    fn default() -> Self {
        let d = NqSearch::default();
        Self {
            t_max: d.t_max,
            n_t: d.n_t,
            n_x: d.n_x,
            random_fields: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    /// Solve the configured nonlocal problem first.
    Solve,
    /// Sample the closed-form radial profile on the (radial) grid.
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularityConfig {
    pub source: FieldSource,
    /// Profile exponent when `source = "profile"`.
    pub alpha: f64,
    pub r: f64,
    /// Defaults to `1 + 2/r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Integrability target of the a-priori bound check.
    pub s: f64,
    /// Cutoffs for the divergence-rate fit on radial grids; empty disables it.
    pub cutoffs: Vec<f64>,
    /// Moser rung checks against the ladder of `(p, ladder_dim, ladder_alpha)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder_alpha: Option<f64>,
    pub exponent_cap: f64,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            source: FieldSource::Solve,
            alpha: 1.25,
            r: 4.0,
            sigma: None,
            s: 3.0,
            cutoffs: Vec::new(),
            ladder_dim: None,
            ladder_alpha: None,
            exponent_cap: fracnorm::LADDER_EXPONENT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExponentConfig {
    pub p: f64,
    pub dim: usize,
    pub alpha: f64,
    pub s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_r: Option<f64>,
    pub n_max: usize,
}

impl Default for ExponentConfig {
    fn default() -> Self {
        Self {
            p: 3.0,
            dim: 4,
            alpha: 8.0,
            s: 50.0,
            big_r: None,
            n_max: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManufacturedConfig {
    pub dim: usize,
    pub p: f64,
    pub alpha: f64,
    pub nodes: Vec<usize>,
    pub r_min: f64,
    pub tol: f64,
}

impl Default for ManufacturedConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            p: 3.0,
            alpha: 1.25,
            nodes: vec![512, 1024, 2048],
            r_min: grid::DEFAULT_R_MIN,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// One cell per seed; each replaces `g` with seeded bumps.
    pub seeds: Vec<u64>,
    pub s: f64,
    pub bumps: usize,
    pub amplitude: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            s: 3.0,
            bumps: 3,
            amplitude: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the config, e.g. `problem.eps`.
    pub parameter: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
    /// `cartesian` (default) or `zip` (axes advance together).
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "cartesian".into()
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        positive("problem.p", self.problem.p)?;
        if !(self.problem.p > 2.0) {
            return Err(Error::Validation(format!(
                "problem.p must exceed 2, got {}",
                self.problem.p
            )));
        }
        if let Some(eps) = self.problem.eps {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::Validation(format!(
                    "problem.eps must be finite and >= 0, got {eps}"
                )));
            }
        }
        self.solver.options().validate()?;
        positive("nq.t_max", self.nq.t_max)?;
        positive("regularity.r", self.regularity.r)?;
        positive("regularity.s", self.regularity.s)?;
        positive("manufactured.tol", self.manufactured.tol)?;
        if self.regularity.cutoffs.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Validation("regularity.cutoffs must be positive".into()));
        }
        match self.kind {
            ExperimentKind::ManufacturedConvergence if self.manufactured.nodes.is_empty() => {
                return Err(Error::Validation("manufactured.nodes is empty".into()));
            }
            ExperimentKind::BoundSweep if self.bound.seeds.is_empty() => {
                return Err(Error::Validation("bound.seeds is empty".into()));
            }
            _ => {}
        }
        if let Some(sw) = &self.sweep {
            if sw.axes.is_empty() || sw.axes.iter().any(|a| a.values.is_empty()) {
                return Err(Error::Validation("sweep lists must be nonempty".into()));
            }
            if sw.mode != "cartesian" && sw.mode != "zip" {
                return Err(Error::Validation(format!("unknown sweep mode `{}`", sw.mode)));
            }
            if sw.mode == "zip" && sw.axes.iter().any(|a| a.values.len() != sw.axes[0].values.len()) {
                return Err(Error::Validation("zip sweeps need equally long value lists".into()));
            }
        }
        Ok(())
    }

    /// Resolved output directory: relative paths are taken against
    /// `$PKIRCH_OUTPUT_ROOT` when set.
    pub fn output_dir(&self) -> PathBuf {
        let out = PathBuf::from(&self.output);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        }
    }

    /// Returns a copy with `path = value` applied.
    pub fn with_override(&self, path: &str, value: &toml::Value) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Validation(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Validation(format!("bad parameter path `{path}`")));
        }
        let mut node = &mut root;
        for k in &keys[..keys.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Validation(format!("`{path}` does not name a table entry")))?;
            node = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Validation(format!("`{path}` does not name a table entry")))?
            .insert(keys[keys.len() - 1].to_string(), value.clone());
        let text = toml::to_string(&root).map_err(|e| Error::Validation(e.to_string()))?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("override `{path}`: {e}")))
    }
}

/// Exit statuses of `run`, `sweep` and `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    CheckFailed = 1,
    ParseError = 2,
    ValidationError = 3,
    IoError = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn for_error(e: &Error) -> Self {
        match e {
            Error::Parse(_) => Self::ParseError,
            Error::Io { .. } | Error::Csv(_) => Self::IoError,
            _ => Self::ValidationError,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: ExperimentKind,
    pub passed: bool,
    pub headline: Vec<(String, f64)>,
    pub dir: PathBuf,
    /// The primary field of the run, if any (used for sweep drift).
    pub field: Option<ScalarField>,
}

impl RunOutcome {
    pub fn status(&self) -> ExitStatus {
        if self.passed {
            ExitStatus::Ok
        } else {
            ExitStatus::CheckFailed
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.headline.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

struct Output {
    dir: PathBuf,
    echo: String,
}

impl Output {
    fn new(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            echo,
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    /// CSV with the config echo in front.
    fn report(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut buf = self.echo.clone().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        self.write(name, &buf)
    }

    fn field(&self, name: &str, u: &ScalarField) -> Result<()> {
        let mut buf = Vec::new();
        grid::write_field_csv(u, &mut buf).map_err(|e| Error::io(self.dir.join(name), e))?;
        self.write(name, &buf)
    }

    fn summary(
        &self,
        cfg: &ExperimentConfig,
        passed: bool,
        headline: &[(String, f64)],
        notes: &[String],
    ) -> Result<()> {
        let mut s = String::new();
        s.push_str(&format!("pkirch {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("experiment: {}\n", kind_name(cfg.kind)));
        s.push_str(&format!("status: {}\n", if passed { "pass" } else { "fail" }));
        for (k, v) in headline {
            s.push_str(&format!("{k} = {}\n", ff(*v)));
        }
        for n in notes {
            s.push_str(n);
            s.push('\n');
        }
        s.push_str("\n[config]\n");
        s.push_str(&cfg.to_toml());
        self.write("summary.txt", s.as_bytes())
    }
}

pub fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Solve => "solve",
        ExperimentKind::VerifyRegularity => "verify-regularity",
        ExperimentKind::NqCertificate => "nq-certificate",
        ExperimentKind::BoundSweep => "bound-sweep",
        ExperimentKind::ManufacturedConvergence => "manufactured-convergence",
        ExperimentKind::ExponentTable => "exponent-table",
    }
}

/// Builds the nonlocal problem for `g`, applying `ν`/`c3` when configured.
pub fn build_problem(cfg: &ProblemConfig, g: ScalarField) -> Result<NonlocalProblem> {
    let p = cfg.p;
    let eps = cfg.eps.unwrap_or_else(|| plap::default_eps(g.grid()));
    let (a, f) = build_pair(cfg, g)?;
    let a = match &cfg.kirchhoff {
        Some(k) => k.build()?,
        None => a,
    };
    NonlocalProblem::new(p, a, f, eps)
}

fn build_pair(cfg: &ProblemConfig, g: ScalarField) -> Result<(KirchhoffTerm, Nonlinearity)> {
    let p = cfg.p;
    Ok(match &cfg.nonlinearity {
        NonlinearityConfig::Example1 {
            beta,
            c,
            theta1,
            theta2,
            nu,
            c3,
        } => {
            let (a, mut f) = catalog_example1(p, *beta, *c, *theta1, *theta2, g)?;
            if let Some(c3) = c3 {
                f = f.with_c3(*c3)?;
            }
            if let Some(nu) = nu {
                f = f.with_nu(*nu)?;
            }
            (a, f)
        }
        NonlinearityConfig::Example2 {
            eps_exp,
            delta1,
            delta2,
            beta,
            nu,
        } => {
            let (a, mut f) = catalog_example2(p, *eps_exp, *delta1, *delta2, *beta, g)?;
            if let Some(nu) = nu {
                f = f.with_nu(*nu)?;
            }
            (a, f)
        }
        NonlinearityConfig::Linear { c, nu } => {
            let mut f = Nonlinearity::linear(*c, g)?;
            if let Some(nu) = nu {
                f = f.with_nu(*nu)?;
            }
            (KirchhoffTerm::constant(1.0)?, f)
        }
        NonlinearityConfig::Source => (KirchhoffTerm::constant(1.0)?, Nonlinearity::source(g)),
    })
}

/// Parses and validates `path`, runs it, and writes into its output directory.
pub fn run_path(path: &Path) -> Result<RunOutcome> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    run(&cfg)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_in(cfg, &cfg.output_dir())
}

/// Runs `cfg` writing into `dir` (ignores `cfg.output`).
pub fn run_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = Output::new(dir, cfg)?;
    match cfg.kind {
        ExperimentKind::Solve => run_solve(cfg, &out),
        ExperimentKind::VerifyRegularity => run_regularity(cfg, &out),
        ExperimentKind::NqCertificate => run_nq(cfg, &out),
        ExperimentKind::BoundSweep => run_bound_sweep(cfg, &out),
        ExperimentKind::ManufacturedConvergence => run_manufactured(cfg, &out),
        ExperimentKind::ExponentTable => run_exponent_table(cfg, &out),
    }
}

fn headline(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn run_solve(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let grid = cfg.grid.build()?;
    let g = cfg.problem.g.build(grid, cfg.seed)?;
    let prob = build_problem(&cfg.problem, g.clone())?;
    let rep = kirchhoff::fixed_point_solve(&prob, &cfg.solver.options())?;
    let mut buf = out.echo.clone().into_bytes();
    rep.write_csv(&mut buf)?;
    out.write("report.csv", &buf)?;
    out.field("u.csv", &rep.u)?;
    out.field("g.csv", &g)?;
    let nontrivial = kirchhoff::is_nontrivial(&rep.u, cfg.solver.tol_outer);
    let passed = rep.converged && (nontrivial || !cfg.solver.require_nontrivial);
    let hl = headline(&[
        ("converged", flag(rep.converged)),
        ("diverged", flag(rep.diverged)),
        ("outer_iterations", rep.outer_iterations() as f64),
        ("nonlocal_residual", rep.nonlocal_residual),
        (
            "final_difference",
            rep.successive_differences().last().copied().unwrap_or(0.0),
        ),
        ("range", rep.u.max() - rep.u.min()),
        ("nontrivial", flag(nontrivial)),
        ("b_final", rep.b_history().last().copied().unwrap_or(f64::NAN)),
        ("w1p_norm", fracnorm::sobolev_norm(&rep.u, prob.p)?),
    ]);
    out.summary(cfg, passed, &hl, &[])?;
    Ok(RunOutcome {
        kind: cfg.kind,
        passed,
        headline: hl,
        dir: out.dir.clone(),
        field: Some(rep.u),
    })
}

fn run_regularity(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let rc = &cfg.regularity;
    let grid = cfg.grid.build()?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push = |name: &str, v: f64| rows.push(vec![name.to_string(), ff(v)]);
    let mut passed = true;
    let mut solved: Option<(ScalarField, NonlocalProblem)> = None;
    let u = match rc.source {
        FieldSource::Profile => {
            let p = cfg.problem.p;
            RadialProfile::new(rc.alpha, grid.dim(), p)?.sample(grid.clone())?
        }
        FieldSource::Solve => {
            let g = cfg.problem.g.build(grid.clone(), cfg.seed)?;
            let prob = build_problem(&cfg.problem, g)?;
            let rep = kirchhoff::fixed_point_solve(&prob, &cfg.solver.options())?;
            passed &= rep.converged;
            push("converged", flag(rep.converged));
            push("nonlocal_residual", rep.nonlocal_residual);
            solved = Some((rep.u.clone(), prob));
            rep.u
        }
    };
    out.field("u.csv", &u)?;
    let sigma = rc.sigma.unwrap_or(1.0 + 2.0 / rc.r);
    let set = ShiftSet::standard(&grid)?;
    let est = fracnorm::nikolskii_seminorm(&u, sigma, rc.r, &set)?;
    let mut tbl = Vec::new();
    est.write_csv(&mut tbl)?;
    out.write("nikolskii_shifts.csv", &tbl)?;
    push("sigma", sigma);
    push("r", rc.r);
    push("nikolskii_seminorm", est.seminorm);
    push("weighted_hessian_energy", fracnorm::weighted_hessian_energy(&u, rc.r)?);
    let nl = fracnorm::normalemma_check_with(&u, rc.r, &set)?;
    push("normalemma_lhs", nl.lhs);
    push("normalemma_rhs", nl.rhs);
    push("normalemma_ratio", nl.min_constant.unwrap_or(f64::NAN));
    if !rc.cutoffs.is_empty() {
        let fit = fracnorm::cutoff_divergence_rate(&u, rc.r, &rc.cutoffs)?;
        push("cutoff_power_slope", fit.slope);
        push("cutoff_log_coefficient", fit.log_coefficient);
        push("cutoff_power_rss", fit.power_rss);
        push("cutoff_log_rss", fit.log_rss);
    }
    if let Some((u, prob)) = &solved {
        let chk = fracnorm::apriori_check(u, prob.f.g(), &prob.a, prob.p, rc.s)?;
        push("apriori_lhs", chk.lhs);
        push("apriori_rhs_shape", chk.rhs_shape);
        push("apriori_fitted_c", chk.fitted_c);
        push("apriori_omega", chk.omega);
    }
    if let (Some(dim), Some(alpha)) = (rc.ladder_dim, rc.ladder_alpha) {
        let ctx = ExponentContext::new(cfg.problem.p, dim)?;
        let variant = match BoundBranch::select(&ctx, alpha)? {
            BoundBranch::Superlinear => LadderVariant::Superlinear,
            BoundBranch::Sublinear => LadderVariant::Sublinear,
            BoundBranch::Supercritical => {
                return Err(Error::Validation("Moser ladders need p < ladder_dim".into()));
            }
        };
        let ladder = moser_sequence(&ctx, variant, alpha, 16)?;
        let checks = fracnorm::moser_ladder_check(&u, &ladder, &ctx, rc.exponent_cap)?;
        let mut buf = Vec::new();
        fracnorm::write_ladder_csv(&checks, &mut buf)?;
        out.write("ladder.csv", &buf)?;
        for c in &checks {
            push(&format!("ladder_min_c_{}", c.rung), c.min_constant);
        }
    }
    let hl: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r[0].clone(), r[1].parse().unwrap_or(f64::NAN)))
        .collect();
    out.report("report.csv", &["quantity", "value"], &rows)?;
    out.summary(cfg, passed, &hl, &[])?;
    Ok(RunOutcome {
        kind: cfg.kind,
        passed,
        headline: hl,
        dir: out.dir.clone(),
        field: Some(u),
    })
}

/// Bounded random test fields for the `∫ f(x,u)u <= K` check.
pub fn random_bounded_fields(grid: Arc<GridSpec>, count: usize, bound: f64, seed: u64) -> Result<Vec<ScalarField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let level = bound * rng.random_range(0.0..=1.0f64).powi(2);
            let raw = random_bumps(grid.clone(), rng.random_range(-1.0..=1.0), 4, 1.0, rng.random())?;
            let m = raw.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            raw.scale(if m > 0.0 { level / m } else { 0.0 })
        })
        .collect()
}

fn run_nq(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let grid = cfg.grid.build()?;
    let g = cfg.problem.g.build(grid.clone(), cfg.seed)?;
    let prob = build_problem(&cfg.problem, g)?;
    let search = NqSearch {
        t_max: cfg.nq.t_max,
        n_t: cfg.nq.n_t,
        n_x: cfg.nq.n_x,
    };
    let outcome = kirchhoff::nq_certificate(&prob.f, &search)?;
    let meta = prob.f.meta();
    let mut rows = vec![
        vec!["nu".into(), ff(meta.nu.unwrap_or(f64::NAN))],
        vec!["sigma".into(), ff(meta.sigma)],
        vec!["beta".into(), ff(meta.beta)],
        vec!["c2".into(), ff(meta.c2.unwrap_or(f64::NAN))],
    ];
    let (passed, hl, note) = match &outcome {
        NqOutcome::Certified(c) => {
            let fields = random_bounded_fields(grid, cfg.nq.random_fields, cfg.nq.t_max, cfg.seed)?;
            let mut worst = f64::NEG_INFINITY;
            for u in &fields {
                worst = worst.max(kirchhoff::source_pairing(&prob.f, u)?);
            }
            if fields.is_empty() {
                worst = 0.0;
            }
            let ok = c.margin > 0.0 && worst <= c.k;
            for (k, v) in [
                ("r", c.r),
                ("margin", c.margin),
                ("k", c.k),
                ("eps", c.eps),
                ("delta", c.delta),
                ("max_pairing", worst),
            ] {
                rows.push(vec![k.into(), ff(v)]);
            }
            (
                ok,
                headline(&[
                    ("certified", 1.0),
                    ("r", c.r),
                    ("margin", c.margin),
                    ("k", c.k),
                    ("max_pairing", worst),
                ]),
                "outcome: certified".to_string(),
            )
        }
        NqOutcome::PreconditionViolated {
            nu,
            c2,
            c3,
            sigma,
            beta,
        } => {
            rows.push(vec!["c3".into(), ff(*c3)]);
            (
                false,
                headline(&[
                    ("certified", 0.0),
                    ("precondition_violated", 1.0),
                    ("nu_c3", nu * c3),
                    ("c2", *c2),
                ]),
                format!(
                    "outcome: precondition violated (nu*c3 = {}, c2 = {c2}, sigma = {sigma}, beta = {beta})",
                    nu * c3
                ),
            )
        }
        NqOutcome::NotFound { largest_failure, t_max } => {
            rows.push(vec!["largest_failure".into(), ff(*largest_failure)]);
            (
                false,
                headline(&[
                    ("certified", 0.0),
                    ("largest_failure", *largest_failure),
                    ("t_max", *t_max),
                ]),
                "outcome: no R found up to t_max".to_string(),
            )
        }
    };
    let outcome_name = match &outcome {
        NqOutcome::Certified(_) => "certified",
        NqOutcome::PreconditionViolated { .. } => "precondition-violated",
        NqOutcome::NotFound { .. } => "not-found",
    };
    rows.insert(0, vec!["outcome".into(), outcome_name.into()]);
    out.report("report.csv", &["quantity", "value"], &rows)?;
    out.summary(cfg, passed, &hl, &[note])?;
    Ok(RunOutcome {
        kind: cfg.kind,
        passed,
        headline: hl,
        dir: out.dir.clone(),
        field: None,
    })
}

#[derive(Debug, Clone)]
pub struct BoundCell {
    pub seed: u64,
    pub converged: bool,
    pub lhs: f64,
    pub rhs_shape: f64,
    pub fitted_c: f64,
    pub omega: f64,
}

/// Solves the configured problem once per seed (seeded bump source) and fits
/// the a-priori bound constant on each solution.
pub fn bound_cells(cfg: &ExperimentConfig) -> Result<Vec<(BoundCell, ScalarField)>> {
    let grid = cfg.grid.build()?;
    let bc = &cfg.bound;
    bc.seeds
        .par_iter()
        .map(|&seed| {
            let g = random_bumps(grid.clone(), 1.0, bc.bumps, bc.amplitude, seed)?;
            let prob = build_problem(&cfg.problem, g)?;
            let rep = kirchhoff::fixed_point_solve(&prob, &cfg.solver.options())?;
            let chk = fracnorm::apriori_check(&rep.u, prob.f.g(), &prob.a, prob.p, bc.s)?;
            Ok((
                BoundCell {
                    seed,
                    converged: rep.converged,
                    lhs: chk.lhs,
                    rhs_shape: chk.rhs_shape,
                    fitted_c: chk.fitted_c,
                    omega: chk.omega,
                },
                rep.u,
            ))
        })
        .collect()
}

fn run_bound_sweep(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let cells = bound_cells(cfg)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|(c, _)| {
            vec![
                c.seed.to_string(),
                c.converged.to_string(),
                ff(c.lhs),
                ff(c.rhs_shape),
                ff(c.fitted_c),
                ff(c.omega),
            ]
        })
        .collect();
    out.report(
        "report.csv",
        &["seed", "converged", "lhs", "rhs_shape", "fitted_c", "omega"],
        &rows,
    )?;
    let fitted: Vec<f64> = cells.iter().map(|(c, _)| c.fitted_c).collect();
    let (lo, hi) = fitted
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let spread = hi / lo;
    let all_converged = cells.iter().all(|(c, _)| c.converged);
    let passed = all_converged && spread.is_finite();
    let omega_free = omega(cfg.problem.p, cfg.bound.s)? == 0.0;
    let hl = headline(&[
        ("cells", cells.len() as f64),
        ("fitted_c_min", lo),
        ("fitted_c_max", hi),
        ("spread", spread),
        ("omega_free", flag(omega_free)),
    ]);
    out.summary(cfg, passed, &hl, &[])?;
    let field = cells.into_iter().next().map(|(_, u)| u);
    Ok(RunOutcome {
        kind: cfg.kind,
        passed,
        headline: hl,
        dir: out.dir.clone(),
        field,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ManufacturedRow {
    pub nodes: usize,
    pub relative_error: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Solves `-Δ_p u + u = f` with the profile's manufactured `f` on each grid and
/// measures the relative `W^{1,p}` distance to the interpolated profile.
pub fn manufactured_study(mc: &ManufacturedConfig) -> Result<Vec<(ManufacturedRow, ScalarField)>> {
    let profile = RadialProfile::new(mc.alpha, mc.dim, mc.p)?;
    mc.nodes
        .iter()
        .map(|&n| {
            let grid = GridSpec::radial(mc.dim, n, mc.r_min)?;
            let rhs = oracle::manufactured_rhs(&profile, grid.clone())?;
            let exact = profile.sample(grid.clone())?;
            let prob = LocalProblem::new(mc.p, 1.0, rhs, plap::default_eps(&grid), mc.tol)?;
            let rep = plap::solve_scaled(&prob, Some(&ScalarField::zeros(grid)))?;
            let err = fracnorm::sobolev_norm(&rep.u.sub(&exact)?, mc.p)? / fracnorm::sobolev_norm(&exact, mc.p)?;
            Ok((
                ManufacturedRow {
                    nodes: n,
                    relative_error: err,
                    iterations: rep.iterations,
                    residual: rep.final_residual(),
                    converged: rep.converged,
                },
                rep.u,
            ))
        })
        .collect()
}

fn run_manufactured(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let study = manufactured_study(&cfg.manufactured)?;
    let rows: Vec<Vec<String>> = study
        .iter()
        .map(|(r, _)| {
            vec![
                r.nodes.to_string(),
                ff(r.relative_error),
                r.iterations.to_string(),
                ff(r.residual),
                r.converged.to_string(),
            ]
        })
        .collect();
    out.report(
        "report.csv",
        &["nodes", "relative_error", "iterations", "residual", "converged"],
        &rows,
    )?;
    for (r, u) in &study {
        out.field(&format!("u_{}.csv", r.nodes), u)?;
    }
    let errs: Vec<f64> = study.iter().map(|(r, _)| r.relative_error).collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let passed = monotone && study.iter().all(|(r, _)| r.converged);
    let hl = headline(&[
        ("finest_relative_error", *errs.last().expect("nonempty")),
        ("monotone", flag(monotone)),
    ]);
    out.summary(cfg, passed, &hl, &[])?;
    let field = study.into_iter().last().map(|(_, u)| u);
    Ok(RunOutcome {
        kind: cfg.kind,
        passed,
        headline: hl,
        dir: out.dir.clone(),
        field,
    })
}

/// `(quantity, value)` rows describing the exponent calculus at one parameter point.
pub fn exponent_table(ec: &ExponentConfig) -> Result<Vec<(String, String)>> {
    let ctx = ExponentContext::new(ec.p, ec.dim)?;
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| rows.push((k.to_string(), v));
    push("p", ff(ec.p));
    push("dim", ec.dim.to_string());
    push("alpha", ff(ec.alpha));
    push("s", ff(ec.s));
    let ext = |e: crate::exponents::Extended| e.finite().map(ff).unwrap_or_else(|| "inf".into());
    push("p_star", ext(ctx.p_star()));
    push("lambda", ext(ctx.lambda()));
    push("r_s", ff(r_exponent(ec.p, ec.s)?));
    push("omega_s", ff(omega(ec.p, ec.s)?));
    let branch = BoundBranch::select(&ctx, ec.alpha)?;
    push("branch", branch.to_string());
    let variant = match branch {
        BoundBranch::Superlinear => Some(LadderVariant::Superlinear),
        BoundBranch::Sublinear => Some(LadderVariant::Sublinear),
        BoundBranch::Supercritical => None,
    };
    if let Some(variant) = variant {
        let ladder = moser_sequence(&ctx, variant, ec.alpha, ec.n_max)?;
        if let Some(d) = ladder.delta {
            push("delta", ff(d));
        }
        for (n, k) in ladder.k.iter().enumerate() {
            push(&format!("k_{n}"), ff(*k));
        }
        let n_s = ladder.n_for_target(ec.s)?;
        push("n_s", n_s.to_string());
        // h_s(x) = x + x^{(n_s+1)λ}
        push("h_linear_coefficient", ff(1.0));
        push("h_power_exponent", ff((n_s as f64 + 1.0) * ladder.lambda()));
    }
    if let Some(big_r) = ec.big_r {
        let bf = bound_formula(&ctx, ec.alpha, big_r, ec.s)?;
        push("R", ff(bf.big_r));
        push("q", ff(bf.q));
        push("r_R", ff(bf.r_big_r));
        push("omega_R", ff(bf.omega_p_big_r));
        push("R_s", ff(bf.big_r_s));
        push("T_s", ff(bf.t_s));
    }
    Ok(rows)
}

fn run_exponent_table(cfg: &ExperimentConfig, out: &Output) -> Result<RunOutcome> {
    let rows = exponent_table(&cfg.exponents)?;
    let csv_rows: Vec<Vec<String>> = rows.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
    out.report("report.csv", &["quantity", "value"], &csv_rows)?;
    let hl: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|(k, v)| v.parse().ok().map(|x| (k.clone(), x)))
        .collect();
    out.summary(cfg, true, &hl, &[])?;
    Ok(RunOutcome {
        kind: cfg.kind,
        passed: true,
        headline: hl,
        dir: out.dir.clone(),
        field: None,
    })
}

/// Parses `key=value` tokens (`p`, `N`/`dim`, `alpha`, `s`, `R`, `n_max`).
pub fn parse_exponent_args<S: AsRef<str>>(args: &[S]) -> Result<ExponentConfig> {
    let mut ec = ExponentConfig::default();
    let mut seen = BTreeMap::new();
    for a in args {
        let a = a.as_ref();
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got `{a}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if seen.insert(k.to_string(), ()).is_some() {
            return Err(Error::Parse(format!("`{k}` given twice")));
        }
        let num = |what: &str| -> Result<f64> {
            let x: f64 = v.parse().map_err(|_| Error::Parse(format!("invalid {what}: `{v}`")))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::Parse(format!("{what} must be finite")))
            }
        };
        let count =
            |what: &str| -> Result<usize> { v.parse().map_err(|_| Error::Parse(format!("invalid {what}: `{v}`"))) };
        match k {
            "p" => ec.p = num("p")?,
            "N" | "dim" => ec.dim = count("dimension")?,
            "alpha" => ec.alpha = num("alpha")?,
            "s" => ec.s = num("s")?,
            "R" => ec.big_r = Some(num("R")?),
            "n_max" => {
                let n = count("n_max")?;
                if n > 64 {
                    return Err(Error::Parse("n_max is capped at 64".into()));
                }
                ec.n_max = n;
            }
            other => return Err(Error::Parse(format!("unknown parameter `{other}`"))),
        }
    }
    Ok(ec)
}

#[derive(Debug)]
pub struct SweepCell {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub outcome: Result<RunOutcome>,
    /// `‖u - u_0‖_{L^2}` against the first cell's field when grids agree.
    pub drift: Option<f64>,
}

fn same_grid(a: &GridSpec, b: &GridSpec) -> bool {
    a.kind() == b.kind() && a.len() == b.len() && a.weights() == b.weights()
}

fn sweep_points(sw: &SweepConfig) -> Vec<Vec<(String, toml::Value)>> {
    if sw.mode == "zip" {
        return (0..sw.axes[0].values.len())
            .map(|i| {
                sw.axes
                    .iter()
                    .map(|a| (a.parameter.clone(), a.values[i].clone()))
                    .collect()
            })
            .collect();
    }
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in &sw.axes {
        points = points
            .into_iter()
            .flat_map(|pt| {
                axis.values.iter().map(move |v| {
                    let mut next = pt.clone();
                    next.push((axis.parameter.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    points
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(x) => ff(*x),
        other => other.to_string(),
    }
}

/// Runs every sweep cell (concurrently) into `<output>/cell-NNN` and writes
/// the aggregate `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    sweep_in(cfg, &cfg.output_dir())
}

pub fn sweep_path(path: &Path) -> Result<Vec<SweepCell>> {
    let cfg = ExperimentConfig::load(path)?;
    sweep(&cfg)
}

pub fn sweep_in(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Validation("config has no [sweep] section".into()))?;
    let points = sweep_points(sw);
    let mut base = cfg.clone();
    base.sweep = None;
    let out = Output::new(dir, cfg)?;
    let mut cells: Vec<SweepCell> = points
        .into_par_iter()
        .enumerate()
        .map(|(index, assignments)| {
            let cell_dir = dir.join(format!("cell-{index:03}"));
            let outcome = assignments
                .iter()
                .try_fold(base.clone(), |c, (k, v)| c.with_override(k, v))
                .and_then(|c| run_in(&c, &cell_dir));
            SweepCell {
                index,
                assignments,
                outcome,
                drift: None,
            }
        })
        .collect();
    cells.sort_by_key(|c| c.index);

    let reference = cells
        .iter()
        .find_map(|c| c.outcome.as_ref().ok().and_then(|o| o.field.clone()));
    for c in &mut cells {
        if let (Some(r), Ok(o)) = (&reference, &c.outcome) {
            if let Some(u) = &o.field {
                if same_grid(u.grid(), r.grid()) {
                    let d = u.sub(r)?;
                    c.drift = Some(grid::integrate(&d.map(|v| v * v)?).sqrt());
                }
            }
        }
    }

    let mut metric_names: Vec<String> = Vec::new();
    for c in &cells {
        if let Ok(o) = &c.outcome {
            for (k, _) in &o.headline {
                if !metric_names.contains(k) {
                    metric_names.push(k.clone());
                }
            }
        }
    }
    let params: Vec<String> = sw.axes.iter().map(|a| a.parameter.clone()).collect();
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(params.iter().cloned());
    header.push("status".into());
    header.extend(metric_names.iter().cloned());
    header.push("drift".into());
    header.push("error".into());
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let mut row = vec![c.index.to_string()];
            row.extend(c.assignments.iter().map(|(_, v)| value_text(v)));
            match &c.outcome {
                Ok(o) => {
                    row.push(o.status().code().to_string());
                    row.extend(metric_names.iter().map(|m| o.metric(m).map(ff).unwrap_or_default()));
                    row.push(c.drift.map(ff).unwrap_or_default());
                    row.push(String::new());
                }
                Err(e) => {
                    row.push(ExitStatus::for_error(e).code().to_string());
                    row.extend(metric_names.iter().map(|_| String::new()));
                    row.push(String::new());
                    row.push(e.to_string());
                }
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    out.report("sweep.csv", &header_refs, &rows)?;

    let mut notes = Vec::new();
    for m in &metric_names {
        let vals: Vec<f64> = cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().and_then(|o| o.metric(m)))
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let spread = if lo > 0.0 { ff(hi / lo) } else { "n/a".into() };
        notes.push(format!("{m}: min {} max {} spread {spread}", ff(lo), ff(hi)));
    }
    let failed = cells
        .iter()
        .filter(|c| !matches!(&c.outcome, Ok(o) if o.passed))
        .count();
    let hl = headline(&[("cells", cells.len() as f64), ("failed_cells", failed as f64)]);
    out.summary(cfg, failed == 0, &hl, &notes)?;
    Ok(cells)
}
