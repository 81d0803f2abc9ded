//! The desk-scale acceptance suite: ten criteria, each made of named checks.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiment::{
    self, ExperimentConfig, GridConfig, GridShape, ManufacturedConfig, NonlinearityConfig, ProblemConfig, SolverConfig,
    SourceConfig,
};
use crate::exponents::{h_poly, moser_sequence, omega, r_exponent, ExponentContext, LadderVariant};
use crate::fracnorm::{self, ShiftSet};
use crate::grid::{self, GridSpec, ScalarField};
use crate::kirchhoff::{self, KirchhoffTerm, NqOutcome, NqSearch};
use crate::oracle::RadialProfile;
use crate::plap;

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "exponent calculus"),
    (2, "manufactured convergence"),
    (3, "regularity dichotomy"),
    (4, "seminorm vs weighted energy"),
    (5, "a-priori bound sweep"),
    (6, "scaling identity"),
    (7, "fixed-point existence"),
    (8, "NQ certificates"),
    (9, "Moser ladder"),
    (10, "determinism"),
];

#[derive(Debug, Clone)]
pub struct Settings {
    /// Inner solver tolerance.
    pub tol: f64,
    pub seed: u64,
    /// Scratch directory for experiment outputs.
    pub work_dir: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            seed: 20240611,
            work_dir: std::env::temp_dir().join(format!("pkirch-verify-{}", std::process::id())),
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Validation(format!(
                "tolerance must lie in (0, 1), got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: u8,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} C{} {} ({:.1}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.seconds
        )?;
        for c in &self.checks {
            write!(
                f,
                "\n    [{}] {}: {}",
                if c.passed { "ok" } else { "x" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

struct Checks(Vec<Check>);

impl Checks {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn add(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Parses `7`, `c7` or `C7`.
pub fn parse_criterion(s: &str) -> Result<u8> {
    let t = s.trim().trim_start_matches(['c', 'C']);
    let id: u8 = t
        .parse()
        .map_err(|_| Error::Parse(format!("unknown criterion `{s}`")))?;
    if CRITERIA.iter().any(|(i, _)| *i == id) {
        Ok(id)
    } else {
        Err(Error::Parse(format!("unknown criterion `{s}` (expected 1-10)")))
    }
}

pub fn run_criterion(id: u8, settings: &Settings) -> Result<CriterionReport> {
    settings.validate()?;
    let title = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Validation(format!("no criterion {id}")))?;
    let start = Instant::now();
    let checks = match id {
        1 => c1_exponents()?,
        2 => c2_manufactured(settings)?,
        3 => c3_dichotomy()?,
        4 => c4_normalemma(settings)?,
        5 => c5_bound_sweep(settings)?,
        6 => c6_scaling(settings)?,
        7 => c7_existence(settings)?,
        8 => c8_nq(settings)?,
        9 => c9_ladder(settings)?,
        10 => c10_determinism(settings)?,
        _ => unreachable!(),
    };
    Ok(CriterionReport {
        id,
        title,
        checks: checks.0,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(settings: &Settings) -> Result<Vec<CriterionReport>> {
    CRITERIA.iter().map(|(id, _)| run_criterion(*id, settings)).collect()
}

fn c1_exponents() -> Result<Checks> {
    let mut ch = Checks::new();
    let mut exact = |name: &str, got: f64, want: f64| ch.add(name, got == want, format!("{got} (expected {want})"));
    exact("r(4,3)", r_exponent(4.0, 3.0)?, 8.0);
    exact("r(3,2)", r_exponent(3.0, 2.0)?, 4.0);
    exact("omega(3,4)", omega(3.0, 4.0)?, 0.0);
    exact("omega(2.2,10)", omega(2.2, 10.0)?, 9.0);
    let ctx = ExponentContext::new(3.0, 4)?;
    exact("lambda(N=4,p=3)", ctx.lambda().finite().unwrap_or(f64::NAN), 4.0);
    let sup = moser_sequence(&ctx, LadderVariant::Superlinear, 8.0, 2)?;
    exact("delta", sup.delta.unwrap_or(f64::NAN), 0.25);
    for (n, want) in [1.0, 5.0, 21.0].into_iter().enumerate() {
        exact(&format!("superlinear k_{n}"), sup.k[n], want);
    }
    let sub = moser_sequence(&ctx, LadderVariant::Sublinear, 1.5, 2)?;
    exact("sublinear k_2", sub.k[2], 15.0);
    let n_s = sup.n_for_target(50.0)?;
    exact("n_for_target(50)", n_s as f64, 1.0);
    exact("h(2)", h_poly(&ctx, n_s, 2.0)?, 258.0);
    Ok(ch)
}

fn c2_manufactured(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    let mc = ManufacturedConfig {
        tol: settings.tol,
        ..ManufacturedConfig::default()
    };
    let study = experiment::manufactured_study(&mc)?;
    let errs: Vec<f64> = study.iter().map(|(r, _)| r.relative_error).collect();
    let text = study
        .iter()
        .map(|(r, _)| format!("{}: {:.4e}", r.nodes, r.relative_error))
        .collect::<Vec<_>>()
        .join(", ");
    ch.add("solves converged", study.iter().all(|(r, _)| r.converged), text.clone());
    ch.add("monotone decrease", errs.windows(2).all(|w| w[1] < w[0]), text);
    let last = *errs.last().expect("three grids");
    ch.add("finest error <= 2%", last <= 0.02, format!("{last:.4e}"));
    Ok(ch)
}

fn c3_dichotomy() -> Result<Checks> {
    let mut ch = Checks::new();
    let profile = RadialProfile::new(1.25, 2, 3.0)?;
    let set = ShiftSet::standard(&*GridSpec::radial(2, 256, grid::DEFAULT_R_MIN)?)?;
    let semi = |n: usize| -> Result<f64> {
        let u = profile.sample(GridSpec::radial(2, n, grid::DEFAULT_R_MIN)?)?;
        Ok(fracnorm::nikolskii_seminorm(&u, 1.5, 4.0, &set)?.seminorm)
    };
    let (coarse, fine) = (semi(256)?, semi(1024)?);
    let var = (fine - coarse).abs() / fine;
    ch.add(
        "seminorm stable under refinement (< 10%)",
        var < 0.10,
        format!("256: {coarse:.6}, 1024: {fine:.6}, change {:.2}%", 100.0 * var),
    );
    let u = profile.sample(GridSpec::radial(2, 2048, grid::DEFAULT_R_MIN)?)?;
    let cutoffs: Vec<f64> = (0..8).map(|k| 5e-3 * (0.1f64).powf(k as f64 / 7.0)).collect();
    let fit = fracnorm::cutoff_divergence_rate(&u, 4.0, &cutoffs)?;
    let analytic = (profile.alpha - 2.0) * 4.0 + 2.0;
    let rel = (fit.slope - analytic).abs() / analytic.abs();
    ch.add(
        "cutoff exponent within 15%",
        rel <= 0.15,
        format!(
            "fitted {:.4}, analytic {analytic}, deviation {:.1}%",
            fit.slope,
            100.0 * rel
        ),
    );
    Ok(ch)
}

fn battery(cells: usize, radial_nodes: usize, seed: u64) -> Result<Vec<(String, ScalarField)>> {
    let sq = GridSpec::unit_square(cells)?;
    let mut out = vec![(
        "quadratic".to_string(),
        ScalarField::from_fn(sq.clone(), |c| 0.5 * (c[0] * c[0] + c[1] * c[1]))?,
    )];
    for k in 0..20 {
        out.push((
            format!("bumps#{k}"),
            experiment::random_bumps(sq.clone(), 0.0, 4, 1.0, seed + k)?,
        ));
    }
    let rg = GridSpec::radial(2, radial_nodes, grid::DEFAULT_R_MIN)?;
    for alpha in [1.25, 1.4] {
        out.push((
            format!("profile({alpha})"),
            RadialProfile::new(alpha, 2, 3.0)?.sample(rg.clone())?,
        ));
    }
    Ok(out)
}

fn c4_normalemma(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    let max_ratio = |cells: usize, nodes: usize| -> Result<(f64, String, bool)> {
        let mut best = (f64::NEG_INFINITY, String::new());
        let mut finite = true;
        for (name, u) in battery(cells, nodes, settings.seed)? {
            let chk = fracnorm::normalemma_check(&u, 4.0)?;
            let ratio = chk.min_constant.unwrap_or(f64::INFINITY);
            finite &= ratio.is_finite();
            if ratio > best.0 {
                best = (ratio, name);
            }
        }
        Ok((best.0, best.1, finite))
    };
    let (coarse, at_c, fin_c) = max_ratio(32, 256)?;
    let (fine, at_f, fin_f) = max_ratio(64, 512)?;
    ch.add(
        "ratios finite",
        fin_c && fin_f,
        format!("coarse max {coarse:.4} ({at_c}), fine max {fine:.4} ({at_f})"),
    );
    let change = (fine / coarse).max(coarse / fine);
    ch.add("max ratio changes < x2", change < 2.0, format!("factor {change:.3}"));
    Ok(ch)
}

fn c5_bound_sweep(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    let mut cfg = ExperimentConfig::parse("kind = \"bound-sweep\"")?;
    cfg.grid = GridConfig {
        cells: vec![64, 64],
        ..GridConfig::default()
    };
    cfg.problem = ProblemConfig {
        p: 3.0,
        eps: None,
        kirchhoff: Some(experiment::KirchhoffConfig::LogGrowth {
            theta1: 1.0,
            theta2: 1.0,
        }),
        nonlinearity: NonlinearityConfig::Source,
        g: SourceConfig::default(),
    };
    cfg.solver.tol_inner = settings.tol;
    cfg.solver.require_nontrivial = false;
    cfg.bound.seeds = (0..10).map(|k| settings.seed + 100 + k).collect();
    cfg.bound.s = 3.0;
    let w = omega(cfg.problem.p, cfg.bound.s)?;
    ch.add(
        "omega-free regime (p >= 3 - 2/s)",
        w == 0.0 && cfg.problem.p >= 3.0 - 2.0 / cfg.bound.s,
        format!("omega = {w}"),
    );
    let cells = experiment::bound_cells(&cfg)?;
    ch.add(
        "all solves converged",
        cells.iter().all(|(c, _)| c.converged),
        format!("{} cells", cells.len()),
    );
    let fitted: Vec<f64> = cells.iter().map(|(c, _)| c.fitted_c).collect();
    let lo = fitted.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fitted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ch.add(
        "fitted constants spread < x3",
        lo > 0.0 && hi / lo < 3.0,
        format!("min {lo:.4}, max {hi:.4}, spread {:.3}", hi / lo),
    );
    Ok(ch)
}

fn c6_scaling(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    let p = 3.0;
    let grid = GridSpec::unit_square(32)?;
    let eps = plap::default_eps(&grid);
    let a_lo = KirchhoffTerm::log_growth(1.0, 1.0)?.a0();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut worst = 0.0f64;
    let mut worst_const = 0.0f64;
    for k in 0..10 {
        let b: f64 = rng.random_range(a_lo.powf(p - 1.0)..=10.0);
        let g = experiment::random_bumps(grid.clone(), 1.0, 3, 0.5, settings.seed + 200 + k)?;
        let t = 1.0;
        let rep = plap::solve_linearized_with_b(b, t, &g, p, eps, settings.tol, plap::DEFAULT_MAX_ITER, None)?;
        let kk = rep.k;
        let direct = plap::LocalProblem::new(p, kk, g.scale(t)?, eps, settings.tol)?;
        let r = plap::residual_norm(&rep.u, &direct);
        worst = worst.max(r / (settings.tol * kk.max(1.0)));
        // the same solve through a constant Kirchhoff term a = b^{1/(p-1)}
        let a = KirchhoffTerm::constant(b.powf(1.0 / (p - 1.0)))?;
        let via_a = plap::solve_linearized(&rep.u, t, &g, &a, p, eps, settings.tol)?;
        worst_const = worst_const.max(plap::residual_norm(&via_a.u, &direct) / (settings.tol * kk.max(1.0)));
    }
    ch.add(
        "unscaled residual <= tol*max(1,k)",
        worst <= 1.0,
        format!("worst residual/(tol*max(1,k)) = {worst:.3}"),
    );
    ch.add(
        "constant-a route agrees",
        worst_const <= 1.0,
        format!("worst ratio = {worst_const:.3}"),
    );
    let g = experiment::random_bumps(grid.clone(), 1.0, 3, 0.5, settings.seed)?;
    let rep = plap::solve_linearized_with_b(2.0, 0.0, &g, p, eps, settings.tol, plap::DEFAULT_MAX_ITER, None)?;
    ch.add(
        "t = 0 gives the zero field",
        rep.u.values().iter().all(|&v| v == 0.0),
        format!("max |u| = {:e}", rep.u.max().abs().max(rep.u.min().abs())),
    );
    Ok(ch)
}

/// The two fixed-point configurations of criterion 7.
pub fn existence_configs(settings: &Settings) -> Result<[(&'static str, ExperimentConfig); 2]> {
    let mut base = ExperimentConfig::parse("kind = \"solve\"")?;
    base.seed = settings.seed;
    base.grid = GridConfig {
        kind: GridShape::Rectangle,
        cells: vec![64, 64],
        ..GridConfig::default()
    };
    base.solver = SolverConfig {
        tol_inner: settings.tol,
        max_outer: 100,
        tol_res: 1e-4,
        ..SolverConfig::default()
    };
    let mut ex1 = base.clone();
    ex1.problem = ProblemConfig {
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
        g: SourceConfig::Affine {
            offset: 1.0,
            slope: vec![0.2, 0.5],
        },
    };
    let mut ex2 = base;
    ex2.problem = ProblemConfig {
        p: 3.0,
        eps: None,
        kirchhoff: None,
        nonlinearity: NonlinearityConfig::Example2 {
            eps_exp: 0.5,
            delta1: 1.0,
            delta2: 1.0,
            beta: 1.0,
            nu: None,
        },
        g: SourceConfig::Affine {
            offset: 1.0,
            slope: vec![0.2, 0.0],
        },
    };
    Ok([("example1", ex1), ("example2", ex2)])
}

fn existence_checks(ch: &mut Checks, name: &str, out: &experiment::RunOutcome, tol_outer: f64) {
    let m = |k: &str| out.metric(k).unwrap_or(f64::NAN);
    ch.add(
        &format!("{name} converged within 100 outer iterations"),
        m("converged") == 1.0 && m("outer_iterations") <= 100.0,
        format!(
            "{} iterations, final difference {:.3e}",
            m("outer_iterations"),
            m("final_difference")
        ),
    );
    ch.add(
        &format!("{name} nonlocal residual <= 1e-4"),
        m("nonlocal_residual") <= 1e-4,
        format!("{:.3e}", m("nonlocal_residual")),
    );
    ch.add(
        &format!("{name} nontrivial"),
        m("range") > 1e3 * tol_outer,
        format!("max - min = {:.3e} (threshold {:.1e})", m("range"), 1e3 * tol_outer),
    );
}

fn c7_existence(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    for (name, cfg) in existence_configs(settings)? {
        let out = experiment::run_in(&cfg, &settings.work_dir.join("c7").join(name))?;
        existence_checks(&mut ch, name, &out, cfg.solver.tol_outer);
    }
    Ok(ch)
}

fn c8_nq(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    let grid = GridSpec::unit_square(32)?;
    let g = ScalarField::from_fn(grid.clone(), |c| 1.0 + 0.2 * c[0] + 0.5 * c[1])?;
    let search = NqSearch::default();

    let (_, f1) = kirchhoff::catalog_example1(3.0, 3.0, 1.0, 1.0, 1.0, g.clone())?;
    match kirchhoff::nq_certificate(&f1.clone().with_nu(1.2)?, &search)? {
        NqOutcome::Certified(c) => {
            ch.add(
                "example1 certificate",
                c.r.is_finite() && c.margin > 0.0,
                format!("R = {:.4}, margin = {:.4}, K = {:.4e}", c.r, c.margin, c.k),
            );
            let fields = experiment::random_bounded_fields(grid.clone(), 50, search.t_max, settings.seed)?;
            let mut worst = f64::NEG_INFINITY;
            for u in &fields {
                worst = worst.max(kirchhoff::source_pairing(&f1, u)?);
            }
            ch.add(
                "pairing bound on 50 random fields",
                worst <= c.k,
                format!("max pairing {worst:.4e} <= K {:.4e}", c.k),
            );
        }
        other => ch.add("example1 certificate", false, format!("{other:?}")),
    }
    let violated = kirchhoff::nq_certificate(&f1.with_nu(1.6)?, &search)?;
    ch.add(
        "nu*c3 >= c2 reported as violation",
        matches!(violated, NqOutcome::PreconditionViolated { .. }),
        format!("{violated:?}"),
    );

    let theta = 0.5;
    let nu = 2.0 / (1.0 + 2.0 * theta);
    let (_, f2) = kirchhoff::catalog_example2(3.0, 0.5, 1.0, 1.0, 1.0, g.clone())?;
    let g0 = g.min();
    let claimed = nu * theta * g0;
    match kirchhoff::nq_certificate(&f2.with_nu(nu)?, &search)? {
        NqOutcome::Certified(c) => {
            ch.add(
                "example2 certificate",
                true,
                format!("R = {:.4}, margin = {:.4}", c.r, c.margin),
            );
            let dev = (c.margin - claimed).abs() / claimed;
            ch.add(
                "example2 margin within 25% of nu*theta*g0",
                dev <= 0.25,
                format!(
                    "margin {:.4} vs nu*theta*g0 = {claimed:.4} (deviation {:.0}%)",
                    c.margin,
                    100.0 * dev
                ),
            );
        }
        other => ch.add("example2 certificate", false, format!("{other:?}")),
    }
    Ok(ch)
}

fn c9_ladder(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    // Nominal context: the solution lives on a planar grid, the ladder is taken at N = 6.
    let ctx = ExponentContext::new(3.0, 6)?;
    let ladder = moser_sequence(&ctx, LadderVariant::Superlinear, 2.0, 8)?;
    let [(_, ex1), _] = existence_configs(settings)?;
    let grid = ex1.grid.build()?;
    let prob = experiment::build_problem(&ex1.problem, ex1.problem.g.build(grid.clone(), ex1.seed)?)?;
    let rep = kirchhoff::fixed_point_solve(&prob, &ex1.solver.options())?;
    ch.add(
        "example1 solution converged",
        rep.converged,
        format!("residual {:.3e}", rep.nonlocal_residual),
    );
    let checks = fracnorm::moser_ladder_check(&rep.u, &ladder, &ctx, fracnorm::LADDER_EXPONENT_CAP)?;
    let consts: Vec<f64> = checks.iter().take(3).map(|c| c.min_constant).collect();
    let lo = consts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = consts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ch.add(
        "three rungs within a factor 5",
        consts.len() == 3 && lo > 0.0 && hi / lo <= 5.0,
        format!("constants {consts:.4?}, factor {:.3}", hi / lo),
    );
    let one = ScalarField::constant(GridSpec::unit_square(16)?, 1.0)?;
    let closed = fracnorm::moser_ladder_check(&one, &ladder, &ctx, fracnorm::LADDER_EXPONENT_CAP)?;
    ch.add(
        "constant field gives 1/3",
        !closed.is_empty() && closed.iter().all(|c| c.min_constant == 1.0 / 3.0),
        format!("{:?}", closed.iter().map(|c| c.min_constant).collect::<Vec<_>>()),
    );
    Ok(ch)
}

fn read_reports(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn c10_determinism(settings: &Settings) -> Result<Checks> {
    let mut ch = Checks::new();
    for (name, cfg) in existence_configs(settings)? {
        let a = settings.work_dir.join("c10").join(format!("{name}-a"));
        let b = settings.work_dir.join("c10").join(format!("{name}-b"));
        experiment::run_in(&cfg, &a)?;
        experiment::run_in(&cfg, &b)?;
        let (ra, rb) = (read_reports(&a)?, read_reports(&b)?);
        let same = !ra.is_empty() && ra == rb;
        ch.add(
            &format!("{name} CSVs byte-identical"),
            same,
            format!("{} files compared", ra.len()),
        );
    }
    Ok(ch)
}
