//! Kirchhoff coefficients, nonlinearities, the damped Picard/homotopy loop
//! and NQ certificates.

use std::fmt;

use crate::error::{Error, Result};
use crate::fracnorm::sobolev_norm_pow;
use crate::grid::{self, ScalarField};
use crate::plap::{self, LocalProblem};
use crate::quadrature::{self, QuadratureOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum KirchhoffKind {
    Constant {
        a: f64,
    },
    /// `θ1 ln(1 + |t|) + θ2`.
    LogGrowth {
        theta1: f64,
        theta2: f64,
    },
    /// `δ1 |t sin(1/t)| + δ2` on `(0, 1]`, `δ1 + δ2` at 0, extended with period 1.
    Oscillatory {
        delta1: f64,
        delta2: f64,
    },
    /// Linear interpolation of samples, constant beyond the last one.
    Tabulated {
        t: Vec<f64>,
        a: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KirchhoffTerm {
    kind: KirchhoffKind,
    a0: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive, got {v}")))
    }
}

impl KirchhoffTerm {
    pub fn constant(a: f64) -> Result<Self> {
        positive("a", a)?;
        Ok(Self {
            kind: KirchhoffKind::Constant { a },
            a0: a,
        })
    }

    pub fn log_growth(theta1: f64, theta2: f64) -> Result<Self> {
        positive("theta1", theta1)?;
        positive("theta2", theta2)?;
        Ok(Self {
            kind: KirchhoffKind::LogGrowth { theta1, theta2 },
            a0: theta2,
        })
    }

    pub fn oscillatory(delta1: f64, delta2: f64) -> Result<Self> {
        positive("delta1", delta1)?;
        positive("delta2", delta2)?;
        Ok(Self {
            kind: KirchhoffKind::Oscillatory { delta1, delta2 },
            a0: delta2,
        })
    }

    pub fn tabulated(t: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if t.is_empty() || t.len() != a.len() {
            return Err(Error::domain(
                "tabulated Kirchhoff term needs matching, nonempty sample lists",
            ));
        }
        if t[0] != 0.0 || t.windows(2).any(|w| !(w[1] > w[0])) || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(
                "tabulated abscissae must start at 0 and increase strictly",
            ));
        }
        for &v in &a {
            positive("tabulated a(t)", v)?;
        }
        let a0 = a.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            kind: KirchhoffKind::Tabulated { t, a },
            a0,
        })
    }

    pub fn kind(&self) -> &KirchhoffKind {
        &self.kind
    }

    /// Lower bound `a0` with `a(t) >= a0` for all `t >= 0`.
    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            KirchhoffKind::Constant { .. } => "constant",
            KirchhoffKind::LogGrowth { .. } => "log-growth",
            KirchhoffKind::Oscillatory { .. } => "oscillatory",
            KirchhoffKind::Tabulated { .. } => "tabulated",
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.abs();
        match &self.kind {
            KirchhoffKind::Constant { a } => *a,
            KirchhoffKind::LogGrowth { theta1, theta2 } => theta1 * t.ln_1p() + theta2,
            KirchhoffKind::Oscillatory { delta1, delta2 } => {
                if t == 0.0 {
                    return delta1 + delta2;
                }
                let s = if t <= 1.0 {
                    t
                } else {
                    let f = t.fract();
                    if f == 0.0 {
                        1.0
                    } else {
                        f
                    }
                };
                delta1 * (s * (1.0 / s).sin()).abs() + delta2
            }
            KirchhoffKind::Tabulated { t: ts, a } => {
                let j = ts.partition_point(|&x| x <= t);
                if j >= ts.len() {
                    return *a.last().unwrap();
                }
                let (t0, t1) = (ts[j - 1], ts[j]);
                let w = (t - t0) / (t1 - t0);
                a[j - 1] * (1.0 - w) + a[j] * w
            }
        }
    }
}

impl fmt::Display for KirchhoffTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            KirchhoffKind::Constant { a } => write!(f, "constant(a={a})"),
            KirchhoffKind::LogGrowth { theta1, theta2 } => write!(f, "log-growth(theta1={theta1}, theta2={theta2})"),
            KirchhoffKind::Oscillatory { delta1, delta2 } => write!(f, "oscillatory(delta1={delta1}, delta2={delta2})"),
            KirchhoffKind::Tabulated { t, .. } => write!(f, "tabulated({} samples)", t.len()),
        }
    }
}

/// `b(v) = a(‖v‖^p_{W^{1,p}})^{p-1}`.
pub fn b_of(v: &ScalarField, a: &KirchhoffTerm, p: f64) -> Result<f64> {
    if !(p > 2.0) {
        return Err(Error::domain(format!("p must exceed 2, got {p}")));
    }
    let b = a.eval(sobolev_norm_pow(v, p)).powf(p - 1.0);
    if !b.is_finite() {
        return Err(Error::NonFinite(format!("b(v) = {b}")));
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinearityKind {
    /// `-c t (t^2 + 1)^{(β-2)/2} + g(x)`.
    Example1 { beta: f64, c: f64 },
    /// The oscillatory nonlinearity with primitive
    /// `-g(x)(|t|^p + (p-2)|t|^{p-ε} sin^2(|t|^ε/ε))`.
    Example2 { p: f64, eps_exp: f64 },
    /// `-c t + g(x)`.
    Linear { c: f64 },
    /// `g(x)`, independent of `t`.
    Source,
}

/// Growth data: `|f| <= c1(|t|^α + 1)`, the NQ triple `(ν, σ, c2)` and either
/// `|F| <= c3 |t|^β` asymptotically or `F/|t|^β -> -∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthMetadata {
    pub alpha: f64,
    pub c1: f64,
    pub beta: f64,
    pub sigma: f64,
    pub nu: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    /// `F/|t|^β -> -∞` instead of a finite `c3`.
    pub h3_prime: bool,
}

#[derive(Debug, Clone)]
pub struct Nonlinearity {
    kind: NonlinearityKind,
    g: ScalarField,
    meta: GrowthMetadata,
    /// Explicit `c3` set by the caller, kept across changes of `ν`.
    c3_override: Option<f64>,
}

fn sup_abs(g: &ScalarField) -> f64 {
    g.values().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn require_nonconstant(g: &ScalarField) -> Result<()> {
    if g.max() - g.min() > 0.0 {
        Ok(())
    } else {
        Err(Error::domain("g must be nonconstant"))
    }
}

const PRIMITIVE_QUADRATURE: QuadratureOptions = QuadratureOptions {
    abs_tol: 1e-13,
    rel_tol: 1e-10,
    max_intervals: 2000,
};

impl Nonlinearity {
    pub fn linear(c: f64, g: ScalarField) -> Result<Self> {
        positive("c", c)?;
        let meta = GrowthMetadata {
            alpha: 1.0,
            c1: c.max(sup_abs(&g)),
            beta: 1.0,
            sigma: 2.0,
            nu: None,
            c2: None,
            c3: None,
            h3_prime: true,
        };
        Ok(Self {
            kind: NonlinearityKind::Linear { c },
            g,
            meta,
            c3_override: None,
        })
    }

    pub fn source(g: ScalarField) -> Self {
        let meta = GrowthMetadata {
            alpha: 1.0,
            c1: sup_abs(&g),
            beta: 1.0,
            sigma: 1.0,
            nu: None,
            c2: None,
            c3: None,
            h3_prime: false,
        };
        Self {
            kind: NonlinearityKind::Source,
            g,
            meta,
            c3_override: None,
        }
    }

    pub fn kind(&self) -> NonlinearityKind {
        self.kind
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            NonlinearityKind::Example1 { .. } => "example1",
            NonlinearityKind::Example2 { .. } => "example2",
            NonlinearityKind::Linear { .. } => "linear",
            NonlinearityKind::Source => "source",
        }
    }

    pub fn g(&self) -> &ScalarField {
        &self.g
    }

    pub fn meta(&self) -> &GrowthMetadata {
        &self.meta
    }

    /// Sets `ν` and the NQ constants that depend on it.
    pub fn with_nu(mut self, nu: f64) -> Result<Self> {
        positive("nu", nu)?;
        match self.kind {
            NonlinearityKind::Example1 { beta, c } => {
                if !(nu < beta) {
                    return Err(Error::domain(format!(
                        "Example 1 needs nu < beta for c2 > 0 (nu = {nu}, beta = {beta})"
                    )));
                }
                self.meta.c2 = Some(c * (beta - nu) / beta);
                self.meta.c3 = Some(self.c3_override.unwrap_or(c / beta));
            }
            NonlinearityKind::Example2 { .. } => {
                if !(nu < 2.0) {
                    return Err(Error::domain(format!("Example 2 needs nu = 2/(1+2θ) < 2, got {nu}")));
                }
                let theta = 1.0 / nu - 0.5;
                self.meta.c2 = Some(nu * theta * self.g.min());
            }
            NonlinearityKind::Linear { c } => {
                if !(nu < 2.0) {
                    return Err(Error::domain(format!("the linear nonlinearity needs nu < 2, got {nu}")));
                }
                self.meta.c2 = Some(c * (2.0 - nu) / 2.0);
            }
            NonlinearityKind::Source => {
                return Err(Error::Unsupported("a t-independent source has no NQ data".into()));
            }
        }
        self.meta.nu = Some(nu);
        Ok(self)
    }

    /// Overrides `c3` (e.g. with a non-sharp bound).
    pub fn with_c3(mut self, c3: f64) -> Result<Self> {
        positive("c3", c3)?;
        if self.meta.h3_prime {
            return Err(Error::domain(
                "c3 is meaningless for a nonlinearity declared under F/|t|^β -> -∞",
            ));
        }
        self.c3_override = Some(c3);
        self.meta.c3 = Some(c3);
        Ok(self)
    }

    /// `f(x, t)` where `x` enters only through `gv = g(x)`.
    pub fn f_at(&self, gv: f64, t: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Example1 { beta, c } => -c * t * (t * t + 1.0).powf(0.5 * (beta - 2.0)) + gv,
            NonlinearityKind::Example2 { p, eps_exp } => {
                let a = t.abs();
                if a == 0.0 {
                    return 0.0;
                }
                let phase = a.powf(eps_exp) / eps_exp;
                let s = phase.sin();
                -gv * t
                    * ((p - 2.0) * (p - eps_exp) * a.powf(p - eps_exp - 2.0) * s * s
                        + (p + (p - 2.0) * (2.0 * phase).sin()) * a.powf(p - 2.0))
            }
            NonlinearityKind::Linear { c } => -c * t + gv,
            NonlinearityKind::Source => gv,
        }
    }

    /// `F(x, t) = ∫_0^t f(x, τ) dτ`; by quadrature where no closed form is wired in.
    pub fn primitive_at(&self, gv: f64, t: f64) -> Result<f64> {
        match self.kind {
            NonlinearityKind::Example1 { .. } => {
                Ok(quadrature::integrate(|s| self.f_at(gv, s), 0.0, t, PRIMITIVE_QUADRATURE)?.value)
            }
            NonlinearityKind::Example2 { p, eps_exp } => {
                let a = t.abs();
                let s = (a.powf(eps_exp) / eps_exp).sin();
                Ok(-gv * (a.powf(p) + (p - 2.0) * a.powf(p - eps_exp) * s * s))
            }
            NonlinearityKind::Linear { c } => Ok(-0.5 * c * t * t + t * gv),
            NonlinearityKind::Source => Ok(t * gv),
        }
    }

    /// Nodewise `f(x, v(x))`.
    pub fn apply(&self, v: &ScalarField) -> Result<ScalarField> {
        let vals = self
            .g
            .values()
            .iter()
            .zip(v.values())
            .map(|(&gv, &t)| self.f_at(gv, t))
            .collect();
        ScalarField::new(v.grid().clone(), vals)
    }

    /// Largest violation of `|f| <= c1(|t|^α + 1)` over `|t| <= t_box`
    /// (`n` samples per sign, every node value of `g`); `<= 0` means the bound holds.
    pub fn growth_violation(&self, t_box: f64, n: usize) -> f64 {
        let (lo, hi) = (self.g.min(), self.g.max());
        let mut worst = f64::NEG_INFINITY;
        for j in 0..=n {
            let t = t_box * j as f64 / n as f64;
            for tt in [t, -t] {
                let bound = self.meta.c1 * (tt.abs().powf(self.meta.alpha) + 1.0);
                for gv in [lo, hi] {
                    worst = worst.max(self.f_at(gv, tt).abs() - bound);
                }
            }
        }
        worst
    }
}

/// Example 1: `a(t) = θ1 ln(1+|t|) + θ2`, `f = -ct(t^2+1)^{(β-2)/2} + g`.
pub fn catalog_example1(
    p: f64,
    beta: f64,
    c: f64,
    theta1: f64,
    theta2: f64,
    g: ScalarField,
) -> Result<(KirchhoffTerm, Nonlinearity)> {
    if !(beta > 1.0 && beta <= p) {
        return Err(Error::domain(format!(
            "Example 1 needs beta in (1, p], got beta = {beta}, p = {p}"
        )));
    }
    positive("c", c)?;
    require_nonconstant(&g)?;
    let a = KirchhoffTerm::log_growth(theta1, theta2)?;
    let meta = GrowthMetadata {
        alpha: (beta - 1.0).max(1.0),
        c1: c * 2f64.powf(0.5 * (beta - 2.0).max(0.0)) + sup_abs(&g),
        beta,
        sigma: beta,
        nu: None,
        c2: None,
        c3: Some(c / beta),
        h3_prime: false,
    };
    Ok((
        a,
        Nonlinearity {
            kind: NonlinearityKind::Example1 { beta, c },
            g,
            meta,
            c3_override: None,
        },
    ))
}

/// Example 2: `a(t) = δ1|t sin(1/t)| + δ2` (periodic), oscillatory `f`, `F/|t|^β -> -∞`.
pub fn catalog_example2(
    p: f64,
    eps_exp: f64,
    delta1: f64,
    delta2: f64,
    beta: f64,
    g: ScalarField,
) -> Result<(KirchhoffTerm, Nonlinearity)> {
    if !(p > 2.0) {
        return Err(Error::domain(format!("Example 2 needs p > 2, got {p}")));
    }
    if !(eps_exp > 0.0 && eps_exp < p - 2.0) {
        return Err(Error::domain(format!("Example 2 needs 0 < eps < p - 2, got {eps_exp}")));
    }
    if !(beta > 0.0 && beta < p - eps_exp) {
        return Err(Error::domain(format!("Example 2 needs 0 < beta < p - eps, got {beta}")));
    }
    require_nonconstant(&g)?;
    if !(g.min() > 0.0) {
        return Err(Error::domain("Example 2 needs g >= g0 > 0"));
    }
    let a = KirchhoffTerm::oscillatory(delta1, delta2)?;
    let meta = GrowthMetadata {
        alpha: p - 1.0,
        c1: sup_abs(&g) * ((p - 2.0) * (p - eps_exp) + 2.0 * p - 2.0),
        beta,
        sigma: p,
        nu: None,
        c2: None,
        c3: None,
        h3_prime: true,
    };
    Ok((
        a,
        Nonlinearity {
            kind: NonlinearityKind::Example2 { p, eps_exp },
            g,
            meta,
            c3_override: None,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct NonlocalProblem {
    pub p: f64,
    pub a: KirchhoffTerm,
    pub f: Nonlinearity,
    pub eps: f64,
}

impl NonlocalProblem {
    pub fn new(p: f64, a: KirchhoffTerm, f: Nonlinearity, eps: f64) -> Result<Self> {
        if !(p > 2.0 && p.is_finite()) {
            return Err(Error::domain(format!("p must exceed 2, got {p}")));
        }
        if !(eps >= 0.0) {
            return Err(Error::domain(format!("eps must be nonnegative, got {eps}")));
        }
        Ok(Self { p, a, f, eps })
    }

    /// `‖-b(u) Δ_p^eps u + u - f(·, u)‖_{L^2}`.
    pub fn residual_norm(&self, u: &ScalarField) -> Result<f64> {
        let b = b_of(u, &self.a, self.p)?;
        let k = b.powf(1.0 / (self.p - 2.0));
        let rhs = self.f.apply(u)?;
        let local = LocalProblem::new(self.p, k, rhs, self.eps, 1.0)?;
        Ok(plap::residual_norm(u, &local))
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub schedule: Vec<f64>,
    pub theta: f64,
    pub tol_outer: f64,
    pub tol_res: f64,
    pub tol_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// W^{1,p} norm beyond which the iteration is declared divergent.
    pub divergence_ceiling: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            theta: 0.5,
            tol_outer: 1e-6,
            tol_res: 1e-4,
            tol_inner: 1e-9,
            max_outer: 100,
            max_inner: plap::DEFAULT_MAX_ITER,
            divergence_ceiling: 1e8,
        }
    }
}

impl FixedPointOptions {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Validation(
                "homotopy schedule must be nonempty with values in [0, 1]".into(),
            ));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Validation(format!(
                "damping must lie in (0, 1], got {}",
                self.theta
            )));
        }
        for (name, v) in [
            ("tol_outer", self.tol_outer),
            ("tol_res", self.tol_res),
            ("tol_inner", self.tol_inner),
            ("divergence_ceiling", self.divergence_ceiling),
        ] {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Validation("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterStep {
    pub t: f64,
    pub theta: f64,
    pub b: f64,
    pub successive_difference: f64,
    pub inner_iterations: usize,
    pub inner_residual: f64,
    pub inner_converged: bool,
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub u: ScalarField,
    pub steps: Vec<OuterStep>,
    pub t_visited: Vec<f64>,
    pub nonlocal_residual: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl FixedPointReport {
    pub fn outer_iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn successive_differences(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.successive_difference).collect()
    }

    pub fn b_history(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.b).collect()
    }

    /// One row per outer iteration.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        use crate::format_float as ff;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "t",
            "theta",
            "b",
            "successive_difference",
            "inner_iterations",
            "inner_residual",
            "inner_converged",
        ])?;
        for (i, s) in self.steps.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                ff(s.t),
                ff(s.theta),
                ff(s.b),
                ff(s.successive_difference),
                s.inner_iterations.to_string(),
                ff(s.inner_residual),
                s.inner_converged.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<fixed-point history>", e))?;
        Ok(())
    }
}

/// Intermediate homotopy stages only need a rough fixed point to warm-start the next one.
const INTERMEDIATE_TOL_FACTOR: f64 = 1e3;
const MIN_THETA: f64 = 1.0 / 64.0;

/// Damped Picard iteration `v <- (1-θ)v + θ T_t(v)` along the homotopy schedule.
pub fn fixed_point_solve(prob: &NonlocalProblem, opts: &FixedPointOptions) -> Result<FixedPointReport> {
    opts.validate()?;
    let grid = prob.f.g().grid().clone();
    let p = prob.p;
    let mut v = ScalarField::zeros(grid.clone());
    let mut steps = Vec::new();
    let mut t_visited = Vec::new();
    let mut diverged = false;
    let mut last_stage_done = false;
    let n_stages = opts.schedule.len();

    'stages: for (stage, &t) in opts.schedule.iter().enumerate() {
        t_visited.push(t);
        let last = stage + 1 == n_stages;
        let tol = if last {
            opts.tol_outer
        } else {
            INTERMEDIATE_TOL_FACTOR * opts.tol_outer
        };
        let mut theta = opts.theta;
        let mut prev_diff = f64::INFINITY;
        let mut prev_db: Option<f64> = None;
        let mut prev_b: Option<f64> = None;
        loop {
            if steps.len() >= opts.max_outer {
                break 'stages;
            }
            let b = b_of(&v, &prob.a, p)?;
            let rhs = prob.f.apply(&v)?;
            let rep = plap::solve_linearized_with_b(b, t, &rhs, p, prob.eps, opts.tol_inner, opts.max_inner, Some(&v))?;
            let next = v.zip_with(&rep.u, |a, u| (1.0 - theta) * a + theta * u)?;
            let diff = sobolev_norm_pow(&next.sub(&v)?, p).powf(1.0 / p);
            steps.push(OuterStep {
                t,
                theta,
                b,
                successive_difference: diff,
                inner_iterations: rep.iterations,
                inner_residual: rep.final_residual(),
                inner_converged: rep.converged,
            });
            let size = sobolev_norm_pow(&next, p).powf(1.0 / p);
            if !size.is_finite() || size > opts.divergence_ceiling {
                diverged = true;
                v = next;
                break 'stages;
            }
            v = next;
            if diff <= tol {
                if last {
                    last_stage_done = true;
                }
                break;
            }
            // Damping control: b(v) flipping direction or a growing step means cycling.
            let db = prev_b.map(|pb| b - pb);
            let flipped = matches!((prev_db, db), (Some(x), Some(y)) if x * y < 0.0 && y.abs() > 1e-12 * b);
            if (diff > prev_diff || flipped) && theta > MIN_THETA {
                theta *= 0.5;
            }
            prev_diff = diff;
            prev_db = db;
            prev_b = Some(b);
        }
    }

    let nonlocal_residual = prob.residual_norm(&v)?;
    let converged = !diverged && last_stage_done && nonlocal_residual <= opts.tol_res;
    Ok(FixedPointReport {
        u: v,
        steps,
        t_visited,
        nonlocal_residual,
        converged,
        diverged,
    })
}

/// `max u - min u > 10^3 · tol_outer`.
pub fn is_nontrivial(u: &ScalarField, tol_outer: f64) -> bool {
    u.max() - u.min() > 1e3 * tol_outer
}

#[derive(Debug, Clone, Copy)]
pub struct NqSearch {
    pub t_max: f64,
    /// Log-spaced samples of `|t|` in `[1, t_max]`.
    pub n_t: usize,
    /// Quantiles of `g` used as sample points `x`.
    pub n_x: usize,
}

impl Default for NqSearch {
    fn default() -> Self {
        Self {
            t_max: 1e3,
            n_t: 2000,
            n_x: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NqCertificate {
    pub r: f64,
    /// `min -(f t - ν F)/|t|^σ` over the sampled tail `|t| >= R`.
    pub margin: f64,
    /// Bound for `∫ f(x, u) u` over fields with `‖u‖_∞ <= t_max`.
    pub k: f64,
    pub eps: f64,
    pub delta: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NqOutcome {
    Certified(NqCertificate),
    /// `ν c3 >= c2` under a finite-`c3` hypothesis, or `σ < β`.
    PreconditionViolated {
        nu: f64,
        c2: f64,
        c3: f64,
        sigma: f64,
        beta: f64,
    },
    /// Some sampled inequality still fails at `|t| = t_max`.
    NotFound {
        largest_failure: f64,
        t_max: f64,
    },
}

impl NqOutcome {
    pub fn certificate(&self) -> Option<&NqCertificate> {
        match self {
            NqOutcome::Certified(c) => Some(c),
            _ => None,
        }
    }
}

fn g_quantiles(g: &ScalarField, n: usize) -> Vec<f64> {
    let mut vals = g.values().to_vec();
    vals.sort_by(f64::total_cmp);
    let n = n.max(2);
    let mut out: Vec<f64> = (0..n)
        .map(|j| vals[((vals.len() - 1) as f64 * j as f64 / (n - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

/// Locates `R` beyond which the tail inequalities of the NQ energy bound hold.
///
/// Every catalog nonlinearity is affine in `g(x)`, so sampling `x` through
/// quantiles of `g` (including its extremes) covers the supremum over `x`.
pub fn nq_certificate(nl: &Nonlinearity, search: &NqSearch) -> Result<NqOutcome> {
    let m = nl.meta();
    let (nu, c2) = match (m.nu, m.c2) {
        (Some(nu), Some(c2)) => (nu, c2),
        _ => return Err(Error::domain("nonlinearity carries no NQ data; set nu first")),
    };
    if !(search.t_max > 1.0) || search.n_t < 2 || search.n_x < 1 {
        return Err(Error::domain("NQ search needs t_max > 1 and at least two samples"));
    }
    let (sigma, beta) = (m.sigma, m.beta);
    let (eps, delta, c3) = if m.h3_prime {
        (0.5 * c2, 0.5 * c2, 0.0)
    } else {
        let c3 =
            m.c3.ok_or_else(|| Error::domain("finite-growth hypothesis without c3"))?;
        if nu * c3 >= c2 || sigma < beta {
            return Ok(NqOutcome::PreconditionViolated {
                nu,
                c2,
                c3,
                sigma,
                beta,
            });
        }
        ((c2 - nu * c3) / 4.0, (c2 - nu * c3) / (4.0 * nu), c3)
    };
    let xs = g_quantiles(nl.g(), search.n_x);
    let ts: Vec<f64> = (0..search.n_t)
        .map(|j| search.t_max.powf(j as f64 / (search.n_t - 1) as f64))
        .collect();

    let mut largest_failure: Option<usize> = None;
    let mut tail_ratio = vec![f64::INFINITY; ts.len()];
    for (j, &a) in ts.iter().enumerate() {
        let mut ok = true;
        if m.h3_prime {
            ok &= (-c2 + eps) * a.powf(sigma) - nu * delta * a.powf(beta) <= 0.0;
        } else {
            ok &= -(c2 - eps) * a.powf(sigma) + nu * (c3 + delta) * a.powf(beta) <= 0.0;
        }
        for &gv in &xs {
            for t in [a, -a] {
                let f = nl.f_at(gv, t);
                let big_f = nl.primitive_at(gv, t)?;
                let nq = f * t - nu * big_f;
                tail_ratio[j] = tail_ratio[j].min(-nq / a.powf(sigma));
                ok &= nq <= (-c2 + eps) * a.powf(sigma);
                ok &= if m.h3_prime {
                    -big_f >= delta * a.powf(beta)
                } else {
                    big_f <= (c3 + delta) * a.powf(beta)
                };
                ok &= f * t <= 0.0;
            }
        }
        if !ok {
            largest_failure = Some(j);
        }
    }
    let start = match largest_failure {
        None => 0,
        Some(j) if j + 1 < ts.len() => j + 1,
        Some(j) => {
            return Ok(NqOutcome::NotFound {
                largest_failure: ts[j],
                t_max: search.t_max,
            })
        }
    };
    let r = ts[start];
    let margin = tail_ratio[start..].iter().copied().fold(f64::INFINITY, f64::min);

    // sup_{|t| <= R, x} |f(x, t)|
    let n_compact = 4 * search.n_t;
    let mut c_sup: f64 = 0.0;
    for j in 0..=n_compact {
        let t = r * j as f64 / n_compact as f64;
        for &gv in &xs {
            c_sup = c_sup.max(nl.f_at(gv, t).abs()).max(nl.f_at(gv, -t).abs());
        }
    }
    let k = c_sup * r * grid::integrate(&ScalarField::constant(nl.g().grid().clone(), 1.0)?);
    Ok(NqOutcome::Certified(NqCertificate {
        r,
        margin,
        k,
        eps,
        delta,
        t_max: search.t_max,
    }))
}

/// Discrete `∫ f(x, u) u`.
pub fn source_pairing(nl: &Nonlinearity, u: &ScalarField) -> Result<f64> {
    let fu = nl.apply(u)?;
    Ok(grid::integrate(&fu.zip_with(u, |a, b| a * b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn g_field(n: usize) -> ScalarField {
        let grid = GridSpec::unit_square(n).unwrap();
        ScalarField::from_fn(grid, |c| 1.0 + 0.2 * c[0]).unwrap()
    }

    /// Corrected closed form of the Example 1 primitive.
    fn example1_primitive(beta: f64, c: f64, gv: f64, t: f64) -> f64 {
        -c * ((t * t + 1.0).powf(0.5 * beta) - 1.0) / beta + t * gv
    }

    #[test]
    fn b_of_examples() {
        let grid = GridSpec::unit_square(8).unwrap();
        let zero = ScalarField::zeros(grid.clone());
        assert_eq!(b_of(&zero, &KirchhoffTerm::constant(2.0).unwrap(), 3.0).unwrap(), 4.0);
        let v = ScalarField::from_fn(grid, |c| c[0] * c[1]).unwrap();
        let a = KirchhoffTerm::constant(1.7).unwrap();
        assert!((b_of(&v, &a, 3.5).unwrap() - 1.7f64.powf(2.5)).abs() < 1e-14);
        let osc = KirchhoffTerm::oscillatory(0.8, 0.3).unwrap();
        assert!((osc.eval(1.0 / PI) - 0.3).abs() < 1e-15);
        assert_eq!(osc.eval(0.0), 1.1);
    }

    #[test]
    fn kirchhoff_terms_stay_above_a0() {
        let terms = [
            KirchhoffTerm::constant(0.4).unwrap(),
            KirchhoffTerm::log_growth(0.5, 0.2).unwrap(),
            KirchhoffTerm::oscillatory(2.0, 0.1).unwrap(),
            KirchhoffTerm::tabulated(vec![0.0, 1.0, 3.0], vec![1.0, 0.5, 2.0]).unwrap(),
        ];
        for a in &terms {
            for j in 0..200_000 {
                let t = j as f64 * 1e-4;
                assert!(a.eval(t) >= a.a0(), "{a} at {t}");
            }
        }
        assert_eq!(terms[3].a0(), 0.5);
        assert_eq!(terms[3].eval(2.0), 1.25);
        assert_eq!(terms[3].eval(10.0), 2.0);
        assert_eq!(terms[1].eval(0.0), 0.2);
    }

    #[test]
    fn oscillatory_periodic_extension() {
        let a = KirchhoffTerm::oscillatory(1.0, 0.5).unwrap();
        for &s in &[0.1, 0.37, 0.9] {
            assert!((a.eval(s + 3.0) - a.eval(s)).abs() < 1e-12);
        }
        assert_eq!(a.eval(2.0), a.eval(1.0));
    }

    #[test]
    fn example1_catalog_values() {
        let g = g_field(8);
        let (a, f) = catalog_example1(3.0, 3.0, 1.0, 1.0, 0.5, g.clone()).unwrap();
        assert_eq!(a.eval(0.0), 0.5);
        for (i, gv) in g.values().iter().enumerate().take(5) {
            assert_eq!(f.f_at(*gv, 0.0), g.values()[i]);
            assert_eq!(f.primitive_at(*gv, 0.0).unwrap(), 0.0);
        }
        for &beta in &[1.5, 2.0, 3.0] {
            let (_, f) = catalog_example1(3.0, beta, 1.3, 1.0, 1.0, g.clone()).unwrap();
            for j in 0..=200 {
                let t = -10.0 + 0.1 * j as f64;
                let q = f.primitive_at(1.1, t).unwrap();
                let exact = example1_primitive(beta, 1.3, 1.1, t);
                assert!(
                    (q - exact).abs() <= 1e-8 * exact.abs().max(1.0),
                    "beta {beta} t {t}: {q} vs {exact}"
                );
            }
            assert!(f.growth_violation(50.0, 5000) <= 0.0);
        }
        assert!(catalog_example1(3.0, 3.5, 1.0, 1.0, 1.0, g.clone()).is_err());
        assert!(catalog_example1(3.0, 1.0, 1.0, 1.0, 1.0, g.clone()).is_err());
        let flat = ScalarField::constant(g.grid().clone(), 1.0).unwrap();
        assert!(catalog_example1(3.0, 2.0, 1.0, 1.0, 1.0, flat).is_err());
    }

    #[test]
    fn example2_catalog_values() {
        let g = g_field(8);
        let (a, f) = catalog_example2(3.0, 0.5, 1.0, 0.5, 2.0, g.clone()).unwrap();
        assert_eq!(a.eval(0.0), 1.5);
        assert_eq!(f.primitive_at(1.2, 0.0).unwrap(), 0.0);
        for j in 0..=490 {
            let t = 0.1 + 0.01 * j as f64;
            let h = 1e-5 * t;
            let fd = (f.primitive_at(1.2, t + h).unwrap() - f.primitive_at(1.2, t - h).unwrap()) / (2.0 * h);
            let exact = f.f_at(1.2, t);
            assert!(
                (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0),
                "t {t}: {fd} vs {exact}"
            );
        }
        assert!(f.growth_violation(30.0, 5000) <= 0.0);
        assert!(catalog_example2(3.0, 1.0, 1.0, 0.5, 2.0, g.clone()).is_err());
        let neg = g.map(|v| v - 1.1).unwrap();
        assert!(catalog_example2(3.0, 0.5, 1.0, 0.5, 2.0, neg).is_err());
    }

    #[test]
    fn nq_linear_closed_form() {
        let grid = GridSpec::unit_square(8).unwrap();
        let f = Nonlinearity::linear(1.0, ScalarField::zeros(grid))
            .unwrap()
            .with_nu(1.0)
            .unwrap();
        let cert = nq_certificate(
            &f,
            &NqSearch {
                t_max: 100.0,
                n_t: 400,
                n_x: 4,
            },
        )
        .unwrap();
        let cert = cert.certificate().unwrap();
        assert_eq!(cert.r, 1.0);
        assert!((cert.margin - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nq_example1_success_and_violation() {
        let g = g_field(8);
        let (_, f) = catalog_example1(3.0, 3.0, 1.0, 1.0, 1.0, g.clone()).unwrap();
        let ok = f.clone().with_nu(1.2).unwrap();
        let search = NqSearch {
            t_max: 200.0,
            n_t: 600,
            n_x: 8,
        };
        let out = nq_certificate(&ok, &search).unwrap();
        let cert = out.certificate().expect("certificate");
        assert!(cert.r >= 1.0 && cert.margin > 0.0 && cert.k.is_finite());
        let bad = f.with_nu(1.6).unwrap();
        assert!(matches!(
            nq_certificate(&bad, &search).unwrap(),
            NqOutcome::PreconditionViolated { .. }
        ));
    }

    #[test]
    fn nq_bound_holds_on_random_fields() {
        let g = g_field(16);
        let (_, f) = catalog_example1(3.0, 3.0, 1.0, 1.0, 1.0, g.clone()).unwrap();
        let f = f.with_nu(1.2).unwrap();
        let search = NqSearch {
            t_max: 50.0,
            n_t: 500,
            n_x: 8,
        };
        let cert = *nq_certificate(&f, &search).unwrap().certificate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let amp = rng.random_range(0.0..search.t_max);
            let vals = (0..g.grid().len()).map(|_| rng.random_range(-amp..=amp)).collect();
            let u = ScalarField::new(g.grid().clone(), vals).unwrap();
            assert!(source_pairing(&f, &u).unwrap() <= cert.k);
        }
    }

    #[test]
    fn fixed_point_source_term_converges_on_second_iteration() {
        let g = g_field(12);
        let f = Nonlinearity::source(g);
        let prob = NonlocalProblem::new(3.0, KirchhoffTerm::constant(1.5).unwrap(), f, 1e-6).unwrap();
        let opts = FixedPointOptions {
            schedule: vec![1.0],
            theta: 1.0,
            ..Default::default()
        };
        let rep = fixed_point_solve(&prob, &opts).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.outer_iterations(), 2);
        assert!(rep.successive_differences()[1] < 1e-12);
    }

    #[test]
    fn fixed_point_zero_schedule() {
        let g = g_field(12);
        let (a, f) = catalog_example1(3.0, 3.0, 1.0, 1.0, 1.0, g).unwrap();
        let prob = NonlocalProblem::new(3.0, a, f, 1e-6).unwrap();
        let opts = FixedPointOptions {
            schedule: vec![0.0],
            ..Default::default()
        };
        let rep = fixed_point_solve(&prob, &opts).unwrap();
        assert!(rep.u.values().iter().all(|&v| v == 0.0));
        assert_eq!(rep.successive_differences()[0], 0.0);
        assert!(FixedPointOptions {
            theta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FixedPointOptions {
            schedule: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fixed_point_example1_small_grid() {
        let g = g_field(16).map(|v| 4.0 * (v - 1.1)).unwrap();
        let (a, f) = catalog_example1(3.0, 3.0, 1.0, 1.0, 1.0, g).unwrap();
        let prob = NonlocalProblem::new(3.0, a, f, 1e-6).unwrap();
        let rep = fixed_point_solve(&prob, &FixedPointOptions::default()).unwrap();
        assert!(rep.converged, "{:?}", rep.successive_differences());
        assert!(rep.nonlocal_residual <= 1e-4);
        assert!(is_nontrivial(&rep.u, 1e-6));
        assert_eq!(rep.t_visited, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
