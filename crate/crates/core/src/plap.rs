//! The local problem `-k^{p-2} Δ_p u + u = g` with Neumann conditions.
//!
//! Solved by minimizing the convex energy
//! `J(u) = k^{p-2}/p ∫(|∇u|^2 + eps^2)^{p/2} + ½∫u^2 - ∫g u`
//! with damped Newton steps and an Armijo backtracking line search.

use crate::error::{Error, Result};
use crate::grid::{self, flux_coefficient, GridSpec, ScalarField};
use crate::kirchhoff::{b_of, KirchhoffTerm};
use crate::linalg::BandedSym;

pub const DEFAULT_MAX_ITER: usize = 200;
const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1.0 / (1u64 << 40) as f64;

#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub p: f64,
    /// The flux is multiplied by `k^{p-2}`.
    pub k: f64,
    pub g: ScalarField,
    pub eps: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl LocalProblem {
    pub fn new(p: f64, k: f64, g: ScalarField, eps: f64, tol: f64) -> Result<Self> {
        if !(p > 2.0 && p.is_finite()) {
            return Err(Error::domain(format!("p must exceed 2, got {p}")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::domain(format!("k must be positive, got {k}")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::domain(format!("eps must be nonnegative, got {eps}")));
        }
        if !(tol > 0.0) {
            return Err(Error::domain(format!("tol must be positive, got {tol}")));
        }
        Ok(Self {
            p,
            k,
            g,
            eps,
            tol,
            max_iter: DEFAULT_MAX_ITER,
        })
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    fn flux_weight(&self) -> f64 {
        self.k.powf(self.p - 2.0)
    }
}

/// Default regularization `1e-6 · diam(Ω)`.
pub fn default_eps(grid: &GridSpec) -> f64 {
    1e-6 * grid.diameter()
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u: ScalarField,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub energies: Vec<f64>,
    pub converged: bool,
    /// Scaling coefficient of the solved problem (1 for a direct solve at `k = 1`).
    pub k: f64,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }

    /// Rows `(iteration, residual, energy)`.
    pub fn write_history_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "residual", "energy"])?;
        for (i, (r, e)) in self.residuals.iter().zip(&self.energies).enumerate() {
            w.write_record([i.to_string(), crate::format_float(*r), crate::format_float(*e)])?;
        }
        w.flush().map_err(|e| Error::io("<history>", e))?;
        Ok(())
    }
}

fn energy_values(grid: &GridSpec, u: &[f64], prob: &LocalProblem) -> f64 {
    let flux = grid::flux_energy(grid, u, prob.p, prob.eps);
    let local: f64 = u
        .iter()
        .zip(prob.g.values())
        .zip(grid.weights())
        .map(|((&v, &g), &m)| m * (0.5 * v * v - g * v))
        .sum();
    prob.flux_weight() * flux + local
}

pub fn energy(u: &ScalarField, prob: &LocalProblem) -> f64 {
    energy_values(u.grid(), u.values(), prob)
}

/// `∂J/∂u_i`; dividing by the lumped mass gives the strong-form residual.
fn energy_gradient(grid: &GridSpec, u: &[f64], prob: &LocalProblem) -> Vec<f64> {
    let mut g = grid::flux_energy_gradient(grid, u, prob.p, prob.eps);
    let kw = prob.flux_weight();
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = kw * *gi + grid.weights()[i] * (u[i] - prob.g.values()[i]);
    }
    g
}

fn residual_norm_from_gradient(grid: &GridSpec, grad: &[f64]) -> f64 {
    grad.iter()
        .zip(grid.weights())
        .map(|(g, m)| g * g / m)
        .sum::<f64>()
        .sqrt()
}

/// Strong-form residual `-k^{p-2} Δ_p^eps u + u - g` at the nodes.
pub fn residual(u: &ScalarField, prob: &LocalProblem) -> Result<ScalarField> {
    let grid = u.grid();
    let grad = energy_gradient(grid, u.values(), prob);
    ScalarField::new(
        grid.clone(),
        grad.iter().zip(grid.weights()).map(|(g, m)| g / m).collect(),
    )
}

/// `‖-k^{p-2} Δ_p^eps u + u - g‖_{L^2}`.
pub fn residual_norm(u: &ScalarField, prob: &LocalProblem) -> f64 {
    residual_norm_from_gradient(u.grid(), &energy_gradient(u.grid(), u.values(), prob))
}

fn assemble_hessian(grid: &GridSpec, u: &[f64], prob: &LocalProblem) -> BandedSym {
    let mut h = BandedSym::zeros(grid.len(), grid.bandwidth());
    let kw = prob.flux_weight();
    let (p, eps) = (prob.p, prob.eps);
    for e in grid.elements() {
        let g = e.grad(u);
        let s = g[0] * g[0] + g[1] * g[1] + eps * eps;
        if s == 0.0 {
            continue;
        }
        let c = flux_coefficient(g, p, eps);
        let d = (p - 2.0) * c / s;
        let w = kw * e.weight;
        for a in 0..e.ncomp {
            for b in 0..e.ncomp {
                let hab = w * (if a == b { c } else { 0.0 } + d * g[a] * g[b]);
                if hab == 0.0 {
                    continue;
                }
                let (a0, a1, sa) = e.diff[a];
                let (b0, b1, sb) = e.diff[b];
                let v = hab * sa * sb;
                // v * B_a B_b^T with B_a = e_{a1} - e_{a0}; the sum over (a, b)
                // is symmetric, so its lower triangle is enough.
                for (ia, sga) in [(a1, 1.0), (a0, -1.0)] {
                    for (ib, sgb) in [(b1, 1.0), (b0, -1.0)] {
                        if ia >= ib {
                            h.add(ia, ib, v * sga * sgb);
                        }
                    }
                }
            }
        }
    }
    for (i, m) in grid.weights().iter().enumerate() {
        h.add(i, i, *m);
    }
    h
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} became non-finite")));
    }
    Ok(())
}

/// Minimizes the local energy starting from `initial` (default: `g`).
pub fn solve_scaled(prob: &LocalProblem, initial: Option<&ScalarField>) -> Result<SolveReport> {
    let grid = prob.g.grid().clone();
    let mut u: Vec<f64> = match initial {
        Some(u0) => {
            if u0.values().len() != grid.len() {
                return Err(Error::domain("initial guess lives on a different grid"));
            }
            u0.values().to_vec()
        }
        None => prob.g.values().to_vec(),
    };
    check_finite(&u, "initial guess")?;
    check_finite(prob.g.values(), "right-hand side")?;

    let mut grad = energy_gradient(&grid, &u, prob);
    let mut res = residual_norm_from_gradient(&grid, &grad);
    let mut en = energy_values(&grid, &u, prob);
    let mut residuals = vec![res];
    let mut energies = vec![en];
    let mut converged = res <= prob.tol;
    let mut iterations = 0;

    while !converged && iterations < prob.max_iter {
        let hess = assemble_hessian(&grid, &u, prob);
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let dir = hess.cholesky()?.solve(&rhs);
        check_finite(&dir, "Newton direction")?;
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(slope < 0.0) {
            break;
        }
        let resolution = 64.0 * f64::EPSILON * (en.abs() + energies[0].abs()).max(f64::MIN_POSITIVE);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= MIN_STEP {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            check_finite(&trial, "iterate")?;
            let e_trial = energy_values(&grid, &trial, prob);
            if e_trial <= en + ARMIJO_C1 * step * slope {
                accepted = Some((trial, e_trial));
                break;
            }
            if -slope * step < resolution {
                // Energy differences are below floating-point resolution; fall
                // back to the residual as the merit function.
                let g_trial = energy_gradient(&grid, &trial, prob);
                if residual_norm_from_gradient(&grid, &g_trial) < res && e_trial <= en + resolution {
                    accepted = Some((trial, e_trial));
                }
                break;
            }
            step *= 0.5;
        }
        let Some((trial, e_trial)) = accepted else { break };
        u = trial;
        en = e_trial;
        grad = energy_gradient(&grid, &u, prob);
        res = residual_norm_from_gradient(&grid, &grad);
        if !res.is_finite() || !en.is_finite() {
            return Err(Error::NonFinite("residual or energy".into()));
        }
        iterations += 1;
        residuals.push(res);
        energies.push(en);
        converged = res <= prob.tol;
    }

    Ok(SolveReport {
        u: ScalarField::new(grid, u)?,
        iterations,
        residuals,
        energies,
        converged,
        k: prob.k,
    })
}

/// Solves `-b Δ_p u + u = t·g` through the scaled problem
/// `-Δ_p û + û = t·k·g`, `k = b^{1/(p-2)}`, `u = û/k`.
///
/// Residuals in the report refer to the unscaled equation; energies are the
/// unscaled energy with flux weight `b`.
pub fn solve_linearized_with_b(
    b: f64,
    t: f64,
    g: &ScalarField,
    p: f64,
    eps: f64,
    tol: f64,
    max_iter: usize,
    initial: Option<&ScalarField>,
) -> Result<SolveReport> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("homotopy parameter must lie in [0, 1], got {t}")));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::domain(format!("b must be positive, got {b}")));
    }
    let k = b.powf(1.0 / (p - 2.0));
    let g_hat = g.scale(t * k)?;
    let scaled = LocalProblem::new(p, 1.0, g_hat, k * eps, tol * k)?.with_max_iter(max_iter);
    let init_hat = match initial {
        Some(u0) => Some(u0.scale(k)?),
        None => None,
    };
    let rep = solve_scaled(&scaled, init_hat.as_ref())?;
    Ok(SolveReport {
        u: rep.u.scale(1.0 / k)?,
        iterations: rep.iterations,
        residuals: rep.residuals.iter().map(|r| r / k).collect(),
        energies: rep.energies.iter().map(|e| e / (k * k)).collect(),
        converged: rep.converged,
        k,
    })
}

/// The linearized Picard map: `b = b(v)`, then [`solve_linearized_with_b`].
pub fn solve_linearized(
    v: &ScalarField,
    t: f64,
    g: &ScalarField,
    a: &KirchhoffTerm,
    p: f64,
    eps: f64,
    tol: f64,
) -> Result<SolveReport> {
    let b = b_of(v, a, p)?;
    solve_linearized_with_b(b, t, g, p, eps, tol, DEFAULT_MAX_ITER, None)
}
