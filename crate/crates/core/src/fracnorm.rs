//! Lebesgue/Sobolev norms, Nikolskii seminorms by difference quotients,
//! weighted Hessian energies, Moser rung checks and a-priori bound fits.
//!
//! The Nikolskii seminorm of order `σ ∈ (1, 2)` and integrability `r` is
//!
//! ```text
//! [[u]] = Σ_i sup_h ( ∫_{Ω_|h|} |∂_i u(x+h) - ∂_i u(x)|^r )^{1/r} / |h|^{σ-1}
//! ```
//!
//! where `Ω_t = {x : dist(x, ∂Ω) > t}` and `h` ranges over a finite shift set.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exponents::{
    bound_formula, h_poly, moser_sequence, omega, r_exponent, BoundBranch, BoundFormula, ExponentContext,
    LadderVariant, MoserLadder,
};
use crate::format_float as ff;
use crate::grid::{self, gradient, hessian, GridKind, GridSpec, ScalarField};
use crate::kirchhoff::KirchhoffTerm;

/// `(∫|u|^s)^{1/s}`; `s = f64::INFINITY` gives `max|u|`.
pub fn lebesgue_norm(u: &ScalarField, s: f64) -> Result<f64> {
    if s == f64::INFINITY {
        return Ok(u.values().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    if !(s >= 1.0) {
        return Err(Error::domain(format!("Lebesgue exponent must be >= 1, got {s}")));
    }
    let m = u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Ok(0.0);
    }
    // Factor out the maximum so large exponents do not overflow.
    let sum: f64 = u
        .values()
        .iter()
        .zip(u.grid().weights())
        .map(|(v, w)| (v.abs() / m).powf(s) * w)
        .sum();
    Ok(m * sum.powf(1.0 / s))
}

/// `∫|∇u|^p + ∫|u|^p` with P1 element gradients and lumped mass.
pub fn sobolev_norm_pow(u: &ScalarField, p: f64) -> f64 {
    let lp: f64 = u
        .values()
        .iter()
        .zip(u.grid().weights())
        .map(|(v, w)| v.abs().powf(p) * w)
        .sum();
    u.gradient_power_integral(p) + lp
}

/// `(∫|∇u|^p + ∫|u|^p)^{1/p}`.
pub fn sobolev_norm(u: &ScalarField, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::domain(format!("Sobolev exponent must be >= 1, got {p}")));
    }
    Ok(sobolev_norm_pow(u, p).powf(1.0 / p))
}

/// A shift `h = length · e_axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub axis: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSet {
    pub shifts: Vec<Shift>,
    /// Angular resolution of the polar quadrature used on radial grids.
    pub angles: usize,
}

pub const DEFAULT_SHIFT_FRACTION: f64 = 0.25;
pub const DEFAULT_ANGLES: usize = 256;
pub const DEFAULT_RADIAL_LEVELS: usize = 9;

impl ShiftSet {
    /// Axis-aligned lattice shifts from one cell up to `fraction` of each side.
    pub fn lattice(grid: &GridSpec, fraction: f64) -> Result<Self> {
        if grid.kind() != GridKind::Rectangle {
            return Err(Error::Unsupported("lattice shift sets need a rectangle grid".into()));
        }
        let mut shifts = Vec::new();
        for axis in 0..grid.dim() {
            let max_steps = (fraction * grid.cells()[axis] as f64 + 1e-9).floor() as usize;
            for s in 1..=max_steps {
                shifts.push(Shift {
                    axis,
                    length: s as f64 * grid.spacing(axis),
                });
            }
        }
        Ok(Self { shifts, angles: 0 })
    }

    /// Dyadic shifts `0.5 · 2^{-k}`, `k < levels`, along each coordinate axis of the plane.
    pub fn dyadic(levels: usize, angles: usize) -> Self {
        let mut shifts = Vec::new();
        for axis in 0..2 {
            for k in 0..levels {
                shifts.push(Shift {
                    axis,
                    length: 0.5 * 0.5f64.powi(k as i32),
                });
            }
        }
        Self { shifts, angles }
    }

    /// The default set for a grid: lattice shifts up to a quarter of each side,
    /// or dyadic shifts on radial grids.
    pub fn standard(grid: &GridSpec) -> Result<Self> {
        match grid.kind() {
            GridKind::Rectangle => Self::lattice(grid, DEFAULT_SHIFT_FRACTION),
            GridKind::RadialBall => Ok(Self::dyadic(DEFAULT_RADIAL_LEVELS, DEFAULT_ANGLES)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftRow {
    pub shift: f64,
    pub direction: usize,
    pub component: usize,
    /// `(∫|Δ_h ∂_i u|^r)^{1/r} / |h|^{σ-1}`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NikolskiiEstimate {
    pub sigma: f64,
    pub r: f64,
    pub seminorm: f64,
    /// Maximizing shift for each gradient component.
    pub argmax: Vec<Shift>,
    pub table: Vec<ShiftRow>,
}

impl NikolskiiEstimate {
    /// Shift maximizing the largest component term.
    pub fn argmax_shift(&self) -> Shift {
        let best = self
            .table
            .iter()
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .expect("nonempty table");
        Shift {
            axis: best.direction,
            length: best.shift,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["shift", "direction", "component", "value"])?;
        for row in &self.table {
            w.write_record([
                ff(row.shift),
                row.direction.to_string(),
                row.component.to_string(),
                ff(row.value),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<nikolskii table>", e))?;
        Ok(())
    }
}

fn nikolskii_rectangle(u: &ScalarField, sigma: f64, r: f64, set: &ShiftSet) -> Result<Vec<ShiftRow>> {
    let grid = u.grid();
    let du = gradient(u);
    let mut rows = Vec::new();
    for sh in &set.shifts {
        if sh.axis >= grid.dim() {
            return Err(Error::domain(format!("shift axis {} out of range", sh.axis)));
        }
        let steps_f = sh.length / grid.spacing(sh.axis);
        let steps = steps_f.round();
        if !(steps >= 1.0) || (steps_f - steps).abs() > 1e-9 * steps_f.max(1.0) {
            return Err(Error::domain(format!("shift {} is not a lattice multiple", sh.length)));
        }
        for comp in 0..grid.ncomp() {
            let restr = grid::shift_values(grid, du.component(comp), sh.axis, steps as usize)?;
            let value = restr.difference_power_integral(r).powf(1.0 / r) / restr.shift.powf(sigma - 1.0);
            rows.push(ShiftRow {
                shift: restr.shift,
                direction: sh.axis,
                component: comp,
                value,
            });
        }
    }
    Ok(rows)
}

/// Linear interpolation of nodal radial derivatives, extended by `u'(r_min) ρ / r_min` inside `r_min`.
fn radial_derivative_at(radii: &[f64], du: &[f64], rho: f64) -> f64 {
    if rho <= radii[0] {
        return du[0] * rho / radii[0];
    }
    let j = radii.partition_point(|&x| x < rho).min(radii.len() - 1);
    let (r0, r1) = (radii[j - 1], radii[j]);
    let w = (rho - r0) / (r1 - r0);
    du[j - 1] * (1.0 - w) + du[j] * w
}

/// Polar quadrature on `B(0, 1 - t)` for radial fields in the plane.
fn nikolskii_radial(u: &ScalarField, sigma: f64, r: f64, set: &ShiftSet) -> Result<Vec<ShiftRow>> {
    let grid = u.grid();
    if grid.dim() != 2 {
        return Err(Error::Unsupported(
            "radial Nikolskii seminorms are implemented for N = 2".into(),
        ));
    }
    if set.angles < 8 {
        return Err(Error::domain("polar quadrature needs at least 8 angles"));
    }
    let radii = grid.radii();
    let du = gradient(u);
    let du = du.component(0);
    let m = set.angles;
    let dphi = 2.0 * std::f64::consts::PI / m as f64;
    let trig: Vec<(f64, f64)> = (0..m)
        .map(|j| ((j as f64 + 0.5) * dphi).sin_cos())
        .map(|(s, c)| (c, s))
        .collect();
    let mut rows = Vec::new();
    for sh in &set.shifts {
        if sh.axis > 1 {
            return Err(Error::domain(format!("shift axis {} out of range", sh.axis)));
        }
        let t = sh.length;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::ShiftTooLarge { shift: t, limit: 1.0 });
        }
        let outer = 1.0 - t;
        let mut rho: Vec<f64> = radii.iter().copied().filter(|&x| x < outer).collect();
        rho.push(outer);
        // trapezoid weights for ∫ F(ρ) ρ dρ
        let mut wr = vec![0.0; rho.len()];
        for k in 0..rho.len() - 1 {
            let h = rho[k + 1] - rho[k];
            wr[k] += 0.5 * h * rho[k];
            wr[k + 1] += 0.5 * h * rho[k + 1];
        }
        let mut acc = [0.0f64; 2];
        for (k, &p) in rho.iter().enumerate() {
            let d0 = radial_derivative_at(radii, du, p);
            for &(c, s) in &trig {
                let (x, y) = (p * c, p * s);
                let (xs, ys) = if sh.axis == 0 { (x + t, y) } else { (x, y + t) };
                let q = (xs * xs + ys * ys).sqrt();
                let d1 = radial_derivative_at(radii, du, q);
                // ∇u(z) = u'(|z|) z/|z|
                let (g1x, g1y) = if q > 0.0 {
                    (d1 * xs / q, d1 * ys / q)
                } else {
                    (0.0, 0.0)
                };
                let (g0x, g0y) = (d0 * c, d0 * s);
                let w = wr[k] * dphi;
                acc[0] += w * (g1x - g0x).abs().powf(r);
                acc[1] += w * (g1y - g0y).abs().powf(r);
            }
        }
        for (comp, a) in acc.iter().enumerate() {
            rows.push(ShiftRow {
                shift: t,
                direction: sh.axis,
                component: comp,
                value: a.powf(1.0 / r) / t.powf(sigma - 1.0),
            });
        }
    }
    Ok(rows)
}

pub fn nikolskii_seminorm(u: &ScalarField, sigma: f64, r: f64, set: &ShiftSet) -> Result<NikolskiiEstimate> {
    if !(sigma > 1.0 && sigma < 2.0) {
        return Err(Error::domain(format!("sigma must lie in (1, 2), got {sigma}")));
    }
    if !(r >= 2.0) {
        return Err(Error::domain(format!("r must be >= 2, got {r}")));
    }
    if set.shifts.is_empty() {
        return Err(Error::EmptyShiftSet);
    }
    let table = match u.grid().kind() {
        GridKind::Rectangle => nikolskii_rectangle(u, sigma, r, set)?,
        GridKind::RadialBall => nikolskii_radial(u, sigma, r, set)?,
    };
    let ncomp = table.iter().map(|row| row.component + 1).max().unwrap_or(0);
    let mut seminorm = 0.0;
    let mut argmax = Vec::with_capacity(ncomp);
    for comp in 0..ncomp {
        let best = table
            .iter()
            .filter(|row| row.component == comp)
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .expect("every component has rows");
        seminorm += best.value;
        argmax.push(Shift {
            axis: best.direction,
            length: best.shift,
        });
    }
    Ok(NikolskiiEstimate {
        sigma,
        r,
        seminorm,
        argmax,
        table,
    })
}

/// `‖u‖_{W^{1,r}} + [[u]]_{σ,r}` with the standard shift set.
pub fn nikolskii_norm(u: &ScalarField, sigma: f64, r: f64) -> Result<f64> {
    let set = ShiftSet::standard(u.grid())?;
    Ok(sobolev_norm(u, r)? + nikolskii_seminorm(u, sigma, r, &set)?.seminorm)
}

/// `∫ |∇u|^{r-2} |D²u|_F^2` with measurement stencils and lumped quadrature.
pub fn weighted_hessian_energy(u: &ScalarField, r: f64) -> Result<f64> {
    if !(r > 2.0) {
        return Err(Error::domain(format!("r must exceed 2, got {r}")));
    }
    let du = gradient(u);
    let h = hessian(u);
    Ok(u.grid()
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| w * du.norm_at(i).powf(r - 2.0) * h.frobenius_sq(i))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalemmaCheck {
    /// `[[u]]^r` at `σ = 1 + 2/r`.
    pub lhs: f64,
    /// `∫|∇u|^{r-2}|D²u|^2`.
    pub rhs: f64,
    /// `lhs / rhs`; `None` when the right-hand side vanishes.
    pub min_constant: Option<f64>,
    pub degenerate: bool,
}

/// Relative size below which the weighted energy counts as zero.
const DEGENERATE_RHS: f64 = 1e-20;

pub fn normalemma_check(u: &ScalarField, r: f64) -> Result<NormalemmaCheck> {
    normalemma_check_with(u, r, &ShiftSet::standard(u.grid())?)
}

pub fn normalemma_check_with(u: &ScalarField, r: f64, set: &ShiftSet) -> Result<NormalemmaCheck> {
    let sigma = 1.0 + 2.0 / r;
    let lhs = nikolskii_seminorm(u, sigma, r, set)?.seminorm.powf(r);
    let rhs = weighted_hessian_energy(u, r)?;
    let scale = 1.0 + u.gradient_power_integral(r);
    let degenerate = rhs <= DEGENERATE_RHS * scale;
    Ok(NormalemmaCheck {
        lhs,
        rhs,
        min_constant: if degenerate { None } else { Some(lhs / rhs) },
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderCheck {
    pub rung: usize,
    pub k: f64,
    /// Lebesgue exponent of the left-hand side, `p*(k+1)`.
    pub exponent: f64,
    pub lhs: f64,
    pub rhs_parts: Vec<f64>,
    pub min_constant: f64,
}

pub const LADDER_EXPONENT_CAP: f64 = 64.0;

/// Rung inequalities of the Moser iteration on `u`: `u+` against the
/// superlinear ladder, `u-` against the sublinear one. Rungs whose exponent
/// exceeds `exponent_cap` are skipped.
pub fn moser_ladder_check(
    u: &ScalarField,
    ladder: &MoserLadder,
    ctx: &ExponentContext,
    exponent_cap: f64,
) -> Result<Vec<LadderCheck>> {
    let p_star = ctx
        .p_star()
        .finite()
        .ok_or_else(|| Error::domain("Moser ladders need a finite Sobolev exponent"))?;
    let p = ctx.p();
    let alpha = ladder.alpha;
    let (plus, minus) = grid::truncate_parts(u, f64::INFINITY)?;
    let mut out = Vec::new();
    for (n, &k) in ladder.k.iter().enumerate() {
        let exponent = p_star * (k + 1.0);
        if exponent > exponent_cap {
            break;
        }
        let (lhs, rhs_parts) = match ladder.variant {
            LadderVariant::Superlinear => {
                let e = alpha + k * p + 1.0;
                let m = lebesgue_norm(&plus, e)?;
                (
                    lebesgue_norm(&plus, exponent)?,
                    vec![1.0, m, m.powf(e / (p * (k + 1.0)))],
                )
            }
            LadderVariant::Sublinear => {
                let m = lebesgue_norm(&minus, (k + 1.0) * p)?;
                (lebesgue_norm(&minus, exponent)?, vec![1.0, m])
            }
        };
        let total: f64 = rhs_parts.iter().sum();
        out.push(LadderCheck {
            rung: n,
            k,
            exponent,
            lhs,
            rhs_parts,
            min_constant: lhs / total,
        });
    }
    Ok(out)
}

/// Rows `(rung, exponent, lhs, rhs1..3, min_c)`; `rhs3` is empty for sublinear rungs.
pub fn write_ladder_csv<W: Write>(checks: &[LadderCheck], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rung", "exponent", "lhs", "rhs1", "rhs2", "rhs3", "min_c"])?;
    for c in checks {
        let part = |i: usize| c.rhs_parts.get(i).map(|v| ff(*v)).unwrap_or_default();
        w.write_record([
            c.rung.to_string(),
            ff(c.exponent),
            ff(c.lhs),
            part(0),
            part(1),
            part(2),
            ff(c.min_constant),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<ladder table>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriCheck {
    pub lhs: f64,
    pub rhs_shape: f64,
    pub fitted_c: f64,
    pub omega: f64,
    pub r_s: f64,
}

/// Fits the constant of
/// `‖u‖_{N^{1+2/r_s, r_s}} <= C(1 + ‖g‖_s + a(‖u‖^p_{W^{1,p}})^{ω_{p,s}} ‖g‖_s^{s/r_s})`.
pub fn apriori_check(u: &ScalarField, g: &ScalarField, a: &KirchhoffTerm, p: f64, s: f64) -> Result<AprioriCheck> {
    if !(s > 2.0) {
        return Err(Error::domain(format!("s must exceed 2, got {s}")));
    }
    let r_s = r_exponent(p, s)?;
    let w = omega(p, s)?;
    let lhs = nikolskii_norm(u, 1.0 + 2.0 / r_s, r_s)?;
    let gs = lebesgue_norm(g, s)?;
    let rhs_shape = 1.0 + gs + a.eval(sobolev_norm_pow(u, p)).powf(w) * gs.powf(s / r_s);
    Ok(AprioriCheck {
        lhs,
        rhs_shape,
        fitted_c: lhs / rhs_shape,
        omega: w,
        r_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinftyCheck {
    pub branch: BoundBranch,
    pub lhs: f64,
    pub rhs: f64,
    pub fitted_c: f64,
    pub formula: BoundFormula,
}

/// Fits the constant of the L∞ bound selected by `(p, N, α)`.
pub fn linfty_bound_check(
    u: &ScalarField,
    a: &KirchhoffTerm,
    ctx: &ExponentContext,
    alpha: f64,
    big_r: f64,
    s: f64,
) -> Result<LinftyCheck> {
    let p = ctx.p();
    let branch = BoundBranch::select(ctx, alpha)?;
    let formula = bound_formula(ctx, alpha, big_r, s)?;
    let lhs = lebesgue_norm(u, f64::INFINITY)?;
    let q_over_r = formula.q / formula.r_big_r;
    let rhs = match branch {
        BoundBranch::Supercritical => {
            let w = sobolev_norm(u, p)?;
            1.0 + w.powf(alpha) + w.powf(q_over_r)
        }
        BoundBranch::Superlinear | BoundBranch::Sublinear => {
            let ps = ctx.p_star().finite().expect("finite for p < N");
            let ak = a.eval(sobolev_norm_pow(u, p)).powf(formula.omega_p_big_r);
            let base = lebesgue_norm(u, ps)?;
            let x = if branch == BoundBranch::Superlinear {
                let ladder = moser_sequence(ctx, LadderVariant::Superlinear, alpha, 0)?;
                h_poly(ctx, ladder.n_for_target(formula.q)?, base)?
            } else {
                base
            };
            1.0 + ak + x.powf(alpha) + ak * x.powf(q_over_r)
        }
    };
    Ok(LinftyCheck {
        branch,
        lhs,
        rhs,
        fitted_c: lhs / rhs,
        formula,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffModel {
    /// `E(ε) ≈ c ε^slope`.
    Power,
    /// `E(ε) ≈ a + b ln(1/ε)`.
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutoffFit {
    /// Least-squares slope of `ln E` against `ln ε`.
    pub slope: f64,
    /// Coefficient `b` of the logarithmic model.
    pub log_coefficient: f64,
    pub power_rss: f64,
    pub log_rss: f64,
    pub better: CutoffModel,
    pub samples: Vec<(f64, f64)>,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// `∫_{ε < |x| < 1} |D²u|_F^r` for a radial field: trapezoid over whole
/// segments above `ε` plus the partial segment containing it.
pub fn radial_cutoff_integral(u: &ScalarField, r: f64, eps: f64) -> Result<f64> {
    let grid = u.grid();
    if grid.kind() != GridKind::RadialBall {
        return Err(Error::Unsupported("cutoff integrals need a radial grid".into()));
    }
    let radii = grid.radii();
    if !(eps >= radii[0] && eps < 1.0) {
        return Err(Error::domain(format!("cutoff {eps} outside [r_min, 1)")));
    }
    let h = hessian(u);
    let omega = grid::sphere_measure(grid.dim());
    let m = grid.dim() as i32 - 1;
    let q: Vec<f64> = (0..radii.len())
        .map(|i| omega * radii[i].powi(m) * h.frobenius_sq(i).powf(0.5 * r))
        .collect();
    let j = radii.partition_point(|&x| x <= eps);
    let mut total = 0.0;
    for k in j..radii.len() - 1 {
        total += 0.5 * (radii[k + 1] - radii[k]) * (q[k] + q[k + 1]);
    }
    if j > 0 && j < radii.len() {
        let (r0, r1) = (radii[j - 1], radii[j]);
        let w = (eps - r0) / (r1 - r0);
        let q_eps = q[j - 1] * (1.0 - w) + q[j] * w;
        total += 0.5 * (r1 - eps) * (q_eps + q[j]);
    }
    Ok(total)
}

/// Fits the growth of `E(ε) = ∫_{|x|>ε}|D²u|^r` as `ε` decreases, with both
/// a power model and a logarithmic model.
pub fn cutoff_divergence_rate(u: &ScalarField, r: f64, cutoffs: &[f64]) -> Result<CutoffFit> {
    fit_cutoff_samples(
        cutoffs
            .iter()
            .map(|&e| Ok((e, radial_cutoff_integral(u, r, e)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Same fit for an arbitrary sampled `E(ε)` (e.g. from closed-form quadrature).
pub fn fit_cutoff_samples(samples: Vec<(f64, f64)>) -> Result<CutoffFit> {
    if samples.len() < 3 {
        return Err(Error::domain("cutoff fit needs at least three cutoffs"));
    }
    if samples.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::domain("cutoffs must be strictly decreasing"));
    }
    if samples.iter().any(|&(_, e)| !(e > 0.0)) {
        return Err(Error::domain("cutoff integrals must be positive to fit a power law"));
    }
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (c, slope) = least_squares(&lx, &ly);
    let neg: Vec<f64> = lx.iter().map(|x| -x).collect();
    let (a, b) = least_squares(&neg, &ys);
    let power_rss = samples
        .iter()
        .zip(&lx)
        .map(|(s, x)| ((c + slope * x).exp() - s.1) / s.1)
        .map(|e| e * e)
        .sum();
    let log_rss = samples
        .iter()
        .zip(&neg)
        .map(|(s, x)| (a + b * x - s.1) / s.1)
        .map(|e| e * e)
        .sum();
    Ok(CutoffFit {
        slope,
        log_coefficient: b,
        power_rss,
        log_rss,
        better: if log_rss < power_rss {
            CutoffModel::Log
        } else {
            CutoffModel::Power
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::oracle::{analytic_energies, RadialProfile};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn half_sq(n: usize) -> ScalarField {
        ScalarField::from_fn(GridSpec::unit_square(n).unwrap(), |c| 0.5 * (c[0] * c[0] + c[1] * c[1])).unwrap()
    }

    #[test]
    fn lebesgue_examples() {
        let g = GridSpec::unit_square(16).unwrap();
        let two = ScalarField::constant(g, 2.0).unwrap();
        assert!((lebesgue_norm(&two, 3.0).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(lebesgue_norm(&two, f64::INFINITY).unwrap(), 2.0);
        let rg = GridSpec::radial(2, 1024, 1e-4).unwrap();
        let r = ScalarField::from_fn(rg, |c| c[0]).unwrap();
        assert!((lebesgue_norm(&r, 2.0).unwrap() - (PI / 2.0).sqrt()).abs() < 1e-5);
        assert!(lebesgue_norm(&r, 0.5).is_err());
    }

    #[test]
    fn sobolev_examples() {
        let g = GridSpec::unit_square(64).unwrap();
        let c = ScalarField::constant(g.clone(), 3.0).unwrap();
        assert!((sobolev_norm(&c, 3.0).unwrap() - 3.0).abs() < 1e-13);
        let x = ScalarField::from_fn(g.clone(), |c| c[0]).unwrap();
        assert!((sobolev_norm(&x, 2.0).unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-4);
        assert_eq!(sobolev_norm(&ScalarField::zeros(g), 3.0).unwrap(), 0.0);
    }

    #[test]
    fn nikolskii_affine_and_quadratic() {
        let u = ScalarField::from_fn(GridSpec::unit_square(64).unwrap(), |c| 2.0 * c[0] - 3.0 * c[1] + 1.0).unwrap();
        let set = ShiftSet::standard(u.grid()).unwrap();
        assert!(nikolskii_seminorm(&u, 1.5, 4.0, &set).unwrap().seminorm < 1e-12);

        let u = half_sq(64);
        let est = nikolskii_seminorm(&u, 1.5, 4.0, &set).unwrap();
        let per_axis = 0.5 * 0.25f64.powf(0.25);
        assert!((est.seminorm - 2.0 * per_axis).abs() < 1e-12, "{}", est.seminorm);
        for s in &est.argmax {
            assert!((s.length - 0.25).abs() < 1e-12);
        }
        assert!(nikolskii_seminorm(
            &u,
            1.5,
            4.0,
            &ShiftSet {
                shifts: vec![],
                angles: 0
            }
        )
        .is_err());
        assert!(nikolskii_seminorm(&u, 2.5, 4.0, &set).is_err());
    }

    #[test]
    fn radial_nikolskii_vanishes_on_constants() {
        let g = GridSpec::radial(2, 128, 1e-4).unwrap();
        let c = ScalarField::constant(g, 2.0).unwrap();
        let est = nikolskii_seminorm(&c, 1.5, 4.0, &ShiftSet::dyadic(4, 64)).unwrap();
        assert!(est.seminorm < 1e-10);
    }

    #[test]
    fn radial_nikolskii_matches_rectangle_for_quadratic() {
        // u = |x|^2/2 has ∇u = x: each component difference is |h| on the shifted axis.
        let g = GridSpec::radial(2, 512, 1e-4).unwrap();
        let u = ScalarField::from_fn(g, |c| 0.5 * c[0] * c[0]).unwrap();
        let set = ShiftSet {
            shifts: vec![Shift { axis: 0, length: 0.25 }],
            angles: 256,
        };
        let est = nikolskii_seminorm(&u, 1.5, 4.0, &set).unwrap();
        let area = PI * 0.75 * 0.75;
        let expected = 0.25 * area.powf(0.25) / 0.25f64.sqrt();
        let row = est.table.iter().find(|r| r.component == 0).unwrap();
        assert!(
            (row.value - expected).abs() < 1e-3 * expected,
            "{} vs {expected}",
            row.value
        );
    }

    #[test]
    fn weighted_energy_examples() {
        let g = GridSpec::unit_square(64).unwrap();
        let lin = ScalarField::from_fn(g, |c| c[0] + 2.0 * c[1]).unwrap();
        assert!(weighted_hessian_energy(&lin, 4.0).unwrap() < 1e-18);
        let w = weighted_hessian_energy(&half_sq(64), 4.0).unwrap();
        assert!((w - 4.0 / 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn weighted_energy_matches_oracle_on_profile() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let exact = analytic_energies(&pr, 4.0, 1e-10).unwrap().weighted_hessian;
        let g = GridSpec::radial(2, 2048, 1e-4).unwrap();
        let disc = weighted_hessian_energy(&pr.sample(g).unwrap(), 4.0).unwrap();
        assert!((disc - exact).abs() < 0.01 * exact, "{disc} vs {exact}");
    }

    #[test]
    fn normalemma_degenerate_for_affine() {
        let g = GridSpec::unit_square(32).unwrap();
        let lin = ScalarField::from_fn(g, |c| c[0] - c[1]).unwrap();
        let chk = normalemma_check(&lin, 4.0).unwrap();
        assert!(chk.degenerate && chk.min_constant.is_none());
        let chk = normalemma_check(&half_sq(32), 4.0).unwrap();
        assert!(!chk.degenerate && chk.min_constant.unwrap().is_finite());
    }

    #[test]
    fn ladder_checks_closed_forms() {
        let ctx = ExponentContext::new(3.0, 6).unwrap();
        let ladder = moser_sequence(&ctx, LadderVariant::Superlinear, 2.0, 4).unwrap();
        let g = GridSpec::unit_square(16).unwrap();
        let one = ScalarField::constant(g.clone(), 1.0).unwrap();
        let checks = moser_ladder_check(&one, &ladder, &ctx, LADDER_EXPONENT_CAP).unwrap();
        assert_eq!(checks.len(), 3);
        assert_eq!(
            checks.iter().map(|c| c.exponent).collect::<Vec<_>>(),
            vec![12.0, 24.0, 48.0]
        );
        for c in &checks {
            assert!((c.min_constant - 1.0 / 3.0).abs() < 1e-14);
        }
        let zero = ScalarField::zeros(g);
        for c in moser_ladder_check(&zero, &ladder, &ctx, LADDER_EXPONENT_CAP).unwrap() {
            assert_eq!(c.min_constant, 0.0);
        }
    }

    #[test]
    fn apriori_zero_and_omega_free_shape() {
        let g = GridSpec::unit_square(16).unwrap();
        let zero = ScalarField::zeros(g.clone());
        let a = KirchhoffTerm::log_growth(1.0, 1.0).unwrap();
        let chk = apriori_check(&zero, &zero, &a, 3.0, 3.0).unwrap();
        assert_eq!(chk.lhs, 0.0);
        assert_eq!(chk.fitted_c, 0.0);
        let gg = ScalarField::from_fn(g.clone(), |c| 1.0 + c[0]).unwrap();
        let chk = apriori_check(&gg, &gg, &a, 3.0, 3.0).unwrap();
        let gs = lebesgue_norm(&gg, 3.0).unwrap();
        assert_eq!(chk.omega, 0.0);
        assert!((chk.rhs_shape - (1.0 + gs + gs.powf(3.0 / 5.0))).abs() < 1e-14);
    }

    #[test]
    fn linfty_branches() {
        let g = GridSpec::unit_square(16).unwrap();
        let a = KirchhoffTerm::constant(1.0).unwrap();
        let zero = ScalarField::zeros(g.clone());
        let ctx = ExponentContext::new(3.0, 4).unwrap();
        assert_eq!(
            linfty_bound_check(&zero, &a, &ctx, 1.5, 5.0, 3.0).unwrap().fitted_c,
            0.0
        );
        let u = ScalarField::from_fn(g, |c| c[0] - 0.3 * c[1]).unwrap();
        let chk = linfty_bound_check(&u, &a, &ctx, 1.5, 5.0, 3.0).unwrap();
        assert_eq!(chk.branch, BoundBranch::Sublinear);
        let n12 = lebesgue_norm(&u, 12.0).unwrap();
        let expected = 2.0 + n12.powf(1.5) + n12.powf(7.5 / 7.0);
        assert!((chk.rhs - expected).abs() < 1e-14);
        let sup = linfty_bound_check(&u, &a, &ExponentContext::new(3.0, 2).unwrap(), 2.0, 3.0, 3.0).unwrap();
        assert_eq!(sup.branch, BoundBranch::Supercritical);
        let spl = linfty_bound_check(&u, &a, &ctx, 8.0, 5.0, 3.0).unwrap();
        assert_eq!(spl.branch, BoundBranch::Superlinear);
        assert!(spl.fitted_c.is_finite() && spl.fitted_c > 0.0);
    }

    #[test]
    fn cutoff_rates() {
        let g = GridSpec::radial(2, 1024, 1e-4).unwrap();
        let quad = ScalarField::from_fn(g.clone(), |c| 0.5 * c[0] * c[0]).unwrap();
        let eps: Vec<f64> = (0..6).map(|k| 5e-3 * 0.5f64.powi(k)).collect();
        let fit = cutoff_divergence_rate(&quad, 4.0, &eps).unwrap();
        assert!(fit.slope.abs() < 1e-3, "{}", fit.slope);
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let fit = cutoff_divergence_rate(&pr.sample(g).unwrap(), 4.0, &eps).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.15, "{}", fit.slope);
        assert_eq!(fit.better, CutoffModel::Power);
        assert!(cutoff_divergence_rate(&quad, 4.0, &[1e-3, 2e-3, 1e-4]).is_err());
    }

    #[test]
    fn cutoff_log_model_at_endpoint() {
        let pr = RadialProfile::new(1.5, 2, 3.0).unwrap();
        let en = analytic_energies(&pr, 4.0, 1e-10).unwrap();
        let samples = (0..6)
            .map(|k| {
                let e = 1e-2 * 0.1f64.powi(k);
                (e, en.w2r_cutoff(e).unwrap())
            })
            .collect();
        assert_eq!(fit_cutoff_samples(samples).unwrap().better, CutoffModel::Log);
    }

    proptest! {
        #[test]
        fn seminorm_is_absolutely_homogeneous(c in -5.0f64..5.0, a in 0.5f64..3.0) {
            let g = GridSpec::unit_square(16).unwrap();
            let u = ScalarField::from_fn(g.clone(), |x| (a * x[0]).sin() * (x[1] * x[1])).unwrap();
            let set = ShiftSet::standard(&g).unwrap();
            let base = nikolskii_seminorm(&u, 1.4, 3.0, &set).unwrap().seminorm;
            let scaled = nikolskii_seminorm(&u.scale(c).unwrap(), 1.4, 3.0, &set).unwrap().seminorm;
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn weighted_energy_nonnegative(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let g = GridSpec::unit_square(12).unwrap();
            let u = ScalarField::from_fn(g, |x| a * x[0] * x[1] + b * (3.0 * x[0]).cos()).unwrap();
            prop_assert!(weighted_hessian_energy(&u, 4.0).unwrap() >= 0.0);
        }
    }
}
