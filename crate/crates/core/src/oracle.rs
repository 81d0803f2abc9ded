//! Closed-form radial profile `u(x) = |x|^α - (α/2)|x|^2` on `B(0,1)` and
//! its derived quantities.
//!
//! The profile satisfies `u'(1) = 0`, has a Hessian blowing up like
//! `|x|^{α-2}` at the origin, and for `α` in the admissible range the
//! weighted energy `∫|∇u|^{r-2}|D²u|^2` stays finite while `∫|D²u|^r` does not.

use crate::error::{Error, Result};
use crate::grid::{sphere_measure, GridKind, ScalarField};
use crate::quadrature::{self, QuadratureOptions};
use std::sync::Arc;

use crate::grid::GridSpec;

/// `(p' - N/(2(p-1)), 2 - N/(2(p-1))]`, open at the left end.
pub fn admissible_alpha_range(n: usize, p: f64) -> Result<(f64, f64)> {
    if !(p > 2.0) || n == 0 {
        return Err(Error::domain(format!(
            "admissible range needs p > 2 and N >= 1 (p = {p}, N = {n})"
        )));
    }
    let shift = n as f64 / (2.0 * (p - 1.0));
    let low = p / (p - 1.0) - shift;
    let high = 2.0 - shift;
    assert!(low < high, "p' < 2 for p > 2");
    Ok((low, high))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialProfile {
    pub alpha: f64,
    pub n: usize,
    pub p: f64,
}

impl RadialProfile {
    pub fn new(alpha: f64, n: usize, p: f64) -> Result<Self> {
        let (low, high) = admissible_alpha_range(n, p)?;
        if !(alpha > low && alpha <= high) {
            return Err(Error::domain(format!(
                "alpha = {alpha} outside the admissible range ({low}, {high}]"
            )));
        }
        Ok(Self { alpha, n, p })
    }

    pub fn u(&self, r: f64) -> f64 {
        r.powf(self.alpha) - 0.5 * self.alpha * r * r
    }

    pub fn du(&self, r: f64) -> f64 {
        self.alpha * (r.powf(self.alpha - 1.0) - r)
    }

    pub fn d2u(&self, r: f64) -> f64 {
        self.alpha * ((self.alpha - 1.0) * r.powf(self.alpha - 2.0) - 1.0)
    }

    /// `|D²u|_F^2 = u''^2 + (N-1)(u'/r)^2`.
    pub fn hessian_frobenius_sq(&self, r: f64) -> f64 {
        let t = self.du(r) / r;
        self.d2u(r).powi(2) + (self.n as f64 - 1.0) * t * t
    }

    /// `Δ_p u = (N-1)/r |u'|^{p-2}u' + (p-1)|u'|^{p-2}u''`.
    pub fn p_laplacian(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::domain(format!("the profile is singular at r = {r}")));
        }
        let d = self.du(r);
        let w = d.abs().powf(self.p - 2.0);
        Ok((self.n as f64 - 1.0) / r * w * d + (self.p - 1.0) * w * self.d2u(r))
    }

    /// `f = -Δ_p u + u`.
    pub fn rhs(&self, r: f64) -> Result<f64> {
        Ok(-self.p_laplacian(r)? + self.u(r))
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if grid.kind() != GridKind::RadialBall || grid.dim() != self.n {
            return Err(Error::domain(format!(
                "the profile needs a radial grid of dimension {}",
                self.n
            )));
        }
        Ok(())
    }

    pub fn sample(&self, grid: Arc<GridSpec>) -> Result<ScalarField> {
        self.check_grid(&grid)?;
        ScalarField::from_fn(grid, |c| self.u(c[0]))
    }

    fn radial_integral(&self, f: impl Fn(f64) -> f64, a: f64, opts: QuadratureOptions) -> Result<f64> {
        let omega = sphere_measure(self.n);
        let m = self.n as i32 - 1;
        Ok(quadrature::integrate(|r| omega * r.powi(m) * f(r), a, 1.0, opts)?.value)
    }
}

/// Right-hand side making the profile an exact solution of `-Δ_p u + u = f`.
pub fn manufactured_rhs(profile: &RadialProfile, grid: Arc<GridSpec>) -> Result<ScalarField> {
    profile.check_grid(&grid)?;
    let vals = grid
        .radii()
        .iter()
        .map(|&r| profile.rhs(r))
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(grid, vals)
}

fn quad_opts(tol: f64) -> QuadratureOptions {
    QuadratureOptions {
        abs_tol: tol,
        rel_tol: tol,
        max_intervals: 20_000,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyticEnergies {
    pub profile: RadialProfile,
    pub r: f64,
    pub quad_tol: f64,
    /// `∫_{B(0,1)} |∇u|^{r-2} |D²u|_F^2`.
    pub weighted_hessian: f64,
}

impl AnalyticEnergies {
    /// `∫_{ε < |x| < 1} |D²u|_F^r`.
    pub fn w2r_cutoff(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::domain(format!("cutoff must lie in (0, 1), got {eps}")));
        }
        let pr = self.profile;
        let r = self.r;
        pr.radial_integral(
            |s| pr.hessian_frobenius_sq(s).powf(0.5 * r),
            eps,
            quad_opts(self.quad_tol),
        )
    }
}

pub fn analytic_energies(profile: &RadialProfile, r: f64, quad_tol: f64) -> Result<AnalyticEnergies> {
    if !(r > 2.0) {
        return Err(Error::domain(format!("r must exceed 2, got {r}")));
    }
    let pr = *profile;
    let weighted_hessian = pr.radial_integral(
        |s| pr.du(s).abs().powf(r - 2.0) * pr.hessian_frobenius_sq(s),
        0.0,
        quad_opts(quad_tol),
    )?;
    Ok(AnalyticEnergies {
        profile: pr,
        r,
        quad_tol,
        weighted_hessian,
    })
}

/// `J(u) = k^{p-2}/p ∫|∇u|^p + ½∫u^2 - ∫g u` for the profile with its
/// manufactured right-hand side `g` (at `k = 1`).
pub fn analytic_energy(profile: &RadialProfile, quad_tol: f64) -> Result<f64> {
    let pr = *profile;
    let p = pr.p;
    pr.radial_integral(
        |s| {
            let u = pr.u(s);
            pr.du(s).abs().powf(p) / p + 0.5 * u * u - pr.rhs(s).unwrap_or(f64::NAN) * u
        },
        0.0,
        quad_opts(quad_tol),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{self, GridSpec};

    #[test]
    fn admissible_ranges() {
        let (lo, hi) = admissible_alpha_range(2, 3.0).unwrap();
        assert!((lo - 1.0).abs() < 1e-15 && (hi - 1.5).abs() < 1e-15);
        let (lo, hi) = admissible_alpha_range(4, 3.0).unwrap();
        assert!((lo - 0.5).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
        assert!(RadialProfile::new(1.5, 2, 3.0).is_ok());
        assert!(RadialProfile::new(1.0, 2, 3.0).is_err());
        assert!(admissible_alpha_range(2, 2.0).is_err());
    }

    #[test]
    fn neumann_at_unit_radius() {
        for &alpha in &[1.01, 1.25, 1.4, 1.5] {
            assert_eq!(RadialProfile::new(alpha, 2, 3.0).unwrap().du(1.0), 0.0);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        for j in 1..50 {
            let r = 0.02 * j as f64;
            let h = 1e-6 * r;
            let fd1 = (pr.u(r + h) - pr.u(r - h)) / (2.0 * h);
            let fd2 = (pr.du(r + h) - pr.du(r - h)) / (2.0 * h);
            assert!((fd1 - pr.du(r)).abs() < 1e-7 * pr.du(r).abs().max(1.0));
            assert!((fd2 - pr.d2u(r)).abs() < 1e-6 * pr.d2u(r).abs().max(1.0));
            // flux form r^{1-N}(r^{N-1}|u'|^{p-2}u')'
            let flux = |s: f64| s * pr.du(s).abs() * pr.du(s);
            let fd = (flux(r + h) - flux(r - h)) / (2.0 * h) / r;
            let exact = pr.p_laplacian(r).unwrap();
            assert!(
                (fd - exact).abs() < 1e-6 * exact.abs().max(1.0),
                "r {r}: {fd} vs {exact}"
            );
        }
        assert!(pr.p_laplacian(0.0).is_err());
    }

    #[test]
    fn rhs_square_integrable() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let v = pr
            .radial_integral(|s| pr.rhs(s).unwrap().powi(2), 0.0, quad_opts(1e-10))
            .unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn discrete_flux_matches_manufactured_rhs() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let errs: Vec<f64> = [256usize, 512, 1024]
            .iter()
            .map(|&n| {
                let g = GridSpec::radial(2, n, 1e-4).unwrap();
                let u = pr.sample(g.clone()).unwrap();
                let d = grid::p_flux_divergence(&u, 3.0, 0.0).unwrap();
                (1..n - 1)
                    .filter(|&i| g.radii()[i] > 0.05 && g.radii()[i] < 0.95)
                    .map(|i| {
                        let r = g.radii()[i];
                        (-d.values()[i] + u.values()[i] - pr.rhs(r).unwrap()).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.7, "{errs:?}");
        }
    }

    #[test]
    fn cutoff_growth_exponents() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let en = analytic_energies(&pr, 4.0, 1e-10).unwrap();
        assert!(en.weighted_hessian.is_finite() && en.weighted_hessian > 0.0);
        let (e1, e2) = (en.w2r_cutoff(1e-4).unwrap(), en.w2r_cutoff(1e-5).unwrap());
        let slope = (e2.ln() - e1.ln()) / ((1e-5f64).ln() - (1e-4f64).ln());
        assert!((slope + 1.0).abs() < 0.02, "{slope}");

        let end = RadialProfile::new(1.5, 2, 3.0).unwrap();
        let en = analytic_energies(&end, 4.0, 1e-10).unwrap();
        let a = en.w2r_cutoff(1e-4).unwrap();
        let b = en.w2r_cutoff(1e-6).unwrap();
        let c = en.w2r_cutoff(1e-8).unwrap();
        // logarithmic growth: equal increments per decade
        assert!(((c - b) / (b - a) - 1.0).abs() < 0.05, "{a} {b} {c}");
    }

    #[test]
    fn energy_quadrature_matches_discrete() {
        let pr = RadialProfile::new(1.25, 2, 3.0).unwrap();
        let exact = analytic_energy(&pr, 1e-11).unwrap();
        let g = GridSpec::radial(2, 2048, 1e-4).unwrap();
        let u = pr.sample(g.clone()).unwrap();
        let rhs = manufactured_rhs(&pr, g.clone()).unwrap();
        let prob = crate::plap::LocalProblem::new(3.0, 1.0, rhs, 0.0, 1e-9).unwrap();
        let disc = crate::plap::energy(&u, &prob);
        assert!((disc - exact).abs() < 1e-3 * exact.abs(), "{disc} vs {exact}");
    }
}
