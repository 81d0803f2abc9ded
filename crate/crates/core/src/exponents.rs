//! Exponent calculus for the p-Kirchhoff estimates.
//!
//! Everything here is scalar arithmetic: the regularity exponent `r_s`, the
//! Kirchhoff weight `omega_{p,tau}`, the Moser ladders `k_n`, the `h_s`
//! majorant polynomials and the composite exponents of the L-infinity and
//! Nikolskii bounds. No grid or field data is involved.

use std::fmt;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, ToPrimitive};

use crate::error::{Error, Result};

/// Maximum number of rungs explored by [`MoserLadder::n_for_target`].
pub const LADDER_RUNG_CAP: usize = 10_000;

/// A real number or `+inf`, kept explicit so that consumers branch on the
/// infinite case instead of doing arithmetic with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Extended::Finite(_))
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinite => f.write_str("inf"),
        }
    }
}

type Q = Ratio<i128>;

fn int(n: i128) -> Q {
    Q::from_integer(n)
}

/// The shortest decimal representation of `x` as an exact fraction.
///
/// Exponent formulas are evaluated on this fraction and rounded once, so that
/// decimal inputs such as `p = 2.2` give the values of the decimal number
/// rather than of its binary neighbour. `None` when the fraction does not fit.
fn decimal(x: f64) -> Option<Q> {
    if !x.is_finite() {
        return None;
    }
    let text = format!("{x:e}");
    let (mantissa, exp) = text.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa),
    };
    let (whole, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: i128 = format!("{whole}{frac}").parse().ok()?;
    let shift = exp - frac.len() as i32;
    let scale = 10i128.checked_pow(shift.unsigned_abs())?;
    let value = if shift >= 0 {
        Q::from_integer(digits.checked_mul(scale)?)
    } else {
        Q::new(digits, scale)
    };
    Some(if neg { -value } else { value })
}

/// The degeneracy exponent `p`, the dimension `N` and the Sobolev data
/// derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentContext {
    p: f64,
    dim: usize,
    p_star: Extended,
    lambda: Extended,
}

impl ExponentContext {
    pub fn new(p: f64, dim: usize) -> Result<Self> {
        if !(p > 2.0) || !p.is_finite() {
            return Err(Error::domain(format!("p must be a finite number > 2, got {p}")));
        }
        if dim < 2 {
            return Err(Error::domain(format!("dimension must be >= 2, got {dim}")));
        }
        let n = dim as f64;
        let (p_star, lambda) = if p < n {
            let exact = |num: fn(Q, Q) -> Option<Q>| {
                let (pq, nq) = (decimal(p)?, Q::from_integer(dim as i128));
                num(pq, nq)?.to_f64()
            };
            let ps = exact(|p, n| n.checked_mul(&p)?.checked_div(&n.checked_sub(&p)?)).unwrap_or(n * p / (n - p));
            let l = exact(|p, n| n.checked_div(&n.checked_sub(&p)?)).unwrap_or(ps / p);
            (Extended::Finite(ps), Extended::Finite(l))
        } else {
            (Extended::Infinite, Extended::Infinite)
        };
        Ok(Self { p, dim, p_star, lambda })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Np/(N-p)` when `p < N`, infinite otherwise.
    pub fn p_star(&self) -> Extended {
        self.p_star
    }

    /// `p*/p` when `p < N`, infinite otherwise.
    pub fn lambda(&self) -> Extended {
        self.lambda
    }

    fn finite_sobolev(&self) -> Result<(f64, f64)> {
        match (self.p_star, self.lambda) {
            (Extended::Finite(ps), Extended::Finite(l)) => Ok((ps, l)),
            _ => Err(Error::domain(format!(
                "p = {} >= N = {}: the Sobolev exponent is infinite",
                self.p, self.dim
            ))),
        }
    }
}

/// `r_s = s(p-2) + 2`.
pub fn r_exponent(p: f64, s: f64) -> Result<f64> {
    if !(p >= 2.0) || !(s >= 2.0) {
        return Err(Error::domain(format!(
            "r_exponent needs p >= 2 and s >= 2, got p = {p}, s = {s}"
        )));
    }
    let exact = || {
        let (p, s) = (decimal(p)?, decimal(s)?);
        s.checked_mul(&p.checked_sub(&int(2))?)?.checked_add(&int(2))?.to_f64()
    };
    Ok(exact().unwrap_or(s * (p - 2.0) + 2.0))
}

/// Exponent carried by the Kirchhoff term in the fractional estimates; it
/// vanishes once `p >= 3 - 2/tau`.
pub fn omega(p: f64, tau: f64) -> Result<f64> {
    if !(p > 2.0) || !(tau > 2.0) {
        return Err(Error::domain(format!(
            "omega needs p > 2 and tau > 2, got p = {p}, tau = {tau}"
        )));
    }
    let exact = || -> Option<f64> {
        let (p, t) = (decimal(p)?, decimal(tau)?);
        if p >= int(3).checked_sub(&int(2).checked_div(&t)?)? {
            return Some(0.0);
        }
        let num = t
            .checked_mul(&int(3).checked_sub(&p)?)?
            .checked_sub(&int(2))?
            .checked_mul(&p.checked_sub(&int(1))?)?;
        let den = t
            .checked_mul(&p.checked_sub(&int(2))?)?
            .checked_add(&int(2))?
            .checked_mul(&p.checked_sub(&int(2))?)?;
        num.checked_div(&den)?.to_f64()
    };
    if let Some(w) = exact() {
        return Ok(w);
    }
    if p >= 3.0 - 2.0 / tau {
        return Ok(0.0);
    }
    Ok((tau * (3.0 - p) - 2.0) * (p - 1.0) / ((tau * (p - 2.0) + 2.0) * (p - 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderVariant {
    /// `p - 1 <= alpha < p* - 1`, rungs `k_n = delta * sum_{i=1}^{n+1} lambda^i`.
    Superlinear,
    /// `1 <= alpha < p - 1`, rungs `k_n = lambda^n - 1`.
    Sublinear,
}

/// A Moser iteration ladder `k_0 < k_1 < ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoserLadder {
    pub variant: LadderVariant,
    pub alpha: f64,
    /// Only set for the superlinear ladder, where `alpha = (1 - delta) p* - 1`.
    pub delta: Option<f64>,
    pub k: Vec<f64>,
    p_star: f64,
    lambda: f64,
}

impl MoserLadder {
    pub fn p_star(&self) -> f64 {
        self.p_star
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Rung `n`, computed in closed form (valid past the stored prefix).
    pub fn rung(&self, n: usize) -> f64 {
        match self.variant {
            LadderVariant::Superlinear => {
                let delta = self.delta.unwrap_or(0.0);
                let mut sum = 0.0;
                let mut pow = 1.0;
                for _ in 0..=n {
                    pow *= self.lambda;
                    sum += pow;
                }
                delta * sum
            }
            LadderVariant::Sublinear => self.lambda.powi(n as i32) - 1.0,
        }
    }

    /// Smallest `n` with `p*(k_n + 1) >= s`.
    pub fn n_for_target(&self, s: f64) -> Result<usize> {
        if !(s > 2.0) {
            return Err(Error::domain(format!("target exponent must exceed 2, got {s}")));
        }
        for n in 0..LADDER_RUNG_CAP {
            if self.p_star * (self.rung(n) + 1.0) >= s {
                return Ok(n);
            }
        }
        Err(Error::UnboundedLadder {
            target: s,
            cap: LADDER_RUNG_CAP,
        })
    }
}

pub fn moser_sequence(ctx: &ExponentContext, variant: LadderVariant, alpha: f64, n_max: usize) -> Result<MoserLadder> {
    let (p_star, lambda) = ctx.finite_sobolev()?;
    let p = ctx.p();
    let delta = match variant {
        LadderVariant::Superlinear => {
            if !(alpha >= p - 1.0 && alpha < p_star - 1.0) {
                return Err(Error::domain(format!(
                    "superlinear ladder needs p-1 <= alpha < p*-1, got alpha = {alpha} (p = {p}, p* = {p_star})"
                )));
            }
            Some(1.0 - (alpha + 1.0) / p_star)
        }
        LadderVariant::Sublinear => {
            if !(alpha >= 1.0 && alpha < p - 1.0) {
                return Err(Error::domain(format!(
                    "sublinear ladder needs 1 <= alpha < p-1, got alpha = {alpha} (p = {p})"
                )));
            }
            None
        }
    };
    let mut ladder = MoserLadder {
        variant,
        alpha,
        delta,
        k: Vec::with_capacity(n_max + 1),
        p_star,
        lambda,
    };
    ladder.k = (0..=n_max).map(|n| ladder.rung(n)).collect();
    Ok(ladder)
}

/// `h_s(x) = x + x^{(n_s + 1) lambda}`.
pub fn h_poly(ctx: &ExponentContext, n_s: usize, x: f64) -> Result<f64> {
    let (_, lambda) = ctx.finite_sobolev()?;
    if !(x >= 0.0) {
        return Err(Error::domain(format!("h_s is defined for x >= 0, got {x}")));
    }
    Ok(x + x.powf((n_s as f64 + 1.0) * lambda))
}

/// Explicit majorant for sequences with `A_m <= C(1 + A_{m-1} + A_{m-1}^{d_{m-1}})`,
/// `d_m <= kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgelMajorant {
    /// `A_hat_0 = A_0`, `A_hat_m = C(2 + A_hat_{m-1} + A_hat_{m-1}^kappa)`.
    pub a_hat: Vec<f64>,
    /// `K_m = A_hat_m / (1 + A_0 + A_0^{m kappa})`.
    pub k: Vec<f64>,
    /// First index at which `A_hat` overflowed to `+inf`, if any.
    pub overflow_at: Option<usize>,
}

pub fn algel_majorant(c: f64, kappa: f64, a0: f64, n: usize) -> Result<AlgelMajorant> {
    if !(c > 0.0) || !(kappa >= 0.0) || !(a0 >= 0.0) {
        return Err(Error::domain(format!(
            "algel_majorant needs C > 0, kappa >= 0, A0 >= 0; got C = {c}, kappa = {kappa}, A0 = {a0}"
        )));
    }
    let mut a_hat = Vec::with_capacity(n + 1);
    let mut k = Vec::with_capacity(n + 1);
    let mut overflow_at = None;
    let mut prev = a0;
    for m in 0..=n {
        let value = if m == 0 {
            a0
        } else {
            c * (2.0 + prev + prev.powf(kappa))
        };
        let value = if value.is_finite() {
            value
        } else {
            overflow_at.get_or_insert(m);
            f64::INFINITY
        };
        let denom = 1.0 + a0 + a0.powf(m as f64 * kappa);
        a_hat.push(value);
        k.push(value / denom);
        prev = value;
    }
    Ok(AlgelMajorant { a_hat, k, overflow_at })
}

/// Composite exponents of the L-infinity / Nikolskii bounds for a given
/// auxiliary exponent `R` and target integrability `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundFormula {
    pub big_r: f64,
    pub q: f64,
    pub r_big_r: f64,
    pub r_s: f64,
    pub omega_p_big_r: f64,
    pub omega_p_s: f64,
    pub big_r_s: f64,
    pub t_s: f64,
}

/// Lower bound `max{2, (N-4)/(p-2)}` that `R` must exceed.
pub fn auxiliary_exponent_floor(ctx: &ExponentContext) -> f64 {
    exact_floor(ctx)
        .and_then(|q| q.to_f64())
        .unwrap_or_else(|| f64::max(2.0, (ctx.dim() as f64 - 4.0) / (ctx.p() - 2.0)))
}

fn exact_floor(ctx: &ExponentContext) -> Option<Q> {
    let q = int(ctx.dim() as i128 - 4).checked_div(&decimal(ctx.p())?.checked_sub(&int(2))?)?;
    Some(q.max(int(2)))
}

fn exceeds_floor(ctx: &ExponentContext, big_r: f64) -> bool {
    match (exact_floor(ctx), decimal(big_r)) {
        (Some(f), Some(r)) => r > f,
        _ => big_r > auxiliary_exponent_floor(ctx),
    }
}

pub fn bound_formula(ctx: &ExponentContext, alpha: f64, big_r: f64, s: f64) -> Result<BoundFormula> {
    let floor = auxiliary_exponent_floor(ctx);
    if !exceeds_floor(ctx, big_r) {
        return Err(Error::domain(format!(
            "R must exceed max{{2, (N-4)/(p-2)}} = {floor}, got {big_r}"
        )));
    }
    if !(s > 2.0) {
        return Err(Error::domain(format!("s must exceed 2, got {s}")));
    }
    let p = ctx.p();
    let q = alpha * big_r;
    let r_big_r = r_exponent(p, big_r)?;
    let r_s = r_exponent(p, s)?;
    let omega_p_big_r = omega(p, big_r)?;
    let omega_p_s = omega(p, s)?;
    let big_r_s = [
        alpha * alpha,
        alpha * q / r_big_r,
        alpha * alpha * s / r_s,
        alpha * q * s / (r_big_r * r_s),
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    let t_s = omega_p_s + alpha * omega_p_big_r * (r_s + s) / r_s;
    Ok(BoundFormula {
        big_r,
        q,
        r_big_r,
        r_s,
        omega_p_big_r,
        omega_p_s,
        big_r_s,
        t_s,
    })
}

/// Which a-priori L-infinity bound applies to `(p, N, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundBranch {
    /// `p < N`, `alpha >= p - 1`.
    Superlinear,
    /// `p < N`, `1 <= alpha < p - 1`.
    Sublinear,
    /// `p >= N`.
    Supercritical,
}

impl BoundBranch {
    pub fn select(ctx: &ExponentContext, alpha: f64) -> Result<Self> {
        if !(alpha >= 1.0) {
            return Err(Error::domain(format!(
                "growth exponent alpha must be >= 1, got {alpha}"
            )));
        }
        match ctx.p_star() {
            Extended::Infinite => Ok(BoundBranch::Supercritical),
            Extended::Finite(ps) => {
                if alpha >= ps - 1.0 {
                    Err(Error::domain(format!(
                        "alpha = {alpha} is not subcritical (p* - 1 = {})",
                        ps - 1.0
                    )))
                } else if alpha >= ctx.p() - 1.0 {
                    Ok(BoundBranch::Superlinear)
                } else {
                    Ok(BoundBranch::Sublinear)
                }
            }
        }
    }
}

impl fmt::Display for BoundBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundBranch::Superlinear => "superlinear",
            BoundBranch::Sublinear => "sublinear",
            BoundBranch::Supercritical => "supercritical",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx43() -> ExponentContext {
        ExponentContext::new(3.0, 4).unwrap()
    }

    #[test]
    fn r_exponent_table() {
        assert_eq!(r_exponent(4.0, 3.0).unwrap(), 8.0);
        assert_eq!(r_exponent(2.0, 7.0).unwrap(), 2.0);
        assert_eq!(r_exponent(3.0, 2.0).unwrap(), 4.0);
        assert!(r_exponent(1.5, 3.0).is_err());
        assert!(r_exponent(3.0, 1.0).is_err());
    }

    #[test]
    fn decimal_fractions() {
        assert_eq!(decimal(2.2), Some(Q::new(11, 5)));
        assert_eq!(decimal(-1.5e-3), Some(Q::new(-3, 2000)));
        assert_eq!(decimal(4e20), Some(int(400_000_000_000_000_000_000)));
        assert_eq!(decimal(f64::INFINITY), None);
        assert_eq!(decimal(1e300), None);
    }

    #[test]
    fn omega_branches() {
        assert_eq!(omega(3.0, 4.0).unwrap(), 0.0);
        assert_eq!(omega(2.5, 4.0).unwrap(), 0.0);
        assert_eq!(omega(2.2, 10.0).unwrap(), 9.0);
        assert_eq!(r_exponent(2.2, 3.0).unwrap(), 2.6);
        assert!(omega(2.0, 4.0).is_err());
        assert!(omega(3.0, 2.0).is_err());
    }

    #[test]
    fn context_sentinels() {
        let c = ctx43();
        assert_eq!(c.p_star(), Extended::Finite(12.0));
        assert_eq!(c.lambda(), Extended::Finite(4.0));
        let c = ExponentContext::new(3.0, 3).unwrap();
        assert_eq!(c.p_star(), Extended::Infinite);
        assert_eq!(c.lambda(), Extended::Infinite);
        assert!(ExponentContext::new(2.0, 4).is_err());
        assert!(ExponentContext::new(3.0, 1).is_err());
    }

    #[test]
    fn ladders_match_hand_values() {
        let c = ctx43();
        let sup = moser_sequence(&c, LadderVariant::Superlinear, 8.0, 2).unwrap();
        assert_eq!(sup.delta, Some(0.25));
        assert_eq!(sup.k, vec![1.0, 5.0, 21.0]);
        // alpha + k_1 p + 1 = p*(1 + k_0)
        assert_eq!(8.0 + sup.k[1] * 3.0 + 1.0, 12.0 * (1.0 + sup.k[0]));

        let sub = moser_sequence(&c, LadderVariant::Sublinear, 1.5, 2).unwrap();
        assert_eq!(sub.k, vec![0.0, 3.0, 15.0]);

        assert_eq!(sup.n_for_target(50.0).unwrap(), 1);
        assert_eq!(sup.n_for_target(24.0).unwrap(), 0);
        assert_eq!(sub.n_for_target(100.0).unwrap(), 2);
    }

    #[test]
    fn ladder_domain_errors() {
        let c = ctx43();
        assert!(moser_sequence(&c, LadderVariant::Superlinear, 1.5, 2).is_err());
        assert!(moser_sequence(&c, LadderVariant::Superlinear, 11.0, 2).is_err());
        assert!(moser_sequence(&c, LadderVariant::Sublinear, 2.0, 2).is_err());
        let inf = ExponentContext::new(3.0, 2).unwrap();
        assert!(moser_sequence(&inf, LadderVariant::Sublinear, 1.5, 2).is_err());
    }

    #[test]
    fn superlinear_rung_identity_all_rungs() {
        for &(p, n, alpha) in &[(3.0, 4usize, 8.0), (3.0, 6, 2.0), (2.5, 7, 2.0), (4.0, 9, 5.0)] {
            let c = ExponentContext::new(p, n).unwrap();
            let ps = c.p_star().finite().unwrap();
            let l = moser_sequence(&c, LadderVariant::Superlinear, alpha, 12).unwrap();
            assert!((alpha + l.k[0] * p + 1.0 - ps).abs() <= 1e-12 * ps);
            for w in 1..l.k.len() {
                let lhs = alpha + l.k[w] * p + 1.0;
                let rhs = ps * (1.0 + l.k[w - 1]);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs, "rung {w}: {lhs} vs {rhs}");
                assert!(l.k[w] > l.k[w - 1]);
            }
        }
    }

    #[test]
    fn h_poly_values() {
        let c = ctx43();
        assert_eq!(h_poly(&c, 1, 0.0).unwrap(), 0.0);
        assert_eq!(h_poly(&c, 1, 1.0).unwrap(), 2.0);
        assert_eq!(h_poly(&c, 1, 2.0).unwrap(), 258.0);
        assert!(h_poly(&c, 1, -1.0).is_err());
    }

    #[test]
    fn algel_examples() {
        let m = algel_majorant(1.0, 1.0, 0.0, 1).unwrap();
        assert_eq!(m.a_hat[1], 2.0);
        assert_eq!(m.k[1], 2.0);
        let m = algel_majorant(1.0, 1.0, 1.0, 2).unwrap();
        assert_eq!(m.a_hat, vec![1.0, 4.0, 10.0]);
        let m = algel_majorant(10.0, 8.0, 5.0, 6).unwrap();
        assert_eq!(m.overflow_at, Some(3));
        assert!(m.a_hat[5].is_infinite());
    }

    #[test]
    fn algel_dominates_random_admissible_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let c = rng.random_range(0.1..3.0);
            let kappa = rng.random_range(0.0..2.5);
            let a0 = rng.random_range(0.0..4.0);
            let n = 8;
            let maj = algel_majorant(c, kappa, a0, n).unwrap();
            // d_m nondecreasing, converging to kappa from below
            let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=kappa)).collect();
            d.sort_by(f64::total_cmp);
            let mut a = a0;
            for m in 1..=n {
                let bound = c * (1.0 + a + a.powf(d[m - 1]));
                a = bound * rng.random_range(0.0..=1.0);
                assert!(
                    a <= maj.a_hat[m] * (1.0 + 1e-12),
                    "A_{m} = {a} exceeds majorant {}",
                    maj.a_hat[m]
                );
                let k_bound = maj.k[m] * (1.0 + a0 + a0.powf(m as f64 * kappa));
                assert!(a <= k_bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn bound_formula_small_case() {
        let f = bound_formula(&ctx43(), 2.0, 5.0, 3.0).unwrap();
        assert_eq!(f.q, 10.0);
        assert_eq!(f.r_big_r, 7.0);
        assert_eq!(f.r_s, 5.0);
        assert_eq!(f.big_r_s, 4.0);
        assert_eq!(f.t_s, 0.0);
        assert!(bound_formula(&ctx43(), 2.0, 2.0, 3.0).is_err());
        assert!(bound_formula(&ctx43(), 2.0, 5.0, 2.0).is_err());
    }

    #[test]
    fn bound_formula_matches_hand_arithmetic() {
        // Hand-computed: p = 2.2, N = 10, alpha = 1.1, R = 31, s = 3.
        let omega_r: f64 = ((31.0 * 0.8 - 2.0) * 1.2) / ((31.0 * 0.2 + 2.0) * 0.2);
        assert!((omega_r - 27.36 / 1.64).abs() < 1e-12);
        let omega_s: f64 = ((3.0 * 0.8 - 2.0) * 1.2) / ((3.0 * 0.2 + 2.0) * 0.2);
        let r_r = 31.0 * 0.2 + 2.0;
        let r_s = 3.0 * 0.2 + 2.0;
        let q = 1.1 * 31.0;
        let t_s = omega_s + 1.1 * omega_r * (r_s + 3.0) / r_s;
        let big_r_s = [1.21, 1.1 * q / r_r, 1.21 * 3.0 / r_s, 1.1 * q * 3.0 / (r_r * r_s)]
            .into_iter()
            .fold(0.0, f64::max);

        let ctx = ExponentContext::new(2.2, 10).unwrap();
        let f = bound_formula(&ctx, 1.1, 31.0, 3.0).unwrap();
        assert!((f.omega_p_big_r - 16.682926829268293).abs() < 1e-9);
        assert!((f.omega_p_big_r - omega_r).abs() < 1e-12);
        assert!((f.omega_p_s - omega_s).abs() < 1e-12);
        assert!((f.t_s - t_s).abs() < 1e-10);
        assert!((f.big_r_s - big_r_s).abs() < 1e-12);
        // R must exceed (N-4)/(p-2) = 30 here
        assert!(bound_formula(&ctx, 1.1, 29.0, 3.0).is_err());
        assert_eq!(auxiliary_exponent_floor(&ctx), 30.0);
        assert!(bound_formula(&ctx, 1.1, 30.0, 3.0).is_err());
        assert!(bound_formula(&ctx, 1.1, 30.000001, 3.0).is_ok());
    }

    #[test]
    fn branch_dispatch_is_total() {
        for n in 2..12usize {
            for pi in 0..20 {
                let p = 2.05 + 0.4 * pi as f64;
                let ctx = ExponentContext::new(p, n).unwrap();
                let upper = ctx.p_star().finite().map(|ps| ps - 1.0).unwrap_or(50.0);
                let mut alpha = 1.0;
                while alpha < upper {
                    let b = BoundBranch::select(&ctx, alpha).unwrap();
                    let expected = if p >= n as f64 {
                        BoundBranch::Supercritical
                    } else if alpha >= p - 1.0 {
                        BoundBranch::Superlinear
                    } else {
                        BoundBranch::Sublinear
                    };
                    assert_eq!(b, expected);
                    alpha += 0.37;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn exact_path_agrees_with_float(p in 2.01f64..2.99, tau in 2.01f64..40.0) {
            let w = omega(p, tau).unwrap();
            if p < 3.0 - 2.0 / tau - 1e-9 {
                let f = (tau * (3.0 - p) - 2.0) * (p - 1.0) / ((tau * (p - 2.0) + 2.0) * (p - 2.0));
                prop_assert!((w - f).abs() <= 1e-9 * f.abs().max(1.0));
            }
        }

        #[test]
        fn r_exponent_monotone(p in 2.01f64..8.0, s in 2.01f64..30.0, dp in 0.01f64..1.0, ds in 0.01f64..1.0) {
            let base = r_exponent(p, s).unwrap();
            prop_assert!(r_exponent(p + dp, s).unwrap() > base);
            prop_assert!(r_exponent(p, s + ds).unwrap() > base);
            prop_assert!(base > p);
        }

        #[test]
        fn omega_continuous_at_branch_boundary(tau in 2.05f64..50.0) {
            let p_b = 3.0 - 2.0 / tau;
            prop_assume!(p_b > 2.0 + 1e-6);
            let below = omega(p_b - 1e-9, tau).unwrap();
            prop_assert!(below.abs() < 1e-6, "omega just below boundary = {}", below);
            prop_assert_eq!(omega(p_b, tau).unwrap(), 0.0);
        }

        #[test]
        fn h_poly_monotone_and_dominates(x in 0.0f64..3.0, dx in 0.0f64..1.0, ns in 0usize..3) {
            let c = ExponentContext::new(3.0, 6).unwrap();
            let h = h_poly(&c, ns, x).unwrap();
            prop_assert!(h >= x);
            prop_assert!(h_poly(&c, ns, x + dx).unwrap() >= h);
        }
    }
}
