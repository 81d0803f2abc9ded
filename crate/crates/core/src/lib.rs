//! Solver and verification toolkit for the nonlocal p-Kirchhoff Neumann problem
//!
//! ```text
//! -a(||u||^p_{W^{1,p}})^{p-1} Δ_p u + u = f(x, u)   in Ω,   ∂u/∂η = 0 on ∂Ω
//! ```
//!
//! with `p > 2`. Solutions are computed by reducing each Picard step to a
//! scaled local problem `-k^{p-2} Δ_p u + u = g`, minimized as a convex
//! energy. The norm machinery in [`fracnorm`] then measures Nikolskii
//! seminorms, Moser rung inequalities and a-priori bounds on the results.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod acceptance;
pub mod error;
pub mod experiment;
pub mod exponents;
pub mod fracnorm;
pub mod grid;
pub mod kirchhoff;
pub mod linalg;
pub mod oracle;
pub mod plap;
pub mod quadrature;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, the precision used in every
/// CSV and report this crate writes.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}
