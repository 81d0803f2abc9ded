//! Grids, discrete fields and the differential operators acting on them.
//!
//! Two domain kinds are supported: a tensor rectangle `[0, L1] x [0, L2]`
//! (or an interval in 1-D) and the unit ball `B(0,1)` in `R^N` represented by
//! a geometrically graded radial grid on `[r_min, 1]`.
//!
//! The p-flux operator is variational: it is minus the gradient of the P1
//! energy `sum_e w_e (|g_e|^2 + eps^2)^{p/2} / p`, divided by the lumped mass.
//! Rectangle cells are split along both diagonals into four triangles so the
//! discrete operator keeps the symmetry of the square. Homogeneous Neumann
//! conditions are the natural boundary conditions of that energy.
//!
//! [`gradient`] and [`hessian`] are measurement operators used by the norm
//! machinery. They use centered stencils inside and one-sided second-order
//! stencils on the boundary, so they are exact for quadratics everywhere.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::format_float;

pub const MIN_RESOLUTION: usize = 8;
pub const DEFAULT_R_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Rectangle,
    RadialBall,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Rectangle => "rectangle",
            GridKind::RadialBall => "radial",
        })
    }
}

/// A P1 element: constant gradient, each component a two-node difference.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Element {
    pub weight: f64,
    pub ncomp: usize,
    pub diff: [(usize, usize, f64); 2],
}

impl Element {
    #[inline]
    pub fn grad(&self, u: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for c in 0..self.ncomp {
            let (a, b, s) = self.diff[c];
            g[c] = (u[b] - u[a]) * s;
        }
        g
    }
}

#[derive(Debug)]
pub struct GridSpec {
    kind: GridKind,
    dim: usize,
    cells: [usize; 2],
    lengths: [f64; 2],
    r_min: f64,
    radii: Vec<f64>,
    weights: Vec<f64>,
    elements: OnceLock<Vec<Element>>,
}

/// Surface measure of the unit sphere in `R^n` (`2` for `n = 1`).
pub fn sphere_measure(n: usize) -> f64 {
    match n {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI / (n - 2) as f64 * sphere_measure(n - 2),
    }
}

fn trapezoid_weights(n_nodes: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n_nodes];
    w[0] = 0.5 * h;
    w[n_nodes - 1] = 0.5 * h;
    w
}

impl GridSpec {
    /// Tensor grid on `[0, L_1] x ... x [0, L_N]` with `cells[i]` cells per axis.
    pub fn rectangle(cells: &[usize], lengths: &[f64]) -> Result<Arc<Self>> {
        let dim = cells.len();
        if !(1..=2).contains(&dim) || lengths.len() != dim {
            return Err(Error::domain(format!(
                "rectangle grids are 1-D or 2-D with one length per axis (got {} cells, {} lengths)",
                cells.len(),
                lengths.len()
            )));
        }
        for (&c, &l) in cells.iter().zip(lengths) {
            if c < MIN_RESOLUTION {
                return Err(Error::domain(format!("resolution {c} below minimum {MIN_RESOLUTION}")));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::domain(format!("side length must be positive, got {l}")));
            }
        }
        let mut c2 = [0usize; 2];
        let mut l2 = [0.0; 2];
        c2[..dim].copy_from_slice(cells);
        l2[..dim].copy_from_slice(lengths);
        let wx = trapezoid_weights(c2[0] + 1, l2[0] / c2[0] as f64);
        let weights = if dim == 1 {
            wx
        } else {
            let wy = trapezoid_weights(c2[1] + 1, l2[1] / c2[1] as f64);
            wy.iter().flat_map(|&b| wx.iter().map(move |&a| a * b)).collect()
        };
        Ok(Arc::new(Self {
            kind: GridKind::Rectangle,
            dim,
            cells: c2,
            lengths: l2,
            r_min: 0.0,
            radii: Vec::new(),
            weights,
            elements: OnceLock::new(),
        }))
    }

    /// Unit square `[0,1]^2` with `n` cells per axis.
    pub fn unit_square(n: usize) -> Result<Arc<Self>> {
        Self::rectangle(&[n, n], &[1.0, 1.0])
    }

    /// Radial grid for `B(0,1) ⊂ R^dim`: `n_nodes` radii graded geometrically
    /// from `r_min` to 1.
    pub fn radial(dim: usize, n_nodes: usize, r_min: f64) -> Result<Arc<Self>> {
        if dim < 1 {
            return Err(Error::domain("radial grids need dimension >= 1"));
        }
        if n_nodes < MIN_RESOLUTION {
            return Err(Error::domain(format!(
                "resolution {n_nodes} below minimum {MIN_RESOLUTION}"
            )));
        }
        if !(r_min > 0.0 && r_min < 1.0) {
            return Err(Error::domain(format!("r_min must lie in (0, 1), got {r_min}")));
        }
        let last = (n_nodes - 1) as f64;
        let mut radii: Vec<f64> = (0..n_nodes)
            .map(|i| r_min * (1.0 / r_min).powf(i as f64 / last))
            .collect();
        radii[0] = r_min;
        radii[n_nodes - 1] = 1.0;
        let n = dim as f64;
        let omega = sphere_measure(dim);
        // Exact moments of the hat functions against omega_N r^{N-1}.
        let mut weights = vec![0.0; n_nodes];
        for i in 0..n_nodes - 1 {
            let (a, b) = (radii[i], radii[i + 1]);
            let total = (b.powi(dim as i32) - a.powi(dim as i32)) / n;
            let first = (b.powi(dim as i32 + 1) - a.powi(dim as i32 + 1)) / (n + 1.0) - a * total;
            let upper = first / (b - a);
            weights[i + 1] += omega * upper;
            weights[i] += omega * (total - upper);
        }
        Ok(Arc::new(Self {
            kind: GridKind::RadialBall,
            dim,
            cells: [n_nodes - 1, 0],
            lengths: [1.0, 0.0],
            r_min,
            radii,
            weights,
            elements: OnceLock::new(),
        }))
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of gradient components stored per node.
    pub fn ncomp(&self) -> usize {
        match self.kind {
            GridKind::Rectangle => self.dim,
            GridKind::RadialBall => 1,
        }
    }

    pub fn cells(&self) -> &[usize] {
        match self.kind {
            GridKind::Rectangle => &self.cells[..self.dim],
            GridKind::RadialBall => &self.cells[..1],
        }
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim.min(2)]
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Lumped-mass quadrature weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn diameter(&self) -> f64 {
        match self.kind {
            GridKind::Rectangle => self.lengths[..self.dim].iter().map(|l| l * l).sum::<f64>().sqrt(),
            GridKind::RadialBall => 2.0,
        }
    }

    /// Node coordinates: `(x)` / `(x, y)` on rectangles, `(r)` on radial grids.
    pub fn coords(&self, i: usize) -> [f64; 2] {
        match self.kind {
            GridKind::RadialBall => [self.radii[i], 0.0],
            GridKind::Rectangle => {
                let nx = self.cells[0] + 1;
                let (ix, iy) = (i % nx, i / nx);
                [
                    ix as f64 * self.spacing(0),
                    if self.dim == 2 {
                        iy as f64 * self.spacing(1)
                    } else {
                        0.0
                    },
                ]
            }
        }
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.cells[0] + 1) + ix
    }

    pub(crate) fn bandwidth(&self) -> usize {
        match (self.kind, self.dim) {
            (GridKind::Rectangle, 2) => self.cells[0] + 2,
            _ => 1,
        }
    }

    pub(crate) fn elements(&self) -> &[Element] {
        self.elements.get_or_init(|| self.build_elements())
    }

    fn build_elements(&self) -> Vec<Element> {
        match (self.kind, self.dim) {
            (GridKind::RadialBall, _) => {
                let omega = sphere_measure(self.dim);
                let n = self.dim as i32;
                self.radii
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Element {
                        weight: omega * (w[1].powi(n) - w[0].powi(n)) / self.dim as f64,
                        ncomp: 1,
                        diff: [(i, i + 1, 1.0 / (w[1] - w[0])), (0, 0, 0.0)],
                    })
                    .collect()
            }
            (GridKind::Rectangle, 1) => {
                let h = self.spacing(0);
                (0..self.cells[0])
                    .map(|i| Element {
                        weight: h,
                        ncomp: 1,
                        diff: [(i, i + 1, 1.0 / h), (0, 0, 0.0)],
                    })
                    .collect()
            }
            _ => {
                let (hx, hy) = (self.spacing(0), self.spacing(1));
                let (sx, sy) = (1.0 / hx, 1.0 / hy);
                let w = 0.25 * hx * hy;
                let mut out = Vec::with_capacity(4 * self.cells[0] * self.cells[1]);
                for iy in 0..self.cells[1] {
                    for ix in 0..self.cells[0] {
                        let n00 = self.index(ix, iy);
                        let n10 = self.index(ix + 1, iy);
                        let n01 = self.index(ix, iy + 1);
                        let n11 = self.index(ix + 1, iy + 1);
                        for diff in [
                            [(n00, n10, sx), (n10, n11, sy)],
                            [(n01, n11, sx), (n00, n01, sy)],
                            [(n00, n10, sx), (n00, n01, sy)],
                            [(n01, n11, sx), (n10, n11, sy)],
                        ] {
                            out.push(Element {
                                weight: w,
                                ncomp: 2,
                                diff,
                            });
                        }
                    }
                }
                out
            }
        }
    }

    fn same_shape(&self, other: &GridSpec) -> bool {
        self.kind == other.kind
            && self.dim == other.dim
            && self.cells == other.cells
            && self.lengths == other.lengths
            && self.r_min == other.r_min
    }
}

/// Nodal values on a grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at node {i}: {}", values[i])));
    }
    Ok(())
}

impl ScalarField {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::domain(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "field value")?;
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<GridSpec>, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn zeros(grid: Arc<GridSpec>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Samples `f` at the node coordinates (see [`GridSpec::coords`]).
    pub fn from_fn(grid: Arc<GridSpec>, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| c * v)
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.grid.same_shape(&other.grid) {
            return Err(Error::domain("fields live on different grids"));
        }
        Self::new(
            self.grid.clone(),
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Sum of P1 element integrals of `|∇u|^p` (exact for the interpolant).
    pub fn gradient_power_integral(&self, p: f64) -> f64 {
        self.grid
            .elements()
            .iter()
            .map(|e| {
                let g = e.grad(&self.values);
                e.weight * (g[0] * g[0] + g[1] * g[1]).powf(0.5 * p)
            })
            .sum()
    }
}

/// One gradient component per axis (a single radial derivative on radial grids).
#[derive(Debug, Clone)]
pub struct VectorField {
    grid: Arc<GridSpec>,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn norm_at(&self, i: usize) -> f64 {
        self.comps.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
enum HessianRepr {
    /// Row-major `dim x dim` matrix per node.
    Full { dim: usize, data: Vec<f64> },
    /// `u''(r)` and `u'(r)/r` per node; the tangential value has multiplicity `N - 1`.
    Radial {
        dim: usize,
        radial: Vec<f64>,
        tangential: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Hessian {
    grid: Arc<GridSpec>,
    repr: HessianRepr,
}

impl Hessian {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Full matrix at node `i`; on radial grids it is the Hessian at `(r, 0, ..., 0)`.
    pub fn matrix(&self, i: usize) -> Vec<f64> {
        match &self.repr {
            HessianRepr::Full { dim, data } => data[i * dim * dim..(i + 1) * dim * dim].to_vec(),
            HessianRepr::Radial {
                dim,
                radial,
                tangential,
            } => {
                let mut m = vec![0.0; dim * dim];
                m[0] = radial[i];
                for k in 1..*dim {
                    m[k * dim + k] = tangential[i];
                }
                m
            }
        }
    }

    pub fn frobenius_sq(&self, i: usize) -> f64 {
        match &self.repr {
            HessianRepr::Full { dim, data } => data[i * dim * dim..(i + 1) * dim * dim].iter().map(|v| v * v).sum(),
            HessianRepr::Radial {
                dim,
                radial,
                tangential,
            } => radial[i] * radial[i] + (*dim as f64 - 1.0) * tangential[i] * tangential[i],
        }
    }
}

/// Lagrange weights of the derivative at `x` of the quadratic through `xs`.
fn d1_weights(xs: [f64; 3], x: f64) -> [f64; 3] {
    let [a, b, c] = xs;
    [
        ((x - b) + (x - c)) / ((a - b) * (a - c)),
        ((x - a) + (x - c)) / ((b - a) * (b - c)),
        ((x - a) + (x - b)) / ((c - a) * (c - b)),
    ]
}

fn d2_weights(xs: [f64; 3]) -> [f64; 3] {
    let [a, b, c] = xs;
    [
        2.0 / ((a - b) * (a - c)),
        2.0 / ((b - a) * (b - c)),
        2.0 / ((c - a) * (c - b)),
    ]
}

/// First or second derivative along a line of nodes with coordinates `xs`.
fn diff_line(xs: &[f64], u: impl Fn(usize) -> f64, second: bool) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let c = i.clamp(1, n - 2);
            let stencil = [xs[c - 1], xs[c], xs[c + 1]];
            let w = if second {
                d2_weights(stencil)
            } else {
                d1_weights(stencil, xs[i])
            };
            w[0] * u(c - 1) + w[1] * u(c) + w[2] * u(c + 1)
        })
        .collect()
}

fn axis_coords(grid: &GridSpec, axis: usize) -> Vec<f64> {
    let h = grid.spacing(axis);
    (0..grid.nodes_per_axis(axis)).map(|i| i as f64 * h).collect()
}

/// Applies a line operator along `axis` of a rectangle grid.
fn along_axis(grid: &GridSpec, u: &[f64], axis: usize, second: bool) -> Vec<f64> {
    let xs = axis_coords(grid, axis);
    let nx = grid.nodes_per_axis(0);
    let ny = if grid.dim() == 2 { grid.nodes_per_axis(1) } else { 1 };
    let mut out = vec![0.0; u.len()];
    if axis == 0 {
        for iy in 0..ny {
            let line = diff_line(&xs, |i| u[iy * nx + i], second);
            out[iy * nx..(iy + 1) * nx].copy_from_slice(&line);
        }
    } else {
        for ix in 0..nx {
            let line = diff_line(&xs, |j| u[j * nx + ix], second);
            for (j, v) in line.into_iter().enumerate() {
                out[j * nx + ix] = v;
            }
        }
    }
    out
}

pub fn gradient(u: &ScalarField) -> VectorField {
    let grid = u.grid().clone();
    let comps = match grid.kind() {
        GridKind::RadialBall => vec![diff_line(grid.radii(), |i| u.values[i], false)],
        GridKind::Rectangle => (0..grid.dim())
            .map(|a| along_axis(&grid, &u.values, a, false))
            .collect(),
    };
    VectorField { grid, comps }
}

pub fn hessian(u: &ScalarField) -> Hessian {
    let grid = u.grid().clone();
    let repr = match grid.kind() {
        GridKind::RadialBall => {
            let d1 = diff_line(grid.radii(), |i| u.values[i], false);
            let radial = diff_line(grid.radii(), |i| u.values[i], true);
            let tangential = d1.iter().zip(grid.radii()).map(|(d, r)| d / r).collect();
            HessianRepr::Radial {
                dim: grid.dim(),
                radial,
                tangential,
            }
        }
        GridKind::Rectangle => {
            let dim = grid.dim();
            let n = grid.len();
            let mut data = vec![0.0; n * dim * dim];
            let uxx = along_axis(&grid, &u.values, 0, true);
            for i in 0..n {
                data[i * dim * dim] = uxx[i];
            }
            if dim == 2 {
                let ux = along_axis(&grid, &u.values, 0, false);
                let uxy = along_axis(&grid, &ux, 1, false);
                let uyy = along_axis(&grid, &u.values, 1, true);
                for i in 0..n {
                    data[i * 4 + 1] = uxy[i];
                    data[i * 4 + 2] = uxy[i];
                    data[i * 4 + 3] = uyy[i];
                }
            }
            HessianRepr::Full { dim, data }
        }
    };
    Hessian { grid, repr }
}

/// Regularized flux density `(|g|^2 + eps^2)^{(p-2)/2}`.
#[inline]
pub(crate) fn flux_coefficient(g: [f64; 2], p: f64, eps: f64) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + eps * eps).powf(0.5 * (p - 2.0))
}

/// `∂/∂u_i` of `sum_e w_e (|g_e|^2 + eps^2)^{p/2} / p`.
pub(crate) fn flux_energy_gradient(grid: &GridSpec, u: &[f64], p: f64, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for e in grid.elements() {
        let g = e.grad(u);
        let phi = e.weight * flux_coefficient(g, p, eps);
        for c in 0..e.ncomp {
            let (a, b, s) = e.diff[c];
            let v = phi * g[c] * s;
            out[b] += v;
            out[a] -= v;
        }
    }
    out
}

pub(crate) fn flux_energy(grid: &GridSpec, u: &[f64], p: f64, eps: f64) -> f64 {
    grid.elements()
        .iter()
        .map(|e| {
            let g = e.grad(u);
            e.weight * (g[0] * g[0] + g[1] * g[1] + eps * eps).powf(0.5 * p) / p
        })
        .sum()
}

/// Discrete `div((|∇u|^2 + eps^2)^{(p-2)/2} ∇u)` in conservative form.
pub fn p_flux_divergence(u: &ScalarField, p: f64, eps: f64) -> Result<ScalarField> {
    if !(p > 2.0) || !(eps >= 0.0) {
        return Err(Error::domain(format!(
            "p_flux_divergence needs p > 2, eps >= 0 (p = {p}, eps = {eps})"
        )));
    }
    let grad = flux_energy_gradient(u.grid(), u.values(), p, eps);
    let w = u.grid().weights();
    ScalarField::new(u.grid().clone(), grad.iter().zip(w).map(|(g, m)| -g / m).collect())
}

pub fn integrate(w: &ScalarField) -> f64 {
    w.values.iter().zip(w.grid.weights()).map(|(v, m)| v * m).sum()
}

/// Values of a nodal quantity at `x` and `x + h` over the inner region
/// `{x : dist(x, ∂Ω) >= |h|}`, with that region's own quadrature weights.
#[derive(Debug, Clone)]
pub struct ShiftedRestriction {
    pub original: Vec<f64>,
    pub shifted: Vec<f64>,
    pub weights: Vec<f64>,
    pub shift: f64,
}

impl ShiftedRestriction {
    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `∫ |shifted - original|^r` over the inner region.
    pub fn difference_power_integral(&self, r: f64) -> f64 {
        self.original
            .iter()
            .zip(&self.shifted)
            .zip(&self.weights)
            .map(|((a, b), w)| (b - a).abs().powf(r) * w)
            .sum()
    }
}

/// Shift of `steps` cells along `axis` applied to nodal values on a rectangle grid.
pub fn shift_values(grid: &GridSpec, values: &[f64], axis: usize, steps: usize) -> Result<ShiftedRestriction> {
    if grid.kind() != GridKind::Rectangle {
        return Err(Error::Unsupported("lattice shifts need a rectangle grid".into()));
    }
    if axis >= grid.dim() {
        return Err(Error::domain(format!(
            "axis {axis} out of range for a {}-D grid",
            grid.dim()
        )));
    }
    if steps == 0 {
        return Err(Error::domain("shift must be at least one cell"));
    }
    let h = steps as f64 * grid.spacing(axis);
    let limit = 0.5 * grid.lengths()[axis];
    let smallest_half = grid.lengths().iter().fold(f64::INFINITY, |m, &l| m.min(0.5 * l));
    // The inner region must keep at least two nodes per axis.
    let too_large = (0..grid.dim()).any(|a| 2 * steps_for(grid, a, h) >= grid.cells()[a]);
    if !(h < limit) || !(h < smallest_half) || too_large {
        return Err(Error::ShiftTooLarge {
            shift: h,
            limit: smallest_half.min(limit),
        });
    }
    let nx = grid.nodes_per_axis(0);
    let ranges: Vec<(usize, usize)> = (0..grid.dim())
        .map(|a| {
            let s = steps_for(grid, a, h);
            (s, grid.cells()[a] - s)
        })
        .collect();
    let line_weights: Vec<Vec<f64>> = ranges
        .iter()
        .enumerate()
        .map(|(a, &(lo, hi))| trapezoid_weights(hi - lo + 1, grid.spacing(a)))
        .collect();
    let stride = if axis == 0 { steps } else { steps * nx };
    let (ylo, yhi) = if grid.dim() == 2 { ranges[1] } else { (0, 0) };
    let mut out = ShiftedRestriction {
        original: Vec::new(),
        shifted: Vec::new(),
        weights: Vec::new(),
        shift: h,
    };
    for iy in ylo..=yhi {
        let wy = if grid.dim() == 2 {
            line_weights[1][iy - ylo]
        } else {
            1.0
        };
        for ix in ranges[0].0..=ranges[0].1 {
            let i = iy * nx + ix;
            out.original.push(values[i]);
            out.shifted.push(values[i + stride]);
            out.weights.push(line_weights[0][ix - ranges[0].0] * wy);
        }
    }
    Ok(out)
}

/// Number of whole cells along `axis` needed to clear distance `h` from the boundary.
fn steps_for(grid: &GridSpec, axis: usize, h: f64) -> usize {
    let s = h / grid.spacing(axis);
    let r = s.round();
    if (s - r).abs() < 1e-9 * s.max(1.0) {
        r as usize
    } else {
        s.ceil() as usize
    }
}

pub fn shift_restrict(u: &ScalarField, axis: usize, steps: usize) -> Result<ShiftedRestriction> {
    shift_values(u.grid(), u.values(), axis, steps)
}

/// `(min(u+, m), min(u-, m))`; `m` may be `f64::INFINITY`.
pub fn truncate_parts(u: &ScalarField, m: f64) -> Result<(ScalarField, ScalarField)> {
    if !(m > 0.0) {
        return Err(Error::domain(format!("truncation level must be positive, got {m}")));
    }
    Ok((u.map(|v| v.max(0.0).min(m))?, u.map(|v| (-v).max(0.0).min(m))?))
}

fn grid_header(grid: &GridSpec) -> Vec<String> {
    let mut lines = vec![format!("grid={}", grid.kind()), format!("dim={}", grid.dim())];
    match grid.kind() {
        GridKind::Rectangle => {
            let cells: Vec<String> = grid.cells().iter().map(|c| c.to_string()).collect();
            let lengths: Vec<String> = grid.lengths().iter().map(|&l| format_float(l)).collect();
            lines.push(format!("cells={}", cells.join(",")));
            lines.push(format!("lengths={}", lengths.join(",")));
        }
        GridKind::RadialBall => {
            lines.push(format!("nodes={}", grid.len()));
            lines.push(format!("r_min={}", format_float(grid.r_min())));
        }
    }
    lines
}

fn coordinate_columns(grid: &GridSpec) -> &'static [&'static str] {
    match (grid.kind(), grid.dim()) {
        (GridKind::RadialBall, _) => &["r"],
        (GridKind::Rectangle, 1) => &["x"],
        _ => &["x", "y"],
    }
}

/// Writes a field as CSV: `#`-prefixed grid metadata, then coordinate columns and `value`.
pub fn write_field_csv<W: Write>(u: &ScalarField, mut out: W) -> std::io::Result<()> {
    for line in grid_header(u.grid()) {
        writeln!(out, "# {line}")?;
    }
    let cols = coordinate_columns(u.grid());
    writeln!(out, "{},value", cols.join(","))?;
    for (i, v) in u.values().iter().enumerate() {
        let c = u.grid().coords(i);
        for x in &c[..cols.len()] {
            write!(out, "{},", format_float(*x))?;
        }
        writeln!(out, "{}", format_float(*v))?;
    }
    Ok(())
}

fn parse_header_value<'a>(header: &'a [(String, String)], key: &str) -> Result<&'a str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("missing `{key}` in field header")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid {what}: `{s}`")))
}

/// Largest grid a field file may describe; keeps malformed headers from
/// requesting huge allocations.
const MAX_FILE_NODES: usize = 1 << 22;

/// Parses the output of [`write_field_csv`], rebuilding the grid from the header.
pub fn read_field_csv(text: &str) -> Result<ScalarField> {
    let mut header = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else if !line.trim().is_empty() {
            body.push_str(line);
            body.push('\n');
        }
    }
    let dim: usize = parse_num(parse_header_value(&header, "dim")?, "dim")?;
    let grid = match parse_header_value(&header, "grid")? {
        "rectangle" => {
            let cells: Vec<usize> = parse_header_value(&header, "cells")?
                .split(',')
                .map(|s| parse_num(s, "cell count"))
                .collect::<Result<_>>()?;
            let lengths: Vec<f64> = parse_header_value(&header, "lengths")?
                .split(',')
                .map(|s| parse_num(s, "length"))
                .collect::<Result<_>>()?;
            if cells.len() != dim {
                return Err(Error::Parse(format!("{} cell counts for dim {dim}", cells.len())));
            }
            let nodes = cells
                .iter()
                .try_fold(1usize, |acc, &c| acc.checked_mul(c.checked_add(1)?));
            if nodes.is_none_or(|n| n > MAX_FILE_NODES) {
                return Err(Error::Parse("grid too large".into()));
            }
            GridSpec::rectangle(&cells, &lengths).map_err(|e| Error::Parse(e.to_string()))?
        }
        "radial" => {
            let nodes: usize = parse_num(parse_header_value(&header, "nodes")?, "node count")?;
            let r_min: f64 = parse_num(parse_header_value(&header, "r_min")?, "r_min")?;
            if nodes > MAX_FILE_NODES || dim > 64 {
                return Err(Error::Parse("grid too large".into()));
            }
            GridSpec::radial(dim, nodes, r_min).map_err(|e| Error::Parse(e.to_string()))?
        }
        other => return Err(Error::Parse(format!("unknown grid kind `{other}`"))),
    };
    let cols = coordinate_columns(&grid);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let names: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected: Vec<String> = cols
        .iter()
        .map(|s| s.to_string())
        .chain(["value".to_string()])
        .collect();
    if names != expected {
        return Err(Error::Parse(format!("expected columns {expected:?}, found {names:?}")));
    }
    let mut values = Vec::with_capacity(grid.len());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if i >= grid.len() {
            return Err(Error::Parse(format!("more rows than the {} grid nodes", grid.len())));
        }
        if rec.len() != expected.len() {
            return Err(Error::Parse(format!("row {i} has {} fields", rec.len())));
        }
        let c = grid.coords(i);
        for (k, x) in c[..cols.len()].iter().enumerate() {
            let got: f64 = parse_num(&rec[k], "coordinate")?;
            if !((got - x).abs() <= 1e-9 * x.abs().max(1.0)) {
                return Err(Error::Parse(format!(
                    "row {i}: coordinate {got} does not match grid node {x}"
                )));
            }
        }
        values.push(parse_num(&rec[cols.len()], "value")?);
    }
    if values.len() != grid.len() {
        return Err(Error::Parse(format!(
            "{} rows for {} grid nodes",
            values.len(),
            grid.len()
        )));
    }
    ScalarField::new(grid, values).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sq(n: usize) -> Arc<GridSpec> {
        GridSpec::unit_square(n).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::unit_square(4).is_err());
        assert!(GridSpec::rectangle(&[16, 16, 16], &[1.0, 1.0, 1.0]).is_err());
        assert!(GridSpec::rectangle(&[16], &[0.0]).is_err());
        assert!(GridSpec::radial(2, 100, 0.0).is_err());
        assert!(GridSpec::radial(2, 4, 1e-4).is_err());
    }

    #[test]
    fn sphere_measures() {
        assert_eq!(sphere_measure(1), 2.0);
        assert!((sphere_measure(2) - 2.0 * PI).abs() < 1e-15);
        assert!((sphere_measure(3) - 4.0 * PI).abs() < 1e-14);
        assert!((sphere_measure(4) - 2.0 * PI * PI).abs() < 1e-13);
    }

    #[test]
    fn radial_nodes_increase() {
        let g = GridSpec::radial(2, 200, DEFAULT_R_MIN).unwrap();
        assert!(g.radii().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.radii()[0], DEFAULT_R_MIN);
        assert_eq!(*g.radii().last().unwrap(), 1.0);
        assert!(g.elements().len() == 199);
    }

    #[test]
    fn integrate_constants_and_radial_moments() {
        let one = ScalarField::constant(sq(64), 1.0).unwrap();
        assert!((integrate(&one) - 1.0).abs() < 1e-12);

        let g = GridSpec::radial(2, 512, DEFAULT_R_MIN).unwrap();
        let one = ScalarField::constant(g.clone(), 1.0).unwrap();
        assert!((integrate(&one) - PI).abs() < 1e-6);
        let r = ScalarField::from_fn(g.clone(), |c| c[0]).unwrap();
        // hat-function moments integrate piecewise-linear data exactly
        let exact = 2.0 * PI / 3.0 * (1.0 - DEFAULT_R_MIN.powi(3));
        assert!((integrate(&r) - exact).abs() < 1e-12);

        let g3 = GridSpec::radial(3, 256, DEFAULT_R_MIN).unwrap();
        let one = ScalarField::constant(g3, 1.0).unwrap();
        assert!((integrate(&one) - 4.0 * PI / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_exact_on_affine_and_quadratic() {
        let g = sq(64);
        let u = ScalarField::from_fn(g.clone(), |c| 3.0 * c[0] + 2.0).unwrap();
        let du = gradient(&u);
        for i in 0..g.len() {
            assert!((du.component(0)[i] - 3.0).abs() < 1e-11);
            assert!(du.component(1)[i].abs() < 1e-11);
        }
        let u = ScalarField::from_fn(g.clone(), |c| 0.5 * (c[0] * c[0] + c[1] * c[1])).unwrap();
        let du = gradient(&u);
        let err = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                (du.component(0)[i] - c[0]).abs().max((du.component(1)[i] - c[1]).abs())
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        let c = ScalarField::constant(g.clone(), 7.0).unwrap();
        assert!(gradient(&c).component(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hessian_exact_on_quadratic() {
        let g = sq(32);
        let u = ScalarField::from_fn(g.clone(), |c| 0.5 * (c[0] * c[0] + c[1] * c[1])).unwrap();
        let h = hessian(&u);
        for i in 0..g.len() {
            let m = h.matrix(i);
            for (k, e) in [1.0, 0.0, 0.0, 1.0].iter().enumerate() {
                assert!((m[k] - e).abs() < 1e-9, "node {i} entry {k}: {}", m[k]);
            }
        }
        let lin = ScalarField::from_fn(g.clone(), |c| 2.0 * c[0] - c[1]).unwrap();
        let h = hessian(&lin);
        assert!((0..g.len()).all(|i| h.frobenius_sq(i) < 1e-16));
    }

    #[test]
    fn radial_hessian_of_power_converges_at_second_order() {
        let alpha = 1.5;
        let errs: Vec<f64> = [200usize, 400, 800]
            .iter()
            .map(|&n| {
                let g = GridSpec::radial(2, n, 1e-2).unwrap();
                let u = ScalarField::from_fn(g.clone(), |c| c[0].powf(alpha)).unwrap();
                let h = hessian(&u);
                (1..n - 1)
                    .filter(|&i| g.radii()[i] > 0.1)
                    .map(|i| {
                        let r = g.radii()[i];
                        let m = h.matrix(i);
                        let e1 = alpha * (alpha - 1.0) * r.powf(alpha - 2.0);
                        let e2 = alpha * r.powf(alpha - 2.0);
                        ((m[0] - e1).abs()).max((m[3] - e2).abs())
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.8, "rate {rate} from {errs:?}");
        }
    }

    #[test]
    fn p_flux_divergence_vanishes_on_constants_and_affine_interior() {
        let g = sq(32);
        let c = ScalarField::constant(g.clone(), 1.5).unwrap();
        assert!(p_flux_divergence(&c, 3.0, 0.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let lin = ScalarField::from_fn(g.clone(), |c| 0.7 * c[0] - 0.2 * c[1]).unwrap();
        let d = p_flux_divergence(&lin, 3.0, 0.0).unwrap();
        let n = g.nodes_per_axis(0);
        for iy in 1..n - 1 {
            for ix in 1..n - 1 {
                assert!(d.values()[g.index(ix, iy)].abs() < 1e-10);
            }
        }
        // the boundary flux leaves through the Neumann boundary: conservation
        assert!(integrate(&d).abs() < 1e-10);
    }

    #[test]
    fn shift_restrict_examples() {
        let g = sq(64);
        let u = ScalarField::from_fn(g.clone(), |c| 2.0 * c[0] + 1.0).unwrap();
        let s = shift_restrict(&u, 0, 1).unwrap();
        assert!(s
            .original
            .iter()
            .zip(&s.shifted)
            .all(|(a, b)| ((b - a) - 2.0 / 64.0).abs() < 1e-13));
        let s = shift_restrict(&u, 1, 16).unwrap();
        assert!((s.area() - 0.25).abs() < 1e-13);
        let c = ScalarField::constant(g.clone(), 3.0).unwrap();
        let s = shift_restrict(&c, 0, 5).unwrap();
        assert_eq!(s.difference_power_integral(2.0), 0.0);
        assert!(matches!(shift_restrict(&u, 0, 32), Err(Error::ShiftTooLarge { .. })));
        assert!(shift_restrict(&u, 0, 0).is_err());
    }

    #[test]
    fn truncation_examples() {
        let g = sq(8);
        let u = ScalarField::constant(g.clone(), -2.0).unwrap();
        let (p, m) = truncate_parts(&u, 1.0).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
        assert!(m.values().iter().all(|&v| v == 1.0));
        let u = ScalarField::constant(g.clone(), 5.0).unwrap();
        assert!(truncate_parts(&u, 3.0).unwrap().0.values().iter().all(|&v| v == 3.0));
        let u = ScalarField::from_fn(g, |c| c[0] - 0.3).unwrap();
        let (p, _) = truncate_parts(&u, f64::INFINITY).unwrap();
        assert!(p.values().iter().zip(u.values()).all(|(a, b)| *a == b.max(0.0)));
        assert!(truncate_parts(&u, 0.0).is_err());
    }

    #[test]
    fn field_csv_round_trip() {
        for g in [
            sq(8),
            GridSpec::rectangle(&[10], &[2.0]).unwrap(),
            GridSpec::radial(3, 16, 1e-3).unwrap(),
        ] {
            let u = ScalarField::from_fn(g, |c| (3.0 * c[0]).sin() + c[1] * 1e-7).unwrap();
            let mut buf = Vec::new();
            write_field_csv(&u, &mut buf).unwrap();
            let back = read_field_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
            assert_eq!(back.values(), u.values());
        }
    }

    #[test]
    fn field_csv_rejects_garbage() {
        assert!(read_field_csv("").is_err());
        assert!(read_field_csv("# grid=rectangle\n# dim=1\n# cells=8\n# lengths=1\nx,value\n0,1\n").is_err());
        assert!(read_field_csv("# grid=radial\n# dim=2\n# nodes=99999999999\n# r_min=0.1\nr,value\n").is_err());
    }

    #[test]
    fn integration_by_parts_defect_shrinks() {
        // ∫ div_p(u) v + ∫ Φ(∇u)·∇v = 0 holds exactly for the variational operator
        // with element gradients; the defect against nodal measurement gradients is O(h).
        let defects: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&n| {
                let g = sq(n);
                let u = ScalarField::from_fn(g.clone(), |c| (PI * c[0]).cos() * (2.0 * PI * c[1]).sin() + 0.3 * c[0])
                    .unwrap();
                let v = ScalarField::from_fn(g.clone(), |c| c[0] * c[0] + c[1].powi(3) + c[0] * c[1]).unwrap();
                let d = p_flux_divergence(&u, 3.0, 0.0).unwrap();
                let lhs = integrate(&d.zip_with(&v, |a, b| a * b).unwrap());
                let du = gradient(&u);
                let dv = gradient(&v);
                let flux: f64 = (0..g.len())
                    .map(|i| {
                        let gu = [du.component(0)[i], du.component(1)[i]];
                        let k = flux_coefficient(gu, 3.0, 0.0);
                        g.weights()[i] * k * (gu[0] * dv.component(0)[i] + gu[1] * dv.component(1)[i])
                    })
                    .sum();
                (lhs + flux).abs()
            })
            .collect();
        assert!(defects[2] < defects[0], "{defects:?}");
        assert!(defects[2] < 0.05);
    }

    proptest! {
        #[test]
        fn constant_gradient_has_zero_interior_flux_divergence(a in -3.0f64..3.0, b in -3.0f64..3.0, p in 2.1f64..5.0) {
            let g = sq(12);
            let u = ScalarField::from_fn(g.clone(), |c| a * c[0] + b * c[1]).unwrap();
            let d = p_flux_divergence(&u, p, 0.0).unwrap();
            let n = g.nodes_per_axis(0);
            for iy in 1..n - 1 {
                for ix in 1..n - 1 {
                    prop_assert!(d.values()[g.index(ix, iy)].abs() < 1e-9);
                }
            }
        }

        #[test]
        fn integrate_one_is_measure(n in 8usize..40, lx in 0.5f64..3.0, ly in 0.5f64..3.0) {
            let g = GridSpec::rectangle(&[n, n + 3], &[lx, ly]).unwrap();
            let one = ScalarField::constant(g, 1.0).unwrap();
            prop_assert!((integrate(&one) - lx * ly).abs() < 1e-12 * lx * ly);
        }
    }
}
