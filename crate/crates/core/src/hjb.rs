//! Monotone finite-difference policy iteration for the Bellman equation of the
//! diffusion control problem on a ball, with zero Dirichlet data.
//!
//! The discrete operator for vertex control `e_k` at an interior grid point is
//!
//! ```text
//! F_k = s c_k + sum_i b_i(x, e_k) D_i phi + 1/2 sum_i sigma_i^2(x, e_k) D_ii phi - gamma phi
//! ```
//!
//! where `s` is the queue excess `(e.x)^+` (or its smoothed version), `D_i` is
//! the one-sided difference picked by the sign of `b_i`, and `D_ii` the central
//! second difference. The Bellman equation is `min_k F_k = 0`. The integrand is
//! linear in the control, so minimizing over vertices is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::MSystem;
use crate::model::{norm, positive_excess, ControlVector, ScaledSystem};

pub const MAX_DIMS: usize = 3;

/// Hypercube grid `[-half_width, half_width]^dims` masked to the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
    pub ball_radius: f64,
}

impl GridSpec {
    pub fn new(dims: usize, half_width: f64, points_per_axis: usize, ball_radius: f64) -> Result<Self> {
        if !(1..=MAX_DIMS).contains(&dims) {
            return Err(Error::Config(format!("grid dimension must be 1..=3 (got {dims})")));
        }
        if points_per_axis < 3 || points_per_axis % 2 == 0 {
            return Err(Error::Config(format!(
                "points per axis must be odd and at least 3 (got {points_per_axis})"
            )));
        }
        if !(half_width > 0.0 && half_width.is_finite()) || !(ball_radius > 0.0) {
            return Err(Error::Config("grid half width and ball radius must be positive".into()));
        }
        if half_width > ball_radius * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "grid half width {half_width} exceeds the ball radius {ball_radius}"
            )));
        }
        Ok(GridSpec {
            dims,
            half_width,
            points_per_axis,
            ball_radius,
        })
    }

    /// Grid spanning the whole ball of `sys`.
    pub fn for_system(sys: &ScaledSystem, points_per_axis: usize) -> Result<Self> {
        let r = sys.ball()?.radius;
        Self::new(sys.class_count(), r, points_per_axis, r)
    }

    /// Grid on a smaller box; the domain becomes the box (intersected with the ball).
    pub fn inner_box(sys: &ScaledSystem, points_per_axis: usize, half_width: f64) -> Result<Self> {
        let r = sys.ball()?.radius;
        Self::new(sys.class_count(), half_width.min(r), points_per_axis, r)
    }

    pub fn is_inner_box(&self) -> bool {
        self.half_width < self.ball_radius
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dims as u32)
    }

    /// Radius used for inner-ball diagnostics.
    pub fn domain_radius(&self) -> f64 {
        self.half_width.min(self.ball_radius)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.points_per_axis.pow((self.dims - 1 - axis) as u32)
    }

    pub fn axis_coord(&self, j: usize) -> f64 {
        let centre = (self.points_per_axis - 1) / 2;
        (j as f64 - centre as f64) * self.spacing()
    }

    pub fn multi_index(&self, flat: usize) -> [usize; MAX_DIMS] {
        let mut idx = [0; MAX_DIMS];
        let mut rest = flat;
        for axis in (0..self.dims).rev() {
            idx[axis] = rest % self.points_per_axis;
            rest /= self.points_per_axis;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .take(self.dims)
            .fold(0, |acc, &j| acc * self.points_per_axis + j)
    }

    pub fn point(&self, flat: usize) -> [f64; MAX_DIMS] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; MAX_DIMS];
        for axis in 0..self.dims {
            x[axis] = self.axis_coord(idx[axis]);
        }
        x
    }

    /// Membership in the open solution domain.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        norm(x) < self.ball_radius && x.iter().all(|v| v.abs() < self.half_width)
    }

    /// Interior points are strictly inside the domain and off the grid edge,
    /// so all `2 dims` axis neighbours exist.
    pub fn is_interior(&self, flat: usize) -> bool {
        let idx = self.multi_index(flat);
        let last = self.points_per_axis - 1;
        idx[..self.dims].iter().all(|&j| j > 0 && j < last)
            && norm(&self.point(flat)[..self.dims]) < self.ball_radius
    }

    /// Nearest grid point, ties going to the smaller coordinate on each axis.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let h = self.spacing();
        let last = (self.points_per_axis - 1) as f64;
        let mut idx = [0usize; MAX_DIMS];
        for axis in 0..self.dims {
            let t = (x[axis] + self.half_width) / h;
            idx[axis] = (t - 0.5).ceil().clamp(0.0, last) as usize;
        }
        self.flat_index(&idx[..self.dims])
    }
}

/// Replacement for `(y)^+` in the Bellman operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Smoothing {
    #[default]
    None,
    /// The C^1 quadratic blend of slope parameter `a`.
    Quadratic { a: f64 },
}

impl Smoothing {
    #[inline]
    pub fn load(self, y: f64) -> f64 {
        match self {
            Smoothing::None => y.max(0.0),
            Smoothing::Quadratic { a } => smoothed_positive_part(a, y),
        }
    }
}

/// `y` above `1/(4a)`, zero below `-1/(4a)`, and `a y^2 + y/2 + 1/(16a)` between.
pub fn smoothed_positive_part(a: f64, y: f64) -> f64 {
    assert!(a > 0.0, "smoothing parameter must be positive");
    let edge = 0.25 / a;
    if y >= edge {
        y
    } else if y <= -edge {
        0.0
    } else {
        a * y * y + 0.5 * y + 1.0 / (16.0 * a)
    }
}

/// Discrete derivatives of the value function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub value: f64,
    pub forward: [f64; MAX_DIMS],
    pub backward: [f64; MAX_DIMS],
    pub second: [f64; MAX_DIMS],
}

impl Stencil {
    /// Stencil of a smooth function with exact derivatives.
    pub fn smooth(value: f64, gradient: &[f64], second: &[f64]) -> Self {
        let mut st = Stencil {
            value,
            forward: [0.0; MAX_DIMS],
            backward: [0.0; MAX_DIMS],
            second: [0.0; MAX_DIMS],
        };
        st.forward[..gradient.len()].copy_from_slice(gradient);
        st.backward[..gradient.len()].copy_from_slice(gradient);
        st.second[..second.len()].copy_from_slice(second);
        st
    }

    pub fn zero() -> Self {
        Stencil::smooth(0.0, &[], &[])
    }

    pub fn central(&self, axis: usize) -> f64 {
        0.5 * (self.forward[axis] + self.backward[axis])
    }

    fn upwind(&self, axis: usize, drift: f64) -> f64 {
        if drift > 0.0 {
            self.forward[axis]
        } else {
            self.backward[axis]
        }
    }
}

/// `sum_i b_i phi_i + 1/2 sum_i sigma_i^2 phi_ii`, with first differences
/// upwinded by the drift sign.
pub fn generator_apply(sys: &ScaledSystem, st: &Stencil, x: &[f64], u: &ControlVector) -> Result<f64> {
    let s = positive_excess(x);
    let mut acc = 0.0;
    for i in 0..sys.class_count() {
        let b = sys.drift_component(i, x[i], u[i], s);
        let v = sys.variance_component(i, x[i], u[i], s);
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "negative diffusion radicand {v:.6} for class {} at x = {x:?}",
                i + 1
            )));
        }
        acc += b * st.upwind(i, b) + 0.5 * v * st.second[i];
    }
    Ok(acc)
}

/// `F_k` for the vertex control of class `k` and load `s`.
fn vertex_operator(sys: &ScaledSystem, st: &Stencil, x: &[f64], k: usize, s: f64) -> Result<f64> {
    let mut acc = s * sys.cost(k) - sys.gamma() * st.value;
    for i in 0..sys.class_count() {
        let ui = if i == k { 1.0 } else { 0.0 };
        let b = sys.drift_component(i, x[i], ui, s);
        let v = sys.variance_component(i, x[i], ui, s);
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "negative diffusion radicand {v:.6} for class {} at x = {x:?}",
                i + 1
            )));
        }
        acc += b * st.upwind(i, b) + 0.5 * v * st.second[i];
    }
    Ok(acc)
}

/// Smallest class index attaining the minimum of the Bellman bracket.
pub fn minimizing_class(sys: &ScaledSystem, st: &Stencil, x: &[f64]) -> usize {
    minimizing_class_with(sys, st, x, Smoothing::None)
}

pub fn minimizing_class_with(sys: &ScaledSystem, st: &Stencil, x: &[f64], smoothing: Smoothing) -> usize {
    let s = smoothing.load(x.iter().sum());
    if s == 0.0 {
        return 0;
    }
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for k in 0..sys.class_count() {
        // outside the valid region every candidate is equally undefined
        let val = vertex_operator(sys, st, x, k, s).unwrap_or(f64::INFINITY);
        if val < best_val {
            best = k;
            best_val = val;
        }
    }
    best
}

/// `min_k F_k` at `x` for the given stencil.
pub fn bellman_residual(sys: &ScaledSystem, st: &Stencil, x: &[f64], smoothing: Smoothing) -> Result<f64> {
    let s = smoothing.load(x.iter().sum());
    let mut best = f64::INFINITY;
    for k in 0..sys.class_count() {
        best = best.min(vertex_operator(sys, st, x, k, s)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LinearSolver {
    /// Sparse LU factorization of each policy-evaluation system.
    #[default]
    Direct,
    /// Gauss-Seidel sweeps warm-started from the previous value function.
    GaussSeidel,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Sup-norm tolerance on the Bellman residual. Defaults to
    /// `1e-8 (e.c) radius`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub smoothing: Smoothing,
    pub linear: LinearSolver,
    /// Inner-ball fraction used for the stored gradient report.
    pub gradient_theta: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: None,
            max_iter: 100,
            smoothing: Smoothing::None,
            linear: LinearSolver::Direct,
            gradient_theta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub theta: f64,
    /// Largest Euclidean norm of the central-difference gradient.
    pub max_grad: f64,
    /// Largest Frobenius norm of the central-difference Hessian.
    pub max_hess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    pub system: ScaledSystem,
    pub grid: GridSpec,
    pub smoothing: Smoothing,
    /// Value function on every grid point, row-major with axis 1 slowest.
    pub phi: Vec<f64>,
    /// Minimizing class per grid point; 0 on the boundary.
    pub policy: Vec<usize>,
    pub residual_sup: f64,
    pub tol: f64,
    pub iterations: usize,
    pub gradients: GradientReport,
}

pub fn default_tol(sys: &ScaledSystem) -> Result<f64> {
    Ok(1e-8 * sys.params.cost_sum() * sys.ball()?.radius)
}

pub fn solve_hjb(sys: &ScaledSystem, grid: &GridSpec, tol: Option<f64>, max_iter: usize) -> Result<HjbSolution> {
    let opts = SolverOptions {
        tol,
        max_iter,
        ..SolverOptions::default()
    };
    solve_with(sys, grid, &opts)
}

pub fn solve_hjb_smoothed(
    sys: &ScaledSystem,
    grid: &GridSpec,
    a: f64,
    tol: Option<f64>,
    max_iter: usize,
) -> Result<HjbSolution> {
    if !(a > 0.0) {
        return Err(Error::Config(format!("smoothing parameter must be positive (got {a})")));
    }
    let opts = SolverOptions {
        tol,
        max_iter,
        smoothing: Smoothing::Quadratic { a },
        ..SolverOptions::default()
    };
    solve_with(sys, grid, &opts)
}

/// Interior points of a grid with their neighbour rows.
struct Layout {
    flats: Vec<usize>,
    coords: Vec<[f64; MAX_DIMS]>,
    /// `[axis][0 = minus, 1 = plus]` neighbour row, `None` on the boundary.
    neighbours: Vec<[[Option<usize>; 2]; MAX_DIMS]>,
}

impl Layout {
    fn new(grid: &GridSpec) -> Self {
        let total = grid.len();
        let mut row_of = vec![usize::MAX; total];
        let mut flats = Vec::new();
        for flat in 0..total {
            if grid.is_interior(flat) {
                row_of[flat] = flats.len();
                flats.push(flat);
            }
        }
        let coords = flats.iter().map(|&f| grid.point(f)).collect();
        let neighbours = flats
            .iter()
            .map(|&f| {
                let mut nb = [[None; 2]; MAX_DIMS];
                for (axis, slot) in nb.iter_mut().enumerate().take(grid.dims) {
                    let stride = grid.stride(axis);
                    let lookup = |g: usize| (row_of[g] != usize::MAX).then_some(row_of[g]);
                    *slot = [lookup(f - stride), lookup(f + stride)];
                }
                nb
            })
            .collect();
        Layout {
            flats,
            coords,
            neighbours,
        }
    }

    fn stencil(&self, row: usize, values: &[f64], dims: usize, h: f64) -> Stencil {
        let v = values[row];
        let mut st = Stencil {
            value: v,
            forward: [0.0; MAX_DIMS],
            backward: [0.0; MAX_DIMS],
            second: [0.0; MAX_DIMS],
        };
        for axis in 0..dims {
            let [lo, hi] = self.neighbours[row][axis];
            let minus = lo.map_or(0.0, |r| values[r]);
            let plus = hi.map_or(0.0, |r| values[r]);
            st.forward[axis] = (plus - v) / h;
            st.backward[axis] = (v - minus) / h;
            st.second[axis] = (plus - 2.0 * v + minus) / (h * h);
        }
        st
    }
}

fn assemble(
    sys: &ScaledSystem,
    grid: &GridSpec,
    layout: &Layout,
    policy: &[usize],
    smoothing: Smoothing,
) -> Result<MSystem> {
    let h = grid.spacing();
    let gamma = sys.gamma();
    let mut m = MSystem::with_capacity(layout.flats.len(), layout.flats.len() * 2 * grid.dims);
    let mut entries = Vec::with_capacity(2 * MAX_DIMS);
    for (row, x) in layout.coords.iter().enumerate() {
        let x = &x[..grid.dims];
        let k = policy[row];
        let s = smoothing.load(x.iter().sum());
        let mut diag = gamma;
        entries.clear();
        for axis in 0..grid.dims {
            let ui = if axis == k { 1.0 } else { 0.0 };
            let b = sys.drift_component(axis, x[axis], ui, s);
            let v = sys.variance_component(axis, x[axis], ui, s);
            if v < 0.0 {
                return Err(Error::Domain(format!(
                    "negative diffusion radicand {v:.6} for class {} at grid point {x:?}; \
                     the grid leaves the region where the diffusion is defined",
                    axis + 1
                )));
            }
            let diffusive = 0.5 * v / (h * h);
            let plus_w = b.max(0.0) / h + diffusive;
            let minus_w = (-b).max(0.0) / h + diffusive;
            diag += plus_w + minus_w;
            let [lo, hi] = layout.neighbours[row][axis];
            if let Some(r) = hi {
                entries.push((r, plus_w));
            }
            if let Some(r) = lo {
                entries.push((r, minus_w));
            }
        }
        m.push_row(diag, entries.iter().copied(), s * sys.cost(k));
    }
    if let Err(row) = m.check_m_matrix() {
        return Err(Error::Invariant(format!(
            "scheme is not diagonally dominant at grid point {:?}",
            &layout.coords[row][..grid.dims]
        )));
    }
    Ok(m)
}

pub fn solve_with(sys: &ScaledSystem, grid: &GridSpec, opts: &SolverOptions) -> Result<HjbSolution> {
    let dims = sys.class_count();
    if dims != grid.dims {
        return Err(Error::Config(format!(
            "grid has {} axes but the system has {dims} classes",
            grid.dims
        )));
    }
    let tol = match opts.tol {
        Some(t) => t,
        None => default_tol(sys)?,
    };
    let h = grid.spacing();
    let layout = Layout::new(grid);
    let rows = layout.flats.len();
    let x_of = |row: usize| &layout.coords[row][..dims];

    // start from the myopic policy: cheapest class
    let mut policy: Vec<usize> = (0..rows)
        .map(|row| minimizing_class_with(sys, &Stencil::zero(), x_of(row), opts.smoothing))
        .collect();
    let mut values = vec![0.0; rows];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let switch_margin = 1e-3 * tol;

    while iterations < opts.max_iter {
        iterations += 1;
        let system = assemble(sys, grid, &layout, &policy, opts.smoothing)?;
        match opts.linear {
            LinearSolver::Direct => values = system.solve_direct()?,
            LinearSolver::GaussSeidel => {
                let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                system.gauss_seidel(&mut values, 1e-10 * scale * sys.gamma(), 10_000_000)?;
            }
        }
        let peak = values.iter().fold(0.0f64, |a, &v| a.max(v));
        if let Some(bad) = values.iter().position(|&v| v < -1e-9 * (1.0 + peak)) {
            return Err(Error::Invariant(format!(
                "policy evaluation produced phi = {} < 0 at {:?}",
                values[bad],
                x_of(bad)
            )));
        }
        for v in &mut values {
            *v = v.max(0.0);
        }

        let mut changed = false;
        residual = 0.0;
        for row in 0..rows {
            let x = x_of(row);
            let st = layout.stencil(row, &values, dims, h);
            let s = opts.smoothing.load(x.iter().sum());
            let current = vertex_operator(sys, &st, x, policy[row], s)?;
            let mut best = current;
            let mut best_k = policy[row];
            for k in 0..dims {
                let f = vertex_operator(sys, &st, x, k, s)?;
                if f < best {
                    best = f;
                    best_k = k;
                }
            }
            residual = f64::max(residual, best.abs());
            if best_k != policy[row] && best < current - switch_margin {
                policy[row] = best_k;
                changed = true;
            }
        }
        if !changed && residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NonConvergence {
            iterations,
            residual,
        });
    }

    let mut phi = vec![0.0; grid.len()];
    let mut final_policy = vec![0usize; grid.len()];
    for (row, &flat) in layout.flats.iter().enumerate() {
        phi[flat] = values[row];
        let st = layout.stencil(row, &values, dims, h);
        final_policy[flat] = minimizing_class_with(sys, &st, x_of(row), opts.smoothing);
    }
    let mut sol = HjbSolution {
        system: sys.clone(),
        grid: grid.clone(),
        smoothing: opts.smoothing,
        phi,
        policy: final_policy,
        residual_sup: residual,
        tol,
        iterations,
        gradients: GradientReport {
            theta: opts.gradient_theta,
            max_grad: 0.0,
            max_hess: 0.0,
        },
    };
    sol.gradients = sol.gradient_report(opts.gradient_theta);
    Ok(sol)
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    format: String,
    system: ScaledSystem,
    grid: GridSpec,
    inner_box: bool,
    smoothing: Smoothing,
    residual_sup: f64,
    tol: f64,
    iterations: usize,
    gradients: GradientReport,
    /// Row-major, axis 1 slowest.
    phi: Vec<f64>,
    /// One-based class labels.
    policy: Vec<usize>,
}

const SOLUTION_FORMAT: &str = "hwtrack-hjb-solution/1";

impl HjbSolution {
    pub fn interior_points(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.grid.len()).filter(|&f| self.grid.is_interior(f))
    }

    /// Finite-difference stencil at an interior grid point.
    pub fn stencil_at(&self, flat: usize) -> Option<Stencil> {
        if !self.grid.is_interior(flat) {
            return None;
        }
        let h = self.grid.spacing();
        let v = self.phi[flat];
        let mut st = Stencil {
            value: v,
            forward: [0.0; MAX_DIMS],
            backward: [0.0; MAX_DIMS],
            second: [0.0; MAX_DIMS],
        };
        for axis in 0..self.grid.dims {
            let stride = self.grid.stride(axis);
            let minus = self.phi[flat - stride];
            let plus = self.phi[flat + stride];
            st.forward[axis] = (plus - v) / h;
            st.backward[axis] = (v - minus) / h;
            st.second[axis] = (plus - 2.0 * v + minus) / (h * h);
        }
        Some(st)
    }

    /// Discrete Bellman residual `min_k F_k` at an interior point.
    pub fn residual_at(&self, flat: usize) -> Result<f64> {
        let st = self
            .stencil_at(flat)
            .ok_or_else(|| Error::Domain(format!("grid point {flat} is not interior")))?;
        let x = self.grid.point(flat);
        bellman_residual(&self.system, &st, &x[..self.grid.dims], self.smoothing)
    }

    /// Multilinear interpolation of the value function; zero outside the domain.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        if !self.grid.in_domain(x) {
            return 0.0;
        }
        let g = &self.grid;
        let h = g.spacing();
        let last = g.points_per_axis - 1;
        let mut base = [0usize; MAX_DIMS];
        let mut frac = [0.0; MAX_DIMS];
        for axis in 0..g.dims {
            let t = ((x[axis] + g.half_width) / h).clamp(0.0, last as f64);
            let j = (t.floor() as usize).min(last - 1);
            base[axis] = j;
            frac[axis] = t - j as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dims) {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_DIMS];
            for axis in 0..g.dims {
                let up = (corner >> axis) & 1 == 1;
                idx[axis] = base[axis] + usize::from(up);
                w *= if up { frac[axis] } else { 1.0 - frac[axis] };
            }
            if w != 0.0 {
                acc += w * self.phi[g.flat_index(&idx[..g.dims])];
            }
        }
        acc
    }

    /// Sup of central-difference `|D phi|` and `|D^2 phi|` over grid points
    /// with `|x| <= theta * radius`.
    pub fn gradient_report(&self, theta: f64) -> GradientReport {
        let g = &self.grid;
        let h = g.spacing();
        let limit = theta * g.domain_radius();
        let last = g.points_per_axis - 1;
        let mut max_grad = 0.0f64;
        let mut max_hess = 0.0f64;
        for flat in 0..g.len() {
            let idx = g.multi_index(flat);
            if idx[..g.dims].iter().any(|&j| j == 0 || j == last) {
                continue;
            }
            let x = g.point(flat);
            if norm(&x[..g.dims]) > limit {
                continue;
            }
            let at = |offsets: &[(usize, isize)]| {
                let mut f = flat as isize;
                for &(axis, d) in offsets {
                    f += d * g.stride(axis) as isize;
                }
                self.phi[f as usize]
            };
            let mut grad2 = 0.0;
            let mut hess2 = 0.0;
            for i in 0..g.dims {
                let d = (at(&[(i, 1)]) - at(&[(i, -1)])) / (2.0 * h);
                grad2 += d * d;
                let dd = (at(&[(i, 1)]) - 2.0 * self.phi[flat] + at(&[(i, -1)])) / (h * h);
                hess2 += dd * dd;
                for j in (i + 1)..g.dims {
                    let cross = (at(&[(i, 1), (j, 1)]) - at(&[(i, 1), (j, -1)]) - at(&[(i, -1), (j, 1)])
                        + at(&[(i, -1), (j, -1)]))
                        / (4.0 * h * h);
                    hess2 += 2.0 * cross * cross;
                }
            }
            max_grad = max_grad.max(grad2.sqrt());
            max_hess = max_hess.max(hess2.sqrt());
        }
        GradientReport {
            theta,
            max_grad,
            max_hess,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SolutionFile {
            format: SOLUTION_FORMAT.into(),
            system: self.system.clone(),
            grid: self.grid.clone(),
            inner_box: self.grid.is_inner_box(),
            smoothing: self.smoothing,
            residual_sup: self.residual_sup,
            tol: self.tol,
            iterations: self.iterations,
            gradients: self.gradients,
            phi: self.phi.clone(),
            policy: self.policy.iter().map(|k| k + 1).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SolutionFile = serde_json::from_str(text)?;
        if file.format != SOLUTION_FORMAT {
            return Err(Error::Config(format!("unknown solution format {:?}", file.format)));
        }
        let len = file.grid.len();
        if file.phi.len() != len || file.policy.len() != len {
            return Err(Error::Config(format!(
                "solution arrays have {} / {} entries, grid has {len}",
                file.phi.len(),
                file.policy.len()
            )));
        }
        let classes = file.system.class_count();
        if file.policy.iter().any(|&k| k == 0 || k > classes) {
            return Err(Error::Config("policy labels must be in 1..=I".into()));
        }
        Ok(HjbSolution {
            system: file.system,
            grid: file.grid,
            smoothing: file.smoothing,
            phi: file.phi,
            policy: file.policy.into_iter().map(|k| k - 1).collect(),
            residual_sup: file.residual_sup,
            tol: file.tol,
            iterations: file.iterations,
            gradients: file.gradients,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// State-to-class map: the minimizing class at the nearest grid point inside
/// the solution domain, class 0 everywhere else.
#[derive(Debug, Clone)]
pub struct TrackingFunction {
    pub solution: HjbSolution,
}

impl TrackingFunction {
    pub fn new(solution: HjbSolution) -> Self {
        TrackingFunction { solution }
    }

    pub fn class_count(&self) -> usize {
        self.solution.grid.dims
    }

    pub fn eval(&self, x: &[f64]) -> usize {
        let grid = &self.solution.grid;
        if !grid.in_domain(x) {
            return 0;
        }
        self.solution.policy[grid.nearest(x)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassParams, Regime, SystemParams};

    fn single(n: u32) -> ScaledSystem {
        let p = SystemParams::new(
            vec![ClassParams { a: 1.0, mu: 1.0, c: 1.0 }],
            1.0,
            1.0,
            1.0,
            1,
            Regime::NonPaper,
        )
        .unwrap();
        ScaledSystem::new(p, n).unwrap()
    }

    fn three_class() -> ScaledSystem {
        let p = SystemParams::new(
            vec![
                ClassParams { a: 0.3, mu: 1.0, c: 2.0 },
                ClassParams { a: 0.3, mu: 1.5, c: 1.0 },
                ClassParams { a: 0.4, mu: 2.0, c: 3.0 },
            ],
            0.5,
            1.0,
            0.2,
            1,
            Regime::NonPaper,
        )
        .unwrap();
        ScaledSystem::new(p, 40).unwrap()
    }

    #[test]
    fn smoothing_branches() {
        assert_eq!(smoothed_positive_part(1.0, 0.0), 0.0625);
        assert_eq!(smoothed_positive_part(1.0, 1.0), 1.0);
        assert_eq!(smoothed_positive_part(1.0, -1.0), 0.0);
        // continuity at both branch points
        for a in [1.0, 10.0, 1000.0] {
            let e = 1.0 / (4.0 * a);
            let inside = 1.0 - 1e-12;
            assert!((smoothed_positive_part(a, e * inside) - e).abs() < 1e-12);
            assert!(smoothed_positive_part(a, -e * inside).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_on_simple_functions() {
        let sys = single(50);
        let u = ControlVector::vertex(1, 0);
        for x in [-3.0, 0.0, 2.5] {
            let constant = generator_apply(&sys, &Stencil::smooth(4.0, &[0.0], &[0.0]), &[x], &u).unwrap();
            assert_eq!(constant, 0.0);
            let linear = generator_apply(&sys, &Stencil::smooth(x, &[1.0], &[0.0]), &[x], &u).unwrap();
            assert!((linear - sys.drift(&[x], &u)[0]).abs() < 1e-12);
        }
        let quad = generator_apply(&sys, &Stencil::smooth(0.0, &[0.0], &[2.0]), &[0.0], &u).unwrap();
        assert!((quad - (sys.lambda_total + 50.0)).abs() < 1e-9);
    }

    #[test]
    fn residual_of_zero_function() {
        let sys = three_class();
        let zero = Stencil::zero();
        let r = bellman_residual(&sys, &zero, &[-1.0, 0.5, 0.2], Smoothing::None).unwrap();
        assert_eq!(r, 0.0);
        let r = bellman_residual(&sys, &zero, &[1.0, 0.5, 0.5], Smoothing::None).unwrap();
        assert!((r - 2.0 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn minimizing_class_rules() {
        let sys = three_class();
        let zero = Stencil::zero();
        assert_eq!(minimizing_class(&sys, &zero, &[-1.0, 0.0, 0.5]), 0);
        // c = (2, 1, 3)
        assert_eq!(minimizing_class(&sys, &zero, &[1.0, 1.0, 1.0]), 1);
        // exact tie between the last two classes
        let p = SystemParams::new(
            vec![
                ClassParams { a: 0.3, mu: 1.0, c: 2.0 },
                ClassParams { a: 0.3, mu: 1.5, c: 1.0 },
                ClassParams { a: 0.4, mu: 2.0, c: 1.0 },
            ],
            0.5,
            1.0,
            0.2,
            1,
            Regime::NonPaper,
        )
        .unwrap();
        let tied = ScaledSystem::new(p, 40).unwrap();
        assert_eq!(minimizing_class(&tied, &zero, &[1.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn grid_geometry() {
        let g = GridSpec::new(2, 2.0, 5, 2.0).unwrap();
        assert_eq!(g.spacing(), 1.0);
        assert_eq!(g.point(12), [0.0, 0.0, 0.0]);
        assert_eq!(g.flat_index(&[1, 3]), 8);
        assert_eq!(g.multi_index(8)[..2], [1, 3]);
        assert!(g.is_interior(12));
        assert!(!g.is_interior(0));
        // (1, 1) has norm sqrt 2 < 2: interior; (-1, 1) too
        assert!(g.is_interior(g.flat_index(&[3, 3])));
        // midpoint ties go to the smaller coordinate
        assert_eq!(g.nearest(&[0.5, 0.0]), g.flat_index(&[2, 2]));
        assert_eq!(g.nearest(&[0.51, -0.5]), g.flat_index(&[3, 1]));
        assert!(GridSpec::new(2, 2.0, 4, 2.0).is_err());
        assert!(GridSpec::new(4, 2.0, 5, 2.0).is_err());
        assert!(GridSpec::new(2, 3.0, 5, 2.0).is_err());
    }

    #[test]
    fn tracking_outside_domain_is_first_class() {
        let sys = three_class();
        let grid = GridSpec::for_system(&sys, 11).unwrap();
        let sol = solve_hjb(&sys, &grid, None, 50).unwrap();
        let tf = TrackingFunction::new(sol);
        let r = tf.solution.grid.ball_radius;
        assert_eq!(tf.eval(&[r, 0.0, 0.0]), 0);
        assert_eq!(tf.eval(&[r, r, r]), 0);
        for flat in tf.solution.interior_points().collect::<Vec<_>>() {
            let x = tf.solution.grid.point(flat);
            assert_eq!(tf.eval(&x), tf.solution.policy[flat]);
        }
    }

    #[test]
    fn solution_json_round_trip() {
        let sys = single(20);
        let grid = GridSpec::for_system(&sys, 41).unwrap();
        let sol = solve_hjb(&sys, &grid, None, 50).unwrap();
        let back = HjbSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back, sol);
        assert!(HjbSolution::from_json("{}").is_err());
    }

    #[test]
    fn solvers_agree() {
        let sys = single(20);
        let grid = GridSpec::for_system(&sys, 101).unwrap();
        let direct = solve_hjb(&sys, &grid, None, 50).unwrap();
        let opts = SolverOptions {
            linear: LinearSolver::GaussSeidel,
            ..SolverOptions::default()
        };
        let gs = solve_with(&sys, &grid, &opts).unwrap();
        let gap = direct
            .phi
            .iter()
            .zip(&gs.phi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8, "gap {gap}");
        assert_eq!(direct.policy, gs.policy);
    }

    #[test]
    fn zero_value_has_zero_gradients() {
        let sys = single(20);
        let grid = GridSpec::for_system(&sys, 21).unwrap();
        let mut sol = solve_hjb(&sys, &grid, None, 50).unwrap();
        sol.phi.iter_mut().for_each(|v| *v = 0.0);
        let rep = sol.gradient_report(0.5);
        assert_eq!((rep.max_grad, rep.max_hess), (0.0, 0.0));
    }

    #[test]
    fn grid_beyond_valid_region_is_domain_error() {
        // huge kappa: the ball reaches states with negative variance
        let p = SystemParams::new(
            vec![ClassParams { a: 1.0, mu: 1.0, c: 1.0 }],
            1.0,
            1.0,
            10.0,
            1,
            Regime::NonPaper,
        )
        .unwrap();
        let sys = ScaledSystem::new(p, 10).unwrap();
        let grid = GridSpec::for_system(&sys, 101).unwrap();
        assert!(matches!(solve_hjb(&sys, &grid, None, 20), Err(Error::Domain(_))));
    }
}
