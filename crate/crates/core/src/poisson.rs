//! Poisson equation `L^y u = -rhs` for the frozen generator, centered
//! against the invariant density, and the truncated fluctuation split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldRole, Grid, GridField};
use crate::linalg::{solve_with_dense_row, BandMatrix};
use crate::model::ModelSpec;
use crate::operator::{check_grid, poisson_operator, NodeCoefficients};
use crate::stationary::{derivative, derivative4};

/// Largest admissible `|∫ rhs π|` per component.
pub const FREDHOLM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoissonMethod {
    /// Quadrature of the explicit one-dimensional solution.
    ClosedForm1d,
    /// Finite differences with one row replaced by the centering constraint.
    GridSolve,
}

/// Centered solution `u` of `L^y u = -rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub y: Vec<f64>,
    pub method: PoissonMethod,
    /// `p` components per node.
    pub u: GridField,
    /// `p × d` row-major per node: `∂_i u_c` at `c·d + i`.
    pub grad_u: GridField,
    /// Max interior value of `|L^y u + rhs|` with the finite-difference `L^y`.
    pub residual: f64,
    /// `|∫ u_c π|` per component.
    pub centering_defect: Vec<f64>,
}

impl PoissonSolution {
    pub fn grid(&self) -> &Grid {
        &self.u.grid
    }

    pub fn outputs(&self) -> usize {
        self.u.components
    }

    /// One CSV per solution: node coordinates, `u_c`, then `du_c/dz_i`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let grid = self.grid();
        let (d, p) = (grid.dim(), self.outputs());
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=d).map(|k| format!("z_{k}")).collect();
        header.extend((1..=p).map(|c| format!("u_{c}")));
        for c in 1..=p {
            header.extend((1..=d).map(|i| format!("du_{c}_dz_{i}")));
        }
        wr.write_record(&header)?;
        let mut z = vec![0.0; d];
        for idx in 0..grid.len() {
            grid.point_into(idx, &mut z);
            let rec: Vec<String> =
                z.iter().chain(self.u.node(idx)).chain(self.grad_u.node(idx)).map(|v| v.to_string()).collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `H(·, y)` sampled on `grid`.
pub fn sample_integrand(spec: &ModelSpec, y: &[f64], grid: &Grid) -> GridField {
    let p = spec.dims().output;
    GridField::from_fn(grid, y, p, FieldRole::Sampled, |z, o| spec.integrand(z, y, o))
}

/// Solves `L^y u = -rhs` with `∫ u π = 0`.
pub fn solve_poisson(
    spec: &ModelSpec,
    y: &[f64],
    rhs: &GridField,
    pi: &GridField,
    method: PoissonMethod,
) -> Result<PoissonSolution> {
    rhs.same_grid(pi)?;
    check_grid(spec, &pi.grid)?;
    let solvability = rhs.integral_against(pi)?;
    for (component, s) in solvability.iter().enumerate() {
        if !(s.abs() <= FREDHOLM_TOL) {
            return Err(Error::Fredholm { component, defect: s.abs() });
        }
    }
    let grid = &pi.grid;
    let coef = NodeCoefficients::sample(spec, y, grid)?;
    let op = poisson_operator(&coef, grid)?;
    let (u, grad_u) = match method {
        PoissonMethod::ClosedForm1d => closed_form(&coef, grid, rhs, pi)?,
        PoissonMethod::GridSolve => {
            let u = grid_solve(&op, grid, rhs, pi)?;
            let g = gradient(&u);
            (u, g)
        }
    };
    let residual = residual(&op, grid, &u, rhs);
    let centering_defect = u.integral_against(pi)?.iter().map(|v| v.abs()).collect();
    Ok(PoissonSolution { y: y.to_vec(), method, u, grad_u, residual, centering_defect })
}

fn closed_form(
    coef: &NodeCoefficients,
    grid: &Grid,
    rhs: &GridField,
    pi: &GridField,
) -> Result<(GridField, GridField)> {
    if grid.dim() != 1 {
        return Err(Error::InvalidArgument("closed-form Poisson solution needs d = 1".into()));
    }
    let n = grid.len();
    let h = grid.axis(0).step();
    let p = rhs.components;
    let a: Vec<f64> = (0..n).map(|i| coef.a(i, 0, 0)).collect();
    // logarithmic derivative of π, used for the Laplace tail estimates
    let da = derivative(&a, h);
    let dlog: Vec<f64> = (0..n).map(|i| (2.0 * coef.b(i, 0) - da[i]) / a[i]).collect();
    let center = nearest_origin(grid);
    let mut u = GridField::zeros(grid, &rhs.y, p, FieldRole::Corrector);
    let mut du = GridField::zeros(grid, &rhs.y, p, FieldRole::CorrectorGradient);
    for c in 0..p {
        let f: Vec<f64> = (0..n).map(|i| rhs.node(i)[c] * pi.values[i]).collect();
        let left_tail = if dlog[0] > 0.0 { f[0] / dlog[0] } else { 0.0 };
        let right_tail = if dlog[n - 1] < 0.0 { -f[n - 1] / dlog[n - 1] } else { 0.0 };
        let from_left = cumulative(&f, h);
        let total = from_left[n - 1];
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let z = grid.point(i)[0];
            let flux = if z < 0.0 {
                left_tail + from_left[i]
            } else {
                -(right_tail + total - from_left[i])
            };
            grad[i] = -2.0 * flux / (a[i] * pi.values[i]);
            if !grad[i].is_finite() {
                return Err(Error::Singular(format!("a·π vanishes at z = {z}")));
            }
        }
        let prim = cumulative(&grad, h);
        let mut vals: Vec<f64> = prim.iter().map(|v| v - prim[center]).collect();
        let w = grid.weights();
        let mean: f64 = vals.iter().zip(&w).zip(&pi.values).map(|((v, wi), q)| v * wi * q).sum();
        vals.iter_mut().for_each(|v| *v -= mean);
        for i in 0..n {
            u.values[i * p + c] = vals[i];
            du.values[i * p + c] = grad[i];
        }
    }
    Ok((u, du))
}

/// Cumulative integral from node 0 with the endpoint-corrected trapezoid.
fn cumulative(f: &[f64], h: f64) -> Vec<f64> {
    let df = derivative4(f, h);
    let mut out = vec![0.0; f.len()];
    for i in 1..f.len() {
        out[i] = out[i - 1] + 0.5 * h * (f[i - 1] + f[i]) - h * h / 12.0 * (df[i] - df[i - 1]);
    }
    out
}

fn nearest_origin(grid: &Grid) -> usize {
    (0..grid.len()).min_by(|&a, &b| grid.radius(a).total_cmp(&grid.radius(b))).unwrap_or(0)
}

fn grid_solve(op: &BandMatrix, grid: &Grid, rhs: &GridField, pi: &GridField) -> Result<GridField> {
    let n = grid.len();
    let p = rhs.components;
    let row = nearest_origin(grid);
    let mut pinned = op.clone();
    pinned.set_row_zero(row);
    pinned.add(row, row, 1.0);
    let lu = pinned.factor()?;
    let w: Vec<f64> = grid.weights().iter().zip(&pi.values).map(|(a, b)| a * b).collect();
    let mut u = GridField::zeros(grid, &rhs.y, p, FieldRole::Corrector);
    for c in 0..p {
        let mut b: Vec<f64> = (0..n).map(|i| -rhs.node(i)[c]).collect();
        b[row] = 0.0;
        let x = solve_with_dense_row(&lu, row, &w, &b)?;
        for i in 0..n {
            u.values[i * p + c] = x[i];
        }
    }
    Ok(u)
}

/// Central-difference gradient (one-sided on the boundary), `p × d` per node.
pub fn gradient(u: &GridField) -> GridField {
    let grid = &u.grid;
    let (d, p) = (grid.dim(), u.components);
    let mut g = GridField::zeros(grid, &u.y, p * d, FieldRole::CorrectorGradient);
    for idx in 0..grid.len() {
        let mi = grid.multi_index(idx);
        for k in 0..d {
            let ax = grid.axis(k);
            let h = ax.step();
            let s = grid.stride(k);
            let at = |j: usize, c: usize| u.values[j * p + c];
            for c in 0..p {
                let v = if ax.nodes < 3 {
                    (at(idx - mi[k] * s + s, c) - at(idx - mi[k] * s, c)) / h
                } else if mi[k] == 0 {
                    (-3.0 * at(idx, c) + 4.0 * at(idx + s, c) - at(idx + 2 * s, c)) / (2.0 * h)
                } else if mi[k] + 1 == ax.nodes {
                    (3.0 * at(idx, c) - 4.0 * at(idx - s, c) + at(idx - 2 * s, c)) / (2.0 * h)
                } else {
                    (at(idx + s, c) - at(idx - s, c)) / (2.0 * h)
                };
                g.values[idx * p * d + c * d + k] = v;
            }
        }
    }
    g
}

fn residual(op: &BandMatrix, grid: &Grid, u: &GridField, rhs: &GridField) -> f64 {
    let p = u.components;
    let mut worst = 0.0f64;
    for c in 0..p {
        let lu = op.mul_vec(&u.component(c));
        for (idx, v) in lu.iter().enumerate() {
            if !grid.is_boundary(idx) {
                worst = worst.max((v + rhs.node(idx)[c]).abs());
            }
        }
    }
    worst
}

/// `L^y` applied to every component of `u`, using the solver's discretization.
pub fn apply_generator(spec: &ModelSpec, u: &GridField) -> Result<GridField> {
    check_grid(spec, &u.grid)?;
    let coef = NodeCoefficients::sample(spec, &u.y, &u.grid)?;
    let op = poisson_operator(&coef, &u.grid)?;
    let mut out = GridField::zeros(&u.grid, &u.y, u.components, FieldRole::Sampled);
    for c in 0..u.components {
        for (idx, v) in op.mul_vec(&u.component(c)).into_iter().enumerate() {
            out.values[idx * u.components + c] = v;
        }
    }
    Ok(out)
}

fn smoothstep_cutoff(r: f64, n: f64) -> f64 {
    let s = r - n;
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - s * s * (3.0 - 2.0 * s)
    }
}

fn shell_bump(r: f64, n: f64) -> f64 {
    let s = r - n;
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

/// Splits a centered `V` into `V' = χ_n V + c_n ψ_n` (centered, supported in
/// `‖z‖ < n + 1`) and the tail part `V'' = V − V'`.
pub fn build_truncated_fluctuation(v: &GridField, pi: &GridField, n: f64) -> Result<(GridField, GridField)> {
    v.same_grid(pi)?;
    let grid = &v.grid;
    if !(n > 0.0 && n + 1.0 < grid.inscribed_radius()) {
        return Err(Error::InvalidArgument(format!(
            "truncation radius {n} + 1 must lie strictly inside the grid box (inscribed radius {})",
            grid.inscribed_radius()
        )));
    }
    let mean = v.integral_against(pi)?;
    for (component, m) in mean.iter().enumerate() {
        if !(m.abs() <= FREDHOLM_TOL) {
            return Err(Error::Fredholm { component, defect: m.abs() });
        }
    }
    let p = v.components;
    let len = grid.len();
    let chi: Vec<f64> = (0..len).map(|i| smoothstep_cutoff(grid.radius(i), n)).collect();
    let psi: Vec<f64> = (0..len).map(|i| shell_bump(grid.radius(i), n)).collect();
    let w = grid.weights();
    let psi_mass: f64 = (0..len).map(|i| w[i] * pi.values[i] * psi[i]).sum();
    if !(psi_mass > f64::MIN_POSITIVE) {
        return Err(Error::EmptyShell);
    }
    let mut vp = GridField::zeros(grid, &v.y, p, FieldRole::Fluctuation);
    for c in 0..p {
        let cut: f64 = (0..len).map(|i| w[i] * pi.values[i] * chi[i] * v.node(i)[c]).sum();
        let coef = -cut / psi_mass;
        for i in 0..len {
            vp.values[i * p + c] = chi[i] * v.node(i)[c] + coef * psi[i];
        }
    }
    let mut vs = GridField::zeros(grid, &v.y, p, FieldRole::Fluctuation);
    for (o, (a, b)) in vs.values.iter_mut().zip(v.values.iter().zip(&vp.values)) {
        *o = a - b;
    }
    Ok((vp, vs))
}

/// Per-`y` growth diagnostics of a family of solutions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthRow {
    pub y: Vec<f64>,
    pub max_u: f64,
    pub max_grad_u: f64,
    /// `max ‖∂_y u‖` (central difference along the family), interior `y` only.
    pub max_dy_u: Option<f64>,
    /// Least-squares slope of `log ‖∂_y u‖` against `log ‖z‖` over `‖z‖ ≥ 1`.
    pub dy_degree: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub rows: Vec<GrowthRow>,
    /// Largest fitted degree over the interior `y` values.
    pub degree: f64,
}

/// Empirical growth of `u`, `∇_z u` and `∂_y u` over a line of `y` values.
pub fn growth_probe(solutions: &[PoissonSolution]) -> Result<GrowthReport> {
    if solutions.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: solutions.len() });
    }
    let grid = solutions[0].grid().clone();
    if solutions.iter().any(|s| *s.grid() != grid) {
        return Err(Error::GridMismatch("growth probe needs one z-grid".into()));
    }
    let p = solutions[0].outputs();
    let len = grid.len();
    let mut rows = Vec::with_capacity(solutions.len());
    let mut degree = 0.0f64;
    for (k, sol) in solutions.iter().enumerate() {
        let node_norm = |f: &GridField, i: usize| f.node(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_u = (0..len).map(|i| node_norm(&sol.u, i)).fold(0.0, f64::max);
        let max_grad_u = (0..len).map(|i| node_norm(&sol.grad_u, i)).fold(0.0, f64::max);
        let (mut max_dy_u, mut dy_degree) = (None, None);
        if k > 0 && k + 1 < solutions.len() {
            let (lo, hi) = (&solutions[k - 1], &solutions[k + 1]);
            let dist = lo.y.iter().zip(&hi.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist == 0.0 {
                return Err(Error::InvalidArgument("repeated y values in growth probe".into()));
            }
            let dy: Vec<f64> = (0..len)
                .map(|i| {
                    (0..p)
                        .map(|c| ((hi.u.node(i)[c] - lo.u.node(i)[c]) / dist).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let top = dy.iter().copied().fold(0.0, f64::max);
            let deg = if top < 1e-10 {
                0.0
            } else {
                let pts: Vec<(f64, f64)> = (0..len)
                    .filter(|&i| grid.radius(i) >= 1.0 && dy[i] > 1e-300)
                    .map(|i| (grid.radius(i).ln(), dy[i].ln()))
                    .collect();
                fit_slope(&pts).unwrap_or(0.0)
            };
            degree = degree.max(deg);
            max_dy_u = Some(top);
            dy_degree = Some(deg);
        }
        rows.push(GrowthRow { y: sol.y.clone(), max_u, max_grad_u, max_dy_u, dy_degree });
    }
    Ok(GrowthReport { rows, degree })
}

fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
