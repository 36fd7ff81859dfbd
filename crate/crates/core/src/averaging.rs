//! Averaged coefficients over the invariant density, tabulated on a y-grid,
//! the averaged slow system, and the homogenization defect.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldRole, Grid, GridField};
use crate::linalg::{sym_eig_range, sym_sqrt};
use crate::model::ModelSpec;
use crate::poisson::{sample_integrand, solve_poisson, PoissonMethod, PoissonSolution};
use crate::rng::{NoiseKey, Stream};
use crate::simulate::{simulate_with, Mesh, NoiseSource, PathSample, SimOptions};
use crate::stationary::invariant_density;

/// Settings shared by every per-node computation of a tabulation.
#[derive(Debug, Clone)]
pub struct TabulationConfig {
    pub z_grid: Grid,
    pub method: PoissonMethod,
    pub centering_tol: f64,
}

impl TabulationConfig {
    pub fn new(z_grid: Grid) -> Self {
        Self { z_grid, method: PoissonMethod::GridSolve, centering_tol: 1e-6 }
    }
}

/// `Q(z,y) = ∇_z u a ∇_z u*`, `p × p` row-major per node.
pub fn q_field(spec: &ModelSpec, y: &[f64], sol: &PoissonSolution) -> Result<GridField> {
    let grid = sol.grid();
    let dims = spec.dims();
    let (d, p) = (dims.fast, dims.output);
    if grid.dim() != d || sol.outputs() != p {
        return Err(Error::GridMismatch("solution does not match the model dimensions".into()));
    }
    let mut a = vec![0.0; d * d];
    let mut out = GridField::zeros(grid, y, p * p, FieldRole::QField);
    let mut z = vec![0.0; d];
    for idx in 0..grid.len() {
        grid.point_into(idx, &mut z);
        spec.fast_covariance(&z, y, &mut a);
        let g = sol.grad_u.node(idx);
        let q = &mut out.values[idx * p * p..(idx + 1) * p * p];
        quadratic_form(g, &a, p, d, q);
    }
    Ok(out)
}

/// `q = g a gᵀ` for `g` of shape `p × d`.
fn quadratic_form(g: &[f64], a: &[f64], p: usize, d: usize, q: &mut [f64]) {
    for r in 0..p {
        for c in 0..p {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += g[r * d + i] * a[i * d + j] * g[c * d + j];
                }
            }
            q[r * p + c] = s;
        }
    }
}

/// `F̄`, `Ā`, `Q̄` tabulated on a y-grid with multilinear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedModel {
    pub y_grid: Grid,
    pub l: usize,
    pub p: usize,
    pub fbar: Vec<f64>,
    pub abar: Vec<f64>,
    pub qbar: Vec<f64>,
    /// Smallest eigenvalue of `Ā` and `Q̄` over the nodes.
    pub nonsingularity_margin: f64,
}

/// Averaged coefficients at one slow value.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedValues {
    pub f: Vec<f64>,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
}

impl AveragedModel {
    /// Tabulates closed-form averaged coefficients `(y, F̄, Ā, Q̄)`.
    pub fn from_fn(
        y_grid: Grid,
        l: usize,
        p: usize,
        mut f: impl FnMut(&[f64], &mut [f64], &mut [f64], &mut [f64]),
    ) -> Result<Self> {
        if y_grid.dim() != l {
            return Err(Error::GridMismatch(format!("y-grid has {} axes, l = {l}", y_grid.dim())));
        }
        let n = y_grid.len();
        let (mut fbar, mut abar, mut qbar) = (vec![0.0; n * l], vec![0.0; n * l * l], vec![0.0; n * p * p]);
        for idx in 0..n {
            let y = y_grid.point(idx);
            f(
                &y,
                &mut fbar[idx * l..(idx + 1) * l],
                &mut abar[idx * l * l..(idx + 1) * l * l],
                &mut qbar[idx * p * p..(idx + 1) * p * p],
            );
        }
        let mut m = Self { y_grid, l, p, fbar, abar, qbar, nonsingularity_margin: 0.0 };
        m.nonsingularity_margin = m.margin();
        Ok(m)
    }

    /// Constant coefficients on `y_grid`.
    pub fn constant(y_grid: Grid, f: &[f64], a: &[f64], q: &[f64]) -> Result<Self> {
        let (l, p) = (f.len(), (q.len() as f64).sqrt() as usize);
        Self::from_fn(y_grid, l, p, |_, fo, ao, qo| {
            fo.copy_from_slice(f);
            ao.copy_from_slice(a);
            qo.copy_from_slice(q);
        })
    }

    fn margin(&self) -> f64 {
        let (l, p) = (self.l, self.p);
        (0..self.y_grid.len())
            .map(|i| {
                let (al, _) = sym_eig_range(&self.abar[i * l * l..(i + 1) * l * l], l);
                let (ql, _) = sym_eig_range(&self.qbar[i * p * p..(i + 1) * p * p], p);
                al.min(ql)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Fails unless `Ā` and `Q̄` are uniformly positive definite on the grid.
    pub fn require_nonsingular(&self) -> Result<()> {
        if self.nonsingularity_margin > 0.0 {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "averaged matrices are not uniformly nonsingular (margin {:e})",
                self.nonsingularity_margin
            )))
        }
    }

    /// Interpolated coefficients, or `None` outside the tabulated box.
    pub fn eval(&self, y: &[f64]) -> Option<AveragedValues> {
        let mut v = AveragedValues { f: vec![0.0; self.l], a: vec![0.0; self.l * self.l], q: vec![0.0; self.p * self.p] };
        self.eval_into(y, &mut v).then_some(v)
    }

    pub fn eval_into(&self, y: &[f64], out: &mut AveragedValues) -> bool {
        if !self.y_grid.contains(y) {
            return false;
        }
        let (l, p) = (self.l, self.p);
        out.f.iter_mut().chain(out.a.iter_mut()).chain(out.q.iter_mut()).for_each(|v| *v = 0.0);
        for (node, w) in self.y_grid.stencil(y).iter() {
            if w == 0.0 {
                continue;
            }
            axpy(&mut out.f, w, &self.fbar[node * l..(node + 1) * l]);
            axpy(&mut out.a, w, &self.abar[node * l * l..(node + 1) * l * l]);
            axpy(&mut out.q, w, &self.qbar[node * p * p..(node + 1) * p * p]);
        }
        true
    }

    /// One row per y-node: coordinates, `F̄`, flattened `Ā`, flattened `Q̄`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let (l, p) = (self.l, self.p);
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=l).map(|k| format!("y_{k}")).collect();
        header.extend((1..=l).map(|k| format!("Fbar_{k}")));
        header.extend((0..l * l).map(|k| format!("Abar_{}{}", k / l + 1, k % l + 1)));
        header.extend((0..p * p).map(|k| format!("Qbar_{}{}", k / p + 1, k % p + 1)));
        wr.write_record(&header)?;
        for idx in 0..self.y_grid.len() {
            let y = self.y_grid.point(idx);
            let rec: Vec<String> = y
                .iter()
                .chain(&self.fbar[idx * l..(idx + 1) * l])
                .chain(&self.abar[idx * l * l..(idx + 1) * l * l])
                .chain(&self.qbar[idx * p * p..(idx + 1) * p * p])
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn axpy(acc: &mut [f64], w: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

struct NodeResult {
    f: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    sol: PoissonSolution,
}

fn solve_node(spec: &ModelSpec, node: usize, y: &[f64], cfg: &TabulationConfig) -> Result<NodeResult> {
    let dims = spec.dims();
    let (d, l) = (dims.fast, dims.slow);
    let grid = &cfg.z_grid;
    let pi = invariant_density(spec, y, grid)?;
    let h = sample_integrand(spec, y, grid);
    let centering = h.integral_against(&pi)?;
    let defect = centering.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(defect <= cfg.centering_tol) {
        return Err(Error::Centering { node, y: y.to_vec(), defect });
    }
    let sol = solve_poisson(spec, y, &h, &pi, cfg.method)?;
    let q = q_field(spec, y, &sol)?.integral_against(&pi)?;
    let fz = GridField::from_fn(grid, y, l, FieldRole::Sampled, |z, o| spec.slow_drift(z, y, o));
    let az = GridField::from_fn(grid, y, l * l, FieldRole::Sampled, |z, o| spec.slow_covariance(z, y, o));
    let f = fz.integral_against(&pi)?;
    let a = az.integral_against(&pi)?;
    debug_assert_eq!(grid.dim(), d);
    Ok(NodeResult { f, a, q, sol })
}

/// Averaged coefficients and the corrector table over `y_grid`.
pub fn tabulate(spec: &ModelSpec, y_grid: &Grid, cfg: &TabulationConfig) -> Result<(AveragedModel, CorrectorTable)> {
    let dims = spec.dims();
    let (l, p) = (dims.slow, dims.output);
    if y_grid.dim() != l {
        return Err(Error::GridMismatch(format!("y-grid has {} axes, l = {l}", y_grid.dim())));
    }
    if l > 2 {
        return Err(Error::InvalidArgument(format!("tabulation needs l <= 2, got l = {l}")));
    }
    let nodes: Vec<NodeResult> = (0..y_grid.len())
        .into_par_iter()
        .map(|idx| solve_node(spec, idx, &y_grid.point(idx), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut fbar = Vec::with_capacity(y_grid.len() * l);
    let mut abar = Vec::with_capacity(y_grid.len() * l * l);
    let mut qbar = Vec::with_capacity(y_grid.len() * p * p);
    let mut solutions = Vec::with_capacity(y_grid.len());
    for n in nodes {
        fbar.extend(n.f);
        abar.extend(n.a);
        qbar.extend(n.q);
        solutions.push(n.sol);
    }
    let mut model = AveragedModel { y_grid: y_grid.clone(), l, p, fbar, abar, qbar, nonsingularity_margin: 0.0 };
    model.nonsingularity_margin = model.margin();
    let table = CorrectorTable::new(y_grid.clone(), solutions)?;
    Ok((model, table))
}

/// Averaged coefficients only.
pub fn averaged_coefficients(spec: &ModelSpec, y_grid: &Grid, cfg: &TabulationConfig) -> Result<AveragedModel> {
    tabulate(spec, y_grid, cfg).map(|(m, _)| m)
}

/// Poisson solutions on a y-grid with `y`-derivatives by finite differences
/// across nodes.
#[derive(Debug, Clone)]
pub struct CorrectorTable {
    pub y_grid: Grid,
    pub z_grid: Grid,
    pub d: usize,
    pub l: usize,
    pub p: usize,
    /// Per y-node fields: `u` (`p`), `∇_z u` (`p × d`), `∂_y u` (`p × l`),
    /// `∂²_y u` (`p × l × l`).
    pub u: Vec<GridField>,
    pub grad_u: Vec<GridField>,
    pub dy_u: Vec<GridField>,
    pub dyy_u: Vec<GridField>,
}

/// Interpolated corrector quantities at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorValues {
    pub u: Vec<f64>,
    pub grad_u: Vec<f64>,
    pub dy_u: Vec<f64>,
    pub dyy_u: Vec<f64>,
}

impl CorrectorValues {
    pub fn zeros(d: usize, l: usize, p: usize) -> Self {
        Self { u: vec![0.0; p], grad_u: vec![0.0; p * d], dy_u: vec![0.0; p * l], dyy_u: vec![0.0; p * l * l] }
    }
}

fn fd1(i: usize, n: usize, h: f64) -> Vec<(isize, f64)> {
    if n < 2 {
        vec![]
    } else if n == 2 {
        if i == 0 {
            vec![(0, -1.0 / h), (1, 1.0 / h)]
        } else {
            vec![(-1, -1.0 / h), (0, 1.0 / h)]
        }
    } else if i == 0 {
        vec![(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
    } else if i + 1 == n {
        vec![(-2, 0.5 / h), (-1, -2.0 / h), (0, 1.5 / h)]
    } else {
        vec![(-1, -0.5 / h), (1, 0.5 / h)]
    }
}

fn fd2(i: usize, n: usize, h: f64) -> Vec<(isize, f64)> {
    let h2 = h * h;
    if n < 3 {
        vec![]
    } else if n == 3 || (i > 0 && i + 1 < n) {
        let c = (i.clamp(1, n - 2)) as isize - i as isize;
        vec![(c - 1, 1.0 / h2), (c, -2.0 / h2), (c + 1, 1.0 / h2)]
    } else if i == 0 {
        vec![(0, 2.0 / h2), (1, -5.0 / h2), (2, 4.0 / h2), (3, -1.0 / h2)]
    } else {
        vec![(-3, -1.0 / h2), (-2, 4.0 / h2), (-1, -5.0 / h2), (0, 2.0 / h2)]
    }
}

impl CorrectorTable {
    /// Builds the table from one solution per y-node (node order).
    pub fn new(y_grid: Grid, solutions: Vec<PoissonSolution>) -> Result<Self> {
        if solutions.len() != y_grid.len() || solutions.is_empty() {
            return Err(Error::GridMismatch("one Poisson solution per y-node is required".into()));
        }
        let z_grid = solutions[0].grid().clone();
        if solutions.iter().any(|s| *s.grid() != z_grid) {
            return Err(Error::GridMismatch("Poisson solutions use different z-grids".into()));
        }
        let (d, l, p) = (z_grid.dim(), y_grid.dim(), solutions[0].outputs());
        let nz = z_grid.len();
        let mut dy_u = Vec::with_capacity(y_grid.len());
        let mut dyy_u = Vec::with_capacity(y_grid.len());
        for idx in 0..y_grid.len() {
            let mi = y_grid.multi_index(idx);
            let y = y_grid.point(idx);
            let mut first = GridField::zeros(&z_grid, &y, p * l, FieldRole::Sampled);
            let mut second = GridField::zeros(&z_grid, &y, p * l * l, FieldRole::Sampled);
            let offset = |offs: &[(usize, isize)]| {
                let mut j = idx as isize;
                for &(k, o) in offs {
                    j += o * y_grid.stride(k) as isize;
                }
                j as usize
            };
            for k in 0..l {
                let ax = y_grid.axis(k);
                for (o, w) in fd1(mi[k], ax.nodes, ax.step()) {
                    let src = &solutions[offset(&[(k, o)])].u;
                    for zi in 0..nz {
                        for c in 0..p {
                            first.values[zi * p * l + c * l + k] += w * src.values[zi * p + c];
                        }
                    }
                }
                for m in 0..l {
                    let stencil: Vec<(Vec<(usize, isize)>, f64)> = if m == k {
                        fd2(mi[k], ax.nodes, ax.step()).into_iter().map(|(o, w)| (vec![(k, o)], w)).collect()
                    } else {
                        let bx = y_grid.axis(m);
                        let mut s = Vec::new();
                        for (o0, w0) in fd1(mi[k], ax.nodes, ax.step()) {
                            for (o1, w1) in fd1(mi[m], bx.nodes, bx.step()) {
                                s.push((vec![(k, o0), (m, o1)], w0 * w1));
                            }
                        }
                        s
                    };
                    for (offs, w) in stencil {
                        let src = &solutions[offset(&offs)].u;
                        for zi in 0..nz {
                            for c in 0..p {
                                second.values[zi * p * l * l + c * l * l + k * l + m] += w * src.values[zi * p + c];
                            }
                        }
                    }
                }
            }
            dy_u.push(first);
            dyy_u.push(second);
        }
        let (u, grad_u) = solutions.into_iter().map(|s| (s.u, s.grad_u)).unzip();
        Ok(Self { y_grid, z_grid, d, l, p, u, grad_u, dy_u, dyy_u })
    }

    /// Interpolates at `(z, y)`: multilinear in `y` across nodes and in `z`
    /// within each node (linear extrapolation in `z`). Returns `false` when
    /// `y` lies outside the table.
    pub fn eval_into(&self, z: &[f64], y: &[f64], out: &mut CorrectorValues) -> bool {
        if !self.y_grid.contains(y) {
            return false;
        }
        for v in out.u.iter_mut().chain(&mut out.grad_u).chain(&mut out.dy_u).chain(&mut out.dyy_u) {
            *v = 0.0;
        }
        let zs = self.z_grid.stencil(z);
        for (node, wy) in self.y_grid.stencil(y).iter() {
            if wy == 0.0 {
                continue;
            }
            for (zi, wz) in zs.iter() {
                let w = wy * wz;
                if w == 0.0 {
                    continue;
                }
                axpy(&mut out.u, w, self.u[node].node(zi));
                axpy(&mut out.grad_u, w, self.grad_u[node].node(zi));
                axpy(&mut out.dy_u, w, self.dy_u[node].node(zi));
                axpy(&mut out.dyy_u, w, self.dyy_u[node].node(zi));
            }
        }
        true
    }

    pub fn eval(&self, z: &[f64], y: &[f64]) -> Option<CorrectorValues> {
        let mut v = CorrectorValues::zeros(self.d, self.l, self.p);
        self.eval_into(z, y, &mut v).then_some(v)
    }
}

/// Euler–Maruyama for the averaged system
/// `dy = F̄ dt + ε^{1/2-κ} Ā^{1/2} dW`, `dx = ε^{1/2-κ} Q̄^{1/2} dB`.
pub fn simulate_averaged(
    avg: &AveragedModel,
    epsilon: f64,
    kappa: f64,
    y0: &[f64],
    t_end: f64,
    h: f64,
    seed: u64,
) -> Result<PathSample> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    let mut path = simulate_averaged_scaled(
        avg,
        epsilon.powf(0.5 - kappa),
        y0,
        Mesh::new(t_end, h)?,
        NoiseKey::new(seed),
    )?;
    path.epsilon = epsilon;
    path.kappa = kappa;
    Ok(path)
}

/// [`simulate_averaged`] with an explicit noise amplitude (0 gives the
/// deterministic limit).
pub fn simulate_averaged_scaled(
    avg: &AveragedModel,
    noise_scale: f64,
    y0: &[f64],
    mesh: Mesh,
    key: NoiseKey,
) -> Result<PathSample> {
    avg.require_nonsingular()?;
    let (l, p) = (avg.l, avg.p);
    if y0.len() != l {
        return Err(Error::InvalidArgument(format!("y0 has dimension {}, expected {l}", y0.len())));
    }
    if !avg.y_grid.contains(y0) {
        return Err(Error::OutOfRange { what: "initial slow value".into(), time: 0.0 });
    }
    let h = mesh.step();
    let sq = h.sqrt();
    let n = mesh.steps;
    let mut y = y0.to_vec();
    let mut x = vec![0.0; p];
    let mut ys = Vec::with_capacity((n + 1) * l);
    let mut xs = Vec::with_capacity((n + 1) * p);
    let mut db_all = Vec::with_capacity(n * p);
    let mut dw_all = Vec::with_capacity(n * l);
    ys.extend_from_slice(&y);
    xs.extend_from_slice(&x);
    let mut vals = AveragedValues { f: vec![0.0; l], a: vec![0.0; l * l], q: vec![0.0; p * p] };
    let mut db = vec![0.0; p];
    let mut dw = vec![0.0; l];
    for k in 0..n {
        if !avg.eval_into(&y, &mut vals) {
            return Err(Error::OutOfRange { what: "slow variable".into(), time: mesh.time(k) });
        }
        let ra = sym_sqrt(&vals.a, l);
        let rq = sym_sqrt(&vals.q, p);
        key.fill_normals(Stream::Fast, k as u64, &mut db);
        key.fill_normals(Stream::Slow, k as u64, &mut dw);
        db.iter_mut().chain(dw.iter_mut()).for_each(|v| *v *= sq);
        for i in 0..l {
            let s: f64 = (0..l).map(|j| ra[i * l + j] * dw[j]).sum();
            y[i] += vals.f[i] * h + noise_scale * s;
        }
        for i in 0..p {
            let s: f64 = (0..p).map(|j| rq[i * p + j] * db[j]).sum();
            x[i] += noise_scale * s;
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k + 1, time: mesh.time(k + 1) });
        }
        if !avg.y_grid.contains(&y) {
            return Err(Error::OutOfRange { what: "slow variable".into(), time: mesh.time(k + 1) });
        }
        ys.extend_from_slice(&y);
        xs.extend_from_slice(&x);
        db_all.extend_from_slice(&db);
        dw_all.extend_from_slice(&dw);
    }
    Ok(PathSample {
        times: mesh.times(),
        d: 0,
        l,
        p,
        xi: Vec::new(),
        y: ys,
        x: xs,
        db: db_all,
        dw: dw_all,
        micro_steps: 1,
        seed: Some(key.seed),
        path: Some(key.path),
        epsilon: f64::NAN,
        kappa: f64::NAN,
    })
}

/// Which coefficient the homogenization defect compares to its average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectTarget {
    F,
    A,
    Q,
}

/// Distribution of `sup_t ‖∫₀ᵗ V(ξ_s, Y_s) ds‖` at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectStats {
    pub epsilon: f64,
    pub paths: usize,
    pub median: f64,
    pub q90: f64,
}

/// Homogenization defect of `V = coefficient − its average` along simulated
/// paths, one row per `ε`. `table` is needed only for [`DefectTarget::Q`].
#[allow(clippy::too_many_arguments)]
pub fn homogenization_defect(
    spec: &ModelSpec,
    avg: &AveragedModel,
    table: Option<&CorrectorTable>,
    which: DefectTarget,
    epsilons: &[f64],
    t_end: f64,
    h: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<DefectStats>> {
    if paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    if which == DefectTarget::Q && table.is_none() {
        return Err(Error::InvalidArgument("the Q defect needs the corrector table".into()));
    }
    let mesh = Mesh::new(t_end, h)?;
    epsilons
        .iter()
        .map(|&eps| {
            let model = spec.with_epsilon(eps)?;
            let mut sups = (0..paths)
                .into_par_iter()
                .map(|i| path_defect(&model, avg, table, which, mesh, NoiseKey::new(seed).with_path(i as u64)))
                .collect::<Result<Vec<f64>>>()?;
            sups.sort_by(f64::total_cmp);
            Ok(DefectStats { epsilon: eps, paths, median: quantile(&sups, 0.5), q90: quantile(&sups, 0.9) })
        })
        .collect()
}

fn path_defect(
    spec: &ModelSpec,
    avg: &AveragedModel,
    table: Option<&CorrectorTable>,
    which: DefectTarget,
    mesh: Mesh,
    key: NoiseKey,
) -> Result<f64> {
    let dims = spec.dims();
    let (d, l, p) = (dims.fast, dims.slow, dims.output);
    let width = match which {
        DefectTarget::F => l,
        DefectTarget::A => l * l,
        DefectTarget::Q => p * p,
    };
    let mut integral = vec![0.0; width];
    let mut v = vec![0.0; width];
    let mut sup = 0.0f64;
    let mut failure: Option<Error> = None;
    let mut bar = AveragedValues { f: vec![0.0; l], a: vec![0.0; l * l], q: vec![0.0; p * p] };
    let mut corr = CorrectorValues::zeros(d, l, p);
    let mut a = vec![0.0; d * d];
    let opts = SimOptions { store_noise: false, ..SimOptions::default() };
    simulate_with(spec, mesh, NoiseSource::Keyed(key), opts, |s| {
        if failure.is_some() {
            return;
        }
        if !avg.eval_into(s.y, &mut bar) {
            failure = Some(Error::OutOfRange { what: "slow variable (averaged table)".into(), time: s.t });
            return;
        }
        match which {
            DefectTarget::F => {
                spec.slow_drift(s.z, s.y, &mut v);
                axpy(&mut v, -1.0, &bar.f);
            }
            DefectTarget::A => {
                spec.slow_covariance(s.z, s.y, &mut v);
                axpy(&mut v, -1.0, &bar.a);
            }
            DefectTarget::Q => {
                let t = table.expect("checked above");
                if !t.eval_into(s.z, s.y, &mut corr) {
                    failure = Some(Error::OutOfRange { what: "slow variable (corrector table)".into(), time: s.t });
                    return;
                }
                spec.fast_covariance(s.z, s.y, &mut a);
                quadratic_form(&corr.grad_u, &a, p, d, &mut v);
                axpy(&mut v, -1.0, &bar.q);
            }
        }
        axpy(&mut integral, s.h_fast, &v);
        sup = sup.max(integral.iter().map(|x| x * x).sum::<f64>().sqrt());
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(sup),
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{coefficient, constant, ou};

    fn ou_tab(nodes: usize) -> (AveragedModel, CorrectorTable) {
        let cfg = TabulationConfig::new(Grid::default_fast(1));
        tabulate(&ou(), &Grid::cube(1, -2.0, 2.0, nodes).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn ou_averages() {
        let (m, t) = ou_tab(5);
        for i in 0..5 {
            let y = m.y_grid.point(i)[0];
            assert!((m.qbar[i] - 2.0).abs() < 1e-3);
            assert!((m.abar[i] - 1.0).abs() < 1e-12);
            assert!((m.fbar[i] + y).abs() < 1e-3);
        }
        assert!(m.nonsingularity_margin > 0.9);
        let c = t.eval(&[0.7], &[0.3]).unwrap();
        assert!((c.u[0] - 0.7).abs() < 1e-9 && c.dy_u[0].abs() < 1e-9 && c.dyy_u[0].abs() < 1e-9);
        assert!(t.eval(&[0.0], &[2.5]).is_none());
    }

    #[test]
    fn q_field_of_linear_corrector() {
        let (_, t) = ou_tab(3);
        let spec = ou();
        let grid = t.z_grid.clone();
        let pi = invariant_density(&spec, &[0.0], &grid).unwrap();
        let sol = solve_poisson(&spec, &[0.0], &sample_integrand(&spec, &[0.0], &grid), &pi, PoissonMethod::GridSolve)
            .unwrap();
        let q = q_field(&spec, &[0.0], &sol).unwrap();
        assert!(q.values.iter().all(|v| (v - 2.0).abs() < 1e-8));
    }

    #[test]
    fn centered_drift_and_constant_diffusion() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.slow_drift = coefficient(|z, _, o| o[0] = z[0]);
        c.slow_diffusion = coefficient(|_, _, o| o[0] = 0.7);
        let spec = spec.with_coefficients(c);
        let m = averaged_coefficients(&spec, &Grid::cube(1, -1.0, 1.0, 3).unwrap(), &TabulationConfig::new(Grid::default_fast(1)))
            .unwrap();
        assert!(m.fbar.iter().all(|f| f.abs() < 1e-10));
        assert!(m.abar.iter().all(|a| (a - 0.49).abs() < 1e-12));
    }

    #[test]
    fn centering_failure_names_node() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.integrand = coefficient(|z, y, o| o[0] = z[0] + y[0]);
        let err = averaged_coefficients(
            &spec.with_coefficients(c),
            &Grid::cube(1, -1.0, 1.0, 3).unwrap(),
            &TabulationConfig::new(Grid::default_fast(1)),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Centering { node: 0, .. }), "{err:?}");
    }

    #[test]
    fn deterministic_limit_of_averaged_system() {
        let (m, _) = ou_tab(41);
        let path = simulate_averaged_scaled(&m, 0.0, &[1.0], Mesh::new(1.0, 1e-3).unwrap(), NoiseKey::new(1)).unwrap();
        let yt = path.y_at(path.steps())[0];
        assert!((yt - (-1.0f64).exp()).abs() < 2e-3, "{yt}");
        assert!(path.x.iter().all(|&x| x == 0.0));
        let a = simulate_averaged(&m, 0.01, 0.25, &[0.0], 1.0, 0.01, 4).unwrap();
        let b = simulate_averaged(&m, 0.01, 0.25, &[0.0], 1.0, 0.01, 4).unwrap();
        assert_eq!(a, b);
        assert!(simulate_averaged(&m, 0.01, 0.25, &[3.0], 1.0, 0.01, 4).is_err());
    }

    #[test]
    fn singular_average_blocks_simulation() {
        let m = AveragedModel::constant(Grid::cube(1, -1.0, 1.0, 3).unwrap(), &[0.0], &[1.0], &[0.0]).unwrap();
        assert!(matches!(
            simulate_averaged(&m, 0.1, 0.25, &[0.0], 1.0, 0.1, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn constant_model_has_no_defect() {
        let spec = constant();
        let grid = Grid::cube(1, -3.0, 8.0, 12).unwrap();
        let m = AveragedModel::constant(grid, &[1.0], &[1.0], &[1.0]).unwrap();
        let stats =
            homogenization_defect(&spec, &m, None, DefectTarget::F, &[0.1], 1.0, 0.01, 8, 3).unwrap();
        assert!(stats[0].q90 <= 1e-8);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.9) - 4.6).abs() < 1e-12);
    }
}
