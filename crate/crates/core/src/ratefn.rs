//! The quadratic action functional on discretized paths, its minimization
//! under terminal affine constraints and the resulting MDP predictions.

use serde::Serialize;

use crate::averaging::{AveragedModel, AveragedValues};
use crate::error::{Error, Result};
use crate::linalg::inverse;

/// Iteration cap of [`minimize_endpoint`].
pub const MAX_ITERATIONS: usize = 100_000;
/// Stopping tolerance on the constrained gradient norm.
pub const GRADIENT_TOL: f64 = 1e-8;

/// Node values of `(X, Y)` on a time mesh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscretePath {
    pub times: Vec<f64>,
    pub p: usize,
    pub l: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl DiscretePath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.p..(k + 1) * self.p]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.l..(k + 1) * self.l]
    }

    /// Zero-cost path: `X ≡ 0` and `Y` the Euler orbit of `F̄` from `y0`.
    pub fn zero_cost(avg: &AveragedModel, y0: &[f64], t_end: f64, intervals: usize) -> Result<Self> {
        let (p, l) = (avg.p, avg.l);
        let h = t_end / intervals as f64;
        let mut y = Vec::with_capacity((intervals + 1) * l);
        y.extend_from_slice(y0);
        let mut vals = empty_values(avg);
        for k in 0..intervals {
            let cur = y[k * l..(k + 1) * l].to_vec();
            if !avg.eval_into(&cur, &mut vals) {
                return Err(Error::OutOfRange { what: "zero-cost orbit".into(), time: k as f64 * h });
            }
            y.extend(cur.iter().zip(&vals.f).map(|(yv, f)| yv + h * f));
        }
        Ok(Self {
            times: (0..=intervals).map(|k| k as f64 * h).collect(),
            p,
            l,
            x: vec![0.0; (intervals + 1) * p],
            y,
        })
    }

    /// One row per node: `t, X_1.., Y_1..`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.p).map(|c| format!("X_{c}")));
        header.extend((1..=self.l).map(|c| format!("Y_{c}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![self.times[k].to_string()];
            rec.extend(self.x_at(k).iter().chain(self.y_at(k)).map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn empty_values(avg: &AveragedModel) -> AveragedValues {
    AveragedValues { f: vec![0.0; avg.l], a: vec![0.0; avg.l * avg.l], q: vec![0.0; avg.p * avg.p] }
}

/// `J` and its per-interval contributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionValue {
    pub j: f64,
    pub per_interval: Vec<f64>,
}

/// `J = ½ Σ_k h_k [Ẋ_k* Q̄⁻¹ Ẋ_k + (Ẏ_k − F̄)* Ā⁻¹ (Ẏ_k − F̄)]` with forward
/// differences and coefficients at the left node. Paths not starting at
/// `(0, y0)` have `J = +∞`.
pub fn action(path: &DiscretePath, avg: &AveragedModel, y0: &[f64]) -> Result<ActionValue> {
    avg.require_nonsingular()?;
    let (p, l) = (avg.p, avg.l);
    if path.p != p || path.l != l || y0.len() != l {
        return Err(Error::InvalidArgument("path dimensions do not match the averaged model".into()));
    }
    if path.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: path.len() });
    }
    if path.x_at(0).iter().any(|&v| v != 0.0) || path.y_at(0) != y0 {
        return Ok(ActionValue { j: f64::INFINITY, per_interval: vec![f64::INFINITY; path.len() - 1] });
    }
    let mut vals = empty_values(avg);
    let mut per = Vec::with_capacity(path.len() - 1);
    for k in 0..path.len() - 1 {
        let h = path.times[k + 1] - path.times[k];
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("time mesh must be increasing".into()));
        }
        if !avg.eval_into(path.y_at(k), &mut vals) {
            return Err(Error::OutOfRange { what: "slow path".into(), time: path.times[k] });
        }
        let qi = inverse(&vals.q, p)?;
        let ai = inverse(&vals.a, l)?;
        let vx: Vec<f64> = (0..p).map(|c| (path.x_at(k + 1)[c] - path.x_at(k)[c]) / h).collect();
        let vy: Vec<f64> = (0..l).map(|c| (path.y_at(k + 1)[c] - path.y_at(k)[c]) / h - vals.f[c]).collect();
        per.push(0.5 * h * (quad(&qi, &vx) + quad(&ai, &vy)));
    }
    Ok(ActionValue { j: per.iter().sum(), per_interval: per })
}

fn quad(m: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i] * (0..n).map(|j| m[i * n + j] * v[j]).sum::<f64>()).sum()
}

/// `{(X_T, Y_T) : C_x X_T + C_y Y_T = rhs}` with one row per equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineTarget {
    /// Rows of length `p + l`: `X` coefficients first.
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl AffineTarget {
    pub fn unconstrained() -> Self {
        Self { rows: Vec::new(), rhs: Vec::new() }
    }

    /// `X_T[component] = value`.
    pub fn x_component(p: usize, l: usize, component: usize, value: f64) -> Self {
        let mut row = vec![0.0; p + l];
        row[component] = 1.0;
        Self { rows: vec![row], rhs: vec![value] }
    }
}

/// Flat unknowns: node `k = 1..=n` holds `[X_k, Y_k]` at `(k-1)·w`.
struct Problem<'a> {
    avg: &'a AveragedModel,
    y0: Vec<f64>,
    n: usize,
    h: f64,
    p: usize,
    l: usize,
}

impl Problem<'_> {
    fn w(&self) -> usize {
        self.p + self.l
    }

    fn node<'v>(&self, v: &'v [f64], k: usize, x0: &'v [f64]) -> &'v [f64] {
        if k == 0 {
            x0
        } else {
            &v[(k - 1) * self.w()..k * self.w()]
        }
    }

    /// Objective and gradient; `None` when `Y` leaves the table.
    fn eval(&self, v: &[f64], grad: Option<&mut [f64]>) -> Option<f64> {
        let (p, l, w, h) = (self.p, self.l, self.w(), self.h);
        let mut start = vec![0.0; w];
        start[p..].copy_from_slice(&self.y0);
        let mut vals = empty_values(self.avg);
        let mut shifted = empty_values(self.avg);
        let mut total = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        for k in 0..self.n {
            let cur = self.node(v, k, &start);
            let next = self.node(v, k + 1, &start);
            let yk = &cur[p..];
            if !self.avg.eval_into(yk, &mut vals) {
                return None;
            }
            let qi = inverse(&vals.q, p).ok()?;
            let ai = inverse(&vals.a, l).ok()?;
            let vx: Vec<f64> = (0..p).map(|c| (next[c] - cur[c]) / h).collect();
            let vy: Vec<f64> = (0..l).map(|c| (next[p + c] - cur[p + c]) / h - vals.f[c]).collect();
            total += 0.5 * h * (quad(&qi, &vx) + quad(&ai, &vy));
            let Some(g) = g.as_deref_mut() else { continue };
            // with velocity (next - cur)/h the node derivatives are ±M v
            let mx: Vec<f64> = (0..p).map(|i| (0..p).map(|j| qi[i * p + j] * vx[j]).sum()).collect();
            let my: Vec<f64> = (0..l).map(|i| (0..l).map(|j| ai[i * l + j] * vy[j]).sum()).collect();
            let mut add = |node: usize, comp: usize, val: f64| {
                if node > 0 {
                    g[(node - 1) * w + comp] += val;
                }
            };
            for c in 0..p {
                add(k + 1, c, mx[c]);
                add(k, c, -mx[c]);
            }
            for c in 0..l {
                add(k + 1, p + c, my[c]);
                add(k, p + c, -my[c]);
            }
            if k == 0 {
                continue;
            }
            // coefficient dependence on Y_k, velocities held fixed: central
            // differences of the interpolant
            for m in 0..l {
                let step = 1e-6 * self.avg.y_grid.axis(m).step();
                let mut plus = yk.to_vec();
                let mut minus = yk.to_vec();
                plus[m] += step;
                minus[m] -= step;
                let mut cost = |y: &[f64]| -> Option<f64> {
                    if !self.avg.eval_into(y, &mut shifted) {
                        return None;
                    }
                    let qi = inverse(&shifted.q, p).ok()?;
                    let ai = inverse(&shifted.a, l).ok()?;
                    let vy: Vec<f64> = (0..l).map(|c| (next[p + c] - cur[p + c]) / h - shifted.f[c]).collect();
                    Some(0.5 * h * (quad(&qi, &vx) + quad(&ai, &vy)))
                };
                let coef_part = match (cost(&plus), cost(&minus)) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * step),
                    (Some(a), None) => (a - cost(yk)?) / step,
                    (None, Some(b)) => (cost(yk)? - b) / step,
                    (None, None) => return None,
                };
                g[(k - 1) * w + p + m] += coef_part;
            }
        }
        Some(total)
    }
}

/// Minimizes the discretized action over paths on `intervals` equal steps
/// whose terminal node satisfies `target` exactly, by preconditioned
/// projected gradient descent with backtracking.
pub fn minimize_endpoint(
    avg: &AveragedModel,
    y0: &[f64],
    t_end: f64,
    target: &AffineTarget,
    intervals: usize,
) -> Result<(DiscretePath, ActionValue)> {
    avg.require_nonsingular()?;
    let (p, l) = (avg.p, avg.l);
    let w = p + l;
    if intervals < 8 {
        return Err(Error::InvalidArgument(format!("mesh needs at least 8 intervals, got {intervals}")));
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    if target.rows.len() != target.rhs.len() || target.rows.iter().any(|r| r.len() != w) {
        return Err(Error::InvalidArgument(format!("constraint rows must have length p + l = {w}")));
    }
    let kc = target.rows.len();
    let cflat: Vec<f64> = target.rows.iter().flatten().copied().collect();
    let gram: Vec<f64> = (0..kc * kc)
        .map(|ij| (0..w).map(|t| cflat[(ij / kc) * w + t] * cflat[(ij % kc) * w + t]).sum())
        .collect();
    let gram_inv = if kc > 0 {
        inverse(&gram, kc).map_err(|_| Error::Precondition("constraint matrix is not full rank".into()))?
    } else {
        Vec::new()
    };
    if kc > 0 && (0..kc).any(|i| gram_inv[i * kc + i].abs() > 1e12) {
        return Err(Error::Precondition("constraint matrix is not full rank".into()));
    }

    let n = intervals;
    let h = t_end / n as f64;
    let prob = Problem { avg, y0: y0.to_vec(), n, h, p, l };

    // start from the zero-cost orbit, shifted linearly in time onto the target
    let base = DiscretePath::zero_cost(avg, y0, t_end, n)?;
    let mut v = vec![0.0; n * w];
    for k in 1..=n {
        v[(k - 1) * w..(k - 1) * w + p].copy_from_slice(base.x_at(k));
        v[(k - 1) * w + p..k * w].copy_from_slice(base.y_at(k));
    }
    let end = v[(n - 1) * w..].to_vec();
    let corr = project_correction(&cflat, &gram_inv, &target.rhs, &end, kc, w);
    for k in 1..=n {
        let s = k as f64 / n as f64;
        for c in 0..w {
            v[(k - 1) * w + c] += s * corr[c];
        }
    }

    // Preconditioner: block-tridiagonal (T ⊗ M)/h with M from the start point.
    let m0 = avg.eval(y0).ok_or(Error::OutOfRange { what: "initial slow value".into(), time: 0.0 })?;
    let mut mblock = vec![0.0; w * w];
    let qi = inverse(&m0.q, p)?;
    let ai = inverse(&m0.a, l)?;
    for i in 0..p {
        for j in 0..p {
            mblock[i * w + j] = qi[i * p + j];
        }
    }
    for i in 0..l {
        for j in 0..l {
            mblock[(p + i) * w + p + j] = ai[i * l + j];
        }
    }
    let m_inv = inverse(&mblock, w)?;
    let precond = |g: &[f64]| -> Vec<f64> {
        // solve T z = g per component (T tridiagonal: 2 on the diagonal, 1 at the end, -1 off), then apply h M⁻¹
        let mut z = vec![0.0; n * w];
        for c in 0..w {
            let col: Vec<f64> = (0..n).map(|k| g[k * w + c]).collect();
            let sol = solve_path_laplacian(&col);
            for k in 0..n {
                z[k * w + c] = sol[k];
            }
        }
        let mut out = vec![0.0; n * w];
        for k in 0..n {
            for i in 0..w {
                out[k * w + i] = h * (0..w).map(|j| m_inv[i * w + j] * z[k * w + j]).sum::<f64>();
            }
        }
        out
    };
    // P⁻¹ Eᵀ for the terminal constraint rows, for the metric projection
    let pinv_rows: Vec<Vec<f64>> = (0..kc)
        .map(|r| {
            let mut e = vec![0.0; n * w];
            e[(n - 1) * w..].copy_from_slice(&cflat[r * w..(r + 1) * w]);
            precond(&e)
        })
        .collect();
    let s_mat: Vec<f64> = (0..kc * kc)
        .map(|ij| {
            let (r, c) = (ij / kc, ij % kc);
            (0..w).map(|t| cflat[r * w + t] * pinv_rows[c][(n - 1) * w + t]).sum()
        })
        .collect();
    let s_inv = if kc > 0 { inverse(&s_mat, kc)? } else { Vec::new() };

    let mut grad = vec![0.0; n * w];
    let mut f = prob.eval(&v, Some(&mut grad)).ok_or(Error::OutOfRange { what: "initial path".into(), time: 0.0 })?;
    let mut step_len = 1.0f64;
    let mut gnorm = f64::INFINITY;
    for it in 0..MAX_ITERATIONS {
        gnorm = constrained_norm(&grad, &cflat, &gram_inv, kc, n, w);
        if gnorm <= GRADIENT_TOL {
            let path = unpack(&v, &prob, t_end);
            let value = action(&path, avg, y0)?;
            return Ok((path, value));
        }
        // d = -P⁻¹ g, then remove the part that moves C·v_n
        let mut d: Vec<f64> = precond(&grad).into_iter().map(|x| -x).collect();
        if kc > 0 {
            let cd: Vec<f64> = (0..kc).map(|r| (0..w).map(|t| cflat[r * w + t] * d[(n - 1) * w + t]).sum()).collect();
            for r in 0..kc {
                let lam: f64 = (0..kc).map(|c| s_inv[r * kc + c] * cd[c]).sum();
                for (di, pi) in d.iter_mut().zip(&pinv_rows[r]) {
                    *di -= lam * pi;
                }
            }
        }
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // numerically flat along the feasible set
            let path = unpack(&v, &prob, t_end);
            let value = action(&path, avg, y0)?;
            return Ok((path, value));
        }
        let mut t = (step_len * 2.0).min(1.0);
        let mut new_grad = vec![0.0; n * w];
        loop {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some(ft) = prob.eval(&trial, Some(&mut new_grad)) {
                if ft <= f + 1e-4 * t * slope {
                    v = trial;
                    f = ft;
                    std::mem::swap(&mut grad, &mut new_grad);
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(Error::NotConverged { iterations: it, grad_norm: gnorm });
            }
        }
        step_len = t;
    }
    Err(Error::NotConverged { iterations: MAX_ITERATIONS, grad_norm: gnorm })
}

/// Correction `δ` of minimal norm with `C (end + δ) = rhs`.
fn project_correction(c: &[f64], gram_inv: &[f64], rhs: &[f64], end: &[f64], kc: usize, w: usize) -> Vec<f64> {
    let mut delta = vec![0.0; w];
    if kc == 0 {
        return delta;
    }
    let resid: Vec<f64> = (0..kc).map(|r| rhs[r] - (0..w).map(|t| c[r * w + t] * end[t]).sum::<f64>()).collect();
    for r in 0..kc {
        let lam: f64 = (0..kc).map(|s| gram_inv[r * kc + s] * resid[s]).sum();
        for t in 0..w {
            delta[t] += lam * c[r * w + t];
        }
    }
    delta
}

/// Euclidean norm of the gradient after removing its component along the
/// constraint normals at the terminal node.
fn constrained_norm(g: &[f64], c: &[f64], gram_inv: &[f64], kc: usize, n: usize, w: usize) -> f64 {
    let mut g = g.to_vec();
    if kc > 0 {
        let end = (n - 1) * w;
        let cg: Vec<f64> = (0..kc).map(|r| (0..w).map(|t| c[r * w + t] * g[end + t]).sum()).collect();
        for r in 0..kc {
            let lam: f64 = (0..kc).map(|s| gram_inv[r * kc + s] * cg[s]).sum();
            for t in 0..w {
                g[end + t] -= lam * c[r * w + t];
            }
        }
    }
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `T z = g` for the path Laplacian with a fixed left end and a free
/// right end (Thomas algorithm).
fn solve_path_laplacian(g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let diag = |k: usize| if k + 1 == n { 1.0 } else { 2.0 };
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = -1.0 / diag(0);
    dp[0] = g[0] / diag(0);
    for k in 1..n {
        let m = diag(k) + cp[k - 1];
        cp[k] = -1.0 / m;
        dp[k] = (g[k] + dp[k - 1]) / m;
    }
    let mut z = vec![0.0; n];
    z[n - 1] = dp[n - 1];
    for k in (0..n - 1).rev() {
        z[k] = dp[k] - cp[k] * z[k + 1];
    }
    z
}

fn unpack(v: &[f64], prob: &Problem<'_>, t_end: f64) -> DiscretePath {
    let (p, l, n, w) = (prob.p, prob.l, prob.n, prob.w());
    let mut x = vec![0.0; (n + 1) * p];
    let mut y = Vec::with_capacity((n + 1) * l);
    y.extend_from_slice(&prob.y0);
    for k in 1..=n {
        x[k * p..(k + 1) * p].copy_from_slice(&v[(k - 1) * w..(k - 1) * w + p]);
        y.extend_from_slice(&v[(k - 1) * w + p..k * w]);
    }
    DiscretePath { times: (0..=n).map(|k| t_end * k as f64 / n as f64).collect(), p, l, x, y }
}

/// Terminal half-space `{a · X_T > c}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub threshold: f64,
}

/// Finite-horizon prediction `inf J` over the boundary of the half-space;
/// `0` when the zero-cost path already lies in its closure.
pub fn mdp_prediction(avg: &AveragedModel, y0: &[f64], t_end: f64, event: &HalfSpace, intervals: usize) -> Result<f64> {
    let (p, l) = (avg.p, avg.l);
    if event.normal.len() != p || event.normal.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument(format!("half-space normal must be a nonzero vector of length {p}")));
    }
    if event.threshold <= 0.0 {
        avg.require_nonsingular()?;
        return Ok(0.0);
    }
    let mut row = event.normal.clone();
    row.extend(std::iter::repeat_n(0.0, l));
    let target = AffineTarget { rows: vec![row], rhs: vec![event.threshold] };
    minimize_endpoint(avg, y0, t_end, &target, intervals).map(|(_, v)| v.j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn ou_avg() -> AveragedModel {
        AveragedModel::from_fn(Grid::cube(1, -4.0, 4.0, 81).unwrap(), 1, 1, |y, f, a, q| {
            f[0] = -y[0];
            a[0] = 1.0;
            q[0] = 2.0;
        })
        .unwrap()
    }

    #[test]
    fn zero_cost_orbit_has_zero_action() {
        let avg = ou_avg();
        let path = DiscretePath::zero_cost(&avg, &[1.0], 1.0, 64).unwrap();
        // zero up to the roundoff of the Euler update
        assert!(action(&path, &avg, &[1.0]).unwrap().j < 1e-25);
        let mut bad = path.clone();
        bad.x[0] = 0.1;
        assert_eq!(action(&bad, &avg, &[1.0]).unwrap().j, f64::INFINITY);
    }

    #[test]
    fn straight_line_action() {
        let avg = ou_avg();
        let mut path = DiscretePath::zero_cost(&avg, &[0.0], 1.0, 100).unwrap();
        for k in 0..=100 {
            path.x[k] = k as f64 / 100.0;
        }
        let v = action(&path, &avg, &[0.0]).unwrap();
        assert!((v.j - 0.25).abs() < 1e-12);
        assert!((v.per_interval.iter().sum::<f64>() - v.j).abs() < 1e-15);
    }

    #[test]
    fn constant_slow_deviation() {
        let avg = ou_avg();
        let (n, t, delta) = (200, 2.0, 0.3);
        let h = t / n as f64;
        let mut path = DiscretePath::zero_cost(&avg, &[0.5], t, n).unwrap();
        for k in 0..n {
            path.y[k + 1] = path.y[k] + h * (-path.y[k] + delta);
        }
        let v = action(&path, &avg, &[0.5]).unwrap();
        assert!((v.j - delta * delta * t / 2.0).abs() < 1e-10);
    }

    #[test]
    fn minimizer_is_straight_line() {
        let avg = ou_avg();
        let target = AffineTarget::x_component(1, 1, 0, 1.0);
        let (path, v) = minimize_endpoint(&avg, &[0.0], 1.0, &target, 128).unwrap();
        assert!((v.j - 0.25).abs() < 0.0025, "{}", v.j);
        for k in 0..128 {
            let vel = (path.x[k + 1] - path.x[k]) * 128.0;
            assert!((vel - 1.0).abs() < 0.01);
        }
        let (_, free) = minimize_endpoint(&avg, &[0.3], 1.0, &AffineTarget::unconstrained(), 16).unwrap();
        assert!(free.j.abs() < 1e-20);
    }

    #[test]
    fn prediction_scaling() {
        let avg = ou_avg();
        let pr = |c: f64| mdp_prediction(&avg, &[0.0], 1.0, &HalfSpace { normal: vec![1.0], threshold: c }, 32).unwrap();
        assert_eq!(pr(0.0), 0.0);
        let (a, b, c) = (pr(0.5), pr(1.0), pr(2.0));
        assert!((b - 0.25).abs() < 1e-6);
        assert!((a / b - 0.25).abs() < 0.005 && (c / b - 4.0).abs() < 0.08);
    }

    #[test]
    fn rank_deficient_target_is_rejected() {
        let avg = ou_avg();
        let target = AffineTarget { rows: vec![vec![1.0, 0.0], vec![2.0, 0.0]], rhs: vec![1.0, 2.0] };
        assert!(matches!(minimize_endpoint(&avg, &[0.0], 1.0, &target, 16), Err(Error::Precondition(_))));
    }
}
