//! Finite-difference discretizations of the frozen generator
//! `L^y = ½ Σ a_ij ∂_ij + Σ b_i ∂_i` on a grid with `d ≤ 2` axes.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::BandMatrix;
use crate::model::ModelSpec;

/// Drift and covariance sampled at every grid node.
pub(crate) struct NodeCoefficients {
    pub d: usize,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl NodeCoefficients {
    pub fn sample(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<Self> {
        let d = spec.dims().fast;
        check_grid(spec, grid)?;
        let n = grid.len();
        let mut b = vec![0.0; n * d];
        let mut a = vec![0.0; n * d * d];
        let mut z = vec![0.0; d];
        for idx in 0..n {
            grid.point_into(idx, &mut z);
            spec.fast_drift(&z, y, &mut b[idx * d..(idx + 1) * d]);
            spec.fast_covariance(&z, y, &mut a[idx * d * d..(idx + 1) * d * d]);
        }
        if let Some(bad) = b.iter().chain(&a).position(|v| !v.is_finite()) {
            let idx = if bad < n * d { bad / d } else { (bad - n * d) / (d * d) };
            return Err(Error::InvalidModel(format!(
                "non-finite coefficient at z = {:?}, y = {y:?}",
                grid.point(idx)
            )));
        }
        Ok(Self { d, b, a })
    }

    #[inline]
    pub fn b(&self, idx: usize, i: usize) -> f64 {
        self.b[idx * self.d + i]
    }

    #[inline]
    pub fn a(&self, idx: usize, i: usize, j: usize) -> f64 {
        self.a[idx * self.d * self.d + i * self.d + j]
    }
}

pub(crate) fn check_grid(spec: &ModelSpec, grid: &Grid) -> Result<()> {
    let d = spec.dims().fast;
    if grid.dim() != d {
        return Err(Error::GridMismatch(format!("grid has {} axes, fast dimension is {d}", grid.dim())));
    }
    if d > 2 {
        return Err(Error::InvalidArgument(format!("grid methods need d <= 2, got d = {d}")));
    }
    Ok(())
}

fn bandwidth(grid: &Grid, reach: usize) -> usize {
    // offsets up to `reach` along every axis, including mixed combinations
    (0..grid.dim()).map(|k| reach * grid.stride(k)).sum()
}

/// One-dimensional stencil: `(offset, weight)` pairs.
type Stencil1 = Vec<(isize, f64)>;

/// Second-order first-derivative stencil, one-sided at the ends.
fn first_derivative(i: usize, n: usize, h: f64) -> Stencil1 {
    if i == 0 {
        vec![(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
    } else if i + 1 == n {
        vec![(-2, 0.5 / h), (-1, -2.0 / h), (0, 1.5 / h)]
    } else {
        vec![(-1, -0.5 / h), (1, 0.5 / h)]
    }
}

/// Second-order second-derivative stencil, one-sided at the ends.
fn second_derivative(i: usize, n: usize, h: f64) -> Stencil1 {
    let h2 = h * h;
    if i == 0 {
        vec![(0, 2.0 / h2), (1, -5.0 / h2), (2, 4.0 / h2), (3, -1.0 / h2)]
    } else if i + 1 == n {
        vec![(-3, -1.0 / h2), (-2, 4.0 / h2), (-1, -5.0 / h2), (0, 2.0 / h2)]
    } else {
        vec![(-1, 1.0 / h2), (0, -2.0 / h2), (1, 1.0 / h2)]
    }
}

/// Generator used by the Poisson solver: central differences in the
/// interior and second-order one-sided differences on the boundary.
pub(crate) fn poisson_operator(coef: &NodeCoefficients, grid: &Grid) -> Result<BandMatrix> {
    let d = grid.dim();
    let n = grid.len();
    for a in grid.axes() {
        if a.nodes < 4 {
            return Err(Error::InvalidArgument("Poisson grids need at least 4 nodes per axis".into()));
        }
    }
    let bw = bandwidth(grid, 3);
    let mut m = BandMatrix::zeros(n, bw, bw);
    for idx in 0..n {
        let mi = grid.multi_index(idx);
        let mut push = |offs: &[(usize, isize)], w: f64| {
            let mut j = idx as isize;
            for &(k, o) in offs {
                j += o * grid.stride(k) as isize;
            }
            m.add(idx, j as usize, w);
        };
        for k in 0..d {
            let ax = grid.axis(k);
            let h = ax.step();
            for (o, w) in second_derivative(mi[k], ax.nodes, h) {
                push(&[(k, o)], 0.5 * coef.a(idx, k, k) * w);
            }
            for (o, w) in first_derivative(mi[k], ax.nodes, h) {
                push(&[(k, o)], coef.b(idx, k) * w);
            }
        }
        if d == 2 {
            let a12 = coef.a(idx, 0, 1) + coef.a(idx, 1, 0);
            if a12 != 0.0 {
                let (a0, a1) = (grid.axis(0), grid.axis(1));
                for (o0, w0) in first_derivative(mi[0], a0.nodes, a0.step()) {
                    for (o1, w1) in first_derivative(mi[1], a1.nodes, a1.step()) {
                        push(&[(0, o0), (1, o1)], 0.5 * a12 * w0 * w1);
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Generator of a continuous-time Markov chain on the grid nodes that
/// approximates the frozen diffusion, with jumps leaving the box suppressed
/// (reflection). Drift is centred where that keeps all rates nonnegative and
/// upwinded otherwise; cross-covariances use the positive-coefficient
/// seven-point stencil.
pub(crate) fn markov_generator(coef: &NodeCoefficients, grid: &Grid) -> BandMatrix {
    let d = grid.dim();
    let n = grid.len();
    let bw = bandwidth(grid, 1);
    let mut m = BandMatrix::zeros(n, bw, bw);
    for idx in 0..n {
        let mi = grid.multi_index(idx);
        let mut rates: Vec<(Vec<isize>, f64)> = Vec::with_capacity(8);
        let cross = if d == 2 { 0.5 * (coef.a(idx, 0, 1) + coef.a(idx, 1, 0)) } else { 0.0 };
        let hprod = if d == 2 { grid.axis(0).step() * grid.axis(1).step() } else { 1.0 };
        for k in 0..d {
            let h = grid.axis(k).step();
            let diff = 0.5 * coef.a(idx, k, k) / (h * h) - 0.5 * cross.abs() / hprod;
            let bk = coef.b(idx, k);
            let (up, down) = if diff - 0.5 * bk.abs() / h >= 0.0 {
                (diff + 0.5 * bk / h, diff - 0.5 * bk / h)
            } else {
                (diff.max(0.0) + bk.max(0.0) / h, diff.max(0.0) + (-bk).max(0.0) / h)
            };
            let mut e = vec![0isize; d];
            e[k] = 1;
            rates.push((e.clone(), up));
            e[k] = -1;
            rates.push((e, down));
        }
        if cross != 0.0 {
            let r = 0.5 * cross.abs() / hprod;
            let s = cross.signum() as isize;
            rates.push((vec![1, s], r));
            rates.push((vec![-1, -s], r));
        }
        let mut total = 0.0;
        for (offs, r) in rates {
            if r == 0.0 {
                continue;
            }
            let mut j = idx as isize;
            let mut inside = true;
            for k in 0..d {
                let t = mi[k] as isize + offs[k];
                if t < 0 || t >= grid.axis(k).nodes as isize {
                    inside = false;
                }
                j += offs[k] * grid.stride(k) as isize;
            }
            if inside {
                m.add(idx, j as usize, r);
                total += r;
            }
        }
        m.add(idx, idx, -total);
    }
    m
}

/// Max over nodes at least two cells from the boundary of the fourth-order
/// discretization of the forward operator `½ Σ ∂_ij(a_ij π) − Σ ∂_i(b_i π)`.
pub(crate) fn adjoint_residual(coef: &NodeCoefficients, grid: &Grid, pi: &[f64]) -> f64 {
    let d = grid.dim();
    let d1 = [(-2isize, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)];
    let d2 = [(-2isize, -1.0 / 12.0), (-1, 16.0 / 12.0), (0, -30.0 / 12.0), (1, 16.0 / 12.0), (2, -1.0 / 12.0)];
    let mut worst = 0.0f64;
    for idx in 0..grid.len() {
        let mi = grid.multi_index(idx);
        if (0..d).any(|k| mi[k] < 2 || mi[k] + 3 > grid.axis(k).nodes) {
            continue;
        }
        let shift = |offs: &[(usize, isize)]| {
            let mut j = idx as isize;
            for &(k, o) in offs {
                j += o * grid.stride(k) as isize;
            }
            j as usize
        };
        let mut r = 0.0;
        for k in 0..d {
            let h = grid.axis(k).step();
            for &(o, w) in &d2 {
                let j = shift(&[(k, o)]);
                r += 0.5 * w / (h * h) * coef.a(j, k, k) * pi[j];
            }
            for &(o, w) in &d1 {
                let j = shift(&[(k, o)]);
                r -= w / h * coef.b(j, k) * pi[j];
            }
        }
        if d == 2 {
            let (h0, h1) = (grid.axis(0).step(), grid.axis(1).step());
            for &(o0, w0) in &d1 {
                for &(o1, w1) in &d1 {
                    let j = shift(&[(0, o0), (1, o1)]);
                    let a12 = 0.5 * (coef.a(j, 0, 1) + coef.a(j, 1, 0));
                    r += w0 * w1 / (h0 * h1) * a12 * pi[j];
                }
            }
        }
        worst = worst.max(r.abs());
    }
    worst
}
