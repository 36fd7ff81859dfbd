//! Invariant density of the frozen fast process and the centering check.

use crate::error::{Error, Result};
use crate::grid::{FieldRole, Grid, GridField};
use crate::linalg::BandMatrix;
use crate::model::ModelSpec;
use crate::operator::{adjoint_residual, check_grid, markov_generator, NodeCoefficients};
use crate::rng::NoiseKey;
use crate::simulate::{simulate_frozen_with, Mesh};

/// Largest admissible density mass in the outer 5% of nodes.
pub const BOUNDARY_MASS_LIMIT: f64 = 0.01;

/// Invariant density on `grid`: closed form for `d = 1`, stationary vector
/// of the discretized generator for `d = 2`.
pub fn invariant_density(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<GridField> {
    match spec.dims().fast {
        1 => invariant_density_1d(spec, y, grid),
        2 => invariant_density_2d(spec, y, grid),
        d => Err(Error::InvalidArgument(format!("grid densities need d <= 2, got d = {d}"))),
    }
}

/// `π(z) ∝ a(z)⁻¹ exp(∫₀^z 2b/a)`, integrated with the endpoint-corrected
/// trapezoidal rule and normalized by the plain trapezoidal rule.
pub fn invariant_density_1d(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<GridField> {
    if spec.dims().fast != 1 {
        return Err(Error::InvalidArgument("closed-form density needs d = 1".into()));
    }
    check_grid(spec, grid)?;
    let coef = NodeCoefficients::sample(spec, y, grid)?;
    let n = grid.len();
    let h = grid.axis(0).step();
    if let Some(i) = (0..n).find(|&i| !(coef.a(i, 0, 0) > 0.0)) {
        return Err(Error::InvalidModel(format!("a(z, y) <= 0 at z = {}", grid.point(i)[0])));
    }
    let g: Vec<f64> = (0..n).map(|i| 2.0 * coef.b(i, 0) / coef.a(i, 0, 0)).collect();
    let dg = derivative4(&g, h);
    let mut log_pi = vec![0.0; n];
    let mut s = 0.0;
    for i in 0..n {
        if i > 0 {
            s += 0.5 * h * (g[i - 1] + g[i]) - h * h / 12.0 * (dg[i] - dg[i - 1]);
        }
        log_pi[i] = s - coef.a(i, 0, 0).ln();
    }
    finish_density(grid, y, log_pi)
}

/// Stationary vector of the reflecting Markov-chain discretization of the
/// frozen generator, found by shifted inverse iteration.
pub fn invariant_density_2d(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<GridField> {
    if spec.dims().fast != 2 {
        return Err(Error::InvalidArgument("grid density solver expects d = 2".into()));
    }
    invariant_density_grid(spec, y, grid)
}

/// The generator-null-vector density for any `d ≤ 2`.
pub fn invariant_density_grid(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<GridField> {
    check_grid(spec, grid)?;
    let coef = NodeCoefficients::sample(spec, y, grid)?;
    let q = markov_generator(&coef, grid);
    let qt = q.transpose();
    let n = grid.len();
    let scale = q.max_abs_diagonal();
    if scale == 0.0 {
        return Err(Error::NullSpace { ratio: 0.0 });
    }
    let mu = 1e-6 * scale;
    let mut shifted = qt.clone();
    for i in 0..n {
        shifted.add(i, i, -mu);
    }
    let lu = shifted.factor()?;

    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..4 {
        lu.solve_in_place(&mut p);
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
    }

    let gap = second_eigenvalue(&qt, &lu, &p);
    let ratio = gap / scale;
    if ratio < 1e-10 {
        return Err(Error::NullSpace { ratio });
    }

    let w = grid.weights();
    let mut pi: Vec<f64> = p.iter().zip(&w).map(|(m, wi)| (m / wi).max(0.0)).collect();
    let total: f64 = pi.iter().zip(&w).map(|(a, b)| a * b).sum();
    pi.iter_mut().for_each(|v| *v /= total);
    let field = GridField { y: y.to_vec(), grid: grid.clone(), components: 1, values: pi, role: FieldRole::Density };
    check_boundary_mass(&field)?;
    Ok(field)
}

/// Magnitude of the eigenvalue of `qt` closest to zero after removing the
/// stationary direction. Vectors summing to zero form an invariant subspace
/// of `qt` that excludes the stationary vector.
fn second_eigenvalue(qt: &BandMatrix, lu: &crate::linalg::BandLu, p: &[f64]) -> f64 {
    let n = p.len();
    let ps: f64 = p.iter().sum();
    let project = |x: &mut Vec<f64>| {
        let s: f64 = x.iter().sum::<f64>() / ps;
        x.iter_mut().zip(p).for_each(|(v, pi)| *v -= s * pi);
    };
    let mut x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 104_729) as f64 / 104_729.0 - 0.5).collect();
    project(&mut x);
    for _ in 0..30 {
        lu.solve_in_place(&mut x);
        project(&mut x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
    }
    let qx = qt.mul_vec(&x);
    qx.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Occupation-measure histogram of the frozen process on the nodes of
/// `bins` (cells are the trapezoidal dual cells). Samples outside the box
/// are discarded.
pub fn invariant_density_empirical(
    spec: &ModelSpec,
    y: &[f64],
    t_end: f64,
    burn_in: f64,
    h: f64,
    bins: &Grid,
    seed: u64,
) -> Result<GridField> {
    if !(t_end > burn_in && burn_in >= 0.0) {
        return Err(Error::InvalidArgument(format!("need T > burn_in >= 0, got T = {t_end}, burn_in = {burn_in}")));
    }
    if bins.dim() != spec.dims().fast {
        return Err(Error::GridMismatch("histogram dimension differs from d".into()));
    }
    let mesh = Mesh::new(t_end, h)?;
    let first = (burn_in / mesh.step()).ceil() as usize;
    let mut counts = vec![0u64; bins.len()];
    let mut kept = 0u64;
    let mut multi = vec![0usize; bins.dim()];
    simulate_frozen_with(spec, y, mesh, NoiseKey::new(seed), false, |k, z| {
        if k < first {
            return;
        }
        for (m, (x, ax)) in multi.iter_mut().zip(z.iter().zip(bins.axes())) {
            if !(*x >= ax.lo && *x <= ax.hi) {
                return;
            }
            *m = (((x - ax.lo) / ax.step()).round() as usize).min(ax.nodes - 1);
        }
        counts[bins.flat_index(&multi)] += 1;
        kept += 1;
    })?;
    if kept == 0 {
        return Err(Error::InvalidArgument("no samples fell inside the histogram box".into()));
    }
    let w = bins.weights();
    let values = counts.iter().zip(&w).map(|(&c, wi)| c as f64 / (kept as f64 * wi)).collect();
    Ok(GridField { y: y.to_vec(), grid: bins.clone(), components: 1, values, role: FieldRole::Density })
}

/// Trapezoidal `π`-weighted integral of every component of `f`.
pub fn check_centering(f: &GridField, pi: &GridField) -> Result<Vec<f64>> {
    f.integral_against(pi)
}

/// Max interior residual of the forward Kolmogorov equation at `pi`.
pub fn stationarity_residual(spec: &ModelSpec, pi: &GridField) -> Result<f64> {
    check_grid(spec, &pi.grid)?;
    let coef = NodeCoefficients::sample(spec, &pi.y, &pi.grid)?;
    Ok(adjoint_residual(&coef, &pi.grid, &pi.values))
}

/// Total-variation distance `½ ∫|π₁ − π₂|` of two densities on one grid.
pub fn total_variation(a: &GridField, b: &GridField) -> Result<f64> {
    a.same_grid(b)?;
    let w = a.grid.weights();
    Ok(0.5 * a.values.iter().zip(&b.values).zip(&w).map(|((x, y), wi)| wi * (x - y).abs()).sum::<f64>())
}

/// Fraction of trapezoidal mass carried by nodes in the outer 5% of any axis.
pub fn boundary_mass_fraction(pi: &GridField) -> f64 {
    let grid = &pi.grid;
    let w = grid.weights();
    let outer: Vec<usize> = grid.axes().iter().map(|a| ((0.05 * a.nodes as f64).ceil() as usize).max(1)).collect();
    let mut edge = 0.0;
    let mut total = 0.0;
    for idx in 0..grid.len() {
        let m = w[idx] * pi.values[idx];
        total += m;
        let mi = grid.multi_index(idx);
        if mi.iter().zip(grid.axes()).zip(&outer).any(|((&i, a), &o)| i < o || i + o >= a.nodes) {
            edge += m;
        }
    }
    if total > 0.0 {
        edge / total
    } else {
        1.0
    }
}

fn check_boundary_mass(pi: &GridField) -> Result<()> {
    let fraction = boundary_mass_fraction(pi);
    if fraction > BOUNDARY_MASS_LIMIT {
        return Err(Error::BoundaryMass { fraction });
    }
    Ok(())
}

fn finish_density(grid: &Grid, y: &[f64], log_pi: Vec<f64>) -> Result<GridField> {
    let top = log_pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::InvalidModel("density exponent is not finite".into()));
    }
    let mut values: Vec<f64> = log_pi.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = values.iter().zip(grid.weights()).map(|(v, w)| v * w).sum();
    values.iter_mut().for_each(|v| *v /= total);
    let field = GridField { y: y.to_vec(), grid: grid.clone(), components: 1, values, role: FieldRole::Density };
    check_boundary_mass(&field)?;
    Ok(field)
}

/// Fourth-order derivative of nodal values (one-sided near the ends); falls
/// back to [`derivative`] on short arrays.
pub(crate) fn derivative4(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    if n < 5 {
        return derivative(f, h);
    }
    let c = 12.0 * h;
    (0..n)
        .map(|i| {
            if i < 2 {
                let w: [f64; 5] = if i == 0 { [-25.0, 48.0, -36.0, 16.0, -3.0] } else { [-3.0, -10.0, 18.0, -6.0, 1.0] };
                f[..5].iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / c
            } else if i + 2 >= n {
                let g = &f[n - 5..];
                let w: [f64; 5] =
                    if i + 1 == n { [3.0, -16.0, 36.0, -48.0, 25.0] } else { [-1.0, 6.0, -18.0, 10.0, 3.0] };
                g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / c
            } else {
                (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / c
            }
        })
        .collect()
}

/// Second-order derivative of nodal values (one-sided at the ends).
pub(crate) fn derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            if n < 3 {
                (f[n - 1] - f[0]) / (h * (n - 1) as f64)
            } else if i == 0 {
                (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
            } else if i + 1 == n {
                (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{coefficient, double_well, ou, Coefficients, Dims, ModelSpec, Scales};
    use std::f64::consts::PI;

    #[test]
    fn fourth_order_derivative_is_exact_on_quartics() {
        let h = 0.3;
        let f: Vec<f64> = (0..9).map(|i| (i as f64 * h).powi(4) - 2.0 * i as f64 * h).collect();
        for (i, d) in derivative4(&f, h).iter().enumerate() {
            let x = i as f64 * h;
            assert!((d - (4.0 * x.powi(3) - 2.0)).abs() < 1e-10, "{i}: {d}");
        }
    }

    #[test]
    fn ou_density_is_standard_normal() {
        let grid = Grid::default_fast(1);
        let pi = invariant_density_1d(&ou(), &[0.0], &grid).unwrap();
        let c = grid.flat_index(&[300]);
        assert!((pi.values[c] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-6, "{}", pi.values[c]);
        assert!((pi.integral()[0] - 1.0).abs() < 1e-12);
        assert!(stationarity_residual(&ou(), &pi).unwrap() < 1e-6);
    }

    #[test]
    fn double_well_integrates_to_one_and_is_symmetric() {
        let grid = Grid::default_fast(1);
        let pi = invariant_density_1d(&double_well(), &[0.0], &grid).unwrap();
        assert!((pi.integral()[0] - 1.0).abs() < 1e-8);
        let n = grid.len();
        for i in 0..n {
            assert!((pi.values[i] - pi.values[n - 1 - i]).abs() <= 1e-10);
        }
        // bimodal: maxima near ±1, local minimum at 0
        let at = |z: f64| pi.values[((z + 6.0) / 0.02f64).round() as usize];
        assert!(at(1.0) > at(0.0) && at(-1.0) > at(0.0));
    }

    #[test]
    fn boundary_mass_is_rejected() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.fast_drift = coefficient(|z, _, o| o[0] = -0.01 * z[0]);
        let spec = spec.with_coefficients(c);
        let err = invariant_density_1d(&spec, &[0.0], &Grid::default_fast(1)).unwrap_err();
        assert!(matches!(err, Error::BoundaryMass { .. }));
    }

    fn product_ou() -> ModelSpec {
        let coeffs = Coefficients {
            fast_drift: coefficient(|z, _, o| {
                o[0] = -z[0];
                o[1] = -z[1];
            }),
            fast_diffusion: coefficient(|_, _, o| o.copy_from_slice(&[2f64.sqrt(), 0.0, 0.0, 2f64.sqrt()])),
            slow_drift: coefficient(|_, y, o| o[0] = -y[0]),
            slow_diffusion: coefficient(|_, _, o| o[0] = 1.0),
            integrand: coefficient(|z, _, o| o[0] = z[0] + z[1]),
        };
        ModelSpec::new(
            "ou2",
            Dims::new(2, 1, 1),
            coeffs,
            Scales { epsilon: 0.1, kappa: 0.25, growth_m: 1.0 },
            vec![0.0, 0.0],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn two_dim_product_density() {
        let grid = Grid::cube(2, -5.0, 5.0, 81).unwrap();
        let pi = invariant_density_2d(&product_ou(), &[0.0], &grid).unwrap();
        let mut worst = 0.0f64;
        for idx in 0..grid.len() {
            let z = grid.point(idx);
            let exact = (-(z[0] * z[0] + z[1] * z[1]) / 2.0).exp() / (2.0 * PI);
            worst = worst.max((pi.values[idx] - exact).abs());
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn one_dim_grid_density_matches_closed_form() {
        let grid = Grid::cube(1, -6.0, 6.0, 301).unwrap();
        let a = invariant_density_1d(&ou(), &[0.0], &grid).unwrap();
        let b = invariant_density_grid(&ou(), &[0.0], &grid).unwrap();
        assert!(total_variation(&a, &b).unwrap() < 1e-3);
    }

    #[test]
    fn centering_values() {
        let grid = Grid::default_fast(1);
        let pi = invariant_density_1d(&ou(), &[0.0], &grid).unwrap();
        let f = GridField::from_fn(&grid, &[0.0], 3, FieldRole::Sampled, |z, o| {
            o[0] = z[0];
            o[1] = z[0] * z[0];
            o[2] = 0.0;
        });
        let c = check_centering(&f, &pi).unwrap();
        assert!(c[0].abs() < 1e-10);
        assert!((c[1] - 1.0).abs() < 1e-6);
        assert_eq!(c[2], 0.0);
        let other = GridField::from_fn(&Grid::cube(1, -6.0, 6.0, 11).unwrap(), &[0.0], 1, FieldRole::Sampled, |_, o| o[0] = 1.0);
        assert!(check_centering(&other, &pi).is_err());
    }

    #[test]
    fn empirical_point_mass() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.fast_diffusion = coefficient(|_, _, o| o[0] = 0.0);
        let spec = spec.with_coefficients(c).with_initial(vec![3.0], vec![0.0]).unwrap();
        let bins = Grid::cube(1, -6.0, 6.0, 13).unwrap();
        let pi = invariant_density_empirical(&spec, &[0.0], 50.0, 40.0, 0.01, &bins, 1).unwrap();
        let occupied: Vec<usize> = (0..bins.len()).filter(|&i| pi.values[i] > 0.0).collect();
        assert_eq!(occupied, vec![6]);
    }
}
