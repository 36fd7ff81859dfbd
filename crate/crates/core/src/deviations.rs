//! The corrector martingale `X̂`, the decomposition of `Δ = X − X̂` into
//! boundary, generator and noise terms, and the Lyapunov certificate for
//! `v(z) = ‖z‖²/(1+‖z‖)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::averaging::{CorrectorTable, CorrectorValues};
use crate::error::{Error, Result};
use crate::grid::{FieldRole, Grid, GridField};
use crate::mcengine::{TailEstimate, MIN_PATHS};
use crate::model::ModelSpec;
use crate::rng::NoiseKey;
use crate::simulate::{replay_fast, simulate_with, Mesh, NoiseSource, PathSample, SimOptions};

/// `X̂`, the three `Δ` terms and the residual of the identity
/// `X = X̂ + boundary + generator + noise` along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub path: PathSample,
    /// `ε^{1/2-κ} M`, `p` values per macro time.
    pub xhat: Vec<f64>,
    /// `ε^{1-κ} [u(z₀,y₀) − u(ξ_t,Y_t)]`.
    pub boundary: Vec<f64>,
    /// `ε^{1-κ} ∫ 𝔏^ε u ds`.
    pub generator: Vec<f64>,
    /// `ε^{3/2-2κ} ∫ ∇_y u G dW`.
    pub noise: Vec<f64>,
    /// `max_t ‖X_t − X̂_t − (boundary + generator + noise)_t‖`.
    pub identity_residual: f64,
    /// Unscaled `M_T` and its realized quadratic variation `Σ (ΔM)²`
    /// (`p × p`), and `∫ Q(ξ,Y) ds` on the same micro grid.
    pub martingale: Vec<f64>,
    pub realized_qv: Vec<f64>,
    pub q_integral: Vec<f64>,
}

impl DeltaReport {
    fn p(&self) -> usize {
        self.path.p
    }

    /// `Δ_t = X_t − X̂_t` at macro index `k`.
    pub fn delta_at(&self, k: usize) -> Vec<f64> {
        let p = self.p();
        (0..p).map(|c| self.path.x[k * p + c] - self.xhat[k * p + c]).collect()
    }

    fn sup_norm(&self, v: &[f64]) -> f64 {
        v.chunks(self.p().max(1)).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    pub fn sup_delta(&self) -> f64 {
        (0..self.path.len())
            .map(|k| self.delta_at(k).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn sup_boundary(&self) -> f64 {
        self.sup_norm(&self.boundary)
    }

    pub fn sup_generator(&self) -> f64 {
        self.sup_norm(&self.generator)
    }

    pub fn sup_noise(&self) -> f64 {
        self.sup_norm(&self.noise)
    }

    /// One row per macro time: `t, X, Xhat, boundary, generator, noise`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let p = self.p();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for name in ["X", "Xhat", "boundary", "generator", "noise"] {
            header.extend((1..=p).map(|c| format!("{name}_{c}")));
        }
        wr.write_record(&header)?;
        for (k, t) in self.path.times.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            for v in [&self.path.x, &self.xhat, &self.boundary, &self.generator, &self.noise] {
                rec.extend(v[k * p..(k + 1) * p].iter().map(|x| x.to_string()));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Builds `X̂` and the `Δ` terms from the increments stored in `path`.
pub fn corrector_path(spec: &ModelSpec, path: &PathSample, table: &CorrectorTable) -> Result<DeltaReport> {
    let dims = spec.dims();
    let (d, l, p) = (dims.fast, dims.slow, dims.output);
    if path.d != d || path.l != l || path.p != p || table.d != d || table.l != l || table.p != p {
        return Err(Error::InvalidArgument("path, table and model dimensions differ".into()));
    }
    if path.epsilon != spec.epsilon() || path.kappa != spec.kappa() {
        return Err(Error::InvalidArgument("path was simulated with different scales".into()));
    }
    if !path.has_noise() || path.dw.len() != path.steps() * l {
        return Err(Error::InvalidArgument("path does not carry its Brownian increments".into()));
    }
    let eps = spec.epsilon();
    let kappa = spec.kappa();
    let small = eps.powf(1.0 - 2.0 * kappa);
    let n = path.steps();

    let mut cv = CorrectorValues::zeros(d, l, p);
    let mut sigma = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    let mut fval = vec![0.0; l];
    let mut amat = vec![0.0; l * l];
    let mut gmat = vec![0.0; l * l];
    let mut gs = vec![0.0; p * d];
    let mut q = vec![0.0; p * p];

    // unscaled running sums, recorded at macro times
    let mut m = vec![0.0; p];
    let mut gen = vec![0.0; p];
    let mut qv = vec![0.0; p * p];
    let mut qint = vec![0.0; p * p];
    let mut m_at = vec![0.0; (n + 1) * p];
    let mut gen_at = vec![0.0; (n + 1) * p];
    let mut failure: Option<Error> = None;

    let micro = path.micro_steps;
    replay_fast(spec, path, |s| {
        if failure.is_some() {
            return;
        }
        if !table.eval_into(s.z, s.y, &mut cv) {
            failure = Some(Error::OutOfRange { what: "slow variable (corrector table)".into(), time: s.t });
            return;
        }
        spec.fast_diffusion(s.z, s.y, &mut sigma);
        spec.fast_covariance(s.z, s.y, &mut a);
        spec.slow_drift(s.z, s.y, &mut fval);
        spec.slow_covariance(s.z, s.y, &mut amat);
        let db = &path.db[s.micro * d..(s.micro + 1) * d];
        for c in 0..p {
            let mut dm = 0.0;
            for j in 0..d {
                let g: f64 = (0..d).map(|i| cv.grad_u[c * d + i] * sigma[i * d + j]).sum();
                gs[c * d + j] = g;
                dm += g * db[j];
            }
            m[c] += dm;
            let mut lu = 0.0;
            for i in 0..l {
                lu += fval[i] * cv.dy_u[c * l + i];
                for j in 0..l {
                    lu += 0.5 * small * amat[i * l + j] * cv.dyy_u[c * l * l + i * l + j];
                }
            }
            gen[c] += lu * s.h_fast;
        }
        for r in 0..p {
            for c in 0..p {
                let dmr: f64 = (0..d).map(|j| gs[r * d + j] * db[j]).sum();
                let dmc: f64 = (0..d).map(|j| gs[c * d + j] * db[j]).sum();
                qv[r * p + c] += dmr * dmc;
                q[r * p + c] = (0..d)
                    .map(|i| (0..d).map(|j| cv.grad_u[r * d + i] * a[i * d + j] * cv.grad_u[c * d + j]).sum::<f64>())
                    .sum();
                qint[r * p + c] += q[r * p + c] * s.h_fast;
            }
        }
        if s.micro + 1 == (s.macro_index + 1) * micro {
            let k = s.macro_index + 1;
            m_at[k * p..(k + 1) * p].copy_from_slice(&m);
            gen_at[k * p..(k + 1) * p].copy_from_slice(&gen);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let c_mart = eps.powf(0.5 - kappa);
    let c_corr = eps.powf(1.0 - kappa);
    let c_noise = eps.powf(1.5 - 2.0 * kappa);
    let mut u0 = vec![0.0; p];
    let mut xhat = vec![0.0; (n + 1) * p];
    let mut boundary = vec![0.0; (n + 1) * p];
    let mut generator = vec![0.0; (n + 1) * p];
    let mut noise = vec![0.0; (n + 1) * p];
    let mut noise_sum = vec![0.0; p];
    let mut residual = 0.0f64;
    for k in 0..=n {
        let (z, y) = (path.xi_at(k), path.y_at(k));
        if !table.eval_into(z, y, &mut cv) {
            return Err(Error::OutOfRange { what: "slow variable (corrector table)".into(), time: path.times[k] });
        }
        if k == 0 {
            u0.copy_from_slice(&cv.u);
        }
        let mut err = 0.0;
        for c in 0..p {
            let i = k * p + c;
            xhat[i] = c_mart * m_at[i];
            boundary[i] = c_corr * (u0[c] - cv.u[c]);
            generator[i] = c_corr * gen_at[i];
            noise[i] = c_noise * noise_sum[c];
            let r = path.x[i] - xhat[i] - boundary[i] - generator[i] - noise[i];
            err += r * r;
        }
        residual = residual.max(err.sqrt());
        if k < n {
            spec.slow_diffusion(z, y, &mut gmat);
            let dw = &path.dw[k * l..(k + 1) * l];
            for c in 0..p {
                for i in 0..l {
                    let gdw: f64 = (0..l).map(|j| gmat[i * l + j] * dw[j]).sum();
                    noise_sum[c] += cv.dy_u[c * l + i] * gdw;
                }
            }
        }
    }
    Ok(DeltaReport {
        path: path.clone(),
        xhat,
        boundary,
        generator,
        noise,
        identity_residual: residual,
        martingale: m,
        realized_qv: qv,
        q_integral: qint,
    })
}

/// Per-ε frequencies of `sup‖Δ‖ > η` and of each term exceeding `η`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegligibilityRow {
    pub epsilon: f64,
    pub delta: TailEstimate,
    pub boundary: TailEstimate,
    pub generator: TailEstimate,
    pub noise: TailEstimate,
}

impl NegligibilityRow {
    pub fn estimates(&self) -> [&TailEstimate; 4] {
        [&self.delta, &self.boundary, &self.generator, &self.noise]
    }
}

/// Writes one row per `(ε, statistic)`.
pub fn write_negligibility_csv<W: std::io::Write>(rows: &[NegligibilityRow], w: W) -> Result<()> {
    let flat: Vec<TailEstimate> = rows.iter().flat_map(|r| r.estimates().map(Clone::clone)).collect();
    crate::mcengine::write_sweep_csv(&flat, w)
}

/// Simulates `N` paths per `ε` and counts `sup_t‖Δ_t‖ > η` together with the
/// same event for each of the three terms.
#[allow(clippy::too_many_arguments)]
pub fn negligibility_sweep(
    spec: &ModelSpec,
    table: &CorrectorTable,
    epsilons: &[f64],
    eta: f64,
    t_end: f64,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<NegligibilityRow>> {
    if n < MIN_PATHS {
        return Err(Error::InvalidArgument(format!("need N >= {MIN_PATHS} paths, got {n}")));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("epsilon list must be decreasing".into()));
    }
    let mesh = Mesh::new(t_end, h)?;
    epsilons
        .iter()
        .map(|&eps| {
            let model = spec.with_epsilon(eps)?;
            let counts = (0..n)
                .into_par_iter()
                .map(|i| {
                    let key = NoiseKey::new(seed).with_path(i as u64);
                    let path = simulate_with(&model, mesh, NoiseSource::Keyed(key), SimOptions::default(), |_| {})?;
                    let r = corrector_path(&model, &path, table)?;
                    let sups = [r.sup_delta(), r.sup_boundary(), r.sup_generator(), r.sup_noise()];
                    Ok::<_, Error>(sups.map(|s| u64::from(s > eta)))
                })
                .try_reduce(|| [0u64; 4], |a, b| Ok([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]))?;
            let est = |name: &str, hits: u64| {
                TailEstimate::new(format!("sup|{name}| > {eta}"), eps, model.kappa(), eps, hits, n as u64)
            };
            Ok(NegligibilityRow {
                epsilon: eps,
                delta: est("Delta", counts[0]),
                boundary: est("boundary", counts[1]),
                generator: est("generator", counts[2]),
                noise: est("noise", counts[3]),
            })
        })
        .collect()
}

/// `K = sup 𝒟^y v`, the certified radius and the field `𝒟^y v`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub k: f64,
    pub r_circ: f64,
    pub eta: f64,
    pub dv_field: GridField,
}

/// `𝒟^y v = L^y v + ½‖∇v σ‖²` for `v(z) = r²/(1+r)`, node-wise.
pub fn lyapunov_field(spec: &ModelSpec, y: &[f64], grid: &Grid) -> Result<GridField> {
    let d = spec.dims().fast;
    if grid.dim() != d || d > 2 {
        return Err(Error::GridMismatch(format!("need a grid with d = {d} <= 2 axes")));
    }
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    Ok(GridField::from_fn(grid, y, 1, FieldRole::Sampled, |z, out| {
        spec.fast_drift(z, y, &mut b);
        spec.fast_covariance(z, y, &mut a);
        lyapunov_derivatives(z, &mut grad, &mut hess);
        let mut val = 0.0;
        for i in 0..d {
            val += b[i] * grad[i];
            for j in 0..d {
                val += 0.5 * a[i * d + j] * hess[i * d + j] + 0.5 * grad[i] * a[i * d + j] * grad[j];
            }
        }
        out[0] = val;
    }))
}

/// Gradient and Hessian of `v(z) = r²/(1+r)`.
pub fn lyapunov_derivatives(z: &[f64], grad: &mut [f64], hess: &mut [f64]) {
    let d = z.len();
    let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let g1 = r * (2.0 + r) / ((1.0 + r) * (1.0 + r));
    let g2 = 2.0 / (1.0 + r).powi(3);
    for i in 0..d {
        for j in 0..d {
            let eye = if i == j { 1.0 } else { 0.0 };
            hess[i * d + j] = if r == 0.0 {
                g2 * eye
            } else {
                let (ei, ej) = (z[i] / r, z[j] / r);
                g2 * ei * ej + g1 / r * (eye - ei * ej)
            };
        }
        grad[i] = if r == 0.0 { 0.0 } else { g1 * z[i] / r };
    }
}

/// `K` and the smallest node radius `r°` with
/// `η · inf_{‖z‖>r°} (K − 𝒟^y v) > K` on `grid`.
pub fn lyapunov_certificate(spec: &ModelSpec, y: &[f64], grid: &Grid, eta: f64) -> Result<CertificateReport> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let field = lyapunov_field(spec, y, grid)?;
    let k = field.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !k.is_finite() {
        return Err(Error::InvalidModel("non-finite Lyapunov operator value".into()));
    }
    let mut by_radius: Vec<(f64, f64)> = (0..grid.len()).map(|i| (grid.radius(i), k - field.values[i])).collect();
    by_radius.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix[i] = min margin over nodes with radius > by_radius[i].0
    let mut best = None;
    let mut tail_min = f64::INFINITY;
    let mut i = by_radius.len();
    while i > 0 {
        let r = by_radius[i - 1].0;
        let mut j = i;
        while j > 0 && by_radius[j - 1].0 == r {
            j -= 1;
        }
        if tail_min.is_finite() && eta * tail_min > k {
            best = Some(r);
        }
        for item in &by_radius[j..i] {
            tail_min = tail_min.min(item.1);
        }
        i = j;
    }
    match best {
        Some(r_circ) => Ok(CertificateReport { k, r_circ, eta, dv_field: field }),
        None => Err(Error::NoCoercivity { k }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::{tabulate, TabulationConfig};
    use crate::model::{coefficient, ou};

    fn ou_table() -> CorrectorTable {
        let cfg = TabulationConfig::new(Grid::cube(1, -8.0, 8.0, 161).unwrap());
        tabulate(&ou(), &Grid::cube(1, -4.0, 4.0, 9).unwrap(), &cfg).unwrap().1
    }

    #[test]
    fn ou_identity_is_exact() {
        let spec = ou();
        let table = ou_table();
        let path = crate::simulate::simulate_pair(&spec, 1.0, 1e-3, 5).unwrap();
        let r = corrector_path(&spec, &path, &table).unwrap();
        assert!(r.identity_residual < 1e-10, "{}", r.identity_residual);
        let eps: f64 = spec.epsilon();
        for k in 0..path.len() {
            let want = eps.powf(0.75) * (spec.z0()[0] - path.xi_at(k)[0]);
            assert!((r.delta_at(k)[0] - want).abs() < 1e-10);
            assert!(r.generator[k].abs() < 1e-12 && r.noise[k].abs() < 1e-12);
        }
        // X̂ equals the noise scale times M, by construction
        let m_t = r.martingale[0] * eps.powf(0.25);
        assert_eq!(m_t, r.xhat[path.steps()]);
    }

    #[test]
    fn zero_integrand_gives_zero_terms() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.integrand = coefficient(|_, _, o| o[0] = 0.0);
        let spec = spec.with_coefficients(c);
        let cfg = TabulationConfig::new(Grid::cube(1, -8.0, 8.0, 161).unwrap());
        let table = tabulate(&spec, &Grid::cube(1, -4.0, 4.0, 9).unwrap(), &cfg).unwrap().1;
        let path = crate::simulate::simulate_pair(&spec, 0.5, 1e-2, 1).unwrap();
        let r = corrector_path(&spec, &path, &table).unwrap();
        let all = r.xhat.iter().chain(&r.boundary).chain(&r.generator).chain(&r.noise);
        assert!(all.into_iter().all(|v| v.abs() < 1e-12));
        assert!(r.identity_residual < 1e-12);
    }

    #[test]
    fn lyapunov_at_origin_and_degenerate() {
        let spec = ou();
        let grid = Grid::cube(1, -10.0, 10.0, 201).unwrap();
        let f = lyapunov_field(&spec, &[0.0], &grid).unwrap();
        assert!((f.values[100] - 2.0).abs() < 1e-12);
        let cert = lyapunov_certificate(&spec, &[0.0], &grid, 0.5).unwrap();
        assert!(cert.k >= 2.0 && cert.r_circ > 0.0);
        for i in 0..grid.len() {
            assert!(cert.dv_field.values[i] <= cert.k);
            if grid.radius(i) > cert.r_circ {
                assert!(0.5 * (cert.k - cert.dv_field.values[i]) > cert.k);
            }
        }
        let mut c = spec.coefficients().clone();
        c.fast_drift = coefficient(|_, _, o| o[0] = 0.0);
        c.fast_diffusion = coefficient(|_, _, o| o[0] = 0.0);
        let flat = lyapunov_field(&spec.with_coefficients(c), &[0.0], &grid).unwrap();
        assert!(flat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn narrow_grid_has_no_certificate() {
        let grid = Grid::cube(1, -0.5, 0.5, 11).unwrap();
        assert!(matches!(lyapunov_certificate(&ou(), &[0.0], &grid, 0.5), Err(Error::NoCoercivity { .. })));
    }
}
