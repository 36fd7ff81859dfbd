//! Euler–Maruyama simulation of the coupled system, the frozen fast process
//! and the output functional.
//!
//! Each macro step of length `h` is split into `n_micro = ceil(h / (c_fast ε))`
//! fast micro steps. During a macro step the slow state is frozen at its left
//! value; the fast state, the output integral and the slow drift integral are
//! accumulated at micro resolution, and the slow noise is applied once per
//! macro step.

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{NoiseKey, Stream};

/// Uniform time mesh `t_k = k h`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub t_end: f64,
    pub steps: usize,
}

impl Mesh {
    /// The mesh with `round(t_end / h)` steps (at least one).
    pub fn new(t_end: f64, h: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
        }
        if !(h > 0.0 && h <= t_end) {
            return Err(Error::InvalidArgument(format!("step must lie in (0, T], got {h}")));
        }
        let steps = (t_end / h).round().max(1.0);
        if steps > 1e9 {
            return Err(Error::InvalidArgument(format!("{steps} macro steps requested")));
        }
        Ok(Self { t_end, steps: steps as usize })
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            k as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Simulation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Fast micro step is at most `c_fast · ε`.
    pub c_fast: f64,
    /// Keep the Brownian increments in the returned sample.
    pub store_noise: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { c_fast: 0.1, store_noise: true }
    }
}

/// Where the Brownian increments come from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    /// Counter-based draws keyed by seed, path and step.
    Keyed(NoiseKey),
    /// Explicit increments: `d` per micro step and `l` per macro step,
    /// already scaled by the square root of their step lengths.
    Supplied { db: &'a [f64], dw: &'a [f64] },
}

impl NoiseSource<'_> {
    fn fast(&self, micro: usize, sqrt_h: f64, out: &mut [f64]) -> Result<()> {
        match self {
            NoiseSource::Keyed(key) => {
                key.fill_normals(Stream::Fast, micro as u64, out);
                out.iter_mut().for_each(|v| *v *= sqrt_h);
            }
            NoiseSource::Supplied { db, .. } => {
                let n = out.len();
                let src = db.get(micro * n..(micro + 1) * n).ok_or_else(short_noise)?;
                out.copy_from_slice(src);
            }
        }
        Ok(())
    }

    fn slow(&self, k: usize, sqrt_h: f64, out: &mut [f64]) -> Result<()> {
        match self {
            NoiseSource::Keyed(key) => {
                key.fill_normals(Stream::Slow, k as u64, out);
                out.iter_mut().for_each(|v| *v *= sqrt_h);
            }
            NoiseSource::Supplied { dw, .. } => {
                let n = out.len();
                let src = dw.get(k * n..(k + 1) * n).ok_or_else(short_noise)?;
                out.copy_from_slice(src);
            }
        }
        Ok(())
    }

    fn key(&self) -> Option<NoiseKey> {
        match self {
            NoiseSource::Keyed(k) => Some(*k),
            NoiseSource::Supplied { .. } => None,
        }
    }
}

fn short_noise() -> Error {
    Error::InvalidArgument("supplied noise is shorter than the mesh".into())
}

/// A discretized trajectory. Point `k` of a vector-valued component occupies
/// `[k·dim, (k+1)·dim)` of its buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub d: usize,
    pub l: usize,
    pub p: usize,
    pub xi: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// Fast increments, `d` per micro step (empty if not stored).
    pub db: Vec<f64>,
    /// Slow increments, `l` per macro step (empty if not stored).
    pub dw: Vec<f64>,
    pub micro_steps: usize,
    pub seed: Option<u64>,
    pub path: Option<u64>,
    pub epsilon: f64,
    pub kappa: f64,
}

impl PathSample {
    /// Number of mesh points (`N + 1`).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn xi_at(&self, k: usize) -> &[f64] {
        &self.xi[k * self.d..(k + 1) * self.d]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.l..(k + 1) * self.l]
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.p..(k + 1) * self.p]
    }

    pub fn macro_step(&self) -> f64 {
        self.times[self.times.len() - 1] / self.steps() as f64
    }

    pub fn micro_step(&self) -> f64 {
        self.macro_step() / self.micro_steps as f64
    }

    pub fn has_noise(&self) -> bool {
        !self.db.is_empty() || (self.d == 0 && !self.dw.is_empty())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d).map(|i| format!("xi_{i}")));
        header.extend((1..=self.l).map(|i| format!("Y_{i}")));
        header.extend((1..=self.p).map(|i| format!("X_{i}")));
        wr.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.xi_at(k).iter().chain(self.y_at(k)).chain(self.x_at(k)).map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// State visible to a micro-step observer: the fast state at the left end of
/// micro step `micro` (global index), the frozen slow state and the step.
#[derive(Debug, Clone, Copy)]
pub struct MicroState<'a> {
    pub macro_index: usize,
    pub micro: usize,
    pub t: f64,
    pub z: &'a [f64],
    pub y: &'a [f64],
    pub h_fast: f64,
}

/// Number of micro steps per macro step and the micro step length.
pub fn micro_split(h: f64, epsilon: f64, c_fast: f64) -> Result<(usize, f64)> {
    if !(c_fast > 0.0) {
        return Err(Error::InvalidArgument(format!("c_fast must be positive, got {c_fast}")));
    }
    let ratio = (h / (c_fast * epsilon)).ceil().max(1.0);
    if !ratio.is_finite() || ratio > u32::MAX as f64 {
        return Err(Error::StepUnderflow { epsilon, step: h });
    }
    let n = ratio as usize;
    let hf = h / n as f64;
    if !(hf > 0.0) || hf < h * f64::EPSILON {
        return Err(Error::StepUnderflow { epsilon, step: h });
    }
    Ok((n, hf))
}

/// Workspace for one Euler micro step of the fast process.
pub(crate) struct FastStepper {
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl FastStepper {
    pub(crate) fn new(d: usize) -> Self {
        Self { drift: vec![0.0; d], sigma: vec![0.0; d * d] }
    }

    /// `z ← z + b(z,y) h/ε + σ(z,y) dB / √ε`.
    pub(crate) fn step(&mut self, spec: &ModelSpec, z: &mut [f64], y: &[f64], h: f64, db: &[f64]) {
        let d = z.len();
        let eps = spec.epsilon();
        spec.fast_drift(z, y, &mut self.drift);
        spec.fast_diffusion(z, y, &mut self.sigma);
        let inv_sqrt = 1.0 / eps.sqrt();
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| self.sigma[i * d + j] * db[j]).sum();
            z[i] += self.drift[i] * h / eps + noise * inv_sqrt;
        }
    }
}

/// Simulates `(ξ, Y, X)` on `[0, T]` with macro step `h` and seed `seed`.
pub fn simulate_pair(spec: &ModelSpec, t_end: f64, h: f64, seed: u64) -> Result<PathSample> {
    let mesh = Mesh::new(t_end, h)?;
    simulate_with(spec, mesh, NoiseSource::Keyed(NoiseKey::new(seed)), SimOptions::default(), |_| {})
}

/// Full-control simulation entry point. `observer` is called before every
/// fast micro step.
pub fn simulate_with(
    spec: &ModelSpec,
    mesh: Mesh,
    noise: NoiseSource<'_>,
    opts: SimOptions,
    mut observer: impl FnMut(MicroState<'_>),
) -> Result<PathSample> {
    let dims = spec.dims();
    let (d, l, p) = (dims.fast, dims.slow, dims.output);
    let eps = spec.epsilon();
    let h = mesh.step();
    let (n_micro, hf) = micro_split(h, eps, opts.c_fast)?;
    let sqrt_hf = hf.sqrt();
    let n = mesh.steps;
    let x_scale = eps.powf(-spec.kappa());
    let y_noise = spec.noise_scale();

    let mut xi = Vec::with_capacity((n + 1) * d);
    let mut ys = Vec::with_capacity((n + 1) * l);
    let mut xs = Vec::with_capacity((n + 1) * p);
    let mut db_all = Vec::new();
    let mut dw_all = Vec::new();
    if opts.store_noise {
        db_all.reserve(n * n_micro * d);
        dw_all.reserve(n * l);
    }

    let mut z = spec.z0().to_vec();
    let mut y = spec.y0().to_vec();
    let mut x = vec![0.0; p];
    xi.extend_from_slice(&z);
    ys.extend_from_slice(&y);
    xs.extend_from_slice(&x);

    let mut stepper = FastStepper::new(d);
    let mut db = vec![0.0; d];
    let mut dw = vec![0.0; l];
    let mut hval = vec![0.0; p];
    let mut fval = vec![0.0; l];
    let mut gmat = vec![0.0; l * l];
    let mut y_drift = vec![0.0; l];

    for k in 0..n {
        let t0 = mesh.time(k);
        // slow diffusion uses the left state of the macro step
        spec.slow_diffusion(&z, &y, &mut gmat);
        y_drift.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n_micro {
            let micro = k * n_micro + j;
            observer(MicroState { macro_index: k, micro, t: t0 + j as f64 * hf, z: &z, y: &y, h_fast: hf });
            spec.integrand(&z, &y, &mut hval);
            for (xv, hv) in x.iter_mut().zip(&hval) {
                *xv += x_scale * hv * hf;
            }
            spec.slow_drift(&z, &y, &mut fval);
            for (a, f) in y_drift.iter_mut().zip(&fval) {
                *a += f * hf;
            }
            noise.fast(micro, sqrt_hf, &mut db)?;
            if opts.store_noise {
                db_all.extend_from_slice(&db);
            }
            stepper.step(spec, &mut z, &y, hf, &db);
        }
        noise.slow(k, h.sqrt(), &mut dw)?;
        if opts.store_noise {
            dw_all.extend_from_slice(&dw);
        }
        for i in 0..l {
            let g: f64 = (0..l).map(|j| gmat[i * l + j] * dw[j]).sum();
            y[i] += y_drift[i] + y_noise * g;
        }
        if z.iter().chain(&y).chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k + 1, time: mesh.time(k + 1) });
        }
        xi.extend_from_slice(&z);
        ys.extend_from_slice(&y);
        xs.extend_from_slice(&x);
    }

    let key = noise.key();
    Ok(PathSample {
        times: mesh.times(),
        d,
        l,
        p,
        xi,
        y: ys,
        x: xs,
        db: db_all,
        dw: dw_all,
        micro_steps: n_micro,
        seed: key.map(|k| k.seed),
        path: key.map(|k| k.path),
        epsilon: eps,
        kappa: spec.kappa(),
    })
}

/// Replays the fast micro steps of `path` from its stored increments, calling
/// `observer` before each micro step exactly as during the original run.
pub fn replay_fast(spec: &ModelSpec, path: &PathSample, mut observer: impl FnMut(MicroState<'_>)) -> Result<()> {
    if path.db.is_empty() {
        return Err(Error::InvalidArgument("path does not carry its Brownian increments".into()));
    }
    let d = path.d;
    let hf = path.micro_step();
    let mut stepper = FastStepper::new(d);
    let mut z = spec.z0().to_vec();
    for k in 0..path.steps() {
        let y = path.y_at(k);
        let t0 = path.times[k];
        for j in 0..path.micro_steps {
            let micro = k * path.micro_steps + j;
            observer(MicroState { macro_index: k, micro, t: t0 + j as f64 * hf, z: &z, y, h_fast: hf });
            stepper.step(spec, &mut z, y, hf, &path.db[micro * d..(micro + 1) * d]);
        }
    }
    Ok(())
}

/// The frozen fast process `dz = b(z,y) dt + σ(z,y) dB` with `y` fixed.
pub fn simulate_frozen(spec: &ModelSpec, y: &[f64], t_end: f64, h: f64, seed: u64) -> Result<PathSample> {
    simulate_frozen_with(spec, y, Mesh::new(t_end, h)?, NoiseKey::new(seed), true, |_, _| {})
}

/// Frozen simulation with a per-point observer `(k, z_k)`.
pub fn simulate_frozen_with(
    spec: &ModelSpec,
    y: &[f64],
    mesh: Mesh,
    key: NoiseKey,
    store: bool,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<PathSample> {
    let dims = spec.dims();
    let (d, l, p) = (dims.fast, dims.slow, dims.output);
    if y.len() != l {
        return Err(Error::InvalidArgument(format!("frozen y has dimension {}, expected {l}", y.len())));
    }
    let h = mesh.step();
    let n = mesh.steps;
    let sqrt_h = h.sqrt();
    let mut z = spec.z0().to_vec();
    let mut xi = Vec::new();
    let mut db_all = Vec::new();
    if store {
        xi.reserve((n + 1) * d);
        xi.extend_from_slice(&z);
        db_all.reserve(n * d);
    }
    observer(0, &z);
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut db = vec![0.0; d];
    for k in 0..n {
        spec.fast_drift(&z, y, &mut drift);
        spec.fast_diffusion(&z, y, &mut sigma);
        key.fill_normals(Stream::Fast, k as u64, &mut db);
        db.iter_mut().for_each(|v| *v *= sqrt_h);
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| sigma[i * d + j] * db[j]).sum();
            z[i] += drift[i] * h + noise;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k + 1, time: mesh.time(k + 1) });
        }
        if store {
            xi.extend_from_slice(&z);
            db_all.extend_from_slice(&db);
        }
        observer(k + 1, &z);
    }
    let points = if store { n + 1 } else { 0 };
    Ok(PathSample {
        times: if store { mesh.times() } else { Vec::new() },
        d,
        l,
        p,
        xi,
        y: y.repeat(points),
        x: vec![0.0; points * p],
        db: db_all,
        dw: if store { vec![0.0; n * l] } else { Vec::new() },
        micro_steps: 1,
        seed: Some(key.seed),
        path: Some(key.path),
        epsilon: spec.epsilon(),
        kappa: spec.kappa(),
    })
}

/// Local uniform distance: `max_k Σ|X¹_k − X²_k| + Σ|Y¹_k − Y²_k|`.
pub fn rho_t(a: &PathSample, b: &PathSample) -> Result<f64> {
    if a.times != b.times || a.l != b.l || a.p != b.p {
        return Err(Error::MeshMismatch);
    }
    let mut sup = 0.0f64;
    for k in 0..a.len() {
        let dx: f64 = a.x_at(k).iter().zip(b.x_at(k)).map(|(u, v)| (u - v).abs()).sum();
        let dy: f64 = a.y_at(k).iter().zip(b.y_at(k)).map(|(u, v)| (u - v).abs()).sum();
        sup = sup.max(dx + dy);
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{coefficient, ou, Coefficients};

    fn ou_with(f: impl FnOnce(&mut Coefficients)) -> ModelSpec {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        f(&mut c);
        spec.with_coefficients(c)
    }

    #[test]
    fn zero_integrand_gives_zero_output() {
        let spec = ou_with(|c| c.integrand = coefficient(|_, _, o| o[0] = 0.0));
        let path = simulate_pair(&spec, 1.0, 0.01, 3).unwrap();
        assert!(path.x.iter().all(|&v| v == 0.0));
        assert_eq!(path.x_at(0), &[0.0]);
        assert_eq!(path.y_at(0), spec.y0());
    }

    #[test]
    fn deterministic_decay() {
        let spec = ou_with(|c| {
            c.fast_diffusion = coefficient(|_, _, o| o[0] = 0.0);
            c.slow_diffusion = coefficient(|_, _, o| o[0] = 0.0);
        })
        .with_initial(vec![1.0], vec![0.0])
        .unwrap();
        let path = simulate_pair(&spec, 1.0, 0.01, 0).unwrap();
        let hf = path.micro_step();
        let exact = (-10.0f64).exp();
        let got = path.xi_at(path.steps())[0];
        // Euler gives (1 - hf/ε)^{T/hf}; its deviation from e^{-10} is O(hf)
        assert!((got - exact).abs() <= hf, "{got} vs {exact}");
        assert!((got - (1.0 - hf / 0.1f64).powi((1.0 / hf).round() as i32)).abs() < 1e-15);
    }

    #[test]
    fn reproducible() {
        let spec = ou();
        let a = simulate_pair(&spec, 1.0, 0.01, 11).unwrap();
        let b = simulate_pair(&spec, 1.0, 0.01, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_pair(&spec, 1.0, 0.01, 12).unwrap();
        assert_ne!(a.xi, c.xi);
    }

    #[test]
    fn replay_reconstructs_fast_path() {
        let spec = ou().with_epsilon(0.01).unwrap();
        let path = simulate_pair(&spec, 0.5, 0.01, 5).unwrap();
        assert!(path.micro_steps > 1);
        let mut last = Vec::new();
        let mut count = 0;
        replay_fast(&spec, &path, |s| {
            if s.micro % path.micro_steps == 0 {
                assert_eq!(s.z, path.xi_at(s.macro_index));
            }
            last = s.z.to_vec();
            count += 1;
        })
        .unwrap();
        assert_eq!(count, path.steps() * path.micro_steps);
    }

    #[test]
    fn increment_bound_on_output() {
        let spec = ou().with_epsilon(0.05).unwrap();
        let path = simulate_pair(&spec, 1.0, 0.01, 2).unwrap();
        let h = path.macro_step();
        let hmax = path.xi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = h * spec.epsilon().powf(-spec.kappa()) * hmax;
        for k in 0..path.steps() {
            assert!((path.x_at(k + 1)[0] - path.x_at(k)[0]).abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn frozen_constant_dynamics() {
        let spec = ou_with(|c| {
            c.fast_drift = coefficient(|_, _, o| o[0] = 0.0);
            c.fast_diffusion = coefficient(|_, _, o| o[0] = 0.0);
        })
        .with_initial(vec![0.7], vec![0.0])
        .unwrap();
        let path = simulate_frozen(&spec, &[0.3], 1.0, 0.1, 1).unwrap();
        assert!(path.xi.iter().all(|&v| v == 0.7));
        assert!(path.y.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn rho_basic() {
        let spec = ou();
        let a = simulate_pair(&spec, 1.0, 0.1, 1).unwrap();
        assert_eq!(rho_t(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.x[3] += 0.25;
        assert_eq!(rho_t(&a, &b).unwrap(), 0.25);
        let c = simulate_pair(&spec, 1.0, 0.05, 1).unwrap();
        assert_eq!(rho_t(&a, &c), Err(Error::MeshMismatch));
    }

    #[test]
    fn underflow_is_reported() {
        assert!(matches!(micro_split(1.0, 1e-300, 0.1), Err(Error::StepUnderflow { .. })));
    }

    #[test]
    fn blow_up_is_reported() {
        let spec = ou_with(|c| c.fast_drift = coefficient(|z, _, o| o[0] = z[0] * z[0] * z[0]))
            .with_initial(vec![2.0], vec![0.0])
            .unwrap();
        match simulate_pair(&spec, 1.0, 0.1, 0) {
            Err(Error::NonFinite { index, .. }) => assert!(index >= 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
