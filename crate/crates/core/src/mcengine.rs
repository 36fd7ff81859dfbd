//! Monte Carlo tail probabilities on the `ε^{1-2κ}` log scale, and empirical
//! checks of the exponential martingale inequality and of the negligible
//! remainder terms.

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::averaging::CorrectorTable;
use crate::deviations::corrector_path;
use crate::error::{Error, Result};
use crate::model::{mdp_speed, ModelSpec};
use crate::rng::{NoiseKey, Stream};
use crate::simulate::{simulate_with, Mesh, NoiseSource, SimOptions};

/// Smallest path count accepted by the sweeps.
pub const MIN_PATHS: usize = 1000;

/// Wilson score interval for `hits / n` at `z` standard deviations.
pub fn wilson_interval(hits: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if hits as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// One Wilson standard deviation: half-width of the `z = 1` interval.
pub fn wilson_sigma(hits: u64, n: u64) -> f64 {
    let (lo, hi) = wilson_interval(hits, n, 1.0);
    0.5 * (hi - lo)
}

/// Upper standard normal tail `P(N(0,1) > x)`.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// An event frequency over `n` paths, with its scaled logarithm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub event: String,
    pub epsilon: f64,
    /// Sweep parameter: `ε` for ε-sweeps, the level `C` for boundedness sweeps.
    pub param: f64,
    pub n: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub scaled_log: f64,
    pub censored: bool,
}

impl TailEstimate {
    pub fn new(event: impl Into<String>, epsilon: f64, kappa: f64, param: f64, hits: u64, n: u64) -> Self {
        let p_hat = hits as f64 / n as f64;
        let (ci_lo, ci_hi) = wilson_interval(hits, n, 1.96);
        let floor = 1.0 / n as f64;
        Self {
            event: event.into(),
            epsilon,
            param,
            n,
            hits,
            p_hat,
            ci_lo,
            ci_hi,
            scaled_log: mdp_speed(epsilon, kappa) * p_hat.max(floor).ln(),
            censored: hits == 0,
        }
    }

    pub fn wilson_sigma(&self) -> f64 {
        wilson_sigma(self.hits, self.n)
    }
}

/// Writes sweep rows: `param, epsilon, N, hits, p_hat, ci_lo, ci_hi,
/// scaled_log, censored`.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[TailEstimate], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["event", "param", "epsilon", "N", "hits", "p_hat", "ci_lo", "ci_hi", "scaled_log", "censored"])?;
    for r in rows {
        wr.write_record([
            r.event.clone(),
            r.param.to_string(),
            r.epsilon.to_string(),
            r.n.to_string(),
            r.hits.to_string(),
            r.p_hat.to_string(),
            r.ci_lo.to_string(),
            r.ci_hi.to_string(),
            r.scaled_log.to_string(),
            r.censored.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Number of places where a sequence that should be non-increasing goes up.
/// A censored later cell is only an upper bound and never counts.
pub fn trend_inversions(rows: &[TailEstimate]) -> usize {
    rows.windows(2).filter(|w| !w[1].censored && w[1].scaled_log > w[0].scaled_log).count()
}

/// Path functional compared with the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// `X_T[component]`.
    TerminalX { component: usize },
    /// `sup_t |X_t[component]|` over the macro mesh.
    SupAbsX { component: usize },
    /// `sup_t ‖Δ_t‖` with `Δ = X − X̂`; needs a corrector table.
    SupDelta,
}

/// `{functional > threshold}` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailEvent {
    pub functional: Functional,
    pub threshold: f64,
    pub horizon: f64,
}

impl TailEvent {
    pub fn describe(&self) -> String {
        match self.functional {
            Functional::TerminalX { component } => format!("X_T[{component}] > {}", self.threshold),
            Functional::SupAbsX { component } => format!("sup|X[{component}]| > {}", self.threshold),
            Functional::SupDelta => format!("sup|Delta| > {}", self.threshold),
        }
    }
}

/// One estimate per `ε`. A failing cell is reported in place and does not
/// stop the sweep.
#[allow(clippy::too_many_arguments)]
pub fn tail_probability(
    spec: &ModelSpec,
    event: TailEvent,
    epsilons: &[f64],
    n: usize,
    h: f64,
    seed: u64,
    table: Option<&CorrectorTable>,
) -> Result<Vec<Result<TailEstimate>>> {
    if n < MIN_PATHS {
        return Err(Error::InvalidArgument(format!("need N >= {MIN_PATHS} paths, got {n}")));
    }
    if event.functional == Functional::SupDelta && table.is_none() {
        return Err(Error::InvalidArgument("sup|Delta| events need the corrector table".into()));
    }
    let p = spec.dims().output;
    if let Functional::TerminalX { component } | Functional::SupAbsX { component } = event.functional {
        if component >= p {
            return Err(Error::InvalidArgument(format!("X has {p} components, asked for {component}")));
        }
    }
    let mesh = Mesh::new(event.horizon, h)?;
    Ok(epsilons.iter().map(|&eps| tail_cell(spec, event, eps, n, mesh, seed, table)).collect())
}

fn tail_cell(
    spec: &ModelSpec,
    event: TailEvent,
    eps: f64,
    n: usize,
    mesh: Mesh,
    seed: u64,
    table: Option<&CorrectorTable>,
) -> Result<TailEstimate> {
    let model = spec.with_epsilon(eps)?;
    let opts = SimOptions { store_noise: event.functional == Functional::SupDelta, ..SimOptions::default() };
    let hits = count_hits(n, |i| {
        let key = NoiseKey::new(seed).with_path(i as u64);
        let path = simulate_with(&model, mesh, NoiseSource::Keyed(key), opts, |_| {})?;
        let value = match event.functional {
            Functional::TerminalX { component } => path.x_at(path.steps())[component],
            Functional::SupAbsX { component } => {
                (0..path.len()).map(|k| path.x_at(k)[component].abs()).fold(0.0, f64::max)
            }
            Functional::SupDelta => {
                let report = corrector_path(&model, &path, table.expect("checked by caller"))?;
                report.sup_delta()
            }
        };
        Ok(value > event.threshold)
    })?;
    Ok(TailEstimate::new(event.describe(), eps, model.kappa(), eps, hits, n as u64))
}

/// Counts true outcomes over `n` independent paths in parallel. The result
/// does not depend on the number of workers.
pub fn count_hits(n: usize, f: impl Fn(usize) -> Result<bool> + Sync) -> Result<u64> {
    (0..n).into_par_iter().map(|i| f(i).map(u64::from)).try_reduce(|| 0, |a, b| Ok(a + b))
}

/// `ε^{1-2κ} log P(N(0, ε^{1-2κ} q T) > c)`: the scaled log-probability
/// of the Gaussian approximation to `X_T`, in closed form.
pub fn gaussian_surrogate_scaled_log(epsilon: f64, kappa: f64, q: f64, t: f64, c: f64) -> f64 {
    let s = mdp_speed(epsilon, kappa);
    s * normal_tail(c / (s * q * t).sqrt()).ln()
}

/// Sampled version of the surrogate: `N` draws of `N(0, ε^{1-2κ} q T)`.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_surrogate_estimate(
    epsilon: f64,
    kappa: f64,
    q: f64,
    t: f64,
    c: f64,
    n: usize,
    seed: u64,
) -> TailEstimate {
    let sd = (mdp_speed(epsilon, kappa) * q * t).sqrt();
    let key = NoiseKey::new(seed);
    let hits = count_hits(n, |i| Ok(sd * key.with_path(i as u64).normal(Stream::Aux, 0, 0) > c)).unwrap_or(0);
    TailEstimate::new(format!("gaussian X_T > {c}"), epsilon, kappa, epsilon, hits, n as u64)
}

/// What a martingale sampler reports for one path on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleSummary {
    pub sup_abs: f64,
    /// Predictable quadratic variation `⟨M⟩_T`, if tracked.
    pub quadratic_variation: Option<f64>,
}

/// Source of discrete martingale paths.
pub trait MartingaleSampler: Sync {
    fn sample(&self, key: NoiseKey, t_end: f64) -> MartingaleSummary;
}

/// Standard Brownian motion on an equidistant grid; `⟨M⟩_T = T`.
#[derive(Debug, Clone, Copy)]
pub struct BrownianSampler {
    pub steps: usize,
}

impl MartingaleSampler for BrownianSampler {
    fn sample(&self, key: NoiseKey, t_end: f64) -> MartingaleSummary {
        let sq = (t_end / self.steps as f64).sqrt();
        let (mut m, mut sup) = (0.0f64, 0.0f64);
        for k in 0..self.steps {
            m += sq * key.normal(Stream::Aux, k as u64, 0);
            sup = sup.max(m.abs());
        }
        MartingaleSummary { sup_abs: sup, quadratic_variation: Some(t_end) }
    }
}

/// `M_t = ∫ (1 + ½ cos B_s) dB_s`, stopped once `⟨M⟩` reaches `cap`.
#[derive(Debug, Clone, Copy)]
pub struct StoppedSampler {
    pub steps: usize,
    pub cap: f64,
}

impl MartingaleSampler for StoppedSampler {
    fn sample(&self, key: NoiseKey, t_end: f64) -> MartingaleSummary {
        let h = t_end / self.steps as f64;
        let sq = h.sqrt();
        let (mut b, mut m, mut qv, mut sup) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for k in 0..self.steps {
            if qv >= self.cap {
                break;
            }
            let g = 1.0 + 0.5 * b.cos();
            let db = sq * key.normal(Stream::Aux, k as u64, 0);
            m += g * db;
            qv += g * g * h;
            b += db;
            sup = sup.max(m.abs());
        }
        MartingaleSummary { sup_abs: sup, quadratic_variation: Some(qv) }
    }
}

/// Outcome of [`check_exponential_inequality`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub alpha: f64,
    pub b: f64,
    pub n: u64,
    pub hits: u64,
    pub frequency: f64,
    pub bound: f64,
    pub wilson_sigma: f64,
    pub censored: bool,
}

impl InequalityCheck {
    /// Frequency above the bound by more than three Wilson standard deviations.
    pub fn violated(&self) -> bool {
        self.frequency > self.bound + 3.0 * self.wilson_sigma
    }
}

/// Frequency of `{sup_{t≤T} |M_t| ≥ α, ⟨M⟩_T ≤ B}` against `2 exp(-α²/(2B))`.
pub fn check_exponential_inequality(
    sampler: &dyn MartingaleSampler,
    alpha: f64,
    b: f64,
    t_end: f64,
    n: usize,
    seed: u64,
) -> Result<InequalityCheck> {
    if !(alpha > 0.0 && b > 0.0 && t_end > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("alpha, B, T and N must be positive".into()));
    }
    let key = NoiseKey::new(seed);
    let hits = count_hits(n, |i| {
        let s = sampler.sample(key.with_path(i as u64), t_end);
        let qv = s.quadratic_variation.ok_or(Error::MissingQuadraticVariation)?;
        Ok(s.sup_abs >= alpha && qv <= b)
    })?;
    let n = n as u64;
    Ok(InequalityCheck {
        alpha,
        b,
        n,
        hits,
        frequency: hits as f64 / n as f64,
        bound: 2.0 * (-alpha * alpha / (2.0 * b)).exp(),
        wilson_sigma: wilson_sigma(hits, n),
        censored: hits == 0,
    })
}

/// Frequency of `{ε^l sup_t ‖ξ_t‖^p > η}` per `ε`, requires `l > p/2`.
#[allow(clippy::too_many_arguments)]
pub fn negligibility_xi(
    spec: &ModelSpec,
    l_exp: f64,
    p_exp: f64,
    epsilons: &[f64],
    eta: f64,
    t_end: f64,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<TailEstimate>> {
    if !(p_exp > 0.0) {
        return Err(Error::Precondition(format!("p = {p_exp} must be positive")));
    }
    if !(l_exp > p_exp / 2.0) {
        return Err(Error::Precondition(format!("l > p/2 fails: l = {l_exp}, p/2 = {}", p_exp / 2.0)));
    }
    if n < MIN_PATHS {
        return Err(Error::InvalidArgument(format!("need N >= {MIN_PATHS} paths, got {n}")));
    }
    let mesh = Mesh::new(t_end, h)?;
    let opts = SimOptions { store_noise: false, ..SimOptions::default() };
    epsilons
        .iter()
        .map(|&eps| {
            let model = spec.with_epsilon(eps)?;
            let hits = count_hits(n, |i| {
                let mut sup = 0.0f64;
                let key = NoiseKey::new(seed).with_path(i as u64);
                let path = simulate_with(&model, mesh, NoiseSource::Keyed(key), opts, |s| {
                    sup = sup.max(s.z.iter().map(|v| v * v).sum::<f64>());
                })?;
                let last: f64 = path.xi_at(path.steps()).iter().map(|v| v * v).sum();
                let sup = sup.max(last).sqrt();
                Ok(eps.powf(l_exp) * sup.powf(p_exp) > eta)
            })?;
            let label = format!("eps^{l_exp} sup|xi|^{p_exp} > {eta}");
            Ok(TailEstimate::new(label, eps, model.kappa(), eps, hits, n as u64))
        })
        .collect()
}

/// Frequency of `{sup_t ‖Y_t‖ > C}` per level `C` at the model's `ε`.
pub fn boundedness_y(
    spec: &ModelSpec,
    levels: &[f64],
    t_end: f64,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<TailEstimate>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let mesh = Mesh::new(t_end, h)?;
    let opts = SimOptions { store_noise: false, ..SimOptions::default() };
    let sups = (0..n)
        .into_par_iter()
        .map(|i| {
            let key = NoiseKey::new(seed).with_path(i as u64);
            let path = simulate_with(spec, mesh, NoiseSource::Keyed(key), opts, |_| {})?;
            Ok((0..path.len()).map(|k| path.y_at(k).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(levels
        .iter()
        .map(|&c| {
            let hits = sups.iter().filter(|&&s| s > c).count() as u64;
            TailEstimate::new(format!("sup|Y| > {c}"), spec.epsilon(), spec.kappa(), c, hits, n as u64)
        })
        .collect())
}
