//! Subcommand pipelines. Every command renders its outputs in memory; the
//! caller writes them and the manifest.

use std::collections::BTreeMap;

use fastslow::averaging::{simulate_averaged, tabulate, TabulationConfig};
use fastslow::deviations::{corrector_path, negligibility_sweep, write_negligibility_csv};
use fastslow::mcengine::{
    boundedness_y, check_exponential_inequality, negligibility_xi, tail_probability, write_sweep_csv,
    BrownianSampler, Functional, MartingaleSampler, StoppedSampler, TailEstimate, TailEvent,
};
use fastslow::model::{validate_model, SampleBox, ValidationOptions};
use fastslow::poisson::{sample_integrand, solve_poisson, PoissonMethod};
use fastslow::ratefn::{minimize_endpoint, AffineTarget, HalfSpace};
use fastslow::simulate::{simulate_with, Mesh, NoiseSource, SimOptions};
use fastslow::stationary::{invariant_density, stationarity_residual};
use fastslow::{rng::NoiseKey, ModelSpec};

use crate::config::{ConfigError, ExperimentConfig, PoissonMethodName};

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<fastslow::Error> for Failure {
    fn from(e: fastslow::Error) -> Self {
        Failure::Numerical(e.to_string())
    }
}

/// Rendered output files plus an optional failure raised after rendering.
#[derive(Default)]
pub struct Outputs {
    pub files: BTreeMap<String, Vec<u8>>,
    pub late_failure: Option<String>,
}

impl Outputs {
    fn csv(&mut self, name: &str, render: impl FnOnce(&mut Vec<u8>) -> fastslow::Result<()>) -> Result<(), Failure> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.files.insert(name.to_string(), buf);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Validate,
    Simulate,
    Density,
    Poisson,
    Average,
    Delta,
    Rate,
    MdpCheck,
    Inequalities,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Density => "density",
            Command::Poisson => "poisson",
            Command::Average => "average",
            Command::Delta => "delta",
            Command::Rate => "rate",
            Command::MdpCheck => "mdp-check",
            Command::Inequalities => "inequalities",
        }
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outputs, Failure> {
    let spec = cfg.model()?;
    let mut out = Outputs::default();
    match cmd {
        Command::Validate => validate(cfg, &spec, &mut out)?,
        Command::Simulate => simulate(cfg, &spec, &mut out)?,
        Command::Density => density(cfg, &spec, &mut out)?,
        Command::Poisson => poisson(cfg, &spec, &mut out)?,
        Command::Average => average(cfg, &spec, &mut out)?,
        Command::Delta => delta(cfg, &spec, &mut out)?,
        Command::Rate => rate(cfg, &spec, &mut out)?,
        Command::MdpCheck => mdp_check(cfg, &spec, &mut out)?,
        Command::Inequalities => inequalities(cfg, &spec, &mut out)?,
    }
    Ok(out)
}

fn validate(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let dims = spec.dims();
    let v = &cfg.validate;
    let sample_box = SampleBox::symmetric(dims.fast, v.z_half, dims.slow, v.y_half);
    let opts = ValidationOptions {
        density_grid: if dims.fast <= 2 { Some(cfg.z_grid(dims.fast)?) } else { None },
        ..ValidationOptions::default()
    };
    let report = validate_model(spec, &sample_box, v.samples, &opts)?;
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Numerical(e.to_string()))?;
    out.files.insert("validation.json".into(), json);
    out.csv("violations.csv", |buf| {
        let mut wr = csv::Writer::from_writer(buf);
        wr.write_record(["assumption", "witness", "detail"])?;
        for viol in &report.violations {
            let witness = serde_json::to_string(&viol.witness).unwrap_or_default();
            wr.write_record([viol.assumption.to_string(), witness, viol.detail.clone()])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    if !report.is_ok() {
        let names: Vec<String> = report.violations.iter().map(|v| v.assumption.to_string()).collect();
        out.late_failure = Some(format!("model violates: {}", names.join(", ")));
    }
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let r = &cfg.run;
    let mesh = Mesh::new(r.t, r.h)?;
    let opts = SimOptions { store_noise: false, ..SimOptions::default() };
    for (i, &eps) in cfg.scales.epsilon.iter().enumerate() {
        let model = spec.with_epsilon(eps)?;
        let path = simulate_with(&model, mesh, NoiseSource::Keyed(NoiseKey::new(r.seed)), opts, |_| {})?;
        out.csv(&format!("path_{i}.csv"), |buf| path.write_csv(buf))?;
    }
    Ok(())
}

fn slow_point(spec: &ModelSpec, y: &Option<Vec<f64>>) -> Result<Vec<f64>, Failure> {
    let y = y.clone().unwrap_or_else(|| spec.y0().to_vec());
    if y.len() != spec.dims().slow {
        return Err(Failure::Config(format!("slow value has {} entries, l = {}", y.len(), spec.dims().slow)));
    }
    Ok(y)
}

fn density(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let y = slow_point(spec, &cfg.density.y)?;
    let grid = cfg.z_grid(spec.dims().fast)?;
    let pi = invariant_density(spec, &y, &grid)?;
    let residual = stationarity_residual(spec, &pi)?;
    out.csv("density.csv", |buf| pi.write_csv(buf))?;
    out.csv("density_summary.csv", |buf| {
        let mut wr = csv::Writer::from_writer(buf);
        wr.write_record(["y", "stationarity_residual"])?;
        wr.write_record([format!("{y:?}"), residual.to_string()])?;
        wr.flush()?;
        Ok(())
    })
}

fn poisson(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let y = slow_point(spec, &cfg.poisson.y)?;
    let grid = cfg.z_grid(spec.dims().fast)?;
    let pi = invariant_density(spec, &y, &grid)?;
    let rhs = sample_integrand(spec, &y, &grid);
    let method = match cfg.poisson.method {
        PoissonMethodName::Grid => PoissonMethod::GridSolve,
        PoissonMethodName::ClosedForm => PoissonMethod::ClosedForm1d,
    };
    let sol = solve_poisson(spec, &y, &rhs, &pi, method)?;
    out.csv("poisson.csv", |buf| sol.write_csv(buf))?;
    out.csv("poisson_summary.csv", |buf| {
        let mut wr = csv::Writer::from_writer(buf);
        wr.write_record(["residual", "max_centering_defect"])?;
        let c = sol.centering_defect.iter().map(|v| v.abs()).fold(0.0, f64::max);
        wr.write_record([sol.residual.to_string(), c.to_string()])?;
        wr.flush()?;
        Ok(())
    })
}

fn tabulation(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<TabulationConfig, Failure> {
    Ok(TabulationConfig::new(cfg.z_grid(spec.dims().fast)?))
}

fn average(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let y_grid = cfg.y_grid(spec.dims().slow)?;
    let (avg, _) = tabulate(spec, &y_grid, &tabulation(cfg, spec)?)?;
    out.csv("averaged.csv", |buf| avg.write_csv(buf))?;
    let r = &cfg.run;
    let path = simulate_averaged(&avg, spec.epsilon(), spec.kappa(), spec.y0(), r.t, r.h, r.seed)?;
    out.csv("averaged_path.csv", |buf| path.write_csv(buf))
}

fn delta(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let y_grid = cfg.y_grid(spec.dims().slow)?;
    let (_, table) = tabulate(spec, &y_grid, &tabulation(cfg, spec)?)?;
    let r = &cfg.run;
    let mesh = Mesh::new(r.t, r.h)?;
    let path = simulate_with(spec, mesh, NoiseSource::Keyed(NoiseKey::new(r.seed)), SimOptions::default(), |_| {})?;
    let report = corrector_path(spec, &path, &table)?;
    out.csv("delta.csv", |buf| report.write_csv(buf))?;
    let rows = negligibility_sweep(spec, &table, &cfg.scales.epsilon, cfg.delta.eta, r.t, r.h, r.n, r.seed)?;
    out.csv("negligibility.csv", |buf| write_negligibility_csv(&rows, buf))
}

/// `(J*, label)` for the configured terminal event.
fn prediction(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<f64, Failure> {
    let dims = spec.dims();
    let y_grid = cfg.y_grid(dims.slow)?;
    let (avg, _) = tabulate(spec, &y_grid, &tabulation(cfg, spec)?)?;
    let ev = &cfg.event;
    if ev.component >= dims.output {
        return Err(Failure::Config(format!("event.component {} >= p = {}", ev.component, dims.output)));
    }
    let target = match &cfg.rate.target_x {
        Some(x) if x.len() != dims.output => {
            return Err(Failure::Config(format!("rate.target_x must have p = {} entries", dims.output)));
        }
        Some(x) => {
            let rows = (0..dims.output)
                .map(|c| {
                    let mut row = vec![0.0; dims.output + dims.slow];
                    row[c] = 1.0;
                    row
                })
                .collect();
            AffineTarget { rows, rhs: x.clone() }
        }
        None => AffineTarget::x_component(dims.output, dims.slow, ev.component, ev.threshold),
    };
    let (path, _) = minimize_endpoint(&avg, spec.y0(), cfg.run.t, &target, cfg.rate.mesh)?;
    out.csv("minimizer.csv", |buf| path.write_csv(buf))?;
    let mut normal = vec![0.0; dims.output];
    normal[ev.component] = 1.0;
    let event = HalfSpace { normal, threshold: ev.threshold };
    Ok(fastslow::ratefn::mdp_prediction(&avg, spec.y0(), cfg.run.t, &event, cfg.rate.mesh)?)
}

fn write_rate(cfg: &ExperimentConfig, j_star: f64, out: &mut Outputs) -> Result<(), Failure> {
    out.csv("rate.csv", |buf| {
        let mut wr = csv::Writer::from_writer(buf);
        wr.write_record(["epsilon", "kappa", "threshold", "j_star", "prediction", "horizon"])?;
        for eps in &cfg.scales.epsilon {
            wr.write_record([
                eps.to_string(),
                cfg.scales.kappa.to_string(),
                cfg.event.threshold.to_string(),
                j_star.to_string(),
                (-j_star).to_string(),
                "finite-horizon".to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })
}

fn rate(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let j = prediction(cfg, spec, out)?;
    write_rate(cfg, j, out)
}

fn mdp_check(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let j = prediction(cfg, spec, out)?;
    write_rate(cfg, j, out)?;
    let r = &cfg.run;
    let event = TailEvent {
        functional: Functional::TerminalX { component: cfg.event.component },
        threshold: cfg.event.threshold,
        horizon: r.t,
    };
    let cells = tail_probability(spec, event, &cfg.scales.epsilon, r.n, r.h, r.seed, None)?;
    let mut rows: Vec<TailEstimate> = Vec::new();
    let mut errors = Vec::new();
    for (eps, cell) in cfg.scales.epsilon.iter().zip(cells) {
        match cell {
            Ok(t) => rows.push(t),
            Err(e) => errors.push(format!("epsilon = {eps}: {e}")),
        }
    }
    out.csv("mc.csv", |buf| write_sweep_csv(&rows, buf))?;
    let table = compare_rows(&rows.iter().map(|t| (t.epsilon.to_string(), t.scaled_log, t.censored)).collect::<Vec<_>>(), &|_| Some(-j));
    out.csv("compare.csv", |buf| write_compare(&table, buf))?;
    if !errors.is_empty() {
        out.late_failure = Some(errors.join("; "));
    }
    Ok(())
}

fn inequalities(cfg: &ExperimentConfig, spec: &ModelSpec, out: &mut Outputs) -> Result<(), Failure> {
    let q = &cfg.inequalities;
    let r = &cfg.run;
    let samplers: [(&str, &dyn MartingaleSampler); 2] = [
        ("brownian", &BrownianSampler { steps: q.steps }),
        ("stopped", &StoppedSampler { steps: q.steps, cap: q.stopped_cap }),
    ];
    let mut checks = Vec::new();
    for (name, sampler) in samplers {
        for &alpha in &q.alpha {
            for &b in &q.b {
                checks.push((name, check_exponential_inequality(sampler, alpha, b, r.t, r.n, r.seed)?));
            }
        }
    }
    out.csv("inequalities.csv", |buf| {
        let mut wr = csv::Writer::from_writer(buf);
        wr.write_record(["sampler", "alpha", "B", "N", "hits", "frequency", "bound", "wilson_sigma", "censored", "violated"])?;
        for (name, c) in &checks {
            wr.write_record([
                name.to_string(),
                c.alpha.to_string(),
                c.b.to_string(),
                c.n.to_string(),
                c.hits.to_string(),
                c.frequency.to_string(),
                c.bound.to_string(),
                c.wilson_sigma.to_string(),
                c.censored.to_string(),
                c.violated().to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let xi = negligibility_xi(spec, q.xi_l, q.xi_p, &cfg.scales.epsilon, q.eta, r.t, r.h, r.n, r.seed)?;
    out.csv("negligibility_xi.csv", |buf| write_sweep_csv(&xi, buf))?;
    let y = boundedness_y(spec, &q.levels, r.t, r.h, r.n, r.seed)?;
    out.csv("boundedness_y.csv", |buf| write_sweep_csv(&y, buf))?;
    let violated: Vec<String> =
        checks.iter().filter(|(_, c)| c.violated()).map(|(n, c)| format!("{n} alpha={} B={}", c.alpha, c.b)).collect();
    if !violated.is_empty() {
        out.late_failure = Some(format!("exponential bound exceeded: {}", violated.join(", ")));
    }
    Ok(())
}

/// One row of the rate-vs-Monte-Carlo comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub epsilon: String,
    pub scaled_log: f64,
    pub prediction: f64,
    pub gap: f64,
    pub censored: bool,
}

/// Joins Monte Carlo rows `(ε, scaled_log, censored)` with predictions by `ε`.
pub fn compare_rows(mc: &[(String, f64, bool)], prediction: &dyn Fn(&str) -> Option<f64>) -> Vec<CompareRow> {
    mc.iter()
        .filter_map(|(eps, s, c)| {
            prediction(eps).map(|p| CompareRow { epsilon: eps.clone(), scaled_log: *s, prediction: p, gap: s - p, censored: *c })
        })
        .collect()
}

pub fn write_compare<W: std::io::Write>(rows: &[CompareRow], w: W) -> fastslow::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epsilon", "scaled_log", "prediction", "gap", "censored"])?;
    for r in rows {
        wr.write_record([
            r.epsilon.clone(),
            r.scaled_log.to_string(),
            r.prediction.to_string(),
            r.gap.to_string(),
            r.censored.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
