//! Experiment configuration: a strict TOML schema.

use std::path::{Path, PathBuf};

use fastslow::model::{benchmark, Coefficients, Dims, PolyField, Scales, BENCHMARK_NAMES};
use fastslow::{Grid, ModelSpec};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub scales: ScalesConfig,
    #[serde(default)]
    pub grids: GridsConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub density: SlowPointConfig,
    #[serde(default)]
    pub poisson: PoissonConfig,
    #[serde(default)]
    pub delta: DeltaConfig,
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default)]
    pub event: EventConfig,
    #[serde(default)]
    pub inequalities: InequalitiesConfig,
}

/// Either `benchmark = "<name>"` or an inline polynomial model.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub benchmark: Option<String>,
    pub name: Option<String>,
    pub d: Option<usize>,
    pub l: Option<usize>,
    pub p: Option<usize>,
    /// Per output component, a list of terms `[coef, z exponents.., y exponents..]`.
    pub fast_drift: Option<Vec<Vec<Vec<f64>>>>,
    pub fast_diffusion: Option<Vec<Vec<Vec<f64>>>>,
    pub slow_drift: Option<Vec<Vec<Vec<f64>>>>,
    pub slow_diffusion: Option<Vec<Vec<Vec<f64>>>>,
    pub integrand: Option<Vec<Vec<Vec<f64>>>>,
    pub z0: Option<Vec<f64>>,
    pub y0: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesConfig {
    pub epsilon: Vec<f64>,
    pub kappa: f64,
    pub m: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridsConfig {
    pub z_box: [f64; 2],
    pub z_nodes: usize,
    pub y_box: [f64; 2],
    pub y_nodes: usize,
}

impl Default for GridsConfig {
    fn default() -> Self {
        Self { z_box: [-6.0, 6.0], z_nodes: 601, y_box: [-2.0, 2.0], y_nodes: 41 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub t: f64,
    pub h: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { t: 1.0, h: 1e-3, n: 1000, seed: 1 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub z_half: f64,
    pub y_half: f64,
    pub samples: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { z_half: 4.0, y_half: 2.0, samples: 9 }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowPointConfig {
    /// Frozen slow value; defaults to the model's `y0`.
    pub y: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonConfig {
    pub y: Option<Vec<f64>>,
    pub method: PoissonMethodName,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self { y: None, method: PoissonMethodName::Grid }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PoissonMethodName {
    Grid,
    ClosedForm,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaConfig {
    /// Threshold of the negligibility sweep.
    pub eta: f64,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self { eta: 0.5 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    /// Terminal value `X_T` imposed on the minimizer.
    pub target_x: Option<Vec<f64>>,
    pub mesh: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self { target_x: None, mesh: 128 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventConfig {
    /// `{X_T[component] > threshold}`.
    pub component: usize,
    pub threshold: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self { component: 0, threshold: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InequalitiesConfig {
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
    pub steps: usize,
    pub stopped_cap: f64,
    pub xi_l: f64,
    pub xi_p: f64,
    pub eta: f64,
    pub levels: Vec<f64>,
}

impl Default for InequalitiesConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.5, 1.0, 2.0, 4.0],
            b: vec![0.5, 1.0, 2.0],
            steps: 200,
            stopped_cap: 1.5,
            xi_l: 0.75,
            xi_p: 1.0,
            eta: 0.5,
            levels: vec![2.0, 4.0, 8.0],
        }
    }
}

/// A configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let s = &self.scales;
        if s.epsilon.is_empty() {
            return Err(bad("scales.epsilon must list at least one value"));
        }
        if let Some(e) = s.epsilon.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(bad(format!("scales.epsilon: {e} is not in (0,1)")));
        }
        let bound = (1.0 - s.m / 2.0).min(0.5);
        if !(s.m > 0.0 && s.m < 2.0 && s.kappa > 0.0 && s.kappa < bound) {
            return Err(bad(format!(
                "scales: need 0 < m < 2 and 0 < kappa < min(1 - m/2, 1/2); got kappa = {}, m = {}",
                s.kappa, s.m
            )));
        }
        let r = &self.run;
        if !(r.t > 0.0 && r.h > 0.0 && r.h <= r.t) {
            return Err(bad("run: need 0 < h <= t"));
        }
        if r.n == 0 {
            return Err(bad("run.n must be positive"));
        }
        let g = &self.grids;
        if !(g.z_box[0] < g.z_box[1] && g.y_box[0] < g.y_box[1]) || g.z_nodes < 4 || g.y_nodes < 2 {
            return Err(bad("grids: boxes must be increasing, z_nodes >= 4, y_nodes >= 2"));
        }
        Ok(())
    }

    /// The model at the first listed `ε`.
    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let scales = Scales { epsilon: self.scales.epsilon[0], kappa: self.scales.kappa, growth_m: self.scales.m };
        let base = match &m.benchmark {
            Some(name) => {
                let inline = [&m.fast_drift, &m.fast_diffusion, &m.slow_drift, &m.slow_diffusion, &m.integrand];
                if inline.iter().any(|f| f.is_some()) || m.d.is_some() || m.l.is_some() || m.p.is_some() {
                    return Err(bad("model: give either a benchmark or inline coefficients, not both"));
                }
                benchmark(name)
                    .ok_or_else(|| bad(format!("model.benchmark: unknown '{name}' (known: {})", BENCHMARK_NAMES.join(", "))))?
            }
            None => self.inline_model()?,
        };
        let dims = base.dims();
        let z0 = m.z0.clone().unwrap_or_else(|| base.z0().to_vec());
        let y0 = m.y0.clone().unwrap_or_else(|| base.y0().to_vec());
        if z0.len() != dims.fast || y0.len() != dims.slow {
            return Err(bad("model: z0/y0 dimensions do not match the model"));
        }
        base.with_initial(z0, y0)
            .and_then(|s| s.with_scales(scales))
            .map_err(|e| bad(format!("model: {e}")))
    }

    fn inline_model(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let (d, l, p) = match (m.d, m.l, m.p) {
            (Some(d), Some(l), Some(p)) => (d, l, p),
            _ => return Err(bad("model: inline models need d, l and p (or use benchmark = \"...\")")),
        };
        let field = |name: &str, rows: &Option<Vec<Vec<Vec<f64>>>>, want: usize| {
            let rows = rows.as_ref().ok_or_else(|| bad(format!("model.{name} is missing")))?;
            if rows.len() != want {
                return Err(bad(format!("model.{name}: expected {want} components, got {}", rows.len())));
            }
            PolyField::from_rows(rows, d, l).map(PolyField::into_fn).map_err(|e| bad(format!("model.{name}: {e}")))
        };
        let coeffs = Coefficients {
            fast_drift: field("fast_drift", &m.fast_drift, d)?,
            fast_diffusion: field("fast_diffusion", &m.fast_diffusion, d * d)?,
            slow_drift: field("slow_drift", &m.slow_drift, l)?,
            slow_diffusion: field("slow_diffusion", &m.slow_diffusion, l * l)?,
            integrand: field("integrand", &m.integrand, p)?,
        };
        ModelSpec::new(
            m.name.clone().unwrap_or_else(|| "inline".into()),
            Dims::new(d, l, p),
            coeffs,
            Scales { epsilon: 0.1, kappa: 0.25, growth_m: 1.0 },
            vec![0.0; d],
            vec![0.0; l],
        )
        .map_err(|e| bad(format!("model: {e}")))
    }

    pub fn z_grid(&self, d: usize) -> Result<Grid, ConfigError> {
        let g = &self.grids;
        Grid::cube(d, g.z_box[0], g.z_box[1], g.z_nodes).map_err(|e| bad(format!("grids: {e}")))
    }

    pub fn y_grid(&self, l: usize) -> Result<Grid, ConfigError> {
        let g = &self.grids;
        Grid::cube(l, g.y_box[0], g.y_box[1], g.y_nodes).map_err(|e| bad(format!("grids: {e}")))
    }

    /// `output_dir`, relative paths taken from the config file's directory.
    pub fn output_dir(&self, config_path: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            config_path.parent().unwrap_or(Path::new(".")).join(&self.output_dir)
        }
    }
}
