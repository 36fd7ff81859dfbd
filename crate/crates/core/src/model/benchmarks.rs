//! Built-in analytic benchmarks.

use std::f64::consts::SQRT_2;

use super::{coefficient, Coefficients, Dims, ModelSpec, Scales};

pub const BENCHMARK_NAMES: [&str; 3] = ["ou", "double-well", "constant"];

const DEFAULT_SCALES: Scales = Scales { epsilon: 0.1, kappa: 0.25, growth_m: 1.0 };

/// Looks up a benchmark by its registry name.
pub fn benchmark(name: &str) -> Option<ModelSpec> {
    match name {
        "ou" => Some(ou()),
        "double-well" => Some(double_well()),
        "constant" => Some(constant()),
        _ => None,
    }
}

fn one_dim(name: &str, coeffs: Coefficients) -> ModelSpec {
    ModelSpec::new(name, Dims::new(1, 1, 1), coeffs, DEFAULT_SCALES, vec![0.0], vec![0.0])
        .expect("benchmark data is valid")
}

/// Ornstein–Uhlenbeck fast process: `b = -z`, `σ = √2`, `F = -y + z`,
/// `G = 1`, `H = z`. Invariant density N(0,1), corrector `u = z`.
pub fn ou() -> ModelSpec {
    one_dim(
        "ou",
        Coefficients {
            fast_drift: coefficient(|z, _, o| o[0] = -z[0]),
            fast_diffusion: coefficient(|_, _, o| o[0] = SQRT_2),
            slow_drift: coefficient(|z, y, o| o[0] = -y[0] + z[0]),
            slow_diffusion: coefficient(|_, _, o| o[0] = 1.0),
            integrand: coefficient(|z, _, o| o[0] = z[0]),
        },
    )
}

/// Double-well fast process `b = z - z³`, `σ = √2`; slow part and integrand as in [`ou`].
pub fn double_well() -> ModelSpec {
    one_dim(
        "double-well",
        Coefficients {
            fast_drift: coefficient(|z, _, o| o[0] = z[0] - z[0] * z[0] * z[0]),
            fast_diffusion: coefficient(|_, _, o| o[0] = SQRT_2),
            slow_drift: coefficient(|z, y, o| o[0] = -y[0] + z[0]),
            slow_diffusion: coefficient(|_, _, o| o[0] = 1.0),
            integrand: coefficient(|z, _, o| o[0] = z[0]),
        },
    )
}

/// Constant slow coefficients (`F = 1`, `G = 1`) and `H ≡ 0`. The fast drift
/// stays `-z` so that the frozen process has an invariant density.
pub fn constant() -> ModelSpec {
    one_dim(
        "constant",
        Coefficients {
            fast_drift: coefficient(|z, _, o| o[0] = -z[0]),
            fast_diffusion: coefficient(|_, _, o| o[0] = SQRT_2),
            slow_drift: coefficient(|_, _, o| o[0] = 1.0),
            slow_diffusion: coefficient(|_, _, o| o[0] = 1.0),
            integrand: coefficient(|_, _, o| o[0] = 0.0),
        },
    )
}
