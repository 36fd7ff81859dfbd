//! Problem data of a fast–slow system.
//!
//! ```text
//! dξ = ε⁻¹ b(ξ,Y) dt + ε^{-1/2} σ(ξ,Y) dB
//! dY = F(ξ,Y) dt + ε^{1/2-κ} G(ξ,Y) dW
//! X_t = ε^{-κ} ∫₀ᵗ H(ξ_s,Y_s) ds
//! ```
//!
//! Coefficients are opaque callables `(z, y, out)`; matrices are written
//! row-major. Callables must be pure: they are shared across worker threads.

mod benchmarks;
mod poly;
mod validate;

use std::fmt;
use std::sync::Arc;

pub use benchmarks::{benchmark, constant, double_well, ou, BENCHMARK_NAMES};
pub use poly::{Monomial, PolyField};
pub use validate::{
    validate_model, Assumption, Dissipativity, SampleBox, ValidationOptions, ValidationReport, Violation,
    Witness,
};

use crate::error::{Error, Result};

/// A coefficient `(z, y) -> out`.
pub type CoefficientFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Wraps a closure as a [`CoefficientFn`].
pub fn coefficient<F>(f: F) -> CoefficientFn
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Dimensions: fast `d`, slow `l`, output `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub fast: usize,
    pub slow: usize,
    pub output: usize,
}

impl Dims {
    pub fn new(fast: usize, slow: usize, output: usize) -> Self {
        Self { fast, slow, output }
    }
}

/// The five coefficient functions.
#[derive(Clone)]
pub struct Coefficients {
    /// Fast drift `b`, d-vector.
    pub fast_drift: CoefficientFn,
    /// Fast diffusion factor `σ`, d×d.
    pub fast_diffusion: CoefficientFn,
    /// Slow drift `F`, l-vector.
    pub slow_drift: CoefficientFn,
    /// Slow diffusion factor `G`, l×l.
    pub slow_diffusion: CoefficientFn,
    /// Integrand `H`, p-vector.
    pub integrand: CoefficientFn,
}

/// Scale parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales {
    pub epsilon: f64,
    pub kappa: f64,
    /// Declared growth exponent of the corrector's y-derivatives.
    pub growth_m: f64,
}

/// Full problem description.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    dims: Dims,
    coeffs: Coefficients,
    scales: Scales,
    z0: Vec<f64>,
    y0: Vec<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("scales", &self.scales)
            .field("z0", &self.z0)
            .field("y0", &self.y0)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        coeffs: Coefficients,
        scales: Scales,
        z0: Vec<f64>,
        y0: Vec<f64>,
    ) -> Result<Self> {
        if dims.fast == 0 || dims.slow == 0 || dims.output == 0 {
            return Err(Error::InvalidModel(format!("all dimensions must be positive, got {dims:?}")));
        }
        if z0.len() != dims.fast || y0.len() != dims.slow {
            return Err(Error::InvalidModel(format!(
                "initial point has dimensions ({}, {}), expected ({}, {})",
                z0.len(),
                y0.len(),
                dims.fast,
                dims.slow
            )));
        }
        if z0.iter().chain(&y0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("initial point is not finite".into()));
        }
        let spec = Self { name: name.into(), dims, coeffs, scales, z0, y0 };
        spec.check_scales(scales)?;
        Ok(spec)
    }

    fn check_scales(&self, s: Scales) -> Result<()> {
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            return Err(Error::InvalidModel(format!("epsilon must lie in (0,1), got {}", s.epsilon)));
        }
        if !(s.kappa.is_finite() && s.kappa > 0.0) {
            return Err(Error::InvalidModel(format!("kappa must be positive, got {}", s.kappa)));
        }
        if !s.growth_m.is_finite() {
            return Err(Error::InvalidModel("growth exponent m is not finite".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn scales(&self) -> Scales {
        self.scales
    }
    pub fn epsilon(&self) -> f64 {
        self.scales.epsilon
    }
    pub fn kappa(&self) -> f64 {
        self.scales.kappa
    }
    pub fn growth_m(&self) -> f64 {
        self.scales.growth_m
    }
    pub fn z0(&self) -> &[f64] {
        &self.z0
    }
    pub fn y0(&self) -> &[f64] {
        &self.y0
    }
    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    /// `ε^{1/2-κ}`, the slow noise amplitude.
    pub fn noise_scale(&self) -> f64 {
        moderate_noise_scale(self.scales.epsilon, self.scales.kappa)
    }

    /// `ε^{1-2κ}`, the speed of the deviation principle.
    pub fn speed(&self) -> f64 {
        mdp_speed(self.scales.epsilon, self.scales.kappa)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        self.with_scales(Scales { epsilon, ..self.scales })
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        self.with_scales(Scales { kappa, ..self.scales })
    }

    pub fn with_scales(&self, scales: Scales) -> Result<Self> {
        self.check_scales(scales)?;
        Ok(Self { scales, ..self.clone() })
    }

    pub fn with_initial(&self, z0: Vec<f64>, y0: Vec<f64>) -> Result<Self> {
        Self::new(self.name.clone(), self.dims, self.coeffs.clone(), self.scales, z0, y0)
    }

    pub fn with_coefficients(&self, coeffs: Coefficients) -> Self {
        Self { coeffs, ..self.clone() }
    }

    pub fn with_name(&self, name: impl Into<String>) -> Self {
        Self { name: name.into(), ..self.clone() }
    }

    #[inline]
    pub fn fast_drift(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.coeffs.fast_drift)(z, y, out)
    }
    #[inline]
    pub fn fast_diffusion(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.coeffs.fast_diffusion)(z, y, out)
    }
    #[inline]
    pub fn slow_drift(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.coeffs.slow_drift)(z, y, out)
    }
    #[inline]
    pub fn slow_diffusion(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.coeffs.slow_diffusion)(z, y, out)
    }
    #[inline]
    pub fn integrand(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.coeffs.integrand)(z, y, out)
    }

    /// `a = σσ*` at `(z, y)`, d×d row-major.
    pub fn fast_covariance(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.dims.fast;
        let mut s = vec![0.0; d * d];
        self.fast_diffusion(z, y, &mut s);
        gram(&s, d, out);
    }

    /// `A = GG*` at `(z, y)`, l×l row-major.
    pub fn slow_covariance(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let l = self.dims.slow;
        let mut g = vec![0.0; l * l];
        self.slow_diffusion(z, y, &mut g);
        gram(&g, l, out);
    }
}

/// `out = M Mᵀ` for a square row-major `M`.
pub(crate) fn gram(m: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
        }
    }
}

/// `ε^{1/2-κ}`.
pub fn moderate_noise_scale(epsilon: f64, kappa: f64) -> f64 {
    epsilon.powf(0.5 - kappa)
}

/// `ε^{1-2κ}`.
pub fn mdp_speed(epsilon: f64, kappa: f64) -> f64 {
    epsilon.powf(1.0 - 2.0 * kappa)
}
