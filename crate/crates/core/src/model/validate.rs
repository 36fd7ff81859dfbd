//! Sampling-based checks of the standing assumptions.

use std::fmt;

use serde::Serialize;

use super::{gram, ModelSpec};
use crate::error::{Error, Result};
use crate::grid::{Axis, Grid};
use crate::linalg::sym_eig_range;
use crate::stationary::invariant_density;

/// Standing assumptions that [`validate_model`] can check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// Coefficients evaluate to finite numbers.
    Finite,
    /// `λI ≤ σσ* ≤ ΛI` with `λ > 0`.
    Ellipticity,
    /// `⟨z, b(z,y)⟩ ≤ -r‖z‖²` outside a ball.
    Dissipativity,
    /// `‖F(z,y)‖ ≤ C(1 + ‖z‖ + ‖y‖)`; reported, not falsifiable on samples.
    SlowDriftGrowth,
    /// `G` bounded; reported, not falsifiable on samples.
    SlowDiffusionBound,
    /// `∫ H(z,y) π(z;y) dz = 0`.
    Centering,
    /// `0 < κ < (1 - m/2) ∧ 1/2` with `0 < m < 2`.
    ScaleRelation,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::Finite => "finite",
            Assumption::Ellipticity => "ellipticity",
            Assumption::Dissipativity => "dissipativity",
            Assumption::SlowDriftGrowth => "slow_drift_growth",
            Assumption::SlowDiffusionBound => "slow_diffusion_bound",
            Assumption::Centering => "centering",
            Assumption::ScaleRelation => "scale_relation",
        };
        f.write_str(s)
    }
}

/// Where an assumption failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Witness {
    Point { z: Vec<f64>, y: Vec<f64> },
    /// Failure of an averaged statement at a slow value.
    Slow { y: Vec<f64> },
    /// Failure of a purely arithmetic condition.
    Scalars { kappa: f64, m: f64, bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub assumption: Assumption,
    pub witness: Witness,
    pub detail: String,
}

/// Per-axis sampling ranges for `z` and `y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleBox {
    pub z: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
}

impl SampleBox {
    /// The same symmetric range on every axis.
    pub fn symmetric(d: usize, z_half: f64, l: usize, y_half: f64) -> Self {
        Self { z: vec![(-z_half, z_half); d], y: vec![(-y_half, y_half); l] }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Grid for the centering check; `None` selects a default per `d`.
    pub density_grid: Option<Grid>,
    pub ellipticity_floor: f64,
    pub centering_tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self { density_grid: None, ellipticity_floor: 1e-12, centering_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dissipativity {
    /// Estimated `r`.
    pub rate: f64,
    /// Estimated `C`.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `None` when the far-field samples contradict dissipativity.
    pub dissipativity: Option<Dissipativity>,
    pub slow_drift_growth: f64,
    pub slow_diffusion_bound: f64,
    /// `None` when the density could not be computed (`d > 2`).
    pub centering_defect: Option<f64>,
    pub checked: Vec<Assumption>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn tensor_samples(ranges: &[(f64, f64)], n: usize) -> Result<Grid> {
    let axes = ranges
        .iter()
        .map(|&(lo, hi)| {
            if lo == hi && lo.is_finite() {
                // a single frozen value is allowed for y
                Ok(Axis { lo, hi, nodes: 1 })
            } else {
                Axis::new(lo, hi, n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid::from_axes_unchecked(axes))
}

/// Checks the standing assumptions on the tensor sample grid of `sample_box`.
pub fn validate_model(
    spec: &ModelSpec,
    sample_box: &SampleBox,
    samples_per_axis: usize,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    let dims = spec.dims();
    let (d, l, p) = (dims.fast, dims.slow, dims.output);
    if samples_per_axis < 3 {
        return Err(Error::InvalidArgument(format!("samples_per_axis must be >= 3, got {samples_per_axis}")));
    }
    if sample_box.z.len() != d || sample_box.y.len() != l {
        return Err(Error::InvalidArgument("sample box dimensions do not match the model".into()));
    }
    if sample_box.z.iter().any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
        return Err(Error::InvalidArgument("degenerate z sample range".into()));
    }
    if sample_box.y.iter().any(|&(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite())) {
        return Err(Error::InvalidArgument("degenerate y sample range".into()));
    }
    let zs = tensor_samples(&sample_box.z, samples_per_axis)?;
    let ys = tensor_samples(&sample_box.y, samples_per_axis)?;

    let mut violations = Vec::new();
    let mut lambda_min = f64::INFINITY;
    let mut lambda_max = f64::NEG_INFINITY;
    let mut drift_growth = 0.0f64;
    let mut diffusion_bound = 0.0f64;

    let r_far = 0.5 * (0..zs.len()).map(|i| zs.radius(i)).fold(0.0, f64::max);
    // (radius, <z,b>/|z|^2, z, y) for every sample with z != 0
    let mut ratios: Vec<(f64, f64, usize, usize)> = Vec::new();

    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    let mut f = vec![0.0; l];
    let mut g = vec![0.0; l * l];
    let mut h = vec![0.0; p];
    for iy in 0..ys.len() {
        let y = ys.point(iy);
        for iz in 0..zs.len() {
            let z = zs.point(iz);
            spec.fast_drift(&z, &y, &mut b);
            spec.fast_diffusion(&z, &y, &mut sigma);
            spec.slow_drift(&z, &y, &mut f);
            spec.slow_diffusion(&z, &y, &mut g);
            spec.integrand(&z, &y, &mut h);
            if b.iter().chain(&sigma).chain(&f).chain(&g).chain(&h).any(|v| !v.is_finite()) {
                violations.push(Violation {
                    assumption: Assumption::Finite,
                    witness: Witness::Point { z: z.clone(), y: y.clone() },
                    detail: "coefficient evaluated to a non-finite value".into(),
                });
                continue;
            }
            gram(&sigma, d, &mut a);
            let (lo, hi) = sym_eig_range(&a, d);
            lambda_min = lambda_min.min(lo);
            lambda_max = lambda_max.max(hi);
            if lo < opts.ellipticity_floor {
                violations.push(Violation {
                    assumption: Assumption::Ellipticity,
                    witness: Witness::Point { z: z.clone(), y: y.clone() },
                    detail: format!("smallest eigenvalue of a is {lo:e}"),
                });
            }
            let r2: f64 = z.iter().map(|v| v * v).sum();
            if r2 > 0.0 {
                let q = z.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() / r2;
                ratios.push((r2.sqrt(), q, iz, iy));
            }
            let size = 1.0 + r2.sqrt() + y.iter().map(|v| v * v).sum::<f64>().sqrt();
            drift_growth = drift_growth.max(norm(&f) / size);
            diffusion_bound = diffusion_bound.max(norm(&g));
        }
    }

    // far-field dissipativity: every sample beyond r_far must have q < 0
    let far_bad = ratios
        .iter()
        .filter(|t| t.0 >= r_far && t.1 >= 0.0)
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let dissipativity = if let Some(&(_, q, iz, iy)) = far_bad {
        violations.push(Violation {
            assumption: Assumption::Dissipativity,
            witness: Witness::Point { z: zs.point(iz), y: ys.point(iy) },
            detail: format!("<z, b>/|z|^2 = {q} >= 0 in the far field"),
        });
        None
    } else {
        // smallest sampled radius beyond which all ratios are negative
        ratios.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut start = ratios.len();
        for i in (0..ratios.len()).rev() {
            if ratios[i].1 >= 0.0 {
                break;
            }
            start = i;
        }
        // move to the first entry of its radius class so ties are included
        while start > 0 && start < ratios.len() && ratios[start - 1].0 == ratios[start].0 {
            start += 1;
        }
        ratios.get(start).map(|first| {
            let worst = ratios[start..].iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
            Dissipativity { rate: -worst, radius: first.0 }
        })
    };

    // exact arithmetic check of the scale relation
    let (kappa, m) = (spec.kappa(), spec.growth_m());
    let bound = (1.0 - m / 2.0).min(0.5);
    if !(kappa > 0.0 && kappa < bound && m > 0.0 && m < 2.0) {
        violations.push(Violation {
            assumption: Assumption::ScaleRelation,
            witness: Witness::Scalars { kappa, m, bound },
            detail: format!("need 0 < m < 2 and 0 < kappa < {bound}"),
        });
    }

    let mut checked = vec![
        Assumption::Finite,
        Assumption::Ellipticity,
        Assumption::Dissipativity,
        Assumption::SlowDriftGrowth,
        Assumption::SlowDiffusionBound,
        Assumption::ScaleRelation,
    ];

    let centering_defect = if d <= 2 {
        checked.push(Assumption::Centering);
        let grid = match &opts.density_grid {
            Some(g) => g.clone(),
            None if d == 1 => Grid::default_fast(1),
            None => Grid::cube(2, -6.0, 6.0, 121)?,
        };
        let mut worst = 0.0f64;
        let mut z = vec![0.0; d];
        for iy in 0..ys.len() {
            let y = ys.point(iy);
            match invariant_density(spec, &y, &grid) {
                Ok(pi) => {
                    let w = grid.weights();
                    let mut acc = vec![0.0; p];
                    for idx in 0..grid.len() {
                        grid.point_into(idx, &mut z);
                        spec.integrand(&z, &y, &mut h);
                        for (s, v) in acc.iter_mut().zip(&h) {
                            *s += w[idx] * pi.values[idx] * v;
                        }
                    }
                    let defect = norm(&acc);
                    if !(defect <= opts.centering_tol) {
                        violations.push(Violation {
                            assumption: Assumption::Centering,
                            witness: Witness::Slow { y: y.clone() },
                            detail: format!("|int H pi| = {defect:e}"),
                        });
                    }
                    worst = if defect.is_nan() { f64::NAN } else { worst.max(defect) };
                }
                Err(e) => {
                    violations.push(Violation {
                        assumption: Assumption::Centering,
                        witness: Witness::Slow { y: y.clone() },
                        detail: format!("invariant density unavailable: {e}"),
                    });
                    worst = f64::NAN;
                }
            }
        }
        Some(worst)
    } else {
        None
    };

    Ok(ValidationReport {
        lambda_min,
        lambda_max,
        dissipativity,
        slow_drift_growth: drift_growth,
        slow_diffusion_bound: diffusion_bound,
        centering_defect,
        checked,
        violations,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{coefficient, ou};

    fn ou_box() -> SampleBox {
        SampleBox::symmetric(1, 4.0, 1, 2.0)
    }

    #[test]
    fn ou_passes() {
        let r = validate_model(&ou(), &ou_box(), 9, &ValidationOptions::default()).unwrap();
        assert!(r.is_ok(), "{:?}", r.violations);
        assert!((r.lambda_min - 2.0).abs() < 1e-12 && (r.lambda_max - 2.0).abs() < 1e-12);
        let dis = r.dissipativity.unwrap();
        assert!((dis.rate - 1.0).abs() < 1e-12);
        assert!(r.centering_defect.unwrap() < 1e-10);
    }

    #[test]
    fn expanding_drift_is_flagged() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.fast_drift = coefficient(|z, _, o| o[0] = z[0]);
        let r = validate_model(&spec.with_coefficients(c), &ou_box(), 5, &ValidationOptions::default()).unwrap();
        let v = r.violations.iter().find(|v| v.assumption == Assumption::Dissipativity).unwrap();
        match &v.witness {
            Witness::Point { z, .. } => assert!(z[0].abs() >= 2.0),
            w => panic!("unexpected witness {w:?}"),
        }
        assert!(r.dissipativity.is_none());
    }

    #[test]
    fn large_kappa_is_flagged_arithmetically() {
        let spec = ou().with_kappa(0.6).unwrap();
        let r = validate_model(&spec, &ou_box(), 3, &ValidationOptions::default()).unwrap();
        assert!(r.violations.iter().any(|v| v.assumption == Assumption::ScaleRelation));
    }

    #[test]
    fn non_finite_values_are_violations() {
        let spec = ou();
        let mut c = spec.coefficients().clone();
        c.integrand = coefficient(|z, _, o| o[0] = 1.0 / z[0]);
        let r = validate_model(&spec.with_coefficients(c), &ou_box(), 5, &ValidationOptions::default()).unwrap();
        assert!(r.violations.iter().any(|v| v.assumption == Assumption::Finite));
    }

    #[test]
    fn bad_arguments() {
        assert!(validate_model(&ou(), &ou_box(), 2, &ValidationOptions::default()).is_err());
        let degenerate = SampleBox { z: vec![(1.0, 1.0)], y: vec![(0.0, 1.0)] };
        assert!(validate_model(&ou(), &degenerate, 5, &ValidationOptions::default()).is_err());
    }
}
