//! Fast–slow diffusions: simulation, invariant densities, Poisson correctors,
//! averaged coefficients, action functionals and Monte Carlo diagnostics of
//! moderate deviations for integral functionals.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod averaging;
pub mod deviations;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod mcengine;
pub mod model;
mod operator;
pub mod poisson;
pub mod ratefn;
pub mod rng;
pub mod simulate;
pub mod stationary;

pub use error::{Error, Result};
pub use grid::{Axis, FieldRole, Grid, GridField};
pub use model::{ModelSpec, SampleBox, ValidationOptions, ValidationReport};
pub use simulate::{simulate_frozen, simulate_pair, rho_t, Mesh, PathSample, SimOptions};
pub use averaging::{averaged_coefficients, tabulate, AveragedModel, CorrectorTable, TabulationConfig};
pub use deviations::{corrector_path, lyapunov_certificate, negligibility_sweep, CertificateReport, DeltaReport};
pub use mcengine::{tail_probability, TailEstimate, TailEvent};
pub use poisson::{solve_poisson, PoissonMethod, PoissonSolution};
pub use ratefn::{action, mdp_prediction, minimize_endpoint, ActionValue, AffineTarget, DiscretePath, HalfSpace};
pub use stationary::invariant_density;
