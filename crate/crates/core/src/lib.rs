//! Monte Carlo laboratory for Bismut-type gradient formulas on stochastic wave
//! and damped-wave equations, truncated to finitely many spectral modes.

pub mod bsde;
pub mod error;
pub mod estimator;
pub mod quadrature;
pub mod regression;
pub mod control;
pub mod paths;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use spectral::{
    build_basis, check_trace_condition, HVector, Mat2, ModeBasis, ModeEigen, ModelKind,
    ModelParams, Sigma,
};
pub use control::{
    build_control, build_control_with_samples, bump_profile, control_norm_scaling,
    reproducing_residual, Control, ControlRequest, ControlVariant, ScalingFit,
};
pub use paths::{
    first_variation, girsanov_density_psi, girsanov_weight, simulate_drifted, simulate_reference,
    DriftSpec, Measure, PathBundle, SimConfig, Simulator, StepNoise,
};
pub use estimator::{
    estimate_expectation, estimate_gradient_bismut, estimate_gradient_fd,
    estimate_gradient_fd_drifted, estimate_gradient_pathwise, skorokhod_integral, GradientReport,
    Method, TestFunctional,
};
pub use bsde::{
    bismut_gradients_along_modes, fd_bsde_gradient, kolmogorov_residual, picard_affine_factor,
    semilinear_bismut, solve_lsmc, solve_lsmc_with, y_gradient_scaling, z_identification_check,
    BsdeSolution, ControlFamily, GeneratorSpec, KolmogorovOptions, LsmcOptions, Probe,
    RegressionBasis, ResidualRecord, SemilinearReport, TerminalSpec, YGradientScaling,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
