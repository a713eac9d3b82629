//! Joint state and parameter estimation with augmented physics-based
//! models, a cubature Kalman filter, and a state-space constraint that
//! keeps the learned correction inside a ball around the physics model.

pub mod apbm;
pub mod ckf;
pub mod constraint;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod gaussian;
pub mod metrics;
pub mod truth;

pub use apbm::{Apbm, ApbmParams, PARAM_LEN, STATE_DIM};
pub use ckf::{cubature_points, measurement_update, measurement_update_block, time_update, CubatureSet};
pub use constraint::{
    constrain_cubature_set, rho_ss, solve_kappa, theta_kappa, ConstrainedSet, ConstraintSpec, MetricKind, Selection,
};
pub use error::{Error, Result};
pub use estimator::{run_filter, Filter, FilterConfig, FilterOutput, StepRecord, Variant, JOINT_DIM};
pub use gaussian::{symmetrize_and_repair, wrap_angle, GaussianBelief, MeasurementModel, TransitionModel};
pub use metrics::{anees_k, boxplot_summary, error_cdf, rmse_k, BoxSummary, McEnsemble};
pub use truth::{simulate_truth, TruthConfig, TruthDynamics, TruthTrajectory};
