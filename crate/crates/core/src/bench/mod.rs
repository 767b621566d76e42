//! Benchmark targets, metrics and diagnostics.

mod appendix_b;
mod image;
mod metrics;
mod pss;
mod targets;

pub use appendix_b::{appendix_b_gradients, integrate, AppendixB};
pub use image::{read_pfm, write_pfm, ImageTarget};
pub use metrics::{
    cross_entropy, density_grid, estimator_variance, mape, EstimatorStats, FnIntegrand, MetricSet,
    MAPE_EPSILON,
};
pub use pss::{pss_synthetic_target, GaussianMixture, MixtureComponent};
pub use targets::{
    builtin_target, filament_cluster, rings, step_wedge, BUILTIN_TARGETS, TARGET_SIZE,
};
