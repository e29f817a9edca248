//! Shared fixtures for the benchmarks.

use icl_core::numerics::Mat;
use icl_core::{CovariateDistribution, RiskContext, Rng, Rotation, TaskDistribution, Theta};

/// Fresh-rotation tasks with spectra in `[1, 2]` and standard covariates.
pub fn in_domain(d: usize, n: usize) -> RiskContext {
    let tasks = TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fresh).expect("valid interval");
    RiskContext::new(tasks, CovariateDistribution::standard(d), n).expect("matching dimensions")
}

/// `(I + E₁, I + E₂)` with small Gaussian `Eᵢ`.
pub fn perturbed_identity(d: usize, seed: u64) -> Theta {
    let mut rng = Rng::new(seed, 0);
    let scale = 0.1 / (d as f64).sqrt();
    Theta::new(
        Mat::identity(d, d) + rng.normal_matrix(d, d) * scale,
        Mat::identity(d, d) + rng.normal_matrix(d, d) * scale,
        100.0,
    )
    .expect("square blocks")
}
