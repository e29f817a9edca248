//! In-context linear regression with a single linear-attention layer: task
//! families, prompt sampling, closed-form and Monte Carlo risk, projected
//! gradient training, task diversity and the elliptic PDE operator setting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diversity;
pub mod error;
pub mod numerics;
pub mod pde;
pub mod risk;
pub mod tasks;
pub mod training;
pub mod transformer;

pub use diversity::{
    centralizer, distance_surrogate, diversity_verdict, is_limiting_minimizer, sample_generators,
    simultaneously_diagonalizable, CentralizerReport, DiversityVerdict, VerdictKind,
};
pub use error::{IclError, Result};
pub use numerics::{Mat, Rng, SpdMatrix, Vector};
pub use pde::{CoefficientLaw, GrfSpec, PdeTaskSpec};
pub use risk::{
    closed_form_risk, empirical_risk, limiting_risk, monte_carlo_risk, optimal_q, population_risk_closed_form,
    RiskContext, RiskMethod, RiskReport, TaskSample,
};
pub use tasks::{sample_prompt, CovariateDistribution, Prompt, Rotation, TaskDistribution, TaskFamily};
pub use training::{train, Batch, Init, StopReason, TrainConfig, TrainTrace};
pub use transformer::{forward_full, predict, project_to_budget, Theta};
