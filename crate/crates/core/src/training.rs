//! Projected gradient descent on the empirical risk with Armijo backtracking.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{IclError, Result};
use crate::numerics::{spectral_norm, Mat, Rng};
use crate::risk::{PromptBatch, RiskContext};
use crate::tasks::{sample_prompt, Prompt};
use crate::transformer::{project_to_budget, Theta};

pub const ARMIJO_C: f64 = 1e-4;
pub const MAX_HALVINGS: usize = 40;
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// iid `N(0, scale²)` entries for both matrices.
    Gaussian { scale: f64 },
    /// `(P₀, Q₀)` plus iid `N(0, noise²)` perturbations.
    Near { p0: Mat, q0: Mat, noise: f64 },
}

impl Init {
    pub fn default_for(d: usize) -> Self {
        Init::Gaussian {
            scale: 0.1 / (d as f64).sqrt(),
        }
    }

    pub fn draw(&self, d: usize, budget: f64, rng: &mut Rng) -> Result<Theta> {
        match self {
            Init::Gaussian { scale } => Theta::new(
                rng.normal_matrix(d, d) * *scale,
                rng.normal_matrix(d, d) * *scale,
                budget,
            ),
            Init::Near { p0, q0, noise } => {
                let p = p0 + rng.normal_matrix(d, d) * *noise;
                let q = q0 + rng.normal_matrix(d, d) * *noise;
                Theta::new(p, q, budget)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batch {
    Full,
    /// Prompts drawn without replacement each iteration.
    Mini(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of training prompts `N`.
    pub prompts: usize,
    /// Training prompt length `n`.
    pub prompt_len: usize,
    pub budget: f64,
    /// Initial trial step; later trials start from twice the last accepted step.
    pub step_size: f64,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub init: Init,
    pub batch: Batch,
}

impl TrainConfig {
    pub fn new(d: usize, prompts: usize, prompt_len: usize, budget: f64) -> Self {
        Self {
            prompts,
            prompt_len,
            budget,
            step_size: 1.0,
            max_iterations: 50_000,
            grad_tol: 1e-8,
            init: Init::default_for(d),
            batch: Batch::Full,
        }
    }

    pub fn validate(&self, ctx: &RiskContext) -> Result<()> {
        let min_budget = 1.0_f64.max(ctx.cov().inverse_op_norm());
        if self.budget < min_budget {
            return Err(IclError::InvalidArgument(format!(
                "budget {} below max(1, |Sigma^-1|) = {min_budget}",
                self.budget
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(IclError::InvalidArgument("step size must be positive".into()));
        }
        if self.prompts == 0 || self.prompt_len == 0 {
            return Err(IclError::InvalidArgument(
                "need at least one prompt of length at least 1".into(),
            ));
        }
        if let Batch::Mini(0) = self.batch {
            return Err(IclError::InvalidArgument("empty minibatch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub risk: f64,
    pub grad_norm: f64,
    pub p_norm: f64,
    pub q_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Projected-gradient norm fell below the tolerance.
    Converged,
    MaxIterations,
    /// No further Armijo decrease is representable in floating point.
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,risk,grad_norm,p_norm,q_norm\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                r.iteration, r.risk, r.grad_norm, r.p_norm, r.q_norm
            );
        }
        out
    }

    pub fn final_risk(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.risk)
    }
}

fn inner(a: &(Mat, Mat), b: &(Mat, Mat)) -> f64 {
    a.0.dot(&b.0) + a.1.dot(&b.1)
}

fn step_from(theta: &Theta, grad: &(Mat, Mat), t: f64) -> Theta {
    project_to_budget(&Theta {
        p: &theta.p - &grad.0 * t,
        q: &theta.q - &grad.1 * t,
        budget: theta.budget,
    })
}

/// Armijo search along the projected path `t ↦ Proj(θ − t g)` starting at
/// `step` and halving. Accepts when `f(θ_t) ≤ f(θ) − c ⟨g, θ − θ_t⟩`.
pub fn backtracking_step(
    theta: &Theta,
    grad: &(Mat, Mat),
    risk_fn: &dyn Fn(&Theta) -> f64,
    step: f64,
) -> Result<(Theta, f64)> {
    backtrack_from(theta, risk_fn(theta), grad, risk_fn, step).map(|(t, s, _)| (t, s))
}

fn backtrack_from(
    theta: &Theta,
    f0: f64,
    grad: &(Mat, Mat),
    risk_fn: &dyn Fn(&Theta) -> f64,
    step: f64,
) -> Result<(Theta, f64, f64)> {
    if !(step > 0.0) {
        return Err(IclError::InvalidArgument("step must be positive".into()));
    }
    if grad.0.iter().chain(grad.1.iter()).all(|v| *v == 0.0) {
        return Ok((theta.clone(), step, f0));
    }
    let mut t = step;
    for _ in 0..=MAX_HALVINGS {
        let cand = step_from(theta, grad, t);
        let moved = (&theta.p - &cand.p, &theta.q - &cand.q);
        let decrease = inner(grad, &moved);
        if decrease > 0.0 {
            let f = risk_fn(&cand);
            if f <= f0 - ARMIJO_C * decrease {
                return Ok((cand, t, f));
            }
        }
        t *= 0.5;
    }
    Err(IclError::NoDescentDirection)
}

/// Draw the fixed training set: prompt `i` uses child stream `i`.
pub fn sample_training_set(ctx: &RiskContext, prompts: usize, prompt_len: usize, rng: &Rng) -> Result<Vec<Prompt>> {
    (0..prompts)
        .into_par_iter()
        .map(|i| sample_prompt(&ctx.tasks, &ctx.covariates, prompt_len, &rng.child(i as u64)))
        .collect()
}

/// Same prompts as [`sample_training_set`], keeping only the summaries the loss needs.
pub fn sample_training_batch(ctx: &RiskContext, prompts: usize, prompt_len: usize, rng: &Rng) -> Result<PromptBatch> {
    let parts = (0..prompts)
        .into_par_iter()
        .map(|i| {
            let p = sample_prompt(&ctx.tasks, &ctx.covariates, prompt_len, &rng.child(i as u64))?;
            Ok((p.label_covariance(), p.query().clone(), p.target().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    PromptBatch::from_summaries(&parts)
}

/// Sample `N` prompts once (stream `rng.child(1)`), draw the init
/// (`rng.child(0)`) and run projected gradient descent.
pub fn train(cfg: &TrainConfig, ctx: &RiskContext, rng: &Rng) -> Result<(Theta, TrainTrace)> {
    cfg.validate(ctx)?;
    let batch = sample_training_batch(ctx, cfg.prompts, cfg.prompt_len, &rng.child(1))?;
    let init = cfg.init.draw(ctx.dim(), cfg.budget, &mut rng.child(0))?;
    train_on_batch(cfg, &batch, init, rng)
}

pub fn train_on_batch(cfg: &TrainConfig, batch: &PromptBatch, init: Theta, rng: &Rng) -> Result<(Theta, TrainTrace)> {
    let mut theta = project_to_budget(&init);
    let full = |t: &Theta| batch.loss(t);
    let initial_risk = full(&theta);
    let mut records = Vec::new();
    let mut step = cfg.step_size;
    let mut stop = StopReason::MaxIterations;
    let mut minibatch_rng = rng.child(2);

    for iteration in 0..=cfg.max_iterations {
        let sub;
        let working = match cfg.batch {
            Batch::Full => batch,
            Batch::Mini(size) if size >= batch.len() => batch,
            Batch::Mini(size) => {
                sub = batch.select(&choose_indices(batch.len(), size, &mut minibatch_rng));
                &sub
            }
        };
        let (f0, gp, gq) = working.loss_and_gradient(&theta);
        let grad = (gp, gq);
        let grad_norm = inner(&grad, &grad).sqrt();
        let risk = if matches!(cfg.batch, Batch::Full) {
            f0
        } else {
            full(&theta)
        };
        if !risk.is_finite() || risk > DIVERGENCE_FACTOR * initial_risk.max(f64::MIN_POSITIVE) {
            return Err(IclError::StepSizeTooLarge);
        }
        records.push(TraceRecord {
            iteration,
            risk,
            grad_norm,
            p_norm: spectral_norm(&theta.p),
            q_norm: spectral_norm(&theta.q),
        });
        if iteration == cfg.max_iterations {
            break;
        }
        let mapping = projected_gradient_norm(&theta, &grad, step.min(cfg.step_size));
        if mapping <= cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        let loss_fn = |t: &Theta| working.loss(t);
        match backtrack_from(&theta, f0, &grad, &loss_fn, step) {
            Ok((next, accepted, _)) => {
                theta = next;
                step = 2.0 * accepted;
            }
            Err(IclError::NoDescentDirection) => {
                stop = StopReason::Stalled;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((theta, TrainTrace { records, stop }))
}

/// `‖θ − Proj(θ − t g)‖ / t`, equal to `‖g‖` away from the budget boundary.
pub fn projected_gradient_norm(theta: &Theta, grad: &(Mat, Mat), t: f64) -> f64 {
    let next = step_from(theta, grad, t);
    let dp = &theta.p - &next.p;
    let dq = &theta.q - &next.q;
    (dp.norm_squared() + dq.norm_squared()).sqrt() / t
}

fn choose_indices(len: usize, size: usize, rng: &mut Rng) -> Vec<usize> {
    // Partial Fisher–Yates.
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..size {
        let j = i + rng.index(len - i);
        idx.swap(i, j);
    }
    idx.truncate(size);
    idx.sort_unstable();
    idx
}
