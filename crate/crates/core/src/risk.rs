//! Risk functionals of the reduced transformer.
//!
//! For a task `A` with `Ai = A⁻¹`, covariance `Σ` and a (possibly weighted)
//! squared norm `‖e‖²_W = eᵀWe`, the Gaussian expectation over a prompt of
//! length `n` is exact:
//!
//! ```text
//! R_n = Tr(W (M − Ai) Σ (M − Ai)ᵀ)
//!     + (1/n) [Tr(W M Σ Mᵀ) + Tr(ΣQΣQᵀ) Tr(W G Σ Gᵀ)],   M = P Ai Σ Q,  G = P Ai.
//! ```
//!
//! Only the outer expectation over `A` may need sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IclError, Result};
use crate::numerics::{
    inverse_general, mean_and_std_error, pairwise_sum, spectral_norm, symmetrize, Mat, Rng, SpdMatrix, Vector,
};
use crate::tasks::{sample_prompt, CovariateDistribution, Prompt, TaskDistribution};
use crate::transformer::{predict_from_covariance, Theta};

/// Quadrature nodes for one-parameter scalar families.
pub const QUADRATURE_NODES: usize = 64;
/// Default task draws for Monte-Carlo outer expectations.
pub const DEFAULT_TASK_SAMPLES: usize = 10_000;
const TASK_SAMPLE_SEED: u64 = 0x7A5C_0001;
/// Columns per chunk in batched gradient and loss evaluation.
pub const BATCH_CHUNK: usize = 512;

/// `(P_A, P_x, n)` plus an optional SPD weight defining the error norm.
#[derive(Clone, Debug)]
pub struct RiskContext {
    pub tasks: TaskDistribution,
    pub covariates: CovariateDistribution,
    pub n: usize,
    pub weight: Option<Mat>,
}

impl RiskContext {
    pub fn new(tasks: TaskDistribution, covariates: CovariateDistribution, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(IclError::InvalidArgument("prompt length must be at least 1".into()));
        }
        if tasks.dim() != covariates.dim() {
            return Err(IclError::DimensionMismatch(
                "task and covariate dimensions differ".into(),
            ));
        }
        Ok(Self {
            tasks,
            covariates,
            n,
            weight: None,
        })
    }

    pub fn with_weight(mut self, weight: Mat) -> Result<Self> {
        SpdMatrix::new(weight.clone())?;
        self.weight = Some(weight);
        Ok(self)
    }

    pub fn with_length(&self, n: usize) -> Result<Self> {
        let mut ctx = Self::new(self.tasks.clone(), self.covariates.clone(), n)?;
        ctx.weight = self.weight.clone();
        Ok(ctx)
    }

    pub fn dim(&self) -> usize {
        self.tasks.dim()
    }

    pub fn cov(&self) -> &SpdMatrix {
        self.covariates.cov()
    }

    fn weighted_norm_sq(&self, e: &Vector) -> f64 {
        match &self.weight {
            Some(w) => e.dot(&(w * e)),
            None => e.norm_squared(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    Empirical,
    MonteCarlo,
    ClosedForm,
    Limiting,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub value: f64,
    pub std_error: f64,
    pub method: RiskMethod,
    pub episodes: usize,
}

impl RiskReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Task inverses with weights summing to one: an exact quadrature or an iid sample.
#[derive(Clone, Debug)]
pub struct TaskSample {
    inverses: Vec<Mat>,
    weights: Vec<f64>,
    exact: bool,
}

impl TaskSample {
    /// Exact quadrature when the family admits one, otherwise `count` draws
    /// from a fixed stream.
    pub fn for_distribution(dist: &TaskDistribution, count: usize) -> Result<Self> {
        if let Some(atoms) = dist.quadrature(QUADRATURE_NODES) {
            let mut inverses = Vec::with_capacity(atoms.len());
            let mut weights = Vec::with_capacity(atoms.len());
            for (a, w) in atoms {
                inverses.push(inverse_general(&a)?);
                weights.push(w);
            }
            return Ok(Self {
                inverses,
                weights,
                exact: true,
            });
        }
        Self::sampled(dist, count, &Rng::new(TASK_SAMPLE_SEED, 0))
    }

    pub fn sampled(dist: &TaskDistribution, count: usize, rng: &Rng) -> Result<Self> {
        if count == 0 {
            return Err(IclError::EmptySample);
        }
        let inverses = (0..count)
            .into_par_iter()
            .map(|i| inverse_general(&dist.sample(&mut rng.child(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inverses,
            weights: vec![1.0 / count as f64; count],
            exact: false,
        })
    }

    pub fn from_tasks(tasks: &[Mat]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(IclError::EmptySample);
        }
        let inverses = tasks.iter().map(inverse_general).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: vec![1.0 / tasks.len() as f64; tasks.len()],
            inverses,
            exact: false,
        })
    }

    pub fn len(&self) -> usize {
        self.inverses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverses.is_empty()
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn inverses(&self) -> &[Mat] {
        &self.inverses
    }

    /// Weighted mean and, for sampled tasks, the standard error of the mean.
    pub fn average(&self, values: &[f64]) -> (f64, f64) {
        if self.exact {
            let terms: Vec<f64> = values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
            (pairwise_sum(&terms), 0.0)
        } else {
            mean_and_std_error(values)
        }
    }

    pub fn average_matrix(&self, f: impl Fn(&Mat) -> Mat + Sync) -> Mat {
        let d = self.inverses[0].nrows();
        let parts: Vec<Mat> = self
            .inverses
            .par_iter()
            .zip(&self.weights)
            .map(|(ai, w)| f(ai) * *w)
            .collect();
        parts.iter().fold(Mat::zeros(d, d), |acc, m| acc + m)
    }
}

/// `Σ_ℓ σ_ℓ² ⟨K w_ℓ, w_ℓ⟩ = Tr(ΣK)` over the eigenpairs of `Σ`; `K` is symmetrized.
pub fn trace_sigma(cov: &SpdMatrix, k: &Mat) -> f64 {
    let ks = symmetrize(k);
    let w = cov.eigenvectors();
    let terms: Vec<f64> = (0..cov.dim())
        .map(|l| {
            let col = w.column(l);
            cov.eigenvalues()[l] * col.dot(&(&ks * col))
        })
        .collect();
    pairwise_sum(&terms)
}

/// `E[XₙKXₙ] = ((n+1)/n) ΣKΣ + (Tr(ΣK)/n) Σ`.
pub fn expected_cov_product(cov: &SpdMatrix, k: &Mat, n: usize) -> Result<Mat> {
    if n == 0 {
        return Err(IclError::InvalidArgument("n must be at least 1".into()));
    }
    let s = cov.matrix();
    let ks = symmetrize(k);
    let n = n as f64;
    Ok(s * &ks * s * ((n + 1.0) / n) + s * (trace_sigma(cov, &ks) / n))
}

/// Per-task limiting term and `1/n` bracket.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskTerms {
    pub limit: f64,
    pub bracket: f64,
}

fn weighted_trace(weight: Option<&Mat>, m: &Mat) -> f64 {
    match weight {
        Some(w) => (w * m).trace(),
        None => m.trace(),
    }
}

pub fn task_terms(theta: &Theta, ai: &Mat, cov: &SpdMatrix, weight: Option<&Mat>) -> TaskTerms {
    let s = cov.matrix();
    let g = &theta.p * ai;
    let m = &g * s * &theta.q;
    let e = &m - ai;
    let limit = weighted_trace(weight, &(&e * s * e.transpose()));
    let tq = (s * &theta.q * s * theta.q.transpose()).trace();
    let bracket =
        weighted_trace(weight, &(&m * s * m.transpose())) + tq * weighted_trace(weight, &(&g * s * g.transpose()));
    TaskTerms { limit, bracket }
}

/// Task-averaged limiting term and bracket with their standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedForm {
    pub limit: f64,
    pub limit_se: f64,
    pub bracket: f64,
    pub bracket_se: f64,
    pub tasks: usize,
    pub exact: bool,
}

impl ClosedForm {
    /// `R_n` and a standard error bound (covariance between terms is ignored,
    /// so standard deviations add).
    pub fn risk(&self, n: usize) -> (f64, f64) {
        let inv = 1.0 / n as f64;
        (self.limit + self.bracket * inv, self.limit_se + self.bracket_se * inv)
    }
}

pub fn closed_form(theta: &Theta, cov: &SpdMatrix, weight: Option<&Mat>, sample: &TaskSample) -> ClosedForm {
    let terms: Vec<TaskTerms> = sample
        .inverses()
        .par_iter()
        .map(|ai| task_terms(theta, ai, cov, weight))
        .collect();
    let limits: Vec<f64> = terms.iter().map(|t| t.limit).collect();
    let brackets: Vec<f64> = terms.iter().map(|t| t.bracket).collect();
    let (limit, limit_se) = sample.average(&limits);
    let (bracket, bracket_se) = sample.average(&brackets);
    ClosedForm {
        limit,
        limit_se,
        bracket,
        bracket_se,
        tasks: sample.len(),
        exact: sample.is_exact(),
    }
}

/// Exact `R_n` for a fixed task sample; the standard error is that of the
/// sampled outer expectation (zero for exact quadrature).
pub fn closed_form_risk(theta: &Theta, ctx: &RiskContext, sample: &TaskSample) -> RiskReport {
    let terms: Vec<f64> = sample
        .inverses()
        .par_iter()
        .map(|ai| {
            let t = task_terms(theta, ai, ctx.cov(), ctx.weight.as_ref());
            t.limit + t.bracket / ctx.n as f64
        })
        .collect();
    let (value, std_error) = sample.average(&terms);
    RiskReport {
        value,
        std_error,
        method: RiskMethod::ClosedForm,
        episodes: sample.len(),
    }
}

pub fn population_risk_closed_form(theta: &Theta, ctx: &RiskContext, task_samples: usize) -> Result<RiskReport> {
    let sample = TaskSample::for_distribution(&ctx.tasks, task_samples)?;
    Ok(closed_form_risk(theta, ctx, &sample))
}

pub fn limiting_risk_for_sample(theta: &Theta, ctx: &RiskContext, sample: &TaskSample) -> RiskReport {
    let terms: Vec<f64> = sample
        .inverses()
        .par_iter()
        .map(|ai| task_terms(theta, ai, ctx.cov(), ctx.weight.as_ref()).limit)
        .collect();
    let (value, std_error) = sample.average(&terms);
    RiskReport {
        value,
        std_error,
        method: RiskMethod::Limiting,
        episodes: sample.len(),
    }
}

/// `R_∞(θ) = E_A Tr(W (PAiΣQ − Ai) Σ (PAiΣQ − Ai)ᵀ)`.
pub fn limiting_risk(theta: &Theta, ctx: &RiskContext, task_samples: usize) -> Result<RiskReport> {
    let sample = TaskSample::for_distribution(&ctx.tasks, task_samples)?;
    Ok(limiting_risk_for_sample(theta, ctx, &sample))
}

/// `E_A ‖A⁻¹x‖²_W = E_A Tr(W Ai Σ Aiᵀ)`.
pub fn ground_truth_norm(ctx: &RiskContext, sample: &TaskSample) -> f64 {
    let s = ctx.cov().matrix();
    let vals: Vec<f64> = sample
        .inverses()
        .iter()
        .map(|ai| weighted_trace(ctx.weight.as_ref(), &(ai * s * ai.transpose())))
        .collect();
    sample.average(&vals).0
}

/// Closed-form gradient of `R_n` in `(P, Q)`.
pub fn closed_form_gradient(theta: &Theta, ctx: &RiskContext, sample: &TaskSample) -> (Mat, Mat) {
    let s = ctx.cov().matrix();
    let inv_n = 1.0 / ctx.n as f64;
    let d = ctx.dim();
    let ident = Mat::identity(d, d);
    let w = ctx.weight.as_ref().unwrap_or(&ident);
    let tq = (s * &theta.q * s * theta.q.transpose()).trace();
    let sqs = s * &theta.q * s;
    let parts: Vec<(Mat, Mat)> = sample
        .inverses()
        .par_iter()
        .zip(&sample.weights)
        .map(|(ai, wt)| {
            let g = &theta.p * ai;
            let m = &g * s * &theta.q;
            let h = w * (&m * (1.0 + inv_n) - ai) * s * 2.0;
            let ais = ai * s;
            let mut gp = &h * (&ais * &theta.q).transpose();
            gp += w * &g * s * ai.transpose() * (2.0 * inv_n * tq);
            let tg = (w * &g * s * g.transpose()).trace();
            let mut gq = (&theta.p * &ais).transpose() * &h;
            gq += &sqs * (2.0 * inv_n * tg);
            (gp * *wt, gq * *wt)
        })
        .collect();
    parts
        .iter()
        .fold((Mat::zeros(d, d), Mat::zeros(d, d)), |(a, b), (p, q)| (a + p, b + q))
}

/// Minimizer of `Q ↦ R_n(I, Q)` with the task moment it was built from.
#[derive(Clone, Debug)]
pub struct OptimalQ {
    pub q: Mat,
    /// `B = E[Aiᵀ W Ai]`.
    pub b: Mat,
    /// First-order bound on `‖Q − Q_exact‖_op` from Monte-Carlo error in `B`.
    pub tolerance: f64,
}

/// `Q_n = ((1 + 1/n) BΣ + (Tr(ΣB)/n) I)⁻¹ B` with `B = E[Aiᵀ W Ai]`.
pub fn optimal_q(ctx: &RiskContext, task_samples: usize) -> Result<OptimalQ> {
    let sample = TaskSample::for_distribution(&ctx.tasks, task_samples)?;
    optimal_q_for_sample(ctx, &sample)
}

pub fn optimal_q_for_sample(ctx: &RiskContext, sample: &TaskSample) -> Result<OptimalQ> {
    let d = ctx.dim();
    let moment = |ai: &Mat| match &ctx.weight {
        Some(w) => ai.transpose() * w * ai,
        None => ai.transpose() * ai,
    };
    let b = symmetrize(&sample.average_matrix(moment));
    SpdMatrix::new(b.clone()).map_err(|_| IclError::DegenerateTaskMoment)?;
    let s = ctx.cov().matrix();
    let n = ctx.n as f64;
    let t = (s * &b).trace();
    let inner = &b * s * (1.0 + 1.0 / n) + Mat::identity(d, d) * (t / n);
    let inner_inv = inner.try_inverse().ok_or(IclError::DegenerateTaskMoment)?;
    let q = &inner_inv * &b;
    let tolerance = if sample.is_exact() {
        0.0
    } else {
        let count = sample.len() as f64;
        let mut var = Mat::zeros(d, d);
        for ai in sample.inverses() {
            let dev = moment(ai) - &b;
            var += dev.component_mul(&dev);
        }
        let db = (var.sum() / (count * (count - 1.0).max(1.0))).sqrt();
        let q_norm = spectral_norm(&q);
        spectral_norm(&inner_inv)
            * db
            * (1.0 + (1.0 + 1.0 / n) * spectral_norm(s) * q_norm + ctx.cov().trace() * q_norm / n)
    };
    Ok(OptimalQ { q, b, tolerance })
}

/// Precomputed prompt statistics: label covariances `Cᵢ`, queries and targets.
#[derive(Clone, Debug)]
pub struct PromptBatch {
    dim: usize,
    // `Cᵢ` stored column-major, `d²` entries per prompt.
    covs: Vec<f64>,
    queries: Mat,
    targets: Mat,
}

impl PromptBatch {
    pub fn new(prompts: &[Prompt]) -> Result<Self> {
        let parts: Vec<_> = prompts
            .iter()
            .map(|p| (p.label_covariance(), p.query().clone(), p.target().clone()))
            .collect();
        Self::from_summaries(&parts)
    }

    /// Batch from per-prompt `(Cᵢ, query, target)` triples.
    pub fn from_summaries(parts: &[(Mat, Vector, Vector)]) -> Result<Self> {
        let first = parts.first().ok_or(IclError::EmptySample)?;
        let d = first.1.len();
        let count = parts.len();
        let mut covs = Vec::with_capacity(count * d * d);
        let mut queries = Mat::zeros(d, count);
        let mut targets = Mat::zeros(d, count);
        for (i, (c, x, y)) in parts.iter().enumerate() {
            if c.shape() != (d, d) || x.len() != d || y.len() != d {
                return Err(IclError::DimensionMismatch("prompts of differing dimension".into()));
            }
            covs.extend_from_slice(c.as_slice());
            queries.set_column(i, x);
            targets.set_column(i, y);
        }
        Ok(Self {
            dim: d,
            covs,
            queries,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sub-batch of the given prompt indices.
    pub fn select(&self, indices: &[usize]) -> PromptBatch {
        let d = self.dim;
        let dd = d * d;
        let mut covs = Vec::with_capacity(indices.len() * dd);
        let mut queries = Mat::zeros(d, indices.len());
        let mut targets = Mat::zeros(d, indices.len());
        for (k, &i) in indices.iter().enumerate() {
            covs.extend_from_slice(&self.covs[i * dd..(i + 1) * dd]);
            queries.set_column(k, &self.queries.column(i));
            targets.set_column(k, &self.targets.column(i));
        }
        PromptBatch {
            dim: d,
            covs,
            queries,
            targets,
        }
    }

    fn apply_covs(&self, start: usize, u: &Mat, transpose: bool) -> Mat {
        let d = self.dim;
        let dd = d * d;
        let mut out = Mat::zeros(d, u.ncols());
        for k in 0..u.ncols() {
            let c = &self.covs[(start + k) * dd..(start + k + 1) * dd];
            for j in 0..d {
                let uj = u[(j, k)];
                for i in 0..d {
                    // Column-major: C[i, j] = c[j * d + i].
                    if transpose {
                        out[(j, k)] += c[j * d + i] * u[(i, k)];
                    } else {
                        out[(i, k)] += c[j * d + i] * uj;
                    }
                }
            }
        }
        out
    }

    fn chunk_residuals(&self, theta: &Theta, start: usize, len: usize) -> (Mat, Mat) {
        let x = self.queries.columns(start, len);
        let u = &theta.q * x;
        let v = self.apply_covs(start, &u, false);
        let r = &theta.p * &v - self.targets.columns(start, len);
        (v, r)
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .step_by(BATCH_CHUNK)
            .map(|s| (s, BATCH_CHUNK.min(self.len() - s)))
            .collect()
    }

    /// Per-prompt squared errors in prompt order.
    pub fn losses(&self, theta: &Theta) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .chunks()
            .into_par_iter()
            .map(|(s, l)| {
                let (_, r) = self.chunk_residuals(theta, s, l);
                r.column_iter().map(|c| c.norm_squared()).collect()
            })
            .collect();
        parts.concat()
    }

    pub fn loss(&self, theta: &Theta) -> f64 {
        pairwise_sum(&self.losses(theta)) / self.len() as f64
    }

    /// Loss and exact gradient `(gradP, gradQ)`.
    pub fn loss_and_gradient(&self, theta: &Theta) -> (f64, Mat, Mat) {
        let d = self.dim;
        let parts: Vec<(Vec<f64>, Mat, Mat)> = self
            .chunks()
            .into_par_iter()
            .map(|(s, l)| {
                let (v, r) = self.chunk_residuals(theta, s, l);
                let gp = &r * v.transpose();
                let t = theta.p.transpose() * &r;
                let sv = self.apply_covs(s, &t, true);
                let gq = sv * self.queries.columns(s, l).transpose();
                let losses = r.column_iter().map(|c| c.norm_squared()).collect();
                (losses, gp, gq)
            })
            .collect();
        let scale = 2.0 / self.len() as f64;
        let mut gp = Mat::zeros(d, d);
        let mut gq = Mat::zeros(d, d);
        let mut losses = Vec::with_capacity(self.len());
        for (l, p, q) in parts {
            losses.extend(l);
            gp += p;
            gq += q;
        }
        (pairwise_sum(&losses) / self.len() as f64, gp * scale, gq * scale)
    }
}

/// Mean squared prediction error over a fixed prompt set.
pub fn empirical_risk(theta: &Theta, prompts: &[Prompt]) -> Result<RiskReport> {
    let batch = PromptBatch::new(prompts)?;
    let (value, std_error) = mean_and_std_error(&batch.losses(theta));
    Ok(RiskReport {
        value,
        std_error,
        method: RiskMethod::Empirical,
        episodes: prompts.len(),
    })
}

/// Exact gradient of [`empirical_risk`].
pub fn risk_gradient(theta: &Theta, prompts: &[Prompt]) -> Result<(Mat, Mat)> {
    let batch = PromptBatch::new(prompts)?;
    let (_, gp, gq) = batch.loss_and_gradient(theta);
    Ok((gp, gq))
}

fn episode_loss(theta: &Theta, ctx: &RiskContext, rng: &Rng) -> Result<(f64, Prompt)> {
    let prompt = sample_prompt(&ctx.tasks, &ctx.covariates, ctx.n, rng)?;
    let pred = predict_from_covariance(theta, &prompt.label_covariance(), prompt.query());
    Ok((ctx.weighted_norm_sq(&(pred - prompt.target())), prompt))
}

/// Fresh prompts, one child stream per episode.
pub fn monte_carlo_risk(theta: &Theta, ctx: &RiskContext, episodes: usize, rng: &Rng) -> Result<RiskReport> {
    if episodes == 0 {
        return Err(IclError::EmptySample);
    }
    let losses = (0..episodes)
        .into_par_iter()
        .map(|i| episode_loss(theta, ctx, &rng.child(i as u64)).map(|(l, _)| l))
        .collect::<Result<Vec<f64>>>()?;
    let (value, std_error) = mean_and_std_error(&losses);
    Ok(RiskReport {
        value,
        std_error,
        method: RiskMethod::MonteCarlo,
        episodes,
    })
}

/// The bounded-data event `‖x_{n+1}‖ ≤ √Tr Σ + t`, `‖Xₙ‖_op ≤ ‖Σ‖_op (1 + t + √(d/n))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationEvent {
    pub t: f64,
    pub query_bound: f64,
    pub covariance_bound: f64,
}

impl TruncationEvent {
    pub fn new(cov: &SpdMatrix, n: usize, t: f64) -> Result<Self> {
        if !(t > 0.0) || n == 0 {
            return Err(IclError::InvalidArgument("truncation needs t > 0 and n >= 1".into()));
        }
        let d = cov.dim() as f64;
        Ok(Self {
            t,
            query_bound: cov.trace().sqrt() + t,
            covariance_bound: cov.op_norm() * (1.0 + t + (d / n as f64).sqrt()),
        })
    }

    pub fn contains(&self, prompt: &Prompt) -> bool {
        prompt.query().norm() <= self.query_bound
            && spectral_norm(&prompt.empirical_covariance()) <= self.covariance_bound
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedRisk {
    pub report: RiskReport,
    pub event_frequency: f64,
}

/// [`monte_carlo_risk`] with each loss multiplied by the indicator of the event.
pub fn truncated_monte_carlo_risk(
    theta: &Theta,
    ctx: &RiskContext,
    t: f64,
    episodes: usize,
    rng: &Rng,
) -> Result<TruncatedRisk> {
    if episodes == 0 {
        return Err(IclError::EmptySample);
    }
    let event = TruncationEvent::new(ctx.cov(), ctx.n, t)?;
    let pairs =
        (0..episodes)
            .into_par_iter()
            .map(|i| {
                episode_loss(theta, ctx, &rng.child(i as u64)).map(|(l, p)| {
                    if event.contains(&p) {
                        (l, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                })
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
    let losses: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let hits: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (value, std_error) = mean_and_std_error(&losses);
    Ok(TruncatedRisk {
        report: RiskReport {
            value,
            std_error,
            method: RiskMethod::MonteCarlo,
            episodes,
        },
        event_frequency: pairwise_sum(&hits) / episodes as f64,
    })
}

/// Monte-Carlo risk at several prompt lengths from shared episodes, plus the
/// excess over the same episodes' limiting loss (prediction with `C = AiΣ`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub length: usize,
    pub risk: RiskReport,
    pub excess: RiskReport,
}

/// Running label covariances `(1/m) Σ_{i≤m} yᵢxᵢᵀ` at each requested `m`.
pub fn prefix_label_covariances(xs: &Mat, ys: &Mat, lengths: &[usize]) -> Vec<Mat> {
    let d = xs.nrows();
    let mut out = Vec::with_capacity(lengths.len());
    let mut acc = Mat::zeros(d, d);
    let mut done = 0;
    for &m in lengths {
        if m > done {
            acc += ys.columns(done, m - done) * xs.columns(done, m - done).transpose();
            done = m;
        }
        out.push(&acc / m as f64);
    }
    out
}

pub(crate) fn check_lengths(lengths: &[usize]) -> Result<usize> {
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IclError::InvalidArgument(
            "prompt lengths must be positive and strictly increasing".into(),
        ));
    }
    Ok(*lengths.last().expect("nonempty"))
}

pub(crate) fn summarize_curve(lengths: &[usize], per_episode: &[(Vec<f64>, Vec<f64>)]) -> Vec<CurvePoint> {
    let episodes = per_episode.len();
    lengths
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let raw: Vec<f64> = per_episode.iter().map(|e| e.0[k]).collect();
            let excess: Vec<f64> = per_episode.iter().map(|e| e.1[k]).collect();
            let (rv, rs) = mean_and_std_error(&raw);
            let (ev, es) = mean_and_std_error(&excess);
            CurvePoint {
                length: m,
                risk: RiskReport {
                    value: rv,
                    std_error: rs,
                    method: RiskMethod::MonteCarlo,
                    episodes,
                },
                excess: RiskReport {
                    value: ev,
                    std_error: es,
                    method: RiskMethod::MonteCarlo,
                    episodes,
                },
            }
        })
        .collect()
}

pub fn monte_carlo_curve(
    theta: &Theta,
    ctx: &RiskContext,
    lengths: &[usize],
    episodes: usize,
    rng: &Rng,
) -> Result<Vec<CurvePoint>> {
    let max_len = check_lengths(lengths)?;
    if episodes == 0 {
        return Err(IclError::EmptySample);
    }
    let sigma = ctx.cov().matrix();
    let per_episode = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let prompt = sample_prompt(&ctx.tasks, &ctx.covariates, max_len, &rng.child(i as u64))?;
            let ai = inverse_general(prompt.task())?;
            let limit_pred = predict_from_covariance(theta, &(&ai * sigma), prompt.query());
            let limit_loss = ctx.weighted_norm_sq(&(limit_pred - prompt.target()));
            let covs = prefix_label_covariances(prompt.xs(), prompt.ys(), lengths);
            let raw: Vec<f64> = covs
                .iter()
                .map(|c| ctx.weighted_norm_sq(&(predict_from_covariance(theta, c, prompt.query()) - prompt.target())))
                .collect();
            let excess = raw.iter().map(|r| r - limit_loss).collect();
            Ok((raw, excess))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_curve(lengths, &per_episode))
}
