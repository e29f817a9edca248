//! Spectral Galerkin discretization of `−(a u′)′ + V u = f` on `[0, 1]` with
//! homogeneous Dirichlet data, random coefficient fields and H¹ metrics.
//!
//! Everything lives in the orthonormal sine basis `φ_k(x) = √2 sin(kπx)`, so the
//! mass matrix is the identity and the H¹ norm is diagonal in coefficients.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{IclError, Result};
use rayon::prelude::*;

use crate::numerics::{gauss_legendre, mean_and_std_error, symmetrize, Mat, Rng, SpdMatrix, Vector};
use crate::risk::{check_lengths, prefix_label_covariances, RiskMethod, RiskReport};
use crate::tasks::{Prompt, TaskDistribution, TaskFamily};
use crate::transformer::{predict_from_covariance, Theta};

const QUAD_POINTS_PER_PANEL: usize = 4;
const MIN_PANELS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SineBasis {
    modes: usize,
}

impl SineBasis {
    pub fn new(modes: usize) -> Self {
        assert!(modes >= 1, "basis needs at least one mode");
        Self { modes }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// `φ_k(x)` for `k ≥ 1`.
    pub fn value(k: usize, x: f64) -> f64 {
        SQRT_2 * (k as f64 * PI * x).sin()
    }

    pub fn derivative(k: usize, x: f64) -> f64 {
        let w = k as f64 * PI;
        SQRT_2 * w * (w * x).cos()
    }

    /// Default panel count for quadrature at this resolution.
    pub fn default_panels(&self) -> usize {
        MIN_PANELS.max(8 * self.modes)
    }
}

/// Coefficients of a function in the sine basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    pub coefficients: Vec<f64>,
}

impl FieldVector {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    pub fn zeros(modes: usize) -> Self {
        Self::new(vec![0.0; modes])
    }

    pub fn from_vector(v: &Vector) -> Self {
        Self::new(v.iter().cloned().collect())
    }

    pub fn modes(&self) -> usize {
        self.coefficients.len()
    }

    pub fn as_vector(&self) -> Vector {
        Vector::from_column_slice(&self.coefficients)
    }

    /// Zero-padded or truncated copy with `modes` coefficients.
    pub fn resized(&self, modes: usize) -> FieldVector {
        let mut c = self.coefficients.clone();
        c.resize(modes, 0.0);
        FieldVector::new(c)
    }

    /// `Σ x_k φ_k(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c * SineBasis::value(i + 1, x))
            .sum()
    }

    pub fn eval_derivative(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c * SineBasis::derivative(i + 1, x))
            .sum()
    }
}

/// Composite Gauss–Legendre rule on `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn composite(panels: usize) -> Self {
        assert!(panels >= 1);
        let (gx, gw) = gauss_legendre(QUAD_POINTS_PER_PANEL);
        let h = 1.0 / panels as f64;
        let mut nodes = Vec::with_capacity(panels * QUAD_POINTS_PER_PANEL);
        let mut weights = Vec::with_capacity(panels * QUAD_POINTS_PER_PANEL);
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (x, w) in gx.iter().zip(&gw) {
                nodes.push(mid + 0.5 * h * x);
                weights.push(0.5 * h * w);
            }
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Basis tables on a quadrature grid.
#[derive(Clone, Debug)]
pub struct GalerkinGrid {
    basis: SineBasis,
    quad: Quadrature,
    // Sine values for at least `basis.modes()` modes; extra rows serve field series.
    sines: Mat,
    dphi: Mat,
}

impl GalerkinGrid {
    pub fn new(basis: SineBasis, panels: usize) -> Self {
        Self::with_field_modes(basis, panels, basis.modes())
    }

    pub fn with_field_modes(basis: SineBasis, panels: usize, field_modes: usize) -> Self {
        let quad = Quadrature::composite(panels);
        let sines = sine_table(basis.modes().max(field_modes), &quad.nodes);
        let dphi = Mat::from_fn(basis.modes(), quad.len(), |k, q| {
            SineBasis::derivative(k + 1, quad.nodes[q])
        });
        Self {
            basis,
            quad,
            sines,
            dphi,
        }
    }

    fn phi(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.sines.rows(0, self.basis.modes())
    }

    pub fn with_default_panels(basis: SineBasis) -> Self {
        Self::new(basis, basis.default_panels())
    }

    pub fn basis(&self) -> SineBasis {
        self.basis
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    /// Sine series with the given coefficients evaluated at every node.
    pub fn series_values(&self, coefficients: &[f64]) -> Vector {
        let modes = coefficients.len();
        if modes <= self.sines.nrows() {
            let c = Vector::from_column_slice(coefficients);
            return self.sines.rows(0, modes).tr_mul(&c);
        }
        Vector::from_iterator(
            self.quad.len(),
            self.quad.nodes.iter().map(|x| {
                coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * SineBasis::value(i + 1, *x))
                    .sum()
            }),
        )
    }
}

fn sine_table(modes: usize, nodes: &[f64]) -> Mat {
    Mat::from_fn(modes, nodes.len(), |k, q| SineBasis::value(k + 1, nodes[q]))
}

/// Gaussian random field `N(0, amplitude (−Δ + α)^{−β})` in the sine eigenbasis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub amplitude: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GrfSpec {
    /// Unit variance in every mode.
    pub fn white_noise() -> Self {
        Self {
            amplitude: 1.0,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    /// `σ_k² = amplitude (k²π² + α)^{−β}`, `k ≥ 1`.
    pub fn variance(&self, k: usize) -> f64 {
        let kk = k as f64 * PI;
        self.amplitude * (kk * kk + self.alpha).powf(-self.beta)
    }

    fn validate_smooth(&self) -> Result<()> {
        if !(self.beta > 0.5) || self.amplitude < 0.0 || !(PI * PI + self.alpha > 0.0) {
            return Err(IclError::InvalidArgument(format!(
                "random field needs beta > 1/2, amplitude >= 0 and pi^2 + alpha > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn sample_grf(spec: &GrfSpec, modes: usize, rng: &mut Rng) -> FieldVector {
    FieldVector::new(
        (1..=modes)
            .map(|k| spec.variance(k).sqrt() * rng.standard_normal())
            .collect(),
    )
}

/// Law of one PDE coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientLaw {
    Constant {
        value: f64,
    },
    /// A constant drawn from `U[lo, hi]` per task.
    UniformConstant {
        lo: f64,
        hi: f64,
    },
    /// `scale · exp(g)` with `g` a Gaussian random field.
    LogGaussian {
        scale: f64,
        field: GrfSpec,
    },
}

/// One realized coefficient.
#[derive(Clone, Debug, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    LogGaussian { scale: f64, log_field: FieldVector },
}

impl Coefficient {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::LogGaussian { scale, log_field } => scale * log_field.eval(x).exp(),
        }
    }

    pub fn grid_values(&self, grid: &GalerkinGrid) -> Vector {
        match self {
            Coefficient::Constant(c) => Vector::from_element(grid.quad.len(), *c),
            Coefficient::LogGaussian { scale, log_field } => {
                grid.series_values(&log_field.coefficients).map(|g| scale * g.exp())
            }
        }
    }
}

impl CoefficientLaw {
    fn validate(&self) -> Result<()> {
        match self {
            CoefficientLaw::Constant { value } if !value.is_finite() => {
                Err(IclError::InvalidArgument("non-finite coefficient".into()))
            }
            CoefficientLaw::UniformConstant { lo, hi } if !(lo <= hi) => Err(IclError::InvalidArgument(format!(
                "invalid coefficient interval [{lo}, {hi}]"
            ))),
            CoefficientLaw::LogGaussian { scale, field } => {
                if !(*scale > 0.0) {
                    return Err(IclError::NotElliptic);
                }
                field.validate_smooth()
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, field_modes: usize, rng: &mut Rng) -> Coefficient {
        match self {
            CoefficientLaw::Constant { value } => Coefficient::Constant(*value),
            CoefficientLaw::UniformConstant { lo, hi } => Coefficient::Constant(rng.uniform(*lo, *hi)),
            CoefficientLaw::LogGaussian { scale, field } => Coefficient::LogGaussian {
                scale: *scale,
                log_field: sample_grf(field, field_modes, rng),
            },
        }
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, CoefficientLaw::LogGaussian { .. })
    }
}

/// `A_jk = ∫ a φⱼ′φ_k′ + ∫ V φⱼφ_k` from coefficient values on the grid nodes.
pub fn assemble_from_values(a: &Vector, v: &Vector, grid: &GalerkinGrid) -> Result<Mat> {
    let q = grid.quad.len();
    if a.len() != q || v.len() != q {
        return Err(IclError::DimensionMismatch("coefficient grid size".into()));
    }
    if a.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(IclError::NotElliptic);
    }
    if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(IclError::NotElliptic);
    }
    let w = Vector::from_column_slice(&grid.quad.weights);
    let mut da = grid.dphi.clone();
    let mut pv = grid.phi().into_owned();
    for j in 0..q {
        da.column_mut(j).scale_mut(w[j] * a[j]);
        pv.column_mut(j).scale_mut(w[j] * v[j]);
    }
    let stiff = &da * grid.dphi.transpose() + &pv * grid.phi().transpose();
    Ok(symmetrize(&stiff))
}

/// Stiffness matrix for pointwise coefficient functions.
pub fn assemble_stiffness(
    a: impl Fn(f64) -> f64,
    v: impl Fn(f64) -> f64,
    basis: SineBasis,
    panels: usize,
) -> Result<Mat> {
    let grid = GalerkinGrid::new(basis, panels);
    let av = Vector::from_iterator(grid.quad.len(), grid.quad.nodes.iter().map(|x| a(*x)));
    let vv = Vector::from_iterator(grid.quad.len(), grid.quad.nodes.iter().map(|x| v(*x)));
    assemble_from_values(&av, &vv, &grid)
}

/// Project a function onto the first `basis.modes()` sine modes.
pub fn encode(f: impl Fn(f64) -> f64, basis: SineBasis) -> FieldVector {
    let grid = GalerkinGrid::with_default_panels(basis);
    let fv = Vector::from_iterator(grid.quad.len(), grid.quad.nodes.iter().map(|x| f(*x)));
    let w = Vector::from_column_slice(&grid.quad.weights);
    FieldVector::from_vector(&(grid.phi() * fv.component_mul(&w)))
}

/// Decoder `x ↦ Σ x_k φ_k` as a pointwise evaluator.
pub fn decode(x: &FieldVector) -> impl Fn(f64) -> f64 + '_ {
    move |t| x.eval(t)
}

/// `Σ x_k² (1 + k²π²)`.
pub fn h1_norm_sq(x: &FieldVector) -> f64 {
    x.coefficients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let k = (i + 1) as f64 * PI;
            c * c * (1.0 + k * k)
        })
        .sum()
}

/// H¹ norm of the difference of two fields of possibly different resolution.
pub fn h1_distance_sq(a: &FieldVector, b: &FieldVector) -> f64 {
    let modes = a.modes().max(b.modes());
    let diff: Vec<f64> = (0..modes)
        .map(|i| a.coefficients.get(i).copied().unwrap_or(0.0) - b.coefficients.get(i).copied().unwrap_or(0.0))
        .collect();
    h1_norm_sq(&FieldVector::new(diff))
}

/// Largest observed `‖g‖²_{H¹} / ‖g‖²_{L²}` over random coefficient vectors.
pub fn norm_equivalence_ratio(modes: usize, samples: usize, rng: &mut Rng) -> f64 {
    (0..samples)
        .map(|_| {
            let x = FieldVector::from_vector(&rng.normal_vector(modes));
            let l2: f64 = x.coefficients.iter().map(|c| c * c).sum();
            h1_norm_sq(&x) / l2
        })
        .fold(0.0, f64::max)
}

/// One realized elliptic operator.
#[derive(Clone, Debug)]
pub struct EllipticTask {
    pub a: Coefficient,
    pub v: Coefficient,
    pub stiffness: Mat,
}

impl EllipticTask {
    /// Stiffness on another grid from the same realized coefficients.
    pub fn stiffness_on(&self, grid: &GalerkinGrid) -> Result<Mat> {
        assemble_from_values(&self.a.grid_values(grid), &self.v.grid_values(grid), grid)
    }
}

/// Random elliptic operators discretized in `dim` sine modes.
#[derive(Clone, Debug)]
pub struct PdeTaskSpec {
    a: CoefficientLaw,
    v: CoefficientLaw,
    field_modes: usize,
    grid: Arc<GalerkinGrid>,
}

impl PdeTaskSpec {
    /// Coefficient fields are truncated at `4 · dim` modes.
    pub fn new(a: CoefficientLaw, v: CoefficientLaw, dim: usize) -> Result<Self> {
        Self::with_resolution(a, v, dim, 4 * dim, SineBasis::new(dim).default_panels())
    }

    pub fn with_resolution(
        a: CoefficientLaw,
        v: CoefficientLaw,
        dim: usize,
        field_modes: usize,
        panels: usize,
    ) -> Result<Self> {
        if dim == 0 || field_modes == 0 || panels == 0 {
            return Err(IclError::InvalidArgument("pde resolution must be positive".into()));
        }
        a.validate()?;
        v.validate()?;
        match a {
            CoefficientLaw::Constant { value } if !(value > 0.0) => return Err(IclError::NotElliptic),
            CoefficientLaw::UniformConstant { lo, .. } if !(lo > 0.0) => return Err(IclError::NotElliptic),
            _ => {}
        }
        match v {
            CoefficientLaw::Constant { value } if value < 0.0 => return Err(IclError::NotElliptic),
            CoefficientLaw::UniformConstant { lo, .. } if lo < 0.0 => return Err(IclError::NotElliptic),
            _ => {}
        }
        Ok(Self {
            a,
            v,
            field_modes,
            grid: Arc::new(GalerkinGrid::with_field_modes(SineBasis::new(dim), panels, field_modes)),
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.basis().modes()
    }

    pub fn field_modes(&self) -> usize {
        self.field_modes
    }

    pub fn a_law(&self) -> &CoefficientLaw {
        &self.a
    }

    pub fn v_law(&self) -> &CoefficientLaw {
        &self.v
    }

    pub fn grid(&self) -> &GalerkinGrid {
        &self.grid
    }

    /// Both coefficients constant, so every stiffness matrix is diagonal.
    pub fn is_diagonal_family(&self) -> bool {
        self.a.is_constant() && self.v.is_constant()
    }

    pub fn sample_task(&self, rng: &mut Rng) -> EllipticTask {
        let a = self.a.sample(self.field_modes, rng);
        let v = self.v.sample(self.field_modes, rng);
        let stiffness = assemble_from_values(&a.grid_values(&self.grid), &v.grid_values(&self.grid), &self.grid)
            .expect("validated coefficient laws give elliptic operators");
        EllipticTask { a, v, stiffness }
    }

    pub fn sample_stiffness(&self, rng: &mut Rng) -> Mat {
        self.sample_task(rng).stiffness
    }
}

/// Wrap a PDE family as a generic task distribution.
pub fn pde_task_distribution(spec: PdeTaskSpec) -> Result<TaskDistribution> {
    let d = spec.dim();
    TaskDistribution::new(d, TaskFamily::Pde(Box::new(spec)))
}

/// Galerkin solve of `A u = f` at `ref_modes` using the task's coefficients.
pub fn reference_solution(task: &EllipticTask, f: &FieldVector, grid: &GalerkinGrid) -> Result<FieldVector> {
    let stiff = task.stiffness_on(grid)?;
    solve_galerkin(&stiff, &f.resized(grid.basis().modes()))
}

pub fn solve_galerkin(stiffness: &Mat, f: &FieldVector) -> Result<FieldVector> {
    let spd = SpdMatrix::new(stiffness.clone())?;
    let rhs = Mat::from_column_slice(f.modes(), 1, &f.coefficients);
    let u = crate::numerics::solve_spd(&spd, &rhs)?;
    Ok(FieldVector::new(u.column(0).iter().cloned().collect()))
}

/// Mean relative squared H¹ error of the `d`-mode Galerkin solution against
/// `reference`, over tasks from `sampler` and white-noise sources. Trial `t`
/// uses `rng.child(t)`, so different `d` see the same problems.
pub fn discretization_gap(
    sampler: &PdeTaskSpec,
    d: usize,
    reference: &GalerkinGrid,
    trials: usize,
    rng: &Rng,
) -> Result<f64> {
    let grid = GalerkinGrid::with_default_panels(SineBasis::new(d));
    let mut sum = 0.0;
    for t in 0..trials {
        let mut r = rng.child(t as u64);
        let task = sampler.sample_task(&mut r);
        let f = sample_grf(&GrfSpec::white_noise(), reference.basis().modes(), &mut r);
        let u_ref = reference_solution(&task, &f, reference)?;
        let u = solve_galerkin(&task.stiffness_on(&grid)?, &f.resized(d))?;
        sum += h1_distance_sq(&u, &u_ref) / h1_norm_sq(&u_ref);
    }
    Ok(sum / trials.max(1) as f64)
}

/// A PDE episode: the learner prompt plus what is needed to score it against a
/// high-resolution solution.
#[derive(Clone, Debug)]
pub struct PdeEpisode {
    pub prompt: Prompt,
    pub task: EllipticTask,
    pub reference: FieldVector,
}

/// Sample a task, white-noise sources at `reference.modes()` resolution, and
/// learner-resolution labels. Uses the same stream layout as `sample_prompt`.
pub fn sample_pde_episode(spec: &PdeTaskSpec, reference: &GalerkinGrid, n: usize, rng: &Rng) -> Result<PdeEpisode> {
    let d = spec.dim();
    let mut head = rng.child(0);
    let task = spec.sample_task(&mut head);
    let source = sample_grf(&GrfSpec::white_noise(), reference.basis().modes(), &mut head);
    let mut ctx = rng.child(1);
    let xs = Mat::from_fn(n, d, |_, _| ctx.standard_normal()).transpose();
    let query = source.resized(d).as_vector();
    let prompt = Prompt::from_task(task.stiffness.clone(), xs, query)?;
    let reference = reference_solution(&task, &source, reference)?;
    Ok(PdeEpisode {
        prompt,
        task,
        reference,
    })
}

/// Squared H¹ errors against the reference at one prompt length, with the
/// excess over the same episodes' limiting predictor `C = A⁻¹`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeCurvePoint {
    pub length: usize,
    pub error: RiskReport,
    pub excess: RiskReport,
    /// Mean of `‖û − u_ref‖_{H¹} / ‖u_ref‖_{H¹}`.
    pub relative_h1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdeCurve {
    pub points: Vec<PdeCurvePoint>,
    /// Error of the limiting predictor, i.e. the discretization floor for this θ.
    pub limit_error: RiskReport,
    pub reference_norm_sq: RiskReport,
}

pub fn pde_monte_carlo_curve(
    theta: &Theta,
    spec: &PdeTaskSpec,
    reference: &GalerkinGrid,
    lengths: &[usize],
    episodes: usize,
    rng: &Rng,
) -> Result<PdeCurve> {
    let max_len = check_lengths(lengths)?;
    if episodes == 0 {
        return Err(IclError::EmptySample);
    }
    let per_episode = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep = sample_pde_episode(spec, reference, max_len, &rng.child(i as u64))?;
            let ai = crate::numerics::inverse_general(ep.prompt.task())?;
            let score = |c: &Mat| {
                let pred = FieldVector::from_vector(&predict_from_covariance(theta, c, ep.prompt.query()));
                h1_distance_sq(&pred, &ep.reference)
            };
            let limit = score(&ai);
            let errors: Vec<f64> = prefix_label_covariances(ep.prompt.xs(), ep.prompt.ys(), lengths)
                .iter()
                .map(score)
                .collect();
            Ok((errors, limit, h1_norm_sq(&ep.reference)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = |values: &[f64]| {
        let (value, std_error) = mean_and_std_error(values);
        RiskReport {
            value,
            std_error,
            method: RiskMethod::MonteCarlo,
            episodes,
        }
    };
    let limits: Vec<f64> = per_episode.iter().map(|e| e.1).collect();
    let norms: Vec<f64> = per_episode.iter().map(|e| e.2).collect();
    let points = lengths
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let errs: Vec<f64> = per_episode.iter().map(|e| e.0[k]).collect();
            let excess: Vec<f64> = per_episode.iter().map(|e| e.0[k] - e.1).collect();
            let rel: Vec<f64> = per_episode.iter().map(|e| (e.0[k] / e.2).sqrt()).collect();
            PdeCurvePoint {
                length: m,
                error: report(&errs),
                excess: report(&excess),
                relative_h1: mean_and_std_error(&rel).0,
            }
        })
        .collect();
    Ok(PdeCurve {
        points,
        limit_error: report(&limits),
        reference_norm_sq: report(&norms),
    })
}
