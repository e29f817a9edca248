//! Task and covariate distributions, prompt sampling and the embedding matrix.

use crate::error::{IclError, Result};
use crate::numerics::{gaussian_vector, haar_orthogonal, max_abs, spectral_norm, Mat, Rng, SpdMatrix, Vector};
use crate::pde::PdeTaskSpec;

/// Draws used to certify the norm bounds of a family at construction.
pub const CERTIFY_DRAWS: usize = 1000;
const CERTIFY_SEED: u64 = 0x00C0_FFEE;

#[derive(Clone, Debug)]
pub enum Rotation {
    /// A new Haar rotation for every task.
    Fresh,
    /// One shared eigenbasis for the whole family.
    Fixed(Mat),
}

#[derive(Clone, Debug)]
pub enum TaskFamily {
    /// `A = U diag(λ) Uᵀ` with `λᵢ ~ U[a, b]` iid.
    RotatedDiagonal { a: f64, b: f64, rotation: Rotation },
    /// `A = c I` with `c ~ U[a, b]`.
    ConstantMultiple { a: f64, b: f64 },
    /// Uniform choice from a finite list.
    Atomic(Vec<Mat>),
    /// Galerkin stiffness matrices of random elliptic operators.
    Pde(Box<PdeTaskSpec>),
}

/// Law of the task matrix `A` with certified bounds `‖A⁻¹‖ ≤ c_A`, `‖A‖ ≤ C_A`.
#[derive(Clone, Debug)]
pub struct TaskDistribution {
    family: TaskFamily,
    dim: usize,
    inv_bound: f64,
    norm_bound: f64,
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(IclError::InvalidArgument(format!(
            "invalid spectral interval [{a}, {b}]"
        )));
    }
    if a <= 0.0 && b >= 0.0 {
        return Err(IclError::NotUniformlyInvertible);
    }
    Ok(())
}

fn interval_bounds(a: f64, b: f64) -> (f64, f64) {
    let lo = a.abs().min(b.abs());
    let hi = a.abs().max(b.abs());
    (1.0 / lo, hi)
}

impl TaskDistribution {
    pub fn new(dim: usize, family: TaskFamily) -> Result<Self> {
        if dim == 0 {
            return Err(IclError::InvalidArgument("dimension must be positive".into()));
        }
        let (inv_bound, norm_bound) = match &family {
            TaskFamily::RotatedDiagonal { a, b, rotation } => {
                check_interval(*a, *b)?;
                if let Rotation::Fixed(u) = rotation {
                    if u.nrows() != dim || u.ncols() != dim {
                        return Err(IclError::DimensionMismatch("rotation shape".into()));
                    }
                    if max_abs(&(u.transpose() * u - Mat::identity(dim, dim))) > 1e-10 {
                        return Err(IclError::InvalidArgument("fixed rotation is not orthogonal".into()));
                    }
                }
                interval_bounds(*a, *b)
            }
            TaskFamily::ConstantMultiple { a, b } => {
                check_interval(*a, *b)?;
                interval_bounds(*a, *b)
            }
            TaskFamily::Atomic(atoms) => {
                if atoms.is_empty() {
                    return Err(IclError::EmptySample);
                }
                let mut inv = 0.0_f64;
                let mut norm = 0.0_f64;
                for m in atoms {
                    if m.nrows() != dim || m.ncols() != dim {
                        return Err(IclError::DimensionMismatch("atom shape".into()));
                    }
                    let sv = m.clone().svd(false, false).singular_values;
                    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                    if !(smin > 0.0) || !m.iter().all(|v| v.is_finite()) {
                        return Err(IclError::NotUniformlyInvertible);
                    }
                    inv = inv.max(1.0 / smin);
                    norm = norm.max(sv.iter().cloned().fold(0.0, f64::max));
                }
                (inv, norm)
            }
            TaskFamily::Pde(spec) => {
                if spec.dim() != dim {
                    return Err(IclError::DimensionMismatch("pde basis size".into()));
                }
                (f64::INFINITY, f64::INFINITY)
            }
        };
        let mut dist = Self {
            family,
            dim,
            inv_bound,
            norm_bound,
        };
        dist.certify()?;
        Ok(dist)
    }

    /// Check the bounds on a fixed-seed sample; for PDE families the bounds
    /// are the sample extremes.
    fn certify(&mut self) -> Result<()> {
        let empirical = matches!(self.family, TaskFamily::Pde(_));
        let rng = Rng::new(CERTIFY_SEED, 0);
        let mut inv_max = 0.0_f64;
        let mut norm_max = 0.0_f64;
        for i in 0..CERTIFY_DRAWS {
            let a = self.sample(&mut rng.child(i as u64));
            let sv = a.svd(false, false).singular_values;
            let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            let smax = sv.iter().cloned().fold(0.0, f64::max);
            if !(smin > 0.0) {
                return Err(IclError::NotUniformlyInvertible);
            }
            inv_max = inv_max.max(1.0 / smin);
            norm_max = norm_max.max(smax);
        }
        if empirical {
            self.inv_bound = inv_max;
            self.norm_bound = norm_max;
        } else {
            let slack = 1.0 + 1e-9;
            if inv_max > self.inv_bound * slack || norm_max > self.norm_bound * slack {
                return Err(IclError::NotUniformlyInvertible);
            }
        }
        Ok(())
    }

    pub fn rotated_diagonal(dim: usize, a: f64, b: f64, rotation: Rotation) -> Result<Self> {
        Self::new(dim, TaskFamily::RotatedDiagonal { a, b, rotation })
    }

    pub fn constant_multiple(dim: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(dim, TaskFamily::ConstantMultiple { a, b })
    }

    pub fn atomic(atoms: Vec<Mat>) -> Result<Self> {
        let dim = atoms.first().map(|m| m.nrows()).ok_or(IclError::EmptySample)?;
        Self::new(dim, TaskFamily::Atomic(atoms))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &TaskFamily {
        &self.family
    }

    /// `c_A`, a bound on `‖A⁻¹‖_op`.
    pub fn inv_bound(&self) -> f64 {
        self.inv_bound
    }

    /// `C_A`, a bound on `‖A‖_op`.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn sample(&self, rng: &mut Rng) -> Mat {
        let d = self.dim;
        match &self.family {
            TaskFamily::RotatedDiagonal { a, b, rotation } => {
                let lambdas = Vector::from_fn(d, |_, _| rng.uniform(*a, *b));
                let u = match rotation {
                    Rotation::Fresh => haar_orthogonal(rng, d),
                    Rotation::Fixed(u) => u.clone(),
                };
                &u * Mat::from_diagonal(&lambdas) * u.transpose()
            }
            TaskFamily::ConstantMultiple { a, b } => Mat::identity(d, d) * rng.uniform(*a, *b),
            TaskFamily::Atomic(atoms) => atoms[rng.index(atoms.len())].clone(),
            TaskFamily::Pde(spec) => spec.sample_stiffness(rng),
        }
    }

    /// Exact quadrature over the task law when one is available: weighted atoms
    /// summing to one.
    pub fn quadrature(&self, nodes: usize) -> Option<Vec<(Mat, f64)>> {
        let d = self.dim;
        match &self.family {
            TaskFamily::Atomic(atoms) => {
                let w = 1.0 / atoms.len() as f64;
                Some(atoms.iter().map(|m| (m.clone(), w)).collect())
            }
            TaskFamily::ConstantMultiple { a, b } => Some(scalar_quadrature(d, *a, *b, nodes)),
            TaskFamily::RotatedDiagonal { a, b, .. } if a == b => Some(vec![(Mat::identity(d, d) * *a, 1.0)]),
            _ => None,
        }
    }
}

fn scalar_quadrature(d: usize, a: f64, b: f64, nodes: usize) -> Vec<(Mat, f64)> {
    if a == b {
        return vec![(Mat::identity(d, d) * a, 1.0)];
    }
    let (xs, ws) = crate::numerics::gauss_legendre_interval(nodes, a, b);
    xs.iter()
        .zip(&ws)
        .map(|(c, w)| (Mat::identity(d, d) * *c, w / (b - a)))
        .collect()
}

/// Draw one task.
pub fn sample_task(dist: &TaskDistribution, rng: &mut Rng) -> Mat {
    dist.sample(rng)
}

/// Zero-mean Gaussian covariate law.
#[derive(Clone, Debug)]
pub struct CovariateDistribution {
    cov: SpdMatrix,
}

impl CovariateDistribution {
    pub fn new(cov: SpdMatrix) -> Self {
        Self { cov }
    }

    pub fn standard(d: usize) -> Self {
        Self::new(SpdMatrix::identity(d))
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector {
        gaussian_vector(rng, &self.cov)
    }

    /// `n` draws as the columns of a `d × n` matrix.
    pub fn sample_columns(&self, n: usize, rng: &mut Rng) -> Mat {
        let d = self.dim();
        let z = rng.normal_matrix(n, d).transpose();
        self.cov.chol() * z
    }
}

/// `(1 − ρ) I + ρ 𝟙𝟙ᵀ`.
pub fn equal_correlated_cov(d: usize, rho: f64) -> Result<SpdMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(IclError::NotPositiveDefinite);
    }
    let m = Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    SpdMatrix::new(m)
}

/// One in-context episode. Covariates and labels are stored as matrix columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    xs: Mat,
    ys: Mat,
    query: Vector,
    target: Vector,
    task: Mat,
}

impl Prompt {
    /// Label covariates and query by solving `A y = x` with a pivoted LU.
    pub fn from_task(task: Mat, xs: Mat, query: Vector) -> Result<Self> {
        let d = task.nrows();
        if task.ncols() != d || xs.nrows() != d || query.len() != d {
            return Err(IclError::DimensionMismatch("prompt shapes".into()));
        }
        if xs.ncols() == 0 {
            return Err(IclError::InvalidArgument("prompt length must be at least 1".into()));
        }
        let lu = task.clone().lu();
        let ys = lu.solve(&xs).ok_or(IclError::Singular)?;
        let target = lu.solve(&query).ok_or(IclError::Singular)?;
        Ok(Self {
            xs,
            ys,
            query,
            target,
            task,
        })
    }

    /// Assemble from precomputed parts; no consistency check.
    pub fn from_parts(task: Mat, xs: Mat, ys: Mat, query: Vector, target: Vector) -> Self {
        Self {
            xs,
            ys,
            query,
            target,
            task,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn len(&self) -> usize {
        self.xs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.ncols() == 0
    }

    pub fn xs(&self) -> &Mat {
        &self.xs
    }

    pub fn ys(&self) -> &Mat {
        &self.ys
    }

    pub fn query(&self) -> &Vector {
        &self.query
    }

    pub fn target(&self) -> &Vector {
        &self.target
    }

    pub fn task(&self) -> &Mat {
        &self.task
    }

    /// `Xₙ = (1/n) Σ xᵢxᵢᵀ`.
    pub fn empirical_covariance(&self) -> Mat {
        &self.xs * self.xs.transpose() / self.len() as f64
    }

    /// `C = (1/n) Σ yᵢxᵢᵀ = A⁻¹Xₙ`.
    pub fn label_covariance(&self) -> Mat {
        &self.ys * self.xs.transpose() / self.len() as f64
    }
}

/// Sample a prompt. The task and query use child stream 0 and the context uses
/// child stream 1, so a longer prompt from the same stream extends a shorter one.
pub fn sample_prompt(
    task_dist: &TaskDistribution,
    cov_dist: &CovariateDistribution,
    n: usize,
    rng: &Rng,
) -> Result<Prompt> {
    if n == 0 {
        return Err(IclError::InvalidArgument("prompt length must be at least 1".into()));
    }
    if task_dist.dim() != cov_dist.dim() {
        return Err(IclError::DimensionMismatch(
            "task and covariate dimensions differ".into(),
        ));
    }
    let mut head = rng.child(0);
    let task = task_dist.sample(&mut head);
    let query = cov_dist.sample(&mut head);
    let xs = cov_dist.sample_columns(n, &mut rng.child(1));
    Prompt::from_task(task, xs, query)
}

/// The `2d × (n+1)` stacked prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    z: Mat,
}

impl EmbeddingMatrix {
    pub fn new(z: Mat) -> Result<Self> {
        if !z.nrows().is_multiple_of(2) || z.nrows() == 0 || z.ncols() == 0 {
            return Err(IclError::DimensionMismatch(format!(
                "embedding must be 2d x T, got {}x{}",
                z.nrows(),
                z.ncols()
            )));
        }
        Ok(Self { z })
    }

    pub fn z(&self) -> &Mat {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.z.nrows() / 2
    }

    /// Number of context columns `n = T − 1`.
    pub fn context_len(&self) -> usize {
        self.z.ncols() - 1
    }

    /// Split back into `(xs, ys, query)`.
    pub fn blocks(&self) -> (Mat, Mat, Vector) {
        let d = self.dim();
        let n = self.context_len();
        let xs = self.z.view((0, 0), (d, n)).into_owned();
        let ys = self.z.view((d, 0), (d, n)).into_owned();
        let query = self.z.view((0, n), (d, 1)).column(0).into_owned();
        (xs, ys, query)
    }
}

pub fn embed(prompt: &Prompt) -> EmbeddingMatrix {
    let d = prompt.dim();
    let n = prompt.len();
    let mut z = Mat::zeros(2 * d, n + 1);
    z.view_mut((0, 0), (d, n)).copy_from(prompt.xs());
    z.view_mut((d, 0), (d, n)).copy_from(prompt.ys());
    z.view_mut((0, n), (d, 1)).copy_from(prompt.query());
    EmbeddingMatrix { z }
}

/// True when every task is diagonal in the basis `u` within `tol` relative.
pub fn diagonal_in_basis(tasks: &[Mat], u: &Mat, tol: f64) -> bool {
    tasks.iter().all(|a| {
        let m = u.transpose() * a * u;
        let scale = spectral_norm(a).max(f64::MIN_POSITIVE);
        let mut off = 0.0_f64;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    off = off.max(m[(i, j)].abs());
                }
            }
        }
        off <= tol * scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::eig_sym;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_correlated_examples() {
        let c = equal_correlated_cov(10, 0.0).unwrap();
        assert_eq!(c.matrix(), &Mat::identity(10, 10));
        let c = equal_correlated_cov(2, 0.5).unwrap();
        assert_eq!(c.matrix(), &Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
        let c = equal_correlated_cov(3, 0.9).unwrap();
        let (vals, _) = eig_sym(c.matrix()).unwrap();
        assert_abs_diff_eq!(vals[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[2], 2.8, epsilon = 1e-12);
        assert_eq!(equal_correlated_cov(3, 1.0).unwrap_err(), IclError::NotPositiveDefinite);
        assert_eq!(
            equal_correlated_cov(3, -0.1).unwrap_err(),
            IclError::NotPositiveDefinite
        );
    }

    #[test]
    fn constant_multiple_draws() {
        let dist = TaskDistribution::constant_multiple(3, 1.0, 2.0).unwrap();
        let mut rng = Rng::new(1, 0);
        for _ in 0..100 {
            let a = dist.sample(&mut rng);
            let c = a[(0, 0)];
            assert!((1.0..=2.0).contains(&c));
            assert_eq!(a, Mat::identity(3, 3) * c);
        }
    }

    #[test]
    fn degenerate_rotated_diagonal_is_identity() {
        let dist = TaskDistribution::rotated_diagonal(4, 1.0, 1.0, Rotation::Fresh).unwrap();
        let a = dist.sample(&mut Rng::new(2, 0));
        assert!(max_abs(&(a - Mat::identity(4, 4))) < 1e-12);
    }

    #[test]
    fn rotated_diagonal_norms_within_bounds() {
        let dist = TaskDistribution::rotated_diagonal(5, 1.0, 2.0, Rotation::Fresh).unwrap();
        assert_abs_diff_eq!(dist.inv_bound(), 1.0);
        assert_abs_diff_eq!(dist.norm_bound(), 2.0);
        let rng = Rng::new(3, 0);
        for i in 0..10_000 {
            let a = dist.sample(&mut rng.child(i));
            let norm = spectral_norm(&a);
            let inv_norm = spectral_norm(&a.clone().try_inverse().unwrap());
            assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&norm));
            assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&inv_norm));
        }
    }

    #[test]
    fn straddling_interval_is_rejected() {
        assert_eq!(
            TaskDistribution::constant_multiple(2, -1.0, 1.0).unwrap_err(),
            IclError::NotUniformlyInvertible
        );
        assert_eq!(
            TaskDistribution::rotated_diagonal(2, 0.0, 1.0, Rotation::Fresh).unwrap_err(),
            IclError::NotUniformlyInvertible
        );
    }

    #[test]
    fn fixed_rotation_family_is_simultaneously_diagonal() {
        let u = haar_orthogonal(&mut Rng::new(9, 9), 4);
        let dist = TaskDistribution::rotated_diagonal(4, 1.0, 2.0, Rotation::Fixed(u.clone())).unwrap();
        let rng = Rng::new(10, 0);
        let tasks: Vec<Mat> = (0..200).map(|i| dist.sample(&mut rng.child(i))).collect();
        assert!(diagonal_in_basis(&tasks, &u, 1e-12));
    }

    #[test]
    fn scalar_solve_label() {
        let p = Prompt::from_task(
            Mat::identity(2, 2) * 2.0,
            Mat::from_column_slice(2, 1, &[4.0, 0.0]),
            Vector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(p.ys().column(0).into_owned(), Vector::from_vec(vec![2.0, 0.0]));
    }

    #[test]
    fn prompt_is_reproducible() {
        let tasks = TaskDistribution::rotated_diagonal(1, 1.0, 2.0, Rotation::Fresh).unwrap();
        let cov = CovariateDistribution::standard(1);
        let a = sample_prompt(&tasks, &cov, 1, &Rng::new(4, 4)).unwrap();
        let b = sample_prompt(&tasks, &cov, 1, &Rng::new(4, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn longer_prompts_extend_shorter_ones() {
        let tasks = TaskDistribution::rotated_diagonal(3, 1.0, 2.0, Rotation::Fresh).unwrap();
        let cov = CovariateDistribution::standard(3);
        let rng = Rng::new(6, 1);
        let short = sample_prompt(&tasks, &cov, 4, &rng).unwrap();
        let long = sample_prompt(&tasks, &cov, 9, &rng).unwrap();
        assert_eq!(short.task(), long.task());
        assert_eq!(short.query(), long.query());
        assert_eq!(short.xs(), &long.xs().columns(0, 4).into_owned());
    }

    #[test]
    fn label_residuals_are_tiny() {
        let tasks = TaskDistribution::rotated_diagonal(10, 0.5, 3.0, Rotation::Fresh).unwrap();
        let cov = CovariateDistribution::new(equal_correlated_cov(10, 0.3).unwrap());
        let rng = Rng::new(7, 0);
        for i in 0..1000 {
            let p = sample_prompt(&tasks, &cov, 5, &rng.child(i)).unwrap();
            for j in 0..p.len() {
                let x = p.xs().column(j);
                let r = p.task() * p.ys().column(j) - x;
                assert!(r.norm() / x.norm() < 1e-12);
            }
            let r = p.task() * p.target() - p.query();
            assert!(r.norm() / p.query().norm() < 1e-12);
        }
    }

    #[test]
    fn embedding_layout() {
        let p = Prompt::from_task(
            Mat::from_element(1, 1, 2.0),
            Mat::from_element(1, 1, 3.0),
            Vector::from_element(1, 2.0),
        )
        .unwrap();
        let z = embed(&p);
        assert_eq!(z.z(), &Mat::from_row_slice(2, 2, &[3.0, 2.0, 1.5, 0.0]));
    }

    #[test]
    fn embedding_round_trip() {
        let tasks = TaskDistribution::rotated_diagonal(3, 1.0, 2.0, Rotation::Fresh).unwrap();
        let cov = CovariateDistribution::standard(3);
        let p = sample_prompt(&tasks, &cov, 7, &Rng::new(8, 0)).unwrap();
        let z = embed(&p);
        assert_eq!(z.z().nrows(), 6);
        assert_eq!(z.z().ncols(), 8);
        assert!(z.z().view((3, 7), (3, 1)).iter().all(|v| *v == 0.0));
        let (xs, ys, q) = z.blocks();
        assert_eq!(&xs, p.xs());
        assert_eq!(&ys, p.ys());
        assert_eq!(&q, p.query());
    }

    #[test]
    fn prompt_covariance_matches_numerics() {
        let tasks = TaskDistribution::constant_multiple(3, 1.0, 2.0).unwrap();
        let cov = CovariateDistribution::standard(3);
        let p = sample_prompt(&tasks, &cov, 12, &Rng::new(5, 5)).unwrap();
        let cols: Vec<Vector> = (0..12).map(|j| p.xs().column(j).into_owned()).collect();
        let xn = crate::numerics::empirical_covariance(&cols).unwrap();
        assert!(max_abs(&(xn.clone() - p.empirical_covariance())) < 1e-14);
        let c = p.task().clone().try_inverse().unwrap() * xn;
        assert!(max_abs(&(c - p.label_covariance())) < 1e-12);
    }
}
