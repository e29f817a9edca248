//! Task diversity: centralizers of task ratios, simultaneous diagonalization,
//! the limiting-minimizer test and a train/test verdict with evidence.

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{IclError, Result};
use crate::numerics::{
    eig_sym, is_symmetric, max_abs, nullspace, solve_general, spectral_norm, to_row_major, Mat, Rng, SpdMatrix, Vector,
    NULLSPACE_TOL,
};
use crate::risk::{limiting_risk_for_sample, task_terms, RiskContext, TaskSample};
use crate::tasks::{diagonal_in_basis, CovariateDistribution, Rotation, TaskDistribution, TaskFamily};
use crate::transformer::Theta;

pub const DEFAULT_PAIRS: usize = 32;
pub const DIAGONAL_TOL: f64 = 1e-8;
/// Tasks drawn when checking a family for a shared eigenbasis or scoring a witness.
pub const WITNESS_TASKS: usize = 256;
pub const WITNESS_TRAIN_MAX: f64 = 1e-8;
pub const WITNESS_TEST_MIN: f64 = 0.01;
/// Ratio of the largest to smallest eigenvalue of the witness `P`.
pub const WITNESS_SPREAD: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CentralizerReport {
    pub generators: usize,
    pub dimension: usize,
    pub basis: Vec<Mat>,
    pub trivial: bool,
    /// Nullspace dimension after each generator.
    pub dimension_trace: Vec<usize>,
}

impl CentralizerReport {
    pub fn to_json(&self) -> Value {
        json!({
            "generators": self.generators,
            "dimension": self.dimension,
            "trivial": self.trivial,
            "dimension_trace": self.dimension_trace,
            "basis": self.basis.iter().map(to_row_major).collect::<Vec<_>>(),
        })
    }
}

/// Rows of `I ⊗ S − Sᵀ ⊗ I`, acting on column-major `vec(M)` as `vec(SM − MS)`.
fn commutator_rows(s: &Mat) -> Mat {
    let d = s.nrows();
    let mut k = Mat::zeros(d * d, d * d);
    for j in 0..d {
        for i in 0..d {
            let row = j * d + i;
            // (SM)_{ij} = Σ_l S_il M_lj; (MS)_{ij} = Σ_l M_il S_lj.
            for l in 0..d {
                k[(row, j * d + l)] += s[(i, l)];
                k[(row, l * d + i)] -= s[(l, j)];
            }
        }
    }
    k
}

fn triangular_factor(m: Mat) -> Mat {
    let cols = m.ncols();
    let r = m.qr().r();
    if r.nrows() >= cols {
        return r.rows(0, cols).into_owned();
    }
    let mut padded = Mat::zeros(cols, cols);
    padded.view_mut((0, 0), (r.nrows(), cols)).copy_from(&r);
    padded
}

/// Joint commutant of the generators by singular-value thresholding.
pub fn centralizer(generators: &[Mat], tol: f64) -> Result<CentralizerReport> {
    let first = generators.first().ok_or(IclError::EmptySample)?;
    let d = first.nrows();
    let dd = d * d;
    let mut stacked: Option<Mat> = None;
    let mut trace = Vec::with_capacity(generators.len());
    let mut basis_mat = Mat::identity(dd, dd);
    for s in generators {
        if s.nrows() != d || s.ncols() != d {
            return Err(IclError::DimensionMismatch("generators of differing shape".into()));
        }
        let rows = commutator_rows(s);
        // Compress the stack to a square triangular factor with the same singular values.
        let next = match stacked.take() {
            None => rows,
            Some(r) => {
                let mut both = Mat::zeros(2 * dd, dd);
                both.view_mut((0, 0), (dd, dd)).copy_from(&r);
                both.view_mut((dd, 0), (dd, dd)).copy_from(&rows);
                both
            }
        };
        let r = triangular_factor(next);
        basis_mat = nullspace(&r, tol);
        trace.push(basis_mat.ncols());
        stacked = Some(r);
    }
    let basis: Vec<Mat> = (0..basis_mat.ncols())
        .map(|c| Mat::from_column_slice(d, d, basis_mat.column(c).as_slice()))
        .collect();
    let trivial = basis.len() == 1 && {
        let b = &basis[0];
        let scalar = Mat::identity(d, d) * (b.trace() / d as f64);
        max_abs(&(b - &scalar)) <= tol.max(1e-12) * max_abs(b).max(f64::MIN_POSITIVE) && b.trace() != 0.0
    };
    Ok(CentralizerReport {
        generators: generators.len(),
        dimension: basis.len(),
        basis,
        trivial,
        dimension_trace: trace,
    })
}

/// `A₁A₂⁻¹` for independent task pairs; pair `i` uses child stream `i`.
pub fn sample_generators(dist: &TaskDistribution, pairs: usize, rng: &Rng) -> Result<Vec<Mat>> {
    if pairs == 0 {
        return Err(IclError::InvalidArgument("need at least one pair".into()));
    }
    (0..pairs)
        .into_par_iter()
        .map(|i| {
            let pair = rng.child(i as u64);
            let a1 = dist.sample(&mut pair.child(0));
            let a2 = dist.sample(&mut pair.child(1));
            // A₁A₂⁻¹ = (A₂⁻ᵀA₁ᵀ)ᵀ.
            Ok(solve_general(&a2.transpose(), &a1.transpose())?.transpose())
        })
        .collect()
}

fn min_gap(values: &Vector) -> f64 {
    values
        .as_slice()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// A shared orthogonal eigenbasis of symmetric tasks, if one exists.
pub fn simultaneously_diagonalizable(tasks: &[Mat], tol: f64) -> Result<Option<Mat>> {
    if tasks.is_empty() {
        return Err(IclError::EmptySample);
    }
    let mut best: Option<(f64, Mat)> = None;
    for a in tasks {
        if !is_symmetric(a, 1e-10) {
            return Err(IclError::NotSymmetric);
        }
        let (values, vectors) = eig_sym(a)?;
        let scale = spectral_norm(a).max(f64::MIN_POSITIVE);
        let gap = if values.len() > 1 {
            min_gap(&values) / scale
        } else {
            f64::INFINITY
        };
        if best.as_ref().is_none_or(|(g, _)| gap > *g) {
            best = Some((gap, vectors));
        }
    }
    let (_, u) = best.expect("nonempty");
    if diagonal_in_basis(tasks, &u, tol) {
        return Ok(Some(u));
    }
    // A generic combination of commuting symmetric matrices separates eigenspaces
    // that every single task leaves degenerate.
    let d = tasks[0].nrows();
    let mut combo = Mat::zeros(d, d);
    for (i, a) in tasks.iter().enumerate() {
        let w = 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
        combo += a * (w / spectral_norm(a).max(f64::MIN_POSITIVE));
    }
    let (_, u) = eig_sym(&crate::numerics::symmetrize(&combo))?;
    Ok(diagonal_in_basis(tasks, &u, tol).then_some(u))
}

/// `max_A ‖P Ai Σ Q − Ai‖_F / ‖Ai‖_F ≤ tol`.
pub fn is_limiting_minimizer(theta: &Theta, tasks: &[Mat], cov: &SpdMatrix, tol: f64) -> Result<bool> {
    let mut worst = 0.0_f64;
    for a in tasks {
        let ai = crate::numerics::inverse_general(a)?;
        let r = &theta.p * &ai * cov.matrix() * &theta.q - &ai;
        worst = worst.max(r.norm() / ai.norm());
    }
    Ok(worst <= tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictKind {
    DiverseBySupport,
    DiverseByCentralizer,
    NotDiverse,
    Undetermined,
}

impl VerdictKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VerdictKind::DiverseBySupport => "diverse_by_support",
            VerdictKind::DiverseByCentralizer => "diverse_by_centralizer",
            VerdictKind::NotDiverse => "not_diverse",
            VerdictKind::Undetermined => "undetermined",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub theta: Theta,
    pub train_limiting_risk: f64,
    pub test_limiting_risk: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityVerdict {
    pub verdict: VerdictKind,
    pub centralizer: CentralizerReport,
    pub support_rule: Option<String>,
    pub witness: Option<Witness>,
}

impl DiversityVerdict {
    pub fn to_json(&self) -> Value {
        json!({
            "verdict": self.verdict.as_str(),
            "evidence": {
                "centralizer": self.centralizer.to_json(),
                "support_rule": self.support_rule,
                "witness": self.witness.as_ref().map(|w| json!({
                    "P": to_row_major(&w.theta.p),
                    "Q": to_row_major(&w.theta.q),
                    "train_limiting_risk": w.train_limiting_risk,
                    "test_limiting_risk": w.test_limiting_risk,
                })),
            }
        })
    }
}

fn inside(lo: f64, hi: f64, a: f64, b: f64) -> bool {
    a <= lo && hi <= b
}

fn symmetric_spectrum_in(m: &Mat, a: f64, b: f64) -> bool {
    is_symmetric(m, 1e-12) && eig_sym(m).is_ok_and(|(v, _)| v.iter().all(|x| *x >= a - 1e-12 && *x <= b + 1e-12))
}

fn is_scalar_in(m: &Mat, a: f64, b: f64) -> bool {
    let d = m.nrows();
    let c = m[(0, 0)];
    max_abs(&(m - Mat::identity(d, d) * c)) == 0.0 && c >= a && c <= b
}

fn same_rotation(u: &Mat, v: &Mat) -> bool {
    u.shape() == v.shape() && max_abs(&(u - v)) <= 1e-12
}

/// Family-level support containment `supp(test) ⊆ supp(train)`, decided symbolically.
pub fn support_contained(train: &TaskDistribution, test: &TaskDistribution) -> Option<String> {
    use TaskFamily::*;
    if train.dim() != test.dim() {
        return None;
    }
    match (train.family(), test.family()) {
        (
            RotatedDiagonal {
                a,
                b,
                rotation: Rotation::Fresh,
            },
            RotatedDiagonal { a: c, b: e, .. },
        ) if inside(*c, *e, *a, *b) => Some("spectral interval containment under all rotations".into()),
        (
            RotatedDiagonal {
                a,
                b,
                rotation: Rotation::Fixed(u),
            },
            RotatedDiagonal {
                a: c,
                b: e,
                rotation: Rotation::Fixed(v),
            },
        ) if inside(*c, *e, *a, *b) && same_rotation(u, v) => {
            Some("spectral interval containment in a shared eigenbasis".into())
        }
        (RotatedDiagonal { a, b, .. }, ConstantMultiple { a: c, b: e }) if inside(*c, *e, *a, *b) => {
            Some("scalar multiples inside the spectral interval".into())
        }
        (
            RotatedDiagonal {
                a,
                b,
                rotation: Rotation::Fresh,
            },
            Atomic(atoms),
        ) if atoms.iter().all(|m| symmetric_spectrum_in(m, *a, *b)) => {
            Some("every atom is symmetric with spectrum in the interval".into())
        }
        (
            RotatedDiagonal {
                a,
                b,
                rotation: Rotation::Fixed(u),
            },
            Atomic(atoms),
        ) if atoms.iter().all(|m| symmetric_spectrum_in(m, *a, *b)) && diagonal_in_basis(atoms, u, 1e-12) => {
            Some("every atom is diagonal in the shared basis with spectrum in the interval".into())
        }
        (ConstantMultiple { a, b }, ConstantMultiple { a: c, b: e }) if inside(*c, *e, *a, *b) => {
            Some("scalar interval containment".into())
        }
        (ConstantMultiple { a, b }, RotatedDiagonal { a: c, b: e, .. }) if c == e && *c >= *a && *c <= *b => {
            Some("degenerate spectrum is a contained scalar".into())
        }
        (ConstantMultiple { a, b }, Atomic(atoms)) if atoms.iter().all(|m| is_scalar_in(m, *a, *b)) => {
            Some("every atom is a contained scalar".into())
        }
        (Atomic(train_atoms), Atomic(test_atoms)) if test_atoms.iter().all(|t| train_atoms.iter().any(|s| s == t)) => {
            Some("test atoms are a subset of train atoms".into())
        }
        (Pde(s), Pde(t))
            if s.a_law() == t.a_law()
                && s.v_law() == t.v_law()
                && s.field_modes() == t.field_modes()
                && s.grid().quadrature().len() == t.grid().quadrature().len() =>
        {
            Some("identical coefficient laws".into())
        }
        _ => None,
    }
}

/// Classify whether minimizers of the train limiting risk stay minimizers on test.
///
/// Checks in order: trivial centralizer of sampled train ratios, symbolic support
/// containment, then a shared train eigenbasis that some test task breaks, in
/// which case a witness `(U D Uᵀ, Σ⁻¹ U D⁻¹ Uᵀ)` is scored on both families.
pub fn diversity_verdict(
    train: &TaskDistribution,
    test: &TaskDistribution,
    cov: &SpdMatrix,
    pairs: usize,
    tol: f64,
    rng: &Rng,
) -> Result<DiversityVerdict> {
    if train.dim() != test.dim() || cov.dim() != train.dim() {
        return Err(IclError::DimensionMismatch(
            "train, test and covariance dimensions".into(),
        ));
    }
    let gens = sample_generators(train, pairs, &rng.child(0))?;
    let report = centralizer(&gens, tol)?;
    if report.trivial {
        return Ok(DiversityVerdict {
            verdict: VerdictKind::DiverseByCentralizer,
            centralizer: report,
            support_rule: None,
            witness: None,
        });
    }
    if let Some(rule) = support_contained(train, test) {
        return Ok(DiversityVerdict {
            verdict: VerdictKind::DiverseBySupport,
            centralizer: report,
            support_rule: Some(rule),
            witness: None,
        });
    }
    let draw = |dist: &TaskDistribution, stream: u64| -> Vec<Mat> {
        let base = rng.child(stream);
        (0..WITNESS_TASKS)
            .map(|i| dist.sample(&mut base.child(i as u64)))
            .collect()
    };
    let train_tasks = draw(train, 1);
    let test_tasks = draw(test, 2);
    let undetermined = |report| DiversityVerdict {
        verdict: VerdictKind::Undetermined,
        centralizer: report,
        support_rule: None,
        witness: None,
    };
    let u = match simultaneously_diagonalizable(&train_tasks, DIAGONAL_TOL) {
        Ok(Some(u)) => u,
        _ => return Ok(undetermined(report)),
    };
    if diagonal_in_basis(&test_tasks, &u, DIAGONAL_TOL) {
        return Ok(undetermined(report));
    }
    let d = train.dim();
    let diag = Vector::from_fn(d, |i, _| {
        WITNESS_SPREAD.powf(if d == 1 { 0.0 } else { i as f64 / (d - 1) as f64 })
    });
    let p = &u * Mat::from_diagonal(&diag) * u.transpose();
    let q = cov.inverse() * &u * Mat::from_diagonal(&diag.map(|x| 1.0 / x)) * u.transpose();
    let budget = spectral_norm(&p).max(spectral_norm(&q)).max(1.0);
    let theta = Theta::new(p, q, budget)?;
    let score = |dist: &TaskDistribution, tasks: &[Mat]| -> Result<f64> {
        let ctx = RiskContext::new(dist.clone(), CovariateDistribution::new(cov.clone()), 1)?;
        let sample = TaskSample::from_tasks(tasks)?;
        Ok(limiting_risk_for_sample(&theta, &ctx, &sample).value)
    };
    let train_risk = score(train, &train_tasks)?;
    let test_risk = score(test, &test_tasks)?;
    let witness = Witness {
        theta,
        train_limiting_risk: train_risk,
        test_limiting_risk: test_risk,
    };
    let verdict = if train_risk < WITNESS_TRAIN_MAX && test_risk > WITNESS_TEST_MIN {
        VerdictKind::NotDiverse
    } else {
        VerdictKind::Undetermined
    };
    Ok(DiversityVerdict {
        verdict,
        centralizer: report,
        support_rule: None,
        witness: Some(witness),
    })
}

/// `|E_train f(A; θ) − E_test f(A; θ)|` with `f` the `1/m` bracket of the
/// closed-form risk. Both expectations share one stream, so equal laws give 0.
pub fn distance_surrogate(
    train: &TaskDistribution,
    test: &TaskDistribution,
    theta: &Theta,
    cov: &SpdMatrix,
    task_samples: usize,
    rng: &Rng,
) -> Result<f64> {
    let mean_f = |dist: &TaskDistribution| -> Result<f64> {
        let sample = match dist.quadrature(crate::risk::QUADRATURE_NODES) {
            Some(_) => TaskSample::for_distribution(dist, task_samples)?,
            None => TaskSample::sampled(dist, task_samples, &rng.child(0))?,
        };
        let vals: Vec<f64> = sample
            .inverses()
            .iter()
            .map(|ai| task_terms(theta, ai, cov, None).bracket)
            .collect();
        Ok(sample.average(&vals).0)
    };
    Ok((mean_f(train)? - mean_f(test)?).abs())
}

/// Default tolerance for [`centralizer`].
pub fn default_tolerance() -> f64 {
    NULLSPACE_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::haar_orthogonal;
    use crate::tasks::equal_correlated_cov;

    fn rotation(angle: f64) -> Mat {
        let (s, c) = angle.sin_cos();
        Mat::from_row_slice(2, 2, &[c, -s, s, c])
    }

    #[test]
    fn kronecker_rows_give_commutator() {
        let mut rng = Rng::new(1, 0);
        let s = rng.normal_matrix(3, 3);
        let m = rng.normal_matrix(3, 3);
        let lhs = commutator_rows(&s) * Vector::from_column_slice(m.as_slice());
        let rhs = &s * &m - &m * &s;
        assert!((lhs - Vector::from_column_slice(rhs.as_slice())).norm() < 1e-12);
    }

    #[test]
    fn centralizer_examples() {
        let ident = centralizer(&[Mat::identity(3, 3)], NULLSPACE_TOL).unwrap();
        assert_eq!(ident.dimension, 9);
        assert!(!ident.trivial);
        let diag = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let r = centralizer(std::slice::from_ref(&diag), NULLSPACE_TOL).unwrap();
        assert_eq!(r.dimension, 2);
        assert!(!r.trivial);
        let r = centralizer(&[diag, rotation(std::f64::consts::FRAC_PI_4)], NULLSPACE_TOL).unwrap();
        assert_eq!(r.dimension, 1);
        assert!(r.trivial);
        assert_eq!(r.dimension_trace, vec![2, 1]);
    }

    #[test]
    fn centralizer_dimension_is_monotone() {
        let mut rng = Rng::new(2, 0);
        let u = haar_orthogonal(&mut rng, 4);
        let gens: Vec<Mat> = (0..6)
            .map(|i| {
                if i < 3 {
                    &u * Mat::from_diagonal(&Vector::from_fn(4, |j, _| 1.0 + ((i * 4 + j) as f64 * 0.37).fract()))
                        * u.transpose()
                } else {
                    rng.normal_matrix(4, 4)
                }
            })
            .collect();
        let r = centralizer(&gens, NULLSPACE_TOL).unwrap();
        assert!(r.dimension_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.dimension_trace[2], 4);
        assert_eq!(r.dimension, 1);
    }

    #[test]
    fn generator_structure() {
        let cm = TaskDistribution::constant_multiple(3, 1.0, 2.0).unwrap();
        for g in sample_generators(&cm, 10, &Rng::new(3, 0)).unwrap() {
            let c = g[(0, 0)];
            assert!(max_abs(&(g - Mat::identity(3, 3) * c)) < 1e-14);
        }
        let u = haar_orthogonal(&mut Rng::new(4, 0), 3);
        let fixed = TaskDistribution::rotated_diagonal(3, 1.0, 2.0, Rotation::Fixed(u.clone())).unwrap();
        let gens = sample_generators(&fixed, 10, &Rng::new(5, 0)).unwrap();
        for g in &gens {
            let m = u.transpose() * g * &u;
            let off = max_abs(&(&m - Mat::from_diagonal(&m.diagonal())));
            assert!(off < 1e-12);
        }
        let fresh = TaskDistribution::rotated_diagonal(3, 1.0, 2.0, Rotation::Fresh).unwrap();
        let gens = sample_generators(&fresh, 20, &Rng::new(6, 0)).unwrap();
        assert!(centralizer(&gens, NULLSPACE_TOL).unwrap().trivial);
    }

    #[test]
    fn simultaneous_diagonalization_examples() {
        let tasks = vec![
            Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0])),
            Mat::from_diagonal(&Vector::from_vec(vec![5.0, 1.0, 1.0])),
        ];
        let u = simultaneously_diagonalizable(&tasks, DIAGONAL_TOL).unwrap().unwrap();
        let perm = u.map(f64::abs);
        assert!(max_abs(&(&perm * perm.transpose() - Mat::identity(3, 3))) < 1e-12);
        let d12 = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let r = rotation(std::f64::consts::FRAC_PI_4);
        let rotated = &r * &d12 * r.transpose();
        assert!(simultaneously_diagonalizable(&[d12.clone(), rotated], DIAGONAL_TOL)
            .unwrap()
            .is_none());
        let single = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert!(simultaneously_diagonalizable(&[single], DIAGONAL_TOL)
            .unwrap()
            .is_some());
        let asym = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(
            simultaneously_diagonalizable(&[asym], DIAGONAL_TOL).unwrap_err(),
            IclError::NotSymmetric
        );
    }

    #[test]
    fn limiting_minimizer_examples() {
        let d = 3;
        let cov = equal_correlated_cov(d, 0.2).unwrap();
        let mut rng = Rng::new(7, 0);
        let any: Vec<Mat> = (0..5)
            .map(|_| rng.normal_matrix(d, d) + Mat::identity(d, d) * 3.0)
            .collect();
        let exact = Theta::new(Mat::identity(d, d), cov.inverse().clone(), 10.0).unwrap();
        assert!(is_limiting_minimizer(&exact, &any, &cov, 1e-10).unwrap());

        let k = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 3.0, 10.0]));
        let kinv = k.clone().try_inverse().unwrap();
        let witness = Theta::new(k.clone(), cov.inverse() * &kinv, 10.0).unwrap();
        let diag_family =
            TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fixed(Mat::identity(d, d))).unwrap();
        let diag_tasks: Vec<Mat> = (0..20).map(|i| diag_family.sample(&mut rng.child(i))).collect();
        assert!(is_limiting_minimizer(&witness, &diag_tasks, &cov, 1e-10).unwrap());
        let fresh = TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fresh).unwrap();
        let fresh_tasks: Vec<Mat> = (0..20).map(|i| fresh.sample(&mut rng.child(100 + i))).collect();
        assert!(!is_limiting_minimizer(&witness, &fresh_tasks, &cov, 1e-3).unwrap());
        let ctx = RiskContext::new(fresh, CovariateDistribution::new(cov), 1).unwrap();
        let r = limiting_risk_for_sample(&witness, &ctx, &TaskSample::from_tasks(&fresh_tasks).unwrap()).value;
        assert!(r > 0.01);
    }

    #[test]
    fn verdict_examples() {
        let d = 3;
        let cov = SpdMatrix::identity(d);
        let rng = Rng::new(8, 0);
        let fresh = TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fresh).unwrap();
        let any = TaskDistribution::constant_multiple(d, 5.0, 6.0).unwrap();
        let v = diversity_verdict(&fresh, &any, &cov, DEFAULT_PAIRS, NULLSPACE_TOL, &rng).unwrap();
        assert_eq!(v.verdict, VerdictKind::DiverseByCentralizer);

        let u = haar_orthogonal(&mut Rng::new(9, 0), d);
        let wide = TaskDistribution::rotated_diagonal(d, 1.0, 3.0, Rotation::Fixed(u.clone())).unwrap();
        let narrow = TaskDistribution::rotated_diagonal(d, 1.5, 2.0, Rotation::Fixed(u)).unwrap();
        let v = diversity_verdict(&wide, &narrow, &cov, DEFAULT_PAIRS, NULLSPACE_TOL, &rng).unwrap();
        assert_eq!(v.verdict, VerdictKind::DiverseBySupport);

        let cm = TaskDistribution::constant_multiple(d, 1.0, 2.0).unwrap();
        let v = diversity_verdict(&cm, &fresh, &cov, DEFAULT_PAIRS, NULLSPACE_TOL, &rng).unwrap();
        assert_eq!(v.verdict, VerdictKind::NotDiverse);
        let w = v.witness.as_ref().unwrap();
        assert!(w.train_limiting_risk < 1e-8 && w.test_limiting_risk > 0.01);
        let js = v.to_json();
        assert_eq!(js["verdict"], "not_diverse");
        assert_eq!(js["evidence"]["witness"]["P"].as_array().unwrap().len(), d * d);
    }

    #[test]
    fn scalar_minimizers_under_trivial_centralizer() {
        let d = 3;
        let cov = equal_correlated_cov(d, 0.3).unwrap();
        let fresh = TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fresh).unwrap();
        let rng = Rng::new(11, 0);
        let gens = sample_generators(&fresh, DEFAULT_PAIRS, &rng).unwrap();
        assert!(centralizer(&gens, NULLSPACE_TOL).unwrap().trivial);
        let tasks: Vec<Mat> = (0..40).map(|i| fresh.sample(&mut rng.child(1000 + i))).collect();
        let mut draw = Rng::new(12, 0);
        for _ in 0..20 {
            let p = draw.normal_matrix(d, d) + Mat::identity(d, d) * 2.0;
            let q = cov.inverse() * p.clone().try_inverse().unwrap();
            let theta = Theta::new(p.clone(), q, 10.0).unwrap();
            let scalar = Mat::identity(d, d) * (p.trace() / d as f64);
            let is_scalar = (&p - scalar).norm() <= 1e-6 * p.norm();
            assert_eq!(is_limiting_minimizer(&theta, &tasks, &cov, 1e-6).unwrap(), is_scalar);
        }
        let c = 1.7;
        let theta = Theta::new(Mat::identity(d, d) * c, cov.inverse() / c, 10.0).unwrap();
        assert!(is_limiting_minimizer(&theta, &tasks, &cov, 1e-10).unwrap());
    }

    #[test]
    fn verdict_json_has_dimension_trace() {
        let fresh = TaskDistribution::rotated_diagonal(2, 1.0, 2.0, Rotation::Fresh).unwrap();
        let v = diversity_verdict(
            &fresh,
            &fresh,
            &SpdMatrix::identity(2),
            8,
            NULLSPACE_TOL,
            &Rng::new(13, 0),
        )
        .unwrap();
        let js: Value = serde_json::from_str(&v.to_json().to_string()).unwrap();
        assert_eq!(js["verdict"], "diverse_by_centralizer");
        assert_eq!(
            js["evidence"]["centralizer"]["dimension_trace"]
                .as_array()
                .unwrap()
                .len(),
            8
        );
        assert_eq!(js["evidence"]["centralizer"]["basis"][0].as_array().unwrap().len(), 4);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn centralizer_trace_is_monotone_and_positive(seed in 0u64..10_000, count in 1usize..6, d in 1usize..5) {
            let mut rng = Rng::new(seed, 0);
            let gens: Vec<Mat> = (0..count).map(|_| rng.normal_matrix(d, d)).collect();
            let r = centralizer(&gens, NULLSPACE_TOL).unwrap();
            proptest::prop_assert!(r.dimension >= 1);
            proptest::prop_assert!(r.dimension_trace.windows(2).all(|w| w[1] <= w[0]));
            proptest::prop_assert_eq!(*r.dimension_trace.last().unwrap(), r.dimension);
        }
    }

    #[test]
    fn surrogate_examples() {
        let cov = SpdMatrix::identity(1);
        let rng = Rng::new(10, 0);
        let two = TaskDistribution::atomic(vec![Mat::from_element(1, 1, 2.0)]).unwrap();
        let four = TaskDistribution::atomic(vec![Mat::from_element(1, 1, 4.0)]).unwrap();
        let th = Theta::new(Mat::identity(1, 1), Mat::identity(1, 1), 1.0).unwrap();
        let v = distance_surrogate(&two, &four, &th, &cov, 10, &rng).unwrap();
        assert!((v - 0.375).abs() < 1e-15);
        assert_eq!(distance_surrogate(&two, &two, &th, &cov, 10, &rng).unwrap(), 0.0);
        let fresh = TaskDistribution::rotated_diagonal(2, 1.0, 2.0, Rotation::Fresh).unwrap();
        let cm = TaskDistribution::constant_multiple(2, 1.0, 3.0).unwrap();
        let zero = Theta::zeros(2, 1.0);
        assert_eq!(
            distance_surrogate(&fresh, &cm, &zero, &SpdMatrix::identity(2), 100, &rng).unwrap(),
            0.0
        );
        let th2 = Theta::new(Mat::identity(2, 2), Mat::identity(2, 2), 1.0).unwrap();
        assert_eq!(
            distance_surrogate(&fresh, &fresh, &th2, &SpdMatrix::identity(2), 100, &rng).unwrap(),
            0.0
        );
    }
}
