//! Dense linear algebra and seeded random sampling shared by every other module.
//!
//! Matrices are `nalgebra` dynamic matrices. Randomness goes through [`Rng`], a
//! ChaCha8 stream keyed by `(seed, stream)`; child streams are derived from the
//! key alone, never from consumed state, so work split across threads draws the
//! same numbers regardless of scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{IclError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used when validating symmetry of SPD inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Default relative singular-value cutoff for [`nullspace`].
pub const NULLSPACE_TOL: f64 = 1e-9;

/// Counter-based random stream identified by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream. Depends only on this stream's key and `id`.
    pub fn child(&self, id: u64) -> Rng {
        let key = splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Rng::new(self.seed, key)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..len`.
    pub fn index(&mut self, len: usize) -> usize {
        assert!(len > 0, "index over an empty range");
        ((self.inner.next_u64() as u128 * len as u128) >> 64) as usize
    }

    pub fn normal_vector(&mut self, d: usize) -> Vector {
        Vector::from_fn(d, |_, _| self.standard_normal())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Mat {
        // Filled row by row so the draw order matches the row-major convention.
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.standard_normal();
            }
        }
        m
    }
}

/// Symmetric positive definite matrix with cached Cholesky factor, inverse and
/// eigendecomposition.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: Mat,
    chol: Mat,
    inverse: Mat,
    eigenvalues: Vector,
    eigenvectors: Mat,
}

impl SpdMatrix {
    pub fn new(matrix: Mat) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(IclError::DimensionMismatch(format!(
                "SPD matrix must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(IclError::NotPositiveDefinite);
        }
        if !is_symmetric(&matrix, SYMMETRY_TOL) {
            return Err(IclError::NotSymmetric);
        }
        let matrix = symmetrize(&matrix);
        let chol = matrix.clone().cholesky().ok_or(IclError::NotPositiveDefinite)?;
        let l = chol.l();
        let scale = max_abs(&matrix).max(f64::MIN_POSITIVE);
        if max_abs(&(&l * l.transpose() - &matrix)) > 1e-10 * scale {
            return Err(IclError::NotPositiveDefinite);
        }
        let inverse = symmetrize(&chol.inverse());
        let (eigenvalues, eigenvectors) = eig_sym(&matrix)?;
        if eigenvalues[0] <= 0.0 {
            return Err(IclError::NotPositiveDefinite);
        }
        Ok(Self {
            matrix,
            chol: l,
            inverse,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self::new(Mat::identity(d, d)).expect("identity is SPD")
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        Self::new(Mat::from_diagonal(&Vector::from_column_slice(values)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = Σ`.
    pub fn chol(&self) -> &Mat {
        &self.chol
    }

    pub fn inverse(&self) -> &Mat {
        &self.inverse
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, matching [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn op_norm(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn inverse_op_norm(&self) -> f64 {
        1.0 / self.eigenvalues[0]
    }

    /// Symmetric square root `W Λ^{1/2} Wᵀ`.
    pub fn sqrt(&self) -> Mat {
        let w = &self.eigenvectors;
        let half = Mat::from_diagonal(&self.eigenvalues.map(f64::sqrt));
        w * half * w.transpose()
    }
}

/// Draw from `N(0, cov)` as `chol · z`.
pub fn gaussian_vector(rng: &mut Rng, cov: &SpdMatrix) -> Vector {
    let z = rng.normal_vector(cov.dim());
    cov.chol() * z
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with `diag(R) > 0`.
pub fn haar_orthogonal(rng: &mut Rng, d: usize) -> Mat {
    assert!(d >= 1, "dimension must be positive");
    let g = rng.normal_matrix(d, d);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `(1/n) Σ xᵢxᵢᵀ`.
pub fn empirical_covariance(xs: &[Vector]) -> Result<Mat> {
    let first = xs.first().ok_or(IclError::EmptySample)?;
    let d = first.len();
    let mut acc = Mat::zeros(d, d);
    for x in xs {
        if x.len() != d {
            return Err(IclError::DimensionMismatch("covariates of differing dimension".into()));
        }
        acc.ger(1.0, x, x, 1.0);
    }
    Ok(acc / xs.len() as f64)
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn frobenius_norm(m: &Mat) -> f64 {
    m.norm()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &Mat, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn eig_sym(m: &Mat) -> Result<(Vector, Mat)> {
    if !is_symmetric(m, 1e-10) {
        return Err(IclError::NotSymmetric);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

pub fn solve_spd(a: &SpdMatrix, b: &Mat) -> Result<Mat> {
    if b.nrows() != a.dim() {
        return Err(IclError::DimensionMismatch(format!(
            "right-hand side has {} rows, expected {}",
            b.nrows(),
            a.dim()
        )));
    }
    let chol = a.matrix().clone().cholesky().ok_or(IclError::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

/// Solve a general square system by LU with partial pivoting.
pub fn solve_general(a: &Mat, b: &Mat) -> Result<Mat> {
    a.clone().lu().solve(b).ok_or(IclError::Singular)
}

pub fn inverse_general(a: &Mat) -> Result<Mat> {
    a.clone().try_inverse().ok_or(IclError::Singular)
}

/// Orthonormal basis (as columns) of the right null space of `m`: the right
/// singular vectors whose singular values are at most `tol` times the largest.
pub fn nullspace(m: &Mat, tol: f64) -> Mat {
    let cols = m.ncols();
    // Thin SVD only yields min(rows, cols) right vectors; pad short matrices.
    let padded = if m.nrows() < cols {
        let mut p = Mat::zeros(cols, cols);
        p.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let largest = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * largest;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    let mut basis = Mat::zeros(cols, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        basis.set_column(k, &v_t.row(i).transpose());
    }
    basis
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p, dp)
}

/// Gauss–Legendre rule mapped to `[lo, hi]`.
pub fn gauss_legendre_interval(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    (
        nodes.iter().map(|x| mid + half * x).collect(),
        weights.iter().map(|w| w * half).collect(),
    )
}

/// Pairwise (tree) summation; order fixed by the slice layout.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Row-major flattening used by every JSON surface.
pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Mat> {
    if entries.len() != rows * cols {
        return Err(IclError::DimensionMismatch(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            entries.len()
        )));
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(IclError::InvalidArgument("non-finite matrix entry".into()));
    }
    Ok(Mat::from_row_slice(rows, cols, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_unit_variance_scalar() {
        let cov = SpdMatrix::identity(1);
        let mut rng = Rng::new(11, 0);
        let n = 1_000_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = gaussian_vector(&mut rng, &cov)[0];
            sum_sq += x * x;
        }
        assert!((sum_sq / n as f64 - 1.0).abs() < 0.01);
    }

    #[test]
    fn gaussian_variance_four() {
        let cov = SpdMatrix::from_diagonal(&[4.0]).unwrap();
        let mut rng = Rng::new(12, 3);
        let n = 1_000_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = gaussian_vector(&mut rng, &cov)[0];
            sum_sq += x * x;
        }
        assert!((sum_sq / n as f64 - 4.0).abs() < 0.04);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let cov = SpdMatrix::new(Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let a = gaussian_vector(&mut Rng::new(5, 9), &cov);
        let b = gaussian_vector(&mut Rng::new(5, 9), &cov);
        assert_eq!(a, b);
        let c = gaussian_vector(&mut Rng::new(5, 10), &cov);
        assert_ne!(a, c);
    }

    #[test]
    fn children_depend_only_on_key() {
        let mut parent = Rng::new(1, 2);
        let before = parent.child(7).standard_normal();
        parent.standard_normal();
        let after = parent.child(7).standard_normal();
        assert_eq!(before, after);
        assert_ne!(parent.child(7).stream(), parent.child(8).stream());
    }

    #[test]
    fn haar_scalar_sign_is_balanced() {
        let trials = 10_000;
        let positive = (0..trials)
            .filter(|&s| haar_orthogonal(&mut Rng::new(s, 0), 1)[(0, 0)] > 0.0)
            .count();
        let freq = positive as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn haar_is_orthogonal_and_deterministic() {
        for d in 1..8 {
            let q = haar_orthogonal(&mut Rng::new(d as u64, 1), d);
            let err = &q.transpose() * &q - Mat::identity(d, d);
            assert!(max_abs(&err) < 1e-12);
        }
        let a = haar_orthogonal(&mut Rng::new(3, 3), 3);
        let b = haar_orthogonal(&mut Rng::new(3, 3), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn haar_first_column_is_centered() {
        let d = 4;
        let samples = 20_000;
        let mut mean = Vector::zeros(d);
        let mut rng = Rng::new(99, 0);
        for i in 0..samples {
            let q = haar_orthogonal(&mut rng.child(i as u64), d);
            mean += q.column(0);
        }
        mean /= samples as f64;
        let bound = 4.0 / (samples as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean}");
        rng.standard_normal();
    }

    #[test]
    fn empirical_covariance_small_cases() {
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let e2 = Vector::from_vec(vec![0.0, 1.0]);
        let c = empirical_covariance(std::slice::from_ref(&e1)).unwrap();
        assert_eq!(c, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let c = empirical_covariance(&[e1, e2]).unwrap();
        assert_eq!(c, Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        assert_eq!(empirical_covariance(&[]), Err(IclError::EmptySample));
    }

    #[test]
    fn empirical_covariance_converges() {
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let cov = SpdMatrix::new(sigma.clone()).unwrap();
        let mut rng = Rng::new(4, 4);
        let xs: Vec<Vector> = (0..1_000_000).map(|_| gaussian_vector(&mut rng, &cov)).collect();
        let xn = empirical_covariance(&xs).unwrap();
        assert!(spectral_norm(&(xn - sigma)) < 5e-3);
    }

    #[test]
    fn gaussian_covariance_within_four_standard_errors() {
        let sigma = Mat::from_row_slice(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.7]);
        let cov = SpdMatrix::new(sigma.clone()).unwrap();
        let n = 1_000_000;
        let mut rng = Rng::new(8, 1);
        let xs: Vec<Vector> = (0..n).map(|_| gaussian_vector(&mut rng, &cov)).collect();
        let xn = empirical_covariance(&xs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                // Var(x_i x_j) = Σ_ii Σ_jj + Σ_ij².
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((xn[(i, j)] - sigma[(i, j)]).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        assert_abs_diff_eq!(spectral_norm(&m), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn nullspace_threshold_semantics() {
        let zero = Mat::zeros(2, 2);
        assert_eq!(nullspace(&zero, 1e-10).ncols(), 2);
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let ns = nullspace(&m, 1e-10);
        assert_eq!(ns.ncols(), 1);
        assert_abs_diff_eq!(ns[(1, 0)].abs(), 1.0, epsilon = 1e-12);
        let wide = Mat::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let ns = nullspace(&wide, NULLSPACE_TOL);
        assert_eq!(ns.ncols(), 2);
        assert!(max_abs(&(&wide * &ns)) < 1e-12);
    }

    #[test]
    fn eig_sym_rejects_asymmetric() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(eig_sym(&m).unwrap_err(), IclError::NotSymmetric);
        let s = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, vecs) = eig_sym(&s).unwrap();
        assert_abs_diff_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        let recon = &vecs * Mat::from_diagonal(&vals) * vecs.transpose();
        assert!(max_abs(&(recon - s)) < 1e-12);
    }

    #[test]
    fn solve_spd_matches_product() {
        let a = SpdMatrix::new(Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0])).unwrap();
        let b = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!(max_abs(&(a.matrix() * x - b)) < 1e-14);
    }

    #[test]
    fn spd_rejects_indefinite_and_asymmetric() {
        let indefinite = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(SpdMatrix::new(indefinite).unwrap_err(), IclError::NotPositiveDefinite);
        let asym = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert_eq!(SpdMatrix::new(asym).unwrap_err(), IclError::NotSymmetric);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1usize, 4, 7, 64] {
            let (x, w) = gauss_legendre(n);
            let deg = 2 * n - 1;
            let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert_abs_diff_eq!(integral, exact, epsilon = 1e-13);
        }
        let (x, w) = gauss_legendre_interval(64, 1.0, 2.0);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w / (x * x)).sum();
        assert_abs_diff_eq!(integral, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_abs_diff_eq!(pairwise_sum(&values), values.iter().sum::<f64>(), epsilon = 1e-9);
    }
}
