//! Small dense complex linear-algebra helpers shared by the rest of the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices of `Complex64`. The
//! matrices involved are tiny (N×N with N ≤ 8, or sector-sized at most), so
//! clarity wins over blocking or BLAS.

use nalgebra::{DMatrix, DVector, Dyn, Schur, SymmetricEigen, LU};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Determinant in polar log form: `det = exp(log_abs) * phase`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDet {
    pub log_abs: f64,
    /// Unit-modulus phase factor (or zero for a singular matrix).
    pub phase: C64,
}

impl LogDet {
    pub fn value(&self) -> C64 {
        self.phase * self.log_abs.exp()
    }

    pub fn is_zero(&self) -> bool {
        self.log_abs == f64::NEG_INFINITY
    }
}

fn logdet_from_lu(lu: &LU<C64, Dyn, Dyn>) -> LogDet {
    let n = lu.l().nrows();
    let u = lu.u();
    let mut log_abs = 0.0;
    let mut phase: C64 = lu.p().determinant();
    for i in 0..n {
        let d = u[(i, i)];
        let a = d.norm();
        if a == 0.0 {
            return LogDet {
                log_abs: f64::NEG_INFINITY,
                phase: ZERO,
            };
        }
        log_abs += a.ln();
        phase *= d / a;
    }
    LogDet { log_abs, phase }
}

/// `log|det m|` and the phase of `det m` without forming the (possibly
/// under- or overflowing) product.
pub fn log_det(m: &CMat) -> LogDet {
    assert!(m.is_square(), "log_det of a non-square matrix");
    if m.nrows() == 0 {
        return LogDet {
            log_abs: 0.0,
            phase: ONE,
        };
    }
    logdet_from_lu(&m.clone().lu())
}

pub fn det(m: &CMat) -> C64 {
    log_det(m).value()
}

/// LU factorization of a square complex matrix with its cached determinant.
#[derive(Clone, Debug)]
pub struct Factorized {
    lu: LU<C64, Dyn, Dyn>,
    logdet: LogDet,
}

impl Factorized {
    pub fn new(m: CMat) -> Self {
        assert!(m.is_square(), "factorizing a non-square matrix");
        let lu = m.lu();
        let logdet = logdet_from_lu(&lu);
        Self { lu, logdet }
    }

    pub fn logdet(&self) -> LogDet {
        self.logdet
    }

    pub fn dim(&self) -> usize {
        self.lu.l().nrows()
    }

    /// Solves `m x = b`. Fails on an exactly singular factor.
    pub fn solve(&self, b: &CMat) -> Result<CMat> {
        if self.logdet.is_zero() {
            return Err(Error::SingularLocalMatrix(f64::NEG_INFINITY));
        }
        self.lu
            .solve(b)
            .ok_or(Error::SingularLocalMatrix(self.logdet.log_abs))
    }

    /// Column `i` of the inverse.
    pub fn inverse_column(&self, i: usize) -> Result<CVec> {
        let n = self.dim();
        let mut e = CMat::zeros(n, 1);
        e[(i, 0)] = ONE;
        Ok(self.solve(&e)?.column(0).into_owned())
    }

    pub fn inverse(&self) -> Result<CMat> {
        let n = self.dim();
        self.solve(&CMat::identity(n, n))
    }
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(m: &CMat) -> (RVec, CMat) {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = RVec::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending.
pub fn symmetric_eigen(m: &RMat) -> (RVec, RMat) {
    let h = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = RVec::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = RMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Eigenvalues and (unit-norm) right eigenvectors of a general complex
/// matrix, through a complex Schur form and triangular back-substitution.
/// The order is whatever the Schur form produced.
pub fn general_eigen(m: &CMat) -> Result<(Vec<C64>, CMat)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    if !m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NonFinite("eigen-decomposition input".into()));
    }
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or(Error::NonDiagonalizable(f64::INFINITY))?;
    let (q, t) = schur.unpack();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let smin = scale * f64::EPSILON;
    let mut y = CMat::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        y[(k, k)] = ONE;
        for j in (0..k).rev() {
            let mut acc = ZERO;
            for l in (j + 1)..=k {
                acc += t[(j, l)] * y[(l, k)];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < smin {
                denom = C64::new(smin, 0.0);
            }
            y[(j, k)] = -acc / denom;
        }
    }
    let mut x = q * y;
    for k in 0..n {
        let nrm = x.column(k).norm();
        if nrm > 0.0 && nrm.is_finite() {
            let mut c = x.column_mut(k);
            c /= C64::new(nrm, 0.0);
        }
    }
    let vals = (0..n).map(|k| t[(k, k)]).collect();
    Ok((vals, x))
}

/// Ratio of largest to smallest singular value (infinite when singular).
pub fn condition_number(m: &CMat) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

/// Entrywise maximum absolute difference.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Matrix with independent standard complex normal entries.
pub fn random_complex_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    })
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> CMat {
    let a = random_complex_matrix(rng, dim, dim);
    (&a + a.adjoint()) * C64::new(0.5, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logdet_matches_direct_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..6 {
            let m = random_complex_matrix(&mut rng, n, n);
            let direct = m.clone().determinant();
            let ld = log_det(&m);
            assert!((ld.value() - direct).norm() < 1e-12 * direct.norm().max(1.0));
        }
    }

    #[test]
    fn logdet_of_singular_is_neg_infinity() {
        let m = CMat::from_row_slice(2, 2, &[ONE, ONE, ONE, ONE]);
        assert!(log_det(&m).is_zero());
        assert_eq!(log_det(&m).value(), ZERO);
    }

    #[test]
    fn general_eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_complex_matrix(&mut rng, 4, 4);
        let (vals, x) = general_eigen(&m).unwrap();
        let lam = CMat::from_diagonal(&CVec::from_vec(vals));
        let xinv = x.clone().try_inverse().unwrap();
        assert!(max_abs_diff(&(&x * lam * xinv), &m) < 1e-10);
    }

    #[test]
    fn jordan_block_has_ill_conditioned_eigenvectors() {
        let m = CMat::from_row_slice(2, 2, &[ONE, ONE, ZERO, ONE]);
        let (_, x) = general_eigen(&m).unwrap();
        assert!(condition_number(&x) > 1e12);
    }
}
