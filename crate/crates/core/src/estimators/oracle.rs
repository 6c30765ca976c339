//! Exact-enumeration oracle for determinant sampling.
//!
//! For a dense basis `Φ` (kets as columns, one row per configuration of a
//! small sector) every ordered tuple of distinct rows is enumerated with
//! probability `P(S) = |det Φ(S)|² / (N!·det G)`. Averages of local-matrix
//! entries are then exact sums, and are compared against closed-form
//! Gram-matrix expressions.

use crate::error::{Error, Result};
use crate::grassmann::{gram, minor_complement, remove_rows_cols, select_rows_cols, DenseSubspaceBasis};
use crate::linalg::{CMat, C64, ZERO};

pub const MAX_DIM: usize = 8;
pub const MAX_STATES: usize = 3;

/// Signature of a complementary-minor routine; the verification suite takes
/// one as a parameter so a corrupted implementation can be substituted.
pub type MinorFn = fn(&CMat, &[usize], &[usize]) -> Result<C64>;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// All ordered tuples of `len` distinct indices below `dim`.
pub fn ordered_tuples(dim: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(len);
    fn rec(dim: usize, len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in 0..dim {
            if !cur.contains(&i) {
                cur.push(i);
                rec(dim, len, cur, out);
                cur.pop();
            }
        }
    }
    rec(dim, len, &mut cur, &mut out);
    out
}

/// Ordered tuples of a dense basis with their sampling probabilities.
#[derive(Clone, Debug)]
pub struct TupleEnumeration {
    pub basis: DenseSubspaceBasis,
    pub tuples: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl TupleEnumeration {
    pub fn new(basis: DenseSubspaceBasis) -> Result<Self> {
        let (dim, n) = (basis.dim(), basis.n());
        if dim > MAX_DIM || n > MAX_STATES {
            return Err(Error::SectorTooLarge(dim));
        }
        let g = gram(&basis)?;
        let norm = factorial(n) * g.entries().determinant().re;
        let tuples = ordered_tuples(dim, n);
        let probs = tuples
            .iter()
            .map(|t| rows(basis.kets(), t).determinant().norm_sqr() / norm)
            .collect();
        Ok(Self { basis, tuples, probs })
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    /// Exact average of `f(Φ(S), S)` over tuples with nonzero weight.
    pub fn average<T, F>(&self, zero: T, mut f: F) -> Result<T>
    where
        T: std::ops::AddAssign + std::ops::Mul<C64, Output = T>,
        F: FnMut(&CMat, &[usize]) -> Result<T>,
    {
        let mut acc = zero;
        for (t, &p) in self.tuples.iter().zip(&self.probs) {
            if p > 0.0 {
                acc += f(&rows(self.basis.kets(), t), t)? * C64::new(p, 0.0);
            }
        }
        Ok(acc)
    }
}

/// Rows of `m` indexed by `tuple`.
pub fn rows(m: &CMat, tuple: &[usize]) -> CMat {
    let cols: Vec<usize> = (0..m.ncols()).collect();
    select_rows_cols(m, tuple, &cols)
}

fn inverse(phi: &CMat) -> Result<CMat> {
    phi.clone().try_inverse().ok_or(Error::SingularLocalMatrix(f64::NEG_INFINITY))
}

/// `E[(Φ⁻¹(S))_{ik}·A_{kj}(S)]` for each sample position `k`, where
/// `A(S)` holds rows of the kets `a_j = Â·φ_j`.
pub fn one_local_average(en: &TupleEnumeration, a_kets: &CMat) -> Result<Vec<CMat>> {
    let n = en.n();
    (0..n)
        .map(|k| {
            en.average(CMat::zeros(n, n), |phi, t| {
                let inv = inverse(phi)?;
                let a = rows(a_kets, t);
                Ok(CMat::from_fn(n, n, |i, j| inv[(i, k)] * a[(k, j)]))
            })
        })
        .collect()
}

/// `(1/N)·⟨φ̃_i|a_j⟩`.
pub fn one_local_reference(basis: &DenseSubspaceBasis, a_kets: &CMat) -> Result<CMat> {
    let g = gram(basis)?;
    Ok(g.solve(&(basis.kets().adjoint() * a_kets)) / C64::new(basis.n() as f64, 0.0))
}

/// Index of one local-matrix entry pair: `(i₁, j₁)` of `A` and `(i₂, j₂)` of `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryPair {
    pub i1: usize,
    pub j1: usize,
    pub i2: usize,
    pub j2: usize,
}

/// `E[((Φ⁻¹)_{i₁k₁}A_{k₁j₁})*·(Φ⁻¹)_{i₂k₂}B_{k₂j₂}]` for fixed positions,
/// summed as `Σ_S (adj Φ)*_{i₁k₁}·(adj Φ)_{i₂k₂}·A*·B / (N!·det G)` over all
/// `D^N` tuples. Tuples with a repeated configuration have zero probability
/// but a finite limit of the integrand, and the closed forms of the two
/// branches include them; their contributions cancel once the branches are
/// assembled into the covariance (see [`covariance_average`]).
pub fn two_local_average(en: &TupleEnumeration, a_kets: &CMat, b_kets: &CMat, e: EntryPair, k1: usize, k2: usize) -> Result<C64> {
    let (dim, n) = (en.basis.dim(), en.n());
    let norm = factorial(n) * gram(&en.basis)?.entries().determinant().re;
    let mut acc = ZERO;
    for t in all_tuples(dim, n) {
        let adj = adjugate(&rows(en.basis.kets(), &t));
        let a = rows(a_kets, &t);
        let b = rows(b_kets, &t);
        acc += (adj[(e.i1, k1)] * a[(k1, e.j1)]).conj() * adj[(e.i2, k2)] * b[(k2, e.j2)];
    }
    Ok(acc / norm)
}

/// The same average restricted to tuples of distinct configurations, i.e.
/// the expectation under the sampling distribution itself.
pub fn two_local_sampled(en: &TupleEnumeration, a_kets: &CMat, b_kets: &CMat, e: EntryPair, k1: usize, k2: usize) -> Result<C64> {
    en.average(ZERO, |phi, t| {
        let inv = inverse(phi)?;
        let a = rows(a_kets, t);
        let b = rows(b_kets, t);
        Ok((inv[(e.i1, k1)] * a[(k1, e.j1)]).conj() * inv[(e.i2, k2)] * b[(k2, e.j2)])
    })
}

/// All `dim^len` tuples, repetitions included.
pub fn all_tuples(dim: usize, len: usize) -> Vec<Vec<usize>> {
    (0..dim.pow(len as u32))
        .map(|mut c| {
            (0..len)
                .map(|_| {
                    let d = c % dim;
                    c /= dim;
                    d
                })
                .collect()
        })
        .collect()
}

/// Adjugate `adj(w)_{ik} = (−1)^{i+k}·det(w without row k and column i)`.
pub fn adjugate(w: &CMat) -> CMat {
    let n = w.nrows();
    if n == 1 {
        return CMat::from_element(1, 1, C64::new(1.0, 0.0));
    }
    CMat::from_fn(n, n, |i, k| {
        let m = remove_rows_cols(w, &[k], &[i]).determinant();
        if (i + k) % 2 == 0 {
            m
        } else {
            -m
        }
    })
}

/// Closed forms of [`two_local_average`]: for `k₁ = k₂`
/// `(1/N)·(G⁻¹)_{i₂i₁}⟨a_{j₁}|b_{j₂}⟩`, otherwise
/// `(⟨a_{j₁}|φ̃_{i₁}⟩⟨φ̃_{i₂}|b_{j₂}⟩ − (G⁻¹)_{i₂i₁}⟨a_{j₁}|P|b_{j₂}⟩) / (N(N−1))`.
pub fn two_local_reference(basis: &DenseSubspaceBasis, a_kets: &CMat, b_kets: &CMat, e: EntryPair, same_k: bool) -> Result<C64> {
    let n = basis.n() as f64;
    let g = gram(basis)?;
    let ginv = g.inverse();
    let phi = basis.kets();
    let a = a_kets.columns(e.j1, 1).into_owned();
    let b = b_kets.columns(e.j2, 1).into_owned();
    if same_k {
        return Ok(ginv[(e.i2, e.i1)] * a.dotc(&b) / n);
    }
    if basis.n() < 2 {
        return Err(Error::ShapeMismatch("distinct positions need N ≥ 2".into()));
    }
    let dual = phi * &ginv;
    let pa = phi * g.solve(&(phi.adjoint() * &a));
    let first = a.dotc(&dual.columns(e.i1, 1)) * dual.columns(e.i2, 1).dotc(&b);
    Ok((first - ginv[(e.i2, e.i1)] * pa.dotc(&b)) / (n * (n - 1.0)))
}

/// Exact `E[Ã*_{i₁j₁}·B̃_{i₂j₂}] − E[Ã_{i₁j₁}]*·E[B̃_{i₂j₂}]` with
/// `Ã(S) = Φ(S)⁻¹A(S)`.
pub fn covariance_average(en: &TupleEnumeration, a_kets: &CMat, b_kets: &CMat, e: EntryPair) -> Result<C64> {
    let mut ma = ZERO;
    let mut mb = ZERO;
    let mut mab = ZERO;
    for (t, &p) in en.tuples.iter().zip(&en.probs) {
        if p == 0.0 {
            continue;
        }
        let phi = rows(en.basis.kets(), t);
        let inv = inverse(&phi)?;
        let at = &inv * rows(a_kets, t);
        let bt = &inv * rows(b_kets, t);
        ma += at[(e.i1, e.j1)] * p;
        mb += bt[(e.i2, e.j2)] * p;
        mab += at[(e.i1, e.j1)].conj() * bt[(e.i2, e.j2)] * p;
    }
    Ok(mab - ma.conj() * mb)
}

/// `(G⁻¹)_{i₂i₁}·⟨a_{j₁}|P_⊥|b_{j₂}⟩`.
pub fn covariance_reference(basis: &DenseSubspaceBasis, a_kets: &CMat, b_kets: &CMat, e: EntryPair) -> Result<C64> {
    let g = gram(basis)?;
    let phi = basis.kets();
    let b = b_kets.columns(e.j2, 1).into_owned();
    let pb = phi * g.solve(&(phi.adjoint() * &b));
    let perp = b - pb;
    Ok(g.inverse()[(e.i2, e.i1)] * a_kets.columns(e.j1, 1).dotc(&perp))
}

/// Both sides of the minor-sum identity for removed sample positions
/// `positions` and removed basis columns `cols_i`, `cols_j`:
///
/// `Σ_S minor(Φ(S); K, I)*·minor(Φ(S); K, J)`
///  `= (N−M)!·(D−N+M)!/(D−N)!·det[G_{Ī,J̄}]`
///
/// with the sum over ordered tuples of distinct configurations and `D` the
/// sector dimension. Minors of `Φ(S)` are evaluated with `minor`.
pub fn minor_sum_identity(
    basis: &DenseSubspaceBasis,
    positions: &[usize],
    cols_i: &[usize],
    cols_j: &[usize],
    minor: MinorFn,
) -> Result<(C64, C64)> {
    let (dim, n) = (basis.dim(), basis.n());
    let m = positions.len();
    if m == 0 || m >= n || cols_i.len() != m || cols_j.len() != m {
        return Err(Error::ShapeMismatch("minor sum needs 0 < M < N".into()));
    }
    let mut lhs = ZERO;
    for t in ordered_tuples(dim, n) {
        let phi = rows(basis.kets(), &t);
        if crate::linalg::log_det(&phi).is_zero() {
            continue;
        }
        lhs += minor(&phi, positions, cols_i)?.conj() * minor(&phi, positions, cols_j)?;
    }
    let g = gram(basis)?;
    let gsub = remove_rows_cols(g.entries(), cols_i, cols_j);
    let count = factorial(n - m) * factorial(dim - n + m) / factorial(dim - n);
    Ok((lhs, gsub.determinant() * count))
}

/// Both sides of the Cauchy–Binet form over ordered `(N−M)`-tuples:
/// `Σ det[Φ_Ī(S̄)]*·det[Φ_J̄(S̄)] = (N−M)!·det[G_{Ī,J̄}]`.
pub fn minor_sum_reduced(basis: &DenseSubspaceBasis, cols_i: &[usize], cols_j: &[usize]) -> Result<(C64, C64)> {
    let (dim, n) = (basis.dim(), basis.n());
    let m = cols_i.len();
    let keep = |rm: &[usize]| -> Vec<usize> { (0..n).filter(|c| !rm.contains(c)).collect() };
    let (ki, kj) = (keep(cols_i), keep(cols_j));
    let mut lhs = ZERO;
    for t in ordered_tuples(dim, n - m) {
        let a = select_rows_cols(basis.kets(), &t, &ki);
        let b = select_rows_cols(basis.kets(), &t, &kj);
        lhs += a.determinant().conj() * b.determinant();
    }
    let g = gram(basis)?;
    Ok((lhs, remove_rows_cols(g.entries(), cols_i, cols_j).determinant() * factorial(n - m)))
}

/// Default minor routine.
pub fn default_minor() -> MinorFn {
    minor_complement
}
