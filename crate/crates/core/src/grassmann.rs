//! Exact dense linear algebra on linear subspaces.
//!
//! A subspace is carried by a ket matrix `|Φ⟧` whose N columns span it. All
//! subspace-level quantities here are built so that a change of basis
//! `|Φ⟧ → |Φ⟧·X` acts on them by similarity, `F → X⁻¹·F·X`; their
//! eigenvalues are then properties of the subspace alone.
//!
//! These routines are the exact reference the Monte Carlo estimators are
//! checked against.

use crate::error::{Error, Result};
use crate::linalg::{general_eigen, hermitian_eigen, log_det, trace, CMat, C64, ONE};

/// Relative singular-value threshold below which basis columns count as
/// linearly dependent; its inverse bounds the Gram condition number.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvector matrices with a larger condition number are rejected by
/// [`principal`].
pub const MAX_EIGVEC_COND: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct DenseSubspaceBasis {
    kets: CMat,
}

impl DenseSubspaceBasis {
    pub fn new(kets: CMat) -> Result<Self> {
        let (dim, n) = kets.shape();
        if n == 0 || n > dim {
            return Err(Error::ShapeMismatch(format!(
                "basis needs 1 <= N <= dim H, got N = {n}, dim H = {dim}"
            )));
        }
        let sv = kets.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(max > 0.0) || min <= RANK_TOL * max {
            return Err(Error::RankDeficient(if max > 0.0 { min / max } else { 0.0 }));
        }
        Ok(Self { kets })
    }

    pub fn kets(&self) -> &CMat {
        &self.kets
    }

    pub fn into_kets(self) -> CMat {
        self.kets
    }

    pub fn n(&self) -> usize {
        self.kets.ncols()
    }

    pub fn dim(&self) -> usize {
        self.kets.nrows()
    }

    /// Change of basis `|Φ⟧·X`.
    pub fn transformed(&self, x: &CMat) -> Result<Self> {
        Self::new(&self.kets * x)
    }
}

/// `G = ⟦Φ|Φ⟧`, kept with a Cholesky factor for solves.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    entries: CMat,
    chol: nalgebra::Cholesky<C64, nalgebra::Dyn>,
}

impl GramMatrix {
    pub fn entries(&self) -> &CMat {
        &self.entries
    }

    /// Solves `G·X = rhs`.
    pub fn solve(&self, rhs: &CMat) -> CMat {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> CMat {
        self.chol.inverse()
    }
}

/// The Gram matrix of a basis, with the conditioning check every solve
/// against it relies on.
pub fn gram(basis: &DenseSubspaceBasis) -> Result<GramMatrix> {
    let entries = basis.kets.adjoint() * &basis.kets;
    let (vals, _) = hermitian_eigen(&entries);
    let (lo, hi) = (vals[0], vals[vals.len() - 1]);
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > 1.0 / RANK_TOL {
        return Err(Error::SingularGram(cond));
    }
    let herm = (&entries + entries.adjoint()) * C64::new(0.5, 0.0);
    let chol = nalgebra::Cholesky::new(herm).ok_or(Error::SingularGram(cond))?;
    Ok(GramMatrix { entries, chol })
}

/// Dual basis `|Φ̃⟧ = |Φ⟧·G⁻¹`, so that `⟦Φ̃|Φ⟧ = 1`.
pub fn dual_basis(basis: &DenseSubspaceBasis) -> Result<DenseSubspaceBasis> {
    let g = gram(basis)?;
    // G is Hermitian, so (G⁻¹ ⟦Φ|)† = |Φ⟧ G⁻¹.
    let dual_bra = g.solve(&basis.kets.adjoint());
    Ok(DenseSubspaceBasis {
        kets: dual_bra.adjoint(),
    })
}

/// Orthogonal projector `P = |Φ⟧⟦Φ̃|` onto the span.
pub fn projector(basis: &DenseSubspaceBasis) -> Result<CMat> {
    let g = gram(basis)?;
    Ok(&basis.kets * g.solve(&basis.kets.adjoint()))
}

/// Applies `1 − P` to a set of kets.
pub fn project_out(basis: &DenseSubspaceBasis, g: &GramMatrix, kets: &CMat) -> CMat {
    let coeff = g.solve(&(basis.kets.adjoint() * kets));
    kets - &basis.kets * coeff
}

/// Wedge-product overlap `⟪Ψ|Φ⟫ = det ⟦Ψ|Φ⟧`.
pub fn wedge_overlap(left: &DenseSubspaceBasis, right: &DenseSubspaceBasis) -> Result<C64> {
    check_pair(left, right)?;
    Ok(log_det(&(left.kets.adjoint() * &right.kets)).value())
}

fn check_pair(a: &DenseSubspaceBasis, b: &DenseSubspaceBasis) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "subspace pair with shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl DenseSubspaceBasis {
    fn shape(&self) -> (usize, usize) {
        self.kets.shape()
    }
}

/// Which subspace quantity a [`SubspaceMatrix`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixRole {
    Oem,
    Ovm,
    Ocm,
    Overlap,
    Fidelity,
    Local,
}

#[derive(Clone, Debug)]
pub struct SubspaceMatrix {
    pub entries: CMat,
    pub role: MatrixRole,
}

impl SubspaceMatrix {
    pub fn new(entries: CMat, role: MatrixRole) -> Self {
        Self { entries, role }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> C64 {
        trace(&self.entries)
    }
}

/// Anything that maps a block of kets `|Φ⟧` to `Â|Φ⟧`.
///
/// Dense matrices implement it directly; row-sparse operators built from
/// lattice connections implement it in [`crate::ed`]. Both feed the same
/// expectation and covariance code below.
pub trait KetOperator {
    fn dim(&self) -> usize;
    fn apply(&self, kets: &CMat) -> CMat;
}

impl KetOperator for CMat {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, kets: &CMat) -> CMat {
        self * kets
    }
}

fn check_op(basis: &DenseSubspaceBasis, op: &dyn KetOperator) -> Result<()> {
    if op.dim() != basis.dim() {
        return Err(Error::ShapeMismatch(format!(
            "operator acts on dim {}, basis lives in dim {}",
            op.dim(),
            basis.dim()
        )));
    }
    Ok(())
}

/// Operator expectation matrix `G⁻¹·⟦Φ|Â|Φ⟧ = ⟦Φ̃|Â|Φ⟧`.
pub fn oem(basis: &DenseSubspaceBasis, op: &dyn KetOperator) -> Result<SubspaceMatrix> {
    check_op(basis, op)?;
    let g = gram(basis)?;
    let a_phi = op.apply(&basis.kets);
    Ok(SubspaceMatrix::new(
        g.solve(&(basis.kets.adjoint() * a_phi)),
        MatrixRole::Oem,
    ))
}

/// Operator covariance matrix `Ã·B̃` subtracted from the OEM of `ÂB̂`;
/// with `op_b = None` this is the operator variance matrix of `Â`.
///
/// Equal to `⟦Φ̃|Â P⊥ B̂|Φ⟧` (see [`ocm_projector_form`]).
pub fn ovm_ocm(
    basis: &DenseSubspaceBasis,
    op_a: &dyn KetOperator,
    op_b: Option<&dyn KetOperator>,
) -> Result<SubspaceMatrix> {
    check_op(basis, op_a)?;
    let op_b = op_b.unwrap_or(op_a);
    check_op(basis, op_b)?;
    let g = gram(basis)?;
    let phi_dag = basis.kets.adjoint();
    let a_phi = op_a.apply(&basis.kets);
    let b_phi = op_b.apply(&basis.kets);
    let ab_phi = op_a.apply(&b_phi);
    let ab = g.solve(&(&phi_dag * ab_phi));
    let a = g.solve(&(&phi_dag * a_phi));
    let b = g.solve(&(&phi_dag * b_phi));
    let role = if std::ptr::eq(
        op_a as *const dyn KetOperator as *const u8,
        op_b as *const dyn KetOperator as *const u8,
    ) {
        MatrixRole::Ovm
    } else {
        MatrixRole::Ocm
    };
    Ok(SubspaceMatrix::new(ab - a * b, role))
}

/// `⟦Φ̃|Â P⊥ B̂|Φ⟧` evaluated with an explicit complementary projection.
pub fn ocm_projector_form(
    basis: &DenseSubspaceBasis,
    op_a: &dyn KetOperator,
    op_b: &dyn KetOperator,
) -> Result<SubspaceMatrix> {
    check_op(basis, op_a)?;
    check_op(basis, op_b)?;
    let g = gram(basis)?;
    let b_perp = project_out(basis, &g, &op_b.apply(&basis.kets));
    let ab = op_a.apply(&b_perp);
    Ok(SubspaceMatrix::new(
        g.solve(&(basis.kets.adjoint() * ab)),
        MatrixRole::Ocm,
    ))
}

#[derive(Clone, Debug)]
pub struct PrincipalDecomposition {
    /// Ascending by real part, ties by imaginary part.
    pub values: Vec<C64>,
    /// Unit-norm eigenvector columns; `|U⟧ = |Φ⟧·X`.
    pub transform: CMat,
    pub degenerate: bool,
}

impl PrincipalDecomposition {
    pub fn reconstruct(&self) -> Option<CMat> {
        let inv = self.transform.clone().try_inverse()?;
        let lam = CMat::from_diagonal(&nalgebra::DVector::from_vec(self.values.clone()));
        Some(&self.transform * lam * inv)
    }

    /// Principal angles `arccos(√f)` for a fidelity decomposition.
    pub fn principal_angles(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|f| f.re.clamp(0.0, 1.0).sqrt().acos())
            .collect()
    }
}

/// Principal values and basis from the eigen-decomposition `F = X·Λ·X⁻¹`.
pub fn principal(matrix: &SubspaceMatrix, gap_tol: f64) -> Result<PrincipalDecomposition> {
    let (vals, x) = general_eigen(&matrix.entries)?;
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vals[a]
            .re
            .total_cmp(&vals[b].re)
            .then(vals[a].im.total_cmp(&vals[b].im))
    });
    let values: Vec<C64> = order.iter().map(|&k| vals[k]).collect();
    let mut transform = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        transform.set_column(dst, &x.column(src));
    }
    let cond = crate::linalg::condition_number(&transform);
    if !(cond <= MAX_EIGVEC_COND) {
        return Err(Error::NonDiagonalizable(cond));
    }
    let degenerate = (0..n).any(|i| ((i + 1)..n).any(|j| (values[i] - values[j]).norm() < gap_tol));
    Ok(PrincipalDecomposition {
        values,
        transform,
        degenerate,
    })
}

/// The two fidelity matrices `F(Φ|Ψ) = ⟦Φ̃|Ψ⟧·⟦Ψ̃|Φ⟧` and `F(Ψ|Φ)`.
pub fn fidelity_matrices(
    a: &DenseSubspaceBasis,
    b: &DenseSubspaceBasis,
) -> Result<(SubspaceMatrix, SubspaceMatrix)> {
    check_pair(a, b)?;
    let ga = gram(a)?;
    let gb = gram(b)?;
    let a_to_b = ga.solve(&(a.kets.adjoint() * &b.kets));
    let b_to_a = gb.solve(&(b.kets.adjoint() * &a.kets));
    Ok((
        SubspaceMatrix::new(&a_to_b * &b_to_a, MatrixRole::Fidelity),
        SubspaceMatrix::new(b_to_a * a_to_b, MatrixRole::Fidelity),
    ))
}

/// Principal fidelities `cos² αᵢ` (ascending), clamped into `[0, 1]`.
pub fn principal_fidelities(a: &DenseSubspaceBasis, b: &DenseSubspaceBasis) -> Result<Vec<f64>> {
    let (f, _) = fidelity_matrices(a, b)?;
    fidelity_eigenvalues(&f.entries)
}

pub(crate) fn fidelity_eigenvalues(f: &CMat) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-10;
    let (vals, _) = general_eigen(f)?;
    let mut out = Vec::with_capacity(vals.len());
    for v in vals {
        if v.re < -TOL {
            return Err(Error::DegenerateSubspace(v.re));
        }
        out.push(v.re.clamp(0.0, 1.0));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Power-mean aggregate of principal fidelities:
/// `((1/N) Σ fᵢ^{p/2})^{2/p}`, with `p = 0` the geometric mean.
pub fn p_fidelity(a: &DenseSubspaceBasis, b: &DenseSubspaceBasis, p: f64) -> Result<f64> {
    Ok(p_mean_of_fidelities(&principal_fidelities(a, b)?, p))
}

pub fn p_mean_of_fidelities(fids: &[f64], p: f64) -> f64 {
    let n = fids.len() as f64;
    if fids.iter().any(|&f| f == 0.0) && p <= 0.0 {
        return 0.0;
    }
    if p == 0.0 {
        // log-sum keeps small products from underflowing
        (fids.iter().map(|f| f.ln()).sum::<f64>() / n).exp()
    } else {
        let m = fids.iter().map(|f| f.powf(p / 2.0)).sum::<f64>() / n;
        m.powf(2.0 / p).clamp(0.0, 1.0)
    }
}

/// A perturbation `δΦ` of a basis, one column per basis ket.
#[derive(Clone, Debug)]
pub struct TangentPerturbation {
    pub kets: CMat,
}

impl TangentPerturbation {
    pub fn new(kets: CMat) -> Self {
        Self { kets }
    }

    /// Removes the components inside the span, giving the canonical gauge
    /// `⟦Φ̃|δΦ⟧ = 0`.
    pub fn canonical(&self, basis: &DenseSubspaceBasis) -> Result<Self> {
        let g = gram(basis)?;
        Ok(Self::new(project_out(basis, &g, &self.kets)))
    }
}

/// Grassmann metric `(1/N)·Tr(G⁻¹·⟦δΦ|P⊥|δΦ′⟧)`.
pub fn metric_inner(
    basis: &DenseSubspaceBasis,
    u: &TangentPerturbation,
    w: &TangentPerturbation,
) -> Result<C64> {
    if u.kets.shape() != basis.kets.shape() || w.kets.shape() != basis.kets.shape() {
        return Err(Error::ShapeMismatch("tangent perturbation shape".into()));
    }
    let g = gram(basis)?;
    let w_perp = project_out(basis, &g, &w.kets);
    let m = g.solve(&(u.kets.adjoint() * w_perp));
    Ok(trace(&m) / basis.n() as f64)
}

/// Submatrix keeping everything except `rows` and `cols`.
pub fn remove_rows_cols(w: &CMat, rows: &[usize], cols: &[usize]) -> CMat {
    let keep_r: Vec<usize> = (0..w.nrows()).filter(|r| !rows.contains(r)).collect();
    let keep_c: Vec<usize> = (0..w.ncols()).filter(|c| !cols.contains(c)).collect();
    CMat::from_fn(keep_r.len(), keep_c.len(), |i, j| w[(keep_r[i], keep_c[j])])
}

/// Submatrix selecting `rows` and `cols` in the given order.
pub fn select_rows_cols(w: &CMat, rows: &[usize], cols: &[usize]) -> CMat {
    CMat::from_fn(rows.len(), cols.len(), |i, j| w[(rows[i], cols[j])])
}

fn distinct_in_range(idx: &[usize], n: usize) -> bool {
    idx.iter().all(|&i| i < n) && (0..idx.len()).all(|a| ((a + 1)..idx.len()).all(|b| idx[a] != idx[b]))
}

/// Complementary minor of `w` for removing `rows` and `cols` (one or two of
/// each), computed from the matching minor of `w⁻¹`:
///
/// `(−1)^{Σrows+Σcols} · det[(w⁻¹)_{cols,rows}] · det w`
///
/// with the selected submatrix of `w⁻¹` taken in the given index order. For
/// increasing index lists this is the determinant of `w` with those rows and
/// columns deleted; reordering either list multiplies it by the parity of
/// the permutation.
pub fn minor_complement(w: &CMat, rows: &[usize], cols: &[usize]) -> Result<C64> {
    let n = w.nrows();
    if !w.is_square()
        || rows.len() != cols.len()
        || !(1..=2).contains(&rows.len())
        || !distinct_in_range(rows, n)
        || !distinct_in_range(cols, n)
    {
        return Err(Error::ShapeMismatch(format!(
            "minor of a {}x{} matrix removing rows {rows:?} and cols {cols:?}",
            w.nrows(),
            w.ncols()
        )));
    }
    let ld = log_det(w);
    if ld.is_zero() || !ld.log_abs.is_finite() {
        return Err(Error::SingularInput);
    }
    let inv = crate::linalg::Factorized::new(w.clone())
        .inverse()
        .map_err(|_| Error::SingularInput)?;
    let sub = select_rows_cols(&inv, cols, rows);
    let parity: usize = rows.iter().chain(cols.iter()).sum();
    let sign = if parity % 2 == 0 { ONE } else { -ONE };
    Ok(sign * sub.determinant() * ld.value())
}

/// The two-row identity evaluated in two nested single-row steps: remove
/// `(i1, j1)`, then `(i2, j2)` at their shifted positions inside the
/// remaining submatrix. Independent of the order the pairs are listed in.
pub fn minor_two_step(w: &CMat, rows: [usize; 2], cols: [usize; 2]) -> Result<C64> {
    let [i1, i2] = rows;
    let [j1, j2] = cols;
    let first = minor_complement(w, &[i1], &[j1])?;
    let sub = remove_rows_cols(w, &[i1], &[j1]);
    let i2p = if i2 > i1 { i2 - 1 } else { i2 };
    let j2p = if j2 > j1 { j2 - 1 } else { j2 };
    let sub_inv = crate::linalg::Factorized::new(sub)
        .inverse()
        .map_err(|_| Error::SingularInput)?;
    let sign = if (i2p + j2p) % 2 == 0 { ONE } else { -ONE };
    Ok(sign * sub_inv[(j2p, i2p)] * first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, random_complex_matrix, random_hermitian, ZERO};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_basis(r: &mut ChaCha8Rng, dim: usize, n: usize) -> DenseSubspaceBasis {
        DenseSubspaceBasis::new(random_complex_matrix(r, dim, n)).unwrap()
    }

    fn identity_columns(dim: usize, n: usize) -> DenseSubspaceBasis {
        DenseSubspaceBasis::new(CMat::identity(dim, n)).unwrap()
    }

    #[test]
    fn gram_of_orthonormal_columns_is_identity() {
        let g = gram(&identity_columns(5, 3)).unwrap();
        assert!(max_abs_diff(g.entries(), &CMat::identity(3, 3)) < 1e-15);
    }

    #[test]
    fn gram_of_single_ones_column() {
        let b = DenseSubspaceBasis::new(CMat::from_element(2, 1, ONE)).unwrap();
        assert!((gram(&b).unwrap().entries()[(0, 0)] - C64::new(2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gram_matches_adjoint_product() {
        let mut r = rng(1);
        let b = random_basis(&mut r, 8, 3);
        let g = gram(&b).unwrap();
        let mut direct = CMat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                direct[(i, j)] = (0..8).map(|k| b.kets()[(k, i)].conj() * b.kets()[(k, j)]).sum();
            }
        }
        assert!(max_abs_diff(g.entries(), &direct) < 1e-12);
        assert!(max_abs_diff(g.entries(), &g.entries().adjoint()) < 1e-12);
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        let mut k = CMat::zeros(4, 2);
        k[(0, 0)] = ONE;
        k[(0, 1)] = C64::new(2.0, 0.0);
        assert!(matches!(DenseSubspaceBasis::new(k), Err(Error::RankDeficient(_))));
        assert!(DenseSubspaceBasis::new(CMat::zeros(2, 3)).is_err());
    }

    #[test]
    fn ill_conditioned_gram_is_singular() {
        let mut k = CMat::identity(3, 2);
        k[(0, 1)] = ONE;
        k[(1, 1)] = C64::new(1e-7, 0.0);
        let b = DenseSubspaceBasis::new(k).unwrap();
        assert!(matches!(gram(&b), Err(Error::SingularGram(_))));
    }

    #[test]
    fn dual_basis_cases() {
        let ortho = identity_columns(4, 2);
        assert!(max_abs_diff(dual_basis(&ortho).unwrap().kets(), ortho.kets()) < 1e-15);

        let mut k = CMat::zeros(3, 1);
        k[(0, 0)] = C64::new(2.0, 0.0);
        let d = dual_basis(&DenseSubspaceBasis::new(k).unwrap()).unwrap();
        assert!((d.kets()[(0, 0)] - C64::new(0.5, 0.0)).norm() < 1e-15);

        let mut r = rng(2);
        let b = random_basis(&mut r, 7, 3);
        let d = dual_basis(&b).unwrap();
        assert!(max_abs_diff(&(d.kets().adjoint() * b.kets()), &CMat::identity(3, 3)) < 1e-10);
        // dual columns stay inside the span
        let p = projector(&b).unwrap();
        assert!(max_abs_diff(&(&p * d.kets()), d.kets()) < 1e-10);
    }

    #[test]
    fn projector_of_full_space_is_identity() {
        let mut r = rng(3);
        let b = random_basis(&mut r, 4, 4);
        assert!(max_abs_diff(&projector(&b).unwrap(), &CMat::identity(4, 4)) < 1e-10);
    }

    #[test]
    fn projector_is_gauge_invariant_under_column_rescaling() {
        let mut r = rng(4);
        let b = random_basis(&mut r, 6, 3);
        let mut k = b.kets().clone();
        k.column_mut(1).scale_mut(3.0);
        let b3 = DenseSubspaceBasis::new(k).unwrap();
        assert!(max_abs_diff(&projector(&b).unwrap(), &projector(&b3).unwrap()) < 1e-12);
    }

    #[test]
    fn wedge_overlap_cases() {
        let o = identity_columns(5, 3);
        assert!((wedge_overlap(&o, &o).unwrap() - ONE).norm() < 1e-15);

        let mut r = rng(5);
        let a = random_basis(&mut r, 6, 3);
        let b = random_basis(&mut r, 6, 3);
        let w = wedge_overlap(&a, &b).unwrap();
        let direct = (a.kets().adjoint() * b.kets()).determinant();
        assert!((w - direct).norm() < 1e-12 * direct.norm().max(1.0));

        let mut k = b.kets().clone();
        k.swap_columns(0, 2);
        let swapped = DenseSubspaceBasis::new(k).unwrap();
        assert!((wedge_overlap(&a, &swapped).unwrap() + w).norm() < 1e-12);
    }

    #[test]
    fn oem_of_eigenbasis_is_diagonal() {
        let mut r = rng(6);
        let h = random_hermitian(&mut r, 5);
        let (vals, vecs) = hermitian_eigen(&h);
        let b = DenseSubspaceBasis::new(vecs.columns(1, 2).into_owned()).unwrap();
        let a = oem(&b, &h).unwrap();
        let expect = CMat::from_diagonal(&DVector::from_vec(vec![
            C64::new(vals[1], 0.0),
            C64::new(vals[2], 0.0),
        ]));
        assert!(max_abs_diff(&a.entries, &expect) < 1e-10);
    }

    #[test]
    fn oem_single_state_is_expectation() {
        let mut r = rng(7);
        let h = random_hermitian(&mut r, 4);
        let b = random_basis(&mut r, 4, 1);
        let v = b.kets().column(0);
        let expect = (v.adjoint() * &h * v)[(0, 0)] / v.norm_squared();
        assert!((oem(&b, &h).unwrap().entries[(0, 0)] - expect).norm() < 1e-12);
    }

    #[test]
    fn oem_is_similarity_equivariant() {
        let mut r = rng(8);
        let h = random_hermitian(&mut r, 6);
        let b = random_basis(&mut r, 6, 3);
        let x = random_complex_matrix(&mut r, 3, 3);
        let xinv = x.clone().try_inverse().unwrap();
        let lhs = oem(&b.transformed(&x).unwrap(), &h).unwrap().entries;
        let rhs = &xinv * oem(&b, &h).unwrap().entries * &x;
        assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn ovm_vanishes_on_invariant_subspace_and_identity() {
        let mut r = rng(9);
        let h = random_hermitian(&mut r, 5);
        let (_, vecs) = hermitian_eigen(&h);
        let b = DenseSubspaceBasis::new(vecs.columns(0, 2).into_owned() * random_complex_matrix(&mut r, 2, 2)).unwrap();
        assert!(ovm_ocm(&b, &h, None).unwrap().entries.norm() < 1e-9);
        let id = CMat::identity(5, 5);
        let b2 = random_basis(&mut r, 5, 2);
        assert!(ovm_ocm(&b2, &id, None).unwrap().entries.norm() < 1e-10);
    }

    #[test]
    fn ovm_difference_and_projector_forms_agree() {
        let mut r = rng(10);
        for _ in 0..10 {
            let a = random_hermitian(&mut r, 6);
            let bop = random_complex_matrix(&mut r, 6, 6);
            let b = random_basis(&mut r, 6, 3);
            let d = ovm_ocm(&b, &a, Some(&bop)).unwrap();
            assert_eq!(d.role, MatrixRole::Ocm);
            let p = ocm_projector_form(&b, &a, &bop).unwrap();
            assert!(max_abs_diff(&d.entries, &p.entries) < 1e-9);
            let v = ovm_ocm(&b, &a, None).unwrap();
            assert_eq!(v.role, MatrixRole::Ovm);
            let (vals, _) = general_eigen(&v.entries).unwrap();
            for l in vals {
                assert!(l.re >= -1e-10 && l.im.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ovm_diagonal_in_principal_basis_is_pure_state_variance() {
        let mut r = rng(11);
        let h = random_hermitian(&mut r, 7);
        let b = random_basis(&mut r, 7, 3);
        let dec = principal(&oem(&b, &h).unwrap(), 1e-8).unwrap();
        let u = b.transformed(&dec.transform).unwrap();
        let sigma = ovm_ocm(&u, &h, None).unwrap();
        for i in 0..3 {
            let ui = u.kets().column(i);
            let n2 = ui.norm_squared();
            let e = (ui.adjoint() * &h * ui)[(0, 0)].re / n2;
            let e2 = (ui.adjoint() * &h * &h * ui)[(0, 0)].re / n2;
            assert!((sigma.entries[(i, i)].re - (e2 - e * e)).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_sorts_and_flags() {
        let d = CMat::from_diagonal(&DVector::from_vec(vec![C64::new(3.0, 0.0), ONE]));
        let p = principal(&SubspaceMatrix::new(d, MatrixRole::Oem), 1e-8).unwrap();
        assert_eq!(p.values, vec![ONE, C64::new(3.0, 0.0)]);
        assert!((p.transform[(1, 0)].norm() - 1.0).abs() < 1e-15);
        assert!((p.transform[(0, 1)].norm() - 1.0).abs() < 1e-15);
        assert!(!p.degenerate);

        let p = principal(&SubspaceMatrix::new(CMat::identity(2, 2), MatrixRole::Oem), 1e-8).unwrap();
        assert_eq!(p.values, vec![ONE, ONE]);
        assert!(p.degenerate);
    }

    #[test]
    fn principal_recovers_exact_eigenvalues() {
        let mut r = rng(12);
        let h = random_hermitian(&mut r, 6);
        let (vals, vecs) = hermitian_eigen(&h);
        let x = random_complex_matrix(&mut r, 2, 2);
        let b = DenseSubspaceBasis::new(vecs.columns(0, 2).into_owned() * x).unwrap();
        let m = oem(&b, &h).unwrap();
        let p = principal(&m, 1e-8).unwrap();
        assert!((p.values[0].re - vals[0]).abs() < 1e-9);
        assert!((p.values[1].re - vals[1]).abs() < 1e-9);
        let rec = p.reconstruct().unwrap();
        assert!(max_abs_diff(&rec, &m.entries) < 1e-8 * m.entries.norm());
    }

    #[test]
    fn principal_rejects_jordan_block() {
        let j = CMat::from_row_slice(2, 2, &[ONE, ONE, ZERO, ONE]);
        assert!(matches!(
            principal(&SubspaceMatrix::new(j, MatrixRole::Oem), 1e-8),
            Err(Error::NonDiagonalizable(_))
        ));
    }

    #[test]
    fn fidelity_cases() {
        let mut r = rng(13);
        let a = random_basis(&mut r, 6, 2);
        let (f1, f2) = fidelity_matrices(&a, &a).unwrap();
        assert!(max_abs_diff(&f1.entries, &CMat::identity(2, 2)) < 1e-10);
        assert!(max_abs_diff(&f2.entries, &CMat::identity(2, 2)) < 1e-10);

        let e = identity_columns(4, 2);
        let mut k = CMat::zeros(4, 2);
        k[(2, 0)] = ONE;
        k[(3, 1)] = ONE;
        let perp = DenseSubspaceBasis::new(k).unwrap();
        let (f1, f2) = fidelity_matrices(&e, &perp).unwrap();
        assert!(f1.entries.norm() < 1e-15 && f2.entries.norm() < 1e-15);

        for _ in 0..10 {
            let a = random_basis(&mut r, 7, 3);
            let b = random_basis(&mut r, 7, 3);
            let (f1, f2) = fidelity_matrices(&a, &b).unwrap();
            let l1 = fidelity_eigenvalues(&f1.entries).unwrap();
            let l2 = fidelity_eigenvalues(&f2.entries).unwrap();
            for (x, y) in l1.iter().zip(&l2) {
                assert!((x - y).abs() < 1e-9);
                assert!((0.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn p_fidelity_cases() {
        let mut r = rng(14);
        let a = random_basis(&mut r, 6, 3);
        for p in [0.0, 0.5, 1.0, 2.0, 4.0] {
            assert!((p_fidelity(&a, &a, p).unwrap() - 1.0).abs() < 1e-9);
        }
        let u = random_basis(&mut r, 6, 1);
        let v = random_basis(&mut r, 6, 1);
        let (x, y) = (u.kets().column(0), v.kets().column(0));
        let pure = (x.dotc(&y)).norm_sqr() / (x.norm_squared() * y.norm_squared());
        for p in [0.0, 1.0, 2.0] {
            assert!((p_fidelity(&u, &v, p).unwrap() - pure).abs() < 1e-10);
        }
        for _ in 0..10 {
            let a = random_basis(&mut r, 7, 3);
            let b = random_basis(&mut r, 7, 3);
            let w = wedge_overlap(&a, &b).unwrap().norm_sqr();
            let na = wedge_overlap(&a, &a).unwrap().re;
            let nb = wedge_overlap(&b, &b).unwrap().re;
            let expect = (w / (na * nb)).powf(1.0 / 3.0);
            assert!((p_fidelity(&a, &b, 0.0).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_inner_cases() {
        let mut r = rng(15);
        let b = random_basis(&mut r, 6, 2);
        let inside = TangentPerturbation::new(b.kets() * random_complex_matrix(&mut r, 2, 2));
        let w = TangentPerturbation::new(random_complex_matrix(&mut r, 6, 2));
        assert!(metric_inner(&b, &inside, &w).unwrap().norm() < 1e-12);

        let phi = identity_columns(4, 1);
        let du = TangentPerturbation::new(random_complex_matrix(&mut r, 4, 1));
        let dw = TangentPerturbation::new(random_complex_matrix(&mut r, 4, 1));
        let mut pu = du.kets.clone();
        let mut pw = dw.kets.clone();
        pu[(0, 0)] = ZERO;
        pw[(0, 0)] = ZERO;
        let fs = pu.column(0).dotc(&pw.column(0));
        assert!((metric_inner(&phi, &du, &dw).unwrap() - fs).norm() < 1e-12);

        let u = TangentPerturbation::new(random_complex_matrix(&mut r, 6, 2));
        let uw = metric_inner(&b, &u, &w).unwrap();
        let wu = metric_inner(&b, &w, &u).unwrap();
        assert!((uw - wu.conj()).norm() < 1e-12);
        let canon = w.canonical(&b).unwrap();
        assert!((dual_basis(&b).unwrap().kets().adjoint() * &canon.kets).norm() < 1e-10);
    }

    #[test]
    fn minor_complement_cases() {
        let w = CMat::from_row_slice(
            2,
            2,
            &[C64::new(1.0, 2.0), C64::new(3.0, 0.0), C64::new(-1.0, 0.5), C64::new(2.0, -1.0)],
        );
        let m = minor_complement(&w, &[0], &[0]).unwrap();
        assert!((m - w[(1, 1)]).norm() < 1e-14);
        let winv = w.clone().try_inverse().unwrap();
        assert!((m - winv[(0, 0)] * w.determinant()).norm() < 1e-14);

        let mut r = rng(16);
        let w4 = random_complex_matrix(&mut r, 4, 4);
        let a = minor_complement(&w4, &[1, 3], &[0, 2]).unwrap();
        let b = minor_complement(&w4, &[3, 1], &[0, 2]).unwrap();
        assert!((a + b).norm() < 1e-12);
        let direct = remove_rows_cols(&w4, &[1, 3], &[0, 2]).determinant();
        assert!((a - direct).norm() < 1e-10 * direct.norm().max(1e-300));
        let two = minor_two_step(&w4, [3, 1], [2, 0]).unwrap();
        assert!((two - direct).norm() < 1e-10 * direct.norm());
    }

    #[test]
    fn minor_complement_rejects_bad_input() {
        let z = CMat::zeros(3, 3);
        assert!(matches!(minor_complement(&z, &[0], &[0]), Err(Error::SingularInput)));
        let w = CMat::identity(3, 3);
        assert!(minor_complement(&w, &[0, 0], &[1, 2]).is_err());
        assert!(minor_complement(&w, &[0], &[1, 2]).is_err());
    }

    #[test]
    fn oem_trace_and_projector_invariance_on_random_transforms() {
        let mut r = rng(17);
        for _ in 0..100 {
            let h = random_hermitian(&mut r, 6);
            let b = random_basis(&mut r, 6, 3);
            let x = random_complex_matrix(&mut r, 3, 3);
            let bx = b.transformed(&x).unwrap();
            let t1 = oem(&b, &h).unwrap().trace();
            let t2 = oem(&bx, &h).unwrap().trace();
            assert!((t1 - t2).norm() < 1e-9);
            let p = projector(&b).unwrap();
            assert!(max_abs_diff(&p, &projector(&bx).unwrap()) < 1e-10);
            assert!(max_abs_diff(&(&p * &p), &p) < 1e-10);
            assert!((trace(&p) - C64::new(3.0, 0.0)).norm() < 1e-10);
            assert!(max_abs_diff(&p, &p.adjoint()) < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn p_fidelity_is_nondecreasing_in_p(seed in any::<u64>(), n in 1usize..4) {
            let mut r = rng(seed);
            let a = random_basis(&mut r, 6, n);
            let b = random_basis(&mut r, 6, n);
            let fids = principal_fidelities(&a, &b).unwrap();
            let mut last = 0.0;
            for p in [-1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 8.0] {
                let v = p_mean_of_fidelities(&fids, p);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v >= last - 1e-12);
                last = v;
            }
        }
    }
}
