//! Exact diagonalization in fixed-magnetization sectors.
//!
//! Small sectors are diagonalized densely. Larger ones use Lanczos with full
//! reorthogonalization, locking one converged eigenvector at a time so that
//! degenerate levels are resolved with their multiplicity.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grassmann::{oem, DenseSubspaceBasis, KetOperator, SubspaceMatrix};
use crate::lattice::{dense_matrix, LatticeGeometry, LocalOperator, Momentum, SectorIndex};
use crate::linalg::{hermitian_eigen, CMat, CVec, C64, ZERO};

/// Largest sector handled at all.
pub const MAX_SECTOR_DIM: usize = 20_000;
/// Sectors up to this size are diagonalized densely by default.
pub const DENSE_LIMIT: usize = 1_000;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const ORTHO_TOL: f64 = 1e-10;

/// A local operator applied matrix-free on a sector:
/// `(A·v)(s) = Σ_{s′} ⟨s|Â|s′⟩·v(s′)`.
pub struct SectorOperator<'a> {
    pub op: &'a dyn LocalOperator,
    pub sector: &'a SectorIndex,
}

impl SectorOperator<'_> {
    pub fn apply_vec(&self, v: &CVec) -> Result<CVec> {
        let configs = self.sector.configs();
        let rows: Vec<C64> = configs
            .par_iter()
            .map(|s| {
                let mut acc = ZERO;
                for (s2, amp) in self.op.connections(s)? {
                    let j = self.sector.position(&s2).ok_or_else(|| {
                        Error::ShapeMismatch("operator leaves the sector".into())
                    })?;
                    acc += amp * v[j];
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Ok(CVec::from_vec(rows))
    }
}

impl KetOperator for SectorOperator<'_> {
    fn dim(&self) -> usize {
        self.sector.len()
    }

    fn apply(&self, kets: &CMat) -> CMat {
        let mut out = CMat::zeros(kets.nrows(), kets.ncols());
        for j in 0..kets.ncols() {
            let v = self
                .apply_vec(&kets.column(j).into_owned())
                .expect("operator must stay inside its sector");
            out.set_column(j, &v);
        }
        out
    }
}

/// The `k` lowest eigenpairs of an operator on one sector.
#[derive(Clone, Debug)]
pub struct SpectrumResult {
    /// Ascending.
    pub energies: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub vectors: CMat,
}

impl SpectrumResult {
    pub fn basis(&self) -> Result<DenseSubspaceBasis> {
        DenseSubspaceBasis::new(self.vectors.clone())
    }

    /// Span of the first `n` eigenvectors.
    pub fn lowest_span(&self, n: usize) -> Result<DenseSubspaceBasis> {
        DenseSubspaceBasis::new(self.vectors.columns(0, n).into_owned())
    }

    /// Groups levels closer than `tol` into `(energy, degeneracy)`.
    pub fn levels(&self, tol: f64) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &e in &self.energies {
            match out.last_mut() {
                Some((e0, d)) if (e - *e0).abs() < tol => *d += 1,
                _ => out.push((e, 1)),
            }
        }
        out
    }

    /// Writes `level,energy,degeneracy` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, tol: f64) -> Result<()> {
        writeln!(w, "level,energy,degeneracy")?;
        for (i, (e, d)) in self.levels(tol).into_iter().enumerate() {
            writeln!(w, "{i},{e:.12},{d}")?;
        }
        Ok(())
    }

    /// Residual `‖Hv − λv‖` of every pair and `max |V†V − 1|`.
    pub fn check(&self, op: &SectorOperator<'_>) -> Result<(Vec<f64>, f64)> {
        let mut res = Vec::with_capacity(self.energies.len());
        for (j, &e) in self.energies.iter().enumerate() {
            let v = self.vectors.column(j).into_owned();
            res.push((op.apply_vec(&v)? - v * C64::new(e, 0.0)).norm());
        }
        let k = self.vectors.ncols();
        let ortho = (self.vectors.adjoint() * &self.vectors - CMat::identity(k, k)).camax();
        Ok((res, ortho))
    }
}

fn validate(result: SpectrumResult, op: &SectorOperator<'_>, iterations: usize) -> Result<SpectrumResult> {
    let (res, ortho) = result.check(op)?;
    let scale = result.energies.iter().fold(1.0f64, |m, e| m.max(e.abs()));
    if res.iter().any(|r| *r > RESIDUAL_TOL * scale) || ortho > ORTHO_TOL {
        return Err(Error::NoConvergence(iterations));
    }
    Ok(result)
}

/// Dense diagonalization; returns the `k` lowest pairs.
pub fn lowest_k_dense(op: &dyn LocalOperator, sector: &SectorIndex, k: usize) -> Result<SpectrumResult> {
    if sector.len() > MAX_SECTOR_DIM {
        return Err(Error::SectorTooLarge(sector.len()));
    }
    let h = dense_matrix(op, sector)?;
    let (vals, vecs) = hermitian_eigen(&h);
    let k = k.min(sector.len());
    let result = SpectrumResult {
        energies: vals.iter().take(k).copied().collect(),
        vectors: vecs.columns(0, k).into_owned(),
    };
    validate(result, &SectorOperator { op, sector }, 0)
}

#[derive(Clone, Debug)]
pub struct LanczosSettings {
    /// Krylov dimension per restart.
    pub krylov_dim: usize,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for LanczosSettings {
    fn default() -> Self {
        Self {
            krylov_dim: 120,
            max_restarts: 60,
            seed: 0,
        }
    }
}

fn orthogonalize(v: &mut CVec, against: &[CVec]) {
    // two passes of classical Gram–Schmidt
    for _ in 0..2 {
        for u in against {
            let c = u.dotc(v);
            v.axpy(-c, u, C64::new(1.0, 0.0));
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, against: &[CVec]) -> CVec {
    let mut v = CVec::from_fn(dim, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    orthogonalize(&mut v, against);
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Lowest Ritz pair of one Lanczos run started from `start`, restricted to
/// the orthogonal complement of `locked`.
fn lanczos_run(op: &SectorOperator<'_>, start: CVec, locked: &[CVec], m: usize) -> Result<(f64, CVec, f64)> {
    let mut basis: Vec<CVec> = vec![start];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    loop {
        let j = basis.len() - 1;
        let mut w = op.apply_vec(&basis[j])?;
        let a = basis[j].dotc(&w).re;
        alpha.push(a);
        orthogonalize(&mut w, locked);
        orthogonalize(&mut w, &basis);
        let b = w.norm();
        if basis.len() >= m || b < 1e-12 {
            break;
        }
        beta.push(b);
        basis.push(w / C64::new(b, 0.0));
    }
    let k = alpha.len();
    let t = CMat::from_fn(k, k, |i, j| {
        if i == j {
            C64::new(alpha[i], 0.0)
        } else if i + 1 == j {
            C64::new(beta[i], 0.0)
        } else if j + 1 == i {
            C64::new(beta[j], 0.0)
        } else {
            ZERO
        }
    });
    let (vals, vecs) = hermitian_eigen(&t);
    let mut ritz = CVec::zeros(basis[0].len());
    for (i, b) in basis.iter().enumerate().take(k) {
        ritz.axpy(vecs[(i, 0)], b, C64::new(1.0, 0.0));
    }
    orthogonalize(&mut ritz, locked);
    let norm = ritz.norm();
    let ritz = ritz / C64::new(norm, 0.0);
    let residual = (op.apply_vec(&ritz)? - &ritz * C64::new(vals[0], 0.0)).norm();
    Ok((vals[0], ritz, residual))
}

/// Lanczos with full reorthogonalization and one-at-a-time locking.
pub fn lowest_k_krylov(op: &dyn LocalOperator, sector: &SectorIndex, k: usize, settings: &LanczosSettings) -> Result<SpectrumResult> {
    let dim = sector.len();
    if dim > MAX_SECTOR_DIM {
        return Err(Error::SectorTooLarge(dim));
    }
    let k = k.min(dim);
    let sop = SectorOperator { op, sector };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut locked: Vec<CVec> = Vec::with_capacity(k);
    let mut iterations = 0;
    while locked.len() < k {
        let m = settings.krylov_dim.min(dim - locked.len()).max(1);
        let mut start = random_unit(&mut rng, dim, &locked);
        let mut done = false;
        for _ in 0..settings.max_restarts {
            iterations += 1;
            let (e, v, r) = lanczos_run(&sop, start, &locked, m)?;
            if r < 0.1 * RESIDUAL_TOL * e.abs().max(1.0) {
                locked.push(v);
                done = true;
                break;
            }
            start = v;
        }
        if !done {
            return Err(Error::NoConvergence(iterations));
        }
    }
    // Rayleigh–Ritz inside the locked span fixes the ordering and mixes
    // near-degenerate partners consistently
    let v = CMat::from_columns(&locked);
    let hv = sop.apply(&v);
    let (vals, u) = hermitian_eigen(&(v.adjoint() * hv));
    let result = SpectrumResult {
        energies: vals.iter().copied().collect(),
        vectors: v * u,
    };
    validate(result, &sop, iterations)
}

/// Dense for small sectors, Lanczos otherwise.
pub fn lowest_k(op: &dyn LocalOperator, sector: &SectorIndex, k: usize, seed: u64) -> Result<SpectrumResult> {
    if sector.len() <= DENSE_LIMIT {
        lowest_k_dense(op, sector, k)
    } else {
        lowest_k_krylov(
            op,
            sector,
            k,
            &LanczosSettings {
                seed,
                ..Default::default()
            },
        )
    }
}

/// Projector onto a translation (and optionally spin-flip) symmetry sector,
/// in the convention of the symmetrized ansatz:
/// `(P·g)(s) = (1/|G|)·Σ_{t,f} e^{−iq·t}·χ_f·g(F^f T_t s)`.
pub fn symmetry_projector(geom: &LatticeGeometry, sector: &SectorIndex, q: Momentum, spin_flip: Option<u8>) -> Result<CMat> {
    let dim = sector.len();
    if dim > DENSE_LIMIT * 5 {
        return Err(Error::SectorTooLarge(dim));
    }
    let translations = geom.translations();
    let flips: &[bool] = if spin_flip.is_some() { &[false, true] } else { &[false] };
    let count = (translations.len() * flips.len()) as f64;
    let mut p = CMat::zeros(dim, dim);
    for (i, s) in sector.configs().iter().enumerate() {
        for &t in &translations {
            let ts = s.translated(geom, t);
            for &f in flips {
                let img = if f { ts.flipped() } else { ts.clone() };
                let j = sector
                    .position(&img)
                    .ok_or_else(|| Error::ShapeMismatch("spin flip leaves the sector; use Sz = 0".into()))?;
                let mut phase = -q.phase_angle(geom, t);
                if f && spin_flip == Some(1) {
                    phase += std::f64::consts::PI;
                }
                p[(i, j)] += C64::from_polar(1.0 / count, phase);
            }
        }
    }
    Ok(p)
}

/// Lowest `k` levels inside one symmetry sector (dense).
pub fn lowest_k_symmetric(
    op: &dyn LocalOperator,
    geom: &LatticeGeometry,
    sector: &SectorIndex,
    q: Momentum,
    spin_flip: Option<u8>,
    k: usize,
) -> Result<SpectrumResult> {
    let p = symmetry_projector(geom, sector, q, spin_flip)?;
    let (pv, pu) = hermitian_eigen(&p);
    let keep: Vec<usize> = (0..pv.len()).filter(|&i| pv[i] > 0.5).collect();
    if keep.is_empty() {
        return Ok(SpectrumResult {
            energies: Vec::new(),
            vectors: CMat::zeros(sector.len(), 0),
        });
    }
    let v = CMat::from_fn(sector.len(), keep.len(), |r, c| pu[(r, keep[c])]);
    let h = dense_matrix(op, sector)?;
    let (vals, u) = hermitian_eigen(&(v.adjoint() * &h * &v));
    let k = k.min(keep.len());
    let result = SpectrumResult {
        energies: vals.iter().take(k).copied().collect(),
        vectors: (v * u).columns(0, k).into_owned(),
    };
    validate(result, &SectorOperator { op, sector }, 0)
}

/// `⟨v|Â|v⟩ / ⟨v|v⟩`.
pub fn exact_expectation(op: &dyn LocalOperator, sector: &SectorIndex, v: &CVec) -> Result<C64> {
    let av = SectorOperator { op, sector }.apply_vec(v)?;
    Ok(v.dotc(&av) / v.norm_squared())
}

/// OEM of a local operator on a dense subspace of the sector.
pub fn exact_oem(op: &dyn LocalOperator, sector: &SectorIndex, basis: &DenseSubspaceBasis) -> Result<SubspaceMatrix> {
    oem(basis, &SectorOperator { op, sector })
}

/// Checks that the span of the `n` lowest eigenvectors has a strictly
/// lower scalar energy `(1/N)·Tr OEM(Ĥ)` than `trials` random subspaces.
pub fn grassmann_optimality_check(op: &dyn LocalOperator, sector: &SectorIndex, n: usize, trials: usize, seed: u64) -> Result<bool> {
    let h = dense_matrix(op, sector)?;
    let dim = sector.len();
    let (vals, vecs) = hermitian_eigen(&h);
    let best: f64 = vals.iter().take(n).sum::<f64>() / n as f64;
    let exact = DenseSubspaceBasis::new(vecs.columns(0, n).into_owned())?;
    let e_exact = (oem(&exact, &h)?.trace() / n as f64).re;
    if (e_exact - best).abs() > 1e-9 * best.abs().max(1.0) {
        return Ok(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let basis = DenseSubspaceBasis::new(crate::linalg::random_complex_matrix(&mut rng, dim, n))?;
        let e = (oem(&basis, &h)?.trace() / n as f64).re;
        let full = n == dim;
        if !(e > e_exact || (full && (e - e_exact).abs() < 1e-9 * e_exact.abs().max(1.0))) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{marshall_gauge, Heisenberg, StructureFactorOp};

    fn heis(lx: usize, ly: usize) -> (LatticeGeometry, Heisenberg, SectorIndex) {
        let g = LatticeGeometry::new(lx, ly).unwrap();
        let s = SectorIndex::sector(&g, 0);
        (g.clone(), Heisenberg::new(g), s)
    }

    #[test]
    fn two_site_singlet_and_triplet() {
        let (_, h, s) = heis(2, 1);
        let r = lowest_k(&h, &s, 2, 0).unwrap();
        assert!((r.energies[0] + 0.75).abs() < 1e-12 && (r.energies[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn four_site_ring_ground_state() {
        let (_, h, s) = heis(4, 1);
        assert!((lowest_k(&h, &s, 1, 0).unwrap().energies[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn krylov_matches_dense_with_degeneracies() {
        for (lx, ly) in [(6, 1), (8, 1), (2, 3)] {
            let (_, h, s) = heis(lx, ly);
            let d = lowest_k_dense(&h, &s, 5).unwrap();
            let k = lowest_k_krylov(&h, &s, 5, &LanczosSettings::default()).unwrap();
            for (a, b) in d.energies.iter().zip(&k.energies) {
                assert!((a - b).abs() < 1e-8, "{lx}x{ly}: {:?} vs {:?}", d.energies, k.energies);
            }
        }
    }

    #[test]
    fn marshall_conjugation_preserves_spectrum() {
        let (g, h, s) = heis(4, 2);
        let m = dense_matrix(&h, &s).unwrap();
        let signs: Vec<f64> = s.configs().iter().map(|c| marshall_gauge(&g, c).unwrap() as f64).collect();
        let gauged = CMat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * signs[i] * signs[j]);
        let (a, _) = hermitian_eigen(&m);
        let (b, _) = hermitian_eigen(&gauged);
        assert!((a - b).amax() < 1e-10);
        // the gauged matrix is stoquastic on a bipartite lattice
        assert!(gauged.iter().enumerate().all(|(k, z)| k % (m.nrows() + 1) == 0 || z.re <= 1e-14));
    }

    #[test]
    fn symmetry_sectors_partition_the_spectrum() {
        let (g, h, s) = heis(4, 1);
        let full = lowest_k_dense(&h, &s, s.len()).unwrap().energies;
        let mut parts = Vec::new();
        for mx in 0..4 {
            for f in [0u8, 1] {
                parts.extend(lowest_k_symmetric(&h, &g, &s, Momentum::new(&g, mx, 0), Some(f), 10).unwrap().energies);
            }
        }
        parts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(parts.len(), full.len());
        for (a, b) in parts.iter().zip(&full) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn singlet_structure_factor_and_eigen_span_oem() {
        let (g, h, s) = heis(2, 1);
        let r = lowest_k(&h, &s, 2, 0).unwrap();
        let op = StructureFactorOp {
            geom: g.clone(),
            k: Momentum::new(&g, 1, 0),
        };
        let v = r.vectors.column(0).into_owned();
        // ⟨S†S⟩ with S the (non-Hermitian in general) Fourier amplitude
        let sv = SectorOperator { op: &op, sector: &s }.apply_vec(&v).unwrap();
        assert!((sv.norm_squared() - 0.5).abs() < 1e-12);
        let m = exact_oem(&h, &s, &r.basis().unwrap()).unwrap();
        assert!((m.entries[(0, 0)].re + 0.75).abs() < 1e-12 && m.entries[(0, 1)].norm() < 1e-12);
        let e = exact_expectation(&h, &s, &v).unwrap();
        assert!((e.re + 0.75).abs() < 1e-12);
    }

    #[test]
    fn eigen_span_beats_random_subspaces() {
        let (_, h, s) = heis(4, 1);
        assert!(grassmann_optimality_check(&h, &s, 2, 100, 1).unwrap());
        assert!(grassmann_optimality_check(&h, &s, 1, 20, 2).unwrap());
        assert!(grassmann_optimality_check(&h, &s, s.len(), 5, 3).unwrap());
    }

    #[test]
    fn spectrum_csv_groups_degenerate_levels() {
        let r = SpectrumResult {
            energies: vec![-1.0, 0.5, 0.5 + 1e-12, 2.0],
            vectors: CMat::identity(4, 4),
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf, 1e-9).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,0.500000000000,2");
        assert_eq!(text.lines().count(), 4);
    }
}
