//! Monte Carlo estimators over determinant-sampled tuples.
//!
//! Every estimator is a function of batch means of per-sample features
//! (local-matrix entries and their products). Error bars are jackknife
//! errors over blocks: chains when there are enough of them, otherwise
//! contiguous bins (see [`crate::stats::block_ids`]).
//!
//! Covariances use `Cov[x, y] = E[x*·y] − E[x]*·E[y]`. Matrix covariances
//! are jackknife bias-corrected over blocks, which for independent samples
//! in singleton blocks is the usual `n/(n−1)` normalization; scalar
//! variances use `n/(n−1)` directly.

pub mod oracle;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grassmann::{principal, MatrixRole, SubspaceMatrix};
use crate::lattice::{LatticeGeometry, LocalOperator, Momentum, StructureFactorOp};
use crate::linalg::{trace, CMat, C64, RMat, ZERO};
use crate::sampler::{Batch, SampledTuple};
use crate::stats::{block_ids, chain_autocorr_time, BlockAccumulator};
use crate::wavefunction::Wavefunction;

#[derive(Clone, Debug)]
pub struct Estimate<T> {
    pub value: T,
    /// Standard errors; for complex quantities the real and imaginary parts
    /// carry the errors of the respective parts.
    pub error: T,
    pub n_samples: usize,
}

pub type MatrixEstimate = Estimate<CMat>;

/// `Ã(S) = Φ(S)⁻¹·A(S)` with `A(S)ᵢⱼ = Σ_{s′} ⟨sᵢ|Â|s′⟩ φⱼ(s′)`.
pub fn local_operator_matrix(wf: &dyn Wavefunction, tuple: &SampledTuple, op: &dyn LocalOperator) -> Result<CMat> {
    let n = tuple.n();
    let phi = tuple.scaled_matrix();
    let mut a = CMat::zeros(n, n);
    for (i, s) in tuple.configs.iter().enumerate() {
        for (s2, amp) in op.connections(s)? {
            if amp == ZERO {
                continue;
            }
            if s2 == *s {
                for j in 0..n {
                    a[(i, j)] += amp * phi[(i, j)];
                }
                continue;
            }
            let logs = wf.log_amplitudes(&s2)?;
            for j in 0..n {
                if logs[j].re != f64::NEG_INFINITY {
                    a[(i, j)] += amp * (logs[j] - tuple.offsets[i]).exp();
                }
            }
        }
    }
    tuple.factor().solve(&a)
}

/// `R(S) = Φ(S)⁻¹·Ψ(S)` for a second basis `Ψ` on the same tuple.
pub fn local_ratio_matrix(psi: &dyn Wavefunction, tuple: &SampledTuple) -> Result<CMat> {
    let n = tuple.n();
    if psi.n_states() != n {
        return Err(Error::ShapeMismatch("bases of different sizes".into()));
    }
    let mut m = CMat::zeros(n, n);
    for (i, s) in tuple.configs.iter().enumerate() {
        let logs = psi.log_amplitudes(s)?;
        for j in 0..n {
            if logs[j].re != f64::NEG_INFINITY {
                m[(i, j)] = (logs[j] - tuple.offsets[i]).exp();
            }
        }
    }
    tuple.factor().solve(&m)
}

/// Local operator matrices of a whole batch, in batch order.
pub fn local_matrices(wf: &dyn Wavefunction, batch: &Batch, op: &dyn LocalOperator) -> Result<Vec<CMat>> {
    batch
        .samples
        .par_iter()
        .map(|t| local_operator_matrix(wf, t, op))
        .collect()
}

fn check_finite(m: &CMat, what: &str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn accumulate<F>(batch: &Batch, dim: usize, mut feat: F) -> Result<BlockAccumulator>
where
    F: FnMut(usize, &mut Vec<C64>) -> Result<()>,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (ids, nb) = block_ids(&batch.chain_of, batch.n_chains);
    let mut acc = BlockAccumulator::new(nb, dim);
    let mut buf = Vec::with_capacity(dim);
    for (k, &b) in ids.iter().enumerate() {
        buf.clear();
        feat(k, &mut buf)?;
        acc.add(b, &buf);
    }
    Ok(acc)
}

fn to_matrix(v: &[C64], n: usize) -> CMat {
    CMat::from_fn(n, n, |i, j| v[i * n + j])
}

fn matrix_estimate(acc: &BlockAccumulator, n: usize, f: impl Fn(&[C64], usize) -> Result<Vec<C64>>) -> Result<MatrixEstimate> {
    let (v, e) = acc.jackknife(f)?;
    Ok(Estimate {
        value: to_matrix(&v, n),
        error: to_matrix(&e, n),
        n_samples: acc.count(),
    })
}

/// Mean of precomputed local matrices.
pub fn oem_from_locals(locals: &[CMat], batch: &Batch) -> Result<MatrixEstimate> {
    let n = locals.first().ok_or(Error::EmptyBatch)?.nrows();
    let acc = accumulate(batch, n * n, |k, buf| {
        check_finite(&locals[k], "local matrix")?;
        buf.extend(locals[k].transpose().iter().copied());
        Ok(())
    })?;
    matrix_estimate(&acc, n, |m, _| Ok(m.to_vec()))
}

/// Operator expectation matrix `E[Ã(S)]`.
pub fn estimate_oem(wf: &dyn Wavefunction, batch: &Batch, op: &dyn LocalOperator) -> Result<MatrixEstimate> {
    oem_from_locals(&local_matrices(wf, batch, op)?, batch)
}

/// `Cov[Tr Ã(S), B̃(S)]` from precomputed local matrices. With a rotation
/// `X`, `B̃` is replaced by `X⁻¹·B̃·X` (the local matrices of the basis
/// `Φ·X`); the trace is unchanged by it.
pub fn cov_from_locals(a: &[CMat], b: &[CMat], batch: &Batch, rotation: Option<&CMat>) -> Result<MatrixEstimate> {
    let n = a.first().ok_or(Error::EmptyBatch)?.nrows();
    if batch.len() < 2 {
        return Err(Error::TooFewSamples(batch.len()));
    }
    let xinv = match rotation {
        Some(x) => Some(x.clone().try_inverse().ok_or(Error::SingularInput)?),
        None => None,
    };
    let nn = n * n;
    let acc = accumulate(batch, 2 * nn + 1, |k, buf| {
        check_finite(&a[k], "local matrix")?;
        check_finite(&b[k], "local matrix")?;
        let t = trace(&a[k]).conj();
        let bm = match (&xinv, rotation) {
            (Some(xi), Some(x)) => xi * &b[k] * x,
            _ => b[k].clone(),
        };
        let bt = bm.transpose();
        buf.extend(bt.iter().copied());
        buf.extend(bt.iter().map(|z| t * z));
        buf.push(t);
        Ok(())
    })?;
    let (v, e) = acc.jackknife_corrected(move |m, _| {
        let t = m[2 * nn];
        Ok((0..nn).map(|k| m[nn + k] - t * m[k]).collect())
    })?;
    Ok(Estimate {
        value: to_matrix(&v, n),
        error: to_matrix(&e, n),
        n_samples: acc.count(),
    })
}

/// Operator covariance matrix of `Â` and `B̂` (variance matrix when
/// `op_b` is `None`).
pub fn estimate_cov_matrix(
    wf: &dyn Wavefunction,
    batch: &Batch,
    op_a: &dyn LocalOperator,
    op_b: Option<&dyn LocalOperator>,
    rotation: Option<&CMat>,
) -> Result<MatrixEstimate> {
    let a = local_matrices(wf, batch, op_a)?;
    match op_b {
        None => cov_from_locals(&a, &a, batch, rotation),
        Some(ob) => {
            let b = local_matrices(wf, batch, ob)?;
            cov_from_locals(&a, &b, batch, rotation)
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverlapEstimate {
    /// `⟦Φ̃|Ψ⟧ = E[R(S)]`.
    pub forward: MatrixEstimate,
    /// `⟦Ψ̃|Φ⟧ = E[|det R|²·R⁻¹] / E[|det R|²]`.
    pub backward: MatrixEstimate,
}

fn ratio_matrices(psi: &dyn Wavefunction, batch: &Batch) -> Result<Vec<CMat>> {
    batch.samples.par_iter().map(|t| local_ratio_matrix(psi, t)).collect()
}

fn overlap_accumulator(r: &[CMat], batch: &Batch, n: usize) -> Result<BlockAccumulator> {
    let nn = n * n;
    accumulate(batch, 2 * nn + 1, |k, buf| {
        check_finite(&r[k], "ratio matrix")?;
        let w = r[k].determinant().norm_sqr();
        let inv = r[k].clone().try_inverse().ok_or(Error::SingularLocalMatrix(f64::NEG_INFINITY))?;
        buf.extend(r[k].transpose().iter().copied());
        buf.extend(inv.transpose().iter().map(|z| z * w));
        buf.push(C64::new(w, 0.0));
        Ok(())
    })
}

/// Both normalized overlap matrices between the sampled basis `Φ` and
/// another basis `Ψ`.
pub fn estimate_overlap(psi: &dyn Wavefunction, batch: &Batch) -> Result<OverlapEstimate> {
    let r = ratio_matrices(psi, batch)?;
    let n = psi.n_states();
    let nn = n * n;
    let acc = overlap_accumulator(&r, batch, n)?;
    let forward = matrix_estimate(&acc, n, |m, _| Ok(m[..nn].to_vec()))?;
    let backward = matrix_estimate(&acc, n, |m, _| {
        let w = m[2 * nn];
        Ok(m[nn..2 * nn].iter().map(|z| z / w).collect())
    })?;
    Ok(OverlapEstimate { forward, backward })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidelityMode {
    /// Product of the two overlap estimates.
    Product,
    /// `F⁻¹ − 1 = Cov[Tr Γ(S), Γ(S)]` with `Γ(S) = R(S)·E[R]⁻¹`.
    Variance,
}

#[derive(Clone, Debug)]
pub struct FidelityEstimate {
    /// `F(Φ|Ψ)`.
    pub matrix: MatrixEstimate,
    /// Principal fidelities (ascending) with jackknife errors.
    pub principal: Vec<f64>,
    pub principal_error: Vec<f64>,
}

const MEAN_OVERLAP_COND: f64 = 1e12;

fn fidelity_from_means(m: &[C64], cnt: usize, n: usize, mode: FidelityMode) -> Result<CMat> {
    let nn = n * n;
    match mode {
        FidelityMode::Product => {
            let fwd = to_matrix(&m[..nn], n);
            let w = m[2 * nn];
            let bwd = to_matrix(&m[nn..2 * nn], n) / w;
            Ok(fwd * bwd)
        }
        FidelityMode::Variance => {
            let mean_r = to_matrix(&m[..nn], n);
            if crate::linalg::condition_number(&mean_r) > MEAN_OVERLAP_COND {
                return Err(Error::SingularMeanOverlap);
            }
            let minv = mean_r.try_inverse().ok_or(Error::SingularMeanOverlap)?;
            // E[conj(Tr Γ)·Γ] = Σ_ab conj(M⁻¹_ba) E[conj(R_ab)·R] M⁻¹
            let mut e = CMat::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    let coeff = minv[(b, a)].conj();
                    let base = nn + (a * n + b) * nn;
                    e += to_matrix(&m[base..base + nn], n) * coeff;
                }
            }
            let f = if cnt > 1 { cnt as f64 / (cnt as f64 - 1.0) } else { 1.0 };
            let id = CMat::identity(n, n);
            let cov = (e * &minv - &id * C64::new(n as f64, 0.0)) * C64::new(f, 0.0);
            (id + cov).try_inverse().ok_or(Error::SingularMeanOverlap)
        }
    }
}

fn principal_fids(f: &CMat) -> Result<Vec<f64>> {
    let p = principal(&SubspaceMatrix::new(f.clone(), MatrixRole::Fidelity), 0.0)?;
    Ok(p.values.iter().map(|v| v.re).collect())
}

/// Fidelity matrix `F(Φ|Ψ)` sampled from `Φ`.
pub fn estimate_fidelity_matrix(psi: &dyn Wavefunction, batch: &Batch, mode: FidelityMode) -> Result<FidelityEstimate> {
    let r = ratio_matrices(psi, batch)?;
    let n = psi.n_states();
    let nn = n * n;
    let acc = match mode {
        FidelityMode::Product => overlap_accumulator(&r, batch, n)?,
        FidelityMode::Variance => {
            if batch.len() < 2 {
                return Err(Error::TooFewSamples(batch.len()));
            }
            accumulate(batch, nn + nn * nn, |k, buf| {
                check_finite(&r[k], "ratio matrix")?;
                let rt = r[k].transpose();
                buf.extend(rt.iter().copied());
                for a in 0..n {
                    for b in 0..n {
                        let c = r[k][(a, b)].conj();
                        buf.extend(rt.iter().map(|z| c * z));
                    }
                }
                Ok(())
            })?
        }
    };
    let matrix = matrix_estimate(&acc, n, |m, cnt| {
        Ok(fidelity_from_means(m, cnt, n, mode)?.transpose().iter().copied().collect())
    })?;
    let (pv, pe) = acc.jackknife(|m, cnt| {
        let f = fidelity_from_means(m, cnt, n, mode)?;
        Ok(principal_fids(&f)?.into_iter().map(|x| C64::new(x, 0.0)).collect())
    })?;
    Ok(FidelityEstimate {
        matrix,
        principal: pv.iter().map(|z| z.re).collect(),
        principal_error: pe.iter().map(|z| z.re).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarValues {
    /// `(1/N)·E[Tr Ã(S)]`.
    pub expectation: f64,
    pub expectation_error: f64,
    /// `(1/N)·Var[Tr Ã(S)]`.
    pub variance: f64,
    /// `Ns·Var[Tr Ã]/E[Tr Ã]²`; `None` when the expectation vanishes.
    pub v_score: Option<f64>,
    /// Integrated autocorrelation time of `Tr Ã(S)` (0 for uncorrelated).
    pub autocorr_time: f64,
}

/// Tolerance below which an expectation counts as zero for the V-score.
pub const ZERO_ENERGY_TOL: f64 = 1e-12;

pub fn scalar_values_from_locals(locals: &[CMat], batch: &Batch, n_sites: usize) -> Result<ScalarValues> {
    let n = locals.first().ok_or(Error::EmptyBatch)?.nrows() as f64;
    if batch.len() < 2 {
        return Err(Error::TooFewSamples(batch.len()));
    }
    let traces: Vec<f64> = locals.iter().map(|m| trace(m).re).collect();
    if traces.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("local trace".into()));
    }
    let acc = accumulate(batch, 1, |k, buf| {
        buf.push(C64::new(traces[k], 0.0));
        Ok(())
    })?;
    let (v, e) = acc.jackknife(|m, _| Ok(vec![m[0] / n]))?;
    let cnt = traces.len() as f64;
    let mean = traces.iter().sum::<f64>() / cnt;
    let var_tr = traces.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (cnt - 1.0);
    let v_score = if mean.abs() < ZERO_ENERGY_TOL {
        None
    } else {
        Some(n_sites as f64 * var_tr / (mean * mean))
    };
    Ok(ScalarValues {
        expectation: v[0].re,
        expectation_error: e[0].re,
        variance: var_tr / n,
        v_score,
        autocorr_time: chain_autocorr_time(&traces, &batch.chain_of, batch.n_chains),
    })
}

/// Scalar Grassmann value of `Â`, its variance and V-score.
pub fn scalar_values(wf: &dyn Wavefunction, batch: &Batch, op: &dyn LocalOperator, n_sites: usize) -> Result<ScalarValues> {
    scalar_values_from_locals(&local_matrices(wf, batch, op)?, batch, n_sites)
}

/// V-score of a scalar result; fails for a vanishing expectation.
pub fn v_score(values: &ScalarValues) -> Result<f64> {
    values.v_score.ok_or(Error::ZeroEnergy(values.expectation))
}

#[derive(Clone, Debug)]
pub struct PrincipalValues {
    /// Principal values (ascending), i.e. per-state expectations.
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    /// `X` with `|U⟧ = |Φ⟧·X` the principal basis.
    pub transform: CMat,
    pub degenerate: bool,
    /// Diagonal of the variance matrix in the principal basis.
    pub variances: Vec<f64>,
    /// `Ns·σᵢ²/Eᵢ²` per state (`NaN` for a vanishing value).
    pub v_scores: Vec<f64>,
}

fn sorted_principal_values(m: &CMat) -> Result<Vec<f64>> {
    let p = principal(&SubspaceMatrix::new(m.clone(), MatrixRole::Oem), 0.0)?;
    Ok(p.values.iter().map(|v| v.re).collect())
}

/// Per-state values from the OEM of a Hermitian operator (normally `Ĥ`).
pub fn principal_values_from_locals(locals: &[CMat], batch: &Batch, n_sites: usize, gap_tol: f64) -> Result<PrincipalValues> {
    let oem = oem_from_locals(locals, batch)?;
    let n = oem.value.nrows();
    let dec = principal(&SubspaceMatrix::new(oem.value.clone(), MatrixRole::Oem), gap_tol)?;
    let acc = accumulate(batch, n * n, |k, buf| {
        buf.extend(locals[k].transpose().iter().copied());
        Ok(())
    })?;
    let (_, err) = acc.jackknife(|m, _| {
        Ok(sorted_principal_values(&to_matrix(m, n))?
            .into_iter()
            .map(|x| C64::new(x, 0.0))
            .collect())
    })?;
    let cov = cov_from_locals(locals, locals, batch, Some(&dec.transform))?;
    let values: Vec<f64> = dec.values.iter().map(|v| v.re).collect();
    let variances: Vec<f64> = (0..n).map(|i| cov.value[(i, i)].re).collect();
    let v_scores = values
        .iter()
        .zip(&variances)
        .map(|(e, s)| if e.abs() < ZERO_ENERGY_TOL { f64::NAN } else { n_sites as f64 * s / (e * e) })
        .collect();
    Ok(PrincipalValues {
        values,
        errors: err.iter().map(|z| z.re).collect(),
        transform: dec.transform,
        degenerate: dec.degenerate,
        variances,
        v_scores,
    })
}

#[derive(Clone, Debug)]
pub struct StructureFactorEstimate {
    pub k: Momentum,
    /// `S(k)` per principal state of `Ĥ`.
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    /// Diagonals in the unrotated basis, reported when principal values
    /// are degenerate and the rotation is not unique.
    pub unrotated: Option<(Vec<f64>, Vec<f64>)>,
}

/// `S(k)` per state: diagonal of `Cov[Tr S̃_k, S̃_k]` in the principal
/// basis of `Ĥ` estimated from the same batch.
pub fn structure_factor(
    wf: &dyn Wavefunction,
    batch: &Batch,
    hamiltonian: &dyn LocalOperator,
    geom: &LatticeGeometry,
    k: Momentum,
    gap_tol: f64,
) -> Result<StructureFactorEstimate> {
    let h = local_matrices(wf, batch, hamiltonian)?;
    let pv = principal_values_from_locals(&h, batch, geom.n_sites(), gap_tol)?;
    structure_factor_with_transform(wf, batch, geom, k, &pv.transform, pv.degenerate)
}

pub fn structure_factor_with_transform(
    wf: &dyn Wavefunction,
    batch: &Batch,
    geom: &LatticeGeometry,
    k: Momentum,
    transform: &CMat,
    degenerate: bool,
) -> Result<StructureFactorEstimate> {
    let op = StructureFactorOp { geom: geom.clone(), k };
    let s = local_matrices(wf, batch, &op)?;
    let diag = |m: &MatrixEstimate| -> (Vec<f64>, Vec<f64>) {
        let n = m.value.nrows();
        ((0..n).map(|i| m.value[(i, i)].re).collect(), (0..n).map(|i| m.error[(i, i)].re).collect())
    };
    let rotated = cov_from_locals(&s, &s, batch, Some(transform))?;
    let (values, errors) = diag(&rotated);
    let unrotated = if degenerate {
        log::warn!("degenerate principal values; per-state S(k) depends on the chosen basis");
        Some(diag(&cov_from_locals(&s, &s, batch, None)?))
    } else {
        None
    };
    Ok(StructureFactorEstimate {
        k,
        values,
        errors,
        unrotated,
    })
}

/// Jacobian-trace covariance `(1/N)·Re Cov[Tr D̃_μ, Tr D̃_ν]` with jackknife
/// errors; meant for small parameter counts (it accumulates `M²` features).
pub fn estimate_qgt_with_errors(traces: &CMat, batch: &Batch, n_states: usize) -> Result<(RMat, RMat)> {
    let m = traces.ncols();
    if traces.nrows() != batch.len() {
        return Err(Error::ShapeMismatch("one trace row per sample".into()));
    }
    if batch.len() < 2 {
        return Err(Error::TooFewSamples(batch.len()));
    }
    let acc = accumulate(batch, m + m * m, |k, buf| {
        let row = traces.row(k);
        buf.extend(row.iter().copied());
        for a in 0..m {
            let c = row[a].conj();
            buf.extend(row.iter().map(|z| c * z));
        }
        Ok(())
    })?;
    let (v, e) = acc.jackknife(|mm, cnt| {
        let f = cnt as f64 / (cnt as f64 - 1.0) / n_states as f64;
        let mut out = Vec::with_capacity(m * m);
        for a in 0..m {
            for b in 0..m {
                out.push(C64::new(f * (mm[m + a * m + b] - mm[a].conj() * mm[b]).re, 0.0));
            }
        }
        Ok(out)
    })?;
    Ok((
        RMat::from_fn(m, m, |a, b| v[a * m + b].re),
        RMat::from_fn(m, m, |a, b| e[a * m + b].re),
    ))
}

pub use crate::sr::estimate_qgt;
