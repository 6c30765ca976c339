//! Stochastic reconfiguration on the Grassmannian.
//!
//! With `D̃_μ(S) = Φ(S)⁻¹·∂_μΦ(S)` the sampled quantities are
//!
//! * QGT: `T_μν = (1/N)·Re Cov[Tr D̃_μ, Tr D̃_ν]`
//! * force: `g_μ = (2/N)·Re Cov[Tr D̃_μ, Tr H̃]`
//!
//! and the update solves `(T + shift·I)·Δθ = −η·g`. The force is the
//! gradient of the scalar energy `(1/N)·Tr OEM(Ĥ)`, derived from the wedge
//! form of that energy rather than quoted from a reference.

use std::ops::ControlFlow;

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{local_matrices, principal_values_from_locals, scalar_values_from_locals};
use crate::grassmann::{metric_inner, DenseSubspaceBasis, TangentPerturbation};
use crate::lattice::LocalOperator;
use crate::linalg::{trace, CMat, RMat, RVec, C64};
use crate::sampler::{jacobian_traces, Batch, Sampler};
use crate::wavefunction::{CachedWavefunction, DifferentiableWavefunction};

/// Sampled QGT kept in factored form: `T = Oᵀ·O` with `O` the centered
/// Jacobian traces stacked as `[Re; Im] / √(N·(n−1))`.
#[derive(Clone, Debug)]
pub struct GeometricTensor {
    /// `2n × M`.
    pub o: RMat,
}

impl GeometricTensor {
    pub fn n_params(&self) -> usize {
        self.o.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.o.nrows()
    }

    pub fn dense(&self) -> RMat {
        self.o.transpose() * &self.o
    }
}

fn centered(traces: &CMat) -> CMat {
    let n = traces.nrows() as f64;
    let mut c = traces.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    c
}

/// QGT from per-sample Jacobian traces (`n × M`).
pub fn estimate_qgt(traces: &CMat, n_states: usize) -> Result<GeometricTensor> {
    let n = traces.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let c = centered(traces);
    let scale = 1.0 / ((n_states * (n - 1)) as f64).sqrt();
    let m = traces.ncols();
    let o = RMat::from_fn(2 * n, m, |r, mu| {
        if r < n {
            c[(r, mu)].re * scale
        } else {
            c[(r - n, mu)].im * scale
        }
    });
    Ok(GeometricTensor { o })
}

/// `g_μ = (2/N)·Re Cov[Tr D̃_μ, Tr H̃]` from Jacobian traces and local
/// energy traces.
pub fn energy_gradient(traces: &CMat, energies: &[C64], n_states: usize) -> Result<RVec> {
    let n = traces.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if n < 2 || energies.len() != n {
        return Err(Error::TooFewSamples(n));
    }
    let c = centered(traces);
    let mean_e: C64 = energies.iter().sum::<C64>() / n as f64;
    let f = 2.0 / (n_states as f64 * (n - 1) as f64);
    Ok(RVec::from_fn(traces.ncols(), |mu, _| {
        let s: C64 = (0..n).map(|k| c[(k, mu)].conj() * (energies[k] - mean_e)).sum();
        f * s.re
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Dense when there are fewer parameters than stacked sample rows.
    Auto,
    Dense,
    /// Woodbury identity on the sample matrix.
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrSettings {
    pub learning_rate: f64,
    #[serde(default = "default_shift")]
    pub diag_shift: f64,
    #[serde(default = "default_solver")]
    pub solver: SolverMode,
    pub max_steps: usize,
    /// Linear learning-rate ramp over this many initial steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Stop once the scalar variance falls below this value.
    #[serde(default)]
    pub target_variance: Option<f64>,
}

fn default_shift() -> f64 {
    1e-3
}

fn default_solver() -> SolverMode {
    SolverMode::Auto
}

impl SrSettings {
    pub fn new(learning_rate: f64, max_steps: usize) -> Self {
        Self {
            learning_rate,
            diag_shift: default_shift(),
            solver: SolverMode::Auto,
            max_steps,
            warmup_steps: 0,
            target_variance: None,
        }
    }

    /// `η = 0.15 / Ns`.
    pub fn default_rate(n_sites: usize) -> f64 {
        0.15 / n_sites as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.diag_shift >= 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "learning rate {} and shift {} must be positive and non-negative",
                self.learning_rate, self.diag_shift
            )));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

fn cholesky_solve(a: RMat, b: &RVec) -> Result<RVec> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("SR matrix".into()));
    }
    Cholesky::new(a).map(|c| c.solve(b)).ok_or(Error::IndefiniteMatrix)
}

/// Solves `(T + shift·I)·Δθ = −η·g`.
pub fn sr_solve(qgt: &GeometricTensor, grad: &RVec, learning_rate: f64, shift: f64, mode: SolverMode) -> Result<RVec> {
    let m = qgt.n_params();
    if grad.len() != m {
        return Err(Error::ShapeMismatch(format!("gradient of length {} for {m} parameters", grad.len())));
    }
    let rhs = grad * (-learning_rate);
    let mode = match mode {
        SolverMode::Auto if m < qgt.n_rows() => SolverMode::Dense,
        SolverMode::Auto => SolverMode::Implicit,
        other => other,
    };
    match mode {
        SolverMode::Dense => {
            let mut a = qgt.dense();
            for i in 0..m {
                a[(i, i)] += shift;
            }
            cholesky_solve(a, &rhs)
        }
        _ => {
            // (OᵀO + λ)⁻¹v = (v − Oᵀ(λ + OOᵀ)⁻¹Ov) / λ
            if !(shift > 0.0) {
                return Err(Error::IndefiniteMatrix);
            }
            let o = &qgt.o;
            let mut k = o * o.transpose();
            for i in 0..k.nrows() {
                k[(i, i)] += shift;
            }
            let ov = o * &rhs;
            let y = cholesky_solve(k, &ov)?;
            Ok((rhs - o.transpose() * y) / shift)
        }
    }
}

/// Projects `target` onto the real span of the coordinate directions
/// `Θ_μ` under the Grassmann metric: `Σ Θ_μ (T⁻¹)^{μν} Re⟨Θ_ν, target⟩`.
pub fn tangent_project(
    basis: &DenseSubspaceBasis,
    coords: &[TangentPerturbation],
    target: &TangentPerturbation,
) -> Result<TangentPerturbation> {
    let m = coords.len();
    let mut t = RMat::zeros(m, m);
    let mut b = RVec::zeros(m);
    for mu in 0..m {
        for nu in mu..m {
            let v = metric_inner(basis, &coords[mu], &coords[nu])?.re;
            t[(mu, nu)] = v;
            t[(nu, mu)] = v;
        }
        b[mu] = metric_inner(basis, &coords[mu], target)?.re;
    }
    let (vals, _) = crate::linalg::symmetric_eigen(&t);
    let top = vals.iter().cloned().fold(0.0, f64::max);
    if m == 0 || vals.iter().any(|&v| v <= 1e-12 * top) || top <= 0.0 {
        return Err(Error::SingularQgt);
    }
    let c = Cholesky::new(t).ok_or(Error::SingularQgt)?.solve(&b);
    let mut kets = CMat::zeros(target.kets.nrows(), target.kets.ncols());
    for (mu, coord) in coords.iter().enumerate() {
        kets += &coord.kets * C64::new(c[mu], 0.0);
    }
    Ok(TangentPerturbation::new(kets))
}

/// Per-step metrics of an optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Scalar Grassmann energy `(1/N)·E[Tr H̃]`.
    pub energy: f64,
    pub energy_error: f64,
    pub variance: f64,
    pub v_score: Option<f64>,
    pub principal_values: Vec<f64>,
    pub principal_errors: Vec<f64>,
    pub acceptance: f64,
    pub autocorr_time: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
    /// `g·Δθ`; never positive.
    pub descent: f64,
    pub learning_rate: f64,
}

/// Relative slack allowed on `g·Δθ ≤ 0` for rounding.
const DESCENT_TOL: f64 = 1e-10;

/// Everything one SR step produces besides the parameter update itself.
pub struct StepOutcome {
    pub record: StepRecord,
    pub update: RVec,
    pub batch: Batch,
}

/// Samples one batch and computes the SR update without applying it.
pub fn sr_step<W: DifferentiableWavefunction>(
    wf: &W,
    sampler: &mut Sampler,
    hamiltonian: &dyn LocalOperator,
    settings: &SrSettings,
    step: usize,
) -> Result<StepOutcome> {
    let n_states = wf.n_states();
    let cached = CachedWavefunction::new(wf);
    let batch = sampler.sample(&cached)?;
    let h = local_matrices(&cached, &batch, hamiltonian)?;
    drop(cached);
    let rows = batch
        .samples
        .par_iter()
        .map(|t| jacobian_traces(wf, t))
        .collect::<Result<Vec<_>>>()?;
    let m = wf.n_params();
    let traces = CMat::from_fn(rows.len(), m, |k, mu| rows[k][mu]);
    if traces.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("Jacobian traces".into()));
    }
    let energies: Vec<C64> = h.iter().map(trace).collect();
    let scalar = scalar_values_from_locals(&h, &batch, wf.n_sites())?;
    let pv = principal_values_from_locals(&h, &batch, wf.n_sites(), 0.0)?;
    let qgt = estimate_qgt(&traces, n_states)?;
    let grad = energy_gradient(&traces, &energies, n_states)?;
    let rate = settings.rate_at(step);
    let update = sr_solve(&qgt, &grad, rate, settings.diag_shift, settings.solver)?;
    let descent = grad.dot(&update);
    if descent > DESCENT_TOL * grad.norm() * update.norm() {
        return Err(Error::NotDescent(descent));
    }
    Ok(StepOutcome {
        record: StepRecord {
            step,
            energy: scalar.expectation,
            energy_error: scalar.expectation_error,
            variance: scalar.variance,
            v_score: scalar.v_score,
            principal_values: pv.values,
            principal_errors: pv.errors,
            acceptance: batch.acceptance,
            autocorr_time: scalar.autocorr_time,
            grad_norm: grad.norm(),
            update_norm: update.norm(),
            descent,
            learning_rate: rate,
        },
        update,
        batch,
    })
}

/// Runs SR from `start_step` until `max_steps`, the variance target, or the
/// observer breaks. The observer sees each record after the update has been
/// applied.
pub fn optimize<W, F>(
    wf: &mut W,
    sampler: &mut Sampler,
    hamiltonian: &dyn LocalOperator,
    settings: &SrSettings,
    start_step: usize,
    mut observer: F,
) -> Result<Vec<StepRecord>>
where
    W: DifferentiableWavefunction,
    F: FnMut(&StepRecord, &W, &Sampler) -> Result<ControlFlow<()>>,
{
    settings.validate()?;
    let mut records = Vec::new();
    for step in start_step..settings.max_steps {
        let out = sr_step(wf, sampler, hamiltonian, settings, step)?;
        let mut params = wf.params().to_vec();
        for (p, d) in params.iter_mut().zip(out.update.iter()) {
            *p += d;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters at step {step}")));
        }
        wf.set_params(&params)?;
        let done = settings.target_variance.is_some_and(|t| out.record.variance < t);
        let flow = observer(&out.record, wf, sampler)?;
        records.push(out.record);
        if done || flow.is_break() {
            break;
        }
    }
    Ok(records)
}
