//! Metropolis sampling of N-tuples with `P(S) ∝ |det Φ(S)|²`.
//!
//! Each chain carries one ordered tuple of configurations from a fixed
//! magnetization sector. A move picks a row, exchanges one up and one down
//! spin in it, and accepts with `min(1, |det Φ(S′)/det Φ(S)|²)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SpinConfig;
use crate::linalg::{CMat, Factorized, LogDet, C64, ZERO};
use crate::seeds::stream_rng;
use crate::wavefunction::{DifferentiableWavefunction, Wavefunction};

/// Tuples with `ln|det Φ(S)|` below this are never occupied.
pub const LOG_DET_FLOOR: f64 = -250.0;

/// Row-scaled tuple matrix `Φ̂(S)ᵢⱼ = φⱼ(sᵢ)·e^{−oᵢ}` and its offsets `oᵢ`.
pub fn basis_matrix(wf: &dyn Wavefunction, configs: &[SpinConfig]) -> Result<(CMat, Vec<f64>)> {
    let n = wf.n_states();
    if configs.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "tuple of {} configurations for {} states",
            configs.len(),
            n
        )));
    }
    let mut m = CMat::zeros(n, n);
    let mut offsets = vec![0.0; n];
    for (i, c) in configs.iter().enumerate() {
        let logs = wf.log_amplitudes(c)?;
        let (row, o) = scaled_row(&logs);
        offsets[i] = o;
        for j in 0..n {
            m[(i, j)] = row[j];
        }
    }
    Ok((m, offsets))
}

/// `exp(logs − o)` with `o` the largest real part (0 for an all-zero row).
fn scaled_row(logs: &[C64]) -> (Vec<C64>, f64) {
    let o = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let o = if o.is_finite() { o } else { 0.0 };
    let row = logs
        .iter()
        .map(|l| if l.re == f64::NEG_INFINITY { ZERO } else { (l - o).exp() })
        .collect();
    (row, o)
}

/// An ordered N-tuple with its factorized tuple matrix.
#[derive(Clone, Debug)]
pub struct SampledTuple {
    pub configs: Vec<SpinConfig>,
    pub offsets: Vec<f64>,
    matrix: CMat,
    factor: Factorized,
}

impl SampledTuple {
    pub fn new(wf: &dyn Wavefunction, configs: Vec<SpinConfig>) -> Result<Self> {
        let (matrix, offsets) = basis_matrix(wf, &configs)?;
        let factor = Factorized::new(matrix.clone());
        Ok(Self {
            configs,
            offsets,
            matrix,
            factor,
        })
    }

    pub fn n(&self) -> usize {
        self.configs.len()
    }

    /// The row-scaled matrix `Φ̂(S)`.
    pub fn scaled_matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn factor(&self) -> &Factorized {
        &self.factor
    }

    /// `det Φ(S)` in log-polar form, offsets included.
    pub fn logdet(&self) -> LogDet {
        let ld = self.factor.logdet();
        LogDet {
            log_abs: ld.log_abs + self.offsets.iter().sum::<f64>(),
            phase: ld.phase,
        }
    }

    pub fn is_occupiable(&self) -> bool {
        let l = self.logdet().log_abs;
        l.is_finite() && l > LOG_DET_FLOOR
    }

    /// Same tuple with rows reordered: row `k` of the result is row
    /// `perm[k]` of this one.
    pub fn permuted(&self, wf: &dyn Wavefunction, perm: &[usize]) -> Result<Self> {
        Self::new(wf, perm.iter().map(|&k| self.configs[k].clone()).collect())
    }
}

/// `Tr[Φ(S)⁻¹·∂_μΦ(S)]` for every parameter.
pub fn jacobian_traces(wf: &dyn DifferentiableWavefunction, tuple: &SampledTuple) -> Result<Vec<C64>> {
    let inv = tuple.factor.inverse()?;
    let n = tuple.n();
    let mut out = vec![ZERO; wf.n_params()];
    let mut w = vec![ZERO; n];
    for i in 0..n {
        for j in 0..n {
            w[j] = inv[(j, i)];
        }
        wf.accumulate_amplitude_vjp(&tuple.configs[i], &w, tuple.offsets[i], &mut out)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSettings {
    pub n_chains: usize,
    /// Retained samples per chain per batch.
    pub samples_per_chain: usize,
    /// Sweeps discarded before the first batch; `None` means `10·Ns`.
    #[serde(default)]
    pub warmup_sweeps: Option<usize>,
    /// Sweeps discarded at the start of every later batch.
    #[serde(default)]
    pub epoch_discard_sweeps: usize,
    /// Sweeps between retained samples; one sweep is `N·Ns` proposals.
    #[serde(default = "one")]
    pub thinning: usize,
    /// Twice the target total Sᶻ.
    #[serde(default)]
    pub magnetization: i32,
    #[serde(default = "default_init_attempts")]
    pub init_attempts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_init_attempts() -> usize {
    1000
}

impl ChainSettings {
    pub fn new(n_chains: usize, samples_per_chain: usize, seed: u64) -> Self {
        Self {
            n_chains,
            samples_per_chain,
            warmup_sweeps: None,
            epoch_discard_sweeps: 0,
            thinning: 1,
            magnetization: 0,
            init_attempts: default_init_attempts(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.samples_per_chain == 0 || self.thinning == 0 || self.init_attempts == 0 {
            return Err(Error::ShapeMismatch(
                "chains, samples per chain, thinning and init attempts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_chains * self.samples_per_chain
    }
}

/// Uniformly random configuration with the given magnetization.
pub fn random_config<R: Rng + ?Sized>(rng: &mut R, n_sites: usize, magnetization: i32) -> Result<SpinConfig> {
    let ns = n_sites as i32;
    if magnetization.abs() > ns || (ns - magnetization) % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "magnetization {magnetization} impossible on {n_sites} sites"
        )));
    }
    let n_up = ((ns + magnetization) / 2) as usize;
    let mut s: Vec<i8> = (0..n_sites).map(|i| if i < n_up { 1 } else { -1 }).collect();
    for i in (1..n_sites).rev() {
        let j = rng.random_range(0..=i);
        s.swap(i, j);
    }
    Ok(SpinConfig(s))
}

/// Draws random tuples until one has `ln|det Φ(S)|` above the floor.
pub fn init_tuple<R: Rng + ?Sized>(
    wf: &dyn Wavefunction,
    magnetization: i32,
    attempts: usize,
    rng: &mut R,
) -> Result<SampledTuple> {
    for _ in 0..attempts {
        let configs = (0..wf.n_states())
            .map(|_| random_config(rng, wf.n_sites(), magnetization))
            .collect::<Result<Vec<_>>>()?;
        let t = SampledTuple::new(wf, configs)?;
        if t.is_occupiable() {
            return Ok(t);
        }
    }
    Err(Error::InitFailure(attempts))
}

/// One Metropolis move. Returns whether it was accepted.
pub fn propose_and_step<R: Rng + ?Sized>(
    wf: &dyn Wavefunction,
    state: &mut SampledTuple,
    rng: &mut R,
) -> Result<bool> {
    let n = state.n();
    let i = rng.random_range(0..n);
    let spins = state.configs[i].spins();
    let ups: Vec<usize> = (0..spins.len()).filter(|&k| spins[k] > 0).collect();
    let downs: Vec<usize> = (0..spins.len()).filter(|&k| spins[k] < 0).collect();
    if ups.is_empty() || downs.is_empty() {
        return Ok(false);
    }
    let a = ups[rng.random_range(0..ups.len())];
    let b = downs[rng.random_range(0..downs.len())];
    let u: f64 = rng.random();
    let proposal = state.configs[i].exchanged(a, b);
    if state.configs.iter().enumerate().any(|(k, c)| k != i && *c == proposal) {
        return Ok(false);
    }
    let logs = wf.log_amplitudes(&proposal)?;
    let (row, o_new) = scaled_row(&logs);
    let col = state.factor.inverse_column(i)?;
    let ratio: C64 = row.iter().zip(col.iter()).map(|(r, c)| r * c).sum();
    if ratio == ZERO || !ratio.norm().is_finite() {
        return Ok(false);
    }
    let log_ratio = ratio.norm().ln() + o_new - state.offsets[i];
    if state.logdet().log_abs + log_ratio <= LOG_DET_FLOOR {
        return Ok(false);
    }
    if u.ln() >= 2.0 * log_ratio {
        return Ok(false);
    }
    state.configs[i] = proposal;
    state.offsets[i] = o_new;
    for j in 0..n {
        state.matrix[(i, j)] = row[j];
    }
    state.factor = Factorized::new(state.matrix.clone());
    Ok(true)
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub rng: ChaCha8Rng,
    pub tuple: SampledTuple,
    pub proposed: u64,
    pub accepted: u64,
}

impl Chain {
    fn sweep(&mut self, wf: &dyn Wavefunction, moves: usize) -> Result<()> {
        for _ in 0..moves {
            self.proposed += 1;
            if propose_and_step(wf, &mut self.tuple, &mut self.rng)? {
                self.accepted += 1;
            }
        }
        Ok(())
    }
}

/// Samples of one batch, chain-major.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<SampledTuple>,
    /// Chain index of each sample.
    pub chain_of: Vec<usize>,
    pub n_chains: usize,
    pub acceptance: f64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_samples(samples: Vec<SampledTuple>) -> Self {
        let n = samples.len();
        Self {
            samples,
            chain_of: (0..n).collect(),
            n_chains: n,
            acceptance: 1.0,
        }
    }
}

/// A set of persistent chains. Chain `c` draws from its own stream derived
/// from `(seed, c)`.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub settings: ChainSettings,
    pub chains: Vec<Chain>,
    warmed: bool,
}

impl Sampler {
    pub fn new(settings: ChainSettings, wf: &dyn Wavefunction) -> Result<Self> {
        settings.validate()?;
        let chains = (0..settings.n_chains)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(settings.seed, c as u64);
                let tuple = init_tuple(wf, settings.magnetization, settings.init_attempts, &mut rng)?;
                Ok(Chain {
                    rng,
                    tuple,
                    proposed: 0,
                    accepted: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            settings,
            chains,
            warmed: false,
        })
    }

    /// Rebuilds chains from stored states (configurations and RNG streams).
    pub fn restore(settings: ChainSettings, wf: &dyn Wavefunction, states: Vec<(Vec<SpinConfig>, ChaCha8Rng)>) -> Result<Self> {
        settings.validate()?;
        if states.len() != settings.n_chains {
            return Err(Error::Checkpoint(format!(
                "{} stored chains for {} configured",
                states.len(),
                settings.n_chains
            )));
        }
        let chains = states
            .into_iter()
            .map(|(configs, rng)| {
                Ok(Chain {
                    rng,
                    tuple: SampledTuple::new(wf, configs)?,
                    proposed: 0,
                    accepted: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            settings,
            chains,
            warmed: true,
        })
    }

    fn sweep_moves(&self, wf: &dyn Wavefunction) -> usize {
        wf.n_states() * wf.n_sites()
    }

    /// Draws one batch under the current parameters of `wf`.
    pub fn sample(&mut self, wf: &dyn Wavefunction) -> Result<Batch> {
        let moves = self.sweep_moves(wf);
        let discard = if self.warmed {
            self.settings.epoch_discard_sweeps
        } else {
            self.settings.warmup_sweeps.unwrap_or(10 * wf.n_sites())
        };
        let thin = self.settings.thinning;
        let per_chain = self.settings.samples_per_chain;
        let attempts = self.settings.init_attempts;
        let mag = self.settings.magnetization;
        let per_chain_samples = self
            .chains
            .par_iter_mut()
            .map(|chain| {
                chain.proposed = 0;
                chain.accepted = 0;
                // parameters may have changed since the last batch
                chain.tuple = SampledTuple::new(wf, chain.tuple.configs.clone())?;
                if !chain.tuple.is_occupiable() {
                    log::warn!("chain state became singular under new parameters; reinitializing");
                    chain.tuple = init_tuple(wf, mag, attempts, &mut chain.rng)?;
                }
                chain.sweep(wf, discard * moves)?;
                let mut out = Vec::with_capacity(per_chain);
                for _ in 0..per_chain {
                    // a random extra move breaks the period of chains whose
                    // moves are always accepted
                    let extra = chain.rng.random_bool(0.5) as usize;
                    chain.sweep(wf, thin * moves + extra)?;
                    out.push(chain.tuple.clone());
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        self.warmed = true;
        let (mut proposed, mut accepted) = (0u64, 0u64);
        for c in &self.chains {
            proposed += c.proposed;
            accepted += c.accepted;
        }
        let mut samples = Vec::with_capacity(self.settings.batch_size());
        let mut chain_of = Vec::with_capacity(self.settings.batch_size());
        for (c, s) in per_chain_samples.into_iter().enumerate() {
            chain_of.extend(std::iter::repeat_n(c, s.len()));
            samples.extend(s);
        }
        Ok(Batch {
            samples,
            chain_of,
            n_chains: self.chains.len(),
            acceptance: if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 },
        })
    }
}
