//! The interface between a variational basis and the sampler/estimators.
//!
//! A basis of N states is anything that returns the N log-amplitudes
//! `log φⱼ(s)` at a configuration. A log-amplitude with real part `−∞`
//! stands for an exactly zero amplitude.

use std::collections::HashMap;
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::grassmann::DenseSubspaceBasis;
use crate::lattice::{SectorIndex, SpinConfig};
use crate::linalg::{CMat, C64};

pub trait Wavefunction: Sync {
    fn n_states(&self) -> usize;
    fn n_sites(&self) -> usize;
    fn log_amplitudes(&self, config: &SpinConfig) -> Result<Vec<C64>>;
}

/// A basis with real parameters θ.
pub trait DifferentiableWavefunction: Wavefunction {
    fn n_params(&self) -> usize;
    fn params(&self) -> &[f64];
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Adds `Σⱼ weights[j] · ∂_μ (φⱼ(s)·e^{−log_shift})` to `out[μ]`.
    ///
    /// With `weights[j] = (Φ̂⁻¹)_{ji}` for row `i` of a row-scaled tuple
    /// matrix `Φ̂`, summing over rows gives `Tr[Φ(S)⁻¹·∂_μΦ(S)]`.
    fn accumulate_amplitude_vjp(
        &self,
        config: &SpinConfig,
        weights: &[C64],
        log_shift: f64,
        out: &mut [C64],
    ) -> Result<()>;

    /// `∂_μ log φⱼ(s)` for every head, as an `N × M` matrix. Rows of zero
    /// amplitudes are left at zero.
    fn log_derivatives(&self, config: &SpinConfig) -> Result<CMat> {
        let n = self.n_states();
        let m = self.n_params();
        let logs = self.log_amplitudes(config)?;
        let mut out = CMat::zeros(n, m);
        let mut buf = vec![C64::new(0.0, 0.0); m];
        for j in 0..n {
            if logs[j].re == f64::NEG_INFINITY {
                continue;
            }
            let mut w = vec![C64::new(0.0, 0.0); n];
            w[j] = (-C64::new(0.0, logs[j].im)).exp();
            buf.iter_mut().for_each(|b| *b = C64::new(0.0, 0.0));
            self.accumulate_amplitude_vjp(config, &w, logs[j].re, &mut buf)?;
            for (mu, b) in buf.iter().enumerate() {
                out[(j, mu)] = *b;
            }
        }
        Ok(out)
    }
}

/// `ln z`, mapping zero to `−∞ + 0i`.
pub fn complex_ln(z: C64) -> C64 {
    if z == C64::new(0.0, 0.0) {
        C64::new(f64::NEG_INFINITY, 0.0)
    } else {
        z.ln()
    }
}

/// A dense basis over an enumerated sector. Configurations outside the
/// sector have amplitude zero.
#[derive(Clone, Debug)]
pub struct DenseModel {
    sector: SectorIndex,
    kets: CMat,
    n_sites: usize,
}

impl DenseModel {
    pub fn new(sector: SectorIndex, kets: CMat) -> Result<Self> {
        if kets.nrows() != sector.len() || sector.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} ket rows for a sector of {} configurations",
                kets.nrows(),
                sector.len()
            )));
        }
        let n_sites = sector.configs()[0].len();
        Ok(Self {
            sector,
            kets,
            n_sites,
        })
    }

    pub fn from_basis(sector: SectorIndex, basis: &DenseSubspaceBasis) -> Result<Self> {
        Self::new(sector, basis.kets().clone())
    }

    pub fn kets(&self) -> &CMat {
        &self.kets
    }

    pub fn sector(&self) -> &SectorIndex {
        &self.sector
    }
}

impl Wavefunction for DenseModel {
    fn n_states(&self) -> usize {
        self.kets.ncols()
    }

    fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn log_amplitudes(&self, config: &SpinConfig) -> Result<Vec<C64>> {
        match self.sector.position(config) {
            Some(row) => Ok(self.kets.row(row).iter().map(|&z| complex_ln(z)).collect()),
            None => Ok(vec![C64::new(f64::NEG_INFINITY, 0.0); self.n_states()]),
        }
    }
}

/// Dense kets `φⱼ(s)` of any basis over an enumerated sector.
pub fn dense_kets(wf: &dyn Wavefunction, sector: &SectorIndex) -> Result<CMat> {
    let mut out = CMat::zeros(sector.len(), wf.n_states());
    for (i, c) in sector.configs().iter().enumerate() {
        for (j, l) in wf.log_amplitudes(c)?.into_iter().enumerate() {
            out[(i, j)] = if l.re == f64::NEG_INFINITY { C64::new(0.0, 0.0) } else { l.exp() };
        }
    }
    Ok(out)
}

/// Memoizes log-amplitudes while the wrapped parameters are frozen, i.e.
/// for the duration of one sampling epoch.
pub struct CachedWavefunction<'a> {
    inner: &'a dyn Wavefunction,
    cache: RwLock<HashMap<u64, Vec<C64>>>,
}

impl<'a> CachedWavefunction<'a> {
    pub fn new(inner: &'a dyn Wavefunction) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Wavefunction for CachedWavefunction<'_> {
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    fn n_sites(&self) -> usize {
        self.inner.n_sites()
    }

    fn log_amplitudes(&self, config: &SpinConfig) -> Result<Vec<C64>> {
        let key = config.bits();
        if let Some(v) = self.cache.read().ok().and_then(|c| c.get(&key).cloned()) {
            return Ok(v);
        }
        let v = self.inner.log_amplitudes(config)?;
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, v.clone());
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeGeometry;
    use crate::linalg::{max_abs_diff, random_complex_matrix};
    use rand::SeedableRng;

    #[test]
    fn dense_model_round_trips_kets() {
        let g = LatticeGeometry::chain(4).unwrap();
        let sector = SectorIndex::sector(&g, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut kets = random_complex_matrix(&mut rng, 6, 2);
        kets[(3, 1)] = C64::new(0.0, 0.0);
        let m = DenseModel::new(sector.clone(), kets.clone()).unwrap();
        assert!(max_abs_diff(&dense_kets(&m, &sector).unwrap(), &kets) < 1e-14);
        let outside = m.log_amplitudes(&SpinConfig::all_up(4)).unwrap();
        assert!(outside.iter().all(|l| l.re == f64::NEG_INFINITY));
        let cached = CachedWavefunction::new(&m);
        assert!(max_abs_diff(&dense_kets(&cached, &sector).unwrap(), &kets) < 1e-14);
        assert_eq!(cached.len(), 6);
    }
}
