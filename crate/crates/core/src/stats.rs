//! Block statistics: streaming per-block sums, jackknife error bars and a
//! binning estimate of the integrated autocorrelation time.

use crate::error::{Error, Result};
use crate::linalg::{C64, ZERO};

/// Below this many chains, contiguous bins replace chains as blocks.
pub const MIN_CHAIN_BLOCKS: usize = 8;
/// Number of contiguous bins used when chains are too few.
pub const DEFAULT_BINS: usize = 32;

/// Block index of every sample: the chain when there are enough chains,
/// otherwise contiguous bins of the chain-major sample list.
pub fn block_ids(chain_of: &[usize], n_chains: usize) -> (Vec<usize>, usize) {
    let n = chain_of.len();
    if n_chains >= MIN_CHAIN_BLOCKS {
        return (chain_of.to_vec(), n_chains);
    }
    let b = DEFAULT_BINS.min(n).max(1);
    ((0..n).map(|k| k * b / n.max(1)).collect(), b)
}

/// Per-block sums of a fixed-length complex feature vector.
#[derive(Clone, Debug)]
pub struct BlockAccumulator {
    dim: usize,
    sums: Vec<Vec<C64>>,
    counts: Vec<usize>,
}

impl BlockAccumulator {
    pub fn new(n_blocks: usize, dim: usize) -> Self {
        Self {
            dim,
            sums: vec![vec![ZERO; dim]; n_blocks],
            counts: vec![0; n_blocks],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add(&mut self, block: usize, features: &[C64]) {
        debug_assert_eq!(features.len(), self.dim);
        for (s, f) in self.sums[block].iter_mut().zip(features) {
            *s += f;
        }
        self.counts[block] += 1;
    }

    pub fn merge(&mut self, other: &BlockAccumulator) {
        for (b, (s, c)) in other.sums.iter().zip(&other.counts).enumerate() {
            for (x, y) in self.sums[b].iter_mut().zip(s) {
                *x += y;
            }
            self.counts[b] += c;
        }
    }

    pub fn count(&self) -> usize {
        self.counts.iter().sum()
    }

    fn means_excluding(&self, skip: Option<usize>) -> (Vec<C64>, usize) {
        let mut tot = vec![ZERO; self.dim];
        let mut n = 0;
        for (b, (s, c)) in self.sums.iter().zip(&self.counts).enumerate() {
            if Some(b) == skip {
                continue;
            }
            for (t, x) in tot.iter_mut().zip(s) {
                *t += x;
            }
            n += c;
        }
        if n > 0 {
            tot.iter_mut().for_each(|t| *t /= n as f64);
        }
        (tot, n)
    }

    pub fn means(&self) -> Vec<C64> {
        self.means_excluding(None).0
    }

    /// Applies `f(means, count)` to the full data and to every
    /// leave-one-block-out subset. Errors are jackknife standard errors of
    /// the real and imaginary parts separately. With fewer than two nonempty
    /// blocks the errors are NaN.
    pub fn jackknife<F>(&self, f: F) -> Result<(Vec<C64>, Vec<C64>)>
    where
        F: Fn(&[C64], usize) -> Result<Vec<C64>>,
    {
        let (value, reps) = self.replicates(&f)?;
        let err = jackknife_errors(&value, &reps);
        Ok((value, err))
    }

    /// Like [`Self::jackknife`], with the value replaced by the
    /// bias-corrected `B·f − (B−1)·mean(f₋ᵦ)` over `B` blocks. For a product
    /// of means this removes the `O(1/n)` bias while respecting correlations
    /// inside blocks.
    pub fn jackknife_corrected<F>(&self, f: F) -> Result<(Vec<C64>, Vec<C64>)>
    where
        F: Fn(&[C64], usize) -> Result<Vec<C64>>,
    {
        let (value, reps) = self.replicates(&f)?;
        let err = jackknife_errors(&value, &reps);
        if reps.len() < 2 {
            return Ok((value, err));
        }
        let nb = reps.len() as f64;
        let corrected = (0..value.len())
            .map(|k| value[k] * nb - reps.iter().map(|r| r[k]).sum::<C64>() * ((nb - 1.0) / nb))
            .collect();
        Ok((corrected, err))
    }

    fn replicates<F>(&self, f: &F) -> Result<(Vec<C64>, Vec<Vec<C64>>)>
    where
        F: Fn(&[C64], usize) -> Result<Vec<C64>>,
    {
        let (m, n) = self.means_excluding(None);
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let value = f(&m, n)?;
        let live: Vec<usize> = (0..self.counts.len()).filter(|&b| self.counts[b] > 0).collect();
        if live.len() < 2 {
            return Ok((value, Vec::new()));
        }
        let mut reps = Vec::with_capacity(live.len());
        for &b in &live {
            let (mb, nbk) = self.means_excluding(Some(b));
            reps.push(f(&mb, nbk)?);
        }
        Ok((value, reps))
    }
}

fn jackknife_errors(value: &[C64], reps: &[Vec<C64>]) -> Vec<C64> {
    let nb = reps.len();
    if nb < 2 {
        return vec![C64::new(f64::NAN, f64::NAN); value.len()];
    }
    let scale = (nb - 1) as f64 / nb as f64;
    (0..value.len())
        .map(|k| {
            let mean: C64 = reps.iter().map(|r| r[k]).sum::<C64>() / nb as f64;
            let (mut vr, mut vi) = (0.0, 0.0);
            for r in reps {
                vr += (r[k].re - mean.re).powi(2);
                vi += (r[k].im - mean.im).powi(2);
            }
            C64::new((scale * vr).sqrt(), (scale * vi).sqrt())
        })
        .collect()
}

/// Integrated autocorrelation time `τ = Σ_{k≥1} ρ_k` of one series, summed
/// up to Sokal's self-consistent window `W ≥ 6·τ(W)`. Returns 0 for a
/// constant or too short series; white noise gives τ ≈ 0.
pub fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 32 {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0 = d.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let scale = series.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    // fluctuations at rounding level carry no correlation information
    if c0 <= (1e-12 * scale).powi(2) {
        return 0.0;
    }
    let mut tau = 0.0;
    for k in 1..n / 2 {
        let ck = d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        tau += ck / c0;
        if k as f64 >= 6.0 * (1.0 + 2.0 * tau) / 2.0 {
            break;
        }
    }
    tau.max(0.0)
}

/// Autocorrelation time averaged over chains of a chain-major series.
pub fn chain_autocorr_time(series: &[f64], chain_of: &[usize], n_chains: usize) -> f64 {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_chains];
    for (x, &c) in series.iter().zip(chain_of) {
        per[c].push(*x);
    }
    let taus: Vec<f64> = per.iter().filter(|s| s.len() >= 32).map(|s| integrated_autocorr_time(s)).collect();
    if taus.is_empty() {
        integrated_autocorr_time(series)
    } else {
        taus.iter().sum::<f64>() / taus.len() as f64
    }
}
