//! Binary checkpoints: parameters, layout, chain states and RNG streams.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GVMC" | version u32 | config sha256 [32] | step u64
//! n_chains u32 | per chain: seed [32], stream u64, word_pos u128,
//!                            n_states u32, n_sites u32, spins i8 × (n_states·n_sites)
//! n_entries u32 | per entry: name (u32 len + utf8), component u8, head u32, offset u64, len u64
//! n_params u64 | f64 × n_params
//! sha256 of everything above [32]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::ansatz::{Component, LayoutEntry};
use crate::error::{Error, Result};
use crate::lattice::SpinConfig;
use crate::sampler::{ChainSettings, Sampler};
use crate::wavefunction::Wavefunction;

pub const MAGIC: &[u8; 4] = b"GVMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ChainState {
    pub configs: Vec<SpinConfig>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Number of completed steps.
    pub step: u64,
    pub chains: Vec<ChainState>,
    pub layout: Vec<LayoutEntry>,
    pub params: Vec<f64>,
}

/// SHA-256 of a configuration's canonical text.
pub fn config_hash(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint("count exceeds u32".into()))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn capture(config_hash: [u8; 32], step: u64, layout: &[LayoutEntry], params: &[f64], sampler: &Sampler) -> Self {
        Self {
            config_hash,
            step,
            chains: sampler
                .chains
                .iter()
                .map(|c| ChainState {
                    configs: c.tuple.configs.clone(),
                    rng: c.rng.clone(),
                })
                .collect(),
            layout: layout.to_vec(),
            params: params.to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION as usize)?;
        w.bytes(&self.config_hash);
        w.u64(self.step);
        w.u32(self.chains.len())?;
        for c in &self.chains {
            w.bytes(&c.rng.get_seed());
            w.u64(c.rng.get_stream());
            w.bytes(&c.rng.get_word_pos().to_le_bytes());
            let n_sites = c.configs.first().map_or(0, |s| s.len());
            w.u32(c.configs.len())?;
            w.u32(n_sites)?;
            for s in &c.configs {
                if s.len() != n_sites {
                    return Err(Error::Checkpoint("ragged chain configurations".into()));
                }
                w.bytes(&s.spins().iter().map(|&x| x as u8).collect::<Vec<_>>());
            }
        }
        w.u32(self.layout.len())?;
        for e in &self.layout {
            w.u32(e.name.len())?;
            w.bytes(e.name.as_bytes());
            match e.component {
                Component::Shared => {
                    w.u8(0);
                    w.u32(0)?;
                }
                Component::Head(j) => {
                    w.u8(1);
                    w.u32(j)?;
                }
            }
            w.u64(e.offset as u64);
            w.u64(e.len as u64);
        }
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.bytes(&p.to_le_bytes());
        }
        let digest: [u8; 32] = Sha256::digest(&w.0).into();
        w.bytes(&digest);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 32 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.array()?;
        let step = r.u64()?;
        let n_chains = r.u32()?;
        let mut chains = Vec::with_capacity(n_chains.min(1 << 16));
        for _ in 0..n_chains {
            let mut rng = ChaCha8Rng::from_seed(r.array()?);
            rng.set_stream(r.u64()?);
            rng.set_word_pos(u128::from_le_bytes(r.array()?));
            let n_states = r.u32()?;
            let n_sites = r.u32()?;
            let mut configs = Vec::with_capacity(n_states);
            for _ in 0..n_states {
                let spins: Vec<i8> = r.take(n_sites)?.iter().map(|&b| b as i8).collect();
                configs.push(SpinConfig::new(spins).map_err(|e| Error::Checkpoint(e.to_string()))?);
            }
            chains.push(ChainState { configs, rng });
        }
        let n_entries = r.u32()?;
        let mut layout = Vec::with_capacity(n_entries.min(1 << 16));
        for _ in 0..n_entries {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("bad layout name".into()))?;
            let component = match (r.u8()?, r.u32()?) {
                (0, _) => Component::Shared,
                (1, j) => Component::Head(j),
                (t, _) => return Err(Error::Checkpoint(format!("bad component tag {t}"))),
            };
            let offset = r.len64()?;
            let len = r.len64()?;
            layout.push(LayoutEntry {
                name,
                component,
                offset,
                len,
            });
        }
        let n_params = r.len64()?;
        if n_params.checked_mul(8) != Some(body.len() - r.pos) {
            return Err(Error::Checkpoint("parameter block size mismatch".into()));
        }
        let params = (0..n_params)
            .map(|_| r.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config_hash,
            step,
            chains,
            layout,
            params,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn check_hash(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash == expected {
            Ok(())
        } else {
            Err(Error::HashMismatch)
        }
    }

    pub fn check_layout(&self, layout: &[LayoutEntry]) -> Result<()> {
        if self.layout == layout {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter layout differs from the configured ansatz".into()))
        }
    }

    /// Rebuilds the sampler from the stored chain states.
    pub fn restore_sampler(&self, settings: ChainSettings, wf: &dyn Wavefunction) -> Result<Sampler> {
        Sampler::restore(
            settings,
            wf,
            self.chains.iter().map(|c| (c.configs.clone(), c.rng.clone())).collect(),
        )
    }
}
