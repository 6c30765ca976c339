//! Experiment configuration: one TOML file per run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gvmc::ansatz::{AnsatzConfig, FeatureMapConfig};
use gvmc::lattice::{LatticeGeometry, Momentum};
use gvmc::sampler::ChainSettings;
use gvmc::seeds::derive_seed;
use gvmc::sr::{SolverMode, SrSettings};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "GVMC_SEED";
pub const OUT_ENV: &str = "GVMC_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub n_states: usize,
    pub lattice: LatticeSection,
    #[serde(default)]
    pub sector: SectorSection,
    pub ansatz: AnsatzSection,
    pub sampler: SamplerSection,
    pub sr: SrSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub lx: usize,
    #[serde(default = "one")]
    pub ly: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorSection {
    /// Total Sᶻ; a multiple of 1/2 matching the site count.
    #[serde(default)]
    pub sz: f64,
    /// Momentum indices `(mx, my)` in units of `2π/L`.
    #[serde(default)]
    pub momentum: Option<[i64; 2]>,
    /// Spin-flip parity: 0 even, 1 odd.
    #[serde(default)]
    pub spin_flip: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzSection {
    pub hidden: usize,
    #[serde(default)]
    pub feature_map: Option<FeatureMapConfig>,
    #[serde(default = "yes")]
    pub marshall: bool,
    #[serde(default)]
    pub shared_init_std: Option<f64>,
    #[serde(default)]
    pub head_init_std: Option<f64>,
    #[serde(default)]
    pub max_log_amplitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_chains: usize,
    pub samples_per_chain: usize,
    #[serde(default)]
    pub warmup_sweeps: Option<usize>,
    #[serde(default)]
    pub epoch_discard_sweeps: usize,
    #[serde(default = "one")]
    pub thinning: usize,
    #[serde(default)]
    pub init_attempts: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrSection {
    /// Defaults to `0.15 / Ns`.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub diag_shift: Option<f64>,
    #[serde(default)]
    pub solver: Option<SolverMode>,
    pub max_steps: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub target_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    /// Degeneracy tolerance for principal values.
    #[serde(default = "default_gap")]
    pub gap_tol: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            checkpoint_every: default_every(),
            gap_tol: default_gap(),
        }
    }
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_every() -> usize {
    100
}
fn default_gap() -> f64 {
    1e-6
}

/// Seed streams derived from the run seed.
const ANSATZ_STREAM: u64 = 0;
const SAMPLER_STREAM: u64 = 1;
const ED_STREAM: u64 = 2;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Applies `GVMC_SEED` / `GVMC_OUT`, then explicit flags.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        }
        if let Ok(d) = std::env::var(OUT_ENV) {
            self.output.dir = PathBuf::from(d);
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out {
            self.output.dir = d;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry()?;
        let ns = geom.n_sites();
        if self.n_states == 0 {
            bail!("n_states must be positive");
        }
        self.magnetization()?;
        if let Some(f) = self.sector.spin_flip {
            if f > 1 {
                bail!("sector.spin_flip must be 0 or 1, got {f}");
            }
            if self.magnetization()? != 0 {
                bail!("sector.spin_flip requires sz = 0");
            }
        }
        if self.ansatz.hidden == 0 {
            bail!("ansatz.hidden must be positive");
        }
        if self.ansatz.marshall && !geom.is_bipartite() {
            bail!("ansatz.marshall needs a bipartite lattice, {}x{} is not", geom.lx(), geom.ly());
        }
        self.chain_settings().validate()?;
        self.sr_settings(ns).validate()?;
        if !(self.output.gap_tol >= 0.0) {
            bail!("output.gap_tol must be non-negative");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<LatticeGeometry> {
        Ok(LatticeGeometry::new(self.lattice.lx, self.lattice.ly)?)
    }

    /// Twice the total Sᶻ.
    pub fn magnetization(&self) -> Result<i32> {
        let ns = self.lattice.lx * self.lattice.ly;
        let m = 2.0 * self.sector.sz;
        if m.fract() != 0.0 || m.abs() > ns as f64 || (m as i64 - ns as i64) % 2 != 0 {
            bail!("sector.sz = {} is not reachable on {ns} spin-1/2 sites", self.sector.sz);
        }
        Ok(m as i32)
    }

    pub fn momentum(&self, geom: &LatticeGeometry) -> Option<Momentum> {
        self.sector.momentum.map(|[x, y]| Momentum::new(geom, x, y))
    }

    pub fn ansatz_config(&self, geom: &LatticeGeometry) -> AnsatzConfig {
        let a = &self.ansatz;
        let mut cfg = AnsatzConfig::heads_only(self.n_states, a.hidden);
        cfg.feature_map = a.feature_map.clone();
        cfg.momentum = self.momentum(geom);
        cfg.spin_flip = self.sector.spin_flip;
        cfg.marshall = a.marshall;
        if let Some(s) = a.shared_init_std {
            cfg.shared_init_std = s;
        }
        if let Some(s) = a.head_init_std {
            cfg.head_init_std = s;
        }
        if let Some(m) = a.max_log_amplitude {
            cfg.max_log_amplitude = m;
        }
        cfg
    }

    pub fn chain_settings(&self) -> ChainSettings {
        let s = &self.sampler;
        let mut c = ChainSettings::new(s.n_chains, s.samples_per_chain, derive_seed(self.seed, SAMPLER_STREAM));
        c.warmup_sweeps = s.warmup_sweeps;
        c.epoch_discard_sweeps = s.epoch_discard_sweeps;
        c.thinning = s.thinning;
        c.magnetization = self.magnetization().unwrap_or(0);
        if let Some(n) = s.init_attempts {
            c.init_attempts = n;
        }
        c
    }

    pub fn sr_settings(&self, n_sites: usize) -> SrSettings {
        let s = &self.sr;
        let mut out = SrSettings::new(s.learning_rate.unwrap_or(SrSettings::default_rate(n_sites)), s.max_steps);
        if let Some(d) = s.diag_shift {
            out.diag_shift = d;
        }
        if let Some(m) = s.solver {
            out.solver = m;
        }
        out.warmup_steps = s.warmup_steps;
        out.target_variance = s.target_variance;
        out
    }

    pub fn ansatz_seed(&self) -> u64 {
        derive_seed(self.seed, ANSATZ_STREAM)
    }

    pub fn ed_seed(&self) -> u64 {
        derive_seed(self.seed, ED_STREAM)
    }

    /// Canonical text of everything that determines a run's trajectory.
    /// The output section and the step budget are excluded so that a run
    /// can be extended from its checkpoint.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.sr.max_steps = 0;
        serde_json::to_string(&c).expect("config serializes")
    }
}
