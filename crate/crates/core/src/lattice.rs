//! Periodic square-lattice spin-½ Heisenberg model in the Sᶻ basis.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, C64, ZERO};

/// Periodic `lx × ly` rectangle. A chain is `n × 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    lx: usize,
    ly: usize,
    bonds: Vec<(usize, usize)>,
}

impl LatticeGeometry {
    pub fn new(lx: usize, ly: usize) -> Result<Self> {
        if lx == 0 || ly == 0 || lx * ly > 64 {
            return Err(Error::ShapeMismatch(format!(
                "lattice {lx}x{ly} must have between 1 and 64 sites"
            )));
        }
        // A periodic extent of 2 links the same pair twice; each pair is kept once.
        let mut set = BTreeSet::new();
        for y in 0..ly {
            for x in 0..lx {
                let i = x + lx * y;
                if lx > 1 {
                    let j = (x + 1) % lx + lx * y;
                    set.insert((i.min(j), i.max(j)));
                }
                if ly > 1 {
                    let j = x + lx * ((y + 1) % ly);
                    set.insert((i.min(j), i.max(j)));
                }
            }
        }
        Ok(Self {
            lx,
            ly,
            bonds: set.into_iter().collect(),
        })
    }

    pub fn square(l: usize) -> Result<Self> {
        Self::new(l, l)
    }

    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn lx(&self) -> usize {
        self.lx
    }

    pub fn ly(&self) -> usize {
        self.ly
    }

    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    pub fn site(&self, x: usize, y: usize) -> usize {
        (x % self.lx) + self.lx * (y % self.ly)
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.lx, i / self.lx)
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn is_bipartite(&self) -> bool {
        (self.lx == 1 || self.lx % 2 == 0) && (self.ly == 1 || self.ly % 2 == 0)
    }

    /// Sublattice A holds the sites with even `x + y`.
    pub fn on_sublattice_a(&self, i: usize) -> bool {
        let (x, y) = self.coords(i);
        (x + y) % 2 == 0
    }

    /// All translations `(tx, ty)`, identity first.
    pub fn translations(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_sites());
        for ty in 0..self.ly {
            for tx in 0..self.lx {
                out.push((tx, ty));
            }
        }
        out
    }

    /// Site permutation of a translation: site `i` moves to `perm[i]`.
    pub fn translation_perm(&self, t: (usize, usize)) -> Vec<usize> {
        (0..self.n_sites())
            .map(|i| {
                let (x, y) = self.coords(i);
                self.site(x + t.0, y + t.1)
            })
            .collect()
    }
}

/// Lattice momentum `(2π·mx/lx, 2π·my/ly)` stored by its integer indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Momentum {
    pub mx: usize,
    pub my: usize,
}

impl Momentum {
    pub fn new(geom: &LatticeGeometry, mx: i64, my: i64) -> Self {
        Self {
            mx: mx.rem_euclid(geom.lx as i64) as usize,
            my: my.rem_euclid(geom.ly as i64) as usize,
        }
    }

    /// From components in radians; they must be multiples of `2π/L`.
    pub fn from_radians(geom: &LatticeGeometry, kx: f64, ky: f64) -> Result<Self> {
        let idx = |k: f64, l: usize| -> Result<i64> {
            let m = k * l as f64 / (2.0 * PI);
            let r = m.round();
            if !k.is_finite() || (m - r).abs() > 1e-9 {
                return Err(Error::InvalidMomentum(format!(
                    "{k} is not a multiple of 2pi/{l}"
                )));
            }
            Ok(r as i64)
        };
        Ok(Self::new(geom, idx(kx, geom.lx)?, idx(ky, geom.ly)?))
    }

    pub fn radians(&self, geom: &LatticeGeometry) -> (f64, f64) {
        (
            2.0 * PI * self.mx as f64 / geom.lx as f64,
            2.0 * PI * self.my as f64 / geom.ly as f64,
        )
    }

    /// `k·r` for a site or translation vector.
    pub fn phase_angle(&self, geom: &LatticeGeometry, r: (usize, usize)) -> f64 {
        let (kx, ky) = self.radians(geom);
        kx * r.0 as f64 + ky * r.1 as f64
    }

    /// `(π, π)` (or `π` along the single extent of a chain); needs even extents.
    pub fn antiferro(geom: &LatticeGeometry) -> Result<Self> {
        if !geom.is_bipartite() {
            return Err(Error::InvalidMomentum(format!(
                "(pi, pi) does not exist on {}x{}",
                geom.lx, geom.ly
            )));
        }
        Ok(Self {
            mx: geom.lx / 2,
            my: geom.ly / 2,
        })
    }
}

/// Spin configuration with entries ±1 (twice Sᶻ).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpinConfig(pub Vec<i8>);

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.len() > 64 || spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::ShapeMismatch("spins must be +1 or -1, at most 64 sites".into()));
        }
        Ok(Self(spins))
    }

    pub fn all_up(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Néel pattern on the given geometry, sublattice A up.
    pub fn neel(geom: &LatticeGeometry) -> Self {
        Self(
            (0..geom.n_sites())
                .map(|i| if geom.on_sublattice_a(i) { 1 } else { -1 })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    /// Σ spins, i.e. `2·Sᶻ`.
    pub fn magnetization(&self) -> i32 {
        self.0.iter().map(|&s| s as i32).sum()
    }

    /// Bit `i` set when site `i` is up; a compact hash key.
    pub fn bits(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &s)| if s > 0 { acc | (1 << i) } else { acc })
    }

    pub fn from_bits(bits: u64, n: usize) -> Self {
        Self((0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect())
    }

    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|&s| -s).collect())
    }

    pub fn exchanged(&self, i: usize, j: usize) -> Self {
        let mut s = self.0.clone();
        s.swap(i, j);
        Self(s)
    }

    /// Configuration translated by `t`: the spin on site `r` moves to `r + t`.
    pub fn translated(&self, geom: &LatticeGeometry, t: (usize, usize)) -> Self {
        let perm = geom.translation_perm(t);
        let mut out = vec![0i8; self.0.len()];
        for (i, &s) in self.0.iter().enumerate() {
            out[perm[i]] = s;
        }
        Self(out)
    }
}

/// Row of an operator in the Sᶻ basis: pairs `(s′, ⟨s|Â|s′⟩)`, diagonal
/// pair first.
pub type ConnectedSet = Vec<(SpinConfig, C64)>;

fn check_len(geom: &LatticeGeometry, config: &SpinConfig) -> Result<()> {
    if config.len() != geom.n_sites() {
        return Err(Error::ShapeMismatch(format!(
            "config of length {} on a lattice with {} sites",
            config.len(),
            geom.n_sites()
        )));
    }
    Ok(())
}

/// `Σ_bonds Ŝᵢ·Ŝⱼ` acting on one configuration.
pub fn heisenberg_connections(geom: &LatticeGeometry, config: &SpinConfig) -> Result<ConnectedSet> {
    check_len(geom, config)?;
    let s = config.spins();
    let mut diag = 0.0;
    let mut out = Vec::with_capacity(geom.bonds().len() + 1);
    out.push((config.clone(), ZERO));
    for &(i, j) in geom.bonds() {
        diag += 0.25 * (s[i] * s[j]) as f64;
        if s[i] != s[j] {
            out.push((config.exchanged(i, j), C64::new(0.5, 0.0)));
        }
    }
    out[0].1 = C64::new(diag, 0.0);
    Ok(out)
}

/// Marshall sign `(−1)^{#down spins on sublattice A}`.
pub fn marshall_gauge(geom: &LatticeGeometry, config: &SpinConfig) -> Result<i8> {
    check_len(geom, config)?;
    if !geom.is_bipartite() {
        return Err(Error::NonBipartite(geom.lx, geom.ly));
    }
    let downs = config
        .spins()
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s < 0 && geom.on_sublattice_a(i))
        .count();
    Ok(if downs % 2 == 0 { 1 } else { -1 })
}

/// Diagonal amplitude of `Ŝ_k = (1/√Ns) Σ_l e^{−ik·l} Ŝᶻ_l`.
pub fn structure_factor_amplitude(geom: &LatticeGeometry, k: Momentum, config: &SpinConfig) -> Result<C64> {
    check_len(geom, config)?;
    let mut acc = ZERO;
    for (l, &s) in config.spins().iter().enumerate() {
        let a = k.phase_angle(geom, geom.coords(l));
        acc += C64::from_polar(0.5 * s as f64, -a);
    }
    Ok(acc / (geom.n_sites() as f64).sqrt())
}

pub fn structure_factor_rows(geom: &LatticeGeometry, k: Momentum, config: &SpinConfig) -> Result<ConnectedSet> {
    Ok(vec![(config.clone(), structure_factor_amplitude(geom, k, config)?)])
}

/// All configurations with `Σ spins = 2·total_sz`, lexicographic with up
/// before down at each site (site 0 most significant).
pub fn sector_enumerate(geom: &LatticeGeometry, total_sz: i32) -> Vec<SpinConfig> {
    let n = geom.n_sites() as i32;
    let m = 2 * total_sz;
    if m.abs() > n || (n - m) % 2 != 0 {
        return Vec::new();
    }
    let n_up = ((n + m) / 2) as usize;
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n as usize);
    fn rec(cur: &mut Vec<i8>, n: usize, ups_left: usize, out: &mut Vec<SpinConfig>) {
        let remaining = n - cur.len();
        if remaining == 0 {
            out.push(SpinConfig(cur.clone()));
            return;
        }
        if ups_left > 0 {
            cur.push(1);
            rec(cur, n, ups_left - 1, out);
            cur.pop();
        }
        if remaining > ups_left {
            cur.push(-1);
            rec(cur, n, ups_left, out);
            cur.pop();
        }
    }
    rec(&mut cur, n as usize, n_up, &mut out);
    out
}

/// Operator given by its rows in the Sᶻ basis.
pub trait LocalOperator: Sync {
    fn n_sites(&self) -> usize;
    fn connections(&self, config: &SpinConfig) -> Result<ConnectedSet>;
    /// Diagonal operators connect each configuration only to itself.
    fn is_diagonal(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct Heisenberg {
    pub geom: LatticeGeometry,
}

impl Heisenberg {
    pub fn new(geom: LatticeGeometry) -> Self {
        Self { geom }
    }
}

impl LocalOperator for Heisenberg {
    fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    fn connections(&self, config: &SpinConfig) -> Result<ConnectedSet> {
        heisenberg_connections(&self.geom, config)
    }
}

#[derive(Clone, Debug)]
pub struct StructureFactorOp {
    pub geom: LatticeGeometry,
    pub k: Momentum,
}

impl LocalOperator for StructureFactorOp {
    fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    fn connections(&self, config: &SpinConfig) -> Result<ConnectedSet> {
        structure_factor_rows(&self.geom, self.k, config)
    }

    fn is_diagonal(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug)]
pub struct IdentityOp {
    pub n_sites: usize,
}

impl LocalOperator for IdentityOp {
    fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn connections(&self, config: &SpinConfig) -> Result<ConnectedSet> {
        Ok(vec![(config.clone(), C64::new(1.0, 0.0))])
    }

    fn is_diagonal(&self) -> bool {
        true
    }
}

/// Index of the configurations of a sector.
#[derive(Clone, Debug)]
pub struct SectorIndex {
    configs: Vec<SpinConfig>,
    index: HashMap<u64, usize>,
}

impl SectorIndex {
    pub fn new(configs: Vec<SpinConfig>) -> Self {
        let index = configs.iter().enumerate().map(|(i, c)| (c.bits(), i)).collect();
        Self { configs, index }
    }

    pub fn sector(geom: &LatticeGeometry, total_sz: i32) -> Self {
        Self::new(sector_enumerate(geom, total_sz))
    }

    pub fn configs(&self) -> &[SpinConfig] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn position(&self, config: &SpinConfig) -> Option<usize> {
        self.index.get(&config.bits()).copied()
    }
}

/// Dense matrix `⟨s|Â|s′⟩` of an operator restricted to a sector. Fails if a
/// connection leaves the sector.
pub fn dense_matrix(op: &dyn LocalOperator, sector: &SectorIndex) -> Result<CMat> {
    let n = sector.len();
    let mut m = CMat::zeros(n, n);
    for (row, c) in sector.configs().iter().enumerate() {
        for (c2, amp) in op.connections(c)? {
            let col = sector
                .position(&c2)
                .ok_or_else(|| Error::ShapeMismatch("connection leaves the sector".into()))?;
            m[(row, col)] += amp;
        }
    }
    Ok(m)
}

/// An arbitrary dense operator on a sector, exposed through its rows.
#[derive(Clone, Debug)]
pub struct SectorMatrixOperator {
    sector: SectorIndex,
    matrix: CMat,
}

impl SectorMatrixOperator {
    pub fn new(sector: SectorIndex, matrix: CMat) -> Result<Self> {
        if matrix.shape() != (sector.len(), sector.len()) {
            return Err(Error::ShapeMismatch("operator matrix vs sector size".into()));
        }
        Ok(Self { sector, matrix })
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }
}

impl LocalOperator for SectorMatrixOperator {
    fn n_sites(&self) -> usize {
        self.sector.configs().first().map_or(0, |c| c.len())
    }

    fn connections(&self, config: &SpinConfig) -> Result<ConnectedSet> {
        let row = self
            .sector
            .position(config)
            .ok_or_else(|| Error::ShapeMismatch("configuration outside the operator's sector".into()))?;
        let mut out = vec![(config.clone(), self.matrix[(row, row)])];
        for (col, c) in self.sector.configs().iter().enumerate() {
            let a = self.matrix[(row, col)];
            if col != row && a != ZERO {
                out.push((c.clone(), a));
            }
        }
        Ok(out)
    }
}
