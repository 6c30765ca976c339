//! Neural-network basis: a shared real convolutional feature map feeding N
//! complex RBM heads, with optional momentum and spin-flip projection and
//! the Marshall sign.
//!
//! `φⱼ(s) = Σ_t e^{−iq·t} Σ_f χ^f · M(s′)·ψⱼ(s′)`, `s′ = F^f T_t s`, with
//! `ψⱼ = RBMⱼ(features(s′))`. The projection and sign sit outside the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{marshall_gauge, LatticeGeometry, Momentum, SpinConfig};
use crate::linalg::{C64, ZERO};
use crate::seeds::stream_rng;
use crate::wavefunction::{complex_ln, DifferentiableWavefunction, Wavefunction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapConfig {
    /// Channel count `C` (the feature dimension per site).
    pub channels: usize,
    /// Side of the first convolution kernel.
    pub kernel: usize,
    pub blocks: usize,
    /// Hidden width ratio of the per-site MLP in each block.
    pub expansion: usize,
    /// Side of the depthwise kernel inside the blocks.
    pub kernel_dw: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzConfig {
    pub n_states: usize,
    pub hidden: usize,
    #[serde(default)]
    pub feature_map: Option<FeatureMapConfig>,
    #[serde(default)]
    pub momentum: Option<Momentum>,
    /// Spin-flip parity: 0 even, 1 odd.
    #[serde(default)]
    pub spin_flip: Option<u8>,
    #[serde(default = "default_true")]
    pub marshall: bool,
    #[serde(default = "default_shared_std")]
    pub shared_init_std: f64,
    #[serde(default = "default_head_std")]
    pub head_init_std: f64,
    #[serde(default = "default_max_log")]
    pub max_log_amplitude: f64,
}

fn default_true() -> bool {
    true
}
fn default_shared_std() -> f64 {
    0.01
}
fn default_head_std() -> f64 {
    0.05
}
fn default_max_log() -> f64 {
    600.0
}

impl AnsatzConfig {
    pub fn heads_only(n_states: usize, hidden: usize) -> Self {
        Self {
            n_states,
            hidden,
            feature_map: None,
            momentum: None,
            spin_flip: None,
            marshall: true,
            shared_init_std: default_shared_std(),
            head_init_std: default_head_std(),
            max_log_amplitude: default_max_log(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Shared,
    Head(usize),
}

/// One named parameter block; complex blocks interleave (re, im).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub component: Component,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    dw_w: usize,
    dw_b: usize,
    ln_g: usize,
    ln_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    gamma: usize,
}

#[derive(Clone, Debug)]
struct FeatureNet {
    c: usize,
    e: usize,
    /// `nb0[i][o]`: site at kernel offset `o` from site `i`.
    nb0: Vec<Vec<usize>>,
    nb_dw: Vec<Vec<usize>>,
    conv_w: usize,
    conv_b: usize,
    blocks: Vec<BlockIdx>,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadIdx {
    c: usize,
    a: usize,
    b: usize,
    w: usize,
    end: usize,
}

#[derive(Clone, Debug)]
struct Image {
    perm: Vec<usize>,
    flip: bool,
    log_coeff: C64,
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Ansatz {
    geom: LatticeGeometry,
    cfg: AnsatzConfig,
    params: Vec<f64>,
    layout: Vec<LayoutEntry>,
    net: Option<FeatureNet>,
    heads: Vec<HeadIdx>,
    n_features: usize,
    images: Vec<Image>,
}

fn kernel_neighbours(geom: &LatticeGeometry, k: usize) -> Vec<Vec<usize>> {
    let r = (k / 2) as i64;
    let span = |l: usize| if l > 1 { -r..=r } else { 0..=0 };
    let mut offs = Vec::new();
    for dy in span(geom.ly()) {
        for dx in span(geom.lx()) {
            offs.push((dx, dy));
        }
    }
    let (lx, ly) = (geom.lx() as i64, geom.ly() as i64);
    (0..geom.n_sites())
        .map(|i| {
            let (x, y) = geom.coords(i);
            offs.iter()
                .map(|&(dx, dy)| {
                    let xx = (x as i64 + dx).rem_euclid(lx) as usize;
                    let yy = (y as i64 + dy).rem_euclid(ly) as usize;
                    geom.site(xx, yy)
                })
                .collect()
        })
        .collect()
}

struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    next: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, component: Component, len: usize) -> usize {
        let offset = self.next;
        self.entries.push(LayoutEntry {
            name,
            component,
            offset,
            len,
        });
        self.next += len;
        offset
    }
}

impl Ansatz {
    /// Builds the ansatz with freshly initialized parameters.
    pub fn new(geom: LatticeGeometry, cfg: AnsatzConfig, seed: u64) -> Result<Self> {
        let mut a = Self::skeleton(geom, cfg)?;
        a.initialize(seed)?;
        Ok(a)
    }

    /// Builds the ansatz around an existing flat parameter vector.
    pub fn from_params(geom: LatticeGeometry, cfg: AnsatzConfig, params: Vec<f64>) -> Result<Self> {
        let mut a = Self::skeleton(geom, cfg)?;
        a.set_params(&params)?;
        Ok(a)
    }

    fn skeleton(geom: LatticeGeometry, cfg: AnsatzConfig) -> Result<Self> {
        if cfg.n_states == 0 {
            return Err(Error::ShapeMismatch("n_states must be positive".into()));
        }
        if cfg.marshall && !geom.is_bipartite() {
            return Err(Error::NonBipartite(geom.lx(), geom.ly()));
        }
        if let Some(q) = cfg.momentum {
            if q.mx >= geom.lx() || q.my >= geom.ly() {
                return Err(Error::InvalidMomentum(format!(
                    "indices ({}, {}) outside the {}x{} zone",
                    q.mx,
                    q.my,
                    geom.lx(),
                    geom.ly()
                )));
            }
        }
        if matches!(cfg.spin_flip, Some(p) if p > 1) {
            return Err(Error::ShapeMismatch("spin_flip parity must be 0 or 1".into()));
        }
        let ns = geom.n_sites();
        let mut lb = LayoutBuilder {
            entries: Vec::new(),
            next: 0,
        };
        let sh = Component::Shared;
        let net = match &cfg.feature_map {
            None => None,
            Some(fm) => {
                if fm.channels == 0 || fm.kernel == 0 || fm.kernel_dw == 0 || fm.expansion == 0 {
                    return Err(Error::ShapeMismatch("feature map sizes must be positive".into()));
                }
                let c = fm.channels;
                let e = fm.expansion * c;
                let nb0 = kernel_neighbours(&geom, fm.kernel);
                let nb_dw = kernel_neighbours(&geom, fm.kernel_dw);
                let k0 = nb0[0].len();
                let kd = nb_dw[0].len();
                let conv_w = lb.push("conv.weight".into(), sh, c * k0);
                let conv_b = lb.push("conv.bias".into(), sh, c);
                let mut blocks = Vec::new();
                for b in 0..fm.blocks {
                    blocks.push(BlockIdx {
                        dw_w: lb.push(format!("block{b}.dw.weight"), sh, c * kd),
                        dw_b: lb.push(format!("block{b}.dw.bias"), sh, c),
                        ln_g: lb.push(format!("block{b}.norm.gain"), sh, c),
                        ln_b: lb.push(format!("block{b}.norm.bias"), sh, c),
                        fc1_w: lb.push(format!("block{b}.fc1.weight"), sh, e * c),
                        fc1_b: lb.push(format!("block{b}.fc1.bias"), sh, e),
                        fc2_w: lb.push(format!("block{b}.fc2.weight"), sh, c * e),
                        fc2_b: lb.push(format!("block{b}.fc2.bias"), sh, c),
                        gamma: lb.push(format!("block{b}.gamma"), sh, c),
                    });
                }
                let ln_g = lb.push("norm.gain".into(), sh, c);
                let ln_b = lb.push("norm.bias".into(), sh, c);
                Some(FeatureNet {
                    c,
                    e,
                    nb0,
                    nb_dw,
                    conv_w,
                    conv_b,
                    blocks,
                    ln_g,
                    ln_b,
                })
            }
        };
        let n_features = net.as_ref().map_or(ns, |n| n.c * ns);
        let h = cfg.hidden;
        let heads = (0..cfg.n_states)
            .map(|j| {
                let comp = Component::Head(j);
                let c = lb.push(format!("head{j}.c"), comp, 2);
                let a = lb.push(format!("head{j}.a"), comp, 2 * n_features);
                let b = lb.push(format!("head{j}.b"), comp, 2 * h);
                let w = lb.push(format!("head{j}.w"), comp, 2 * h * n_features);
                HeadIdx { c, a, b, w, end: lb.next }
            })
            .collect();

        let translations = match cfg.momentum {
            Some(_) => geom.translations(),
            None => vec![(0, 0)],
        };
        let flips: &[bool] = if cfg.spin_flip.is_some() { &[false, true] } else { &[false] };
        let count = (translations.len() * flips.len()) as f64;
        let mut images = Vec::new();
        for &t in &translations {
            let angle = cfg.momentum.map_or(0.0, |q| -q.phase_angle(&geom, t));
            for &flip in flips {
                let odd = flip && cfg.spin_flip == Some(1);
                let phase = angle + if odd { std::f64::consts::PI } else { 0.0 };
                images.push(Image {
                    perm: geom.translation_perm(t),
                    flip,
                    log_coeff: C64::new(-count.ln(), phase),
                });
            }
        }

        Ok(Self {
            params: vec![0.0; lb.next],
            layout: lb.entries,
            geom,
            cfg,
            net,
            heads,
            n_features,
            images,
        })
    }

    fn initialize(&mut self, seed: u64) -> Result<()> {
        let shared = Normal::new(0.0, self.cfg.shared_init_std)
            .map_err(|e| Error::ShapeMismatch(format!("shared init std: {e}")))?;
        let head = Normal::new(0.0, self.cfg.head_init_std)
            .map_err(|e| Error::ShapeMismatch(format!("head init std: {e}")))?;
        let mut rng = stream_rng(seed, 0);
        for entry in &self.layout {
            let range = entry.offset..entry.offset + entry.len;
            match entry.component {
                Component::Shared => {
                    if entry.name.ends_with("norm.gain") {
                        self.params[range].iter_mut().for_each(|p| *p = 1.0);
                    } else if entry.name.ends_with("norm.bias") {
                        self.params[range].iter_mut().for_each(|p| *p = 0.0);
                    } else {
                        self.params[range].iter_mut().for_each(|p| *p = shared.sample(&mut rng));
                    }
                }
                Component::Head(_) => {}
            }
        }
        for (j, h) in self.heads.iter().enumerate() {
            let mut rng = stream_rng(seed, 1 + j as u64);
            for p in &mut self.params[h.c..h.end] {
                *p = head.sample(&mut rng);
            }
        }
        self.check_distinguishable(seed)
    }

    /// Rejects an initialization whose heads give a singular `Φ(S)` on random
    /// tuples of distinct configurations.
    fn check_distinguishable(&self, seed: u64) -> Result<()> {
        const ATTEMPTS: usize = 100;
        let n = self.cfg.n_states;
        let ns = self.geom.n_sites();
        let mut rng = stream_rng(seed, u64::MAX);
        for _ in 0..ATTEMPTS {
            let rows: Vec<SpinConfig> = (0..n).map(|_| random_balanced(&mut rng, ns)).collect();
            let mut m = crate::linalg::CMat::zeros(n, n);
            let mut ok = true;
            for (i, c) in rows.iter().enumerate() {
                let logs = self.log_amplitudes(c)?;
                let shift = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
                if !shift.is_finite() {
                    ok = false;
                    break;
                }
                for j in 0..n {
                    m[(i, j)] = (logs[j] - shift).exp();
                }
            }
            if ok && m.singular_values().min() > 1e-12 {
                return Ok(());
            }
        }
        Err(Error::InitFailure(ATTEMPTS))
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geom
    }

    pub fn config(&self) -> &AnsatzConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn n_shared(&self) -> usize {
        self.heads.first().map_or(self.params.len(), |h| h.c)
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Flat parameter range owned by head `j`.
    pub fn head_range(&self, j: usize) -> std::ops::Range<usize> {
        self.heads[j].c..self.heads[j].end
    }

    /// Index of `Re c_j`, the uniform log-amplitude shift of head `j`.
    pub fn head_log_scale_index(&self, j: usize) -> usize {
        self.heads[j].c
    }

    /// `log ψⱼ(s)` of every head without projection or sign.
    pub fn raw_log_amplitudes(&self, config: &SpinConfig) -> Result<Vec<C64>> {
        self.check_config(config)?;
        let x: Vec<f64> = config.spins().iter().map(|&s| s as f64).collect();
        let z = match &self.net {
            None => x,
            Some(net) => net.forward(&self.params, &x).z,
        };
        Ok(self.heads.iter().map(|h| self.head_forward(h, &z).0).collect())
    }

    fn check_config(&self, config: &SpinConfig) -> Result<()> {
        if config.len() != self.geom.n_sites() {
            return Err(Error::ShapeMismatch(format!(
                "config of length {} for an ansatz on {} sites",
                config.len(),
                self.geom.n_sites()
            )));
        }
        Ok(())
    }

    fn image_config(&self, img: &Image, config: &SpinConfig) -> SpinConfig {
        let mut out = vec![0i8; config.len()];
        for (i, &s) in config.spins().iter().enumerate() {
            out[img.perm[i]] = if img.flip { -s } else { s };
        }
        SpinConfig(out)
    }

    /// Log of `coeff · M(s′)` for an image configuration.
    fn image_log_weight(&self, img: &Image, s: &SpinConfig) -> Result<C64> {
        let mut lw = img.log_coeff;
        if self.cfg.marshall && marshall_gauge(&self.geom, s)? < 0 {
            lw += C64::new(0.0, std::f64::consts::PI);
        }
        Ok(lw)
    }

    /// Returns `(log ψ, tanh θ)` of one head on features `z`.
    fn head_forward(&self, h: &HeadIdx, z: &[f64]) -> (C64, Vec<C64>) {
        let p = &self.params;
        let cp = |k: usize| C64::new(p[k], p[k + 1]);
        let nz = z.len();
        let mut out = cp(h.c);
        for (k, &zk) in z.iter().enumerate() {
            out += cp(h.a + 2 * k) * zk;
        }
        let mut tanhs = Vec::with_capacity(self.cfg.hidden);
        for u in 0..self.cfg.hidden {
            let mut theta = cp(h.b + 2 * u);
            let row = h.w + 2 * u * nz;
            for (k, &zk) in z.iter().enumerate() {
                theta += cp(row + 2 * k) * zk;
            }
            out += log_cosh(theta);
            tanhs.push(tanh(theta));
        }
        (out, tanhs)
    }

    /// Adds `gbar · ∂ log ψ / ∂θ` for one head into `out` and returns the
    /// cotangent `gbar · ∂ log ψ / ∂z`.
    fn head_backward(&self, h: &HeadIdx, z: &[f64], tanhs: &[C64], gbar: C64, out: &mut [C64], zbar: &mut [C64]) {
        let p = &self.params;
        let cp = |k: usize| C64::new(p[k], p[k + 1]);
        let i = C64::new(0.0, 1.0);
        let nz = z.len();
        out[h.c] += gbar;
        out[h.c + 1] += gbar * i;
        for (k, &zk) in z.iter().enumerate() {
            let d = gbar * zk;
            out[h.a + 2 * k] += d;
            out[h.a + 2 * k + 1] += d * i;
            zbar[k] += gbar * cp(h.a + 2 * k);
        }
        for (u, &t) in tanhs.iter().enumerate() {
            let gt = gbar * t;
            out[h.b + 2 * u] += gt;
            out[h.b + 2 * u + 1] += gt * i;
            let row = h.w + 2 * u * nz;
            for (k, &zk) in z.iter().enumerate() {
                let d = gt * zk;
                out[row + 2 * k] += d;
                out[row + 2 * k + 1] += d * i;
                zbar[k] += gt * cp(row + 2 * k);
            }
        }
    }
}

fn random_balanced<R: Rng>(rng: &mut R, ns: usize) -> SpinConfig {
    let mut s: Vec<i8> = (0..ns).map(|i| if i < ns / 2 { 1 } else { -1 }).collect();
    if ns % 2 == 1 {
        s[ns - 1] = 1;
    }
    for i in (1..ns).rev() {
        let j = rng.random_range(0..=i);
        s.swap(i, j);
    }
    SpinConfig(s)
}

/// `ln cosh x` without overflow.
pub fn log_cosh(x: C64) -> C64 {
    let x = if x.re < 0.0 { -x } else { x };
    x + complex_ln(C64::new(1.0, 0.0) + (-2.0 * x).exp()) - std::f64::consts::LN_2
}

pub fn tanh(x: C64) -> C64 {
    if x.re < 0.0 {
        return -tanh(-x);
    }
    let e = (-2.0 * x).exp();
    (C64::new(1.0, 0.0) - e) / (C64::new(1.0, 0.0) + e)
}

fn gelu(x: f64) -> (f64, f64) {
    const A: f64 = 0.044_715;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + A * x * x * x);
    let t = u.tanh();
    let v = 0.5 * x * (1.0 + t);
    let dv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * A * x * x);
    (v, dv)
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    input: Vec<f64>,
    ln: LayerNormCache,
    y: Vec<f64>,
    a1: Vec<f64>,
    g1: Vec<f64>,
    a2: Vec<f64>,
}

struct Forward {
    x: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    z: Vec<f64>,
}

/// Per-site layer normalization over `c` channels; returns output and cache.
fn layer_norm(p: &[f64], g: usize, b: usize, u: &[f64], c: usize) -> (Vec<f64>, LayerNormCache) {
    let ns = u.len() / c;
    let mut out = vec![0.0; u.len()];
    let mut xhat = vec![0.0; u.len()];
    let mut rstd = vec![0.0; ns];
    for i in 0..ns {
        let row = &u[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for ch in 0..c {
            let xh = (row[ch] - mean) * r;
            xhat[i * c + ch] = xh;
            out[i * c + ch] = xh * p[g + ch] + p[b + ch];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    p: &[f64],
    g: usize,
    b: usize,
    cache: &LayerNormCache,
    ybar: &[C64],
    c: usize,
    out: &mut [C64],
) -> Vec<C64> {
    let ns = ybar.len() / c;
    let mut ubar = vec![ZERO; ybar.len()];
    for i in 0..ns {
        let mut m1 = ZERO;
        let mut m2 = ZERO;
        for ch in 0..c {
            let k = i * c + ch;
            out[g + ch] += ybar[k] * cache.xhat[k];
            out[b + ch] += ybar[k];
            let xb = ybar[k] * p[g + ch];
            m1 += xb;
            m2 += xb * cache.xhat[k];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for ch in 0..c {
            let k = i * c + ch;
            let xb = ybar[k] * p[g + ch];
            ubar[k] = (xb - m1 - m2 * cache.xhat[k]) * cache.rstd[i];
        }
    }
    ubar
}

impl FeatureNet {
    fn forward(&self, p: &[f64], x: &[f64]) -> Forward {
        let ns = x.len();
        let c = self.c;
        let e = self.e;
        let k0 = self.nb0[0].len();
        let mut h = vec![0.0; ns * c];
        for i in 0..ns {
            for ch in 0..c {
                let mut acc = p[self.conv_b + ch];
                for (o, &j) in self.nb0[i].iter().enumerate() {
                    acc += p[self.conv_w + ch * k0 + o] * x[j];
                }
                h[i * c + ch] = acc;
            }
        }
        let kd = self.nb_dw[0].len();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for bi in &self.blocks {
            let mut u = vec![0.0; ns * c];
            for i in 0..ns {
                for ch in 0..c {
                    let mut acc = p[bi.dw_b + ch];
                    for (o, &j) in self.nb_dw[i].iter().enumerate() {
                        acc += p[bi.dw_w + ch * kd + o] * h[j * c + ch];
                    }
                    u[i * c + ch] = acc;
                }
            }
            let (y, ln) = layer_norm(p, bi.ln_g, bi.ln_b, &u, c);
            let mut a1 = vec![0.0; ns * e];
            let mut g1 = vec![0.0; ns * e];
            for i in 0..ns {
                for r in 0..e {
                    let mut acc = p[bi.fc1_b + r];
                    for ch in 0..c {
                        acc += p[bi.fc1_w + r * c + ch] * y[i * c + ch];
                    }
                    a1[i * e + r] = acc;
                    g1[i * e + r] = gelu(acc).0;
                }
            }
            let mut a2 = vec![0.0; ns * c];
            let mut next = h.clone();
            for i in 0..ns {
                for ch in 0..c {
                    let mut acc = p[bi.fc2_b + ch];
                    for r in 0..e {
                        acc += p[bi.fc2_w + ch * e + r] * g1[i * e + r];
                    }
                    a2[i * c + ch] = acc;
                    next[i * c + ch] += p[bi.gamma + ch] * acc;
                }
            }
            blocks.push(BlockCache {
                input: h,
                ln,
                y,
                a1,
                g1,
                a2,
            });
            h = next;
        }
        let (z, final_ln) = layer_norm(p, self.ln_g, self.ln_b, &h, c);
        Forward {
            x: x.to_vec(),
            blocks,
            final_ln,
            z,
        }
    }

    fn backward(&self, p: &[f64], fw: &Forward, zbar: &[C64], out: &mut [C64]) {
        let c = self.c;
        let e = self.e;
        let ns = fw.x.len();
        let mut hbar = layer_norm_backward(p, self.ln_g, self.ln_b, &fw.final_ln, zbar, c, out);
        let kd = self.nb_dw[0].len();
        for (bi, cache) in self.blocks.iter().zip(&fw.blocks).rev() {
            let mut a2bar = vec![ZERO; ns * c];
            for k in 0..ns * c {
                let ch = k % c;
                out[bi.gamma + ch] += hbar[k] * cache.a2[k];
                a2bar[k] = hbar[k] * p[bi.gamma + ch];
            }
            let mut a1bar = vec![ZERO; ns * e];
            for i in 0..ns {
                for ch in 0..c {
                    let ab = a2bar[i * c + ch];
                    out[bi.fc2_b + ch] += ab;
                    for r in 0..e {
                        out[bi.fc2_w + ch * e + r] += ab * cache.g1[i * e + r];
                        a1bar[i * e + r] += ab * p[bi.fc2_w + ch * e + r];
                    }
                }
            }
            let mut ybar = vec![ZERO; ns * c];
            for i in 0..ns {
                for r in 0..e {
                    let ab = a1bar[i * e + r] * gelu(cache.a1[i * e + r]).1;
                    out[bi.fc1_b + r] += ab;
                    for ch in 0..c {
                        out[bi.fc1_w + r * c + ch] += ab * cache.y[i * c + ch];
                        ybar[i * c + ch] += ab * p[bi.fc1_w + r * c + ch];
                    }
                }
            }
            let ubar = layer_norm_backward(p, bi.ln_g, bi.ln_b, &cache.ln, &ybar, c, out);
            for i in 0..ns {
                for ch in 0..c {
                    let ub = ubar[i * c + ch];
                    out[bi.dw_b + ch] += ub;
                    for (o, &j) in self.nb_dw[i].iter().enumerate() {
                        out[bi.dw_w + ch * kd + o] += ub * cache.input[j * c + ch];
                        hbar[j * c + ch] += ub * p[bi.dw_w + ch * kd + o];
                    }
                }
            }
        }
        let k0 = self.nb0[0].len();
        for i in 0..ns {
            for ch in 0..c {
                let hb = hbar[i * c + ch];
                out[self.conv_b + ch] += hb;
                for (o, &j) in self.nb0[i].iter().enumerate() {
                    out[self.conv_w + ch * k0 + o] += hb * fw.x[j];
                }
            }
        }
    }
}

/// Complex log-sum-exp; an all-zero sum gives `−∞`.
fn log_sum_exp(terms: &[C64]) -> C64 {
    let m = terms.iter().map(|t| t.re).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return C64::new(f64::NEG_INFINITY, 0.0);
    }
    let s: C64 = terms.iter().map(|t| (t - m).exp()).sum();
    complex_ln(s) + m
}

impl Wavefunction for Ansatz {
    fn n_states(&self) -> usize {
        self.cfg.n_states
    }

    fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    fn log_amplitudes(&self, config: &SpinConfig) -> Result<Vec<C64>> {
        self.check_config(config)?;
        let n = self.cfg.n_states;
        let bound = self.cfg.max_log_amplitude;
        let mut terms = vec![Vec::with_capacity(self.images.len()); n];
        for img in &self.images {
            let s = self.image_config(img, config);
            let lw = self.image_log_weight(img, &s)?;
            let raw = self.raw_log_amplitudes(&s)?;
            for (j, l) in raw.into_iter().enumerate() {
                if !(l.re <= bound) && !(l.re == f64::NEG_INFINITY) {
                    return Err(Error::AmplitudeOverflow(l.re));
                }
                terms[j].push(l + lw);
            }
        }
        terms
            .iter()
            .map(|t| {
                let v = log_sum_exp(t);
                if v.re.is_nan() || v.re > bound {
                    Err(Error::AmplitudeOverflow(v.re))
                } else {
                    Ok(v)
                }
            })
            .collect()
    }
}

impl DifferentiableWavefunction for Ansatz {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an ansatz with {}",
                params.len(),
                self.params.len()
            )));
        }
        if let Some(k) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {k}")));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn accumulate_amplitude_vjp(
        &self,
        config: &SpinConfig,
        weights: &[C64],
        log_shift: f64,
        out: &mut [C64],
    ) -> Result<()> {
        self.check_config(config)?;
        if weights.len() != self.cfg.n_states || out.len() != self.params.len() {
            return Err(Error::ShapeMismatch("vjp weights or output length".into()));
        }
        for img in &self.images {
            let s = self.image_config(img, config);
            let lw = self.image_log_weight(img, &s)?;
            let x: Vec<f64> = s.spins().iter().map(|&v| v as f64).collect();
            let fw = self.net.as_ref().map(|net| net.forward(&self.params, &x));
            let z = fw.as_ref().map_or(&x, |f| &f.z);
            let mut zbar = vec![ZERO; z.len()];
            for (j, h) in self.heads.iter().enumerate() {
                if weights[j] == ZERO {
                    continue;
                }
                let (l, tanhs) = self.head_forward(h, z);
                if l.re == f64::NEG_INFINITY {
                    continue;
                }
                let gbar = weights[j] * (l + lw - log_shift).exp();
                self.head_backward(h, z, &tanhs, gbar, out, &mut zbar);
            }
            if let (Some(net), Some(fw)) = (&self.net, &fw) {
                net.backward(&self.params, fw, &zbar, out);
            }
        }
        Ok(())
    }
}
