use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use gvmc::ansatz::Ansatz;
use gvmc::checkpoint::{config_hash, Checkpoint};
use gvmc::ed::{lowest_k, lowest_k_symmetric};
use gvmc::estimators::{
    local_matrices, principal_values_from_locals, structure_factor_with_transform, PrincipalValues,
};
use gvmc::grassmann::minor_complement;
use gvmc::lattice::{Heisenberg, IdentityOp, LatticeGeometry, Momentum, SectorIndex};
use gvmc::linalg::{CMat, C64};
use gvmc::sampler::{Batch, Sampler};
use gvmc::sr::{optimize, sr_step};
use gvmc::verify::{run_suite, Tier};
use gvmc::wavefunction::DifferentiableWavefunction;

use crate::config::ExperimentConfig;
use crate::output::{write_csv, MetricsWriter, ObservableRow, ResultRow, StructureFactorRow};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const OBSERVABLE_FILE: &str = "observables.csv";
pub const SK_FILE: &str = "structure_factor.csv";
pub const ED_FILE: &str = "ed.csv";

/// Error tagged with the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: e.into(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

struct Setup {
    geom: LatticeGeometry,
    hamiltonian: Heisenberg,
    wf: Ansatz,
    sampler: Sampler,
    start_step: usize,
    hash: [u8; 32],
}

/// Builds the ansatz and sampler, from a checkpoint when given one.
fn setup(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Setup, Failure> {
    let geom = cfg.geometry().map_err(Failure::config)?;
    let acfg = cfg.ansatz_config(&geom);
    let hash = config_hash(&cfg.canonical());
    let chain = cfg.chain_settings();
    let (wf, sampler, start_step) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ck.check_hash(&hash).map_err(Failure::config)?;
            let wf = Ansatz::from_params(geom.clone(), acfg, ck.params.clone()).map_err(Failure::config)?;
            ck.check_layout(wf.layout()).map_err(Failure::config)?;
            let sampler = ck.restore_sampler(chain, &wf)?;
            (wf, sampler, ck.step as usize)
        }
        None => {
            let wf = Ansatz::new(geom.clone(), acfg, cfg.ansatz_seed()).map_err(Failure::config)?;
            let sampler = Sampler::new(chain, &wf)?;
            (wf, sampler, 0)
        }
    };
    Ok(Setup {
        hamiltonian: Heisenberg::new(geom.clone()),
        geom,
        wf,
        sampler,
        start_step,
        hash,
    })
}

fn q_labels(cfg: &ExperimentConfig, geom: &LatticeGeometry) -> (f64, f64, i8) {
    let (qx, qy) = cfg.momentum(geom).map_or((0.0, 0.0), |q| q.radians(geom));
    let sf = match cfg.sector.spin_flip {
        Some(0) => 1,
        Some(_) => -1,
        None => 0,
    };
    (qx, qy, sf)
}

fn result_rows(cfg: &ExperimentConfig, geom: &LatticeGeometry, pv: &PrincipalValues) -> Vec<ResultRow> {
    let (q_x, q_y, q_sf) = q_labels(cfg, geom);
    let ns = geom.n_sites() as f64;
    (0..pv.values.len())
        .map(|i| ResultRow {
            q_x,
            q_y,
            q_sf,
            state: i,
            e_per_site: pv.values[i] / ns,
            error: pv.errors[i] / ns,
            v_score: pv.v_scores[i],
        })
        .collect()
}

fn print_results(rows: &[ResultRow]) {
    println!("{:>5} {:>16} {:>12} {:>12}", "state", "E/Ns", "error", "v_score");
    for r in rows {
        println!("{:>5} {:>16.10} {:>12.3e} {:>12.3e}", r.state, r.e_per_site, r.error, r.v_score);
    }
}

fn energy_values(s: &Setup, batch: &Batch, gap_tol: f64) -> Result<(PrincipalValues, Vec<CMat>), Failure> {
    let locals = local_matrices(&s.wf, batch, &s.hamiltonian)?;
    let pv = principal_values_from_locals(&locals, batch, s.geom.n_sites(), gap_tol)?;
    Ok((pv, locals))
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn cmd_optimize(cfg: &ExperimentConfig, resume: Option<&Path>, stop: Arc<AtomicBool>) -> CmdResult {
    let mut s = setup(cfg, resume)?;
    let out = &cfg.output.dir;
    create_out_dir(out)?;
    let settings = cfg.sr_settings(s.geom.n_sites());
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE), resume.is_some())?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let every = cfg.output.checkpoint_every;
    let hash = s.hash;
    log::info!(
        "optimizing {} states on {}x{} ({} parameters) from step {}",
        cfg.n_states,
        s.geom.lx(),
        s.geom.ly(),
        s.wf.n_params(),
        s.start_step
    );
    let records = optimize(&mut s.wf, &mut s.sampler, &s.hamiltonian, &settings, s.start_step, |rec, wf, sampler| {
        metrics.write(rec)?;
        let done = rec.step + 1;
        if every > 0 && done % every == 0 {
            Checkpoint::capture(hash, done as u64, wf.layout(), wf.params(), sampler).save(&ck_path)?;
        }
        log::debug!("step {} E={:.8} var={:.3e}", rec.step, rec.energy, rec.variance);
        Ok(if stop.load(Ordering::SeqCst) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    })?;
    let done = s.start_step + records.len();
    Checkpoint::capture(hash, done as u64, s.wf.layout(), s.wf.params(), &s.sampler).save(&ck_path)?;
    if stop.load(Ordering::SeqCst) {
        return Err(anyhow!("interrupted after step {done}; checkpoint written to {}", ck_path.display()).into());
    }
    let batch = s.sampler.sample(&s.wf)?;
    let (pv, _) = energy_values(&s, &batch, cfg.output.gap_tol)?;
    let rows = result_rows(cfg, &s.geom, &pv);
    write_csv(&out.join(RESULTS_FILE), &rows)?;
    print_results(&rows);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Observable {
    Energy,
    Identity,
    StructureFactor,
}

/// Every lattice momentum once, `mx` fastest.
pub fn momentum_grid(geom: &LatticeGeometry) -> Vec<Momentum> {
    let mut out = Vec::with_capacity(geom.n_sites());
    for my in 0..geom.ly() {
        for mx in 0..geom.lx() {
            out.push(Momentum { mx, my });
        }
    }
    out
}

pub fn cmd_estimate(cfg: &ExperimentConfig, checkpoint: &Path, observable: Observable) -> CmdResult {
    let mut s = setup(cfg, Some(checkpoint))?;
    let out = &cfg.output.dir;
    create_out_dir(out)?;
    let batch = s.sampler.sample(&s.wf)?;
    let (pv, _) = energy_values(&s, &batch, cfg.output.gap_tol)?;
    let rows = result_rows(cfg, &s.geom, &pv);
    write_csv(&out.join(ESTIMATE_FILE), &rows)?;
    print_results(&rows);
    match observable {
        Observable::Energy => {}
        Observable::Identity => {
            let id = IdentityOp { n_sites: s.geom.n_sites() };
            let locals = local_matrices(&s.wf, &batch, &id)?;
            let p = principal_values_from_locals(&locals, &batch, s.geom.n_sites(), cfg.output.gap_tol)?;
            let rows: Vec<ObservableRow> = (0..p.values.len())
                .map(|i| ObservableRow {
                    observable: "identity".into(),
                    state: i,
                    value: p.values[i],
                    error: p.errors[i],
                })
                .collect();
            for r in &rows {
                println!("identity state {}: {} ± {:.3e}", r.state, r.value, r.error);
            }
            write_csv(&out.join(OBSERVABLE_FILE), &rows)?;
        }
        Observable::StructureFactor => {
            let mut rows = Vec::new();
            for k in momentum_grid(&s.geom) {
                let sk = structure_factor_with_transform(&s.wf, &batch, &s.geom, k, &pv.transform, pv.degenerate)?;
                let (k_x, k_y) = k.radians(&s.geom);
                for (i, (v, e)) in sk.values.iter().zip(&sk.errors).enumerate() {
                    rows.push(StructureFactorRow {
                        mx: k.mx,
                        my: k.my,
                        k_x,
                        k_y,
                        state: i,
                        value: *v,
                        error: *e,
                    });
                }
            }
            println!("S(k) for {} momenta written to {}", s.geom.n_sites(), out.join(SK_FILE).display());
            write_csv(&out.join(SK_FILE), &rows)?;
        }
    }
    Ok(())
}

/// Largest sector on which the symmetry projector is built densely.
const SYMMETRIC_ED_LIMIT: usize = 4000;

pub fn cmd_ed(cfg: &ExperimentConfig, levels: Option<usize>) -> CmdResult {
    let geom = cfg.geometry().map_err(Failure::config)?;
    let sector = SectorIndex::sector(&geom, cfg.magnetization().map_err(Failure::config)?);
    let h = Heisenberg::new(geom.clone());
    let k = levels.unwrap_or(cfg.n_states);
    let start = Instant::now();
    let spectrum = if cfg.sector.momentum.is_some() || cfg.sector.spin_flip.is_some() {
        if sector.len() > SYMMETRIC_ED_LIMIT {
            return Err(anyhow!(
                "symmetry-resolved ED is dense and limited to {SYMMETRIC_ED_LIMIT} configurations, sector has {}",
                sector.len()
            )
            .into());
        }
        let q = cfg.momentum(&geom).unwrap_or_default();
        lowest_k_symmetric(&h, &geom, &sector, q, cfg.sector.spin_flip, k)?
    } else {
        lowest_k(&h, &sector, k, cfg.ed_seed())?
    };
    log::info!("sector dimension {}, {:.1}s", sector.len(), start.elapsed().as_secs_f64());
    create_out_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join(ED_FILE);
    spectrum.write_csv(fs::File::create(&path)?, 1e-8)?;
    spectrum.write_csv(std::io::stdout().lock(), 1e-8)?;
    Ok(())
}

/// Deliberately sign-dropping minor used to check that the suite detects
/// a broken implementation.
fn unsigned_minor(w: &CMat, rows: &[usize], cols: &[usize]) -> gvmc::Result<C64> {
    minor_complement(w, rows, cols).map(|m| {
        if (rows.iter().sum::<usize>() + cols.iter().sum::<usize>()) % 2 == 1 {
            -m
        } else {
            m
        }
    })
}

pub fn cmd_verify(tier: Tier, seed: u64, mutate: bool) -> CmdResult {
    let minor = if mutate { unsigned_minor } else { minor_complement };
    let start = Instant::now();
    let results = run_suite(tier, minor, seed)?;
    println!("{:<45} {:>6} {:>12} {:>9}  result", "check", "cases", "max error", "tol");
    for r in &results {
        println!(
            "{:<45} {:>6} {:>12.3e} {:>9.0e}  {}",
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    log::info!("verification took {:.1}s", start.elapsed().as_secs_f64());
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            error: anyhow!("{} of {} checks failed", results.iter().filter(|r| !r.passed).count(), results.len()),
        })
    }
}

pub fn cmd_bench(cfg: &ExperimentConfig, steps: usize) -> CmdResult {
    let mut s = setup(cfg, None)?;
    let settings = cfg.sr_settings(s.geom.n_sites());
    let t = Instant::now();
    let batch = s.sampler.sample(&s.wf)?;
    let sample_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    local_matrices(&s.wf, &batch, &s.hamiltonian)?;
    let locals_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    for step in 0..steps {
        sr_step(&s.wf, &mut s.sampler, &s.hamiltonian, &settings, step)?;
    }
    let step_s = t.elapsed().as_secs_f64() / steps.max(1) as f64;
    println!(
        "{}",
        serde_json::json!({
            "n_params": s.wf.n_params(),
            "batch": batch.len(),
            "sample_seconds": sample_s,
            "local_matrices_seconds": locals_s,
            "sr_step_seconds": step_s,
            "threads": rayon::current_num_threads(),
        })
    );
    Ok(())
}
