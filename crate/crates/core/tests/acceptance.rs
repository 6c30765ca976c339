//! Acceptance criteria, one PASS/FAIL line each. Criterion 5(c) takes hours
//! and runs only with `GVMC_ACCEPT_LONG=1`.

use std::ops::ControlFlow;
use std::time::Instant;

use gvmc::ansatz::{Ansatz, AnsatzConfig, FeatureMapConfig};
use gvmc::ed::lowest_k;
use gvmc::estimators::oracle::TupleEnumeration;
use gvmc::estimators::{
    estimate_cov_matrix, estimate_fidelity_matrix, estimate_oem, estimate_overlap, estimate_qgt_with_errors,
    local_matrices, principal_values_from_locals, scalar_values, structure_factor, FidelityMode, MatrixEstimate,
};
use gvmc::grassmann::{fidelity_matrices, gram, minor_complement, oem, ovm_ocm, p_fidelity, projector, DenseSubspaceBasis};
use gvmc::lattice::{Heisenberg, LatticeGeometry, Momentum, SectorIndex, SectorMatrixOperator};
use gvmc::linalg::{random_complex_matrix, random_hermitian, CMat, RMat, C64};
use gvmc::sampler::{jacobian_traces, Batch, ChainSettings, SampledTuple, Sampler};
use gvmc::sr::{optimize, SrSettings, StepRecord};
use gvmc::verify::{minor_checks, sampling_checks, Tier};
use gvmc::wavefunction::{dense_kets, DenseModel, DifferentiableWavefunction, Wavefunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = (bool, String);

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: &str, title: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (ok, detail) = f();
        if !ok {
            self.failures += 1;
        }
        println!(
            "[{}] {id:<4} {title}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }

    fn note(&self, id: &str, title: &str, detail: &str) {
        println!("[SKIP] {id:<4} {title}: {detail}");
    }
}

fn main() {
    let mut r = Report { failures: 0 };
    r.run("1", "determinant-sampling averages vs closed forms", criterion_1);
    r.run("2", "matrix-minor identities", criterion_2);
    r.run("3", "sampler stationarity (chi-square)", criterion_3);
    r.run("4", "estimator consistency", criterion_4);
    let mut descent = Vec::new();
    r.run("5a", "2-site N=2 scalar energy", || criterion_5a(&mut descent));
    r.run("5b", "4-site chain N=2 energies", || criterion_5b(&mut descent));
    if std::env::var("GVMC_ACCEPT_LONG").is_ok_and(|v| v == "1") {
        r.run("5c", "4x4 N=3 energies", criterion_5c);
    } else {
        r.note("5c", "4x4 N=3 energies", "long run, set GVMC_ACCEPT_LONG=1");
    }
    r.run("6", "zero-variance principle", criterion_6);
    r.run("7", "singlet structure factor", criterion_7);
    r.note("8", "6x6 / 10x10 lattice energies", "optional extended-run target");
    r.run("9a", "p-fidelity monotone in p", criterion_9a);
    r.run("9b", "projector idempotence and gauge invariance", criterion_9b);
    r.run("9c", "descent on every step of 5a/5b", || criterion_9c(&descent));
    r.run("9d", "Jacobian traces vs finite differences", criterion_9d);
    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
}

fn check_rows(rows: &[gvmc::verify::CheckResult]) -> Outcome {
    let ok = rows.iter().all(|c| c.passed);
    let detail = rows
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_error))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (ok, detail) = check_rows(&sampling_checks(Tier::Fast, 1).unwrap());
    let secs = t.elapsed().as_secs_f64();
    (ok && secs < 30.0, format!("{detail} (tol 1e-10)"))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let (ok, detail) = check_rows(&minor_checks(Tier::Fast, minor_complement, 2).unwrap());
    let secs = t.elapsed().as_secs_f64();
    (ok && secs < 10.0, format!("{detail} (relative tol 1e-9)"))
}

fn chain4() -> (LatticeGeometry, SectorIndex) {
    let g = LatticeGeometry::chain(4).unwrap();
    let s = SectorIndex::sector(&g, 0);
    (g, s)
}

fn criterion_3() -> Outcome {
    let (g, sector) = chain4();
    let mut cfg = AnsatzConfig::heads_only(2, 2);
    cfg.head_init_std = 0.5;
    let wf = Ansatz::new(g, cfg, 11).unwrap();
    let kets = dense_kets(&wf, &sector).unwrap();
    let d = sector.len();
    let cell = |i: usize, j: usize| i * d + j;
    let mut expected = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let m = CMat::from_fn(2, 2, |r, c| kets[([i, j][r], c)]);
                expected[cell(i, j)] = m.determinant().norm_sqr();
            }
        }
    }
    let total: f64 = expected.iter().sum();
    expected.iter_mut().for_each(|p| *p /= total);

    let mut settings = ChainSettings::new(16, 500, 12);
    settings.thinning = 2;
    let mut sampler = Sampler::new(settings, &wf).unwrap();
    // chain counters restart with every batch
    let mut proposals = 0u64;
    let mut counts = vec![0u64; d * d];
    while proposals < 1_000_000 {
        for t in sampler.sample(&wf).unwrap().samples {
            let i = sector.position(&t.configs[0]).unwrap();
            let j = sector.position(&t.configs[1]).unwrap();
            counts[cell(i, j)] += 1;
        }
        proposals += sampler.chains.iter().map(|c| c.proposed).sum::<u64>();
    }
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (c, p) in counts.iter().zip(&expected) {
        if *p > 0.0 {
            let e = p * n as f64;
            stat += (*c as f64 - e).powi(2) / e;
            cells += 1;
        } else if *c > 0 {
            return (false, format!("{c} samples in a zero-probability cell"));
        }
    }
    let dof = (cells - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    (
        p > 0.01,
        format!(
            "{proposals} proposals, {n} samples, chi2 = {stat:.1} on {dof} dof, p = {p:.3} (> 0.01)"
        ),
    )
}

/// Largest `|estimate − reference| / error` over real and imaginary parts.
/// Differences below 1e-10 count as exact agreement: gauge directions of the
/// ansatz have constant traces, so their covariance is zero up to rounding
/// and so is its error bar.
fn z_score(est: &MatrixEstimate, reference: &CMat) -> f64 {
    let mut worst: f64 = 0.0;
    for ((v, e), r) in est.value.iter().zip(est.error.iter()).zip(reference.iter()) {
        for (dv, de) in [((v.re - r.re).abs(), e.re), ((v.im - r.im).abs(), e.im)] {
            let z = if dv < 1e-10 { 0.0 } else if de > 0.0 { dv / de } else { f64::INFINITY };
            worst = worst.max(z);
        }
    }
    worst
}

fn criterion_4() -> Outcome {
    const CASES: u64 = 20;
    let (g, sector) = chain4();
    let mut worst = [0.0_f64; 7];
    let names = ["OEM", "OVM", "overlap fwd", "overlap bwd", "fidelity prod", "fidelity var", "QGT"];
    let settings = |seed| ChainSettings::new(64, 1563, seed);
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let kets = random_complex_matrix(&mut rng, sector.len(), 2);
        let psi_kets = &kets + random_complex_matrix(&mut rng, sector.len(), 2) * C64::new(0.4, 0.0);
        let h = random_hermitian(&mut rng, sector.len());
        let op = SectorMatrixOperator::new(sector.clone(), h.clone()).unwrap();
        let model = DenseModel::new(sector.clone(), kets.clone()).unwrap();
        let psi = DenseModel::new(sector.clone(), psi_kets.clone()).unwrap();
        let a = DenseSubspaceBasis::new(kets.clone()).unwrap();
        let b = DenseSubspaceBasis::new(psi_kets.clone()).unwrap();
        let batch = Sampler::new(settings(case), &model).unwrap().sample(&model).unwrap();

        let oem_ref = oem(&a, &h).unwrap().entries;
        worst[0] = worst[0].max(z_score(&estimate_oem(&model, &batch, &op).unwrap(), &oem_ref));
        let ovm_ref = ovm_ocm(&a, &h, None).unwrap().entries;
        worst[1] = worst[1].max(z_score(&estimate_cov_matrix(&model, &batch, &op, None, None).unwrap(), &ovm_ref));
        let fwd_ref = gram(&a).unwrap().solve(&(kets.adjoint() * &psi_kets));
        let bwd_ref = gram(&b).unwrap().solve(&(psi_kets.adjoint() * &kets));
        let ov = estimate_overlap(&psi, &batch).unwrap();
        worst[2] = worst[2].max(z_score(&ov.forward, &fwd_ref));
        worst[3] = worst[3].max(z_score(&ov.backward, &bwd_ref));
        let f_ref = fidelity_matrices(&a, &b).unwrap().0.entries;
        for (k, mode) in [(4, FidelityMode::Product), (5, FidelityMode::Variance)] {
            let f = estimate_fidelity_matrix(&psi, &batch, mode).unwrap();
            worst[k] = worst[k].max(z_score(&f.matrix, &f_ref));
        }

        let mut cfg = AnsatzConfig::heads_only(2, 2);
        cfg.head_init_std = 0.3;
        let wf = Ansatz::new(g.clone(), cfg, 500 + case).unwrap();
        let exact = exact_qgt(&wf, &sector);
        let batch = Sampler::new(settings(600 + case), &wf).unwrap().sample(&wf).unwrap();
        let (value, error) = qgt_estimate(&wf, &batch);
        let est = MatrixEstimate {
            value: value.map(|x| C64::new(x, 0.0)),
            error: error.map(|x| C64::new(x, 0.0)),
            n_samples: batch.len(),
        };
        worst[6] = worst[6].max(z_score(&est, &exact.map(|x| C64::new(x, 0.0))));
    }
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, z)| format!("{n} {z:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        worst.iter().all(|z| *z < 5.0),
        format!("max |z| over {CASES} cases of 100032 samples: {detail} (< 5)"),
    )
}

fn qgt_estimate(wf: &Ansatz, batch: &Batch) -> (RMat, RMat) {
    let rows: Vec<Vec<C64>> = batch.samples.iter().map(|t| jacobian_traces(wf, t).unwrap()).collect();
    let traces = CMat::from_fn(rows.len(), wf.n_params(), |k, mu| rows[k][mu]);
    estimate_qgt_with_errors(&traces, batch, wf.n_states()).unwrap()
}

/// `(1/N)·Re Cov[Tr D̃_μ, Tr D̃_ν]` by enumerating every tuple.
fn exact_qgt(wf: &Ansatz, sector: &SectorIndex) -> RMat {
    let en = TupleEnumeration::new(DenseSubspaceBasis::new(dense_kets(wf, sector).unwrap()).unwrap()).unwrap();
    let m = wf.n_params();
    let mut mean = vec![C64::new(0.0, 0.0); m];
    let mut second = CMat::zeros(m, m);
    for (t, &p) in en.tuples.iter().zip(&en.probs) {
        if p == 0.0 {
            continue;
        }
        let tuple = SampledTuple::new(wf, t.iter().map(|&i| sector.configs()[i].clone()).collect()).unwrap();
        let d = jacobian_traces(wf, &tuple).unwrap();
        for a in 0..m {
            mean[a] += d[a] * p;
            for b in 0..m {
                second[(a, b)] += d[a].conj() * d[b] * p;
            }
        }
    }
    let n = wf.n_states() as f64;
    RMat::from_fn(m, m, |a, b| (second[(a, b)] - mean[a].conj() * mean[b]).re / n)
}

fn final_principal_values(wf: &Ansatz, sampler: &mut Sampler, h: &Heisenberg) -> Vec<f64> {
    let batch = sampler.sample(wf).unwrap();
    let locals = local_matrices(wf, &batch, h).unwrap();
    principal_values_from_locals(&locals, &batch, wf.n_sites(), 0.0).unwrap().values
}

fn run_chain(lx: usize, hidden: usize, lr: f64, steps: usize, chains: usize, seed: u64) -> (Vec<StepRecord>, Vec<f64>) {
    let g = LatticeGeometry::chain(lx).unwrap();
    let h = Heisenberg::new(g.clone());
    let mut wf = Ansatz::new(g, AnsatzConfig::heads_only(2, hidden), seed).unwrap();
    let mut sampler = Sampler::new(ChainSettings::new(chains, 64, seed), &wf).unwrap();
    let settings = SrSettings::new(lr, steps);
    let recs = optimize(&mut wf, &mut sampler, &h, &settings, 0, |_, _, _| Ok(ControlFlow::Continue(()))).unwrap();
    let pv = final_principal_values(&wf, &mut sampler, &h);
    (recs, pv)
}

fn criterion_5a(descent: &mut Vec<StepRecord>) -> Outcome {
    let (recs, pv) = run_chain(2, 2, 0.05, 20, 8, 1);
    let e = pv.iter().sum::<f64>() / pv.len() as f64;
    descent.extend(recs);
    ((e + 0.25).abs() < 1e-3, format!("E = {e:.10} vs -0.25 (tol 1e-3)"))
}

fn criterion_5b(descent: &mut Vec<StepRecord>) -> Outcome {
    let (g, sector) = chain4();
    let ed = lowest_k(&Heisenberg::new(g), &sector, 2, 0).unwrap().energies;
    let (recs, pv) = run_chain(4, 4, 0.05, 300, 16, 1);
    descent.extend(recs);
    let rel: Vec<f64> = pv.iter().zip(&ed).map(|(e, x)| ((e - x) / x).abs()).collect();
    (
        rel.iter().all(|r| *r < 1e-3),
        format!("principal values {pv:.6?} vs ED {ed:.6?}, relative errors {} (tol 1e-3)", sci(&rel)),
    )
}

fn criterion_5c() -> Outcome {
    let g = LatticeGeometry::square(4).unwrap();
    let h = Heisenberg::new(g.clone());
    let sector = SectorIndex::sector(&g, 0);
    let ed = lowest_k(&h, &sector, 3, 0).unwrap().energies;
    let mut wf = Ansatz::new(g.clone(), AnsatzConfig::heads_only(3, 16), 1).unwrap();
    let mut sampler = Sampler::new(ChainSettings::new(32, 64, 1), &wf).unwrap();
    let settings = SrSettings::new(SrSettings::default_rate(g.n_sites()), 5000);
    let mut reached = None;
    optimize(&mut wf, &mut sampler, &h, &settings, 0, |r, _, _| {
        let ok = r.principal_values.iter().zip(&ed).all(|(e, x)| ((e - x) / x).abs() < 5e-3);
        if ok && reached.is_none() {
            reached = Some(r.step);
        }
        Ok(ControlFlow::Continue(()))
    })
    .unwrap();
    let pv = final_principal_values(&wf, &mut sampler, &h);
    let rel: Vec<f64> = pv.iter().zip(&ed).map(|(e, x)| ((e - x) / x).abs()).collect();
    (
        rel.iter().all(|r| *r < 5e-3),
        format!(
            "final {pv:.4?} vs ED {ed:.4?}, relative {} (tol 5e-3); first within tolerance at step {reached:?}",
            sci(&rel)
        ),
    )
}

fn sci(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(", "))
}

fn criterion_6() -> Outcome {
    let g = LatticeGeometry::new(4, 2).unwrap();
    let sector = SectorIndex::sector(&g, 0);
    let h = Heisenberg::new(g.clone());
    let spec = lowest_k(&h, &sector, 3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let kets = &spec.vectors * random_complex_matrix(&mut rng, 3, 3);
    let model = DenseModel::new(sector, kets).unwrap();
    let batch = Sampler::new(ChainSettings::new(8, 200, 6), &model).unwrap().sample(&model).unwrap();
    let sv = scalar_values(&model, &batch, &h, g.n_sites()).unwrap();
    let v = sv.v_score.unwrap();
    (
        sv.variance.abs() < 1e-9 && v.abs() < 1e-9,
        format!("Var[Tr H] = {:.1e}, V-score = {v:.1e} (< 1e-9)", sv.variance),
    )
}

fn criterion_7() -> Outcome {
    let g = LatticeGeometry::chain(2).unwrap();
    let sector = SectorIndex::sector(&g, 0);
    let h = Heisenberg::new(g.clone());
    let ground = lowest_k(&h, &sector, 1, 0).unwrap().vectors;
    let model = DenseModel::new(sector, ground).unwrap();
    let batch = Sampler::new(ChainSettings::new(8, 500, 7), &model).unwrap().sample(&model).unwrap();
    let s = structure_factor(&model, &batch, &h, &g, Momentum::new(&g, 1, 0), 1e-8).unwrap();
    let (v, e) = (s.values[0], s.errors[0]);
    ((v - 0.5).abs() <= 5.0 * e + 1e-12, format!("S(pi) = {v:.6} +- {e:.1e} vs 0.5"))
}

fn criterion_9a() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ps = [-2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 4.0];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let dim = rng.random_range(4..=8);
        let n = rng.random_range(1..=3);
        let a = DenseSubspaceBasis::new(random_complex_matrix(&mut rng, dim, n)).unwrap();
        let b = DenseSubspaceBasis::new(random_complex_matrix(&mut rng, dim, n)).unwrap();
        let f: Vec<f64> = ps.iter().map(|&p| p_fidelity(&a, &b, p).unwrap()).collect();
        for w in f.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    (worst <= 1e-12, format!("largest decrease {worst:.1e} over p in {ps:?} (<= 1e-12)"))
}

fn criterion_9b() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(3..=10);
        let n = rng.random_range(1..dim);
        let a = DenseSubspaceBasis::new(random_complex_matrix(&mut rng, dim, n)).unwrap();
        let p = projector(&a).unwrap();
        let x = random_complex_matrix(&mut rng, n, n);
        let q = projector(&a.transformed(&x).unwrap()).unwrap();
        worst = worst
            .max((&p * &p - &p).camax())
            .max((&p - p.adjoint()).camax())
            .max((&q - &p).camax());
    }
    (worst < 1e-10, format!("max deviation {worst:.1e} over 100 bases (< 1e-10)"))
}

fn criterion_9c(records: &[StepRecord]) -> Outcome {
    let worst = records
        .iter()
        .map(|r| r.descent / (r.grad_norm * r.update_norm).max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    (
        !records.is_empty() && worst <= 1e-10,
        format!("{} steps, max g.dtheta/(|g||dtheta|) = {worst:.2e} (<= 0 up to 1e-10)", records.len()),
    )
}

fn criterion_9d() -> Outcome {
    let g = LatticeGeometry::new(4, 2).unwrap();
    let sector = SectorIndex::sector(&g, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for pair in 0..20 {
        let mut cfg = AnsatzConfig::heads_only(2, 3);
        cfg.feature_map = Some(FeatureMapConfig {
            channels: 2,
            kernel: 3,
            blocks: 1,
            expansion: 2,
            kernel_dw: 3,
        });
        cfg.shared_init_std = 0.3;
        cfg.head_init_std = 0.3;
        let wf = Ansatz::new(g.clone(), cfg.clone(), 700 + pair).unwrap();
        let pick = rand::seq::index::sample(&mut rng, sector.len(), 2).into_vec();
        let configs: Vec<_> = pick.iter().map(|&i| sector.configs()[i].clone()).collect();
        let tuple = SampledTuple::new(&wf, configs.clone()).unwrap();
        let traces = jacobian_traces(&wf, &tuple).unwrap();
        let base = wf.params().to_vec();
        let step = 1e-5;
        for mu in (0..wf.n_params()).step_by(7) {
            let logdet = |delta: f64| {
                let mut p = base.clone();
                p[mu] += delta;
                let w = Ansatz::from_params(g.clone(), cfg.clone(), p).unwrap();
                let ld = SampledTuple::new(&w, configs.clone()).unwrap().logdet();
                C64::new(ld.log_abs, ld.phase.arg())
            };
            let mut diff = logdet(step) - logdet(-step);
            diff.im -= (diff.im / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            let fd = diff / (2.0 * step);
            worst = worst.max((fd - traces[mu]).norm() / traces[mu].norm().max(1e-2));
            checked += 1;
        }
    }
    (worst < 1e-5, format!("{checked} parameters over 20 (params, tuple) pairs, max relative error {worst:.1e} (< 1e-5)"))
}
