//! Exact-enumeration verification suite for the determinant-sampling
//! identities and the matrix-minor identities behind them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimators::oracle::{
    covariance_average, covariance_reference, minor_sum_identity, minor_sum_reduced, one_local_average,
    one_local_reference, two_local_average, two_local_reference, EntryPair, MinorFn, TupleEnumeration,
};
use crate::grassmann::{remove_rows_cols, DenseSubspaceBasis};
use crate::lattice::{LatticeGeometry, SectorIndex};
use crate::linalg::{random_complex_matrix, random_hermitian, C64};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Sectors up to dimension 6.
    Fast,
    /// Sectors up to dimension 8.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const EXACT_TOL: f64 = 1e-10;
pub const MINOR_TOL: f64 = 1e-9;

#[derive(Default)]
struct Tally {
    cases: usize,
    max_error: f64,
    failed_eval: bool,
}

impl Tally {
    fn add(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() {
            self.failed_eval = true;
        } else {
            self.max_error = self.max_error.max(err);
        }
    }

    fn add_result(&mut self, r: Result<f64>) {
        match r {
            Ok(e) => self.add(e),
            Err(_) => {
                self.cases += 1;
                self.failed_eval = true;
            }
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            cases: self.cases,
            max_error: if self.failed_eval { f64::INFINITY } else { self.max_error },
            tolerance,
            passed: !self.failed_eval && self.max_error < tolerance,
        }
    }
}

fn rel(a: C64, b: C64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

struct Case {
    en: TupleEnumeration,
    a: crate::linalg::CMat,
    b: crate::linalg::CMat,
}

fn appendix_cases(rng: &mut ChaCha8Rng, tier: Tier) -> Result<Vec<Case>> {
    let geom = LatticeGeometry::chain(4)?;
    let dim = SectorIndex::sector(&geom, 0).len();
    let mut shapes = vec![(dim, 2); 10];
    if tier == Tier::Full {
        shapes.extend([(dim, 3), (7, 2), (7, 3), (8, 2), (8, 3)]);
    }
    shapes
        .into_iter()
        .map(|(d, n)| {
            let basis = DenseSubspaceBasis::new(random_complex_matrix(rng, d, n))?;
            let a = random_hermitian(rng, d) * basis.kets();
            let b = random_hermitian(rng, d) * basis.kets();
            Ok(Case {
                en: TupleEnumeration::new(basis)?,
                a,
                b,
            })
        })
        .collect()
}

fn entry_pairs(n: usize) -> Vec<EntryPair> {
    let mut out = Vec::new();
    for i1 in 0..n {
        for j1 in 0..n {
            for i2 in 0..n {
                for j2 in 0..n {
                    out.push(EntryPair { i1, j1, i2, j2 });
                }
            }
        }
    }
    out
}

/// Runs every identity check. `minor` is the complementary-minor routine
/// under test.
pub fn run_suite(tier: Tier, minor: MinorFn, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = sampling_checks(tier, derive_seed(seed, 0))?;
    out.extend(minor_checks(tier, minor, derive_seed(seed, 1))?);
    Ok(out)
}

/// One- and two-local determinant-sampling averages against their closed
/// forms.
pub fn sampling_checks(tier: Tier, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = appendix_cases(&mut rng, tier)?;
    let mut results = Vec::new();

    let mut one = Tally::default();
    let mut same = Tally::default();
    let mut diff = Tally::default();
    let mut assembled = Tally::default();
    let mut sampled = Tally::default();
    for c in &cases {
        let n = c.en.n();
        let reference = one_local_reference(&c.en.basis, &c.a)?;
        for per_k in one_local_average(&c.en, &c.a)? {
            one.add((per_k - &reference).camax());
        }
        let mean_a = &reference * C64::new(n as f64, 0.0);
        let mean_b = one_local_reference(&c.en.basis, &c.b)? * C64::new(n as f64, 0.0);
        for e in entry_pairs(n) {
            let s_ref = two_local_reference(&c.en.basis, &c.a, &c.b, e, true)?;
            let d_ref = two_local_reference(&c.en.basis, &c.a, &c.b, e, false)?;
            let s = two_local_average(&c.en, &c.a, &c.b, e, n - 1, n - 1)?;
            let d = two_local_average(&c.en, &c.a, &c.b, e, 0, n - 1)?;
            same.add((s - s_ref).norm());
            diff.add((d - d_ref).norm());
            let nf = n as f64;
            let cov_branches = s * nf + d * (nf * (nf - 1.0)) - mean_a[(e.i1, e.j1)].conj() * mean_b[(e.i2, e.j2)];
            let cov_ref = covariance_reference(&c.en.basis, &c.a, &c.b, e)?;
            assembled.add((cov_branches - cov_ref).norm());
            sampled.add((covariance_average(&c.en, &c.a, &c.b, e)? - cov_ref).norm());
        }
    }
    results.push(one.finish("one-local average", EXACT_TOL));
    results.push(same.finish("two-local average, equal positions", EXACT_TOL));
    results.push(diff.finish("two-local average, distinct positions", EXACT_TOL));
    results.push(assembled.finish("two-local covariance from branches", EXACT_TOL));
    results.push(sampled.finish("two-local covariance on sampling support", EXACT_TOL));
    Ok(results)
}

/// Complementary minors against direct minors, and the minor-sum identity
/// in its full and reduced forms.
pub fn minor_checks(tier: Tier, minor: MinorFn, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let max_dim = if tier == Tier::Full { 8 } else { 6 };
    let mut direct = Tally::default();
    let mut sums = Tally::default();
    let mut reduced = Tally::default();
    for _ in 0..100 {
        let d = rng.random_range(2..=max_dim.min(6));
        let w = random_complex_matrix(&mut rng, d, d);
        let m = rng.random_range(1..=2.min(d - 1));
        let rows = distinct(&mut rng, d, m);
        let cols = distinct(&mut rng, d, m);
        let expect = remove_rows_cols(&w, &rows, &cols).determinant();
        direct.add_result(minor(&w, &rows, &cols).map(|v| rel(v, expect)));

        let dim = rng.random_range(3..=max_dim);
        let n = rng.random_range(2..=3.min(dim));
        let m = rng.random_range(1..=2.min(n - 1));
        let basis = DenseSubspaceBasis::new(random_complex_matrix(&mut rng, dim, n))?;
        let positions = distinct(&mut rng, n, m);
        let ci = distinct(&mut rng, n, m);
        let cj = distinct(&mut rng, n, m);
        sums.add_result(minor_sum_identity(&basis, &positions, &ci, &cj, minor).map(|(l, r)| rel(l, r)));
        reduced.add_result(minor_sum_reduced(&basis, &ci, &cj).map(|(l, r)| rel(l, r)));
    }
    results.push(direct.finish("complementary minor vs direct minor", MINOR_TOL));
    results.push(sums.finish("sum of matrix minors", MINOR_TOL));
    results.push(reduced.finish("sum of matrix minors, reduced tuples", MINOR_TOL));
    Ok(results)
}

/// `m` distinct sorted indices below `n`.
fn distinct(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, m).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::{minor_complement, select_rows_cols};
    use crate::error::Error;
    use crate::linalg::CMat;

    #[test]
    fn fast_tier_passes() {
        let r = run_suite(Tier::Fast, minor_complement, 0).unwrap();
        for c in &r {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(r, run_suite(Tier::Fast, minor_complement, 0).unwrap());
    }

    #[test]
    fn sign_corruption_is_caught() {
        fn unsigned(w: &CMat, rows: &[usize], cols: &[usize]) -> Result<C64> {
            let inv = w.clone().try_inverse().ok_or(Error::SingularInput)?;
            Ok(select_rows_cols(&inv, cols, rows).determinant() * w.determinant())
        }
        let r = run_suite(Tier::Fast, unsigned, 0).unwrap();
        assert!(r.iter().any(|c| !c.passed));
    }
}
