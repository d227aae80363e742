//! Randomised property suites for the inequalities and identities the
//! estimators rely on. Each suite reports its failures with a counterexample.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gw::Coupling;
use crate::instances::{hard_eta, rademacher_symmetric, seeded_stream, uniform_permutation};
use crate::linalg::{sym_inv_sqrt, sym_inverse, sym_sqrt, SymMatrix};
use crate::model::{hamming_loss, trace_loss};
use crate::qmle::{exhaustive_search, Sense};

/// Trial counts per suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyCounts {
    pub trace_frobenius: usize,
    pub trace_frobenius_matrix: usize,
    pub trace_loss_nonneg: usize,
    pub sandwich: usize,
    pub quadratic: usize,
    pub hard_prior_draws: usize,
    pub hard_prior_pairs: usize,
    pub permutation_algebra: usize,
}

impl Default for VerifyCounts {
    fn default() -> Self {
        Self {
            trace_frobenius: 100_000,
            trace_frobenius_matrix: 2_000,
            trace_loss_nonneg: 10_000,
            sandwich: 10_000,
            quadratic: 10_000,
            hard_prior_draws: 200,
            hard_prior_pairs: 100,
            permutation_algebra: 1_000,
        }
    }
}

impl VerifyCounts {
    /// Every count divided by `factor` (at least 1).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = |n: usize| (n / factor.max(1)).max(1);
        Self {
            trace_frobenius: f(self.trace_frobenius),
            trace_frobenius_matrix: f(self.trace_frobenius_matrix),
            trace_loss_nonneg: f(self.trace_loss_nonneg),
            sandwich: f(self.sandwich),
            quadratic: f(self.quadratic),
            hard_prior_draws: f(self.hard_prior_draws).max(10),
            hard_prior_pairs: f(self.hard_prior_pairs),
            permutation_algebra: f(self.permutation_algebra),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Inputs rejected by a precondition guard; never counted as failures.
    pub invalid: usize,
    pub counterexample: Option<String>,
    pub elapsed_ms: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub suites: Vec<SuiteResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>8} {:>8} {:>10}  status", "suite", "trials", "failed", "invalid", "ms")?;
        for s in &self.suites {
            writeln!(
                f,
                "{:<28} {:>8} {:>8} {:>8} {:>10.1}  {}",
                s.name,
                s.trials,
                s.failures,
                s.invalid,
                s.elapsed_ms,
                if s.passed() { "PASS" } else { "FAIL" }
            )?;
            if let Some(c) = &s.counterexample {
                writeln!(f, "    counterexample: {c}")?;
            }
        }
        Ok(())
    }
}

struct Tally {
    name: &'static str,
    start: Instant,
    trials: usize,
    failures: usize,
    invalid: usize,
    counterexample: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { name, start: Instant::now(), trials: 0, failures: 0, invalid: 0, counterexample: None }
    }

    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            trials: self.trials,
            failures: self.failures,
            invalid: self.invalid,
            counterexample: self.counterexample,
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// Checks `Σ(xᵢ−1)² ≤ 4(S + S²)` with `S = Σ(xᵢ−1)`. Inputs that are not
/// strictly positive with unit product are rejected as invalid.
pub fn check_trace_frobenius(x: &[f64]) -> Result<bool> {
    if x.is_empty() || x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("entries must be finite and strictly positive".into()));
    }
    let log_prod: f64 = x.iter().map(|v| v.ln()).sum();
    if log_prod.abs() > 1e-9 * x.len() as f64 {
        return Err(Error::InvalidArgument(format!("product must be 1, log-product is {log_prod:e}")));
    }
    let s: f64 = x.iter().map(|v| v - 1.0).sum();
    let lhs: f64 = x.iter().map(|v| (v - 1.0).powi(2)).sum();
    let rhs = 4.0 * (s + s * s);
    Ok(lhs <= rhs + 1e-9 * (1.0 + lhs))
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `Q diag(exp(s zᵢ)) Qᵀ` with Haar-ish `Q` and spread `s ∈ [0, max_spread]`.
fn random_pd(d: usize, max_spread: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    let q = gaussian_matrix(d, d, rng).qr().q();
    let spread = rng.random_range(0.0..=max_spread);
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        (spread * z).exp()
    }));
    SymMatrix::symmetrized(&q * diag * q.transpose())
}

fn trace_frobenius_scalar(count: usize, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut t = Tally::new("trace-frobenius");
    for _ in 0..count {
        let d = rng.random_range(1..=10);
        let sigma = 10f64.powf(rng.random_range(-3.0..0.5));
        let mut x: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (sigma * z).exp()
            })
            .collect();
        let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / d as f64;
        x.iter_mut().for_each(|v| *v = (v.ln() - mean_log).exp());
        match check_trace_frobenius(&x) {
            Ok(ok) => t.record(ok, || format!("x = {x:?}")),
            Err(_) => t.invalid += 1,
        }
    }
    t.finish()
}

fn trace_frobenius_matrix(count: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("trace-frobenius-matrix");
    for _ in 0..count {
        let d = rng.random_range(2..=8);
        let sigma = random_pd(d, 1.5, rng);
        let pi = uniform_permutation(d, rng);
        let tl = trace_loss(&sigma, &pi)?;
        let bound = 4.0 * (tl + tl * tl);
        let slack = 1e-8 * (1.0 + bound.abs());
        let w = sym_inv_sqrt(&sigma)?;
        let moved = sigma.perm_apply(&pi.invert())?;
        let lhs1 = (w.as_matrix() * moved.as_matrix() * w.as_matrix() - DMatrix::identity(d, d)).norm_squared();
        let r = sym_sqrt(&sigma)?;
        let inv_moved = sym_inverse(&sigma)?.perm_apply(&pi)?;
        let lhs2 = (r.as_matrix() * inv_moved.as_matrix() * r.as_matrix() - DMatrix::identity(d, d)).norm_squared();
        t.record(lhs1 <= bound + slack && lhs2 <= bound + slack, || {
            format!("d={d} pi={pi} trace_loss={tl:e} lhs=({lhs1:e}, {lhs2:e}) sigma={:?}", sigma.to_rows())
        });
    }
    Ok(t.finish())
}

fn trace_loss_nonneg(count: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("trace-loss-nonnegative");
    for _ in 0..count {
        let d = rng.random_range(2..=8);
        let sigma = random_pd(d, 1.5, rng);
        let pi = uniform_permutation(d, rng);
        let tl = trace_loss(&sigma, &pi)?;
        t.record(tl >= -1e-9, || format!("pi={pi} trace_loss={tl:e} sigma={:?}", sigma.to_rows()));
    }
    Ok(t.finish())
}

fn sandwich(count: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("frobenius-inverse-sandwich");
    for _ in 0..count {
        let d = rng.random_range(1..=8);
        let sigma = random_pd(d, 2.0, rng);
        let id = SymMatrix::identity(d);
        let a = sigma.sub(&id)?.frobenius_norm().min(1.0);
        if a == 0.0 {
            t.invalid += 1;
            continue;
        }
        let b = sym_inverse(&sigma)?.sub(&id)?.frobenius_norm().min(1.0);
        let ratio = b / a;
        t.record((0.5 - 1e-12..=2.0 + 1e-12).contains(&ratio), || format!("ratio={ratio} sigma={:?}", sigma.to_rows()));
    }
    Ok(t.finish())
}

/// `x ≤ b/a + √(c/a)` whenever `a x² ≤ b x + c` with `a > 0`, `b, c ≥ 0`.
pub fn check_quadratic_bound(a: f64, b: f64, c: f64, x: f64) -> Result<bool> {
    if !(a > 0.0) || b < 0.0 || c < 0.0 || x < 0.0 || a * x * x > b * x + c {
        return Err(Error::InvalidArgument("premise a x² <= b x + c does not hold".into()));
    }
    Ok(x <= (b / a + (c / a).sqrt()) * (1.0 + 1e-12))
}

fn quadratic(count: usize, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut t = Tally::new("quadratic-bound");
    for k in 0..count {
        let logu = |r: &mut ChaCha8Rng| 10f64.powf(r.random_range(-3.0..3.0));
        let a = logu(rng);
        let b = if k % 10 == 0 { 0.0 } else { logu(rng) };
        let c = if k % 10 == 1 { 0.0 } else { logu(rng) };
        let root = (b + (b * b + 4.0 * a * c).sqrt()) / (2.0 * a);
        let x = if k % 7 == 0 { root } else { root * rng.random_range(0.0..1.0) };
        match check_quadratic_bound(a, b, c, x) {
            Ok(ok) => t.record(ok, || format!("a={a} b={b} c={c} x={x}")),
            Err(_) => t.invalid += 1,
        }
    }
    t.finish()
}

/// `⟨P Σ⁻¹ Pᵀ, Σ⟩` at the barycentre versus the best permutation, for `Σ = diag(1, ½, ½)`.
pub fn interior_counterexample() -> Result<(f64, f64)> {
    let sigma = SymMatrix::from_diagonal(&[1.0, 0.5, 0.5]);
    let inv = sym_inverse(&sigma)?;
    let interior = Coupling::uniform(3).gw_objective(&inv, &sigma)?;
    let best = exhaustive_search(&inv, &sigma, Sense::Min)?.objective;
    Ok((interior, best))
}

fn interior_suite() -> Result<SuiteResult> {
    let mut t = Tally::new("interior-counterexample");
    let (interior, best) = interior_counterexample()?;
    let ok = (interior - 10.0 / 9.0).abs() <= 1e-12 && (best - 3.0).abs() <= 1e-12 && interior < best;
    t.record(ok, || format!("interior={interior} best permutation={best}"));
    Ok(t.finish())
}

fn hard_prior(draws: usize, pairs: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("hard-prior");
    let c1 = 3.0;
    let c2 = 0.05;
    for d in [16usize, 32, 64] {
        let bound = c1 * (d as f64).sqrt();
        let mut accepted = Vec::new();
        for _ in 0..draws {
            let s = rademacher_symmetric(d, rng);
            if s.op_norm()? <= bound {
                accepted.push(s);
            }
        }
        let rate = accepted.len() as f64 / draws as f64;
        t.record(rate >= 0.5, || format!("d={d} acceptance rate {rate}"));
        // Smallest sample sizes give the largest η.
        let eta = hard_eta(d, d, d, c1, 0.5);
        for s in &accepted {
            let fro = s.frobenius_norm().powi(2);
            t.record(fro == (d * d) as f64, || format!("d={d} ‖S‖_F² = {fro}"));
            let sigma = SymMatrix::identity(d).add(&s.scaled(eta))?.scaled(0.5);
            let op = sigma.op_norm()?;
            t.record(op <= 1.0 + 1e-12, || format!("d={d} eta={eta} ‖Σ‖_op = {op}"));
        }
        if d >= 32 {
            for s in accepted.iter().take(5) {
                let mut done = 0;
                while done < pairs {
                    let p1 = uniform_permutation(d, rng);
                    let p2 = uniform_permutation(d, rng);
                    if hamming_loss(&p1, &p2)? * 10 < d {
                        continue;
                    }
                    done += 1;
                    let gap = s.perm_apply(&p1)?.sub(&s.perm_apply(&p2)?)?.frobenius_norm().powi(2);
                    t.record(gap >= c2 * (d * d) as f64, || format!("d={d} pi1={p1} pi2={p2} gap={gap}"));
                }
            }
        }
    }
    Ok(t.finish())
}

fn permutation_algebra(count: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("permutation-algebra");
    for _ in 0..count {
        let d = rng.random_range(1..=8);
        let a = SymMatrix::symmetrized(gaussian_matrix(d, d, rng));
        let p1 = uniform_permutation(d, rng);
        let p2 = uniform_permutation(d, rng);
        let both = p1.compose(&p2)?;
        let lhs = a.perm_apply(&p1)?.perm_apply(&p2)?;
        t.record(lhs == a.perm_apply(&both)?, || format!("composition: A={:?} pi1={p1} pi2={p2}", a.to_rows()));
        let pm = p1.matrix() * p2.matrix();
        t.record(pm == p2.compose(&p1)?.matrix(), || format!("matrix product: pi1={p1} pi2={p2}"));
        let sandwich = p1.matrix() * a.as_matrix() * p1.matrix().transpose();
        t.record(&sandwich == a.perm_apply(&p1)?.as_matrix(), || format!("P A Pᵀ: pi={p1}"));
        t.record(p1.matrix().transpose() == p1.invert().matrix(), || format!("inverse matrix: pi={p1}"));
        t.record(p1.compose(&p1.invert())?.is_identity() && p1.invert().compose(&p1)?.is_identity(), || {
            format!("inverse: pi={p1}")
        });
        let (f0, f1) = (a.frobenius_norm(), a.perm_apply(&p1)?.frobenius_norm());
        t.record((f0 - f1).abs() <= 4.0 * f64::EPSILON * f0, || format!("frobenius invariance: {f0} vs {f1}"));
    }
    Ok(t.finish())
}

fn inverse_commutation(count: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("inverse-permutation");
    for _ in 0..count {
        let d = rng.random_range(1..=8);
        let a = random_pd(d, 1.0, rng);
        let pi = uniform_permutation(d, rng);
        let lhs = sym_inverse(&a.perm_apply(&pi)?)?;
        let rhs = sym_inverse(&a)?.perm_apply(&pi)?;
        let err = lhs.sub(&rhs)?.frobenius_norm() / rhs.frobenius_norm();
        t.record(err <= 1e-9, || format!("pi={pi} relative error {err:e}"));
    }
    Ok(t.finish())
}

/// Runs every suite; suite `k` draws from stream `k` of `seed`.
pub fn verify_lemmas(seed: u64, counts: &VerifyCounts) -> Result<VerificationReport> {
    let rng = |k: u64| seeded_stream(seed, 100 + k);
    let suites = vec![
        trace_frobenius_scalar(counts.trace_frobenius, &mut rng(0)),
        trace_frobenius_matrix(counts.trace_frobenius_matrix, &mut rng(1))?,
        trace_loss_nonneg(counts.trace_loss_nonneg, &mut rng(2))?,
        sandwich(counts.sandwich, &mut rng(3))?,
        quadratic(counts.quadratic, &mut rng(4)),
        interior_suite()?,
        hard_prior(counts.hard_prior_draws, counts.hard_prior_pairs, &mut rng(5))?,
        permutation_algebra(counts.permutation_algebra, &mut rng(6))?,
        inverse_commutation(counts.permutation_algebra, &mut rng(7))?,
    ];
    Ok(VerificationReport { suites })
}
