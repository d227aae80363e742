//! Ground-truth generators and full instance assembly.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, Permutation, SymMatrix};
use crate::model::{sample_covariance, sample_covariance_centered, sample_gaussian, AlignmentInstance, SampleSize};

/// Maximum Rademacher draws before [`hard_instance`] gives up.
pub const REJECTION_BUDGET: usize = 1000;

/// Independent random streams carved out of one instance seed.
mod stream {
    pub const SIGMA: u64 = 0;
    pub const PI_STAR: u64 = 1;
    pub const X: u64 = 2;
    pub const Y: u64 = 3;
}

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    #[default]
    None,
    /// Divide by the largest eigenvalue.
    Opnorm,
    /// Divide by the trace.
    Trace,
}

impl std::str::FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalize::None),
            "opnorm" => Ok(Normalize::Opnorm),
            "trace" => Ok(Normalize::Trace),
            other => Err(Error::InvalidArgument(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    Robinson,
    Wishart,
    Hard,
    /// Ground-truth covariance read from a headerless CSV matrix file.
    CustomFile(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: InstanceKind,
    pub d: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub m: SampleSize,
    pub n: SampleSize,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c5")]
    pub c5: f64,
    pub seed: u64,
    /// Mean-center the sample covariances.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub center: bool,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_c1() -> f64 {
    3.0
}
fn default_c5() -> f64 {
    0.5
}

impl InstanceSpec {
    pub fn new(kind: InstanceKind, d: usize, m: SampleSize, n: SampleSize, seed: u64) -> Self {
        Self { kind, d, gamma: default_gamma(), m, n, normalize: Normalize::None, c1: default_c1(), c5: default_c5(), seed, center: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidArgument(format!("d must be >= 2, got {}", self.d)));
        }
        if self.kind == InstanceKind::Robinson && !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        if !(self.c1 > 0.0) || !(self.c5 > 0.0) {
            return Err(Error::InvalidArgument("c1 and c5 must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ_ij = (1 + |i − j|)^{−γ}`.
pub fn robinson(d: usize, gamma: f64) -> Result<SymMatrix> {
    if d < 1 {
        return Err(Error::InvalidArgument("d must be >= 1".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(SymMatrix::from_upper_fn(d, |i, j| (1.0 + (j - i) as f64).powf(-gamma)))
}

/// `Σ = G Gᵀ` with `G` a `d × d` standard Gaussian matrix, i.e. `W_d(I_d, d)`.
pub fn wishart<R: Rng + ?Sized>(d: usize, rng: &mut R, normalize: Normalize) -> Result<SymMatrix> {
    if d < 1 {
        return Err(Error::InvalidArgument("d must be >= 1".into()));
    }
    let mut g = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        for i in 0..d {
            g[(i, k)] = rng.sample(StandardNormal);
        }
    }
    let raw = SymMatrix::symmetrized(&g * g.transpose());
    apply_normalization(raw, normalize)
}

pub fn apply_normalization(sigma: SymMatrix, normalize: Normalize) -> Result<SymMatrix> {
    let c = match normalize {
        Normalize::None => return Ok(sigma),
        Normalize::Opnorm => *sym_eigen(&sigma)?.values.last().expect("non-empty"),
        Normalize::Trace => sigma.trace(),
    };
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("cannot normalize a matrix with non-positive scale".into()));
    }
    Ok(sigma.scaled(1.0 / c))
}

/// Symmetric matrix of independent ±1 signs on and above the diagonal.
pub fn rademacher_symmetric<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SymMatrix {
    SymMatrix::from_upper_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// A draw from the hard prior `Σ = (I + ηS)/2`.
#[derive(Clone, Debug)]
pub struct HardInstance {
    pub sigma: SymMatrix,
    pub s: SymMatrix,
    pub eta: f64,
    /// Rademacher matrices drawn until one was accepted.
    pub draws: usize,
}

/// `η = c₅ · max(√(log d/(n d)), (log d/(m n d))^{1/4})`, clipped into `(0, 1/(2 c₁ √d))`.
pub fn hard_eta(d: usize, m: usize, n: usize, c1: f64, c5: f64) -> f64 {
    let (d, m, n) = (d as f64, m as f64, n as f64);
    let ld = d.ln();
    let raw = c5 * (ld / (n * d)).sqrt().max((ld / (m * n * d)).powf(0.25));
    let upper = 1.0 / (2.0 * c1 * d.sqrt());
    // Largest double strictly below the open upper end.
    raw.min(upper * (1.0 - f64::EPSILON))
}

/// Rejection-samples `S` with `‖S‖_op ≤ c₁√d` and returns `(I + ηS)/2`.
pub fn hard_instance<R: Rng + ?Sized>(d: usize, m: usize, n: usize, c1: f64, c5: f64, rng: &mut R) -> Result<HardInstance> {
    if d < 2 || m < 1 || n < 1 {
        return Err(Error::InvalidArgument("hard instance needs d >= 2 and m, n >= 1".into()));
    }
    if !(c1 > 0.0) || !(c5 > 0.0) {
        return Err(Error::InvalidArgument("c1 and c5 must be positive".into()));
    }
    let bound = c1 * (d as f64).sqrt();
    for draws in 1..=REJECTION_BUDGET {
        let s = rademacher_symmetric(d, rng);
        if s.op_norm()? <= bound {
            let eta = hard_eta(d, m, n, c1, c5);
            let sigma = SymMatrix::identity(d).add(&s.scaled(eta))?.scaled(0.5);
            return Ok(HardInstance { sigma, s, eta, draws });
        }
    }
    Err(Error::RejectionBudgetExceeded { draws: REJECTION_BUDGET })
}

/// Uniform permutation by Fisher–Yates.
pub fn uniform_permutation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Permutation {
    let mut map: Vec<usize> = (0..d).collect();
    map.shuffle(rng);
    Permutation::new(map).expect("shuffle is a bijection")
}

/// Ground-truth covariance for a spec (stream 0 of its seed).
pub fn ground_truth(spec: &InstanceSpec) -> Result<SymMatrix> {
    spec.validate()?;
    let mut rng = seeded_stream(spec.seed, stream::SIGMA);
    let sigma = match &spec.kind {
        InstanceKind::Robinson => apply_normalization(robinson(spec.d, spec.gamma)?, spec.normalize)?,
        InstanceKind::Wishart => wishart(spec.d, &mut rng, spec.normalize)?,
        InstanceKind::Hard => {
            let (Some(m), Some(n)) = (spec.m.finite(), spec.n.finite()) else {
                return Err(Error::InvalidArgument("hard instances need finite m and n to set eta".into()));
            };
            hard_instance(spec.d, m, n, spec.c1, spec.c5, &mut rng)?.sigma
        }
        InstanceKind::CustomFile(path) => {
            let sigma = crate::io::read_matrix(path)?;
            if sigma.dim() != spec.d {
                return Err(Error::FileFormat(format!("{} holds a {}x{} matrix, spec says d = {}", path.display(), sigma.dim(), sigma.dim(), spec.d)));
            }
            apply_normalization(sigma, spec.normalize)?
        }
    };
    if sigma.min_eigenvalue()? < -1e-10 * sigma.frobenius_norm().max(1.0) {
        return Err(Error::InvalidArgument("ground-truth covariance is not positive semidefinite".into()));
    }
    Ok(sigma)
}

/// Builds a full instance. Every random component uses its own stream of
/// `spec.seed`, so e.g. `Σ` and `π*` do not change when only `n` does.
pub fn make_instance(spec: &InstanceSpec) -> Result<AlignmentInstance> {
    let sigma = ground_truth(spec)?;
    let d = spec.d;
    let pi_star = uniform_permutation(d, &mut seeded_stream(spec.seed, stream::PI_STAR));
    let sigma_y_true = sigma.perm_apply(&pi_star)?;

    let (x_data, sigma_hat_x) = match spec.m {
        SampleSize::Exact => (None, sigma.clone()),
        SampleSize::Finite(m) => {
            let x = sample_gaussian(&sigma, m, &mut seeded_stream(spec.seed, stream::X))?;
            let cov = if spec.center { sample_covariance_centered(&x) } else { sample_covariance(&x) };
            (Some(x), cov)
        }
    };
    let (y_data, sigma_hat_y) = match spec.n {
        SampleSize::Exact => (None, sigma_y_true),
        SampleSize::Finite(n) => {
            let y = sample_gaussian(&sigma_y_true, n, &mut seeded_stream(spec.seed, stream::Y))?;
            let cov = if spec.center { sample_covariance_centered(&y) } else { sample_covariance(&y) };
            (Some(y), cov)
        }
    };
    Ok(AlignmentInstance { sigma, pi_star, m: spec.m, n: spec.n, x_data, y_data, sigma_hat_x, sigma_hat_y, seed: spec.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn robinson_examples() {
        let r = robinson(3, 1.0).unwrap();
        let expected = [[1.0, 0.5, 1.0 / 3.0], [0.5, 1.0, 0.5], [1.0 / 3.0, 0.5, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.get(i, j), expected[i][j]);
            }
        }
        let r = robinson(50, 0.1).unwrap();
        assert!((0..50).all(|i| r.get(i, i) == 1.0));
        assert!(r.get(0, 49) > 0.0 && r.get(0, 49) < r.get(0, 1));
        assert!(robinson(3, 0.0).is_err());
    }

    #[test]
    fn wishart_mean_and_normalizations() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let reps = 10_000;
        let mut mean = DMatrix::<f64>::zeros(d, d);
        for _ in 0..reps {
            mean += wishart(d, &mut rng, Normalize::None).unwrap().as_matrix() / (d * reps) as f64;
        }
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((mean[(i, j)] - target).abs() < 0.05, "{i},{j}: {}", mean[(i, j)]);
            }
        }
        let one = wishart(1, &mut rng, Normalize::None).unwrap();
        assert!(one.get(0, 0) >= 0.0);
        let op = wishart(6, &mut rng, Normalize::Opnorm).unwrap();
        assert!((op.op_norm().unwrap() - 1.0).abs() < 1e-10);
        let tr = wishart(6, &mut rng, Normalize::Trace).unwrap();
        assert!((tr.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_instance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &d in &[2usize, 8, 16, 40] {
            let h = hard_instance(d, 100, 100, 3.0, 0.5, &mut rng).unwrap();
            assert!(h.sigma.op_norm().unwrap() <= 1.0 + 1e-10);
            let s = h.s.as_matrix();
            assert!(s.iter().all(|&x| x == 1.0 || x == -1.0));
            assert_eq!(s, &s.transpose());
            assert_eq!(h.s.frobenius_norm().powi(2), (d * d) as f64);
            assert!(h.eta > 0.0 && h.eta < 1.0 / (6.0 * (d as f64).sqrt()));
        }
        assert!(matches!(
            hard_instance(16, 10, 10, 0.1, 0.5, &mut rng),
            Err(Error::RejectionBudgetExceeded { .. })
        ));
    }

    #[test]
    fn hard_eta_follows_formula_when_unclipped() {
        let (d, m, n) = (16usize, 1_000_000usize, 1_000_000usize);
        let ld = (d as f64).ln();
        let expected = 0.5 * (ld / (n as f64 * d as f64)).sqrt().max((ld / (m as f64 * n as f64 * d as f64)).powf(0.25));
        assert_eq!(hard_eta(d, m, n, 3.0, 0.5), expected);
        // Tiny samples push η to the clip.
        let clipped = hard_eta(16, 1, 1, 3.0, 0.5);
        assert!(clipped < 1.0 / (2.0 * 3.0 * 4.0));
        assert!(clipped > 0.99 / (2.0 * 3.0 * 4.0));
    }

    #[test]
    fn exact_mode_and_determinism() {
        let spec = InstanceSpec::new(InstanceKind::Wishart, 6, SampleSize::Exact, SampleSize::Exact, 42);
        let inst = make_instance(&spec).unwrap();
        assert_eq!(inst.sigma_hat_x, inst.sigma);
        assert_eq!(inst.sigma_hat_y, inst.sigma.perm_apply(&inst.pi_star).unwrap());
        let sampled = InstanceSpec { m: SampleSize::Finite(30), n: SampleSize::Finite(40), ..spec.clone() };
        let a = make_instance(&sampled).unwrap();
        let b = make_instance(&sampled).unwrap();
        assert_eq!(a.sigma_hat_x, b.sigma_hat_x);
        assert_eq!(a.sigma_hat_y, b.sigma_hat_y);
        assert_eq!(a.pi_star, b.pi_star);
        // Σ and π* do not depend on the sample sizes.
        assert_eq!(a.sigma, inst.sigma);
        assert_eq!(a.pi_star, inst.pi_star);
    }

    #[test]
    fn sampled_covariance_concentrates() {
        let mut spec = InstanceSpec::new(InstanceKind::Wishart, 5, SampleSize::Finite(100_000), SampleSize::Exact, 7);
        spec.normalize = Normalize::Opnorm;
        let inst = make_instance(&spec).unwrap();
        let err = inst.sigma_hat_x.sub(&inst.sigma).unwrap().frobenius_norm();
        assert!(err <= 0.1 * inst.sigma.frobenius_norm());
    }

    #[test]
    fn uniform_permutation_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 100_000usize;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            *counts.entry(uniform_permutation(4, &mut rng).as_slice().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (perm, &c) in &counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 5.0 * sd, "{perm:?}: {c}");
        }
    }

    #[test]
    fn hard_kind_requires_finite_samples() {
        let spec = InstanceSpec::new(InstanceKind::Hard, 8, SampleSize::Finite(50), SampleSize::Exact, 1);
        assert!(make_instance(&spec).is_err());
        let spec = InstanceSpec { n: SampleSize::Finite(50), ..spec };
        let inst = make_instance(&spec).unwrap();
        assert!(inst.sigma.op_norm().unwrap() <= 1.0);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind":"robinson","d":4,"gamma":0.5,"m":10,"n":"exact","seed":3}"#;
        let spec: InstanceSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.kind, InstanceKind::Robinson);
        assert_eq!(spec.n, SampleSize::Exact);
        assert_eq!(spec.c1, 3.0);
        let back: InstanceSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
