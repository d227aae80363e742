//! Experiment orchestration: single trials, parameter sweeps with resumable
//! CSV output, and the sample-size threshold search used for scaling laws.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gw::{gw_estimate, GwOptions};
use crate::instances::{make_instance, InstanceKind, InstanceSpec, Normalize};
use crate::linalg::{Permutation, SymMatrix};
use crate::model::{frob_loss, hamming_loss, nf_loss, trace_loss, AlignmentInstance, SampleSize};
use crate::qmle::{exhaustive_search, qmle_estimate, SearchMode, SearchOptions, Sense};
use crate::spectral::{spectral_estimate_with, SpectralVariant};

/// Exact column order of result CSV files.
pub const CSV_HEADER: [&str; 15] = [
    "estimator", "d", "m", "n", "seed", "epsilon", "frob_loss_sq", "nf_loss_sq", "trace_loss", "hamming", "objective",
    "iterations", "converged", "runtime_ms", "status",
];

/// Largest sample size [`threshold_search`] will probe.
pub const THRESHOLD_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Gw,
    QmleLocal,
    QmleExhaustive,
    GwExhaustive,
    Spectral,
}

impl Estimator {
    pub const ALL: [Estimator; 5] =
        [Estimator::Gw, Estimator::QmleLocal, Estimator::QmleExhaustive, Estimator::GwExhaustive, Estimator::Spectral];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Gw => "gw",
            Estimator::QmleLocal => "qmle-local",
            Estimator::QmleExhaustive => "qmle-exhaustive",
            Estimator::GwExhaustive => "gw-exhaustive",
            Estimator::Spectral => "spectral",
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator {s:?}")))
    }
}

/// Estimator plus its tuning knobs, as read from sweep configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub name: Estimator,
    /// GW entropic penalty; default `1/d²`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub anneal: bool,
    #[serde(default = "default_refine")]
    pub refine_sweeps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default)]
    pub ridge: f64,
    /// Spectral baseline seriates only `Σ̂_Y`.
    #[serde(default)]
    pub one_sided: bool,
}

fn default_refine() -> usize {
    1
}
fn default_restarts() -> usize {
    16
}
fn default_max_sweeps() -> usize {
    200
}

impl EstimatorConfig {
    pub fn new(name: Estimator) -> Self {
        Self {
            name,
            epsilon: None,
            anneal: false,
            refine_sweeps: default_refine(),
            restarts: default_restarts(),
            max_sweeps: default_max_sweeps(),
            ridge: 0.0,
            one_sided: false,
        }
    }

    pub fn gw(epsilon: Option<f64>) -> Self {
        Self { epsilon, ..Self::new(Estimator::Gw) }
    }

    pub fn gw_options(&self) -> GwOptions {
        GwOptions { epsilon: self.epsilon, anneal: self.anneal, refine_sweeps: self.refine_sweeps, ..GwOptions::default() }
    }

    pub fn search_options(&self, seed: u64) -> SearchOptions {
        let mode = if self.name == Estimator::QmleExhaustive { SearchMode::Exhaustive } else { SearchMode::Local };
        SearchOptions { mode, restarts: self.restarts, max_sweeps: self.max_sweeps, ridge: self.ridge, seed }
    }
}

/// One estimator run on one instance, with every loss against the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub estimator: String,
    pub d: usize,
    pub m: SampleSize,
    pub n: SampleSize,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub frob_loss_sq: f64,
    pub nf_loss_sq: f64,
    pub trace_loss: f64,
    pub hamming: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub runtime_ms: f64,
    pub thread_count: usize,
    /// `"ok"` or `"failed: <kind>: <message>"`.
    pub status: String,
    pub permutation: Option<Permutation>,
    /// Largest Birkhoff marginal deviation seen by GW runs (NaN otherwise).
    pub marginal_error: f64,
}

impl TrialRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// `frob_loss_sq / ‖Σ‖_F²`.
    pub fn relative_loss(&self, sigma_fro_sq: f64) -> f64 {
        self.frob_loss_sq / sigma_fro_sq
    }

    /// Fields in [`CSV_HEADER`] order.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.estimator.clone(),
            self.d.to_string(),
            self.m.to_string(),
            self.n.to_string(),
            self.seed.to_string(),
            self.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            self.frob_loss_sq.to_string(),
            self.nf_loss_sq.to_string(),
            self.trace_loss.to_string(),
            self.hamming.to_string(),
            self.objective.to_string(),
            self.iterations.to_string(),
            self.converged.to_string(),
            self.runtime_ms.to_string(),
            self.status.clone(),
        ]
    }

    pub fn from_csv_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() != CSV_HEADER.len() {
            return Err(Error::FileFormat(format!("expected {} fields, got {}", CSV_HEADER.len(), fields.len())));
        }
        let bad = |what: &str| Error::FileFormat(format!("cannot parse {what} from {fields:?}"));
        let num = |i: usize, what: &str| fields[i].parse::<f64>().map_err(|_| bad(what));
        Ok(Self {
            estimator: fields[0].to_string(),
            d: fields[1].parse().map_err(|_| bad("d"))?,
            m: fields[2].parse()?,
            n: fields[3].parse()?,
            seed: fields[4].parse().map_err(|_| bad("seed"))?,
            epsilon: if fields[5].is_empty() { None } else { Some(num(5, "epsilon")?) },
            frob_loss_sq: num(6, "frob_loss_sq")?,
            nf_loss_sq: num(7, "nf_loss_sq")?,
            trace_loss: num(8, "trace_loss")?,
            hamming: fields[9].parse().map_err(|_| bad("hamming"))?,
            objective: num(10, "objective")?,
            iterations: fields[11].parse().map_err(|_| bad("iterations"))?,
            converged: fields[12].parse().map_err(|_| bad("converged"))?,
            runtime_ms: num(13, "runtime_ms")?,
            thread_count: 0,
            status: fields[14].to_string(),
            permutation: None,
            marginal_error: f64::NAN,
        })
    }

    /// Identity of a record inside a sweep: `(estimator, d, m, n, seed)`.
    pub fn key(&self) -> (String, usize, String, String, u64) {
        (self.estimator.clone(), self.d, self.m.to_string(), self.n.to_string(), self.seed)
    }
}

/// What an estimator returns before it is scored.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub permutation: Permutation,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub epsilon: Option<f64>,
    /// Largest Birkhoff marginal deviation of the GW couplings (NaN otherwise).
    pub marginal_error: f64,
}

/// Runs the configured estimator on a covariance pair. `seed` drives the
/// QMLE restarts.
pub fn estimate(sigma_x: &SymMatrix, sigma_y: &SymMatrix, cfg: &EstimatorConfig, seed: u64) -> Result<Estimate> {
    Ok(match cfg.name {
        Estimator::Gw => {
            let r = gw_estimate(sigma_x, sigma_y, &cfg.gw_options())?;
            Estimate {
                permutation: r.permutation,
                objective: r.objective_rounded,
                iterations: r.outer_iterations,
                converged: r.converged,
                epsilon: Some(r.epsilon),
                marginal_error: r.max_marginal_error,
            }
        }
        Estimator::QmleLocal | Estimator::QmleExhaustive => {
            let r = qmle_estimate(sigma_x, sigma_y, &cfg.search_options(seed))?;
            Estimate {
                permutation: r.permutation,
                objective: r.objective,
                iterations: r.sweeps,
                converged: true,
                epsilon: None,
                marginal_error: f64::NAN,
            }
        }
        Estimator::GwExhaustive => {
            let r = exhaustive_search(sigma_x, sigma_y, Sense::Max)?;
            Estimate {
                permutation: r.permutation,
                objective: r.objective,
                iterations: r.evaluations as usize,
                converged: true,
                epsilon: None,
                marginal_error: f64::NAN,
            }
        }
        Estimator::Spectral => {
            let variant = if cfg.one_sided { SpectralVariant::OneSided } else { SpectralVariant::TwoSided };
            let p = spectral_estimate_with(sigma_x, sigma_y, variant)?;
            let objective = sigma_x.perm_apply(&p)?.sub(sigma_y)?.frobenius_norm().powi(2);
            Estimate { permutation: p, objective, iterations: 1, converged: true, epsilon: None, marginal_error: f64::NAN }
        }
    })
}

/// Losses of `π̂` against the truth `(Σ, π*)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub frob_loss_sq: f64,
    /// `None` when `Σ` is singular.
    pub nf_loss_sq: Option<f64>,
    /// Relative to `Σ^{π*}`, i.e. evaluated at `π*⁻¹ ∘ π̂`; `None` when `Σ` is singular.
    pub trace_loss: Option<f64>,
    pub hamming: usize,
}

pub fn score(sigma: &SymMatrix, pi_star: &Permutation, pi_hat: &Permutation) -> Result<Scores> {
    let frob_loss_sq = frob_loss(sigma, pi_hat, pi_star)?.powi(2);
    let hamming = hamming_loss(pi_hat, pi_star)?;
    let nf_loss_sq = nf_loss(sigma, pi_hat, pi_star).ok().map(|v| v * v);
    let base = sigma.perm_apply(pi_star)?;
    let relative = pi_star.invert().compose(pi_hat)?;
    let trace_loss = trace_loss(&base, &relative).ok();
    Ok(Scores { frob_loss_sq, nf_loss_sq, trace_loss, hamming })
}

fn failure_status(e: &Error) -> String {
    format!("failed: {}", e.to_string().replace([',', '\n'], ";"))
}

/// Runs one estimator and scores it against `(Σ, π*)`. Estimator failures
/// become a failed record rather than an error.
pub fn run_trial(instance: &AlignmentInstance, cfg: &EstimatorConfig) -> TrialRecord {
    let start = Instant::now();
    let outcome = estimate(&instance.sigma_hat_x, &instance.sigma_hat_y, cfg, instance.seed);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut record = TrialRecord {
        estimator: cfg.name.name().to_string(),
        d: instance.dim(),
        m: instance.m,
        n: instance.n,
        seed: instance.seed,
        epsilon: None,
        frob_loss_sq: f64::NAN,
        nf_loss_sq: f64::NAN,
        trace_loss: f64::NAN,
        hamming: 0,
        objective: f64::NAN,
        iterations: 0,
        converged: false,
        runtime_ms,
        thread_count: rayon::current_num_threads(),
        status: "ok".into(),
        permutation: None,
        marginal_error: f64::NAN,
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            record.status = failure_status(&e);
            return record;
        }
    };
    match score(&instance.sigma, &instance.pi_star, &outcome.permutation) {
        Ok(sc) => {
            record.frob_loss_sq = sc.frob_loss_sq;
            record.nf_loss_sq = sc.nf_loss_sq.unwrap_or(f64::NAN);
            record.trace_loss = sc.trace_loss.unwrap_or(f64::NAN);
            record.hamming = sc.hamming;
        }
        Err(e) => record.status = failure_status(&e),
    }
    record.epsilon = outcome.epsilon;
    record.objective = outcome.objective;
    record.iterations = outcome.iterations;
    record.converged = outcome.converged;
    record.marginal_error = outcome.marginal_error;
    record.permutation = Some(outcome.permutation);
    record
}

/// SplitMix64 finaliser.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `replicate` in grid cell `grid_index`:
/// `h(h(h(base) ⊕ grid_index) ⊕ replicate)` with `h` = SplitMix64.
pub fn mix_seed(base_seed: u64, grid_index: u64, replicate: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ grid_index) ^ replicate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    Robinson,
    Wishart,
    Hard,
}

impl KindName {
    fn kind(self) -> InstanceKind {
        match self {
            KindName::Robinson => InstanceKind::Robinson,
            KindName::Wishart => InstanceKind::Wishart,
            KindName::Hard => InstanceKind::Hard,
        }
    }

    fn name(self) -> &'static str {
        match self {
            KindName::Robinson => "robinson",
            KindName::Wishart => "wishart",
            KindName::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub kinds: Vec<KindName>,
    pub d: Vec<usize>,
    pub n: Vec<SampleSize>,
    /// `None` ties `m = n`.
    #[serde(default)]
    pub m: Option<Vec<SampleSize>>,
    #[serde(default = "default_gammas")]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c5")]
    pub c5: f64,
}

fn default_gammas() -> Vec<f64> {
    vec![1.0]
}
fn default_c1() -> f64 {
    3.0
}
fn default_c5() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: GridConfig,
    pub estimators: Vec<EstimatorConfig>,
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// One point of the instance grid; replicates and estimators fan out from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: KindName,
    pub d: usize,
    pub gamma: Option<f64>,
    pub m: SampleSize,
    pub n: SampleSize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.kinds.is_empty() || g.d.is_empty() || g.n.is_empty() || g.gamma.is_empty() {
            return Err(Error::InvalidArgument("sweep grid lists must be non-empty".into()));
        }
        if g.m.as_ref().is_some_and(|m| m.is_empty()) {
            return Err(Error::InvalidArgument("grid.m must be non-empty when given".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("at least one estimator required".into()));
        }
        if self.replicates < 1 {
            return Err(Error::InvalidArgument("replicates must be >= 1".into()));
        }
        Ok(())
    }

    /// Grid cells in nested order kind × d × gamma × (m, n); `gamma` only
    /// varies for Robinson instances.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut cells = Vec::new();
        for &kind in &g.kinds {
            for &d in &g.d {
                let gammas: Vec<Option<f64>> =
                    if kind == KindName::Robinson { g.gamma.iter().map(|&x| Some(x)).collect() } else { vec![None] };
                for gamma in gammas {
                    let pairs: Vec<(SampleSize, SampleSize)> = match &g.m {
                        None => g.n.iter().map(|&n| (n, n)).collect(),
                        Some(ms) => ms.iter().flat_map(|&m| g.n.iter().map(move |&n| (m, n))).collect(),
                    };
                    for (m, n) in pairs {
                        cells.push(Cell { index: cells.len(), kind, d, gamma, m, n });
                    }
                }
            }
        }
        cells
    }

    pub fn instance_spec(&self, cell: &Cell, replicate: usize) -> InstanceSpec {
        let seed = mix_seed(self.base_seed, cell.index as u64, replicate as u64);
        let mut spec = InstanceSpec::new(cell.kind.kind(), cell.d, cell.m, cell.n, seed);
        spec.gamma = cell.gamma.unwrap_or(1.0);
        spec.normalize = self.grid.normalize;
        spec.c1 = self.grid.c1;
        spec.c5 = self.grid.c5;
        spec
    }
}

/// Per-cell, per-estimator summary of `frob_loss_sq` over successful trials.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub cell: usize,
    pub kind: String,
    pub d: usize,
    pub gamma: Option<f64>,
    pub m: SampleSize,
    pub n: SampleSize,
    pub estimator: String,
    pub count: usize,
    pub failed: usize,
    pub mean: f64,
    pub median: f64,
    pub stderr: f64,
}

pub const AGGREGATE_HEADER: &str = "cell,kind,d,gamma,m,n,estimator,count,failed,mean_frob_loss_sq,median_frob_loss_sq,stderr_frob_loss_sq";

impl AggregateRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.kind,
            self.d,
            self.gamma.map(|g| g.to_string()).unwrap_or_default(),
            self.m,
            self.n,
            self.estimator,
            self.count,
            self.failed,
            self.mean,
            self.median,
            self.stderr
        )
    }
}

/// Mean, median and standard error of the mean.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    (mean, median, stderr)
}

/// Groups records by `(cell, estimator)`; the result does not depend on record order.
pub fn aggregate(config: &SweepConfig, records: &[TrialRecord]) -> Vec<AggregateRow> {
    let cells = config.cells();
    let mut seed_to_cell = HashMap::new();
    for cell in &cells {
        for r in 0..config.replicates {
            seed_to_cell.insert(config.instance_spec(cell, r).seed, cell.index);
        }
    }
    let mut groups: BTreeMap<(usize, String), (Vec<f64>, usize)> = BTreeMap::new();
    for rec in records {
        let Some(&cell) = seed_to_cell.get(&rec.seed) else { continue };
        let entry = groups.entry((cell, rec.estimator.clone())).or_default();
        if rec.is_ok() && rec.frob_loss_sq.is_finite() {
            entry.0.push(rec.frob_loss_sq);
        } else {
            entry.1 += 1;
        }
    }
    groups
        .into_iter()
        .map(|((cell, estimator), (mut values, failed))| {
            // Sum in a canonical order so the aggregate is order-independent bitwise.
            values.sort_by(f64::total_cmp);
            let (mean, median, stderr) = summarize(&values);
            let c = &cells[cell];
            AggregateRow {
                cell,
                kind: c.kind.name().into(),
                d: c.d,
                gamma: c.gamma,
                m: c.m,
                n: c.n,
                estimator,
                count: values.len(),
                failed,
                mean,
                median,
                stderr,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<AggregateRow>,
    /// Records found in the output file and not recomputed.
    pub resumed: usize,
}

/// Reads complete rows of an existing results file and rewrites the file
/// without any truncated tail.
fn load_existing(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines: Vec<&str> = text.split('\n').collect();
    // A line without its terminating newline was cut short.
    let complete = text.ends_with('\n');
    let last = lines.pop().unwrap_or("");
    if complete {
        debug_assert!(last.is_empty());
    }
    let header = CSV_HEADER.join(",");
    match lines.first() {
        Some(h) if *h == header => {}
        None => {}
        Some(h) => return Err(Error::FileFormat(format!("{}: unexpected header {h:?}", path.display()))),
    }
    let mut records = Vec::new();
    let mut keep = vec![header];
    for line in lines.iter().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if let Ok(rec) = TrialRecord::from_csv_fields(&fields) {
            keep.push(line.to_string());
            records.push(rec);
        }
    }
    let mut body = keep.join("\n");
    body.push('\n');
    if body != text {
        fs::write(path, body)?;
    }
    Ok(records)
}

/// Progress callback: `(cell, cells, replicate, replicates)`, all 1-based.
pub type Progress<'a> = &'a (dyn Fn(usize, usize, usize, usize) + Sync);

/// Runs every `(cell, replicate, estimator)` triple not already present in
/// the output file, appending one CSV row per finished trial.
pub fn run_sweep(config: &SweepConfig, jobs: Option<usize>, progress: Option<Progress<'_>>) -> Result<SweepOutput> {
    config.validate()?;
    let cells = config.cells();
    let previous = match &config.output {
        Some(p) => load_existing(p)?,
        None => Vec::new(),
    };
    let done: HashSet<_> = previous.iter().map(TrialRecord::key).collect();

    let writer = match &config.output {
        Some(p) => {
            let fresh = !p.exists() || fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{}", CSV_HEADER.join(","))?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };

    let mut tasks = Vec::new();
    for cell in &cells {
        for r in 0..config.replicates {
            tasks.push((cell.clone(), r));
        }
    }

    let run = || -> Result<Vec<TrialRecord>> {
        let per_task: Vec<Result<Vec<TrialRecord>>> = tasks
            .par_iter()
            .map(|(cell, r)| {
                let spec = config.instance_spec(cell, *r);
                let todo: Vec<&EstimatorConfig> = config
                    .estimators
                    .iter()
                    .filter(|e| !done.contains(&(e.name.name().to_string(), cell.d, cell.m.to_string(), cell.n.to_string(), spec.seed)))
                    .collect();
                if todo.is_empty() {
                    return Ok(Vec::new());
                }
                let instance = make_instance(&spec)?;
                let mut out = Vec::with_capacity(todo.len());
                for est in todo {
                    let rec = run_trial(&instance, est);
                    if let Some(w) = &writer {
                        let mut f = w.lock().expect("writer lock");
                        writeln!(f, "{}", rec.csv_fields().join(","))?;
                        f.flush()?;
                    }
                    out.push(rec);
                }
                if let Some(cb) = progress {
                    cb(cell.index + 1, cells.len(), r + 1, config.replicates);
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::new();
        for chunk in per_task {
            all.extend(chunk?);
        }
        Ok(all)
    };

    let fresh_records = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let resumed = previous.len();
    let mut records = previous;
    records.extend(fresh_records);
    let aggregates = aggregate(config, &records);
    Ok(SweepOutput { records, aggregates, resumed })
}

/// Settings shared by every probe of a threshold search.
#[derive(Clone, Debug)]
pub struct ThresholdConfig {
    pub kind: InstanceKind,
    pub gamma: f64,
    pub normalize: Normalize,
    pub base_seed: u64,
    /// First sample size probed.
    pub n_start: usize,
    pub cap: usize,
    pub estimator: EstimatorConfig,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            kind: InstanceKind::Wishart,
            gamma: 1.0,
            normalize: Normalize::None,
            base_seed: 0,
            n_start: 10,
            cap: THRESHOLD_CAP,
            estimator: EstimatorConfig::gw(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThresholdResult {
    pub n_star: usize,
    /// Every probed `n` with its mean relative squared loss.
    pub probes: BTreeMap<usize, f64>,
    /// Largest GW marginal deviation over every probe (NaN for non-GW estimators).
    pub max_marginal_error: f64,
}

/// Mean loss of one probe.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub mean_relative_loss: f64,
    pub max_marginal_error: f64,
}

/// Mean of `frob_loss_sq / ‖Σ‖_F²` over `reps` replicates with `m = n`.
/// Replicate `r` uses seed `mix_seed(base_seed, d, r)` for every `n`, so
/// `Σ`, `π*` and the Gaussian streams are shared across probes.
pub fn mean_relative_loss(d: usize, n: usize, reps: usize, config: &ThresholdConfig) -> Result<Probe> {
    let losses: Vec<Result<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = mix_seed(config.base_seed, d as u64, r as u64);
            let mut spec = InstanceSpec::new(config.kind.clone(), d, SampleSize::Finite(n), SampleSize::Finite(n), seed);
            spec.gamma = config.gamma;
            spec.normalize = config.normalize;
            let instance = make_instance(&spec)?;
            let rec = run_trial(&instance, &config.estimator);
            if !rec.is_ok() {
                return Err(Error::InvalidArgument(format!("trial d={d} n={n} seed={seed} {}", rec.status)));
            }
            Ok((rec.relative_loss(instance.sigma.frobenius_norm().powi(2)), rec.marginal_error))
        })
        .collect();
    let mut total = 0.0;
    let mut worst = f64::NAN;
    for l in losses {
        let (loss, marginal) = l?;
        total += loss;
        worst = worst.max(marginal);
    }
    Ok(Probe { mean_relative_loss: total / reps as f64, max_marginal_error: worst })
}

/// Smallest `n` (with `m = n`) whose mean relative loss is at most `tau`,
/// found by doubling from `n_start` and then bisecting.
pub fn threshold_search(d: usize, tau: f64, reps: usize, config: &ThresholdConfig) -> Result<ThresholdResult> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    if reps < 1 || config.n_start < 1 {
        return Err(Error::InvalidArgument("reps and n_start must be >= 1".into()));
    }
    let mut probes = BTreeMap::new();
    let mut worst = f64::NAN;
    let mut eval = |n: usize, probes: &mut BTreeMap<usize, f64>| -> Result<bool> {
        let v = match probes.get(&n) {
            Some(&v) => v,
            None => {
                let p = mean_relative_loss(d, n, reps, config)?;
                worst = worst.max(p.max_marginal_error);
                probes.insert(n, p.mean_relative_loss);
                p.mean_relative_loss
            }
        };
        Ok(v <= tau)
    };

    let mut hi = config.n_start;
    let mut lo = None;
    while !eval(hi, &mut probes)? {
        lo = Some(hi);
        hi = hi.checked_mul(2).filter(|&n| n <= config.cap).ok_or(Error::BudgetExceeded { cap: config.cap as u64 })?;
    }
    if let Some(mut lo) = lo {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(mid, &mut probes)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok(ThresholdResult { n_star: hi, probes, max_marginal_error: worst })
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_spec(kind: InstanceKind, d: usize, seed: u64) -> InstanceSpec {
        InstanceSpec::new(kind, d, SampleSize::Exact, SampleSize::Exact, seed)
    }

    #[test]
    fn exhaustive_gw_on_exact_robinson_has_zero_loss() {
        let mut spec = exact_spec(InstanceKind::Robinson, 5, 3);
        spec.gamma = 0.5;
        let inst = make_instance(&spec).unwrap();
        let rec = run_trial(&inst, &EstimatorConfig::new(Estimator::GwExhaustive));
        assert!(rec.is_ok());
        assert!(rec.frob_loss_sq < 1e-24);
    }

    #[test]
    fn identity_covariance_is_unidentifiable() {
        let d = 4;
        let inst = AlignmentInstance {
            sigma: SymMatrix::identity(d),
            pi_star: Permutation::identity(d),
            m: SampleSize::Exact,
            n: SampleSize::Exact,
            x_data: None,
            y_data: None,
            sigma_hat_x: SymMatrix::identity(d),
            sigma_hat_y: SymMatrix::identity(d),
            seed: 0,
        };
        for est in Estimator::ALL {
            let rec = run_trial(&inst, &EstimatorConfig::new(est));
            assert!(rec.is_ok(), "{est:?}: {}", rec.status);
            assert_eq!(rec.frob_loss_sq, 0.0);
        }
    }

    #[test]
    fn trials_are_deterministic_except_runtime() {
        let spec = InstanceSpec::new(InstanceKind::Wishart, 7, SampleSize::Finite(40), SampleSize::Finite(40), 9);
        let inst = make_instance(&spec).unwrap();
        for est in Estimator::ALL {
            let mut a = run_trial(&inst, &EstimatorConfig::new(est));
            let mut b = run_trial(&inst, &EstimatorConfig::new(est));
            a.runtime_ms = 0.0;
            b.runtime_ms = 0.0;
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn failures_become_records() {
        let spec = InstanceSpec::new(InstanceKind::Wishart, 12, SampleSize::Finite(4), SampleSize::Finite(40), 1);
        let inst = make_instance(&spec).unwrap();
        let rec = run_trial(&inst, &EstimatorConfig::new(Estimator::QmleLocal));
        assert!(rec.status.starts_with("failed: NotPositiveDefinite"), "{}", rec.status);
        let rec = run_trial(&inst, &EstimatorConfig::new(Estimator::GwExhaustive));
        assert!(rec.status.contains("DimensionTooLarge"));
        assert!(!rec.csv_fields().iter().any(|f| f.contains(',')));
    }

    #[test]
    fn trace_loss_uses_truth_as_reference() {
        let spec = exact_spec(InstanceKind::Wishart, 5, 4);
        let inst = make_instance(&spec).unwrap();
        let rec = run_trial(&inst, &EstimatorConfig::new(Estimator::GwExhaustive));
        assert!(rec.trace_loss.abs() < 1e-9);
        assert_eq!(rec.hamming, 0);
    }

    #[test]
    fn seeds_do_not_collide() {
        let mut seen = HashSet::new();
        for base in 0..3u64 {
            for g in 0..300u64 {
                for r in 0..300u64 {
                    assert!(seen.insert(mix_seed(base, g, r)));
                }
            }
        }
    }

    #[test]
    fn summarize_known_values() {
        let (mean, median, stderr) = summarize(&[1.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert_eq!(median, 2.0);
        assert_eq!(stderr, 1.0);
        assert!(summarize(&[]).0.is_nan());
    }

    fn small_config(output: Option<PathBuf>) -> SweepConfig {
        SweepConfig {
            grid: GridConfig {
                kinds: vec![KindName::Wishart],
                d: vec![5],
                n: vec![SampleSize::Finite(50)],
                m: None,
                gamma: vec![1.0],
                normalize: Normalize::Opnorm,
                c1: 3.0,
                c5: 0.5,
            },
            estimators: vec![EstimatorConfig::gw(None)],
            replicates: 1,
            base_seed: 5,
            output,
        }
    }

    #[test]
    fn one_cell_one_replicate_gives_one_record() {
        let out = run_sweep(&small_config(None), Some(2), None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.aggregates.len(), 1);
        assert_eq!(out.aggregates[0].count, 1);
    }

    #[test]
    fn sweep_resumes_from_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let mut cfg = small_config(Some(path.clone()));
        cfg.grid.d = vec![4, 5];
        cfg.grid.n = vec![SampleSize::Finite(30), SampleSize::Exact];
        cfg.replicates = 3;
        cfg.estimators.push(EstimatorConfig::new(Estimator::Spectral));
        let full = run_sweep(&cfg, Some(3), None).unwrap();
        assert_eq!(full.records.len(), 4 * 3 * 2);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 25);

        // Keep the header, ten rows and half of the eleventh.
        let mut cut = lines[..11].join("\n");
        cut.push('\n');
        cut.push_str(&lines[11][..lines[11].len() / 2]);
        fs::write(&path, cut).unwrap();

        let resumed = run_sweep(&cfg, Some(1), None).unwrap();
        assert_eq!(resumed.resumed, 10);
        assert_eq!(resumed.records.len(), 24);
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 24);
        let keys: HashSet<_> = rows
            .iter()
            .map(|l| TrialRecord::from_csv_fields(&l.split(',').collect::<Vec<_>>()).unwrap().key())
            .collect();
        assert_eq!(keys.len(), 24);

        // Aggregates agree with the uninterrupted run.
        let strip = |rows: Vec<AggregateRow>| rows.into_iter().map(|r| (r.cell, r.estimator, r.count, r.mean)).collect::<Vec<_>>();
        assert_eq!(strip(full.aggregates), strip(resumed.aggregates));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let cfg = SweepConfig { replicates: 4, ..small_config(None) };
        let out = run_sweep(&cfg, Some(4), None).unwrap();
        let mut rev = out.records.clone();
        rev.reverse();
        assert_eq!(aggregate(&cfg, &out.records), aggregate(&cfg, &rev));
        let serial = run_sweep(&cfg, Some(1), None).unwrap();
        assert_eq!(aggregate(&cfg, &serial.records), out.aggregates);
    }

    #[test]
    fn csv_row_round_trip() {
        let spec = InstanceSpec::new(InstanceKind::Wishart, 4, SampleSize::Exact, SampleSize::Finite(20), 2);
        let rec = run_trial(&make_instance(&spec).unwrap(), &EstimatorConfig::gw(Some(0.01)));
        let fields = rec.csv_fields();
        let back = TrialRecord::from_csv_fields(&fields.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
        assert_eq!(back.key(), rec.key());
        assert_eq!(back.frob_loss_sq.to_bits(), rec.frob_loss_sq.to_bits());
        assert_eq!(back.epsilon, Some(0.01));
        assert_eq!(fields[2], "exact");
    }

    #[test]
    fn sweep_config_parses_and_rejects_unknown_fields() {
        let json = r#"{
            "grid": {"kinds": ["robinson"], "d": [6], "n": [100, "exact"], "gamma": [0.5]},
            "estimators": [{"name": "gw", "epsilon": 0.001}, {"name": "spectral"}],
            "replicates": 2, "base_seed": 7
        }"#;
        let cfg: SweepConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.cells().len(), 2);
        assert_eq!(cfg.estimators[1].name, Estimator::Spectral);
        assert!(serde_json::from_str::<SweepConfig>(&json.replace("\"gamma\"", "\"gama\"")).is_err());
    }

    #[test]
    fn threshold_trivial_tau_returns_first_probe() {
        let cfg = ThresholdConfig { n_start: 16, ..ThresholdConfig::default() };
        let r = threshold_search(6, 1.0, 3, &cfg).unwrap();
        assert_eq!(r.n_star, 16);
        assert_eq!(r.probes.len(), 1);
    }

    #[test]
    fn threshold_is_monotone_in_tau() {
        let cfg = ThresholdConfig { n_start: 8, ..ThresholdConfig::default() };
        let strict = threshold_search(8, 0.1, 4, &cfg).unwrap();
        let loose = threshold_search(8, 0.3, 4, &cfg).unwrap();
        assert!(strict.n_star >= loose.n_star, "{} < {}", strict.n_star, loose.n_star);
        assert!(threshold_search(8, 0.0, 4, &cfg).is_err());
    }

    #[test]
    fn threshold_budget_is_enforced() {
        let cfg = ThresholdConfig {
            kind: InstanceKind::Robinson,
            gamma: 0.01,
            n_start: 10,
            cap: 40,
            ..ThresholdConfig::default()
        };
        let err = threshold_search(12, 1e-6, 2, &cfg).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { cap: 40 }));
    }

    #[test]
    fn swapping_samples_gives_comparable_losses() {
        let mut direct = Vec::new();
        let mut swapped = Vec::new();
        for r in 0..40u64 {
            let mut spec = InstanceSpec::new(InstanceKind::Wishart, 8, SampleSize::Finite(60), SampleSize::Finite(60), 100 + r);
            spec.normalize = Normalize::Opnorm;
            let inst = make_instance(&spec).unwrap();
            let cfg = EstimatorConfig::gw(None);
            direct.push(run_trial(&inst, &cfg).frob_loss_sq);
            swapped.push(run_trial(&inst.swapped().unwrap(), &cfg).frob_loss_sq);
        }
        let (a, _, sa) = summarize(&direct);
        let (b, _, sb) = summarize(&swapped);
        assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt() + 1e-12, "{a} vs {b}");
    }
}
