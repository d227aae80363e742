//! Entropic Gromov–Wasserstein alignment over the Birkhoff polytope.
//!
//! The relaxed problem is `max_{P ∈ BP(d)} f(P) = ⟨P Σ̂_X Pᵀ, Σ̂_Y⟩` with
//! `BP(d)` the doubly stochastic matrices (unit row and column sums). Each
//! outer step linearises `f` at the current coupling and takes the entropic
//! best response
//!
//! ```text
//! P ← Proj_BP^KL( exp(∇f(P) / ε) ),    ∇f(P) = 2 Σ̂_Y P Σ̂_X,
//! ```
//!
//! where the KL projection is computed by log-domain Sinkhorn iterations on
//! dual potentials. The final coupling is rounded to the permutation that
//! carries the most mass.
//!
//! Small `ε` makes `∇f/ε` span many orders of magnitude, so the projection
//! warm-starts from the previous potentials and, when cold, walks an
//! ε-scaling ladder (`s·K` for geometrically increasing `s ≤ 1`). A last
//! primal rescaling of the materialised coupling removes the roundoff left
//! by potentials of magnitude `|K|`.

use nalgebra::DMatrix;

use crate::assignment::lap_max;
use crate::error::{check_dims, Error, Result};
use crate::linalg::{Permutation, SymMatrix};
use crate::model::qap_objective;
use crate::qmle::{two_swap_climb, Sense};

/// Kernel span handled without ε-scaling.
const DIRECT_RANGE: f64 = 32.0;
const SCALING_FACTOR: f64 = 4.0;
const INTERMEDIATE_TOL: f64 = 1e-2;
/// Fraction of the sweep budget a warm start may use before falling back to a cold ladder.
const WARM_BUDGET_FRACTION: usize = 4;
/// Plain sweeps on the final stage between attempts at dual Newton steps.
const NEWTON_AFTER: usize = 100;
const NEWTON_STEPS: usize = 50;

/// A doubly stochastic matrix (row and column sums 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    m: DMatrix<f64>,
}

impl Coupling {
    /// Wraps `m` after checking nonnegativity and marginals within `tol`.
    pub fn new(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument("coupling entries must be finite and nonnegative".into()));
        }
        let c = Self { m };
        let err = c.marginal_error();
        if err > tol {
            return Err(Error::InvalidArgument(format!("coupling marginal error {err:.3e} exceeds {tol:.3e}")));
        }
        Ok(c)
    }

    pub fn uniform(d: usize) -> Self {
        Self { m: DMatrix::from_element(d, d, 1.0 / d as f64) }
    }

    pub fn from_permutation(pi: &Permutation) -> Self {
        Self { m: pi.matrix() }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_error(&self) -> f64 {
        let rows = self.m.row_iter().map(|r| (r.sum() - 1.0).abs());
        let cols = self.m.column_iter().map(|c| (c.sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, |a, e| if e.is_nan() || e > a { e } else { a })
    }

    /// `⟨P A Pᵀ, B⟩`.
    pub fn gw_objective(&self, a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
        check_dims(self.dim(), a.dim())?;
        check_dims(self.dim(), b.dim())?;
        let pap = &self.m * a.as_matrix() * self.m.transpose();
        Ok(pap.iter().zip(b.as_matrix().iter()).map(|(x, y)| x * y).sum())
    }
}

/// Dual potentials of a Sinkhorn solve: the coupling is `exp(K_ij + f_i + g_j)`.
#[derive(Clone, Debug, Default)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl Potentials {
    fn zeros(d: usize) -> Self {
        Self { f: vec![0.0; d], g: vec![0.0; d] }
    }

    fn scale(&mut self, s: f64) {
        self.f.iter_mut().chain(self.g.iter_mut()).for_each(|x| *x *= s);
    }
}

/// Outcome of [`sinkhorn_project_warm`].
#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub coupling: Coupling,
    pub potentials: Potentials,
    pub sweeps: usize,
}

/// KL projection of `exp(log_kernel)` onto the Birkhoff polytope.
pub fn sinkhorn_project(log_kernel: &DMatrix<f64>, tol_marginal: f64, max_sinkhorn: usize) -> Result<Coupling> {
    Ok(sinkhorn_project_warm(log_kernel, tol_marginal, max_sinkhorn, None)?.coupling)
}

/// [`sinkhorn_project`] with optional warm-start potentials.
pub fn sinkhorn_project_warm(
    log_kernel: &DMatrix<f64>,
    tol_marginal: f64,
    max_sinkhorn: usize,
    warm: Option<&Potentials>,
) -> Result<SinkhornOutput> {
    let d = log_kernel.nrows();
    if log_kernel.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: log_kernel.ncols() });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("empty kernel".into()));
    }
    if let Some(x) = log_kernel.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("log-kernel entry {x}")));
    }
    if !(tol_marginal > 0.0) {
        return Err(Error::InvalidArgument("tol_marginal must be positive".into()));
    }
    let kernel = Kernel::new(log_kernel);
    let mut sweeps = 0usize;

    if let Some(w) = warm.filter(|w| w.f.len() == d && w.g.len() == d) {
        let mut pot = w.clone();
        let budget = (max_sinkhorn / WARM_BUDGET_FRACTION).max(1);
        let (used, ok, _) = kernel.solve(1.0, &mut pot, tol_marginal, budget);
        sweeps += used;
        if ok {
            let limit = (sweeps + budget).min(max_sinkhorn);
            if let Some(out) = kernel.finish(pot, tol_marginal, limit, &mut sweeps)? {
                return Ok(out);
            }
        }
    }

    let mut pot = Potentials::zeros(d);
    let range = kernel.range();
    let mut scale = if range > DIRECT_RANGE { DIRECT_RANGE / range } else { 1.0 };
    loop {
        let last = scale >= 1.0;
        let tol = if last { tol_marginal } else { INTERMEDIATE_TOL.max(tol_marginal) };
        let budget = max_sinkhorn.saturating_sub(sweeps);
        let (used, ok, error) = kernel.solve(scale, &mut pot, tol, budget);
        sweeps += used;
        if !ok {
            return Err(Error::SinkhornStall { sweeps, error });
        }
        if last {
            break;
        }
        let next = (scale * SCALING_FACTOR).min(1.0);
        pot.scale(next / scale);
        scale = next;
    }
    match kernel.finish(pot, tol_marginal, max_sinkhorn, &mut sweeps)? {
        Some(out) => Ok(out),
        None => Err(Error::SinkhornStall { sweeps, error: f64::NAN }),
    }
}

/// Row-major and column-major copies of the log-kernel.
struct Kernel {
    d: usize,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl Kernel {
    fn new(k: &DMatrix<f64>) -> Self {
        let d = k.nrows();
        let cols = k.as_slice().to_vec();
        let rows = k.transpose().as_slice().to_vec();
        Self { d, rows, cols }
    }

    fn range(&self) -> f64 {
        let (lo, hi) = self.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    }

    /// `−log Σ_j exp(s·k_j + other_j)`.
    #[inline]
    fn neg_lse(line: &[f64], other: &[f64], s: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (k, o) in line.iter().zip(other) {
            max = max.max(s * k + o);
        }
        let mut sum = 0.0;
        for (k, o) in line.iter().zip(other) {
            sum += (s * k + o - max).exp();
        }
        -(max + sum.ln())
    }

    fn update_g(&self, s: f64, pot: &mut Potentials) {
        let d = self.d;
        for j in 0..d {
            pot.g[j] = Self::neg_lse(&self.cols[j * d..(j + 1) * d], &pot.f, s);
        }
    }

    /// Alternating column/row updates until the row error of a column-exact
    /// state is at most `tol`, switching to dual Newton steps on the final
    /// stage when plain sweeps stall. Returns `(sweeps, converged, error)`;
    /// on success the potentials hold that column-exact state.
    fn solve(&self, s: f64, pot: &mut Potentials, tol: f64, budget: usize) -> (usize, bool, f64) {
        let d = self.d;
        let mut next_f = vec![0.0; d];
        let mut sweeps = 0;
        let mut err = f64::INFINITY;
        while sweeps < budget {
            self.update_g(s, pot);
            err = 0.0f64;
            for i in 0..d {
                let fi = Self::neg_lse(&self.rows[i * d..(i + 1) * d], &pot.g, s);
                err = err.max(((pot.f[i] - fi).exp() - 1.0).abs());
                next_f[i] = fi;
            }
            sweeps += 1;
            if err <= tol {
                return (sweeps, true, err);
            }
            if !err.is_finite() {
                return (sweeps, false, err);
            }
            pot.f.copy_from_slice(&next_f);
            if s >= 1.0 && sweeps % NEWTON_AFTER == 0 {
                let mut trial = pot.clone();
                let (steps, ok) = self.newton(&mut trial, 0.25 * tol, NEWTON_STEPS);
                sweeps += steps;
                if ok {
                    *pot = trial;
                }
            }
        }
        (sweeps, false, err)
    }

    /// Damped Newton ascent on the dual `Σf + Σg − Σ exp(K + f + g)` with
    /// `g_{d−1}` pinned. Stops once both marginals are within `tol`.
    fn newton(&self, pot: &mut Potentials, tol: f64, max_steps: usize) -> (usize, bool) {
        let d = self.d;
        let n = 2 * d - 1;
        let coupling = |pot: &Potentials| {
            let mut p = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    p[i * d + j] = (self.rows[i * d + j] + pot.f[i] + pot.g[j]).exp();
                }
            }
            p
        };
        let dual = |pot: &Potentials, p: &[f64]| pot.f.iter().sum::<f64>() + pot.g.iter().sum::<f64>() - p.iter().sum::<f64>();
        let mut p = coupling(pot);
        for step in 0..max_steps {
            let r: Vec<f64> = (0..d).map(|i| p[i * d..(i + 1) * d].iter().sum()).collect();
            let c: Vec<f64> = (0..d).map(|j| (0..d).map(|i| p[i * d + j]).sum()).collect();
            let err = r.iter().chain(&c).fold(0.0f64, |a, x| a.max((x - 1.0).abs()));
            if !err.is_finite() {
                return (step, false);
            }
            if err <= tol {
                return (step, true);
            }
            let mut h = DMatrix::zeros(n, n);
            let mut grad = nalgebra::DVector::zeros(n);
            for i in 0..d {
                h[(i, i)] = r[i];
                grad[i] = 1.0 - r[i];
                for j in 0..d - 1 {
                    h[(i, d + j)] = p[i * d + j];
                    h[(d + j, i)] = p[i * d + j];
                }
            }
            for j in 0..d - 1 {
                h[(d + j, d + j)] = c[j];
                grad[d + j] = 1.0 - c[j];
            }
            let ridge = 1e-13 * r.iter().chain(&c).fold(0.0f64, |a, &x| a.max(x));
            for k in 0..n {
                h[(k, k)] += ridge;
            }
            let Some(dir) = h.cholesky().map(|ch| ch.solve(&grad)) else {
                return (step, false);
            };
            let slope = grad.dot(&dir);
            let base = dual(pot, &p);
            let mut t = 1.0;
            let accepted = loop {
                let mut trial = pot.clone();
                for i in 0..d {
                    trial.f[i] += t * dir[i];
                }
                for j in 0..d - 1 {
                    trial.g[j] += t * dir[d + j];
                }
                let tp = coupling(&trial);
                let value = dual(&trial, &tp);
                if value.is_finite() && value >= base + 1e-4 * t * slope {
                    break Some((trial, tp));
                }
                t *= 0.5;
                if t < 1e-10 {
                    break None;
                }
            };
            let Some((next, np)) = accepted else {
                return (step + 1, false);
            };
            *pot = next;
            p = np;
        }
        (max_steps, false)
    }

    /// Materialises the coupling and rescales it in the primal until both
    /// marginals are within `tol`; the scalings are folded into the potentials.
    fn finish(&self, mut pot: Potentials, tol: f64, max_sinkhorn: usize, sweeps: &mut usize) -> Result<Option<SinkhornOutput>> {
        let d = self.d;
        let mut p = DMatrix::from_fn(d, d, |i, j| (self.rows[i * d + j] + pot.f[i] + pot.g[j]).exp());
        loop {
            for (j, mut col) in p.column_iter_mut().enumerate() {
                let c = col.sum();
                if !(c > 0.0 && c.is_finite()) {
                    return Ok(None);
                }
                col /= c;
                pot.g[j] -= c.ln();
            }
            let coupling = Coupling { m: p };
            if coupling.marginal_error() <= tol {
                return Ok(Some(SinkhornOutput { coupling, potentials: pot, sweeps: *sweeps }));
            }
            p = coupling.m;
            if *sweeps >= max_sinkhorn {
                return Ok(None);
            }
            *sweeps += 1;
            for (i, mut row) in p.row_iter_mut().enumerate() {
                let r = row.sum();
                if !(r > 0.0 && r.is_finite()) {
                    return Ok(None);
                }
                row /= r;
                pot.f[i] -= r.ln();
            }
        }
    }
}

/// Starting coupling for the outer iteration.
#[derive(Clone, Debug, Default)]
pub enum GwInit {
    #[default]
    Uniform,
    Identity,
    Given(Coupling),
}

#[derive(Clone, Debug)]
pub struct GwOptions {
    /// Entropic penalty; `None` means `1/d²`.
    pub epsilon: Option<f64>,
    pub max_outer: usize,
    /// Stop when `‖P_{t+1} − P_t‖_F` falls below this.
    pub tol_outer: f64,
    pub max_sinkhorn: usize,
    pub tol_marginal: f64,
    pub init: GwInit,
    /// Geometric ε-annealing from a kernel span of order one down to the target.
    pub anneal: bool,
    pub anneal_factor: f64,
    /// Outer steps allowed at each intermediate ε before it is lowered.
    pub anneal_steps: usize,
    /// Best-improvement 2-swap sweeps applied after rounding by [`gw_estimate`].
    pub refine_sweeps: usize,
}

impl Default for GwOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_outer: 1000,
            tol_outer: 1e-7,
            max_sinkhorn: 10_000,
            tol_marginal: 1e-9,
            init: GwInit::Uniform,
            anneal: false,
            anneal_factor: 0.7,
            anneal_steps: 20,
            refine_sweeps: 1,
        }
    }
}

impl GwOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon: Some(epsilon), ..Self::default() }
    }

    pub fn epsilon_for(&self, d: usize) -> f64 {
        self.epsilon.unwrap_or(1.0 / (d * d) as f64)
    }

    fn validate(&self, d: usize) -> Result<f64> {
        let eps = self.epsilon_for(d);
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        if !(self.tol_outer > 0.0) || !(self.tol_marginal > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.anneal && !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return Err(Error::InvalidArgument("anneal_factor must lie in (0, 1)".into()));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug)]
pub struct GwReport {
    pub coupling: Coupling,
    pub permutation: Permutation,
    /// `⟨P Σ̂_X Pᵀ, Σ̂_Y⟩` at the final coupling.
    pub objective_relaxed: f64,
    /// `⟨Σ̂_X^π, Σ̂_Y⟩` at the reported permutation.
    pub objective_rounded: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub epsilon: f64,
    /// Relaxed objective after every outer step.
    pub objective_trace: Vec<f64>,
    /// Largest marginal deviation over every coupling produced during the run.
    pub max_marginal_error: f64,
    pub sinkhorn_sweeps: usize,
    /// Whether the 2-swap refinement changed the rounded permutation.
    pub refined: bool,
}

/// Runs the entropic fixed-point iteration and rounds the final coupling.
pub fn entropic_gw(sigma_x: &SymMatrix, sigma_y: &SymMatrix, opts: &GwOptions) -> Result<GwReport> {
    check_dims(sigma_x.dim(), sigma_y.dim())?;
    let d = sigma_x.dim();
    let eps_target = opts.validate(d)?;
    let a = sigma_x.as_matrix();
    let b = sigma_y.as_matrix();

    let mut p = match &opts.init {
        GwInit::Uniform => Coupling::uniform(d),
        GwInit::Identity => Coupling::from_permutation(&Permutation::identity(d)),
        GwInit::Given(c) => {
            check_dims(d, c.dim())?;
            c.clone()
        }
    };

    let gradient = |p: &Coupling| -> DMatrix<f64> { (b * p.as_matrix() * a) * 2.0 };
    let mut eps = if opts.anneal {
        let g0 = gradient(&p);
        g0.amax().max(eps_target)
    } else {
        eps_target
    };

    let mut potentials: Option<Potentials> = None;
    let mut trace = Vec::new();
    let mut max_marginal_error = 0.0f64;
    let mut total_sweeps = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut level_steps = 0usize;
    let level_tol = opts.tol_outer.sqrt();

    while iterations < opts.max_outer {
        iterations += 1;
        let g = gradient(&p);
        let log_kernel = g / eps;
        let out = sinkhorn_project_warm(&log_kernel, opts.tol_marginal, opts.max_sinkhorn, potentials.as_ref())?;
        total_sweeps += out.sweeps;
        max_marginal_error = max_marginal_error.max(out.coupling.marginal_error());
        let change = crate::linalg::fro(&(out.coupling.as_matrix() - p.as_matrix()));
        p = out.coupling;
        potentials = Some(out.potentials);
        let obj = p.gw_objective(sigma_x, sigma_y)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite("relaxed GW objective diverged".into()));
        }
        trace.push(obj);

        if eps > eps_target {
            level_steps += 1;
            if change >= level_tol && level_steps < opts.anneal_steps {
                continue;
            }
            level_steps = 0;
            let next = (eps * opts.anneal_factor).max(eps_target);
            if let Some(pot) = potentials.as_mut() {
                pot.scale(eps / next);
            }
            eps = next;
            continue;
        }
        if change < opts.tol_outer {
            converged = true;
            break;
        }
    }

    let permutation = round_coupling(&p)?;
    let objective_rounded = qap_objective(sigma_x, sigma_y, &permutation)?;
    Ok(GwReport {
        objective_relaxed: *trace.last().expect("at least one outer step"),
        coupling: p,
        permutation,
        objective_rounded,
        outer_iterations: iterations,
        converged,
        epsilon: eps_target,
        objective_trace: trace,
        max_marginal_error,
        sinkhorn_sweeps: total_sweeps,
        refined: false,
    })
}

/// The permutation carrying the most coupling mass.
pub fn round_coupling(p: &Coupling) -> Result<Permutation> {
    Ok(lap_max(p.as_matrix())?.permutation)
}

/// [`entropic_gw`] followed by `refine_sweeps` best-improvement 2-swap
/// steps on the GW objective; keeps whichever permutation scores higher.
pub fn gw_estimate(sigma_x: &SymMatrix, sigma_y: &SymMatrix, opts: &GwOptions) -> Result<GwReport> {
    let mut report = entropic_gw(sigma_x, sigma_y, opts)?;
    if opts.refine_sweeps > 0 {
        let climb = two_swap_climb(sigma_x, sigma_y, Sense::Max, report.permutation.clone(), opts.refine_sweeps)?;
        let refined_obj = qap_objective(sigma_x, sigma_y, &climb.permutation)?;
        if refined_obj > report.objective_rounded {
            report.permutation = climb.permutation;
            report.objective_rounded = refined_obj;
            report.refined = true;
        }
    }
    Ok(report)
}
