//! The nonlinear operator `μ ↦ L_{δ,μ} μ` for the four system classes and
//! its fixed-point solvers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::densities::{l1_distance, GridDensity};
use crate::error::{Error, Result};
use crate::maps::{CircleMap, CouplingKernel, Displacement, MeanFieldDiffeo};
use crate::scalar::Real;
use crate::transfer_ops::{
    composed_ulam_matrix, convolve_density, diffeo_pushforward_density, expanding_transfer_density,
    linear_fixed_density, reflecting_kernel_matrix, FixedDensityOptions, NoiseKernel, NoiseProfile,
    TransferMatrix, DEFAULT_ULAM_SUBSAMPLES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemClass {
    /// Expanding circle map followed by the mean-field map.
    Expanding,
    /// As `Expanding`, then convolution with a periodized noise kernel.
    AdditiveNoiseCircle,
    /// Tent map rescaled by `1 + δ∫x dμ`, with reflected additive noise.
    ReflectingKernelInterval,
    /// Two populations sharing one mean-field map.
    TwoPopulation,
}

/// How the frozen linear operator is discretized when applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorPath {
    /// Ulam matrix of the composed map; mass-exact and shared with the
    /// outer iteration.
    #[default]
    Ulam,
    /// Preimage sum followed by the interpolated mean-field pushforward.
    Interpolated,
}

/// A fully specified self-consistent system on an `n`-cell grid.
#[derive(Clone)]
pub struct SelfConsistentModel<T> {
    class: SystemClass,
    maps: Vec<CircleMap<T>>,
    couplings: Vec<CouplingKernel<T>>,
    weights: Vec<T>,
    noise: Option<NoiseKernel<T>>,
    line_noise: Option<NoiseProfile<T>>,
    delta: T,
    n: usize,
    path: OperatorPath,
    ulam_subsamples: usize,
}

impl<T: Real> fmt::Debug for SelfConsistentModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SelfConsistentModel")
            .field("class", &self.class)
            .field("maps", &self.maps.iter().map(|m| m.name().to_string()).collect::<Vec<_>>())
            .field("couplings", &self.couplings.iter().map(|h| h.name().to_string()).collect::<Vec<_>>())
            .field("delta", &self.delta)
            .field("n", &self.n)
            .field("path", &self.path)
            .finish()
    }
}

impl<T: Real> SelfConsistentModel<T> {
    pub fn expanding(map: CircleMap<T>, coupling: CouplingKernel<T>, delta: T, n: usize) -> Result<Self> {
        Self {
            class: SystemClass::Expanding,
            maps: vec![map],
            couplings: vec![coupling],
            weights: vec![T::one()],
            noise: None,
            line_noise: None,
            delta,
            n,
            path: OperatorPath::Ulam,
            ulam_subsamples: DEFAULT_ULAM_SUBSAMPLES,
        }
        .validated()
    }

    pub fn additive_noise_circle(
        map: CircleMap<T>,
        coupling: CouplingKernel<T>,
        noise: NoiseProfile<T>,
        delta: T,
        n: usize,
    ) -> Result<Self> {
        Self {
            class: SystemClass::AdditiveNoiseCircle,
            maps: vec![map],
            couplings: vec![coupling],
            weights: vec![T::one()],
            noise: Some(NoiseKernel::periodized(noise, n)?),
            line_noise: None,
            delta,
            n,
            path: OperatorPath::Ulam,
            ulam_subsamples: DEFAULT_ULAM_SUBSAMPLES,
        }
        .validated()
    }

    /// Tent-map system on `[0, 1]` with reflected noise `noise`.
    pub fn reflecting_tent(noise: NoiseProfile<T>, delta: T, n: usize) -> Result<Self> {
        Self {
            class: SystemClass::ReflectingKernelInterval,
            maps: vec![CircleMap::tent()],
            couplings: Vec::new(),
            weights: Vec::new(),
            noise: None,
            line_noise: Some(noise),
            delta,
            n,
            path: OperatorPath::Ulam,
            ulam_subsamples: DEFAULT_ULAM_SUBSAMPLES,
        }
        .validated()
    }

    /// Two populations with maps `maps.0`, `maps.1`; the shared mean field is
    /// `δ (w₁ ∫h₁ f₁ + w₂ ∫h₂ f₂)`.
    #[allow(clippy::too_many_arguments)]
    pub fn two_population(
        maps: (CircleMap<T>, CircleMap<T>),
        couplings: (CouplingKernel<T>, CouplingKernel<T>),
        weights: (T, T),
        delta: T,
        n: usize,
    ) -> Result<Self> {
        Self {
            class: SystemClass::TwoPopulation,
            maps: vec![maps.0, maps.1],
            couplings: vec![couplings.0, couplings.1],
            weights: vec![weights.0, weights.1],
            noise: None,
            line_noise: None,
            delta,
            n,
            path: OperatorPath::Ulam,
            ulam_subsamples: DEFAULT_ULAM_SUBSAMPLES,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.n < 2 {
            return Err(Error::config("grid needs at least two cells"));
        }
        if !(self.delta >= T::zero()) || !self.delta.is_finite() {
            return Err(Error::config(format!("coupling strength must be finite and >= 0, got {}", self.delta)));
        }
        let pops = self.populations();
        let complete = match self.class {
            SystemClass::Expanding => self.maps.len() == 1 && self.couplings.len() == 1,
            SystemClass::AdditiveNoiseCircle => self.maps.len() == 1 && self.couplings.len() == 1 && self.noise.is_some(),
            SystemClass::ReflectingKernelInterval => self.line_noise.is_some(),
            SystemClass::TwoPopulation => self.maps.len() == 2 && self.couplings.len() == 2 && self.weights.len() == 2,
        };
        if !complete {
            return Err(Error::config(format!("incomplete {:?} model", self.class)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("mixing weights must be finite"));
        }
        // Eager regime check at the uniform state.
        let uniform = vec![GridDensity::uniform(self.n); pops];
        self.mean_field(&uniform)?;
        Ok(self)
    }

    pub fn with_delta(&self, delta: T) -> Result<Self> {
        let mut m = self.clone();
        m.delta = delta;
        m.validated()
    }

    pub fn with_path(mut self, path: OperatorPath) -> Self {
        self.path = path;
        self
    }

    pub fn with_ulam_subsamples(mut self, q: usize) -> Self {
        self.ulam_subsamples = q.max(1);
        self
    }

    pub fn class(&self) -> SystemClass {
        self.class
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn path(&self) -> OperatorPath {
        self.path
    }

    pub fn maps(&self) -> &[CircleMap<T>] {
        &self.maps
    }

    pub fn couplings(&self) -> &[CouplingKernel<T>] {
        &self.couplings
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn noise(&self) -> Option<&NoiseKernel<T>> {
        self.noise.as_ref()
    }

    pub fn line_noise(&self) -> Option<&NoiseProfile<T>> {
        self.line_noise.as_ref()
    }

    /// Number of coupled densities: 2 for the two-population class, else 1.
    pub fn populations(&self) -> usize {
        if self.class == SystemClass::TwoPopulation {
            2
        } else {
            1
        }
    }

    fn check_state(&self, state: &[GridDensity<T>]) -> Result<()> {
        if state.len() != self.populations() {
            return Err(Error::config(format!(
                "expected {} densities, got {}",
                self.populations(),
                state.len()
            )));
        }
        if let Some(d) = state.iter().find(|d| d.n() != self.n) {
            return Err(Error::config(format!("density has {} cells, model {}", d.n(), self.n)));
        }
        Ok(())
    }

    /// The state-dependent part of the dynamics: the mean-field map for the
    /// circle classes, the rescaling `1 + δ∫x dμ` for the tent class.
    fn mean_field(&self, state: &[GridDensity<T>]) -> Result<MeanField<T>> {
        match self.class {
            SystemClass::ReflectingKernelInterval => {
                let m = state[0].mean_position();
                let denom = T::one() + self.delta * m;
                if !(denom > T::zero()) {
                    return Err(Error::Regime {
                        message: "tent rescaling 1 + delta * mean must stay positive".into(),
                        value: denom.as_f64(),
                        bound: 0.0,
                    });
                }
                Ok(MeanField::Rescale(denom))
            }
            _ => {
                let mut d = Displacement::zeros(self.n);
                if self.delta != T::zero() {
                    for (k, f) in state.iter().enumerate() {
                        d.accumulate(&self.couplings[k], f.values(), self.weights[k])?;
                    }
                }
                Ok(MeanField::Diffeo(MeanFieldDiffeo::new(self.delta, d)?))
            }
        }
    }

    /// The linear operators `L_{δ,μ}` (one per population) with `μ` frozen.
    pub fn linear_operators(&self, mu: &[GridDensity<T>]) -> Result<Vec<TransferMatrix<T>>> {
        self.check_state(mu)?;
        let field = self.mean_field(mu)?;
        self.assemble(&field)
    }

    /// `L_{0}`: the uncoupled operators.
    pub fn uncoupled_operators(&self) -> Result<Vec<TransferMatrix<T>>> {
        self.with_delta(T::zero())?.linear_operators(&vec![GridDensity::uniform(self.n); self.populations()])
    }

    fn assemble(&self, field: &MeanField<T>) -> Result<Vec<TransferMatrix<T>>> {
        match (self.class, field) {
            (SystemClass::ReflectingKernelInterval, MeanField::Rescale(denom)) => {
                let tent = &self.maps[0];
                let rho = self.line_noise.as_ref().expect("validated");
                let denom = *denom;
                let k = reflecting_kernel_matrix(|y| tent.eval(y) / denom, rho, self.n)?;
                Ok(vec![k.to_transfer_matrix()?])
            }
            (_, MeanField::Diffeo(phi)) => self
                .maps
                .iter()
                .map(|map| {
                    let p = composed_ulam_matrix(map, phi, self.n, self.ulam_subsamples)?;
                    match &self.noise {
                        Some(k) if self.class == SystemClass::AdditiveNoiseCircle => convolve_matrix(k, &p),
                        _ => Ok(p),
                    }
                })
                .collect(),
            _ => unreachable!("mean field matches the class"),
        }
    }

    /// `ℒ_δ(f) = L_{δ,f}(f)`.
    pub fn apply(&self, state: &[GridDensity<T>]) -> Result<Vec<GridDensity<T>>> {
        self.check_state(state)?;
        let field = self.mean_field(state)?;
        match (self.path, &field) {
            (OperatorPath::Interpolated, MeanField::Diffeo(phi)) => state
                .iter()
                .zip(&self.maps)
                .map(|(f, map)| {
                    let g = expanding_transfer_density(map, f)?;
                    let g = diffeo_pushforward_density(phi, &g)?;
                    match &self.noise {
                        Some(k) => convolve_density(k, &g),
                        None => Ok(g),
                    }
                })
                .collect(),
            _ => {
                let ops = self.assemble(&field)?;
                state.iter().zip(&ops).map(|(f, op)| op.apply_density(f)).collect()
            }
        }
    }

    /// Single-population convenience wrapper around [`Self::apply`].
    pub fn apply_single(&self, f: &GridDensity<T>) -> Result<GridDensity<T>> {
        let mut out = self.apply(std::slice::from_ref(f))?;
        Ok(out.remove(0))
    }
}

enum MeanField<T> {
    Diffeo(MeanFieldDiffeo<T>),
    Rescale(T),
}

/// `C_ρ ∘ P` as a matrix: every column of `P` convolved with `ρ̃`.
fn convolve_matrix<T: Real>(k: &NoiseKernel<T>, p: &TransferMatrix<T>) -> Result<TransferMatrix<T>> {
    use rayon::prelude::*;
    let n = p.n();
    if k.is_delta() {
        return Ok(p.clone());
    }
    let rho = k.grid_samples();
    let nt = T::from_count(n);
    let columns: Vec<Vec<(usize, T)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut col = vec![T::zero(); n];
            for (r, a) in p.column(j) {
                for (i, c) in col.iter_mut().enumerate() {
                    *c += rho[(i + n - r) % n] * a / nt;
                }
            }
            col.into_iter().enumerate().filter(|(_, v)| *v != T::zero()).collect()
        })
        .collect();
    TransferMatrix::from_columns(n, columns, true)
}

/// Solver settings. `tol` bounds the final L1 step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Consecutive non-contracting steps tolerated before giving up.
    pub stall_window: usize,
    /// Relaxation `α` used once the plain iteration stalls; `None` reports
    /// the stall as an error instead.
    pub damping_fallback: Option<T>,
    /// Tolerance of the inner fixed-density solves in the outer iteration.
    pub inner_tol: T,
}

impl<T: Real> SolverOptions<T> {
    pub fn picard_default() -> Self {
        SolverOptions {
            tol: T::lit(1e-10),
            max_iter: 2000,
            stall_window: 20,
            damping_fallback: None,
            inner_tol: T::lit(1e-12),
        }
    }

    pub fn outer_default() -> Self {
        SolverOptions { tol: T::lit(1e-9), inner_tol: T::lit(1e-10), ..Self::picard_default() }
    }

    pub fn with_tol(mut self, tol: T) -> Self {
        self.tol = tol;
        if self.inner_tol > tol * T::lit(0.1) {
            self.inner_tol = tol * T::lit(0.1);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<T> {
    pub iteration: usize,
    /// `‖f_{k+1} − f_k‖₁`, summed over populations.
    pub step: T,
    /// `‖ℒ(f_k) − f_k‖₁`; equals `step` for Picard.
    pub residual: T,
    /// `step_k / step_{k−1}`.
    pub ratio: Option<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace<T> {
    pub entries: Vec<TraceEntry<T>>,
    pub converged: bool,
    /// `‖ℒ(f*) − f*‖₁` at the returned state.
    pub final_residual: T,
    /// Whether the heuristic damped iteration was used.
    pub damped: bool,
    /// Median step ratio over the steps above the inner-solve noise floor
    /// (outer iteration only): an empirical contraction constant.
    pub outer_ratio: Option<T>,
    /// Whether every inner solve reported a unique fixed density.
    pub inner_unique: bool,
}

impl<T: Real> SolverTrace<T> {
    pub fn iterations(&self) -> usize {
        self.entries.len()
    }

    pub fn max_ratio(&self) -> Option<T> {
        self.entries.iter().filter_map(|e| e.ratio).reduce(T::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        use crate::densities::fmt_float;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "step", "residual", "ratio"])?;
        for e in &self.entries {
            out.write_record([
                e.iteration.to_string(),
                fmt_float(e.step),
                fmt_float(e.residual),
                e.ratio.map(fmt_float).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Solution<T> {
    pub state: Vec<GridDensity<T>>,
    pub trace: SolverTrace<T>,
}

impl<T: Real> Solution<T> {
    pub fn density(&self) -> &GridDensity<T> {
        &self.state[0]
    }
}

fn state_distance<T: Real>(a: &[GridDensity<T>], b: &[GridDensity<T>]) -> T {
    a.iter().zip(b).map(|(x, y)| l1_distance(x.values(), y.values())).sum()
}

fn residual<T: Real>(model: &SelfConsistentModel<T>, state: &[GridDensity<T>]) -> Result<T> {
    Ok(state_distance(&model.apply(state)?, state))
}

/// Picard iteration `f ← ℒ_δ(f)`.
pub fn picard_fixed_point<T: Real>(
    model: &SelfConsistentModel<T>,
    f0: Vec<GridDensity<T>>,
    opts: &SolverOptions<T>,
) -> Result<Solution<T>> {
    model.check_state(&f0)?;
    let mut f = f0;
    let mut entries: Vec<TraceEntry<T>> = Vec::new();
    let mut stalled = 0usize;
    let mut alpha: Option<T> = None;
    let mut last_ratio = T::zero();
    for k in 0..opts.max_iter {
        let lf = model.apply(&f)?;
        let step_full = state_distance(&lf, &f);
        let next: Vec<GridDensity<T>> = match alpha {
            None => lf,
            Some(a) => f
                .iter()
                .zip(&lf)
                .map(|(x, y)| {
                    GridDensity::normalized(
                        x.values().iter().zip(y.values()).map(|(&p, &q)| (T::one() - a) * p + a * q).collect(),
                    )
                })
                .collect::<Result<_>>()?,
        };
        let step = state_distance(&next, &f);
        let ratio = entries.last().filter(|e| e.step > T::zero()).map(|e| step / e.step);
        entries.push(TraceEntry { iteration: k, step, residual: step_full, ratio });
        f = next;
        if let Some(r) = ratio {
            last_ratio = r;
            stalled = if r >= T::one() { stalled + 1 } else { 0 };
        }
        if step <= opts.tol {
            let final_residual = residual(model, &f)?;
            return Ok(Solution {
                state: f,
                trace: SolverTrace {
                    entries,
                    converged: true,
                    final_residual,
                    damped: alpha.is_some(),
                    outer_ratio: None,
                    inner_unique: true,
                },
            });
        }
        if stalled >= opts.stall_window {
            match (alpha, opts.damping_fallback) {
                (None, Some(a)) => {
                    log::warn!("Picard iteration stalled (ratio {last_ratio}); switching to heuristic damping alpha = {a}");
                    alpha = Some(a);
                    stalled = 0;
                }
                _ => {
                    return Err(Error::NonContraction { steps: stalled, ratio: last_ratio.as_f64() });
                }
            }
        }
    }
    if last_ratio >= T::one() {
        return Err(Error::NonContraction { steps: stalled, ratio: last_ratio.as_f64() });
    }
    Err(Error::Numerical {
        message: format!("Picard iteration did not reach tol in {} steps", opts.max_iter),
        residual: entries.last().map(|e| e.step.as_f64()).unwrap_or(f64::NAN),
    })
}

/// Outer iteration with frozen measure: `μ_{i}` is the fixed density of
/// `L_{δ, μ_{i−1}}`.
pub fn thm_existence_iteration<T: Real>(
    model: &SelfConsistentModel<T>,
    mu0: Vec<GridDensity<T>>,
    opts: &SolverOptions<T>,
) -> Result<Solution<T>> {
    model.check_state(&mu0)?;
    let inner = FixedDensityOptions { tol: opts.inner_tol, ..FixedDensityOptions::default() };
    let mut mu = mu0;
    let mut entries: Vec<TraceEntry<T>> = Vec::new();
    let mut stalled = 0usize;
    let mut inner_unique = true;
    let mut converged = false;
    for k in 0..opts.max_iter {
        let ops = model.linear_operators(&mu)?;
        let mut next = Vec::with_capacity(ops.len());
        for op in &ops {
            let fd = linear_fixed_density(op, &inner)?;
            inner_unique &= fd.unique;
            next.push(fd.density);
        }
        let step = state_distance(&next, &mu);
        let ratio = entries.last().filter(|e| e.step > T::zero()).map(|e| step / e.step);
        // residual of the previous iterate under the frozen-operator map
        entries.push(TraceEntry { iteration: k, step, residual: step, ratio });
        mu = next;
        if let Some(r) = ratio {
            stalled = if r >= T::one() && step > opts.inner_tol * T::lit(1e3) { stalled + 1 } else { 0 };
        }
        if model.delta() == T::zero() || step <= opts.tol {
            converged = true;
            break;
        }
        if stalled >= opts.stall_window {
            return Err(Error::NonContraction { steps: stalled, ratio: ratio.unwrap_or(T::one()).as_f64() });
        }
    }
    if !converged {
        return Err(Error::Numerical {
            message: format!("outer iteration did not reach tol in {} steps", opts.max_iter),
            residual: entries.last().map(|e| e.step.as_f64()).unwrap_or(f64::NAN),
        });
    }
    let floor = opts.inner_tol * T::lit(1e3);
    let mut ratios: Vec<T> = entries
        .windows(2)
        .filter(|w| w[1].step > floor && w[0].step > floor)
        .map(|w| w[1].step / w[0].step)
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let outer_ratio = (!ratios.is_empty()).then(|| ratios[ratios.len() / 2]);
    let final_residual = residual(model, &mu)?;
    Ok(Solution {
        state: mu,
        trace: SolverTrace { entries, converged, final_residual, damped: false, outer_ratio, inner_unique },
    })
}
