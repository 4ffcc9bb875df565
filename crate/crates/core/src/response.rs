//! Linear response of the invariant density to the coupling strength at
//! zero coupling: derivative terms, the resolvent on zero-mean functions and
//! a finite-difference cross-check.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::densities::{cell_midpoint, fmt_float, inner, integral, l1_distance, norm, GridDensity, NormKind, SignedGridFunction};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Lu};
use crate::maps::{CircleMap, CouplingKernel, Displacement};
use crate::scalar::Real;
use crate::self_consistent::{thm_existence_iteration, SelfConsistentModel, SolverOptions, SystemClass};
use crate::transfer_ops::{
    convolve, linear_fixed_density, reflecting_derivative_matrix, reflecting_kernel_matrix, FixedDensityOptions,
    NoiseKernel, NoiseProfile, TransferMatrix,
};

/// Factorized `(I − L₀ + f₀ 𝟙ᵀ/n)`: the resolvent of `L₀` on zero-mean
/// functions, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct Resolvent<T> {
    op: TransferMatrix<T>,
    lu: Lu<T>,
    fixed: GridDensity<T>,
    second_eigenvalue: T,
    condition: T,
}

impl<T: Real> Resolvent<T> {
    /// Fails with [`Error::SpectralGap`] when `L₀` shows no spectral gap or
    /// the deflated system is singular.
    pub fn new(op: &TransferMatrix<T>) -> Result<Self> {
        let fd = linear_fixed_density(op, &FixedDensityOptions::default())?;
        if !fd.unique {
            return Err(Error::SpectralGap(format!(
                "subdominant eigenvalue estimate {} is not below 1",
                fd.second_eigenvalue
            )));
        }
        let n = op.n();
        let nt = T::from_count(n);
        let mut a = op.to_dense();
        let f0 = fd.density.values();
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { T::one() } else { T::zero() };
                a[(i, j)] = id - a[(i, j)] + f0[i] / nt;
            }
        }
        let lu = Lu::factor(&a).map_err(|e| Error::SpectralGap(format!("deflated system is singular: {e}")))?;
        let condition = lu.condition_estimate();
        if condition > T::one() / (T::epsilon() * T::lit(1e3)) {
            log::warn!("resolvent is ill-conditioned: condition estimate {condition}");
        }
        Ok(Resolvent { op: op.clone(), lu, fixed: fd.density, second_eigenvalue: fd.second_eigenvalue, condition })
    }

    pub fn n(&self) -> usize {
        self.op.n()
    }

    /// The fixed density `f₀` of `L₀`.
    pub fn fixed_density(&self) -> &GridDensity<T> {
        &self.fixed
    }

    /// Estimated modulus of the subdominant eigenvalue of `L₀`.
    pub fn second_eigenvalue(&self) -> T {
        self.second_eigenvalue
    }

    /// Hager estimate of the 1-norm condition number.
    pub fn condition_estimate(&self) -> T {
        self.condition
    }

    pub fn operator(&self) -> &TransferMatrix<T> {
        &self.op
    }

    /// `u = (I − L₀)⁻¹ v` for zero-mean `v`.
    pub fn apply(&self, v: &SignedGridFunction<T>) -> Result<SignedGridFunction<T>> {
        self.check(v)?;
        Ok(SignedGridFunction::project_zero_mean(self.lu.solve(v.values())))
    }

    /// `w` with `∫ c · (I − L₀)⁻¹ v = ∫ w · v` for every zero-mean `v`.
    pub fn apply_adjoint(&self, c: &[T]) -> Result<Vec<T>> {
        if c.len() != self.n() {
            return Err(Error::config(format!("observable has {} cells, operator {}", c.len(), self.n())));
        }
        Ok(self.lu.solve_transpose(c))
    }

    /// `‖(I − L₀)u − v‖` in the given norm.
    pub fn residual(&self, u: &SignedGridFunction<T>, v: &SignedGridFunction<T>, kind: NormKind) -> Result<T> {
        let lu = self.op.apply(u.values());
        let r: Vec<T> = u.values().iter().zip(&lu).zip(v.values()).map(|((&a, &b), &c)| a - b - c).collect();
        norm(&r, kind)
    }

    fn check(&self, v: &SignedGridFunction<T>) -> Result<()> {
        if v.n() != self.n() {
            return Err(Error::config(format!("function has {} cells, operator {}", v.n(), self.n())));
        }
        if !v.is_zero_mean() {
            SignedGridFunction::zero_mean(v.values().to_vec())?;
        }
        Ok(())
    }
}

/// `(I − L₀)⁻¹ v` on zero-mean `v`, with the L1 residual.
pub fn resolvent_apply<T: Real>(l0: &TransferMatrix<T>, v: &SignedGridFunction<T>) -> Result<(SignedGridFunction<T>, T)> {
    let r = Resolvent::new(l0)?;
    let u = r.apply(v)?;
    let res = r.residual(&u, v, NormKind::L1)?;
    Ok((u, res))
}

#[derive(Clone, Debug)]
pub struct NeumannSum<T> {
    pub sum: SignedGridFunction<T>,
    pub terms: usize,
    /// `r^K / (1 − r)` with `r` the subdominant eigenvalue estimate; `None`
    /// when `r ≥ 1`.
    pub tail_bound: Option<T>,
}

/// Truncated series `Σ_{k<K} L₀^k v`, stopped once a term drops below `tol`
/// in L1 or after `max_terms` terms.
pub fn neumann_series<T: Real>(
    l0: &TransferMatrix<T>,
    v: &SignedGridFunction<T>,
    tol: T,
    max_terms: usize,
    second_eigenvalue: T,
) -> Result<NeumannSum<T>> {
    let mut term = v.values().to_vec();
    let mut sum = vec![T::zero(); term.len()];
    let mut k = 0;
    while k < max_terms {
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += *t;
        }
        k += 1;
        term = l0.apply(&term);
        if norm(&term, NormKind::L1)? < tol {
            break;
        }
    }
    let tail_bound = (second_eigenvalue < T::one()).then(|| second_eigenvalue.powi(k as i32) / (T::one() - second_eigenvalue));
    Ok(NeumannSum { sum: SignedGridFunction::project_zero_mean(sum), terms: k, tail_bound })
}

/// One-sided limits `(g(b⁻), g(b⁺))` of the exact pushforward of the
/// piecewise-constant density `f` at the point `b`.
fn pushforward_one_sided<T: Real>(map: &CircleMap<T>, f: &[T], b: T) -> (T, T) {
    let n = f.len();
    let nt = T::from_count(n);
    let cell = |x: T, from_left: bool| {
        let u = x * nt;
        let k = if from_left { u.ceil() - T::one() } else { u.floor() };
        k.to_isize().unwrap_or(0).rem_euclid(n as isize) as usize
    };
    let mut left = T::zero();
    let mut right = T::zero();
    for br in map.branches() {
        let (lo, hi) = br.image;
        let mut z = b + (lo - b).ceil();
        while z <= hi {
            let x = (br.inverse)(z);
            let w = (br.inverse_deriv)(z);
            if z > lo {
                left += f[cell(x, br.increasing)] * w;
            }
            if z < hi {
                right += f[cell(x, !br.increasing)] * w;
            }
            z += T::one();
        }
    }
    (left, right)
}

/// Which one-sided value of `L_{T₀} h₀` carries the flux through a cell edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FluxScheme {
    /// Upstream value: the exact one-sided derivative in `δ > 0` of the
    /// discretized operator.
    #[default]
    Upwind,
    /// Mean of both sides: linear in the coupling.
    Centered,
}

/// `−(S · L_{T₀} h₀)′` discretized as an upwind flux difference at the
/// cell edges, where `S(x) = ∫ h(x, y) h₀(y) dy`. This is the exact
/// derivative at `δ = 0` of the Ulam matrix of `Φ_δ ∘ T₀`.
pub fn derivative_term_expanding<T: Real>(
    h: &CouplingKernel<T>,
    h0: &GridDensity<T>,
    map: &CircleMap<T>,
) -> Result<SignedGridFunction<T>> {
    derivative_term_expanding_with(h, h0, map, FluxScheme::Upwind)
}

pub fn derivative_term_expanding_with<T: Real>(
    h: &CouplingKernel<T>,
    h0: &GridDensity<T>,
    map: &CircleMap<T>,
    scheme: FluxScheme,
) -> Result<SignedGridFunction<T>> {
    let mut d = Displacement::zeros(h0.n());
    d.accumulate(h, h0.values(), T::one())?;
    Ok(flux_term(&edge_values(map, h0.values())?, &d.s, scheme))
}

/// One-sided values of `L_{T₀} h₀` at every cell edge `i/n`.
pub(crate) fn edge_values<T: Real>(map: &CircleMap<T>, h0: &[T]) -> Result<Vec<(T, T)>> {
    let n = h0.len();
    let nt = T::from_count(n);
    Ok(if map.has_branches() {
        (0..n).map(|i| pushforward_one_sided(map, h0, T::from_count(i) / nt)).collect()
    } else {
        let g = crate::transfer_ops::ulam_matrix(map, n, crate::transfer_ops::DEFAULT_ULAM_SUBSAMPLES)?.apply(h0);
        (0..n).map(|i| (g[(i + n - 1) % n], g[i])).collect()
    })
}

/// `−n (F_{i+1} − F_i)` with edge fluxes `F_i = S(i/n) · g(i/n)`.
pub(crate) fn flux_term<T: Real>(sides: &[(T, T)], s: &[T], scheme: FluxScheme) -> SignedGridFunction<T> {
    let n = sides.len();
    let nt = T::from_count(n);
    let half = T::lit(0.5);
    let flux: Vec<T> = s
        .iter()
        .zip(sides)
        .map(|(&si, &(gl, gr))| {
            si * match scheme {
                FluxScheme::Upwind if si > T::zero() => gl,
                FluxScheme::Upwind => gr,
                FluxScheme::Centered => half * (gl + gr),
            }
        })
        .collect();
    SignedGridFunction::project_zero_mean((0..n).map(|i| -nt * (flux[(i + 1) % n] - flux[i])).collect())
}

/// Noise-class derivative term `−ρ̃ ∗ (S · L_{T₀} h₀)′`.
pub fn derivative_term_noise<T: Real>(
    h: &CouplingKernel<T>,
    h0: &GridDensity<T>,
    map: &CircleMap<T>,
    kernel: &NoiseKernel<T>,
) -> Result<SignedGridFunction<T>> {
    let inner = derivative_term_expanding(h, h0, map)?;
    Ok(SignedGridFunction::project_zero_mean(convolve(kernel, inner.values())?))
}

/// Tent-class derivative term
/// `∫ K′(x, y) · a T(y) f₀(y) dy` with `a = ∫ t f₀(t) dt` and `K′` the
/// reflected kernel built from `ρ′`.
pub fn derivative_term_strange<T: Real>(
    tmap: impl Fn(T) -> T + Sync,
    f0: &GridDensity<T>,
    rho: &NoiseProfile<T>,
) -> Result<SignedGridFunction<T>> {
    reflected_term_with_mean(&tmap, f0.values(), f0.mean_position(), rho)
}

fn reflected_term_with_mean<T: Real>(
    tmap: &(impl Fn(T) -> T + Sync),
    f0: &[T],
    a: T,
    rho: &NoiseProfile<T>,
) -> Result<SignedGridFunction<T>> {
    let n = f0.len();
    let nt = T::from_count(n);
    let dk = reflecting_derivative_matrix(tmap, rho, n)?;
    let k = reflecting_kernel_matrix(tmap, rho, n)?;
    let mut term = vec![T::zero(); n];
    for j in 0..n {
        let weight = a * tmap(cell_midpoint(j, n)) * f0[j] / nt;
        if weight == T::zero() {
            continue;
        }
        // derivative of the renormalized column
        let col_mass = (0..n).map(|i| dk[(i, j)]).sum::<T>() / nt;
        for (i, t) in term.iter_mut().enumerate() {
            *t += weight * (dk[(i, j)] - k.entries()[(i, j)] * col_mass);
        }
    }
    let drift = integral(&term).abs();
    if drift > T::lit(1e-8) * norm(&term, NormKind::L1)?.max(T::one()) {
        log::warn!("reflected derivative term has mean {drift}");
    }
    Ok(SignedGridFunction::project_zero_mean(term))
}

#[derive(Clone, Debug)]
pub struct ResponseResult<T> {
    /// Uncoupled invariant density `h₀`.
    pub base_density: GridDensity<T>,
    pub derivative_term: SignedGridFunction<T>,
    pub response: SignedGridFunction<T>,
    /// `‖(I − L₀) R − L̇h₀‖₁`.
    pub resolvent_residual: T,
    /// The same residual in the class norm (L2 for the tent class).
    pub class_residual: T,
    pub class_norm: NormKind,
    pub condition_estimate: T,
    pub second_eigenvalue: T,
    /// `∫ c R` when an observable is given.
    pub observable_response: Option<T>,
}

/// Derivative term and uncoupled operator for a model, evaluated at the
/// uncoupled invariant density.
pub fn derivative_term<T: Real>(
    model: &SelfConsistentModel<T>,
    h0: &GridDensity<T>,
) -> Result<SignedGridFunction<T>> {
    match model.class() {
        SystemClass::Expanding => derivative_term_expanding(&model.couplings()[0], h0, &model.maps()[0]),
        SystemClass::AdditiveNoiseCircle => derivative_term_noise(
            &model.couplings()[0],
            h0,
            &model.maps()[0],
            model.noise().expect("noise class has a kernel"),
        ),
        SystemClass::ReflectingKernelInterval => {
            let tent = &model.maps()[0];
            derivative_term_strange(|y| tent.eval(y), h0, model.line_noise().expect("tent class has noise"))
        }
        SystemClass::TwoPopulation => Err(Error::config("linear response is not implemented for two populations")),
    }
}

/// Linear response `R = (I − L₀)⁻¹ L̇ h₀` of the model family at `δ = 0`.
pub fn linear_response<T: Real>(model: &SelfConsistentModel<T>, observable: Option<&[T]>) -> Result<ResponseResult<T>> {
    if model.class() == SystemClass::TwoPopulation {
        return Err(Error::config("linear response is not implemented for two populations"));
    }
    let l0 = model.uncoupled_operators()?.remove(0);
    let resolvent = Resolvent::new(&l0)?;
    let h0 = resolvent.fixed_density().clone();
    let term = derivative_term(model, &h0)?;
    let response = resolvent.apply(&term)?;
    let class_norm = if model.class() == SystemClass::ReflectingKernelInterval { NormKind::L2 } else { NormKind::L1 };
    let observable_response = match observable {
        Some(c) => {
            if c.len() != model.n() {
                return Err(Error::config(format!("observable has {} cells, model {}", c.len(), model.n())));
            }
            Some(inner(c, response.values()))
        }
        None => None,
    };
    Ok(ResponseResult {
        resolvent_residual: resolvent.residual(&response, &term, NormKind::L1)?,
        class_residual: resolvent.residual(&response, &term, class_norm)?,
        class_norm,
        condition_estimate: resolvent.condition_estimate(),
        second_eigenvalue: resolvent.second_eigenvalue(),
        base_density: h0,
        derivative_term: term,
        response,
        observable_response,
    })
}

/// Difference quotients `(f_δ − f₀)/δ` with a Richardson estimate of the
/// limit.
#[derive(Clone, Debug)]
pub struct FiniteDifferenceStudy<T> {
    pub base_density: GridDensity<T>,
    /// Coupling strengths that converged, in the order given.
    pub deltas: Vec<T>,
    pub quotients: Vec<SignedGridFunction<T>>,
    /// `(δ, message)` for coupling strengths where the solver failed.
    pub failures: Vec<(T, String)>,
    /// `(δ₂ Q(δ₁) − δ₁ Q(δ₂)) / (δ₂ − δ₁)` from the two smallest converged
    /// strengths.
    pub richardson: Option<SignedGridFunction<T>>,
}

impl<T: Real> FiniteDifferenceStudy<T> {
    /// L1 distance of every quotient to `reference`.
    pub fn gaps(&self, reference: &SignedGridFunction<T>) -> Vec<T> {
        self.quotients.iter().map(|q| l1_distance(q.values(), reference.values())).collect()
    }

    pub fn richardson_gap(&self, reference: &SignedGridFunction<T>) -> Option<T> {
        self.richardson.as_ref().map(|r| l1_distance(r.values(), reference.values()))
    }

    /// CSV with columns `delta, quotient_l1, l1_gap`; the Richardson limit
    /// is the row with `delta = 0`. Gaps are empty without a reference.
    pub fn write_csv<W: Write>(&self, w: W, reference: Option<&SignedGridFunction<T>>) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["delta", "quotient_l1", "l1_gap"])?;
        let gap = |q: &SignedGridFunction<T>| {
            reference.map(|r| fmt_float(l1_distance(q.values(), r.values()))).unwrap_or_default()
        };
        for (d, q) in self.deltas.iter().zip(&self.quotients) {
            wr.write_record([fmt_float(*d), fmt_float(q.norm(NormKind::L1)?), gap(q)])?;
        }
        if let Some(r) = &self.richardson {
            wr.write_record([fmt_float(T::zero()), fmt_float(r.norm(NormKind::L1)?), gap(r)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Solves the self-consistent problem at each `δ` with the outer iteration
/// and forms the difference quotients against the `δ = 0` solution.
pub fn finite_difference_response<T: Real>(
    model: &SelfConsistentModel<T>,
    deltas: &[T],
    opts: &SolverOptions<T>,
) -> Result<FiniteDifferenceStudy<T>> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > T::zero()) || !d.is_finite()) {
        return Err(Error::config("difference quotients need finite coupling strengths > 0"));
    }
    if model.populations() != 1 {
        return Err(Error::config("difference quotients support single-population models"));
    }
    let n = model.n();
    let base = thm_existence_iteration(&model.with_delta(T::zero())?, vec![GridDensity::uniform(n)], opts)?
        .state
        .remove(0);
    let mut kept = Vec::new();
    let mut quotients = Vec::new();
    let mut failures = Vec::new();
    for &d in deltas {
        let solved = model
            .with_delta(d)
            .and_then(|m| thm_existence_iteration(&m, vec![base.clone()], opts));
        match solved {
            Ok(sol) => {
                let q = sol.state[0].values().iter().zip(base.values()).map(|(&a, &b)| (a - b) / d).collect();
                kept.push(d);
                quotients.push(SignedGridFunction::project_zero_mean(q));
            }
            Err(e) => {
                log::warn!("difference quotient at delta = {d} skipped: {e}");
                failures.push((d, e.to_string()));
            }
        }
    }
    let richardson = {
        let mut idx: Vec<usize> = (0..kept.len()).collect();
        idx.sort_by(|&a, &b| kept[a].partial_cmp(&kept[b]).expect("finite"));
        match idx.as_slice() {
            [i, j, ..] if kept[*i] != kept[*j] => {
                let (d1, d2) = (kept[*i], kept[*j]);
                let (q1, q2) = (quotients[*i].values(), quotients[*j].values());
                Some(SignedGridFunction::project_zero_mean(
                    q1.iter().zip(q2).map(|(&a, &b)| (d2 * a - d1 * b) / (d2 - d1)).collect(),
                ))
            }
            _ => None,
        }
    };
    Ok(FiniteDifferenceStudy { base_density: base, deltas: kept, quotients, failures, richardson })
}

/// Dense `L₀` of the noisy tent system, exposed for inspection.
pub fn uncoupled_tent_kernel<T: Real>(rho: &NoiseProfile<T>, n: usize) -> Result<DenseMatrix<T>> {
    let tent = CircleMap::<T>::tent();
    Ok(reflecting_kernel_matrix(|y| tent.eval(y), rho, n)?.to_transfer_matrix()?.to_dense())
}

#[derive(Clone, Debug, Serialize)]
pub struct ResponseSummary {
    pub derivative_term_l1: f64,
    pub response_l1: f64,
    pub resolvent_residual: f64,
    pub condition_estimate: f64,
    pub second_eigenvalue: f64,
    pub observable_response: Option<f64>,
}

impl<T: Real> ResponseResult<T> {
    pub fn summary(&self) -> Result<ResponseSummary> {
        Ok(ResponseSummary {
            derivative_term_l1: self.derivative_term.norm(NormKind::L1)?.as_f64(),
            response_l1: self.response.norm(NormKind::L1)?.as_f64(),
            resolvent_residual: self.resolvent_residual.as_f64(),
            condition_estimate: self.condition_estimate.as_f64(),
            second_eigenvalue: self.second_eigenvalue.as_f64(),
            observable_response: self.observable_response.map(|v| v.as_f64()),
        })
    }
}
