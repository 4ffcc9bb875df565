//! Couplings maximizing the first-order change `J(ḣ) = ∫ c dR(ḣ)` of an
//! observable average over a convex set of coupling perturbations.
//!
//! Perturbations are coefficient vectors over a tensor trigonometric basis.
//! The coefficient space carries the weighted inner product
//! `⟨u, v⟩ = Σ w_m u_m v_m` with Sobolev-type weights
//! `w_m = (1 + k² + l²)^s`, so basis vectors are orthogonal with
//! `⟨e_m, e_m⟩ = w_m`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{cell_midpoint, fmt_float, inner};
use crate::error::{Error, Result};
use crate::maps::{CouplingKernel, TrigTerm, Wave};
use crate::response::{edge_values, flux_term, FluxScheme, Resolvent};
use crate::scalar::{pairwise_mean, Real};
use crate::self_consistent::{SelfConsistentModel, SystemClass};
use crate::transfer_ops::convolve;

/// Default number of random feasible points in an optimality certificate.
pub const CERTIFICATE_SAMPLES: usize = 10_000;

/// Tensor modes `e_m(x, y) = X_m(x) Y_m(y)` with their metric weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBasis<T> {
    modes: Vec<(Wave, Wave)>,
    weights: Vec<T>,
    exponent: T,
}

impl<T: Real> PerturbationBasis<T> {
    /// All `(2d + 1)²` products of the real trigonometric basis of degree
    /// `d`, weighted by `(1 + k² + l²)^s`.
    pub fn trigonometric(d: u32, s: T) -> Result<Self> {
        if !(s >= T::zero()) || !s.is_finite() {
            return Err(Error::config(format!("weight exponent must be finite and >= 0, got {s}")));
        }
        let waves = Wave::basis(d);
        let mut modes = Vec::with_capacity(waves.len() * waves.len());
        let mut weights = Vec::with_capacity(modes.capacity());
        for &x in &waves {
            for &y in &waves {
                let (k, l) = (x.frequency() as usize, y.frequency() as usize);
                modes.push((x, y));
                weights.push(T::from_count(1 + k * k + l * l).powf(s));
            }
        }
        Ok(PerturbationBasis { modes, weights, exponent: s })
    }

    /// Explicit modes with unit weights.
    pub fn from_modes(modes: Vec<(Wave, Wave)>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::config("perturbation basis is empty"));
        }
        let weights = vec![T::one(); modes.len()];
        Ok(PerturbationBasis { modes, weights, exponent: T::zero() })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[(Wave, Wave)] {
        &self.modes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn exponent(&self) -> T {
        self.exponent
    }

    /// Label of the coefficient metric, carried into every output.
    pub fn metric_label(&self) -> String {
        format!("weighted-spectral(s={})", self.exponent)
    }

    /// `Σ_m u_m e_m` as a coupling kernel.
    pub fn coupling(&self, coefficients: &[T]) -> Result<CouplingKernel<T>> {
        self.check_len(coefficients)?;
        let terms = self
            .modes
            .iter()
            .zip(coefficients)
            .filter(|(_, c)| **c != T::zero())
            .map(|(&(x, y), &coeff)| TrigTerm { coeff, x, y })
            .collect();
        Ok(CouplingKernel::from_terms("optimal-coupling", terms))
    }

    /// CSV with columns `k, l, coefficient`; `k` and `l` are signed wave
    /// labels (`+k` cosine, `−k` sine, `0` constant).
    pub fn write_coefficients_csv<W: Write>(&self, coefficients: &[T], w: W) -> Result<()> {
        self.check_len(coefficients)?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "l", "coefficient"])?;
        for (&(x, y), c) in self.modes.iter().zip(coefficients) {
            wr.write_record([x.signed_index().to_string(), y.signed_index().to_string(), fmt_float(*c)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// CSV with columns `x, y, value` sampling `h(x_i, y_j)` at the
    /// midpoints of an `n × n` grid.
    pub fn write_surface_csv<W: Write>(&self, coefficients: &[T], n: usize, w: W) -> Result<()> {
        let h = self.coupling(coefficients)?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "value"])?;
        for i in 0..n {
            let x = cell_midpoint::<T>(i, n);
            for j in 0..n {
                let y = cell_midpoint::<T>(j, n);
                wr.write_record([fmt_float(x), fmt_float(y), fmt_float(h.eval(x, y))])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    fn check_len(&self, u: &[T]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::config(format!("expected {} coefficients, got {}", self.len(), u.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPath {
    /// One resolvent solve per mode.
    PerMode,
    /// One transposed solve shared by all modes.
    #[default]
    Adjoint,
}

/// `g_m = ∫ c dR(e_m)`, so that `J(u) = Σ g_m u_m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseGradient<T> {
    pub g: Vec<T>,
    pub weights: Vec<T>,
    pub path: GradientPath,
    pub metric: String,
}

impl<T: Real> ResponseGradient<T> {
    /// `g♯ = (g_m / w_m)`: the gradient raised through the metric.
    pub fn raised(&self) -> Vec<T> {
        raise(&self.g, &self.weights)
    }

    pub fn objective(&self, u: &[T]) -> T {
        objective(&self.g, u)
    }
}

fn raise<T: Real>(g: &[T], w: &[T]) -> Vec<T> {
    g.iter().zip(w).map(|(&a, &b)| a / b).collect()
}

fn objective<T: Real>(g: &[T], u: &[T]) -> T {
    g.iter().zip(u).map(|(&a, &b)| a * b).sum()
}

fn weighted_norm<T: Real>(u: &[T], w: &[T]) -> T {
    u.iter().zip(w).map(|(&a, &b)| b * a * a).sum::<T>().sqrt()
}

/// Response gradient of the observable `c` over `basis` at zero coupling.
///
/// The derivative terms use [`FluxScheme::Centered`] so that `J` is exactly
/// linear in the coefficients.
pub fn response_gradient<T: Real>(
    model: &SelfConsistentModel<T>,
    c: &[T],
    basis: &PerturbationBasis<T>,
    path: GradientPath,
) -> Result<ResponseGradient<T>> {
    if !matches!(model.class(), SystemClass::Expanding | SystemClass::AdditiveNoiseCircle) {
        return Err(Error::config(format!("coupling optimization is not defined for the {:?} class", model.class())));
    }
    let n = model.n();
    if c.len() != n {
        return Err(Error::config(format!("observable has {} cells, model {n}", c.len())));
    }
    let l0 = model.uncoupled_operators()?.remove(0);
    let resolvent = Resolvent::new(&l0)?;
    let h0 = resolvent.fixed_density().values().to_vec();
    let sides = edge_values(&model.maps()[0], &h0)?;
    let noise = model.noise();
    let adjoint = match path {
        GradientPath::Adjoint => Some(resolvent.apply_adjoint(c)?),
        GradientPath::PerMode => None,
    };
    let nt = T::from_count(n);
    let g: Vec<T> = basis
        .modes()
        .par_iter()
        .map(|&(xw, yw)| {
            let moment = pairwise_mean(&h0.iter().enumerate().map(|(j, &p)| yw.eval(cell_midpoint::<T>(j, n)) * p).collect::<Vec<_>>());
            if moment == T::zero() {
                return Ok(T::zero());
            }
            let s: Vec<T> = (0..n).map(|i| moment * xw.eval(T::from_count(i) / nt)).collect();
            let mut term = flux_term(&sides, &s, FluxScheme::Centered);
            if let Some(k) = noise {
                term = crate::densities::SignedGridFunction::project_zero_mean(convolve(k, term.values())?);
            }
            Ok(match &adjoint {
                Some(w) => inner(w, term.values()),
                None => inner(c, resolvent.apply(&term)?.values()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ResponseGradient { g, weights: basis.weights().to_vec(), path, metric: basis.metric_label() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ConvexConstraint<T> {
    /// `‖u‖_w ≤ radius`.
    Ball { radius: T },
    /// `lower ≤ u ≤ upper` coordinatewise.
    Box { lower: Vec<T>, upper: Vec<T> },
    BallIntersectBox { radius: T, lower: Vec<T>, upper: Vec<T> },
}

impl<T: Real> ConvexConstraint<T> {
    /// Checks dimensions and that the set contains the origin.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let check_box = |lo: &[T], hi: &[T]| -> Result<()> {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::config(format!("box bounds must have {dim} entries")));
            }
            if lo.iter().zip(hi).any(|(&l, &h)| !(l <= T::zero() && T::zero() <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::config("box bounds must be finite and contain 0"));
            }
            Ok(())
        };
        let check_radius = |r: T| -> Result<()> {
            if !(r > T::zero()) || !r.is_finite() {
                return Err(Error::config(format!("ball radius must be finite and > 0, got {r}")));
            }
            Ok(())
        };
        match self {
            ConvexConstraint::Ball { radius } => check_radius(*radius),
            ConvexConstraint::Box { lower, upper } => check_box(lower, upper),
            ConvexConstraint::BallIntersectBox { radius, lower, upper } => {
                check_radius(*radius)?;
                check_box(lower, upper)
            }
        }
    }

    pub fn contains(&self, u: &[T], weights: &[T], tol: T) -> bool {
        let in_ball = |r: T| weighted_norm(u, weights) <= r * (T::one() + tol) + tol;
        let in_box = |lo: &[T], hi: &[T]| u.iter().zip(lo.iter().zip(hi)).all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol);
        match self {
            ConvexConstraint::Ball { radius } => in_ball(*radius),
            ConvexConstraint::Box { lower, upper } => in_box(lower, upper),
            ConvexConstraint::BallIntersectBox { radius, lower, upper } => in_ball(*radius) && in_box(lower, upper),
        }
    }
}

/// A maximizer of `J` over the constraint set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Optimum<T> {
    pub coefficients: Vec<T>,
    pub objective: T,
    /// `true` when `J ≡ 0`, so every feasible point is optimal.
    pub all_feasible_optimal: bool,
    /// Ascent iterations; zero for closed-form solutions.
    pub iterations: usize,
}

/// `u = r g♯ / ‖g♯‖_w`, the unique maximizer on the ball when `g ≠ 0`.
pub fn optimize_ball<T: Real>(g: &[T], weights: &[T], r: T) -> Result<Optimum<T>> {
    ConvexConstraint::Ball { radius: r }.validate(g.len())?;
    check_weights(g, weights)?;
    let sharp = raise(g, weights);
    let len = weighted_norm(&sharp, weights);
    if len == T::zero() {
        return Ok(Optimum { coefficients: vec![T::zero(); g.len()], objective: T::zero(), all_feasible_optimal: true, iterations: 0 });
    }
    let u: Vec<T> = sharp.iter().map(|&v| r * v / len).collect();
    Ok(Optimum { objective: objective(g, &u), coefficients: u, all_feasible_optimal: false, iterations: 0 })
}

fn check_weights<T: Real>(g: &[T], weights: &[T]) -> Result<()> {
    if weights.len() != g.len() {
        return Err(Error::config("gradient and weights differ in length"));
    }
    if weights.iter().any(|w| !(*w > T::zero()) || !w.is_finite()) {
        return Err(Error::config("metric weights must be finite and > 0"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentOptions<T> {
    pub max_iter: usize,
    /// Stop once the weighted step falls below this.
    pub tol: T,
    /// Starting point; the origin when `None`.
    pub start: Option<Vec<T>>,
}

impl<T: Real> Default for AscentOptions<T> {
    fn default() -> Self {
        AscentOptions { max_iter: 500, tol: T::lit(1e-13), start: None }
    }
}

/// Maximizer of `J` over `constraint`: closed forms for a ball or a box,
/// projected ascent otherwise.
pub fn optimize_convex<T: Real>(
    g: &[T],
    weights: &[T],
    constraint: &ConvexConstraint<T>,
    opts: &AscentOptions<T>,
) -> Result<Optimum<T>> {
    constraint.validate(g.len())?;
    check_weights(g, weights)?;
    match constraint {
        ConvexConstraint::Ball { radius } => optimize_ball(g, weights, *radius),
        ConvexConstraint::Box { lower, upper } => {
            let u: Vec<T> = g
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&gm, (&l, &h))| {
                    if gm > T::zero() {
                        h
                    } else if gm < T::zero() {
                        l
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok(Optimum {
                objective: objective(g, &u),
                all_feasible_optimal: g.iter().all(|v| *v == T::zero()),
                coefficients: u,
                iterations: 0,
            })
        }
        ConvexConstraint::BallIntersectBox { .. } => projected_ascent(g, weights, constraint, opts),
    }
}

/// Projected ascent `u ← P(u + η_k g♯)` with doubling steps `η_k`, using
/// an exact multiplier search for the projection onto intersections.
pub fn projected_ascent<T: Real>(
    g: &[T],
    weights: &[T],
    constraint: &ConvexConstraint<T>,
    opts: &AscentOptions<T>,
) -> Result<Optimum<T>> {
    constraint.validate(g.len())?;
    check_weights(g, weights)?;
    let dim = g.len();
    let sharp = raise(g, weights);
    let glen = weighted_norm(&sharp, weights);
    if glen == T::zero() {
        return Ok(Optimum { coefficients: vec![T::zero(); dim], objective: T::zero(), all_feasible_optimal: true, iterations: 0 });
    }
    let scale = set_scale(constraint, weights);
    let mut u = match &opts.start {
        Some(s) if s.len() == dim => project(s, weights, constraint, opts.tol * T::lit(1e-2))?,
        Some(_) => return Err(Error::config(format!("start point must have {dim} entries"))),
        None => vec![T::zero(); dim],
    };
    let mut eta = scale / glen;
    for it in 1..=opts.max_iter {
        let trial: Vec<T> = u.iter().zip(&sharp).map(|(&a, &b)| a + eta * b).collect();
        let next = project(&trial, weights, constraint, opts.tol * T::lit(1e-2))?;
        let diff: Vec<T> = next.iter().zip(&u).map(|(&a, &b)| a - b).collect();
        let step = weighted_norm(&diff, weights);
        u = next;
        if step <= opts.tol * scale.max(T::one()) {
            return Ok(Optimum { objective: objective(g, &u), coefficients: u, all_feasible_optimal: false, iterations: it });
        }
        eta = (eta * T::lit(2.0)).min(T::max_value() / T::lit(4.0));
    }
    log::warn!("projected ascent stopped at iteration {} with objective {}", opts.max_iter, objective(g, &u));
    Err(Error::Numerical {
        message: format!("projected ascent did not converge in {} iterations", opts.max_iter),
        residual: objective(g, &u).as_f64(),
    })
}

fn set_scale<T: Real>(c: &ConvexConstraint<T>, weights: &[T]) -> T {
    let box_scale = |lo: &[T], hi: &[T]| {
        let span: Vec<T> = lo.iter().zip(hi).map(|(&l, &h)| (-l).max(h)).collect();
        weighted_norm(&span, weights)
    };
    match c {
        ConvexConstraint::Ball { radius } => *radius,
        ConvexConstraint::Box { lower, upper } => box_scale(lower, upper),
        ConvexConstraint::BallIntersectBox { radius, lower, upper } => radius.min(box_scale(lower, upper)),
    }
}

fn project_ball<T: Real>(u: &[T], weights: &[T], r: T) -> Vec<T> {
    let len = weighted_norm(u, weights);
    if len <= r {
        u.to_vec()
    } else {
        u.iter().map(|&v| v * r / len).collect()
    }
}

fn project_box<T: Real>(u: &[T], lo: &[T], hi: &[T]) -> Vec<T> {
    u.iter().zip(lo.iter().zip(hi)).map(|(&v, (&l, &h))| v.max(l).min(h)).collect()
}

/// Weighted-metric projection onto the constraint set.
pub fn project<T: Real>(u: &[T], weights: &[T], constraint: &ConvexConstraint<T>, tol: T) -> Result<Vec<T>> {
    match constraint {
        ConvexConstraint::Ball { radius } => Ok(project_ball(u, weights, *radius)),
        ConvexConstraint::Box { lower, upper } => Ok(project_box(u, lower, upper)),
        ConvexConstraint::BallIntersectBox { radius, lower, upper } => {
            // x(μ) = clamp(u / (1 + μ)) shrinks monotonically in μ ≥ 0
            let at = |mu: T| -> Vec<T> {
                let shrunk: Vec<T> = u.iter().map(|&v| v / (T::one() + mu)).collect();
                project_box(&shrunk, lower, upper)
            };
            let x0 = at(T::zero());
            if weighted_norm(&x0, weights) <= *radius {
                return Ok(x0);
            }
            let (mut lo, mut hi) = (T::zero(), weighted_norm(u, weights) / *radius);
            for _ in 0..400 {
                let mid = (lo + hi) / T::lit(2.0);
                if weighted_norm(&at(mid), weights) > *radius {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= tol * (T::one() + hi) {
                    break;
                }
            }
            let x = at(hi);
            let excess = weighted_norm(&x, weights) - *radius;
            if excess > tol * radius.max(T::one()) {
                return Err(Error::Numerical {
                    message: "projection onto ball-intersect-box did not converge".into(),
                    residual: excess.as_f64(),
                });
            }
            Ok(x)
        }
    }
}

/// Random-sampling optimality certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate<T> {
    pub samples: usize,
    /// Largest `J` over the feasible samples.
    pub best_sample: T,
    /// `J(opt) − best_sample`; nonnegative for a valid optimum.
    pub margin: T,
}

/// Draws a feasible point of `constraint`.
pub fn sample_feasible<T: Real>(constraint: &ConvexConstraint<T>, weights: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let dim = weights.len();
    let ball = |r: T, rng: &mut ChaCha8Rng| -> Vec<T> {
        let z: Vec<T> = weights.iter().map(|&w| T::lit(rng.sample::<f64, _>(StandardNormal)) / w.sqrt()).collect();
        let len = weighted_norm(&z, weights);
        let radius = r * T::lit(rng.random::<f64>()).powf(T::one() / T::from_count(dim));
        z.iter().map(|&v| v * radius / len).collect()
    };
    let in_box = |lo: &[T], hi: &[T], rng: &mut ChaCha8Rng| -> Vec<T> {
        lo.iter().zip(hi).map(|(&l, &h)| l + (h - l) * T::lit(rng.random::<f64>())).collect()
    };
    match constraint {
        ConvexConstraint::Ball { radius } => ball(*radius, rng),
        ConvexConstraint::Box { lower, upper } => in_box(lower, upper, rng),
        ConvexConstraint::BallIntersectBox { radius, lower, upper } => {
            if rng.random::<bool>() {
                // clamping towards the origin stays inside the ball
                project_box(&ball(*radius, rng), lower, upper)
            } else {
                let u = in_box(lower, upper, rng);
                let len = weighted_norm(&u, weights);
                if len <= *radius {
                    u
                } else {
                    let shrink = *radius * T::lit(rng.random::<f64>()) / len;
                    u.iter().map(|&v| v * shrink).collect()
                }
            }
        }
    }
}

/// Compares `J(opt)` with `J` at `samples` random feasible points.
pub fn certify<T: Real>(
    g: &[T],
    weights: &[T],
    constraint: &ConvexConstraint<T>,
    opt: &Optimum<T>,
    samples: usize,
    seed: u64,
) -> Result<Certificate<T>> {
    constraint.validate(g.len())?;
    let best = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            objective(g, &sample_feasible(constraint, weights, &mut rng))
        })
        .reduce(T::neg_infinity, T::max);
    Ok(Certificate { samples, best_sample: best, margin: opt.objective - best })
}
