//! Empirical contraction machinery: Lasota–Yorke fits, decay of zero-mean
//! functions, the 2×2 contraction matrix and balanced norms.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::densities::{cell_midpoint, fmt_float, norm, GridDensity, NormKind, SignedGridFunction};
use crate::error::{Error, Result};
use crate::scalar::{pairwise_mean, Real};
use crate::self_consistent::SelfConsistentModel;

/// Minimum number of test functions for a Lasota–Yorke fit.
pub const MIN_LY_SAMPLES: usize = 50;

/// Multiplicative safety margin applied to fitted coefficients.
pub const LY_INFLATION: f64 = 1.05;

/// Fitted one-step inequality `‖Lf‖_s ≤ λ₁‖f‖_s + B‖f‖_w`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LYCoefficients<T> {
    pub lambda1: T,
    pub b: T,
    pub strong_norm: NormKind,
    pub weak_norm: NormKind,
    /// Number of test functions used; zero for user-supplied constants.
    pub samples: usize,
    /// Samples violating the inequality with the reported coefficients.
    pub violations: usize,
    /// Per-sample slack `λ₁‖f‖_s + B‖f‖_w − ‖Lf‖_s`.
    pub slack: Vec<T>,
    /// `false` when no fit with `λ₁ < 1` exists.
    pub regime_ok: bool,
}

impl<T: Real> LYCoefficients<T> {
    /// Coefficients known analytically rather than fitted.
    pub fn given(lambda1: T, b: T, strong_norm: NormKind, weak_norm: NormKind) -> Self {
        LYCoefficients {
            lambda1,
            b,
            strong_norm,
            weak_norm,
            samples: 0,
            violations: 0,
            slack: Vec::new(),
            regime_ok: lambda1 < T::one() && lambda1 >= T::zero() && b >= T::zero(),
        }
    }

    /// Sum of squared violations; zero after a successful fit.
    pub fn objective(&self) -> T {
        self.slack.iter().map(|s| s.min(T::zero()).powi(2)).sum()
    }
}

/// Random positive smooth density: a von Mises bump or a short random
/// trigonometric sum around 1.
fn random_test_density<T: Real>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let tau = std::f64::consts::TAU;
    let xs: Vec<f64> = (0..n).map(|i| cell_midpoint::<f64>(i, n)).collect();
    let mut f: Vec<f64> = if rng.random::<f64>() < 0.25 {
        let kappa = rng.random_range(5.0..200.0);
        let x0: f64 = rng.random();
        xs.iter().map(|x| (kappa * ((tau * (x - x0)).cos() - 1.0)).exp()).collect()
    } else {
        let terms = rng.random_range(1..4usize);
        let total = rng.random_range(0.2..0.95);
        let raw: Vec<f64> = (0..terms).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        let mut f = vec![1.0; n];
        for w in raw {
            let k = rng.random_range(1..17u32) as f64;
            let phase = rng.random_range(0.0..tau);
            for (v, x) in f.iter_mut().zip(&xs) {
                *v += total * w / s * (tau * k * x + phase).cos();
            }
        }
        f
    };
    let mean = f.iter().sum::<f64>() / n as f64;
    f.iter_mut().for_each(|v| *v /= mean);
    f.into_iter().map(T::lit).collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Upper convex hull of `(t, u)` points, left to right.
fn upper_hull<T: Real>(mut pts: Vec<(T, T)>) -> Vec<(T, T)> {
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.partial_cmp(&b.1).expect("finite")));
    let mut hull: Vec<(T, T)> = Vec::new();
    for p in pts {
        while let Some(&last) = hull.last() {
            if last.0 == p.0 {
                hull.pop();
                continue;
            }
            if hull.len() < 2 {
                break;
            }
            let (x1, y1) = hull[hull.len() - 2];
            let (x2, y2) = last;
            if (x2 - x1) * (p.1 - y1) - (y2 - y1) * (p.0 - x1) >= T::zero() {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Fits `(λ₁, B)` for the operator `op` over `samples` random test
/// densities on an `n`-cell grid.
///
/// Writing `t = ‖f‖_w/‖f‖_s` and `u = ‖Lf‖_s/‖f‖_s`, every admissible pair
/// is a line `u = λ₁ + B t` above all points. The returned pair is the edge
/// of the upper hull leaving the smallest `t`, which minimizes `λ₁`, then
/// inflated by [`LY_INFLATION`].
pub fn fit_ly_coefficients<T: Real>(
    op: impl Fn(&[T]) -> Vec<T> + Sync,
    n: usize,
    strong: NormKind,
    weak: NormKind,
    samples: usize,
    seed: u64,
) -> Result<LYCoefficients<T>> {
    if samples < MIN_LY_SAMPLES {
        return Err(Error::config(format!("need at least {MIN_LY_SAMPLES} test functions, got {samples}")));
    }
    let rows: Vec<(T, T, T)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let f = random_test_density::<T>(n, &mut sample_rng(seed, i));
            let lf = op(&f);
            Ok((norm(&lf, strong)?, norm(&f, strong)?, norm(&f, weak)?))
        })
        .collect::<Result<_>>()?;
    let pts: Vec<(T, T)> = rows.iter().map(|&(s, a, w)| (w / a, s / a)).collect();
    let hull = upper_hull(pts.clone());
    let (mut lambda1, mut b) = if hull.len() < 2 {
        (hull[0].1, T::zero())
    } else {
        let ((x1, y1), (x2, y2)) = (hull[0], hull[1]);
        let slope = (y2 - y1) / (x2 - x1);
        (y1 - slope * x1, slope)
    };
    if lambda1 < T::zero() {
        lambda1 = T::zero();
        b = pts.iter().fold(T::zero(), |m, &(t, u)| m.max(u / t));
    }
    if b < T::zero() {
        b = T::zero();
        lambda1 = pts.iter().fold(T::zero(), |m, &(_, u)| m.max(u));
    }
    let regime_ok = lambda1 < T::one();
    let inflation = T::lit(LY_INFLATION);
    lambda1 = if regime_ok { (lambda1 * inflation).min(T::one() - T::epsilon()) } else { lambda1 };
    b *= inflation;
    let slack: Vec<T> = rows.iter().map(|&(s, a, w)| lambda1 * a + b * w - s).collect();
    let tol = T::lit(1e-9);
    let violations = rows.iter().zip(&slack).filter(|(r, sl)| **sl < -tol * r.0.max(T::one())).count();
    if !regime_ok {
        log::warn!(
            "no Lasota-Yorke fit with lambda1 < 1 for ({}, {}): best lambda1 = {lambda1}",
            strong.label(),
            weak.label()
        );
    }
    Ok(LYCoefficients { lambda1, b, strong_norm: strong, weak_norm: weak, samples, violations, slack, regime_ok })
}

/// Decay coefficients and the fitted exponential rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayReport<T> {
    /// `a_k` for `k = 1..=N`.
    pub coefficients: Vec<T>,
    /// Least-squares rate `γ` of `a_k ≈ C e^{−γk}`; `None` when fewer than
    /// two coefficients sit above round-off.
    pub rate: Option<T>,
    pub prefactor: Option<T>,
    /// `false` when the fitted rate is not positive.
    pub decaying: bool,
}

impl<T: Real> DecayReport<T> {
    fn from_coefficients(coefficients: Vec<T>, floor: T) -> Self {
        let live: Vec<(usize, T)> = coefficients
            .iter()
            .copied()
            .enumerate()
            .take_while(|(_, a)| *a > floor)
            .map(|(k, a)| (k + 1, a))
            .collect();
        let tail = if live.len() >= 4 { &live[live.len() / 2..] } else { &live[..] };
        let (rate, prefactor) = if tail.len() >= 2 {
            let m = T::from_count(tail.len());
            let xs: Vec<T> = tail.iter().map(|(k, _)| T::from_count(*k)).collect();
            let ys: Vec<T> = tail.iter().map(|(_, a)| a.ln()).collect();
            let xm = xs.iter().copied().sum::<T>() / m;
            let ym = ys.iter().copied().sum::<T>() / m;
            let sxy: T = xs.iter().zip(&ys).map(|(&x, &y)| (x - xm) * (y - ym)).sum();
            let sxx: T = xs.iter().map(|&x| (x - xm) * (x - xm)).sum();
            let slope = sxy / sxx;
            (Some(-slope), Some((ym - slope * xm).exp()))
        } else {
            (None, None)
        };
        let annihilated = live.len() < coefficients.len();
        let decaying = annihilated || rate.is_some_and(|g| g > T::lit(1e-6));
        if !decaying {
            log::warn!("no exponential decay detected (rate {rate:?})");
        }
        DecayReport { coefficients, rate, prefactor, decaying }
    }

    /// CSV with columns `step, coefficient`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "coefficient"])?;
        for (k, a) in self.coefficients.iter().enumerate() {
            wr.write_record([(k + 1).to_string(), fmt_float(*a)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn roundoff_floor<T: Real>(scale: T) -> T {
    T::epsilon() * T::lit(1e3) * scale.max(T::min_positive_value())
}

/// `a_k = ‖L^k g‖_w / ‖g‖_s` for `k = 1..=steps` and the exponential rate
/// fitted on the tail half of the coefficients above round-off.
pub fn convergence_to_equilibrium<T: Real>(
    op: impl Fn(&[T]) -> Vec<T>,
    g: &SignedGridFunction<T>,
    steps: usize,
    strong: NormKind,
    weak: NormKind,
) -> Result<DecayReport<T>> {
    if !g.is_zero_mean() && SignedGridFunction::zero_mean(g.values().to_vec()).is_err() {
        return Err(Error::domain("convergence to equilibrium needs a zero-mean function"));
    }
    let gs = g.norm(strong)?;
    if gs == T::zero() {
        return Err(Error::domain("test function is identically zero"));
    }
    let mut v = g.values().to_vec();
    let mut a = Vec::with_capacity(steps);
    for _ in 0..steps {
        v = op(&v);
        a.push(norm(&v, weak)? / gs);
    }
    let scale = norm(g.values(), weak)? / gs;
    Ok(DecayReport::from_coefficients(a, roundoff_floor(scale)))
}

/// `‖ℒ_δ^k(ν) − f*‖` for `k = 1..=steps` along the nonlinear iteration,
/// normalized by `‖ν − f*‖`.
pub fn self_consistent_decay<T: Real>(
    model: &SelfConsistentModel<T>,
    nu: &GridDensity<T>,
    fixed: &GridDensity<T>,
    steps: usize,
    kind: NormKind,
) -> Result<DecayReport<T>> {
    let d0 = nu.difference(fixed)?.norm(kind)?;
    if d0 == T::zero() {
        return Err(Error::domain("initial density already equals the fixed point"));
    }
    let mut f = nu.clone();
    let mut a = Vec::with_capacity(steps);
    for _ in 0..steps {
        f = model.apply_single(&f)?;
        a.push(f.difference(fixed)?.norm(kind)? / d0);
    }
    // the solver tolerance bounds how close the iterates can get to `fixed`
    Ok(DecayReport::from_coefficients(a, T::lit(1e-11).max(roundoff_floor(T::one())) / d0.min(T::one())))
}

/// Inputs of the 2×2 contraction matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionParams<T> {
    pub lambda1: T,
    pub b: T,
    /// Sensitivity of the operator to the frozen measure.
    pub k: T,
    /// Constant relating strong and weak norms of measure differences.
    pub q: T,
    /// Bound on the sequential drift; treated as a fit parameter.
    pub c: T,
    /// Decay coefficient `a_{n₁}` of the uncoupled operator.
    pub a_n1: T,
    pub n1: u32,
}

impl<T: Real> ContractionParams<T> {
    pub fn from_ly(ly: &LYCoefficients<T>, k: T, q: T, c: T, a_n1: T, n1: u32) -> Self {
        ContractionParams { lambda1: ly.lambda1, b: ly.b, k, q, c, a_n1, n1 }
    }

    /// `M = [[λ₁^{n₁}, B/(1−λ₁)], [δQKC + a_{n₁}, δQK n₁ B/(1−λ₁)]]`.
    pub fn matrix(&self, delta: T) -> [[T; 2]; 2] {
        let geo = self.b / (T::one() - self.lambda1);
        let dqk = delta * self.q * self.k;
        [
            [self.lambda1.powi(self.n1 as i32), geo],
            [dqk * self.c + self.a_n1, dqk * T::from_count(self.n1 as usize) * geo],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport<T> {
    pub n1: u32,
    pub delta: T,
    pub matrix_m: [[T; 2]; 2],
    /// Largest eigenvalue of `Mᵀ`.
    pub rho: T,
    /// Left Perron vector `(a, b)` of `M`, normalized to `a + b = 1`.
    pub eigvec_ab: (T, T),
    pub regime_ok: bool,
}

/// Largest eigenvalue of a 2×2 matrix with nonnegative entries and its
/// left eigenvector normalized to unit sum.
fn perron_2x2<T: Real>(m: &[[T; 2]; 2]) -> (T, (T, T)) {
    let two = T::lit(2.0);
    let half_gap = (m[0][0] - m[1][1]) / two;
    let rho = (m[0][0] + m[1][1]) / two + (half_gap * half_gap + m[0][1] * m[1][0]).sqrt();
    // Mᵀ (a, b) = ρ (a, b): (m00 − ρ) a + m10 b = 0, m01 a + (m11 − ρ) b = 0
    let (mut a, mut b) = (m[1][0], rho - m[0][0]);
    if a + b <= T::epsilon() * (rho.abs() + T::one()) {
        a = rho - m[1][1];
        b = m[0][1];
    }
    let s = a + b;
    if s > T::zero() {
        (rho, (a / s, b / s))
    } else {
        (rho, (T::one(), T::zero()))
    }
}

/// Assembles the contraction matrix at coupling `delta` and its Perron data.
pub fn contraction_matrix<T: Real>(p: &ContractionParams<T>, delta: T) -> Result<ContractionReport<T>> {
    if !(p.lambda1 < T::one()) || p.lambda1 < T::zero() {
        return Err(Error::Regime {
            message: "contraction matrix needs 0 <= lambda1 < 1".into(),
            value: p.lambda1.as_f64(),
            bound: 1.0,
        });
    }
    if [p.b, p.k, p.q, p.c, p.a_n1, delta].iter().any(|v| *v < T::zero() || !v.is_finite()) {
        return Err(Error::config("contraction constants must be finite and nonnegative"));
    }
    let m = p.matrix(delta);
    let (rho, ab) = perron_2x2(&m);
    Ok(ContractionReport {
        n1: p.n1,
        delta,
        matrix_m: m,
        rho,
        eigvec_ab: ab,
        regime_ok: rho < T::one() && ab.0 >= T::zero() && ab.1 >= T::zero(),
    })
}

/// Smallest `δ ∈ [0, delta_max]` with `ρ(δ) = 1`, located by scanning
/// `grid` points and bisecting the first bracket. `None` if `ρ < 1` on the
/// whole range; `Some(0)` if already `ρ(0) ≥ 1`.
pub fn critical_delta<T: Real>(p: &ContractionParams<T>, delta_max: T, grid: usize) -> Result<Option<T>> {
    let rho = |d: T| contraction_matrix(p, d).map(|r| r.rho);
    if rho(T::zero())? >= T::one() {
        return Ok(Some(T::zero()));
    }
    let grid = grid.max(1);
    let mut lo = T::zero();
    for i in 1..=grid {
        let hi = delta_max * T::from_count(i) / T::from_count(grid);
        if rho(hi)? >= T::one() {
            let mut hi = hi;
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if mid <= lo || mid >= hi {
                    break;
                }
                if rho(mid)? >= T::one() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(hi));
        }
        lo = hi;
    }
    Ok(None)
}

/// `a‖g‖_s + b‖g‖_w`.
pub fn balanced_norm<T: Real>(g: &[T], a: T, b: T, strong: NormKind, weak: NormKind) -> Result<T> {
    if a < T::zero() || b < T::zero() {
        return Err(Error::domain("balanced-norm weights must be nonnegative"));
    }
    let s = if a == T::zero() { T::zero() } else { a * norm(g, strong)? };
    let w = if b == T::zero() { T::zero() } else { b * norm(g, weak)? };
    Ok(s + w)
}

/// Empirical sensitivity constant
/// `max ‖(L_{δ,μ₁} − L_{δ,μ₂}) f‖_w / (δ ‖μ₁ − μ₂‖_w ‖f‖_s)` over random
/// `μ₁, μ₂, f`. The result is a measured lower bound, not a certificate.
pub fn fit_coupling_sensitivity<T: Real>(
    model: &SelfConsistentModel<T>,
    strong: NormKind,
    weak: NormKind,
    samples: usize,
    seed: u64,
) -> Result<T> {
    if model.delta() <= T::zero() {
        return Err(Error::config("sensitivity fit needs delta > 0"));
    }
    if model.populations() != 1 {
        return Err(Error::config("sensitivity fit supports single-population models"));
    }
    let n = model.n();
    let quotients: Vec<T> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mu1 = GridDensity::normalized(random_test_density::<T>(n, &mut rng))?;
            let mu2 = GridDensity::normalized(random_test_density::<T>(n, &mut rng))?;
            let f = random_test_density::<T>(n, &mut rng);
            let l1 = model.linear_operators(std::slice::from_ref(&mu1))?.remove(0);
            let l2 = model.linear_operators(std::slice::from_ref(&mu2))?.remove(0);
            let diff: Vec<T> = l1.apply(&f).iter().zip(l2.apply(&f)).map(|(a, b)| *a - b).collect();
            let dmu = mu1.difference(&mu2)?.norm(weak)?;
            let denom = model.delta() * dmu * norm(&f, strong)?;
            Ok(if denom > T::zero() { norm(&diff, weak)? / denom } else { T::zero() })
        })
        .collect::<Result<_>>()?;
    Ok(quotients.into_iter().fold(T::zero(), T::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequentialLyReport<T> {
    pub trials: usize,
    pub steps: usize,
    /// Largest `‖L(k)f‖_s / (λ₁^k ‖f‖_s + B/(1−λ₁) ‖f‖_w)` observed.
    pub worst_ratio: T,
    pub violations: usize,
}

/// Checks `‖L(k)f‖_s ≤ λ₁^k‖f‖_s + B/(1−λ₁)‖f‖_w` for compositions
/// `L(k) = L_{δ,μ_k} ∘ … ∘ L_{δ,μ_1}` of frozen operators at random `μ_i`.
pub fn sequential_ly_check<T: Real>(
    model: &SelfConsistentModel<T>,
    ly: &LYCoefficients<T>,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<SequentialLyReport<T>> {
    if !ly.regime_ok {
        return Err(Error::Regime {
            message: "sequential check needs lambda1 < 1".into(),
            value: ly.lambda1.as_f64(),
            bound: 1.0,
        });
    }
    let n = model.n();
    let geo = ly.b / (T::one() - ly.lambda1);
    let worst: Vec<T> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let f0 = random_test_density::<T>(n, &mut rng);
            let fs = norm(&f0, ly.strong_norm)?;
            let fw = norm(&f0, ly.weak_norm)?;
            let mut f = f0;
            let mut worst = T::zero();
            for k in 1..=steps {
                let mu = GridDensity::normalized(random_test_density::<T>(n, &mut rng))?;
                f = model.linear_operators(std::slice::from_ref(&mu))?[0].apply(&f);
                let bound = ly.lambda1.powi(k as i32) * fs + geo * fw;
                worst = worst.max(norm(&f, ly.strong_norm)? / bound);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let tol = T::one() + T::lit(1e-9);
    Ok(SequentialLyReport {
        trials,
        steps,
        violations: worst.iter().filter(|w| **w > tol).count(),
        worst_ratio: worst.into_iter().fold(T::zero(), T::max),
    })
}

/// Mean of a decay-rate estimate over a list of reports, ignoring `None`.
pub fn mean_rate<T: Real>(reports: &[DecayReport<T>]) -> Option<T> {
    let rates: Vec<T> = reports.iter().filter_map(|r| r.rate).collect();
    (!rates.is_empty()).then(|| pairwise_mean(&rates))
}
