//! Circle maps, coupling kernels and the mean-field diffeomorphism
//! `Φ(x) = x + δ·S(x) mod 1` with `S(x) = ∫ h(x, y) ψ(y) dy`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::densities::GridDensity;
use crate::error::{Error, Result};
use crate::scalar::{wrap_unit, Real};

pub type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
pub type KernelFn<T> = Arc<dyn Fn(T, T) -> T + Send + Sync>;

/// Phase space of a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// `[0, 1)` with periodic identification.
    Circle,
    /// `[0, 1]` with reflecting boundaries.
    Interval,
}

/// A monotone branch of a piecewise-monotone map.
///
/// `image` is given in lifted coordinates: the branch maps `[domain.0,
/// domain.1)` onto `[image.0, image.1)` as a real function, and `inverse`
/// accepts any point of that lifted interval.
#[derive(Clone)]
pub struct Branch<T> {
    pub domain: (T, T),
    pub image: (T, T),
    pub increasing: bool,
    pub inverse: ScalarFn<T>,
    /// `|d inverse / dy|`, i.e. `1 / |T'(inverse(y))|`.
    pub inverse_deriv: ScalarFn<T>,
}

impl<T: Real> Branch<T> {
    /// Inverts a point of `[0, 1)`, first shifting it by an integer into
    /// the lifted image range. Returns `None` when the branch does not
    /// cover the point.
    pub fn invert(&self, y: T) -> Option<T> {
        let (lo, hi) = self.image;
        let shift = (lo - y).ceil();
        let z = y + shift;
        if z >= lo && z <= hi {
            Some((self.inverse)(z))
        } else {
            None
        }
    }
}

/// A map of the circle (or of the interval) with the data needed by the
/// transfer-operator builders.
#[derive(Clone)]
pub struct CircleMap<T> {
    name: String,
    geometry: Geometry,
    eval: ScalarFn<T>,
    deriv: ScalarFn<T>,
    branches: Vec<Branch<T>>,
    smoothness_order: u32,
    min_slope: T,
    piecewise_linear: bool,
}

impl<T: Real> fmt::Debug for CircleMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CircleMap")
            .field("name", &self.name)
            .field("geometry", &self.geometry)
            .field("branches", &self.branches.len())
            .field("min_slope", &self.min_slope)
            .finish()
    }
}

impl<T: Real> CircleMap<T> {
    /// A map given only pointwise; transfer operators fall back to
    /// subsampled Ulam estimates.
    pub fn from_fn(
        name: impl Into<String>,
        geometry: Geometry,
        eval: ScalarFn<T>,
        deriv: ScalarFn<T>,
        min_slope: T,
    ) -> Self {
        CircleMap {
            name: name.into(),
            geometry,
            eval,
            deriv,
            branches: Vec::new(),
            smoothness_order: 0,
            min_slope,
            piecewise_linear: false,
        }
    }

    /// Attaches branch data.
    pub fn with_branches(mut self, branches: Vec<Branch<T>>, smoothness_order: u32) -> Self {
        self.branches = branches;
        self.smoothness_order = smoothness_order;
        self
    }

    /// `x ↦ k·x mod 1`.
    pub fn linear_expanding(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("expansion factor must be positive"));
        }
        let kt = T::from_count(k as usize);
        let branches = (0..k)
            .map(|b| {
                let bt = T::from_count(b as usize);
                Branch {
                    domain: (bt / kt, (bt + T::one()) / kt),
                    image: (T::zero(), T::one()),
                    increasing: true,
                    inverse: Arc::new(move |y: T| (y + bt) / kt) as ScalarFn<T>,
                    inverse_deriv: Arc::new(move |_| T::one() / kt) as ScalarFn<T>,
                }
            })
            .collect();
        let name = match k {
            1 => "identity".to_string(),
            2 => "doubling".to_string(),
            3 => "tripling".to_string(),
            _ => format!("times-{k}"),
        };
        Ok(CircleMap {
            name,
            geometry: Geometry::Circle,
            eval: Arc::new(move |x: T| wrap_unit(kt * x)),
            deriv: Arc::new(move |_| kt),
            branches,
            smoothness_order: u32::MAX,
            min_slope: kt,
            piecewise_linear: true,
        })
    }

    pub fn doubling() -> Self {
        Self::linear_expanding(2).expect("k = 2")
    }

    pub fn identity() -> Self {
        Self::linear_expanding(1).expect("k = 1")
    }

    /// Rigid rotation `x ↦ x + a mod 1`.
    pub fn rotation(a: T) -> Self {
        let a = wrap_unit(a);
        CircleMap {
            name: format!("rotation({a})"),
            geometry: Geometry::Circle,
            eval: Arc::new(move |x: T| wrap_unit(x + a)),
            deriv: Arc::new(|_| T::one()),
            branches: vec![Branch {
                domain: (T::zero(), T::one()),
                image: (a, a + T::one()),
                increasing: true,
                inverse: Arc::new(move |z: T| z - a),
                inverse_deriv: Arc::new(|_| T::one()),
            }],
            smoothness_order: u32::MAX,
            min_slope: T::one(),
            piecewise_linear: true,
        }
    }

    /// `x ↦ 2x + ε·sin(2πx) mod 1`, expanding for `|ε| < 1/(2π)`.
    pub fn perturbed_doubling(eps: T) -> Result<Self> {
        let two = T::lit(2.0);
        let tau = T::two_pi();
        let min_slope = two - tau * eps.abs();
        if min_slope <= T::one() {
            return Err(Error::config(format!(
                "perturbed doubling needs |eps| < 1/(2π) to be expanding, got {eps}"
            )));
        }
        let lift = move |x: T| two * x + eps * (tau * x).sin();
        let lift_deriv = move |x: T| two + eps * tau * (tau * x).cos();
        let branches = (0..2)
            .map(|b| {
                let lo = T::lit(b as f64 * 0.5);
                let hi = lo + T::lit(0.5);
                let inverse = move |z: T| invert_monotone(lift, lift_deriv, z, lo, hi);
                Branch {
                    domain: (lo, hi),
                    image: (T::lit(b as f64), T::lit(b as f64 + 1.0)),
                    increasing: true,
                    inverse: Arc::new(inverse) as ScalarFn<T>,
                    inverse_deriv: Arc::new(move |z: T| T::one() / lift_deriv(inverse(z)))
                        as ScalarFn<T>,
                }
            })
            .collect();
        Ok(CircleMap {
            name: format!("perturbed-doubling({eps})"),
            geometry: Geometry::Circle,
            eval: Arc::new(move |x: T| wrap_unit(lift(x))),
            deriv: Arc::new(lift_deriv),
            branches,
            smoothness_order: u32::MAX,
            min_slope,
            piecewise_linear: false,
        })
    }

    /// The tent map `x ↦ min(2x, 2 − 2x)` on `[0, 1]`.
    pub fn tent() -> Self {
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        CircleMap {
            name: "tent".into(),
            geometry: Geometry::Interval,
            eval: Arc::new(move |x: T| (two * x).min(two - two * x)),
            deriv: Arc::new(move |x: T| if x < half { two } else { -two }),
            branches: vec![
                Branch {
                    domain: (T::zero(), half),
                    image: (T::zero(), T::one()),
                    increasing: true,
                    inverse: Arc::new(move |y: T| y / two),
                    inverse_deriv: Arc::new(move |_| half),
                },
                Branch {
                    domain: (half, T::one()),
                    image: (T::zero(), T::one()),
                    increasing: false,
                    inverse: Arc::new(move |y: T| T::one() - y / two),
                    inverse_deriv: Arc::new(move |_| half),
                },
            ],
            smoothness_order: 0,
            min_slope: two,
            piecewise_linear: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        (self.eval)(x)
    }

    #[inline]
    pub fn deriv(&self, x: T) -> T {
        (self.deriv)(x)
    }

    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn has_branches(&self) -> bool {
        !self.branches.is_empty()
    }

    pub fn smoothness_order(&self) -> u32 {
        self.smoothness_order
    }

    pub fn min_slope(&self) -> T {
        self.min_slope
    }

    pub fn is_piecewise_linear(&self) -> bool {
        self.piecewise_linear
    }

    pub fn is_expanding(&self) -> bool {
        self.min_slope > T::one()
    }
}

/// Solves `f(x) = z` for increasing `f` on `[lo, hi]` by Newton steps
/// safeguarded with bisection.
fn invert_monotone<T: Real>(
    f: impl Fn(T) -> T,
    df: impl Fn(T) -> T,
    z: T,
    lo: T,
    hi: T,
) -> T {
    let (mut a, mut b) = (lo, hi);
    let mut x = (a + b) * T::lit(0.5);
    for _ in 0..200 {
        let r = f(x) - z;
        if r > T::zero() {
            b = x;
        } else {
            a = x;
        }
        let d = df(x);
        let mut next = x - r / d;
        if !(next > a && next < b) {
            next = (a + b) * T::lit(0.5);
        }
        if (next - x).abs() <= T::epsilon() * T::lit(4.0) || b - a <= T::epsilon() {
            return next;
        }
        x = next;
    }
    x
}

/// One factor of a separable coupling term: `1`, `cos(2πkx)` or `sin(2πkx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wave {
    One,
    Cos(u32),
    Sin(u32),
}

impl Wave {
    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Wave::One => T::one(),
            Wave::Cos(k) => (T::two_pi() * T::from_count(k as usize) * x).cos(),
            Wave::Sin(k) => (T::two_pi() * T::from_count(k as usize) * x).sin(),
        }
    }

    #[inline]
    pub fn deriv<T: Real>(self, x: T) -> T {
        match self {
            Wave::One => T::zero(),
            Wave::Cos(k) => {
                let w = T::two_pi() * T::from_count(k as usize);
                -w * (w * x).sin()
            }
            Wave::Sin(k) => {
                let w = T::two_pi() * T::from_count(k as usize);
                w * (w * x).cos()
            }
        }
    }

    pub fn frequency(self) -> u32 {
        match self {
            Wave::One => 0,
            Wave::Cos(k) | Wave::Sin(k) => k,
        }
    }

    /// Compact integer label: `k` for `cos(2πk·)`, `-k` for `sin(2πk·)`,
    /// `0` for the constant.
    pub fn signed_index(self) -> i64 {
        match self {
            Wave::One => 0,
            Wave::Cos(k) => k as i64,
            Wave::Sin(k) => -(k as i64),
        }
    }

    pub fn from_signed_index(i: i64) -> Self {
        match i {
            0 => Wave::One,
            k if k > 0 => Wave::Cos(k as u32),
            k => Wave::Sin((-k) as u32),
        }
    }

    /// The real trigonometric basis of degree `d`: `1, cos 1, sin 1, …`.
    pub fn basis(d: u32) -> Vec<Wave> {
        let mut v = vec![Wave::One];
        for k in 1..=d {
            v.push(Wave::Cos(k));
            v.push(Wave::Sin(k));
        }
        v
    }
}

/// `coeff · x_wave(x) · y_wave(y)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm<T> {
    pub coeff: T,
    pub x: Wave,
    pub y: Wave,
}

/// The coupling function `h(x, y)` and its `x`-derivative.
#[derive(Clone)]
pub struct CouplingKernel<T> {
    name: String,
    eval: KernelFn<T>,
    dx_eval: KernelFn<T>,
    lipschitz_bound: T,
    terms: Option<Vec<TrigTerm<T>>>,
}

impl<T: Real> fmt::Debug for CouplingKernel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CouplingKernel")
            .field("name", &self.name)
            .field("terms", &self.terms)
            .finish()
    }
}

impl<T: Real> CouplingKernel<T> {
    pub fn from_fn(name: impl Into<String>, eval: KernelFn<T>, dx_eval: KernelFn<T>, lipschitz_bound: T) -> Self {
        CouplingKernel {
            name: name.into(),
            eval,
            dx_eval,
            lipschitz_bound,
            terms: None,
        }
    }

    /// A finite trigonometric sum. Mean-field sums over such kernels reduce
    /// to a handful of moments of the measure.
    pub fn from_terms(name: impl Into<String>, terms: Vec<TrigTerm<T>>) -> Self {
        let t1 = terms.clone();
        let t2 = terms.clone();
        let lip = terms
            .iter()
            .map(|t| t.coeff.abs() * T::two_pi() * T::from_count((t.x.frequency() + t.y.frequency()) as usize))
            .sum();
        CouplingKernel {
            name: name.into(),
            eval: Arc::new(move |x, y| t1.iter().map(|t| t.coeff * t.x.eval(x) * t.y.eval(y)).sum()),
            dx_eval: Arc::new(move |x, y| t2.iter().map(|t| t.coeff * t.x.deriv(x) * t.y.eval(y)).sum()),
            lipschitz_bound: lip,
            terms: Some(terms),
        }
    }

    /// `h(x, y) = sin(2π(y − x))`, invariant under joint rotations.
    pub fn sine_difference() -> Self {
        Self::from_terms(
            "sine-difference",
            vec![
                TrigTerm { coeff: T::one(), x: Wave::Cos(1), y: Wave::Sin(1) },
                TrigTerm { coeff: -T::one(), x: Wave::Sin(1), y: Wave::Cos(1) },
            ],
        )
    }

    /// `h(x, y) = amplitude · (offset + cos(2πy)) · sin(2πx)`.
    pub fn product(offset: T, amplitude: T) -> Self {
        let mut terms = vec![TrigTerm { coeff: amplitude, x: Wave::Sin(1), y: Wave::Cos(1) }];
        if offset != T::zero() {
            terms.push(TrigTerm { coeff: amplitude * offset, x: Wave::Sin(1), y: Wave::One });
        }
        Self::from_terms(format!("product({offset},{amplitude})"), terms)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, x: T, y: T) -> T {
        (self.eval)(x, y)
    }

    #[inline]
    pub fn dx_eval(&self, x: T, y: T) -> T {
        (self.dx_eval)(x, y)
    }

    pub fn lipschitz_bound(&self) -> T {
        self.lipschitz_bound
    }

    pub fn terms(&self) -> Option<&[TrigTerm<T>]> {
        self.terms.as_deref()
    }
}

/// Samples of `S` and `S'` at the grid nodes `x_i = i/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement<T> {
    pub s: Vec<T>,
    pub ds: Vec<T>,
}

impl<T: Real> Displacement<T> {
    pub fn zeros(n: usize) -> Self {
        Displacement { s: vec![T::zero(); n], ds: vec![T::zero(); n] }
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    /// Adds `weight · ∫ h(x_i, y) ψ(y) dy` (midpoint rule in `y`).
    pub fn accumulate(&mut self, h: &CouplingKernel<T>, psi: &[T], weight: T) -> Result<()> {
        let n = self.n();
        if psi.len() != n {
            return Err(Error::config(format!(
                "density has {} cells but displacement is sampled on {} nodes",
                psi.len(),
                n
            )));
        }
        let nt = T::from_count(n);
        let node = |i: usize| T::from_count(i) / nt;
        let mid = |j: usize| (T::from_count(j) + T::lit(0.5)) / nt;
        match h.terms() {
            Some(terms) => {
                for t in terms {
                    let moment: T = crate::scalar::pairwise_mean(
                        &psi.iter().enumerate().map(|(j, &p)| t.y.eval(mid(j)) * p).collect::<Vec<_>>(),
                    );
                    let c = weight * t.coeff * moment;
                    if c == T::zero() {
                        continue;
                    }
                    for i in 0..n {
                        let x = node(i);
                        self.s[i] += c * t.x.eval(x);
                        self.ds[i] += c * t.x.deriv(x);
                    }
                }
            }
            None => {
                let mut row = vec![T::zero(); n];
                for i in 0..n {
                    let x = node(i);
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = h.eval(x, mid(j)) * psi[j];
                    }
                    self.s[i] += weight * crate::scalar::pairwise_mean(&row);
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = h.dx_eval(x, mid(j)) * psi[j];
                    }
                    self.ds[i] += weight * crate::scalar::pairwise_mean(&row);
                }
            }
        }
        Ok(())
    }
}

/// `S(x_i) = ∫ h(x_i, y) ψ(y) dy` and `S'(x_i)` at the nodes `x_i = i/n`,
/// `n` being the resolution of `psi`.
pub fn mean_field_displacement<T: Real>(
    h: &CouplingKernel<T>,
    psi: &GridDensity<T>,
    n_samples: usize,
) -> Result<Displacement<T>> {
    let mut d = Displacement::zeros(n_samples);
    d.accumulate(h, psi.values(), T::one())?;
    Ok(d)
}

/// The mean-field map `Φ(x) = x + δ·S(x) mod 1`, with `S` interpolated
/// linearly between the nodes `i/n`.
#[derive(Clone, Debug)]
pub struct MeanFieldDiffeo<T> {
    delta: T,
    s: Vec<T>,
    ds: Vec<T>,
    /// Lift at the nodes, `i/n + δ s_i`, for `i = 0..=n`.
    node_lift: Vec<T>,
}

impl<T: Real> MeanFieldDiffeo<T> {
    /// Validates the diffeomorphism conditions: `δ·max|S'| < 1`, a strictly
    /// increasing interpolated lift, and `|δS| < 1/2`.
    pub fn new(delta: T, displacement: Displacement<T>) -> Result<Self> {
        let Displacement { s, ds } = displacement;
        let n = s.len();
        if n < 2 || ds.len() != n {
            return Err(Error::config("displacement needs at least two nodes and matching derivative samples"));
        }
        if !(delta >= T::zero()) || !delta.is_finite() {
            return Err(Error::config(format!("coupling strength must be finite and >= 0, got {delta}")));
        }
        let nt = T::from_count(n);
        let max_ds = ds.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if delta * max_ds >= T::one() {
            return Err(Error::Regime {
                message: "delta * max|S'| must be < 1 for the mean-field map to be a diffeomorphism".into(),
                value: (delta * max_ds).as_f64(),
                bound: 1.0,
            });
        }
        let max_slope = (0..n).fold(T::zero(), |m, i| m.max(nt * (s[(i + 1) % n] - s[i]).abs()));
        if delta * max_slope >= T::one() {
            return Err(Error::Regime {
                message: "interpolated displacement slope too steep: the lift is not increasing".into(),
                value: (delta * max_slope).as_f64(),
                bound: 1.0,
            });
        }
        let max_s = s.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if delta * max_s >= T::lit(0.5) {
            return Err(Error::Regime {
                message: "delta * max|S| must be < 1/2 (no winding ambiguity)".into(),
                value: (delta * max_s).as_f64(),
                bound: 0.5,
            });
        }
        let node_lift = (0..=n).map(|i| T::from_count(i) / nt + delta * s[i % n]).collect();
        Ok(MeanFieldDiffeo { delta, s, ds, node_lift })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(T::zero(), Displacement::zeros(n.max(2))).expect("zero displacement is valid")
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn displacement(&self) -> &[T] {
        &self.s
    }

    pub fn displacement_deriv(&self) -> &[T] {
        &self.ds
    }

    pub fn is_identity(&self) -> bool {
        self.delta == T::zero() || self.s.iter().all(|v| *v == T::zero())
    }

    #[inline]
    fn locate(&self, x: T) -> (usize, T) {
        let n = self.n();
        let u = wrap_unit(x) * T::from_count(n);
        let k = u.floor().to_usize().unwrap_or(0).min(n - 1);
        (k, u - T::from_count(k))
    }

    #[inline]
    fn interp(samples: &[T], k: usize, t: T) -> T {
        let n = samples.len();
        samples[k] * (T::one() - t) + samples[(k + 1) % n] * t
    }

    /// Interpolated `S(x)`.
    pub fn s_at(&self, x: T) -> T {
        let (k, t) = self.locate(x);
        Self::interp(&self.s, k, t)
    }

    /// Real lift `x + δ·S(x)`.
    #[inline]
    pub fn lift(&self, x: T) -> T {
        if self.delta == T::zero() {
            return x;
        }
        x + self.delta * self.s_at(x)
    }

    pub fn apply(&self, x: T) -> T {
        wrap_unit(self.lift(x))
    }

    /// `Φ'(x) = 1 + δ·S'(x)` with `S'` interpolated from its samples.
    pub fn deriv(&self, x: T) -> T {
        let (k, t) = self.locate(x);
        T::one() + self.delta * Self::interp(&self.ds, k, t)
    }

    /// Exact derivative of the piecewise-linear lift on the segment holding `x`.
    pub fn segment_slope(&self, x: T) -> T {
        let (k, _) = self.locate(x);
        let n = self.n();
        T::one() + self.delta * T::from_count(n) * (self.s[(k + 1) % n] - self.s[k])
    }

    /// Real solution `x` of `lift(x) = z`, for any real `z`.
    pub fn invert_lifted(&self, z: T) -> Result<T> {
        if self.delta == T::zero() {
            return Ok(z);
        }
        let n = self.n();
        let l0 = self.node_lift[0];
        let turns = (z - l0).floor();
        let z0 = z - turns;
        // Bracket: node_lift[k] <= z0 < node_lift[k + 1].
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.node_lift[mid] <= z0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let nt = T::from_count(n);
        let (a, b) = (self.node_lift[lo], self.node_lift[lo + 1]);
        let width = T::one() / nt;
        let mut x = T::from_count(lo) / nt + (z0 - a) / (b - a) * width;
        // Newton refinement on the lifted map against rounding in the bracket.
        for _ in 0..3 {
            let r = x + self.delta * Self::interp(&self.s, lo, (x * nt - T::from_count(lo)).max(T::zero()).min(T::one())) - z0;
            let slope = (b - a) * nt;
            let step = r / slope;
            x -= step;
            if step.abs() <= T::epsilon() {
                break;
            }
        }
        let residual = (self.lift(x) - z0).abs();
        let tol = crate::scalar::scaled_tol::<T>(1e-12, 64.0);
        if residual > tol {
            return Err(Error::Numerical {
                message: "mean-field map inversion did not converge".into(),
                residual: residual.as_f64(),
            });
        }
        Ok(x + turns)
    }

    /// Point of `[0, 1)` mapped onto `y`.
    pub fn invert(&self, y: T) -> Result<T> {
        Ok(wrap_unit(self.invert_lifted(y)?))
    }
}
