use super::renormalize;
use crate::densities::GridDensity;
use crate::error::{Error, Result};
use crate::scalar::{pairwise_mean, Real};

/// Target bound on the periodization tail `Σ_{|m|>K} ρ(x + m)`.
const TAIL_TARGET: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Gaussian,
    TruncatedGaussian,
    Uniform,
    Triangular,
    Delta,
}

/// Even probability density `ρ` on the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseProfile<T> {
    shape: Shape,
    /// `σ` for Gaussians, the half-width otherwise.
    width: T,
    /// Multiplier restoring unit mass after truncation.
    scale: T,
}

impl<T: Real> NoiseProfile<T> {
    pub fn gaussian(sigma: T) -> Result<Self> {
        check_width(sigma, "sigma")?;
        Ok(NoiseProfile { shape: Shape::Gaussian, width: sigma, scale: T::one() })
    }

    /// Gaussian restricted to `[−1, 1]` and renormalized.
    pub fn truncated_gaussian(sigma: T) -> Result<Self> {
        check_width(sigma, "sigma")?;
        let mut p = NoiseProfile { shape: Shape::TruncatedGaussian, width: sigma, scale: T::one() };
        // Simpson rule on a fine grid; the integrand is smooth on [-1, 1].
        let m = 20_000usize;
        let h = T::lit(2.0) / T::from_count(m);
        let mut acc = T::zero();
        for k in 0..=m {
            let z = -T::one() + h * T::from_count(k);
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += T::lit(w) * p.density(z);
        }
        p.scale = T::one() / (acc * h / T::lit(3.0));
        Ok(p)
    }

    /// `1/(2w)` on `[−w, w]`.
    pub fn uniform(half_width: T) -> Result<Self> {
        check_width(half_width, "half-width")?;
        Ok(NoiseProfile { shape: Shape::Uniform, width: half_width, scale: T::one() })
    }

    /// `(w − |z|)/w²` on `[−w, w]`.
    pub fn triangular(half_width: T) -> Result<Self> {
        check_width(half_width, "half-width")?;
        Ok(NoiseProfile { shape: Shape::Triangular, width: half_width, scale: T::one() })
    }

    /// Point mass at zero: no noise.
    pub fn delta() -> Self {
        NoiseProfile { shape: Shape::Delta, width: T::zero(), scale: T::one() }
    }

    pub fn name(&self) -> String {
        match self.shape {
            Shape::Gaussian => format!("gaussian(sigma={})", self.width),
            Shape::TruncatedGaussian => format!("truncated-gaussian(sigma={})", self.width),
            Shape::Uniform => format!("uniform(half-width={})", self.width),
            Shape::Triangular => format!("triangular(half-width={})", self.width),
            Shape::Delta => "delta".into(),
        }
    }

    pub fn is_delta(&self) -> bool {
        self.shape == Shape::Delta
    }

    /// `σ` for Gaussian shapes, the half-width otherwise.
    pub fn width(&self) -> T {
        self.width
    }

    /// Half-width of the support; `None` for unbounded support.
    pub fn support(&self) -> Option<T> {
        match self.shape {
            Shape::Gaussian => None,
            Shape::TruncatedGaussian => Some(T::one()),
            Shape::Uniform | Shape::Triangular => Some(self.width),
            Shape::Delta => Some(T::zero()),
        }
    }

    /// `ρ(z)`. The delta profile evaluates to zero everywhere.
    pub fn density(&self, z: T) -> T {
        let w = self.width;
        match self.shape {
            Shape::Gaussian => gauss(z, w),
            Shape::TruncatedGaussian => {
                if z.abs() <= T::one() {
                    self.scale * gauss(z, w)
                } else {
                    T::zero()
                }
            }
            Shape::Uniform => {
                if z.abs() <= w {
                    T::one() / (w + w)
                } else {
                    T::zero()
                }
            }
            Shape::Triangular => ((w - z.abs()) / (w * w)).max(T::zero()),
            Shape::Delta => T::zero(),
        }
    }

    /// `ρ'(z)`, when the profile is (piecewise) differentiable.
    pub fn derivative(&self, z: T) -> Option<T> {
        let w = self.width;
        match self.shape {
            Shape::Gaussian => Some(-z / (w * w) * gauss(z, w)),
            Shape::TruncatedGaussian => Some(if z.abs() <= T::one() {
                -z / (w * w) * self.scale * gauss(z, w)
            } else {
                T::zero()
            }),
            Shape::Triangular => Some(if z.abs() < w && z != T::zero() {
                -z.signum() / (w * w)
            } else {
                T::zero()
            }),
            Shape::Uniform | Shape::Delta => None,
        }
    }

    pub fn has_derivative(&self) -> bool {
        self.derivative(T::zero()).is_some()
    }

    /// `sup ρ`; infinite for the delta profile.
    pub fn sup(&self) -> T {
        match self.shape {
            Shape::Delta => T::infinity(),
            _ => self.density(T::zero()),
        }
    }

    /// Cumulative distribution function, by closed form or quadrature.
    pub fn cdf(&self, z: T) -> T {
        let w = self.width;
        let half = T::lit(0.5);
        match self.shape {
            Shape::Uniform => ((z + w) / (w + w)).max(T::zero()).min(T::one()),
            Shape::Triangular => {
                if z <= -w {
                    T::zero()
                } else if z >= w {
                    T::one()
                } else if z <= T::zero() {
                    half * ((z + w) / w).powi(2)
                } else {
                    T::one() - half * ((w - z) / w).powi(2)
                }
            }
            Shape::Delta => {
                if z >= T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Shape::Gaussian | Shape::TruncatedGaussian => {
                let (lo, hi) = match self.shape {
                    Shape::Gaussian => (-T::lit(40.0) * w, T::lit(40.0) * w),
                    _ => (-T::one(), T::one()),
                };
                if z <= lo {
                    return T::zero();
                }
                if z >= hi {
                    return T::one();
                }
                let m = 4000usize;
                let h = (z - lo) / T::from_count(m);
                let mut acc = T::zero();
                for k in 0..=m {
                    let x = lo + h * T::from_count(k);
                    let c = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                    acc += T::lit(c) * self.density(x);
                }
                (acc * h / T::lit(3.0)).min(T::one())
            }
        }
    }
}

fn check_width<T: Real>(w: T, what: &str) -> Result<()> {
    if !(w > T::zero()) || !w.is_finite() {
        return Err(Error::config(format!("noise {what} must be positive, got {w}")));
    }
    Ok(())
}

#[inline]
fn gauss<T: Real>(z: T, sigma: T) -> T {
    let u = z / sigma;
    (-(u * u) * T::lit(0.5)).exp() / (sigma * (T::two_pi()).sqrt())
}

/// Periodized kernel `ρ̃(x) = Σ_m ρ(x + m)` sampled at the grid differences
/// `k/n` and rescaled so that `(1/n) Σ_k ρ̃_k = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseKernel<T> {
    profile: NoiseProfile<T>,
    grid_samples: Vec<T>,
    truncation_terms: usize,
    tail_bound: T,
    normalization_defect: T,
}

impl<T: Real> NoiseKernel<T> {
    pub fn periodized(profile: NoiseProfile<T>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("noise kernel needs at least two cells"));
        }
        let nt = T::from_count(n);
        if profile.is_delta() {
            let mut s = vec![T::zero(); n];
            s[0] = nt;
            return Ok(NoiseKernel {
                profile,
                grid_samples: s,
                truncation_terms: 0,
                tail_bound: T::zero(),
                normalization_defect: T::zero(),
            });
        }
        let (k, tail) = truncation(&profile);
        let samples: Vec<T> = (0..n)
            .map(|i| {
                // symmetric by construction
                let d = T::from_count(i.min(n - i)) / nt;
                let terms: Vec<T> = (-(k as i64)..=(k as i64))
                    .map(|m| profile.density(d + T::lit(m as f64)))
                    .collect();
                crate::scalar::pairwise_sum(&terms)
            })
            .collect();
        let mass = pairwise_mean(&samples);
        if !(mass > T::zero()) {
            return Err(Error::config(format!(
                "noise profile {} is not resolved by {n} cells",
                profile.name()
            )));
        }
        let defect = (mass - T::one()).abs();
        if defect > T::lit(1e-6) {
            log::debug!("periodized kernel {} has grid mass {mass}; renormalizing", profile.name());
        }
        Ok(NoiseKernel {
            profile,
            grid_samples: samples.into_iter().map(|s| s / mass).collect(),
            truncation_terms: k,
            tail_bound: tail,
            normalization_defect: defect,
        })
    }

    /// Wrapped Gaussian with standard deviation `sigma`.
    pub fn wrapped_gaussian(sigma: T, n: usize) -> Result<Self> {
        Self::periodized(NoiseProfile::gaussian(sigma)?, n)
    }

    /// All mass at offset zero: convolution is the identity.
    pub fn discrete_delta(n: usize) -> Result<Self> {
        Self::periodized(NoiseProfile::delta(), n)
    }

    pub fn profile(&self) -> &NoiseProfile<T> {
        &self.profile
    }

    pub fn n(&self) -> usize {
        self.grid_samples.len()
    }

    /// `ρ̃(k/n)` for `k = 0..n`.
    pub fn grid_samples(&self) -> &[T] {
        &self.grid_samples
    }

    pub fn truncation_terms(&self) -> usize {
        self.truncation_terms
    }

    pub fn tail_bound(&self) -> T {
        self.tail_bound
    }

    pub fn normalization_defect(&self) -> T {
        self.normalization_defect
    }

    pub fn sup(&self) -> T {
        self.grid_samples.iter().fold(T::zero(), |m, v| m.max(*v))
    }

    pub fn is_delta(&self) -> bool {
        self.profile.is_delta()
    }
}

/// Smallest `K` whose periodization tail is below [`TAIL_TARGET`] on
/// `[−1/2, 1/2]`, with the certified bound.
fn truncation<T: Real>(p: &NoiseProfile<T>) -> (usize, T) {
    match p.support() {
        Some(w) => ((w + T::lit(0.5)).ceil().to_usize().unwrap_or(1).max(1), T::zero()),
        None => {
            let sigma = p.width;
            let mut k = 1usize;
            loop {
                // Terms decay at least geometrically with ratio exp(-a/σ²) beyond a = K + 1/2.
                let a = T::from_count(k) + T::lit(0.5);
                let r = (-a / (sigma * sigma)).exp();
                let bound = T::lit(2.0) * p.density(a) / (T::one() - r);
                if bound < T::lit(TAIL_TARGET) || k > 10_000 {
                    return (k, bound);
                }
                k += 1;
            }
        }
    }
}

/// Circular convolution `(ρ ∗ f)_i = (1/n) Σ_j ρ̃_{i−j} f_j`.
pub fn convolve<T: Real>(kernel: &NoiseKernel<T>, f: &[T]) -> Result<Vec<T>> {
    let n = f.len();
    if kernel.n() != n {
        return Err(Error::config(format!(
            "noise kernel has {} cells, function {n}",
            kernel.n()
        )));
    }
    if kernel.is_delta() {
        return Ok(f.to_vec());
    }
    let rho = kernel.grid_samples();
    let nt = T::from_count(n);
    Ok((0..n)
        .map(|i| {
            let mut acc = T::zero();
            for (j, &fj) in f.iter().enumerate() {
                acc += rho[(i + n - j) % n] * fj;
            }
            acc / nt
        })
        .collect())
}

pub fn convolve_density<T: Real>(kernel: &NoiseKernel<T>, f: &GridDensity<T>) -> Result<GridDensity<T>> {
    renormalize(convolve(kernel, f.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{integral, norm, ulam_project, NormKind};
    use std::f64::consts::{PI, TAU};

    #[test]
    fn wrapped_gaussian_is_a_symmetric_probability_kernel() {
        for sigma in [0.02, 0.1, 0.5, 2.0] {
            let k = NoiseKernel::<f64>::wrapped_gaussian(sigma, 256).unwrap();
            let s = k.grid_samples();
            assert!(s.iter().all(|v| *v >= 0.0));
            assert!((integral(s) - 1.0).abs() < 1e-8);
            for i in 1..256 {
                assert!((s[i] - s[256 - i]).abs() < 1e-10);
            }
            assert!(k.tail_bound() < 1e-14);
        }
    }

    #[test]
    fn convolution_examples() {
        let n = 1024;
        let k = NoiseKernel::<f64>::wrapped_gaussian(0.1, n).unwrap();
        let u = vec![1.0; n];
        assert!(convolve(&k, &u).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let d = NoiseKernel::<f64>::discrete_delta(n).unwrap();
        let f: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.1).sin()).collect();
        assert_eq!(convolve(&d, &f).unwrap(), f);
        // the delta sample set also acts as the identity through the generic formula
        let s = d.grid_samples();
        assert_eq!(s[0], n as f64);

        let f = ulam_project(|x: f64| 1.0 + (TAU * x).cos(), n, 32);
        let out = convolve(&k, &f).unwrap();
        let m = (-2.0 * PI * PI * 0.01_f64).exp();
        let expect = ulam_project(|x: f64| 1.0 + m * (TAU * x).cos(), n, 32);
        let err: Vec<f64> = out.iter().zip(&expect).map(|(a, b)| a - b).collect();
        assert!(norm(&err, NormKind::Sup).unwrap() <= 1e-6);
    }

    #[test]
    fn regularization_inequality_holds_exactly() {
        let n = 128;
        let k = NoiseKernel::<f64>::wrapped_gaussian(0.05, n).unwrap();
        let mut state = 99u64;
        for _ in 0..50 {
            let f: Vec<f64> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 10.0
                })
                .collect();
            let out = convolve(&k, &f).unwrap();
            let lhs = norm(&out, NormKind::Sup).unwrap();
            let rhs = k.sup() * norm(&f, NormKind::L1).unwrap();
            assert!(lhs <= rhs * (1.0 + 1e-12));
        }
    }

    #[test]
    fn profiles_integrate_to_one_and_derivatives_match() {
        let profiles = [
            NoiseProfile::<f64>::truncated_gaussian(0.05).unwrap(),
            NoiseProfile::gaussian(0.2).unwrap(),
            NoiseProfile::uniform(1.0).unwrap(),
            NoiseProfile::triangular(0.1).unwrap(),
        ];
        for p in &profiles {
            assert!((p.cdf(5.0) - 1.0).abs() < 1e-9, "{}", p.name());
            assert!((p.cdf(0.0) - 0.5).abs() < 1e-9, "{}", p.name());
            if p.has_derivative() {
                for z in [-0.07, -0.01, 0.013, 0.04] {
                    let h = 1e-6;
                    let fd = (p.density(z + h) - p.density(z - h)) / (2.0 * h);
                    assert!((fd - p.derivative(z).unwrap()).abs() < 1e-4 * (1.0 + fd.abs()));
                }
            }
        }
        assert!(NoiseProfile::<f64>::uniform(1.0).unwrap().derivative(0.0).is_none());
        assert!(NoiseProfile::<f64>::gaussian(-1.0).is_err());
    }
}
