//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All operators, densities and solvers are generic over [`Real`], which is
//! implemented for `f32` and `f64`. Tolerances quoted in the documentation
//! refer to `f64`; `f32` instantiations are useful for quick experiments
//! and mixed-precision checks but cannot reach the tight residuals.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: f32 or f64.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `2π`
    #[inline]
    fn two_pi() -> Self {
        Self::TAU()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Pairwise (tree) summation. The summation order depends only on the
/// length of the input, which makes reductions reproducible regardless of
/// how the input was produced.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean with pairwise summation; zero for empty input.
pub fn pairwise_mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    pairwise_sum(xs) / T::from_count(xs.len())
}

/// Reduces `x` to `[0, 1)`.
#[inline]
pub fn wrap_unit<T: Real>(x: T) -> T {
    let y = x - x.floor();
    // `x - floor(x)` can round up to exactly 1 for tiny negative inputs.
    if y >= T::one() {
        T::zero()
    } else {
        y
    }
}

/// Geodesic distance on the unit circle.
#[inline]
pub fn circle_distance<T: Real>(a: T, b: T) -> T {
    let d = wrap_unit(a - b);
    d.min(T::one() - d)
}

/// Default tolerance scaled to the precision of `T`: `max(floor, k·eps)`.
#[inline]
pub fn scaled_tol<T: Real>(floor: f64, k: f64) -> T {
    T::lit(floor).max(T::lit(k) * T::epsilon())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_and_large() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn wrap_unit_stays_in_range() {
        assert_eq!(wrap_unit(1.0_f64), 0.0);
        assert_eq!(wrap_unit(-0.25_f64), 0.75);
        assert!(wrap_unit(-1e-18_f64) < 1.0);
        assert!((circle_distance(0.95_f64, 0.05) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn f32_is_a_real() {
        let v = [0.5_f32, 0.25, 0.25];
        assert!((pairwise_sum(&v) - 1.0).abs() < 1e-7);
        assert!(scaled_tol::<f32>(1e-12, 64.0) > 1e-6);
    }
}
