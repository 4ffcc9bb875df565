use super::renormalize;
use crate::densities::{cell_midpoint, interpolate, GridDensity};
use crate::error::{Error, Result};
use crate::maps::CircleMap;
use crate::scalar::Real;

/// Preimage-sum transfer operator
/// `(L f)(x) = Σ_{T y = x} f(y) / |T'(y)|`, evaluated at the cell midpoints
/// with `f` interpolated linearly. No mass correction is applied.
pub fn expanding_transfer_apply<T: Real>(map: &CircleMap<T>, f: &[T]) -> Result<Vec<T>> {
    if !map.has_branches() {
        return Err(Error::config(format!(
            "map '{}' has no branch data; use the Ulam operator instead",
            map.name()
        )));
    }
    let n = f.len();
    Ok((0..n)
        .map(|i| {
            let x = cell_midpoint::<T>(i, n);
            map.branches()
                .iter()
                .filter_map(|b| {
                    let shift = (b.image.0 - x).ceil();
                    let z = x + shift;
                    if z >= b.image.0 && z <= b.image.1 {
                        let y = (b.inverse)(z);
                        Some(interpolate(f, y) * (b.inverse_deriv)(z))
                    } else {
                        None
                    }
                })
                .sum()
        })
        .collect())
}

/// [`expanding_transfer_apply`] on a probability density, with the
/// `O(1/n²)` mass defect removed.
pub fn expanding_transfer_density<T: Real>(map: &CircleMap<T>, f: &GridDensity<T>) -> Result<GridDensity<T>> {
    renormalize(expanding_transfer_apply(map, f.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{norm, ulam_project, NormKind};
    use std::f64::consts::TAU;

    #[test]
    fn doubling_examples() {
        let map = CircleMap::<f64>::doubling();
        let n = 1024;
        let u = GridDensity::<f64>::uniform(n);
        let out = expanding_transfer_density(&map, &u).unwrap();
        assert!(out.values().iter().all(|v| (v - 1.0).abs() < 1e-14));

        let f = ulam_project(|x: f64| 1.0 + (2.0 * TAU * x).cos(), n, 32);
        let out = expanding_transfer_apply(&map, &f).unwrap();
        let expect = ulam_project(|x: f64| 1.0 + (TAU * x).cos(), n, 32);
        let err: Vec<f64> = out.iter().zip(&expect).map(|(a, b)| a - b).collect();
        assert!(norm(&err, NormKind::Sup).unwrap() < 1e-4);

        let f = ulam_project(|x: f64| 1.0 + (TAU * x).cos(), n, 32);
        let out = expanding_transfer_apply(&map, &f).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn mass_and_positivity() {
        let map = CircleMap::<f64>::perturbed_doubling(0.12).unwrap();
        let f = GridDensity::from_fn(256, |x: f64| (TAU * x).sin().exp(), 8).unwrap();
        let out = expanding_transfer_apply(&map, f.values()).unwrap();
        assert!(out.iter().all(|v| *v >= 0.0));
        assert!((crate::densities::integral(&out) - 1.0).abs() < 1e-4);
        let d = expanding_transfer_density(&map, &f).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn maps_without_branches_are_rejected() {
        let m = CircleMap::<f64>::from_fn(
            "opaque",
            crate::maps::Geometry::Circle,
            std::sync::Arc::new(|x| x),
            std::sync::Arc::new(|_| 1.0),
            1.0,
        );
        assert!(matches!(expanding_transfer_apply(&m, &[1.0, 1.0]), Err(Error::Config(_))));
    }
}
