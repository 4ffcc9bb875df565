use super::renormalize;
use crate::densities::{cell_midpoint, interpolate, GridDensity};
use crate::error::Result;
use crate::maps::MeanFieldDiffeo;
use crate::scalar::Real;

/// Transfer operator of the mean-field map:
/// `out(x) = f(Φ⁻¹ x) / Φ'(Φ⁻¹ x)` at the cell midpoints, with `Φ'` the
/// slope of the piecewise-linear lift.
pub fn diffeo_pushforward<T: Real>(phi: &MeanFieldDiffeo<T>, f: &[T]) -> Result<Vec<T>> {
    if phi.is_identity() {
        return Ok(f.to_vec());
    }
    let n = f.len();
    (0..n)
        .map(|i| {
            let y = phi.invert(cell_midpoint::<T>(i, n))?;
            Ok(interpolate(f, y) / phi.segment_slope(y))
        })
        .collect()
}

pub fn diffeo_pushforward_density<T: Real>(
    phi: &MeanFieldDiffeo<T>,
    f: &GridDensity<T>,
) -> Result<GridDensity<T>> {
    if phi.is_identity() {
        return Ok(f.clone());
    }
    renormalize(diffeo_pushforward(phi, f.values())?)
}
