use rayon::prelude::*;

use super::{NoiseProfile, TransferMatrix};
use crate::densities::cell_midpoint;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::{pairwise_mean, Real};

/// Kernel `k(x_i, y_j)` of the reflected noisy map on `[0, 1]`, with
/// `(1/n) Σ_i k(x_i, y_j) = 1` for every column.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectingKernel<T> {
    entries: DenseMatrix<T>,
    defect: T,
}

impl<T: Real> ReflectingKernel<T> {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &DenseMatrix<T> {
        &self.entries
    }

    /// Largest column-mass defect before renormalization.
    pub fn markov_defect(&self) -> T {
        self.defect
    }

    pub fn sup(&self) -> T {
        self.entries.as_slice().iter().fold(T::zero(), |m, v| m.max(*v))
    }

    /// Markov matrix `A[i][j] = k(x_i, y_j)/n`.
    pub fn to_transfer_matrix(&self) -> Result<TransferMatrix<T>> {
        let n = self.n();
        let nt = T::from_count(n);
        let columns = (0..n)
            .map(|j| {
                (0..n)
                    .filter_map(|i| {
                        let v = self.entries[(i, j)];
                        (v != T::zero()).then(|| (i, v / nt))
                    })
                    .collect()
            })
            .collect();
        TransferMatrix::from_columns(n, columns, true)
    }
}

/// `Σ_{m=−1}^{1} [g(x + 2m − t) + g(−x + 2m − t)]`: the pushforward of the
/// translate `g(· − t)` under the folding projection onto `[0, 1]`.
#[inline]
fn fold<T: Real>(g: impl Fn(T) -> T, x: T, t: T) -> T {
    let mut acc = T::zero();
    for m in -1i32..=1 {
        let shift = T::lit(2.0 * m as f64) - t;
        acc += g(x + shift) + g(-x + shift);
    }
    acc
}

fn check_profile<T: Real>(rho: &NoiseProfile<T>) -> Result<()> {
    match rho.support() {
        Some(w) if w > T::zero() && w <= T::one() => Ok(()),
        _ => Err(Error::config(format!(
            "reflecting kernels need a noise profile supported in [-1, 1], got {}",
            rho.name()
        ))),
    }
}

/// Builds `k(x_i, y_j)` for the effective map `tmap`, sampling at cell
/// midpoints, and renormalizes each column.
pub fn reflecting_kernel_matrix<T: Real>(
    tmap: impl Fn(T) -> T + Sync,
    rho: &NoiseProfile<T>,
    n: usize,
) -> Result<ReflectingKernel<T>> {
    check_profile(rho)?;
    let columns: Vec<(Vec<T>, T)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let t = tmap(cell_midpoint::<T>(j, n));
            let col: Vec<T> = (0..n).map(|i| fold(|z| rho.density(z), cell_midpoint::<T>(i, n), t)).collect();
            let mass = pairwise_mean(&col);
            (col, mass)
        })
        .collect();
    let mut entries = DenseMatrix::zeros(n, n);
    let mut defect = T::zero();
    for (j, (col, mass)) in columns.into_iter().enumerate() {
        if !(mass > T::zero()) {
            return Err(Error::config(format!("noise {} is not resolved by {n} cells", rho.name())));
        }
        defect = defect.max((mass - T::one()).abs());
        for (i, v) in col.into_iter().enumerate() {
            entries[(i, j)] = v / mass;
        }
    }
    if defect > T::lit(1e-6) {
        log::debug!("reflecting kernel column defect before renormalization: {defect}");
    }
    Ok(ReflectingKernel { entries, defect })
}

/// The same folded sum built from `ρ'`, without renormalization:
/// entry `(i, j)` is `Σ_m [ρ'(x_i + 2m − t_j) + ρ'(−x_i + 2m − t_j)]`.
pub fn reflecting_derivative_matrix<T: Real>(
    tmap: impl Fn(T) -> T + Sync,
    rho: &NoiseProfile<T>,
    n: usize,
) -> Result<DenseMatrix<T>> {
    check_profile(rho)?;
    if !rho.has_derivative() {
        return Err(Error::config(format!("noise profile {} has no derivative", rho.name())));
    }
    let d = |z: T| rho.derivative(z).unwrap_or(T::zero());
    let cols: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let t = tmap(cell_midpoint::<T>(j, n));
            (0..n).map(|i| fold(d, cell_midpoint::<T>(i, n), t)).collect()
        })
        .collect();
    let mut m = DenseMatrix::zeros(n, n);
    for (j, col) in cols.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::l1_distance;
    use crate::maps::CircleMap;
    use rand::{Rng, SeedableRng};

    #[test]
    fn flat_kernel_smears_completely() {
        let n = 64;
        let tent = CircleMap::<f64>::tent();
        let rho = NoiseProfile::uniform(1.0).unwrap();
        let k = reflecting_kernel_matrix(|y| tent.eval(y), &rho, n).unwrap();
        // brute-force fold over m ∈ {−1, 0, 1}
        for j in 0..n {
            let t = tent.eval(cell_midpoint::<f64>(j, n));
            for i in 0..n {
                let x = cell_midpoint::<f64>(i, n);
                let mut brute = 0.0_f64;
                for m in [-1.0, 0.0, 1.0] {
                    for z in [x + 2.0 * m - t, -x + 2.0 * m - t] {
                        if z.abs() <= 1.0 {
                            brute += 0.5;
                        }
                    }
                }
                assert!((brute - 1.0).abs() < 1e-15);
                assert!((k.entries()[(i, j)] - 1.0).abs() < 1e-12);
            }
        }
        assert!(k.markov_defect() < 1e-12);
    }

    #[test]
    fn interior_image_needs_no_reflection() {
        let n = 200;
        let rho = NoiseProfile::triangular(0.1).unwrap();
        let k = reflecting_kernel_matrix(|_| 0.5, &rho, n).unwrap();
        for j in [0, 77, 199] {
            for i in 0..n {
                let x = cell_midpoint::<f64>(i, n);
                assert!((k.entries()[(i, j)] - rho.density(x - 0.5)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reflection_at_zero_matches_simulation() {
        let n = 100;
        let rho = NoiseProfile::triangular(0.3).unwrap();
        let k = reflecting_kernel_matrix(|_| 0.0, &rho, n).unwrap();
        let col: Vec<f64> = (0..n).map(|i| k.entries()[(i, 0)]).collect();
        // doubled lobe: the folded profile is 2ρ(x) near 0
        assert!((col[0] - 2.0 * rho.density(cell_midpoint::<f64>(0, n))).abs() < 1e-2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples = 1_000_000;
        let mut hist = vec![0.0; n];
        for _ in 0..samples {
            // triangular = sum of two uniforms on [-w/2, w/2]
            let z: f64 = 0.3 * (rng.random::<f64>() + rng.random::<f64>() - 1.0);
            let mut y = z.rem_euclid(2.0);
            if y > 1.0 {
                y = 2.0 - y;
            }
            hist[((y * n as f64) as usize).min(n - 1)] += n as f64 / samples as f64;
        }
        assert!(l1_distance(&hist, &col) < 0.02);
    }

    #[test]
    fn columns_are_markov_and_bounded() {
        let n = 256;
        let tent = CircleMap::<f64>::tent();
        let rho = NoiseProfile::truncated_gaussian(0.05).unwrap();
        let k = reflecting_kernel_matrix(|y| tent.eval(y) / 1.05, &rho, n).unwrap();
        let m = k.to_transfer_matrix().unwrap();
        assert!(m.is_markov(1e-12));
        assert!(k.sup() <= 3.0 * rho.sup());
    }

    #[test]
    fn derivative_kernel_columns_integrate_to_zero() {
        let n = 512;
        let rho = NoiseProfile::truncated_gaussian(0.05).unwrap();
        let tent = CircleMap::<f64>::tent();
        let d = reflecting_derivative_matrix(|y| tent.eval(y), &rho, n).unwrap();
        for j in 0..n {
            let s: f64 = (0..n).map(|i| d[(i, j)]).sum::<f64>() / n as f64;
            assert!(s.abs() < 1e-6, "column {j}: {s}");
        }
        assert!(reflecting_derivative_matrix(|y| y, &NoiseProfile::uniform(0.5).unwrap(), 8).is_err());
    }
}
