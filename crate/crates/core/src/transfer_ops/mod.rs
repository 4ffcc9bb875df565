//! Linear transfer operators on grid densities.
//!
//! Matrices act on cell-average vectors: `out_i = Σ_j A[i][j] f_j`, so a
//! mass-preserving operator has unit column sums.

mod diffeo;
mod expanding;
mod fixed;
mod noise;
mod reflecting;
mod ulam;

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::densities::{fmt_float, integral, GridDensity};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

pub use diffeo::{diffeo_pushforward, diffeo_pushforward_density};
pub use expanding::{expanding_transfer_apply, expanding_transfer_density};
pub use fixed::{linear_fixed_density, FixedDensity, FixedDensityOptions};
pub use noise::{convolve, convolve_density, NoiseKernel, NoiseProfile};
pub use reflecting::{reflecting_derivative_matrix, reflecting_kernel_matrix, ReflectingKernel};
pub use ulam::{
    composed_ulam_matrix, ulam_matrix, ulam_matrix_exact, ulam_matrix_sampled, DEFAULT_ULAM_SUBSAMPLES,
};

const BINARY_MAGIC: &[u8; 8] = b"SCTMAT01";
/// Tag written after the dimension: entry `[i][j]` maps source cell `j`
/// to target cell `i`.
const CONVENTION_TARGET_SOURCE: u32 = 1;

/// Sparse Markov matrix stored by columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix<T> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<T>,
    defect: T,
}

impl<T: Real> TransferMatrix<T> {
    /// Builds the matrix from per-column `(row, value)` lists. Duplicate
    /// rows are merged. With `renormalize`, each column is rescaled to unit
    /// sum and the largest pre-rescaling defect is recorded.
    pub fn from_columns(n: usize, columns: Vec<Vec<(usize, T)>>, renormalize: bool) -> Result<Self> {
        if columns.len() != n {
            return Err(Error::config(format!("expected {n} columns, got {}", columns.len())));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut vals = Vec::new();
        let mut defect = T::zero();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|e| e.0);
            let start = row_idx.len();
            for (r, v) in col {
                if r >= n {
                    return Err(Error::config(format!("row index {r} out of range")));
                }
                if !(v >= T::zero()) || !v.is_finite() {
                    return Err(Error::domain(format!("transfer matrix entry {v} is not a nonnegative number")));
                }
                if row_idx.len() > start && *row_idx.last().expect("nonempty") == r {
                    *vals.last_mut().expect("nonempty") += v;
                } else {
                    row_idx.push(r);
                    vals.push(v);
                }
            }
            let sum: T = vals[start..].iter().copied().sum();
            defect = defect.max((sum - T::one()).abs());
            if renormalize {
                if !(sum > T::zero()) {
                    return Err(Error::domain("a column carries no mass and cannot be renormalized"));
                }
                for v in &mut vals[start..] {
                    *v /= sum;
                }
            }
            col_ptr.push(row_idx.len());
        }
        if defect > T::lit(1e-10) {
            log::debug!("transfer matrix column-sum defect before renormalization: {defect}");
        }
        Ok(TransferMatrix { n, col_ptr, row_idx, vals, defect })
    }

    pub fn from_dense(m: &DenseMatrix<T>, renormalize: bool) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::config("transfer matrix must be square"));
        }
        let columns = (0..n)
            .map(|j| (0..n).filter(|&i| m[(i, j)] != T::zero()).map(|i| (i, m[(i, j)])).collect())
            .collect();
        Self::from_columns(n, columns, renormalize)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_columns(n, (0..n).map(|j| vec![(j, T::one())]).collect(), false)
            .expect("identity is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Largest `|column sum − 1|` seen before renormalization.
    pub fn markov_defect(&self) -> T {
        self.defect
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn entry(&self, i: usize, j: usize) -> T {
        self.column(j).find(|e| e.0 == i).map(|e| e.1).unwrap_or(T::zero())
    }

    pub fn column_sums(&self) -> Vec<T> {
        (0..self.n).map(|j| self.column(j).map(|e| e.1).sum()).collect()
    }

    pub fn is_markov(&self, tol: T) -> bool {
        self.column_sums().iter().all(|s| (*s - T::one()).abs() <= tol)
    }

    pub fn apply(&self, f: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        for (j, &fj) in f.iter().enumerate() {
            if fj == T::zero() {
                continue;
            }
            for (i, a) in self.column(j) {
                out[i] += a * fj;
            }
        }
        out
    }

    /// `Aᵀ g`
    pub fn apply_transpose(&self, g: &[T]) -> Vec<T> {
        (0..self.n).map(|j| self.column(j).map(|(i, a)| a * g[i]).sum()).collect()
    }

    /// Applies to a density and removes the rounding drift in the mass.
    pub fn apply_density(&self, f: &GridDensity<T>) -> Result<GridDensity<T>> {
        if f.n() != self.n {
            return Err(Error::config(format!("density has {} cells, operator {}", f.n(), self.n)));
        }
        GridDensity::normalized(self.apply(f.values()))
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for (i, a) in self.column(j) {
                m[(i, j)] += a;
            }
        }
        m
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::config("dimension mismatch in composition"));
        }
        let columns: Vec<Vec<(usize, T)>> = (0..self.n)
            .into_par_iter()
            .map(|j| {
                let mut acc: Vec<(usize, T)> = Vec::new();
                for (k, b) in other.column(j) {
                    for (i, a) in self.column(k) {
                        acc.push((i, a * b));
                    }
                }
                acc
            })
            .collect();
        Self::from_columns(self.n, columns, false)
    }

    /// Dense little-endian dump: magic, `n` (u64), convention tag (u32),
    /// then `n²` row-major `f64` entries.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&CONVENTION_TARGET_SOURCE.to_le_bytes())?;
        let dense = self.to_dense();
        for v in dense.as_slice() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("not a transfer matrix file".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != CONVENTION_TARGET_SOURCE {
            return Err(Error::Parse("unknown matrix convention tag".into()));
        }
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            r.read_exact(&mut b8)?;
            data.push(T::lit(f64::from_le_bytes(b8)));
        }
        Self::from_dense(&DenseMatrix::from_row_major(n, n, data)?, false)
    }

    /// Nonzero entries as `row,col,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "col", "value"])?;
        for j in 0..self.n {
            for (i, a) in self.column(j) {
                out.write_record([i.to_string(), j.to_string(), fmt_float(a)])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Mass-corrected output for probability inputs.
pub(crate) fn renormalize<T: Real>(mut v: Vec<T>) -> Result<GridDensity<T>> {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
    let m = integral(&v);
    if !(m > T::zero()) {
        return Err(Error::Numerical { message: "operator output has no mass".into(), residual: m.as_f64() });
    }
    GridDensity::normalized(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let m = ulam_matrix(&crate::maps::CircleMap::<f64>::doubling(), 16, 64).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 4 + 16 * 16 * 8);
        let back = TransferMatrix::<f64>::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.to_dense(), m.to_dense());
        assert!(TransferMatrix::<f64>::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = ulam_matrix(&crate::maps::CircleMap::<f64>::perturbed_doubling(0.1).unwrap(), 32, 64).unwrap();
        let f: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = m.apply(&f).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = m.apply_transpose(&g).iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn csv_lists_nonzeros() {
        let m = TransferMatrix::<f64>::identity(3);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
}
