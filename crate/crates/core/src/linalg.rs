//! Small dense linear algebra: row-major matrices and LU with partial
//! pivoting. Sizes here are a few thousand at most.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "{} entries do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> T {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `P A = L U` with unit lower `L`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    norm1: T,
}

impl<T: Real> Lu<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::config("LU needs a square matrix"));
        }
        let n = a.rows;
        let norm1 = a.norm1();
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let tiny = T::epsilon() * T::from_count(n.max(1)) * norm1.max(T::min_positive_value());
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, T::zero()), |acc, c| if c.1 > acc.1 { c } else { acc });
            if pmax <= tiny {
                return Err(Error::Numerical {
                    message: format!("matrix is numerically singular at pivot {k}"),
                    residual: pmax.as_f64(),
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let row_k = &upper[k * n..(k + 1) * n];
            for row_i in lower.chunks_mut(n) {
                let m = row_i[k] / pivot;
                row_i[k] = m;
                if m != T::zero() {
                    for j in k + 1..n {
                        row_i[j] -= m * row_k[j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, norm1 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: T = row.iter().zip(&x[..i]).map(|(&a, &b)| a * b).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s: T = row.iter().zip(&x[i + 1..]).map(|(&a, &b)| a * b).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ w = z, x = Pᵀ w.
        let mut z = b.to_vec();
        for i in 0..n {
            let pivot = self.lu[i * n + i];
            z[i] /= pivot;
            let zi = z[i];
            for j in i + 1..n {
                z[j] -= self.lu[i * n + j] * zi;
            }
        }
        for i in (0..n).rev() {
            let zi = z[i];
            for j in 0..i {
                z[j] -= self.lu[i * n + j] * zi;
            }
        }
        let mut x = vec![T::zero(); n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }

    /// Hager's estimate of `‖A‖₁ ‖A⁻¹‖₁`.
    pub fn condition_estimate(&self) -> T {
        let n = self.n;
        let nt = T::from_count(n);
        let mut x = vec![T::one() / nt; n];
        let mut est = T::zero();
        for _ in 0..5 {
            let y = self.solve(&x);
            let new_est: T = y.iter().map(|v| v.abs()).sum();
            let xi: Vec<T> = y.iter().map(|v| if *v >= T::zero() { T::one() } else { -T::one() }).collect();
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .fold((0, T::zero()), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
            let ztx: T = z.iter().zip(&x).map(|(&a, &b)| a * b).sum();
            est = est.max(new_est);
            if zmax <= ztx {
                break;
            }
            x = vec![T::zero(); n];
            x[j] = T::one();
        }
        est * self.norm1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix(n: usize) -> DenseMatrix<f64> {
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4 + if i == j { 2.0 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn solves_and_transpose_solves() {
        let n = 40;
        let a = test_matrix(n);
        let lu = Lu::factor(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = lu.solve(&b);
        let r = a.mul_vec(&x);
        assert!(r.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        let y = lu.solve_transpose(&b);
        let r = a.transpose().mul_vec(&y);
        assert!(r.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn condition_estimate_matches_nalgebra_inverse() {
        let n = 12;
        let a = test_matrix(n);
        let lu = Lu::factor(&a).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
        let inv = na.clone().try_inverse().unwrap();
        let norm1 = |m: &nalgebra::DMatrix<f64>| {
            (0..n).map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
        };
        let exact = norm1(&na) * norm1(&inv);
        let est = lu.condition_estimate();
        assert!(est <= exact * (1.0 + 1e-10) && est >= exact / 3.0, "{est} vs {exact}");
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = DenseMatrix::from_row_major(2, 2, vec![1.0_f64, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(Lu::factor(&a), Err(Error::Numerical { .. })));
    }
}
