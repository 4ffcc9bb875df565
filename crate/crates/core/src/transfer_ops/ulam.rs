use rayon::prelude::*;

use super::TransferMatrix;
use crate::error::Result;
use crate::maps::{CircleMap, MeanFieldDiffeo};
use crate::scalar::{wrap_unit, Real};

pub const DEFAULT_ULAM_SUBSAMPLES: usize = 64;

/// Ulam matrix of `map`: entry `[i][j]` is the fraction of cell `j`
/// landing in cell `i`. Exact cell preimages are used when the map has
/// branch data, `q` subsamples per cell otherwise.
pub fn ulam_matrix<T: Real>(map: &CircleMap<T>, n: usize, q: usize) -> Result<TransferMatrix<T>> {
    if map.has_branches() {
        ulam_matrix_exact(map, None, n)
    } else {
        ulam_matrix_sampled(|x| map.eval(x), n, q)
    }
}

/// Ulam matrix of `Φ ∘ map`.
pub fn composed_ulam_matrix<T: Real>(
    map: &CircleMap<T>,
    phi: &MeanFieldDiffeo<T>,
    n: usize,
    q: usize,
) -> Result<TransferMatrix<T>> {
    if map.has_branches() {
        ulam_matrix_exact(map, Some(phi), n)
    } else {
        ulam_matrix_sampled(|x| phi.apply(map.eval(x)), n, q)
    }
}

/// Subsampled estimate: `q` equally spaced points per source cell.
pub fn ulam_matrix_sampled<T: Real>(f: impl Fn(T) -> T + Sync, n: usize, q: usize) -> Result<TransferMatrix<T>> {
    let q = q.max(1);
    let nq = T::from_count(n * q);
    let nt = T::from_count(n);
    let w = T::one() / T::from_count(q);
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..q)
                .map(|k| {
                    let x = (T::from_count(j * q + k) + T::lit(0.5)) / nq;
                    let y = wrap_unit(f(x));
                    let i = (y * nt).floor().to_usize().unwrap_or(0).min(n - 1);
                    (i, w)
                })
                .collect()
        })
        .collect();
    TransferMatrix::from_columns(n, columns, true)
}

/// Exact Ulam matrix from branch inverses, optionally followed by a
/// mean-field map: the preimage of each target cell is computed in closed
/// form and intersected with the source cells.
pub fn ulam_matrix_exact<T: Real>(
    map: &CircleMap<T>,
    phi: Option<&MeanFieldDiffeo<T>>,
    n: usize,
) -> Result<TransferMatrix<T>> {
    let nt = T::from_count(n);
    let phi = phi.filter(|p| !p.is_identity());
    let rows: Vec<Vec<(usize, T)>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<(usize, T)>> {
            let a = T::from_count(i) / nt;
            let b = T::from_count(i + 1) / nt;
            let (u, v) = match phi {
                Some(p) => (p.invert_lifted(a)?, p.invert_lifted(b)?),
                None => (a, b),
            };
            let mut row = Vec::new();
            for br in map.branches() {
                let (m0, m1) = br.image;
                let s_lo = (m0 - v).floor().to_i64().unwrap_or(0);
                let s_hi = (m1 - u).ceil().to_i64().unwrap_or(0);
                for s in s_lo..=s_hi {
                    let shift = T::lit(s as f64);
                    let lo = (u + shift).max(m0);
                    let hi = (v + shift).min(m1);
                    if !(hi > lo) {
                        continue;
                    }
                    let p = (br.inverse)(lo);
                    let q = (br.inverse)(hi);
                    let (p, q) = if p <= q { (p, q) } else { (q, p) };
                    spread_over_cells(p, q, n, &mut row);
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    for (i, row) in rows.into_iter().enumerate() {
        for (j, w) in row {
            columns[j].push((i, w));
        }
    }
    TransferMatrix::from_columns(n, columns, true)
}

/// Adds `n·|[p, q) ∩ cell_j|` for every source cell `j` hit.
fn spread_over_cells<T: Real>(p: T, q: T, n: usize, out: &mut Vec<(usize, T)>) {
    let nt = T::from_count(n);
    let (up, uq) = (p * nt, q * nt);
    let first = up.floor().to_i64().unwrap_or(0);
    let last = uq.ceil().to_i64().unwrap_or(0);
    for c in first..last {
        let lo = up.max(T::lit(c as f64));
        let hi = uq.min(T::lit((c + 1) as f64));
        if hi > lo {
            let j = c.rem_euclid(n as i64) as usize;
            out.push((j, hi - lo));
        }
    }
}
