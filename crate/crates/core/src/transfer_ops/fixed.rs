use super::TransferMatrix;
use crate::densities::{l1_distance, norm, GridDensity, NormKind};
use crate::error::{Error, Result};
use crate::scalar::{pairwise_mean, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedDensityOptions<T> {
    /// Stop once the L1 step falls below this.
    pub tol: T,
    pub max_iter: usize,
    /// Iterations spent estimating the subdominant eigenvalue.
    pub probe_steps: usize,
}

impl<T: Real> Default for FixedDensityOptions<T> {
    fn default() -> Self {
        FixedDensityOptions { tol: T::lit(1e-12), max_iter: 100_000, probe_steps: 60 }
    }
}

#[derive(Clone, Debug)]
pub struct FixedDensity<T> {
    pub density: GridDensity<T>,
    pub iterations: usize,
    pub final_step: T,
    /// Observed decay ratio of a zero-mean probe vector: an estimate of the
    /// modulus of the second eigenvalue.
    pub second_eigenvalue: T,
    /// `false` when the probe does not contract, i.e. the fixed density may
    /// not be unique.
    pub unique: bool,
}

/// Fixed probability vector of a Markov matrix by power iteration from the
/// uniform density.
pub fn linear_fixed_density<T: Real>(m: &TransferMatrix<T>, opts: &FixedDensityOptions<T>) -> Result<FixedDensity<T>> {
    let n = m.n();
    let mut f = vec![T::one(); n];
    let mut step = T::infinity();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let mut g = m.apply(&f);
        let mass = pairwise_mean(&g);
        for v in g.iter_mut() {
            *v = (*v / mass).max(T::zero());
        }
        step = l1_distance(&f, &g);
        f = g;
        iterations += 1;
        if step <= opts.tol {
            break;
        }
    }
    let second = second_eigenvalue(m, opts.probe_steps);
    let unique = second < T::one() - T::lit(1e-6);
    if step > opts.tol {
        return Err(Error::Numerical {
            message: format!(
                "power iteration did not converge in {} steps (subdominant eigenvalue estimate {second}); \
                 the operator may have a degenerate spectrum",
                opts.max_iter
            ),
            residual: step.as_f64(),
        });
    }
    if !unique {
        log::warn!("fixed density may not be unique: subdominant eigenvalue estimate {second}");
    }
    Ok(FixedDensity {
        density: GridDensity::normalized(f)?,
        iterations,
        final_step: step,
        second_eigenvalue: second,
        unique,
    })
}

/// Decay ratio of a deterministic zero-mean probe under repeated
/// application. Markov matrices keep the zero-mean subspace invariant.
fn second_eigenvalue<T: Real>(m: &TransferMatrix<T>, steps: usize) -> T {
    let n = m.n();
    let mut v: Vec<T> = (0..n)
        .map(|i| {
            let x = T::from_count(i) / T::from_count(n);
            (T::lit(1.3) * x * T::two_pi()).sin() + (T::lit(0.37) + x * x * T::lit(17.0)).cos()
        })
        .collect();
    let mean = pairwise_mean(&v);
    for x in v.iter_mut() {
        *x -= mean;
    }
    let l1 = |w: &[T]| norm(w, NormKind::L1).unwrap_or(T::zero());
    let mut prev = l1(&v);
    if prev == T::zero() {
        return T::zero();
    }
    let mut ratios = Vec::new();
    for _ in 0..steps.max(2) {
        let mut w = m.apply(&v);
        let mean = pairwise_mean(&w);
        for x in w.iter_mut() {
            *x -= mean;
        }
        let cur = l1(&w);
        if cur <= T::epsilon() * T::lit(1e3) * prev.max(T::one()) || prev == T::zero() {
            ratios.push(T::zero());
            break;
        }
        ratios.push(cur / prev);
        for x in w.iter_mut() {
            *x /= cur;
        }
        v = w;
        prev = T::one();
    }
    // geometric mean of the last few ratios
    let tail = &ratios[ratios.len().saturating_sub(10)..];
    if tail.iter().any(|r| *r == T::zero()) {
        return T::zero();
    }
    let log_mean = tail.iter().map(|r| r.ln()).sum::<T>() / T::from_count(tail.len());
    log_mean.exp()
}
