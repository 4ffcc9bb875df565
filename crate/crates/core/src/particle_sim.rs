//! Direct simulation of `N` all-to-all coupled agents.
//!
//! Each step maps every agent through the base map, displaces it by the
//! empirical mean field of the pre-step states, and adds independent noise.
//! Random numbers come from a counter-based stream keyed by
//! `(seed, step, agent)`, so trajectories are bitwise reproducible no matter
//! how the agents are split across threads.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::densities::{fmt_float, l1_distance, GridDensity};
use crate::error::{Error, Result};
use crate::maps::{CircleMap, CouplingKernel, Geometry};
use crate::scalar::{pairwise_mean, wrap_unit, Real};
use crate::self_consistent::{SelfConsistentModel, SystemClass};
use crate::transfer_ops::{NoiseKernel, NoiseProfile};

/// Default burn-in before stationary statistics are collected.
pub const DEFAULT_BURN_IN: usize = 200;
/// Default cap on `N²` kernel evaluations per step for kernels without
/// trigonometric structure.
pub const DEFAULT_PAIR_BUDGET: usize = 100_000_000;

const QUANTILE_CELLS: usize = 1 << 16;
const AGENTS_PER_CHUNK: usize = 4096;
/// 32-bit words consumed per agent and step: two `u64` draws.
const WORDS_PER_AGENT: u128 = 4;
/// Stream reserved for initial conditions.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParticleEnsemble<T> {
    pub states: Vec<T>,
    pub rng_seed: u64,
    pub step_count: u64,
}

impl<T: Real> ParticleEnsemble<T> {
    pub fn from_states(states: Vec<T>, rng_seed: u64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::config("ensemble needs at least one agent"));
        }
        if let Some(x) = states.iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
            return Err(Error::domain(format!("agent state {x} outside [0, 1]")));
        }
        Ok(ParticleEnsemble { states, rng_seed, step_count: 0 })
    }

    /// `N` independent uniform agents.
    pub fn uniform(agents: usize, rng_seed: u64) -> Result<Self> {
        let states = draw_uniforms::<T>(rng_seed, INIT_STREAM, agents);
        Self::from_states(states, rng_seed)
    }

    /// `N` independent agents distributed according to `f`.
    pub fn from_density(f: &GridDensity<T>, agents: usize, rng_seed: u64) -> Result<Self> {
        let n = f.n();
        let nt = T::from_count(n);
        let mut cdf = Vec::with_capacity(n);
        let mut acc = T::zero();
        for v in f.values() {
            acc += *v / nt;
            cdf.push(acc);
        }
        let total = acc;
        let states = draw_uniforms::<T>(rng_seed, INIT_STREAM, agents)
            .into_iter()
            .map(|u| {
                let target = u * total;
                let i = cdf.partition_point(|c| *c <= target).min(n - 1);
                let lo = if i == 0 { T::zero() } else { cdf[i - 1] };
                let width = cdf[i] - lo;
                let frac = if width > T::zero() { ((target - lo) / width).min(T::one()) } else { T::lit(0.5) };
                ((T::from_count(i) + frac) / nt).min(T::one())
            })
            .collect();
        Self::from_states(states, rng_seed)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean(&self) -> T {
        pairwise_mean(&self.states)
    }
}

/// Normalized histogram over `n` cells; a state equal to `1` counts in the
/// last cell.
pub fn empirical_density<T: Real>(ensemble: &ParticleEnsemble<T>, n: usize) -> Result<GridDensity<T>> {
    GridDensity::new(histogram(&ensemble.states, n)?)
}

fn histogram<T: Real>(states: &[T], n: usize) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::config("histogram needs at least one cell"));
    }
    let nt = T::from_count(n);
    let mut counts = vec![0usize; n];
    for &x in states {
        let i = (x * nt).floor().to_usize().unwrap_or(0).min(n - 1);
        counts[i] += 1;
    }
    let scale = nt / T::from_count(states.len());
    Ok(counts.into_iter().map(|c| T::from_count(c) * scale).collect())
}

/// Noise added after the deterministic part of a step.
#[derive(Clone, Debug)]
pub enum ParticleNoise<T> {
    None,
    /// Offset `k/n` drawn with probability `ρ̃_k / n`, wrapped mod 1.
    Circle { cdf: Vec<T> },
    /// Draw from a compactly supported profile, folded back into `[0, 1]`.
    Reflecting { table: QuantileTable<T> },
}

impl<T: Real> ParticleNoise<T> {
    pub fn circle(kernel: &NoiseKernel<T>) -> Self {
        if kernel.is_delta() {
            return ParticleNoise::None;
        }
        let nt = T::from_count(kernel.n());
        let mut acc = T::zero();
        let mut cdf: Vec<T> = kernel
            .grid_samples()
            .iter()
            .map(|r| {
                acc += *r / nt;
                acc
            })
            .collect();
        let total = acc;
        for c in cdf.iter_mut() {
            *c /= total;
        }
        ParticleNoise::Circle { cdf }
    }

    pub fn reflecting(profile: &NoiseProfile<T>) -> Result<Self> {
        Ok(ParticleNoise::Reflecting { table: QuantileTable::new(profile)? })
    }
}

/// Inverse of the piecewise-linear CDF obtained from trapezoid sums of the
/// density on a fine grid over the support.
#[derive(Clone, Debug)]
pub struct QuantileTable<T> {
    nodes: Vec<T>,
    cdf: Vec<T>,
}

impl<T: Real> QuantileTable<T> {
    pub fn new(profile: &NoiseProfile<T>) -> Result<Self> {
        let w = profile
            .support()
            .ok_or_else(|| Error::config(format!("noise {} has no compact support", profile.name())))?;
        let m = QUANTILE_CELLS;
        let nodes: Vec<T> = (0..=m).map(|k| -w + (w + w) * T::from_count(k) / T::from_count(m)).collect();
        let dens: Vec<T> = nodes.iter().map(|&z| profile.density(z)).collect();
        let h = (w + w) / T::from_count(m);
        let mut cdf = Vec::with_capacity(m + 1);
        let mut acc = T::zero();
        cdf.push(acc);
        for k in 0..m {
            acc += h * (dens[k] + dens[k + 1]) / T::lit(2.0);
            cdf.push(acc);
        }
        if !(acc > T::zero()) {
            return Err(Error::config(format!("noise {} has no mass", profile.name())));
        }
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        Ok(QuantileTable { nodes, cdf })
    }

    pub fn quantile(&self, u: T) -> T {
        let k = self.cdf.partition_point(|c| *c <= u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let (z0, z1) = (self.nodes[k - 1], self.nodes[k]);
        if c1 > c0 {
            z0 + (z1 - z0) * ((u - c0) / (c1 - c0))
        } else {
            z0
        }
    }
}

/// Mean-field displacement rule of the simulated network.
#[derive(Clone)]
pub enum Interaction<T> {
    /// `Φ(y) = y + δ · (1/N) Σ_j h(y, x_j)` mod 1.
    Kernel(CouplingKernel<T>),
    /// `y / (1 + δ · mean(x))`.
    Rescale,
}

/// Everything needed to advance an ensemble by one step.
#[derive(Clone)]
pub struct ParticleDynamics<T> {
    pub map: CircleMap<T>,
    pub interaction: Interaction<T>,
    pub delta: T,
    pub noise: ParticleNoise<T>,
    /// Largest `N²` allowed for the direct coupling sum.
    pub pair_budget: usize,
}

impl<T: Real> std::fmt::Debug for ParticleDynamics<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let interaction = match &self.interaction {
            Interaction::Kernel(h) => h.name().to_string(),
            Interaction::Rescale => "rescale".to_string(),
        };
        f.debug_struct("ParticleDynamics")
            .field("map", &self.map.name())
            .field("interaction", &interaction)
            .field("delta", &self.delta)
            .field("pair_budget", &self.pair_budget)
            .finish()
    }
}

impl<T: Real> ParticleDynamics<T> {
    /// Circle dynamics with kernel coupling.
    pub fn circle(map: CircleMap<T>, h: CouplingKernel<T>, delta: T, noise: Option<&NoiseKernel<T>>) -> Result<Self> {
        if map.geometry() != Geometry::Circle {
            return Err(Error::config(format!("map {} does not act on the circle", map.name())));
        }
        Ok(ParticleDynamics {
            map,
            interaction: Interaction::Kernel(h),
            delta,
            noise: noise.map(ParticleNoise::circle).unwrap_or(ParticleNoise::None),
            pair_budget: DEFAULT_PAIR_BUDGET,
        })
    }

    /// The same network as `model`, at the model's coupling strength.
    pub fn from_model(model: &SelfConsistentModel<T>) -> Result<Self> {
        match model.class() {
            SystemClass::Expanding | SystemClass::AdditiveNoiseCircle => Self::circle(
                model.maps()[0].clone(),
                model.couplings()[0].clone(),
                model.delta(),
                model.noise(),
            ),
            SystemClass::ReflectingKernelInterval => Ok(ParticleDynamics {
                map: model.maps()[0].clone(),
                interaction: Interaction::Rescale,
                delta: model.delta(),
                noise: ParticleNoise::reflecting(model.line_noise().expect("validated model"))?,
                pair_budget: DEFAULT_PAIR_BUDGET,
            }),
            SystemClass::TwoPopulation => {
                Err(Error::config("particle simulation of two-population systems is not supported"))
            }
        }
    }

    pub fn with_pair_budget(mut self, budget: usize) -> Self {
        self.pair_budget = budget;
        self
    }
}

/// `S_i = (1/N) Σ_j h(T(x_i), x_j)` for every agent, by trigonometric
/// moments when `h` is a finite sum and directly otherwise.
pub fn mean_field_sums<T: Real>(dynamics: &ParticleDynamics<T>, states: &[T]) -> Result<Vec<T>> {
    let h = match &dynamics.interaction {
        Interaction::Kernel(h) => h,
        Interaction::Rescale => return Err(Error::config("rescaling dynamics have no coupling kernel")),
    };
    let map = &dynamics.map;
    match h.terms() {
        Some(terms) => {
            let weights: Vec<T> = terms
                .iter()
                .map(|t| {
                    let ys: Vec<T> = states.par_iter().map(|&x| t.y.eval(x)).collect();
                    t.coeff * pairwise_mean(&ys)
                })
                .collect();
            Ok(states
                .par_iter()
                .map(|&x| {
                    let y = map.eval(x);
                    terms.iter().zip(&weights).map(|(t, &c)| c * t.x.eval(y)).sum()
                })
                .collect())
        }
        None => direct_mean_field_sums(dynamics, h, states),
    }
}

/// The `O(N²)` sum, refused beyond the pair budget.
pub fn direct_mean_field_sums<T: Real>(
    dynamics: &ParticleDynamics<T>,
    h: &CouplingKernel<T>,
    states: &[T],
) -> Result<Vec<T>> {
    let n = states.len();
    if n.saturating_mul(n) > dynamics.pair_budget {
        return Err(Error::config(format!(
            "direct coupling sum over {n} agents needs {} kernel evaluations per step, above the budget of {}; \
             express the kernel as a trigonometric sum or raise the pair budget",
            n.saturating_mul(n),
            dynamics.pair_budget
        )));
    }
    Ok(states
        .par_iter()
        .map(|&x| {
            let y = dynamics.map.eval(x);
            let row: Vec<T> = states.iter().map(|&xj| h.eval(y, xj)).collect();
            pairwise_mean(&row)
        })
        .collect())
}

#[inline]
fn unit_from_bits<T: Real>(bits: u64) -> T {
    T::lit((bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
}

fn stream_rng(seed: u64, stream: u64, first_agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(first_agent as u128 * WORDS_PER_AGENT);
    rng
}

fn draw_uniforms<T: Real>(seed: u64, stream: u64, agents: usize) -> Vec<T> {
    let mut out = vec![T::zero(); agents];
    out.par_chunks_mut(AGENTS_PER_CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut rng = stream_rng(seed, stream, c * AGENTS_PER_CHUNK);
        for v in chunk {
            *v = unit_from_bits(rng.next_u64());
            rng.next_u64();
        }
    });
    out
}

/// `z ↦ z mod 2`, folded onto `[0, 1]`.
#[inline]
fn reflect<T: Real>(y: T) -> T {
    let two = T::lit(2.0);
    let z = y - two * (y / two).floor();
    let z = if z >= two { T::zero() } else { z };
    if z > T::one() {
        two - z
    } else {
        z
    }
}

/// Advances every agent by one step.
pub fn step<T: Real>(ensemble: &mut ParticleEnsemble<T>, dynamics: &ParticleDynamics<T>) -> Result<()> {
    let delta = dynamics.delta;
    let displacement: Option<Vec<T>> = match &dynamics.interaction {
        Interaction::Kernel(_) if delta != T::zero() => Some(mean_field_sums(dynamics, &ensemble.states)?),
        _ => None,
    };
    let denom = match dynamics.interaction {
        Interaction::Rescale => {
            let d = T::one() + delta * ensemble.mean();
            if !(d > T::zero()) {
                return Err(Error::Regime {
                    message: "tent rescaling 1 + delta * mean must stay positive".into(),
                    value: d.as_f64(),
                    bound: 0.0,
                });
            }
            d
        }
        Interaction::Kernel(_) => T::one(),
    };
    let seed = ensemble.rng_seed;
    let stream = ensemble.step_count;
    let map = &dynamics.map;
    let noise = &dynamics.noise;
    let rescale = matches!(dynamics.interaction, Interaction::Rescale);
    ensemble.states.par_chunks_mut(AGENTS_PER_CHUNK).enumerate().for_each(|(c, chunk)| {
        let first = c * AGENTS_PER_CHUNK;
        let mut rng = stream_rng(seed, stream, first);
        for (k, x) in chunk.iter_mut().enumerate() {
            let u: T = unit_from_bits(rng.next_u64());
            rng.next_u64();
            let mut y = map.eval(*x);
            if rescale {
                y = y / denom;
            } else if let Some(s) = &displacement {
                y = y + delta * s[first + k];
            }
            *x = match noise {
                ParticleNoise::None => {
                    if rescale {
                        reflect(y)
                    } else {
                        wrap_unit(y)
                    }
                }
                ParticleNoise::Circle { cdf } => {
                    let n = cdf.len();
                    let k = cdf.partition_point(|c| *c <= u).min(n - 1);
                    wrap_unit(y + T::from_count(k) / T::from_count(n))
                }
                ParticleNoise::Reflecting { table } => reflect(y + table.quantile(u)),
            };
        }
    });
    ensemble.step_count += 1;
    Ok(())
}

/// One row of a trajectory summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow<T> {
    pub step: u64,
    pub mean: T,
    /// L1 distance of the histogram to the reference, when one is given.
    pub l1_to_reference: Option<T>,
}

/// Runs `steps` steps, recording the state before each step and after the
/// last one.
pub fn simulate<T: Real>(
    ensemble: &mut ParticleEnsemble<T>,
    dynamics: &ParticleDynamics<T>,
    steps: usize,
    reference: Option<&GridDensity<T>>,
) -> Result<Vec<TrajectoryRow<T>>> {
    let record = |e: &ParticleEnsemble<T>| -> Result<TrajectoryRow<T>> {
        let l1 = match reference {
            Some(r) => Some(l1_distance(&histogram(&e.states, r.n())?, r.values())),
            None => None,
        };
        Ok(TrajectoryRow { step: e.step_count, mean: e.mean(), l1_to_reference: l1 })
    };
    let mut rows = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        rows.push(record(ensemble)?);
        step(ensemble, dynamics)?;
    }
    rows.push(record(ensemble)?);
    Ok(rows)
}

/// CSV with columns `step, mean, l1_to_reference`.
pub fn write_trajectory_csv<T: Real, W: Write>(rows: &[TrajectoryRow<T>], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "mean", "l1_to_reference"])?;
    for r in rows {
        wr.write_record([r.step.to_string(), fmt_float(r.mean), r.l1_to_reference.map(fmt_float).unwrap_or_default()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Histogram averaged over `samples` consecutive steps after `burn_in`.
pub fn time_averaged_density<T: Real>(
    ensemble: &mut ParticleEnsemble<T>,
    dynamics: &ParticleDynamics<T>,
    burn_in: usize,
    samples: usize,
    n: usize,
) -> Result<GridDensity<T>> {
    if samples == 0 {
        return Err(Error::config("time average needs at least one sample"));
    }
    for _ in 0..burn_in {
        step(ensemble, dynamics)?;
    }
    let mut acc = vec![T::zero(); n];
    for _ in 0..samples {
        step(ensemble, dynamics)?;
        for (a, v) in acc.iter_mut().zip(histogram(&ensemble.states, n)?) {
            *a += v;
        }
    }
    let s = T::from_count(samples);
    GridDensity::normalized(acc.into_iter().map(|v| v / s).collect())
}
