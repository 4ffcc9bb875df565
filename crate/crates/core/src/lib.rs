//! Self-consistent transfer operators for globally coupled maps.
//!
//! A population of agents evolving by `x ↦ Φ_{δ,μ}(T(x))`, where the
//! mean-field map `Φ` depends on the current distribution `μ` of the
//! population, induces the nonlinear operator `μ ↦ L_{δ,μ} μ`. This crate
//! discretizes that operator on a uniform grid and provides:
//!
//! * invariant densities by Picard iteration or by frozen-operator outer
//!   iteration ([`self_consistent`]);
//! * Lasota–Yorke fits, decay rates and the 2×2 contraction matrix
//!   ([`analysis`]);
//! * linear response at zero coupling ([`response`]);
//! * couplings maximizing the response of an observable ([`optimal_coupling`]);
//! * a direct `N`-agent simulation for cross-validation ([`particle_sim`]).
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common case.

pub mod analysis;
pub mod densities;
pub mod error;
pub mod linalg;
pub mod maps;
pub mod optimal_coupling;
pub mod particle_sim;
pub mod response;
pub mod scalar;
pub mod self_consistent;
pub mod transfer_ops;

pub use error::{Error, Result};
pub use scalar::Real;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type GridDensityF64 = densities::GridDensity<f64>;
pub type GridDensityF32 = densities::GridDensity<f32>;
pub type SignedGridFunctionF64 = densities::SignedGridFunction<f64>;
pub type SignedGridFunctionF32 = densities::SignedGridFunction<f32>;
pub type AtomicMeasureF64 = densities::AtomicMeasure<f64>;
pub type CircleMapF64 = maps::CircleMap<f64>;
pub type CircleMapF32 = maps::CircleMap<f32>;
pub type CouplingKernelF64 = maps::CouplingKernel<f64>;
pub type CouplingKernelF32 = maps::CouplingKernel<f32>;
pub type MeanFieldDiffeoF64 = maps::MeanFieldDiffeo<f64>;
pub type TransferMatrixF64 = transfer_ops::TransferMatrix<f64>;
pub type TransferMatrixF32 = transfer_ops::TransferMatrix<f32>;
pub type NoiseKernelF64 = transfer_ops::NoiseKernel<f64>;
pub type SelfConsistentModelF64 = self_consistent::SelfConsistentModel<f64>;
pub type SelfConsistentModelF32 = self_consistent::SelfConsistentModel<f32>;
