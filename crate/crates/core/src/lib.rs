//! Leading eigenpairs of the generator of an overdamped diffusion.
//!
//! The crate trains feedforward networks on a penalized variational loss to
//! approximate the first `K` eigenvalues and eigenfunctions of the generator,
//! and provides the supporting machinery: built-in model potentials, an
//! Euler–Maruyama sampler with importance-weight reweighting, weighted batch
//! estimators, a finite-volume reference solver for planar problems, and
//! rigid-body alignment for molecular-style inputs.

pub mod alignment;
pub mod eigen;
pub mod estimators;
pub mod fvm;
pub mod network;
pub mod potentials;
pub mod sampling;
pub mod training;

pub use estimators::{BatchEval, BatchFunctional, DiffusionAtStates, DiffusionData};
pub use network::{NetworkArchitecture, NetworkParams, Tanh};
pub use potentials::{Potential, PotentialSpec};
pub use sampling::{Minibatch, WeightedDataset};
pub use training::{EigenEstimate, TrainConfig};
