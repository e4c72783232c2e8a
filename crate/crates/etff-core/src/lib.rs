//! A small neural forcefield toolkit: an equivariant attention model trained
//! on forces from a classical reference potential, plus a molecular dynamics
//! engine, energy calibration and trajectory stability diagnostics.
//!
//! The crate is organized as:
//! - [`chem`]: shared molecular data types, units and constants
//! - [`oracle`]: the analytic harmonic-bond + Lennard-Jones reference potential
//! - [`autodiff`]: reverse-mode differentiation tape used for forces and
//!   training gradients
//! - [`model`]: the equivariant attention forcefield
//! - [`md`]: velocity Verlet / Nosé–Hoover dynamics with pluggable force
//!   providers
//! - [`train`]: force-centric optimization loop and the joint-vs-separate
//!   experiment harness
//! - [`calibrate`]: pseudo-energy to true-energy affine calibration
//! - [`metrics`]: force errors, RMSD and collapse-detection series
//! - [`io`]: extended-XYZ trajectories, molecule spec files and dataset
//!   manifests

pub mod autodiff;
pub mod calibrate;
pub mod chem;
pub mod io;
pub mod md;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use chem::{
    interatomic_distance_matrix, validate_conformation, AtomSpec, ChemError, Conformation,
    ElementTable, Trajectory, UnitSystem, BOLTZMANN_EV_PER_K, FORCE_TO_ACCEL,
};
