//! Shared fixtures for the criterion benchmarks: deterministic thermal-ish
//! conformations of the built-in molecules without running real dynamics.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use etff_core::oracle::{builtin_molecule, initial_conformation, MoleculeSpec};
use etff_core::{Conformation, ElementTable, Trajectory};

/// The largest built-in molecule plus its relaxed geometry.
pub fn chain12(table: &ElementTable) -> (MoleculeSpec, Conformation) {
    let spec = builtin_molecule("chain12").expect("built-in exists");
    let relaxed = initial_conformation(&spec, table).expect("relaxes");
    (spec, relaxed)
}

/// Gaussian-jittered copies of a relaxed geometry; amplitude roughly matches
/// thermal displacements so kernel timings see realistic neighbor counts.
pub fn jittered_frames(base: &Conformation, n_frames: usize, seed: u64) -> Vec<Conformation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_frames)
        .map(|_| {
            let mut pos = base.positions().clone();
            pos.mapv_inplace(|x| x + 0.05 * (rng.gen::<f64>() - 0.5));
            Conformation::new(pos, base.species().to_vec()).expect("valid frame")
        })
        .collect()
}

/// A trajectory of jittered frames, for the diagnostics benchmarks.
pub fn jittered_trajectory(base: &Conformation, n_frames: usize, seed: u64) -> Trajectory {
    Trajectory::new(jittered_frames(base, n_frames, seed), 0.5, "bench").expect("non-empty")
}

/// Positions of `base` as a fresh array, for oracle-level benchmarks.
pub fn positions_of(base: &Conformation) -> Array2<f64> {
    base.positions().clone()
}
