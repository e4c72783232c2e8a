//! Molecular data types, units and physical constants shared by every other
//! module.
//!
//! All quantities use a single fixed unit system: lengths in Å, time in fs,
//! energy in eV, mass in amu, temperature in K.

use ndarray::Array2;
use thiserror::Error;

/// Boltzmann constant in eV/K (CODATA).
pub const BOLTZMANN_EV_PER_K: f64 = 8.617_333_262e-5;

/// Conversion factor from (eV/Å)/amu to Å/fs²: `a = F/m * FORCE_TO_ACCEL`.
pub const FORCE_TO_ACCEL: f64 = 9.64853e-3;

/// Immutable record of the physical constants in effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSystem {
    boltzmann_ev_per_k: f64,
    force_to_accel: f64,
}

impl Default for UnitSystem {
    fn default() -> Self {
        Self {
            boltzmann_ev_per_k: BOLTZMANN_EV_PER_K,
            force_to_accel: FORCE_TO_ACCEL,
        }
    }
}

impl UnitSystem {
    /// Boltzmann constant in eV/K.
    pub fn boltzmann(&self) -> f64 {
        self.boltzmann_ev_per_k
    }

    /// Acceleration per unit force per unit mass, Å/fs² per (eV/Å)/amu.
    pub fn force_to_accel(&self) -> f64 {
        self.force_to_accel
    }
}

#[derive(Debug, Error)]
pub enum ChemError {
    #[error("species count {species} does not match {rows} position rows")]
    ShapeMismatch { rows: usize, species: usize },
    #[error("positions must have 3 columns, got {0}")]
    PositionColumns(usize),
    #[error("reference forces shape ({rows}, {cols}) does not match positions ({expected}, 3)")]
    ForcesShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("non-finite coordinate at atom {atom}, axis {axis}")]
    NonFiniteCoordinate { atom: usize, axis: usize },
    #[error("conformation has no atoms")]
    NoAtoms,
    #[error("element id {id} out of range (table has {known} entries)")]
    UnknownElement { id: usize, known: usize },
    #[error("unknown element symbol {0:?}")]
    UnknownSymbol(String),
    #[error("element mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("duplicate element symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("trajectory must contain at least one frame")]
    EmptyTrajectory,
    #[error("frame {0} species differ from frame 0")]
    InconsistentSpecies(usize),
    #[error("frame interval must be positive, got {0}")]
    NonPositiveTimestep(f64),
}

/// One entry of the element table: a type id plus its mass in amu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomSpec {
    pub element_id: usize,
    pub mass: f64,
}

/// Table of known elements. Defaults to H, C, O; extensible with
/// [`ElementTable::with_element`].
#[derive(Debug, Clone)]
pub struct ElementTable {
    symbols: Vec<String>,
    masses: Vec<f64>,
}

impl Default for ElementTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl ElementTable {
    /// The built-in table: H 1.008, C 12.011, O 15.999 amu.
    pub fn standard() -> Self {
        Self {
            symbols: vec!["H".into(), "C".into(), "O".into()],
            masses: vec![1.008, 12.011, 15.999],
        }
    }

    /// Extends the table with a new element, returning the extended table.
    pub fn with_element(mut self, symbol: &str, mass: f64) -> Result<Self, ChemError> {
        if mass <= 0.0 || !mass.is_finite() {
            return Err(ChemError::NonPositiveMass(mass));
        }
        if self.symbols.iter().any(|s| s == symbol) {
            return Err(ChemError::DuplicateSymbol(symbol.to_string()));
        }
        self.symbols.push(symbol.to_string());
        self.masses.push(mass);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id_of(&self, symbol: &str) -> Result<usize, ChemError> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| ChemError::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Result<&str, ChemError> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or(ChemError::UnknownElement {
                id,
                known: self.symbols.len(),
            })
    }

    pub fn mass(&self, id: usize) -> Result<f64, ChemError> {
        self.masses
            .get(id)
            .copied()
            .ok_or(ChemError::UnknownElement {
                id,
                known: self.masses.len(),
            })
    }

    pub fn spec(&self, id: usize) -> Result<AtomSpec, ChemError> {
        Ok(AtomSpec {
            element_id: id,
            mass: self.mass(id)?,
        })
    }

    /// Masses for a whole species sequence.
    pub fn masses_of(&self, species: &[usize]) -> Result<Vec<f64>, ChemError> {
        species.iter().map(|&id| self.mass(id)).collect()
    }
}

/// One snapshot of a molecule: positions, species and optional reference
/// labels. Immutable after construction; the constructor enforces all shape
/// and finiteness invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation {
    positions: Array2<f64>,
    species: Vec<usize>,
    ref_energy: Option<f64>,
    ref_forces: Option<Array2<f64>>,
}

impl Conformation {
    pub fn new(positions: Array2<f64>, species: Vec<usize>) -> Result<Self, ChemError> {
        Self::with_labels(positions, species, None, None)
    }

    pub fn with_labels(
        positions: Array2<f64>,
        species: Vec<usize>,
        ref_energy: Option<f64>,
        ref_forces: Option<Array2<f64>>,
    ) -> Result<Self, ChemError> {
        let c = Self {
            positions,
            species,
            ref_energy,
            ref_forces,
        };
        validate_conformation(&c)?;
        Ok(c)
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn ref_energy(&self) -> Option<f64> {
        self.ref_energy
    }

    pub fn ref_forces(&self) -> Option<&Array2<f64>> {
        self.ref_forces.as_ref()
    }

    pub fn atom_count(&self) -> usize {
        self.species.len()
    }

    /// The same geometry with different (or cleared) labels.
    pub fn relabeled(
        &self,
        ref_energy: Option<f64>,
        ref_forces: Option<Array2<f64>>,
    ) -> Result<Self, ChemError> {
        Self::with_labels(
            self.positions.clone(),
            self.species.clone(),
            ref_energy,
            ref_forces,
        )
    }
}

/// Checks every [`Conformation`] invariant, returning the input on success.
pub fn validate_conformation(c: &Conformation) -> Result<&Conformation, ChemError> {
    let (rows, cols) = c.positions.dim();
    if cols != 3 {
        return Err(ChemError::PositionColumns(cols));
    }
    if rows == 0 {
        return Err(ChemError::NoAtoms);
    }
    if c.species.len() != rows {
        return Err(ChemError::ShapeMismatch {
            rows,
            species: c.species.len(),
        });
    }
    for (atom, row) in c.positions.outer_iter().enumerate() {
        for (axis, value) in row.iter().enumerate() {
            if !value.is_finite() {
                return Err(ChemError::NonFiniteCoordinate { atom, axis });
            }
        }
    }
    if let Some(f) = &c.ref_forces {
        let (fr, fc) = f.dim();
        if fr != rows || fc != 3 {
            return Err(ChemError::ForcesShape {
                rows: fr,
                cols: fc,
                expected: rows,
            });
        }
    }
    Ok(c)
}

/// Checks that every species id of `c` is known to `table`.
pub fn validate_species(c: &Conformation, table: &ElementTable) -> Result<(), ChemError> {
    for &id in c.species() {
        if id >= table.len() {
            return Err(ChemError::UnknownElement {
                id,
                known: table.len(),
            });
        }
    }
    Ok(())
}

/// Ordered sequence of conformations from one simulation of one molecule.
/// `timestep_fs` is the time between consecutive frames.
#[derive(Debug, Clone)]
pub struct Trajectory {
    frames: Vec<Conformation>,
    timestep_fs: f64,
    source_tag: String,
}

impl Trajectory {
    pub fn new(
        frames: Vec<Conformation>,
        timestep_fs: f64,
        source_tag: impl Into<String>,
    ) -> Result<Self, ChemError> {
        if frames.is_empty() {
            return Err(ChemError::EmptyTrajectory);
        }
        if !(timestep_fs > 0.0) {
            return Err(ChemError::NonPositiveTimestep(timestep_fs));
        }
        let species0 = frames[0].species().to_vec();
        for (i, f) in frames.iter().enumerate().skip(1) {
            if f.species() != species0.as_slice() {
                return Err(ChemError::InconsistentSpecies(i));
            }
        }
        Ok(Self {
            frames,
            timestep_fs,
            source_tag: source_tag.into(),
        })
    }

    pub fn frames(&self) -> &[Conformation] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestep_fs(&self) -> f64 {
        self.timestep_fs
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn species(&self) -> &[usize] {
        self.frames[0].species()
    }

    /// A new trajectory holding a contiguous frame range of this one.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self, ChemError> {
        Self::new(
            self.frames[from..to].to_vec(),
            self.timestep_fs,
            self.source_tag.clone(),
        )
    }
}

/// Full n×n matrix of pairwise Euclidean distances in Å. Each pair is
/// computed once and mirrored, so the result is bitwise symmetric with a zero
/// diagonal.
pub fn interatomic_distance_matrix(c: &Conformation) -> Array2<f64> {
    let n = c.atom_count();
    let pos = c.positions();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pos[[j, 0]] - pos[[i, 0]];
            let dy = pos[[j, 1]] - pos[[i, 1]];
            let dz = pos[[j, 2]] - pos[[i, 2]];
            let dist = (dx * dx + dy * dy + dz * dz).sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_positions, random_rigid_motion, seeded_rng};
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn validate_accepts_well_formed_input() {
        let c = Conformation::new(
            array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![0, 1, 2],
        );
        assert!(c.is_ok());
    }

    #[test]
    fn validate_rejects_species_count_mismatch() {
        let err = Conformation::new(array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![0, 1, 2])
            .unwrap_err();
        assert!(matches!(err, ChemError::ShapeMismatch { rows: 2, species: 3 }));
    }

    #[test]
    fn validate_rejects_nan_coordinate() {
        let err = Conformation::new(array![[0.0, f64::NAN, 0.0]], vec![0]).unwrap_err();
        assert!(matches!(
            err,
            ChemError::NonFiniteCoordinate { atom: 0, axis: 1 }
        ));
    }

    #[test]
    fn validate_rejects_bad_forces_shape() {
        let err = Conformation::with_labels(
            array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![0, 0],
            None,
            Some(array![[0.0, 0.0, 0.0]]),
        )
        .unwrap_err();
        assert!(matches!(err, ChemError::ForcesShape { .. }));
    }

    #[test]
    fn distance_matrix_three_four_five() {
        let c = Conformation::new(array![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]], vec![0, 0]).unwrap();
        let d = interatomic_distance_matrix(&c);
        assert_eq!(d[[0, 1]], 5.0);
        assert_eq!(d[[1, 0]], 5.0);
        assert_eq!(d[[0, 0]], 0.0);
    }

    #[test]
    fn distance_matrix_single_atom() {
        let c = Conformation::new(array![[1.0, 2.0, 3.0]], vec![0]).unwrap();
        let d = interatomic_distance_matrix(&c);
        assert_eq!(d.dim(), (1, 1));
        assert_eq!(d[[0, 0]], 0.0);
    }

    #[test]
    fn distance_matrix_collinear_atoms() {
        let c = Conformation::new(
            array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![0, 0, 0],
        )
        .unwrap();
        let d = interatomic_distance_matrix(&c);
        assert_eq!(d[[0, 1]], 1.0);
        assert_eq!(d[[0, 2]], 2.0);
        assert_eq!(d[[1, 2]], 1.0);
    }

    #[test]
    fn distance_matrix_bitwise_symmetric() {
        let mut rng = seeded_rng(7);
        let pos = random_positions(&mut rng, 9, 3.0);
        let c = Conformation::new(pos, vec![0; 9]).unwrap();
        let d = interatomic_distance_matrix(&c);
        for i in 0..9 {
            assert_eq!(d[[i, i]], 0.0);
            for j in 0..9 {
                assert_eq!(d[[i, j]].to_bits(), d[[j, i]].to_bits());
            }
        }
    }

    #[test]
    fn distance_matrix_rigid_motion_invariant() {
        let mut rng = seeded_rng(11);
        for _ in 0..10 {
            let pos = random_positions(&mut rng, 8, 2.5);
            let moved = random_rigid_motion(&mut rng, &pos);
            let c0 = Conformation::new(pos, vec![0; 8]).unwrap();
            let c1 = Conformation::new(moved, vec![0; 8]).unwrap();
            let d0 = interatomic_distance_matrix(&c0);
            let d1 = interatomic_distance_matrix(&c1);
            for (a, b) in d0.iter().zip(d1.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_rejects_inconsistent_species() {
        let a = Conformation::new(array![[0.0, 0.0, 0.0]], vec![0]).unwrap();
        let b = Conformation::new(array![[0.0, 0.0, 0.0]], vec![1]).unwrap();
        let err = Trajectory::new(vec![a, b], 0.5, "test").unwrap_err();
        assert!(matches!(err, ChemError::InconsistentSpecies(1)));
    }

    #[test]
    fn trajectory_rejects_empty_and_bad_timestep() {
        assert!(matches!(
            Trajectory::new(vec![], 0.5, "test").unwrap_err(),
            ChemError::EmptyTrajectory
        ));
        let a = Conformation::new(array![[0.0, 0.0, 0.0]], vec![0]).unwrap();
        assert!(matches!(
            Trajectory::new(vec![a], 0.0, "test").unwrap_err(),
            ChemError::NonPositiveTimestep(_)
        ));
    }

    #[test]
    fn element_table_lookup() {
        let t = ElementTable::standard();
        assert_eq!(t.id_of("C").unwrap(), 1);
        assert_eq!(t.symbol(0).unwrap(), "H");
        assert_eq!(t.mass(2).unwrap(), 15.999);
        assert!(t.id_of("Xx").is_err());
        let t = t.with_element("N", 14.007).unwrap();
        assert_eq!(t.id_of("N").unwrap(), 3);
        assert!(t.clone().with_element("N", 14.007).is_err());
        assert!(t.with_element("Q", -1.0).is_err());
    }

    #[test]
    fn unit_system_values() {
        let u = UnitSystem::default();
        assert_eq!(u.boltzmann(), 8.617333262e-5);
        assert_eq!(u.force_to_accel(), 9.64853e-3);
    }
}
