//! Analytic reference potential: harmonic bonds plus Lennard-Jones
//! interactions between atoms separated by three or more bonds. Cheap enough
//! to label tens of thousands of conformations with exact energies and
//! forces, which makes it the ground truth for training and evaluation.
//!
//! ```text
//! E = Σ_bonds k (d − r0)²  +  Σ_nonbonded 4ε [(σ/d)¹² − (σ/d)⁶]
//! ```
//!
//! Forces are the exact analytic gradient, so force labels and energy labels
//! are consistent with each other to machine precision.

use crate::chem::{ChemError, Conformation, ElementTable, Trajectory};
use crate::md::{self, ForceProvider, MdError, ProviderError, SimConfig, Thermostat, VelocityInit};
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Interacting atoms closer than this (Å) make the potential meaningless.
pub const MIN_SEPARATION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("molecule definition error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("molecule has no atoms")]
    NoAtoms,
    #[error("atom index {0} out of range for {1} atoms")]
    AtomIndex(usize, usize),
    #[error("bond {0}-{1} is listed more than once")]
    DuplicateBond(usize, usize),
    #[error("atom {0} is bonded to itself")]
    SelfBond(usize),
    #[error("bond {i}-{j} must have positive stiffness and rest length")]
    BadBondParams { i: usize, j: usize },
    #[error("no Lennard-Jones parameters for species pair {0}-{1}")]
    MissingLj(String, String),
    #[error("Lennard-Jones parameters for {0}-{1} must have eps >= 0 and sigma > 0")]
    BadLjParams(String, String),
    #[error("conformation species do not match the molecule definition")]
    SpeciesMismatch,
    #[error("positions have {rows} rows, molecule has {atoms} atoms")]
    PositionCount { rows: usize, atoms: usize },
    #[error("atoms {i} and {j} overlap (distance {d:.3e} Å)")]
    OverlappingAtoms { i: usize, j: usize, d: f64 },
    #[error("geometry relaxation stalled with residual force {0:.3e} eV/Å")]
    RelaxationFailed(f64),
    #[error("reference trajectory needs at least one frame")]
    EmptyReference,
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("reference dynamics failed: {0}")]
    Md(#[source] Box<MdError>),
}

impl From<MdError> for OracleError {
    fn from(e: MdError) -> Self {
        OracleError::Md(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondParams {
    /// Stiffness in eV/Å².
    pub k: f64,
    /// Rest length in Å.
    pub r0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LjParams {
    /// Well depth in eV.
    pub epsilon: f64,
    /// Zero-crossing distance in Å.
    pub sigma: f64,
}

/// Topology and force-field parameters of one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeSpec {
    name: String,
    symbols: Vec<String>,
    bonds: Vec<(usize, usize, BondParams)>,
    lj: BTreeMap<(String, String), LjParams>,
}

fn lj_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl MoleculeSpec {
    pub fn new(
        name: impl Into<String>,
        symbols: Vec<String>,
        bonds: Vec<(usize, usize, BondParams)>,
        lj: Vec<(String, String, LjParams)>,
    ) -> Result<Self, OracleError> {
        if symbols.is_empty() {
            return Err(OracleError::NoAtoms);
        }
        let n = symbols.len();
        let mut seen = BTreeSet::new();
        for &(i, j, p) in &bonds {
            if i >= n {
                return Err(OracleError::AtomIndex(i, n));
            }
            if j >= n {
                return Err(OracleError::AtomIndex(j, n));
            }
            if i == j {
                return Err(OracleError::SelfBond(i));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(OracleError::DuplicateBond(i.min(j), i.max(j)));
            }
            if !(p.k > 0.0 && p.r0 > 0.0) {
                return Err(OracleError::BadBondParams { i, j });
            }
        }
        let mut lj_map = BTreeMap::new();
        for (a, b, p) in lj {
            if !(p.epsilon >= 0.0 && p.sigma > 0.0) {
                return Err(OracleError::BadLjParams(a, b));
            }
            lj_map.insert(lj_key(&a, &b), p);
        }
        Ok(Self {
            name: name.into(),
            symbols,
            bonds,
            lj: lj_map,
        })
    }

    /// Parses the plain-text molecule format:
    ///
    /// ```text
    /// name = chain6
    /// [atoms]
    /// 0 = C
    /// [bonds]
    /// 0 1 = 10.0 1.5        # k, r0
    /// [lj]
    /// C C = 0.004 3.0       # eps, sigma
    /// ```
    ///
    /// `#` starts a comment; atom indices must cover 0..n with no gaps.
    pub fn parse(text: &str) -> Result<Self, OracleError> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            Preamble,
            Atoms,
            Bonds,
            Lj,
        }
        let err = |line: usize, msg: &str| OracleError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut section = Section::Preamble;
        let mut name: Option<String> = None;
        let mut atoms: BTreeMap<usize, String> = BTreeMap::new();
        let mut bonds: Vec<(usize, usize, BondParams)> = Vec::new();
        let mut lj: Vec<(String, String, LjParams)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, "unterminated section header"))?;
                section = match header {
                    "atoms" => Section::Atoms,
                    "bonds" => Section::Bonds,
                    "lj" => Section::Lj,
                    other => return Err(err(line_no, &format!("unknown section [{other}]"))),
                };
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(line_no, "expected `key = value`"))?;
            match section {
                Section::Preamble => {
                    if key == "name" {
                        name = Some(value.to_string());
                    } else {
                        return Err(err(line_no, &format!("unknown key `{key}`")));
                    }
                }
                Section::Atoms => {
                    let i: usize = key
                        .parse()
                        .map_err(|_| err(line_no, "atom index must be an integer"))?;
                    if atoms.insert(i, value.to_string()).is_some() {
                        return Err(err(line_no, &format!("atom {i} defined twice")));
                    }
                }
                Section::Bonds => {
                    let ids: Vec<&str> = key.split_whitespace().collect();
                    let params: Vec<&str> = value.split_whitespace().collect();
                    if ids.len() != 2 || params.len() != 2 {
                        return Err(err(line_no, "bond lines are `<i> <j> = <k> <r0>`"));
                    }
                    let parse_id = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| err(line_no, "bond atom index must be an integer"))
                    };
                    let parse_f = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| err(line_no, "bond parameters must be numbers"))
                    };
                    bonds.push((
                        parse_id(ids[0])?,
                        parse_id(ids[1])?,
                        BondParams {
                            k: parse_f(params[0])?,
                            r0: parse_f(params[1])?,
                        },
                    ));
                }
                Section::Lj => {
                    let syms: Vec<&str> = key.split_whitespace().collect();
                    let params: Vec<&str> = value.split_whitespace().collect();
                    if syms.len() != 2 || params.len() != 2 {
                        return Err(err(line_no, "lj lines are `<sym> <sym> = <eps> <sigma>`"));
                    }
                    let parse_f = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| err(line_no, "lj parameters must be numbers"))
                    };
                    lj.push((
                        syms[0].to_string(),
                        syms[1].to_string(),
                        LjParams {
                            epsilon: parse_f(params[0])?,
                            sigma: parse_f(params[1])?,
                        },
                    ));
                }
            }
        }

        let name = name.ok_or_else(|| err(0, "missing `name = ...`"))?;
        let n = atoms.len();
        if n == 0 {
            return Err(OracleError::NoAtoms);
        }
        let mut symbols = Vec::with_capacity(n);
        for i in 0..n {
            match atoms.get(&i) {
                Some(s) => symbols.push(s.clone()),
                None => {
                    return Err(err(0, &format!("atom indices must cover 0..{n}, missing {i}")))
                }
            }
        }
        Self::new(name, symbols, bonds, lj)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn atom_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn bonds(&self) -> &[(usize, usize, BondParams)] {
        &self.bonds
    }

    /// Species ids for this molecule under the given element table.
    pub fn species(&self, table: &ElementTable) -> Result<Vec<usize>, ChemError> {
        self.symbols.iter().map(|s| table.id_of(s)).collect()
    }
}

/// Built-in toy molecules, keyed by name: `chain6`, `chain9`, `chain12`.
pub fn builtin_molecule(name: &str) -> Option<MoleculeSpec> {
    let text = match name {
        "chain6" => include_str!("../assets/chain6.mol"),
        "chain9" => include_str!("../assets/chain9.mol"),
        "chain12" => include_str!("../assets/chain12.mol"),
        _ => return None,
    };
    Some(MoleculeSpec::parse(text).expect("built-in molecule definitions are valid"))
}

pub fn builtin_names() -> [&'static str; 3] {
    ["chain6", "chain9", "chain12"]
}

/// The analytic potential for one molecule, with interaction lists resolved.
pub struct OraclePotential {
    species: Vec<usize>,
    bonds: Vec<(usize, usize, BondParams)>,
    /// Unordered pairs ≥ 3 bonds apart, with their LJ parameters.
    nonbonded: Vec<(usize, usize, LjParams)>,
}

impl OraclePotential {
    /// Resolves species and interaction lists. Pairs that are bonded (1-2)
    /// or share a bonded neighbor (1-3) are excluded from Lennard-Jones;
    /// every remaining pair must have parameters.
    pub fn new(spec: &MoleculeSpec, table: &ElementTable) -> Result<Self, OracleError> {
        let species = spec.species(table)?;
        let n = spec.atom_count();

        let mut excluded: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(i, j, _) in &spec.bonds {
            excluded.insert((i.min(j), i.max(j)));
            neighbors[i].insert(j);
            neighbors[j].insert(i);
        }
        for center in 0..n {
            let adj: Vec<usize> = neighbors[center].iter().copied().collect();
            for (a, &i) in adj.iter().enumerate() {
                for &j in &adj[a + 1..] {
                    excluded.insert((i.min(j), i.max(j)));
                }
            }
        }

        let mut nonbonded = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if excluded.contains(&(i, j)) {
                    continue;
                }
                let key = lj_key(&spec.symbols[i], &spec.symbols[j]);
                let params = spec
                    .lj
                    .get(&key)
                    .ok_or_else(|| OracleError::MissingLj(key.0.clone(), key.1.clone()))?;
                nonbonded.push((i, j, *params));
            }
        }

        Ok(Self {
            species,
            bonds: spec.bonds.clone(),
            nonbonded,
        })
    }

    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn nonbonded_pairs(&self) -> &[(usize, usize, LjParams)] {
        &self.nonbonded
    }

    /// Energy (eV) and analytic forces (eV/Å) for raw positions; the row
    /// order must match the molecule definition.
    pub fn compute(&self, positions: &Array2<f64>) -> Result<(f64, Array2<f64>), OracleError> {
        let n = self.species.len();
        if positions.nrows() != n || positions.ncols() != 3 {
            return Err(OracleError::PositionCount {
                rows: positions.nrows(),
                atoms: n,
            });
        }
        let mut energy = 0.0;
        let mut forces = Array2::zeros((n, 3));

        let pair = |i: usize, j: usize| -> Result<(f64, [f64; 3]), OracleError> {
            let dx = [
                positions[[i, 0]] - positions[[j, 0]],
                positions[[i, 1]] - positions[[j, 1]],
                positions[[i, 2]] - positions[[j, 2]],
            ];
            let d = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
            if d < MIN_SEPARATION {
                return Err(OracleError::OverlappingAtoms { i, j, d });
            }
            Ok((d, dx))
        };
        // F_i = −dE/dd · (r_i − r_j)/d, F_j the negative: Newton's third law
        // holds exactly.
        let apply = |forces: &mut Array2<f64>, i: usize, j: usize, de_dd: f64, d: f64, dx: [f64; 3]| {
            for axis in 0..3 {
                let f = -de_dd * dx[axis] / d;
                forces[[i, axis]] += f;
                forces[[j, axis]] -= f;
            }
        };

        for &(i, j, p) in &self.bonds {
            let (d, dx) = pair(i, j)?;
            let stretch = d - p.r0;
            energy += p.k * stretch * stretch;
            apply(&mut forces, i, j, 2.0 * p.k * stretch, d, dx);
        }
        for &(i, j, p) in &self.nonbonded {
            let (d, dx) = pair(i, j)?;
            let sr6 = (p.sigma / d).powi(6);
            energy += 4.0 * p.epsilon * (sr6 * sr6 - sr6);
            let de_dd = 24.0 * p.epsilon * (sr6 - 2.0 * sr6 * sr6) / d;
            apply(&mut forces, i, j, de_dd, d, dx);
        }
        Ok((energy, forces))
    }

    /// [`OraclePotential::compute`] with a species check against the
    /// conformation's labels.
    pub fn evaluate(&self, c: &Conformation) -> Result<(f64, Array2<f64>), OracleError> {
        if c.species() != self.species.as_slice() {
            return Err(OracleError::SpeciesMismatch);
        }
        self.compute(c.positions())
    }
}

impl ForceProvider for OraclePotential {
    fn energy_forces(
        &mut self,
        positions: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>), ProviderError> {
        Ok(self.compute(positions)?)
    }
}

/// Deterministic starting geometry: atoms are placed along a zig-zag
/// following a breadth-first walk of the bond graph (chain continuations in
/// the xy-plane, side atoms pushed out of plane), then relaxed to the
/// potential's minimum by steepest descent. The same definition always
/// yields bitwise-identical output.
pub fn initial_conformation(
    spec: &MoleculeSpec,
    table: &ElementTable,
) -> Result<Conformation, OracleError> {
    let n = spec.atom_count();
    let potential = OraclePotential::new(spec, table)?;

    let mut rest: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j, p) in spec.bonds() {
        neighbors[i].push(j);
        neighbors[j].push(i);
        rest.insert((i.min(j), i.max(j)), p.r0);
    }
    for adj in &mut neighbors {
        adj.sort_unstable();
    }

    // Angle between successive backbone bonds and the horizontal.
    let zig = 0.61_f64;
    let (cz, sz) = (zig.cos(), zig.sin());
    let mut pos = Array2::zeros((n, 3));
    let mut placed = vec![false; n];
    let mut depth = vec![0usize; n];
    let mut queue = std::collections::VecDeque::new();

    // Disconnected fragments each start their own zig-zag, offset in x so
    // fragments cannot collide.
    let mut fragment_origin = 0.0_f64;
    for root in 0..n {
        if placed[root] {
            continue;
        }
        placed[root] = true;
        pos[[root, 0]] = fragment_origin;
        fragment_origin += 10.0;
        queue.push_back(root);
        while let Some(p) = queue.pop_front() {
            let sign = if depth[p] % 2 == 0 { 1.0 } else { -1.0 };
            let mut child_ordinal = 0usize;
            for &c in &neighbors[p] {
                if placed[c] {
                    continue;
                }
                placed[c] = true;
                depth[c] = depth[p] + 1;
                let r0 = rest[&(p.min(c), p.max(c))];
                let dir = match child_ordinal {
                    0 => [cz, sign * sz, 0.0],
                    1 => [0.0, -sign * 0.8, 0.6],
                    2 => [0.0, -sign * 0.8, -0.6],
                    k => {
                        // Rare high coordination: spread remaining children
                        // on a tilted fan.
                        let phi = 2.4 * k as f64;
                        let v = [phi.cos(), sign * phi.sin() * 0.5, 0.7];
                        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        [v[0] / norm, v[1] / norm, v[2] / norm]
                    }
                };
                for axis in 0..3 {
                    pos[[c, axis]] = pos[[p, axis]] + r0 * dir[axis];
                }
                child_ordinal += 1;
                queue.push_back(c);
            }
        }
    }

    // Inertial relaxation (FIRE): velocities accumulate along the downhill
    // direction and reset on overshoot. Unlike plain steepest descent this
    // copes with the stiff-bond / soft-LJ curvature spread, and it is fully
    // deterministic.
    let max_force = |f: &Array2<f64>| f.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    let (dt0, dt_max) = (0.05_f64, 0.3_f64);
    let mut dt = dt0;
    let mut alpha = 0.1_f64;
    let mut downhill_steps = 0usize;
    let mut vel: Array2<f64> = Array2::zeros((n, 3));
    let mut forces = potential.compute(&pos)?.1;
    // The flattest torsional modes are held only by weak 1-4 attractions, so
    // convergence takes many cheap iterations.
    for _ in 0..1_000_000 {
        if max_force(&forces) < 1e-8 {
            break;
        }
        let power: f64 = (&vel * &forces).sum();
        if power > 0.0 {
            downhill_steps += 1;
            if downhill_steps > 5 {
                dt = (dt * 1.1).min(dt_max);
                alpha *= 0.99;
            }
        } else {
            downhill_steps = 0;
            dt *= 0.5;
            alpha = 0.1;
            vel.fill(0.0);
        }
        vel = &vel + &(&forces * dt);
        let v_norm = vel.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f_norm = forces.iter().map(|x| x * x).sum::<f64>().sqrt();
        if f_norm > 0.0 {
            vel = &vel * (1.0 - alpha) + &(&forces * (alpha * v_norm / f_norm));
        }
        let trial = &pos + &(&vel * dt);
        match potential.compute(&trial) {
            Ok((_, f_new)) => {
                pos = trial;
                forces = f_new;
            }
            Err(_) => {
                // Stepped into an overlap: back off and restart the inertia.
                dt *= 0.5;
                vel.fill(0.0);
            }
        }
    }
    let residual = max_force(&forces);
    if residual > 1e-6 {
        return Err(OracleError::RelaxationFailed(residual));
    }

    Ok(Conformation::new(pos, spec.species(table)?)?)
}

/// Configuration for labeled reference-data generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    /// Total number of frames produced, at least 1.
    pub n_frames: usize,
    pub timestep_fs: f64,
    /// Sampling temperature; also the thermostat target.
    pub temperature_k: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            n_frames: 2000,
            timestep_fs: 0.5,
            temperature_k: 300.0,
            seed: 0,
        }
    }
}

/// Produces exactly `n_frames` conformations labeled with oracle energies
/// and forces: the relaxed starting geometry followed by thermostatted
/// dynamics at the sampling temperature, one frame per step. Deterministic
/// in the seed.
pub fn generate_reference_trajectory(
    spec: &MoleculeSpec,
    table: &ElementTable,
    config: &ReferenceConfig,
) -> Result<Trajectory, OracleError> {
    if config.n_frames == 0 {
        return Err(OracleError::EmptyReference);
    }
    let initial = initial_conformation(spec, table)?;
    let mut potential = OraclePotential::new(spec, table)?;
    let sim = SimConfig {
        n_steps: config.n_frames - 1,
        timestep_fs: config.timestep_fs,
        snapshot_every: 1,
        init: VelocityInit::MaxwellBoltzmann {
            temperature_k: config.temperature_k,
            seed: config.seed,
        },
        thermostat: Some(Thermostat {
            temperature_k: config.temperature_k,
            tau_fs: None,
        }),
        source_tag: format!("oracle:{}", spec.name()),
    };
    Ok(md::simulate(&mut potential, &initial, table, &sim)?)
}
