//! Molecular-dynamics propagation: velocity Verlet, an optional Nosé–Hoover
//! thermostat, Maxwell–Boltzmann velocity initialization and a divergence
//! guard that aborts runaway simulations while preserving the frames
//! collected so far.
//!
//! Units follow the rest of the crate: positions in Å, time in fs, energies
//! in eV, forces in eV/Å, masses in amu. Accelerations pick up the
//! [`FORCE_TO_ACCEL`](crate::chem::FORCE_TO_ACCEL) conversion so velocities
//! come out in Å/fs.

use crate::chem::{ChemError, Conformation, ElementTable, Trajectory, BOLTZMANN_EV_PER_K};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Any position component beyond this magnitude (Å) aborts the run.
pub const MAX_COORDINATE: f64 = 1e4;
/// Any velocity component beyond this magnitude (Å/fs) aborts the run.
pub const MAX_SPEED: f64 = 1e2;

pub type ProviderError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum MdError {
    #[error("force provider failed at step {step}: {source}")]
    Provider { step: usize, source: ProviderError },
    #[error("simulation diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Frames recorded before the abort, always at least the initial one.
        partial: Trajectory,
    },
    #[error("snapshot interval must be at least 1")]
    ZeroSnapshotInterval,
    #[error("timestep must be positive, got {0}")]
    NonPositiveTimestep(f64),
    #[error("initial velocities have shape ({rows}, {cols}), expected ({atoms}, 3)")]
    VelocityShape {
        rows: usize,
        cols: usize,
        atoms: usize,
    },
    #[error("thermostat needs at least two atoms (no internal degrees of freedom)")]
    NoThermalDof,
    #[error("temperature must be non-negative, got {0}")]
    NegativeTemperature(f64),
    #[error(transparent)]
    Chem(#[from] ChemError),
}

/// Source of energies and forces for the integrator. Implemented by the
/// analytic reference potential and by trained models.
pub trait ForceProvider {
    /// Potential energy (eV) and per-atom forces (n×3, eV/Å).
    fn energy_forces(
        &mut self,
        positions: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>), ProviderError>;
}

/// Wraps a provider and flips the sign of its forces (energy untouched).
/// A model driven this way runs uphill — a controlled failure mode for
/// exercising collapse diagnostics.
pub struct NegatedProvider<P>(pub P);

impl<P: ForceProvider> ForceProvider for NegatedProvider<P> {
    fn energy_forces(
        &mut self,
        positions: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>), ProviderError> {
        let (e, f) = self.0.energy_forces(positions)?;
        Ok((e, f.mapv(|x| -x)))
    }
}

/// How to populate velocities at step zero.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityInit {
    Zero,
    /// Per-component normal draw at the given temperature, deterministic in
    /// the seed, with the center-of-mass velocity removed afterwards.
    MaxwellBoltzmann { temperature_k: f64, seed: u64 },
    /// Explicit n×3 velocities in Å/fs, e.g. to restart or reverse a run.
    Given(Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thermostat {
    pub temperature_k: f64,
    /// Coupling time constant in fs; `None` means 100 timesteps.
    pub tau_fs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_steps: usize,
    pub timestep_fs: f64,
    /// Record every k-th step in addition to the initial state.
    pub snapshot_every: usize,
    pub init: VelocityInit,
    /// `None` runs constant-energy (NVE) dynamics.
    pub thermostat: Option<Thermostat>,
    /// Tag stored on the produced trajectory.
    pub source_tag: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            timestep_fs: 0.5,
            snapshot_every: 1,
            init: VelocityInit::Zero,
            thermostat: None,
            source_tag: "md".to_string(),
        }
    }
}

/// Instantaneous integrator state handed to observers after every step.
#[derive(Debug, Clone)]
pub struct SimState {
    pub step: usize,
    pub positions: Array2<f64>,
    pub velocities: Array2<f64>,
    pub forces: Array2<f64>,
    pub potential_ev: f64,
    pub kinetic_ev: f64,
    /// Nosé–Hoover friction variable; stays 0 in NVE runs.
    pub zeta: f64,
}

impl SimState {
    pub fn total_energy_ev(&self) -> f64 {
        self.potential_ev + self.kinetic_ev
    }

    /// Instantaneous temperature from equipartition over the internal
    /// degrees of freedom (3n − 3; the COM momentum is conserved).
    pub fn temperature_k(&self) -> f64 {
        let n_dof = 3 * self.positions.nrows() - 3;
        if n_dof == 0 {
            return 0.0;
        }
        2.0 * self.kinetic_ev / (n_dof as f64 * BOLTZMANN_EV_PER_K)
    }
}

/// Kinetic energy in eV for velocities in Å/fs and masses in amu.
pub fn kinetic_energy_ev(velocities: &Array2<f64>, masses: &[f64]) -> f64 {
    let f2a = crate::chem::FORCE_TO_ACCEL;
    velocities
        .outer_iter()
        .zip(masses)
        .map(|(v, &m)| 0.5 * m * v.iter().map(|x| x * x).sum::<f64>() / f2a)
        .sum()
}

/// Maxwell–Boltzmann velocities: each component drawn independently from a
/// zero-mean normal whose variance satisfies equipartition at
/// `temperature_k`, in a fixed order (atom-major, then x, y, z); the
/// center-of-mass velocity is then subtracted so total momentum is exactly
/// zero. A temperature of zero yields exact zeros.
pub fn maxwell_boltzmann_velocities(
    masses: &[f64],
    temperature_k: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, MdError> {
    if temperature_k < 0.0 {
        return Err(MdError::NegativeTemperature(temperature_k));
    }
    let n = masses.len();
    let mut v = Array2::zeros((n, 3));
    if temperature_k == 0.0 {
        return Ok(v);
    }
    let f2a = crate::chem::FORCE_TO_ACCEL;
    for (i, &m) in masses.iter().enumerate() {
        let sigma = (BOLTZMANN_EV_PER_K * temperature_k * f2a / m).sqrt();
        let dist = Normal::new(0.0, sigma).expect("finite stddev");
        for axis in 0..3 {
            v[[i, axis]] = dist.sample(rng);
        }
    }
    let total_mass: f64 = masses.iter().sum();
    for axis in 0..3 {
        let p: f64 = (0..n).map(|i| masses[i] * v[[i, axis]]).sum();
        let vcom = p / total_mass;
        for i in 0..n {
            v[[i, axis]] -= vcom;
        }
    }
    Ok(v)
}

fn check_divergence(
    step: usize,
    positions: &Array2<f64>,
    velocities: &Array2<f64>,
) -> Result<(), (usize, String)> {
    for (i, row) in positions.outer_iter().enumerate() {
        for (axis, &x) in row.iter().enumerate() {
            if !x.is_finite() || x.abs() > MAX_COORDINATE {
                return Err((step, format!("coordinate of atom {i} axis {axis} is {x}")));
            }
        }
    }
    for (i, row) in velocities.outer_iter().enumerate() {
        for (axis, &x) in row.iter().enumerate() {
            if !x.is_finite() || x.abs() > MAX_SPEED {
                return Err((step, format!("velocity of atom {i} axis {axis} is {x}")));
            }
        }
    }
    Ok(())
}

/// Runs the simulation, invoking `observer` with the state after velocity
/// initialization (step 0) and after every subsequent step.
///
/// Snapshots are taken at step 0 and every `snapshot_every`-th step, so the
/// returned trajectory holds `1 + n_steps / snapshot_every` frames, each
/// labeled with the provider's energy and forces. The trajectory's timestep
/// is the interval between recorded frames.
pub fn simulate_observed<P: ForceProvider>(
    provider: &mut P,
    initial: &Conformation,
    table: &ElementTable,
    config: &SimConfig,
    mut observer: impl FnMut(usize, &SimState),
) -> Result<Trajectory, MdError> {
    if config.snapshot_every == 0 {
        return Err(MdError::ZeroSnapshotInterval);
    }
    if !(config.timestep_fs > 0.0) {
        return Err(MdError::NonPositiveTimestep(config.timestep_fs));
    }
    let species = initial.species().to_vec();
    let masses = table.masses_of(&species)?;
    let n = masses.len();
    let dt = config.timestep_fs;
    let f2a = crate::chem::FORCE_TO_ACCEL;

    let mut positions = initial.positions().clone();
    let mut velocities = match &config.init {
        VelocityInit::Zero => Array2::zeros((n, 3)),
        VelocityInit::MaxwellBoltzmann {
            temperature_k,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            maxwell_boltzmann_velocities(&masses, *temperature_k, &mut rng)?
        }
        VelocityInit::Given(v) => {
            if v.dim() != (n, 3) {
                return Err(MdError::VelocityShape {
                    rows: v.nrows(),
                    cols: v.ncols(),
                    atoms: n,
                });
            }
            v.clone()
        }
    };

    // Thermostat constants. Q couples the friction variable to kinetic
    // energy fluctuations; N_f excludes the conserved COM momentum.
    let nh = match &config.thermostat {
        Some(t) => {
            if t.temperature_k < 0.0 {
                return Err(MdError::NegativeTemperature(t.temperature_k));
            }
            let n_dof = 3.0 * n as f64 - 3.0;
            if n_dof <= 0.0 {
                return Err(MdError::NoThermalDof);
            }
            let tau = t.tau_fs.unwrap_or(100.0 * dt);
            let q = n_dof * BOLTZMANN_EV_PER_K * t.temperature_k * tau * tau;
            Some((t.temperature_k, n_dof, q))
        }
        None => None,
    };
    let mut zeta = 0.0_f64;

    let eval = |provider: &mut P, step: usize, pos: &Array2<f64>| {
        provider
            .energy_forces(pos)
            .map_err(|source| MdError::Provider { step, source })
    };
    let accel = |forces: &Array2<f64>| {
        let mut a = forces.clone();
        for (mut row, &m) in a.outer_iter_mut().zip(&masses) {
            row.mapv_inplace(|f| f * f2a / m);
        }
        a
    };

    let (mut potential, mut forces) = eval(provider, 0, &positions)?;
    let mut frames = vec![Conformation::with_labels(
        positions.clone(),
        species.clone(),
        Some(potential),
        Some(forces.clone()),
    )?];

    let make_state = |step: usize,
                      pos: &Array2<f64>,
                      vel: &Array2<f64>,
                      frc: &Array2<f64>,
                      pot: f64,
                      zeta: f64| SimState {
        step,
        positions: pos.clone(),
        velocities: vel.clone(),
        forces: frc.clone(),
        potential_ev: pot,
        kinetic_ev: kinetic_energy_ev(vel, &masses),
        zeta,
    };
    observer(
        0,
        &make_state(0, &positions, &velocities, &forces, potential, zeta),
    );

    for step in 1..=config.n_steps {
        let a = accel(&forces);
        let v_half = match nh {
            None => &velocities + &(&a * (0.5 * dt)),
            // v += dt/2 (a − ζ v)
            Some(_) => &velocities + &((&a - &(&velocities * zeta)) * (0.5 * dt)),
        };
        positions = &positions + &(&v_half * dt);

        let zeta_half = if let Some((t_target, n_dof, q)) = nh {
            let ke = kinetic_energy_ev(&velocities, &masses);
            zeta + 0.5 * dt * (2.0 * ke - n_dof * BOLTZMANN_EV_PER_K * t_target) / q
        } else {
            0.0
        };

        let (pot_new, forces_new) = eval(provider, step, &positions)?;
        potential = pot_new;
        forces = forces_new;
        let a_new = accel(&forces);

        velocities = match nh {
            None => &v_half + &(&a_new * (0.5 * dt)),
            Some((t_target, n_dof, q)) => {
                let ke_half = kinetic_energy_ev(&v_half, &masses);
                let zeta_new = zeta_half
                    + 0.5 * dt * (2.0 * ke_half - n_dof * BOLTZMANN_EV_PER_K * t_target) / q;
                zeta = zeta_new;
                (&v_half + &(&a_new * (0.5 * dt))) / (1.0 + 0.5 * dt * zeta_new)
            }
        };

        if let Err((s, reason)) = check_divergence(step, &positions, &velocities) {
            let partial = Trajectory::new(
                frames,
                dt * config.snapshot_every as f64,
                config.source_tag.clone(),
            )?;
            return Err(MdError::Diverged {
                step: s,
                reason,
                partial,
            });
        }

        if step % config.snapshot_every == 0 {
            frames.push(Conformation::with_labels(
                positions.clone(),
                species.clone(),
                Some(potential),
                Some(forces.clone()),
            )?);
        }
        observer(
            step,
            &make_state(step, &positions, &velocities, &forces, potential, zeta),
        );
    }

    Ok(Trajectory::new(
        frames,
        dt * config.snapshot_every as f64,
        config.source_tag.clone(),
    )?)
}

/// [`simulate_observed`] without an observer.
pub fn simulate<P: ForceProvider>(
    provider: &mut P,
    initial: &Conformation,
    table: &ElementTable,
    config: &SimConfig,
) -> Result<Trajectory, MdError> {
    simulate_observed(provider, initial, table, config, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{ElementTable, FORCE_TO_ACCEL};
    use approx::assert_relative_eq;
    use ndarray::array;

    /// Independent harmonic wells: E = Σ ½ k |r_i − c_i|², F = −k (r − c).
    struct Wells {
        k: f64,
        centers: Array2<f64>,
    }

    impl ForceProvider for Wells {
        fn energy_forces(
            &mut self,
            positions: &Array2<f64>,
        ) -> Result<(f64, Array2<f64>), ProviderError> {
            let d = positions - &self.centers;
            let e = 0.5 * self.k * d.iter().map(|x| x * x).sum::<f64>();
            Ok((e, d.mapv(|x| -self.k * x)))
        }
    }

    /// Free particles: no potential at all.
    struct Free;

    impl ForceProvider for Free {
        fn energy_forces(
            &mut self,
            positions: &Array2<f64>,
        ) -> Result<(f64, Array2<f64>), ProviderError> {
            Ok((0.0, Array2::zeros(positions.dim())))
        }
    }

    /// Table with a test particle whose mass cancels the unit conversion:
    /// a = F exactly, so ω = √k for a unit well.
    fn unit_particle_table() -> ElementTable {
        ElementTable::standard()
            .with_element("X", FORCE_TO_ACCEL)
            .unwrap()
    }

    fn lone_atom(table: &ElementTable, x: f64) -> Conformation {
        let id = table.id_of("X").unwrap();
        Conformation::new(array![[x, 0.0, 0.0]], vec![id]).unwrap()
    }

    /// Least-squares slope of y against sample index.
    fn fit_slope(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let xm = (n - 1.0) / 2.0;
        let ym = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in ys.iter().enumerate() {
            let dx = i as f64 - xm;
            num += dx * (y - ym);
            den += dx * dx;
        }
        num / den
    }

    #[test]
    fn oscillator_energy_drift_stays_tiny_over_long_runs() {
        // Unit oscillator (k = 1, unit-acceleration mass, dt = 0.5, ω·dt = 0.5):
        // velocity Verlet conserves a shadow Hamiltonian, so total energy
        // oscillates but its secular trend over 1e5 steps must stay below
        // 1e-4 relative.
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        let config = SimConfig {
            n_steps: 100_000,
            timestep_fs: 0.5,
            snapshot_every: 1,
            ..SimConfig::default()
        };
        let mut energies = Vec::with_capacity(config.n_steps + 1);
        simulate_observed(&mut wells, &init, &table, &config, |_, s| {
            energies.push(s.total_energy_ev());
        })
        .unwrap();
        assert_eq!(energies.len(), 100_001);
        let e0 = energies[0];
        assert!(e0 > 0.0);
        let drift = fit_slope(&energies) * energies.len() as f64 / e0;
        assert!(
            drift.abs() <= 1e-4,
            "relative secular drift {drift} exceeds 1e-4"
        );
    }

    #[test]
    fn oscillator_period_matches_theory() {
        // ω = √(k·f2a/m) = 1 for the unit particle, so the period is 2π fs.
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        let config = SimConfig {
            n_steps: 10_000,
            timestep_fs: 0.001,
            snapshot_every: 1,
            ..SimConfig::default()
        };
        let mut xs = Vec::new();
        simulate_observed(&mut wells, &init, &table, &config, |_, s| {
            xs.push(s.positions[[0, 0]]);
        })
        .unwrap();
        let period_idx = (2.0 * std::f64::consts::PI / 0.001).round() as usize;
        assert_relative_eq!(xs[period_idx], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn velocity_verlet_is_time_reversible() {
        let table = ElementTable::standard();
        let h = table.id_of("H").unwrap();
        let c = table.id_of("C").unwrap();
        let init = Conformation::new(
            array![[0.0, 0.0, 0.0], [1.2, 0.3, -0.4], [-0.8, 1.0, 0.6]],
            vec![c, h, h],
        )
        .unwrap();
        let forward = SimConfig {
            n_steps: 100,
            timestep_fs: 0.5,
            snapshot_every: 1,
            init: VelocityInit::MaxwellBoltzmann {
                temperature_k: 300.0,
                seed: 7,
            },
            ..SimConfig::default()
        };
        let mut wells = Wells {
            k: 3.0,
            centers: init.positions().clone(),
        };
        let mut final_state: Option<SimState> = None;
        simulate_observed(&mut wells, &init, &table, &forward, |_, s| {
            final_state = Some(s.clone());
        })
        .unwrap();
        let end = final_state.unwrap();

        // Negate velocities and integrate the same number of steps: the
        // positions must retrace to the start within floating-point noise.
        let turned = Conformation::new(end.positions.clone(), init.species().to_vec()).unwrap();
        let backward = SimConfig {
            init: VelocityInit::Given(end.velocities.mapv(|v| -v)),
            ..forward
        };
        let mut back_state: Option<SimState> = None;
        simulate_observed(&mut wells, &turned, &table, &backward, |_, s| {
            back_state = Some(s.clone());
        })
        .unwrap();
        let back = back_state.unwrap();
        for (a, b) in back.positions.iter().zip(init.positions().iter()) {
            assert!((a - b).abs() <= 1e-8, "reversal residual {}", (a - b).abs());
        }
    }

    #[test]
    fn maxwell_boltzmann_equipartition_and_zero_momentum() {
        let n = 1000;
        let masses: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 1.008 } else { 12.011 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = maxwell_boltzmann_velocities(&masses, 300.0, &mut rng).unwrap();

        // Total momentum is zero by construction.
        for axis in 0..3 {
            let p: f64 = (0..n).map(|i| masses[i] * v[[i, axis]]).sum();
            assert!(p.abs() < 1e-10, "momentum along {axis} = {p}");
        }

        // Kinetic energy per internal degree of freedom within 3% of ½kT.
        let ke = kinetic_energy_ev(&v, &masses);
        let n_dof = (3 * n - 3) as f64;
        let per_dof = ke / n_dof;
        let expected = 0.5 * BOLTZMANN_EV_PER_K * 300.0;
        assert_relative_eq!(per_dof, expected, max_relative = 0.03);
    }

    #[test]
    fn zero_temperature_gives_exact_zero_velocities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = maxwell_boltzmann_velocities(&[1.0, 2.0, 3.0], 0.0, &mut rng).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_reproduces_velocities_bitwise() {
        let masses = vec![1.008, 12.011, 12.011, 1.008];
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let v1 = maxwell_boltzmann_velocities(&masses, 450.0, &mut r1).unwrap();
        let v2 = maxwell_boltzmann_velocities(&masses, 450.0, &mut r2).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn snapshot_count_follows_interval() {
        let table = unit_particle_table();
        let init = lone_atom(&table, 0.5);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        for (n_steps, every, want) in [(10, 3, 4), (9, 3, 4), (0, 5, 1), (7, 1, 8)] {
            let config = SimConfig {
                n_steps,
                timestep_fs: 0.1,
                snapshot_every: every,
                ..SimConfig::default()
            };
            let traj = simulate(&mut wells, &init, &table, &config).unwrap();
            assert_eq!(traj.len(), want, "n_steps={n_steps} every={every}");
            assert_relative_eq!(traj.timestep_fs(), 0.1 * every as f64);
            // Every frame carries the provider's labels.
            assert!(traj
                .frames()
                .iter()
                .all(|f| f.ref_energy().is_some() && f.ref_forces().is_some()));
        }
    }

    #[test]
    fn runaway_simulation_aborts_with_partial_trajectory() {
        // Inverted well: forces push away from the origin, exponential blowup.
        struct Inverted;
        impl ForceProvider for Inverted {
            fn energy_forces(
                &mut self,
                positions: &Array2<f64>,
            ) -> Result<(f64, Array2<f64>), ProviderError> {
                Ok((0.0, positions.mapv(|x| 50.0 * x)))
            }
        }
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let config = SimConfig {
            n_steps: 100_000,
            timestep_fs: 0.5,
            snapshot_every: 1,
            ..SimConfig::default()
        };
        let err = simulate(&mut Inverted, &init, &table, &config).unwrap_err();
        match err {
            MdError::Diverged { step, partial, .. } => {
                assert!(step > 0 && step < 100_000, "blowup detected at {step}");
                assert!(!partial.is_empty());
                assert!(partial.len() <= step + 1);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn nan_forces_abort() {
        struct NanForces;
        impl ForceProvider for NanForces {
            fn energy_forces(
                &mut self,
                positions: &Array2<f64>,
            ) -> Result<(f64, Array2<f64>), ProviderError> {
                Ok((0.0, positions.mapv(|_| f64::NAN)))
            }
        }
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let config = SimConfig {
            n_steps: 10,
            timestep_fs: 0.5,
            snapshot_every: 1,
            ..SimConfig::default()
        };
        let err = simulate(&mut NanForces, &init, &table, &config).unwrap_err();
        assert!(matches!(err, MdError::Diverged { step: 1, .. }));
    }

    #[test]
    fn thermostat_holds_temperature_near_target() {
        // 64 independent wells at 300 K: after equilibration the mean
        // instantaneous temperature must sit near the target.
        let table = ElementTable::standard();
        let h = table.id_of("H").unwrap();
        let n = 64;
        let centers = Array2::from_shape_fn((n, 3), |(i, a)| {
            (i as f64 * 3.0) * if a == 0 { 1.0 } else { 0.0 }
        });
        let init = Conformation::new(centers.clone(), vec![h; n]).unwrap();
        let mut wells = Wells { k: 2.0, centers };
        let config = SimConfig {
            n_steps: 20_000,
            timestep_fs: 0.2,
            snapshot_every: 1000,
            init: VelocityInit::MaxwellBoltzmann {
                temperature_k: 300.0,
                seed: 3,
            },
            thermostat: Some(Thermostat {
                temperature_k: 300.0,
                tau_fs: None,
            }),
            ..SimConfig::default()
        };
        let mut temps = Vec::new();
        simulate_observed(&mut wells, &init, &table, &config, |step, s| {
            if step > 5000 {
                temps.push(s.temperature_k());
            }
        })
        .unwrap();
        let mean = temps.iter().sum::<f64>() / temps.len() as f64;
        assert!(
            (mean - 300.0).abs() / 300.0 < 0.10,
            "mean temperature {mean} K should be within 10% of 300 K"
        );
    }

    #[test]
    fn nve_without_thermostat_keeps_zeta_zero() {
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        let config = SimConfig {
            n_steps: 50,
            timestep_fs: 0.1,
            snapshot_every: 10,
            ..SimConfig::default()
        };
        simulate_observed(&mut wells, &init, &table, &config, |_, s| {
            assert_eq!(s.zeta, 0.0);
        })
        .unwrap();
    }

    #[test]
    fn thermostat_on_single_atom_is_rejected() {
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        let config = SimConfig {
            thermostat: Some(Thermostat {
                temperature_k: 100.0,
                tau_fs: None,
            }),
            ..SimConfig::default()
        };
        let err = simulate(&mut wells, &init, &table, &config).unwrap_err();
        assert!(matches!(err, MdError::NoThermalDof));
    }

    #[test]
    fn given_velocities_must_match_atom_count() {
        let table = unit_particle_table();
        let init = lone_atom(&table, 1.0);
        let mut wells = Wells {
            k: 1.0,
            centers: Array2::zeros((1, 3)),
        };
        let config = SimConfig {
            init: VelocityInit::Given(Array2::zeros((2, 3))),
            ..SimConfig::default()
        };
        let err = simulate(&mut wells, &init, &table, &config).unwrap_err();
        assert!(matches!(err, MdError::VelocityShape { atoms: 1, .. }));
    }

    #[test]
    fn negated_provider_flips_forces_only() {
        let mut wells = Wells {
            k: 2.0,
            centers: Array2::zeros((1, 3)),
        };
        let pos = array![[1.0, -0.5, 0.0]];
        let (e, f) = wells.energy_forces(&pos).unwrap();
        let mut negated = NegatedProvider(Wells {
            k: 2.0,
            centers: Array2::zeros((1, 3)),
        });
        let (e_neg, f_neg) = negated.energy_forces(&pos).unwrap();
        assert_eq!(e, e_neg);
        assert_eq!(f.mapv(|x| -x), f_neg);
    }

    #[test]
    fn free_particles_keep_kinetic_energy_exactly() {
        let table = ElementTable::standard();
        let h = table.id_of("H").unwrap();
        let init = Conformation::new(
            Array2::from_shape_fn((10, 3), |(i, a)| i as f64 + 0.1 * a as f64),
            vec![h; 10],
        )
        .unwrap();
        let config = SimConfig {
            n_steps: 100,
            timestep_fs: 0.5,
            snapshot_every: 100,
            init: VelocityInit::MaxwellBoltzmann {
                temperature_k: 200.0,
                seed: 1,
            },
            ..SimConfig::default()
        };
        let mut first_ke = None;
        let mut last_ke = 0.0;
        simulate_observed(&mut Free, &init, &table, &config, |_, s| {
            first_ke.get_or_insert(s.kinetic_ev);
            last_ke = s.kinetic_ev;
        })
        .unwrap();
        assert_relative_eq!(first_ke.unwrap(), last_ke, max_relative = 1e-12);
    }
}
