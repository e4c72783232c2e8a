//! Equivariant-attention forcefield model.
//!
//! Per-atom scalar features `x` (n×D) and per-atom vector features `v`
//! (stored stacked as (3n)×D, three consecutive rows per atom) are refined
//! by attention layers whose weights depend on interatomic distance through
//! a Gaussian radial basis and a smooth cosine cutoff. Vector features are
//! built exclusively from unit bond directions, so they rotate with the
//! molecule while every scalar quantity — including the final energy — is
//! exactly invariant under rigid motions and atom relabeling.
//!
//! The energy is assembled on a differentiation tape; forces come out as
//! `−∂Φ/∂r` by reverse mode, and because the tape's backward pass is itself
//! recorded, losses built on those forces remain differentiable with
//! respect to parameters.

pub mod geometry;
pub mod params;
pub mod provider;

pub use provider::ModelProvider;

use crate::autodiff::{DiffError, DiffScalar, NodeId, Recording, Tape, NORM_EPS};
use crate::chem::{ChemError, Conformation};
use geometry::{neighbor_pairs, rbf_centers_gamma, PairList};
use ndarray::Array2;
use params::ModelParams;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("species id {id} out of range ({n_species} known species)")]
    SpeciesOutOfRange { id: usize, n_species: usize },
    #[error("positions have shape ({rows}, {cols}), expected ({atoms}, 3)")]
    PositionShape {
        rows: usize,
        cols: usize,
        atoms: usize,
    },
    #[error("flat parameter vector has {got} values, layout wants {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Chem(#[from] ChemError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of attention update layers.
    pub n_layers: usize,
    /// Feature width D (must be even and divisible by `n_heads`).
    pub dim: usize,
    /// Attention heads per layer.
    pub n_heads: usize,
    /// Gaussian radial basis size.
    pub n_rbf: usize,
    /// Interaction cutoff in Å.
    pub cutoff: f64,
    /// Number of distinct species ids the embedding table covers.
    pub n_species: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            dim: 128,
            n_heads: 8,
            n_rbf: 32,
            cutoff: 5.0,
            n_species: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.dim == 0 || self.n_heads == 0 {
            return bad("dim and n_heads must be positive".into());
        }
        if self.dim % self.n_heads != 0 {
            return bad(format!(
                "dim {} must be divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.dim % 2 != 0 {
            return bad(format!("dim {} must be even for the readout", self.dim));
        }
        if self.n_rbf < 2 {
            return bad("n_rbf must be at least 2".into());
        }
        if !(self.cutoff > 0.0) {
            return bad(format!("cutoff must be positive, got {}", self.cutoff));
        }
        if self.n_species == 0 {
            return bad("n_species must be at least 1".into());
        }
        Ok(())
    }
}

/// A forward pass recorded on a tape, ready for gradient extraction.
pub struct EnergyRecording {
    pub recording: Recording,
    pub energy: DiffScalar,
}

impl EnergyRecording {
    /// Force node `−∂Φ/∂r` on the same tape, so further computation (e.g. a
    /// force-matching loss) stays differentiable.
    pub fn force_node(&mut self) -> Result<NodeId, DiffError> {
        let grads = self
            .recording
            .tape
            .grad_nodes(self.energy.node, &[self.recording.positions])?;
        Ok(self.recording.tape.neg(grads[0]))
    }

    /// Materialized forces in eV/Å.
    pub fn forces(&mut self) -> Result<Array2<f64>, DiffError> {
        let node = self.force_node()?;
        Ok(self.recording.tape.value(node).clone())
    }
}

/// Model energy and forces for one conformation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub forces: Array2<f64>,
}

/// Configuration plus parameters; the unit everything else passes around.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_config(&config)?;
        Ok(Self { config, params })
    }

    /// Fresh trainable model, deterministic in the seed.
    pub fn initialize(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::initialize(&config, seed);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        params::save_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let (config, params) = params::load_checkpoint(path)?;
        Self::new(config, params)
    }

    fn check_inputs(&self, positions: &Array2<f64>, species: &[usize]) -> Result<(), ModelError> {
        if positions.nrows() != species.len() || positions.ncols() != 3 {
            return Err(ModelError::PositionShape {
                rows: positions.nrows(),
                cols: positions.ncols(),
                atoms: species.len(),
            });
        }
        for &id in species {
            if id >= self.config.n_species {
                return Err(ModelError::SpeciesOutOfRange {
                    id,
                    n_species: self.config.n_species,
                });
            }
        }
        Ok(())
    }

    /// Records the full forward pass for one conformation. The recording
    /// owns its tape; parameters are copied in as leaves in canonical order.
    pub fn record(
        &self,
        positions: &Array2<f64>,
        species: &[usize],
    ) -> Result<EnergyRecording, ModelError> {
        self.check_inputs(positions, species)?;
        let pairs = neighbor_pairs(positions, self.config.cutoff);
        let mut tape = Tape::new();
        let pos_node = tape.leaf(positions.clone());
        let param_ids: Vec<NodeId> = self
            .params
            .tensors()
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let energy = self.build_energy(&mut tape, pos_node, &param_ids, species, &pairs);
        let value = tape.scalar_value(energy);
        Ok(EnergyRecording {
            recording: Recording {
                tape,
                positions: pos_node,
                param_leaves: param_ids,
            },
            energy: DiffScalar {
                value,
                node: energy,
            },
        })
    }

    /// Energy and forces for raw positions.
    pub fn predict_raw(
        &self,
        positions: &Array2<f64>,
        species: &[usize],
    ) -> Result<Prediction, ModelError> {
        let mut rec = self.record(positions, species)?;
        let forces = rec.forces()?;
        Ok(Prediction {
            energy: rec.energy.value,
            forces,
        })
    }

    /// Energy and forces for a validated conformation.
    pub fn predict(&self, c: &Conformation) -> Result<Prediction, ModelError> {
        self.predict_raw(c.positions(), c.species())
    }

    /// Emits the whole computation graph from positions to the 1×1 energy
    /// node. `param_ids` must line up with the canonical tensor order.
    fn build_energy(
        &self,
        tape: &mut Tape,
        positions: NodeId,
        param_ids: &[NodeId],
        species: &[usize],
        pairs: &PairList,
    ) -> NodeId {
        let n = species.len();
        let d = self.config.dim;
        let dh = d / self.config.n_heads;
        let n_heads = self.config.n_heads;
        let k_rbf = self.config.n_rbf;
        let cutoff = self.config.cutoff;
        let p_count = pairs.len();

        let g = |name: &str| -> NodeId {
            param_ids[self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("unknown tensor {name}"))]
        };

        // ---- pair geometry ----
        let r_center = tape.gather_rows(positions, Rc::clone(&pairs.center));
        let r_neighbor = tape.gather_rows(positions, Rc::clone(&pairs.neighbor));
        let diff = tape.sub(r_neighbor, r_center); // P×3, points center → neighbor
        let diff_sq = tape.mul(diff, diff);
        let dist_sq = tape.sum_cols(diff_sq);
        let dist_sq_eps = tape.add_const(dist_sq, NORM_EPS);
        let dist = tape.sqrt(dist_sq_eps); // P×1
        let inv_dist = tape.recip(dist);
        let inv_b = tape.broadcast_col(inv_dist, 3);
        let unit = tape.mul(diff, inv_b); // P×3 unit bond directions

        let (mu, gamma) = rbf_centers_gamma(k_rbf, cutoff);
        let mu_leaf = tape.leaf(
            Array2::from_shape_vec((1, k_rbf), mu).expect("rbf center count"),
        );
        let mu_rows = tape.broadcast_row(mu_leaf, p_count);
        let dist_cols = tape.broadcast_col(dist, k_rbf);
        let centered = tape.sub(dist_cols, mu_rows);
        let centered_sq = tape.mul(centered, centered);
        let scaled = tape.scale(centered_sq, -gamma);
        let e_rbf = tape.exp(scaled); // P×K

        // Smooth cutoff; the pair list only holds d < cutoff so the branchless
        // formula is exact.
        let angle = tape.scale(dist, std::f64::consts::PI / cutoff);
        let cosd = tape.cos(angle);
        let shifted = tape.add_const(cosd, 1.0);
        let phi = tape.scale(shifted, 0.5); // P×1
        let phi_d = tape.broadcast_col(phi, d);
        let phi_h = tape.broadcast_col(phi, n_heads);

        // ---- embedding: species table + distance-filtered neighborhood ----
        let species_idx = Rc::new(species.to_vec());
        let table = g("embed.table");
        let t_i = tape.gather_rows(table, species_idx); // n×D
        let t_j = tape.gather_rows(t_i, Rc::clone(&pairs.neighbor)); // P×D
        let filt_lin = tape.linear(e_rbf, g("embed.filter.w"), Some(g("embed.filter.b")));
        let filt_msg = tape.mul(filt_lin, t_j);
        let filt_cut = tape.mul(filt_msg, phi_d);
        let nbr = tape.scatter_add_rows(filt_cut, Rc::clone(&pairs.center), n); // n×D
        let cat_t = tape.pad_cols(t_i, 0, 2 * d);
        let cat_n = tape.pad_cols(nbr, d, 2 * d);
        let cat = tape.add(cat_t, cat_n);
        let emb_h = tape.linear(cat, g("embed.mlp.w1"), Some(g("embed.mlp.b1")));
        let emb_a = tape.silu(emb_h);
        let mut x = tape.linear(emb_a, g("embed.mlp.w2"), Some(g("embed.mlp.b2"))); // n×D
        let mut v = tape.leaf(Array2::zeros((3 * n, d))); // vectors start at exact zero

        // Shared helpers for scattering per-pair 3-vectors onto atoms.
        let rows3 = pairs.center_axis_rows();
        let unit_flat = tape.reshape(unit, (3 * p_count, 1));
        let unit_cols = tape.broadcast_col(unit_flat, d); // (3P)×D

        for l in 0..self.config.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");

            // Distance-modulated dot-product attention. Weights are kept
            // unnormalized: SiLU of the per-head three-way dot, scaled by the
            // cutoff so pairs fade out smoothly at the boundary.
            let q = tape.linear(x, g(&name("attn.wq")), Some(g(&name("attn.bq"))));
            let k_feat = tape.linear(x, g(&name("attn.wk")), Some(g(&name("attn.bk"))));
            let v_feat = tape.linear(x, g(&name("attn.wv")), Some(g(&name("attn.bv")))); // n×2D
            let dk_lin = tape.linear(e_rbf, g(&name("attn.wdk")), Some(g(&name("attn.bdk"))));
            let dk = tape.silu(dk_lin); // P×D
            let dv_lin = tape.linear(e_rbf, g(&name("attn.wdv")), Some(g(&name("attn.bdv"))));
            let dv = tape.silu(dv_lin); // P×2D

            let q_i = tape.gather_rows(q, Rc::clone(&pairs.center));
            let k_j = tape.gather_rows(k_feat, Rc::clone(&pairs.neighbor));
            let qk = tape.mul(q_i, k_j);
            let qkd = tape.mul(qk, dk);
            let dots = tape.group_sum_cols(qkd, dh); // P×H
            let dots_act = tape.silu(dots);
            let attn = tape.mul(dots_act, phi_h); // P×H

            let v_j = tape.gather_rows(v_feat, Rc::clone(&pairs.neighbor));
            let v_mod = tape.mul(v_j, dv); // P×2D
            let attn_d = tape.repeat_cols_grouped(attn, dh); // P×D
            let attn_left = tape.pad_cols(attn_d, 0, 2 * d);
            let attn_right = tape.pad_cols(attn_d, d, 2 * d);
            let attn_2d = tape.add(attn_left, attn_right);
            let weighted = tape.mul(v_mod, attn_2d); // P×2D
            let scalar_msg = tape.slice_cols(weighted, 0, d);
            let vector_gate = tape.slice_cols(weighted, d, 2 * d);

            let m_x = tape.scatter_add_rows(scalar_msg, Rc::clone(&pairs.center), n); // n×D
            let gate_rep = tape.repeat_rows(vector_gate, 3); // (3P)×D
            let v_contrib = tape.mul(unit_cols, gate_rep); // û ⊗ gated message
            let m_v = tape.scatter_add_rows(v_contrib, Rc::clone(&rows3), 3 * n); // (3n)×D

            // Channel-mixed vector inner product ⟨U1 v, U2 v⟩: rotation
            // invariant, feeds back into the scalar track.
            let vu1 = tape.matmul(v, g(&name("mix.u1")));
            let vu2 = tape.matmul(v, g(&name("mix.u2")));
            let vu_prod = tape.mul(vu1, vu2);
            let inner = tape.group_sum_rows(vu_prod, 3); // n×D

            let gate_h = tape.linear(x, g(&name("gate.w1")), Some(g(&name("gate.b1"))));
            let gate_a = tape.silu(gate_h);
            let gate_all = tape.linear(gate_a, g(&name("gate.w2")), Some(g(&name("gate.b2")))); // n×3D
            let g1 = tape.slice_cols(gate_all, 0, d);
            let g2 = tape.slice_cols(gate_all, d, 2 * d);
            let g3 = tape.slice_cols(gate_all, 2 * d, 3 * d);

            let fx_h = tape.linear(x, g(&name("fx.w1")), Some(g(&name("fx.b1"))));
            let fx_a = tape.silu(fx_h);
            let fx = tape.linear(fx_a, g(&name("fx.w2")), Some(g(&name("fx.b2"))));
            let sum_x = tape.add(fx, m_x);
            let gated_inner = tape.mul(g2, inner);
            let dx = tape.add(sum_x, gated_inner);

            let fv = tape.matmul(v, g(&name("fv.w"))); // channel mix, no bias
            let g3_rep = tape.repeat_rows(g3, 3);
            let g1_rep = tape.repeat_rows(g1, 3);
            let gated_mv = tape.mul(g3_rep, m_v);
            let gated_v = tape.mul(g1_rep, v);
            let sum_v = tape.add(fv, gated_mv);
            let dv_up = tape.add(sum_v, gated_v);

            x = tape.add(x, dx);
            v = tape.add(v, dv_up);
        }

        // ---- gated readout: (x, v) → per-atom energies ----
        let mut s_cur = x;
        let mut v_cur = v;
        let mut din = d;
        for (b, dout) in [(0usize, d / 2), (1usize, 1)] {
            let name = |s: &str| format!("out{b}.{s}");
            let wv1 = tape.matmul(v_cur, g(&name("wva"))); // (3n)×dout
            let wv2 = tape.matmul(v_cur, g(&name("wvb")));
            let wv2_sq = tape.mul(wv2, wv2);
            let norm_sq = tape.group_sum_rows(wv2_sq, 3);
            let norm_eps = tape.add_const(norm_sq, NORM_EPS);
            let vnorm = tape.sqrt(norm_eps); // n×dout, rotation invariant
            let cat_s = tape.pad_cols(s_cur, 0, din + dout);
            let cat_v = tape.pad_cols(vnorm, din, din + dout);
            let cat = tape.add(cat_s, cat_v);
            let h_lin = tape.linear(cat, g(&name("mlp.w1")), Some(g(&name("mlp.b1"))));
            let h = tape.silu(h_lin); // n×din
            let out = tape.linear(h, g(&name("mlp.w2")), Some(g(&name("mlp.b2")))); // n×2dout
            let s_out = tape.slice_cols(out, 0, dout);
            let gate = tape.slice_cols(out, dout, 2 * dout);
            let gate_rep = tape.repeat_rows(gate, 3);
            v_cur = tape.mul(gate_rep, wv1);
            s_cur = s_out;
            din = dout;
        }

        tape.sum_all(s_cur) // Φ = Σ_i per-atom energy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_positions, random_rotation, rotate_positions, seeded_rng};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            dim: 16,
            n_heads: 4,
            n_rbf: 8,
            cutoff: 5.0,
            n_species: 3,
        }
    }

    fn dense_model(seed: u64) -> Model {
        let config = small_config();
        let params = ModelParams::random_dense(&config, seed);
        Model::new(config, params).unwrap()
    }

    fn test_species(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % 3).collect()
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = small_config();
        c.n_heads = 3; // 16 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.cutoff = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.n_rbf = 1;
        assert!(c.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn untrained_model_predicts_exactly_zero() {
        let model = Model::initialize(small_config(), 0).unwrap();
        let mut rng = seeded_rng(1);
        let pos = random_positions(&mut rng, 6, 2.0);
        let pred = model.predict_raw(&pos, &test_species(6)).unwrap();
        assert_eq!(pred.energy, 0.0);
        assert!(pred.forces.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn energy_is_invariant_under_rigid_motion() {
        let model = dense_model(11);
        let mut rng = seeded_rng(2);
        let species = test_species(6);
        let pos = random_positions(&mut rng, 6, 2.0);
        let base = model.predict_raw(&pos, &species).unwrap();
        assert!(base.energy.abs() > 1e-6, "need a non-trivial energy");

        for _ in 0..10 {
            let rot = random_rotation(&mut rng);
            let mut moved = rotate_positions(&pos, &rot);
            let shift: [f64; 3] = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ];
            for mut row in moved.outer_iter_mut() {
                for (a, s) in shift.iter().enumerate() {
                    row[a] += s;
                }
            }
            let transformed = model.predict_raw(&moved, &species).unwrap();
            assert_relative_eq!(base.energy, transformed.energy, max_relative = 1e-10);

            // Forces rotate covariantly.
            let rotated_forces = rotate_positions(&base.forces, &rot);
            for (a, b) in rotated_forces.iter().zip(transformed.forces.iter()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn energy_is_invariant_under_atom_permutation() {
        let model = dense_model(5);
        let mut rng = seeded_rng(3);
        let species = vec![0, 1, 2, 1, 0];
        let pos = random_positions(&mut rng, 5, 2.0);
        let base = model.predict_raw(&pos, &species).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let pos_p = Array2::from_shape_fn((5, 3), |(i, a)| pos[[perm[i], a]]);
        let species_p: Vec<usize> = perm.iter().map(|&i| species[i]).collect();
        let permuted = model.predict_raw(&pos_p, &species_p).unwrap();

        assert_relative_eq!(base.energy, permuted.energy, max_relative = 1e-12);
        for (new_row, &old) in perm.iter().enumerate() {
            for a in 0..3 {
                assert_relative_eq!(
                    permuted.forces[[new_row, a]],
                    base.forces[[old, a]],
                    max_relative = 1e-10,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        let model = dense_model(21);
        let mut rng = seeded_rng(4);
        let species = test_species(5);
        let pos = random_positions(&mut rng, 5, 2.0);
        let pred = model.predict_raw(&pos, &species).unwrap();

        let h = 1e-5;
        for atom in 0..5 {
            for axis in 0..3 {
                let mut plus = pos.clone();
                plus[[atom, axis]] += h;
                let mut minus = pos.clone();
                minus[[atom, axis]] -= h;
                let ep = model.predict_raw(&plus, &species).unwrap().energy;
                let em = model.predict_raw(&minus, &species).unwrap().energy;
                let fd = -(ep - em) / (2.0 * h);
                let analytic = pred.forces[[atom, axis]];
                assert!(
                    (analytic - fd).abs() <= 1e-6 * analytic.abs().max(1.0),
                    "atom {atom} axis {axis}: analytic {analytic}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn net_force_is_zero_by_translation_invariance() {
        let model = dense_model(31);
        let mut rng = seeded_rng(6);
        let species = test_species(7);
        let pos = random_positions(&mut rng, 7, 2.0);
        let pred = model.predict_raw(&pos, &species).unwrap();
        for axis in 0..3 {
            let total: f64 = pred.forces.column(axis).sum();
            assert!(total.abs() <= 1e-10, "net force along {axis}: {total}");
        }
    }

    #[test]
    fn energy_is_continuous_across_the_cutoff() {
        // A pair leaving the neighbor list must not jump the energy: the
        // cutoff factor vanishes smoothly at the boundary.
        let model = dense_model(41);
        let species = vec![0, 1];
        let eps = 1e-4;
        let e_in = model
            .predict_raw(&array![[0.0, 0.0, 0.0], [5.0 - eps, 0.0, 0.0]], &species)
            .unwrap()
            .energy;
        let e_out = model
            .predict_raw(&array![[0.0, 0.0, 0.0], [5.0 + eps, 0.0, 0.0]], &species)
            .unwrap()
            .energy;
        assert!(
            (e_in - e_out).abs() < 1e-6,
            "energy jumps at cutoff: {e_in} vs {e_out}"
        );
    }

    #[test]
    fn isolated_atoms_have_zero_forces() {
        // No pairs within the cutoff: the energy comes from the embedding
        // alone and cannot depend on positions.
        let model = dense_model(51);
        let pos = array![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]];
        let pred = model.predict_raw(&pos, &[0, 1]).unwrap();
        assert!(pred.energy.is_finite());
        assert!(pred.forces.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn prediction_is_deterministic() {
        let model = dense_model(61);
        let mut rng = seeded_rng(8);
        let species = test_species(6);
        let pos = random_positions(&mut rng, 6, 2.0);
        let a = model.predict_raw(&pos, &species).unwrap();
        let b = model.predict_raw(&pos, &species).unwrap();
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.forces, b.forces);
    }

    #[test]
    fn species_out_of_range_is_rejected() {
        let model = dense_model(71);
        let pos = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(matches!(
            model.predict_raw(&pos, &[0, 3]),
            Err(ModelError::SpeciesOutOfRange { id: 3, .. })
        ));
        assert!(matches!(
            model.predict_raw(&pos, &[0]),
            Err(ModelError::PositionShape { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let model = dense_model(81);
        let mut rng = seeded_rng(9);
        let species = test_species(5);
        let pos = random_positions(&mut rng, 5, 2.0);
        let before = model.predict_raw(&pos, &species).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let after = loaded.predict_raw(&pos, &species).unwrap();
        assert_eq!(before.energy, after.energy);
        assert_eq!(before.forces, after.forces);
    }

    #[test]
    fn force_node_supports_downstream_losses() {
        // Build a scalar out of the force node and differentiate it with
        // respect to parameters: the second backward pass must succeed and
        // produce finite numbers.
        let model = dense_model(91);
        let mut rng = seeded_rng(10);
        let species = test_species(4);
        let pos = random_positions(&mut rng, 4, 2.0);
        let mut rec = model.record(&pos, &species).unwrap();
        let f_node = rec.force_node().unwrap();
        let tape = &mut rec.recording.tape;
        let sq = tape.mul(f_node, f_node);
        let loss = tape.sum_all(sq);
        let grads = tape
            .grad_values(loss, &rec.recording.param_leaves)
            .unwrap();
        let total: f64 = grads.iter().map(|g| g.iter().map(|x| x.abs()).sum::<f64>()).sum();
        assert!(total.is_finite());
        assert!(total > 0.0, "force loss must couple to parameters");
    }
}
