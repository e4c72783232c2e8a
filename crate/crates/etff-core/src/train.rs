//! Force-centric training across multiple molecules.
//!
//! One model learns from the reference *forces* of several molecules at
//! once; energies never enter the default objective (they are recovered
//! afterwards by calibration). Batches mix molecules by bucketing frames on
//! atom count, the optimizer is AdamW with decoupled weight decay, and the
//! learning rate decays on validation plateaus.

use crate::autodiff::{DiffError, DiffScalar, Wrt};
use crate::chem::{ChemError, Conformation, Trajectory};
use crate::io::val_frame_count;
use crate::metrics::{cosine_distance, force_mae, MetricsError};
use crate::model::{Model, ModelError};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

/// Global L2 gradient clip; guards the occasional early-training spike from
/// unnormalized attention weights.
pub const DEFAULT_GRAD_CLIP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("dataset contains no usable frames")]
    EmptyDataset,
    #[error("{molecule} frame {frame} is missing {what}")]
    MissingLabels {
        molecule: String,
        frame: usize,
        what: &'static str,
    },
    #[error("non-finite gradient at step {step}; batch rejected")]
    NonFiniteGradient { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Chem(#[from] ChemError),
}

/// What the loss sees: forces alone, or forces plus labeled energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    ForceOnly,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Consecutive non-improving validations before the LR decays.
    pub patience: usize,
    /// Tail fraction of every trajectory held out for validation.
    pub val_fraction: f64,
    pub val_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Weight of the squared energy error; only read by [`Objective::Joint`].
    pub joint_energy_weight: f64,
    pub grad_clip: f64,
    /// Where to keep the best-by-validation checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr0: 1e-4,
            decay_factor: 0.8,
            patience: 30,
            val_fraction: 0.05,
            val_every: 500,
            batch_size: 8,
            seed: 0,
            objective: Objective::ForceOnly,
            joint_energy_weight: 1.0,
            grad_clip: DEFAULT_GRAD_CLIP,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.patience == 0 || self.val_every == 0 || self.batch_size == 0 {
            return bad("patience, val_every and batch_size must be positive".into());
        }
        if !(self.joint_energy_weight >= 0.0) {
            return bad(format!(
                "joint_energy_weight must be non-negative, got {}",
                self.joint_energy_weight
            ));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay (applied multiplicatively before the
/// adaptive update) and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update in place. Rejects non-finite gradients without touching
    /// parameters or moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), TrainError> {
        assert_eq!(params.len(), grad.len(), "param/grad length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer sized for different model");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step: self.t + 1 });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            params[i] *= 1.0 - lr * self.weight_decay;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Scales `grad` down to `max_norm` when its global L2 norm exceeds it;
/// returns the pre-clip norm.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// A batch loss value with its parameter gradient (canonical flat order).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Per-conformation loss: mean squared per-component force error, plus the
/// weighted squared energy error when `energy_weight` is set. The gradient
/// of the force term goes through a second backward pass over the force
/// computation itself.
fn conformation_loss(
    model: &Model,
    c: &Conformation,
    energy_weight: Option<f64>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let f_ref = c.ref_forces().ok_or(TrainError::MissingLabels {
        molecule: "batch".into(),
        frame: 0,
        what: "reference forces",
    })?;
    let mut rec = model.record(c.positions(), c.species())?;
    let f_node = rec.force_node()?;
    let tape = &mut rec.recording.tape;
    let f_leaf = tape.leaf(f_ref.clone());
    let diff = tape.sub(f_node, f_leaf);
    let sq = tape.mul(diff, diff);
    let mut loss_node = tape.mean_all(sq);
    if let Some(w) = energy_weight {
        let e_ref = c.ref_energy().ok_or(TrainError::MissingLabels {
            molecule: "batch".into(),
            frame: 0,
            what: "reference energy",
        })?;
        let e_leaf = tape.leaf(Array2::from_elem((1, 1), e_ref));
        let e_diff = tape.sub(rec.energy.node, e_leaf);
        let e_sq = tape.mul(e_diff, e_diff);
        let weighted = tape.scale(e_sq, w);
        loss_node = tape.add(loss_node, weighted);
    }
    let loss = rec.recording.tape.scalar_value(loss_node);
    let grads = rec.recording.grad(
        DiffScalar {
            value: loss,
            node: loss_node,
        },
        Wrt::Params,
    )?;
    Ok((loss, grads.d_params.expect("params requested")))
}

fn batch_loss(
    model: &Model,
    batch: &[&Conformation],
    energy_weight: Option<f64>,
) -> Result<BatchLoss, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    // Per-molecule tapes run in parallel; the reduction is a fixed-order
    // sequential sum so results don't depend on scheduling.
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|c| conformation_loss(model, c, energy_weight))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; per[0].1.len()];
    for (l, g) in &per {
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(BatchLoss { loss, grad })
}

/// Mean over the batch of per-molecule mean-per-component squared force
/// error. Molecule size does not weight the average. Never reads energies.
pub fn force_loss(model: &Model, batch: &[&Conformation]) -> Result<BatchLoss, TrainError> {
    batch_loss(model, batch, None)
}

/// [`force_loss`] plus `energy_weight` times the batch-mean squared energy
/// error.
pub fn joint_loss(
    model: &Model,
    batch: &[&Conformation],
    energy_weight: f64,
) -> Result<BatchLoss, TrainError> {
    batch_loss(model, batch, Some(energy_weight))
}

/// One validation log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_force_mae: f64,
    pub val_cosd: f64,
}

/// `step,lr,train_loss,val_force_mae,val_cosd` with deterministic float
/// formatting.
pub fn write_log_csv<W: Write>(rows: &[LogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,lr,train_loss,val_force_mae,val_cosd")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.step, r.lr, r.train_loss, r.val_force_mae, r.val_cosd
        )?;
    }
    Ok(())
}

/// Mutable optimization state carried across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub optimizer: AdamW,
    pub step: u64,
    pub lr: f64,
    pub best_val_mae: f64,
    pub worse_count: usize,
    pub decay_count: u32,
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainResult {
    /// Model with the final parameters.
    pub model: Model,
    /// Model at the best validation force MAE (final parameters when no
    /// validation ever ran).
    pub best: Model,
    pub best_val_mae: f64,
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub final_lr: f64,
}

/// Force MAE and cosine distance of model predictions against reference
/// forces, averaged per frame.
pub fn evaluate_forces(model: &Model, frames: &[Conformation]) -> Result<(f64, f64), TrainError> {
    assert!(!frames.is_empty(), "no frames to evaluate");
    let per: Vec<(f64, f64)> = frames
        .par_iter()
        .map(|c| -> Result<(f64, f64), TrainError> {
            let f_ref = c.ref_forces().ok_or(TrainError::MissingLabels {
                molecule: "eval".into(),
                frame: 0,
                what: "reference forces",
            })?;
            let pred = model.predict(c)?;
            Ok((
                force_mae(&pred.forces, f_ref)?,
                cosine_distance(&pred.forces, f_ref)?,
            ))
        })
        .collect::<Result<_, _>>()?;
    let n = per.len() as f64;
    let mae = per.iter().map(|p| p.0).sum::<f64>() / n;
    let cosd = per.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((mae, cosd))
}

/// Frame address into the dataset: (molecule index, frame index).
type FrameRef = (usize, usize);

struct SplitDataset<'a> {
    dataset: &'a [(String, Trajectory)],
    train: Vec<FrameRef>,
    val: Vec<FrameRef>,
}

impl<'a> SplitDataset<'a> {
    fn frame(&self, r: FrameRef) -> &'a Conformation {
        &self.dataset[r.0].1.frames()[r.1]
    }

    fn molecule(&self, r: FrameRef) -> &'a str {
        &self.dataset[r.0].0
    }
}

fn split_tails<'a>(
    dataset: &'a [(String, Trajectory)],
    cfg: &TrainConfig,
) -> Result<SplitDataset<'a>, TrainError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (mi, (_, traj)) in dataset.iter().enumerate() {
        let n = traj.len();
        let n_val = val_frame_count(n, cfg.val_fraction);
        for fi in 0..n - n_val {
            train.push((mi, fi));
        }
        for fi in n - n_val..n {
            val.push((mi, fi));
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(SplitDataset {
        dataset,
        train,
        val,
    })
}

/// Shuffle within atom-count buckets, batch inside each bucket, then
/// interleave buckets round-robin. Molecules of equal size mix inside a
/// batch; unequal sizes alternate between batches.
fn epoch_batches(
    split: &SplitDataset<'_>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<FrameRef>> {
    let mut buckets: BTreeMap<usize, Vec<FrameRef>> = BTreeMap::new();
    for &r in &split.train {
        buckets
            .entry(split.frame(r).atom_count())
            .or_default()
            .push(r);
    }
    let mut chunked: Vec<Vec<Vec<FrameRef>>> = Vec::new();
    for frames in buckets.values_mut() {
        frames.shuffle(rng);
        chunked.push(frames.chunks(batch_size).map(|c| c.to_vec()).collect());
    }
    let rounds = chunked.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut batches = Vec::new();
    for round in 0..rounds {
        for bucket in &chunked {
            if let Some(batch) = bucket.get(round) {
                batches.push(batch.clone());
            }
        }
    }
    batches
}

fn check_labels(split: &SplitDataset<'_>, cfg: &TrainConfig) -> Result<(), TrainError> {
    let need_energy = cfg.objective == Objective::Joint;
    for &r in split.train.iter().chain(&split.val) {
        let c = split.frame(r);
        if c.ref_forces().is_none() {
            return Err(TrainError::MissingLabels {
                molecule: split.molecule(r).to_string(),
                frame: r.1,
                what: "reference forces",
            });
        }
        if need_energy && c.ref_energy().is_none() {
            return Err(TrainError::MissingLabels {
                molecule: split.molecule(r).to_string(),
                frame: r.1,
                what: "reference energy",
            });
        }
    }
    Ok(())
}

/// Full training loop. Deterministic in (model, dataset, config): bucketed
/// shuffles come from the config seed, batch members evaluate in parallel
/// but reduce in order, and validation runs every `val_every` steps plus
/// once at the end when the last step isn't already a validation step.
pub fn train(
    model: Model,
    dataset: &[(String, Trajectory)],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let split = split_tails(dataset, cfg)?;
    check_labels(&split, cfg)?;
    let energy_weight = match cfg.objective {
        Objective::ForceOnly => None,
        Objective::Joint => Some(cfg.joint_energy_weight),
    };
    let val_frames: Vec<Conformation> = split.val.iter().map(|&r| split.frame(r).clone()).collect();

    let mut model = model;
    let mut params = model.params().flatten();
    let mut optimizer = AdamW::new(params.len(), 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = cfg.lr0;
    let mut decay_count: u32 = 0;
    let mut best_val_mae = f64::INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut worse_count = 0usize;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut last_loss = f64::NAN;

    let validate = |model: &Model,
                        step: u64,
                        lr: f64,
                        last_loss: f64,
                        best_val_mae: &mut f64,
                        best_params: &mut Option<Vec<f64>>,
                        worse_count: &mut usize,
                        decay_count: &mut u32,
                        log: &mut Vec<LogRow>|
     -> Result<bool, TrainError> {
        if val_frames.is_empty() {
            return Ok(false);
        }
        let (mae, cosd) = evaluate_forces(model, &val_frames)?;
        log.push(LogRow {
            step,
            lr,
            train_loss: last_loss,
            val_force_mae: mae,
            val_cosd: cosd,
        });
        if mae < *best_val_mae {
            *best_val_mae = mae;
            *best_params = Some(model.params().flatten());
            *worse_count = 0;
            if let Some(path) = &cfg.checkpoint {
                model.save(path)?;
            }
        } else {
            *worse_count += 1;
            if *worse_count >= cfg.patience {
                *decay_count += 1;
                *worse_count = 0;
                return Ok(true); // caller updates lr
            }
        }
        Ok(false)
    };

    for _ in 0..cfg.epochs {
        let batches = epoch_batches(&split, cfg.batch_size, &mut rng);
        for batch_refs in batches {
            let batch: Vec<&Conformation> =
                batch_refs.iter().map(|&r| split.frame(r)).collect();
            let mut b = batch_loss(&model, &batch, energy_weight)?;
            clip_gradient(&mut b.grad, cfg.grad_clip);
            optimizer.step(&mut params, &b.grad, lr)?;
            model.params_mut().assign_flat(&params)?;
            step += 1;
            last_loss = b.loss;

            if step % cfg.val_every as u64 == 0 {
                let decayed = validate(
                    &model,
                    step,
                    lr,
                    last_loss,
                    &mut best_val_mae,
                    &mut best_params,
                    &mut worse_count,
                    &mut decay_count,
                    &mut log,
                )?;
                if decayed {
                    lr = cfg.lr0 * cfg.decay_factor.powi(decay_count as i32);
                }
            }
        }
    }

    // A trailing partial epoch deserves a final reading.
    if step > 0 && step % cfg.val_every as u64 != 0 {
        let decayed = validate(
            &model,
            step,
            lr,
            last_loss,
            &mut best_val_mae,
            &mut best_params,
            &mut worse_count,
            &mut decay_count,
            &mut log,
        )?;
        if decayed {
            lr = cfg.lr0 * cfg.decay_factor.powi(decay_count as i32);
        }
    }

    let best = match &best_params {
        Some(p) => {
            let mut m = model.clone();
            m.params_mut().assign_flat(p)?;
            m
        }
        None => model.clone(),
    };
    Ok(TrainResult {
        model,
        best,
        best_val_mae,
        log,
        steps: step,
        final_lr: lr,
    })
}

/// Which training regime produced a metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Separate,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub molecule: String,
    pub arm: Arm,
    pub force_mae: f64,
    pub cosine_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub molecule: String,
    pub force_mae: f64,
    pub cosine_distance: f64,
}

/// Side-by-side result of the separate-models and one-joint-model regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ArmMetrics>,
    /// Joint-model metrics on molecules no arm ever trained on.
    pub held_out: Vec<HeldOutMetrics>,
}

fn val_tail(traj: &Trajectory, val_fraction: f64) -> Vec<Conformation> {
    let n = traj.len();
    let n_val = val_frame_count(n, val_fraction);
    traj.frames()[n - n_val..].to_vec()
}

/// Trains one model per molecule and one joint model on all of them with
/// the same per-frame budget (identical epochs, batch size, and schedule),
/// then evaluates every arm on each molecule's validation tail and the
/// joint model on fully held-out molecules.
pub fn run_single_vs_joint(
    base: &Model,
    dataset: &[(String, Trajectory)],
    held_out: &[(String, Trajectory)],
    cfg: &TrainConfig,
) -> Result<ComparisonReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::new();

    for (name, traj) in dataset {
        let single = [(name.clone(), traj.clone())];
        let result = train(base.clone(), &single, cfg)?;
        let tail = val_tail(traj, cfg.val_fraction);
        let (mae, cosd) = evaluate_forces(&result.best, &tail)?;
        rows.push(ArmMetrics {
            molecule: name.clone(),
            arm: Arm::Separate,
            force_mae: mae,
            cosine_distance: cosd,
        });
    }

    let joint = train(base.clone(), dataset, cfg)?;
    for (name, traj) in dataset {
        let tail = val_tail(traj, cfg.val_fraction);
        let (mae, cosd) = evaluate_forces(&joint.best, &tail)?;
        rows.push(ArmMetrics {
            molecule: name.clone(),
            arm: Arm::Joint,
            force_mae: mae,
            cosine_distance: cosd,
        });
    }

    let mut held = Vec::new();
    for (name, traj) in held_out {
        let (mae, cosd) = evaluate_forces(&joint.best, traj.frames())?;
        held.push(HeldOutMetrics {
            molecule: name.clone(),
            force_mae: mae,
            cosine_distance: cosd,
        });
    }

    Ok(ComparisonReport {
        rows,
        held_out: held,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelParams;
    use crate::model::ModelConfig;
    use crate::testutil::{random_positions, seeded_rng};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            dim: 8,
            n_heads: 2,
            n_rbf: 4,
            cutoff: 5.0,
            n_species: 3,
        }
    }

    fn dense_model(seed: u64) -> Model {
        let c = tiny_config();
        Model::new(c.clone(), ModelParams::random_dense(&c, seed)).unwrap()
    }

    /// A labeled toy trajectory: random jitter around a base geometry with
    /// arbitrary (but deterministic) force labels.
    fn toy_trajectory(n_atoms: usize, n_frames: usize, seed: u64, with_energy: bool) -> Trajectory {
        let mut rng = seeded_rng(seed);
        let base = random_positions(&mut rng, n_atoms, 2.0);
        let species: Vec<usize> = (0..n_atoms).map(|i| i % 3).collect();
        let frames = (0..n_frames)
            .map(|t| {
                let jitter = random_positions(&mut rng, n_atoms, 0.1);
                let forces = random_positions(&mut rng, n_atoms, 0.5);
                let energy = with_energy.then(|| -1.0 + 0.05 * t as f64);
                Conformation::with_labels(&base + &jitter, species.clone(), energy, Some(forces))
                    .unwrap()
            })
            .collect();
        Trajectory::new(frames, 0.5, "toy").unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            lr0: 1e-3,
            val_every: 4,
            patience: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut opt = AdamW::new(1, 0.0);
        let lr = 1e-3;
        let mut p = vec![1.0];
        opt.step(&mut p, &[1.0], lr).unwrap();
        // Bias correction makes the first step exactly lr/(1+ε) for g=1.
        let expected = 1.0 - lr / (1.0 + opt.epsilon);
        assert_relative_eq!(p[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        // wd = 0, g = 0: parameters bitwise unchanged.
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![1.25, -3.5];
        opt.step(&mut p, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(p, vec![1.25, -3.5]);

        // wd > 0, g = 0: pure multiplicative shrink.
        let mut opt = AdamW::new(1, 0.01);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p[0], 2.0 * (1.0 - 0.1 * 0.01));

        // lr = 0: nothing moves regardless of gradient.
        let mut opt = AdamW::new(1, 0.01);
        let mut p = vec![0.7];
        opt.step(&mut p, &[5.0], 0.0).unwrap();
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut opt = AdamW::new(1, 0.0);
        let mut p = vec![1.0];
        assert!(matches!(
            opt.step(&mut p, &[f64::NAN], 1e-3),
            Err(TrainError::NonFiniteGradient { step: 1 })
        ));
        assert_eq!(p[0], 1.0, "rejected step must not touch parameters");
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn gradient_clipping_caps_global_norm() {
        let mut g = vec![30.0, 40.0]; // norm 50 < 100
        let norm = clip_gradient(&mut g, 100.0);
        assert_eq!(norm, 50.0);
        assert_eq!(g, vec![30.0, 40.0]);

        let mut g = vec![300.0, 400.0]; // norm 500 > 100
        let norm = clip_gradient(&mut g, 100.0);
        assert_eq!(norm, 500.0);
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert_relative_eq!(clipped, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_labels_give_exactly_zero_loss() {
        let model = dense_model(1);
        let mut rng = seeded_rng(2);
        let pos = random_positions(&mut rng, 4, 2.0);
        let species = vec![0, 1, 2, 0];
        let pred = model.predict_raw(&pos, &species).unwrap();
        let c = Conformation::with_labels(
            pos,
            species,
            Some(pred.energy),
            Some(pred.forces),
        )
        .unwrap();
        let fl = force_loss(&model, &[&c]).unwrap();
        assert_eq!(fl.loss, 0.0);
        assert!(fl.grad.iter().all(|&g| g == 0.0));

        let jl = joint_loss(&model, &[&c], 1.0).unwrap();
        assert_eq!(jl.loss, 0.0);
    }

    #[test]
    fn zero_model_against_unit_labels_gives_unit_loss() {
        // Freshly initialized models output exactly zero forces, so the
        // loss is the mean squared label.
        let model = Model::initialize(tiny_config(), 0).unwrap();
        let c = Conformation::with_labels(
            array![[0.0, 0.0, 0.0]],
            vec![0],
            None,
            Some(array![[1.0, 1.0, 1.0]]),
        )
        .unwrap();
        let fl = force_loss(&model, &[&c]).unwrap();
        assert_eq!(fl.loss, 1.0);
    }

    #[test]
    fn batch_mean_weighs_molecules_equally() {
        let model = Model::initialize(tiny_config(), 0).unwrap();
        let small = Conformation::with_labels(
            array![[0.0, 0.0, 0.0]],
            vec![0],
            None,
            Some(array![[1.0, 1.0, 1.0]]),
        )
        .unwrap();
        let large = Conformation::with_labels(
            array![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]],
            vec![0, 1],
            None,
            Some(array![[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]]),
        )
        .unwrap();
        // Per-molecule means: 1.0 and 4.0 → batch mean 2.5 regardless of
        // atom counts.
        let fl = force_loss(&model, &[&small, &large]).unwrap();
        assert_eq!(fl.loss, 2.5);

        // Order inside the batch is irrelevant.
        let swapped = force_loss(&model, &[&large, &small]).unwrap();
        assert!((fl.loss - swapped.loss).abs() <= 1e-12);
        for (a, b) in fl.grad.iter().zip(&swapped.grad) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn joint_loss_reduces_to_force_loss() {
        let model = dense_model(3);
        let mut rng = seeded_rng(4);
        let pos = random_positions(&mut rng, 3, 2.0);
        let species = vec![0, 1, 2];
        let labels = random_positions(&mut rng, 3, 0.5);
        let pred = model.predict_raw(&pos, &species).unwrap();

        // Weight zero: identical to the force objective.
        let c = Conformation::with_labels(pos.clone(), species.clone(), Some(7.5), Some(labels.clone()))
            .unwrap();
        let f = force_loss(&model, &[&c]).unwrap();
        let j0 = joint_loss(&model, &[&c], 0.0).unwrap();
        assert_eq!(f.loss, j0.loss);
        assert_eq!(f.grad, j0.grad);

        // Energy label equal to Φ: the energy term vanishes.
        let c_phi =
            Conformation::with_labels(pos, species, Some(pred.energy), Some(labels)).unwrap();
        let j1 = joint_loss(&model, &[&c_phi], 1.0).unwrap();
        assert_eq!(f.loss, j1.loss);

        // Missing energy label is an error for the joint objective only.
        let c_none = c_phi.relabeled(None, c_phi.ref_forces().cloned()).unwrap();
        assert!(force_loss(&model, &[&c_none]).is_ok());
        assert!(matches!(
            joint_loss(&model, &[&c_none], 1.0),
            Err(TrainError::MissingLabels { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let model = dense_model(5);
        let data = vec![("toy".to_string(), toy_trajectory(3, 10, 1, false))];
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let result = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(result.steps, 0);
        assert!(result.log.is_empty());
        assert_eq!(result.model.params(), model.params());
        assert_eq!(result.best.params(), model.params());
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![
            ("a".to_string(), toy_trajectory(3, 12, 1, false)),
            ("b".to_string(), toy_trajectory(4, 12, 2, false)),
        ];
        let run = || train(dense_model(6), &data, &quick_cfg()).unwrap();
        let r1 = run();
        let r2 = run();
        assert_eq!(r1.log, r2.log);
        assert_eq!(r1.model.params(), r2.model.params());
        assert!(r1.steps > 0);
        assert!(!r1.log.is_empty());
    }

    #[test]
    fn force_only_objective_never_reads_energies() {
        // Same data with energies stripped vs filled with garbage: the
        // force-only run must be bitwise identical.
        let with = toy_trajectory(3, 12, 1, true);
        let without = Trajectory::new(
            with.frames()
                .iter()
                .map(|c| c.relabeled(None, c.ref_forces().cloned()).unwrap())
                .collect(),
            with.timestep_fs(),
            with.source_tag(),
        )
        .unwrap();
        let cfg = quick_cfg();
        let r_with = train(dense_model(7), &[("m".to_string(), with)], &cfg).unwrap();
        let r_without = train(dense_model(7), &[("m".to_string(), without)], &cfg).unwrap();
        assert_eq!(r_with.model.params(), r_without.model.params());
        assert_eq!(r_with.log, r_without.log);
    }

    #[test]
    fn plateau_decay_follows_exact_schedule() {
        // Zero-force labels with a zero-initialized model: loss and
        // gradient are exactly zero, parameters never move, every
        // validation repeats the same MAE. The first sets the best; each
        // later one increments the stall counter, so the LR decays every
        // `patience` validations and equals lr0·f^k exactly.
        let model = Model::initialize(tiny_config(), 0).unwrap();
        let mut rng = seeded_rng(8);
        let species = vec![0, 1, 2];
        let frames: Vec<Conformation> = (0..10)
            .map(|_| {
                Conformation::with_labels(
                    random_positions(&mut rng, 3, 2.0),
                    species.clone(),
                    None,
                    Some(Array2::zeros((3, 3))),
                )
                .unwrap()
            })
            .collect();
        let data = vec![(
            "still".to_string(),
            Trajectory::new(frames, 0.5, "toy").unwrap(),
        )];
        let cfg = TrainConfig {
            epochs: 8,
            val_every: 1,
            patience: 3,
            val_fraction: 0.2,
            batch_size: 8,
            lr0: 1e-4,
            ..TrainConfig::default()
        };
        let result = train(model, &data, &cfg).unwrap();
        // 8 frames train (2 val), batch 8 → 1 step/epoch → 8 validations:
        // improve, stall×3 → decay, stall×3 → decay, stall.
        assert_eq!(result.steps, 8);
        assert_eq!(result.log.len(), 8);
        assert_eq!(result.final_lr, 1e-4 * 0.8f64.powi(2));
        assert_eq!(result.best_val_mae, 0.0);
    }

    #[test]
    fn best_checkpoint_is_saved_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let data = vec![("a".to_string(), toy_trajectory(3, 12, 3, false))];
        let cfg = TrainConfig {
            checkpoint: Some(path.clone()),
            ..quick_cfg()
        };
        let result = train(dense_model(9), &data, &cfg).unwrap();
        assert!(path.exists());
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.params(), result.best.params());
        assert!(result.best_val_mae.is_finite());
    }

    #[test]
    fn single_molecule_makes_arms_coincide() {
        let data = vec![("only".to_string(), toy_trajectory(3, 10, 4, false))];
        let base = dense_model(10);
        let report = run_single_vs_joint(&base, &data, &[], &quick_cfg()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].arm, Arm::Separate);
        assert_eq!(report.rows[1].arm, Arm::Joint);
        assert_eq!(report.rows[0].force_mae, report.rows[1].force_mae);
        assert_eq!(
            report.rows[0].cosine_distance,
            report.rows[1].cosine_distance
        );
        assert!(report.held_out.is_empty());
    }

    #[test]
    fn comparison_report_has_one_row_per_molecule_and_arm() {
        let data = vec![
            ("a".to_string(), toy_trajectory(3, 10, 5, false)),
            ("b".to_string(), toy_trajectory(4, 10, 6, false)),
        ];
        let held = vec![("c".to_string(), toy_trajectory(5, 4, 7, false))];
        let report = run_single_vs_joint(&dense_model(11), &data, &held, &quick_cfg()).unwrap();
        assert_eq!(report.rows.len(), 4);
        let separate = report.rows.iter().filter(|r| r.arm == Arm::Separate).count();
        assert_eq!(separate, 2);
        assert_eq!(report.held_out.len(), 1);
        assert_eq!(report.held_out[0].molecule, "c");
        assert!(report.held_out[0].force_mae.is_finite());
    }

    #[test]
    fn log_csv_format_is_fixed() {
        let rows = vec![LogRow {
            step: 500,
            lr: 1e-4,
            train_loss: 0.5,
            val_force_mae: 0.25,
            val_cosd: 0.125,
        }];
        let mut buf = Vec::new();
        write_log_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,lr,train_loss,val_force_mae,val_cosd\n\
             500,1.000000000000e-4,5.000000000000e-1,2.500000000000e-1,1.250000000000e-1\n"
        );
    }

    #[test]
    fn training_reduces_loss_on_learnable_labels() {
        // Labels from a fixed "teacher" of the same architecture: a few
        // dozen steps of force matching must reduce validation MAE.
        let teacher = dense_model(20);
        let mut rng = seeded_rng(21);
        let species = vec![0, 1, 2];
        let frames: Vec<Conformation> = (0..24)
            .map(|_| {
                let pos = random_positions(&mut rng, 3, 2.0);
                let pred = teacher.predict_raw(&pos, &species).unwrap();
                Conformation::with_labels(pos, species.clone(), None, Some(pred.forces)).unwrap()
            })
            .collect();
        let data = vec![(
            "teacher".to_string(),
            Trajectory::new(frames, 0.5, "toy").unwrap(),
        )];
        let cfg = TrainConfig {
            epochs: 12,
            lr0: 2e-3,
            val_every: 5,
            batch_size: 4,
            val_fraction: 0.1,
            ..TrainConfig::default()
        };
        let student = Model::initialize(tiny_config(), 99).unwrap();
        let before = evaluate_forces(&student, &data[0].1.frames()[22..]).unwrap().0;
        let result = train(student, &data, &cfg).unwrap();
        assert!(
            result.best_val_mae < before,
            "training failed to improve: {} → {}",
            before,
            result.best_val_mae
        );
        assert!(result.steps > 0);
    }
}
