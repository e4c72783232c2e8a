//! Energy calibration.
//!
//! A force-trained model predicts a pseudo-energy Φ whose gradient matches
//! the reference forces but whose absolute scale and offset are unanchored.
//! This module recovers real energies in two steps: integrate the model's
//! gradient along a trajectory to get first-order energy estimates Ē_t
//! anchored at one known initial energy, then fit `E* = w·Φ + b` by ordinary
//! least squares on a handful of uniformly sampled frames.

use crate::chem::Trajectory;
use crate::md::{ForceProvider, ProviderError};
use crate::model::{Model, ModelError};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Number of fit intervals; the fit sees this many samples plus one.
pub const DEFAULT_FIT_INTERVALS: usize = 8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("trajectory has {frames} frame(s); the energy series needs at least 2")]
    TooShort { frames: usize },
    #[error("first frame carries no reference energy to anchor the series")]
    MissingInitialEnergy,
    #[error("pseudo-energy is constant across samples; the linear fit is degenerate")]
    DegenerateFit,
    #[error("sample count mismatch: {phi} pseudo-energies vs {e_bar} estimates")]
    LengthMismatch { phi: usize, e_bar: usize },
    #[error("force provider failed: {0}")]
    Provider(#[source] ProviderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Sign convention for the first-order update. `Plus` adds ⟨∇Φ, Δr⟩ each
/// step, consistent with the line integral E_t = E₀ + ∫ ⟨∇Φ, dr⟩; `Minus`
/// subtracts the increment instead, for comparison against conventions that
/// write the update with the opposite sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaylorSign {
    #[default]
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Fit intervals m; m+1 frames are sampled at uniform stride.
    pub intervals: usize,
    pub taylor_sign: TaylorSign,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            intervals: DEFAULT_FIT_INTERVALS,
            taylor_sign: TaylorSign::Plus,
        }
    }
}

/// Fitted affine map from pseudo-energy to calibrated energy (eV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub w: f64,
    pub b: f64,
    pub fit_residual_mae: f64,
}

impl CalibrationModel {
    /// Pass-through map: calibrated energy equals the pseudo-energy.
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            b: 0.0,
            fit_residual_mae: 0.0,
        }
    }

    pub fn apply(&self, pseudo_energy: f64) -> f64 {
        self.w * pseudo_energy + self.b
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Pseudo-energy and first-order energy estimate at every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorSeries {
    /// Model output Φ_t.
    pub phi: Vec<f64>,
    /// Estimate Ē_t anchored at the first frame's reference energy.
    pub e_bar: Vec<f64>,
}

fn accumulate_series(
    traj: &Trajectory,
    phi: Vec<f64>,
    forces: &[Array2<f64>],
    sign: TaylorSign,
) -> Result<TaylorSeries, CalibrationError> {
    let frames = traj.frames();
    let e0 = frames[0]
        .ref_energy()
        .ok_or(CalibrationError::MissingInitialEnergy)?;
    let mut e_bar = Vec::with_capacity(frames.len());
    e_bar.push(e0);
    for t in 1..frames.len() {
        // ⟨∇Φ(r_{t−1}), r_t − r_{t−1}⟩ with ∇Φ = −F.
        let prev = frames[t - 1].positions();
        let cur = frames[t].positions();
        let mut increment = 0.0;
        for ((f, &p), &c) in forces[t - 1].iter().zip(prev.iter()).zip(cur.iter()) {
            increment += -f * (c - p);
        }
        if sign == TaylorSign::Minus {
            increment = -increment;
        }
        e_bar.push(e_bar[t - 1] + increment);
    }
    Ok(TaylorSeries { phi, e_bar })
}

/// Evaluates any force provider along a trajectory and integrates its
/// gradient into the energy-estimate series.
pub fn taylor_series_with_provider<P: ForceProvider>(
    provider: &mut P,
    traj: &Trajectory,
    sign: TaylorSign,
) -> Result<TaylorSeries, CalibrationError> {
    let frames = traj.frames();
    if frames.len() < 2 {
        return Err(CalibrationError::TooShort {
            frames: frames.len(),
        });
    }
    let mut phi = Vec::with_capacity(frames.len());
    let mut forces = Vec::with_capacity(frames.len());
    for frame in frames {
        let (e, f) = provider
            .energy_forces(frame.positions())
            .map_err(CalibrationError::Provider)?;
        phi.push(e);
        forces.push(f);
    }
    accumulate_series(traj, phi, &forces, sign)
}

/// Model-specific series; frames are evaluated in parallel.
pub fn taylor_series(
    model: &Model,
    traj: &Trajectory,
    sign: TaylorSign,
) -> Result<TaylorSeries, CalibrationError> {
    let frames = traj.frames();
    if frames.len() < 2 {
        return Err(CalibrationError::TooShort {
            frames: frames.len(),
        });
    }
    let evals: Vec<_> = frames
        .par_iter()
        .map(|frame| model.predict(frame))
        .collect::<Result<_, _>>()?;
    let phi = evals.iter().map(|p| p.energy).collect();
    let forces: Vec<_> = evals.into_iter().map(|p| p.forces).collect();
    accumulate_series(traj, phi, &forces, sign)
}

/// The Ē_t sequence alone.
pub fn taylor_energy_series(
    model: &Model,
    traj: &Trajectory,
    sign: TaylorSign,
) -> Result<Vec<f64>, CalibrationError> {
    Ok(taylor_series(model, traj, sign)?.e_bar)
}

/// Ordinary least squares for `e_bar ≈ w·phi + b`.
pub fn fit_linear(phi: &[f64], e_bar: &[f64]) -> Result<CalibrationModel, CalibrationError> {
    if phi.len() != e_bar.len() {
        return Err(CalibrationError::LengthMismatch {
            phi: phi.len(),
            e_bar: e_bar.len(),
        });
    }
    if phi.len() < 2 {
        return Err(CalibrationError::TooShort { frames: phi.len() });
    }
    let n = phi.len() as f64;
    let mean_phi = phi.iter().sum::<f64>() / n;
    let mean_e = e_bar.iter().sum::<f64>() / n;
    let mut var = 0.0;
    let mut cov = 0.0;
    for (&p, &e) in phi.iter().zip(e_bar) {
        var += (p - mean_phi) * (p - mean_phi);
        cov += (p - mean_phi) * (e - mean_e);
    }
    if !var.is_finite() || var.sqrt() <= 1e-12 * (1.0 + mean_phi.abs()) {
        return Err(CalibrationError::DegenerateFit);
    }
    let w = cov / var;
    let b = mean_e - w * mean_phi;
    let fit_residual_mae =
        phi.iter().zip(e_bar).map(|(&p, &e)| (w * p + b - e).abs()).sum::<f64>() / n;
    Ok(CalibrationModel {
        w,
        b,
        fit_residual_mae,
    })
}

/// Frame indices for m+1 samples at uniform stride over [0, len):
/// t₀ = 0 and t_m = len−1, duplicates collapsed for short trajectories.
pub fn sample_indices(len: usize, intervals: usize) -> Vec<usize> {
    let m = intervals.max(1);
    let last = len.saturating_sub(1) as f64;
    let mut idx: Vec<usize> = (0..=m)
        .map(|i| ((i as f64) * last / (m as f64)).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// End-to-end calibration: integrate the gradient, sample m+1 frames
/// uniformly, fit the affine map.
pub fn calibrate(
    model: &Model,
    traj: &Trajectory,
    config: &CalibrationConfig,
) -> Result<CalibrationModel, CalibrationError> {
    let series = taylor_series(model, traj, config.taylor_sign)?;
    let idx = sample_indices(series.phi.len(), config.intervals);
    let phi: Vec<f64> = idx.iter().map(|&i| series.phi[i]).collect();
    let e_bar: Vec<f64> = idx.iter().map(|&i| series.e_bar[i]).collect();
    fit_linear(&phi, &e_bar)
}

/// `w·Φ(c) + b` for one conformation.
pub fn calibrated_energy(
    model: &Model,
    c: &crate::chem::Conformation,
    cal: &CalibrationModel,
) -> Result<f64, CalibrationError> {
    Ok(cal.apply(model.predict(c)?.energy))
}
