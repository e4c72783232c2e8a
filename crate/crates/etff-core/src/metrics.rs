//! Evaluation metrics and trajectory-collapse diagnostics.
//!
//! Force accuracy is measured component-wise (MAE) and directionally
//! (cosine distance). Simulation robustness is tracked through the
//! interatomic-distance deviation series S_t and its derived monotone
//! envelope: a trajectory that keeps finding new record deviations at every
//! step for a sustained window has left the physical region and is flagged
//! as collapsed.

use crate::chem::{interatomic_distance_matrix, Trajectory};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Floor for S_t inside the logarithm; S_0 is exactly zero by definition.
pub const LOG_GUARD: f64 = 1e-12;

/// Default indicator window for collapse detection.
pub const DEFAULT_WINDOW: usize = 200;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: predicted {pred:?} vs reference {reference:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        reference: (usize, usize),
    },
    #[error("trajectory has {frames} frame(s); the stability series needs at least 2")]
    TooShort { frames: usize },
    #[error("indicator window must be at least 1")]
    BadWindow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_shapes(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<(), MetricsError> {
    if pred.dim() != reference.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.dim(),
            reference: reference.dim(),
        });
    }
    Ok(())
}

/// Mean absolute error over all n×3 force components (eV/Å).
pub fn force_mae(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<f64, MetricsError> {
    check_shapes(pred, reference)?;
    let n = pred.len();
    let total: f64 = pred
        .iter()
        .zip(reference.iter())
        .map(|(p, r)| (p - r).abs())
        .sum();
    Ok(total / n as f64)
}

/// Mean over atoms of 1 − cos∠(p_i, f_i) ∈ [0, 2]. Atoms where either
/// vector (numerically) vanishes contribute zero: direction is undefined
/// there and must not count as disagreement.
pub fn cosine_distance(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<f64, MetricsError> {
    check_shapes(pred, reference)?;
    let n = pred.nrows();
    let mut total = 0.0;
    for (p, r) in pred.outer_iter().zip(reference.outer_iter()) {
        let dot: f64 = p.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if np * nr >= 1e-12 {
            total += 1.0 - dot / (np * nr);
        }
    }
    Ok(total / n as f64)
}

/// Root mean squared per-atom displacement, no superposition (rigid drift
/// counts as deviation on purpose).
pub fn rmsd(pos_t: &Array2<f64>, pos_0: &Array2<f64>) -> Result<f64, MetricsError> {
    check_shapes(pos_t, pos_0)?;
    let n = pos_t.nrows();
    let total: f64 = pos_t
        .iter()
        .zip(pos_0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((total / n as f64).sqrt())
}

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "pearson needs equal-length series");
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    sxy / denom
}

/// Least-squares line `y ≈ slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len(), "linear_fit needs equal-length series");
    assert!(xs.len() >= 2, "linear_fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Collapse diagnostics for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// S_t: largest absolute change of any interatomic distance vs frame 0.
    pub s_series: Vec<f64>,
    /// S*_t: running maximum of ln(max(S_s, guard)); non-decreasing.
    pub s_star: Vec<f64>,
    /// r_t: fraction of the last `p` steps where S* set a new record;
    /// `None` before `p` steps have elapsed.
    pub r_series: Vec<Option<f64>>,
    /// Earliest frame from which r stays exactly 1 through the end (with at
    /// least `p` frames after it), if any.
    pub collapse_step: Option<usize>,
    /// Indicator window length.
    pub p: usize,
}

/// Compact verdict for machine consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub frames: usize,
    pub p: usize,
    pub collapsed: bool,
    pub collapse_step: Option<usize>,
    pub max_s: f64,
    pub final_s_star: f64,
}

impl StabilityReport {
    pub fn collapsed(&self) -> bool {
        self.collapse_step.is_some()
    }

    pub fn summary(&self) -> StabilitySummary {
        StabilitySummary {
            frames: self.s_series.len(),
            p: self.p,
            collapsed: self.collapsed(),
            collapse_step: self.collapse_step,
            max_s: self.s_series.iter().cloned().fold(0.0, f64::max),
            final_s_star: *self.s_star.last().unwrap(),
        }
    }

    /// One row per frame: `frame,s,s_star,r` (r empty before the window
    /// fills).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), MetricsError> {
        writeln!(out, "frame,s,s_star,r")?;
        for t in 0..self.s_series.len() {
            let r = match self.r_series[t] {
                Some(v) => format!("{v:.12e}"),
                None => String::new(),
            };
            writeln!(
                out,
                "{},{:.12e},{:.12e},{}",
                t, self.s_series[t], self.s_star[t], r
            )?;
        }
        Ok(())
    }
}

/// S_t series for a trajectory: the ∞-norm of D_t − D_0 over all atom
/// pairs, computed from full distance matrices.
pub fn deviation_series(traj: &Trajectory) -> Vec<f64> {
    let frames = traj.frames();
    let d0 = interatomic_distance_matrix(&frames[0]);
    frames
        .par_iter()
        .map(|f| {
            let dt = interatomic_distance_matrix(f);
            dt.iter()
                .zip(d0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Full collapse diagnostics with indicator window `p`.
pub fn stability_series(traj: &Trajectory, p: usize) -> Result<StabilityReport, MetricsError> {
    if p == 0 {
        return Err(MetricsError::BadWindow);
    }
    let n_frames = traj.len();
    if n_frames < 2 {
        return Err(MetricsError::TooShort { frames: n_frames });
    }

    let s_series = deviation_series(traj);

    let mut s_star = Vec::with_capacity(n_frames);
    // Indicator ∇S*_t: 1 when the envelope strictly rose at step t. Index 0
    // carries no step, so indicators[0] is fixed at 0 and never enters a
    // window (windows end at t ≥ p ≥ 1 and reach back only to index 1).
    let mut indicators = vec![0u32; n_frames];
    let mut running = f64::NEG_INFINITY;
    for (t, &s) in s_series.iter().enumerate() {
        let log_s = s.max(LOG_GUARD).ln();
        if log_s > running {
            if t > 0 {
                indicators[t] = 1;
            }
            running = log_s;
        }
        s_star.push(running);
    }

    // r_t over the trailing window, via an integer rolling sum so the
    // "constant 1" test is exact.
    let mut r_series = vec![None; n_frames];
    let mut window_sum: u32 = 0;
    for t in 1..n_frames {
        window_sum += indicators[t];
        if t > p {
            window_sum -= indicators[t - p];
        }
        if t >= p {
            r_series[t] = Some(window_sum as f64 / p as f64);
        }
    }

    // Earliest T with r ≡ 1 from T through the end, needing ≥ p frames
    // after T so a fresh runaway at the very tail doesn't trigger.
    let end = n_frames - 1;
    let mut collapse_step = None;
    let mut t = end;
    loop {
        let saturated = matches!(r_series[t], Some(v) if v == 1.0);
        if !saturated {
            break;
        }
        if end - t >= p {
            collapse_step = Some(t);
        }
        if t == 0 {
            break;
        }
        t -= 1;
    }

    Ok(StabilityReport {
        s_series,
        s_star,
        r_series,
        collapse_step,
        p,
    })
}
