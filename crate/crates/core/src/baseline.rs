//! Location-uncertainty-only baseline (LU).
//!
//! Thresholded detections become 2-D Gaussian tracks over cell coordinates.
//! A detection that falls inside an existing track's 95% ellipse refines that
//! track by a Gaussian product; otherwise it starts a new track. The belief
//! over the grid is the summed track density evaluated at cell centres.

use std::collections::BTreeSet;

use nalgebra::{Matrix2, Vector2};

use crate::environment::{Measurement, NoiseParams};
use crate::error::{Error, Result};
use crate::geometry::{CellCoord, GridSpec};
use crate::inference::{build_sigma_z, threshold_observation};

/// 95% quantile of a chi-square with two degrees of freedom, `-2 ln 0.05`.
pub const GATE_95: f64 = 5.991464547107979;

/// Smallest variance given to a new or updating detection.
pub const MIN_OBS_VAR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTrack {
    /// `(row, col)` in cell units.
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
}

impl GaussianTrack {
    pub fn at_cell(cell: CellCoord, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::domain(format!("track variance must be positive, got {var}")));
        }
        Ok(Self {
            mean2d: centre(cell),
            cov2d: Matrix2::identity() * var,
        })
    }

    pub fn mahalanobis_sq(&self, point: &Vector2<f64>) -> Option<f64> {
        let d = point - self.mean2d;
        let inv = self.cov2d.try_inverse()?;
        Some((d.transpose() * inv * d)[(0, 0)])
    }

    pub fn density(&self, point: &Vector2<f64>) -> f64 {
        let det = self.cov2d.determinant();
        match self.mahalanobis_sq(point) {
            Some(d2) if det > 0.0 => (-0.5 * d2).exp() / (2.0 * std::f64::consts::PI * det.sqrt()),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LuState {
    pub tracks: Vec<GaussianTrack>,
    pub c_lu: f64,
}

impl LuState {
    pub fn new(c_lu: f64) -> Result<Self> {
        if !(c_lu > 0.0 && c_lu < 1.0) {
            return Err(Error::config(format!("c_lu must lie in (0, 1), got {c_lu}")));
        }
        Ok(Self {
            tracks: Vec::new(),
            c_lu,
        })
    }
}

/// Default detection threshold: 2/3 for a single target, 3/4 otherwise.
pub fn default_c_lu(k: usize) -> f64 {
    if k <= 1 {
        2.0 / 3.0
    } else {
        0.75
    }
}

fn centre(cell: CellCoord) -> Vector2<f64> {
    Vector2::new(cell.row as f64, cell.col as f64)
}

/// First track whose 95% gate contains the centre of `obs_cell`.
pub fn lu_associate(state: &LuState, obs_cell: CellCoord) -> Option<usize> {
    let p = centre(obs_cell);
    state
        .tracks
        .iter()
        .position(|t| t.mahalanobis_sq(&p).is_some_and(|d2| d2 <= GATE_95))
}

/// Gaussian product of the track with a detection `N(obs_cell, obs_var I)`.
pub fn lu_update_track(track: &GaussianTrack, obs_cell: CellCoord, obs_var: f64) -> Result<GaussianTrack> {
    if obs_var.is_nan() || obs_var <= 0.0 {
        return Err(Error::domain(format!("observation variance must be positive, got {obs_var}")));
    }
    let sum = track.cov2d + Matrix2::identity() * obs_var;
    let inv = sum
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular track innovation covariance"))?;
    let gain = track.cov2d * inv;
    let mean2d = track.mean2d + gain * (centre(obs_cell) - track.mean2d);
    let cov = track.cov2d - gain * track.cov2d;
    let cov2d = 0.5 * (cov + cov.transpose());
    if !mean2d.iter().chain(cov2d.iter()).all(|v| v.is_finite()) {
        return Err(Error::numerical("non-finite track update"));
    }
    Ok(GaussianTrack { mean2d, cov2d })
}

/// Summed track density at every cell centre.
pub fn lu_estimate(state: &LuState, grid: GridSpec) -> Vec<f64> {
    grid.cells()
        .map(|c| {
            let p = centre(c);
            state.tracks.iter().map(|t| t.density(&p)).sum()
        })
        .collect()
}

/// Applies one measurement: every reading at or above `c_lu` is associated
/// or starts a track. The detection variance is the diagonal entry of the
/// full noise covariance at that cell.
pub fn lu_step(state: &mut LuState, measurement: &Measurement, params: &NoiseParams, grid: GridSpec) -> Result<()> {
    let hits = threshold_observation(&measurement.observation, state.c_lu);
    if hits.is_empty() {
        return Ok(());
    }
    let sigma = build_sigma_z(&measurement.observation, &measurement.action, params).sigma_z;
    for q in hits {
        let cell = measurement.action.fov.cells[q];
        if !grid.contains(cell.row as i64, cell.col as i64) {
            return Err(Error::domain(format!("observed cell {cell:?} is off the grid")));
        }
        let var = sigma[(q, q)].max(MIN_OBS_VAR);
        match lu_associate(state, cell) {
            Some(i) => state.tracks[i] = lu_update_track(&state.tracks[i], cell, var)?,
            None => state.tracks.push(GaussianTrack::at_cell(cell, var)?),
        }
    }
    Ok(())
}

/// Cells whose summed density reaches `fraction` of the peak density of a
/// unit-variance track, `1 / (2 pi)`.
pub fn lu_recovered_support(state: &LuState, grid: GridSpec, fraction: f64) -> BTreeSet<usize> {
    let cut = fraction / (2.0 * std::f64::consts::PI);
    lu_estimate(state, grid)
        .into_iter()
        .enumerate()
        .filter(|&(_, v)| v >= cut)
        .map(|(i, _)| i)
        .collect()
}
