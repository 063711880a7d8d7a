//! Alignment configuration. Loaded from JSON; unknown keys are rejected.
//!
//! Per-level schedules (`grid`, `patch`, `span`) are indexed by processing
//! step, coarsest level first; a schedule shorter than the level count
//! repeats its last entry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Spectral whitening exponent in [0,1].
    pub whitening: f64,
    /// Raised-cosine border band as a fraction of patch size, [0, 0.5].
    pub taper_frac: f64,
    /// Match-grid rows == cols per processing step, coarsest first.
    pub grid: Vec<usize>,
    /// Patch size in pixels per processing step, coarsest first.
    pub patch: Vec<usize>,
    /// Model span (window of candidate neighbor sections) per step;
    /// non-increasing.
    pub span: Vec<usize>,
    /// Stop iterating a level when the stack-median SNR changes by less than
    /// this relative amount.
    pub snr_stop_rel: f64,
    pub max_iters_per_level: usize,
    /// Keep iterating a level while any section's pose still moves by more
    /// than this many pixels (max corner displacement), even after the SNR
    /// has stabilized; slow coherent drift modes barely register in SNR.
    pub pose_stop_px: f64,
    /// One-tailed SNR below which a section is flagged low-confidence.
    pub snr_accept: f64,
    /// Pyramid levels (0 = full resolution) whose recorded warp is a
    /// triangulated mesh instead of a single affine.
    pub mesh_levels: Vec<usize>,
    /// Mesh rows == cols on mesh levels.
    pub mesh_grid: usize,
    /// Largest accepted per-patch offset in pixels; matches beyond it are
    /// marked invalid.
    pub max_offset: f64,
    /// Minimum patch standard deviation for a patch to count as content.
    pub content_floor: f64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            whitening: 0.7,
            taper_frac: 0.125,
            grid: vec![2, 3, 4],
            patch: vec![128, 192, 256],
            span: vec![9, 5, 3],
            snr_stop_rel: 0.01,
            max_iters_per_level: 8,
            pose_stop_px: 0.05,
            snr_accept: 6.0,
            mesh_levels: Vec::new(),
            mesh_grid: 4,
            max_offset: 64.0,
            content_floor: 0.005,
            workers: 0,
            seed: 0,
        }
    }
}

fn schedule(v: &[usize], step: usize) -> usize {
    v[step.min(v.len() - 1)]
}

impl AlignConfig {
    pub fn load(path: &Path) -> Result<AlignConfig> {
        let data = fs::read(path).map_err(|e| AppError::io(path, e))?;
        let cfg: AlignConfig = serde_json::from_slice(&data).map_err(|e| AppError::BadJson {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AppError::Config(m));
        if !(0.0..=1.0).contains(&self.whitening) {
            return err(format!("whitening {} outside [0,1]", self.whitening));
        }
        if !(0.0..=0.5).contains(&self.taper_frac) {
            return err(format!("taper_frac {} outside [0,0.5]", self.taper_frac));
        }
        if self.grid.is_empty() || self.patch.is_empty() || self.span.is_empty() {
            return err("grid/patch/span schedules must be non-empty".into());
        }
        if self.grid.iter().any(|&g| g == 0) {
            return err("grid entries must be >= 1".into());
        }
        if self.patch.iter().any(|&p| p < 16) {
            return err("patch entries must be >= 16".into());
        }
        if self.span.iter().any(|&s| s == 0 || s % 2 == 0) {
            return err("span entries must be odd and >= 1".into());
        }
        if self.span.windows(2).any(|w| w[1] > w[0]) {
            return err("span schedule must be non-increasing".into());
        }
        if !(self.snr_accept > 0.0) {
            return err(format!("snr_accept {} must be > 0", self.snr_accept));
        }
        if !(self.snr_stop_rel > 0.0) {
            return err(format!("snr_stop_rel {} must be > 0", self.snr_stop_rel));
        }
        if self.pose_stop_px < 0.0 {
            return err(format!("pose_stop_px {} must be >= 0", self.pose_stop_px));
        }
        if self.max_iters_per_level == 0 {
            return err("max_iters_per_level must be >= 1".into());
        }
        if self.mesh_grid == 0 {
            return err("mesh_grid must be >= 1".into());
        }
        if !(self.max_offset > 0.0) {
            return err(format!("max_offset {} must be > 0", self.max_offset));
        }
        Ok(())
    }

    pub fn grid_at(&self, step: usize) -> usize {
        schedule(&self.grid, step)
    }

    pub fn patch_at(&self, step: usize) -> usize {
        schedule(&self.patch, step)
    }

    pub fn span_at(&self, step: usize) -> usize {
        schedule(&self.span, step)
    }
}
