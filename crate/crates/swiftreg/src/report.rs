//! Post-alignment diagnostics: per-section SNR and pose tables, jump and
//! low-confidence flags, and orthogonal cut-plane images through the
//! aligned stack (XZ and YZ resamples).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use swiftreg_core::{
    build_model, build_pyramid, grid_match, render, Image, ModelSpec, SectionWarp,
    WhiteningParams,
};

use crate::error::{AppError, Result};
use crate::io::{read_image, write_pgm8};
use crate::manifest::{SectionStatus, StackManifest};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionReport {
    pub id: usize,
    pub status: SectionStatus,
    /// Best match SNR against the neighborhood model, recomputed at the
    /// reported level; null for unmatched sections.
    pub snr: Option<f64>,
    /// Translation components of the section's affine pose at the reported
    /// level; null for mesh warps.
    pub translation: Option<(f64, f64)>,
    pub low_confidence: bool,
    /// Pose deviates from the 5-neighborhood median by more than 3x its MAD.
    pub jump: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    /// Pyramid level the diagnostics were computed at (0 = full resolution).
    pub level: usize,
    pub sections: Vec<SectionReport>,
    pub low_confidence: Vec<usize>,
    pub interpolated: Vec<usize>,
    /// Mean absolute difference between adjacent section rows of the XZ cut;
    /// spikes localize residual misalignment in Z.
    pub xz_adjacent_diff: Vec<f64>,
}

fn mad_flags(values: &[f64]) -> Vec<bool> {
    let n = values.len();
    let mut flags = vec![false; n];
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let mut hood: Vec<f64> = (lo..=hi).filter(|&j| j != i).map(|j| values[j]).collect();
        if hood.len() < 2 {
            continue;
        }
        hood.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = hood[hood.len() / 2];
        let mut dev: Vec<f64> = hood.iter().map(|v| (v - med).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mad = dev[dev.len() / 2].max(0.25);
        if (values[i] - med).abs() > 3.0 * mad {
            flags[i] = true;
        }
    }
    flags
}

pub fn report(manifest: &StackManifest, base_dir: &Path, out_dir: &Path) -> Result<ReportBundle> {
    manifest.validate()?;
    let level = manifest
        .finest_completed_level()
        .ok_or(AppError::NoCompletedLevel)?;

    let active: Vec<&crate::manifest::ManifestSection> = manifest
        .sections
        .iter()
        .filter(|s| s.status != SectionStatus::Skipped)
        .collect();

    // Load, reduce to the reported level, and render into the common frame.
    let aligned: Vec<Image> = active
        .par_iter()
        .map(|s| -> Result<Image> {
            let path = if s.source_path.is_absolute() {
                s.source_path.clone()
            } else {
                base_dir.join(&s.source_path)
            };
            let img = read_image(&path)?;
            let at_level = if level == 0 {
                img
            } else {
                let pyr = build_pyramid(&img, &manifest.levels)?;
                pyr[level].clone()
            };
            let warp = s.warp_at(level).expect("completed level");
            render(&at_level, warp, at_level.width, at_level.height).map_err(AppError::from)
        })
        .collect::<Result<_>>()?;
    let (lw, lh) = (aligned[0].width, aligned[0].height);
    let nsec = aligned.len();

    // Orthogonal cuts through the middle of the aligned volume.
    let mut xz = Image::constant(lw, nsec, 0.0);
    let mut yz = Image::constant(nsec, lh, 0.0);
    for (z, img) in aligned.iter().enumerate() {
        for x in 0..lw {
            xz.set(x, z, img.get(x, lh / 2));
        }
        for y in 0..lh {
            yz.set(z, y, img.get(lw / 2, y));
        }
    }

    let xz_adjacent_diff: Vec<f64> = (1..nsec)
        .map(|z| {
            (0..lw)
                .map(|x| (xz.get(x, z) - xz.get(x, z - 1)).abs())
                .sum::<f64>()
                / lw as f64
        })
        .collect();

    // Recompute match confidence against the neighborhood model.
    let params = WhiteningParams::new(0.7);
    let patch = (lw.min(lh) / 2).max(16).min(lw).min(lh);
    let exclusions = active
        .iter()
        .enumerate()
        .filter(|(_, s)| s.status == SectionStatus::Damaged)
        .map(|(i, _)| i)
        .collect();
    let spec = ModelSpec {
        span: 3.min(if nsec % 2 == 0 { nsec - 1 } else { nsec }).max(1),
        exclude_self: true,
        exclusions,
    };
    let snrs: Vec<Option<f64>> = (0..nsec)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            if active[i].status == SectionStatus::Damaged {
                return Ok(None);
            }
            let Ok(model) = build_model(&aligned, i, &spec) else {
                return Ok(None);
            };
            let points = grid_match(
                &model,
                &aligned[i],
                3,
                3,
                patch,
                &params,
                0.125,
                f64::INFINITY,
                0.0,
            )?;
            Ok(points
                .iter()
                .filter(|p| p.result.valid)
                .map(|p| p.result.snr)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))))
        })
        .collect::<Result<_>>()?;

    let translations: Vec<Option<(f64, f64)>> = active
        .iter()
        .map(|s| match s.warp_at(level) {
            Some(SectionWarp::Affine(a)) => Some((a.tx, a.ty)),
            _ => None,
        })
        .collect();
    let tx: Vec<f64> = translations.iter().map(|t| t.map_or(0.0, |t| t.0)).collect();
    let ty: Vec<f64> = translations.iter().map(|t| t.map_or(0.0, |t| t.1)).collect();
    let jump: Vec<bool> = mad_flags(&tx)
        .into_iter()
        .zip(mad_flags(&ty))
        .map(|(a, b)| a || b)
        .collect();

    let sections: Vec<SectionReport> = (0..nsec)
        .map(|i| SectionReport {
            id: active[i].id,
            status: active[i].status,
            snr: snrs[i],
            translation: translations[i],
            low_confidence: snrs[i].is_some_and(|s| s < 6.0),
            jump: jump[i],
        })
        .collect();

    let bundle = ReportBundle {
        level,
        low_confidence: sections
            .iter()
            .filter(|s| s.low_confidence)
            .map(|s| s.id)
            .collect(),
        interpolated: sections
            .iter()
            .filter(|s| s.status == SectionStatus::Interpolated)
            .map(|s| s.id)
            .collect(),
        sections,
        xz_adjacent_diff,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    write_pgm8(&out_dir.join("xz_cut.pgm"), &xz)?;
    write_pgm8(&out_dir.join("yz_cut.pgm"), &yz)?;
    let json = serde_json::to_vec_pretty(&bundle).expect("report serializes");
    let path = out_dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| AppError::io(&path, e))?;
    Ok(bundle)
}
