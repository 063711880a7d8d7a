//! The multi-resolution alignment driver: render → remodel → match → solve
//! per level, coarsest first, iterating until the stack-median SNR
//! stabilizes, then advancing resolution with the coarse solution as a warm
//! start. Damaged sections are excluded from models and bridged across per
//! level; the manifest is rewritten atomically after each level.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use swiftreg_core::{
    build_mesh, build_model, build_pyramid, bridge_gap, grid_match, render, solve_affine,
    AffineTransform, Image, MatchPoint, ModelSpec, Rect, SectionWarp, Weighting, WhiteningParams,
};

use crate::config::AlignConfig;
use crate::error::{AppError, Result};
use crate::io::{read_image, write_swr};
use crate::manifest::{SectionStatus, StackManifest};

/// Result of one matching pass over a level.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    /// Updated per-section transforms (raw level coords -> reference).
    pub transforms: Vec<AffineTransform>,
    /// Best (maximum) valid match SNR per section; 0 where not matched.
    pub section_snr: Vec<f64>,
    /// Median of `section_snr` over matchable sections.
    pub median_snr: f64,
    /// Valid match count per section.
    pub valid_counts: Vec<usize>,
    /// Full match grids, for mesh building and diagnostics.
    pub points: Vec<Vec<MatchPoint>>,
}

#[derive(Debug, Clone)]
pub struct LevelStats {
    pub level: usize,
    pub iterations: usize,
    pub median_snr: f64,
    pub section_snr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub levels: Vec<LevelStats>,
    /// Ids of sections whose final SNR fell below `snr_accept`.
    pub low_confidence: Vec<usize>,
}

/// Labels each matchable section with the id of its contiguous matchable
/// run. Damaged/skipped sections get `usize::MAX`.
fn block_ids(matchable: &[bool]) -> Vec<usize> {
    let n = matchable.len();
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if matchable[i] {
            ids[i] = next;
            if i + 1 >= n || !matchable[i + 1] {
                next += 1;
            }
        }
    }
    ids
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Placeholder for sections that must occupy a stack slot but contribute
/// nothing: zero pixels, all-false coverage mask.
fn hole(width: usize, height: usize) -> Image {
    let mut img = Image::constant(width, height, 0.0);
    img.mask = Some(vec![false; width * height]);
    img
}

/// One render → model → match → solve pass over every matchable section.
///
/// `images` are the raw sections at the working level; `matchable[i]` is
/// false for damaged/skipped sections, which keep their incoming transform
/// and are excluded from every model. Work per section is parallel against
/// the read-only rendered stack; updates apply as a barrier at the end.
pub fn iterate_level(
    images: &[Image],
    matchable: &[bool],
    transforms: &[AffineTransform],
    cfg: &AlignConfig,
    step: usize,
) -> Result<IterationOutcome> {
    assert_eq!(images.len(), matchable.len());
    assert_eq!(images.len(), transforms.len());
    let n = images.len();
    let (w, h) = images
        .iter()
        .zip(matchable)
        .find(|(_, &m)| m)
        .map(|(img, _)| (img.width, img.height))
        .ok_or_else(|| AppError::Manifest("no matchable sections".into()))?;

    let rendered: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|i| {
            if matchable[i] {
                render(&images[i], &SectionWarp::Affine(transforms[i]), w, h)
                    .map_err(AppError::from)
            } else {
                Ok(hole(w, h))
            }
        })
        .collect::<Result<_>>()?;

    // Models never mix sections from opposite sides of a damaged gap: the
    // strong same-side correlation swamps the weak, content-decorrelated
    // cross-gap signal, so a mixed model locks the two sides at an arbitrary
    // relative offset. Each block converges on its own; `stitch_blocks`
    // measures the relative gauge directly.
    let blocks = block_ids(matchable);
    let spec_for = |i: usize| ModelSpec {
        span: cfg.span_at(step),
        exclude_self: true,
        exclusions: (0..n)
            .filter(|&j| !matchable[j] || blocks[j] != blocks[i])
            .collect::<BTreeSet<usize>>(),
    };
    let params = WhiteningParams::new(cfg.whitening);

    // Warped sections leave zero-coverage bands at the output borders whose
    // edges would otherwise act as spurious registration features. Match
    // only the interior that every pose keeps covered.
    let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
    let max_disp = transforms
        .iter()
        .zip(matchable)
        .filter(|(_, &m)| m)
        .map(|(t, _)| {
            corners
                .iter()
                .map(|&(x, y)| {
                    let (u, v) = t.apply(x, y);
                    (u - x).abs().max((v - y).abs())
                })
                .fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max);
    let margin = ((max_disp.ceil() as usize) + 2).min(w.min(h) / 6);
    let (iw, ih) = (w - 2 * margin, h - 2 * margin);

    let patch = cfg.patch_at(step).min(iw).min(ih);
    let grid = cfg.grid_at(step);

    struct Update {
        correction: Option<AffineTransform>,
        snr: f64,
        valid: usize,
        points: Vec<MatchPoint>,
    }

    let updates: Vec<Option<Update>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Option<Update>> {
            if !matchable[i] {
                return Ok(None);
            }
            let model = build_model(&rendered, i, &spec_for(i))?;
            let interior_model = model.crop_rect(margin, margin, iw, ih);
            let interior = rendered[i].crop_rect(margin, margin, iw, ih);
            let mut points = grid_match(
                &interior_model,
                &interior,
                grid,
                grid,
                patch,
                &params,
                cfg.taper_frac,
                cfg.max_offset,
                cfg.content_floor,
            )?;
            // back to whole-image coordinates for the solve
            for p in points.iter_mut() {
                p.cx += margin as f64;
                p.cy += margin as f64;
            }
            let valid = points.iter().filter(|p| p.result.valid).count();
            let snr = points
                .iter()
                .filter(|p| p.result.valid)
                .map(|p| p.result.snr)
                .fold(0.0f64, f64::max);
            // the fitted map sends model positions to where the content sits
            // in the current render; its inverse is the pose correction
            let correction = match solve_affine(&points, Weighting::Snr) {
                Ok(fit) => Some(fit.transform.invert()?),
                Err(_) => None,
            };
            Ok(Some(Update {
                correction,
                snr,
                valid,
                points,
            }))
        })
        .collect::<Result<_>>()?;

    let mut out = IterationOutcome {
        transforms: transforms.to_vec(),
        section_snr: vec![0.0; n],
        median_snr: 0.0,
        valid_counts: vec![0; n],
        points: vec![Vec::new(); n],
    };
    let mut snrs = Vec::new();
    let mut corrections: Vec<Option<[f64; 6]>> = vec![None; n];
    for (i, u) in updates.into_iter().enumerate() {
        if let Some(u) = u {
            corrections[i] = u.correction.map(|c| {
                let p = c.params();
                [p[0] - 1.0, p[1], p[2], p[3], p[4] - 1.0, p[5]]
            });
            out.section_snr[i] = u.snr;
            out.valid_counts[i] = u.valid;
            out.points[i] = u.points;
            snrs.push(u.snr);
        }
    }
    out.median_snr = median(&snrs);

    // Each correction only measures a section's deviation from its window
    // mean, so coherent slow-in-Z modes (a pose ramp across the stack) show
    // up almost entirely at the stack ends and would take O(n^2) outer
    // iterations to diffuse inward. Solve the window-consistency system
    // e_i = c_i + mean_{W(i)}(e) in parameter space instead; renders and
    // matches stay untouched, only the pose update changes.
    let contributors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            if matchable[i] && corrections[i].is_some() {
                spec_for(i).contributors(i, n).unwrap_or_default()
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut e: Vec<[f64; 6]> = corrections
        .iter()
        .map(|c| c.unwrap_or([0.0; 6]))
        .collect();
    let active: Vec<usize> = (0..n).filter(|&i| corrections[i].is_some()).collect();
    // The consistency solve assumes the measurements respond linearly to
    // pose error, which only holds while errors stay within the correlation
    // peak's parabolic neighborhood. A gross outlier (a section locked
    // pixels off) yields measurements the solve would amplify wildly, so
    // fall back to plain independent updates until everything is small.
    let max_correction = active
        .iter()
        .map(|&i| {
            let d = corrections[i].unwrap();
            corners
                .iter()
                .map(|&(x, y)| {
                    let u = d[0] * x + d[1] * y + d[2];
                    let v = d[3] * x + d[4] * y + d[5];
                    (u * u + v * v).sqrt()
                })
                .fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max);
    let relax = max_correction <= 1.0;
    if !active.is_empty() && relax {
        let sweeps = (20 * n * n).clamp(200, 20_000);
        let mut next = vec![[0.0f64; 6]; n];
        for _ in 0..sweeps {
            for &i in &active {
                let mut acc = [0.0f64; 6];
                for &j in &contributors[i] {
                    for k in 0..6 {
                        acc[k] += e[j][k];
                    }
                }
                let m = contributors[i].len().max(1) as f64;
                let c = corrections[i].unwrap();
                // damped Jacobi: the plain sweep has an undamped alternating
                // mode when the window is just the two nearest neighbors
                for k in 0..6 {
                    next[i][k] = 0.5 * e[i][k] + 0.5 * (c[k] + acc[k] / m);
                }
            }
            // pin the gauge: corrections carry no net component per block
            // (blocks are decoupled here, so each needs its own pin)
            let nblocks = blocks
                .iter()
                .filter(|&&b| b != usize::MAX)
                .max()
                .map_or(0, |&b| b + 1);
            let mut mean = vec![[0.0f64; 6]; nblocks];
            let mut count = vec![0usize; nblocks];
            for &i in &active {
                count[blocks[i]] += 1;
                for k in 0..6 {
                    mean[blocks[i]][k] += next[i][k];
                }
            }
            for (m, &c) in mean.iter_mut().zip(&count) {
                for k in 0..6 {
                    m[k] /= c.max(1) as f64;
                }
            }
            for &i in &active {
                for k in 0..6 {
                    e[i][k] = next[i][k] - mean[blocks[i]][k];
                }
            }
        }
    }
    for &i in &active {
        let d = e[i];
        let delta = AffineTransform::from([
            1.0 + d[0],
            d[1],
            d[2],
            d[3],
            1.0 + d[4],
            d[5],
        ]);
        out.transforms[i] = delta.compose(&transforms[i]);
    }
    Ok(out)
}

/// Rescales a transform from level `k+1` coordinates to level `k`
/// coordinates: translations multiply by the factor, the linear part is
/// scale-free.
fn upscale(t: &AffineTransform, factor: u32) -> AffineTransform {
    let mut out = *t;
    out.tx *= factor as f64;
    out.ty *= factor as f64;
    out
}

struct Section {
    id: usize,
    pyramid: Vec<Image>,
    status: SectionStatus,
}

pub fn align_stack(
    manifest: &mut StackManifest,
    base_dir: &Path,
    cfg: &AlignConfig,
    persist_to: Option<&Path>,
    workdir: Option<&Path>,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    manifest.validate()?;
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| AppError::Config(format!("thread pool: {e}")))?;
        return pool.install(|| align_stack_inner(manifest, base_dir, cfg, persist_to, workdir));
    }
    align_stack_inner(manifest, base_dir, cfg, persist_to, workdir)
}

fn align_stack_inner(
    manifest: &mut StackManifest,
    base_dir: &Path,
    cfg: &AlignConfig,
    persist_to: Option<&Path>,
    workdir: Option<&Path>,
) -> Result<AlignOutcome> {
    // Load sources and build pyramids. Skipped sections stay out entirely.
    let mut sections = Vec::new();
    let mut dims = None;
    for (idx, ms) in manifest.sections.iter().enumerate() {
        if ms.status == SectionStatus::Skipped {
            continue;
        }
        let path = if ms.source_path.is_absolute() {
            ms.source_path.clone()
        } else {
            base_dir.join(&ms.source_path)
        };
        let img = read_image(&path)?;
        match dims {
            None => dims = Some((img.width, img.height)),
            Some(d) => {
                if d != (img.width, img.height) {
                    return Err(AppError::Manifest(format!(
                        "section {} dims {}x{} differ from {}x{}",
                        ms.id, img.width, img.height, d.0, d.1
                    )));
                }
            }
        }
        let pyramid = build_pyramid(&img, &manifest.levels)?;
        sections.push((idx, Section {
            id: ms.id,
            pyramid,
            status: ms.status,
        }));
    }
    let (w, h) = dims.ok_or_else(|| AppError::Manifest("no usable sections".into()))?;
    manifest.levels.validate_for(w, h)?;

    let n = sections.len();
    let nlev = manifest.levels.factors.len();
    let matchable: Vec<bool> = sections
        .iter()
        .map(|(_, s)| s.status == SectionStatus::Ok)
        .collect();
    if !matchable.iter().any(|&m| m) {
        return Err(AppError::Manifest("no ok sections to align".into()));
    }

    // cumulative scale of the coarsest level
    let coarsest_scale: u32 = manifest.levels.factors.iter().product();
    let mut transforms: Vec<AffineTransform> = vec![AffineTransform::identity(); n];
    if let Some(c) = &manifest.global_constraint {
        let mut t = *c;
        t.tx /= coarsest_scale as f64;
        t.ty /= coarsest_scale as f64;
        transforms = vec![t; n];
    }

    let params = WhiteningParams::new(cfg.whitening);
    let mut outcome = AlignOutcome {
        levels: Vec::new(),
        low_confidence: Vec::new(),
    };

    for (step, level) in (0..=nlev).rev().enumerate() {
        if step > 0 {
            let factor = manifest.levels.factors[level];
            for t in transforms.iter_mut() {
                *t = upscale(t, factor);
            }
        }
        let level_images: Vec<Image> = sections
            .iter()
            .map(|(_, s)| s.pyramid[level].clone())
            .collect();
        let (lw, lh) = (level_images[0].width, level_images[0].height);

        let mut last: Option<IterationOutcome> = None;
        let mut prev_median: Option<f64> = None;
        let mut iterations = 0;
        for _iter in 0..cfg.max_iters_per_level {
            let it = iterate_level(&level_images, &matchable, &transforms, cfg, step)?;
            // largest corner displacement any section's pose moved this pass
            let corners = [
                (0.0, 0.0),
                (lw as f64, 0.0),
                (0.0, lh as f64),
                (lw as f64, lh as f64),
            ];
            let pose_delta = transforms
                .iter()
                .zip(&it.transforms)
                .map(|(a, b)| {
                    corners
                        .iter()
                        .map(|&(x, y)| {
                            let (ax, ay) = a.apply(x, y);
                            let (bx, by) = b.apply(x, y);
                            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
                        })
                        .fold(0.0f64, f64::max)
                })
                .fold(0.0f64, f64::max);
            transforms.clone_from(&it.transforms);
            iterations += 1;
            if let Some(dir) = workdir {
                cache_renders(dir, level, iterations, &level_images, &matchable, &transforms)?;
            }
            let m = it.median_snr;
            last = Some(it);
            if let Some(p) = prev_median {
                let snr_stable = (m - p).abs() <= cfg.snr_stop_rel * f64::max(p, 1e-12);
                // SNR alone is blind to coherent drift: a slow ramp across
                // the stack barely changes match quality while poses are
                // still converging, so also require the poses to be still
                if snr_stable && pose_delta <= cfg.pose_stop_px {
                    break;
                }
            }
            prev_median = Some(m);
        }
        let last = last.expect("at least one iteration ran");

        // A section that never produced a single valid match at the coarsest
        // level has nothing anchoring it: fail loudly with the ids.
        if step == 0 {
            let dead: Vec<usize> = (0..n)
                .filter(|&i| matchable[i] && last.valid_counts[i] == 0)
                .map(|i| sections[i].1.id)
                .collect();
            if !dead.is_empty() {
                return Err(AppError::AlignmentFailed(dead));
            }
        }

        // Blocks separated by damaged runs converged independently; measure
        // each gap's relative gauge with a direct anchor-to-anchor match and
        // fold it into the later block.
        stitch_blocks(&level_images, &matchable, &mut transforms, cfg, step)?;

        // Bridge damaged runs through the solved neighbors.
        let mut interpolated = vec![false; n];
        let mut i = 0;
        while i < n {
            if !matchable[i] {
                let lo = i;
                while i < n && !matchable[i] {
                    i += 1;
                }
                let hi = i - 1;
                let bridged = bridge_gap(&transforms, lo, hi)?;
                for j in lo..=hi {
                    transforms[j] = bridged[j];
                    interpolated[j] = true;
                }
            } else {
                i += 1;
            }
        }

        // Record this level's warps in the manifest.
        let use_mesh = cfg.mesh_levels.contains(&level);
        for i in 0..n {
            let warp = if use_mesh && matchable[i] {
                mesh_warp(
                    &level_images,
                    &matchable,
                    &transforms,
                    i,
                    lw,
                    lh,
                    cfg,
                    step,
                    &params,
                )?
            } else {
                SectionWarp::Affine(transforms[i])
            };
            let midx = sections[i].0;
            manifest.sections[midx].set_warp(level, warp);
            if interpolated[i] {
                manifest.sections[midx].status = SectionStatus::Interpolated;
            }
        }
        if let Some(path) = persist_to {
            manifest.save_atomic(path)?;
        }

        outcome.levels.push(LevelStats {
            level,
            iterations,
            median_snr: last.median_snr,
            section_snr: last.section_snr.clone(),
        });
        if level == 0 {
            outcome.low_confidence = (0..n)
                .filter(|&i| matchable[i] && last.section_snr[i] < cfg.snr_accept)
                .map(|i| sections[i].1.id)
                .collect();
        }
    }
    Ok(outcome)
}

/// Registers each matchable block to its predecessor across the damaged gap
/// between them: one direct match of the two anchor sections' renders, whose
/// solved affine is applied rigidly to every section of the later block.
/// Processed left to right so each gap is measured against the
/// already-corrected side. A gap whose anchors produce no valid match is
/// left as-is (the bridge interpolation still runs afterwards).
fn stitch_blocks(
    level_images: &[Image],
    matchable: &[bool],
    transforms: &mut [AffineTransform],
    cfg: &AlignConfig,
    step: usize,
) -> Result<()> {
    let n = level_images.len();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if matchable[i] {
            let lo = i;
            while i < n && matchable[i] {
                i += 1;
            }
            runs.push((lo, i - 1));
        } else {
            i += 1;
        }
    }
    if runs.len() < 2 {
        return Ok(());
    }
    let params = WhiteningParams::new(cfg.whitening);
    for pair in 0..runs.len() - 1 {
        let ia = runs[pair].1;
        let (ib, ib_end) = runs[pair + 1];
        let (w, h) = (level_images[ia].width, level_images[ia].height);
        let ra = render(&level_images[ia], &SectionWarp::Affine(transforms[ia]), w, h)?;
        let rb = render(&level_images[ib], &SectionWarp::Affine(transforms[ib]), w, h)?;
        // match only the interior both poses keep covered (see iterate_level)
        let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
        let max_disp = [transforms[ia], transforms[ib]]
            .iter()
            .map(|t| {
                corners
                    .iter()
                    .map(|&(x, y)| {
                        let (u, v) = t.apply(x, y);
                        (u - x).abs().max((v - y).abs())
                    })
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        let margin = ((max_disp.ceil() as usize) + 2).min(w.min(h) / 6);
        let (iw, ih) = (w - 2 * margin, h - 2 * margin);
        // spread the patch centers as widely as possible: the linear part of
        // the stitch is estimated from how the per-patch offsets vary across
        // the field, so its noise scales inversely with the center spread
        let grid = cfg.grid_at(step).max(4);
        let patch = cfg.patch_at(step).min(iw / 2).min(ih / 2).max(32);
        let mut points = grid_match(
            &ra.crop_rect(margin, margin, iw, ih),
            &rb.crop_rect(margin, margin, iw, ih),
            grid,
            grid,
            patch,
            &params,
            cfg.taper_frac,
            cfg.max_offset,
            cfg.content_floor,
        )?;
        for p in points.iter_mut() {
            p.cx += margin as f64;
            p.cy += margin as f64;
        }
        let valid = points.iter().filter(|p| p.result.valid).count();
        // The relative rotation/scale gauge between blocks is only
        // observable through these cross-gap matches, so fit a full affine
        // when the field is large enough to condition it; on small fields
        // the per-patch content bias divided by the tiny center spread
        // makes the fitted linear part worse than none, so fall back to
        // translation-only there.
        let affine_ok = valid >= 6 && iw.min(ih) >= 384;
        let correction = if affine_ok {
            match solve_affine(&points, Weighting::Snr) {
                Ok(fit) => Some(fit.transform.invert()?),
                Err(_) => None,
            }
        } else {
            None
        };
        let correction = match correction {
            Some(c) => c,
            None => {
                let mut sw = 0.0;
                let mut dx = 0.0;
                let mut dy = 0.0;
                for p in points.iter().filter(|p| p.result.valid) {
                    sw += p.result.snr;
                    dx += p.result.snr * p.result.dx;
                    dy += p.result.snr * p.result.dy;
                }
                if sw <= 0.0 {
                    continue;
                }
                AffineTransform::translation(-dx / sw, -dy / sw)
            }
        };
        for t in transforms[ib..=ib_end].iter_mut() {
            *t = correction.compose(t);
        }
    }
    Ok(())
}

/// Builds the locally-affine mesh warp for one section from a final match
/// pass at the current transforms. Falls back to the plain affine when the
/// composed mesh fails validation (fold-over / degenerate triangles).
#[allow(clippy::too_many_arguments)]
fn mesh_warp(
    level_images: &[Image],
    matchable: &[bool],
    transforms: &[AffineTransform],
    i: usize,
    lw: usize,
    lh: usize,
    cfg: &AlignConfig,
    step: usize,
    params: &WhiteningParams,
) -> Result<SectionWarp> {
    let n = level_images.len();
    let rendered: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|j| {
            if matchable[j] {
                render(&level_images[j], &SectionWarp::Affine(transforms[j]), lw, lh)
                    .map_err(AppError::from)
            } else {
                Ok(hole(lw, lh))
            }
        })
        .collect::<Result<_>>()?;
    let blocks = block_ids(matchable);
    let spec = ModelSpec {
        span: cfg.span_at(step),
        exclude_self: true,
        exclusions: (0..n)
            .filter(|&j| !matchable[j] || blocks[j] != blocks[i])
            .collect(),
    };
    let model = build_model(&rendered, i, &spec)?;
    let points = grid_match(
        &model,
        &rendered[i],
        cfg.grid_at(step),
        cfg.grid_at(step),
        cfg.patch_at(step).min(lw).min(lh),
        params,
        cfg.taper_frac,
        cfg.max_offset,
        cfg.content_floor,
    )?;
    let rect = Rect {
        x: 0.0,
        y: 0.0,
        width: lw as f64,
        height: lh as f64,
    };
    let mut mesh = match build_mesh(rect, cfg.mesh_grid, cfg.mesh_grid, &points) {
        Ok(m) => m,
        Err(_) => return Ok(SectionWarp::Affine(transforms[i])),
    };
    // per-triangle maps go reference -> current render; chain through the
    // inverse pose to reach raw section coordinates
    let inv = transforms[i].invert()?;
    for t in mesh.to_source.iter_mut() {
        *t = inv.compose(t);
    }
    if mesh.validate().is_err() {
        return Ok(SectionWarp::Affine(transforms[i]));
    }
    Ok(SectionWarp::Mesh(mesh))
}

fn cache_renders(
    dir: &Path,
    level: usize,
    iteration: usize,
    images: &[Image],
    matchable: &[bool],
    transforms: &[AffineTransform],
) -> Result<()> {
    let sub = dir.join(format!("level_{level}")).join(format!("iter_{iteration}"));
    std::fs::create_dir_all(&sub).map_err(|e| AppError::io(&sub, e))?;
    for (i, img) in images.iter().enumerate() {
        if !matchable[i] {
            continue;
        }
        let out = render(
            img,
            &SectionWarp::Affine(transforms[i]),
            img.width,
            img.height,
        )?;
        write_swr(&sub.join(format!("sec_{i:04}.swr")), &out)?;
    }
    Ok(())
}

/// Left-composes `constraint` onto every section's finest recorded warp, so
/// subsequent refinement happens within the constrained frame.
pub fn apply_constraint(manifest: &mut StackManifest, constraint: &AffineTransform) -> Result<()> {
    constraint
        .invert()
        .map_err(|_| AppError::Config("singular constraint".into()))?;
    for s in manifest.sections.iter_mut() {
        let Some(top) = s.top_of_chain() else { continue };
        let level = top.level;
        let new_warp = match s.warp_at(level).unwrap() {
            SectionWarp::Affine(a) => SectionWarp::Affine(constraint.compose(a)),
            SectionWarp::Mesh(m) => {
                // the mesh maps output -> source; shifting the output frame by
                // C means sampling source at to_source(C^-1 p)
                let cinv = constraint.invert().unwrap();
                let mut m = m.clone();
                for (x, y) in m.grid.iter_mut() {
                    let (nx, ny) = constraint.apply(*x, *y);
                    *x = nx;
                    *y = ny;
                }
                for t in m.to_source.iter_mut() {
                    *t = t.compose(&cinv);
                }
                SectionWarp::Mesh(m)
            }
        };
        s.set_warp(level, new_warp);
    }
    Ok(())
}
