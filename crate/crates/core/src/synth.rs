//! Synthetic ground-truth stacks and brute-force oracles.
//!
//! The generator slices one 3D phantom texture (ellipsoidal blobs over
//! low-frequency clutter and fine speckle), warps each slice by a bounded
//! smooth-in-Z random walk of affine parameters, and adds noise and defects.
//! Truth transforms are returned separately so recovered alignments can be
//! scored after factoring out the global gauge freedom.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlate::CorrelationMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::transform::{render, AffineTransform, SectionWarp};

/// Phantom texture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Blobs per million voxels.
    pub blob_density: f64,
    /// In-plane blob radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Amplitude of the low-frequency clutter field.
    pub clutter_amp: f64,
    /// Amplitude of the fine 3D speckle field.
    #[serde(default = "default_speckle")]
    pub speckle_amp: f64,
}

fn default_speckle() -> f64 {
    0.08
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            blob_density: 40.0,
            blob_radius: (6.0, 20.0),
            clutter_amp: 0.1,
            speckle_amp: default_speckle(),
        }
    }
}

/// Bounds for the per-section affine random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpBounds {
    pub max_rotation_deg: f64,
    pub max_scale_dev: f64,
    pub max_shear: f64,
    pub max_translation: f64,
}

impl Default for WarpBounds {
    fn default() -> Self {
        WarpBounds {
            max_rotation_deg: 2.0,
            max_scale_dev: 0.01,
            max_shear: 0.02,
            max_translation: 20.0,
        }
    }
}

/// Defect injected into a damaged section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Blank,
    TearBand,
    IntensityDrop,
}

/// Full description of a synthetic stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sections: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub texture: TextureSpec,
    #[serde(default)]
    pub warp: WarpBounds,
    pub noise_sigma: f64,
    #[serde(default)]
    pub damaged: BTreeMap<usize, DefectKind>,
    pub seed: u64,
}

/// Generated stack: raw (warped, noisy) section images plus the per-section
/// truth transforms mapping raw coordinates back to the phantom frame.
#[derive(Debug, Clone)]
pub struct SynthStack {
    pub sections: Vec<Image>,
    pub truth: Vec<AffineTransform>,
    pub damaged: BTreeMap<usize, DefectKind>,
}

struct Blob {
    x: f64,
    y: f64,
    z: f64,
    rx: f64,
    ry: f64,
    rz: f64,
    amp: f64,
}

/// Trilinear value-noise field on a fixed lattice; smooth in all three axes.
struct ValueNoise {
    nx: usize,
    ny: usize,
    nz: usize,
    cell_xy: f64,
    cell_z: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(
        width: usize,
        height: usize,
        depth: usize,
        cell_xy: f64,
        cell_z: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let nx = (width as f64 / cell_xy).ceil() as usize + 2;
        let ny = (height as f64 / cell_xy).ceil() as usize + 2;
        let nz = (depth as f64 / cell_z).ceil() as usize + 2;
        let values = (0..nx * ny * nz).map(|_| rng.random::<f64>() - 0.5).collect();
        ValueNoise {
            nx,
            ny,
            nz,
            cell_xy,
            cell_z,
            values,
        }
    }

    fn at(&self, x: f64, y: f64, z: f64) -> f64 {
        let fx = x / self.cell_xy;
        let fy = y / self.cell_xy;
        let fz = z / self.cell_z;
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let iz = (fz.floor() as usize).min(self.nz - 2);
        let (ux, uy, uz) = (fx - ix as f64, fy - iy as f64, fz - iz as f64);
        let idx = |x: usize, y: usize, z: usize| (z * self.ny + y) * self.nx + x;
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 0 { 1.0 - ux } else { ux })
                        * (if dy == 0 { 1.0 - uy } else { uy })
                        * (if dz == 0 { 1.0 - uz } else { uz });
                    acc += w * self.values[idx(ix + dx, iy + dy, iz + dz)];
                }
            }
        }
        acc
    }
}

struct Phantom {
    blobs: Vec<Blob>,
    clutter: ValueNoise,
    speckle: ValueNoise,
    clutter_amp: f64,
    speckle_amp: f64,
}

impl Phantom {
    fn build(spec: &SynthSpec) -> Result<Phantom> {
        let (rmin, rmax) = spec.texture.blob_radius;
        if rmax * 2.0 >= spec.width as f64 || rmax * 2.0 >= spec.height as f64 {
            return Err(Error::DimsTooSmallForBlobs {
                width: spec.width,
                height: spec.height,
                radius: rmax,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let voxels = (spec.width * spec.height * spec.sections) as f64;
        let count = ((spec.texture.blob_density * voxels / 1e6).round() as usize).max(1);
        let blobs = (0..count)
            .map(|_| {
                let r = rmin + (rmax - rmin) * rng.random::<f64>();
                Blob {
                    x: rng.random::<f64>() * spec.width as f64,
                    y: rng.random::<f64>() * spec.height as f64,
                    z: rng.random::<f64>() * spec.sections as f64,
                    rx: r * (0.7 + 0.6 * rng.random::<f64>()),
                    ry: r * (0.7 + 0.6 * rng.random::<f64>()),
                    rz: 2.0 + 3.0 * rng.random::<f64>(),
                    amp: if rng.random::<bool>() { 0.35 } else { -0.3 },
                }
            })
            .collect();
        let clutter = ValueNoise::new(spec.width, spec.height, spec.sections, 64.0, 6.0, &mut rng);
        let speckle = ValueNoise::new(spec.width, spec.height, spec.sections, 3.0, 2.0, &mut rng);
        Ok(Phantom {
            blobs,
            clutter,
            speckle,
            clutter_amp: spec.texture.clutter_amp,
            speckle_amp: spec.texture.speckle_amp,
        })
    }

    /// Noiseless, unwarped slice of the phantom at integer section index.
    fn slice(&self, z: usize, width: usize, height: usize) -> Image {
        let zf = z as f64 + 0.5;
        let mut pixels = vec![0.5f64; width * height];
        for y in 0..height {
            for x in 0..width {
                let v = self.clutter_amp * 2.0 * self.clutter.at(x as f64, y as f64, zf)
                    + self.speckle_amp * 2.0 * self.speckle.at(x as f64, y as f64, zf);
                pixels[y * width + x] += v;
            }
        }
        for b in &self.blobs {
            let dz = (zf - b.z) / b.rz;
            if dz.abs() >= 1.0 {
                continue;
            }
            let s = (1.0 - dz * dz).sqrt();
            let (rx, ry) = (b.rx * s, b.ry * s);
            let x0 = ((b.x - 3.0 * rx).floor().max(0.0)) as usize;
            let x1 = ((b.x + 3.0 * rx).ceil().min(width as f64 - 1.0)) as usize;
            let y0 = ((b.y - 3.0 * ry).floor().max(0.0)) as usize;
            let y1 = ((b.y + 3.0 * ry).ceil().min(height as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = ((x as f64 - b.x) / rx).powi(2) + ((y as f64 - b.y) / ry).powi(2);
                    if d2 < 9.0 {
                        pixels[y * width + x] += b.amp * s * (-2.0 * d2).exp();
                    }
                }
            }
        }
        for p in pixels.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        Image::new(width, height, pixels)
    }
}

/// Bounded random walk of affine parameters, smooth across sections.
fn truth_walk(spec: &SynthSpec) -> Vec<AffineTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let b = &spec.warp;
    let max_rot = b.max_rotation_deg.to_radians();
    let mut rot = 0.0f64;
    let mut scale_dev = 0.0f64;
    let mut shear = 0.0f64;
    let mut tx = 0.0f64;
    let mut ty = 0.0f64;
    let center = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
    let step = |rng: &mut ChaCha8Rng, scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
    (0..spec.sections)
        .map(|i| {
            if i > 0 {
                rot = (rot + step(&mut rng, max_rot * 0.35)).clamp(-max_rot, max_rot);
                scale_dev = (scale_dev + step(&mut rng, b.max_scale_dev * 0.35))
                    .clamp(-b.max_scale_dev, b.max_scale_dev);
                shear = (shear + step(&mut rng, b.max_shear * 0.35))
                    .clamp(-b.max_shear, b.max_shear);
                tx = (tx + step(&mut rng, b.max_translation * 0.35))
                    .clamp(-b.max_translation, b.max_translation);
                ty = (ty + step(&mut rng, b.max_translation * 0.35))
                    .clamp(-b.max_translation, b.max_translation);
            }
            AffineTransform::similarity_about(center, rot, 1.0 + scale_dev, shear, tx, ty)
        })
        .collect()
}

/// Generates the raw section images plus their truth transforms (mapping raw
/// section coordinates to the common phantom frame).
pub fn generate_stack(spec: &SynthSpec) -> Result<SynthStack> {
    let phantom = Phantom::build(spec)?;
    let truth = truth_walk(spec);
    let mut sections = Vec::with_capacity(spec.sections);
    for i in 0..spec.sections {
        let slice = phantom.slice(i, spec.width, spec.height);
        // raw(q) = slice(truth(q)): warp the slice by the inverse truth map.
        let inv = truth[i].invert().expect("truth transforms are well-conditioned");
        let mut raw = render(&slice, &SectionWarp::Affine(inv), spec.width, spec.height)?;
        raw.mask = None;
        raw.meta.section_index = i;
        raw.meta.scale = 1;

        if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2 + i as u64);
            let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
            for p in raw.pixels.iter_mut() {
                *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }

        if let Some(defect) = spec.damaged.get(&i) {
            apply_defect(&mut raw, *defect);
        }
        sections.push(raw);
    }
    Ok(SynthStack {
        sections,
        truth,
        damaged: spec.damaged.clone(),
    })
}

fn apply_defect(img: &mut Image, defect: DefectKind) {
    match defect {
        DefectKind::Blank => {
            for p in img.pixels.iter_mut() {
                *p = 0.5;
            }
        }
        DefectKind::TearBand => {
            let band = img.height / 8;
            let y0 = img.height / 2 - band / 2;
            for y in y0..y0 + band {
                for x in 0..img.width {
                    img.set(x, y, 0.0);
                }
            }
        }
        DefectKind::IntensityDrop => {
            for p in img.pixels.iter_mut() {
                *p *= 0.3;
            }
        }
    }
}

/// O(N^4) cyclic spatial cross-correlation of the mean-subtracted inputs,
/// laid out like [`CorrelationMap`] with zero lag at the center. The value at
/// lag s is sum_x a(x) * b(x + s).
pub fn brute_force_correlate(a: &Image, b: &Image) -> Result<CorrelationMap> {
    if a.width > 64 || a.height > 64 || b.width > 64 || b.height > 64 {
        return Err(Error::OversizeOracle(a.width.max(b.width), a.height.max(b.height)));
    }
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (w, h) = (a.width, a.height);
    let am = a.mean();
    let bm = b.mean();
    let av: Vec<f64> = a.pixels.iter().map(|&p| p - am).collect();
    let bv: Vec<f64> = b.pixels.iter().map(|&p| p - bm).collect();
    let (cx, cy) = (w / 2, h / 2);
    let mut values = vec![0.0; w * h];
    for ly in 0..h {
        for lx in 0..w {
            let sx = lx as i64 - cx as i64;
            let sy = ly as i64 - cy as i64;
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let bx = (x as i64 + sx).rem_euclid(w as i64) as usize;
                    let by = (y as i64 + sy).rem_euclid(h as i64) as usize;
                    acc += av[y * w + x] * bv[by * w + bx];
                }
            }
            values[ly * w + lx] = acc;
        }
    }
    Ok(CorrelationMap {
        width: w,
        height: h,
        values,
    })
}

/// Per-section and stack-level alignment residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Mean displacement of the four image corners, per section, in pixels.
    pub per_section: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub rms: f64,
}

/// Scores a recovered alignment against truth. Alignment is defined only up
/// to one common affine, so the gauge is factored out first using the
/// reference section: G = truth_ref o recovered_ref^-1. Residuals are corner
/// displacements of truth_i^-1 o G o recovered_i versus the identity.
pub fn evaluate_alignment(
    recovered: &[AffineTransform],
    truth: &[AffineTransform],
    width: usize,
    height: usize,
    reference: usize,
) -> Result<ResidualStats> {
    if recovered.len() != truth.len() {
        return Err(Error::LengthMismatch(recovered.len(), truth.len()));
    }
    assert!(reference < truth.len());
    let gauge = truth[reference].compose(&recovered[reference].invert()?);
    let corners = [
        (0.0, 0.0),
        (width as f64, 0.0),
        (0.0, height as f64),
        (width as f64, height as f64),
    ];
    let mut per_section = Vec::with_capacity(truth.len());
    for (rec, tru) in recovered.iter().zip(truth) {
        let d = tru.invert()?.compose(&gauge).compose(rec);
        let mean_disp = corners
            .iter()
            .map(|&(x, y)| {
                let (u, v) = d.apply(x, y);
                ((u - x).powi(2) + (v - y).powi(2)).sqrt()
            })
            .sum::<f64>()
            / corners.len() as f64;
        per_section.push(mean_disp);
    }
    let n = per_section.len() as f64;
    let mean = per_section.iter().sum::<f64>() / n;
    let max = per_section.iter().fold(0.0f64, |m, &v| m.max(v));
    let rms = (per_section.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    Ok(ResidualStats {
        per_section,
        mean,
        max,
        rms,
    })
}
