//! Grayscale raster type, bit-depth conversion, contrast normalization and
//! integer-factor pyramid reduction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image metadata carried through the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    /// Index of the section this image belongs to.
    pub section_index: usize,
    /// Pyramid level (0 = full resolution).
    pub level: usize,
    /// Cumulative reduction factor relative to level 0.
    pub scale: u32,
}

/// 2D grayscale raster with real-valued pixels, row-major, nominal range [0,1].
///
/// An optional coverage mask marks pixels that were actually produced by a
/// rendering step; `None` means full coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        assert_eq!(pixels.len(), width * height, "pixel count mismatch");
        debug_assert!(pixels.iter().all(|p| p.is_finite()));
        Image {
            width,
            height,
            pixels,
            mask: None,
            meta: ImageMeta::default(),
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// True when the pixel is covered (always true without a mask).
    #[inline]
    pub fn covered(&self, x: usize, y: usize) -> bool {
        match &self.mask {
            Some(m) => m[y * self.width + x],
            None => true,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation of the pixel values.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .pixels
            .iter()
            .map(|p| (p - mean) * (p - mean))
            .sum::<f64>()
            / self.pixels.len() as f64;
        var.sqrt()
    }

    /// Extracts a `size`x`size` sub-image whose top-left corner is (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Image {
        self.crop_rect(x0, y0, size, size)
    }

    /// Extracts a `w`x`h` sub-image with top-left corner (x0, y0),
    /// carrying the coverage mask along.
    pub fn crop_rect(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        let mut out = Image::new(w, h, pixels);
        if let Some(mask) = &self.mask {
            let mut m = Vec::with_capacity(w * h);
            for y in y0..y0 + h {
                m.extend_from_slice(&mask[y * self.width + x0..y * self.width + x0 + w]);
            }
            out.mask = Some(m);
        }
        out.meta = self.meta;
        out
    }
}

/// Ordered per-step reduction factors for pyramid generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub factors: Vec<u32>,
}

impl PyramidSpec {
    pub fn new(factors: Vec<u32>) -> Self {
        PyramidSpec { factors }
    }

    /// Checks the spec against concrete image dimensions: non-empty, factors
    /// drawn from {2,3,5}, and no level reduced below 16 pixels on either axis.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::EmptyPyramidSpec);
        }
        let (mut w, mut h) = (width, height);
        for &f in &self.factors {
            if !matches!(f, 2 | 3 | 5) {
                return Err(Error::InvalidFactor(f));
            }
            w /= f as usize;
            h /= f as usize;
            if w < 16 || h < 16 {
                return Err(Error::PyramidTooDeep {
                    width,
                    height,
                    min: 16,
                });
            }
        }
        Ok(())
    }
}

/// Nearest-rank percentile of a sorted slice: the smallest element such that
/// at least `p` percent of the multiset is <= it. `p = 0` selects the minimum.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Converts a 16-bit raster to real-valued [0,1] pixels with percentile
/// contrast clipping: values at/below the `clip_lo` percentile map to 0,
/// at/above `clip_hi` map to 1, linear in between.
pub fn convert_depth(
    raw: &[u16],
    width: usize,
    height: usize,
    clip_lo: f64,
    clip_hi: f64,
) -> Result<Image> {
    if raw.is_empty() || width * height == 0 {
        return Err(Error::EmptyRaster);
    }
    assert_eq!(raw.len(), width * height, "raster size mismatch");
    if !(0.0..=100.0).contains(&clip_lo) || !(0.0..=100.0).contains(&clip_hi) || clip_lo >= clip_hi
    {
        return Err(Error::InvalidPercentiles {
            lo: clip_lo,
            hi: clip_hi,
        });
    }

    let mut sorted: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();

    let lo = percentile_sorted(&sorted, clip_lo);
    // Upper cut chosen symmetrically so each end saturates the same count:
    // hi is the value with ceil((100-clip_hi)% * n) elements at or above it.
    let upper_count = (((100.0 - clip_hi) / 100.0) * n as f64).ceil() as usize;
    let hi = sorted[n - upper_count.clamp(1, n)];

    if hi <= lo {
        return Err(Error::DegeneratePercentiles);
    }

    let span = hi - lo;
    let pixels = raw
        .iter()
        .map(|&v| ((v as f64 - lo) / span).clamp(0.0, 1.0))
        .collect();
    Ok(Image::new(width, height, pixels))
}

/// Affinely rescales intensities so the output has the requested mean and
/// standard deviation, then clamps to [0,1].
pub fn normalize_contrast(img: &Image, target_mean: f64, target_std: f64) -> Result<Image> {
    assert!(target_std > 0.0, "target_std must be positive");
    let mean = img.mean();
    let std = img.std();
    // absolute threshold: values live in [0, 1], and naive summation over a
    // constant raster leaves residual deviations well above machine epsilon
    if std <= 1e-12 {
        return Err(Error::ZeroVariance);
    }
    let gain = target_std / std;
    let pixels = img
        .pixels
        .iter()
        .map(|&p| ((p - mean) * gain + target_mean).clamp(0.0, 1.0))
        .collect();
    let mut out = Image::new(img.width, img.height, pixels);
    out.meta = img.meta;
    out.mask = img.mask.clone();
    Ok(out)
}

/// Integer-factor box-mean reduction. Output dims are floor(dim/factor);
/// trailing rows/columns that do not fill a block are dropped.
pub fn downscale(img: &Image, factor: u32) -> Result<Image> {
    if !matches!(factor, 2 | 3 | 5) {
        return Err(Error::InvalidFactor(factor));
    }
    let f = factor as usize;
    let ow = img.width / f;
    let oh = img.height / f;
    if ow == 0 || oh == 0 {
        return Err(Error::DownscaleTooSmall {
            width: img.width,
            height: img.height,
            factor,
        });
    }
    let inv = 1.0 / (f * f) as f64;
    let mut pixels = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..f {
                let row = (oy * f + dy) * img.width + ox * f;
                for dx in 0..f {
                    acc += img.pixels[row + dx];
                }
            }
            pixels.push(acc * inv);
        }
    }
    let mut out = Image::new(ow, oh, pixels);
    out.meta = img.meta;
    Ok(out)
}

/// Builds the reduction pyramid: level 0 is the input, level k+1 is level k
/// reduced by `factors[k]`. Each level's `meta.scale` is the cumulative factor.
pub fn build_pyramid(img: &Image, spec: &PyramidSpec) -> Result<Vec<Image>> {
    if spec.factors.is_empty() {
        return Err(Error::EmptyPyramidSpec);
    }
    let mut levels = Vec::with_capacity(spec.factors.len() + 1);
    let mut current = img.clone();
    current.meta.level = 0;
    if current.meta.scale == 0 {
        current.meta.scale = 1;
    }
    levels.push(current);
    for (k, &f) in spec.factors.iter().enumerate() {
        let prev = levels.last().unwrap();
        let mut next = downscale(prev, f)?;
        next.meta.level = k + 1;
        next.meta.scale = prev.meta.scale * f;
        levels.push(next);
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convert_depth_constant_raster_is_degenerate() {
        let raw = vec![1234u16; 64];
        let err = convert_depth(&raw, 8, 8, 0.5, 99.5).unwrap_err();
        assert!(matches!(err, Error::DegeneratePercentiles));
    }

    #[test]
    fn convert_depth_full_ramp_endpoints() {
        let raw: Vec<u16> = (0..=65535).collect();
        let img = convert_depth(&raw, 256, 256, 0.0, 100.0).unwrap();
        assert_eq!(img.pixels[0], 0.0);
        assert_eq!(img.pixels[65535], 1.0);
        assert!((img.pixels[32768] - 0.50001).abs() < 1e-4);
    }

    #[test]
    fn convert_depth_saturation_counts_match_oracle() {
        // Oracle: sort pixels, compute the percentile cuts directly, apply the
        // map per pixel and count saturated values at each end.
        let mut raw = Vec::with_capacity(1000);
        let mut state = 0x2545F4914F6CDD1Du64;
        for _ in 0..1000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            raw.push((state % 60000) as u16);
        }
        let img = convert_depth(&raw, 40, 25, 2.0, 98.0).unwrap();

        let mut sorted: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[19]; // ceil(2% of 1000) = 20, nearest-rank
        let hi = sorted[1000 - 20];
        for (&r, &p) in raw.iter().zip(&img.pixels) {
            let expect = ((r as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            assert!((p - expect).abs() < 1e-12);
        }
        let expect_sat = 20; // ceil(2% of 1000)
        let lo_sat = img.pixels.iter().filter(|&&p| p == 0.0).count();
        let hi_sat = img.pixels.iter().filter(|&&p| p == 1.0).count();
        // Duplicate values can only push the counts up, never down.
        assert!(lo_sat >= expect_sat && hi_sat >= expect_sat);
        let distinct_lo = raw.iter().filter(|&&v| (v as f64) <= lo).count();
        let distinct_hi = raw.iter().filter(|&&v| (v as f64) >= hi).count();
        assert_eq!(lo_sat, distinct_lo);
        assert_eq!(hi_sat, distinct_hi);
    }

    #[test]
    fn convert_depth_is_monotone() {
        let raw: Vec<u16> = (0..1024).map(|i| (i * 37 % 4096) as u16).collect();
        let img = convert_depth(&raw, 32, 32, 5.0, 95.0).unwrap();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by_key(|&i| raw[i]);
        for w in order.windows(2) {
            assert!(img.pixels[w[0]] <= img.pixels[w[1]]);
        }
    }

    #[test]
    fn normalize_contrast_identity() {
        let pixels: Vec<f64> = (0..256).map(|i| 0.5 + 0.1 * ((i as f64) * 0.3).sin()).collect();
        let img = Image::new(16, 16, pixels);
        let out = normalize_contrast(&img, img.mean(), img.std()).unwrap();
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_contrast_closed_form() {
        // mean 0.2, std 0.05 -> targets (0.5, 0.1): p -> (p - 0.2)*2 + 0.5
        let pixels = vec![0.15, 0.25, 0.15, 0.25];
        let img = Image::new(2, 2, pixels.clone());
        let out = normalize_contrast(&img, 0.5, 0.1).unwrap();
        for (p, q) in pixels.iter().zip(&out.pixels) {
            assert!((q - ((p - 0.2) * 2.0 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_contrast_hits_targets() {
        let mut state = 0x9E3779B97F4A7C15u64;
        let pixels: Vec<f64> = (0..4096)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                0.3 + 0.2 * ((state >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect();
        let img = Image::new(64, 64, pixels);
        let out = normalize_contrast(&img, 0.5, 0.15).unwrap();
        assert!((out.mean() - 0.5).abs() < 1e-6);
        assert!((out.std() - 0.15).abs() < 1e-6);
    }

    #[test]
    fn normalize_contrast_flat_input_errors() {
        let img = Image::constant(8, 8, 0.4);
        assert!(matches!(
            normalize_contrast(&img, 0.5, 0.1),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn downscale_constant() {
        let img = Image::constant(2, 2, 0.7);
        let out = downscale(&img, 2).unwrap();
        assert_eq!((out.width, out.height), (1, 1));
        assert!((out.pixels[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn downscale_checkerboard() {
        let pixels: Vec<f64> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f64).collect();
        let img = Image::new(4, 4, pixels);
        let out = downscale(&img, 2).unwrap();
        for &p in &out.pixels {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn downscale_matches_block_mean_oracle() {
        let mut state = 12345u64;
        let pixels: Vec<f64> = (0..81)
            .map(|_| {
                state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                (state >> 33) as f64 / (1u64 << 31) as f64
            })
            .collect();
        let img = Image::new(9, 9, pixels);
        let out = downscale(&img, 3).unwrap();
        assert_eq!((out.width, out.height), (3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img.get(ox * 3 + dx, oy * 3 + dy);
                    }
                }
                assert!((out.get(ox, oy) - acc / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downscale_preserves_mean_when_divisible() {
        let pixels: Vec<f64> = (0..36).map(|i| (i as f64) / 36.0).collect();
        let img = Image::new(6, 6, pixels);
        let out = downscale(&img, 2).unwrap();
        assert!((out.mean() - img.mean()).abs() < 1e-12);
    }

    #[test]
    fn pyramid_dims_and_scales() {
        let img = Image::constant(64, 64, 0.5);
        let levels = build_pyramid(&img, &PyramidSpec::new(vec![2, 2])).unwrap();
        let dims: Vec<_> = levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16)]);
        let scales: Vec<_> = levels.iter().map(|l| l.meta.scale).collect();
        assert_eq!(scales, vec![1, 2, 4]);
    }

    #[test]
    fn pyramid_empty_spec_errors() {
        let img = Image::constant(64, 64, 0.5);
        assert!(matches!(
            build_pyramid(&img, &PyramidSpec::new(vec![])),
            Err(Error::EmptyPyramidSpec)
        ));
    }

    #[test]
    fn pyramid_chained_floor_division() {
        let mut state = 777u64;
        let pixels: Vec<f64> = (0..3600)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 33) as f64 / (1u64 << 31) as f64
            })
            .collect();
        let img = Image::new(60, 60, pixels);
        let levels = build_pyramid(&img, &PyramidSpec::new(vec![2, 3, 5])).unwrap();
        let dims: Vec<_> = levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(60, 60), (30, 30), (10, 10), (2, 2)]);
        // Repeated-downscale oracle.
        let mut cur = img.clone();
        for (k, &f) in [2u32, 3, 5].iter().enumerate() {
            cur = downscale(&cur, f).unwrap();
            for (a, b) in cur.pixels.iter().zip(&levels[k + 1].pixels) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn pyramid_is_deterministic() {
        let pixels: Vec<f64> = (0..4096).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        let img = Image::new(64, 64, pixels);
        let a = build_pyramid(&img, &PyramidSpec::new(vec![2, 2])).unwrap();
        let b = build_pyramid(&img, &PyramidSpec::new(vec![2, 2])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn pyramid_spec_validation() {
        let spec = PyramidSpec::new(vec![2, 2]);
        assert!(spec.validate_for(64, 64).is_ok());
        assert!(spec.validate_for(32, 32).is_err());
        assert!(PyramidSpec::new(vec![4]).validate_for(256, 256).is_err());
    }
}
