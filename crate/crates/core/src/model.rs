//! Z-averaged model templates: the pixel-wise mean of aligned neighboring
//! sections, with self- and damage-exclusion rules. Averaging N sections
//! reduces uncorrelated noise by 1/sqrt(N).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Which neighboring sections contribute to a model template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Window of candidate sections, centered on the target; odd, >= 1.
    pub span: usize,
    /// Omit the section the model is built for (default true).
    pub exclude_self: bool,
    /// Damaged sections that must never enter a model.
    pub exclusions: BTreeSet<usize>,
}

impl ModelSpec {
    pub fn new(span: usize) -> Self {
        ModelSpec {
            span,
            exclude_self: true,
            exclusions: BTreeSet::new(),
        }
    }

    /// Contributor indices for a model centered on `center` in a stack of
    /// `len` sections: the window clipped to the stack bounds, minus
    /// exclusions, minus the center itself when `exclude_self` is set.
    pub fn contributors(&self, center: usize, len: usize) -> Result<Vec<usize>> {
        if self.span == 0 || self.span % 2 == 0 {
            return Err(Error::InvalidSpan(self.span));
        }
        let half = self.span / 2;
        let lo = center.saturating_sub(half);
        let hi = (center + half).min(len.saturating_sub(1));
        let out: Vec<usize> = (lo..=hi)
            .filter(|&i| !(self.exclude_self && i == center))
            .filter(|i| !self.exclusions.contains(i))
            .collect();
        if out.is_empty() {
            return Err(Error::EmptyContributors(center));
        }
        Ok(out)
    }
}

/// Pixel-wise unweighted mean of the contributor images (already rendered
/// into the common frame). Pixels where a contributor's coverage mask is
/// unset are excluded from that pixel's mean; the output mask is set where
/// at least one contributor covers the pixel.
pub fn build_model(stack: &[Image], center: usize, spec: &ModelSpec) -> Result<Image> {
    let contributors = spec.contributors(center, stack.len())?;
    let first = &stack[contributors[0]];
    let (w, h) = (first.width, first.height);
    let mut sum = vec![0.0f64; w * h];
    let mut denom = vec![0u32; w * h];
    for &i in &contributors {
        let img = &stack[i];
        assert_eq!((img.width, img.height), (w, h), "contributor size mismatch");
        match &img.mask {
            None => {
                for (s, (&p, d)) in sum.iter_mut().zip(img.pixels.iter().zip(denom.iter_mut())) {
                    *s += p;
                    *d += 1;
                }
            }
            Some(mask) => {
                for ((s, d), (&p, &m)) in sum
                    .iter_mut()
                    .zip(denom.iter_mut())
                    .zip(img.pixels.iter().zip(mask.iter()))
                {
                    if m {
                        *s += p;
                        *d += 1;
                    }
                }
            }
        }
    }
    let pixels: Vec<f64> = sum
        .iter()
        .zip(&denom)
        .map(|(&s, &d)| if d > 0 { s / d as f64 } else { 0.0 })
        .collect();
    let mask: Vec<bool> = denom.iter().map(|&d| d > 0).collect();
    let mut out = Image::new(w, h, pixels);
    out.mask = Some(mask);
    out.meta = stack[center.min(stack.len() - 1)].meta;
    Ok(out)
}
