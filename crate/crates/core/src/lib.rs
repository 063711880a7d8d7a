//! Signal-whitened Fourier alignment for serial-section image stacks.
//!
//! The crate is organized around five stages:
//!
//! - [`image`]: float rasters, depth conversion, contrast normalization,
//!   and multi-resolution pyramids.
//! - [`correlate`]: apodized, spectrum-whitened FFT correlation with
//!   Z-scored peak confidence, for single patches and patch grids.
//! - [`transform`]: affine solves, triangle-mesh warps, rendering, and
//!   gap bridging across damaged runs.
//! - [`model`]: Z-averaged templates built from aligned neighbors.
//! - [`synth`]: ground-truth phantom stacks and brute-force oracles for
//!   validating the fast paths.

pub mod correlate;
pub mod error;
pub mod fft;
pub mod image;
pub mod model;
pub mod synth;
pub mod transform;

pub use correlate::{
    apodize, correlate, find_peak, grid_match, match_patch, whiten_spectrum, CorrelationMap,
    MatchPoint, MatchResult, WhiteningParams,
};
pub use error::{Error, Result};
pub use image::{build_pyramid, convert_depth, downscale, normalize_contrast, Image, ImageMeta, PyramidSpec};
pub use model::{build_model, ModelSpec};
pub use synth::{
    brute_force_correlate, evaluate_alignment, generate_stack, DefectKind, ResidualStats,
    SynthSpec, SynthStack, TextureSpec, WarpBounds,
};
pub use transform::{
    bridge_gap, build_mesh, render, solve_affine, AffineFit, AffineTransform, Rect, SectionWarp,
    TriangleMesh, Weighting,
};
