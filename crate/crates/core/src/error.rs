use thiserror::Error;

/// Errors produced by the registration primitives.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty raster")]
    EmptyRaster,

    #[error("degenerate percentile range: lo and hi percentiles select the same value")]
    DegeneratePercentiles,

    #[error("invalid clip percentiles ({lo}, {hi}); need 0 <= lo < hi <= 100")]
    InvalidPercentiles { lo: f64, hi: f64 },

    #[error("zero-variance image")]
    ZeroVariance,

    #[error("invalid downscale factor {0}; must be 2, 3 or 5")]
    InvalidFactor(u32),

    #[error("downscale would produce a zero-sized image ({width}x{height} / {factor})")]
    DownscaleTooSmall {
        width: usize,
        height: usize,
        factor: u32,
    },

    #[error("empty pyramid spec")]
    EmptyPyramidSpec,

    #[error("pyramid spec reduces a {width}x{height} image below {min} pixels")]
    PyramidTooDeep {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("taper fraction {0} out of range [0, 0.5]")]
    InvalidTaper(f64),

    #[error("patch dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("patch too small: {width}x{height}, need at least {min} on each axis")]
    PatchTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("correlation map too small for exclusion radius {radius}")]
    MapTooSmall { radius: usize },

    #[error("patch of size {patch} does not fit a {rows}x{cols} grid in a {width}x{height} image")]
    GridDoesNotFit {
        patch: usize,
        rows: usize,
        cols: usize,
        width: usize,
        height: usize,
    },

    #[error("need at least 3 valid match points, got {0}")]
    TooFewPoints(usize),

    #[error("ill-conditioned point configuration (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("singular transform (|det| = {0:.3e})")]
    SingularTransform(f64),

    #[error("mesh fold-over: mapped triangle {0} reverses orientation")]
    MeshFoldOver(usize),

    #[error("degenerate mesh triangle {0}")]
    DegenerateTriangle(usize),

    #[error("no valid anchor on {side} side of gap [{lo}..{hi}]")]
    MissingAnchor {
        side: &'static str,
        lo: usize,
        hi: usize,
    },

    #[error("gap range [{lo}..{hi}] out of bounds for chain of length {len}")]
    BadGapRange { lo: usize, hi: usize, len: usize },

    #[error("empty model contributor set for section {0}")]
    EmptyContributors(usize),

    #[error("model span must be odd and >= 1, got {0}")]
    InvalidSpan(usize),

    #[error("brute-force correlation limited to 64x64 inputs, got {0}x{1}")]
    OversizeOracle(usize, usize),

    #[error("image dimensions {width}x{height} too small for blob radius {radius}")]
    DimsTooSmallForBlobs {
        width: usize,
        height: usize,
        radius: f64,
    },

    #[error("transform lists have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid whitening parameters: w={w}, eps_frac={eps_frac}")]
    InvalidWhitening { w: f64, eps_frac: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
