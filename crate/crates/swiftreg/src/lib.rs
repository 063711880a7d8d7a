//! File formats, manifest and configuration handling, the multi-resolution
//! alignment pipeline, and diagnostics — everything around the algorithm
//! core that touches the filesystem.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod synthio;

pub use config::AlignConfig;
pub use error::{AppError, Result};
pub use manifest::{ChainEntry, ManifestSection, SectionStatus, StackManifest};
pub use pipeline::{align_stack, apply_constraint, iterate_level, AlignOutcome, IterationOutcome};
pub use report::{report, ReportBundle};
