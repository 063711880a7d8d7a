//! Writes generated synthetic stacks to disk: per-section SWR1 images, a
//! ready-to-align manifest, and the truth transforms as JSON.

use std::path::Path;

use swiftreg_core::{AffineTransform, PyramidSpec, SynthStack};

use crate::error::{AppError, Result};
use crate::io::write_swr;
use crate::manifest::{ManifestSection, SectionStatus, StackManifest};

/// Writes `sec_NNN.swr` files plus `manifest.json` into `out_dir`; damaged
/// sections are flagged in the manifest. Returns the manifest.
pub fn write_synth_stack(
    stack: &SynthStack,
    levels: PyramidSpec,
    out_dir: &Path,
) -> Result<StackManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let mut sections = Vec::with_capacity(stack.sections.len());
    for (i, img) in stack.sections.iter().enumerate() {
        let name = format!("sec_{i:03}.swr");
        write_swr(&out_dir.join(&name), img)?;
        sections.push(ManifestSection {
            id: i,
            source_path: name.into(),
            status: if stack.damaged.contains_key(&i) {
                SectionStatus::Damaged
            } else {
                SectionStatus::Ok
            },
            transform_chain: Vec::new(),
        });
    }
    let manifest = StackManifest {
        sections,
        levels,
        global_constraint: None,
    };
    manifest.save_atomic(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn write_truth(truth: &[AffineTransform], path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(truth).expect("truth serializes");
    std::fs::write(path, json).map_err(|e| AppError::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<AffineTransform>> {
    let data = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_slice(&data).map_err(|e| AppError::BadJson {
        path: path.to_path_buf(),
        source: e,
    })
}
