//! The stack manifest: the pipeline's persistent state. One JSON document,
//! rewritten atomically (write-temp-rename) whenever a level completes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swiftreg_core::{AffineTransform, PyramidSpec, SectionWarp};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionStatus {
    Ok,
    Damaged,
    Skipped,
    Interpolated,
}

/// One recorded solution: the warp for this section at a pyramid level
/// (0 = full resolution), in that level's pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainEntry {
    pub level: usize,
    pub warp: SectionWarp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSection {
    pub id: usize,
    pub source_path: PathBuf,
    pub status: SectionStatus,
    #[serde(default)]
    pub transform_chain: Vec<ChainEntry>,
}

impl ManifestSection {
    /// Warp recorded for `level`, if any.
    pub fn warp_at(&self, level: usize) -> Option<&SectionWarp> {
        self.transform_chain.iter().find(|e| e.level == level).map(|e| &e.warp)
    }

    pub fn set_warp(&mut self, level: usize, warp: SectionWarp) {
        if let Some(e) = self.transform_chain.iter_mut().find(|e| e.level == level) {
            e.warp = warp;
        } else {
            self.transform_chain.push(ChainEntry { level, warp });
        }
    }

    /// The finest-resolution (lowest level index) recorded warp.
    pub fn top_of_chain(&self) -> Option<&ChainEntry> {
        self.transform_chain.iter().min_by_key(|e| e.level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub sections: Vec<ManifestSection>,
    pub levels: PyramidSpec,
    #[serde(default)]
    pub global_constraint: Option<AffineTransform>,
}

impl StackManifest {
    pub fn validate(&self) -> Result<()> {
        if self.sections.is_empty() {
            return Err(AppError::Manifest("no sections".into()));
        }
        for pair in self.sections.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(AppError::Manifest(format!(
                    "section ids not strictly increasing at {} -> {}",
                    pair[0].id, pair[1].id
                )));
            }
        }
        if self.levels.factors.is_empty() {
            return Err(AppError::Manifest("empty pyramid spec".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<StackManifest> {
        let data = fs::read(path).map_err(|e| AppError::io(path, e))?;
        let m: StackManifest = serde_json::from_slice(&data).map_err(|e| AppError::BadJson {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.validate()?;
        Ok(m)
    }

    /// Atomic write: serialize to a temp file in the target directory, then
    /// rename over the destination.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
            .map_err(|e| AppError::io(path, e))?;
        let body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        tmp.write_all(&body).map_err(|e| AppError::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| AppError::io(path, e))?;
        tmp.persist(path)
            .map_err(|e| AppError::io(path, e.error))?;
        Ok(())
    }

    /// Highest-resolution level for which every non-skipped section has a
    /// recorded warp; levels complete coarsest-first, so this is the minimum
    /// level index common to all.
    pub fn finest_completed_level(&self) -> Option<usize> {
        let active: Vec<&ManifestSection> = self
            .sections
            .iter()
            .filter(|s| s.status != SectionStatus::Skipped)
            .collect();
        if active.is_empty() {
            return None;
        }
        (0..=self.levels.factors.len())
            .find(|&lvl| active.iter().all(|s| s.warp_at(lvl).is_some()))
    }
}
