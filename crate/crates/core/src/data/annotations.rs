//! ActivityNet-style annotation files and dataset manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GroundTruthInstance, VideoRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub duration: f64,
    pub fps: f64,
    #[serde(default)]
    pub annotations: Vec<SegmentAnnotation>,
}

/// `{video_id: {"duration", "fps", "annotations": [...]}}`, keys sorted.
pub type AnnotationFile = BTreeMap<String, AnnotationEntry>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: PathBuf,
}

impl AnnotationEntry {
    pub fn to_record(&self, id: &str) -> VideoRecord {
        VideoRecord {
            id: id.to_string(),
            duration: self.duration,
            fps: self.fps,
            frame_count: (self.duration * self.fps).round() as usize,
            instances: self
                .annotations
                .iter()
                .map(|a| GroundTruthInstance {
                    t_start: a.segment[0],
                    t_end: a.segment[1],
                    label: a.label.clone(),
                })
                .collect(),
        }
    }

    pub fn from_record(record: &VideoRecord) -> Self {
        Self {
            duration: record.duration,
            fps: record.fps,
            annotations: record
                .instances
                .iter()
                .map(|g| SegmentAnnotation {
                    segment: [g.t_start, g.t_end],
                    label: g.label.clone(),
                })
                .collect(),
        }
    }

    fn validate(&self, id: &str, path: &Path) -> Result<()> {
        if !(self.duration > 0.0 && self.fps > 0.0) {
            return Err(Error::format(
                path,
                format!("video {id}: duration and fps must be positive"),
            ));
        }
        for a in &self.annotations {
            let [s, e] = a.segment;
            if !(s.is_finite() && e.is_finite() && s < e) {
                return Err(Error::format(
                    path,
                    format!("video {id}: malformed segment [{s}, {e}]"),
                ));
            }
        }
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let file: AnnotationFile = read_json(path)?;
    for (id, entry) in &file {
        entry.validate(id, path)?;
    }
    Ok(file)
}

pub fn write_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    write_json(path, file)
}

/// Reads a manifest; relative feature paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries: Vec<ManifestEntry> = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for e in &mut entries {
        if e.feature_path.is_relative() {
            e.feature_path = base.join(&e.feature_path);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_json(path, &entries)
}
