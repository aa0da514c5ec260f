//! Videos, annotations and snippet feature sequences.

pub(crate) mod annotations;
mod sequence;
mod synth;
pub mod tensor_io;

pub use annotations::{
    read_annotations, read_manifest, write_annotations, write_manifest, AnnotationEntry,
    AnnotationFile, ManifestEntry, SegmentAnnotation,
};
pub use sequence::{
    load_feature_sequence, rescale_sequence, snippet_count, window_sequence, SnippetFeatureSequence,
};
pub use synth::{
    generate_synthetic_dataset, synthesize, SynthSpec, SyntheticDataset, SyntheticVideo,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// One annotated action instance, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub t_start: f64,
    pub t_end: f64,
    pub label: Option<String>,
}

impl GroundTruthInstance {
    pub fn new(t_start: f64, t_end: f64) -> Self {
        Self {
            t_start,
            t_end,
            label: None,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    pub frame_count: usize,
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Overlapping fixed-length windows over the native snippet grid.
    Windowed,
    /// Whole video linearly interpolated to a fixed length.
    Rescaled,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<(VideoRecord, PathBuf)>,
    pub mode: SequenceMode,
}
