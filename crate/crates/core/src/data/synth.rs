//! Desk-scale synthetic datasets.
//!
//! Each video is a background feature stream with 1..=`max_instances`
//! non-overlapping action segments. Inside a segment the features carry a
//! per-video action pattern whose channel mean equals `offset`; the two
//! snippets straddling every boundary are linear blends (1/3 and 2/3 action).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{
    write_annotations, write_manifest, AnnotationEntry, AnnotationFile, ManifestEntry,
};
use super::tensor_io::{io_err, write_feature_file};
use super::{GroundTruthInstance, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// Minimum number of pure-background snippets around each segment.
pub const MIN_GAP: usize = 2;
pub const CROSS_FADE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub length: usize,
    pub channels: usize,
    pub max_instances: usize,
    pub seed: u64,
    pub fps: f64,
    pub snippet_interval: u32,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Mean shift between action and background features.
    pub offset: f64,
    pub noise: f64,
    pub label: String,
    /// Prefix for generated video ids, so that train and held-out sets differ.
    pub id_prefix: String,
}

impl SynthSpec {
    pub fn new(
        n_videos: usize,
        length: usize,
        channels: usize,
        max_instances: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_videos,
            length,
            channels,
            max_instances,
            seed,
            fps: 25.0,
            snippet_interval: 4,
            min_segment_len: 4,
            max_segment_len: (length / 4).max(4),
            offset: 1.0,
            noise: 0.5,
            label: "action".to_string(),
            id_prefix: "video".to_string(),
        }
    }

    pub fn time_per_snippet(&self) -> f64 {
        f64::from(self.snippet_interval) / self.fps
    }

    fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.length == 0 || self.channels == 0 || self.max_instances == 0 {
            return Err(Error::invalid(
                "n_videos, L, C and max_instances must all be positive",
            ));
        }
        if !(self.fps > 0.0) || self.snippet_interval == 0 {
            return Err(Error::invalid("fps and snippet interval must be positive"));
        }
        if self.min_segment_len < CROSS_FADE || self.max_segment_len < self.min_segment_len {
            return Err(Error::invalid(format!(
                "segment length range [{}, {}] is empty or shorter than the cross-fade",
                self.min_segment_len, self.max_segment_len
            )));
        }
        let need = self.max_instances * (self.min_segment_len + MIN_GAP) + MIN_GAP;
        if self.length < need {
            return Err(Error::invalid(format!(
                "cannot place {} segments of >= {} snippets in L = {} (need L >= {need})",
                self.max_instances, self.min_segment_len, self.length
            )));
        }
        Ok(())
    }
}

/// One generated video: annotation record plus its features.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub features: Array2<f32>,
    /// Segments as `[start, end)` snippet ranges.
    pub segments: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub videos: Vec<SyntheticVideo>,
    pub manifest: Vec<ManifestEntry>,
    pub annotations: AnnotationFile,
}

fn place_segments(spec: &SynthSpec, rng: &mut Rng) -> Vec<(usize, usize)> {
    let n = rng.random_range(1..=spec.max_instances);
    let budget = spec.length - (n + 1) * MIN_GAP;
    let mut lens: Vec<usize> = Vec::new();
    for _ in 0..64 {
        lens = (0..n)
            .map(|_| rng.random_range(spec.min_segment_len..=spec.max_segment_len))
            .collect();
        if lens.iter().sum::<usize>() <= budget {
            break;
        }
    }
    while lens.iter().sum::<usize>() > budget {
        // Shrink the longest segment; validate() guarantees this terminates.
        let i = (0..n).max_by_key(|&i| (lens[i], n - i)).unwrap();
        lens[i] -= 1;
    }
    let slack = budget - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut segments = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lens.into_iter().zip(cuts) {
        pos += MIN_GAP + (cut - prev_cut);
        prev_cut = cut;
        segments.push((pos, pos + len));
        pos += len;
    }
    segments
}

fn action_weights(length: usize, segments: &[(usize, usize)]) -> Vec<f64> {
    let mut w = vec![0.0; length];
    for &(s, e) in segments {
        for v in &mut w[s..e] {
            *v = 1.0;
        }
        w[s - 1] = 1.0 / 3.0;
        w[s] = 2.0 / 3.0;
        w[e - 1] = 2.0 / 3.0;
        w[e] = 1.0 / 3.0;
    }
    w
}

fn synth_video(spec: &SynthSpec, index: usize) -> SyntheticVideo {
    let id = format!("{}_{index:04}", spec.id_prefix);
    let mut rng = substream(spec.seed, &format!("synth/{id}"));
    let segments = place_segments(spec, &mut rng);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let background: Vec<f64> = (0..spec.channels)
        .map(|_| 0.5 * std_normal.sample(&mut rng))
        .collect();
    let raw: Vec<f64> = (0..spec.channels)
        .map(|_| std_normal.sample(&mut rng))
        .collect();
    let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let pattern: Vec<f64> = raw.iter().map(|v| spec.offset + v - raw_mean).collect();

    let weights = action_weights(spec.length, &segments);
    let mut features = Array2::<f32>::zeros((spec.length, spec.channels));
    for (l, mut row) in features.rows_mut().into_iter().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let x =
                background[c] + weights[l] * pattern[c] + spec.noise * std_normal.sample(&mut rng);
            *v = x as f32;
        }
    }

    let dt = spec.time_per_snippet();
    let instances = segments
        .iter()
        .map(|&(s, e)| GroundTruthInstance {
            t_start: s as f64 * dt,
            t_end: e as f64 * dt,
            label: Some(spec.label.clone()),
        })
        .collect();
    let record = VideoRecord {
        id,
        duration: spec.length as f64 * dt,
        fps: spec.fps,
        frame_count: spec.length * spec.snippet_interval as usize,
        instances,
    };
    SyntheticVideo {
        record,
        features,
        segments,
    }
}

/// Generates the dataset in memory; `write_synthetic_dataset` persists it.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    Ok((0..spec.n_videos).map(|i| synth_video(spec, i)).collect())
}

/// Writes `features/<id>.bin`, `annotations.json` and `manifest.json` under
/// `out_dir`. Manifest paths are relative so trees are position independent.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    let videos = synthesize(spec)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| io_err(&feat_dir, e))?;

    let mut manifest = Vec::with_capacity(videos.len());
    let mut annotations = AnnotationFile::new();
    for v in &videos {
        let rel = PathBuf::from("features").join(format!("{}.bin", v.record.id));
        write_feature_file(&out_dir.join(&rel), &v.features)?;
        manifest.push(ManifestEntry {
            video_id: v.record.id.clone(),
            feature_path: rel,
        });
        annotations.insert(v.record.id.clone(), AnnotationEntry::from_record(&v.record));
    }
    write_annotations(&out_dir.join("annotations.json"), &annotations)?;
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(SyntheticDataset {
        videos,
        manifest,
        annotations,
    })
}
