//! Turns a manifest plus annotations into fixed-length training windows.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::data::tensor_io::{read_archive, write_archive};
use crate::data::{
    load_feature_sequence, read_annotations, read_manifest, rescale_sequence, window_sequence,
    GroundTruthInstance, SequenceMode, SnippetFeatureSequence, VideoRecord,
};
use crate::error::{Error, Result};
use crate::labels::{
    boundary_labels, instances_in_window, proposal_label_map, BoundaryLabels, ProposalLabelMap,
};
use crate::model::Sample;
use crate::nn::Mat;
use crate::rng::stable_hash;

/// Environment variable naming a directory for cached label maps.
pub const CACHE_DIR_ENV: &str = "PRSLOT_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceOptions {
    pub mode: SequenceMode,
    /// Window (or rescaled) length `L`.
    pub len: usize,
    /// Window stride; unused in rescaled mode.
    pub stride: usize,
    pub snippet_interval: u32,
    pub max_duration: usize,
    /// Instances keeping less than this fraction inside a window are dropped
    /// from that window's labels.
    pub min_inside_fraction: f64,
}

/// A video joined with its feature file.
#[derive(Debug, Clone)]
pub struct VideoEntry {
    pub record: VideoRecord,
    pub feature_path: PathBuf,
}

/// One fixed-length network input cut from a video.
#[derive(Debug, Clone)]
pub struct Window {
    pub features: Mat,
    /// Snippet index of row 0 on the video's own grid (0 in rescaled mode).
    pub offset: usize,
    pub time_per_snippet: f64,
    pub valid_len: usize,
}

impl Window {
    pub fn origin_time(&self) -> f64 {
        self.offset as f64 * self.time_per_snippet
    }
}

/// Joins manifest entries with annotations, in manifest order.
pub fn load_entries(manifest: &Path, annotations: &Path) -> Result<Vec<VideoEntry>> {
    let entries = read_manifest(manifest)?;
    let ann = read_annotations(annotations)?;
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !ann.contains_key(&e.video_id))
        .map(|e| e.video_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok(entries
        .into_iter()
        .map(|e| VideoEntry {
            record: ann[&e.video_id].to_record(&e.video_id),
            feature_path: e.feature_path,
        })
        .collect())
}

/// Default annotation file: `annotations.json` beside the manifest.
pub fn sibling_annotations(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("annotations.json")
}

pub fn load_sequence(entry: &VideoEntry, opts: &SequenceOptions) -> Result<SnippetFeatureSequence> {
    load_feature_sequence(
        &entry.feature_path,
        None,
        None,
        opts.snippet_interval,
        entry.record.fps,
    )
}

pub fn video_windows(entry: &VideoEntry, opts: &SequenceOptions) -> Result<Vec<Window>> {
    let seq = load_sequence(entry, opts)?;
    let cut = match opts.mode {
        SequenceMode::Windowed => window_sequence(&seq, opts.len, opts.stride)?,
        SequenceMode::Rescaled => vec![rescale_sequence(&seq, opts.len)?],
    };
    Ok(cut
        .into_iter()
        .map(|w| Window {
            features: w.features.mapv(f64::from),
            offset: w.origin_offset,
            time_per_snippet: w.time_per_snippet,
            valid_len: w.valid_len,
        })
        .collect())
}

#[derive(Serialize)]
struct CacheKey<'a> {
    id: &'a str,
    offset: usize,
    dt: f64,
    opts: &'a SequenceOptions,
    instances: &'a [GroundTruthInstance],
}

fn compute_labels(
    instances: &[GroundTruthInstance],
    window: &Window,
    opts: &SequenceOptions,
) -> (BoundaryLabels, ProposalLabelMap) {
    let dt = window.time_per_snippet;
    let span = window.valid_len as f64 * dt;
    let local = instances_in_window(
        instances,
        window.origin_time(),
        span,
        opts.min_inside_fraction,
    );
    (
        boundary_labels(&local, opts.len, dt),
        proposal_label_map(&local, opts.max_duration, opts.len, dt),
    )
}

fn cached_labels(
    path: &Path,
    opts: &SequenceOptions,
) -> Option<(BoundaryLabels, ProposalLabelMap)> {
    let entries = read_archive(path).ok()?;
    let get = |n: &str| entries.iter().find(|(k, _)| k == n).map(|(_, m)| m.clone());
    let (start, end, iou) = (get("start")?, get("end")?, get("iou")?);
    if start.dim() != (1, opts.len)
        || end.dim() != (1, opts.len)
        || iou.dim() != (opts.max_duration, opts.len)
    {
        return None;
    }
    let valid = Array2::from_shape_fn(iou.dim(), |(d, l)| {
        crate::labels::anchor_valid(d + 1, l, opts.len)
    });
    Some((
        BoundaryLabels {
            start: start.row(0).to_owned(),
            end: end.row(0).to_owned(),
        },
        ProposalLabelMap { iou, valid },
    ))
}

/// Labels for a window, read from and written to the label cache when
/// `cache_dir` is set. A damaged cache entry is silently recomputed.
pub fn window_labels(
    record: &VideoRecord,
    window: &Window,
    opts: &SequenceOptions,
    cache_dir: Option<&Path>,
) -> Result<(BoundaryLabels, ProposalLabelMap)> {
    let Some(dir) = cache_dir else {
        return Ok(compute_labels(&record.instances, window, opts));
    };
    let key = serde_json::to_string(&CacheKey {
        id: &record.id,
        offset: window.offset,
        dt: window.time_per_snippet,
        opts,
        instances: &record.instances,
    })
    .expect("cache key serializes");
    let path = dir.join(format!("labels-{:016x}.bin", stable_hash(&key)));
    if let Some(hit) = cached_labels(&path, opts) {
        return Ok(hit);
    }
    let (b, p) = compute_labels(&record.instances, window, opts);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = b.start.clone().insert_axis(ndarray::Axis(0));
    let end = b.end.clone().insert_axis(ndarray::Axis(0));
    write_archive(&path, [("start", &start), ("end", &end), ("iou", &p.iou)])?;
    Ok((b, p))
}

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Every window of every video as an independent training sample, in
/// manifest order.
pub fn build_samples(
    entries: &[VideoEntry],
    opts: &SequenceOptions,
    cache_dir: Option<&Path>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for e in entries {
        for w in video_windows(e, opts)? {
            let (boundary, proposal) = window_labels(&e.record, &w, opts, cache_dir)?;
            out.push(Sample {
                features: w.features,
                boundary,
                proposal,
                valid_len: w.valid_len,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthSpec};

    fn opts() -> SequenceOptions {
        SequenceOptions {
            mode: SequenceMode::Windowed,
            len: 32,
            stride: 16,
            snippet_interval: 4,
            max_duration: 8,
            min_inside_fraction: 0.75,
        }
    }

    #[test]
    fn samples_from_synthetic_tree() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SynthSpec::new(3, 48, 5, 2, 1), dir.path()).unwrap();
        let manifest = dir.path().join("manifest.json");
        let entries = load_entries(&manifest, &sibling_annotations(&manifest)).unwrap();
        let samples = build_samples(&entries, &opts(), None).unwrap();
        // offsets 0, 16 per 48-snippet video
        assert_eq!(samples.len(), 6);
        assert!(samples.iter().all(|s| s.features.dim() == (32, 5)));

        let cache = dir.path().join("cache");
        let cached = build_samples(&entries, &opts(), Some(&cache)).unwrap();
        let again = build_samples(&entries, &opts(), Some(&cache)).unwrap();
        assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 6);
        for ((a, b), c) in samples.iter().zip(&cached).zip(&again) {
            assert_eq!(a.boundary, b.boundary);
            assert_eq!(a.proposal, c.proposal);
        }
    }

    #[test]
    fn rescaled_windows() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SynthSpec::new(1, 40, 3, 1, 2), dir.path()).unwrap();
        let manifest = dir.path().join("manifest.json");
        let entries = load_entries(&manifest, &sibling_annotations(&manifest)).unwrap();
        let o = SequenceOptions {
            mode: SequenceMode::Rescaled,
            len: 20,
            ..opts()
        };
        let w = video_windows(&entries[0], &o).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0].time_per_snippet - 40.0 * 0.16 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn missing_annotation_ids_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&SynthSpec::new(2, 32, 3, 1, 2), dir.path()).unwrap();
        let ann = dir.path().join("annotations.json");
        std::fs::write(&ann, "{}").unwrap();
        match load_entries(&dir.path().join("manifest.json"), &ann) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["video_0000", "video_0001"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
