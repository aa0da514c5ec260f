use std::path::Path;

use ndarray::{s, Array2};

use super::tensor_io::read_feature_file;
use crate::error::{Error, Result};

/// An `L x C` matrix of per-snippet features on a regular time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatureSequence {
    pub features: Array2<f32>,
    /// Frames per snippet.
    pub snippet_interval: u32,
    /// Snippet index of row 0 within the source video.
    pub origin_offset: usize,
    pub time_per_snippet: f64,
    /// Rows at or beyond this index are zero padding.
    pub valid_len: usize,
}

impl SnippetFeatureSequence {
    pub fn new(features: Array2<f32>, snippet_interval: u32, fps: f64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid(
                "feature sequence must have at least one snippet",
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "feature sequence contains non-finite values",
            ));
        }
        let valid_len = features.nrows();
        Ok(Self {
            features,
            snippet_interval,
            origin_offset: 0,
            time_per_snippet: f64::from(snippet_interval) / fps,
            valid_len,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.valid_len).collect()
    }

    /// Start time in seconds of row 0.
    pub fn origin_time(&self) -> f64 {
        self.origin_offset as f64 * self.time_per_snippet
    }
}

pub fn snippet_count(frame_count: i64, sigma: i64) -> Result<usize> {
    if frame_count < 1 || sigma < 1 {
        return Err(Error::invalid(format!(
            "snippet_count needs positive inputs, got frame_count={frame_count}, sigma={sigma}"
        )));
    }
    Ok(((frame_count + sigma - 1) / sigma) as usize)
}

pub fn load_feature_sequence(
    path: &Path,
    expected_len: Option<usize>,
    expected_channels: Option<usize>,
    snippet_interval: u32,
    fps: f64,
) -> Result<SnippetFeatureSequence> {
    let features = read_feature_file(path)?;
    if let Some(l) = expected_len {
        if features.nrows() != l {
            return Err(Error::format(
                path,
                format!("expected {l} snippets, file has {}", features.nrows()),
            ));
        }
    }
    if let Some(c) = expected_channels {
        if features.ncols() != c {
            return Err(Error::format(
                path,
                format!("expected {c} channels, file has {}", features.ncols()),
            ));
        }
    }
    SnippetFeatureSequence::new(features, snippet_interval, fps)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Cuts overlapping windows at offsets `0, stride, 2*stride, ...`.
///
/// When the last regular window stops short of the sequence end, one extra
/// window aligned to the end is appended. Sequences shorter than the window
/// produce a single zero-padded window whose `valid_len` marks the real rows.
pub fn window_sequence(
    seq: &SnippetFeatureSequence,
    window_len: usize,
    stride: usize,
) -> Result<Vec<SnippetFeatureSequence>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::invalid("window length and stride must be positive"));
    }
    let len = seq.valid_len;
    let channels = seq.channels();
    if len <= window_len {
        let mut features = Array2::zeros((window_len, channels));
        features
            .slice_mut(s![..len, ..])
            .assign(&seq.features.slice(s![..len, ..]));
        return Ok(vec![SnippetFeatureSequence {
            features,
            snippet_interval: seq.snippet_interval,
            origin_offset: seq.origin_offset,
            time_per_snippet: seq.time_per_snippet,
            valid_len: len,
        }]);
    }
    let mut offsets: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + window_len <= len)
        .collect();
    let last_end = offsets.last().map_or(0, |&o| o + window_len);
    if last_end < len {
        offsets.push(len - window_len);
    }
    Ok(offsets
        .into_iter()
        .map(|o| SnippetFeatureSequence {
            features: seq.features.slice(s![o..o + window_len, ..]).to_owned(),
            snippet_interval: seq.snippet_interval,
            origin_offset: seq.origin_offset + o,
            time_per_snippet: seq.time_per_snippet,
            valid_len: window_len,
        })
        .collect())
}

/// Linear interpolation to `target_len` rows; input rows `0` and `L-1` land
/// exactly on output rows `0` and `target_len-1`.
///
/// The time grid is rescaled so that the output spans the same duration.
pub fn rescale_sequence(
    seq: &SnippetFeatureSequence,
    target_len: usize,
) -> Result<SnippetFeatureSequence> {
    if target_len == 0 {
        return Err(Error::invalid("target length must be positive"));
    }
    let src = seq.features.slice(s![..seq.valid_len, ..]);
    let n = src.nrows();
    let mut out = Array2::<f32>::zeros((target_len, src.ncols()));
    for p in 0..target_len {
        let x = if target_len == 1 || n == 1 {
            0.0
        } else {
            p as f64 * (n - 1) as f64 / (target_len - 1) as f64
        };
        let lo = (x.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = (x - lo as f64) as f32;
        let mut row = out.row_mut(p);
        if frac == 0.0 || lo == hi {
            row.assign(&src.row(lo));
        } else {
            for ((o, &a), &b) in row.iter_mut().zip(src.row(lo)).zip(src.row(hi)) {
                *o = a + frac * (b - a);
            }
        }
    }
    let duration = seq.valid_len as f64 * seq.time_per_snippet;
    Ok(SnippetFeatureSequence {
        features: out,
        snippet_interval: seq.snippet_interval,
        origin_offset: 0,
        time_per_snippet: duration / target_len as f64,
        valid_len: target_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(len: usize, channels: usize) -> SnippetFeatureSequence {
        let f = Array2::from_shape_fn((len, channels), |(i, j)| (i * 10 + j) as f32);
        SnippetFeatureSequence::new(f, 4, 25.0).unwrap()
    }

    #[test]
    fn snippet_counts() {
        assert_eq!(snippet_count(1000, 4).unwrap(), 250);
        assert_eq!(snippet_count(3, 4).unwrap(), 1);
        assert_eq!(snippet_count(400, 16).unwrap(), 25);
        assert!(snippet_count(0, 4).is_err());
        assert!(snippet_count(10, 0).is_err());
        assert!(snippet_count(-3, 4).is_err());
    }

    #[test]
    fn windows_cover_tail() {
        let w = window_sequence(&seq(450, 2), 250, 100).unwrap();
        let offsets: Vec<_> = w.iter().map(|w| w.origin_offset).collect();
        assert_eq!(offsets, vec![0, 100, 200]);
        assert!(w.iter().all(|w| w.len() == 250 && w.valid_len == 250));
        assert_eq!(w[2].features[[0, 0]], 2000.0);
    }

    #[test]
    fn end_aligned_tail_window_is_appended() {
        let w = window_sequence(&seq(420, 1), 250, 100).unwrap();
        let offsets: Vec<_> = w.iter().map(|w| w.origin_offset).collect();
        assert_eq!(offsets, vec![0, 100, 170]);
    }

    #[test]
    fn exact_fit_is_single_window() {
        let w = window_sequence(&seq(250, 3), 250, 100).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].origin_offset, 0);
    }

    #[test]
    fn short_sequence_is_padded_and_masked() {
        let w = window_sequence(&seq(120, 3), 250, 100).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].len(), 250);
        assert_eq!(w[0].valid_len, 120);
        let mask = w[0].valid_mask();
        assert_eq!(mask.iter().filter(|&&v| !v).count(), 130);
        assert!(w[0].features.slice(s![120.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescale_identity() {
        let x = seq(100, 4);
        let y = rescale_sequence(&x, 100).unwrap();
        assert_eq!(y.features, x.features);
    }

    #[test]
    fn rescale_three_to_five() {
        let f = array![[0.0f32, 2.0], [4.0, 6.0], [10.0, -2.0]];
        let x = SnippetFeatureSequence::new(f, 16, 30.0).unwrap();
        let y = rescale_sequence(&x, 5).unwrap();
        let expect = array![
            [0.0f32, 2.0],
            [2.0, 4.0],
            [4.0, 6.0],
            [7.0, 2.0],
            [10.0, -2.0]
        ];
        assert_eq!(y.features, expect);
    }

    #[test]
    fn rescale_single_row_broadcasts() {
        let x = SnippetFeatureSequence::new(array![[1.5f32, -2.0]], 16, 30.0).unwrap();
        let y = rescale_sequence(&x, 7).unwrap();
        assert_eq!(y.len(), 7);
        assert!(y
            .features
            .rows()
            .into_iter()
            .all(|r| r[0] == 1.5 && r[1] == -2.0));
    }

    proptest! {
        #[test]
        fn windows_are_ordered_and_cover(len in 1usize..700, window in 1usize..300, stride in 1usize..300) {
            let x = seq(len, 1);
            let ws = window_sequence(&x, window, stride).unwrap();
            let mut covered = vec![false; len];
            let mut prev = None;
            for w in &ws {
                if let Some(p) = prev { prop_assert!(w.origin_offset > p); }
                prev = Some(w.origin_offset);
                prop_assert_eq!(w.len(), window);
                prop_assert!(w.origin_offset + w.valid_len <= len);
                for c in &mut covered[w.origin_offset..w.origin_offset + w.valid_len] { *c = true; }
            }
            // Tail-window rule only holds when the stride does not skip rows.
            if stride <= window {
                prop_assert!(covered.iter().all(|&c| c));
            }
        }

        #[test]
        fn rescale_exact_on_constants(len in 1usize..40, target in 1usize..60, v in -100.0f32..100.0) {
            let x = SnippetFeatureSequence::new(Array2::from_elem((len, 3), v), 4, 25.0).unwrap();
            let y = rescale_sequence(&x, target).unwrap();
            prop_assert!(y.features.iter().all(|&o| o == v));
        }
    }
}
