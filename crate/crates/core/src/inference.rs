//! Candidate selection, proposal scoring and redundancy suppression.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::annotations::write_json;
use crate::error::{Error, Result};
use crate::heads::{BoundaryScores, ConfidenceMaps};
use crate::metrics::{tiou, ProposalsByVideo, ScoredSegment};
use crate::model::Prediction;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.65;
pub const DEFAULT_SOFT_SIGMA: f64 = 0.5;
pub const DEFAULT_KEEP_THRESHOLD: f64 = 0.001;

/// How the two candidate conditions (strict local peak, above half the
/// maximum) are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateRule {
    #[default]
    Or,
    And,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Seconds.
    pub t_start: f64,
    pub t_end: f64,
    /// Snippet indices on the grid the proposal was formed on.
    pub start_idx: usize,
    pub end_idx: usize,
    /// Product of the start and end probabilities.
    pub p_boundary: f64,
    /// Product of the classification and completeness confidences.
    pub p_map: f64,
    /// Fused score; equals `p_boundary * p_map` until a soft suppression
    /// decays it.
    pub score: f64,
}

impl Proposal {
    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn to_scored(&self) -> ScoredSegment {
        ScoredSegment::new(self.t_start, self.t_end, self.score)
    }
}

/// Maps snippet indices to seconds: `t = origin + index * time_per_snippet`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub origin: f64,
    pub time_per_snippet: f64,
}

impl TimeGrid {
    pub fn time(&self, index: usize) -> f64 {
        self.origin + index as f64 * self.time_per_snippet
    }
}

pub fn boundary_candidates(p: &[f64], rule: CandidateRule) -> Vec<usize> {
    let n = p.len();
    if n == 0 {
        return Vec::new();
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..n)
        .filter(|&l| {
            let peak = n >= 2 && (l == 0 || p[l - 1] < p[l]) && (l + 1 == n || p[l] > p[l + 1]);
            let high = p[l] > 0.5 * max;
            match rule {
                CandidateRule::Or => peak || high,
                CandidateRule::And => peak && high,
            }
        })
        .collect()
}

/// Pairs every start with every later end at most `max_duration` snippets
/// away and scores the pair.
pub fn form_proposals(
    starts: &[usize],
    ends: &[usize],
    scores: &BoundaryScores,
    maps: &ConfidenceMaps,
    max_duration: usize,
    grid: TimeGrid,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for &ts in starts {
        for &te in ends {
            if te <= ts || te - ts > max_duration {
                continue;
            }
            let d = te - ts;
            let p_boundary = scores.start[ts] * scores.end[te];
            let p_map = maps.cls[[d - 1, ts]] * maps.com[[d - 1, ts]];
            out.push(Proposal {
                t_start: grid.time(ts),
                t_end: grid.time(te),
                start_idx: ts,
                end_idx: te,
                p_boundary,
                p_map,
                score: p_boundary * p_map,
            });
        }
    }
    out
}

/// Candidates and scored pairs for one network output, restricted to the
/// unpadded prefix.
pub fn proposals_from_prediction(
    pred: &Prediction,
    max_duration: usize,
    grid: TimeGrid,
    rule: CandidateRule,
) -> Vec<Proposal> {
    let n = pred.valid_len;
    let starts = boundary_candidates(&pred.boundary.start.as_slice().unwrap()[..n], rule);
    let ends = boundary_candidates(&pred.boundary.end.as_slice().unwrap()[..n], rule);
    form_proposals(
        &starts,
        &ends,
        &pred.boundary,
        &pred.maps,
        max_duration,
        grid,
    )
}

/// Descending score, then earlier start, then shorter duration.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.duration().total_cmp(&b.duration()))
}

pub fn sort_by_rank(proposals: &mut [Proposal]) {
    proposals.sort_by(rank_order);
}

/// Greedy hard suppression: anything overlapping a kept proposal with
/// tIoU strictly above `theta` is removed.
pub fn nms(proposals: &[Proposal], theta: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sort_by_rank(&mut sorted);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept
            .iter()
            .all(|k| tiou(k.interval(), p.interval()) <= theta)
        {
            kept.push(p);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decay {
    /// `score *= exp(-tiou^2 / sigma)`.
    Gaussian { sigma: f64 },
    /// `score *= 1 - tiou` for overlaps at or above `threshold`.
    Linear { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    pub decay: Decay,
    pub keep_threshold: f64,
    /// Optional hard cut: overlaps strictly above it are removed outright.
    pub hard_threshold: Option<f64>,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            decay: Decay::Gaussian {
                sigma: DEFAULT_SOFT_SIGMA,
            },
            keep_threshold: DEFAULT_KEEP_THRESHOLD,
            hard_threshold: None,
        }
    }
}

pub fn soft_nms(proposals: &[Proposal], config: &SoftNmsConfig) -> Vec<Proposal> {
    let mut remaining = proposals.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let best = (0..remaining.len())
            .min_by(|&a, &b| rank_order(&remaining[a], &remaining[b]))
            .unwrap();
        let top = remaining.swap_remove(best);
        let anchor = top.interval();
        if let Some(h) = config.hard_threshold {
            remaining.retain(|p| tiou(anchor, p.interval()) <= h);
        }
        for p in &mut remaining {
            let o = tiou(anchor, p.interval());
            p.score *= match config.decay {
                Decay::Gaussian { sigma } => (-(o * o) / sigma).exp(),
                Decay::Linear { threshold } if o >= threshold => 1.0 - o,
                Decay::Linear { .. } => 1.0,
            };
        }
        if top.score >= config.keep_threshold {
            out.push(top);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Suppression {
    None,
    Nms { theta: f64 },
    SoftNms(SoftNmsConfig),
}

impl Suppression {
    /// Applies the post-process; the result is in rank order.
    pub fn apply(&self, proposals: &[Proposal]) -> Vec<Proposal> {
        match self {
            Suppression::None => {
                let mut v = proposals.to_vec();
                sort_by_rank(&mut v);
                v
            }
            Suppression::Nms { theta } => nms(proposals, *theta),
            Suppression::SoftNms(c) => {
                let mut v = soft_nms(proposals, c);
                sort_by_rank(&mut v);
                v
            }
        }
    }
}

/// Shifts per-window proposals to absolute snippet indices and seconds,
/// concatenates them and suppresses the union.
///
/// `offsets[k]` is the snippet index of window `k`'s first row on the video
/// grid; proposals must have been formed with a zero-origin grid.
pub fn merge_windows(
    windows: &[Vec<Proposal>],
    offsets: &[usize],
    time_per_snippet: f64,
    suppression: &Suppression,
) -> Result<Vec<Proposal>> {
    if windows.len() != offsets.len() {
        return Err(Error::invalid(format!(
            "{} windows but {} offsets",
            windows.len(),
            offsets.len()
        )));
    }
    let shift = offsets.iter().map(|&o| o as f64 * time_per_snippet);
    let all: Vec<Proposal> = windows
        .iter()
        .zip(offsets)
        .zip(shift)
        .flat_map(|((w, &o), dt)| {
            w.iter().map(move |p| Proposal {
                t_start: p.t_start + dt,
                t_end: p.t_end + dt,
                start_idx: p.start_idx + o,
                end_idx: p.end_idx + o,
                ..p.clone()
            })
        })
        .collect();
    Ok(suppression.apply(&all))
}

#[derive(Serialize)]
struct ProposalRecord {
    segment: [f64; 2],
    score: f64,
    p_boundary: f64,
    p_map: f64,
}

/// Writes `{video_id: [{segment, score, p_boundary, p_map}]}` with each list
/// sorted by score, highest first.
pub fn write_proposals(path: &Path, proposals: &BTreeMap<String, Vec<Proposal>>) -> Result<()> {
    let out: BTreeMap<&str, Vec<ProposalRecord>> = proposals
        .iter()
        .map(|(id, ps)| {
            let mut ps = ps.clone();
            sort_by_rank(&mut ps);
            let recs = ps
                .iter()
                .map(|p| ProposalRecord {
                    segment: [p.t_start, p.t_end],
                    score: p.score,
                    p_boundary: p.p_boundary,
                    p_map: p.p_map,
                })
                .collect();
            (id.as_str(), recs)
        })
        .collect();
    write_json(path, &out)
}

/// Reads any proposal file in the interchange format; extra fields are ignored.
pub fn read_proposals(path: &Path) -> Result<ProposalsByVideo> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: ProposalsByVideo = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    for (id, segs) in &parsed {
        if let Some(s) = segs.iter().find(|s| {
            !(s.segment[0].is_finite() && s.segment[1].is_finite() && s.score.is_finite())
        }) {
            return Err(Error::format(
                path,
                format!("video {id}: non-finite proposal {:?}", s.segment),
            ));
        }
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn prop(ts: f64, te: f64, score: f64) -> Proposal {
        Proposal {
            t_start: ts,
            t_end: te,
            start_idx: ts as usize,
            end_idx: te as usize,
            p_boundary: score,
            p_map: 1.0,
            score,
        }
    }

    #[test]
    fn candidate_examples() {
        assert_eq!(
            boundary_candidates(&[0.2, 0.8, 0.3, 0.6, 0.1], CandidateRule::Or),
            vec![1, 3]
        );
        assert_eq!(
            boundary_candidates(&[0.4; 5], CandidateRule::Or),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(
            boundary_candidates(&[0.4; 5], CandidateRule::And),
            Vec::<usize>::new()
        );
        assert_eq!(
            boundary_candidates(&[0.9, 0.1, 0.1], CandidateRule::Or),
            vec![0]
        );
        assert_eq!(boundary_candidates(&[0.3], CandidateRule::Or), vec![0]);
        assert_eq!(
            boundary_candidates(&[0.0], CandidateRule::Or),
            Vec::<usize>::new()
        );
    }

    fn unit_inputs(len: usize, d: usize) -> (BoundaryScores, ConfidenceMaps) {
        (
            BoundaryScores {
                start: Array1::ones(len),
                end: Array1::ones(len),
            },
            ConfidenceMaps {
                cls: Array2::ones((d, len)),
                com: Array2::ones((d, len)),
                valid: Array2::from_elem((d, len), true),
            },
        )
    }

    #[test]
    fn form_examples() {
        let (s, m) = unit_inputs(10, 8);
        let grid = TimeGrid {
            origin: 0.0,
            time_per_snippet: 0.5,
        };
        let p = form_proposals(&[2], &[7], &s, &m, 8, grid);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].score, 1.0);
        assert_eq!((p[0].t_start, p[0].t_end), (1.0, 3.5));
        assert!(form_proposals(&[5], &[3], &s, &m, 8, grid).is_empty());
        assert!(form_proposals(&[0], &[9], &s, &m, 8, grid).is_empty());
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[prop(0.0, 1.0, 0.3)], 0.65).len(), 1);
        let kept = nms(&[prop(0.0, 4.0, 0.8), prop(0.0, 4.0, 0.9)], 0.65);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn soft_nms_examples() {
        let out = soft_nms(
            &[prop(0.0, 4.0, 0.9), prop(0.0, 4.0, 0.8)],
            &SoftNmsConfig::default(),
        );
        assert_eq!(out.len(), 2);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.1083).abs() < 1e-4);

        let disjoint = [
            prop(0.0, 1.0, 0.9),
            prop(2.0, 3.0, 0.5),
            prop(4.0, 5.0, 0.2),
        ];
        let out = soft_nms(&disjoint, &SoftNmsConfig::default());
        assert_eq!(out, disjoint.to_vec());
    }

    #[test]
    fn narrow_gaussian_collapses_duplicates() {
        let cfg = SoftNmsConfig {
            decay: Decay::Gaussian { sigma: 1e-3 },
            keep_threshold: 1e-3,
            hard_threshold: None,
        };
        let out = soft_nms(
            &[
                prop(0.0, 4.0, 0.9),
                prop(0.0, 4.0, 0.8),
                prop(6.0, 8.0, 0.5),
            ],
            &cfg,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn window_merge() {
        let p = prop(10.0, 20.0, 0.7);
        let one = merge_windows(&[vec![p.clone()]], &[0], 1.0, &Suppression::None).unwrap();
        assert_eq!(one, vec![p.clone()]);
        let shifted = merge_windows(&[vec![p.clone()]], &[100], 1.0, &Suppression::None).unwrap();
        assert_eq!((shifted[0].start_idx, shifted[0].end_idx), (110, 120));
        assert_eq!((shifted[0].t_start, shifted[0].t_end), (110.0, 120.0));

        let a = prop(60.0, 70.0, 0.7);
        let b = prop(10.0, 20.0, 0.7);
        let merged = merge_windows(
            &[vec![a], vec![b]],
            &[0, 50],
            1.0,
            &Suppression::Nms { theta: 0.65 },
        )
        .unwrap();
        assert_eq!(merged.len(), 1);
    }

    #[test]
    fn proposal_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut m = BTreeMap::new();
        m.insert(
            "v".to_string(),
            vec![prop(0.0, 1.0, 0.2), prop(1.0, 3.0, 0.6)],
        );
        write_proposals(&path, &m).unwrap();
        let back = read_proposals(&path).unwrap();
        assert_eq!(back["v"][0].score, 0.6);
        assert_eq!(back["v"][1].segment, [0.0, 1.0]);
    }
}
