//! Proposal and detection evaluation: tIoU, AR@AN, AUC and mAP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::GroundTruthInstance;

/// Temporal IoU of two `(start, end)` intervals. Zero-length or inverted
/// intervals score 0.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if !(a.1 > a.0) || !(b.1 > b.0) {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.1.max(b.1) - a.0.min(b.0);
    inter / union
}

/// A scored segment as read from a proposal or detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment: [f64; 2],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ScoredSegment {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self {
            segment: [start, end],
            score,
            label: None,
        }
    }

    fn interval(&self) -> (f64, f64) {
        (self.segment[0], self.segment[1])
    }
}

pub type ProposalsByVideo = BTreeMap<String, Vec<ScoredSegment>>;
pub type GroundTruthByVideo = BTreeMap<String, Vec<GroundTruthInstance>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Thumos,
    Anet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tiou_set: Vec<f64>,
    pub an_values: Vec<usize>,
    pub detection_tious: Vec<f64>,
    pub mode: EvalMode,
    /// Average recall per video first instead of pooling instances.
    pub video_weighted: bool,
}

/// `start, start + step, ..., end` in hundredths, computed without drift.
pub fn threshold_range(start_pct: u32, step_pct: u32, end_pct: u32) -> Vec<f64> {
    (start_pct..=end_pct)
        .step_by(step_pct as usize)
        .map(|p| f64::from(p) / 100.0)
        .collect()
}

impl EvalConfig {
    pub fn thumos() -> Self {
        Self {
            tiou_set: threshold_range(50, 5, 100),
            an_values: vec![10, 20, 50, 100, 200, 500, 1000],
            detection_tious: threshold_range(30, 10, 70),
            mode: EvalMode::Thumos,
            video_weighted: false,
        }
    }

    pub fn anet() -> Self {
        Self {
            tiou_set: threshold_range(50, 5, 95),
            an_values: vec![1, 5, 10, 100],
            detection_tious: vec![0.5, 0.75, 0.95],
            mode: EvalMode::Anet,
            video_weighted: false,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.tiou_set.is_empty() || self.tiou_set.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(crate::Error::invalid("tIoU thresholds must lie in (0, 1]"));
        }
        if self.an_values.contains(&0) {
            return Err(crate::Error::invalid("AN values must be positive"));
        }
        Ok(())
    }
}

/// Recall of ground-truth instances by the top-`an` proposals of each video.
///
/// Proposal lists must already be sorted by descending score. Videos without
/// ground truth are skipped; a proposal may recall several instances.
pub fn recall_at(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    tiou_thresh: f64,
    an: usize,
    video_weighted: bool,
) -> f64 {
    let mut recalled = 0usize;
    let mut total = 0usize;
    let mut per_video = Vec::new();
    for (id, instances) in gt {
        if instances.is_empty() {
            continue;
        }
        let kept: &[ScoredSegment] = proposals
            .get(id)
            .map(|p| &p[..p.len().min(an)])
            .unwrap_or(&[]);
        let hits = instances
            .iter()
            .filter(|g| {
                kept.iter()
                    .any(|p| tiou(p.interval(), (g.t_start, g.t_end)) >= tiou_thresh)
            })
            .count();
        recalled += hits;
        total += instances.len();
        per_video.push(hits as f64 / instances.len() as f64);
    }
    if total == 0 {
        return 0.0;
    }
    if video_weighted {
        per_video.iter().sum::<f64>() / per_video.len() as f64
    } else {
        recalled as f64 / total as f64
    }
}

/// Mean recall over `tiou_set` at one AN.
pub fn average_recall(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    config: &EvalConfig,
    an: usize,
) -> f64 {
    let sum: f64 = config
        .tiou_set
        .iter()
        .map(|&t| recall_at(proposals, gt, t, an, config.video_weighted))
        .sum();
    sum / config.tiou_set.len() as f64
}

pub fn ar_at_an(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    config: &EvalConfig,
) -> BTreeMap<usize, f64> {
    config
        .an_values
        .iter()
        .map(|&an| (an, average_recall(proposals, gt, config, an)))
        .collect()
}

/// The AR-vs-AN curve for `AN = 1..=max_an`.
pub fn ar_curve(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    config: &EvalConfig,
    max_an: usize,
) -> Vec<(usize, f64)> {
    (1..=max_an)
        .map(|an| (an, average_recall(proposals, gt, config, an)))
        .collect()
}

/// Trapezoidal area of a curve sampled at unit spacing, divided by its span
/// and expressed in percent, so a constant curve at `r` scores `100 r`.
pub fn normalized_curve_area(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return values.first().map_or(0.0, |v| 100.0 * v);
    }
    let area: f64 = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    100.0 * area / (values.len() - 1) as f64
}

/// Area under AR@AN for `AN = 1..=100`, in percent.
pub fn auc_ar_an(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    config: &EvalConfig,
) -> f64 {
    let curve: Vec<f64> = ar_curve(proposals, gt, config, 100)
        .into_iter()
        .map(|(_, ar)| ar)
        .collect();
    normalized_curve_area(&curve)
}

/// All-point interpolated average precision for one class at one threshold.
fn average_precision(
    detections: &[(&str, &ScoredSegment)],
    gt: &BTreeMap<&str, Vec<(f64, f64)>>,
    tiou_thresh: f64,
) -> f64 {
    let npos: usize = gt.values().map(Vec::len).sum();
    if npos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .score
            .partial_cmp(&detections[a].1.score)
            .unwrap_or(Ordering::Equal)
    });
    let mut used: BTreeMap<&str, Vec<bool>> =
        gt.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = Vec::with_capacity(order.len());
    for i in order {
        let (vid, det) = detections[i];
        let mut hit = false;
        if let Some(segs) = gt.get(vid) {
            let mut cands: Vec<(usize, f64)> = segs
                .iter()
                .enumerate()
                .map(|(j, &g)| (j, tiou(det.interval(), g)))
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
            let flags = used.get_mut(vid).unwrap();
            for (j, iou) in cands {
                if iou < tiou_thresh {
                    break;
                }
                if !flags[j] {
                    flags[j] = true;
                    hit = true;
                    break;
                }
            }
        }
        tp.push(hit);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut ctp = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        ctp += usize::from(hit);
        precision.push(ctp as f64 / (k + 1) as f64);
        recall.push(ctp as f64 / npos as f64);
    }
    // Precision envelope, then sum precision at each recall step.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean AP over classes at each threshold; returns `(threshold, mAP)` pairs.
///
/// Classes are the union of ground-truth and predicted labels; unlabeled
/// entries share one anonymous class. A class predicted but absent from the
/// ground truth contributes AP 0.
pub fn detection_map(
    detections: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    tiou_set: &[f64],
) -> Vec<(f64, f64)> {
    let label_of = |l: &Option<String>| l.clone().unwrap_or_default();
    let mut classes: BTreeSet<String> = BTreeSet::new();
    for g in gt.values().flatten() {
        classes.insert(label_of(&g.label));
    }
    for d in detections.values().flatten() {
        classes.insert(label_of(&d.label));
    }
    tiou_set
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return (t, 0.0);
            }
            let total: f64 = classes
                .iter()
                .map(|c| {
                    let dets: Vec<(&str, &ScoredSegment)> = detections
                        .iter()
                        .flat_map(|(vid, ds)| {
                            ds.iter()
                                .filter(|d| &label_of(&d.label) == c)
                                .map(move |d| (vid.as_str(), d))
                        })
                        .collect();
                    let g: BTreeMap<&str, Vec<(f64, f64)>> = gt
                        .iter()
                        .map(|(vid, gs)| {
                            (
                                vid.as_str(),
                                gs.iter()
                                    .filter(|g| &label_of(&g.label) == c)
                                    .map(|g| (g.t_start, g.t_end))
                                    .collect(),
                            )
                        })
                        .collect();
                    average_precision(&dets, &g, t)
                })
                .sum();
            (t, total / classes.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt_map(entries: &[(&str, &[(f64, f64)])]) -> GroundTruthByVideo {
        entries
            .iter()
            .map(|(id, segs)| {
                (
                    id.to_string(),
                    segs.iter()
                        .map(|&(s, e)| GroundTruthInstance::new(s, e))
                        .collect(),
                )
            })
            .collect()
    }

    fn props(entries: &[(&str, &[(f64, f64, f64)])]) -> ProposalsByVideo {
        entries
            .iter()
            .map(|(id, segs)| {
                (
                    id.to_string(),
                    segs.iter()
                        .map(|&(s, e, c)| ScoredSegment::new(s, e, c))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn tiou_cases() {
        assert_eq!(tiou((1.0, 4.0), (1.0, 4.0)), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((tiou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou((2.0, 2.0), (1.0, 3.0)), 0.0);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = threshold_range(50, 5, 100);
        assert_eq!(t.len(), 11);
        assert_eq!(t[3], 0.65);
        assert_eq!(t[10], 1.0);
        assert_eq!(threshold_range(50, 5, 95).len(), 10);
    }

    #[test]
    fn perfect_and_empty_recall() {
        let gt = gt_map(&[("a", &[(0.0, 2.0), (5.0, 9.0)])]);
        let p = props(&[("a", &[(5.0, 9.0, 0.9), (0.0, 2.0, 0.8)])]);
        let cfg = EvalConfig::thumos();
        for t in &cfg.tiou_set {
            assert_eq!(recall_at(&p, &gt, *t, 2, false), 1.0);
        }
        assert_eq!(
            recall_at(&ProposalsByVideo::new(), &gt, 0.5, 10, false),
            0.0
        );
        assert!(ar_at_an(&p, &gt, &cfg).values().all(|&v| v == 1.0));
    }

    #[test]
    fn video_weighting_differs() {
        let gt = gt_map(&[
            ("a", &[(0.0, 1.0)]),
            ("b", &[(0.0, 1.0), (2.0, 3.0), (4.0, 5.0)]),
        ]);
        let p = props(&[("a", &[(0.0, 1.0, 1.0)])]);
        assert_eq!(recall_at(&p, &gt, 0.5, 10, false), 0.25);
        assert_eq!(recall_at(&p, &gt, 0.5, 10, true), 0.5);
    }

    #[test]
    fn auc_normalization() {
        assert_eq!(normalized_curve_area(&vec![1.0; 100]), 100.0);
        assert_eq!(normalized_curve_area(&vec![0.0; 100]), 0.0);
        assert!((normalized_curve_area(&vec![0.4; 100]) - 40.0).abs() < 1e-9);
        // Linear ramp 0 -> 1 over the span: half the box.
        let ramp: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        assert!((normalized_curve_area(&ramp) - 50.0).abs() < 1e-12);
        // Toy piecewise-linear curve 0, 1, 1 over two unit steps: (0.5 + 1) / 2.
        assert_eq!(normalized_curve_area(&[0.0, 1.0, 1.0]), 75.0);
    }

    #[test]
    fn map_perfect_and_wrong_class() {
        let mut gt = gt_map(&[("a", &[(0.0, 2.0), (5.0, 9.0)])]);
        for g in gt.get_mut("a").unwrap() {
            g.label = Some("x".into());
        }
        let mut p = props(&[("a", &[(5.0, 9.0, 0.1), (0.0, 2.0, 0.7)])]);
        for d in p.get_mut("a").unwrap() {
            d.label = Some("x".into());
        }
        assert!(detection_map(&p, &gt, &[0.5, 0.9])
            .iter()
            .all(|&(_, m)| m == 1.0));
        for d in p.get_mut("a").unwrap() {
            d.label = Some("y".into());
        }
        assert!(detection_map(&p, &gt, &[0.5])
            .iter()
            .all(|&(_, m)| m == 0.0));
    }

    #[test]
    fn ap_one_class_hand_case() {
        // 2 gt; detections by score: TP, FP, TP, FP.
        // precision 1, 1/2, 2/3, 2/4; recall .5, .5, 1, 1.
        // envelope 1, 2/3, 2/3, 1/2 -> AP = .5*1 + .5*2/3 = 5/6.
        let gt = gt_map(&[("a", &[(0.0, 10.0), (20.0, 30.0)])]);
        let p = props(&[(
            "a",
            &[
                (0.0, 10.0, 0.9),
                (40.0, 50.0, 0.8),
                (21.0, 30.0, 0.7),
                (0.0, 9.0, 0.6),
            ],
        )]);
        let m = detection_map(&p, &gt, &[0.5]);
        assert!((m[0].1 - 5.0 / 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tiou_symmetric_and_identity(a0 in -10.0f64..10.0, la in 0.01f64..5.0, b0 in -10.0f64..10.0, lb in 0.01f64..5.0) {
            let a = (a0, a0 + la);
            let b = (b0, b0 + lb);
            prop_assert_eq!(tiou(a, b), tiou(b, a));
            prop_assert_eq!(tiou(a, a), 1.0);
            let v = tiou(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
            if v == 1.0 { prop_assert!(a == b); }
        }

        #[test]
        fn recall_monotone(
            segs in proptest::collection::vec((0.0f64..50.0, 0.5f64..10.0, 0.0f64..1.0), 0..20),
            an in 1usize..15,
            t in 0.1f64..0.9,
        ) {
            let gt = gt_map(&[("v", &[(3.0, 8.0), (20.0, 31.0), (40.0, 44.0)])]);
            let mut list: Vec<ScoredSegment> =
                segs.iter().map(|&(s, l, c)| ScoredSegment::new(s, s + l, c)).collect();
            list.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let p: ProposalsByVideo = [("v".to_string(), list)].into_iter().collect();
            prop_assert!(recall_at(&p, &gt, t, an + 1, false) >= recall_at(&p, &gt, t, an, false));
            prop_assert!(recall_at(&p, &gt, t + 0.05, an, false) <= recall_at(&p, &gt, t, an, false));
        }

        #[test]
        fn map_invariant_to_monotone_rescoring(
            segs in proptest::collection::vec((0.0f64..50.0, 0.5f64..10.0, 0.01f64..1.0), 1..15),
        ) {
            let gt = gt_map(&[("v", &[(3.0, 8.0), (20.0, 31.0), (40.0, 44.0)])]);
            let a: ProposalsByVideo = [(
                "v".to_string(),
                segs.iter().map(|&(s, l, c)| ScoredSegment::new(s, s + l, c)).collect(),
            )].into_iter().collect();
            let b: ProposalsByVideo = [(
                "v".to_string(),
                segs.iter().map(|&(s, l, c)| ScoredSegment::new(s, s + l, (3.0 * c).exp())).collect(),
            )].into_iter().collect();
            prop_assert_eq!(detection_map(&a, &gt, &[0.3, 0.5, 0.7]), detection_map(&b, &gt, &[0.3, 0.5, 0.7]));
        }
    }
}
