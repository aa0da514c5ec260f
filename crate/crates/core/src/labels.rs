//! Training targets: per-snippet boundary labels and the dense anchor IoU map.
//!
//! Everything is computed in seconds relative to the sequence origin, so the
//! windowed and rescaled modes share one code path.

use ndarray::{Array1, Array2};

use crate::data::GroundTruthInstance;
use crate::metrics::tiou;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLabels {
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Anchor `(d, l)` for `d` in `1..=D` sits at row `d - 1`, column `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLabelMap {
    pub iou: Array2<f64>,
    pub valid: Array2<bool>,
}

/// Intersection of `[a0, a1]` and `[b0, b1]` divided by the length of `a`.
fn ioa(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    inter / (a1 - a0)
}

/// Half-width of the region around a boundary of an instance lasting `duration`.
pub fn boundary_half_width(duration: f64, time_per_snippet: f64) -> f64 {
    (duration / 10.0).max(time_per_snippet)
}

pub fn boundary_labels(
    instances: &[GroundTruthInstance],
    len: usize,
    time_per_snippet: f64,
) -> BoundaryLabels {
    let mut start = Array1::zeros(len);
    let mut end = Array1::zeros(len);
    for g in instances {
        let h = boundary_half_width(g.duration(), time_per_snippet);
        for l in 0..len {
            let a0 = l as f64 * time_per_snippet;
            let a1 = (l + 1) as f64 * time_per_snippet;
            let s = ioa(a0, a1, g.t_start - h, g.t_start + h);
            let e = ioa(a0, a1, g.t_end - h, g.t_end + h);
            if s > start[l] {
                start[l] = s;
            }
            if e > end[l] {
                end[l] = e;
            }
        }
    }
    BoundaryLabels { start, end }
}

pub fn anchor_valid(duration: usize, start: usize, len: usize) -> bool {
    duration >= 1 && start + duration <= len
}

pub fn proposal_label_map(
    instances: &[GroundTruthInstance],
    max_duration: usize,
    len: usize,
    time_per_snippet: f64,
) -> ProposalLabelMap {
    let mut iou = Array2::zeros((max_duration, len));
    let mut valid = Array2::from_elem((max_duration, len), false);
    for d in 1..=max_duration {
        for l in 0..len {
            if !anchor_valid(d, l, len) {
                continue;
            }
            valid[[d - 1, l]] = true;
            let a = (
                l as f64 * time_per_snippet,
                (l + d) as f64 * time_per_snippet,
            );
            iou[[d - 1, l]] = instances
                .iter()
                .map(|g| tiou(a, (g.t_start, g.t_end)))
                .fold(0.0, f64::max);
        }
    }
    ProposalLabelMap { iou, valid }
}

/// Re-expresses video-level instances relative to a window starting at
/// `origin` seconds and lasting `span` seconds.
///
/// Instances are clipped to the window; those keeping less than
/// `min_inside_fraction` of their duration inside the window are dropped.
pub fn instances_in_window(
    instances: &[GroundTruthInstance],
    origin: f64,
    span: f64,
    min_inside_fraction: f64,
) -> Vec<GroundTruthInstance> {
    instances
        .iter()
        .filter_map(|g| {
            let s = (g.t_start - origin).max(0.0);
            let e = (g.t_end - origin).min(span);
            if e <= s || (e - s) < min_inside_fraction * g.duration() {
                return None;
            }
            Some(GroundTruthInstance {
                t_start: s,
                t_end: e,
                label: g.label.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_instances_give_zero_labels() {
        let b = boundary_labels(&[], 16, 0.16);
        assert!(b.start.iter().chain(b.end.iter()).all(|&v| v == 0.0));
        let m = proposal_label_map(&[], 4, 16, 0.16);
        assert!(m.iou.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_containment_gives_one() {
        // Duration 40 s -> half-width 4 s around t_start = 22 covers snippet 5's
        // region [20, 24] when dt = 4.
        let g = GroundTruthInstance::new(22.0, 62.0);
        let b = boundary_labels(&[g], 20, 4.0);
        assert_eq!(b.start[5], 1.0);
    }

    #[test]
    fn short_action_gets_one_snippet_half_width() {
        let g = GroundTruthInstance::new(1.0, 2.0);
        assert_eq!(boundary_half_width(g.duration(), 0.5), 0.5);
        let b = boundary_labels(&[g], 8, 0.5);
        // Start region [0.5, 1.5] fully covers snippets 1 and 2.
        assert_eq!(b.start[1], 1.0);
        assert_eq!(b.start[2], 1.0);
        assert_eq!(b.start[0], 0.0);
    }

    #[test]
    fn exact_anchor_and_disjoint_anchor() {
        let g = GroundTruthInstance::new(2.0, 5.0);
        let m = proposal_label_map(&[g], 4, 10, 1.0);
        assert_eq!(m.iou[[2, 2]], 1.0);
        assert_eq!(m.iou[[0, 7]], 0.0);
        assert!(!m.valid[[3, 8]]);
        assert!(m.valid[[3, 6]]);
    }

    #[test]
    fn window_clipping() {
        let gs = vec![
            GroundTruthInstance::new(10.0, 20.0),
            GroundTruthInstance::new(38.0, 48.0),
        ];
        let w = instances_in_window(&gs, 8.0, 32.0, 0.5);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].t_start, w[0].t_end), (2.0, 12.0));
        let w = instances_in_window(&gs, 8.0, 32.0, 0.1);
        assert_eq!(w.len(), 2);
        assert_eq!((w[1].t_start, w[1].t_end), (30.0, 32.0));
    }

    proptest! {
        #[test]
        fn labels_in_unit_interval(
            s in 0.0f64..10.0, len in 0.1f64..6.0, dt in 0.1f64..1.0
        ) {
            let g = GroundTruthInstance::new(s, s + len);
            let b = boundary_labels(std::slice::from_ref(&g), 24, dt);
            prop_assert!(b.start.iter().chain(b.end.iter()).all(|&v| (0.0..=1.0).contains(&v)));
            let m = proposal_label_map(&[g], 6, 24, dt);
            for ((&v, &ok), _) in m.iou.iter().zip(m.valid.iter()).zip(0..) {
                prop_assert!((0.0..=1.0).contains(&v));
                if !ok { prop_assert_eq!(v, 0.0); }
            }
        }

        #[test]
        fn enlarging_instance_to_cover_anchor_never_lowers_it(
            s in 0.0f64..10.0, len in 0.5f64..5.0, d in 1usize..6, l in 0usize..10
        ) {
            let g = GroundTruthInstance::new(s, s + len);
            let (a0, a1) = (l as f64, (l + d) as f64);
            let before = proposal_label_map(std::slice::from_ref(&g), 6, 16, 1.0).iou[[d - 1, l]];
            if before == 0.0 {
                return Ok(());
            }
            let hull = GroundTruthInstance::new(g.t_start.min(a0), g.t_end.max(a1));
            let after = proposal_label_map(&[hull], 6, 16, 1.0).iou[[d - 1, l]];
            prop_assert!(after >= before - 1e-12, "{} < {}", after, before);
        }
    }
}
