//! Boundary classifier and anchor-level confidence regressor.

use ndarray::{Array1, Array2, Array3};

use crate::labels::anchor_valid;
use crate::nn::{impl_params, relu, relu_backward, sigmoid, Linear, Mat};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_K_BINS: usize = 16;

/// Start/end probabilities per snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryScores {
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl BoundaryScores {
    /// Zeroes padded positions `>= valid_len`.
    pub fn masked(mut self, valid_len: usize) -> Self {
        for l in valid_len..self.start.len() {
            self.start[l] = 0.0;
            self.end[l] = 0.0;
        }
        self
    }
}

/// Dense `D x L` classification and completeness maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMaps {
    pub cls: Array2<f64>,
    pub com: Array2<f64>,
    pub valid: Array2<bool>,
}

/// All `D x L` anchors `(d, l)` with `d` in `1..=D`, plus their validity.
pub fn anchor_grid(max_duration: usize, len: usize) -> (Vec<(usize, usize)>, Array2<bool>) {
    let mut anchors = Vec::with_capacity(max_duration * len);
    let mut valid = Array2::from_elem((max_duration, len), false);
    for d in 1..=max_duration {
        for l in 0..len {
            anchors.push((d, l));
            valid[[d - 1, l]] = anchor_valid(d, l, len);
        }
    }
    (anchors, valid)
}

/// Fixed linear sampling of slot features per valid anchor.
///
/// Anchor `[l, l + d)` reads `k` points spread uniformly over
/// `[l, l + d - 1]` (the midpoint when `k = 1`), linearly interpolated along
/// time, and averages them. The whole map is linear in the slots, so it is
/// stored as a `N_valid x L` matrix.
#[derive(Debug, Clone)]
pub struct AnchorSampler {
    pub max_duration: usize,
    pub len: usize,
    pub k_bins: usize,
    /// Valid anchors `(d, l)` in row-major `(d, l)` order.
    pub anchors: Vec<(usize, usize)>,
    pub weights: Mat,
}

impl AnchorSampler {
    pub fn new(max_duration: usize, len: usize, k_bins: usize) -> Self {
        assert!(k_bins >= 1, "k_bins must be positive");
        let anchors: Vec<(usize, usize)> = (1..=max_duration)
            .flat_map(|d| (0..len).map(move |l| (d, l)))
            .filter(|&(d, l)| anchor_valid(d, l, len))
            .collect();
        let mut weights = Mat::zeros((anchors.len(), len));
        let share = 1.0 / k_bins as f64;
        for (row, &(d, l)) in anchors.iter().enumerate() {
            for n in 0..k_bins {
                let p = if k_bins == 1 {
                    l as f64 + (d - 1) as f64 / 2.0
                } else {
                    l as f64 + n as f64 * (d - 1) as f64 / (k_bins - 1) as f64
                };
                let lo = p.floor() as usize;
                let frac = p - lo as f64;
                weights[[row, lo]] += share * (1.0 - frac);
                if frac > 0.0 {
                    weights[[row, lo + 1]] += share * frac;
                }
            }
        }
        Self {
            max_duration,
            len,
            k_bins,
            anchors,
            weights,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Row index of anchor `(d, l)` among valid anchors.
    pub fn index_of(&self, d: usize, l: usize) -> Option<usize> {
        if !anchor_valid(d, l, self.len) || d > self.max_duration {
            return None;
        }
        // Rows for durations below d: sum over d' < d of (len - d' + 1).
        let before: usize = (1..d).map(|dd| self.len + 1 - dd).sum();
        Some(before + l)
    }

    /// Compact `N_valid x C` aligned features.
    pub fn align(&self, u: &Mat) -> Mat {
        self.weights.dot(u)
    }

    pub fn align_backward(&self, d_feat: &Mat) -> Mat {
        self.weights.t().dot(d_feat)
    }

    /// Scatters per-anchor values into a `D x L` map (zeros on invalid anchors).
    pub fn scatter(&self, values: &Array1<f64>) -> Array2<f64> {
        let mut map = Array2::zeros((self.max_duration, self.len));
        for (&(d, l), &v) in self.anchors.iter().zip(values) {
            map[[d - 1, l]] = v;
        }
        map
    }

    pub fn valid_map(&self) -> Array2<bool> {
        anchor_grid(self.max_duration, self.len).1
    }
}

/// `D x L x C` proposal features; invalid anchors are zero.
pub fn align_proposal_features(u: &Mat, max_duration: usize, k_bins: usize) -> Array3<f64> {
    let sampler = AnchorSampler::new(max_duration, u.nrows(), k_bins);
    let compact = sampler.align(u);
    let mut out = Array3::zeros((max_duration, u.nrows(), u.ncols()));
    for (row, &(d, l)) in sampler.anchors.iter().enumerate() {
        out.slice_mut(ndarray::s![d - 1, l, ..])
            .assign(&compact.row(row));
    }
    out
}

/// Pointwise `C -> 2` map with logistic outputs; column 0 is start, 1 is end.
#[derive(Debug, Clone)]
pub struct BoundaryHead {
    pub linear: Linear,
}

impl_params!(BoundaryHead { linear });

impl BoundaryHead {
    pub fn init(c_embed: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::init(c_embed, 2, rng),
        }
    }

    /// Returns the `L x 2` probabilities.
    pub fn forward(&self, u: &Mat) -> Mat {
        self.linear.forward(u).mapv(sigmoid)
    }

    pub fn scores(&self, u: &Mat) -> BoundaryScores {
        let p = self.forward(u);
        BoundaryScores {
            start: p.column(0).to_owned(),
            end: p.column(1).to_owned(),
        }
    }

    /// `d_prob` is the gradient with respect to the probabilities.
    pub fn backward(&self, u: &Mat, probs: &Mat, d_prob: &Mat, grad: &mut BoundaryHead) -> Mat {
        let d_logit = d_prob * &probs.mapv(|p| p * (1.0 - p));
        self.linear.backward(u, &d_logit, &mut grad.linear)
    }
}

/// Two affine layers per anchor: `C -> hidden`, ReLU, `hidden -> 1`, logistic.
#[derive(Debug, Clone)]
pub struct ConfidenceHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl_params!(ConfidenceHead { hidden, output });

pub struct ConfidenceCache {
    activated: Mat,
    probs: Array1<f64>,
}

impl ConfidenceHead {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, 1, rng),
        }
    }

    pub fn forward(&self, features: &Mat) -> (Array1<f64>, ConfidenceCache) {
        let activated = relu(&self.hidden.forward(features));
        let probs = self.output.forward(&activated).column(0).mapv(sigmoid);
        (probs.clone(), ConfidenceCache { activated, probs })
    }

    pub fn backward(
        &self,
        features: &Mat,
        cache: &ConfidenceCache,
        d_prob: &Array1<f64>,
        grad: &mut ConfidenceHead,
    ) -> Mat {
        let d_logit = d_prob * &cache.probs.mapv(|p| p * (1.0 - p));
        let d_logit = d_logit.insert_axis(ndarray::Axis(1));
        let d_act = self
            .output
            .backward(&cache.activated, &d_logit, &mut grad.output);
        let d_pre = relu_backward(&cache.activated, &d_act);
        self.hidden.backward(features, &d_pre, &mut grad.hidden)
    }
}

/// Dense confidence maps from compact per-anchor probabilities.
pub fn confidence_maps(
    sampler: &AnchorSampler,
    cls: &Array1<f64>,
    com: &Array1<f64>,
) -> ConfidenceMaps {
    ConfidenceMaps {
        cls: sampler.scatter(cls),
        com: sampler.scatter(com),
        valid: sampler.valid_map(),
    }
}
