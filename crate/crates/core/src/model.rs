//! The full network: PRSlot module, boundary head and the two confidence heads.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{
    confidence_maps, AnchorSampler, BoundaryHead, BoundaryScores, ConfidenceHead, ConfidenceMaps,
    DEFAULT_HIDDEN, DEFAULT_K_BINS,
};
use crate::labels::{BoundaryLabels, ProposalLabelMap};
use crate::losses::{boundary_loss, proposal_loss, total_loss, LossBreakdown, LossConfig};
use crate::nn::{impl_params, Mat, ParamKind, Params, ParamsExt};
use crate::prslot::{Mode, PrSlot, PrSlotCache, PrSlotConfig};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub prslot: PrSlotConfig,
    /// Sequence length `L` the network is built for.
    pub len: usize,
    /// Longest anchor `D`, in snippets.
    pub max_duration: usize,
    pub k_bins: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn new(feature_channels: usize, len: usize, max_duration: usize) -> Self {
        Self {
            prslot: PrSlotConfig::new(feature_channels),
            len,
            max_duration,
            k_bins: DEFAULT_K_BINS,
            hidden: DEFAULT_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.max_duration == 0 || self.k_bins == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "len, max_duration, k_bins and hidden must all be positive",
            ));
        }
        if self.max_duration > self.len {
            return Err(Error::invalid(format!(
                "max_duration {} exceeds sequence length {}",
                self.max_duration, self.len
            )));
        }
        self.prslot.validate(self.len)
    }
}

/// All learnable state. Also used as the gradient container.
#[derive(Debug, Clone)]
pub struct PrsaNet {
    pub prslot: PrSlot,
    pub boundary: BoundaryHead,
    pub cls: ConfidenceHead,
    pub com: ConfidenceHead,
}

impl_params!(PrsaNet {
    prslot,
    boundary,
    cls,
    com
});

impl PrsaNet {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let c = config.prslot.c_embed;
        Self {
            prslot: PrSlot::init(&config.prslot, &mut substream(seed, "init/prslot")),
            boundary: BoundaryHead::init(c, &mut substream(seed, "init/boundary")),
            cls: ConfidenceHead::init(c, config.hidden, &mut substream(seed, "init/cls")),
            com: ConfidenceHead::init(c, config.hidden, &mut substream(seed, "init/com")),
        }
    }

    /// Adds `2 * scale * theta` to every trainable entry of `grad`.
    fn add_norm_grad(&self, scale: f64, grad: &mut PrsaNet) {
        let mut values = Vec::new();
        self.visit("", &mut |_, v, k| {
            if k == ParamKind::Trainable {
                values.extend(v.iter().copied());
            }
        });
        let mut pos = 0;
        grad.visit_mut("", &mut |_, mut v, k| {
            if k == ParamKind::Trainable {
                for g in v.iter_mut() {
                    *g += 2.0 * scale * values[pos];
                    pos += 1;
                }
            }
        });
    }
}

/// One training example: an `L x C` sequence and its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Mat,
    pub boundary: BoundaryLabels,
    pub proposal: ProposalLabelMap,
    /// Rows at or past this index are padding.
    pub valid_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boundary: BoundaryScores,
    pub maps: ConfidenceMaps,
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub net: PrsaNet,
    pub sampler: AnchorSampler,
}

/// Result of a batched loss evaluation.
pub struct BatchGrad {
    pub loss: LossBreakdown,
    pub grad: PrsaNet,
    pub cache: PrSlotCache,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = PrsaNet::init(&config, seed);
        Ok(Self::from_parts(config, net))
    }

    pub fn from_parts(config: ModelConfig, net: PrsaNet) -> Self {
        let sampler = AnchorSampler::new(config.max_duration, config.len, config.k_bins);
        Self {
            config,
            net,
            sampler,
        }
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        let p = &self.config.prslot;
        if x.nrows() != self.config.len || x.ncols() != p.feature_channels {
            return Err(Error::invalid(format!(
                "expected a {} x {} input, got {} x {}",
                self.config.len,
                p.feature_channels,
                x.nrows(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input features contain non-finite values"));
        }
        Ok(())
    }

    /// Per-sample anchor mask: valid anchors lying entirely inside `valid_len`.
    pub fn anchor_mask(&self, valid_len: usize) -> Vec<bool> {
        self.sampler
            .anchors
            .iter()
            .map(|&(d, l)| l + d <= valid_len)
            .collect()
    }

    /// Eval-mode prediction for one sequence. Padded positions are zeroed.
    pub fn predict(&self, x: &Mat, valid_len: usize) -> Result<Prediction> {
        self.check_input(x)?;
        let (mut us, _) =
            self.net
                .prslot
                .forward(std::slice::from_ref(x), &self.config.prslot, Mode::Eval)?;
        let u = us.pop().unwrap();
        let valid_len = valid_len.min(self.config.len);
        let boundary = self.net.boundary.scores(&u).masked(valid_len);
        let aligned = self.sampler.align(&u);
        let (cls, _) = self.net.cls.forward(&aligned);
        let (com, _) = self.net.com.forward(&aligned);
        let mut maps = confidence_maps(&self.sampler, &cls, &com);
        for d in 1..=self.config.max_duration {
            for l in 0..self.config.len {
                if l + d > valid_len {
                    maps.cls[[d - 1, l]] = 0.0;
                    maps.com[[d - 1, l]] = 0.0;
                    maps.valid[[d - 1, l]] = false;
                }
            }
        }
        Ok(Prediction {
            boundary,
            maps,
            valid_len,
        })
    }

    /// Mean per-sample loss plus the norm term, with gradients for every
    /// trainable parameter. In train mode the normalization statistics of the
    /// batch are returned in the cache but not committed.
    pub fn loss_and_grad(
        &self,
        batch: &[Sample],
        losses: &LossConfig,
        mode: Mode,
    ) -> Result<BatchGrad> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let xs: Vec<Mat> = batch.iter().map(|s| s.features.clone()).collect();
        for x in &xs {
            self.check_input(x)?;
        }
        let (us, cache) = self.net.prslot.forward(&xs, &self.config.prslot, mode)?;
        let mut grad = self.net.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut sums = [0.0f64; 4];
        let mut d_us = Vec::with_capacity(batch.len());
        for (sample, u) in batch.iter().zip(&us) {
            let (parts, du) = self.sample_loss(sample, u, losses, scale, &mut grad)?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += scale * p;
            }
            d_us.push(du);
        }
        self.net
            .prslot
            .backward(&cache, d_us, &self.config.prslot, &mut grad.prslot);
        let sq = self.net.sq_norm();
        self.net.add_norm_grad(losses.lambda, &mut grad);
        let loss = total_loss(sums[0], sums[1], sums[2], sums[3], sq, losses.lambda);
        Ok(BatchGrad { loss, grad, cache })
    }

    /// Loss of one sample given its slot state; returns
    /// `[L_b, L_p, L_cls, L_com]` and the gradient w.r.t. the slots, both
    /// scaled by `scale` for the gradient only.
    fn sample_loss(
        &self,
        sample: &Sample,
        u: &Mat,
        losses: &LossConfig,
        scale: f64,
        grad: &mut PrsaNet,
    ) -> Result<([f64; 4], Mat)> {
        let len = self.config.len;
        let valid_len = sample.valid_len.min(len);
        if sample.boundary.start.len() != len
            || sample.boundary.end.len() != len
            || sample.proposal.iou.dim() != (self.config.max_duration, len)
        {
            return Err(Error::invalid("sample labels do not match the model shape"));
        }
        let time_mask: Vec<bool> = (0..len).map(|l| l < valid_len).collect();
        let probs = self.net.boundary.forward(u);
        let scores = BoundaryScores {
            start: probs.column(0).to_owned(),
            end: probs.column(1).to_owned(),
        };
        let lb = boundary_loss(
            &scores,
            &sample.boundary,
            Some(&time_mask),
            losses.label_binarize_thresh,
        )?;
        let mut d_prob = Array2::zeros((len, 2));
        for l in 0..len {
            d_prob[[l, 0]] = scale * lb.grad_start[l];
            d_prob[[l, 1]] = scale * lb.grad_end[l];
        }
        let mut du = self
            .net
            .boundary
            .backward(u, &probs, &d_prob, &mut grad.boundary);

        let aligned = self.sampler.align(u);
        let (cls, cls_cache) = self.net.cls.forward(&aligned);
        let (com, com_cache) = self.net.com.forward(&aligned);
        let targets: Vec<f64> = self
            .sampler
            .anchors
            .iter()
            .map(|&(d, l)| sample.proposal.iou[[d - 1, l]])
            .collect();
        let mask = self.anchor_mask(valid_len);
        let lp = proposal_loss(
            cls.as_slice().unwrap(),
            com.as_slice().unwrap(),
            &targets,
            Some(&mask),
            losses.lambda_c,
            losses.map_binarize_thresh,
        )?;
        let d_cls = Array1::from(lp.grad_cls.iter().map(|g| scale * g).collect::<Vec<_>>());
        let d_com = Array1::from(lp.grad_com.iter().map(|g| scale * g).collect::<Vec<_>>());
        let mut d_feat = self
            .net
            .cls
            .backward(&aligned, &cls_cache, &d_cls, &mut grad.cls);
        d_feat += &self
            .net
            .com
            .backward(&aligned, &com_cache, &d_com, &mut grad.com);
        du += &self.sampler.align_backward(&d_feat);
        Ok(([lb.value, lp.value, lp.cls, lp.com], du))
    }

    /// Loss only, without touching any state.
    pub fn loss(&self, batch: &[Sample], losses: &LossConfig, mode: Mode) -> Result<LossBreakdown> {
        Ok(self.loss_and_grad(batch, losses, mode)?.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroundTruthInstance;
    use crate::labels::{boundary_labels, proposal_label_map};
    use crate::prslot::AttentionVariant;
    use crate::rng::Rng;
    use rand::Rng as _;

    fn tiny_config(variant: AttentionVariant) -> ModelConfig {
        let mut c = ModelConfig::new(3, 8, 4);
        c.prslot.c_input = 4;
        c.prslot.c_embed = 3;
        c.prslot.c_out = 3;
        c.prslot.scales = vec![1, 2];
        c.prslot.variant = variant;
        c.k_bins = 3;
        c.hidden = 5;
        c
    }

    fn sample(config: &ModelConfig, rng: &mut Rng, valid_len: usize) -> Sample {
        let len = config.len;
        let features = Mat::from_shape_fn((len, config.prslot.feature_channels), |_| {
            rng.random_range(-1.0..1.0)
        });
        let dt = 1.0;
        let inst = vec![GroundTruthInstance::new(2.0, 5.0)];
        Sample {
            features,
            boundary: boundary_labels(&inst, len, dt),
            proposal: proposal_label_map(&inst, config.max_duration, len, dt),
            valid_len,
        }
    }

    fn check_gradients(variant: AttentionVariant, mode: Mode) {
        let config = tiny_config(variant);
        let model = Model::new(config.clone(), 3).unwrap();
        let mut rng = substream(9, "gradcheck");
        let batch = vec![sample(&config, &mut rng, 8), sample(&config, &mut rng, 6)];
        let losses = LossConfig::default();
        let analytic = model
            .loss_and_grad(&batch, &losses, mode)
            .unwrap()
            .grad
            .flat_trainable();
        let theta = model.net.flat_trainable();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let eval = |delta: f64| {
                let mut t = theta.clone();
                t[i] += delta;
                let mut m = model.clone();
                m.net.set_flat_trainable(&t);
                m.loss(&batch, &losses, mode).unwrap().total
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_train_mode() {
        check_gradients(AttentionVariant::Region, Mode::Train);
    }

    #[test]
    fn gradients_match_eval_similarity() {
        check_gradients(AttentionVariant::Similarity, Mode::Eval);
    }

    #[test]
    fn prediction_shapes_and_masking() {
        let config = tiny_config(AttentionVariant::Region);
        let model = Model::new(config.clone(), 1).unwrap();
        let mut rng = substream(2, "x");
        let s = sample(&config, &mut rng, 6);
        let p = model.predict(&s.features, 6).unwrap();
        assert_eq!(p.maps.cls.dim(), (4, 8));
        assert_eq!(p.boundary.start[6], 0.0);
        assert_eq!(p.maps.cls[[0, 6]], 0.0);
        assert!(p.maps.cls[[0, 5]] > 0.0 && p.maps.cls[[0, 5]] < 1.0);
    }

    #[test]
    fn bad_input_shape_is_rejected() {
        let model = Model::new(tiny_config(AttentionVariant::Region), 1).unwrap();
        assert!(model.predict(&Mat::zeros((7, 3)), 7).is_err());
        assert!(ModelConfig::new(3, 4, 8).validate().is_err());
    }

    #[test]
    fn eval_loss_is_batch_permutation_invariant() {
        let config = tiny_config(AttentionVariant::Region);
        let model = Model::new(config.clone(), 4).unwrap();
        let mut rng = substream(5, "perm");
        let a = sample(&config, &mut rng, 8);
        let b = sample(&config, &mut rng, 7);
        let losses = LossConfig::default();
        let l1 = model
            .loss(&[a.clone(), b.clone()], &losses, Mode::Eval)
            .unwrap();
        let l2 = model.loss(&[b, a], &losses, Mode::Eval).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
    }

    #[test]
    fn norm_is_homogeneous() {
        let model = Model::new(tiny_config(AttentionVariant::Region), 4).unwrap();
        let mut doubled = model.clone();
        let t: Vec<f64> = model.net.flat_trainable().iter().map(|v| 2.0 * v).collect();
        doubled.net.set_flat_trainable(&t);
        assert!((doubled.net.sq_norm() - 4.0 * model.net.sq_norm()).abs() < 1e-9);
    }
}
