//! Pyramid region-based slot attention.
//!
//! Each snippet carries a slot. One iteration computes, for every region
//! scale `s`, a banded attention in which target slot `j` attends only to
//! sources `i` with `|i - j| <= s`. The region variant scores the band with a
//! convolutional encoder/decoder over the slot context; the similarity variant
//! uses scaled dot products. Per-scale attentions are fused, applied to a value
//! projection and batch-normalized. Iterations do not share parameters.
//!
//! Bands are stored compactly: an [`AttentionBand`] of scale `s` is an
//! `L x (2s+1)` matrix whose entry `(j, c)` is the weight of source
//! `i = j - s + c` for target `j`.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    impl_params, join, relu, relu_backward, sinusoidal_positions, BatchNorm, BatchNormCache,
    Linear, Mat, ParamKind, Params, TemporalConv,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Region,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Sum of per-scale attentions divided by the number of scales.
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each target's weights over its source band sum to one.
    SourcesPerTarget,
    /// Each source's weights over the targets it feeds sum to one.
    TargetsPerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSlotConfig {
    /// Channels of the raw snippet features.
    pub feature_channels: usize,
    pub c_input: usize,
    pub c_embed: usize,
    pub c_out: usize,
    pub scales: Vec<usize>,
    pub iterations: usize,
    pub variant: AttentionVariant,
    pub fusion: Fusion,
    pub residual: bool,
    pub softmax_axis: SoftmaxAxis,
}

impl PrSlotConfig {
    pub fn new(feature_channels: usize) -> Self {
        Self {
            feature_channels,
            c_input: 256,
            c_embed: 256,
            c_out: 256,
            scales: vec![4, 8],
            iterations: 2,
            variant: AttentionVariant::Region,
            fusion: Fusion::Mean,
            residual: false,
            softmax_axis: SoftmaxAxis::SourcesPerTarget,
        }
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let dims = [
            self.feature_channels,
            self.c_input,
            self.c_embed,
            self.c_out,
            self.iterations,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(
                "channel counts and iteration count must be positive",
            ));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::invalid(
                "region scales must be a non-empty set of positive sizes",
            ));
        }
        if let Some(&s) = self.scales.iter().find(|&&s| s >= len) {
            return Err(Error::invalid(format!(
                "region scale {s} must be smaller than L = {len}"
            )));
        }
        Ok(())
    }
}

/// Compact banded attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBand {
    pub scale: usize,
    pub weights: Mat,
    pub valid: Array2<bool>,
}

pub fn band_valid(len: usize, s: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, 2 * s + 1), |(j, c)| {
        let i = j as isize - s as isize + c as isize;
        i >= 0 && (i as usize) < len
    })
}

impl AttentionBand {
    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    /// Weight of source `i` for target `j`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let c = i as isize - j as isize + self.scale as isize;
        if c < 0 || c as usize > 2 * self.scale || i >= self.len() {
            return 0.0;
        }
        self.weights[[j, c as usize]]
    }

    /// The equivalent `L x L` matrix with entry `(i, j)` = weight of source `i` for target `j`.
    pub fn to_dense(&self) -> Mat {
        let len = self.len();
        Mat::from_shape_fn((len, len), |(i, j)| self.get(i, j))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.weights.rows().into_iter().map(|r| r.sum()).collect()
    }
}

/// Indices `(j, c)` of the band entries holding source `i`.
fn entries_for_source(i: usize, len: usize, s: usize) -> impl Iterator<Item = (usize, usize)> {
    let lo = i.saturating_sub(s);
    let hi = (i + s).min(len - 1);
    (lo..=hi).map(move |j| (j, i + s - j))
}

/// Softmax over the valid entries of each group along `axis`.
pub fn normalize_band(raw: &Mat, s: usize, axis: SoftmaxAxis) -> AttentionBand {
    let len = raw.nrows();
    let valid = band_valid(len, s);
    let mut weights = Mat::zeros(raw.dim());
    let mut group: Vec<(usize, usize)> = Vec::with_capacity(2 * s + 1);
    for g in 0..len {
        group.clear();
        match axis {
            SoftmaxAxis::SourcesPerTarget => {
                group.extend((0..=2 * s).filter(|&c| valid[[g, c]]).map(|c| (g, c)));
            }
            SoftmaxAxis::TargetsPerSource => group.extend(entries_for_source(g, len, s)),
        }
        let max = group
            .iter()
            .map(|&e| raw[e])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &e in &group {
            let v = (raw[e] - max).exp();
            weights[e] = v;
            total += v;
        }
        for &e in &group {
            weights[e] /= total;
        }
    }
    AttentionBand {
        scale: s,
        weights,
        valid,
    }
}

/// Gradient of the band softmax with respect to the raw scores.
pub fn normalize_band_backward(band: &AttentionBand, d_weights: &Mat, axis: SoftmaxAxis) -> Mat {
    let len = band.len();
    let s = band.scale;
    let mut draw = Mat::zeros(band.weights.dim());
    let mut group: Vec<(usize, usize)> = Vec::with_capacity(2 * s + 1);
    for g in 0..len {
        group.clear();
        match axis {
            SoftmaxAxis::SourcesPerTarget => {
                group.extend((0..=2 * s).filter(|&c| band.valid[[g, c]]).map(|c| (g, c)));
            }
            SoftmaxAxis::TargetsPerSource => group.extend(entries_for_source(g, len, s)),
        }
        let dot: f64 = group.iter().map(|&e| band.weights[e] * d_weights[e]).sum();
        for &e in &group {
            draw[e] = band.weights[e] * (d_weights[e] - dot);
        }
    }
    draw
}

/// Convolutional encoder/decoder scoring of one region scale.
#[derive(Debug, Clone)]
pub struct RegionAttention {
    pub scale: usize,
    /// 1x1 channel transform `C_embed -> C_out`.
    pub transform: Linear,
    /// `(2s+1)`-tap context convolution `C_out -> C_out`.
    pub encoder: TemporalConv,
    /// Decoder taps, `(2s+1) x C_out`; row `t` multiplies row `i + t - s`.
    pub decoder_weight: Mat,
    pub decoder_bias: Array1<f64>,
}

impl_params!(RegionAttention {
    transform,
    encoder,
    decoder_weight,
    decoder_bias
});

pub struct RegionCache {
    u: Mat,
    enc_cols: Mat,
    context: Mat,
}

impl RegionAttention {
    pub fn init(c_embed: usize, c_out: usize, s: usize, rng: &mut Rng) -> Self {
        let width = 2 * s + 1;
        let dec = Linear::init(width * c_out, 1, rng);
        Self {
            scale: s,
            transform: Linear::init(c_embed, c_out, rng),
            encoder: TemporalConv::init(c_out, c_out, width, rng),
            decoder_weight: dec.weight.into_shape_with_order((width, c_out)).unwrap(),
            decoder_bias: Array1::zeros(1),
        }
    }

    /// Per-row encoder output `R`. The pre-mask correlation map of the
    /// literal construction is `R` repeated along the target axis.
    pub fn row_context_encode(&self, u: &Mat) -> (Mat, RegionCache) {
        let transformed = self.transform.forward(u);
        let (context, enc_cols) = self.encoder.forward(&transformed);
        let cache = RegionCache {
            u: u.clone(),
            enc_cols,
            context: context.clone(),
        };
        (context, cache)
    }

    /// Raw in-band decoder scores from the encoded rows.
    ///
    /// The score of source `i` for target `j` sums decoder tap `m - i + s`
    /// applied to `R_m` over rows `m` that are both inside the decoder window
    /// of `i` and inside the band of `j`.
    pub fn banded_scores(&self, context: &Mat) -> Mat {
        let s = self.scale;
        let len = context.nrows();
        // tap_scores[m, t] = <w_t, R_m>
        let tap_scores = context.dot(&self.decoder_weight.t());
        let bias = self.decoder_bias[0];
        let mut raw = Mat::zeros((len, 2 * s + 1));
        for j in 0..len {
            let m_lo = j.saturating_sub(s);
            let m_hi = (j + s).min(len - 1);
            for c in 0..=2 * s {
                let Some(i) = (j + c).checked_sub(s).filter(|&i| i < len) else {
                    continue;
                };
                let mut acc = bias;
                for m in m_lo.max(i.saturating_sub(s))..=m_hi.min(i + s) {
                    acc += tap_scores[[m, m + s - i]];
                }
                raw[[j, c]] = acc;
            }
        }
        raw
    }

    pub fn raw_scores(&self, u: &Mat) -> (Mat, RegionCache) {
        let (context, cache) = self.row_context_encode(u);
        (self.banded_scores(&context), cache)
    }

    pub fn backward(&self, cache: &RegionCache, draw: &Mat, grad: &mut RegionAttention) -> Mat {
        let s = self.scale;
        let len = draw.nrows();
        let mut d_tap = Mat::zeros((len, 2 * s + 1));
        let mut d_bias = 0.0;
        for j in 0..len {
            let m_lo = j.saturating_sub(s);
            let m_hi = (j + s).min(len - 1);
            for c in 0..=2 * s {
                let Some(i) = (j + c).checked_sub(s).filter(|&i| i < len) else {
                    continue;
                };
                let g = draw[[j, c]];
                d_bias += g;
                for m in m_lo.max(i.saturating_sub(s))..=m_hi.min(i + s) {
                    d_tap[[m, m + s - i]] += g;
                }
            }
        }
        grad.decoder_bias[0] += d_bias;
        grad.decoder_weight += &d_tap.t().dot(&cache.context);
        let d_context = d_tap.dot(&self.decoder_weight);
        let d_transformed = self
            .encoder
            .backward(&cache.enc_cols, &d_context, &mut grad.encoder);
        self.transform
            .backward(&cache.u, &d_transformed, &mut grad.transform)
    }
}

/// Scaled dot-product scoring restricted to the band (ablation baseline).
#[derive(Debug, Clone)]
pub struct SimilarityAttention {
    pub scale: usize,
    pub query: Linear,
    pub key: Linear,
}

impl_params!(SimilarityAttention { query, key });

pub struct SimilarityCache {
    u: Mat,
    q: Mat,
    k: Mat,
}

impl SimilarityAttention {
    pub fn init(c_embed: usize, s: usize, rng: &mut Rng) -> Self {
        Self {
            scale: s,
            query: Linear::init(c_embed, c_embed, rng),
            key: Linear::init(c_embed, c_embed, rng),
        }
    }

    pub fn raw_scores(&self, u: &Mat) -> (Mat, SimilarityCache) {
        let s = self.scale;
        let len = u.nrows();
        let q = self.query.forward(u);
        let k = self.key.forward(u);
        let scale = 1.0 / (u.ncols() as f64).sqrt();
        let mut raw = Mat::zeros((len, 2 * s + 1));
        for j in 0..len {
            for c in 0..=2 * s {
                if let Some(i) = (j + c).checked_sub(s).filter(|&i| i < len) {
                    raw[[j, c]] = q.row(j).dot(&k.row(i)) * scale;
                }
            }
        }
        (raw, SimilarityCache { u: u.clone(), q, k })
    }

    pub fn backward(
        &self,
        cache: &SimilarityCache,
        draw: &Mat,
        grad: &mut SimilarityAttention,
    ) -> Mat {
        let s = self.scale;
        let len = draw.nrows();
        let scale = 1.0 / (cache.u.ncols() as f64).sqrt();
        let mut dq = Mat::zeros(cache.q.dim());
        let mut dk = Mat::zeros(cache.k.dim());
        for j in 0..len {
            for c in 0..=2 * s {
                if let Some(i) = (j + c).checked_sub(s).filter(|&i| i < len) {
                    let g = draw[[j, c]] * scale;
                    if g != 0.0 {
                        dq.row_mut(j).scaled_add(g, &cache.k.row(i));
                        dk.row_mut(i).scaled_add(g, &cache.q.row(j));
                    }
                }
            }
        }
        let du = self.query.backward(&cache.u, &dq, &mut grad.query);
        du + self.key.backward(&cache.u, &dk, &mut grad.key)
    }
}

#[derive(Debug, Clone)]
pub enum ScaleAttention {
    Region(RegionAttention),
    Similarity(SimilarityAttention),
}

impl Params for ScaleAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind)) {
        match self {
            ScaleAttention::Region(a) => a.visit(&join(prefix, "region"), f),
            ScaleAttention::Similarity(a) => a.visit(&join(prefix, "similarity"), f),
        }
    }
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    ) {
        match self {
            ScaleAttention::Region(a) => a.visit_mut(&join(prefix, "region"), f),
            ScaleAttention::Similarity(a) => a.visit_mut(&join(prefix, "similarity"), f),
        }
    }
}

pub enum ScaleCache {
    Region(RegionCache),
    Similarity(SimilarityCache),
}

impl ScaleAttention {
    pub fn scale(&self) -> usize {
        match self {
            ScaleAttention::Region(a) => a.scale,
            ScaleAttention::Similarity(a) => a.scale,
        }
    }

    pub fn raw_scores(&self, u: &Mat) -> (Mat, ScaleCache) {
        match self {
            ScaleAttention::Region(a) => {
                let (raw, c) = a.raw_scores(u);
                (raw, ScaleCache::Region(c))
            }
            ScaleAttention::Similarity(a) => {
                let (raw, c) = a.raw_scores(u);
                (raw, ScaleCache::Similarity(c))
            }
        }
    }

    fn backward(&self, cache: &ScaleCache, draw: &Mat, grad: &mut ScaleAttention) -> Mat {
        match (self, cache, grad) {
            (ScaleAttention::Region(a), ScaleCache::Region(c), ScaleAttention::Region(g)) => {
                a.backward(c, draw, g)
            }
            (
                ScaleAttention::Similarity(a),
                ScaleCache::Similarity(c),
                ScaleAttention::Similarity(g),
            ) => a.backward(c, draw, g),
            _ => unreachable!("gradient struct must mirror the model"),
        }
    }
}

/// `output_j = sum_i A(i, j) * V_i` over the band of `j`.
pub fn apply_band(band: &AttentionBand, values: &Mat) -> Mat {
    let s = band.scale;
    let len = band.len();
    let mut out = Mat::zeros((len, values.ncols()));
    for j in 0..len {
        let mut row = out.row_mut(j);
        for c in 0..=2 * s {
            let w = band.weights[[j, c]];
            if w != 0.0 {
                let i = j + c - s;
                row.scaled_add(w, &values.row(i));
            }
        }
    }
    out
}

/// Returns `(d_weights, d_values)`.
pub fn apply_band_backward(band: &AttentionBand, values: &Mat, d_out: &Mat) -> (Mat, Mat) {
    let s = band.scale;
    let len = band.len();
    let mut dw = Mat::zeros(band.weights.dim());
    let mut dv = Mat::zeros(values.dim());
    for j in 0..len {
        for c in 0..=2 * s {
            if !band.valid[[j, c]] {
                continue;
            }
            let i = j + c - s;
            dw[[j, c]] = d_out.row(j).dot(&values.row(i));
            let w = band.weights[[j, c]];
            if w != 0.0 {
                dv.row_mut(i).scaled_add(w, &d_out.row(j));
            }
        }
    }
    (dw, dv)
}

/// Combines per-scale bands into one band of the largest scale.
pub fn fuse_bands(bands: &[AttentionBand], fusion: Fusion) -> AttentionBand {
    let smax = bands
        .iter()
        .map(|b| b.scale)
        .max()
        .expect("at least one band");
    let len = bands[0].len();
    let factor = fusion_factor(bands.len(), fusion);
    let mut weights = Mat::zeros((len, 2 * smax + 1));
    for b in bands {
        let shift = smax - b.scale;
        for j in 0..len {
            for c in 0..=2 * b.scale {
                weights[[j, c + shift]] += factor * b.weights[[j, c]];
            }
        }
    }
    AttentionBand {
        scale: smax,
        weights,
        valid: band_valid(len, smax),
    }
}

fn fusion_factor(n: usize, fusion: Fusion) -> f64 {
    match fusion {
        Fusion::Mean => 1.0 / n as f64,
        Fusion::Sum => 1.0,
    }
}

/// One PRSlot iteration.
#[derive(Debug, Clone)]
pub struct PrSlotLayer {
    pub attentions: Vec<ScaleAttention>,
    pub value: Linear,
    pub norm: BatchNorm,
}

impl_params!(PrSlotLayer {
    attentions,
    value,
    norm
});

/// Intermediate results of the attention step of one sample.
pub struct AttendState {
    pub bands: Vec<AttentionBand>,
    pub fused: AttentionBand,
    pub values: Mat,
    pub output: Mat,
    scale_caches: Vec<ScaleCache>,
    input: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Frozen running statistics.
    Eval,
}

impl PrSlotLayer {
    pub fn init(config: &PrSlotConfig, rng: &mut Rng) -> Self {
        let attentions = config
            .scales
            .iter()
            .map(|&s| match config.variant {
                AttentionVariant::Region => ScaleAttention::Region(RegionAttention::init(
                    config.c_embed,
                    config.c_out,
                    s,
                    rng,
                )),
                AttentionVariant::Similarity => {
                    ScaleAttention::Similarity(SimilarityAttention::init(config.c_embed, s, rng))
                }
            })
            .collect();
        Self {
            attentions,
            value: Linear::init(config.c_embed, config.c_embed, rng),
            norm: BatchNorm::new(config.c_embed),
        }
    }

    /// Attention and value aggregation, before normalization.
    pub fn attend(&self, u: &Mat, config: &PrSlotConfig) -> AttendState {
        let mut bands = Vec::with_capacity(self.attentions.len());
        let mut scale_caches = Vec::with_capacity(self.attentions.len());
        for a in &self.attentions {
            let (raw, cache) = a.raw_scores(u);
            bands.push(normalize_band(&raw, a.scale(), config.softmax_axis));
            scale_caches.push(cache);
        }
        let fused = fuse_bands(&bands, config.fusion);
        let values = self.value.forward(u);
        let output = apply_band(&fused, &values);
        AttendState {
            bands,
            fused,
            values,
            output,
            scale_caches,
            input: u.clone(),
        }
    }

    /// Gradient of the attention step with respect to its input slots.
    pub fn attend_backward(
        &self,
        state: &AttendState,
        d_out: &Mat,
        config: &PrSlotConfig,
        grad: &mut PrSlotLayer,
    ) -> Mat {
        let (d_fused, d_values) = apply_band_backward(&state.fused, &state.values, d_out);
        let mut du = self
            .value
            .backward(&state.input, &d_values, &mut grad.value);
        let smax = state.fused.scale;
        let factor = fusion_factor(state.bands.len(), config.fusion);
        for (k, a) in self.attentions.iter().enumerate() {
            let band = &state.bands[k];
            let shift = smax - band.scale;
            let len = band.len();
            let mut d_band = Mat::zeros(band.weights.dim());
            for j in 0..len {
                for c in 0..=2 * band.scale {
                    d_band[[j, c]] = factor * d_fused[[j, c + shift]];
                }
            }
            let draw = normalize_band_backward(band, &d_band, config.softmax_axis);
            du += &a.backward(&state.scale_caches[k], &draw, &mut grad.attentions[k]);
        }
        du
    }
}

/// Input embedding: channel transform, width-3 convolution with ReLU and
/// fixed sinusoidal positions.
#[derive(Debug, Clone)]
pub struct InputEmbedding {
    pub projection: Linear,
    pub conv: TemporalConv,
}

impl_params!(InputEmbedding { projection, conv });

pub struct EmbedCache {
    x: Mat,
    conv_cols: Mat,
    activated: Mat,
}

impl InputEmbedding {
    pub fn init(config: &PrSlotConfig, rng: &mut Rng) -> Self {
        Self {
            projection: Linear::init(config.feature_channels, config.c_input, rng),
            conv: TemporalConv::init(config.c_input, config.c_embed, 3, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, EmbedCache)> {
        if x.ncols() != self.projection.input_dim() {
            return Err(Error::invalid(format!(
                "expected {} feature channels, got {}",
                self.projection.input_dim(),
                x.ncols()
            )));
        }
        let projected = self.projection.forward(x);
        let (pre, conv_cols) = self.conv.forward(&projected);
        let activated = relu(&pre);
        let out = &activated + &sinusoidal_positions(x.nrows(), activated.ncols());
        Ok((
            out,
            EmbedCache {
                x: x.clone(),
                conv_cols,
                activated,
            },
        ))
    }

    pub fn backward(&self, cache: &EmbedCache, d_out: &Mat, grad: &mut InputEmbedding) {
        let d_pre = relu_backward(&cache.activated, d_out);
        let d_proj = self.conv.backward(&cache.conv_cols, &d_pre, &mut grad.conv);
        self.projection
            .backward_params(&cache.x, &d_proj, &mut grad.projection);
    }
}

/// Slot state after some number of iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub slots: Mat,
    pub iteration: usize,
}

/// The full module: embedding plus `iterations` independent layers.
#[derive(Debug, Clone)]
pub struct PrSlot {
    pub embed: InputEmbedding,
    pub layers: Vec<PrSlotLayer>,
}

impl_params!(PrSlot { embed, layers });

pub struct PrSlotCache {
    mode: Mode,
    embeds: Vec<EmbedCache>,
    /// `attend[t][b]`
    attend: Vec<Vec<AttendState>>,
    norms: Vec<Option<BatchNormCache>>,
}

impl PrSlotCache {
    pub fn attend_states(&self, iteration: usize) -> &[AttendState] {
        &self.attend[iteration]
    }
}

impl PrSlot {
    pub fn init(config: &PrSlotConfig, rng: &mut Rng) -> Self {
        let embed = InputEmbedding::init(config, rng);
        let layers = (0..config.iterations)
            .map(|_| PrSlotLayer::init(config, rng))
            .collect();
        Self { embed, layers }
    }

    /// Runs the embedding and all iterations over a batch of `L x C` inputs.
    pub fn forward(
        &self,
        xs: &[Mat],
        config: &PrSlotConfig,
        mode: Mode,
    ) -> Result<(Vec<Mat>, PrSlotCache)> {
        let mut embeds = Vec::with_capacity(xs.len());
        let mut us = Vec::with_capacity(xs.len());
        for x in xs {
            let (u, c) = self.embed.forward(x)?;
            us.push(u);
            embeds.push(c);
        }
        let mut attend = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let states: Vec<AttendState> = us.iter().map(|u| layer.attend(u, config)).collect();
            let pre: Vec<Mat> = states.iter().map(|s| s.output.clone()).collect();
            let (mut next, norm_cache) = match mode {
                Mode::Train => {
                    let (ys, c) = layer.norm.forward_train(&pre);
                    (ys, Some(c))
                }
                Mode::Eval => (
                    pre.iter().map(|p| layer.norm.forward_eval(p)).collect(),
                    None,
                ),
            };
            if config.residual {
                for (n, u) in next.iter_mut().zip(&us) {
                    *n += u;
                }
            }
            attend.push(states);
            norms.push(norm_cache);
            us = next;
        }
        Ok((
            us,
            PrSlotCache {
                mode,
                embeds,
                attend,
                norms,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &PrSlotCache,
        d_out: Vec<Mat>,
        config: &PrSlotConfig,
        grad: &mut PrSlot,
    ) {
        let mut d = d_out;
        for (t, layer) in self.layers.iter().enumerate().rev() {
            let states = &cache.attend[t];
            let d_pre: Vec<Mat> = match (cache.mode, &cache.norms[t]) {
                (Mode::Train, Some(nc)) => {
                    layer.norm.backward_train(nc, &d, &mut grad.layers[t].norm)
                }
                _ => states
                    .iter()
                    .zip(&d)
                    .map(|(s, dy)| {
                        layer
                            .norm
                            .backward_eval(&s.output, dy, &mut grad.layers[t].norm)
                    })
                    .collect(),
            };
            let mut d_in: Vec<Mat> = states
                .iter()
                .zip(&d_pre)
                .map(|(s, dp)| layer.attend_backward(s, dp, config, &mut grad.layers[t]))
                .collect();
            if config.residual {
                for (di, dd) in d_in.iter_mut().zip(&d) {
                    *di += dd;
                }
            }
            d = d_in;
        }
        for (c, dd) in cache.embeds.iter().zip(&d) {
            self.embed.backward(c, dd, &mut grad.embed);
        }
    }

    pub fn commit_stats(&mut self, cache: &PrSlotCache) {
        for (layer, nc) in self.layers.iter_mut().zip(&cache.norms) {
            if let Some(nc) = nc {
                layer.norm.update_running(nc);
            }
        }
    }
}

/// Eval-mode iteration of one sequence, returning the final slot state.
pub fn prslot_iterate(x: &Mat, config: &PrSlotConfig, module: &PrSlot) -> Result<SlotState> {
    let (mut out, _) = module.forward(std::slice::from_ref(x), config, Mode::Eval)?;
    Ok(SlotState {
        slots: out.pop().unwrap(),
        iteration: config.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng as _;

    fn rand_mat(r: usize, c: usize, rng: &mut Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn tiny(scales: Vec<usize>, variant: AttentionVariant) -> PrSlotConfig {
        PrSlotConfig {
            c_input: 5,
            c_embed: 4,
            c_out: 3,
            scales,
            iterations: 1,
            variant,
            ..PrSlotConfig::new(6)
        }
    }

    /// Dense masked softmax over sources for each target, `(i, j)` layout.
    fn dense_masked_softmax(raw: &Mat, s: usize) -> Mat {
        let len = raw.nrows();
        let mut a = Mat::zeros((len, len));
        for j in 0..len {
            let logits: Vec<f64> = (0..len)
                .map(|i| {
                    if i.abs_diff(j) <= s {
                        raw[[i, j]]
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for i in 0..len {
                a[[i, j]] = (logits[i] - max).exp() / z;
            }
        }
        a
    }

    #[test]
    fn constant_scores_give_uniform_interior_band() {
        let band = normalize_band(
            &Mat::from_elem((12, 9), 0.3),
            4,
            SoftmaxAxis::SourcesPerTarget,
        );
        for c in 0..9 {
            assert!((band.weights[[6, c]] - 1.0 / 9.0).abs() < 1e-15);
        }
        // Border column 0 keeps the 5 valid sources j..j+4.
        let valid = (0..9).filter(|&c| band.valid[[0, c]]).count();
        assert_eq!(valid, 5);
        assert!((band.column_sums()[0] - 1.0).abs() < 1e-12);
        assert!((0..4).all(|c| band.weights[[0, c]] == 0.0));
    }

    #[test]
    fn band_softmax_matches_dense_oracle() {
        let mut rng = substream(11, "band");
        let (len, s) = (10, 3);
        let raw_band = rand_mat(len, 2 * s + 1, &mut rng) * 3.0;
        let band = normalize_band(&raw_band, s, SoftmaxAxis::SourcesPerTarget);
        let mut raw_dense = Mat::zeros((len, len));
        for j in 0..len {
            for c in 0..=2 * s {
                if band.valid[[j, c]] {
                    raw_dense[[j + c - s, j]] = raw_band[[j, c]];
                }
            }
        }
        let dense = dense_masked_softmax(&raw_dense, s);
        let got = band.to_dense();
        assert!(got
            .iter()
            .zip(dense.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn targets_per_source_rows_sum_to_one() {
        let mut rng = substream(12, "band");
        let band = normalize_band(&rand_mat(9, 5, &mut rng), 2, SoftmaxAxis::TargetsPerSource);
        let dense = band.to_dense();
        for i in 0..9 {
            assert!((dense.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decoder_gives_bias_scores() {
        let mut rng = substream(13, "dec");
        let mut ra = RegionAttention::init(4, 3, 2, &mut rng);
        ra.decoder_weight.fill(0.0);
        ra.decoder_bias[0] = 0.7;
        let (raw, _) = ra.raw_scores(&rand_mat(8, 4, &mut rng));
        let valid = band_valid(8, 2);
        for ((v, ok), _) in raw.iter().zip(valid.iter()).zip(0..) {
            if *ok {
                assert_eq!(*v, 0.7);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn delta_kernel_encoder_is_channel_transform() {
        let mut rng = substream(14, "enc");
        let mut ra = RegionAttention::init(4, 4, 2, &mut rng);
        ra.transform.weight = Mat::eye(4);
        ra.encoder.linear.weight.fill(0.0);
        for c in 0..4 {
            // Center tap t = s.
            ra.encoder.linear.weight[[c, 2 * 4 + c]] = 1.0;
        }
        let u = rand_mat(7, 4, &mut rng);
        let (r, _) = ra.row_context_encode(&u);
        assert!(r.iter().zip(u.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn constant_input_gives_constant_interior_context() {
        let mut rng = substream(15, "enc");
        let ra = RegionAttention::init(4, 3, 2, &mut rng);
        let u = Mat::from_shape_fn((12, 4), |(_, c)| c as f64 * 0.3 - 0.2);
        let (r, _) = ra.row_context_encode(&u);
        for j in 3..9 {
            for c in 0..3 {
                assert!((r[[j, c]] - r[[2, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_and_uniform_application() {
        let mut rng = substream(16, "apply");
        let v = rand_mat(6, 3, &mut rng);
        let mut w = Mat::zeros((6, 5));
        w.column_mut(2).fill(1.0);
        let band = AttentionBand {
            scale: 2,
            weights: w,
            valid: band_valid(6, 2),
        };
        assert_eq!(apply_band(&band, &v), v);

        let constant = Mat::from_elem((6, 3), 0.25);
        let uni = normalize_band(&Mat::zeros((6, 5)), 2, SoftmaxAxis::SourcesPerTarget);
        let out = apply_band(&uni, &constant);
        assert!(out.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn similarity_constant_input_is_uniform() {
        let mut rng = substream(17, "sim");
        let sa = SimilarityAttention::init(4, 2, &mut rng);
        let u = Mat::from_shape_fn((9, 4), |(_, c)| c as f64);
        let (raw, _) = sa.raw_scores(&u);
        let band = normalize_band(&raw, 2, SoftmaxAxis::SourcesPerTarget);
        for c in 0..5 {
            assert!((band.weights[[4, c]] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_orthogonal_queries_are_uniform() {
        let mut rng = substream(18, "sim");
        let mut sa = SimilarityAttention::init(4, 2, &mut rng);
        // Queries live in channels 0..2, keys in channels 2..4.
        sa.query.weight =
            Mat::from_shape_fn((4, 4), |(o, i)| if o < 2 && o == i { 1.0 } else { 0.0 });
        sa.key.weight =
            Mat::from_shape_fn((4, 4), |(o, i)| if o >= 2 && o == i { 1.0 } else { 0.0 });
        let (raw, _) = sa.raw_scores(&rand_mat(9, 4, &mut rng));
        let band = normalize_band(&raw, 2, SoftmaxAxis::SourcesPerTarget);
        assert!((band.weights[[4, 0]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn single_scale_fusion_is_identity() {
        let mut rng = substream(19, "fuse");
        let band = normalize_band(&rand_mat(8, 5, &mut rng), 2, SoftmaxAxis::SourcesPerTarget);
        let fused = fuse_bands(std::slice::from_ref(&band), Fusion::Mean);
        assert_eq!(fused, band);
    }

    #[test]
    fn fused_columns_are_stochastic_and_sum_fusion_scales() {
        let mut rng = substream(20, "fuse");
        let a = normalize_band(&rand_mat(10, 5, &mut rng), 2, SoftmaxAxis::SourcesPerTarget);
        let b = normalize_band(&rand_mat(10, 9, &mut rng), 4, SoftmaxAxis::SourcesPerTarget);
        let mean = fuse_bands(&[a.clone(), b.clone()], Fusion::Mean);
        assert!(mean.column_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
        let sum = fuse_bands(&[a, b], Fusion::Sum);
        assert!(sum.column_sums().iter().all(|s| (s - 2.0).abs() < 1e-12));
    }

    #[test]
    fn zero_embedding_weights_give_positions() {
        let config = tiny(vec![2], AttentionVariant::Region);
        let mut rng = substream(21, "emb");
        let mut emb = InputEmbedding::init(&config, &mut rng);
        emb.visit_mut("", &mut |_, mut v, _| v.fill(0.0));
        let (out, _) = emb.forward(&Mat::zeros((10, 6))).unwrap();
        assert_eq!(out, sinusoidal_positions(10, 4));
    }

    #[test]
    fn shifted_input_changes_embedding() {
        let config = tiny(vec![2], AttentionVariant::Region);
        let mut rng = substream(22, "emb");
        let emb = InputEmbedding::init(&config, &mut rng);
        let x = rand_mat(10, 6, &mut rng);
        let mut shifted = Mat::zeros((10, 6));
        for j in 1..10 {
            shifted.row_mut(j).assign(&x.row(j - 1));
        }
        let (a, _) = emb.forward(&x).unwrap();
        let (b, _) = emb.forward(&shifted).unwrap();
        // Equivariance would make b[j] == a[j-1].
        let diff: f64 = (1..10)
            .map(|j| (&b.row(j) - &a.row(j - 1)).mapv(f64::abs).sum())
            .sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let config = tiny(vec![2], AttentionVariant::Region);
        let mut rng = substream(23, "emb");
        let m = PrSlot::init(&config, &mut rng);
        assert!(m
            .forward(&[Mat::zeros((8, 5))], &config, Mode::Eval)
            .is_err());
    }

    #[test]
    fn output_shape_is_preserved() {
        let mut config = tiny(vec![2, 3], AttentionVariant::Region);
        config.iterations = 2;
        let mut rng = substream(24, "shape");
        let m = PrSlot::init(&config, &mut rng);
        let state = prslot_iterate(&rand_mat(11, 6, &mut rng), &config, &m).unwrap();
        assert_eq!(state.slots.dim(), (11, 4));
        assert_eq!(state.iteration, 2);
    }

    #[test]
    fn config_validation() {
        let c = PrSlotConfig::new(2048);
        assert!(c.validate(250).is_ok());
        assert!(c.validate(8).is_err());
        let mut bad = c.clone();
        bad.scales.clear();
        assert!(bad.validate(250).is_err());
    }
}
