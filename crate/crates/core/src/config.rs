//! Flat key-value run configuration with named profiles.
//!
//! A config file is a flat TOML document (`key = value` lines, `#` comments,
//! no tables). Loading starts from a profile, applies the file, then
//! command-line `key=value` overrides; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SequenceMode, SynthSpec};
use crate::dataset::SequenceOptions;
use crate::error::{Error, Result};
use crate::inference::{CandidateRule, Decay, SoftNmsConfig, Suppression};
use crate::losses::LossConfig;
use crate::metrics::{EvalConfig, EvalMode};
use crate::model::ModelConfig;
use crate::prslot::{AttentionVariant, Fusion, PrSlotConfig, SoftmaxAxis};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressKind {
    None,
    Nms,
    SoftNms,
}

impl FromStr for SuppressKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "nms" => Ok(Self::Nms),
            "soft_nms" => Ok(Self::SoftNms),
            _ => Err(Error::invalid(format!(
                "unknown suppression `{s}` (none|nms|soft_nms)"
            ))),
        }
    }
}

impl fmt::Display for SuppressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Nms => "nms",
            Self::SoftNms => "soft_nms",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftDecayKind {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Thumos,
    Anet,
    /// Desk-scale settings for the synthetic dataset.
    Synthetic,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thumos" => Ok(Self::Thumos),
            "anet" => Ok(Self::Anet),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(Error::invalid(format!(
                "unknown profile `{s}` (thumos|anet|synthetic)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Thumos => "thumos",
            Self::Anet => "anet",
            Self::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // data
    pub snippet_interval: u32,
    pub sequence_mode: SequenceMode,
    pub window_len: usize,
    pub window_stride: usize,
    pub max_duration: usize,
    pub window_min_inside: f64,

    // network; feature_channels = 0 means "read it from the data"
    pub feature_channels: usize,
    pub c_input: usize,
    pub c_embed: usize,
    pub c_out: usize,
    pub scales: Vec<usize>,
    pub iterations: usize,
    pub attention_variant: AttentionVariant,
    pub fusion: Fusion,
    pub residual: bool,
    pub softmax_axis: SoftmaxAxis,
    pub k_bins: usize,
    pub hidden: usize,

    // training
    pub lambda: f64,
    pub lambda_c: f64,
    pub label_binarize_thresh: f64,
    pub map_binarize_thresh: f64,
    pub learning_rates: Vec<f64>,
    pub lr_epochs: Vec<usize>,
    pub batch_size: usize,

    // inference
    pub candidate_rule: CandidateRule,
    pub suppress: SuppressKind,
    pub nms_theta: f64,
    pub soft_decay: SoftDecayKind,
    pub soft_sigma: f64,
    pub soft_linear_thresh: f64,
    pub soft_keep: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_hard_theta: Option<f64>,

    // evaluation
    pub eval_mode: EvalMode,

    // synthetic data
    pub synth_videos: usize,
    pub synth_length: usize,
    pub synth_channels: usize,
    pub synth_max_instances: usize,
    pub synth_offset: f64,
    pub synth_noise: f64,
    pub synth_fps: f64,
    pub synth_id_prefix: String,
}

impl RunConfig {
    pub fn thumos() -> Self {
        Self {
            seed: 0,
            snippet_interval: 4,
            sequence_mode: SequenceMode::Windowed,
            window_len: 250,
            window_stride: 100,
            max_duration: 64,
            window_min_inside: 0.75,
            feature_channels: 0,
            c_input: 256,
            c_embed: 256,
            c_out: 256,
            scales: vec![4, 8],
            iterations: 2,
            attention_variant: AttentionVariant::Region,
            fusion: Fusion::Mean,
            residual: false,
            softmax_axis: SoftmaxAxis::SourcesPerTarget,
            k_bins: crate::heads::DEFAULT_K_BINS,
            hidden: crate::heads::DEFAULT_HIDDEN,
            lambda: 2e-4,
            lambda_c: 10.0,
            label_binarize_thresh: 0.5,
            map_binarize_thresh: 0.5,
            learning_rates: vec![2e-4],
            lr_epochs: vec![10],
            batch_size: 8,
            candidate_rule: CandidateRule::Or,
            suppress: SuppressKind::SoftNms,
            nms_theta: 0.65,
            soft_decay: SoftDecayKind::Gaussian,
            soft_sigma: crate::inference::DEFAULT_SOFT_SIGMA,
            soft_linear_thresh: 0.65,
            soft_keep: crate::inference::DEFAULT_KEEP_THRESHOLD,
            soft_hard_theta: None,
            eval_mode: EvalMode::Thumos,
            synth_videos: 20,
            synth_length: 64,
            synth_channels: 32,
            synth_max_instances: 3,
            synth_offset: 1.0,
            synth_noise: 0.5,
            synth_fps: 25.0,
            synth_id_prefix: "video".into(),
        }
    }

    pub fn anet() -> Self {
        Self {
            snippet_interval: 16,
            sequence_mode: SequenceMode::Rescaled,
            window_len: 100,
            max_duration: 100,
            learning_rates: vec![1e-3, 1e-4],
            lr_epochs: vec![7, 3],
            batch_size: 16,
            nms_theta: 0.45,
            soft_linear_thresh: 0.45,
            eval_mode: EvalMode::Anet,
            ..Self::thumos()
        }
    }

    /// Small network and windows matching the default synthetic videos.
    pub fn synthetic() -> Self {
        Self {
            window_len: 64,
            window_stride: 32,
            max_duration: 16,
            c_input: 32,
            c_embed: 32,
            c_out: 32,
            scales: vec![2, 4],
            batch_size: 4,
            ..Self::thumos()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Thumos => Self::thumos(),
            Profile::Anet => Self::anet(),
            Profile::Synthetic => Self::synthetic(),
        }
    }

    /// Profile, then the optional file, then `key=value` overrides.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::profile(profile)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::format(path, e.message().to_string()))?;
            for (k, v) in file_table {
                if v.is_table() {
                    return Err(Error::format(
                        path,
                        format!("key `{k}`: nested tables are not allowed"),
                    ));
                }
                table.insert(k, v);
            }
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snippet_interval == 0 || self.window_stride == 0 {
            return Err(Error::invalid(
                "snippet_interval and window_stride must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.window_min_inside) {
            return Err(Error::invalid("window_min_inside must lie in [0, 1]"));
        }
        self.model_config(self.feature_channels.max(1)).validate()?;
        self.train_config().validate()?;
        if self.learning_rates.len() != self.lr_epochs.len() {
            return Err(Error::invalid(format!(
                "learning_rates has {} entries but lr_epochs has {}",
                self.learning_rates.len(),
                self.lr_epochs.len()
            )));
        }
        for (name, v) in [
            ("label_binarize_thresh", self.label_binarize_thresh),
            ("map_binarize_thresh", self.map_binarize_thresh),
            ("nms_theta", self.nms_theta),
            ("soft_linear_thresh", self.soft_linear_thresh),
            ("soft_keep", self.soft_keep),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.soft_sigma > 0.0) {
            return Err(Error::invalid("soft_sigma must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, feature_channels: usize) -> ModelConfig {
        ModelConfig {
            prslot: PrSlotConfig {
                feature_channels,
                c_input: self.c_input,
                c_embed: self.c_embed,
                c_out: self.c_out,
                scales: self.scales.clone(),
                iterations: self.iterations,
                variant: self.attention_variant,
                fusion: self.fusion,
                residual: self.residual,
                softmax_axis: self.softmax_axis,
            },
            len: self.window_len,
            max_duration: self.max_duration,
            k_bins: self.k_bins,
            hidden: self.hidden,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            lambda_c: self.lambda_c,
            label_binarize_thresh: self.label_binarize_thresh,
            map_binarize_thresh: self.map_binarize_thresh,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            losses: self.loss_config(),
            schedule: LrSchedule {
                stages: self
                    .learning_rates
                    .iter()
                    .copied()
                    .zip(self.lr_epochs.iter().copied())
                    .collect(),
            },
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn sequence_options(&self) -> SequenceOptions {
        SequenceOptions {
            mode: self.sequence_mode,
            len: self.window_len,
            stride: self.window_stride,
            snippet_interval: self.snippet_interval,
            max_duration: self.max_duration,
            min_inside_fraction: self.window_min_inside,
        }
    }

    pub fn suppression(&self) -> Suppression {
        match self.suppress {
            SuppressKind::None => Suppression::None,
            SuppressKind::Nms => Suppression::Nms {
                theta: self.nms_theta,
            },
            SuppressKind::SoftNms => Suppression::SoftNms(SoftNmsConfig {
                decay: match self.soft_decay {
                    SoftDecayKind::Gaussian => Decay::Gaussian {
                        sigma: self.soft_sigma,
                    },
                    SoftDecayKind::Linear => Decay::Linear {
                        threshold: self.soft_linear_thresh,
                    },
                },
                keep_threshold: self.soft_keep,
                hard_threshold: self.soft_hard_theta,
            }),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        match self.eval_mode {
            EvalMode::Thumos => EvalConfig::thumos(),
            EvalMode::Anet => EvalConfig::anet(),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut s = SynthSpec::new(
            self.synth_videos,
            self.synth_length,
            self.synth_channels,
            self.synth_max_instances,
            self.seed,
        );
        s.fps = self.synth_fps;
        s.snippet_interval = self.snippet_interval;
        s.offset = self.synth_offset;
        s.noise = self.synth_noise;
        s.id_prefix = self.synth_id_prefix.clone();
        s
    }
}

/// `key=value`; the value is read as a TOML value, falling back to a bare
/// string (so `suppress=nms` and `scales=[2,4]` both work).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{s}` is not of the form key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::invalid(format!("override `{s}` has an empty key")));
    }
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
