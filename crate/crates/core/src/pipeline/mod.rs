//! Dataset preparation, training strategies, the training loop and inference.

mod data;
mod infer;
mod objective;
mod train;
pub mod verify;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{ColorError, Space, AB_RANGE, U_MAX, V_MAX};
use crate::image_io::ImageError;
use crate::losses::LossError;
use crate::tensor::TensorError;
use crate::unet::{UNetConfig, UNetError, UNetWeights};

pub use data::{
    crop_offset, prepare_sample, resize_bilinear, resize_to_min_side, resized_dims, scan_dataset, Batch,
    Dataset, Sample,
};
pub use infer::{colorize, reflect_pad, Colorized};
pub use objective::{objective, predicted_rgb, Perceptual};
pub use train::{train, wall_free_log, LossRecord, StepOutcome, TrainOutcome, Trainer, LOSS_LOG_HEADER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset: no usable color images in {0}")]
    EmptyDataset(PathBuf),
    #[error("non-finite loss at step {step}; state rolled back")]
    NonFiniteLoss { step: u64 },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] UNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Predicts RGB directly; loss in RGB.
    Rgb,
    /// Predicts normalized (U, V); loss on normalized chrominance.
    Yuv,
    /// Predicts normalized (a, b); loss on normalized chrominance.
    Lab,
    /// Predicts normalized (a, b); loss in RGB after differentiable conversion and clipping.
    LabRgb,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Rgb, Strategy::Yuv, Strategy::Lab, Strategy::LabRgb];

    pub fn out_channels(self) -> usize {
        match self {
            Strategy::Rgb => 3,
            _ => 2,
        }
    }

    /// Luminance/chrominance space of the prediction, if any.
    pub fn chroma_space(self) -> Option<Space> {
        match self {
            Strategy::Rgb => None,
            Strategy::Yuv => Some(Space::Yuv),
            Strategy::Lab | Strategy::LabRgb => Some(Space::Lab),
        }
    }

    /// Network units to raw chrominance, per predicted channel.
    pub fn chroma_scale(self) -> Option<[f64; 2]> {
        self.chroma_space().map(|s| match s {
            Space::Yuv => [U_MAX, V_MAX],
            _ => [AB_RANGE, AB_RANGE],
        })
    }

    /// True when the L2 loss compares RGB images.
    pub fn rgb_loss(self) -> bool {
        matches!(self, Strategy::Rgb | Strategy::LabRgb)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rgb => "rgb",
            Strategy::Yuv => "yuv",
            Strategy::Lab => "lab",
            Strategy::LabRgb => "labrgb",
        }
    }

    /// Strategy recorded in a checkpoint; the stored chroma constants must match.
    pub fn from_weights(w: &UNetWeights) -> Result<Self> {
        let tag = w
            .labels
            .get("strategy")
            .ok_or_else(|| PipelineError::Config("checkpoint does not record a strategy".into()))?;
        let s: Strategy = tag.parse()?;
        if w.config().out_channels != s.out_channels() {
            return Err(PipelineError::Config(format!(
                "checkpoint strategy {s} needs {} output channels, network has {}",
                s.out_channels(),
                w.config().out_channels
            )));
        }
        let stored = w.labels.get("chroma_scale").map(String::as_str).unwrap_or("");
        if stored != s.scale_label() {
            return Err(PipelineError::Config(format!(
                "checkpoint chroma scale {stored:?} does not match {:?} for {s}",
                s.scale_label()
            )));
        }
        Ok(s)
    }

    fn scale_label(self) -> String {
        self.chroma_scale().map(|[a, b]| format!("{a:?} {b:?}")).unwrap_or_else(|| "none".into())
    }

    /// Records the strategy and its constants in the checkpoint labels.
    pub fn label(self, w: &mut UNetWeights) {
        w.labels.insert("strategy".into(), self.name().into());
        w.labels.insert("chroma_scale".into(), self.scale_label());
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Strategy::Rgb),
            "yuv" => Ok(Strategy::Yuv),
            "lab" => Ok(Strategy::Lab),
            "labrgb" | "lab-rgb" | "lab_rgb" => Ok(Strategy::LabRgb),
            _ => Err(PipelineError::Config(format!("unknown strategy {s:?} (rgb, yuv, lab, labrgb)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Sum of squared differences in the strategy's loss space.
    L2,
    /// Perceptual feature distance, always on RGB.
    Lpips,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::Lpips => "lpips",
        })
    }
}

impl FromStr for LossKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(LossKind::L2),
            "lpips" => Ok(LossKind::Lpips),
            _ => Err(PipelineError::Config(format!("unknown loss {s:?} (l2, lpips)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Base width 8, 64x64 crops, batch 4, learning rate 1e-3.
    Desk,
    /// Base width 64, 256x256 crops, batch 16, learning rate 2e-5.
    Paper,
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(PipelineError::Config(format!("unknown preset {s:?} (desk, paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub base_width: usize,
    pub steps: u64,
    pub seed: u64,
    /// Directory of training images.
    pub dataset: PathBuf,
    /// Receives the loss log, checkpoints and the resolved configuration.
    pub out_dir: PathBuf,
    /// Checkpoint every this many steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Maximum channel spread for an image to count as grayscale.
    pub gray_tolerance: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let (base_width, crop_size, batch_size, lr, steps, checkpoint_every) = match p {
            Preset::Desk => (8, 64, 4, 1e-3, 2000, 500),
            // one pass over 118k images at batch 16
            Preset::Paper => (64, 256, 16, 2e-5, 7393, 1000),
        };
        Self {
            strategy: Strategy::Lab,
            loss: LossKind::L2,
            lr,
            batch_size,
            crop_size,
            base_width,
            steps,
            seed: 0,
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            checkpoint_every,
            gray_tolerance: crate::colorspace::GRAY_TOLERANCE,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(crate::unet::SIZE_MULTIPLE) {
            return Err(PipelineError::Config(format!(
                "crop_size must be a positive multiple of {}, got {}",
                crate::unet::SIZE_MULTIPLE,
                self.crop_size
            )));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.gray_tolerance.is_nan() || self.gray_tolerance < 0.0 {
            return Err(PipelineError::Config(format!("gray_tolerance must be >= 0, got {}", self.gray_tolerance)));
        }
        self.network().validate()?;
        Ok(())
    }

    pub fn network(&self) -> UNetConfig {
        UNetConfig {
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
            ..UNetConfig::new(self.base_width, self.strategy.out_channels())
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}
