use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::neuron::{SpikeFn, DEFAULT_ALPHA, DEFAULT_LEAK, DEFAULT_THRESHOLD};

/// How the decoder doubles spatial resolution before each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Nearest-neighbour 2x repetition followed by a 3x3 convolution.
    #[default]
    NearestConv3x3,
    /// 2x2 stride-2 transposed convolution.
    TransposedConv2x2,
}

/// How encoder features are merged into the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Channel concatenation; keeps merged maps binary.
    #[default]
    Concat,
    /// Elementwise addition (ablation only; merged maps can reach 2).
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input polarity channels.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Feature width per depth level, shallowest first. Its length is the depth.
    pub base_widths: Vec<usize>,
    /// `[height, width]`.
    pub input_size: [usize; 2],
    pub timesteps: usize,
    pub surrogate_alpha: f64,
    pub threshold: f64,
    /// Initial leak factor of every spiking layer.
    pub leak_init: f64,
    pub upsampling: Upsampling,
    pub skip: SkipMode,
    /// Forward spike function; anything but the default is for gradient checks.
    pub spike: SpikeFn,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            num_classes: 6,
            base_widths: vec![64, 128, 256, 512],
            input_size: [64, 64],
            timesteps: 20,
            surrogate_alpha: DEFAULT_ALPHA,
            threshold: DEFAULT_THRESHOLD,
            leak_init: DEFAULT_LEAK,
            upsampling: Upsampling::default(),
            skip: SkipMode::default(),
            spike: SpikeFn::default(),
        }
    }
}

impl ModelConfig {
    /// Default config truncated to `depth` levels of doubling widths from 64.
    pub fn with_depth(depth: usize) -> Self {
        Self {
            base_widths: (0..depth).map(|l| 64 << l).collect(),
            ..Self::default()
        }
    }

    /// Two-level-lighter variant with widths 64/128/256.
    pub fn reduced() -> Self {
        Self::with_depth(3)
    }

    pub fn depth(&self) -> usize {
        self.base_widths.len()
    }

    pub fn height(&self) -> usize {
        self.input_size[0]
    }

    pub fn width(&self) -> usize {
        self.input_size[1]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.base_widths.is_empty() || self.base_widths.contains(&0) {
            return bad(format!("base_widths must be non-empty and positive, got {:?}", self.base_widths));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.timesteps == 0 {
            return bad("in_channels, num_classes and timesteps must be positive".into());
        }
        if self.num_classes > 255 {
            return bad(format!("at most 255 classes supported, got {}", self.num_classes));
        }
        let div = 1usize << (self.depth() - 1);
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return bad(format!("input size {h}x{w} must be divisible by {div} for depth {}", self.depth()));
        }
        if !(self.surrogate_alpha > 0.0) || !(self.threshold > 0.0) {
            return bad("surrogate_alpha and threshold must be positive".into());
        }
        if !(self.leak_init > 0.0 && self.leak_init < 1.0) {
            return bad(format!("leak_init must lie in (0, 1), got {}", self.leak_init));
        }
        Ok(())
    }
}
