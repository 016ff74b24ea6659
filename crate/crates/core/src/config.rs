use serde::{Deserialize, Serialize};

use crate::numerics::Activation;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Gelu,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

/// Architecture of the encoder, decoder and heads, including the ablation
/// switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input, in pixels.
    pub frame_side: usize,
    /// Side of a square patch, in pixels.
    pub patch: usize,
    /// Token width.
    pub width: usize,
    /// Number of ViT layers (and Adaptor blocks).
    pub layers: usize,
    /// Number of training (template) frames.
    pub train_frames: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub decoder_layers: usize,
    /// Gaussian label bandwidth as a fraction of the box's grid-scale size.
    pub sigma_factor: f64,
    pub activation: ActivationKind,
    pub use_jse: bool,
    pub use_adaptor: bool,
    /// Replace the dense-fusion decoder with a plain post-norm decoder
    /// using standard attention and only its last layer.
    pub plain_decoder: bool,
    /// LTRB value (fraction of the frame side) the regression branch emits
    /// at initialization; sets the bias of its last convolution.
    pub reg_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 72×72 input, 9×9 grid, width 64.
    pub fn desk() -> Self {
        Self {
            frame_side: 72,
            patch: 8,
            width: 64,
            layers: 2,
            train_frames: 2,
            heads: 2,
            ffn_ratio: 2,
            decoder_layers: 4,
            sigma_factor: 0.25,
            activation: ActivationKind::Gelu,
            use_jse: true,
            use_adaptor: true,
            plain_decoder: false,
            reg_bias_init: 0.15,
        }
    }

    /// Paper-scale input and width (288×288, 18×18 grid, C = 768, 8 heads)
    /// with a single layer each; only meant for shape checks.
    pub fn paper_scale() -> Self {
        Self {
            frame_side: 288,
            patch: 16,
            width: 768,
            layers: 1,
            train_frames: 2,
            heads: 8,
            ffn_ratio: 4,
            decoder_layers: 1,
            ..Self::desk()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn toy() -> Self {
        Self {
            frame_side: 6,
            patch: 2,
            width: 8,
            layers: 2,
            train_frames: 1,
            heads: 2,
            ffn_ratio: 2,
            decoder_layers: 2,
            ..Self::desk()
        }
    }

    pub fn grid(&self) -> usize {
        self.frame_side.div_ceil(self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn total_tokens(&self) -> usize {
        (self.train_frames + 1) * self.tokens_per_frame()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.frame_side == 0 || self.frame_side % self.patch != 0 {
            return fail(format!(
                "frame side {} must be a positive multiple of patch {}",
                self.frame_side, self.patch
            ));
        }
        if self.layers < 1 || self.train_frames < 1 || self.decoder_layers < 1 {
            return fail("layers, train_frames and decoder_layers must be >= 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.ffn_ratio < 1 {
            return fail("ffn_ratio must be >= 1".into());
        }
        if self.width < 4 {
            return fail("width must be >= 4 for the head channel plan".into());
        }
        if !(self.sigma_factor > 0.0) {
            return fail("sigma_factor must be > 0".into());
        }
        Ok(())
    }
}
