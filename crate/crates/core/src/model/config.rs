use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DEFAULT_EPS;

/// Normalization/activation arrangement of the encoder and decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Pre-LN on every residual branch plus a final LN; Swish/GLU activations.
    ConformerLn,
    /// BatchNorm in exactly the places the LN flavor puts LayerNorm.
    ConformerBn,
    /// All normalization removed, including the convolution-module BN.
    #[serde(rename = "conformer_nonorm")]
    ConformerNoNorm,
    /// No residual-branch normalization; BN after every linear/conv layer
    /// and ReLU wherever the baseline had an activation.
    #[serde(rename = "fusionformer")]
    FusionFormer,
}

impl Flavor {
    pub const ALL: [Flavor; 4] = [
        Flavor::ConformerLn,
        Flavor::ConformerBn,
        Flavor::ConformerNoNorm,
        Flavor::FusionFormer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::ConformerLn => "conformer_ln",
            Flavor::ConformerBn => "conformer_bn",
            Flavor::ConformerNoNorm => "conformer_nonorm",
            Flavor::FusionFormer => "fusionformer",
        }
    }

    /// Normalization placed on residual branches (Conformer family only).
    pub(crate) fn branch_norm(self) -> Option<NormKind> {
        match self {
            Flavor::ConformerLn => Some(NormKind::Layer),
            Flavor::ConformerBn => Some(NormKind::Batch),
            Flavor::ConformerNoNorm | Flavor::FusionFormer => None,
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parse {
                input: s.to_string(),
                position: 0,
                message: "expected conformer_ln, conformer_bn, conformer_nonorm or fusionformer"
                    .into(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormKind {
    Layer,
    Batch,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flavor: Flavor,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub input_feat_dim: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Left-padded depthwise convolution, as used for streaming models.
    #[serde(default = "default_true")]
    pub causal_conv: bool,
    /// BatchNorm folded into producers and ReLU run as kernel epilogues.
    #[serde(default)]
    pub fused: bool,
    /// Linear and depthwise-conv weights stored as int8.
    #[serde(default)]
    pub quantized: bool,
}

pub const DEFAULT_FFN_DIM: usize = 2048;
pub const DEFAULT_CONV_KERNEL: usize = 15;
pub const DEFAULT_VOCAB: usize = 4233;
pub const DEFAULT_FEAT_DIM: usize = 80;
pub const FRAMES_PER_SECOND: f64 = 100.0;

impl ModelConfig {
    pub fn new(
        flavor: Flavor,
        num_encoder_blocks: usize,
        num_decoder_blocks: usize,
        hidden: usize,
        heads: usize,
    ) -> Self {
        Self {
            flavor,
            num_encoder_blocks,
            num_decoder_blocks,
            hidden,
            heads,
            ffn_dim: DEFAULT_FFN_DIM,
            conv_kernel: DEFAULT_CONV_KERNEL,
            vocab_size: DEFAULT_VOCAB,
            input_feat_dim: DEFAULT_FEAT_DIM,
            norm_eps: DEFAULT_EPS,
            causal_conv: true,
            fused: false,
            quantized: false,
        }
    }

    /// 12 encoder blocks, 6 decoder blocks, hidden 256, 4 heads.
    pub fn base(flavor: Flavor) -> Self {
        Self::new(flavor, 12, 6, 256, 4)
    }

    /// 16 encoder blocks, 6 decoder blocks, hidden 384, 6 heads.
    pub fn large(flavor: Flavor) -> Self {
        Self::new(flavor, 16, 6, 384, 6)
    }

    /// A small config for tests and examples.
    pub fn tiny(flavor: Flavor) -> Self {
        Self {
            ffn_dim: 64,
            conv_kernel: 5,
            vocab_size: 50,
            input_feat_dim: 16,
            ..Self::new(flavor, 2, 2, 32, 4)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.input_feat_dim == 0 {
            return bad("vocab_size, ffn_dim and input_feat_dim must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps {} must be positive", self.norm_eps));
        }
        if self.fused && self.flavor != Flavor::FusionFormer {
            return bad(format!("only fusionformer models can be fused, not {}", self.flavor));
        }
        Ok(())
    }

    /// Width of the first pointwise projection in the convolution module:
    /// doubled ahead of a GLU, unchanged ahead of a ReLU.
    pub fn conv_inner_dim(&self) -> usize {
        match self.flavor {
            Flavor::FusionFormer => self.hidden,
            _ => 2 * self.hidden,
        }
    }

    /// Frequency bins left after the two stride-2 subsampling convolutions.
    pub fn subsampled_feat_dim(&self) -> usize {
        subsampled_len(subsampled_len(self.input_feat_dim))
    }

    /// Encoder frames produced from `frames` input frames.
    pub fn subsampled_frames(&self, frames: usize) -> usize {
        subsampled_len(subsampled_len(frames))
    }

    /// Token count used for the decoder pass over an utterance of `frames`
    /// input frames (roughly three tokens per second of audio).
    pub fn decoder_tokens(&self, frames: usize) -> usize {
        (frames / 32).max(1)
    }
}

/// Output length of a kernel-3, stride-2, padding-1 convolution.
pub(crate) fn subsampled_len(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}
