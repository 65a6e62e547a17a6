//! Conformer and FusionFormer encoder/decoder models.
//!
//! Parameter paths follow the execution structure, e.g.
//! `encoder.block3.ffn1.linear1`, `encoder.block0.conv.depthwise.bn`,
//! `decoder.block1.src_attn.linear_q`.

mod config;
mod context;
mod forward;
mod init;
mod weights;

use std::collections::BTreeMap;

pub use config::{
    Flavor, ModelConfig, DEFAULT_CONV_KERNEL, DEFAULT_FEAT_DIM, DEFAULT_FFN_DIM, DEFAULT_VOCAB,
    FRAMES_PER_SECOND,
};
pub use context::{Category, PerCategory, RunContext, TraceEntry};
pub use forward::{group_traces, BlockTrace, MIN_INPUT_FRAMES};
pub use init::{build_model, build_model_with, randomize_batch_norms, InitOptions};
pub use weights::{layout, layout_element_count, LayerSpec, Param, ParamShape, WeightStore};

pub(crate) use config::subsampled_len;
pub(crate) use forward::{attention_core_flops, AttnWindow};

use crate::error::Result;
use crate::tensor::Element;

/// A config with its weights. Construction validates that the weights are
/// exactly what the config demands.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<E = f32> {
    pub config: ModelConfig,
    pub weights: WeightStore<E>,
    /// Extra header entries carried through save/load untouched.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<E: Element> Model<E> {
    pub fn new(config: ModelConfig, weights: WeightStore<E>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights,
            metadata: BTreeMap::new(),
        })
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.element_count()
    }
}
