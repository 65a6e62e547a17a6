use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{Flavor, ModelConfig, NormKind};
use crate::quant::{QuantizedDepthwiseConv, QuantizedLinear};
use crate::tensor::{
    BatchNormParams, Conv2dParams, DepthwiseConvParams, Element, LayerNormParams, LinearParams,
    Tensor,
};

/// One named parameter record.
#[derive(Clone, Debug, PartialEq)]
pub enum Param<E = f32> {
    Linear(LinearParams<E>),
    DepthwiseConv(DepthwiseConvParams<E>),
    Conv2d(Conv2dParams<E>),
    LayerNorm(LayerNormParams<E>),
    BatchNorm(BatchNormParams<E>),
    Embedding(Tensor<E>),
    QuantLinear(QuantizedLinear<E>),
    QuantDepthwiseConv(QuantizedDepthwiseConv<E>),
}

impl<E: Element> Param<E> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Param::Linear(_) => "linear",
            Param::DepthwiseConv(_) => "depthwise_conv",
            Param::Conv2d(_) => "conv2d",
            Param::LayerNorm(_) => "layer_norm",
            Param::BatchNorm(_) => "batch_norm",
            Param::Embedding(_) => "embedding",
            Param::QuantLinear(_) => "quant_linear",
            Param::QuantDepthwiseConv(_) => "quant_depthwise_conv",
        }
    }

    pub fn is_normalization(&self) -> bool {
        matches!(self, Param::LayerNorm(_) | Param::BatchNorm(_))
    }

    /// Number of stored elements, running statistics and int8 weights included.
    pub fn element_count(&self) -> usize {
        match self {
            Param::Linear(p) => p.weight().len() + p.bias().len(),
            Param::DepthwiseConv(p) => p.weight.len() + p.bias.len(),
            Param::Conv2d(p) => p.weight().len() + p.bias().len(),
            Param::LayerNorm(p) => p.gamma.len() + p.beta.len(),
            Param::BatchNorm(p) => 4 * p.gamma.len(),
            Param::Embedding(t) => t.len(),
            Param::QuantLinear(q) => q.q_weight.len() + q.bias.len(),
            Param::QuantDepthwiseConv(q) => q.q_weight.len() + q.bias.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Param::Linear(p) => p.weight().is_finite() && p.bias().is_finite(),
            Param::DepthwiseConv(p) => p.weight.is_finite() && p.bias.is_finite(),
            Param::Conv2d(p) => p.weight().is_finite() && p.bias().is_finite(),
            Param::LayerNorm(p) => p.gamma.is_finite() && p.beta.is_finite(),
            Param::BatchNorm(p) => {
                p.gamma.is_finite()
                    && p.beta.is_finite()
                    && p.running_mean.is_finite()
                    && p.running_var.is_finite()
            }
            Param::Embedding(t) => t.is_finite(),
            Param::QuantLinear(q) => q.bias.is_finite() && q.w_scale.is_finite(),
            Param::QuantDepthwiseConv(q) => q.bias.is_finite() && q.w_scale.is_finite(),
        }
    }

    pub fn cast<F: Element>(&self) -> Param<F> {
        match self {
            Param::Linear(p) => Param::Linear(p.cast()),
            Param::DepthwiseConv(p) => Param::DepthwiseConv(p.cast()),
            Param::Conv2d(p) => Param::Conv2d(p.cast()),
            Param::LayerNorm(p) => Param::LayerNorm(p.cast()),
            Param::BatchNorm(p) => Param::BatchNorm(p.cast()),
            Param::Embedding(t) => Param::Embedding(t.cast()),
            Param::QuantLinear(q) => Param::QuantLinear(q.cast()),
            Param::QuantDepthwiseConv(q) => Param::QuantDepthwiseConv(q.cast()),
        }
    }

    fn matches(&self, shape: &ParamShape) -> bool {
        match (self, shape) {
            (Param::Linear(p), ParamShape::Linear { in_dim, out_dim }) => {
                p.in_dim() == *in_dim && p.out_dim() == *out_dim
            }
            (Param::QuantLinear(q), ParamShape::Linear { in_dim, out_dim }) => {
                q.in_dim == *in_dim && q.out_dim == *out_dim
            }
            (Param::DepthwiseConv(p), ParamShape::DepthwiseConv { channels, kernel }) => {
                p.channels() == *channels && p.kernel_size() == *kernel
            }
            (Param::QuantDepthwiseConv(q), ParamShape::DepthwiseConv { channels, kernel }) => {
                q.channels == *channels && q.kernel == *kernel
            }
            (
                Param::Conv2d(p),
                ParamShape::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
            ) => {
                p.in_channels() == *in_channels
                    && p.out_channels() == *out_channels
                    && p.kernel() == (*kernel, *kernel)
                    && p.stride() == *stride
                    && p.padding() == *padding
            }
            (Param::LayerNorm(p), ParamShape::LayerNorm { dim }) => p.dim() == *dim,
            (Param::BatchNorm(p), ParamShape::BatchNorm { channels }) => p.channels() == *channels,
            (Param::Embedding(t), ParamShape::Embedding { vocab, dim }) => {
                t.shape() == [*vocab, *dim]
            }
            _ => false,
        }
    }
}

/// Expected kind and dimensions of one parameter record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamShape {
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    DepthwiseConv {
        channels: usize,
        kernel: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        dim: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

impl ParamShape {
    /// Element count of a parameter of this shape, matching `Param::element_count`.
    pub fn element_count(&self) -> usize {
        match *self {
            ParamShape::Linear { in_dim, out_dim } => in_dim * out_dim + out_dim,
            ParamShape::DepthwiseConv { channels, kernel } => channels * kernel + channels,
            ParamShape::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * kernel * kernel * in_channels + out_channels,
            ParamShape::LayerNorm { dim } => 2 * dim,
            ParamShape::BatchNorm { channels } => 4 * channels,
            ParamShape::Embedding { vocab, dim } => vocab * dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub path: String,
    pub shape: ParamShape,
}

/// Parameter count of a config without allocating its weights.
pub fn layout_element_count(config: &ModelConfig) -> usize {
    layout(config).iter().map(|s| s.shape.element_count()).sum()
}

/// Parameter records a config demands, in execution order.
pub fn layout(config: &ModelConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut push = |path: String, shape: ParamShape| specs.push(LayerSpec { path, shape });
    let d = config.hidden;
    let flavor = config.flavor;
    let appended_bn = flavor == Flavor::FusionFormer && !config.fused;

    let linear = |push: &mut dyn FnMut(String, ParamShape), path: String, in_dim, out_dim| {
        push(path.clone(), ParamShape::Linear { in_dim, out_dim });
        if appended_bn {
            push(format!("{path}.bn"), ParamShape::BatchNorm { channels: out_dim });
        }
    };
    let norm = |push: &mut dyn FnMut(String, ParamShape), path: String| match flavor.branch_norm() {
        Some(NormKind::Layer) => push(path, ParamShape::LayerNorm { dim: d }),
        Some(NormKind::Batch) => push(path, ParamShape::BatchNorm { channels: d }),
        None => {}
    };
    let ffn = |push: &mut dyn FnMut(String, ParamShape), p: String| {
        norm(push, format!("{p}.norm"));
        linear(push, format!("{p}.linear1"), d, config.ffn_dim);
        linear(push, format!("{p}.linear2"), config.ffn_dim, d);
    };
    let attention = |push: &mut dyn FnMut(String, ParamShape), p: String| {
        norm(push, format!("{p}.norm"));
        for proj in ["linear_q", "linear_k", "linear_v", "linear_out"] {
            linear(push, format!("{p}.{proj}"), d, d);
        }
    };

    push(
        "encoder.subsample.conv1".into(),
        ParamShape::Conv2d {
            in_channels: 1,
            out_channels: d,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    );
    push(
        "encoder.subsample.conv2".into(),
        ParamShape::Conv2d {
            in_channels: d,
            out_channels: d,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    );
    push(
        "encoder.subsample.out".into(),
        ParamShape::Linear {
            in_dim: d * config.subsampled_feat_dim(),
            out_dim: d,
        },
    );

    for b in 0..config.num_encoder_blocks {
        let p = format!("encoder.block{b}");
        ffn(&mut push, format!("{p}.ffn1"));
        attention(&mut push, format!("{p}.mhsa"));

        norm(&mut push, format!("{p}.conv.norm"));
        linear(&mut push, format!("{p}.conv.pointwise1"), d, config.conv_inner_dim());
        push(
            format!("{p}.conv.depthwise"),
            ParamShape::DepthwiseConv {
                channels: d,
                kernel: config.conv_kernel,
            },
        );
        match flavor {
            Flavor::ConformerLn | Flavor::ConformerBn => {
                push(format!("{p}.conv.bn"), ParamShape::BatchNorm { channels: d })
            }
            Flavor::FusionFormer if appended_bn => push(
                format!("{p}.conv.depthwise.bn"),
                ParamShape::BatchNorm { channels: d },
            ),
            _ => {}
        }
        linear(&mut push, format!("{p}.conv.pointwise2"), d, d);

        ffn(&mut push, format!("{p}.ffn2"));
        norm(&mut push, format!("{p}.final_norm"));
    }
    norm(&mut push, "encoder.final_norm".into());

    push(
        "decoder.embed".into(),
        ParamShape::Embedding {
            vocab: config.vocab_size,
            dim: d,
        },
    );
    for b in 0..config.num_decoder_blocks {
        let p = format!("decoder.block{b}");
        attention(&mut push, format!("{p}.self_attn"));
        attention(&mut push, format!("{p}.src_attn"));
        ffn(&mut push, format!("{p}.ffn"));
    }
    norm(&mut push, "decoder.final_norm".into());
    push(
        "decoder.output".into(),
        ParamShape::Linear {
            in_dim: d,
            out_dim: config.vocab_size,
        },
    );

    specs
}

/// Named parameter records of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<E = f32> {
    params: BTreeMap<String, Param<E>>,
}

impl<E: Element> WeightStore<E> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param<E>) -> Option<Param<E>> {
        self.params.insert(path.into(), param)
    }

    pub fn remove(&mut self, path: &str) -> Option<Param<E>> {
        self.params.remove(path)
    }

    pub fn get(&self, path: &str) -> Option<&Param<E>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param<E>> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// Records in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<E>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Param::element_count).sum()
    }

    pub fn cast<F: Element>(&self) -> WeightStore<F> {
        WeightStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that the key set is exactly what `config` demands and every
    /// record has the expected shape and finite values.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let specs = layout(config);
        for spec in &specs {
            let param = self
                .params
                .get(&spec.path)
                .ok_or_else(|| Error::WeightStore(format!("missing `{}`", spec.path)))?;
            if !param.matches(&spec.shape) {
                return Err(Error::WeightStore(format!(
                    "`{}` is a {} that does not match {:?}",
                    spec.path,
                    param.kind_name(),
                    spec.shape
                )));
            }
            if !param.is_finite() {
                return Err(Error::WeightStore(format!("`{}` has non-finite values", spec.path)));
            }
        }
        if self.params.len() != specs.len() {
            let extra = self
                .params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.path == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::WeightStore(format!("unexpected record `{extra}`")));
        }
        Ok(())
    }
}
