//! Int8 execution path: per-tensor symmetric weight quantization and dynamic
//! per-tensor activation quantization with 32-bit integer accumulation.
//!
//! Quantize after fusing: BatchNorm is already inside the weights and ReLU
//! commutes with the zero clamp, so a fused FusionFormer needs no float
//! activation detours. Swish and GLU still run in float between layers.

use log::warn;

use crate::error::{Error, Result};
use crate::model::{Flavor, Model, Param, WeightStore};
use crate::tensor::{DepthwiseConvParams, Element, Epilogue, LinearParams, Tensor};

/// Largest reduction length whose worst-case sum `127 * 127 * n` fits in i32.
pub const MAX_ACCUMULATION_LEN: usize = 1 << 15;

const QMAX: f32 = 127.0;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear<E = f32> {
    /// `[out_dim, in_dim]`, row-major
    pub q_weight: Vec<i8>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub w_scale: f32,
    pub bias: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedDepthwiseConv<E = f32> {
    /// `[channels, kernel]`, row-major
    pub q_weight: Vec<i8>,
    pub channels: usize,
    pub kernel: usize,
    pub w_scale: f32,
    pub bias: Tensor<E>,
}

impl<E: Element> QuantizedLinear<E> {
    pub fn from_float(p: &LinearParams<E>) -> Result<Self> {
        if p.in_dim() > MAX_ACCUMULATION_LEN {
            return Err(Error::Quantization(format!(
                "in_dim {} exceeds {MAX_ACCUMULATION_LEN}; the i32 accumulator could overflow",
                p.in_dim()
            )));
        }
        let (q_weight, w_scale) = quantize_per_tensor(p.weight())?;
        Ok(Self {
            q_weight,
            out_dim: p.out_dim(),
            in_dim: p.in_dim(),
            w_scale,
            bias: p.bias().clone(),
        })
    }

    pub fn dequantized_weight(&self) -> Tensor<E> {
        Tensor::new(
            vec![self.out_dim, self.in_dim],
            dequantize(&self.q_weight, self.w_scale)
                .into_iter()
                .map(|v| E::from_f64(v as f64))
                .collect(),
        )
        .expect("shape matches q_weight")
    }

    pub fn cast<F: Element>(&self) -> QuantizedLinear<F> {
        QuantizedLinear {
            q_weight: self.q_weight.clone(),
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            w_scale: self.w_scale,
            bias: self.bias.cast(),
        }
    }
}

impl<E: Element> QuantizedDepthwiseConv<E> {
    pub fn from_float(p: &DepthwiseConvParams<E>) -> Result<Self> {
        let (q_weight, w_scale) = quantize_per_tensor(&p.weight)?;
        Ok(Self {
            q_weight,
            channels: p.channels(),
            kernel: p.kernel_size(),
            w_scale,
            bias: p.bias.clone(),
        })
    }

    pub fn cast<F: Element>(&self) -> QuantizedDepthwiseConv<F> {
        QuantizedDepthwiseConv {
            q_weight: self.q_weight.clone(),
            channels: self.channels,
            kernel: self.kernel,
            w_scale: self.w_scale,
            bias: self.bias.cast(),
        }
    }
}

/// `scale = max|w| / 127`, `q = round(w / scale)` clamped to ±127.
/// An all-zero tensor quantizes to zeros with scale 1.
pub fn quantize_per_tensor<E: Element>(w: &Tensor<E>) -> Result<(Vec<i8>, f32)> {
    if !w.is_finite() {
        return Err(Error::Quantization("tensor has non-finite values".into()));
    }
    let max = w
        .data()
        .iter()
        .map(|v| v.as_f64().abs() as f32)
        .fold(0.0f32, f32::max);
    Ok(quantize_with_max(w.data(), max))
}

fn quantize_with_max<E: Element>(data: &[E], max_abs: f32) -> (Vec<i8>, f32) {
    if max_abs == 0.0 {
        return (vec![0; data.len()], 1.0);
    }
    let scale = max_abs / QMAX;
    let q = data
        .iter()
        .map(|&v| ((v.as_f64() as f32) / scale).round().clamp(-QMAX, QMAX) as i8)
        .collect();
    (q, scale)
}

pub fn dequantize(q: &[i8], scale: f32) -> Vec<f32> {
    q.iter().map(|&v| v as f32 * scale).collect()
}

/// Dynamic per-tensor activation quantization.
fn quantize_activation<E: Element>(x: &Tensor<E>) -> (Vec<i8>, f32) {
    let max = x
        .data()
        .iter()
        .map(|v| v.as_f64().abs() as f32)
        .fold(0.0f32, f32::max);
    quantize_with_max(x.data(), max)
}

fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

pub fn int8_linear_forward<E: Element>(x: &Tensor<E>, q: &QuantizedLinear<E>) -> Result<Tensor<E>> {
    int8_linear_forward_with(x, q, Epilogue::None)
}

pub fn int8_linear_forward_with<E: Element>(
    x: &Tensor<E>,
    q: &QuantizedLinear<E>,
    epilogue: Epilogue,
) -> Result<Tensor<E>> {
    let (rows, in_dim) = x.dims2()?;
    if in_dim != q.in_dim {
        return Err(Error::dim(
            "int8_linear_forward",
            format!("input {:?} vs weight [{}, {}]", x.shape(), q.out_dim, q.in_dim),
        ));
    }
    if in_dim > MAX_ACCUMULATION_LEN {
        return Err(Error::Quantization(format!("in_dim {in_dim} exceeds {MAX_ACCUMULATION_LEN}")));
    }
    if !x.is_finite() {
        return Err(Error::Quantization("input has non-finite values".into()));
    }
    let (xq, x_scale) = quantize_activation(x);
    let rescale = E::from_f64(q.w_scale as f64 * x_scale as f64);
    let bias = q.bias.data();
    let mut out = Vec::with_capacity(rows * q.out_dim);
    for t in 0..rows {
        let xr = &xq[t * in_dim..(t + 1) * in_dim];
        for o in 0..q.out_dim {
            let acc = dot_i8(xr, &q.q_weight[o * in_dim..(o + 1) * in_dim]);
            let mut y = E::from_f64(acc as f64) * rescale + bias[o];
            if epilogue == Epilogue::Relu {
                y = y.max(E::zero());
            }
            out.push(y);
        }
    }
    Tensor::new(vec![rows, q.out_dim], out)
}

pub fn int8_depthwise_conv1d_with<E: Element>(
    x: &Tensor<E>,
    q: &QuantizedDepthwiseConv<E>,
    causal: bool,
    epilogue: Epilogue,
) -> Result<Tensor<E>> {
    let (frames, channels) = x.dims2()?;
    if channels != q.channels {
        return Err(Error::dim(
            "int8_depthwise_conv1d",
            format!("input {:?} vs {} channels", x.shape(), q.channels),
        ));
    }
    if !x.is_finite() {
        return Err(Error::Quantization("input has non-finite values".into()));
    }
    let k = q.kernel;
    let pad_left = if causal { k - 1 } else { (k - 1) / 2 };
    let (xq, x_scale) = quantize_activation(x);
    let rescale = E::from_f64(q.w_scale as f64 * x_scale as f64);

    let mut taps = vec![0i32; k * channels];
    for c in 0..channels {
        for j in 0..k {
            taps[j * channels + c] = q.q_weight[c * k + j] as i32;
        }
    }
    let mut acc = vec![0i32; channels];
    let mut out = Vec::with_capacity(frames * channels);
    for t in 0..frames {
        acc.fill(0);
        for j in 0..k {
            let src = t + j;
            if src < pad_left || src - pad_left >= frames {
                continue;
            }
            let s = src - pad_left;
            let tap = &taps[j * channels..(j + 1) * channels];
            let inp = &xq[s * channels..(s + 1) * channels];
            for ((a, &w), &v) in acc.iter_mut().zip(tap).zip(inp) {
                *a += w * v as i32;
            }
        }
        for (c, &a) in acc.iter().enumerate() {
            let mut y = E::from_f64(a as f64) * rescale + q.bias.data()[c];
            if epilogue == Epilogue::Relu {
                y = y.max(E::zero());
            }
            out.push(y);
        }
    }
    Tensor::new(vec![frames, channels], out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantizeReport {
    pub quantized_layers: Vec<String>,
    pub warnings: Vec<String>,
}

/// Quantizes every linear and depthwise-conv layer of a model. Embeddings,
/// the subsampling convolutions and all normalization stay in float.
///
/// An unfused FusionFormer is rejected: its BatchNorms belong inside the
/// weights before quantization. Conformer flavors are accepted with a
/// warning, since their Swish/GLU activations need float detours (or lookup
/// tables in a pure-integer runtime).
pub fn quantize_model(model: &Model<f32>) -> Result<(Model<f32>, QuantizeReport)> {
    let config = &model.config;
    if config.quantized {
        return Err(Error::Quantization("model is already quantized".into()));
    }
    if config.flavor == Flavor::FusionFormer && !config.fused {
        return Err(Error::Quantization(
            "fusionformer model is not fused; run `fuse` first so BatchNorm is folded into the weights"
                .into(),
        ));
    }
    let mut report = QuantizeReport::default();
    if config.flavor != Flavor::FusionFormer {
        let msg = format!(
            "{} uses Swish/GLU activations; under int8 they run as dequantize -> float activation -> requantize (a lookup-table approximation in integer-only runtimes)",
            config.flavor
        );
        warn!("{msg}");
        report.warnings.push(msg);
    }

    let mut weights = WeightStore::new();
    for (path, param) in model.weights.iter() {
        let q = match param {
            Param::Linear(p) => {
                report.quantized_layers.push(path.to_string());
                Param::QuantLinear(QuantizedLinear::from_float(p)?)
            }
            Param::DepthwiseConv(p) => {
                report.quantized_layers.push(path.to_string());
                Param::QuantDepthwiseConv(QuantizedDepthwiseConv::from_float(p)?)
            }
            other => other.clone(),
        };
        weights.insert(path, q);
    }
    let mut config = config.clone();
    config.quantized = true;
    let quantized = Model {
        config,
        weights,
        metadata: model.metadata.clone(),
    };
    quantized.weights.validate(&quantized.config)?;
    Ok((quantized, report))
}
