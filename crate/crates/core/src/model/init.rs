//! Deterministic random initialization.
//!
//! The generator is Xoshiro256++ seeded with `seed_from_u64`. Parameters are
//! drawn in layout (execution) order: weight first, then bias.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::model::weights::{layout, Param, ParamShape, WeightStore};
use crate::model::{Model, ModelConfig};
use crate::tensor::{
    BatchNormParams, Conv2dParams, DepthwiseConvParams, LayerNormParams, LinearParams, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    /// Multiplies the uniform bound of every linear/conv weight and bias.
    pub weight_scale: f32,
}

impl InitOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            weight_scale: 1.0,
        }
    }
}

/// Builds a model with weights and biases ~ U(±1/sqrt(fan_in)), LN gamma 1 /
/// beta 0, BN gamma 1 / beta 0 / mean 0 / var 1 and N(0, 1/dim) embeddings, so the
/// √dim input scaling yields unit variance.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    build_model_with(config, InitOptions::new(seed))
}

pub fn build_model_with(config: ModelConfig, options: InitOptions) -> Result<Model> {
    config.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(options.seed);
    let eps = config.norm_eps;
    let mut store = WeightStore::new();
    for spec in layout(&config) {
        let param = match spec.shape {
            ParamShape::Linear { in_dim, out_dim } => {
                let u = uniform(options.weight_scale, in_dim);
                Param::Linear(LinearParams::new(
                    sample(&mut rng, &[out_dim, in_dim], u),
                    sample(&mut rng, &[out_dim], u),
                )?)
            }
            ParamShape::DepthwiseConv { channels, kernel } => {
                let u = uniform(options.weight_scale, kernel);
                Param::DepthwiseConv(DepthwiseConvParams::new(
                    sample(&mut rng, &[channels, kernel], u),
                    sample(&mut rng, &[channels], u),
                )?)
            }
            ParamShape::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let u = uniform(options.weight_scale, in_channels * kernel * kernel);
                Param::Conv2d(Conv2dParams::new(
                    sample(&mut rng, &[out_channels, kernel, kernel, in_channels], u),
                    sample(&mut rng, &[out_channels], u),
                    stride,
                    padding,
                )?)
            }
            ParamShape::LayerNorm { dim } => Param::LayerNorm(LayerNormParams::identity(dim, eps)),
            ParamShape::BatchNorm { channels } => {
                Param::BatchNorm(BatchNormParams::identity(channels, eps))
            }
            ParamShape::Embedding { vocab, dim } => Param::Embedding(Tensor::from_fn(
                &[vocab, dim],
                |_| rng.sample::<f32, _>(StandardNormal) / (dim as f32).sqrt(),
            )),
        };
        store.insert(spec.path, param);
    }
    Model::new(config, store)
}

fn uniform(scale: f32, fan_in: usize) -> Uniform<f32> {
    let bound = scale / (fan_in as f32).sqrt();
    Uniform::new_inclusive(-bound, bound).expect("finite bound")
}

fn sample(rng: &mut Xoshiro256PlusPlus, shape: &[usize], u: Uniform<f32>) -> Tensor {
    Tensor::from_fn(shape, |_| u.sample(rng))
}

/// Replaces every BatchNorm's affine parameters and running statistics with
/// random, well-conditioned values (gamma in [0.5, 1.5], beta and mean in
/// [-0.5, 0.5], var in [0.5, 2]), as a trained model would carry.
pub fn randomize_batch_norms(model: &mut Model, seed: u64) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for (_, param) in model.weights.iter_mut() {
        if let Param::BatchNorm(bn) = param {
            let c = bn.channels();
            let mut draw = |lo: f32, hi: f32| Tensor::from_fn(&[c], |_| rng.random_range(lo..hi));
            let gamma = draw(0.5, 1.5);
            let beta = draw(-0.5, 0.5);
            let mean = draw(-0.5, 0.5);
            let var = draw(0.5, 2.0);
            *bn = BatchNormParams::new(gamma, beta, mean, var, bn.eps).expect("valid statistics");
        }
    }
}
