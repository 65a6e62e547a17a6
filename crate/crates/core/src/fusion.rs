//! BatchNorm folding and ReLU epilogue fusion for FusionFormer models.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layout, Flavor, Model, Param, WeightStore};
use crate::streaming::ChunkWindow;
use crate::tensor::{BatchNormParams, DepthwiseConvParams, Element, LinearParams, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldedBn {
    pub bn: String,
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedRelu {
    pub relu: String,
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedNode {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub folded: Vec<FoldedBn>,
    pub epilogues: Vec<FusedRelu>,
    pub skipped: Vec<SkippedNode>,
    /// Largest |fused - unfused| output element seen during verification;
    /// 0 until a verification run fills it in.
    pub max_residual: f64,
}

impl FusionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-channel `scale = gamma / sqrt(var + eps)` computed in f64.
fn bn_scale<E: Element>(bn: &BatchNormParams<E>) -> Vec<f64> {
    bn.gamma
        .data()
        .iter()
        .zip(bn.running_var.data())
        .map(|(&g, &v)| g.as_f64() / (v.as_f64() + bn.eps).sqrt())
        .collect()
}

/// Folded bias `(b - mean) * scale + beta`.
fn folded_bias<E: Element>(bias: &Tensor<E>, bn: &BatchNormParams<E>, scale: &[f64]) -> Tensor<E> {
    Tensor::from_fn(&[bias.len()], |o| {
        let b = bias.data()[o].as_f64();
        let mean = bn.running_mean.data()[o].as_f64();
        E::from_f64((b - mean) * scale[o] + bn.beta.data()[o].as_f64())
    })
}

/// Folds an inference-mode BN into the linear layer that feeds it:
/// `W'[o, :] = W[o, :] * s[o]`, `b'[o] = (b[o] - mean[o]) * s[o] + beta[o]`.
pub fn fold_bn_into_linear<E: Element>(p: &LinearParams<E>, bn: &BatchNormParams<E>) -> Result<LinearParams<E>> {
    if bn.channels() != p.out_dim() {
        return Err(Error::dim(
            "fold_bn_into_linear",
            format!("bn over {} channels vs linear out_dim {}", bn.channels(), p.out_dim()),
        ));
    }
    let scale = bn_scale(bn);
    let in_dim = p.in_dim();
    let weight = Tensor::from_fn(p.weight().shape(), |idx| {
        E::from_f64(p.weight().data()[idx].as_f64() * scale[idx / in_dim])
    });
    LinearParams::new(weight, folded_bias(p.bias(), bn, &scale))
}

/// Same algebra as [`fold_bn_into_linear`], one kernel row per channel.
pub fn fold_bn_into_depthwise_conv<E: Element>(
    p: &DepthwiseConvParams<E>,
    bn: &BatchNormParams<E>,
) -> Result<DepthwiseConvParams<E>> {
    if bn.channels() != p.channels() {
        return Err(Error::dim(
            "fold_bn_into_depthwise_conv",
            format!("bn over {} channels vs conv over {}", bn.channels(), p.channels()),
        ));
    }
    let scale = bn_scale(bn);
    let k = p.kernel_size();
    let weight = Tensor::from_fn(p.weight.shape(), |idx| {
        E::from_f64(p.weight.data()[idx].as_f64() * scale[idx / k])
    });
    DepthwiseConvParams::new(weight, folded_bias(&p.bias, bn, &scale))
}

/// Layers followed by a ReLU in FusionFormer blocks.
fn has_relu(path: &str) -> bool {
    path.ends_with(".linear1") || path.ends_with(".pointwise1") || path.ends_with(".depthwise")
}

/// Folds every appended BN of a FusionFormer into its producer and turns each
/// ReLU into an epilogue of the layer before it. The result has no standalone
/// normalization or activation op left in any block.
pub fn fuse_model<E: Element>(model: &Model<E>) -> Result<(Model<E>, FusionReport)> {
    let config = &model.config;
    let fail = |reason: &str| Error::Fusion {
        flavor: config.flavor.to_string(),
        reason: reason.to_string(),
    };
    match config.flavor {
        Flavor::FusionFormer => {}
        Flavor::ConformerLn => {
            return Err(fail(
                "LayerNorm requires runtime statistics (per-row mean and variance) and cannot be folded into weights",
            ))
        }
        Flavor::ConformerBn | Flavor::ConformerNoNorm => {
            return Err(fail("only fusionformer places a BatchNorm directly after each producer layer"))
        }
    }
    if config.fused {
        return Err(fail("model is already fused; no BatchNorm is left to fold"));
    }
    if config.quantized {
        return Err(fail("quantized weights cannot absorb a BatchNorm; fuse before quantizing"));
    }

    let mut report = FusionReport::default();
    let mut weights: WeightStore<E> = WeightStore::new();
    let mut pending: Vec<String> = Vec::new();
    for spec in layout(config) {
        let param = model
            .weights
            .get(&spec.path)
            .ok_or_else(|| Error::WeightStore(format!("missing `{}`", spec.path)))?;
        let Some(producer) = spec.path.strip_suffix(".bn") else {
            weights.insert(spec.path.clone(), param.clone());
            if has_relu(&spec.path) && spec.path.contains(".block") {
                pending.push(spec.path);
            }
            continue;
        };
        let Param::BatchNorm(bn) = param else {
            return Err(Error::WeightStore(format!("`{}` is not a batch norm", spec.path)));
        };
        let folded = match weights.get(producer) {
            Some(Param::Linear(p)) => Param::Linear(fold_bn_into_linear(p, bn)?),
            Some(Param::DepthwiseConv(p)) => Param::DepthwiseConv(fold_bn_into_depthwise_conv(p, bn)?),
            _ => {
                report.skipped.push(SkippedNode {
                    path: spec.path.clone(),
                    reason: format!("`{producer}` is not a float linear or depthwise conv"),
                });
                continue;
            }
        };
        weights.insert(producer, folded);
        report.folded.push(FoldedBn {
            bn: spec.path.clone(),
            layer: producer.to_string(),
        });
    }
    report.epilogues = pending
        .into_iter()
        .map(|layer| FusedRelu {
            relu: format!("{layer}.relu"),
            layer,
        })
        .collect();
    if !report.skipped.is_empty() {
        return Err(fail(&format!(
            "{} BatchNorm(s) could not be folded, first: {}",
            report.skipped.len(),
            report.skipped[0].reason
        )));
    }

    let mut fused_config = config.clone();
    fused_config.fused = true;
    let mut fused = Model::new(fused_config, weights)?;
    fused.metadata = model.metadata.clone();
    Ok((fused, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub frames: usize,
    pub seed: u64,
    pub window: ChunkWindow,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            frames: 64,
            seed: 0,
            window: ChunkWindow::FULL,
        }
    }
}

/// Runs both models on the same Gaussian feature sequences (and the same
/// random decoder tokens) and returns the largest elementwise difference
/// over encoder outputs and decoder logits.
pub fn verify_equivalence<E: Element>(a: &Model<E>, b: &Model<E>, opts: VerifyOptions) -> Result<f64> {
    let (ca, cb) = (&a.config, &b.config);
    let shape = |c: &crate::model::ModelConfig| {
        (c.input_feat_dim, c.hidden, c.vocab_size, c.num_encoder_blocks, c.num_decoder_blocks)
    };
    if shape(ca) != shape(cb) {
        return Err(Error::dim(
            "verify_equivalence",
            format!("model shapes differ: {:?} vs {:?}", shape(ca), shape(cb)),
        ));
    }
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let tokens = ca.decoder_tokens(opts.frames);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let x: Tensor<E> = Tensor::from_fn(&[opts.frames, ca.input_feat_dim], |_| {
            E::from_f64(StandardNormal.sample(&mut rng))
        });
        let toks: Vec<usize> = (0..tokens)
            .map(|_| rand::Rng::random_range(&mut rng, 0..ca.vocab_size))
            .collect();
        let ea = a.encoder_forward(&x, opts.window)?;
        let eb = b.encoder_forward(&x, opts.window)?;
        worst = worst.max(ea.max_abs_diff(&eb)?);
        let la = a.decoder_forward(&toks, &ea)?;
        let lb = b.decoder_forward(&toks, &eb)?;
        worst = worst.max(la.max_abs_diff(&lb)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batch_norm_inference, depthwise_conv1d, linear_forward};
    use rand::Rng;

    fn bn(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BatchNormParams<f64> {
        let t = |v| Tensor::vector(vec![v]).unwrap();
        BatchNormParams::new(t(gamma), t(beta), t(mean), t(var), eps).unwrap()
    }

    #[test]
    fn scalar_hand_folds() {
        let p = LinearParams::new(Tensor::from_rows(&[vec![1.0]]).unwrap(), Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let f = fold_bn_into_linear(&p, &bn(2.0, 1.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(f.weight().data(), &[2.0]);
        assert_eq!(f.bias().data(), &[1.0]);

        let c = DepthwiseConvParams::new(Tensor::from_rows(&[vec![3.0]]).unwrap(), Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let f = fold_bn_into_depthwise_conv(&c, &bn(2.0, 0.0, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(f.weight.data(), &[6.0]);
        assert_eq!(f.bias.data(), &[-2.0]);
    }

    #[test]
    fn identity_bn_leaves_params_bitwise_unchanged() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let p = LinearParams::new(
            Tensor::<f32>::from_fn(&[6, 5], |_| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(&[6], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        assert_eq!(fold_bn_into_linear(&p, &BatchNormParams::identity(6, 0.0)).unwrap(), p);
        let c = DepthwiseConvParams::new(
            Tensor::<f32>::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        assert_eq!(fold_bn_into_depthwise_conv(&c, &BatchNormParams::identity(4, 0.0)).unwrap(), c);
    }

    fn random_bn(rng: &mut Xoshiro256PlusPlus, c: usize) -> BatchNormParams<f64> {
        let mut t = |lo: f64, hi: f64| Tensor::from_fn(&[c], |_| rng.random_range(lo..hi));
        BatchNormParams::new(t(-2.0, 2.0), t(-1.0, 1.0), t(-1.0, 1.0), t(0.01, 3.0), 1e-5).unwrap()
    }

    #[test]
    fn linear_composition_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        for _ in 0..100 {
            let (i, o, t) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..6));
            let p = LinearParams::new(
                Tensor::from_fn(&[o, i], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[o], |_| rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            let b = random_bn(&mut rng, o);
            let x = Tensor::from_fn(&[t, i], |_| rng.random_range(-3.0..3.0));
            let fused = linear_forward(&x, &fold_bn_into_linear(&p, &b).unwrap()).unwrap();
            let reference = batch_norm_inference(&linear_forward(&x, &p).unwrap(), &b).unwrap();
            assert!(fused.max_abs_diff(&reference).unwrap() < 1e-9);
        }
    }

    #[test]
    fn depthwise_composition_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..100 {
            let (c, k, t) = (rng.random_range(1..8), 2 * rng.random_range(0..4) + 1, rng.random_range(1..10));
            let p = DepthwiseConvParams::new(
                Tensor::from_fn(&[c, k], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[c], |_| rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            let b = random_bn(&mut rng, c);
            let x = Tensor::from_fn(&[t, c], |_| rng.random_range(-3.0..3.0));
            let causal = rng.random_bool(0.5);
            let fused = depthwise_conv1d(&x, &fold_bn_into_depthwise_conv(&p, &b).unwrap(), causal).unwrap();
            let reference = batch_norm_inference(&depthwise_conv1d(&x, &p, causal).unwrap(), &b).unwrap();
            assert!(fused.max_abs_diff(&reference).unwrap() < 1e-9);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let p = LinearParams::<f64>::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])).unwrap();
        assert!(fold_bn_into_linear(&p, &BatchNormParams::identity(3, 1e-5)).is_err());
    }
}
