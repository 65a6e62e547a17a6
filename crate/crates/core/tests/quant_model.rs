mod common;

use fusionformer::fusion::fuse_model;
use fusionformer::model::{Category, Param, RunContext};
use fusionformer::quant::{dequantize, quantize_model, quantize_per_tensor};
use fusionformer::streaming::ChunkWindow;
use fusionformer::{build_model, Error, Flavor, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn features(frames: usize, feat: usize) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    Tensor::from_fn(&[frames, feat], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn int8_encoder_tracks_float() {
    let m = build_model(ModelConfig::tiny(Flavor::FusionFormer), 0).unwrap();
    let (fused, _) = fuse_model(&m).unwrap();
    let (q, report) = quantize_model(&fused).unwrap();
    assert!(report.warnings.is_empty());
    assert!(report.quantized_layers.iter().any(|p| p == "encoder.subsample.out"));
    let x = features(64, 16);
    let a = fused.encoder_forward(&x, ChunkWindow::FULL).unwrap();
    let b = q.encoder_forward(&x, ChunkWindow::FULL).unwrap();
    let cos = common::cosine(a.data(), b.data());
    assert!(cos > 0.99, "{cos}");
    assert_ne!(a, b);
}

#[test]
fn quantized_fused_model_runs_no_standalone_norm_or_activation() {
    let (fused, _) = fuse_model(&build_model(ModelConfig::tiny(Flavor::FusionFormer), 0).unwrap()).unwrap();
    let (q, _) = quantize_model(&fused).unwrap();
    let mut ctx = RunContext::new().with_counters();
    let enc = q.encoder_forward_with(&features(48, 16), ChunkWindow::FULL, &mut ctx).unwrap();
    q.decoder_forward_with(&[1, 2], &enc, &mut ctx).unwrap();
    let ops = ctx.ops().unwrap();
    assert_eq!((ops[Category::Normalization], ops[Category::Activation]), (0, 0));
    assert!(q.weights.iter().all(|(_, p)| !matches!(p, Param::Linear(_) | Param::DepthwiseConv(_))));
}

#[test]
fn conformer_quantization_warns_about_swish() {
    let m = build_model(ModelConfig::tiny(Flavor::ConformerLn), 0).unwrap();
    let (q, report) = quantize_model(&m).unwrap();
    assert_eq!(report.warnings.len(), 1);
    assert!(report.warnings[0].contains("Swish"));
    let x = features(40, 16);
    let cos = common::cosine(
        m.encoder_forward(&x, ChunkWindow::FULL).unwrap().data(),
        q.encoder_forward(&x, ChunkWindow::FULL).unwrap().data(),
    );
    assert!(cos > 0.95, "{cos}");
}

#[test]
fn unfused_or_requantized_models_are_rejected() {
    let m = build_model(ModelConfig::tiny(Flavor::FusionFormer), 0).unwrap();
    assert!(matches!(quantize_model(&m), Err(Error::Quantization(_))));
    let (q, _) = quantize_model(&fuse_model(&m).unwrap().0).unwrap();
    assert!(quantize_model(&q).is_err());
}

#[test]
fn round_trip_error_stays_within_half_a_step() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
    for _ in 0..1000 {
        let n = rng.random_range(1..256);
        let amp = 10f32.powf(rng.random_range(-4.0..4.0));
        let w = Tensor::from_fn(&[n], |_| rng.random_range(-amp..=amp));
        let (q, scale) = quantize_per_tensor(&w).unwrap();
        let back = dequantize(&q, scale);
        for (a, b) in w.data().iter().zip(&back) {
            assert!((a - b).abs() <= scale / 2.0 * (1.0 + 1e-6), "{a} {b} {scale}");
        }
    }
}
