use std::sync::Mutex;

use fusionformer::fusion::fuse_model;
use fusionformer::model::{randomize_batch_norms, Category, RunContext};
use fusionformer::profiler::{
    bench_rtf, count_flops, count_params, measure_latency, profile, run_utterance, synthetic_features,
    synthetic_tokens, utterance_frames, BenchOptions,
};
use fusionformer::{build_model, DecodingConfig, Flavor, Model, ModelConfig};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

// One core: timing tests must not overlap each other.
static CLOCK: Mutex<()> = Mutex::new(());

fn decoding(name: &str) -> DecodingConfig {
    name.parse().unwrap()
}

fn medium(flavor: Flavor) -> ModelConfig {
    ModelConfig {
        ffn_dim: 512,
        vocab_size: 500,
        ..ModelConfig::new(flavor, 4, 2, 128, 4)
    }
}

#[test]
fn chunked_attention_costs_less_than_full_context() {
    let config = ModelConfig::base(Flavor::ConformerLn);
    for frames in [400, 1000, 2000] {
        let t = config.subsampled_frames(frames);
        assert!(t > 80);
        let chunked = count_flops(&config, frames, &decoding("1st-s-16-4")).unwrap();
        let full = count_flops(&config, frames, &decoding("1st-ns-inf-inf")).unwrap();
        assert!(chunked[Category::SelfAttention] < full[Category::SelfAttention], "T={t}");
        assert_eq!(chunked[Category::FeedForward], full[Category::FeedForward]);
    }
    // At or below 80 frames a 16x(4+1) window already covers everything.
    let a = count_flops(&config, 320, &decoding("1st-s-16-4")).unwrap();
    let b = count_flops(&config, 320, &decoding("1st-s-16-inf")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn analytic_flops_match_the_runtime_counters() {
    for flavor in [Flavor::ConformerLn, Flavor::FusionFormer] {
        for name in ["1st-s-16-4", "2nd-ns-inf-inf"] {
            let m = build_model(ModelConfig::tiny(flavor), 0).unwrap();
            let d = decoding(name);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
            let x = synthetic_features::<f32>(&mut rng, 300, 16);
            let toks = synthetic_tokens(&mut rng, m.config.decoder_tokens(300), m.config.vocab_size);
            let mut ctx = RunContext::new().with_counters();
            run_utterance(&m, &x, &toks, &d, &mut ctx).unwrap();
            let counted = *ctx.flops().unwrap();
            let analytic = count_flops(&m.config, 300, &d).unwrap();
            assert_eq!(counted, analytic, "{flavor} {name}");
        }
    }
}

#[test]
fn parameter_partition_is_exact() {
    for flavor in [Flavor::ConformerLn, Flavor::ConformerBn, Flavor::ConformerNoNorm, Flavor::FusionFormer] {
        let m = build_model(ModelConfig::tiny(flavor), 0).unwrap();
        assert_eq!(count_params(&m).total() as usize, m.param_count());
    }
    let m = build_model(ModelConfig::tiny(Flavor::ConformerNoNorm), 0).unwrap();
    assert_eq!(count_params(&m)[Category::Normalization], 0);
}

#[test]
fn latency_shares_sum_to_one_and_fused_norm_costs_nothing() {
    let _g = CLOCK.lock().unwrap_or_else(|e| e.into_inner());
    let m = build_model(medium(Flavor::FusionFormer), 0).unwrap();
    let d = decoding("2nd-s-16-inf");
    let report = profile(&m, 400, &d, 3, 0).unwrap();
    let sum: f64 = report.categories.iter().map(|c| c.latency_share).sum();
    assert!((sum - 1.0).abs() < 1e-9, "{sum}");
    let params: f64 = report.categories.iter().map(|c| c.params_share).sum();
    let flops: f64 = report.categories.iter().map(|c| c.flops_share).sum();
    assert!((params - 1.0).abs() < 1e-9 && (flops - 1.0).abs() < 1e-9);
    assert!(report.share(Category::Normalization).latency_ns > 0);

    let (fused, _) = fuse_model(&m).unwrap();
    let lat = measure_latency(&fused, 400, &d, 3, 0).unwrap();
    assert_eq!(lat.per_category[Category::Normalization], 0);
    assert_eq!(lat.per_category[Category::Activation], 0);
    let json: serde_json::Value = serde_json::from_str(&profile(&fused, 400, &d, 3, 0).unwrap().to_json()).unwrap();
    assert_eq!(json["categories"].as_array().unwrap().len(), 6);
}

#[test]
fn rtf_is_decode_time_over_audio_time() {
    let _g = CLOCK.lock().unwrap_or_else(|e| e.into_inner());
    let m = build_model(ModelConfig::tiny(Flavor::ConformerLn), 0).unwrap();
    let r = bench_rtf(
        &m,
        &decoding("2nd-s-16-inf"),
        BenchOptions {
            audio_seconds: 12.0,
            repeats: 3,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(r.runs.len(), 3);
    assert!((r.rtf - r.decode_seconds / r.audio_seconds).abs() < 1e-15);
    let mut runs = r.runs.clone();
    runs.sort_by(f64::total_cmp);
    assert_eq!(r.decode_seconds, runs[1]);
    assert_eq!(r.threads, 1);
    let frames: usize = utterance_frames(12.0, 1).iter().sum();
    assert_eq!(r.audio_seconds, frames as f64 / 100.0);
}

#[test]
fn utterances_cover_the_requested_audio() {
    let lens = utterance_frames(60.0, 3);
    assert_eq!(lens.iter().sum::<usize>(), 6000);
    assert!(lens[..lens.len() - 1].iter().all(|&n| (200..1000).contains(&n)));
    assert_eq!(lens, utterance_frames(60.0, 3));
}

/// Five single-pass RTFs per model, alternating between the two so that
/// host speed drift hits both alike.
fn alternating_rtf(a: &Model, b: &Model) -> (f64, f64) {
    let opts = BenchOptions {
        audio_seconds: 20.0,
        repeats: 1,
        seed: 0,
    };
    let d = decoding("2nd-s-16-inf");
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        ra.push(bench_rtf(a, &d, opts).unwrap().rtf);
        rb.push(bench_rtf(b, &d, opts).unwrap().rtf);
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[2]
    };
    (median(ra), median(rb))
}

#[test]
fn fusion_speeds_decoding_up() {
    let _g = CLOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut m = build_model(medium(Flavor::FusionFormer), 0).unwrap();
    randomize_batch_norms(&mut m, 1);
    let (fused, _) = fuse_model(&m).unwrap();
    let (unfused, fused) = alternating_rtf(&m, &fused);
    assert!(fused < unfused, "fused {fused} unfused {unfused}");
}

#[test]
fn median_rtf_is_stable() {
    let _g = CLOCK.lock().unwrap_or_else(|e| e.into_inner());
    let m = build_model(medium(Flavor::ConformerLn), 0).unwrap();
    let (a, b) = alternating_rtf(&m, &m);
    assert!((a - b).abs() / a.min(b) < 0.10, "{a} vs {b}");
}
