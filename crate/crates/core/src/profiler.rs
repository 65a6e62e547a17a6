//! Per-category parameter, FLOP and latency breakdowns and real-time-factor
//! benchmarks.
//!
//! FLOP convention: one multiply-add is 2 FLOPs; LayerNorm costs 8 per
//! element, inference BatchNorm 2, ReLU 1, Swish and GLU 4 per output
//! element, a residual add 1 (2 when scaled); attention counts QKᵀ and AV
//! over allowed (query, key) pairs only, plus 1 (scale) + 5 (softmax) per pair
//! and head.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    attention_core_flops, subsampled_len, AttnWindow, Category, Flavor, Model, ModelConfig, Param,
    PerCategory, RunContext, FRAMES_PER_SECOND, MIN_INPUT_FRAMES,
};
use crate::streaming::DecodingConfig;
use crate::tensor::{Element, Tensor};

/// Category owning a parameter record: normalization by kind, otherwise by
/// the module the path belongs to.
pub fn param_category<E: Element>(path: &str, param: &Param<E>) -> Category {
    if param.is_normalization() {
        Category::Normalization
    } else if path.contains(".ffn") {
        Category::FeedForward
    } else if path.contains(".mhsa.") || path.contains(".self_attn.") || path.contains(".src_attn.") {
        Category::SelfAttention
    } else if path.contains(".conv.") {
        Category::Convolution
    } else {
        Category::Other
    }
}

pub fn count_params<E: Element>(model: &Model<E>) -> PerCategory<u64> {
    let mut counts = PerCategory::default();
    for (path, param) in model.weights.iter() {
        counts[param_category(path, param)] += param.element_count() as u64;
    }
    counts
}

/// Analytic FLOP count for one utterance of `frames` input frames. The
/// decoder is included for second-pass configurations, over
/// `config.decoder_tokens(frames)` tokens.
pub fn count_flops(config: &ModelConfig, frames: usize, decoding: &DecodingConfig) -> Result<PerCategory<u64>> {
    if frames < MIN_INPUT_FRAMES {
        return Err(Error::InputTooShort {
            frames,
            min: MIN_INPUT_FRAMES,
        });
    }
    let mut f = PerCategory::<u64>::default();
    let d = config.hidden as u64;
    let ff = config.ffn_dim as u64;
    let k = config.conv_kernel as u64;
    let heads = config.heads;
    let fusion = config.flavor == Flavor::FusionFormer;
    // standalone BN after a producer, present only in unfused FusionFormer
    let appended_bn = if fusion && !config.fused { 2 } else { 0 };
    let branch_norm = match config.flavor {
        Flavor::ConformerLn => 8,
        Flavor::ConformerBn => 2,
        _ => 0,
    };
    use Category::*;

    // subsampling
    let (h1, w1) = (subsampled_len(frames) as u64, subsampled_len(config.input_feat_dim) as u64);
    let (h2, w2) = (subsampled_len(h1 as usize) as u64, subsampled_len(w1 as usize) as u64);
    f[Other] += 2 * h1 * w1 * d * 9 + 2 * h2 * w2 * d * 9 * d;
    f[Activation] += h1 * w1 * d + h2 * w2 * d;
    let t = h2;
    f[Other] += 2 * t * w2 * d * d + 2 * t * d;

    let linear = |f: &mut PerCategory<u64>, cat: Category, rows: u64, i: u64, o: u64| {
        f[cat] += 2 * rows * i * o;
        f[Normalization] += appended_bn * rows * o;
    };
    let ffn = |f: &mut PerCategory<u64>, rows: u64, act_flops: u64| {
        f[Normalization] += branch_norm * rows * d;
        linear(f, FeedForward, rows, d, ff);
        f[Activation] += act_flops * rows * ff;
        linear(f, FeedForward, rows, ff, d);
    };
    let hidden_act = if fusion { 1 } else { 4 };

    let window = AttnWindow::Chunk(decoding.window());
    let pairs = window.pairs(t as usize, t as usize);
    for _ in 0..config.num_encoder_blocks {
        ffn(&mut f, t, hidden_act);
        f[Other] += 2 * t * d;

        f[Normalization] += branch_norm * t * d;
        for _ in 0..4 {
            linear(&mut f, SelfAttention, t, d, d);
        }
        f[SelfAttention] += attention_core_flops(pairs, config.hidden, heads);
        f[Other] += t * d;

        f[Normalization] += branch_norm * t * d;
        linear(&mut f, Convolution, t, d, config.conv_inner_dim() as u64);
        if fusion {
            f[Activation] += t * d;
        } else {
            f[Activation] += 4 * t * d; // GLU
        }
        f[Convolution] += 2 * t * d * k;
        f[Normalization] += appended_bn * t * d;
        match config.flavor {
            Flavor::ConformerLn | Flavor::ConformerBn => f[Normalization] += 2 * t * d,
            _ => {}
        }
        f[Activation] += if fusion { t * d } else { 4 * t * d };
        linear(&mut f, Convolution, t, d, d);
        f[Other] += t * d;

        ffn(&mut f, t, hidden_act);
        f[Other] += 2 * t * d;
        f[Normalization] += branch_norm * t * d;
    }
    f[Normalization] += branch_norm * t * d;

    if decoding.runs_decoder() {
        let l = config.decoder_tokens(frames) as u64;
        let causal_pairs = AttnWindow::Causal.pairs(l as usize, l as usize);
        let cross_pairs = l * t;
        f[Other] += 2 * l * d;
        for _ in 0..config.num_decoder_blocks {
            f[Normalization] += branch_norm * l * d;
            for _ in 0..4 {
                linear(&mut f, SelfAttention, l, d, d);
            }
            f[SelfAttention] += attention_core_flops(causal_pairs, config.hidden, heads);
            f[Other] += l * d;

            f[Normalization] += branch_norm * l * d;
            linear(&mut f, SelfAttention, l, d, d);
            linear(&mut f, SelfAttention, t, d, d);
            linear(&mut f, SelfAttention, t, d, d);
            linear(&mut f, SelfAttention, l, d, d);
            f[SelfAttention] += attention_core_flops(cross_pairs, config.hidden, heads);
            f[Other] += l * d;

            ffn(&mut f, l, 1);
            f[Other] += l * d;
        }
        f[Normalization] += branch_norm * l * d;
        f[Other] += 2 * l * d * config.vocab_size as u64;
    }
    Ok(f)
}

/// Gaussian log-mel stand-in of `frames` frames.
pub fn synthetic_features<E: Element>(rng: &mut Xoshiro256PlusPlus, frames: usize, feat: usize) -> Tensor<E> {
    Tensor::from_fn(&[frames, feat], |_| E::from_f64(rng.sample(StandardNormal)))
}

pub fn synthetic_tokens(rng: &mut Xoshiro256PlusPlus, count: usize, vocab: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..vocab)).collect()
}

/// One utterance's work: encoder under the decoding window, then one decoder
/// pass for second-pass configurations.
pub fn run_utterance<E: Element>(
    model: &Model<E>,
    features: &Tensor<E>,
    tokens: &[usize],
    decoding: &DecodingConfig,
    ctx: &mut RunContext<E>,
) -> Result<()> {
    let enc = model.encoder_forward_with(features, decoding.window(), ctx)?;
    if decoding.runs_decoder() {
        model.decoder_forward_with(tokens, &enc, ctx)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category: Category,
    pub params: u64,
    pub flops: u64,
    pub latency_ns: u64,
    pub params_share: f64,
    pub flops_share: f64,
    pub latency_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub flavor: Flavor,
    pub fused: bool,
    pub quantized: bool,
    pub frames: usize,
    pub decoding: DecodingConfig,
    pub repeats: usize,
    pub categories: Vec<CategoryRecord>,
    pub totals: Totals,
    /// Set when the clock cannot resolve single ops; per-category latency is
    /// then unreliable and only the total is meaningful.
    pub coarse_timer: bool,
    /// Fields that vary between runs of the same command.
    pub volatile: Vec<String>,
}

fn shares(values: &PerCategory<u64>) -> PerCategory<f64> {
    let total = values.total();
    let mut out = PerCategory::<f64>::default();
    if total > 0 {
        for c in crate::model::Category::ALL {
            out[c] = values[c] as f64 / total as f64;
        }
    }
    out
}

impl ProfileReport {
    pub fn share(&self, category: Category) -> &CategoryRecord {
        self.categories
            .iter()
            .find(|r| r.category == category)
            .expect("every category is present")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} fused={} int8={} frames={} decoding={} repeats={}",
            self.flavor,
            self.fused,
            self.quantized,
            self.frames,
            self.decoding.to_ascii_name(),
            self.repeats
        );
        let _ = writeln!(
            s,
            "{:<15} {:>12} {:>7} {:>16} {:>7} {:>14} {:>7}",
            "category", "params", "%", "flops", "%", "latency_ns", "%"
        );
        let row = |s: &mut String, name: &str, p: u64, ps: f64, f: u64, fs: f64, l: u64, ls: f64| {
            let _ = writeln!(
                s,
                "{:<15} {:>12} {:>7.2} {:>16} {:>7.2} {:>14} {:>7.2}",
                name,
                p,
                100.0 * ps,
                f,
                100.0 * fs,
                l,
                100.0 * ls
            );
        };
        for r in &self.categories {
            row(
                &mut s,
                r.category.as_str(),
                r.params,
                r.params_share,
                r.flops,
                r.flops_share,
                r.latency_ns,
                r.latency_share,
            );
        }
        let t = &self.totals;
        row(&mut s, "total", t.params, 1.0, t.flops, 1.0, t.latency_ns, 1.0);
        if self.coarse_timer {
            s.push_str("warning: timer too coarse for per-op latency; only the total is reliable\n");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyBreakdown {
    /// Median per category over the measured repeats.
    pub per_category: PerCategory<u64>,
    /// Median wall-clock time of a whole pass.
    pub total_ns: u64,
    pub coarse_timer: bool,
}

pub const WARMUP_RUNS: usize = 2;

/// Smallest non-zero step the monotonic clock reports.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}

/// Times every op by category over `repeats` passes on a fixed random input,
/// after two warmup passes, and reports per-category medians.
pub fn measure_latency<E: Element>(
    model: &Model<E>,
    frames: usize,
    decoding: &DecodingConfig,
    repeats: usize,
    seed: u64,
) -> Result<LatencyBreakdown> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("repeats must be at least 3, got {repeats}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let features = synthetic_features::<E>(&mut rng, frames, model.config.input_feat_dim);
    let tokens = synthetic_tokens(&mut rng, model.config.decoder_tokens(frames), model.config.vocab_size);
    for _ in 0..WARMUP_RUNS {
        run_utterance(model, &features, &tokens, decoding, &mut RunContext::new())?;
    }
    let mut per_run: Vec<PerCategory<u64>> = Vec::with_capacity(repeats);
    let mut totals = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut ctx = RunContext::new().with_timing();
        let start = Instant::now();
        run_utterance(model, &features, &tokens, decoding, &mut ctx)?;
        totals.push(start.elapsed().as_nanos() as u64);
        per_run.push(*ctx.latency_ns().expect("timing enabled"));
    }
    let mut per_category = PerCategory::<u64>::default();
    for c in Category::ALL {
        let mut v: Vec<u64> = per_run.iter().map(|r| r[c]).collect();
        per_category[c] = median(&mut v);
    }
    Ok(LatencyBreakdown {
        per_category,
        total_ns: median(&mut totals),
        coarse_timer: timer_resolution() > Duration::from_micros(1),
    })
}

/// Parameters, analytic FLOPs and measured latency per category.
pub fn profile<E: Element>(
    model: &Model<E>,
    frames: usize,
    decoding: &DecodingConfig,
    repeats: usize,
    seed: u64,
) -> Result<ProfileReport> {
    let params = count_params(model);
    let flops = count_flops(&model.config, frames, decoding)?;
    let latency = measure_latency(model, frames, decoding, repeats, seed)?;
    let (ps, fs, ls) = (shares(&params), shares(&flops), shares(&latency.per_category));
    let categories = Category::ALL
        .into_iter()
        .map(|c| CategoryRecord {
            category: c,
            params: params[c],
            flops: flops[c],
            latency_ns: latency.per_category[c],
            params_share: ps[c],
            flops_share: fs[c],
            latency_share: ls[c],
        })
        .collect();
    Ok(ProfileReport {
        flavor: model.config.flavor,
        fused: model.config.fused,
        quantized: model.config.quantized,
        frames,
        decoding: *decoding,
        repeats,
        categories,
        totals: Totals {
            params: params.total(),
            flops: flops.total(),
            latency_ns: latency.per_category.total(),
        },
        coarse_timer: latency.coarse_timer,
        volatile: vec!["categories[].latency_ns".into(), "categories[].latency_share".into(), "totals.latency_ns".into()],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Float32,
    Int8,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Float32 => "float32",
            BenchMode::Int8 => "int8",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub flavor: Flavor,
    pub audio_seconds: f64,
    pub decode_seconds: f64,
    pub rtf: f64,
    pub mode: BenchMode,
    pub threads: usize,
    pub decoding: DecodingConfig,
    pub fused: bool,
    pub utterances: usize,
    pub repeats: usize,
    /// Decode time of each repeat, in run order.
    pub runs: Vec<f64>,
    pub volatile: Vec<String>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("flavor", self.flavor.to_string()),
            ("fused", self.fused.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("threads", self.threads.to_string()),
            ("decoding", self.decoding.to_ascii_name()),
            ("utterances", self.utterances.to_string()),
            ("audio_seconds", format!("{:.3}", self.audio_seconds)),
            ("decode_seconds", format!("{:.4}", self.decode_seconds)),
            ("rtf", format!("{:.5}", self.rtf)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<15} {v:>15}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub audio_seconds: f64,
    pub repeats: usize,
    pub seed: u64,
}

/// Utterance lengths in frames: uniform 2-10 s each until the total reaches
/// `audio_seconds`; the last one is cut to fit (but kept at least the
/// encoder minimum).
pub fn utterance_frames(audio_seconds: f64, seed: u64) -> Vec<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let total = (audio_seconds * FRAMES_PER_SECOND).round() as usize;
    let mut out = Vec::new();
    let mut used = 0;
    while used < total {
        let secs: f64 = rng.random_range(2.0..10.0);
        let n = ((secs * FRAMES_PER_SECOND) as usize).min(total - used).max(MIN_INPUT_FRAMES);
        used += n;
        out.push(n);
    }
    out
}

/// Decodes synthetic utterances totalling `audio_seconds` and reports the
/// median real-time factor over `repeats` passes. Runs on the calling
/// thread only; kernels are single-threaded.
pub fn bench_rtf<E: Element>(model: &Model<E>, decoding: &DecodingConfig, opts: BenchOptions) -> Result<BenchReport> {
    if !(opts.audio_seconds > 0.0) {
        return Err(Error::InvalidArgument("audio_seconds must be positive".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let lengths = utterance_frames(opts.audio_seconds, opts.seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed ^ 0x5eed);
    let cfg = &model.config;
    let inputs: Vec<(Tensor<E>, Vec<usize>)> = lengths
        .iter()
        .map(|&n| {
            (
                synthetic_features(&mut rng, n, cfg.input_feat_dim),
                synthetic_tokens(&mut rng, cfg.decoder_tokens(n), cfg.vocab_size),
            )
        })
        .collect();
    let audio_seconds = lengths.iter().sum::<usize>() as f64 / FRAMES_PER_SECOND;

    let (x, toks) = &inputs[0];
    run_utterance(model, x, toks, decoding, &mut RunContext::new())?;

    let mut runs = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let start = Instant::now();
        for (x, toks) in &inputs {
            run_utterance(model, x, toks, decoding, &mut RunContext::new())?;
        }
        runs.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let decode_seconds = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(BenchReport {
        flavor: cfg.flavor,
        audio_seconds,
        decode_seconds,
        rtf: decode_seconds / audio_seconds,
        mode: if cfg.quantized {
            BenchMode::Int8
        } else {
            BenchMode::Float32
        },
        threads: 1,
        decoding: *decoding,
        fused: cfg.fused,
        utterances: inputs.len(),
        repeats: opts.repeats,
        runs,
        volatile: vec!["decode_seconds".into(), "rtf".into(), "runs".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, WeightStore};
    use crate::tensor::LinearParams;

    #[test]
    fn linear_params_counted_with_bias() {
        let p = Param::Linear(LinearParams::<f32>::new(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4])).unwrap());
        assert_eq!(p.element_count(), 16);
        let mut store = WeightStore::new();
        store.insert("encoder.block0.ffn1.linear1", p.clone());
        assert_eq!(param_category("encoder.block0.ffn1.linear1", &p), Category::FeedForward);
        assert_eq!(param_category("encoder.block0.conv.pointwise1", &p), Category::Convolution);
        assert_eq!(param_category("decoder.block0.src_attn.linear_q", &p), Category::SelfAttention);
        assert_eq!(param_category("encoder.subsample.conv1", &p), Category::Other);
    }

    #[test]
    fn shares_partition_unity() {
        let mut v = PerCategory::<u64>::default();
        v[Category::Other] = 3;
        v[Category::FeedForward] = 7;
        let s = shares(&v);
        assert!((s.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_flops_match_runtime_counters() {
        for flavor in Flavor::ALL {
            for name in ["1st-s-4-1", "2nd-s-4-inf", "2nd-ns-inf-inf"] {
                let decoding: DecodingConfig = name.parse().unwrap();
                let model = build_model(ModelConfig::tiny(flavor), 5).unwrap();
                let mut models = vec![model.clone()];
                if flavor == Flavor::FusionFormer {
                    models.push(crate::fusion::fuse_model(&model).unwrap().0);
                }
                for m in models {
                    let frames = 77;
                    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
                    let x = synthetic_features::<f32>(&mut rng, frames, m.config.input_feat_dim);
                    let toks = synthetic_tokens(&mut rng, m.config.decoder_tokens(frames), m.config.vocab_size);
                    let mut ctx = RunContext::new().with_counters();
                    run_utterance(&m, &x, &toks, &decoding, &mut ctx).unwrap();
                    let analytic = count_flops(&m.config, frames, &decoding).unwrap();
                    assert_eq!(
                        ctx.flops().unwrap(),
                        &analytic,
                        "{flavor} fused={} {name}",
                        m.config.fused
                    );
                }
            }
        }
    }

    #[test]
    fn utterances_cover_requested_audio() {
        let u = utterance_frames(60.0, 3);
        assert_eq!(u.iter().sum::<usize>(), 6000);
        assert!(u.iter().all(|&n| n <= 1000));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [5, 1, 3]), 3);
        assert_eq!(median(&mut [4, 1, 3, 2]), 2);
    }
}
