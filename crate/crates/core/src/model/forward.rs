//! Encoder and decoder execution for every flavor.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::config::subsampled_len;
use crate::model::context::{Category, RunContext, TraceEntry};
use crate::model::weights::Param;
use crate::model::{Flavor, Model};
use crate::quant::{int8_depthwise_conv1d_with, int8_linear_forward_with};
use crate::streaming::{ChunkMask, ChunkWindow};
use crate::tensor::{
    activation, batch_norm_inference, conv2d, depthwise_conv1d_with, layer_norm,
    linear_forward_with, softmax_in_place, ActivationKind, Element, Epilogue, Tensor,
};

/// Linear/conv layer outputs of one block, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace<E = f32> {
    pub block: String,
    pub entries: Vec<TraceEntry<E>>,
}

/// Which keys each query may attend to.
#[derive(Clone, Copy, Debug)]
pub(crate) enum AttnWindow {
    Chunk(ChunkWindow),
    Causal,
    Full,
}

impl AttnWindow {
    fn visible(&self, i: usize, keys: usize) -> Range<usize> {
        match self {
            AttnWindow::Chunk(w) => w.visible(i, keys),
            AttnWindow::Causal => 0..(i + 1).min(keys),
            AttnWindow::Full => 0..keys,
        }
    }

    pub(crate) fn pairs(&self, queries: usize, keys: usize) -> u64 {
        (0..queries).map(|i| self.visible(i, keys).len() as u64).sum()
    }
}

/// FLOPs of the attention core: QKᵀ and AV products plus per-head scaling and
/// softmax over every visible pair.
pub(crate) fn attention_core_flops(pairs: u64, hidden: usize, heads: usize) -> u64 {
    4 * pairs * hidden as u64 + 6 * pairs * heads as u64
}

pub(crate) fn sinusoidal_positions<E: Element>(frames: usize, dim: usize) -> Tensor<E> {
    Tensor::from_fn(&[frames, dim], |idx| {
        let (t, c) = (idx / dim, idx % dim);
        let freq = (-(10000f64.ln()) * (2 * (c / 2)) as f64 / dim as f64).exp();
        let angle = t as f64 * freq;
        E::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub(crate) struct Exec<'m, E: Element> {
    model: &'m Model<E>,
}

impl<'m, E: Element> Exec<'m, E> {
    pub(crate) fn new(model: &'m Model<E>) -> Self {
        Self { model }
    }

    fn param(&self, path: &str) -> Result<&'m Param<E>> {
        self.model
            .weights
            .get(path)
            .ok_or_else(|| Error::WeightStore(format!("missing `{path}`")))
    }

    fn check(&self, ctx: &RunContext<E>, path: &str, y: &Tensor<E>) -> Result<()> {
        if ctx.check_each && !y.is_finite() {
            return Err(Error::Divergence {
                layer: path.to_string(),
            });
        }
        Ok(())
    }

    /// Runs one standalone op with cost attribution and divergence checking.
    fn run(
        &self,
        ctx: &mut RunContext<E>,
        path: &str,
        category: Category,
        flops: u64,
        f: impl FnOnce() -> Result<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let y = ctx.op(category, flops, f)?;
        self.check(ctx, path, &y)?;
        Ok(y)
    }

    fn linear(
        &self,
        ctx: &mut RunContext<E>,
        path: &str,
        category: Category,
        x: &Tensor<E>,
        epilogue: Epilogue,
    ) -> Result<Tensor<E>> {
        let rows = x.shape()[0] as u64;
        let y = match self.param(path)? {
            Param::Linear(p) => {
                let flops = 2 * rows * (p.in_dim() * p.out_dim()) as u64;
                self.run(ctx, path, category, flops, || linear_forward_with(x, p, epilogue))?
            }
            Param::QuantLinear(q) => {
                let flops = 2 * rows * (q.in_dim * q.out_dim) as u64;
                self.run(ctx, path, category, flops, || int8_linear_forward_with(x, q, epilogue))?
            }
            other => return Err(wrong_kind(path, "linear", other)),
        };
        if epilogue == Epilogue::Relu {
            ctx.add_flops(Category::Activation, y.len() as u64);
        }
        Ok(y)
    }

    fn depthwise(&self, ctx: &mut RunContext<E>, path: &str, x: &Tensor<E>, epilogue: Epilogue) -> Result<Tensor<E>> {
        let causal = self.model.config.causal_conv;
        let rows = x.shape()[0] as u64;
        let y = match self.param(path)? {
            Param::DepthwiseConv(p) => {
                let flops = 2 * rows * (p.channels() * p.kernel_size()) as u64;
                self.run(ctx, path, Category::Convolution, flops, || {
                    depthwise_conv1d_with(x, p, causal, epilogue)
                })?
            }
            Param::QuantDepthwiseConv(q) => {
                let flops = 2 * rows * (q.channels * q.kernel) as u64;
                self.run(ctx, path, Category::Convolution, flops, || {
                    int8_depthwise_conv1d_with(x, q, causal, epilogue)
                })?
            }
            other => return Err(wrong_kind(path, "depthwise conv", other)),
        };
        if epilogue == Epilogue::Relu {
            ctx.add_flops(Category::Activation, y.len() as u64);
        }
        Ok(y)
    }

    /// A linear or depthwise layer together with whatever follows it in its
    /// flavor: an appended BN and/or a ReLU, run standalone or as an epilogue.
    fn layer(
        &self,
        ctx: &mut RunContext<E>,
        path: &str,
        category: Category,
        x: &Tensor<E>,
        relu: bool,
    ) -> Result<Tensor<E>> {
        let depthwise = path.ends_with(".depthwise");
        let produce = |ctx: &mut RunContext<E>, epilogue| {
            if depthwise {
                self.depthwise(ctx, path, x, epilogue)
            } else {
                self.linear(ctx, path, category, x, epilogue)
            }
        };
        let bn_path = format!("{path}.bn");
        if let Some(Param::BatchNorm(_)) = self.model.weights.get(&bn_path) {
            let y = produce(ctx, Epilogue::None)?;
            let mut y = self.norm(ctx, &bn_path, &y)?;
            if relu {
                y = self.act(ctx, &format!("{path}.relu"), ActivationKind::Relu, &y)?;
            }
            ctx.record(path, &y);
            Ok(y)
        } else if relu && self.model.config.fused {
            let y = produce(ctx, Epilogue::Relu)?;
            ctx.record(path, &y);
            Ok(y)
        } else {
            let y = produce(ctx, Epilogue::None)?;
            ctx.record(path, &y);
            if relu {
                self.act(ctx, &format!("{path}.relu"), ActivationKind::Relu, &y)
            } else {
                Ok(y)
            }
        }
    }

    /// Applies the normalization stored at `path`.
    fn norm(&self, ctx: &mut RunContext<E>, path: &str, x: &Tensor<E>) -> Result<Tensor<E>> {
        let n = x.len() as u64;
        match self.param(path)? {
            Param::LayerNorm(p) => {
                self.run(ctx, path, Category::Normalization, 8 * n, || layer_norm(x, p))
            }
            Param::BatchNorm(p) => self.run(ctx, path, Category::Normalization, 2 * n, || {
                batch_norm_inference(x, p)
            }),
            other => Err(wrong_kind(path, "normalization", other)),
        }
    }

    /// Applies the residual-branch normalization at `path` if this flavor has one.
    fn branch_norm(&self, ctx: &mut RunContext<E>, path: &str, x: &Tensor<E>) -> Result<Option<Tensor<E>>> {
        if self.model.weights.contains(path) {
            self.norm(ctx, path, x).map(Some)
        } else {
            Ok(None)
        }
    }

    fn act(&self, ctx: &mut RunContext<E>, path: &str, kind: ActivationKind, x: &Tensor<E>) -> Result<Tensor<E>> {
        let out_len = match kind {
            ActivationKind::Glu => x.len() / 2,
            _ => x.len(),
        } as u64;
        self.run(ctx, path, Category::Activation, kind.flops_per_element() * out_len, || {
            activation(x, kind)
        })
    }

    fn residual(&self, ctx: &mut RunContext<E>, path: &str, x: &mut Tensor<E>, h: &Tensor<E>, half: bool) -> Result<()> {
        let n = x.len() as u64;
        let flops = if half { 2 * n } else { n };
        ctx.op(Category::Other, flops, || {
            let scale = E::from_f64(if half { 0.5 } else { 1.0 });
            for (a, &b) in x.data_mut().iter_mut().zip(h.data()) {
                *a = if half { *a + scale * b } else { *a + b };
            }
        });
        self.check(ctx, path, x)
    }

    fn ffn(&self, ctx: &mut RunContext<E>, prefix: &str, x: &Tensor<E>, hidden_act: ActivationKind) -> Result<Tensor<E>> {
        let fusion = self.model.config.flavor == Flavor::FusionFormer;
        let cat = Category::FeedForward;
        let l1 = format!("{prefix}.linear1");
        let relu = fusion || hidden_act == ActivationKind::Relu;
        let mut h = self.layer(ctx, &l1, cat, x, relu)?;
        if !relu {
            h = self.act(ctx, &format!("{prefix}.{}", act_name(hidden_act)), hidden_act, &h)?;
        }
        self.layer(ctx, &format!("{prefix}.linear2"), cat, &h, false)
    }

    /// Multi-head attention with projections. Keys and values come from
    /// `memory` when given (cross-attention), otherwise from `x`.
    fn attention(
        &self,
        ctx: &mut RunContext<E>,
        prefix: &str,
        x: &Tensor<E>,
        memory: Option<&Tensor<E>>,
        window: AttnWindow,
    ) -> Result<Tensor<E>> {
        let cat = Category::SelfAttention;
        let kv = memory.unwrap_or(x);
        let q = self.layer(ctx, &format!("{prefix}.linear_q"), cat, x, false)?;
        let k = self.layer(ctx, &format!("{prefix}.linear_k"), cat, kv, false)?;
        let v = self.layer(ctx, &format!("{prefix}.linear_v"), cat, kv, false)?;
        let heads = self.model.config.heads;
        let pairs = window.pairs(q.shape()[0], k.shape()[0]);
        let flops = attention_core_flops(pairs, self.model.config.hidden, heads);
        let path = format!("{prefix}.attention");
        let ctx_out = self.run(ctx, &path, cat, flops, || Ok(attend(&q, &k, &v, heads, window)))?;
        self.layer(ctx, &format!("{prefix}.linear_out"), cat, &ctx_out, false)
    }

    fn conv_module(&self, ctx: &mut RunContext<E>, prefix: &str, x: &Tensor<E>) -> Result<Tensor<E>> {
        let cat = Category::Convolution;
        let pw1 = format!("{prefix}.pointwise1");
        let dw = format!("{prefix}.depthwise");
        let pw2 = format!("{prefix}.pointwise2");
        if self.model.config.flavor == Flavor::FusionFormer {
            let h = self.layer(ctx, &pw1, cat, x, true)?;
            let h = self.layer(ctx, &dw, cat, &h, true)?;
            return self.layer(ctx, &pw2, cat, &h, false);
        }
        let h = self.layer(ctx, &pw1, cat, x, false)?;
        let h = self.act(ctx, &format!("{prefix}.glu"), ActivationKind::Glu, &h)?;
        let h = self.layer(ctx, &dw, cat, &h, false)?;
        let h = self.branch_norm(ctx, &format!("{prefix}.bn"), &h)?.unwrap_or(h);
        let h = self.act(ctx, &format!("{prefix}.swish"), ActivationKind::Swish, &h)?;
        self.layer(ctx, &pw2, cat, &h, false)
    }

    pub(crate) fn encoder_block(
        &self,
        ctx: &mut RunContext<E>,
        block: usize,
        x: &Tensor<E>,
        window: ChunkWindow,
    ) -> Result<Tensor<E>> {
        let p = format!("encoder.block{block}");
        let swish = ActivationKind::Swish;
        let mut x = x.clone();

        let prefix = format!("{p}.ffn1");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.ffn(ctx, &prefix, n.as_ref().unwrap_or(&x), swish)?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, true)?;

        let prefix = format!("{p}.mhsa");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.attention(ctx, &prefix, n.as_ref().unwrap_or(&x), None, AttnWindow::Chunk(window))?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, false)?;

        let prefix = format!("{p}.conv");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.conv_module(ctx, &prefix, n.as_ref().unwrap_or(&x))?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, false)?;

        let prefix = format!("{p}.ffn2");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.ffn(ctx, &prefix, n.as_ref().unwrap_or(&x), swish)?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, true)?;

        Ok(self
            .branch_norm(ctx, &format!("{p}.final_norm"), &x)?
            .unwrap_or(x))
    }

    /// Conv2d subsampling (time and frequency /4), projection to the model
    /// width, then scaling by sqrt(d) plus sinusoidal positions.
    pub(crate) fn subsample(&self, ctx: &mut RunContext<E>, features: &Tensor<E>) -> Result<Tensor<E>> {
        let config = &self.model.config;
        let (frames, feat) = features.dims2()?;
        if feat != config.input_feat_dim {
            return Err(Error::dim(
                "encoder_forward",
                format!("features {:?} vs input_feat_dim {}", features.shape(), config.input_feat_dim),
            ));
        }
        let mut x = features.clone().reshape(&[frames, feat, 1])?;
        for name in ["conv1", "conv2"] {
            let path = format!("encoder.subsample.{name}");
            let Param::Conv2d(p) = self.param(&path)? else {
                return Err(wrong_kind(&path, "conv2d", self.param(&path)?));
            };
            let (h, w) = (subsampled_len(x.shape()[0]), subsampled_len(x.shape()[1]));
            let flops = 2 * (h * w * p.weight().len()) as u64;
            x = self.run(ctx, &path, Category::Other, flops, || conv2d(&x, p, Epilogue::Relu))?;
            ctx.add_flops(Category::Activation, x.len() as u64);
        }
        let (t, f, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let x = x.reshape(&[t, f * c])?;
        let mut x = self.linear(ctx, "encoder.subsample.out", Category::Other, &x, Epilogue::None)?;
        self.add_positions(ctx, "encoder.positions", &mut x)?;
        Ok(x)
    }

    fn add_positions(&self, ctx: &mut RunContext<E>, path: &str, x: &mut Tensor<E>) -> Result<()> {
        let (t, d) = x.dims2()?;
        let scale = E::from_f64((d as f64).sqrt());
        ctx.op(Category::Other, 2 * x.len() as u64, || {
            let pe = sinusoidal_positions::<E>(t, d);
            for (a, &b) in x.data_mut().iter_mut().zip(pe.data()) {
                *a = *a * scale + b;
            }
        });
        self.check(ctx, path, x)
    }

    pub(crate) fn encoder_final_norm(&self, ctx: &mut RunContext<E>, x: Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.branch_norm(ctx, "encoder.final_norm", &x)?.unwrap_or(x))
    }

    pub(crate) fn decoder_embed(&self, ctx: &mut RunContext<E>, tokens: &[usize]) -> Result<Tensor<E>> {
        let vocab = self.model.config.vocab_size;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("decoder needs at least one token".into()));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::TokenOutOfRange {
                token,
                position,
                vocab,
            });
        }
        let Param::Embedding(table) = self.param("decoder.embed")? else {
            return Err(wrong_kind("decoder.embed", "embedding", self.param("decoder.embed")?));
        };
        let d = self.model.config.hidden;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        ctx.op(Category::Other, 0, || {
            for (row, &tok) in x.data_mut().chunks_mut(d).zip(tokens) {
                row.copy_from_slice(table.row(tok));
            }
        });
        self.add_positions(ctx, "decoder.positions", &mut x)?;
        Ok(x)
    }

    pub(crate) fn decoder_block(
        &self,
        ctx: &mut RunContext<E>,
        block: usize,
        x: &Tensor<E>,
        memory: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let p = format!("decoder.block{block}");
        let mut x = x.clone();

        let prefix = format!("{p}.self_attn");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.attention(ctx, &prefix, n.as_ref().unwrap_or(&x), None, AttnWindow::Causal)?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, false)?;

        let prefix = format!("{p}.src_attn");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.attention(ctx, &prefix, n.as_ref().unwrap_or(&x), Some(memory), AttnWindow::Full)?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, false)?;

        let prefix = format!("{p}.ffn");
        let n = self.branch_norm(ctx, &format!("{prefix}.norm"), &x)?;
        let h = self.ffn(ctx, &prefix, n.as_ref().unwrap_or(&x), ActivationKind::Relu)?;
        self.residual(ctx, &format!("{prefix}.residual"), &mut x, &h, false)?;
        Ok(x)
    }

    pub(crate) fn decoder_head(&self, ctx: &mut RunContext<E>, x: Tensor<E>) -> Result<Tensor<E>> {
        let x = self.branch_norm(ctx, "decoder.final_norm", &x)?.unwrap_or(x);
        self.linear(ctx, "decoder.output", Category::Other, &x, Epilogue::None)
    }
}

fn act_name(kind: ActivationKind) -> &'static str {
    match kind {
        ActivationKind::Relu => "relu",
        ActivationKind::Swish => "swish",
        ActivationKind::Glu => "glu",
    }
}

fn wrong_kind<E: Element>(path: &str, expected: &str, found: &Param<E>) -> Error {
    Error::WeightStore(format!(
        "`{path}` should be a {expected}, found {}",
        found.kind_name()
    ))
}

/// Scaled dot-product attention over `heads` heads. Queries that share a
/// visible key range are batched into one product per head; keys outside a
/// query's range never enter its computation.
fn attend<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, heads: usize, window: AttnWindow) -> Tensor<E> {
    let (tq, d) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    let dk = d / heads;
    let scale = E::from_f64(1.0 / (dk as f64).sqrt());
    let mut out = vec![E::zero(); tq * d];
    let mut scores = Vec::new();
    let mut start = 0;
    while start < tq {
        let range = window.visible(start, tk);
        let mut end = start + 1;
        while end < tq && window.visible(end, tk) == range {
            end += 1;
        }
        let (nq, nk) = (end - start, range.len());
        for h in 0..heads {
            scores.clear();
            scores.resize(nq * nk, E::zero());
            let col = h * dk;
            E::gemm_strided(
                nq,
                dk,
                nk,
                (&q.data()[start * d + col..], d as isize, 1),
                (&k.data()[range.start * d + col..], 1, d as isize),
                (&mut scores, nk as isize, 1),
            );
            for row in scores.chunks_mut(nk) {
                for s in row.iter_mut() {
                    *s = *s * scale;
                }
                softmax_in_place(row);
            }
            E::gemm_strided(
                nq,
                nk,
                dk,
                (&scores, nk as isize, 1),
                (&v.data()[range.start * d + col..], d as isize, 1),
                (&mut out[start * d + col..], d as isize, 1),
            );
        }
        start = end;
    }
    Tensor::new(vec![tq, d], out).expect("shape matches data")
}

impl<E: Element> Model<E> {
    /// Runs one encoder block. `mask` fixes the attention window; its frame
    /// count must match `x`.
    pub fn encoder_block_forward(
        &self,
        block: usize,
        x: &Tensor<E>,
        mask: &ChunkMask,
        trace: bool,
    ) -> Result<(Tensor<E>, Option<BlockTrace<E>>)> {
        let mut ctx = if trace {
            RunContext::new().with_trace()
        } else {
            RunContext::new()
        };
        let y = self.encoder_block_forward_with(block, x, mask, &mut ctx)?;
        let trace = trace.then(|| BlockTrace {
            block: format!("encoder.block{block}"),
            entries: ctx.take_trace(),
        });
        Ok((y, trace))
    }

    pub fn encoder_block_forward_with(
        &self,
        block: usize,
        x: &Tensor<E>,
        mask: &ChunkMask,
        ctx: &mut RunContext<E>,
    ) -> Result<Tensor<E>> {
        let (frames, d) = x.dims2()?;
        if d != self.config.hidden || mask.frames() != frames {
            return Err(Error::dim(
                "encoder_block_forward",
                format!("input {:?}, mask over {} frames, hidden {}", x.shape(), mask.frames(), self.config.hidden),
            ));
        }
        if block >= self.config.num_encoder_blocks {
            return Err(Error::InvalidArgument(format!(
                "block {block} out of range ({} encoder blocks)",
                self.config.num_encoder_blocks
            )));
        }
        let window = mask.window();
        self.guarded(ctx, &format!("encoder.block{block}"), |exec, ctx| {
            exec.encoder_block(ctx, block, x, window)
        })
    }

    /// Full encoder: subsampling, every block under the chunk window built
    /// for the subsampled length, and the final normalization if any.
    pub fn encoder_forward(&self, features: &Tensor<E>, window: ChunkWindow) -> Result<Tensor<E>> {
        self.encoder_forward_with(features, window, &mut RunContext::new())
    }

    pub fn encoder_forward_traced(
        &self,
        features: &Tensor<E>,
        window: ChunkWindow,
    ) -> Result<(Tensor<E>, Vec<BlockTrace<E>>)> {
        let mut ctx = RunContext::new().with_trace();
        let y = self.encoder_forward_with(features, window, &mut ctx)?;
        Ok((y, group_traces(ctx.take_trace())))
    }

    pub fn encoder_forward_with(
        &self,
        features: &Tensor<E>,
        window: ChunkWindow,
        ctx: &mut RunContext<E>,
    ) -> Result<Tensor<E>> {
        let (frames, _) = features.dims2()?;
        if frames < MIN_INPUT_FRAMES {
            return Err(Error::InputTooShort {
                frames,
                min: MIN_INPUT_FRAMES,
            });
        }
        let mut x = self.guarded(ctx, "encoder.subsample", |exec, ctx| exec.subsample(ctx, features))?;
        for b in 0..self.config.num_encoder_blocks {
            x = self.guarded(ctx, &format!("encoder.block{b}"), |exec, ctx| {
                exec.encoder_block(ctx, b, &x, window)
            })?;
        }
        self.guarded(ctx, "encoder.final_norm", |exec, ctx| exec.encoder_final_norm(ctx, x.clone()))
    }

    /// Decoder logits `[tokens, vocab]` for a token prefix attending over
    /// `encoder_out`; self-attention is causal.
    pub fn decoder_forward(&self, tokens: &[usize], encoder_out: &Tensor<E>) -> Result<Tensor<E>> {
        self.decoder_forward_with(tokens, encoder_out, &mut RunContext::new())
    }

    pub fn decoder_forward_with(
        &self,
        tokens: &[usize],
        encoder_out: &Tensor<E>,
        ctx: &mut RunContext<E>,
    ) -> Result<Tensor<E>> {
        let (_, d) = encoder_out.dims2()?;
        if d != self.config.hidden {
            return Err(Error::dim(
                "decoder_forward",
                format!("encoder output {:?} vs hidden {}", encoder_out.shape(), self.config.hidden),
            ));
        }
        let mut x = self.guarded(ctx, "decoder.embed", |exec, ctx| exec.decoder_embed(ctx, tokens))?;
        for b in 0..self.config.num_decoder_blocks {
            x = self.guarded(ctx, &format!("decoder.block{b}"), |exec, ctx| {
                exec.decoder_block(ctx, b, &x, encoder_out)
            })?;
        }
        self.guarded(ctx, "decoder.output", |exec, ctx| exec.decoder_head(ctx, x.clone()))
    }

    /// Runs `stage`; on a non-finite result, reruns it op by op to name the
    /// first layer whose output diverged.
    fn guarded(
        &self,
        ctx: &mut RunContext<E>,
        stage: &str,
        f: impl Fn(&Exec<'_, E>, &mut RunContext<E>) -> Result<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let exec = Exec::new(self);
        let y = f(&exec, ctx)?;
        if ctx.nan_tolerant || ctx.check_each || y.is_finite() {
            return Ok(y);
        }
        let mut checking = RunContext::checking();
        match f(&exec, &mut checking) {
            Err(e) => Err(e),
            Ok(_) => Err(Error::Divergence {
                layer: stage.to_string(),
            }),
        }
    }
}

/// Shortest input accepted by the encoder.
pub const MIN_INPUT_FRAMES: usize = 8;

/// Splits a flat trace into per-block groups keyed by `encoder.blockN` /
/// `decoder.blockN`.
pub fn group_traces<E: Element>(entries: Vec<TraceEntry<E>>) -> Vec<BlockTrace<E>> {
    let mut out: Vec<BlockTrace<E>> = Vec::new();
    for e in entries {
        let block = block_prefix(&e.path).to_string();
        match out.last_mut() {
            Some(last) if last.block == block => last.entries.push(e),
            _ => out.push(BlockTrace {
                block,
                entries: vec![e],
            }),
        }
    }
    out
}

fn block_prefix(path: &str) -> &str {
    let mut parts = path.splitn(3, '.');
    let first = parts.next().unwrap_or("");
    match parts.next() {
        Some(second) => &path[..first.len() + 1 + second.len()],
        None => path,
    }
}
