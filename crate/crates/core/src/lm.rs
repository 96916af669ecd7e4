//! Toy causal language model, LoRA adapters, multimodal input assembly,
//! next-token SFT, greedy generation, label parsing and attention diagnostics.

use std::ops::Range;
use std::sync::Arc;

use candle_core::{DType, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::QueryOutput;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Attention, Dropout, FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamStore, Precision, Scope};
use crate::prompting::{LabelSpec, PromptBundle};
use crate::tokenizer::Tokenizer;

pub const LM_ID: &str = "lm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
    pub max_new_tokens: usize,
    /// Text-only language-model steps that stand in for a pretrained backbone.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            width: 256,
            layers: 4,
            heads: 4,
            ffn_hidden: 1024,
            max_positions: 128,
            max_new_tokens: 16,
            pretrain_steps: 150,
            pretrain_lr: 1e-3,
            pretrain_batch: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if self.rank > width {
            return Err(Error::config(format!(
                "LoRA rank {} exceeds projection dimension {width}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("LoRA dropout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Closed-form adapter parameter count for `layers` blocks of square projections.
    pub fn adapter_params(&self, layers: usize, width: usize) -> usize {
        layers * self.targets.len() * (self.rank * width + width * self.rank)
    }
}

/// `W x + (alpha / rank) · B A x` with the base weight frozen.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
    dropout: Arc<Dropout>,
}

impl Module for LoraLinear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let base = self.base.forward(x)?;
        let xd = self
            .dropout
            .forward(x)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let low = xd.reshape((rows, self.a.dims()[1]))?.matmul(&self.a.t()?)?;
        let delta = (low.matmul(&self.b.t()?)? * self.scale)?;
        let delta = delta.reshape(base.dims())?;
        base + delta
    }
}

#[derive(Debug, Clone)]
pub enum Projection {
    Plain(Linear),
    Lora(LoraLinear),
}

impl Module for Projection {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Projection::Plain(l) => l.forward(x),
            Projection::Lora(l) => l.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmBlock {
    pub ln1: LayerNorm,
    pub attn: Attention<Projection>,
    pub ln2: LayerNorm,
    pub mlp: FeedForward,
}

/// Decoder-only transformer with learned positions and an untied output head.
#[derive(Debug, Clone)]
pub struct CausalLm {
    pub cfg: LmConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<LmBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl CausalLm {
    pub fn vocab_size(&self) -> usize {
        self.tok_embed.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn dtype(&self) -> DType {
        self.tok_embed.dtype()
    }

    /// `[n, d]` token embeddings.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, self.tok_embed.device())?;
        Ok(self.tok_embed.index_select(&idx, 0)?)
    }

    /// Logits `[B, L, V]` and, if requested, per-layer attention probabilities `[B, H, L, L]`.
    pub fn forward_embeds(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, l, _) = x.dims3()?;
        if l > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {l} positions exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let mut h = x.broadcast_add(&self.pos_embed.narrow(0, 0, l)?)?;
        let bias = nn::causal_bias(l, x.dtype())?;
        let mut probs = Vec::new();
        for b in &self.blocks {
            let n = b.ln1.forward(&h)?;
            let (att, p) = b.attn.forward_with_probs(&n, &n, Some(&bias))?;
            if record {
                probs.push(p);
            }
            h = (h + att)?;
            let n = b.ln2.forward(&h)?;
            h = (&h + b.mlp.forward(&n)?)?;
        }
        let logits = self.head.forward(&self.ln_f.forward(&h)?)?;
        Ok((logits, probs))
    }

    /// Embeddings for a batch of inputs sharing one layout.
    pub fn embed_inputs(&self, inputs: &[MultimodalInput]) -> Result<Tensor> {
        let first = inputs.first().ok_or_else(|| Error::invalid("empty input batch"))?;
        let target_len = inputs.iter().map(|i| i.target.len()).max().unwrap_or(0);
        let d = self.width();
        let mut rows = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.before.len() != first.before.len()
                || inp.after.len() != first.after.len()
                || inp.aligned_len() != first.aligned_len()
            {
                return Err(Error::invalid("inputs in one batch must share a layout"));
            }
            let mut parts = Vec::with_capacity(3);
            if !inp.before.is_empty() {
                parts.push(self.embed_tokens(&inp.before)?);
            }
            if inp.aligned_len() > 0 {
                if inp.aligned.dims()[1] != d {
                    return Err(Error::invalid("aligned embedding width differs from LM width"));
                }
                parts.push(inp.aligned.to_dtype(self.dtype())?);
            }
            let mut tail = inp.after.clone();
            tail.extend_from_slice(&inp.target);
            tail.resize(inp.after.len() + target_len, Tokenizer::PAD_ID);
            if !tail.is_empty() {
                parts.push(self.embed_tokens(&tail)?);
            }
            rows.push(Tensor::cat(&parts, 0)?);
        }
        let _ = d;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn logits(&self, inputs: &[MultimodalInput]) -> Result<Tensor> {
        Ok(self.forward_embeds(&self.embed_inputs(inputs)?, false)?.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmHeader {
    lm: LmConfig,
    lora: LoraConfig,
    vocab: Vec<String>,
    aligned_width: usize,
    precision: Precision,
}

/// The base model with trainable (non-detached) parameters.
#[derive(Debug)]
pub struct ToyLm {
    pub store: ParamStore,
    pub model: CausalLm,
    precision: Precision,
}

impl ToyLm {
    pub fn new(cfg: &LmConfig, vocab_size: usize, precision: Precision, seed: u64) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::config("LM width must be divisible by heads"));
        }
        let mut store = ParamStore::new(precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let mut sc = Scope::new(&mut store, &mut rng);
        let tok_embed = sc.param("tok_embed", &[vocab_size, d], Init::Normal(0.2))?;
        let pos_embed = sc.param("pos_embed", &[cfg.max_positions, d], Init::Normal(0.02))?;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let mut b = sc.sub(&format!("block{i}"));
                let mut a = b.sub("attn");
                let proj = |a: &mut Scope<'_>, name: &str, std: f64| {
                    Linear::with_init(&mut a.sub(name), d, d, true, Init::Normal(std)).map(Projection::Plain)
                };
                let attn = Attention {
                    q: proj(&mut a, "q", 0.02)?,
                    k: proj(&mut a, "k", 0.02)?,
                    v: proj(&mut a, "v", 0.02)?,
                    o: proj(&mut a, "o", out_std)?,
                    heads: cfg.heads,
                    width: d,
                };
                let mut m = b.sub("mlp");
                let mlp = FeedForward {
                    up: Linear::with_init(&mut m.sub("up"), d, cfg.ffn_hidden, true, Init::Normal(0.02))?,
                    down: Linear::with_init(&mut m.sub("down"), cfg.ffn_hidden, d, true, Init::Normal(out_std))?,
                };
                Ok(LmBlock {
                    ln1: LayerNorm::new(&mut b.sub("ln1"), d)?,
                    attn,
                    ln2: LayerNorm::new(&mut b.sub("ln2"), d)?,
                    mlp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut sc.sub("ln_f"), d)?;
        let head = Linear::with_init(&mut sc.sub("head"), d, vocab_size, false, Init::Normal(0.02))?;
        Ok(Self {
            store,
            model: CausalLm {
                cfg: *cfg,
                tok_embed,
                pos_embed,
                blocks,
                ln_f,
                head,
            },
            precision,
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }
}

fn plain(p: &Projection) -> &Linear {
    match p {
        Projection::Plain(l) => l,
        Projection::Lora(l) => &l.base,
    }
}

/// Base model frozen by construction (detached tensors) plus trainable adapters.
#[derive(Debug)]
pub struct AdaptedLm {
    pub lora_store: ParamStore,
    pub lora_cfg: LoraConfig,
    pub model: CausalLm,
    dropout: Arc<Dropout>,
}

impl AdaptedLm {
    pub fn trainable_params(&self) -> usize {
        self.lora_store.num_params()
    }

    /// Enables adapter dropout (training) and reseeds its generator.
    pub fn set_training(&self, training: bool, seed: u64) {
        self.dropout.set_active(training);
        self.dropout.reseed(seed);
    }
}

/// Wraps every targeted attention projection with a LoRA adapter.
///
/// `A` is drawn from `N(0, 1/in)` and `B` is zero, so the adapted model equals
/// the base model until `B` is trained.
pub fn apply_lora(base: &ToyLm, cfg: &LoraConfig, seed: u64) -> Result<AdaptedLm> {
    let d = base.model.width();
    cfg.validate(d)?;
    let mut store = ParamStore::new(base.precision.dtype());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropout = Arc::new(Dropout::new(cfg.dropout, seed ^ 0x5eed));
    let scale = cfg.alpha / cfg.rank as f64;
    let mut blocks = Vec::with_capacity(base.model.blocks.len());
    for (i, blk) in base.model.blocks.iter().enumerate() {
        let mut sc = Scope::new(&mut store, &mut rng);
        let mut wrap = |target: LoraTarget, p: &Projection| -> Result<Projection> {
            let frozen = plain(p).detached();
            if !cfg.targets.contains(&target) {
                return Ok(Projection::Plain(frozen));
            }
            let (out_dim, in_dim) = (frozen.out_dim(), frozen.in_dim());
            if cfg.rank > out_dim.min(in_dim) {
                return Err(Error::config(format!(
                    "LoRA rank {} exceeds projection dimension {}",
                    cfg.rank,
                    out_dim.min(in_dim)
                )));
            }
            let name = format!("block{i}.{target:?}").to_lowercase();
            let mut s = sc.sub(&name);
            let a = s.param("a", &[cfg.rank, in_dim], Init::Normal((1.0 / in_dim as f64).sqrt()))?;
            let b = s.param("b", &[out_dim, cfg.rank], Init::Zeros)?;
            Ok(Projection::Lora(LoraLinear {
                base: frozen,
                a,
                b,
                scale,
                dropout: Arc::clone(&dropout),
            }))
        };
        let attn = Attention {
            q: wrap(LoraTarget::Query, &blk.attn.q)?,
            k: wrap(LoraTarget::Key, &blk.attn.k)?,
            v: wrap(LoraTarget::Value, &blk.attn.v)?,
            o: wrap(LoraTarget::Output, &blk.attn.o)?,
            heads: blk.attn.heads,
            width: blk.attn.width,
        };
        blocks.push(LmBlock {
            ln1: blk.ln1.detached(),
            attn,
            ln2: blk.ln2.detached(),
            mlp: blk.mlp.detached(),
        });
    }
    let m = &base.model;
    Ok(AdaptedLm {
        lora_store: store,
        lora_cfg: cfg.clone(),
        model: CausalLm {
            cfg: m.cfg,
            tok_embed: m.tok_embed.detach(),
            pos_embed: m.pos_embed.detach(),
            blocks,
            ln_f: m.ln_f.detached(),
            head: m.head.detached(),
        },
        dropout,
    })
}

/// Single linear map from alignment width to LM width, applied rowwise.
#[derive(Debug)]
pub struct AlignedProjection {
    pub store: ParamStore,
    pub linear: Linear,
}

impl AlignedProjection {
    pub fn new(input: usize, output: usize, precision: Precision, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(&mut Scope::new(&mut store, &mut rng), input, output, true)?;
        Ok(Self { store, linear })
    }

    /// `[B, Q, lm_width]`.
    pub fn project(&self, q: &QueryOutput) -> Result<Tensor> {
        Ok(self.linear.forward(&q.e_c_tokens)?)
    }
}

pub fn project_aligned(q: &QueryOutput, proj: &AlignedProjection) -> Result<Tensor> {
    proj.project(q)
}

/// The language-model side of the pipeline: tokenizer, base, adapters, projection.
#[derive(Debug)]
pub struct LmHead {
    pub tokenizer: Tokenizer,
    pub base: ToyLm,
    pub adapted: AdaptedLm,
    pub projection: AlignedProjection,
    pub aligned_width: usize,
}

impl LmHead {
    pub fn new(
        tokenizer: Tokenizer,
        base: ToyLm,
        lora: &LoraConfig,
        aligned_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let adapted = apply_lora(&base, lora, seed)?;
        let projection = AlignedProjection::new(aligned_width, base.model.width(), base.precision, seed.wrapping_add(1))?;
        Ok(Self {
            tokenizer,
            base,
            adapted,
            projection,
            aligned_width,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = LmHeader {
            lm: self.base.model.cfg,
            lora: self.adapted.lora_cfg.clone(),
            vocab: self.tokenizer.vocab().to_vec(),
            aligned_width: self.aligned_width,
            precision: self.base.precision,
        };
        let mut ck = Checkpoint::new(LM_ID, serde_json::to_value(header)?, &ParamStore::new(self.base.precision.dtype()))?;
        ck.merge("base", &self.base.store)?;
        ck.merge("lora", &self.adapted.lora_store)?;
        ck.merge("projection", &self.projection.store)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(LM_ID)?;
        let h: LmHeader = serde_json::from_value(ck.config.clone())?;
        let tokenizer = Tokenizer::from(h.vocab);
        let base = ToyLm::new(&h.lm, tokenizer.len(), h.precision, 0)?;
        base.store.load_table(&ck.sub_table("base"))?;
        let head = Self::new(tokenizer, base, &h.lora, h.aligned_width, 0)?;
        head.adapted.lora_store.load_table(&ck.sub_table("lora"))?;
        head.projection.store.load_table(&ck.sub_table("projection"))?;
        Ok(head)
    }
}

// ---------------------------------------------------------------------------
// Multimodal input

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Aligned,
    Prompt,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Train,
    Infer,
}

/// One model input: `[prompt before slot][aligned][prompt after slot][target]`.
#[derive(Debug, Clone)]
pub struct MultimodalInput {
    /// `[S, lm_width]`; `S` may be 0.
    pub aligned: Tensor,
    pub before: Vec<u32>,
    pub after: Vec<u32>,
    /// Target tokens including the closing end-of-sequence token (train mode only).
    pub target: Vec<u32>,
    pub spans: Vec<Span>,
    pub mode: InputMode,
}

impl MultimodalInput {
    pub fn aligned_len(&self) -> usize {
        self.aligned.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.before.len() + self.aligned_len() + self.after.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, kind: SpanKind) -> Vec<&Span> {
        self.spans.iter().filter(|s| s.kind == kind).collect()
    }

    /// Full token sequence with `Tokenizer::PAD_ID` at aligned positions.
    pub fn token_sequence(&self) -> Vec<u32> {
        let mut ids = self.before.clone();
        ids.extend(std::iter::repeat_n(Tokenizer::PAD_ID, self.aligned_len()));
        ids.extend_from_slice(&self.after);
        ids.extend_from_slice(&self.target);
        ids
    }

    /// Next-token labels per position and the loss mask (true where the
    /// next token lies in the target span).
    pub fn next_token_labels(&self) -> (Vec<u32>, Vec<bool>) {
        let ids = self.token_sequence();
        let l = ids.len();
        let target_start = l - self.target.len();
        let labels = (0..l).map(|p| if p + 1 < l { ids[p + 1] } else { Tokenizer::PAD_ID }).collect();
        let mask = (0..l).map(|p| p + 1 >= target_start.max(1) && p + 1 < l && self.mode == InputMode::Train).collect();
        (labels, mask)
    }

    /// Same layout with the aligned rows replaced.
    pub fn with_aligned(&self, aligned: Tensor) -> Self {
        Self {
            aligned,
            ..self.clone()
        }
    }
}

/// Builds the model input for one instance.
///
/// `aligned` is `[S, lm_width]`. In train mode the prompt must carry its
/// target text, which is appended followed by the end-of-sequence token.
pub fn assemble_input(aligned: &Tensor, prompt: &PromptBundle, tokenizer: &Tokenizer, mode: InputMode) -> Result<MultimodalInput> {
    if prompt.prompt_text().trim().is_empty() {
        return Err(Error::invalid("prompt text is empty"));
    }
    let before = tokenizer.encode_strict(&prompt.rendered_text_before_slot)?;
    let after = tokenizer.encode_strict(&prompt.rendered_text_after_slot)?;
    let target = match mode {
        InputMode::Infer => Vec::new(),
        InputMode::Train => {
            let text = prompt
                .target_text
                .as_deref()
                .ok_or_else(|| Error::invalid("train-mode input needs a target text"))?;
            let mut t = tokenizer.encode_strict(text)?;
            t.push(Tokenizer::EOS_ID);
            t
        }
    };
    let s = aligned.dims2()?.0;
    let mut spans = Vec::new();
    let mut pos = 0;
    for (kind, n) in [
        (SpanKind::Prompt, before.len()),
        (SpanKind::Aligned, s),
        (SpanKind::Prompt, after.len()),
        (SpanKind::Target, target.len()),
    ] {
        if n > 0 || kind == SpanKind::Aligned {
            spans.push(Span {
                kind,
                start: pos,
                end: pos + n,
            });
        }
        pos += n;
    }
    Ok(MultimodalInput {
        aligned: aligned.clone(),
        before,
        after,
        target,
        spans,
        mode,
    })
}

/// Mean next-token cross-entropy over target positions of a batch.
pub fn sft_loss(model: &CausalLm, inputs: &[MultimodalInput]) -> Result<Tensor> {
    let logits = model.logits(inputs)?;
    sft_loss_from_logits(&logits, inputs)
}

pub fn sft_loss_from_logits(logits: &Tensor, inputs: &[MultimodalInput]) -> Result<Tensor> {
    let (b, l, v) = logits.dims3()?;
    let mut weights = vec![0f64; b * l * v];
    let mut count = 0usize;
    for (i, inp) in inputs.iter().enumerate() {
        if inp.mode != InputMode::Train || inp.target.is_empty() {
            return Err(Error::invalid("sft_loss needs train-mode inputs with a target span"));
        }
        let (labels, mask) = inp.next_token_labels();
        for p in 0..labels.len() {
            if mask[p] {
                weights[(i * l + p) * v + labels[p] as usize] = 1.0;
                count += 1;
            }
        }
    }
    let w = nn::tensor_from_f64(weights, &[b, l, v], logits.dtype())?;
    let lp = nn::log_softmax_last(logits)?;
    Ok(((lp * w)?.sum_all()?.neg()? / count as f64)?)
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub ids: Vec<u32>,
    pub text: String,
    /// Argmax logit at each emitted step.
    pub logits: Vec<f64>,
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Greedy decoding for a batch of same-layout inputs; stops at end-of-sequence
/// or `max_new_tokens`.
pub fn generate_batch(model: &CausalLm, tokenizer: &Tokenizer, inputs: &[MultimodalInput], max_new_tokens: usize) -> Result<Vec<Generated>> {
    if max_new_tokens == 0 {
        return Err(Error::invalid("max_new_tokens must be >= 1"));
    }
    if inputs.iter().any(|i| i.mode != InputMode::Infer) {
        return Err(Error::invalid("generation needs infer-mode inputs"));
    }
    let prefix = model.embed_inputs(inputs)?.detach();
    let b = inputs.len();
    let mut emitted: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut seq = prefix;
    for _ in 0..max_new_tokens {
        let (logits, _) = model.forward_embeds(&seq, false)?;
        let l = logits.dims()[1];
        let last = logits.narrow(1, l - 1, 1)?.squeeze(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut next = Vec::with_capacity(b);
        for (i, row) in last.iter().enumerate() {
            let (tok, val) = argmax(row);
            let tok = tok as u32;
            if !done[i] {
                if tok == Tokenizer::EOS_ID {
                    done[i] = true;
                } else {
                    emitted[i].push(tok);
                    scores[i].push(val);
                }
            }
            next.push(if done[i] { Tokenizer::PAD_ID } else { tok });
        }
        if done.iter().all(|&d| d) {
            break;
        }
        let emb = model.embed_tokens(&next)?.unsqueeze(1)?.detach();
        seq = Tensor::cat(&[&seq, &emb], 1)?;
    }
    Ok(emitted
        .into_iter()
        .zip(scores)
        .map(|(ids, logits)| Generated {
            text: tokenizer.decode(&ids),
            ids,
            logits,
        })
        .collect())
}

pub fn generate(model: &CausalLm, tokenizer: &Tokenizer, input: &MultimodalInput, max_new_tokens: usize) -> Result<Generated> {
    Ok(generate_batch(model, tokenizer, std::slice::from_ref(input), max_new_tokens)?.remove(0))
}

// ---------------------------------------------------------------------------
// Label parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Alias,
    Fallback,
    None,
}

/// Maximum edit distance accepted by the last-word fallback.
pub const FALLBACK_MAX_DISTANCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub generated_text: String,
    /// `None` is the unparsed marker.
    pub parsed_label_id: Option<usize>,
    pub match_kind: MatchKind,
}

impl GenerationResult {
    pub fn from_text(text: &str, registry: &[LabelSpec]) -> Self {
        let (parsed_label_id, match_kind) = parse_label(text, registry);
        Self {
            generated_text: text.to_string(),
            parsed_label_id,
            match_kind,
        }
    }
}

/// Keyword detection over generated text.
///
/// Canonical texts are searched as case-insensitive substrings (longest
/// first, ties to the lowest id), then aliases the same way. Failing both,
/// the label whose canonical text is closest in edit distance to the last
/// word is taken if the distance is at most [`FALLBACK_MAX_DISTANCE`].
pub fn parse_label(text: &str, registry: &[LabelSpec]) -> (Option<usize>, MatchKind) {
    let hay = text.to_lowercase();
    let search = |cands: Vec<(String, usize)>| -> Option<usize> {
        let mut cands = cands;
        cands.sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()).then(a.1.cmp(&b.1)));
        cands.into_iter().find(|(c, _)| !c.is_empty() && hay.contains(c.as_str())).map(|(_, id)| id)
    };
    let canon = registry.iter().map(|s| (s.canonical_text.to_lowercase(), s.label_id)).collect();
    if let Some(id) = search(canon) {
        return (Some(id), MatchKind::Exact);
    }
    let aliases = registry
        .iter()
        .flat_map(|s| s.aliases.iter().map(move |a| (a.to_lowercase(), s.label_id)))
        .collect();
    if let Some(id) = search(aliases) {
        return (Some(id), MatchKind::Alias);
    }
    let last = hay
        .split_whitespace()
        .last()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .unwrap_or("");
    if last.is_empty() {
        return (None, MatchKind::None);
    }
    let best = registry
        .iter()
        .map(|s| (strsim::levenshtein(last, &s.canonical_text.to_lowercase()), s.label_id))
        .min();
    match best {
        Some((d, id)) if d <= FALLBACK_MAX_DISTANCE => (Some(id), MatchKind::Fallback),
        _ => (None, MatchKind::None),
    }
}

// ---------------------------------------------------------------------------
// Attention diagnostics

/// Attention mass of the final query position, summed within each span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub spans: Vec<Span>,
    /// `masses[layer][head][k]` for span `spans[k]`.
    pub masses: Vec<Vec<Vec<f64>>>,
}

impl AttentionReport {
    /// Total per (layer, head) mass on spans of `kind`.
    pub fn mass_of(&self, kind: SpanKind) -> Vec<Vec<f64>> {
        self.masses
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|head| {
                        head.iter()
                            .zip(&self.spans)
                            .filter(|(_, s)| s.kind == kind)
                            .map(|(m, _)| *m)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Raw attention probabilities `[layer][head][query][key]` for one input.
pub fn raw_attention(model: &CausalLm, input: &MultimodalInput) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    let x = model.embed_inputs(std::slice::from_ref(input))?;
    let (_, probs) = model.forward_embeds(&x, true)?;
    probs
        .iter()
        .map(|p| Ok(p.squeeze(0)?.to_dtype(DType::F64)?.to_vec3::<f64>()?))
        .collect()
}

pub fn attention_report(model: &CausalLm, input: &MultimodalInput) -> Result<AttentionReport> {
    if input.mode != InputMode::Infer {
        return Err(Error::invalid("attention_report needs an infer-mode input"));
    }
    let x = model.embed_inputs(std::slice::from_ref(input))?;
    let (_, probs) = model.forward_embeds(&x, true)?;
    let l = input.len();
    let mut masses = Vec::with_capacity(probs.len());
    for p in &probs {
        // [H, L] row of the last query.
        let last = p.squeeze(0)?.narrow(1, l - 1, 1)?.squeeze(1)?;
        let mut per_head = Vec::new();
        for h in 0..last.dims()[0] {
            let row = last.get(h)?;
            let m = input
                .spans
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        Ok(0.0)
                    } else {
                        nn::scalar(&row.narrow(0, s.start, s.len())?.sum_all()?)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            per_head.push(m);
        }
        masses.push(per_head);
    }
    Ok(AttentionReport {
        spans: input.spans.clone(),
        masses,
    })
}

/// Per-position last-dimension argmax of `[B, L, V]`, used by tests and diagnostics.
pub fn argmax_last(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.argmax(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{render_prompt, PromptTemplate, SlotOrder};
    use candle_core::Device;

    fn labels() -> Vec<LabelSpec> {
        ["standing", "walking", "jumping"]
            .iter()
            .enumerate()
            .map(|(i, t)| LabelSpec {
                label_id: i,
                canonical_text: t.to_string(),
                aliases: vec![],
            })
            .collect()
    }

    #[test]
    fn parse_exact_fallback_and_none() {
        let r = labels();
        assert_eq!(parse_label("Answer: walking.", &r), (Some(1), MatchKind::Exact));
        assert_eq!(parse_label("Answer: walkin", &r), (Some(1), MatchKind::Fallback));
        assert_eq!(parse_label("no relevant content here", &r), (None, MatchKind::None));
        assert_eq!(parse_label("", &r), (None, MatchKind::None));
    }

    #[test]
    fn parse_prefers_longest_then_lowest_id() {
        let r = vec![
            LabelSpec { label_id: 0, canonical_text: "walk".into(), aliases: vec![] },
            LabelSpec { label_id: 1, canonical_text: "fast walk".into(), aliases: vec![] },
            LabelSpec { label_id: 2, canonical_text: "jog".into(), aliases: vec!["run".into()] },
            LabelSpec { label_id: 3, canonical_text: "ran".into(), aliases: vec![] },
        ];
        assert_eq!(parse_label("a FAST WALK", &r), (Some(1), MatchKind::Exact));
        assert_eq!(parse_label("they run", &r), (Some(2), MatchKind::Alias));
        // "rxn" is distance 1 from "ran" and 3 from "jog".
        assert_eq!(parse_label("then rxn", &r), (Some(3), MatchKind::Fallback));
    }

    #[test]
    fn lora_count_closed_form() {
        let cfg = LoraConfig::default();
        assert_eq!(cfg.adapter_params(4, 128), 4 * 4 * (8 * 128 + 128 * 8));
        let lm_cfg = LmConfig { width: 128, layers: 1, heads: 4, ffn_hidden: 64, max_positions: 16, ..Default::default() };
        let base = ToyLm::new(&lm_cfg, 10, Precision::F32, 0).unwrap();
        let adapted = apply_lora(&base, &cfg, 1).unwrap();
        assert_eq!(adapted.trainable_params(), 4 * (8 * 128 + 128 * 8));
        let bad = LoraConfig { rank: 200, ..Default::default() };
        assert!(matches!(apply_lora(&base, &bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn assemble_counts_spans() {
        let tmpl = PromptTemplate {
            domain_description: "a b c d".into(),
            prior_knowledge: "e f g".into(),
            task_description: "h i j".into(),
            order: SlotOrder::SlotFirst,
        };
        // 4 + 3 + 3 words plus two newlines = 12 tokens.
        let p = render_prompt(&tmpl, "D").unwrap();
        let tok = Tokenizer::build([p.prompt_text().as_str(), "Answer: x."]);
        let aligned = Tensor::zeros((8, 4), DType::F32, &Device::Cpu).unwrap();
        let inp = assemble_input(&aligned, &p, &tok, InputMode::Infer).unwrap();
        assert_eq!(inp.len(), 20);
        assert_eq!(inp.spans, vec![
            Span { kind: SpanKind::Aligned, start: 0, end: 8 },
            Span { kind: SpanKind::Prompt, start: 8, end: 20 },
        ]);
        let tp = p.clone().with_target(&LabelSpec { label_id: 0, canonical_text: "x".into(), aliases: vec![] }, "Answer: {label}.").unwrap();
        let train = assemble_input(&aligned, &tp, &tok, InputMode::Train).unwrap();
        let (_, mask) = train.next_token_labels();
        let target = train.span(SpanKind::Target)[0].clone();
        assert_eq!(target.len(), 5); // Answer : ▁x . <eos>
        let marked: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).map(|p| p + 1).collect();
        assert_eq!(marked, target.range().collect::<Vec<_>>());

        let mut empty = p.clone();
        empty.rendered_text_after_slot.clear();
        assert!(assemble_input(&aligned, &empty, &tok, InputMode::Infer).is_err());
    }
}
