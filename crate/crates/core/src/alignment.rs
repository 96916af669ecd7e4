//! Dual-view alignment between hierarchical series embeddings and label text.
//!
//! Learned queries and label-text tokens pass through one shared
//! self-attention stack. Queries then cross-attend to the series tokens (which
//! never enter self-attention). Pairs are scored two ways: the sigmoid of a
//! dot product (coarse) and a learned matcher on the concatenated pair (fine).

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use candle_core::{DType, Module, Tensor, D};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::HierarchicalEmbedding;
use crate::error::{Error, Result};
use crate::nn::{self, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamStore, Precision, Scope};

pub const ALIGNMENT_ID: &str = "alignment";

/// Probabilities inside the BCE losses are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Coarse: max dot product over queries. Fine: mean of per-query logits.
    #[default]
    Max,
    /// Both views score the mean query vector.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_queries: usize,
    pub negatives_per_positive: usize,
    pub aggregation: Aggregation,
    pub width: usize,
    pub heads: usize,
    pub self_attention_layers: usize,
    pub ffn_hidden: usize,
    pub matcher_hidden: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            num_queries: 8,
            negatives_per_positive: 2,
            aggregation: Aggregation::Max,
            width: 256,
            heads: 4,
            self_attention_layers: 2,
            ffn_hidden: 512,
            matcher_hidden: 128,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::config("alignment weights need alpha, beta >= 0 and alpha + beta > 0"));
        }
        if self.num_queries == 0 || self.negatives_per_positive == 0 {
            return Err(Error::config("num_queries and negatives_per_positive must be >= 1"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("alignment width must be divisible by heads"));
        }
        Ok(())
    }
}

/// Word-level vocabulary over label descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub const UNK: usize = 0;

    pub fn split(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(Self::split).collect();
        let mut words = vec!["<unk>".to_string()];
        words.extend(set);
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = Self::split(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(Self::UNK))
            .collect();
        if ids.is_empty() {
            vec![Self::UNK]
        } else {
            ids
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedQuerySet {
    /// `[Q, h]`, trainable.
    pub queries: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `[h]`.
    pub e_t: Tensor,
    pub source_text: String,
}

#[derive(Debug, Clone)]
pub struct QueryOutput {
    /// `[B, Q, h]`.
    pub e_c_tokens: Tensor,
}

impl QueryOutput {
    /// Mean over queries, `[B, h]`.
    pub fn e_c(&self) -> Result<Tensor> {
        Ok(self.e_c_tokens.mean(1)?)
    }
}

/// Pre-norm residual self-attention block (no feed-forward).
#[derive(Debug)]
pub struct SelfAttentionBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// The self-attention stack both pathways run through.
#[derive(Debug)]
pub struct SharedSelfAttention {
    pub blocks: Vec<SelfAttentionBlock>,
}

impl SharedSelfAttention {
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            let h = b.ln.forward(&x)?;
            x = (&x + b.attn.forward(&h, &h, bias)?)?;
        }
        Ok(x)
    }

    /// Every tensor of the stack, for identity checks.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.ln.gamma, &b.ln.beta]);
            for p in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o] {
                out.push(&p.weight);
                out.extend(p.bias.as_ref());
            }
        }
        out
    }
}

/// Output feed-forward layer of a pathway: `FFN(LN(x))`.
#[derive(Debug)]
pub struct OutputFfn {
    pub ln: LayerNorm,
    pub ffn: FeedForward,
}

impl OutputFfn {
    fn new(sc: &mut Scope<'_>, width: usize, hidden: usize) -> Result<Self> {
        let ln = LayerNorm::new(&mut sc.sub("ln"), width)?;
        // Small output layer keeps initial dot products away from sigmoid saturation.
        let ffn = FeedForward {
            up: Linear::new(&mut sc.sub("up"), width, hidden, true)?,
            down: Linear::with_init(&mut sc.sub("down"), hidden, width, true, Init::Normal(0.02))?,
        };
        Ok(Self { ln, ffn })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.ffn.forward(&self.ln.forward(x)?)?)
    }
}

/// Text pathway: token embedding, shared self-attention, feed-forward, mean pool.
#[derive(Debug)]
pub struct TextPathway {
    pub shared: Arc<SharedSelfAttention>,
    pub token_embed: Tensor,
    pub ffn: OutputFfn,
}

/// Query pathway: learned queries, shared self-attention, cross-attention over Z, feed-forward.
#[derive(Debug)]
pub struct QueryPathway {
    pub shared: Arc<SharedSelfAttention>,
    pub queries: LearnedQuerySet,
    pub cross_ln: LayerNorm,
    pub cross: Attention,
    pub ffn: OutputFfn,
}

/// Two-layer map from a concatenated `(e_c ⊕ e_t)` pair to one logit.
#[derive(Debug)]
pub struct FineMatcher {
    pub hidden: Linear,
    pub out: Linear,
    width: usize,
}

impl FineMatcher {
    /// Logits for every (row, text) combination: `[B, Q, C]` with `e_c [B, Q, h]`, `e_t [C, h]`.
    ///
    /// The first layer is split into its `e_c` and `e_t` halves, which is
    /// algebraically identical to applying it to each concatenation.
    pub fn pair_logits(&self, e_c: &Tensor, e_t: &Tensor) -> Result<Tensor> {
        let h = self.width;
        let w = &self.hidden.weight;
        let wc = w.narrow(1, 0, h)?;
        let wt = w.narrow(1, h, h)?;
        let (b, q, _) = e_c.dims3()?;
        let c = e_t.dims()[0];
        let a = e_c.reshape((b * q, h))?.matmul(&wc.t()?)?.reshape((b, q, 1, ()))?;
        let mut t = e_t.matmul(&wt.t()?)?;
        if let Some(bias) = &self.hidden.bias {
            t = t.broadcast_add(bias)?;
        }
        let t = t.reshape((1, 1, c, ()))?;
        let hid = a.broadcast_add(&t)?.gelu()?;
        Ok(self.out.forward(&hid)?.squeeze(D::Minus1)?)
    }

    /// Probability for a single concatenated pair.
    pub fn prob(&self, e_c: &Tensor, e_t: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[e_c, e_t], 0)?.unsqueeze(0)?;
        let logit = self.out.forward(&self.hidden.forward(&cat)?.gelu()?)?;
        Ok(nn::sigmoid(&logit.flatten_all()?)?.squeeze(0)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlignmentHeader {
    config: AlignmentConfig,
    vocab: Vec<String>,
    precision: Precision,
}

#[derive(Debug)]
pub struct AlignmentModule {
    pub store: ParamStore,
    pub cfg: AlignmentConfig,
    pub vocab: TextVocab,
    precision: Precision,
    pub text: TextPathway,
    pub query: QueryPathway,
    pub matcher: FineMatcher,
}

impl AlignmentModule {
    pub fn new(cfg: &AlignmentConfig, vocab: TextVocab, precision: Precision, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.width;
        let mut sc = Scope::new(&mut store, &mut rng);
        let blocks = (0..cfg.self_attention_layers)
            .map(|i| {
                let mut b = sc.sub(&format!("shared_sa{i}"));
                Ok(SelfAttentionBlock {
                    ln: LayerNorm::new(&mut b.sub("ln"), h)?,
                    attn: Attention::new(&mut b.sub("attn"), h, cfg.heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let shared = Arc::new(SharedSelfAttention { blocks });
        let token_embed = sc.param("text.token_embed", &[vocab.len(), h], Init::Normal(0.5))?;
        let text_ffn = OutputFfn::new(&mut sc.sub("text.ffn"), h, cfg.ffn_hidden)?;
        let queries = sc.param("query.queries", &[cfg.num_queries, h], Init::Normal(0.5))?;
        let cross_ln = LayerNorm::new(&mut sc.sub("query.cross_ln"), h)?;
        let cross = Attention::new(&mut sc.sub("query.cross"), h, cfg.heads)?;
        let query_ffn = OutputFfn::new(&mut sc.sub("query.ffn"), h, cfg.ffn_hidden)?;
        let hidden = Linear::new(&mut sc.sub("matcher.hidden"), 2 * h, cfg.matcher_hidden, true)?;
        let out = Linear::new(&mut sc.sub("matcher.out"), cfg.matcher_hidden, 1, true)?;
        Ok(Self {
            store,
            cfg: *cfg,
            vocab,
            precision,
            text: TextPathway {
                shared: Arc::clone(&shared),
                token_embed,
                ffn: text_ffn,
            },
            query: QueryPathway {
                shared,
                queries: LearnedQuerySet { queries },
                cross_ln,
                cross,
                ffn: query_ffn,
            },
            matcher: FineMatcher {
                hidden,
                out,
                width: h,
            },
        })
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// `[C, h]` text embeddings for several label texts.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::invalid("no texts to embed"));
        }
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.vocab.encode(t)).collect();
        let l = ids.iter().map(Vec::len).max().unwrap_or(1);
        let h = self.cfg.width;
        let flat: Vec<u32> = ids
            .iter()
            .flat_map(|row| (0..l).map(move |i| row.get(i).copied().unwrap_or(TextVocab::UNK) as u32))
            .collect();
        let idx = Tensor::from_vec(flat, (texts.len() * l,), self.text.token_embed.device())?;
        let x = self.text.token_embed.index_select(&idx, 0)?.reshape((texts.len(), l, h))?;
        let x = x.broadcast_add(&nn::sinusoidal_positions(l, h, self.dtype())?)?;
        let valid: Vec<Vec<bool>> = ids.iter().map(|row| (0..l).map(|i| i < row.len()).collect()).collect();
        let bias = nn::key_mask_bias(&valid, self.dtype())?;
        let x = self.text.shared.forward(&x, Some(&bias))?;
        let x = self.text.ffn.forward(&x)?;
        let weights: Vec<f64> = ids
            .iter()
            .flat_map(|row| (0..l).map(move |i| if i < row.len() { 1.0 / row.len() as f64 } else { 0.0 }))
            .collect();
        let weights = nn::tensor_from_f64(weights, &[texts.len(), l, 1], self.dtype())?;
        Ok(x.broadcast_mul(&weights)?.sum(1)?)
    }

    pub fn embed_text(&self, label_text: &str) -> Result<TextEmbedding> {
        if label_text.trim().is_empty() {
            return Err(Error::invalid("label text is empty"));
        }
        let e = self.embed_texts(&[label_text.to_string()])?;
        Ok(TextEmbedding {
            e_t: e.squeeze(0)?,
            source_text: label_text.to_string(),
        })
    }

    /// Query outputs and the cross-attention probabilities `[B, H, Q, L]`.
    pub fn query_output_with_attention(&self, z: &HierarchicalEmbedding) -> Result<(QueryOutput, Tensor)> {
        let h = self.cfg.width;
        if z.width() != h {
            return Err(Error::invalid(format!(
                "hierarchical embedding width {} differs from alignment width {h}",
                z.width()
            )));
        }
        let b = z.batch_size();
        let q = self.cfg.num_queries;
        let queries = self.query.queries.queries.unsqueeze(0)?.broadcast_as((b, q, h))?.contiguous()?;
        let x = self.query.shared.forward(&queries, None)?;
        let bias = z.key_bias()?;
        let hq = self.query.cross_ln.forward(&x)?;
        let (att, probs) = self.query.cross.forward_with_probs(&hq, &z.tokens, Some(&bias))?;
        let x = (x + att)?;
        let x = self.query.ffn.forward(&x)?;
        Ok((QueryOutput { e_c_tokens: x }, probs))
    }

    pub fn compute_query_output(&self, z: &HierarchicalEmbedding) -> Result<QueryOutput> {
        Ok(self.query_output_with_attention(z)?.0)
    }

    /// Coarse logits `[B, C]` under the configured aggregation.
    pub fn coarse_logits(&self, q: &QueryOutput, texts: &Tensor) -> Result<Tensor> {
        coarse_logits(q, texts, self.cfg.aggregation)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = AlignmentHeader {
            config: self.cfg,
            vocab: self.vocab.words.clone(),
            precision: self.precision,
        };
        Checkpoint::new(ALIGNMENT_ID, serde_json::to_value(header)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(ALIGNMENT_ID)?;
        let h: AlignmentHeader = serde_json::from_value(ck.config.clone())?;
        let m = Self::new(&h.config, TextVocab::from_words(h.vocab), h.precision, 0)?;
        m.store.load_table(&ck.params)?;
        Ok(m)
    }
}

/// `F(e_c, e_t) = sigmoid(e_c · e_t)` for two vectors.
pub fn coarse_prob(e_c: &Tensor, e_t: &Tensor) -> Result<Tensor> {
    if e_c.dims() != e_t.dims() {
        return Err(Error::invalid("coarse_prob needs equal widths"));
    }
    Ok(nn::sigmoid(&(e_c * e_t)?.sum_all()?)?)
}

pub fn coarse_logits(q: &QueryOutput, texts: &Tensor, agg: Aggregation) -> Result<Tensor> {
    let (b, nq, h) = q.e_c_tokens.dims3()?;
    let c = texts.dims()[0];
    match agg {
        Aggregation::Max => {
            let dots = q.e_c_tokens.reshape((b * nq, h))?.matmul(&texts.t()?)?.reshape((b, nq, c))?;
            Ok(dots.max(1)?)
        }
        Aggregation::Mean => Ok(q.e_c()?.matmul(&texts.t()?)?),
    }
}

pub fn fine_logits(q: &QueryOutput, texts: &Tensor, matcher: &FineMatcher, agg: Aggregation) -> Result<Tensor> {
    match agg {
        Aggregation::Max => Ok(matcher.pair_logits(&q.e_c_tokens, texts)?.mean(1)?),
        Aggregation::Mean => Ok(matcher.pair_logits(&q.e_c()?.unsqueeze(1)?, texts)?.squeeze(1)?),
    }
}

/// Positive and negative (series row, label row) pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub query: QueryOutput,
    /// `[C, h]`.
    pub texts: Tensor,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn new(query: QueryOutput, texts: Tensor, positives: Vec<(usize, usize)>, negatives: Vec<(usize, usize)>) -> Result<Self> {
        let b = query.e_c_tokens.dims()[0];
        let c = texts.dims()[0];
        if positives.is_empty() {
            return Err(Error::invalid("pair batch needs at least one positive"));
        }
        let mut seen = BTreeSet::new();
        for &(i, t) in positives.iter().chain(&negatives) {
            if i >= b || t >= c {
                return Err(Error::invalid(format!("pair ({i}, {t}) out of range")));
            }
            if !seen.insert((i, t)) {
                return Err(Error::invalid(format!("pair ({i}, {t}) appears twice")));
            }
        }
        Ok(Self {
            query,
            texts,
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn masks(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let b = self.query.e_c_tokens.dims()[0];
        let c = self.texts.dims()[0];
        let mut pos = vec![0f64; b * c];
        let mut neg = vec![0f64; b * c];
        for &(i, t) in &self.positives {
            pos[i * c + t] = 1.0;
        }
        for &(i, t) in &self.negatives {
            neg[i * c + t] = 1.0;
        }
        Ok((
            nn::tensor_from_f64(pos, &[b, c], dtype)?,
            nn::tensor_from_f64(neg, &[b, c], dtype)?,
        ))
    }

    /// Clamped binary cross-entropy over the selected entries of `logits [B, C]`.
    pub fn bce(&self, logits: &Tensor) -> Result<Tensor> {
        let (pos, neg) = self.masks(logits.dtype())?;
        // Clamping logits at ±logit(1 - PROB_CLAMP) equals clamping probabilities,
        // and keeps the backward pass finite under saturation.
        let bound = ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln();
        let x = logits.clamp(-bound, bound)?;
        let lp = (x.neg()?.exp()? + 1.0)?.log()?.neg()?;
        let lq = (x.exp()? + 1.0)?.log()?.neg()?;
        let total = ((lp * pos)?.sum_all()? + (lq * neg)?.sum_all()?)?;
        Ok((total.neg()? / self.len() as f64)?)
    }
}

pub fn coarse_loss(batch: &PairBatch, agg: Aggregation) -> Result<Tensor> {
    batch.bce(&coarse_logits(&batch.query, &batch.texts, agg)?)
}

pub fn fine_loss(batch: &PairBatch, matcher: &FineMatcher, agg: Aggregation) -> Result<Tensor> {
    batch.bce(&fine_logits(&batch.query, &batch.texts, matcher, agg)?)
}

#[derive(Debug, Clone)]
pub struct AlignmentLosses {
    pub total: Tensor,
    pub coarse: Tensor,
    pub fine: Tensor,
}

/// `alpha · coarse + beta · fine`.
pub fn total_alignment_loss(batch: &PairBatch, matcher: &FineMatcher, cfg: &AlignmentConfig) -> Result<AlignmentLosses> {
    cfg.validate()?;
    let coarse = coarse_loss(batch, cfg.aggregation)?;
    let fine = fine_loss(batch, matcher, cfg.aggregation)?;
    let total = ((&coarse * cfg.alpha)? + (&fine * cfg.beta)?)?;
    Ok(AlignmentLosses { total, coarse, fine })
}

/// Positive pairs for every instance plus `k` distinct wrong labels each.
///
/// `k` is capped at `num_labels - 1`.
pub fn sample_negatives(labels: &[usize], num_labels: usize, k: usize, rng: &mut impl Rng) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if num_labels < 2 {
        return Err(Error::invalid("negative sampling needs at least two registered labels"));
    }
    let k = k.min(num_labels - 1);
    let mut pos = Vec::with_capacity(labels.len());
    let mut neg = Vec::with_capacity(labels.len() * k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_labels {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        pos.push((i, y));
        for j in index::sample(rng, num_labels - 1, k) {
            let t = if j >= y { j + 1 } else { j };
            neg.push((i, t));
        }
    }
    Ok((pos, neg))
}

/// One row of the per-pair diagnostic dump.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairDiagnostic {
    pub instance: usize,
    pub label: usize,
    pub positive: bool,
    pub dot: f64,
    pub coarse_prob: f64,
    pub fine_prob: f64,
}

pub fn pair_diagnostics(module: &AlignmentModule, batch: &PairBatch) -> Result<Vec<PairDiagnostic>> {
    let dots = coarse_logits(&batch.query, &batch.texts, module.cfg.aggregation)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    let fine = fine_logits(&batch.query, &batch.texts, &module.matcher, module.cfg.aggregation)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let rows = batch
        .positives
        .iter()
        .map(|&p| (p, true))
        .chain(batch.negatives.iter().map(|&p| (p, false)))
        .map(|((i, t), positive)| PairDiagnostic {
            instance: i,
            label: t,
            positive,
            dot: dots[i][t],
            coarse_prob: sig(dots[i][t]),
            fine_prob: sig(fine[i][t]),
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::Device;

    fn v(x: &[f64]) -> Tensor {
        Tensor::new(x, &Device::Cpu).unwrap()
    }

    #[test]
    fn coarse_prob_closed_forms() {
        assert_eq!(scalar(&coarse_prob(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap()).unwrap(), 0.5);
        let p = scalar(&coarse_prob(&v(&[3f64.ln()]), &v(&[1.0])).unwrap()).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        assert!(coarse_prob(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn vocab_maps_unknown_words() {
        let vocab = TextVocab::build(["class-0 frequency pattern", "walking"]);
        assert_eq!(vocab.encode("Walking"), vec![vocab.encode("walking")[0]]);
        assert_eq!(vocab.encode("skipping"), vec![TextVocab::UNK]);
        assert_eq!(vocab.encode("class-0").len(), 2);
    }

    #[test]
    fn negatives_counting_and_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, n) = sample_negatives(&[0, 1, 2, 1], 3, 2, &mut rng).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(n.len(), 8);
        for pair in &n {
            assert!(!p.contains(pair));
        }
        assert!(sample_negatives(&[0, 0], 1, 1, &mut rng).is_err());
    }

    #[test]
    fn negative_labels_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labels = vec![0usize; 10_000];
        let (_, n) = sample_negatives(&labels, 5, 1, &mut rng).unwrap();
        let mut counts = [0f64; 5];
        for (_, t) in n {
            counts[t] += 1.0;
        }
        assert_eq!(counts[0], 0.0);
        // Binomial(10000, 1/4) per other class.
        let mean = 2500.0;
        let sd = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in &counts[1..] {
            assert!((c - mean).abs() <= 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn pair_batch_rejects_duplicates() {
        let q = QueryOutput {
            e_c_tokens: Tensor::zeros((2, 1, 3), DType::F64, &Device::Cpu).unwrap(),
        };
        let t = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(PairBatch::new(q.clone(), t.clone(), vec![(0, 0)], vec![(0, 0)]).is_err());
        assert!(PairBatch::new(q, t, vec![], vec![(0, 1)]).is_err());
    }

    #[test]
    fn shared_stack_is_one_object() {
        let vocab = TextVocab::build(["a b"]);
        let cfg = AlignmentConfig { width: 16, heads: 2, ffn_hidden: 16, matcher_hidden: 8, num_queries: 2, ..Default::default() };
        let m = AlignmentModule::new(&cfg, vocab, Precision::F64, 0).unwrap();
        assert!(Arc::ptr_eq(&m.text.shared, &m.query.shared));
        let a: Vec<_> = m.text.shared.tensors().iter().map(|t| t.id()).collect();
        let b: Vec<_> = m.query.shared.tensors().iter().map(|t| t.id()).collect();
        assert_eq!(a, b);
    }
}
