//! Hierarchical time-series encoding.
//!
//! A data-specific encoder learns from masked patch reconstruction, a
//! task-specific encoder from supervised classification. Each branch is
//! projected to a shared width and the two token sequences are concatenated
//! along the token axis.

use candle_core::{Module, Tensor, D};
use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::TimeSeriesInstance;
use crate::error::{Error, Result};
use crate::nn::{self, EncoderBlock, LayerNorm, Linear};
use crate::params::{Init, ParamStore, Precision, Scope};

pub const DATA_ENCODER_ID: &str = "data-encoder";
pub const TASK_ENCODER_ID: &str = "task-encoder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Encoder model width.
    pub embed_width: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            stride: 8,
            embed_width: 128,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self, series_len: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::config(format!(
                "stride {} must be in [1, patch_size {}]",
                self.stride, self.patch_size
            )));
        }
        if self.patch_size > series_len {
            return Err(Error::config(format!(
                "patch size {} exceeds series length {series_len}",
                self.patch_size
            )));
        }
        if self.embed_width == 0 {
            return Err(Error::config("embed_width must be >= 1"));
        }
        Ok(())
    }

    pub fn num_patches(&self, len: usize) -> usize {
        (len - self.patch_size) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: PatchConfig,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width both branches are projected to before concatenation.
    pub shared_width: usize,
    pub mask_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            layers: 2,
            heads: 4,
            ffn_hidden: 256,
            shared_width: 256,
            mask_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    DataSpecific,
    TaskSpecific,
}

/// Which branches feed the hierarchical embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    Hierarchical,
    DataOnly,
    TaskOnly,
}

/// Splits a (possibly padded) instance into channel-major flattened patches.
///
/// Patch `j` covers columns `[j·stride, j·stride + patch_size)`; its row holds
/// channel 0's window, then channel 1's, and so on.
pub fn patchify(instance: &TimeSeriesInstance, cfg: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    let len = instance.width();
    if cfg.patch_size > len {
        return Err(Error::invalid(format!(
            "patch size {} exceeds series length {len}",
            cfg.patch_size
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let q = cfg.num_patches(len);
    Ok((0..q)
        .map(|j| {
            let start = j * cfg.stride;
            instance
                .values
                .iter()
                .flat_map(|row| row[start..start + cfg.patch_size].iter().copied())
                .collect()
        })
        .collect())
}

/// A batch of patched series padded to a common length.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `[B, q, channels·patch_size]`.
    pub patches: Tensor,
    /// Patch `j` of instance `b` is real iff it starts before the true length.
    pub valid: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl PatchBatch {
    pub fn new(instances: &[&TimeSeriesInstance], pad_to: usize, cfg: &PatchConfig, precision: Precision) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut data = Vec::new();
        let mut valid = Vec::with_capacity(instances.len());
        let mut q = None;
        let mut width = 0;
        for inst in instances {
            let target = pad_to.max(inst.length);
            let (padded, _) = crate::data::pad_to_length(inst, target)?;
            let p = patchify(&padded, cfg)?;
            if *q.get_or_insert(p.len()) != p.len() {
                return Err(Error::invalid("instances in one batch patch to different counts"));
            }
            width = p[0].len();
            valid.push((0..p.len()).map(|j| j * cfg.stride < inst.length).collect());
            data.extend(p.into_iter().flatten());
        }
        let q = q.expect("non-empty");
        let patches = nn::tensor_from_f64(data, &[instances.len(), q, width], precision.dtype())?;
        Ok(Self {
            patches,
            valid,
            labels: instances.iter().map(|i| i.label_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.valid[0].len()
    }

    fn key_bias(&self) -> Result<Tensor> {
        nn::key_mask_bias(&self.valid, self.patches.dtype())
    }

    /// `[B, q, 1]` with 1/count at real patches, for mean pooling.
    fn pool_weights(&self) -> Result<Tensor> {
        let q = self.num_patches();
        let data: Vec<f64> = self
            .valid
            .iter()
            .flat_map(|row| {
                let n = row.iter().filter(|&&v| v).count().max(1) as f64;
                row.iter().map(move |&v| if v { 1.0 / n } else { 0.0 })
            })
            .collect();
        nn::tensor_from_f64(data, &[self.len(), q, 1], self.patches.dtype())
    }
}

/// Patch-level mask over the real patches of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// Masks `round(ratio · q)` distinct indices among `0..q`.
    pub fn sample(q: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let count = (ratio * q as f64).round() as usize;
        if count == 0 {
            return Err(Error::invalid(format!(
                "mask ratio {ratio} over {q} patches masks nothing; reconstruction loss undefined"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked_indices = index::sample(&mut rng, q, count).into_vec();
        masked_indices.sort_unstable();
        Ok(Self {
            ratio,
            masked_indices,
            seed,
        })
    }

    pub fn from_indices(ratio: f64, mut masked_indices: Vec<usize>, q: usize) -> Result<Self> {
        masked_indices.sort_unstable();
        masked_indices.dedup();
        if masked_indices.is_empty() {
            return Err(Error::invalid("mask has no masked patches"));
        }
        if masked_indices.iter().any(|&i| i >= q) {
            return Err(Error::invalid("mask index out of range"));
        }
        Ok(Self {
            ratio,
            masked_indices,
            seed: 0,
        })
    }

    /// One mask per instance over its real patches, seeds drawn from `seed`.
    pub fn sample_batch(batch: &PatchBatch, ratio: f64, seed: u64) -> Result<Vec<MaskSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batch
            .valid
            .iter()
            .map(|row| {
                let real = row.iter().filter(|&&v| v).count();
                MaskSpec::sample(real, ratio, rng.next_u64())
            })
            .collect()
    }
}

/// `[B, q, 1]` indicator of masked patches.
fn mask_indicator(masks: &[MaskSpec], q: usize, precision: candle_core::DType) -> Result<Tensor> {
    let mut data = vec![0f64; masks.len() * q];
    for (b, m) in masks.iter().enumerate() {
        for &i in &m.masked_indices {
            if i >= q {
                return Err(Error::invalid(format!("mask index {i} out of range for {q} patches")));
            }
            data[b * q + i] = 1.0;
        }
    }
    nn::tensor_from_f64(data, &[masks.len(), q, 1], precision)
}

/// Patch embedding + sinusoidal positions + pre-norm encoder stack.
#[derive(Debug, Clone)]
pub struct PatchTransformer {
    pub patch_embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub width: usize,
}

impl PatchTransformer {
    fn new(sc: &mut Scope<'_>, cfg: &EncoderConfig, patch_dim: usize) -> Result<Self> {
        let w = cfg.patch.embed_width;
        let patch_embed = Linear::new(&mut sc.sub("patch_embed"), patch_dim, w, true)?;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&mut sc.sub(&format!("block{i}")), w, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            blocks,
            ln_f: LayerNorm::new(&mut sc.sub("ln_f"), w)?,
            width: w,
        })
    }

    /// Embedded patches before positions; masked rows replaced by `mask_token`.
    pub fn embed_inputs(&self, batch: &PatchBatch, mask: Option<(&Tensor, &[MaskSpec])>) -> Result<Tensor> {
        let x = self.patch_embed.forward(&batch.patches)?;
        match mask {
            None => Ok(x),
            Some((token, specs)) => {
                let ind = mask_indicator(specs, batch.num_patches(), x.dtype())?;
                let keep = (ind.neg()? + 1.0)?;
                let masked = ind.broadcast_mul(&token.reshape((1, 1, self.width))?)?;
                Ok((x.broadcast_mul(&keep)? + masked)?)
            }
        }
    }

    pub fn run(&self, inputs: &Tensor, batch: &PatchBatch) -> Result<Tensor> {
        let q = batch.num_patches();
        let pos = nn::sinusoidal_positions(q, self.width, inputs.dtype())?;
        let mut x = inputs.broadcast_add(&pos)?;
        let bias = batch.key_bias()?;
        for b in &self.blocks {
            x = b.forward(&x, Some(&bias))?;
        }
        Ok(self.ln_f.forward(&x)?)
    }
}

fn check_channels(batch: &PatchBatch, cfg: &EncoderConfig, channels: usize) -> Result<()> {
    let got = batch.patches.dim(D::Minus1)?;
    let want = channels * cfg.patch.patch_size;
    if got != want {
        return Err(Error::invalid(format!(
            "batch patch width {got} does not match encoder input {want}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderHeader {
    config: EncoderConfig,
    channels: usize,
    num_classes: usize,
    precision: Precision,
}

/// Encoder trained by masked patch reconstruction.
#[derive(Debug)]
pub struct DataEncoder {
    pub store: ParamStore,
    pub cfg: EncoderConfig,
    pub channels: usize,
    precision: Precision,
    pub net: PatchTransformer,
    pub mask_token: Tensor,
    pub decoder: Linear,
    pub projection: Linear,
}

impl DataEncoder {
    pub fn new(cfg: &EncoderConfig, channels: usize, precision: Precision, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = channels * cfg.patch.patch_size;
        let w = cfg.patch.embed_width;
        let mut sc = Scope::new(&mut store, &mut rng);
        let net = PatchTransformer::new(&mut sc.sub("net"), cfg, patch_dim)?;
        let mask_token = sc.param("mask_token", &[w], Init::Normal(0.02))?;
        let decoder = Linear::new(&mut sc.sub("decoder"), w, patch_dim, true)?;
        let projection = Linear::new(&mut sc.sub("projection"), w, cfg.shared_width, true)?;
        Ok(Self {
            store,
            cfg: *cfg,
            channels,
            precision,
            net,
            mask_token,
            decoder,
            projection,
        })
    }

    pub fn encode(&self, batch: &PatchBatch) -> Result<Tensor> {
        check_channels(batch, &self.cfg, self.channels)?;
        let x = self.net.embed_inputs(batch, None)?;
        self.net.run(&x, batch)
    }

    pub fn encode_masked(&self, batch: &PatchBatch, masks: &[MaskSpec]) -> Result<Tensor> {
        check_channels(batch, &self.cfg, self.channels)?;
        let x = self.net.embed_inputs(batch, Some((&self.mask_token, masks)))?;
        self.net.run(&x, batch)
    }

    pub fn reconstruct(&self, batch: &PatchBatch, masks: &[MaskSpec]) -> Result<Tensor> {
        Ok(self.decoder.forward(&self.encode_masked(batch, masks)?)?)
    }

    pub fn project(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.projection.forward(tokens)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = EncoderHeader {
            config: self.cfg,
            channels: self.channels,
            num_classes: 0,
            precision: self.precision,
        };
        Checkpoint::new(DATA_ENCODER_ID, serde_json::to_value(header)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(DATA_ENCODER_ID)?;
        let h: EncoderHeader = serde_json::from_value(ck.config.clone())?;
        let enc = Self::new(&h.config, h.channels, h.precision, 0)?;
        enc.store.load_table(&ck.params)?;
        Ok(enc)
    }
}

/// MSE between reconstruction and target, averaged over the elements of masked patches only.
pub fn reconstruction_mse(recon: &Tensor, target: &Tensor, masks: &[MaskSpec]) -> Result<Tensor> {
    let (_, q, width) = target.dims3()?;
    let ind = mask_indicator(masks, q, target.dtype())?;
    let count: usize = masks.iter().map(|m| m.masked_indices.len()).sum();
    if count == 0 {
        return Err(Error::invalid("no masked patches"));
    }
    let sq = (recon - target)?.sqr()?.broadcast_mul(&ind)?;
    Ok((sq.sum_all()? / (count * width) as f64)?)
}

pub fn masked_reconstruction_loss(enc: &DataEncoder, batch: &PatchBatch, masks: &[MaskSpec]) -> Result<Tensor> {
    if masks.len() != batch.len() {
        return Err(Error::invalid("one mask per batch instance required"));
    }
    let recon = enc.reconstruct(batch, masks)?;
    reconstruction_mse(&recon, &batch.patches, masks)
}

/// Encoder trained with a mean-pooled softmax classification head.
#[derive(Debug)]
pub struct TaskEncoder {
    pub store: ParamStore,
    pub cfg: EncoderConfig,
    pub channels: usize,
    pub num_classes: usize,
    precision: Precision,
    pub net: PatchTransformer,
    pub head: Linear,
    pub projection: Linear,
}

impl TaskEncoder {
    pub fn new(cfg: &EncoderConfig, channels: usize, num_classes: usize, precision: Precision, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = channels * cfg.patch.patch_size;
        let w = cfg.patch.embed_width;
        let mut sc = Scope::new(&mut store, &mut rng);
        let net = PatchTransformer::new(&mut sc.sub("net"), cfg, patch_dim)?;
        let head = Linear::new(&mut sc.sub("head"), w, num_classes, true)?;
        let projection = Linear::new(&mut sc.sub("projection"), w, cfg.shared_width, true)?;
        Ok(Self {
            store,
            cfg: *cfg,
            channels,
            num_classes,
            precision,
            net,
            head,
            projection,
        })
    }

    pub fn encode(&self, batch: &PatchBatch) -> Result<Tensor> {
        check_channels(batch, &self.cfg, self.channels)?;
        let x = self.net.embed_inputs(batch, None)?;
        self.net.run(&x, batch)
    }

    pub fn logits(&self, batch: &PatchBatch) -> Result<Tensor> {
        let tokens = self.encode(batch)?;
        let pooled = tokens.broadcast_mul(&batch.pool_weights()?)?.sum(1)?;
        Ok(self.head.forward(&pooled)?)
    }

    pub fn project(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.projection.forward(tokens)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = EncoderHeader {
            config: self.cfg,
            channels: self.channels,
            num_classes: self.num_classes,
            precision: self.precision,
        };
        Checkpoint::new(TASK_ENCODER_ID, serde_json::to_value(header)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(TASK_ENCODER_ID)?;
        let h: EncoderHeader = serde_json::from_value(ck.config.clone())?;
        let enc = Self::new(&h.config, h.channels, h.num_classes, h.precision, 0)?;
        enc.store.load_table(&ck.params)?;
        Ok(enc)
    }
}

pub fn supervised_loss(enc: &TaskEncoder, batch: &PatchBatch) -> Result<Tensor> {
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= enc.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    nn::cross_entropy(&enc.logits(batch)?, &batch.labels)
}

/// Concatenated projected branch tokens.
#[derive(Debug, Clone)]
pub struct HierarchicalEmbedding {
    /// `[B, q_d + q_s, h]`.
    pub tokens: Tensor,
    pub valid: Vec<Vec<bool>>,
    /// Row index where the data-specific tokens end.
    pub boundary: usize,
}

impl HierarchicalEmbedding {
    pub fn key_bias(&self) -> Result<Tensor> {
        nn::key_mask_bias(&self.valid, self.tokens.dtype())
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn batch_size(&self) -> usize {
        self.valid.len()
    }

    /// Mean over real tokens, `[B, h]`.
    pub fn pooled(&self) -> Result<Tensor> {
        let l = self.valid[0].len();
        let data: Vec<f64> = self
            .valid
            .iter()
            .flat_map(|row| {
                let n = row.iter().filter(|&&v| v).count().max(1) as f64;
                row.iter().map(move |&v| if v { 1.0 / n } else { 0.0 })
            })
            .collect();
        let w = nn::tensor_from_f64(data, &[self.valid.len(), l, 1], self.tokens.dtype())?;
        Ok(self.tokens.broadcast_mul(&w)?.sum(1)?)
    }
}

pub fn encode_hierarchical(
    batch: &PatchBatch,
    data_enc: &DataEncoder,
    task_enc: &TaskEncoder,
    variant: EncoderVariant,
) -> Result<HierarchicalEmbedding> {
    let mut parts = Vec::new();
    let mut valid: Vec<Vec<bool>> = vec![Vec::new(); batch.len()];
    let mut boundary = 0;
    if variant != EncoderVariant::TaskOnly {
        let d = data_enc.project(&data_enc.encode(batch)?)?;
        boundary = d.dims()[1];
        parts.push(d);
        for (v, row) in valid.iter_mut().zip(&batch.valid) {
            v.extend_from_slice(row);
        }
    }
    if variant != EncoderVariant::DataOnly {
        parts.push(task_enc.project(&task_enc.encode(batch)?)?);
        for (v, row) in valid.iter_mut().zip(&batch.valid) {
            v.extend_from_slice(row);
        }
    }
    if parts.len() == 2 && parts[0].dims()[2] != parts[1].dims()[2] {
        return Err(Error::invalid("projected encoder widths differ"));
    }
    let tokens = Tensor::cat(&parts, 1)?;
    Ok(HierarchicalEmbedding {
        tokens,
        valid,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::scalar;

    fn inst(m: usize, len: usize) -> TimeSeriesInstance {
        let values = (0..m).map(|c| (0..len).map(|t| (c * 100 + t) as f64).collect()).collect();
        TimeSeriesInstance::new(values, 0).unwrap()
    }

    #[test]
    fn patch_counts() {
        let x = inst(2, 8);
        let one = patchify(&x, &PatchConfig { patch_size: 8, stride: 8, embed_width: 4 }).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 16);
        let two = patchify(&x, &PatchConfig { patch_size: 4, stride: 4, embed_width: 4 }).unwrap();
        assert_eq!(two.len(), 2);
        assert!(patchify(&x, &PatchConfig { patch_size: 9, stride: 1, embed_width: 4 }).is_err());
    }

    #[test]
    fn non_overlapping_patches_reassemble_series() {
        let x = inst(3, 12);
        let cfg = PatchConfig { patch_size: 4, stride: 4, embed_width: 4 };
        let p = patchify(&x, &cfg).unwrap();
        let mut rebuilt = vec![Vec::new(); 3];
        for patch in &p {
            for (c, row) in rebuilt.iter_mut().enumerate() {
                row.extend_from_slice(&patch[c * 4..(c + 1) * 4]);
            }
        }
        assert_eq!(rebuilt, x.values);
    }

    #[test]
    fn mask_spec_counts() {
        let m = MaskSpec::sample(16, 0.3, 1).unwrap();
        assert_eq!(m.masked_indices.len(), 5);
        assert!(MaskSpec::sample(2, 0.1, 1).is_err());
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch: PatchConfig { patch_size: 4, stride: 4, embed_width: 16 },
            layers: 1,
            heads: 2,
            ffn_hidden: 32,
            shared_width: 24,
            mask_ratio: 0.5,
        }
    }

    #[test]
    fn perfect_and_zero_reconstruction() {
        let b = generate_synthetic(2, 2, 1, 2, 16, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let batch = PatchBatch::new(&refs, 16, &small_cfg().patch, Precision::F64).unwrap();
        let masks = MaskSpec::sample_batch(&batch, 0.5, 3).unwrap();
        let zero = reconstruction_mse(&batch.patches, &batch.patches, &masks).unwrap();
        assert_eq!(scalar(&zero).unwrap(), 0.0);

        let zeros = batch.patches.zeros_like().unwrap();
        let got = scalar(&reconstruction_mse(&zeros, &batch.patches, &masks).unwrap()).unwrap();
        let p = batch.patches.to_vec3::<f64>().unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for (b, m) in masks.iter().enumerate() {
            for &i in &m.masked_indices {
                for v in &p[b][i] {
                    sum += v * v;
                    n += 1;
                }
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn masking_leaves_unmasked_inputs_alone() {
        let cfg = small_cfg();
        let enc = DataEncoder::new(&cfg, 2, Precision::F64, 5).unwrap();
        let b = generate_synthetic(2, 2, 1, 2, 16, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let batch = PatchBatch::new(&refs, 16, &cfg.patch, Precision::F64).unwrap();
        let masks = MaskSpec::sample_batch(&batch, 0.5, 3).unwrap();
        let plain = enc.net.embed_inputs(&batch, None).unwrap().to_vec3::<f64>().unwrap();
        let masked = enc
            .net
            .embed_inputs(&batch, Some((&enc.mask_token, &masks)))
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        let token = enc.mask_token.to_vec1::<f64>().unwrap();
        for (b, m) in masks.iter().enumerate() {
            for j in 0..batch.num_patches() {
                if m.masked_indices.contains(&j) {
                    assert_eq!(masked[b][j], token);
                } else {
                    assert_eq!(masked[b][j], plain[b][j]);
                }
            }
        }
    }

    #[test]
    fn uniform_head_gives_ln_c() {
        let cfg = small_cfg();
        let enc = TaskEncoder::new(&cfg, 2, 5, Precision::F64, 1).unwrap();
        for name in ["head.weight", "head.bias"] {
            let v = enc.store.var(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let b = generate_synthetic(5, 1, 1, 2, 16, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let batch = PatchBatch::new(&refs, 16, &cfg.patch, Precision::F64).unwrap();
        let l = scalar(&supervised_loss(&enc, &batch).unwrap()).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_shapes_and_branch_decomposition() {
        let cfg = EncoderConfig::default();
        let d = DataEncoder::new(&cfg, 2, Precision::F32, 1).unwrap();
        let t = TaskEncoder::new(&cfg, 2, 3, Precision::F32, 2).unwrap();
        let b = generate_synthetic(3, 1, 1, 2, 128, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let batch = PatchBatch::new(&refs, 128, &cfg.patch, Precision::F32).unwrap();
        let z = encode_hierarchical(&batch, &d, &t, EncoderVariant::Hierarchical).unwrap();
        assert_eq!(z.tokens.dims(), &[3, 32, 256]);
        assert_eq!(z.boundary, 16);
        let standalone = d.project(&d.encode(&batch).unwrap()).unwrap();
        let head = z.tokens.narrow(1, 0, 16).unwrap();
        assert_eq!(head.to_vec3::<f32>().unwrap(), standalone.to_vec3::<f32>().unwrap());
        let tail = t.project(&t.encode(&batch).unwrap()).unwrap();
        assert_eq!(
            z.tokens.narrow(1, 16, 16).unwrap().to_vec3::<f32>().unwrap(),
            tail.to_vec3::<f32>().unwrap()
        );
    }

    #[test]
    fn zeroed_task_projection_zeroes_task_rows() {
        let cfg = small_cfg();
        let d = DataEncoder::new(&cfg, 2, Precision::F64, 1).unwrap();
        let t = TaskEncoder::new(&cfg, 2, 2, Precision::F64, 2).unwrap();
        let b = generate_synthetic(2, 1, 1, 2, 16, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let batch = PatchBatch::new(&refs, 16, &cfg.patch, Precision::F64).unwrap();
        let before = encode_hierarchical(&batch, &d, &t, EncoderVariant::Hierarchical).unwrap();
        for name in ["projection.weight", "projection.bias"] {
            let v = t.store.var(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let after = encode_hierarchical(&batch, &d, &t, EncoderVariant::Hierarchical).unwrap();
        let q = batch.num_patches();
        let tail = after.tokens.narrow(1, q, q).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(scalar(&tail).unwrap(), 0.0);
        assert_eq!(
            before.tokens.narrow(1, 0, q).unwrap().to_vec3::<f64>().unwrap(),
            after.tokens.narrow(1, 0, q).unwrap().to_vec3::<f64>().unwrap()
        );
    }

    #[test]
    fn appended_padding_does_not_change_real_tokens() {
        let cfg = small_cfg();
        let t = TaskEncoder::new(&cfg, 2, 2, Precision::F64, 2).unwrap();
        let b = generate_synthetic(2, 1, 1, 2, 16, 0.1, 0).unwrap();
        let refs: Vec<_> = b.train.iter().collect();
        let short = PatchBatch::new(&refs, 16, &cfg.patch, Precision::F64).unwrap();
        let long = PatchBatch::new(&refs, 28, &cfg.patch, Precision::F64).unwrap();
        let a = t.encode(&short).unwrap().to_vec3::<f64>().unwrap();
        let c = t.encode(&long).unwrap().to_vec3::<f64>().unwrap();
        // Sinusoidal positions depend only on the index, so real rows are equal.
        for bi in 0..2 {
            for j in 0..4 {
                for (x, y) in a[bi][j].iter().zip(&c[bi][j]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        assert!(long.valid[0][4..].iter().all(|&v| !v));
    }
}
