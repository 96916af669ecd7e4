//! Transformer building blocks written against candle's autograd.
//!
//! Softmax, layer norm and sigmoid are composed from primitive ops so that
//! every path is differentiable in both f32 and f64.

use candle_core::{DType, Module, Tensor, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use crate::error::Result;
use crate::params::{Init, Scope};

/// Additive value used to exclude attention keys.
pub const MASK_VALUE: f64 = -1e9;

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Mean cross-entropy of `logits [N, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let mut onehot = vec![0f64; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, c), logits.device())?.to_dtype(logits.dtype())?;
    let lp = log_softmax_last(logits)?;
    Ok(((lp * onehot)?.sum_all()?.neg()? / n as f64)?)
}

/// Scalar tensor value as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive key mask `[B, 1, 1, Lk]` from booleans (true = attend).
pub fn key_mask_bias(valid: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let b = valid.len();
    let lk = valid.first().map_or(0, Vec::len);
    let data: Vec<f64> = valid
        .iter()
        .flat_map(|row| row.iter().map(|&v| if v { 0.0 } else { MASK_VALUE }))
        .collect();
    tensor_from_f64(data, &[b, 1, 1, lk], dtype)
}

/// Additive causal mask `[1, 1, L, L]`.
pub fn causal_bias(len: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { MASK_VALUE }))
        .collect();
    tensor_from_f64(data, &[1, 1, len, len], dtype)
}

/// Fixed sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; len * width];
    for p in 0..len {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = p as f64 * rate;
            data[p * width + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    tensor_from_f64(data, &[len, width], dtype)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(sc: &mut Scope<'_>, input: usize, output: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        Self::with_init(sc, input, output, bias, Init::Normal(std))
    }

    pub fn with_init(sc: &mut Scope<'_>, input: usize, output: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = sc.param("weight", &[output, input], init)?;
        let bias = if bias {
            Some(sc.param("bias", &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Copy whose tensors no longer track gradients; storage is shared.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
        }
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().expect("non-scalar") = self.out_dim();
        y.reshape(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(sc: &mut Scope<'_>, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: sc.param("gamma", &[width], Init::Ones)?,
            beta: sc.param("beta", &[width], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
            eps: self.eps,
        }
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(sc: &mut Scope<'_>, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut sc.sub("up"), width, hidden, true)?,
            down: Linear::new(&mut sc.sub("down"), hidden, width, true)?,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            up: self.up.detached(),
            down: self.down.detached(),
        }
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Multi-head attention, generic over the projection type so that the
/// language model can swap in low-rank adapted projections.
#[derive(Debug, Clone)]
pub struct Attention<P = Linear> {
    pub q: P,
    pub k: P,
    pub v: P,
    pub o: P,
    pub heads: usize,
    pub width: usize,
}

impl Attention<Linear> {
    pub fn new(sc: &mut Scope<'_>, width: usize, heads: usize) -> Result<Self> {
        assert!(width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Ok(Self {
            q: Linear::new(&mut sc.sub("q"), width, width, true)?,
            k: Linear::new(&mut sc.sub("k"), width, width, true)?,
            v: Linear::new(&mut sc.sub("v"), width, width, true)?,
            o: Linear::new(&mut sc.sub("o"), width, width, true)?,
            heads,
            width,
        })
    }
}

impl<P: Module> Attention<P> {
    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        x.reshape((b, l, self.heads, self.width / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the attended output and the attention probabilities
    /// `[B, H, Lq, Lk]`.
    pub fn forward_with_probs(
        &self,
        query: &Tensor,
        context: &Tensor,
        bias: Option<&Tensor>,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, lq, _) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((self.width / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = softmax_last(&scores)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.width))?;
        Ok((self.o.forward(&out)?, probs))
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_probs(query, context, bias)?.0)
    }
}

/// Pre-norm transformer encoder block (self-attention + feed-forward).
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(sc: &mut Scope<'_>, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut sc.sub("ln1"), width)?,
            attn: Attention::new(&mut sc.sub("attn"), width, heads)?,
            ln2: LayerNorm::new(&mut sc.sub("ln2"), width)?,
            ffn: FeedForward::new(&mut sc.sub("ffn"), width, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        x + self.ffn.forward(&h)?
    }
}

/// Inverted dropout driven by a seeded generator; inactive unless switched on.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: Mutex<ChaCha8Rng>,
    active: AtomicBool,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            active: AtomicBool::new(false),
        }
    }

    pub fn reseed(&self, seed: u64) {
        *self.rng.lock().expect("dropout rng poisoned") = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_active(&self, active: bool) {
        self.active.store(active, Ordering::SeqCst);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if !self.active.load(Ordering::SeqCst) || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let mut rng = self.rng.lock().expect("dropout rng poisoned");
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tensor_from_f64(mask, x.dims(), x.dtype())?;
        Ok((x * mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let logits = Tensor::zeros((4, 7), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&cross_entropy(&logits, &[0, 3, 6, 2]).unwrap()).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_cross_entropy_vanishes() {
        let logits = Tensor::new(&[[60.0f64, 0.0], [0.0, 60.0]], &Device::Cpu).unwrap();
        assert!(scalar(&cross_entropy(&logits, &[0, 1]).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut Scope::new(&mut store, &mut rng), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let m: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn masked_keys_receive_zero_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        let attn = Attention::new(&mut Scope::new(&mut store, &mut rng), 8, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let bias = key_mask_bias(&[vec![true, true, false]], DType::F64).unwrap();
        let (_, p) = attn.forward_with_probs(&x, &x, Some(&bias)).unwrap();
        let p = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, v) in p.iter().enumerate() {
            if i % 3 == 2 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
