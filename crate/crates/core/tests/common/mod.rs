//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use chronolm::encoders::PatchConfig;
use chronolm::pipeline::DatasetSource;
use chronolm::{
    AlignmentConfig, EncoderConfig, LmConfig, LoraConfig, RunConfig, Stage, StageConfig, SyntheticSpec,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A pipeline small enough to run end to end in seconds.
pub fn small_config(out: &Path) -> RunConfig {
    let width = 32;
    RunConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            num_classes: 3,
            per_class_train: 12,
            per_class_test: 6,
            channels: 2,
            length: 32,
            noise_sigma: 0.1,
            seed: 3,
        }),
        encoder: EncoderConfig {
            patch: PatchConfig { patch_size: 8, stride: 8, embed_width: width },
            layers: 1,
            heads: 2,
            ffn_hidden: 64,
            shared_width: width,
            mask_ratio: 0.3,
        },
        alignment: AlignmentConfig {
            num_queries: 4,
            width,
            heads: 2,
            self_attention_layers: 1,
            ffn_hidden: 64,
            matcher_hidden: 32,
            ..AlignmentConfig::default()
        },
        lm: LmConfig {
            width,
            layers: 1,
            heads: 2,
            ffn_hidden: 64,
            max_positions: 96,
            max_new_tokens: 12,
            pretrain_steps: 40,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
        },
        lora: LoraConfig { rank: 4, alpha: 8.0, ..LoraConfig::default() },
        stages: vec![
            StageConfig { epochs: 4, ..StageConfig::new(Stage::E) },
            StageConfig { epochs: 6, warmup: 4, learning_rate: 2e-3, ..StageConfig::new(Stage::A) },
            StageConfig { epochs: 40, warmup: 8, learning_rate: 5e-3, ..StageConfig::new(Stage::G) },
        ],
        attention_instances: 4,
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

pub fn values(v: &Var) -> Vec<f64> {
    v.as_tensor()
        .flatten_all()
        .and_then(|t| t.to_dtype(DType::F64))
        .and_then(|t| t.to_vec1::<f64>())
        .expect("readable parameter")
}

pub fn assign(v: &Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, v.as_tensor().dims(), v.as_tensor().device())
        .and_then(|t| t.to_dtype(v.as_tensor().dtype()))
        .expect("same shape");
    v.set(&t).expect("same shape and dtype");
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub max_abs_grad: f64,
}

/// Denominator floor so near-zero gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;

/// Compares backprop gradients of `loss` with five-point central differences
/// on up to `per_var` randomly chosen elements of every variable.
pub fn grad_check(
    vars: &[Var],
    loss: &dyn Fn() -> chronolm::Result<Tensor>,
    per_var: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let eval = || loss().and_then(|l| chronolm::nn::scalar(&l)).expect("loss evaluates");
    let grads = loss().expect("loss evaluates").backward().expect("backward");
    let mut out = GradCheck { max_rel_err: 0.0, checked: 0, max_abs_grad: 0.0 };
    for v in vars {
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g
                .flatten_all()
                .and_then(|g| g.to_dtype(DType::F64))
                .and_then(|g| g.to_vec1::<f64>())
                .expect("readable gradient"),
            None => vec![0.0; v.elem_count()],
        };
        let base = values(v);
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in picks {
            let at = |offset: f64| {
                let mut p = base.clone();
                p[i] = base[i] + offset;
                assign(v, p);
                eval()
            };
            let h = FD_STEP;
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            assign(v, base.clone());
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            out.max_rel_err = out.max_rel_err.max(rel);
            out.max_abs_grad = out.max_abs_grad.max(a.abs());
            out.checked += 1;
        }
    }
    out
}
