//! AdamW with gradient clipping, learning-rate schedules and a divergence guard.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero.
    WarmupCosine { warmup: usize },
    /// Multiply by `gamma` after each epoch.
    Exponential { gamma: f64, steps_per_epoch: usize },
}

impl Schedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine { warmup } => {
                if step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let t = ((step - warmup) as f64 / span).min(1.0);
                    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
            Schedule::Exponential { gamma, steps_per_epoch } => {
                base * gamma.powi((step / steps_per_epoch.max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    schedule: Schedule,
    total_steps: usize,
    step: usize,
    stage: String,
}

impl Trainer {
    pub fn new(stage: &str, vars: Vec<Var>, cfg: OptimConfig, schedule: Schedule, total_steps: usize) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::config(format!("stage {stage} has no trainable parameters")));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        let params = ParamsAdamW {
            lr: schedule.rate(cfg.learning_rate, 0, total_steps),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
            cfg,
            schedule,
            total_steps,
            step: 0,
            stage: stage.to_string(),
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Backpropagates `loss`, clips, and applies one update. Returns the loss value.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: self.stage.clone(),
                step: self.step,
                loss: value,
            });
        }
        let mut grads = loss.backward()?;
        if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, &self.vars, self.cfg.clip_norm)?;
        }
        self.opt.set_learning_rate(self.schedule.rate(self.cfg.learning_rate, self.step, self.total_steps));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, vars)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn warmup_cosine_shape() {
        let s = Schedule::WarmupCosine { warmup: 10 };
        assert!((s.rate(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.rate(1.0, 9, 100) - 1.0).abs() < 1e-12);
        assert!((s.rate(1.0, 55, 100) - 0.5).abs() < 1e-12);
        assert!(s.rate(1.0, 100, 100).abs() < 1e-12);
        let e = Schedule::Exponential { gamma: 0.5, steps_per_epoch: 4 };
        assert_eq!(e.rate(1.0, 9, 0), 0.25);
    }

    #[test]
    fn minimizes_quadratic_and_guards_nan() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let cfg = OptimConfig { learning_rate: 0.1, weight_decay: 0.0, clip_norm: 0.0 };
        let mut t = Trainer::new("test", vec![x.clone()], cfg, Schedule::Constant, 500).unwrap();
        for _ in 0..500 {
            t.step(&x.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
        let nan = Tensor::new(f64::NAN, &Device::Cpu).unwrap();
        assert!(matches!(t.step(&nan), Err(Error::Divergence { .. })));
    }

    #[test]
    fn clipping_bounds_norm() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f32, 4.0], &Device::Cpu).unwrap()).unwrap();
        let loss = (x.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let mut g = loss.backward().unwrap();
        let before = clip_grad_norm(&mut g, std::slice::from_ref(&x), 1.0).unwrap();
        assert!((before - 5.0).abs() < 1e-6);
        assert!((grad_norm(&g, &[x]).unwrap() - 1.0).abs() < 1e-6);
    }
}
