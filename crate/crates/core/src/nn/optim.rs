use serde::{Deserialize, Serialize};

use super::layers::ParamRole;
use super::model::Model;
use crate::error::{Error, Result};

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup for `warmup_steps`, then cosine decay to zero at
    /// `total_steps`.
    WarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    /// Warmup over the first 5% of `total_steps`.
    pub fn standard(total_steps: u64) -> Self {
        LrSchedule::WarmupCosine {
            warmup_steps: total_steps / 20,
            total_steps,
        }
    }

    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// SGD with momentum and decoupled-from-mask weight decay.
///
/// An entry is updated only if it is active (mask bit set) and not frozen.
/// Inactive entries have their velocity cleared; frozen entries keep it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub schedule: LrSchedule,
    step: u64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(model: &Model, lr: f32, momentum: f32, weight_decay: f32, schedule: LrSchedule) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            schedule,
            step: 0,
            velocity: model.params().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        (self.lr as f64 * self.schedule.factor(self.step)) as f32
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.velocity
    }

    pub fn set_state(&mut self, step: u64, velocity: Vec<Vec<f32>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("velocity buffers do not match the model".into()));
        }
        self.step = step;
        self.velocity = velocity;
        Ok(())
    }

    /// Apply one update using the gradients currently stored in `model`.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let lr = self.current_lr();
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (param, vel) in model.params_mut().zip(self.velocity.iter_mut()) {
            if vel.len() != param.value.numel() {
                return Err(Error::shape("velocity", &[param.value.numel()], &[vel.len()]));
            }
            let decay = if param.role == ParamRole::Weight { wd } else { 0.0 };
            let grad = param.value.grad().map(|g| g.to_vec());
            let mask = param.mask.clone();
            let freeze = if param.requires_grad {
                param.freeze.clone()
            } else {
                None
            };
            let data = param.value.data_mut();
            for i in 0..data.len() {
                if mask.as_ref().map_or(false, |m| !m[i]) {
                    vel[i] = 0.0;
                    continue;
                }
                if !param.requires_grad || freeze.as_ref().map_or(false, |f| f[i]) {
                    continue;
                }
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + decay * data[i];
                vel[i] = mu * vel[i] + g;
                data[i] -= lr * vel[i];
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::LayerSpec;
    use crate::nn::loss::LossKind;
    use crate::nn::model::ModelSpec;
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;

    fn one_weight(w: f32) -> Model {
        let spec = ModelSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
                bias: false,
            }],
            loss: LossKind::Mse,
        };
        let mut m = Model::new(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.layers_mut()[0].params[0].value = Tensor::new(vec![1, 1], vec![w]).unwrap();
        m
    }

    fn set_grad(m: &mut Model, g: f32) {
        m.layers_mut()[0].params[0].value.set_grad(vec![g]).unwrap();
    }

    fn weight(m: &Model) -> f32 {
        m.layers()[0].params[0].value.data()[0]
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = one_weight(1.0);
        let mut opt = Sgd::new(&m, 0.1, 0.0, 0.0, LrSchedule::Constant);
        set_grad(&mut m, 2.0);
        opt.step(&mut m).unwrap();
        assert!((weight(&m) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let mut m = one_weight(0.0);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.0, LrSchedule::Constant);
        for _ in 0..2 {
            set_grad(&mut m, 1.0);
            opt.step(&mut m).unwrap();
        }
        assert!((weight(&m) + 0.29).abs() < 1e-6);
    }

    #[test]
    fn masked_weight_is_unchanged_and_velocity_cleared() {
        let mut m = one_weight(0.5);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.1, LrSchedule::Constant);
        set_grad(&mut m, 1.0);
        opt.step(&mut m).unwrap();
        m.layers_mut()[0].params[0].mask = Some(vec![false]);
        let before = weight(&m);
        set_grad(&mut m, 123.0);
        opt.step(&mut m).unwrap();
        assert_eq!(weight(&m), before);
        assert_eq!(opt.velocity()[0][0], 0.0);
    }

    #[test]
    fn frozen_entry_keeps_velocity() {
        let mut m = one_weight(0.5);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.0, LrSchedule::Constant);
        set_grad(&mut m, 1.0);
        opt.step(&mut m).unwrap();
        m.layers_mut()[0].params[0].freeze = Some(vec![true]);
        let before = weight(&m);
        opt.step(&mut m).unwrap();
        assert_eq!(weight(&m), before);
        assert_eq!(opt.velocity()[0][0], 1.0);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule::standard(100);
        assert!((s.factor(0) - 0.2).abs() < 1e-12);
        assert!((s.factor(4) - 1.0).abs() < 1e-12);
        assert!(s.factor(50) < 1.0 && s.factor(50) > s.factor(90));
        assert!(s.factor(100).abs() < 1e-12);
    }
}
