//! Saliency criteria over either the active set or the exploration space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradMode, Model, ParamRole, Targets, Tensor};
use crate::sparsity::{ParamPartition, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `|θ|` per weight.
    Magnitude,
    /// `|g_γ γ + g_β β|` per channel, averaged over an accumulation window.
    Taylor,
}

impl Criterion {
    pub fn scope(self) -> Scope {
        match self {
            Criterion::Magnitude => Scope::Weights,
            Criterion::Taylor => Scope::Channels,
        }
    }
}

/// Per-item scores aligned with the partition's group masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub scope: Scope,
    pub values: Vec<Vec<f32>>,
    pub accumulation_steps: usize,
}

/// `|θ|` of every weight in every group, read from stored values whether the
/// weight is active or not.
pub fn magnitude_score(model: &Model, partition: &ParamPartition) -> Result<ImportanceReport> {
    if partition.scope() != Scope::Weights {
        return Err(Error::Unsupported("magnitude scores are defined for weight scope".into()));
    }
    let layout = partition.layout();
    let values = layout
        .groups
        .iter()
        .map(|&c| {
            let layer = &model.layers()[layout.compute[c].layer];
            let w = layer.param(ParamRole::Weight).expect("compute layer has a weight");
            w.value.data().iter().map(|v| v.abs()).collect()
        })
        .collect();
    Ok(ImportanceReport {
        scope: Scope::Weights,
        values,
        accumulation_steps: 1,
    })
}

/// Per-channel `|g_γ γ + g_β β|` from the gradients currently stored in the
/// model. Channels whose BN parameters carry no gradient score zero.
pub fn taylor_step_scores(model: &Model, partition: &ParamPartition) -> Result<Vec<Vec<f32>>> {
    if partition.scope() != Scope::Channels {
        return Err(Error::Unsupported("taylor scores are defined for channel scope".into()));
    }
    let layout = partition.layout();
    layout
        .groups
        .iter()
        .map(|&c| {
            let cl = &layout.compute[c];
            let bn = cl
                .batchnorm
                .ok_or_else(|| Error::Config(format!("{} has no batch norm", cl.name())))?;
            let layer = &model.layers()[bn];
            let gamma = layer.param(ParamRole::BnGamma).expect("bn gamma");
            let beta = layer.param(ParamRole::BnBeta).expect("bn beta");
            let zeros = vec![0.0; cl.out_channels];
            let gg = gamma.value.grad().unwrap_or(&zeros);
            let gb = beta.value.grad().unwrap_or(&zeros);
            Ok((0..cl.out_channels)
                .map(|j| {
                    let s = gg[j] as f64 * gamma.value.data()[j] as f64
                        + gb[j] as f64 * beta.value.data()[j] as f64;
                    s.abs() as f32
                })
                .collect())
        })
        .collect()
}

/// Running mean of per-step Taylor scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorAccumulator {
    sums: Vec<Vec<f64>>,
    steps: usize,
}

impl TaylorAccumulator {
    pub fn new(partition: &ParamPartition) -> Self {
        Self {
            sums: partition.masks().iter().map(|m| vec![0.0; m.len()]).collect(),
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        for s in &mut self.sums {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        self.steps = 0;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulate(&mut self, model: &Model, partition: &ParamPartition) -> Result<()> {
        let scores = taylor_step_scores(model, partition)?;
        self.add(&scores);
        Ok(())
    }

    pub fn add(&mut self, scores: &[Vec<f32>]) {
        for (sum, s) in self.sums.iter_mut().zip(scores) {
            for (a, &b) in sum.iter_mut().zip(s) {
                *a += b as f64;
            }
        }
        self.steps += 1;
    }

    pub fn report(&self) -> ImportanceReport {
        let n = self.steps.max(1) as f64;
        ImportanceReport {
            scope: Scope::Channels,
            values: self
                .sums
                .iter()
                .map(|s| s.iter().map(|&v| (v / n) as f32).collect())
                .collect(),
            accumulation_steps: self.steps,
        }
    }
}

/// `|∂ℓ/∂θ|` of every weight with inactive weights zeroed in the forward pass,
/// read from gradients produced by a [`GradMode::Dense`] backward.
pub fn dense_grad_scores(model: &Model, partition: &ParamPartition) -> Result<ImportanceReport> {
    if partition.scope() != Scope::Weights {
        return Err(Error::Unsupported(
            "dense-gradient growth is undefined for channel scope: zeroed channels receive zero gradient".into(),
        ));
    }
    let layout = partition.layout();
    let values = layout
        .groups
        .iter()
        .map(|&c| {
            let w = model.layers()[layout.compute[c].layer]
                .param(ParamRole::Weight)
                .expect("compute layer has a weight");
            match w.value.grad() {
                Some(g) => g.iter().map(|v| v.abs()).collect(),
                None => vec![0.0; w.value.numel()],
            }
        })
        .collect();
    Ok(ImportanceReport {
        scope: Scope::Weights,
        values,
        accumulation_steps: 1,
    })
}

/// Growth score of the dense-gradient baseline on one mini-batch. Runs its own
/// forward/backward with the partition's masks installed and restores the
/// batch-norm running statistics afterwards.
pub fn rigl_grow_score(
    model: &mut Model,
    partition: &ParamPartition,
    batch: &Tensor,
    targets: &Targets,
) -> Result<ImportanceReport> {
    if partition.scope() != Scope::Weights {
        return dense_grad_scores(model, partition);
    }
    let stats: Vec<(Vec<f32>, Vec<f32>)> = model
        .layers()
        .iter()
        .map(|l| (l.running_mean.clone(), l.running_var.clone()))
        .collect();
    partition.apply(model);
    model.forward_backward(batch, targets, GradMode::Dense)?;
    for (l, (m, v)) in model.layers_mut().iter_mut().zip(stats) {
        l.running_mean = m;
        l.running_var = v;
    }
    dense_grad_scores(model, partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, LossKind, ModelSpec};
    use crate::sparsity::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_layer() -> (Model, ParamPartition) {
        let spec = ModelSpec::mlp(2, &[2], 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(spec.clone(), &mut rng).unwrap();
        let p = ParamPartition::full(Layout::new(&spec, Scope::Weights).unwrap());
        (model, p)
    }

    #[test]
    fn magnitude_is_absolute_value() {
        let (mut model, p) = two_layer();
        model.layers_mut()[0]
            .param_mut(ParamRole::Weight)
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&[-3.0, 0.5, 0.0, 0.0]);
        let r = magnitude_score(&model, &p).unwrap();
        assert_eq!(r.values[0], vec![3.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn taylor_cancellation_case() {
        let mut acc = TaylorAccumulator {
            sums: vec![vec![0.0]],
            steps: 0,
        };
        // gamma = 2, g_gamma = 0.5, beta = 1, g_beta = -1.
        let s = (0.5f64 * 2.0 + -1.0 * 1.0).abs() as f32;
        acc.add(&[vec![s]]);
        assert_eq!(acc.report().values[0][0], 0.0);
    }

    #[test]
    fn taylor_accumulation_is_a_mean() {
        let mut acc = TaylorAccumulator {
            sums: vec![vec![0.0, 0.0]],
            steps: 0,
        };
        acc.add(&[vec![1.0, 4.0]]);
        acc.add(&[vec![3.0, 0.0]]);
        assert_eq!(acc.report().values[0], vec![2.0, 2.0]);
        assert_eq!(acc.report().accumulation_steps, 2);
    }

    #[test]
    fn rigl_score_on_masked_linear_weight() {
        // l = (w x - y)^2 with w masked to zero, x = 2, y = 1 -> |dl/dw| = 4.
        let spec = ModelSpec {
            input_shape: vec![1],
            layers: vec![
                LayerSpec::Dense { inputs: 1, outputs: 1, bias: false },
                LayerSpec::Dense { inputs: 1, outputs: 1, bias: false },
            ],
            loss: LossKind::Mse,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(spec.clone(), &mut rng).unwrap();
        model.layers_mut()[0].param_mut(ParamRole::Weight).unwrap().value.data_mut()[0] = 0.7;
        model.layers_mut()[1].param_mut(ParamRole::Weight).unwrap().value.data_mut()[0] = 1.0;
        let mut p = ParamPartition::full(Layout::new(&spec, Scope::Weights).unwrap());
        p.set(0, 0, false);
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let y = Targets::Values(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let r = rigl_grow_score(&mut model, &p, &x, &y).unwrap();
        assert!((r.values[0][0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn dense_grad_scores_reject_channel_scope() {
        let spec = ModelSpec::mlp(2, &[2], 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(spec.clone(), &mut rng).unwrap();
        let p = ParamPartition::full(Layout::new(&spec, Scope::Channels).unwrap());
        assert!(matches!(dense_grad_scores(&model, &p), Err(Error::Unsupported(_))));
    }
}
