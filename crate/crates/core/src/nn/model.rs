use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{GradMode, Layer, LayerSpec, Param};
use super::loss::{mse, softmax_cross_entropy, LossKind, Targets};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Architecture description; stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

impl ModelSpec {
    /// Dense stack `inputs -> hidden... -> outputs`, optionally with batch norm
    /// after every hidden dense layer.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, batchnorm: bool) -> Self {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                bias: !batchnorm,
            });
            if batchnorm {
                layers.push(LayerSpec::BatchNorm { channels: h });
            }
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs,
            bias: true,
        });
        Self {
            input_shape: vec![inputs],
            layers,
            loss: LossKind::CrossEntropy,
        }
    }

    /// Conv blocks (3x3 conv, optional BN, ReLU, 2x2 max-pool) followed by a
    /// dense classifier.
    pub fn cnn(input_shape: [usize; 3], channels: &[usize], outputs: usize, batchnorm: bool) -> Self {
        let mut layers = Vec::new();
        let [mut c, mut h, mut w] = input_shape;
        for &out in channels {
            layers.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: !batchnorm,
            });
            if batchnorm {
                layers.push(LayerSpec::BatchNorm { channels: out });
            }
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool {
                kernel: 2,
                stride: 2,
            });
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            inputs: c * h * w,
            outputs,
            bias: true,
        });
        Self {
            input_shape: input_shape.to_vec(),
            layers,
            loss: LossKind::CrossEntropy,
        }
    }

    /// Per-sample input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }
}

/// A sequential network trained with explicit reverse-mode backpropagation.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    train: bool,
}

impl Model {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.shapes()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::new(s.clone(), &format!("{i}"), rng))
            .collect();
        Ok(Self {
            spec,
            layers,
            train: true,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.numel()).sum()
    }

    /// Forward a batch `[N, input_shape...]`; caches what backward needs.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != self.spec.input_shape.len() + 1
            || batch.shape()[1..] != self.spec.input_shape[..]
        {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("model input", &expected, batch.shape()));
        }
        let train = self.train;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, train)?;
        }
        Ok(x)
    }

    /// Backpropagate `grad_output` (dL/d output) through every layer.
    pub fn backward(&mut self, grad_output: &Tensor, mode: GradMode) -> Result<()> {
        if self.layers.iter().any(|l| !l.has_cache()) {
            return Err(Error::BackwardBeforeForward);
        }
        let mut g = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g, mode)?;
        }
        Ok(())
    }

    pub fn loss(&self, output: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
        match (self.spec.loss, targets) {
            (LossKind::CrossEntropy, Targets::Labels(labels)) => {
                softmax_cross_entropy(output, labels)
            }
            (LossKind::Mse, Targets::Values(values)) => mse(output, values),
            (kind, _) => Err(Error::Config(format!(
                "loss {kind:?} does not match the target kind"
            ))),
        }
    }

    /// Forward, loss and backward in one call; returns the batch loss.
    pub fn forward_backward(
        &mut self,
        batch: &Tensor,
        targets: &Targets,
        mode: GradMode,
    ) -> Result<f64> {
        let out = self.forward(batch)?;
        let (loss, grad) = self.loss(&out, targets)?;
        self.backward(&grad, mode)?;
        Ok(loss)
    }

    /// Forward without touching batch-norm running statistics.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Tensor> {
        let was = self.train;
        self.train = false;
        let out = self.forward(batch);
        self.train = was;
        for layer in &mut self.layers {
            layer.clear_cache();
        }
        out
    }
}
