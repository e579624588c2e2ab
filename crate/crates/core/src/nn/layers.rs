//! Layer kinds with explicit forward/backward passes.
//!
//! Every parameterised layer reads its weights through the owning [`Param`]'s
//! mask, so masked entries contribute nothing to the forward pass while their
//! stored values stay untouched.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::sgemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

/// Which gradient `backward` leaves in a masked parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradient with respect to the stored value; zero where masked.
    Masked,
    /// Gradient with respect to the effective (masked) value, so masked entries
    /// carry the gradient they would receive if they were active.
    Dense,
}

/// A trainable tensor plus the bookkeeping the sparse trainer needs.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    /// Whole-tensor freeze switch. Frozen tensors get no gradient.
    pub requires_grad: bool,
    /// Forward multiplier; `false` entries are inactive (pruned).
    pub mask: Option<Vec<bool>>,
    /// Element freeze; `true` entries are excluded from updates but keep their
    /// optimizer state.
    pub freeze: Option<Vec<bool>>,
}

impl Param {
    fn new(name: String, role: ParamRole, value: Tensor) -> Self {
        Self {
            name,
            role,
            value,
            requires_grad: true,
            mask: None,
            freeze: None,
        }
    }

    /// Values seen by the forward pass.
    pub fn effective(&self) -> Cow<'_, [f32]> {
        match &self.mask {
            None => Cow::Borrowed(self.value.data()),
            Some(mask) => Cow::Owned(
                self.value
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect(),
            ),
        }
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[idx])
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        !self.requires_grad || self.freeze.as_ref().map_or(false, |f| f[idx])
    }

    fn store_grad(&mut self, mut grad: Vec<f32>, mode: GradMode) {
        if !self.requires_grad {
            self.value.clear_grad();
            return;
        }
        if let (GradMode::Masked, Some(mask)) = (mode, &self.mask) {
            for (g, &m) in grad.iter_mut().zip(mask) {
                if !m {
                    *g = 0.0;
                }
            }
        }
        self.value
            .set_grad(grad)
            .expect("gradient length matches parameter");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return Err(Error::shape("dense input", &[inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::shape("conv2d input", &[in_channels, 0, 0], input));
                }
                let (oh, ow) = conv_out(input[1], input[2], kernel, stride, padding)
                    .ok_or_else(|| Error::shape("conv2d spatial", &[kernel, kernel], input))?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return Err(Error::shape("batchnorm input", &[channels], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } => {
                if input.len() != 3 {
                    return Err(Error::shape("maxpool input", &[0, 0, 0], input));
                }
                let (oh, ow) = conv_out(input[1], input[2], kernel, stride, 0)
                    .ok_or_else(|| Error::shape("maxpool spatial", &[kernel, kernel], input))?;
                Ok(vec![input[0], oh, ow])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. }
        )
    }
}

fn conv_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> Option<(usize, usize)> {
    if s == 0 || h + 2 * p < k || w + 2 * p < k {
        return None;
    }
    Some(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

#[derive(Debug, Clone)]
enum Cache {
    Dense {
        input: Vec<f32>,
        batch: usize,
        weight: Vec<f32>,
    },
    Conv {
        cols: Vec<f32>,
        in_shape: Vec<usize>,
        out_hw: (usize, usize),
        weight: Vec<f32>,
    },
    BatchNorm {
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
        gamma: Vec<f32>,
        dims: (usize, usize, usize),
        train: bool,
    },
    Relu {
        positive: Vec<bool>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
    /// Batch-norm running statistics (empty for other kinds).
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<Cache>,
}

impl Layer {
    pub fn new<R: Rng>(spec: LayerSpec, prefix: &str, rng: &mut R) -> Self {
        let mut params = Vec::new();
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        match spec {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
            } => {
                params.push(Param::new(
                    format!("{prefix}.weight"),
                    ParamRole::Weight,
                    kaiming_uniform(&[outputs, inputs], inputs, rng),
                ));
                if bias {
                    params.push(Param::new(
                        format!("{prefix}.bias"),
                        ParamRole::Bias,
                        Tensor::zeros(&[outputs]),
                    ));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                params.push(Param::new(
                    format!("{prefix}.weight"),
                    ParamRole::Weight,
                    kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
                ));
                if bias {
                    params.push(Param::new(
                        format!("{prefix}.bias"),
                        ParamRole::Bias,
                        Tensor::zeros(&[out_channels]),
                    ));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                params.push(Param::new(
                    format!("{prefix}.gamma"),
                    ParamRole::BnGamma,
                    Tensor::new(vec![channels], vec![1.0; channels]).expect("shape"),
                ));
                params.push(Param::new(
                    format!("{prefix}.beta"),
                    ParamRole::BnBeta,
                    Tensor::zeros(&[channels]),
                ));
                running_mean = vec![0.0; channels];
                running_var = vec![1.0; channels];
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => {}
        }
        Self {
            spec,
            params,
            running_mean,
            running_var,
            cache: None,
        }
    }

    pub fn param(&self, role: ParamRole) -> Option<&Param> {
        self.params.iter().find(|p| p.role == role)
    }

    pub fn param_mut(&mut self, role: ParamRole) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.role == role)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Forward pass over a batch `[N, ...]`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let n = x.batch();
        let out_shape = self.spec.output_shape(&x.shape()[1..])?;
        let mut full_shape = vec![n];
        full_shape.extend_from_slice(&out_shape);
        let (out, cache) = match self.spec {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                let weight = self.params[0].effective().into_owned();
                let mut y = vec![0.0f32; n * outputs];
                sgemm(n, inputs, outputs, x.data(), false, &weight, true, &mut y, false);
                if let Some(bias) = self.param(ParamRole::Bias) {
                    let b = bias.effective();
                    for row in y.chunks_mut(outputs) {
                        row.iter_mut().zip(b.iter()).for_each(|(v, bv)| *v += bv);
                    }
                }
                let cache = Cache::Dense {
                    input: x.data().to_vec(),
                    batch: n,
                    weight,
                };
                (y, cache)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let ckk = in_channels * kernel * kernel;
                let hw = oh * ow;
                let weight = self.params[0].effective().into_owned();
                let mut cols = vec![0.0f32; n * ckk * hw];
                let mut y = vec![0.0f32; n * out_channels * hw];
                let sample = in_channels * h * w;
                for s in 0..n {
                    let col = &mut cols[s * ckk * hw..(s + 1) * ckk * hw];
                    im2col(
                        &x.data()[s * sample..(s + 1) * sample],
                        (in_channels, h, w),
                        kernel,
                        stride,
                        padding,
                        (oh, ow),
                        col,
                    );
                    let out = &mut y[s * out_channels * hw..(s + 1) * out_channels * hw];
                    sgemm(out_channels, ckk, hw, &weight, false, col, false, out, false);
                }
                if let Some(bias) = self.param(ParamRole::Bias) {
                    let b = bias.effective();
                    for s in 0..n {
                        for c in 0..out_channels {
                            let off = (s * out_channels + c) * hw;
                            y[off..off + hw].iter_mut().for_each(|v| *v += b[c]);
                        }
                    }
                }
                let cache = Cache::Conv {
                    cols,
                    in_shape: x.shape().to_vec(),
                    out_hw: (oh, ow),
                    weight,
                };
                (y, cache)
            }
            LayerSpec::BatchNorm { channels } => {
                let spatial: usize = x.shape()[2..].iter().product();
                let gamma = self.params[0].effective().into_owned();
                let beta = self.params[1].effective().into_owned();
                let count = (n * spatial) as f64;
                let data = x.data();
                let mut xhat = vec![0.0f32; data.len()];
                let mut inv_std = vec![0.0f64; channels];
                let mut y = vec![0.0f32; data.len()];
                for c in 0..channels {
                    let (mean, var) = if train {
                        let mut sum = 0.0f64;
                        let mut sq = 0.0f64;
                        for s in 0..n {
                            let off = (s * channels + c) * spatial;
                            for &v in &data[off..off + spatial] {
                                sum += v as f64;
                                sq += (v as f64) * (v as f64);
                            }
                        }
                        let mean = sum / count;
                        let var = (sq / count - mean * mean).max(0.0);
                        let unbiased = if count > 1.0 {
                            var * count / (count - 1.0)
                        } else {
                            var
                        };
                        self.running_mean[c] =
                            (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean as f32;
                        self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c]
                            + BN_MOMENTUM * unbiased as f32;
                        (mean, var)
                    } else {
                        (self.running_mean[c] as f64, self.running_var[c] as f64)
                    };
                    let istd = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[c] = istd;
                    for s in 0..n {
                        let off = (s * channels + c) * spatial;
                        for k in off..off + spatial {
                            let xh = ((data[k] as f64 - mean) * istd) as f32;
                            xhat[k] = xh;
                            y[k] = gamma[c] * xh + beta[c];
                        }
                    }
                }
                let cache = Cache::BatchNorm {
                    xhat,
                    inv_std,
                    gamma,
                    dims: (n, channels, spatial),
                    train,
                };
                (y, cache)
            }
            LayerSpec::Relu => {
                let positive: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let y = x.data().iter().map(|&v| v.max(0.0)).collect();
                (y, Cache::Relu { positive })
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut y = vec![0.0f32; n * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                let data = x.data();
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = base + oy * stride * w + ox * stride;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                    if data[idx] > best {
                                        best = data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            y[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
                let cache = Cache::MaxPool {
                    argmax,
                    in_shape: x.shape().to_vec(),
                };
                (y, cache)
            }
            LayerSpec::Flatten => (
                x.data().to_vec(),
                Cache::Flatten {
                    in_shape: x.shape().to_vec(),
                },
            ),
        };
        self.cache = Some(cache);
        Tensor::new(full_shape, out)
    }

    /// Backward pass: stores parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor, mode: GradMode) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward)?;
        match (self.spec.clone(), cache) {
            (
                LayerSpec::Dense {
                    inputs, outputs, ..
                },
                Cache::Dense {
                    input,
                    batch,
                    weight,
                },
            ) => {
                let g = dy.data();
                let mut dw = vec![0.0f32; outputs * inputs];
                sgemm(outputs, batch, inputs, g, true, &input, false, &mut dw, false);
                self.params[0].store_grad(dw, mode);
                if let Some(bias) = self.param_mut(ParamRole::Bias) {
                    let mut db = vec![0.0f32; outputs];
                    for row in g.chunks(outputs) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    bias.store_grad(db, mode);
                }
                let mut dx = vec![0.0f32; batch * inputs];
                sgemm(batch, outputs, inputs, g, false, &weight, false, &mut dx, false);
                Tensor::new(vec![batch, inputs], dx)
            }
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv {
                    cols,
                    in_shape,
                    out_hw,
                    weight,
                },
            ) => {
                let n = in_shape[0];
                let (h, w) = (in_shape[2], in_shape[3]);
                let ckk = in_channels * kernel * kernel;
                let hw = out_hw.0 * out_hw.1;
                let g = dy.data();
                let mut dw = vec![0.0f32; out_channels * ckk];
                let mut dx = vec![0.0f32; n * in_channels * h * w];
                let mut dcol = vec![0.0f32; ckk * hw];
                let sample = in_channels * h * w;
                for s in 0..n {
                    let gout = &g[s * out_channels * hw..(s + 1) * out_channels * hw];
                    let col = &cols[s * ckk * hw..(s + 1) * ckk * hw];
                    sgemm(out_channels, hw, ckk, gout, false, col, true, &mut dw, true);
                    sgemm(ckk, out_channels, hw, &weight, true, gout, false, &mut dcol, false);
                    col2im(
                        &dcol,
                        (in_channels, h, w),
                        kernel,
                        stride,
                        padding,
                        out_hw,
                        &mut dx[s * sample..(s + 1) * sample],
                    );
                }
                self.params[0].store_grad(dw, mode);
                if let Some(bias) = self.param_mut(ParamRole::Bias) {
                    let mut db = vec![0.0f32; out_channels];
                    for s in 0..n {
                        for (c, d) in db.iter_mut().enumerate() {
                            let off = (s * out_channels + c) * hw;
                            *d += g[off..off + hw].iter().sum::<f32>();
                        }
                    }
                    bias.store_grad(db, mode);
                }
                Tensor::new(in_shape, dx)
            }
            (
                LayerSpec::BatchNorm { .. },
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    gamma,
                    dims: (n, channels, spatial),
                    train,
                },
            ) => {
                let g = dy.data();
                let count = (n * spatial) as f64;
                let mut dgamma = vec![0.0f32; channels];
                let mut dbeta = vec![0.0f32; channels];
                let mut dx = vec![0.0f32; g.len()];
                for c in 0..channels {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for s in 0..n {
                        let off = (s * channels + c) * spatial;
                        for k in off..off + spatial {
                            sum_dy += g[k] as f64;
                            sum_dy_xhat += g[k] as f64 * xhat[k] as f64;
                        }
                    }
                    dgamma[c] = sum_dy_xhat as f32;
                    dbeta[c] = sum_dy as f32;
                    let gc = gamma[c] as f64;
                    for s in 0..n {
                        let off = (s * channels + c) * spatial;
                        for k in off..off + spatial {
                            dx[k] = if train {
                                (gc * inv_std[c] / count
                                    * (count * g[k] as f64
                                        - sum_dy
                                        - xhat[k] as f64 * sum_dy_xhat))
                                    as f32
                            } else {
                                (gc * inv_std[c] * g[k] as f64) as f32
                            };
                        }
                    }
                }
                self.params[0].store_grad(dgamma, mode);
                self.params[1].store_grad(dbeta, mode);
                Tensor::new(dy.shape().to_vec(), dx)
            }
            (LayerSpec::Relu, Cache::Relu { positive }) => {
                let dx = dy
                    .data()
                    .iter()
                    .zip(&positive)
                    .map(|(&g, &p)| if p { g } else { 0.0 })
                    .collect();
                Tensor::new(dy.shape().to_vec(), dx)
            }
            (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = vec![0.0f32; in_shape.iter().product()];
                for (&g, &idx) in dy.data().iter().zip(&argmax) {
                    dx[idx] += g;
                }
                Tensor::new(in_shape, dx)
            }
            (LayerSpec::Flatten, Cache::Flatten { in_shape }) => {
                Tensor::new(in_shape, dy.data().to_vec())
            }
            _ => Err(Error::BackwardBeforeForward),
        }
    }
}

fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [f32],
) {
    let hw = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * ow + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[(ch * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    let hw = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ch * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
