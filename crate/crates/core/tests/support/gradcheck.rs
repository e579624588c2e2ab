//! Finite-difference checks of every layer's parameter gradients.

use iee_core::nn::{GradMode, LayerSpec, LossKind, Model, ModelSpec, Targets, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-2;

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn loss_of(model: &mut Model, x: &Tensor, y: &Targets) -> f64 {
    let out = model.forward(x).unwrap();
    model.loss(&out, y).unwrap().0
}

/// Largest norm-wise relative error over all parameter tensors, the tensor
/// name for diagnostics, and `(skipped, total)` entry counts.
pub fn check(spec: ModelSpec, batch: usize, seed: u64, mask_first: bool) -> (f64, String, (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(spec.clone(), &mut rng).unwrap();
    if mask_first {
        let p = &mut model.layers_mut()[0].params[0];
        p.mask = Some((0..p.value.numel()).map(|_| rng.gen_bool(0.6)).collect());
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = random_tensor(shape, &mut rng);
    let outputs = *spec.shapes().unwrap().last().unwrap().last().unwrap();
    let y = match spec.loss {
        LossKind::Mse => Targets::Values(random_tensor(vec![batch, outputs], &mut rng)),
        LossKind::CrossEntropy => Targets::Labels((0..batch).map(|_| rng.gen_range(0..outputs)).collect()),
    };
    model.forward_backward(&x, &y, GradMode::Masked).unwrap();
    let analytic: Vec<(String, Vec<f32>)> = model
        .params()
        .map(|p| (p.name.clone(), p.value.grad().unwrap().to_vec()))
        .collect();

    let mut worst = (0.0, String::new());
    let mut checked = (0, 0);
    let n_layers = model.layers().len();
    let mut k = 0;
    for li in 0..n_layers {
        for pi in 0..model.layers()[li].params.len() {
            let (name, a) = &analytic[k];
            k += 1;
            let mut numeric = vec![0.0f64; a.len()];
            let mut smooth = vec![true; a.len()];
            for (e, num) in numeric.iter_mut().enumerate() {
                let orig = model.layers()[li].params[pi].value.data()[e];
                let mut at = |v: f32| {
                    model.layers_mut()[li].params[pi].value.data_mut()[e] = v;
                    loss_of(&mut model, &x, &y)
                };
                let mid = at(orig);
                let mut sides = |h: f32| {
                    let (plus, minus) = (at(orig + h), at(orig - h));
                    let h = h as f64;
                    ((plus - minus) / (2.0 * h), (plus - mid) / h - (mid - minus) / h)
                };
                let (central, bend) = sides(EPS);
                let (_, half_bend) = sides(EPS / 2.0);
                model.layers_mut()[li].params[pi].value.data_mut()[e] = orig;
                // Smooth curvature makes the one-sided slope gap scale with the
                // step; a ReLU or max-pool switch inside the stencil does not.
                smooth[e] = (bend - 2.0 * half_bend).abs() <= 1e-3 + 2e-2 * bend.abs();
                *num = central;
            }
            checked.0 += smooth.iter().filter(|s| !**s).count();
            checked.1 += a.len();
            let a: Vec<f32> = a.iter().zip(&smooth).map(|(&v, &s)| if s { v } else { 0.0 }).collect();
            let numeric: Vec<f64> = numeric.iter().zip(&smooth).map(|(&v, &s)| if s { v } else { 0.0 }).collect();
            let diff: f64 = a.iter().zip(&numeric).map(|(&a, n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = diff / na.max(nn).max(1e-6);
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    (worst.0, worst.1, checked)
}

pub fn dense(inputs: usize, outputs: usize, bias: bool) -> LayerSpec {
    LayerSpec::Dense { inputs, outputs, bias }
}

fn conv(in_channels: usize, out_channels: usize, stride: usize, padding: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: 3,
        stride,
        padding,
        bias,
    }
}

pub fn specs() -> Vec<(&'static str, ModelSpec, bool)> {
    vec![
        (
            "dense",
            ModelSpec { input_shape: vec![5], layers: vec![dense(5, 3, true)], loss: LossKind::Mse },
            false,
        ),
        (
            "masked dense",
            ModelSpec { input_shape: vec![5], layers: vec![dense(5, 3, true)], loss: LossKind::Mse },
            true,
        ),
        (
            "dense batchnorm relu",
            ModelSpec {
                input_shape: vec![6],
                layers: vec![
                    dense(6, 5, false),
                    LayerSpec::BatchNorm { channels: 5 },
                    LayerSpec::Relu,
                    dense(5, 3, true),
                ],
                loss: LossKind::CrossEntropy,
            },
            false,
        ),
        (
            "conv batchnorm",
            ModelSpec {
                input_shape: vec![2, 4, 4],
                layers: vec![
                    conv(2, 3, 1, 1, false),
                    LayerSpec::BatchNorm { channels: 3 },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    dense(48, 2, true),
                ],
                loss: LossKind::Mse,
            },
            false,
        ),
        (
            "conv pool",
            ModelSpec {
                input_shape: vec![2, 6, 6],
                layers: vec![
                    conv(2, 3, 1, 1, true),
                    LayerSpec::MaxPool { kernel: 2, stride: 2 },
                    LayerSpec::Flatten,
                    dense(27, 2, true),
                ],
                loss: LossKind::Mse,
            },
            false,
        ),
        (
            "strided conv",
            ModelSpec {
                input_shape: vec![2, 5, 5],
                layers: vec![conv(2, 3, 2, 0, true), LayerSpec::Flatten, dense(12, 2, true)],
                loss: LossKind::CrossEntropy,
            },
            true,
        ),
    ]
}

/// Worst case of one model family over a seed sweep.
#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: &'static str,
    pub worst_rel: f64,
    pub worst_tensor: String,
    pub worst_seed: u64,
    pub skipped: usize,
    pub total: usize,
}

impl FamilyResult {
    /// Relative error within [`TOL`] and at most a tenth of the entries
    /// skipped for sitting on a ReLU or max-pool kink.
    pub fn passes(&self) -> bool {
        self.worst_rel <= TOL && self.skipped * 10 <= self.total
    }
}

/// Check every model family over `seeds` with batch size 8.
pub fn gradcheck_families(seeds: u64) -> Vec<FamilyResult> {
    specs()
        .into_iter()
        .map(|(name, spec, masked)| {
            let mut r = FamilyResult {
                name,
                worst_rel: 0.0,
                worst_tensor: String::new(),
                worst_seed: 0,
                skipped: 0,
                total: 0,
            };
            for seed in 0..seeds {
                let (rel, tensor, (s, t)) = check(spec.clone(), 8, seed, masked);
                if rel >= r.worst_rel {
                    r.worst_rel = rel;
                    r.worst_tensor = tensor;
                    r.worst_seed = seed;
                }
                r.skipped += s;
                r.total += t;
            }
            r
        })
        .collect()
}
