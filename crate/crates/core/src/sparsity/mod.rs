//! The active/exploration split of prunable parameters.
//!
//! A [`ParamPartition`] holds one [`Mask`] per prunable group. In weight scope
//! a group is the weight tensor of a dense or conv layer and an item is one
//! weight. In channel scope a group is a dense or conv layer followed by batch
//! norm and an item is one output channel, covering the weight row, the bias
//! entry and the BN `gamma`/`beta` of that channel.

mod nm;
mod plan;

pub use nm::{apply_nm_mask, satisfies_nm};
pub use plan::{
    erk_layer_densities, round_half_up, InitDistribution, LayerDims, PlanMode, SparsityPlan,
};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, ModelSpec, ParamRole};
use crate::structured::LatencyTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Weights,
    Channels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Weight,
    Channel,
    NOfM { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub granularity: Granularity,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(granularity: Granularity, bits: Vec<bool>) -> Self {
        Self { granularity, bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// A dense or conv layer as seen by the sparsity, latency and FLOPs code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLayer {
    /// Index into the model's layer list.
    pub layer: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Weights per output channel (`inputs` or `in_channels * k * k`).
    pub row_len: usize,
    /// Output positions per sample (1 for dense).
    pub positions: usize,
    pub kernel: Option<usize>,
    /// Layer index of the batch norm directly after this layer.
    pub batchnorm: Option<usize>,
}

impl ComputeLayer {
    pub fn params(&self) -> usize {
        self.out_channels * self.row_len
    }

    pub fn dims(&self) -> LayerDims {
        match self.kernel {
            Some(k) => LayerDims {
                inputs: self.in_channels,
                outputs: self.out_channels,
                kernel: Some((k, k)),
            },
            None => LayerDims {
                inputs: self.row_len,
                outputs: self.out_channels,
                kernel: None,
            },
        }
    }

    pub fn name(&self) -> String {
        let kind = if self.kernel.is_some() { "conv2d" } else { "dense" };
        format!("layer {} ({kind})", self.layer)
    }
}

/// Which compute layers are prunable, and how, for a given model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub scope: Scope,
    pub compute: Vec<ComputeLayer>,
    /// Indices into `compute` of the prunable groups. The final classifier is
    /// never prunable.
    pub groups: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &ModelSpec, scope: Scope) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut compute = Vec::new();
        let mut upstream: Option<usize> = None;
        for (i, layer) in spec.layers.iter().enumerate() {
            let batchnorm = match spec.layers.get(i + 1) {
                Some(LayerSpec::BatchNorm { .. }) => Some(i + 1),
                _ => None,
            };
            let cl = match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => ComputeLayer {
                    layer: i,
                    in_channels: upstream.unwrap_or(inputs),
                    out_channels: outputs,
                    row_len: inputs,
                    positions: 1,
                    kernel: None,
                    batchnorm,
                },
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let out = &shapes[i + 1];
                    ComputeLayer {
                        layer: i,
                        in_channels,
                        out_channels,
                        row_len: in_channels * kernel * kernel,
                        positions: out[1] * out[2],
                        kernel: Some(kernel),
                        batchnorm,
                    }
                }
                _ => continue,
            };
            upstream = Some(cl.out_channels);
            compute.push(cl);
        }
        if compute.len() < 2 {
            return Err(Error::Config(
                "model needs at least one compute layer besides the classifier".into(),
            ));
        }
        let candidates = 0..compute.len() - 1;
        if scope == Scope::Channels {
            if let Some(bad) = candidates.clone().find(|&c| compute[c].batchnorm.is_none()) {
                return Err(Error::Config(format!(
                    "{} is not followed by batch norm; channel scope and the taylor criterion need it",
                    compute[bad].name()
                )));
            }
        }
        Ok(Self {
            scope,
            groups: candidates.collect(),
            compute,
        })
    }

    pub fn group_len(&self, g: usize) -> usize {
        let cl = &self.compute[self.groups[g]];
        match self.scope {
            Scope::Weights => cl.params(),
            Scope::Channels => cl.out_channels,
        }
    }

    pub fn total(&self) -> usize {
        (0..self.groups.len()).map(|g| self.group_len(g)).sum()
    }

    pub fn group_of_compute(&self, c: usize) -> Option<usize> {
        self.groups.iter().position(|&x| x == c)
    }
}

/// Disjoint split of prunable items into the active set and the exploration
/// space. A set bit means active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    layout: Layout,
    masks: Vec<Mask>,
}

impl ParamPartition {
    pub fn new(layout: Layout, masks: Vec<Mask>) -> Result<Self> {
        if masks.len() != layout.groups.len() {
            return Err(Error::shape("partition groups", &[layout.groups.len()], &[masks.len()]));
        }
        for (g, m) in masks.iter().enumerate() {
            if m.len() != layout.group_len(g) {
                return Err(Error::shape("partition mask", &[layout.group_len(g)], &[m.len()]));
            }
        }
        Ok(Self { layout, masks })
    }

    pub fn full(layout: Layout) -> Self {
        let gran = match layout.scope {
            Scope::Weights => Granularity::Weight,
            Scope::Channels => Granularity::Channel,
        };
        let masks = (0..layout.groups.len())
            .map(|g| Mask::new(gran, vec![true; layout.group_len(g)]))
            .collect();
        Self { layout, masks }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn scope(&self) -> Scope {
        self.layout.scope
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn groups(&self) -> usize {
        self.masks.len()
    }

    pub fn is_active(&self, group: usize, index: usize) -> bool {
        self.masks[group].bits[index]
    }

    pub fn set(&mut self, group: usize, index: usize, active: bool) {
        self.masks[group].bits[index] = active;
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(Mask::len).sum()
    }

    pub fn active_count(&self) -> usize {
        self.masks.iter().map(Mask::count_ones).sum()
    }

    pub fn explore_count(&self) -> usize {
        self.total() - self.active_count()
    }

    pub fn active_in(&self, group: usize) -> usize {
        self.masks[group].count_ones()
    }

    /// All group masks concatenated in group order.
    pub fn flat(&self) -> Vec<bool> {
        self.masks.iter().flat_map(|m| m.bits.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.total() {
            return Err(Error::shape("flat partition", &[self.total()], &[bits.len()]));
        }
        let mut off = 0;
        for m in &mut self.masks {
            let n = m.bits.len();
            m.bits.copy_from_slice(&bits[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Active output channels of every compute layer, in model order.
    pub fn active_channels(&self) -> Vec<usize> {
        self.layout
            .compute
            .iter()
            .enumerate()
            .map(|(c, cl)| match (self.layout.scope, self.layout.group_of_compute(c)) {
                (Scope::Channels, Some(g)) => self.active_in(g),
                _ => cl.out_channels,
            })
            .collect()
    }

    /// `(p_in, p_out)` of every compute layer under the current masks.
    pub fn channel_pairs(&self) -> Vec<(usize, usize)> {
        let out = self.active_channels();
        self.layout
            .compute
            .iter()
            .enumerate()
            .map(|(c, cl)| (if c == 0 { cl.in_channels } else { out[c - 1] }, out[c]))
            .collect()
    }

    /// Mask over the weight tensor of group `g`.
    pub fn weight_mask(&self, g: usize) -> Vec<bool> {
        let bits = &self.masks[g].bits;
        match self.layout.scope {
            Scope::Weights => bits.clone(),
            Scope::Channels => {
                let row = self.layout.compute[self.layout.groups[g]].row_len;
                bits.iter().flat_map(|&b| std::iter::repeat(b).take(row)).collect()
            }
        }
    }

    /// Install the masks for normal training: inactive items are masked, no
    /// freezing.
    pub fn apply(&self, model: &mut Model) {
        for p in model.params_mut() {
            p.freeze = None;
            p.requires_grad = true;
        }
        for g in 0..self.groups() {
            let weight = self.weight_mask(g);
            let bits = self.masks[g].bits.clone();
            self.for_group_params(model, g, |role, p| {
                p.mask = Some(if role == ParamRole::Weight { weight.clone() } else { bits.clone() });
            });
        }
    }

    /// Install exploration mode: every prunable item participates in the
    /// forward pass, active items are frozen, and all non-prunable parameters
    /// stop receiving gradients.
    pub fn apply_explore(&self, model: &mut Model) {
        for p in model.params_mut() {
            p.freeze = None;
            p.mask = None;
            p.requires_grad = false;
        }
        for g in 0..self.groups() {
            let weight = self.weight_mask(g);
            let bits = self.masks[g].bits.clone();
            let scope = self.layout.scope;
            self.for_group_params(model, g, |role, p| {
                p.requires_grad = true;
                p.freeze = Some(if role == ParamRole::Weight { weight.clone() } else { bits.clone() });
                if scope == Scope::Weights && role != ParamRole::Weight {
                    p.requires_grad = false;
                }
            });
        }
    }

    /// Visit the parameters a group's mask governs: the weight tensor, and in
    /// channel scope also the bias and BN `gamma`/`beta`.
    fn for_group_params<F: FnMut(ParamRole, &mut crate::nn::Param)>(
        &self,
        model: &mut Model,
        g: usize,
        mut f: F,
    ) {
        let cl = &self.layout.compute[self.layout.groups[g]];
        let layers = model.layers_mut();
        for p in &mut layers[cl.layer].params {
            if p.role == ParamRole::Weight || self.layout.scope == Scope::Channels {
                f(p.role, p);
            }
        }
        if self.layout.scope == Scope::Channels {
            if let Some(bn) = cl.batchnorm {
                for p in &mut layers[bn].params {
                    f(p.role, p);
                }
            }
        }
    }
}

/// Resource measure for the budget Ψ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    ParamCount,
    Latency,
}

/// R(Θ_K): the active item count, or the table latency of the active
/// channel configuration.
pub fn resource(
    partition: &ParamPartition,
    kind: ResourceKind,
    table: Option<&LatencyTable>,
) -> Result<f64> {
    match kind {
        ResourceKind::ParamCount => Ok(partition.active_count() as f64),
        ResourceKind::Latency => {
            let table = table.ok_or_else(|| {
                Error::Config("latency resource requires a latency table".into())
            })?;
            table.total(&partition.channel_pairs())
        }
    }
}

/// Sample the initial partition from `plan`.
pub fn init_partition<R: Rng>(
    layout: Layout,
    plan: &SparsityPlan,
    rng: &mut R,
) -> Result<ParamPartition> {
    plan.validate()?;
    let dims: Vec<LayerDims> = layout.groups.iter().map(|&c| layout.compute[c].dims()).collect();
    let mut masks = Vec::with_capacity(dims.len());
    match (layout.scope, plan.mode) {
        (Scope::Weights, PlanMode::NOfM { n, m }) => {
            for &c in &layout.groups {
                let cl = &layout.compute[c];
                let noise: Vec<f32> = (0..cl.params()).map(|_| rng.gen()).collect();
                masks.push(Mask::new(Granularity::NOfM { n, m }, apply_nm_mask(&noise, cl.row_len, n, m)?));
            }
        }
        (Scope::Weights, _) => {
            let counts = plan.active_counts(&dims)?;
            for (g, &k) in counts.iter().enumerate() {
                masks.push(Mask::new(Granularity::Weight, random_bits(layout.group_len(g), k, rng)));
            }
        }
        (Scope::Channels, PlanMode::Uniform)
        | (Scope::Channels, PlanMode::NonUniform { init: InitDistribution::Uniform }) => {
            for g in 0..layout.groups.len() {
                let len = layout.group_len(g);
                let k = round_half_up((1.0 - plan.sparsity) * len as f64).clamp(1, len);
                masks.push(Mask::new(Granularity::Channel, random_bits(len, k, rng)));
            }
        }
        (Scope::Channels, mode) => {
            return Err(Error::Unsupported(format!(
                "channel scope supports uniform initialisation only, got {mode:?}"
            )))
        }
    }
    ParamPartition::new(layout, masks)
}

fn random_bits<R: Rng>(len: usize, active: usize, rng: &mut R) -> Vec<bool> {
    let mut bits = vec![false; len];
    for i in sample(rng, len, active.min(len)).into_iter() {
        bits[i] = true;
    }
    bits
}
