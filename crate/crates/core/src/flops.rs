//! Training-cost accounting in forward-pass FLOPs per sample.
//!
//! One multiply-add counts as 2 FLOPs. A backward pass costs twice the
//! forward pass over the same weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::{Layout, ParamPartition, Scope};

/// Forward FLOPs of the dense model and of a masked partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsModel {
    layout: Layout,
}

impl FlopsModel {
    pub fn new(layout: &Layout) -> Self {
        Self {
            layout: layout.clone(),
        }
    }

    /// ζ_D.
    pub fn dense(&self) -> f64 {
        self.layout
            .compute
            .iter()
            .map(|c| 2.0 * (c.params() * c.positions) as f64)
            .sum()
    }

    /// ζ_P: active weights times output positions, or active channel
    /// products in channel scope.
    pub fn sparse(&self, partition: &ParamPartition) -> f64 {
        let layout = partition.layout();
        match layout.scope {
            Scope::Weights => layout
                .compute
                .iter()
                .enumerate()
                .map(|(c, cl)| {
                    let active = layout
                        .group_of_compute(c)
                        .map_or(cl.params(), |g| partition.active_in(g));
                    2.0 * (active * cl.positions) as f64
                })
                .sum(),
            Scope::Channels => {
                let pairs = partition.channel_pairs();
                layout
                    .compute
                    .iter()
                    .zip(pairs)
                    .map(|(cl, (p_in, p_out))| {
                        let per_pair = cl.row_len / cl.in_channels.max(1);
                        2.0 * (p_in * p_out * per_pair * cl.positions) as f64
                    })
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "estimate")]
    Estimate,
    #[serde(rename = "prune")]
    Prune,
    #[serde(rename = "improve")]
    Improve,
    #[serde(rename = "explore")]
    Explore,
    #[serde(rename = "post-period")]
    PostPeriod,
    /// Sparse training step of a baseline.
    #[serde(rename = "train")]
    Train,
    /// Baseline step that also computes dense gradients.
    #[serde(rename = "dense-grad")]
    DenseGrad,
    #[serde(rename = "dense")]
    Dense,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Estimate,
        Stage::Prune,
        Stage::Improve,
        Stage::Explore,
        Stage::PostPeriod,
        Stage::Train,
        Stage::DenseGrad,
        Stage::Dense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Estimate => "estimate",
            Stage::Prune => "prune",
            Stage::Improve => "improve",
            Stage::Explore => "explore",
            Stage::PostPeriod => "post-period",
            Stage::Train => "train",
            Stage::DenseGrad => "dense-grad",
            Stage::Dense => "dense",
        }
    }

    /// Per-sample cost given ζ_P and ζ_D.
    pub fn rate(self, zeta_p: f64, zeta_d: f64) -> f64 {
        match self {
            Stage::Estimate | Stage::Improve | Stage::PostPeriod | Stage::Train => 3.0 * zeta_p,
            Stage::Explore | Stage::DenseGrad => 2.0 * zeta_p + zeta_d,
            Stage::Prune => 0.0,
            Stage::Dense => 3.0 * zeta_d,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "stage",
                name: s.to_string(),
            })
    }
}

/// Cumulative training FLOPs with per-stage subtotals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub total: f64,
    pub subtotals: BTreeMap<Stage, f64>,
    pub samples: u64,
    /// Σ samples · ζ_P, for the time-averaged ζ_P.
    zeta_p_weighted: f64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, stage: Stage, samples: u64, zeta_p: f64, zeta_d: f64) {
        let cost = samples as f64 * stage.rate(zeta_p, zeta_d);
        self.total += cost;
        *self.subtotals.entry(stage).or_insert(0.0) += cost;
        if stage != Stage::Prune {
            self.samples += samples;
            self.zeta_p_weighted += samples as f64 * zeta_p;
        }
    }

    /// Charge by stage name; unknown names are an error.
    pub fn charge_named(&mut self, stage: &str, samples: u64, zeta_p: f64, zeta_d: f64) -> Result<()> {
        self.charge(stage.parse()?, samples, zeta_p, zeta_d);
        Ok(())
    }

    pub fn per_sample(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.total / self.samples as f64
        }
    }

    pub fn mean_zeta_p(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.zeta_p_weighted / self.samples as f64
        }
    }
}

fn cycle_cost(zeta_p: f64, zeta_d: f64, h: f64, j: f64, q: f64) -> f64 {
    ((h + j) * 3.0 * zeta_p + q * (2.0 * zeta_p + zeta_d)) / (h + j + q)
}

/// Average per-sample cost of a run whose update period covers
/// `stop_fraction` of training.
pub fn closed_form_iee(zeta_p: f64, zeta_d: f64, h: f64, j: f64, q: f64, stop_fraction: f64) -> f64 {
    stop_fraction * cycle_cost(zeta_p, zeta_d, h, j, q) + (1.0 - stop_fraction) * 3.0 * zeta_p
}

/// Structured variant: updates stop after `stop_epoch` of `total_epochs`.
pub fn closed_form_structured(
    zeta_p: f64,
    zeta_d: f64,
    h: f64,
    j: f64,
    q: f64,
    stop_epoch: f64,
    total_epochs: f64,
) -> f64 {
    closed_form_iee(zeta_p, zeta_d, h, j, q, stop_epoch / total_epochs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ReferenceMethod {
    Static,
    Dense,
    Snfs,
    /// Dense gradients every `delta_t` iterations.
    Rigl { delta_t: f64 },
    /// One-shot lower bound: dense pretraining for `pretrain_fraction` of the
    /// iterations, sparse fine-tuning for the rest.
    Pretrained { pretrain_fraction: f64 },
    Dcil,
    Interspace,
}

impl FromStr for ReferenceMethod {
    type Err = Error;

    /// Names without parameters; `rigl` and `pretrained` need
    /// [`ReferenceMethod`] values built directly.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static" => ReferenceMethod::Static,
            "dense" => ReferenceMethod::Dense,
            "snfs" => ReferenceMethod::Snfs,
            "dcil" => ReferenceMethod::Dcil,
            "interspace" => ReferenceMethod::Interspace,
            _ => {
                return Err(Error::Unknown {
                    kind: "reference method",
                    name: s.into(),
                })
            }
        })
    }
}

/// Average per-sample training cost of a reference method.
pub fn closed_form_reference(method: ReferenceMethod, zeta_p: f64, zeta_d: f64) -> f64 {
    match method {
        ReferenceMethod::Static => 3.0 * zeta_p,
        ReferenceMethod::Dense => 3.0 * zeta_d,
        ReferenceMethod::Snfs => 2.0 * zeta_p + zeta_d,
        ReferenceMethod::Rigl { delta_t } => {
            (delta_t * 3.0 * zeta_p + 2.0 * zeta_p + zeta_d) / (delta_t + 1.0)
        }
        ReferenceMethod::Pretrained { pretrain_fraction } => {
            pretrain_fraction * 3.0 * zeta_d + (1.0 - pretrain_fraction) * 3.0 * zeta_p
        }
        ReferenceMethod::Dcil => 5.0 * zeta_d + zeta_p,
        ReferenceMethod::Interspace => 3.0 * zeta_p + 0.21 * zeta_d,
    }
}
