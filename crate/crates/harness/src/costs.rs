//! Closed-form training-cost tables and one-shot channel prune plans.

use iee_core::engine::{RunSpec, Trainer};
use iee_core::flops::{closed_form_iee, closed_form_reference, closed_form_structured, FlopsModel, ReferenceMethod};
use iee_core::importance::TaylorAccumulator;
use iee_core::nn::GradMode;
use iee_core::sparsity::{resource, ResourceKind, Scope};
use iee_core::structured::{structured_prune, LatencyTable};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::runner::Prepared;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub flops_per_sample: f64,
    /// Relative to dense training.
    pub fraction_of_dense: f64,
}

/// Average per-sample training cost of IEE and the reference methods for
/// the model and initial partition of `run`.
pub fn cost_table(cfg: &ExperimentConfig, run: &RunSpec, table: Option<LatencyTable>, train_len: usize) -> Result<Vec<CostRow>> {
    let tr = Trainer::new(run.clone(), train_len, table)?;
    let (zeta_p, zeta_d) = tr.zeta();
    let s = &cfg.schedule;
    let (h, j, q) = (s.h as f64, s.j as f64, s.q as f64);
    let iee = match cfg.scope() {
        Scope::Weights => closed_form_iee(zeta_p, zeta_d, h, j, q, s.stop_fraction),
        Scope::Channels => {
            let epochs = cfg.optimizer.epochs as f64;
            let stop = s.structured_stop_epoch.unwrap_or(0.04 * epochs);
            closed_form_structured(zeta_p, zeta_d, h, j, q, stop, epochs)
        }
    };
    let delta_t = s.baseline_interval.map_or(h + j + q, |v| v as f64);
    let mut rows = vec![("iee".to_string(), iee)];
    for (name, m) in [
        ("dense", ReferenceMethod::Dense),
        ("static", ReferenceMethod::Static),
        ("snfs", ReferenceMethod::Snfs),
        ("rigl", ReferenceMethod::Rigl { delta_t }),
        ("pretrained", ReferenceMethod::Pretrained { pretrain_fraction: 0.5 }),
        ("dcil", ReferenceMethod::Dcil),
        ("interspace", ReferenceMethod::Interspace),
    ] {
        rows.push((name.to_string(), closed_form_reference(m, zeta_p, zeta_d)));
    }
    Ok(rows
        .into_iter()
        .map(|(method, f)| CostRow {
            method,
            flops_per_sample: f,
            fraction_of_dense: f / (3.0 * zeta_d),
        })
        .collect())
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("method,flops_per_sample,fraction_of_dense\n");
    for r in rows {
        out.push_str(&format!("{},{:.6e},{:.6}\n", r.method, r.flops_per_sample, r.fraction_of_dense));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub psi_ms: f64,
    pub omega_ms: f64,
    pub latency_before_ms: f64,
    pub latency_after_ms: f64,
    pub batches: usize,
    /// Kept channel indices per prunable layer.
    pub layers: Vec<PlanLayer>,
    pub flops_before: f64,
    pub flops_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub name: String,
    pub channels: usize,
    pub kept: Vec<usize>,
}

/// Accumulate Taylor channel scores over `batches` training batches and keep
/// the knapsack-optimal channels within `budget_ms` of table latency.
pub fn prune_plan(p: &Prepared, trainer: Option<Trainer>, batches: usize, budget_ms: f64) -> Result<PrunePlan> {
    let table = p
        .table
        .as_ref()
        .ok_or_else(|| HarnessError::Config("prune-plan needs taylor importance and a latency table".into()))?;
    let tr = match trainer {
        Some(t) => t,
        None => Trainer::new(p.run.clone(), p.splits.train.len(), Some(table.clone()))?,
    };
    if tr.resource_kind() != ResourceKind::Latency {
        return Err(HarnessError::Config("prune-plan works in channel scope".into()));
    }
    let partition = tr.partition().clone();
    let mut model = tr.model().clone();
    model.set_train(true);
    let mut acc = TaylorAccumulator::new(&partition);
    let batch = p.run.batch_size;
    for (x, y) in p.splits.train.chunks(batch).take(batches.max(1)) {
        model.forward_backward(&x, &y, GradMode::Masked)?;
        acc.accumulate(&model, &partition)?;
    }
    let scores = acc.report().values;
    let psi = resource(&partition, ResourceKind::Latency, Some(table))?;
    if !(budget_ms >= 0.0) {
        return Err(HarnessError::Config(format!("budget {budget_ms} ms must be non-negative")));
    }
    let omega = (psi - budget_ms).max(0.0);
    let pruned = structured_prune(&partition, &scores, table, psi, omega, p.run.engine.quantum)?;
    let layout = partition.layout();
    let flops = FlopsModel::new(layout);
    Ok(PrunePlan {
        psi_ms: psi,
        omega_ms: omega,
        latency_before_ms: psi,
        latency_after_ms: resource(&pruned, ResourceKind::Latency, Some(table))?,
        batches: batches.max(1),
        layers: (0..pruned.groups())
            .map(|g| PlanLayer {
                name: layout.compute[layout.groups[g]].name(),
                channels: pruned.masks()[g].len(),
                kept: (0..pruned.masks()[g].len()).filter(|&j| pruned.is_active(g, j)).collect(),
            })
            .collect(),
        flops_before: flops.sparse(&partition),
        flops_after: flops.sparse(&pruned),
    })
}
