//! The prune / improve / explore / grow training loop, and the baseline loops
//! that share its data order, logging and cost accounting.

mod schedule;

pub use schedule::{apportion, budget_at, IeeSchedule, Triggers, UpdateBudget};

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{rigl_update, set_update, update_fraction, BaselineKind, Update};
use crate::data::{BatchStream, Dataset, StreamPosition};
use crate::error::{Error, Result};
use crate::events::{encode_mask, Event, EventKind, EventSink};
use crate::flops::{FlopsLedger, FlopsModel, Stage};
use crate::importance::{
    dense_grad_scores, magnitude_score, Criterion, ImportanceReport, TaylorAccumulator,
};
use crate::nn::checkpoint::{self, bytes_to_f32, Record};
use crate::nn::{argmax_rows, GradMode, LrSchedule, Model, ModelSpec, ParamRole, Sgd, Targets};
use crate::rng::substream;
use crate::select::{bottom_k, top_k, Scored};
use crate::sparsity::{
    init_partition, resource, Layout, ParamPartition, ResourceKind,
    Scope, SparsityPlan,
};
use crate::structured::{structured_grow, structured_prune, LatencyTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Iee,
    Rigl,
    Set,
    Static,
}

impl Strategy {
    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Strategy::Iee => None,
            Strategy::Rigl => Some(BaselineKind::Rigl),
            Strategy::Set => Some(BaselineKind::Set),
            Strategy::Static => Some(BaselineKind::Static),
        }
    }
}

/// Value of grown items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowInit {
    /// Keep the most recently used (stored or explored) value.
    Mru,
    Zero,
}

/// How grown items are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowRule {
    /// Top items of the run's importance criterion.
    Criterion,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub plan: SparsityPlan,
    pub h: u64,
    pub j: u64,
    pub q: u64,
    /// Pinned number of update steps; derived from `stop_fraction` if absent.
    pub t: Option<usize>,
    /// Fraction of iterations during which masks may change.
    pub stop_fraction: f64,
    /// Ω^0 as a fraction of Ψ.
    pub omega0_fraction: f64,
    /// Freeze Θ_K while exploring.
    pub freeze: bool,
    pub grow_init: GrowInit,
    pub grow_rule: GrowRule,
    /// Baseline update interval; defaults to H+J+Q.
    pub baseline_interval: Option<u64>,
    /// Initial baseline update fraction.
    pub alpha0: f64,
    /// Knapsack latency quantum in milliseconds.
    pub quantum: f64,
    /// Consecutive non-finite losses that halt a run.
    pub nan_patience: u32,
    /// Emit one event per training iteration.
    pub log_iterations: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Iee,
            criterion: Criterion::Magnitude,
            plan: SparsityPlan::uniform(0.9),
            h: 150,
            j: 150,
            q: 150,
            t: None,
            stop_fraction: 0.75,
            omega0_fraction: 0.3,
            freeze: true,
            grow_init: GrowInit::Mru,
            grow_rule: GrowRule::Criterion,
            baseline_interval: None,
            alpha0: 0.3,
            quantum: 0.01,
            nan_patience: 50,
            log_iterations: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Linear warmup length as a fraction of the run, then cosine decay.
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
        }
    }
}

/// Everything needed to rebuild a trainer from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelSpec,
    pub engine: EngineConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
}

/// Contract checks performed during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Θ_K fingerprint compared before and after each explore stage.
    pub freeze_checks: u64,
    pub freeze_violations: u64,
    /// Regrown items compared with their value at prune time (only when no
    /// exploration updates happen in between).
    pub mru_checks: u64,
    pub mru_violations: u64,
    /// R(Θ_K) compared with Ψ after each completed update.
    pub resource_checks: u64,
    pub resource_violations: u64,
    pub max_resource_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    i: u64,
    t: usize,
    flag: bool,
    pruned_this_cycle: bool,
    pruned_counts: Vec<usize>,
    omega_t: f64,
    nan_streak: u32,
    diverged: bool,
    frozen_hash: Option<u64>,
    mru: Vec<(usize, usize, u32)>,
    audit: Audit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub iterations: u64,
    pub diverged: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    run: RunSpec,
    state: State,
    opt_step: u64,
    stream: StreamPosition,
    grow_rng: ChaCha8Rng,
    ledger: FlopsLedger,
    psi: f64,
    table: Option<LatencyTable>,
    acc_k: Option<TaylorAccumulator>,
    acc_p: Option<TaylorAccumulator>,
}

pub struct Trainer {
    run: RunSpec,
    model: Model,
    opt: Sgd,
    partition: ParamPartition,
    stream: BatchStream,
    schedule: IeeSchedule,
    budget: Option<UpdateBudget>,
    table: Option<LatencyTable>,
    kind: ResourceKind,
    psi: f64,
    resource: f64,
    flops: FlopsModel,
    zeta_d: f64,
    zeta_p: f64,
    ledger: FlopsLedger,
    grow_rng: ChaCha8Rng,
    acc_k: Option<TaylorAccumulator>,
    acc_p: Option<TaylorAccumulator>,
    /// Global parameter index of each layer's first parameter.
    param_offset: Vec<usize>,
    /// Dense-gradient scores captured before the optimizer step of a RigL update.
    pending_grads: Option<ImportanceReport>,
    state: State,
}

impl Trainer {
    /// Build model, optimizer and initial partition for `run`. Channel scope
    /// needs a latency `table` covering every compute layer.
    pub fn new(run: RunSpec, dataset_len: usize, table: Option<LatencyTable>) -> Result<Self> {
        let cfg = &run.engine;
        validate(&run)?;
        let scope = cfg.criterion.scope();
        let mut init_rng = substream(run.seed, "init");
        let mut model = Model::new(run.model.clone(), &mut init_rng)?;
        let layout = Layout::new(&run.model, scope)?;
        let mut mask_rng = substream(run.seed, "mask");
        let partition = init_partition(layout.clone(), &cfg.plan, &mut mask_rng)?;
        partition.apply(&mut model);
        let kind = match scope {
            Scope::Weights => ResourceKind::ParamCount,
            Scope::Channels => ResourceKind::Latency,
        };
        if let Some(t) = &table {
            t.check_layout(&layout)?;
        }
        if kind == ResourceKind::Latency && table.is_none() {
            return Err(Error::Config("channel scope needs a latency table".into()));
        }
        let psi = resource(&partition, kind, table.as_ref())?;
        let update_iters = (cfg.stop_fraction * run.total_iters as f64).floor() as u64;
        let schedule = match cfg.strategy {
            Strategy::Iee => IeeSchedule::new(cfg.h, cfg.j, cfg.q, run.total_iters, update_iters, cfg.t)?,
            _ => {
                let interval = cfg.baseline_interval.unwrap_or(cfg.h + cfg.j + cfg.q);
                let mut s = IeeSchedule::new(interval, 0, 0, run.total_iters, update_iters, cfg.t)?;
                if cfg.strategy == Strategy::Static {
                    s.t_total = 0;
                }
                s
            }
        };
        let budget = (cfg.strategy == Strategy::Iee && schedule.t_total > 0).then(|| {
            let units = match kind {
                ResourceKind::ParamCount => psi,
                ResourceKind::Latency => psi / cfg.quantum,
            };
            UpdateBudget::new(units, cfg.omega0_fraction, schedule.t_total)
        });
        let warmup = (run.optim.warmup_fraction * run.total_iters as f64) as u64;
        let opt = Sgd::new(
            &model,
            run.optim.lr,
            run.optim.momentum,
            run.optim.weight_decay,
            LrSchedule::WarmupCosine {
                warmup_steps: warmup,
                total_steps: run.total_iters,
            },
        );
        let stream = BatchStream::new(dataset_len, run.batch_size, run.seed)?;
        let flops = FlopsModel::new(&layout);
        let zeta_d = flops.dense();
        let zeta_p = flops.sparse(&partition);
        let taylor = cfg.criterion == Criterion::Taylor;
        let mut param_offset = Vec::with_capacity(model.layers().len());
        let mut acc = 0;
        for l in model.layers() {
            param_offset.push(acc);
            acc += l.params.len();
        }
        let groups = partition.groups();
        Ok(Self {
            acc_k: taylor.then(|| TaylorAccumulator::new(&partition)),
            acc_p: taylor.then(|| TaylorAccumulator::new(&partition)),
            grow_rng: substream(run.seed, "set-grow"),
            run,
            model,
            opt,
            partition,
            stream,
            schedule,
            budget,
            table,
            kind,
            psi,
            resource: psi,
            flops,
            zeta_d,
            zeta_p,
            ledger: FlopsLedger::new(),
            param_offset,
            pending_grads: None,
            state: State {
                i: 0,
                t: 0,
                flag: false,
                pruned_this_cycle: false,
                pruned_counts: vec![0; groups],
                omega_t: 0.0,
                nan_streak: 0,
                diverged: false,
                frozen_hash: None,
                mru: Vec::new(),
                audit: Audit::default(),
            },
        })
    }

    pub fn run_spec(&self) -> &RunSpec {
        &self.run
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    pub fn schedule(&self) -> &IeeSchedule {
        &self.schedule
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    pub fn audit(&self) -> &Audit {
        &self.state.audit
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn resource(&self) -> f64 {
        self.resource
    }

    pub fn resource_kind(&self) -> ResourceKind {
        self.kind
    }

    pub fn zeta(&self) -> (f64, f64) {
        (self.zeta_p, self.zeta_d)
    }

    pub fn iteration(&self) -> u64 {
        self.state.i
    }

    pub fn update_step(&self) -> usize {
        self.state.t
    }

    pub fn diverged(&self) -> bool {
        self.state.diverged
    }

    /// The single criterion used by both prune and grow.
    pub fn criterion(&self) -> Criterion {
        self.run.engine.criterion
    }

    pub fn is_finished(&self) -> bool {
        self.state.diverged || self.state.i >= self.run.total_iters
    }

    /// Run to completion or divergence.
    pub fn run(&mut self, data: &Dataset, sink: &mut dyn EventSink) -> Result<RunOutcome> {
        while !self.is_finished() {
            self.step(data, sink)?;
        }
        Ok(RunOutcome {
            iterations: self.state.i,
            diverged: self.state.diverged,
        })
    }

    /// One iteration: fire the schedule's actions, then one optimizer step.
    pub fn step(&mut self, data: &Dataset, sink: &mut dyn EventSink) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        self.state.i += 1;
        let i = self.state.i;
        let stage = match self.run.engine.strategy.baseline() {
            None => self.iee_actions(i, sink)?,
            Some(kind) => {
                let update = kind != BaselineKind::Static
                    && self.state.t < self.schedule.t_total
                    && i % self.schedule.delta_t() == 0;
                if update && kind == BaselineKind::Rigl {
                    Stage::DenseGrad
                } else {
                    Stage::Train
                }
            }
        };
        let loss = self.train_iteration(data, stage)?;
        self.charge_and_log(stage, loss, sink)?;
        if self.state.diverged {
            return Ok(());
        }
        if let Some(kind) = self.run.engine.strategy.baseline() {
            if kind != BaselineKind::Static
                && self.state.t < self.schedule.t_total
                && i % self.schedule.delta_t() == 0
            {
                self.baseline_update(kind, sink)?;
            }
        }
        Ok(())
    }

    fn iee_actions(&mut self, i: u64, sink: &mut dyn EventSink) -> Result<Stage> {
        let tr = self.schedule.triggers(i, self.state.t);
        if tr.prune {
            let omega = self.budget.map_or(0.0, |b| b.at(self.state.t));
            self.state.omega_t = omega;
            self.prune(omega, sink)?;
            self.state.pruned_this_cycle = true;
        }
        if tr.set_flag {
            self.state.flag = true;
            self.enter_explore();
        }
        if tr.grow {
            self.grow(sink)?;
            self.state.t += 1;
            self.state.flag = false;
            self.state.pruned_this_cycle = false;
            if self.state.t == self.schedule.t_total {
                self.emit(sink, EventKind::Freeze, None, false, None)?;
            }
        }
        Ok(if self.state.flag {
            Stage::Explore
        } else if self.state.t >= self.schedule.t_total {
            Stage::PostPeriod
        } else if self.state.pruned_this_cycle {
            Stage::Improve
        } else {
            Stage::Estimate
        })
    }


    fn train_iteration(&mut self, data: &Dataset, stage: Stage) -> Result<f64> {
        let idx = self.stream.next_indices();
        let (x, y) = data.gather(&idx);
        let mode = if stage == Stage::DenseGrad {
            GradMode::Dense
        } else {
            GradMode::Masked
        };
        let loss = self.model.forward_backward(&x, &y, mode)?;
        if loss.is_finite() {
            self.state.nan_streak = 0;
        } else {
            self.state.nan_streak += 1;
            if self.state.nan_streak >= self.run.engine.nan_patience {
                self.state.diverged = true;
            }
        }
        match stage {
            Stage::Estimate => {
                if let Some(acc) = &mut self.acc_k {
                    acc.accumulate(&self.model, &self.partition)?;
                }
            }
            Stage::Explore => {
                if let Some(acc) = &mut self.acc_p {
                    acc.accumulate(&self.model, &self.partition)?;
                }
            }
            Stage::DenseGrad => {
                self.pending_grads = Some(dense_grad_scores(&self.model, &self.partition)?);
            }
            _ => {}
        }
        self.opt.step(&mut self.model)?;
        Ok(loss)
    }

    fn charge_and_log(&mut self, stage: Stage, loss: f64, sink: &mut dyn EventSink) -> Result<()> {
        let batch = self.run.batch_size as u64;
        self.ledger.charge(stage, batch, self.zeta_p, self.zeta_d);
        let finite = loss.is_finite().then_some(loss);
        if self.run.engine.log_iterations {
            self.emit(sink, stage_event(stage), finite, false, None)?;
        }
        if self.state.diverged {
            let msg = format!(
                "{} consecutive non-finite losses",
                self.state.nan_streak
            );
            self.emit(sink, EventKind::Diverged, finite, false, Some(msg))?;
        }
        Ok(())
    }

    fn emit(
        &self,
        sink: &mut dyn EventSink,
        stage: EventKind,
        loss: Option<f64>,
        with_mask: bool,
        message: Option<String>,
    ) -> Result<()> {
        sink.record(&Event {
            iter: self.state.i,
            stage,
            t: self.state.t,
            omega_t: self.state.omega_t,
            active_count: self.partition.active_count(),
            resource: self.resource,
            loss,
            flops_cum: self.ledger.total,
            mask: with_mask.then(|| encode_mask(&self.partition.flat())),
            message,
        })
    }

    fn refresh(&mut self) -> Result<()> {
        self.partition.apply(&mut self.model);
        self.resource = resource(&self.partition, self.kind, self.table.as_ref())?;
        self.zeta_p = self.flops.sparse(&self.partition);
        Ok(())
    }

    fn check_resource(&mut self) {
        let tol = match self.kind {
            ResourceKind::ParamCount => 0.0,
            ResourceKind::Latency => self.run.engine.quantum,
        };
        let gap = (self.resource - self.psi).abs();
        let audit = &mut self.state.audit;
        audit.resource_checks += 1;
        audit.max_resource_gap = audit.max_resource_gap.max(gap);
        if gap > tol + 1e-9 * self.psi.abs().max(1.0) {
            audit.resource_violations += 1;
        }
    }

    /// `(global parameter index, element range)` governed by one item.
    fn item_slots(&self, g: usize, index: usize) -> Vec<(usize, std::ops::Range<usize>)> {
        let layout = self.partition.layout();
        let cl = &layout.compute[layout.groups[g]];
        let layers = self.model.layers();
        let mut out = Vec::new();
        for (k, p) in layers[cl.layer].params.iter().enumerate() {
            let slot = self.param_offset[cl.layer] + k;
            match (layout.scope, p.role) {
                (Scope::Weights, ParamRole::Weight) => out.push((slot, index..index + 1)),
                (Scope::Weights, _) => {}
                (Scope::Channels, ParamRole::Weight) => {
                    out.push((slot, index * cl.row_len..(index + 1) * cl.row_len))
                }
                (Scope::Channels, _) => out.push((slot, index..index + 1)),
            }
        }
        if layout.scope == Scope::Channels {
            if let Some(bn) = cl.batchnorm {
                for k in 0..layers[bn].params.len() {
                    out.push((self.param_offset[bn] + k, index..index + 1));
                }
            }
        }
        out
    }

    fn zero_velocity(&mut self, items: &[(usize, usize)]) {
        for &(g, i) in items {
            for (slot, range) in self.item_slots(g, i) {
                self.opt.velocity_mut()[slot][range].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Set grown weights (not biases or BN parameters) and their velocity to zero.
    fn zero_weights(&mut self, items: &[(usize, usize)]) {
        for &(g, i) in items {
            for (slot, range) in self.item_slots(g, i) {
                let (layer, k) = self.locate(slot);
                let p = &mut self.model.layers_mut()[layer].params[k];
                if p.role != ParamRole::Weight {
                    continue;
                }
                p.value.data_mut()[range.clone()].iter_mut().for_each(|v| *v = 0.0);
                self.opt.velocity_mut()[slot][range].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn locate(&self, slot: usize) -> (usize, usize) {
        let layer = self.param_offset.partition_point(|&o| o <= slot) - 1;
        let mut layer = layer;
        while self.model.layers()[layer].params.is_empty() || slot - self.param_offset[layer] >= self.model.layers()[layer].params.len() {
            layer -= 1;
        }
        (layer, slot - self.param_offset[layer])
    }

    fn weight_value(&self, g: usize, i: usize) -> u32 {
        let layout = self.partition.layout();
        let layer = layout.compute[layout.groups[g]].layer;
        self.model.layers()[layer]
            .param(ParamRole::Weight)
            .expect("compute layer has a weight")
            .value
            .data()[i]
            .to_bits()
    }

    /// Fingerprint of every value that exploration must leave untouched:
    /// all parameters except the items of Θ_P.
    fn theta_k_hash(&self) -> u64 {
        let mut explorable: Vec<Vec<bool>> =
            self.model.params().map(|p| vec![false; p.value.numel()]).collect();
        for g in 0..self.partition.groups() {
            for i in 0..self.partition.masks()[g].len() {
                if !self.partition.is_active(g, i) {
                    for (slot, range) in self.item_slots(g, i) {
                        explorable[slot][range].iter_mut().for_each(|b| *b = true);
                    }
                }
            }
        }
        let mut h = DefaultHasher::new();
        for (p, skip) in self.model.params().zip(&explorable) {
            for (v, &s) in p.value.data().iter().zip(skip) {
                if !s {
                    h.write_u32(v.to_bits());
                }
            }
        }
        h.finish()
    }

    fn enter_explore(&mut self) {
        self.partition.apply_explore(&mut self.model);
        if !self.run.engine.freeze {
            for p in self.model.params_mut() {
                p.freeze = None;
                p.requires_grad = true;
            }
        } else {
            self.state.frozen_hash = Some(self.theta_k_hash());
        }
    }

    fn prune(&mut self, omega: f64, sink: &mut dyn EventSink) -> Result<()> {
        let before = self.partition.clone();
        let warning = match self.kind {
            ResourceKind::ParamCount => self.prune_weights(omega.round() as usize)?,
            ResourceKind::Latency => self.prune_channels(omega)?,
        };
        let pruned = changed(&before, &self.partition, true);
        self.state.pruned_counts = vec![0; self.partition.groups()];
        for &(g, _) in &pruned {
            self.state.pruned_counts[g] += 1;
        }
        self.zero_velocity(&pruned);
        self.state.mru = if self.kind == ResourceKind::ParamCount {
            pruned.iter().map(|&(g, i)| (g, i, self.weight_value(g, i))).collect()
        } else {
            Vec::new()
        };
        self.refresh()?;
        if let Some(msg) = warning {
            log::warn!("{msg}");
            self.emit(sink, EventKind::Warning, None, false, Some(msg))?;
        }
        self.emit(sink, EventKind::Prune, None, true, None)
    }

    fn prune_weights(&mut self, omega: usize) -> Result<Option<String>> {
        let report = magnitude_score(&self.model, &self.partition)?;
        let groups = self.partition.groups();
        let limit = self.partition.active_count().saturating_sub(groups);
        let mut warning = None;
        let mut omega = omega;
        if omega > limit {
            warning = Some(format!(
                "budget Ω = {omega} exceeds the {limit} prunable active items; clamped"
            ));
            omega = limit;
        }
        let pruned = prune_selection(&self.partition, &report.values, omega, self.run.engine.plan.is_layerwise());
        for (g, i) in pruned {
            self.partition.set(g, i, false);
        }
        Ok(warning)
    }

    fn prune_channels(&mut self, omega_units: f64) -> Result<Option<String>> {
        let q = self.run.engine.quantum;
        let table = self.table.as_ref().expect("latency mode has a table");
        let scores = self.acc_k.as_ref().expect("channel scope has accumulators").report().values;
        let attempt = |units: f64| structured_prune(&self.partition, &scores, table, self.psi, units * q, q);
        match attempt(omega_units) {
            Ok(p) => {
                self.partition = p;
                Ok(None)
            }
            Err(Error::Infeasible(_)) => {
                // Largest feasible number of quanta by bisection.
                let (mut lo, mut hi) = (0u64, omega_units.max(0.0) as u64);
                let mut best = None;
                while lo <= hi {
                    let mid = lo + (hi - lo) / 2;
                    match attempt(mid as f64) {
                        Ok(p) => {
                            best = Some((mid, p));
                            lo = mid + 1;
                        }
                        Err(Error::Infeasible(_)) => {
                            if mid == 0 {
                                break;
                            }
                            hi = mid - 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
                let msg = match best {
                    Some((units, p)) => {
                        self.partition = p;
                        format!(
                            "latency budget Ω = {:.4} ms infeasible; clamped to {:.4} ms",
                            omega_units * q,
                            units as f64 * q
                        )
                    }
                    None => "no feasible prune at the current latency; skipped".to_string(),
                };
                Ok(Some(msg))
            }
            Err(e) => Err(e),
        }
    }

    fn grow(&mut self, sink: &mut dyn EventSink) -> Result<()> {
        if let Some(h) = self.state.frozen_hash.take() {
            self.state.audit.freeze_checks += 1;
            if h != self.theta_k_hash() {
                self.state.audit.freeze_violations += 1;
            }
        }
        let before = self.partition.clone();
        match self.kind {
            ResourceKind::ParamCount => self.grow_weights()?,
            ResourceKind::Latency => {
                let table = self.table.as_ref().expect("latency mode has a table");
                let scores = self.acc_p.as_ref().expect("channel scope has accumulators").report().values;
                let scores = match self.run.engine.grow_rule {
                    GrowRule::Criterion => scores,
                    GrowRule::Random => scores
                        .iter()
                        .map(|s| s.iter().map(|_| self.grow_rng.gen::<f32>()).collect())
                        .collect(),
                };
                self.partition =
                    structured_grow(&self.partition, &scores, table, self.psi, self.run.engine.quantum)?;
            }
        }
        let grown = changed(&before, &self.partition, false);
        match self.run.engine.grow_init {
            GrowInit::Zero => self.zero_weights(&grown),
            GrowInit::Mru => {
                if self.run.engine.q == 0 {
                    let stored: HashMap<(usize, usize), u32> =
                        self.state.mru.iter().map(|&(g, i, v)| ((g, i), v)).collect();
                    for &(g, i) in &grown {
                        if let Some(&v) = stored.get(&(g, i)) {
                            self.state.audit.mru_checks += 1;
                            if v != self.weight_value(g, i) {
                                self.state.audit.mru_violations += 1;
                            }
                        }
                    }
                }
            }
        }
        self.state.mru.clear();
        self.refresh()?;
        self.check_resource();
        for acc in [&mut self.acc_k, &mut self.acc_p].into_iter().flatten() {
            acc.reset();
        }
        self.emit(sink, EventKind::Grow, None, true, None)
    }

    fn grow_weights(&mut self) -> Result<()> {
        let groups = self.partition.groups();
        let scores: Vec<Vec<f32>> = match self.run.engine.grow_rule {
            GrowRule::Criterion => magnitude_score(&self.model, &self.partition)?.values,
            GrowRule::Random => (0..groups)
                .map(|g| {
                    (0..self.partition.masks()[g].len())
                        .map(|_| self.grow_rng.gen::<f32>())
                        .collect()
                })
                .collect(),
        };
        let mut grown: Vec<(usize, usize)> = Vec::new();
        match self.run.engine.plan.mode {
            crate::sparsity::PlanMode::NOfM { n, m } => {
                let layout = self.partition.layout();
                for g in 0..groups {
                    let row_len = layout.compute[layout.groups[g]].row_len;
                    let len = self.partition.masks()[g].len();
                    for row in (0..len).step_by(row_len) {
                        let mut start = row;
                        while start < row + row_len {
                            let end = (start + m).min(row + row_len);
                            let target = if end - start == m { m - n } else { end - start };
                            let cand: Vec<Scored> = (start..end)
                                .filter(|&i| !self.partition.is_active(g, i))
                                .map(|i| Scored::new(scores[g][i], g, i))
                                .collect();
                            let active = (end - start) - cand.len();
                            let deficit = target.saturating_sub(active);
                            grown.extend(top_k(&cand, deficit).iter().map(|s| (g, s.index)));
                            start = end;
                        }
                    }
                }
            }
            _ => {
                let layerwise = self.run.engine.plan.is_layerwise();
                let counts = if layerwise {
                    self.state.pruned_counts.clone()
                } else {
                    vec![self.state.pruned_counts.iter().sum()]
                };
                grown = grow_selection(&self.partition, &scores, &counts, layerwise);
            }
        }
        for (g, i) in grown {
            self.partition.set(g, i, true);
        }
        Ok(())
    }

    fn baseline_update(&mut self, kind: BaselineKind, sink: &mut dyn EventSink) -> Result<()> {
        let cfg = &self.run.engine;
        let fraction = update_fraction(cfg.alpha0, self.state.t, self.schedule.t_total);
        let layerwise = cfg.plan.is_layerwise();
        let magnitude = magnitude_score(&self.model, &self.partition)?;
        let before = self.partition.clone();
        let update: Update = match kind {
            BaselineKind::Rigl => {
                let grads = self.pending_grads.take().ok_or_else(|| {
                    Error::Config("RigL update without dense gradients".into())
                })?;
                rigl_update(&mut self.partition, &magnitude, &grads, fraction, layerwise)?
            }
            BaselineKind::Set => {
                set_update(&mut self.partition, &magnitude, fraction, layerwise, &mut self.grow_rng)?
            }
            BaselineKind::Static => return Ok(()),
        };
        self.state.omega_t = update.pruned.len() as f64;
        self.zero_velocity(&update.pruned);
        self.zero_weights(&update.grown);

        let after = std::mem::replace(&mut self.partition, before);
        for &(g, i) in &update.pruned {
            self.partition.set(g, i, false);
        }
        self.emit(sink, EventKind::Prune, None, true, None)?;
        self.partition = after;
        self.refresh()?;
        self.check_resource();
        self.emit(sink, EventKind::Grow, None, true, None)?;
        self.state.t += 1;
        if self.state.t == self.schedule.t_total {
            self.emit(sink, EventKind::Freeze, None, false, None)?;
        }
        Ok(())
    }

    /// Loss and accuracy over `data` in inference mode.
    pub fn evaluate(&mut self, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
        evaluate(&mut self.model, data, batch_size)
    }

    /// Write the complete training state to `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            run: self.run.clone(),
            state: self.state.clone(),
            opt_step: self.opt.steps(),
            stream: self.stream.position(),
            grow_rng: self.grow_rng.clone(),
            ledger: self.ledger.clone(),
            psi: self.psi,
            table: self.table.clone(),
            acc_k: self.acc_k.clone(),
            acc_p: self.acc_p.clone(),
        };
        let mut records = checkpoint::model_records(&self.model);
        for (k, v) in self.opt.velocity().iter().enumerate() {
            records.push(Record::floats(format!("velocity/{k}"), v));
        }
        for (g, m) in self.partition.masks().iter().enumerate() {
            records.push(Record::bits(format!("partition/{g}"), m.bits()));
        }
        checkpoint::write(path, &header, &records)
    }

    /// Rebuild a trainer from [`Trainer::save_checkpoint`] output; continuing
    /// it reproduces the uninterrupted run exactly.
    pub fn resume(path: &Path, dataset_len: usize) -> Result<Self> {
        let (header, records): (CheckpointHeader, _) = checkpoint::read(path)?;
        let mut tr = Trainer::new(header.run, dataset_len, header.table)?;
        checkpoint::restore_model(&mut tr.model, &records)?;
        let missing = |name: &str| Error::Checkpoint(format!("missing record `{name}`"));
        let mut velocity = Vec::new();
        for k in 0..tr.opt.velocity().len() {
            let key = format!("velocity/{k}");
            velocity.push(bytes_to_f32(records.get(&key).ok_or_else(|| missing(&key))?)?);
        }
        tr.opt.set_state(header.opt_step, velocity)?;
        let mut bits = Vec::with_capacity(tr.partition.total());
        for g in 0..tr.partition.groups() {
            let key = format!("partition/{g}");
            let len = tr.partition.masks()[g].len();
            bits.extend(checkpoint::unpack_bits(records.get(&key).ok_or_else(|| missing(&key))?, len)?);
        }
        tr.partition.set_flat(&bits)?;
        tr.stream.seek(header.stream);
        tr.grow_rng = header.grow_rng;
        tr.ledger = header.ledger;
        tr.psi = header.psi;
        tr.acc_k = header.acc_k;
        tr.acc_p = header.acc_p;
        tr.state = header.state;
        tr.resource = resource(&tr.partition, tr.kind, tr.table.as_ref())?;
        tr.zeta_p = tr.flops.sparse(&tr.partition);
        Ok(tr)
    }
}

/// Loss and accuracy of `model` over `data` without touching its state.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for (x, y) in data.chunks(batch_size.max(1)) {
        let out = model.predict(&x)?;
        let (l, _) = model.loss(&out, &y)?;
        let b = y.len();
        loss += l * b as f64;
        if let Targets::Labels(labels) = &y {
            correct += argmax_rows(&out).iter().zip(labels).filter(|(a, b)| a == b).count();
        }
        n += b;
    }
    let n = n.max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

fn validate(run: &RunSpec) -> Result<()> {
    let cfg = &run.engine;
    cfg.plan.validate()?;
    if run.total_iters == 0 {
        return Err(Error::Config("total_iters must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.stop_fraction) {
        return Err(Error::Config(format!("stop_fraction {} outside [0, 1]", cfg.stop_fraction)));
    }
    if !(0.0..1.0).contains(&cfg.omega0_fraction) {
        return Err(Error::Config(format!("omega0_fraction {} outside [0, 1)", cfg.omega0_fraction)));
    }
    if !(0.0..1.0).contains(&cfg.alpha0) {
        return Err(Error::Config(format!("alpha0 {} outside [0, 1)", cfg.alpha0)));
    }
    if cfg.quantum <= 0.0 || !cfg.quantum.is_finite() {
        return Err(Error::Config(format!("quantum {} must be positive", cfg.quantum)));
    }
    if cfg.nan_patience == 0 {
        return Err(Error::Config("nan_patience must be at least 1".into()));
    }
    if cfg.strategy != Strategy::Iee {
        if cfg.criterion != Criterion::Magnitude {
            return Err(Error::Unsupported("baselines run in weight scope with magnitude pruning".into()));
        }
        if matches!(cfg.plan.mode, crate::sparsity::PlanMode::NOfM { .. }) {
            return Err(Error::Unsupported("baselines do not maintain N:M structure".into()));
        }
        if cfg.baseline_interval == Some(0) {
            return Err(Error::Config("baseline interval must be positive".into()));
        }
    }
    Ok(())
}

fn stage_event(stage: Stage) -> EventKind {
    match stage {
        Stage::Estimate => EventKind::Estimate,
        Stage::Improve => EventKind::Improve,
        Stage::Explore => EventKind::Explore,
        Stage::PostPeriod => EventKind::PostPeriod,
        Stage::DenseGrad => EventKind::DenseGrad,
        Stage::Train | Stage::Dense | Stage::Prune => EventKind::Train,
    }
}

/// Items of Θ_K removed by a prune of `omega` items: the lowest scores, per
/// group after splitting `omega` in proportion to the active counts when
/// `layerwise` (one item per group always survives), else globally.
pub fn prune_selection(
    partition: &ParamPartition,
    scores: &[Vec<f32>],
    omega: usize,
    layerwise: bool,
) -> Vec<(usize, usize)> {
    let groups = partition.groups();
    let active: Vec<Vec<Scored>> = (0..groups).map(|g| scored(partition, &scores[g], g, true)).collect();
    if layerwise {
        let weights: Vec<usize> = active.iter().map(Vec::len).collect();
        let share = apportion(omega, &weights);
        (0..groups)
            .flat_map(|g| {
                let k = share[g].min(active[g].len().saturating_sub(1));
                bottom_k(&active[g], k).into_iter().map(move |s| (g, s.index))
            })
            .collect()
    } else {
        bottom_k(&active.concat(), omega).iter().map(|s| (s.group, s.index)).collect()
    }
}

/// Items of Θ_P added by a grow: the highest scores, `counts[g]` per group
/// when `layerwise`, else `counts[0]` globally.
pub fn grow_selection(
    partition: &ParamPartition,
    scores: &[Vec<f32>],
    counts: &[usize],
    layerwise: bool,
) -> Vec<(usize, usize)> {
    let groups = partition.groups();
    let cand: Vec<Vec<Scored>> = (0..groups).map(|g| scored(partition, &scores[g], g, false)).collect();
    if layerwise {
        (0..groups)
            .flat_map(|g| top_k(&cand[g], counts[g]).into_iter().map(move |s| (g, s.index)))
            .collect()
    } else {
        top_k(&cand.concat(), counts[0]).iter().map(|s| (s.group, s.index)).collect()
    }
}

fn scored(partition: &ParamPartition, scores: &[f32], g: usize, active: bool) -> Vec<Scored> {
    (0..partition.masks()[g].len())
        .filter(|&i| partition.is_active(g, i) == active)
        .map(|i| Scored::new(scores[i], g, i))
        .collect()
}

/// Items active in `before` and inactive in `after` (`removed`), or the reverse.
fn changed(before: &ParamPartition, after: &ParamPartition, removed: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for g in 0..before.groups() {
        for i in 0..before.masks()[g].len() {
            let (b, a) = (before.is_active(g, i), after.is_active(g, i));
            if b != a && b == removed {
                out.push((g, i));
            }
        }
    }
    out
}
