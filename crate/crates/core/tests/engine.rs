use iee_core::data::{Dataset, DatasetTargets};
use iee_core::engine::{EngineConfig, GrowInit, OptimConfig, RunSpec, Strategy, Trainer};
use iee_core::events::{Event, EventKind};
use iee_core::importance::Criterion;
use iee_core::nn::{ModelSpec, Tensor};
use iee_core::sparsity::{Layout, Scope, SparsityPlan};
use iee_core::structured::LatencyTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..3);
        for d in 0..dim {
            let centre = if d % 3 == c { 1.5 } else { 0.0 };
            x.push(centre + rng.gen_range(-1.0f32..1.0));
        }
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], x).unwrap(), DatasetTargets::Labels(y)).unwrap()
}

fn run(engine: EngineConfig, total_iters: u64) -> RunSpec {
    RunSpec {
        model: ModelSpec::mlp(12, &[24, 16], 3, true),
        engine,
        optim: OptimConfig::default(),
        batch_size: 16,
        total_iters,
        seed: 7,
    }
}

fn iee(h: u64, j: u64, q: u64) -> EngineConfig {
    EngineConfig {
        h,
        j,
        q,
        plan: SparsityPlan::uniform(0.8),
        ..EngineConfig::default()
    }
}

fn train(spec: RunSpec, data: &Dataset) -> (Trainer, Vec<Event>) {
    let mut tr = Trainer::new(spec, data.len(), None).unwrap();
    let mut events = Vec::new();
    tr.run(data, &mut events).unwrap();
    (tr, events)
}

#[test]
fn iee_run_conserves_active_count_and_keeps_contracts() {
    let data = blobs(320, 12, 1);
    let (tr, events) = train(run(iee(5, 3, 4), 200), &data);
    let audit = tr.audit();
    assert_eq!(tr.schedule().t_total, 12);
    assert_eq!(audit.resource_checks, 12);
    assert_eq!(audit.resource_violations, 0);
    assert_eq!(audit.freeze_checks, 12);
    assert_eq!(audit.freeze_violations, 0);
    assert_eq!(tr.resource(), tr.psi());
    let kinds: Vec<EventKind> = events.iter().map(|e| e.stage).collect();
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::Prune).count(), 12);
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::Grow).count(), 12);
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::Freeze).count(), 1);
    assert_eq!(kinds.iter().filter(|k| k.is_training()).count(), 200);
}

#[test]
fn regrown_weights_keep_their_pruned_values_without_exploration() {
    let data = blobs(320, 12, 2);
    let (tr, _) = train(run(iee(6, 4, 0), 160), &data);
    assert!(tr.audit().mru_checks > 0);
    assert_eq!(tr.audit().mru_violations, 0);
}

#[test]
fn zero_init_grows_zero_weights() {
    let data = blobs(320, 12, 3);
    let mut cfg = iee(6, 2, 2);
    cfg.grow_init = GrowInit::Zero;
    cfg.t = Some(1);
    let mut spec = run(cfg, 20);
    spec.optim.lr = 0.0;
    let mut tr = Trainer::new(spec, data.len(), None).unwrap();
    let mut events = Vec::new();
    for _ in 0..9 {
        tr.step(&data, &mut events).unwrap();
    }
    let before = tr.partition().clone();
    tr.step(&data, &mut events).unwrap();
    let after = tr.partition();
    let layout = after.layout();
    let mut grown = 0;
    for g in 0..after.groups() {
        let w = tr.model().layers()[layout.compute[layout.groups[g]].layer].params[0].value.data().to_vec();
        for i in 0..after.masks()[g].len() {
            if after.is_active(g, i) && !before.is_active(g, i) {
                grown += 1;
                assert_eq!(w[i], 0.0);
            }
        }
    }
    assert!(grown > 0);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data = blobs(320, 12, 4);
    let spec = run(iee(5, 3, 4), 120);
    let (full, full_events) = train(spec.clone(), &data);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut tr = Trainer::new(spec, data.len(), None).unwrap();
    let mut events = Vec::new();
    for _ in 0..57 {
        tr.step(&data, &mut events).unwrap();
    }
    tr.save_checkpoint(&path).unwrap();
    drop(tr);
    let mut resumed = Trainer::resume(&path, data.len()).unwrap();
    resumed.run(&data, &mut events).unwrap();

    assert_eq!(events, full_events);
    assert_eq!(resumed.partition(), full.partition());
    for (a, b) in resumed.model().params().zip(full.model().params()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn non_finite_losses_halt_the_run() {
    let data = blobs(64, 12, 5);
    let mut tr = Trainer::new(run(iee(5, 3, 4), 500), data.len(), None).unwrap();
    let head = tr.model_mut().layers_mut().last_mut().unwrap();
    head.params[0].value.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    let mut events = Vec::new();
    tr.run(&data, &mut events).unwrap();
    assert!(tr.diverged());
    assert_eq!(tr.iteration(), 50);
    assert_eq!(events.last().unwrap().stage, EventKind::Diverged);
}

#[test]
fn baselines_conserve_the_active_count() {
    let data = blobs(320, 12, 6);
    for strategy in [Strategy::Rigl, Strategy::Set, Strategy::Static] {
        let mut cfg = iee(10, 0, 0);
        cfg.strategy = strategy;
        let (tr, events) = train(run(cfg, 200), &data);
        assert_eq!(tr.audit().resource_violations, 0, "{strategy:?}");
        let updates = events.iter().filter(|e| e.stage == EventKind::Grow).count();
        let expected = if strategy == Strategy::Static { 0 } else { 15 };
        assert_eq!(updates, expected, "{strategy:?}");
        let dense = events.iter().filter(|e| e.stage == EventKind::DenseGrad).count();
        assert_eq!(dense, if strategy == Strategy::Rigl { 15 } else { 0 });
    }
}

#[test]
fn structured_run_stays_within_one_quantum() {
    let data = blobs(320, 12, 7);
    let mut cfg = iee(4, 2, 3);
    cfg.criterion = Criterion::Taylor;
    cfg.plan = SparsityPlan::uniform(0.5);
    let spec = run(cfg, 120);
    let layout = Layout::new(&spec.model, Scope::Channels).unwrap();
    let table = LatencyTable::synthetic(&layout, 0.01).unwrap();
    let mut tr = Trainer::new(spec, data.len(), Some(table)).unwrap();
    let mut events = Vec::new();
    tr.run(&data, &mut events).unwrap();
    assert!(tr.audit().resource_checks > 0);
    assert_eq!(tr.audit().resource_violations, 0, "{:?}", tr.audit());
    assert!((tr.resource() - tr.psi()).abs() <= 0.01 + 1e-9);
}

#[test]
fn identical_seeds_give_byte_identical_logs() {
    use iee_core::events::JsonlSink;
    let data = blobs(320, 12, 8);
    let log = || {
        let mut tr = Trainer::new(run(iee(5, 3, 4), 100), data.len(), None).unwrap();
        let mut sink = JsonlSink::new(Vec::new());
        tr.run(&data, &mut sink).unwrap();
        sink.into_inner()
    };
    let (a, b) = (log(), log());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn n_of_m_runs_keep_the_pattern_and_the_count() {
    use iee_core::sparsity::{satisfies_nm, PlanMode};
    let data = blobs(320, 12, 9);
    let mut cfg = iee(5, 3, 4);
    cfg.plan = SparsityPlan { mode: PlanMode::NOfM { n: 2, m: 4 }, sparsity: 0.0 };
    let (tr, _) = train(run(cfg, 150), &data);
    assert_eq!(tr.audit().resource_violations, 0);
    let layout = tr.partition().layout();
    for g in 0..tr.partition().groups() {
        let row = layout.compute[layout.groups[g]].row_len;
        assert!(satisfies_nm(tr.partition().masks()[g].bits(), row, 2, 4));
    }
}

#[test]
fn every_plan_conserves_the_budget() {
    use iee_core::sparsity::{InitDistribution, PlanMode};
    let data = blobs(320, 12, 10);
    for mode in [
        PlanMode::Uniform,
        PlanMode::Erk,
        PlanMode::NonUniform { init: InitDistribution::Uniform },
        PlanMode::NonUniform { init: InitDistribution::Erk },
    ] {
        let mut cfg = iee(5, 3, 4);
        cfg.plan = SparsityPlan { mode, sparsity: 0.8 };
        let (tr, _) = train(run(cfg, 150), &data);
        assert!(tr.audit().resource_checks > 0);
        assert_eq!(tr.audit().resource_violations, 0, "{mode:?}");
    }
}
