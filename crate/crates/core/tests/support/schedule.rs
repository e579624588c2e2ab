//! Literal simulation of the prune / flag / grow trigger chain.

use iee_core::data::{Dataset, DatasetTargets};
use iee_core::engine::{EngineConfig, OptimConfig, RunSpec, Trainer};
use iee_core::events::{Event, EventKind};
use iee_core::nn::{ModelSpec, Tensor};
use iee_core::sparsity::SparsityPlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-iteration labels of the if / else-if / else-if chain, plus the
/// iterations at which prune and grow fire.
pub fn simulate(h: u64, j: u64, q: u64, t_total: usize, total: u64) -> (Vec<EventKind>, Vec<u64>, Vec<u64>) {
    let dt = h + j + q;
    let (mut t, mut flag, mut pruned) = (0usize, false, false);
    let (mut labels, mut prunes, mut grows) = (Vec::new(), Vec::new(), Vec::new());
    for i in 1..=total {
        if (i + j + q) % dt == 0 && t < t_total {
            pruned = true;
            prunes.push(i);
        } else if (i + q) % dt == 0 && t < t_total {
            flag = true;
        } else if i % dt == 0 && t < t_total {
            grows.push(i);
            t += 1;
            flag = false;
            pruned = false;
        }
        labels.push(if flag {
            EventKind::Explore
        } else if t >= t_total {
            EventKind::PostPeriod
        } else if pruned {
            EventKind::Improve
        } else {
            EventKind::Estimate
        });
    }
    (labels, prunes, grows)
}

fn tiny_data() -> Dataset {
    let x = Tensor::new(vec![4, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    Dataset::new(x, DatasetTargets::Labels(vec![0, 1, 1, 0])).unwrap()
}

/// Compare the engine with [`simulate`] on `cases` random configurations;
/// returns the number of mismatching configurations.
pub fn schedule_mismatches(cases: u64, seed: u64) -> usize {
    let data = tiny_data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for case in 0..cases {
        let (h, j, q) = (rng.gen_range(1..=20), rng.gen_range(1..=20), rng.gen_range(1..=20));
        let total = rng.gen_range(1..=400u64);
        let max_t = (total * 3 / 4 / (h + j + q)) as usize;
        let t_total = rng.gen_range(0..=max_t);
        let spec = RunSpec {
            model: ModelSpec::mlp(2, &[4], 2, false),
            engine: EngineConfig {
                h,
                j,
                q,
                t: Some(t_total),
                plan: SparsityPlan::uniform(0.5),
                ..EngineConfig::default()
            },
            optim: OptimConfig::default(),
            batch_size: 2,
            total_iters: total,
            seed: case,
        };
        let mut tr = Trainer::new(spec, data.len(), None).unwrap();
        let mut events: Vec<Event> = Vec::new();
        tr.run(&data, &mut events).unwrap();
        let labels: Vec<EventKind> = events.iter().filter(|e| e.stage.is_training()).map(|e| e.stage).collect();
        let at = |kind: EventKind| -> Vec<u64> { events.iter().filter(|e| e.stage == kind).map(|e| e.iter).collect() };
        let (want, prunes, grows) = simulate(h, j, q, t_total, total);
        if labels != want || at(EventKind::Prune) != prunes || at(EventKind::Grow) != grows {
            mismatches += 1;
        }
    }
    mismatches
}
