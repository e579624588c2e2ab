//! Reference dynamic-sparse-training update rules: static, SET and RigL.
//!
//! Each update prunes the lowest-magnitude active weights and grows the same
//! number from the weights that were inactive before the update, so the grow
//! set never overlaps the prune set and |Θ_K| is conserved. Grown weights
//! start at zero.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::apportion;
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::select::{bottom_k, top_k, Scored};
use crate::sparsity::{ParamPartition, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Static,
    Set,
    Rigl,
}

/// Items moved by one update, as `(group, index)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Update {
    pub pruned: Vec<(usize, usize)>,
    pub grown: Vec<(usize, usize)>,
}

/// Cosine-annealed update fraction `α_0 (1 + cos(π k / K)) / 2`.
pub fn update_fraction(alpha0: f64, k: usize, k_total: usize) -> f64 {
    if k_total == 0 {
        return 0.0;
    }
    alpha0 * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / k_total as f64).cos())
}

enum GrowBy<'a, R> {
    Scores(&'a ImportanceReport),
    Random(&'a mut R),
}

/// Magnitude prune, dense-gradient grow.
pub fn rigl_update(
    partition: &mut ParamPartition,
    magnitude: &ImportanceReport,
    grads: &ImportanceReport,
    fraction: f64,
    layerwise: bool,
) -> Result<Update> {
    update::<rand_chacha::ChaCha8Rng>(partition, magnitude, GrowBy::Scores(grads), fraction, layerwise)
}

/// Magnitude prune, uniformly random grow.
pub fn set_update<R: Rng>(
    partition: &mut ParamPartition,
    magnitude: &ImportanceReport,
    fraction: f64,
    layerwise: bool,
    rng: &mut R,
) -> Result<Update> {
    update(partition, magnitude, GrowBy::Random(rng), fraction, layerwise)
}

fn update<R: Rng>(
    partition: &mut ParamPartition,
    magnitude: &ImportanceReport,
    mut grow_by: GrowBy<'_, R>,
    fraction: f64,
    layerwise: bool,
) -> Result<Update> {
    if partition.scope() != Scope::Weights {
        return Err(Error::Unsupported("baselines run in weight scope only".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("update fraction {fraction} outside [0, 1)")));
    }
    let groups = partition.groups();
    let active: Vec<Vec<Scored>> = (0..groups)
        .map(|g| items(partition, magnitude, g, true))
        .collect();
    let inactive: Vec<Vec<usize>> = (0..groups)
        .map(|g| (0..partition.masks()[g].len()).filter(|&i| !partition.is_active(g, i)).collect())
        .collect();

    // Per-group counts, or one global count under index usize::MAX.
    let counts: Vec<usize> = if layerwise {
        (0..groups)
            .map(|g| {
                let n = (fraction * active[g].len() as f64).round() as usize;
                n.min(inactive[g].len())
            })
            .collect()
    } else {
        let n = (fraction * partition.active_count() as f64).round() as usize;
        let free: usize = inactive.iter().map(Vec::len).sum();
        vec![n.min(free)]
    };

    let mut out = Update::default();
    if layerwise {
        for g in 0..groups {
            for s in bottom_k(&active[g], counts[g]) {
                out.pruned.push((g, s.index));
            }
        }
    } else {
        let all: Vec<Scored> = active.concat();
        out.pruned = bottom_k(&all, counts[0]).iter().map(|s| (s.group, s.index)).collect();
    }

    match &mut grow_by {
        GrowBy::Scores(report) => {
            let cand: Vec<Vec<Scored>> = (0..groups)
                .map(|g| inactive[g].iter().map(|&i| Scored::new(report.values[g][i], g, i)).collect())
                .collect();
            if layerwise {
                for g in 0..groups {
                    out.grown.extend(top_k(&cand[g], counts[g]).iter().map(|s| (g, s.index)));
                }
            } else {
                out.grown = top_k(&cand.concat(), counts[0]).iter().map(|s| (s.group, s.index)).collect();
            }
        }
        GrowBy::Random(rng) => {
            if layerwise {
                for g in 0..groups {
                    for k in sample(*rng, inactive[g].len(), counts[g]).into_iter() {
                        out.grown.push((g, inactive[g][k]));
                    }
                }
            } else {
                let flat: Vec<(usize, usize)> = (0..groups)
                    .flat_map(|g| inactive[g].iter().map(move |&i| (g, i)))
                    .collect();
                for k in sample(*rng, flat.len(), counts[0]).into_iter() {
                    out.grown.push(flat[k]);
                }
            }
        }
    }
    for &(g, i) in &out.pruned {
        partition.set(g, i, false);
    }
    for &(g, i) in &out.grown {
        partition.set(g, i, true);
    }
    Ok(out)
}

fn items(partition: &ParamPartition, report: &ImportanceReport, g: usize, active: bool) -> Vec<Scored> {
    (0..partition.masks()[g].len())
        .filter(|&i| partition.is_active(g, i) == active)
        .map(|i| Scored::new(report.values[g][i], g, i))
        .collect()
}

/// Split of a global count over groups, exposed for callers that need the
/// same per-layer rounding as the trainer.
pub fn per_layer_counts(total: usize, active: &[usize]) -> Vec<usize> {
    apportion(total, active)
}
