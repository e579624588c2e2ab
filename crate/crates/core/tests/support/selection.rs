//! Prune and grow selections against a full sort of the candidates.

use std::cmp::Ordering;

use iee_core::engine::{grow_selection, prune_selection};
use iee_core::nn::ModelSpec;
use iee_core::sparsity::{Layout, ParamPartition, Scope};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_partition(rng: &mut ChaCha8Rng, max_width: usize) -> ParamPartition {
    let w: Vec<usize> = (0..3).map(|_| rng.gen_range(2..=max_width)).collect();
    let spec = ModelSpec::mlp(w[0], &[w[1], w[2]], 2, false);
    let mut p = ParamPartition::full(Layout::new(&spec, Scope::Weights).unwrap());
    let density = rng.gen_range(0.05..0.95);
    for g in 0..p.groups() {
        for i in 0..p.masks()[g].len() {
            p.set(g, i, rng.gen_bool(density));
        }
    }
    p
}

/// Scores drawn from a small grid so ties are common.
fn random_scores(p: &ParamPartition, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    p.masks()
        .iter()
        .map(|m| (0..m.len()).map(|_| rng.gen_range(0..50) as f32 / 10.0).collect())
        .collect()
}

/// `(score, group, index)` ascending, written without the library's helpers.
fn by_key(a: &(f32, usize, usize), b: &(f32, usize, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn candidates(p: &ParamPartition, scores: &[Vec<f32>], active: bool, group: Option<usize>) -> Vec<(f32, usize, usize)> {
    let mut out = Vec::new();
    for g in 0..p.groups() {
        if group.map_or(false, |x| x != g) {
            continue;
        }
        for i in 0..p.masks()[g].len() {
            if p.is_active(g, i) == active {
                out.push((scores[g][i], g, i));
            }
        }
    }
    out
}

/// Largest-remainder split capped by the weights.
fn split(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total.min(sum);
    let mut share: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(u128, usize)> = weights
        .iter()
        .enumerate()
        .map(|(g, &w)| (((total * w) % sum) as u128, g))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - share.iter().sum::<usize>();
    while left > 0 {
        for &(_, g) in &rest {
            if left > 0 && share[g] < weights[g] {
                share[g] += 1;
                left -= 1;
            }
        }
    }
    share
}

fn sorted_pairs(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.sort();
    v
}

/// Run `cases` random prune and grow instances; returns the number of
/// mismatching instances and the largest instance size.
pub fn selection_mismatches(cases: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mismatches, mut max_items) = (0, 0);
    for case in 0..cases {
        let p = random_partition(&mut rng, 70);
        max_items = max_items.max(p.total());
        let scores = random_scores(&p, &mut rng);
        let layerwise = case % 2 == 0;
        let active = p.active_count();
        let omega = rng.gen_range(0..=active / 2);

        let got = sorted_pairs(prune_selection(&p, &scores, omega, layerwise));
        let want = if layerwise {
            let weights: Vec<usize> = (0..p.groups()).map(|g| p.active_in(g)).collect();
            let share = split(omega, &weights);
            let mut out = Vec::new();
            for g in 0..p.groups() {
                let mut c = candidates(&p, &scores, true, Some(g));
                c.sort_by(by_key);
                let k = share[g].min(c.len().saturating_sub(1));
                out.extend(c[..k].iter().map(|&(_, g, i)| (g, i)));
            }
            out
        } else {
            let mut c = candidates(&p, &scores, true, None);
            c.sort_by(by_key);
            c[..omega].iter().map(|&(_, g, i)| (g, i)).collect()
        };
        let prune_ok = got == sorted_pairs(want);

        let counts: Vec<usize> = if layerwise {
            (0..p.groups()).map(|g| rng.gen_range(0..=p.masks()[g].len() - p.active_in(g))).collect()
        } else {
            vec![rng.gen_range(0..=p.total() - active)]
        };
        let got = sorted_pairs(grow_selection(&p, &scores, &counts, layerwise));
        let descending = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        let want: Vec<(usize, usize)> = if layerwise {
            (0..p.groups())
                .flat_map(|g| {
                    let mut c = candidates(&p, &scores, false, Some(g));
                    c.sort_by(descending);
                    c.truncate(counts[g]);
                    c.into_iter().map(|(_, g, i)| (g, i))
                })
                .collect()
        } else {
            let mut c = candidates(&p, &scores, false, None);
            c.sort_by(descending);
            c.truncate(counts[0]);
            c.into_iter().map(|(_, g, i)| (g, i)).collect()
        };
        if !prune_ok || got != sorted_pairs(want) {
            mismatches += 1;
        }
    }
    (mismatches, max_items)
}
