//! Latency-constrained channel selection: lookup tables, marginal latency
//! reductions and the knapsack-driven prune and grow steps.

mod knapsack;
mod table;

pub use knapsack::{knapsack_select, ChannelItem, KnapsackSolution};
pub use table::{LatencyTable, LayerTable};

use crate::error::{Error, Result};
use crate::sparsity::{ParamPartition, Scope};

/// `R_j = T(p_in, j) - T(p_in, j - 1)` for `j = from + 1 ..= from + count`.
pub fn marginal_reductions(
    table: &LatencyTable,
    layer: usize,
    p_in: usize,
    from: usize,
    count: usize,
) -> Result<Vec<f64>> {
    let mut prev = table.get(layer, p_in, from)?;
    let mut out = Vec::with_capacity(count);
    for j in from + 1..=from + count {
        let cur = table.get(layer, p_in, j)?;
        out.push(cur - prev);
        prev = cur;
    }
    Ok(out)
}

/// Channels of `group` matching `active`, ordered by descending score with
/// ties broken by channel index.
fn ranked(partition: &ParamPartition, group: usize, scores: &[f32], active: bool) -> Vec<usize> {
    let mut ch: Vec<usize> = (0..partition.masks()[group].len())
        .filter(|&j| partition.is_active(group, j) == active)
        .collect();
    ch.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ch
}

fn check(partition: &ParamPartition, scores: &[Vec<f32>], table: &LatencyTable) -> Result<()> {
    if partition.scope() != Scope::Channels {
        return Err(Error::Unsupported("structured selection needs channel scope".into()));
    }
    table.check_layout(partition.layout())?;
    if scores.len() != partition.groups()
        || scores.iter().zip(partition.masks()).any(|(s, m)| s.len() != m.len())
    {
        return Err(Error::Config("channel scores do not match the partition".into()));
    }
    Ok(())
}

/// Keep the knapsack-optimal channel prefixes of Θ_K under latency budget
/// `psi - omega`; everything else moves to Θ_P.
pub fn structured_prune(
    partition: &ParamPartition,
    scores: &[Vec<f32>],
    table: &LatencyTable,
    psi: f64,
    omega: f64,
    quantum: f64,
) -> Result<ParamPartition> {
    check(partition, scores, table)?;
    let layout = partition.layout();
    let pairs = partition.channel_pairs();
    let mut constant = 0.0;
    let mut groups = Vec::with_capacity(partition.groups());
    for (c, &(p_in, p_out)) in pairs.iter().enumerate() {
        match layout.group_of_compute(c) {
            Some(g) => {
                constant += table.get(c, p_in, 0)?;
                let order = ranked(partition, g, &scores[g], true);
                let costs = marginal_reductions(table, c, p_in, 0, order.len())?;
                groups.push(
                    order
                        .iter()
                        .zip(costs)
                        .enumerate()
                        .map(|(rank, (&channel, cost))| ChannelItem {
                            group: g,
                            channel,
                            importance: scores[g][channel] as f64,
                            cost,
                            rank,
                        })
                        .collect::<Vec<_>>(),
                );
            }
            None => constant += table.get(c, p_in, p_out)?,
        }
    }
    let sol = knapsack_select(&groups, psi - omega - constant, quantum, 1)?;
    let mut out = partition.clone();
    for g in 0..out.groups() {
        for j in 0..out.masks()[g].len() {
            out.set(g, j, false);
        }
        for &j in &sol.kept[g] {
            out.set(g, j, true);
        }
    }
    Ok(out)
}

/// Grow knapsack-selected channels of Θ_P into the latency left under `psi`,
/// then repair against the true table latency: drop the weakest grown
/// channels while above `psi`, add any channel that still fits, and if the
/// result sits more than one quantum below `psi` add the cheapest remaining
/// channel.
pub fn structured_grow(
    partition: &ParamPartition,
    scores: &[Vec<f32>],
    table: &LatencyTable,
    psi: f64,
    quantum: f64,
) -> Result<ParamPartition> {
    check(partition, scores, table)?;
    let layout = partition.layout();
    let latency = |p: &ParamPartition| table.total(&p.channel_pairs());
    let eps = 1e-9 * psi.abs().max(1.0);
    let current = latency(partition)?;
    if partition.explore_count() == 0 {
        log::warn!("grow with an empty exploration space");
        return Ok(partition.clone());
    }
    let pairs = partition.channel_pairs();
    let mut groups = Vec::with_capacity(partition.groups());
    for (g, &c) in layout.groups.iter().enumerate() {
        let (p_in, p_out) = pairs[c];
        let order = ranked(partition, g, &scores[g], false);
        let costs = marginal_reductions(table, c, p_in, p_out, order.len())?;
        groups.push(
            order
                .iter()
                .zip(costs)
                .enumerate()
                .map(|(rank, (&channel, cost))| ChannelItem {
                    group: g,
                    channel,
                    importance: scores[g][channel] as f64,
                    cost,
                    rank,
                })
                .collect::<Vec<_>>(),
        );
    }
    let mut out = partition.clone();
    let mut grown: Vec<(usize, usize)> = Vec::new();
    if psi - current > eps {
        let sol = knapsack_select(&groups, psi - current, quantum, 0)?;
        for (g, kept) in sol.kept.iter().enumerate() {
            for &j in kept {
                out.set(g, j, true);
                grown.push((g, j));
            }
        }
    }

    let score = |&(g, j): &(usize, usize)| scores[g][j];
    grown.sort_by(|a, b| score(a).total_cmp(&score(b)).then(a.cmp(b)));
    let mut lat = latency(&out)?;
    let mut drop = grown.into_iter();
    while lat > psi + eps {
        let Some((g, j)) = drop.next() else { break };
        out.set(g, j, false);
        lat = latency(&out)?;
    }

    let mut candidates: Vec<(usize, usize)> = (0..out.groups())
        .flat_map(|g| (0..out.masks()[g].len()).map(move |j| (g, j)))
        .filter(|&(g, j)| !out.is_active(g, j))
        .collect();
    candidates.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.cmp(b)));
    for &(g, j) in &candidates {
        out.set(g, j, true);
        let next = latency(&out)?;
        if next > psi + eps {
            out.set(g, j, false);
        } else {
            lat = next;
        }
    }
    if lat < psi - quantum - eps {
        let mut best: Option<((usize, usize), f64)> = None;
        let remaining: Vec<(usize, usize)> =
            candidates.iter().copied().filter(|&(g, j)| !out.is_active(g, j)).collect();
        for (g, j) in remaining {
            out.set(g, j, true);
            let next = latency(&out)?;
            out.set(g, j, false);
            if best.map_or(true, |(_, b)| next < b) {
                best = Some(((g, j), next));
            }
        }
        if let Some(((g, j), _)) = best {
            out.set(g, j, true);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::sparsity::Layout;

    #[test]
    fn unit_step_table_has_unit_reductions() {
        let t = LatencyTable::from_layers(vec![LayerTable::from_fn(1, 5, |_, j| j as f64)]);
        assert_eq!(marginal_reductions(&t, 0, 1, 0, 5).unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn reductions_telescope() {
        let t = LatencyTable::from_layers(vec![LatencyTable::staircase(4, 9, 0.13, 0.5, 0.01)]);
        let r = marginal_reductions(&t, 0, 3, 0, 9).unwrap();
        let total: f64 = r.iter().sum();
        let direct = t.get(0, 3, 9).unwrap() - t.get(0, 3, 0).unwrap();
        assert!((total - direct).abs() < 1e-12);
        assert!(r.iter().any(|&x| x == 0.0));
    }

    fn cnn_partition() -> (ParamPartition, LatencyTable) {
        let spec = ModelSpec::cnn([1, 12, 12], &[4, 6], 3, true);
        let layout = Layout::new(&spec, Scope::Channels).unwrap();
        let table = LatencyTable::synthetic(&layout, 0.01).unwrap();
        (ParamPartition::full(layout), table)
    }

    #[test]
    fn zero_omega_prune_at_budget_is_identity() {
        let (p, t) = cnn_partition();
        let psi = t.total(&p.channel_pairs()).unwrap();
        let scores = vec![vec![1.0; 4], vec![1.0; 6]];
        let q = structured_prune(&p, &scores, &t, psi, 0.0, 0.01).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn prune_then_grow_restores_latency() {
        let (p, t) = cnn_partition();
        let psi = t.total(&p.channel_pairs()).unwrap();
        let scores = vec![vec![0.4, 0.1, 0.9, 0.3], vec![0.5, 0.2, 0.8, 0.7, 0.1, 0.6]];
        let pruned = structured_prune(&p, &scores, &t, psi, 0.3 * psi, 0.01).unwrap();
        let lat = t.total(&pruned.channel_pairs()).unwrap();
        assert!(lat <= 0.7 * psi + 0.01 + 1e-9, "{lat} vs {psi}");
        let grown = structured_grow(&pruned, &scores, &t, psi, 0.01).unwrap();
        let back = t.total(&grown.channel_pairs()).unwrap();
        assert!((back - psi).abs() <= 0.01 + 1e-9, "{back} vs {psi}");
    }
}
