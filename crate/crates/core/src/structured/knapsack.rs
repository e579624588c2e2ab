//! Precedence-constrained knapsack over per-layer channel prefixes.
//!
//! Each group lists its candidate channels in importance-descending order;
//! only prefixes of that order can be kept. Costs are discretised by rounding
//! every prefix cost up to a whole number of quanta, and a DP over groups
//! picks one prefix per group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelItem {
    pub group: usize,
    pub channel: usize,
    pub importance: f64,
    /// Marginal latency of this channel given its precedence rank.
    pub cost: f64,
    /// 0-based position in the group's importance order.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnapsackSolution {
    /// Kept channel ids per group, in precedence order.
    pub kept: Vec<Vec<usize>>,
    pub total_importance: f64,
    pub total_cost: f64,
}

impl KnapsackSolution {
    pub fn kept_counts(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }
}

fn units(cost: f64, quantum: f64) -> usize {
    (cost / quantum - 1e-9).ceil().max(0.0) as usize
}

/// Maximise total importance subject to Σ cost ≤ `budget`, keeping at least
/// `min_keep` channels per group. `groups[g]` must be in precedence order.
pub fn knapsack_select(
    groups: &[Vec<ChannelItem>],
    budget: f64,
    quantum: f64,
    min_keep: usize,
) -> Result<KnapsackSolution> {
    if !(quantum > 0.0) {
        return Err(Error::Config(format!("quantum {quantum} must be positive")));
    }
    let cap = if budget < 0.0 {
        None
    } else {
        Some((budget / quantum + 1e-9).floor() as usize)
    };
    // Per group: (units, importance, count) for each admissible prefix length.
    let options: Vec<Vec<(usize, f64, usize)>> = groups
        .iter()
        .map(|items| {
            let mut out = Vec::with_capacity(items.len() + 1);
            let (mut cost, mut imp) = (0.0, 0.0);
            for k in 0..=items.len() {
                if k > 0 {
                    cost += items[k - 1].cost;
                    imp += items[k - 1].importance;
                }
                if k >= min_keep.min(items.len()) {
                    out.push((units(cost, quantum), imp, k));
                }
            }
            out
        })
        .collect();
    let floor: usize = options.iter().map(|o| o[0].0).sum();
    let cap = match cap {
        Some(c) if c >= floor => c,
        _ => {
            return Err(Error::Infeasible(format!(
                "latency budget {budget:.4} is below the one-channel-per-layer floor of {:.4}",
                floor as f64 * quantum
            )))
        }
    };

    // best[c] = (importance, channels) reachable with exactly <= c units.
    type Cell = Option<(f64, usize)>;
    let better = |a: (f64, usize), b: Cell| match b {
        None => true,
        Some(b) => a.0 > b.0 || (a.0 == b.0 && a.1 > b.1),
    };
    let mut best: Vec<Cell> = vec![None; cap + 1];
    best[0] = Some((0.0, 0));
    let mut choice: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
    for opts in &options {
        let mut next: Vec<Cell> = vec![None; cap + 1];
        let mut pick = vec![usize::MAX; cap + 1];
        for (c, cell) in best.iter().enumerate() {
            let Some((imp, cnt)) = *cell else { continue };
            for (oi, &(u, oimp, k)) in opts.iter().enumerate() {
                let nc = c + u;
                if nc > cap {
                    continue;
                }
                let cand = (imp + oimp, cnt + k);
                if better(cand, next[nc]) {
                    next[nc] = Some(cand);
                    pick[nc] = oi;
                }
            }
        }
        choice.push(pick);
        best = next;
    }
    let mut end = None;
    for (c, cell) in best.iter().enumerate() {
        if let Some(v) = *cell {
            if end.map_or(true, |(_, e)| better(v, Some(e))) {
                end = Some((c, v));
            }
        }
    }
    let (mut c, _) = end.ok_or_else(|| Error::Infeasible("no feasible selection".into()))?;
    let mut kept = vec![Vec::new(); groups.len()];
    for g in (0..groups.len()).rev() {
        let (u, _, k) = options[g][choice[g][c]];
        kept[g] = groups[g][..k].iter().map(|it| it.channel).collect();
        c -= u;
    }
    let mut total_importance = 0.0;
    let mut total_cost = 0.0;
    for (g, k) in kept.iter().enumerate() {
        for it in &groups[g][..k.len()] {
            total_importance += it.importance;
            total_cost += it.cost;
        }
    }
    Ok(KnapsackSolution {
        kept,
        total_importance,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(g: usize, imps: &[f64], costs: &[f64]) -> Vec<ChannelItem> {
        imps.iter()
            .zip(costs)
            .enumerate()
            .map(|(j, (&i, &c))| ChannelItem { group: g, channel: j, importance: i, cost: c, rank: j })
            .collect()
    }

    #[test]
    fn large_budget_keeps_everything() {
        let gs = vec![group(0, &[3.0, 2.0], &[1.0, 1.0]), group(1, &[1.0], &[2.0])];
        let s = knapsack_select(&gs, 100.0, 0.5, 1).unwrap();
        assert_eq!(s.kept_counts(), vec![2, 1]);
    }

    #[test]
    fn unit_cost_example() {
        let gs = vec![group(0, &[5.0, 4.0, 1.0], &[1.0; 3]), group(1, &[3.0, 2.0, 2.0], &[1.0; 3])];
        let s = knapsack_select(&gs, 4.0, 1.0, 1).unwrap();
        assert_eq!(s.kept_counts(), vec![2, 2]);
        assert_eq!(s.total_importance, 14.0);
    }

    #[test]
    fn equal_importance_maximises_count() {
        let gs = vec![group(0, &[0.0; 3], &[1.0, 0.0, 2.0]), group(1, &[0.0; 2], &[1.0, 1.0])];
        let s = knapsack_select(&gs, 3.0, 1.0, 1).unwrap();
        assert_eq!(s.kept_counts().iter().sum::<usize>(), 4);
    }

    #[test]
    fn budget_below_floor_is_infeasible() {
        let gs = vec![group(0, &[1.0], &[2.0]), group(1, &[1.0], &[2.0])];
        assert!(matches!(knapsack_select(&gs, 3.0, 1.0, 1), Err(Error::Infeasible(_))));
    }
}
