//! Knapsack selection against exhaustive enumeration of channel prefixes.

use iee_core::structured::{knapsack_select, ChannelItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default, Clone, Copy)]
pub struct KnapsackStats {
    /// Draws where the solver disagreed with enumeration.
    pub gaps: usize,
    pub feasible: usize,
    pub infeasible: usize,
}

/// Best importance over every combination of prefixes whose rounded-up
/// cost fits the budget.
fn enumerate(groups: &[Vec<ChannelItem>], cap: usize, min_keep: usize) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut choice = vec![0usize; groups.len()];
    loop {
        let mut units = 0;
        let mut imp = 0.0;
        let mut ok = true;
        for (g, &k) in choice.iter().enumerate() {
            if k < min_keep.min(groups[g].len()) {
                ok = false;
            }
            units += groups[g][..k].iter().map(|c| c.cost).sum::<f64>().round() as usize;
            imp += groups[g][..k].iter().map(|c| c.importance).sum::<f64>();
        }
        if ok && units <= cap && best.map_or(true, |b| imp > b) {
            best = Some(imp);
        }
        let mut g = 0;
        loop {
            if g == groups.len() {
                return best;
            }
            choice[g] += 1;
            if choice[g] <= groups[g].len() {
                break;
            }
            choice[g] = 0;
            g += 1;
        }
    }
}

/// Up to 3 layers of up to 4 channels with integer costs and unit quantum.
pub fn knapsack_check(draws: usize, seed: u64) -> KnapsackStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = KnapsackStats::default();
    for draw in 0..draws {
        let layers = rng.gen_range(1..=3);
        let groups: Vec<Vec<ChannelItem>> = (0..layers)
            .map(|g| {
                let len = rng.gen_range(1..=4);
                let mut imp: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
                imp.sort_by(|a, b| b.partial_cmp(a).unwrap());
                imp.iter()
                    .enumerate()
                    .map(|(rank, &importance)| ChannelItem {
                        group: g,
                        channel: rank,
                        importance,
                        cost: rng.gen_range(0..=4) as f64,
                        rank,
                    })
                    .collect()
            })
            .collect();
        let min_keep = draw % 2;
        let cap = rng.gen_range(0..=20);
        let got = knapsack_select(&groups, cap as f64, 1.0, min_keep);
        match enumerate(&groups, cap, min_keep) {
            Some(best) => {
                stats.feasible += 1;
                match got {
                    Ok(sol) if (sol.total_importance - best).abs() < 1e-9 && sol.total_cost <= cap as f64 + 1e-9 => {}
                    _ => stats.gaps += 1,
                }
            }
            None => {
                stats.infeasible += 1;
                if got.is_ok() {
                    stats.gaps += 1;
                }
            }
        }
    }
    stats
}
