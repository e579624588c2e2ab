//! Cycle arithmetic and the update budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(H, J, Q, T)` of the prune/grow cycle over a run of `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IeeSchedule {
    pub h: u64,
    pub j: u64,
    pub q: u64,
    /// Number of update steps.
    pub t_total: usize,
    pub total_iters: u64,
}

/// Actions the schedule fires at one iteration, applied in field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Triggers {
    pub prune: bool,
    pub set_flag: bool,
    pub grow: bool,
}

impl IeeSchedule {
    /// `T = floor(update_iters / ΔT)` unless `pinned`; a pinned `T` must fit
    /// into `update_iters`.
    pub fn new(h: u64, j: u64, q: u64, total_iters: u64, update_iters: u64, pinned: Option<usize>) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("H must be at least 1".into()));
        }
        let delta = h + j + q;
        let derived = (update_iters / delta) as usize;
        let t_total = match pinned {
            Some(t) if t > derived => {
                return Err(Error::Config(format!(
                    "T = {t} cycles of {delta} iterations exceed the {update_iters}-iteration update period"
                )))
            }
            Some(t) => t,
            None => derived,
        };
        Ok(Self { h, j, q, t_total, total_iters })
    }

    pub fn delta_t(&self) -> u64 {
        self.h + self.j + self.q
    }

    /// Triggers at 1-based iteration `i` when `t` updates have completed.
    pub fn triggers(&self, i: u64, t: usize) -> Triggers {
        if t >= self.t_total {
            return Triggers::default();
        }
        let d = self.delta_t();
        Triggers {
            prune: (i + self.j + self.q) % d == 0,
            set_flag: (i + self.q) % d == 0,
            grow: i % d == 0,
        }
    }
}

/// Cosine-decayed budget `Ω^t = round(Ω^0 · (1 + cos(π t / T)) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateBudget {
    pub omega0: f64,
    pub t_total: usize,
}

impl UpdateBudget {
    pub fn new(psi: f64, fraction: f64, t_total: usize) -> Self {
        Self {
            omega0: fraction * psi,
            t_total,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        budget_at(t, self)
    }
}

/// Ω^t in item units. Callers must not ask for `T = 0`.
pub fn budget_at(t: usize, budget: &UpdateBudget) -> f64 {
    debug_assert!(budget.t_total > 0, "budget undefined for T = 0");
    let t = t.min(budget.t_total) as f64;
    let tt = budget.t_total.max(1) as f64;
    (budget.omega0 * 0.5 * (1.0 + (std::f64::consts::PI * t / tt).cos())).round()
}

/// Split `total` across groups in proportion to `weights` by largest
/// remainder; ties go to the lower index. Shares never exceed their weight,
/// so a `total` above the weight sum is truncated to it.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().zip(weights).map(|(e, &w)| (e.floor() as usize).min(w)).collect();
    let mut left = total.min(sum) - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &g in order.iter().cycle().take(weights.len() * 2) {
        if left == 0 {
            break;
        }
        if out[g] < weights[g] {
            out[g] += 1;
            left -= 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_endpoints() {
        let b = UpdateBudget::new(1000.0, 0.3, 10);
        assert_eq!(budget_at(0, &b), 300.0);
        assert_eq!(budget_at(5, &b), 150.0);
        assert_eq!(budget_at(10, &b), 0.0);
        for t in 0..10 {
            assert!(budget_at(t + 1, &b) <= budget_at(t, &b));
        }
    }

    #[test]
    fn derived_t_fits_three_quarters() {
        let s = IeeSchedule::new(100, 100, 100, 5000, 3750, None).unwrap();
        assert_eq!(s.t_total, 12);
        assert!(IeeSchedule::new(100, 100, 100, 5000, 3750, Some(13)).is_err());
    }

    #[test]
    fn apportion_sums_and_respects_caps() {
        assert_eq!(apportion(6, &[9, 3]), vec![5, 1]);
        assert_eq!(apportion(10, &[3, 1]), vec![3, 1]);
        assert_eq!(apportion(7, &[23520, 3000]).iter().sum::<usize>(), 7);
        assert_eq!(apportion(5, &[2, 100]), vec![0, 5]);
    }
}
