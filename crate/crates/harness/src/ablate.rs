//! Grid sweeps over the schedule knobs.

use std::path::Path;

use iee_core::engine::{GrowInit, GrowRule};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::runner::{prepare, run_prepared, RunResult};

/// Axes of the sweep; an absent axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub h: Vec<u64>,
    pub j: Vec<u64>,
    pub q: Vec<u64>,
    pub freeze: Vec<bool>,
    pub grow_init: Vec<GrowInit>,
    pub grow_rule: Vec<GrowRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub h: u64,
    pub j: u64,
    pub q: u64,
    pub freeze: bool,
    pub grow_init: GrowInit,
    pub grow_rule: GrowRule,
}

impl Cell {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let s = &mut cfg.schedule;
        s.h = self.h;
        s.j = self.j;
        s.q = self.q;
        s.freeze = self.freeze;
        s.grow_init = self.grow_init;
        s.grow_rule = self.grow_rule;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: Vec<RunResult>,
    /// Seeds whose run failed, with the error message.
    pub failures: Vec<(u64, String)>,
}

impl CellSummary {
    /// Mean test accuracy, NaN if any seed diverged or failed.
    pub fn mean_accuracy(&self) -> f64 {
        if !self.failures.is_empty() || self.runs.is_empty() {
            return f64::NAN;
        }
        self.runs.iter().map(RunResult::accuracy).sum::<f64>() / self.runs.len() as f64
    }

    pub fn std_accuracy(&self) -> f64 {
        let m = self.mean_accuracy();
        let n = self.runs.len() as f64;
        (self.runs.iter().map(|r| (r.accuracy() - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn mean_flops(&self) -> f64 {
        if self.runs.is_empty() {
            return f64::NAN;
        }
        self.runs.iter().map(|r| r.train_flops_per_sample).sum::<f64>() / self.runs.len() as f64
    }
}

fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Cartesian product in row-major order of the declared axes.
pub fn cells(grid: &Grid, base: &ExperimentConfig) -> Vec<Cell> {
    let s = &base.schedule;
    let mut out = Vec::new();
    for h in axis(&grid.h, s.h) {
        for j in axis(&grid.j, s.j) {
            for q in axis(&grid.q, s.q) {
                for freeze in axis(&grid.freeze, s.freeze) {
                    for grow_init in axis(&grid.grow_init, s.grow_init) {
                        for grow_rule in axis(&grid.grow_rule, s.grow_rule) {
                            out.push(Cell {
                                h,
                                j,
                                q,
                                freeze,
                                grow_init,
                                grow_rule,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Run every cell for every seed of `base`, at most `jobs` at a time.
/// Diverged runs keep NaN accuracy; failed runs are recorded per cell.
pub fn run_grid(grid: &Grid, base: &ExperimentConfig, jobs: usize) -> Result<Vec<CellSummary>> {
    let cells = cells(grid, base);
    let mut tasks = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        cell.apply(&mut cfg);
        cfg.validate()?;
        for &seed in &base.seeds {
            tasks.push((c, seed, cfg.clone()));
        }
    }
    let jobs = jobs.max(1);
    let mut results = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(jobs) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(_, seed, cfg)| s.spawn(move || run_prepared(&prepare(cfg, *seed)?, None, None)))
                .collect();
            for h in handles {
                results.push(h.join().expect("run thread panicked"));
            }
        });
    }
    let mut out: Vec<CellSummary> = cells
        .into_iter()
        .map(|cell| CellSummary {
            cell,
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for ((c, seed, _), r) in tasks.iter().zip(results) {
        match r {
            Ok(run) => out[*c].runs.push(run),
            Err(e) => {
                log::warn!("cell {c} seed {seed} failed: {e}");
                out[*c].failures.push((*seed, e.to_string()));
            }
        }
    }
    Ok(out)
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// One row per cell.
pub fn summary_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from("h,j,q,freeze,grow_init,grow_rule,seeds,diverged,failed,mean_accuracy,std_accuracy,mean_flops_per_sample\n");
    for c in cells {
        let k = &c.cell;
        let diverged = c.runs.iter().filter(|r| r.diverged).count();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            k.h,
            k.j,
            k.q,
            k.freeze,
            name(&k.grow_init),
            name(&k.grow_rule),
            c.runs.len() + c.failures.len(),
            diverged,
            c.failures.len(),
            num(c.mean_accuracy()),
            num(c.std_accuracy()),
            num(c.mean_flops()),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn grid_expands_declared_axes_only() {
        let base = parse_config("[model]\nkind = \"mlp\"\n[data]\nkind = \"synthetic\"\n").unwrap();
        let grid: Grid = toml::from_str("h = [10, 20]\nfreeze = [true, false]\ngrow_init = [\"mru\", \"zero\"]").unwrap();
        let cells = cells(&grid, &base);
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|c| c.j == 150 && c.grow_rule == GrowRule::Criterion));
        assert_eq!(cells[0].h, 10);
        assert_eq!(cells[7].h, 20);
    }

    #[test]
    fn diverged_cells_print_nan() {
        assert_eq!(num(f64::NAN), "NaN");
        assert_eq!(name(&GrowInit::Zero), "zero");
    }
}
