//! Structure-convergence reports from event logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use iee_core::events::{read_jsonl, Event, EventKind};
use iee_core::metrics::{convergence_series, snapshots, survival_rate};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: usize,
    pub iou_prune: Option<f64>,
    pub iou_grow: Option<f64>,
    pub survival: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub iterations: u64,
    pub update_steps: usize,
    pub final_iou_prune: Option<f64>,
    pub final_iou_grow: Option<f64>,
    pub mean_survival: Option<f64>,
    pub final_flops_cum: f64,
    pub stage_counts: BTreeMap<String, u64>,
    pub diverged: bool,
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Per-step rows keyed by update step t.
pub fn rows(events: &[Event]) -> Result<Vec<ReportRow>> {
    let snaps = snapshots(events)?;
    let (prune, grow) = convergence_series(&snaps)?;
    let survival = survival_rate(&snaps);
    let mut by_t: BTreeMap<usize, ReportRow> = BTreeMap::new();
    fn row(map: &mut BTreeMap<usize, ReportRow>, t: usize) -> &mut ReportRow {
        map.entry(t).or_insert(ReportRow {
            t,
            iou_prune: None,
            iou_grow: None,
            survival: None,
        })
    }
    for (t, v) in prune {
        row(&mut by_t, t).iou_prune = Some(v);
    }
    for (t, v) in grow {
        row(&mut by_t, t).iou_grow = Some(v);
    }
    for s in survival {
        row(&mut by_t, s.t).survival = Some(s.rate);
    }
    Ok(by_t.into_values().collect())
}

pub fn summary(events: &[Event], rows: &[ReportRow]) -> ReportSummary {
    let mut stage_counts = BTreeMap::new();
    for e in events {
        let name = serde_json::to_value(e.stage)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *stage_counts.entry(name).or_insert(0) += 1;
    }
    let last = |f: fn(&ReportRow) -> Option<f64>| rows.iter().rev().find_map(f);
    let surv: Vec<f64> = rows.iter().filter_map(|r| r.survival).collect();
    ReportSummary {
        iterations: events.iter().filter(|e| e.stage.is_training()).count() as u64,
        update_steps: events.iter().filter(|e| e.stage == EventKind::Grow).count(),
        final_iou_prune: last(|r| r.iou_prune),
        final_iou_grow: last(|r| r.iou_grow),
        mean_survival: (!surv.is_empty()).then(|| surv.iter().sum::<f64>() / surv.len() as f64),
        final_flops_cum: events.last().map_or(0.0, |e| e.flops_cum),
        stage_counts,
        diverged: events.iter().any(|e| e.stage == EventKind::Diverged),
    }
}

pub fn rows_csv(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("t,iou_prune,iou_grow,survival\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.t, cell(r.iou_prune), cell(r.iou_grow), cell(r.survival)));
    }
    out
}
