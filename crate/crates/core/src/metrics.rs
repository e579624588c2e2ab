//! Structure-convergence and growth-quality metrics over mask snapshots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    AfterPrune,
    AfterGrow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSnapshot {
    pub t: usize,
    pub phase: Phase,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub t: usize,
    pub grown: usize,
    pub survivors: usize,
    pub rate: f64,
}

/// Snapshots carried by prune and grow events, in log order.
pub fn snapshots(events: &[Event]) -> Result<Vec<MaskSnapshot>> {
    let mut out = Vec::new();
    for e in events {
        let phase = match e.stage {
            EventKind::Prune => Phase::AfterPrune,
            EventKind::Grow => Phase::AfterGrow,
            _ => continue,
        };
        if let Some(bits) = e.decoded_mask()? {
            out.push(MaskSnapshot { t: e.t, phase, bits });
        }
    }
    Ok(out)
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn iou(a: &MaskSnapshot, b: &MaskSnapshot) -> Result<f64> {
    if a.phase != b.phase {
        return Err(Error::PhaseMismatch(format!("{:?} vs {:?}", a.phase, b.phase)));
    }
    if a.bits.len() != b.bits.len() {
        return Err(Error::shape("snapshot", &[a.bits.len()], &[b.bits.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of consecutive same-phase snapshots: `(after-prune, after-grow)`
/// series of `(t of the later snapshot, iou)`.
pub fn convergence_series(snaps: &[MaskSnapshot]) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    let mut series = (Vec::new(), Vec::new());
    for phase in [Phase::AfterPrune, Phase::AfterGrow] {
        let same: Vec<&MaskSnapshot> = snaps.iter().filter(|s| s.phase == phase).collect();
        let out = if phase == Phase::AfterPrune { &mut series.0 } else { &mut series.1 };
        for w in same.windows(2) {
            out.push((w[1].t, iou(w[0], w[1])?));
        }
    }
    Ok(series)
}

/// For each grow at step t followed by a prune at step t+1: the fraction of
/// items grown at t that are still active after that prune.
pub fn survival_rate(snaps: &[MaskSnapshot]) -> Vec<SurvivalRecord> {
    let mut out = Vec::new();
    for (k, s) in snaps.iter().enumerate() {
        if s.phase != Phase::AfterGrow {
            continue;
        }
        let Some(before) = snaps[..k].iter().rev().find(|p| p.phase == Phase::AfterPrune && p.t == s.t)
        else {
            continue;
        };
        let Some(next) = snaps[k + 1..].iter().find(|p| p.phase == Phase::AfterPrune) else {
            continue;
        };
        let grown: Vec<usize> = (0..s.bits.len())
            .filter(|&i| s.bits[i] && !before.bits[i])
            .collect();
        if grown.is_empty() {
            continue;
        }
        let survivors = grown.iter().filter(|&&i| next.bits[i]).count();
        out.push(SurvivalRecord {
            t: s.t,
            grown: grown.len(),
            survivors,
            rate: survivors as f64 / grown.len() as f64,
        });
    }
    out
}
