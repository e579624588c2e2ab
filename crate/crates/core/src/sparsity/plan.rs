//! Layerwise sparsity distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial distribution used by the non-uniform mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    Uniform,
    Erk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlanMode {
    Uniform,
    Erk,
    /// Initialised from `init`, then prune/grow rank all layers jointly.
    NonUniform { init: InitDistribution },
    /// `n` of every `m` contiguous weights along a row are inactive.
    NOfM { n: usize, m: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    #[serde(flatten)]
    pub mode: PlanMode,
    /// Global sparsity S in [0, 1). Ignored by `n_of_m`, which implies N/M.
    #[serde(default)]
    pub sparsity: f64,
}

/// Dimensions used by the ERK formula. Dense layers use `kh = kw = 1` and
/// contribute no kernel terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: Option<(usize, usize)>,
}

impl LayerDims {
    pub fn params(&self) -> usize {
        let (kh, kw) = self.kernel.unwrap_or((1, 1));
        self.inputs * self.outputs * kh * kw
    }

    fn erk_score(&self) -> f64 {
        let (i, o) = (self.inputs as f64, self.outputs as f64);
        match self.kernel {
            None => (i + o) / (i * o),
            Some((kh, kw)) => {
                let (h, w) = (kh as f64, kw as f64);
                (i + o + h + w) / (i * o * h * w)
            }
        }
    }
}

pub fn round_half_up(x: f64) -> usize {
    // The epsilon absorbs representation error such as 1 - 0.9 = 0.0999...
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

impl SparsityPlan {
    pub fn uniform(sparsity: f64) -> Self {
        Self { mode: PlanMode::Uniform, sparsity }
    }

    pub fn erk(sparsity: f64) -> Self {
        Self { mode: PlanMode::Erk, sparsity }
    }

    /// Whether prune/grow keep per-layer counts fixed.
    pub fn is_layerwise(&self) -> bool {
        !matches!(self.mode, PlanMode::NonUniform { .. })
    }

    pub fn effective_sparsity(&self) -> f64 {
        match self.mode {
            PlanMode::NOfM { n, m } if m > 0 => n as f64 / m as f64,
            _ => self.sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PlanMode::NOfM { n, m } = self.mode {
            if m == 0 || n >= m {
                return Err(Error::InvalidPlan(format!("n_of_m needs n < m, got {n}:{m}")));
            }
            return Ok(());
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidPlan(format!(
                "sparsity {} must lie in [0, 1)",
                self.sparsity
            )));
        }
        Ok(())
    }

    /// Per-layer densities `1 - S^l`.
    pub fn densities(&self, layers: &[LayerDims]) -> Result<Vec<f64>> {
        self.validate()?;
        let s = self.effective_sparsity();
        let erk = matches!(
            self.mode,
            PlanMode::Erk | PlanMode::NonUniform { init: InitDistribution::Erk }
        );
        if erk && s > 0.0 {
            erk_layer_densities(layers, s)
        } else {
            Ok(vec![1.0 - s; layers.len()])
        }
    }

    /// Per-layer active counts. Each layer rounds half up; the global
    /// remainder that makes the total equal `round(density * total)` goes to
    /// the largest layer.
    pub fn active_counts(&self, layers: &[LayerDims]) -> Result<Vec<usize>> {
        let dens = self.densities(layers)?;
        let sizes: Vec<usize> = layers.iter().map(LayerDims::params).collect();
        if let PlanMode::NOfM { n, m } = self.mode {
            return Ok(layers
                .iter()
                .map(|l| {
                    let row = l.params() / l.outputs.max(1);
                    let full = row / m;
                    l.outputs * (full * (m - n) + row % m)
                })
                .collect());
        }
        let mut counts: Vec<usize> = dens
            .iter()
            .zip(&sizes)
            .map(|(d, &m)| round_half_up(d * m as f64).min(m))
            .collect();
        let total: usize = sizes.iter().sum();
        let target = round_half_up((1.0 - self.sparsity) * total as f64);
        let Some(largest) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i)))
        else {
            return Ok(counts);
        };
        let current: usize = counts.iter().sum();
        let adjusted = counts[largest] as i64 + target as i64 - current as i64;
        counts[largest] = adjusted.clamp(0, sizes[largest] as i64) as usize;
        if counts.iter().any(|&c| c == 0) && self.sparsity < 1.0 {
            log::warn!("plan leaves a layer with no active weights");
        }
        Ok(counts)
    }
}

/// ERK densities: proportional to the layer's ERK score, scaled so the
/// parameter-weighted density is `1 - S`. Densities above 1 are clipped and
/// the scale re-solved over the remaining layers.
pub fn erk_layer_densities(layers: &[LayerDims], sparsity: f64) -> Result<Vec<f64>> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::InvalidPlan(format!("ERK sparsity {sparsity} must lie in (0, 1)")));
    }
    if layers.is_empty() {
        return Ok(Vec::new());
    }
    let sizes: Vec<f64> = layers.iter().map(|l| l.params() as f64).collect();
    let scores: Vec<f64> = layers.iter().map(LayerDims::erk_score).collect();
    let budget = (1.0 - sparsity) * sizes.iter().sum::<f64>();
    let mut dense = vec![false; layers.len()];
    loop {
        let fixed: f64 = (0..layers.len()).filter(|&i| dense[i]).map(|i| sizes[i]).sum();
        let weighted: f64 = (0..layers.len())
            .filter(|&i| !dense[i])
            .map(|i| scores[i] * sizes[i])
            .sum();
        if weighted <= 0.0 {
            return Err(Error::Infeasible(
                "every layer clipped to density 1 while solving ERK".into(),
            ));
        }
        let eps = (budget - fixed) / weighted;
        let mut changed = false;
        for i in 0..layers.len() {
            if !dense[i] && eps * scores[i] > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok((0..layers.len())
                .map(|i| if dense[i] { 1.0 } else { eps * scores[i] })
                .collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: usize, o: usize) -> LayerDims {
        LayerDims { inputs: i, outputs: o, kernel: None }
    }

    #[test]
    fn erk_single_layer_is_one_minus_s() {
        let d = erk_layer_densities(&[dense(37, 11)], 0.8).unwrap();
        assert!((d[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn erk_clips_small_layer_and_resolves() {
        let d = erk_layer_densities(&[dense(10, 10), dense(100, 100)], 0.5).unwrap();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 0.495).abs() < 1e-12);
    }

    #[test]
    fn uniform_rounds_half_up() {
        let plan = SparsityPlan::uniform(0.9);
        assert_eq!(plan.active_counts(&[dense(100, 10)]).unwrap(), vec![100]);
        assert_eq!(plan.active_counts(&[dense(5, 1)]).unwrap(), vec![1]);
    }

    #[test]
    fn desk_mlp_budget() {
        let plan = SparsityPlan::uniform(0.9);
        let c = plan.active_counts(&[dense(784, 300), dense(300, 100)]).unwrap();
        assert_eq!(c, vec![23520, 3000]);
    }

    #[test]
    fn invalid_sparsity_rejected() {
        assert!(SparsityPlan::uniform(1.0).densities(&[dense(2, 2)]).is_err());
        let nm = SparsityPlan { mode: PlanMode::NOfM { n: 4, m: 4 }, sparsity: 0.0 };
        assert!(nm.validate().is_err());
    }
}
