//! Per-layer latency lookup tables `T^l(p_in, p_out)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::Layout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTable {
    pub max_in: usize,
    pub max_out: usize,
    /// Row-major over `p_in in 0..=max_in`, `p_out in 0..=max_out`.
    values: Vec<f64>,
}

impl LayerTable {
    fn idx(&self, p_in: usize, p_out: usize) -> usize {
        p_in * (self.max_out + 1) + p_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    layers: Vec<LayerTable>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    layer: usize,
    p_in: usize,
    p_out: usize,
    latency_ms: f64,
}

impl LatencyTable {
    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerTable {
        &self.layers[l]
    }

    pub fn get(&self, layer: usize, p_in: usize, p_out: usize) -> Result<f64> {
        let t = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::LatencyTable(format!("no table for layer {layer}")))?;
        if p_in > t.max_in || p_out > t.max_out {
            return Err(Error::LatencyTable(format!(
                "layer {layer}: ({p_in}, {p_out}) outside table range ({}, {})",
                t.max_in, t.max_out
            )));
        }
        Ok(t.values[t.idx(p_in, p_out)])
    }

    /// Σ_l T^l(p_in^l, p_out^l).
    pub fn total(&self, pairs: &[(usize, usize)]) -> Result<f64> {
        if pairs.len() != self.layers.len() {
            return Err(Error::LatencyTable(format!(
                "table covers {} layers but the model has {}",
                self.layers.len(),
                pairs.len()
            )));
        }
        pairs
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| self.get(l, i, o))
            .sum()
    }

    /// Check that the table covers every compute layer of `layout`.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.layers.len() != layout.compute.len() {
            return Err(Error::LatencyTable(format!(
                "table covers {} layers but the model has {} compute layers",
                self.layers.len(),
                layout.compute.len()
            )));
        }
        for (l, (t, c)) in self.layers.iter().zip(&layout.compute).enumerate() {
            if t.max_in < c.in_channels || t.max_out < c.out_channels {
                return Err(Error::LatencyTable(format!(
                    "layer {l}: table range ({}, {}) smaller than ({}, {})",
                    t.max_in, t.max_out, c.in_channels, c.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Parse `layer,p_in,p_out,latency_ms`. Every layer needs the full grid
    /// `p_in in 1..=max_in` x `p_out in 0..=max_out`; `p_in = 0` rows are
    /// optional. Non-monotone cells are raised to the running maximum of their
    /// predecessors; the returned strings describe each repair.
    pub fn from_csv<R: Read>(reader: R) -> Result<(Self, Vec<String>)> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::LatencyTable(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "p_in", "p_out", "latency_ms"] {
            return Err(Error::LatencyTable(format!(
                "expected header `layer,p_in,p_out,latency_ms`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut cells: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
        for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::LatencyTable(format!("row {}: {e}", line + 2)))?;
            if !row.latency_ms.is_finite() || row.latency_ms < 0.0 {
                return Err(Error::LatencyTable(format!(
                    "row {}: latency must be finite and non-negative",
                    line + 2
                )));
            }
            cells.entry(row.layer).or_default().insert((row.p_in, row.p_out), row.latency_ms);
        }
        let n_layers = cells.keys().next_back().map_or(0, |&l| l + 1);
        let mut missing = Vec::new();
        for l in 0..n_layers {
            if !cells.contains_key(&l) {
                missing.push(format!("layer {l}: no rows"));
            }
        }
        let mut layers = Vec::new();
        let mut warnings = Vec::new();
        for (&l, grid) in &cells {
            let max_in = grid.keys().map(|k| k.0).max().unwrap_or(0);
            let max_out = grid.keys().map(|k| k.1).max().unwrap_or(0);
            let mut t = LayerTable {
                max_in,
                max_out,
                values: vec![0.0; (max_in + 1) * (max_out + 1)],
            };
            for i in 0..=max_in {
                for o in 0..=max_out {
                    match grid.get(&(i, o)) {
                        Some(&v) => {
                            let k = t.idx(i, o);
                            t.values[k] = v;
                        }
                        None if i == 0 => {}
                        None => missing.push(format!("layer {l}: (p_in={i}, p_out={o})")),
                    }
                }
            }
            repair_monotone(&mut t, l, &mut warnings);
            layers.push(t);
        }
        if !missing.is_empty() {
            return Err(Error::LatencyTable(format!(
                "incomplete grid, missing cells: {}",
                missing.join("; ")
            )));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((Self { layers }, warnings))
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::LatencyTable(e.to_string());
        w.write_record(["layer", "p_in", "p_out", "latency_ms"]).map_err(io)?;
        for (l, t) in self.layers.iter().enumerate() {
            for i in 1..=t.max_in {
                for o in 0..=t.max_out {
                    w.write_record([
                        l.to_string(),
                        i.to_string(),
                        o.to_string(),
                        format!("{}", t.values[t.idx(i, o)]),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Staircase table `q * ceil(a_l * p_in * p_out + 1/2)`. The slope `a_l`
    /// is `w_l / max(in_l, out_l)` where `w_l` is the square root of the
    /// layer's per-channel-pair multiply-adds relative to the largest layer,
    /// so adding one channel moves each affected layer by at most `q`.
    pub fn synthetic(layout: &Layout, quantum: f64) -> Result<Self> {
        if !(quantum > 0.0) {
            return Err(Error::Config(format!("quantum {quantum} must be positive")));
        }
        let per_pair: Vec<f64> = layout
            .compute
            .iter()
            .map(|c| (c.positions * c.row_len / c.in_channels.max(1)) as f64)
            .collect();
        let max_pair = per_pair.iter().cloned().fold(0.0, f64::max);
        let layers = layout
            .compute
            .iter()
            .zip(&per_pair)
            .map(|(c, &pp)| {
                let slope = (pp / max_pair).sqrt() / c.in_channels.max(c.out_channels) as f64;
                Self::staircase(c.in_channels, c.out_channels, slope, 0.5, quantum)
            })
            .collect();
        Ok(Self { layers })
    }

    /// One layer of `q * ceil(a * p_in * p_out + b)`.
    pub fn staircase(max_in: usize, max_out: usize, a: f64, b: f64, q: f64) -> LayerTable {
        let mut t = LayerTable {
            max_in,
            max_out,
            values: vec![0.0; (max_in + 1) * (max_out + 1)],
        };
        for i in 0..=max_in {
            for o in 0..=max_out {
                let units = (a * (i * o) as f64 + b - 1e-9).ceil();
                let k = t.idx(i, o);
                t.values[k] = units * q;
            }
        }
        t
    }

    pub fn from_layers(layers: Vec<LayerTable>) -> Self {
        Self { layers }
    }
}

impl LayerTable {
    /// Build from a closure; no monotonicity repair.
    pub fn from_fn<F: Fn(usize, usize) -> f64>(max_in: usize, max_out: usize, f: F) -> Self {
        let mut values = Vec::with_capacity((max_in + 1) * (max_out + 1));
        for i in 0..=max_in {
            for o in 0..=max_out {
                values.push(f(i, o));
            }
        }
        Self { max_in, max_out, values }
    }
}

fn repair_monotone(t: &mut LayerTable, layer: usize, warnings: &mut Vec<String>) {
    for i in 1..=t.max_in {
        for o in 0..=t.max_out {
            let k = t.idx(i, o);
            let mut floor = t.values[t.idx(i - 1, o)];
            if i == 1 {
                floor = 0.0;
            }
            if o > 0 {
                floor = floor.max(t.values[k - 1]);
            }
            if t.values[k] < floor {
                warnings.push(format!(
                    "layer {layer}: latency at (p_in={i}, p_out={o}) raised from {} to {floor}",
                    t.values[k]
                ));
                t.values[k] = floor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_for(rows: &[(usize, usize, usize, f64)]) -> String {
        let mut s = String::from("layer,p_in,p_out,latency_ms\n");
        for r in rows {
            s.push_str(&format!("{},{},{},{}\n", r.0, r.1, r.2, r.3));
        }
        s
    }

    #[test]
    fn loads_complete_grid() {
        let rows: Vec<_> = (0..=3).map(|j| (0, 1, j, j as f64)).collect();
        let (t, w) = LatencyTable::from_csv(csv_for(&rows).as_bytes()).unwrap();
        assert!(w.is_empty());
        assert_eq!(t.get(0, 1, 3).unwrap(), 3.0);
    }

    #[test]
    fn missing_cells_are_listed() {
        let rows = vec![(0, 1, 0, 0.0), (0, 1, 2, 2.0), (0, 2, 0, 0.0), (0, 2, 1, 1.0), (0, 2, 2, 2.0)];
        let err = LatencyTable::from_csv(csv_for(&rows).as_bytes()).unwrap_err().to_string();
        assert!(err.contains("(p_in=1, p_out=1)"), "{err}");
    }

    #[test]
    fn non_monotone_cell_takes_running_max() {
        let rows = vec![(0, 1, 0, 0.0), (0, 1, 1, 2.0), (0, 1, 2, 1.5), (0, 1, 3, 3.0)];
        let (t, w) = LatencyTable::from_csv(csv_for(&rows).as_bytes()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(t.get(0, 1, 2).unwrap(), 2.0);
        assert_eq!(t.get(0, 1, 3).unwrap(), 3.0);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(LatencyTable::from_csv("a,b,c,d\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = LatencyTable::from_layers(vec![LatencyTable::staircase(3, 4, 0.3, 0.5, 0.01)]);
        let mut buf = Vec::new();
        t.to_csv(&mut buf).unwrap();
        let (back, _) = LatencyTable::from_csv(buf.as_slice()).unwrap();
        for i in 1..=3 {
            for o in 0..=4 {
                assert_eq!(back.get(0, i, o).unwrap(), t.get(0, i, o).unwrap());
            }
        }
    }
}
