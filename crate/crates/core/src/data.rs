//! In-memory datasets and a seeded, epoch-shuffled batch stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Targets, Tensor};
use crate::rng::epoch_seed;

/// Samples stored contiguously; `inputs` is `[N, sample_shape...]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: DatasetTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetTargets {
    Labels(Vec<usize>),
    /// `[N, outputs...]`
    Values(Tensor),
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: DatasetTargets) -> Result<Self> {
        let n = match &targets {
            DatasetTargets::Labels(l) => l.len(),
            DatasetTargets::Values(v) => v.batch(),
        };
        if n != inputs.batch() {
            return Err(Error::shape("dataset targets", &[inputs.batch()], &[n]));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gather the given sample indices into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Targets) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let inputs = Tensor::new(shape, data).expect("gather shape");
        let targets = match &self.targets {
            DatasetTargets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            DatasetTargets::Values(v) => {
                let per_t: usize = v.shape()[1..].iter().product();
                let mut d = Vec::with_capacity(indices.len() * per_t);
                for &i in indices {
                    d.extend_from_slice(&v.data()[i * per_t..(i + 1) * per_t]);
                }
                let mut shape = vec![indices.len()];
                shape.extend_from_slice(&v.shape()[1..]);
                Targets::Values(Tensor::new(shape, d).expect("gather target shape"))
            }
        };
        (inputs, targets)
    }

    /// Consecutive evaluation batches in storage order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Targets)> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size.max(1))).map(move |b| {
            let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
            self.gather(&idx)
        })
    }
}

/// Position of a [`BatchStream`]; enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub epoch: u64,
    pub batch: usize,
}

/// Endless stream of training batches. Each epoch is a fresh permutation
/// seeded by `(seed, epoch)`; the trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    batch_size: usize,
    len: usize,
    order: Vec<usize>,
    pos: StreamPosition,
}

impl BatchStream {
    pub fn new(dataset_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={dataset_len}"
            )));
        }
        let mut s = Self {
            seed,
            batch_size,
            len: dataset_len,
            order: Vec::new(),
            pos: StreamPosition { epoch: 0, batch: 0 },
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn position(&self) -> StreamPosition {
        self.pos
    }

    pub fn seek(&mut self, pos: StreamPosition) {
        self.pos = pos;
        self.reshuffle();
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, "shuffle", self.pos.epoch));
        self.order.shuffle(&mut rng);
    }

    /// Sample indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos.batch >= self.batches_per_epoch() {
            self.pos.epoch += 1;
            self.pos.batch = 0;
            self.reshuffle();
        }
        let start = self.pos.batch * self.batch_size;
        self.pos.batch += 1;
        self.order[start..start + self.batch_size].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_covers_each_epoch_and_resumes() {
        let mut s = BatchStream::new(10, 3, 5).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let pos = s.position();
        let next = s.next_indices();
        let mut t = BatchStream::new(10, 3, 5).unwrap();
        t.seek(pos);
        assert_eq!(t.next_indices(), next);
    }
}
