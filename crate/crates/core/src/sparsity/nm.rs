//! N:M masks: `n` inactive entries in every `m` contiguous entries of a row.

use crate::error::{Error, Result};
use crate::select::{bottom_k, Scored};

/// Mask for a row-major tensor whose rows have length `row_len`. Within each
/// complete group the `n` lowest-importance entries are switched off; a
/// trailing partial group is left fully active.
pub fn apply_nm_mask(importance: &[f32], row_len: usize, n: usize, m: usize) -> Result<Vec<bool>> {
    if m == 0 || n >= m {
        return Err(Error::InvalidPlan(format!("n_of_m needs n < m, got {n}:{m}")));
    }
    if row_len == 0 || importance.len() % row_len != 0 {
        return Err(Error::shape("n_of_m rows", &[row_len], &[importance.len()]));
    }
    let mut mask = vec![true; importance.len()];
    for row in 0..importance.len() / row_len {
        for g in 0..row_len / m {
            let start = row * row_len + g * m;
            let items: Vec<Scored> = (0..m)
                .map(|k| Scored::new(importance[start + k], 0, k))
                .collect();
            for s in bottom_k(&items, n) {
                mask[start + s.index] = false;
            }
        }
    }
    Ok(mask)
}

/// Whether every complete group of `mask` has exactly `m - n` active entries.
pub fn satisfies_nm(mask: &[bool], row_len: usize, n: usize, m: usize) -> bool {
    mask.chunks(row_len).all(|row| {
        row.chunks(m)
            .filter(|g| g.len() == m)
            .all(|g| g.iter().filter(|&&b| b).count() == m - n)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_n_keeps_everything() {
        assert!(apply_nm_mask(&[1.0, 2.0, 3.0, 4.0], 4, 0, 4).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn two_of_four_by_magnitude() {
        let w = [0.9f32, 0.1, -0.5, 0.2];
        let imp: Vec<f32> = w.iter().map(|v| v.abs()).collect();
        assert_eq!(apply_nm_mask(&imp, 4, 2, 4).unwrap(), vec![true, false, true, false]);
    }

    #[test]
    fn random_matrix_has_half_density() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0f32).abs()).collect();
        let mask = apply_nm_mask(&w, 8, 2, 4).unwrap();
        for group in mask.chunks(4) {
            assert_eq!(group.iter().filter(|&&b| b).count(), 2);
        }
        assert_eq!(mask.iter().filter(|&&b| b).count(), 32);
        assert!(satisfies_nm(&mask, 8, 2, 4));
    }

    #[test]
    fn trailing_group_is_unconstrained() {
        let mask = apply_nm_mask(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6, 1, 4).unwrap();
        assert_eq!(mask, vec![false, true, true, true, true, true]);
    }

    #[test]
    fn n_equal_m_is_invalid() {
        assert!(apply_nm_mask(&[1.0; 4], 4, 4, 4).is_err());
    }
}
