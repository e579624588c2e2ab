//! Deterministic top-k selection over scored items.
//!
//! Ties are broken by `(score, group, index)` ascending, so among equal scores
//! the earlier layer and lower flat index win in both directions.

use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f32,
    pub group: usize,
    pub index: usize,
}

impl Scored {
    pub fn new(score: f32, group: usize, index: usize) -> Self {
        Self { score, group, index }
    }
}

fn key_cmp(a: &Scored, b: &Scored, descending: bool) -> Ordering {
    let s = if descending {
        b.score.total_cmp(&a.score)
    } else {
        a.score.total_cmp(&b.score)
    };
    s.then(a.group.cmp(&b.group)).then(a.index.cmp(&b.index))
}

/// The `k` highest-scoring items, in selection order.
pub fn top_k(items: &[Scored], k: usize) -> Vec<Scored> {
    select(items, k, true)
}

/// The `k` lowest-scoring items, in selection order.
pub fn bottom_k(items: &[Scored], k: usize) -> Vec<Scored> {
    select(items, k, false)
}

fn select(items: &[Scored], k: usize, descending: bool) -> Vec<Scored> {
    let k = k.min(items.len());
    if k == 0 {
        return Vec::new();
    }
    let mut v: Vec<Scored> = items
        .iter()
        .map(|s| Scored {
            score: if s.score.is_nan() { f32::NEG_INFINITY } else { s.score },
            ..*s
        })
        .collect();
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| key_cmp(a, b, descending));
        v.truncate(k);
    }
    v.sort_by(|a, b| key_cmp(a, b, descending));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx(v: &[Scored]) -> Vec<usize> {
        v.iter().map(|s| s.index).collect()
    }

    #[test]
    fn bottom_two_by_magnitude() {
        let w = [0.9f32, -0.2, 0.1, 0.5];
        let items: Vec<_> = w.iter().enumerate().map(|(i, v)| Scored::new(v.abs(), 0, i)).collect();
        let mut got = idx(&bottom_k(&items, 2));
        got.sort();
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn top_two_by_magnitude() {
        let w = [0.01f32, 0.8, -0.9];
        let items: Vec<_> = w.iter().enumerate().map(|(i, v)| Scored::new(v.abs(), 0, i)).collect();
        assert_eq!(idx(&top_k(&items, 2)), vec![2, 1]);
    }

    #[test]
    fn ties_prefer_lower_group_then_index() {
        let items = vec![
            Scored::new(1.0, 1, 0),
            Scored::new(1.0, 0, 5),
            Scored::new(1.0, 0, 2),
        ];
        assert_eq!(top_k(&items, 2), vec![items[2], items[1]]);
        assert_eq!(bottom_k(&items, 2), vec![items[2], items[1]]);
    }

    proptest! {
        #[test]
        fn matches_full_sort(scores in proptest::collection::vec(0u8..20, 1..300), k in 0usize..300) {
            let items: Vec<_> = scores.iter().enumerate()
                .map(|(i, &s)| Scored::new(s as f32, i % 3, i)).collect();
            let mut sorted = items.clone();
            sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.group.cmp(&b.group)).then(a.index.cmp(&b.index)));
            let k = k.min(items.len());
            prop_assert_eq!(bottom_k(&items, k), sorted[..k].to_vec());
        }
    }
}
