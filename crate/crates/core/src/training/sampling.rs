use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::graph::InteractionSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BprTriple {
    pub u: usize,
    pub i: usize,
    pub j: usize,
}

/// Positive lookup for rejection sampling.
pub struct PositiveIndex {
    num_items: usize,
    by_user: Vec<Vec<usize>>,
    positives: Vec<(usize, usize)>,
}

impl PositiveIndex {
    pub fn new(train: &InteractionSet) -> Self {
        let by_user = train.positive_items_by_user();
        let positives = train.positives().map(|r| (r.user, r.item)).collect();
        Self {
            num_items: train.num_items(),
            by_user,
            positives,
        }
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.by_user[user].binary_search(&item).is_ok()
    }

    /// Whether the user has at least one item left to use as a negative.
    pub fn has_negatives(&self, user: usize) -> bool {
        self.by_user[user].len() < self.num_items
    }

    /// Uniform draw over the user's non-interacted items.
    pub fn sample_negative(&self, user: usize, rng: &mut Rng) -> Option<usize> {
        if !self.has_negatives(user) {
            return None;
        }
        let items = &self.by_user[user];
        // Dense users make rejection slow; pick by rank among the complement instead.
        if items.len() * 2 > self.num_items {
            let mut r = rng.random_range(0..self.num_items - items.len());
            for &p in items {
                if p <= r {
                    r += 1;
                } else {
                    break;
                }
            }
            return Some(r);
        }
        loop {
            let j = rng.random_range(0..self.num_items);
            if !self.contains(user, j) {
                return Some(j);
            }
        }
    }

    pub fn sample_positive(&self, rng: &mut Rng) -> (usize, usize) {
        self.positives[rng.random_range(0..self.positives.len())]
    }
}

/// Triples drawn from the training positives plus the count of draws skipped
/// because the user had interacted with every item.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sampled {
    pub triples: Vec<BprTriple>,
    pub skipped: usize,
}

/// `n` draws: a uniform training positive `(u, i)` and a uniform item `j` the user
/// has not interacted with.
pub fn sample_triples(train: &InteractionSet, n: usize, rng: &mut Rng) -> Sampled {
    sample_with_index(&PositiveIndex::new(train), n, rng)
}

pub fn sample_with_index(index: &PositiveIndex, n: usize, rng: &mut Rng) -> Sampled {
    let mut out = Sampled::default();
    if index.num_positives() == 0 {
        return out;
    }
    out.triples.reserve(n);
    for _ in 0..n {
        let (u, i) = index.sample_positive(rng);
        match index.sample_negative(u, rng) {
            Some(j) => out.triples.push(BprTriple { u, i, j }),
            None => out.skipped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Interaction;
    use crate::rng::{self, Stream};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn set(pairs: &[(usize, usize)], nu: usize, ni: usize) -> InteractionSet {
        InteractionSet::new(pairs.iter().map(|&(u, i)| Interaction::positive(u, i)).collect(), nu, ni).unwrap()
    }

    #[test]
    fn forced_negative() {
        let train = set(&[(0, 0), (0, 1), (0, 3)], 1, 4);
        let mut rng = rng::stream(1, Stream::Sampling);
        let s = sample_triples(&train, 50, &mut rng);
        assert_eq!(s.triples.len(), 50);
        assert!(s.triples.iter().all(|t| t.j == 2));
    }

    #[test]
    fn saturated_users_are_skipped() {
        let train = set(&[(0, 0), (0, 1), (1, 0)], 2, 2);
        let mut rng = rng::stream(2, Stream::Sampling);
        let s = sample_triples(&train, 300, &mut rng);
        assert_eq!(s.triples.len() + s.skipped, 300);
        assert!(s.skipped > 0);
        assert!(s.triples.iter().all(|t| t.u == 1 && t.j == 1));
    }

    #[test]
    fn membership_invariants() {
        let mut rng = rng::stream(3, Stream::Sampling);
        let mut pairs = Vec::new();
        for u in 0..20 {
            for i in 0..30 {
                if (u * 31 + i * 17) % 7 < 3 {
                    pairs.push((u, i));
                }
            }
        }
        let train = set(&pairs, 20, 30);
        let idx = PositiveIndex::new(&train);
        let s = sample_with_index(&idx, 2000, &mut rng);
        for t in &s.triples {
            assert!(idx.contains(t.u, t.i));
            assert!(!idx.contains(t.u, t.j));
        }
    }

    #[test]
    fn negatives_are_uniform() {
        // user 0 owns item 0; negatives range over items 1..5
        for dense in [false, true] {
            let pairs: Vec<_> = if dense { vec![(0, 0), (1, 0), (1, 1), (1, 2), (1, 3)] } else { vec![(0, 0)] };
            let train = set(&pairs, 2, 5);
            let idx = PositiveIndex::new(&train);
            let mut rng = rng::stream(4, Stream::Sampling);
            let mut counts = [0usize; 5];
            let mut n = 0;
            while n < 10_000 {
                if let Some(j) = idx.sample_negative(0, &mut rng) {
                    counts[j] += 1;
                    n += 1;
                }
            }
            assert_eq!(counts[0], 0);
            let expect = 10_000.0 / 4.0;
            let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
            let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
            assert!(p > 0.01, "chi2 {chi2}, p {p}");
        }
    }

    #[test]
    fn dense_user_complement_sampling() {
        let train = set(&[(0, 0), (0, 1), (0, 3), (0, 4)], 1, 6);
        let idx = PositiveIndex::new(&train);
        let mut rng = rng::stream(5, Stream::Sampling);
        for _ in 0..200 {
            let j = idx.sample_negative(0, &mut rng).unwrap();
            assert!(j == 2 || j == 5);
        }
    }
}
