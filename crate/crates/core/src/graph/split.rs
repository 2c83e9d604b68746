use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::interactions::{Interaction, InteractionSet};
use crate::error::{GcrError, Result};
use crate::rng::{self, Stream};

/// Train / validation / test fractions plus the seed that drives the shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.65, 0.15, 0.20],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self> {
        let spec = Self { ratios, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0 || *r > 1.0) {
            return Err(GcrError::Config(format!(
                "split ratios must lie in [0, 1], got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GcrError::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
}

/// Per-user stratified random partition.
///
/// Users are visited in a shuffled order and each user's records are shuffled.
/// Split boundaries are rounded on running record counts, so each user receives
/// within one record of their exact share. Globally the training split has
/// exactly `round(r_train * n)` records; the rest are divided between validation
/// and test the same way, in proportion `r_val : r_test`.
pub fn split_interactions(interactions: &InteractionSet, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Split);

    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); interactions.num_users()];
    for r in interactions.records() {
        per_user[r.user].push(*r);
    }
    let mut users: Vec<usize> = (0..per_user.len()).filter(|&u| !per_user[u].is_empty()).collect();
    users.shuffle(&mut rng);

    let first = spec.ratios[0];
    let rest = spec.ratios[1] + spec.ratios[2];
    let second = if rest > 0.0 { spec.ratios[1] / rest } else { 0.0 };
    let boundary = |frac: f64, count: usize| -> usize { (frac * count as f64).round() as usize };

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let (mut seen, mut seen_rest) = (0usize, 0usize);
    for u in users {
        let records = &mut per_user[u];
        records.sort_unstable_by_key(|r| r.item);
        records.shuffle(&mut rng);
        let before = seen;
        seen += records.len();
        let n_train = boundary(first, seen) - boundary(first, before);
        let before_rest = seen_rest;
        seen_rest += records.len() - n_train;
        let n_val = boundary(second, seen_rest) - boundary(second, before_rest);
        for (k, r) in records.iter().enumerate() {
            if k < n_train {
                train.push(*r);
            } else if k < n_train + n_val {
                validation.push(*r);
            } else {
                test.push(*r);
            }
        }
    }
    let (nu, ni) = (interactions.num_users(), interactions.num_items());
    Ok(Splits {
        train: InteractionSet::new(train, nu, ni)?,
        validation: InteractionSet::new(validation, nu, ni)?,
        test: InteractionSet::new(test, nu, ni)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dataset(users: usize, per_user: usize) -> InteractionSet {
        let mut records = Vec::new();
        for u in 0..users {
            for k in 0..per_user {
                records.push(Interaction::positive(u, (u * 7 + k) % 101));
            }
        }
        InteractionSet::new(records, users, 101).unwrap()
    }

    #[test]
    fn sizes_follow_ratios() {
        for seed in 0..5 {
            for (users, per_user) in [(1, 100), (10, 10), (50, 2), (100, 1)] {
                let data = dataset(users, per_user);
                let s = split_interactions(&data, &SplitSpec::new([0.65, 0.15, 0.20], seed).unwrap())
                    .unwrap();
                assert_eq!(s.train.len(), 65);
                assert_eq!(s.validation.len(), 15);
                assert_eq!(s.test.len(), 20);
            }
        }
    }

    #[test]
    fn per_user_shares_are_within_one() {
        let data = dataset(30, 13);
        let s = split_interactions(&data, &SplitSpec::new([0.65, 0.15, 0.2], 3).unwrap()).unwrap();
        let count = |set: &InteractionSet, u: usize| set.records().iter().filter(|r| r.user == u).count();
        for u in 0..30 {
            let t = count(&s.train, u) as f64;
            assert!((t - 0.65 * 13.0).abs() <= 1.0, "user {u}: {t}");
            let te = count(&s.test, u) as f64;
            assert!((te - 0.2 * 13.0).abs() <= 1.5, "user {u}: {te}");
        }
    }

    #[test]
    fn all_train() {
        let data = dataset(7, 5);
        let s = split_interactions(&data, &SplitSpec::new([1.0, 0.0, 0.0], 1).unwrap()).unwrap();
        assert_eq!(s.train.len(), 35);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn deterministic_and_partitioning() {
        let data = dataset(20, 9);
        let spec = SplitSpec::new([0.65, 0.15, 0.2], 42).unwrap();
        let a = split_interactions(&data, &spec).unwrap();
        let b = split_interactions(&data, &spec).unwrap();
        assert_eq!(a, b);
        let c = split_interactions(&data, &SplitSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.train, c.train);

        let mut all: Vec<_> = a.train.records().to_vec();
        all.extend_from_slice(a.validation.records());
        all.extend_from_slice(a.test.records());
        assert_eq!(all.len(), data.len());
        let got: HashSet<_> = all.into_iter().collect();
        let want: HashSet<_> = data.records().iter().copied().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn invalid_ratios() {
        assert!(SplitSpec::new([0.5, 0.5, 0.5], 0).is_err());
        assert!(SplitSpec::new([1.2, -0.1, -0.1], 0).is_err());
        assert!(SplitSpec::new([f64::NAN, 0.5, 0.5], 0).is_err());
    }
}
