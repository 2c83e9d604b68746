//! Planted block-structure interaction data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};
use crate::graph::{IdMap, Interaction, InteractionSet, LoadedInteractions};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub blocks: usize,
    pub users_per_block: usize,
    pub items_per_block: usize,
    pub p_in: f64,
    pub p_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            blocks: 8,
            users_per_block: 40,
            items_per_block: 40,
            p_in: 0.3,
            p_noise: 0.005,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_noise", self.p_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GcrError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.blocks == 0 || self.users_per_block == 0 || self.items_per_block == 0 {
            return Err(GcrError::Config("block counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.blocks * self.users_per_block
    }

    pub fn num_items(&self) -> usize {
        self.blocks * self.items_per_block
    }

    pub fn user_block(&self, user: usize) -> usize {
        user / self.users_per_block
    }

    pub fn item_block(&self, item: usize) -> usize {
        item / self.items_per_block
    }

    /// Expected number of in-block and out-of-block edges.
    pub fn expected_edges(&self) -> (f64, f64) {
        let b = self.blocks as f64;
        let (u, i) = (self.users_per_block as f64, self.items_per_block as f64);
        (b * u * i * self.p_in, b * u * i * (b - 1.0) * self.p_noise)
    }
}

/// User `u` in block `u / users_per_block` links to each in-block item with
/// probability `p_in` and to each other item with probability `p_noise`.
/// Raw ids are `u{n}` and `i{n}`; dense ids equal `n`.
pub fn generate(spec: &SynthSpec) -> Result<LoadedInteractions> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synth);
    let (nu, ni) = (spec.num_users(), spec.num_items());
    let mut records = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            let p = if spec.user_block(u) == spec.item_block(i) { spec.p_in } else { spec.p_noise };
            if rng.random_bool(p) {
                records.push(Interaction::positive(u, i));
            }
        }
    }
    let ids = IdMap::from_names(
        (0..nu).map(|u| format!("u{u}")).collect(),
        (0..ni).map(|i| format!("i{i}")).collect(),
    )?;
    Ok(LoadedInteractions {
        interactions: InteractionSet::new(records, nu, ni)?,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_in_block_no_noise() {
        let spec = SynthSpec { blocks: 3, users_per_block: 4, items_per_block: 5, p_in: 1.0, p_noise: 0.0, seed: 1 };
        let d = generate(&spec).unwrap();
        assert_eq!(d.interactions.len(), 3 * 4 * 5);
        assert!(d.interactions.records().iter().all(|r| spec.user_block(r.user) == spec.item_block(r.item)));
    }

    #[test]
    fn empty_when_all_probabilities_zero() {
        let spec = SynthSpec { p_in: 0.0, p_noise: 0.0, ..SynthSpec::default() };
        assert!(generate(&spec).unwrap().interactions.is_empty());
    }

    #[test]
    fn counts_follow_binomial_expectation() {
        let spec = SynthSpec::default();
        let d = generate(&spec).unwrap();
        let inside = d.interactions.records().iter().filter(|r| spec.user_block(r.user) == spec.item_block(r.item)).count();
        let outside = d.interactions.len() - inside;
        let (ei, eo) = spec.expected_edges();
        let sd_in = (ei * (1.0 - spec.p_in)).sqrt();
        let sd_out = (eo * (1.0 - spec.p_noise)).sqrt();
        assert!((inside as f64 - ei).abs() < 3.0 * sd_in, "{inside} vs {ei}");
        assert!((outside as f64 - eo).abs() < 3.0 * sd_out, "{outside} vs {eo}");
    }

    #[test]
    fn deterministic_and_validated() {
        let spec = SynthSpec { seed: 11, ..SynthSpec::default() };
        assert_eq!(generate(&spec).unwrap().interactions, generate(&spec).unwrap().interactions);
        assert!(generate(&SynthSpec { p_in: 1.5, ..spec }).is_err());
        assert!(generate(&SynthSpec { blocks: 0, ..spec }).is_err());
    }
}
