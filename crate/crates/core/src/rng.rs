//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own ChaCha stream so that
/// perturbing one component never shifts the draws seen by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Sampling = 3,
    Dropout = 4,
    Synth = 5,
    Eval = 6,
    HopCap = 7,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream(5, Stream::Split).random();
        let b: u64 = stream(5, Stream::Init).random();
        let c: u64 = stream(5, Stream::Split).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
