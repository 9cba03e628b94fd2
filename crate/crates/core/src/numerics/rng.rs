//! Named, seed-derived random streams.
//!
//! Every consumer asks for a stream by name (`"init"`, `"episodes"`,
//! `"dropout"`, ...). Streams come from ChaCha8 keyed by the run seed with the
//! stream id set from a stable hash of the name, so stages never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stable_hash(name.as_bytes()));
        rng
    }

    /// Stream for the `index`-th repetition of a named stage.
    pub fn indexed(&self, name: &str, index: u64) -> StreamRng {
        self.stream(&format!("{name}#{index}"))
    }
}

/// Xavier/Glorot uniform `fan_in × fan_out` matrix, entries in `±sqrt(6/(fan_in+fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "xavier_uniform needs non-zero fans, got {fan_in}x{fan_out}"
        )));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Deterministic pseudo-random unit vector derived from a string key.
pub fn hashed_unit_vector(key: &str, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(key.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_streams_are_independent_and_reproducible() {
        let tree = SeedTree::new(42);
        let mut s1 = tree.stream("init");
        let mut s2 = tree.stream("init");
        let mut s3 = tree.stream("episodes");
        let x1: u64 = s1.random();
        assert_eq!(x1, s2.random::<u64>());
        assert_ne!(x1, s3.random::<u64>());
        assert_ne!(tree.indexed("init", 1).random::<u64>(), x1);
    }

    #[test]
    fn xavier_bound_three_by_three() {
        let mut rng = SeedTree::new(42).stream("init");
        let w = xavier_uniform(&mut rng, 3, 3).unwrap();
        assert!(w.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_eq!(w.shape(), &[3, 3]);
    }

    #[test]
    fn xavier_deterministic_and_rejects_zero_fan() {
        let tree = SeedTree::new(7);
        let a = xavier_uniform(&mut tree.stream("w"), 4, 5).unwrap();
        let b = xavier_uniform(&mut tree.stream("w"), 4, 5).unwrap();
        assert_eq!(a, b);
        assert!(xavier_uniform(&mut tree.stream("w"), 0, 5).is_err());
    }

    #[test]
    fn xavier_monte_carlo_mean_near_zero() {
        let mut rng = SeedTree::new(42).stream("mc");
        let w = xavier_uniform(&mut rng, 100, 1000).unwrap();
        let mean = w.sum() / w.len() as f64;
        let bound = (6.0f64 / 1100.0).sqrt();
        // normalised to a unit bound so the ±0.01 tolerance is scale-free
        assert!((mean / bound).abs() < 0.01, "{mean}");
    }

    #[test]
    fn hashed_vectors_are_unit_and_stable() {
        let a = hashed_unit_vector("xyzzy", 300);
        let b = hashed_unit_vector("xyzzy", 300);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
