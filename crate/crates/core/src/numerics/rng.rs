//! Seeded random streams.
//!
//! A [`PrngStream`] wraps ChaCha8, a counter-based generator: the state is the
//! 64-bit seed plus a word position, so a stream is fully described by
//! `(seed, counter)`. Streams are single-owner; use [`PrngStream::fork`] to
//! hand an independent stream to another component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct PrngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl PrngStream {
    pub fn new(seed: u64) -> Self {
        PrngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// An independent stream keyed by `(seed, stream_id)`. Does not advance `self`.
    pub fn fork(&self, stream_id: u64) -> PrngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id.wrapping_add(1));
        PrngStream {
            seed: self.seed,
            rng,
        }
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("std validated by caller")
            .sample(&mut self.rng)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl Distribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && high > low,
            Distribution::Normal { mean, std } => mean.is_finite() && std.is_finite() && std > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution {self:?}")))
        }
    }
}

/// Fills a tensor of `shape` with draws from `dist`, advancing `stream`.
pub fn prng_fill<T: Real>(
    stream: &mut PrngStream,
    shape: &[usize],
    dist: Distribution,
) -> Result<Tensor<T>> {
    dist.validate()?;
    let n: usize = shape.iter().product();
    let data = match dist {
        Distribution::Uniform { low, high } => (0..n)
            .map(|_| T::of(stream.uniform(low, high)))
            .collect(),
        Distribution::Normal { mean, std } => {
            let normal = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n)
                .map(|_| T::of(normal.sample(&mut stream.rng)))
                .collect()
        }
    };
    Ok(Tensor::from_raw(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let d = Distribution::Normal { mean: 0.0, std: 1.0 };
        let a: Tensor = prng_fill(&mut PrngStream::new(3), &[4, 5], d).unwrap();
        let b: Tensor = prng_fill(&mut PrngStream::new(3), &[4, 5], d).unwrap();
        assert_eq!(a, b);
        let c: Tensor = prng_fill(&mut PrngStream::new(4), &[4, 5], d).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_mean() {
        let t: Tensor = prng_fill(
            &mut PrngStream::new(11),
            &[100_000],
            Distribution::Uniform { low: 0.0, high: 1.0 },
        )
        .unwrap();
        let mean = t.data().iter().sum::<f64>() / 1e5;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn normal_variance() {
        let t: Tensor = prng_fill(
            &mut PrngStream::new(12),
            &[100_000],
            Distribution::Normal { mean: 0.0, std: 1.0 },
        )
        .unwrap();
        let mean = t.data().iter().sum::<f64>() / 1e5;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e5;
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn invalid_params_rejected() {
        let mut s = PrngStream::new(0);
        assert!(prng_fill::<f64>(&mut s, &[2], Distribution::Uniform { low: 1.0, high: 1.0 }).is_err());
        assert!(prng_fill::<f64>(&mut s, &[2], Distribution::Normal { mean: 0.0, std: 0.0 }).is_err());
    }

    #[test]
    fn counter_advances_and_forks_are_independent() {
        let mut s = PrngStream::new(5);
        assert_eq!(s.counter(), 0);
        let f1 = s.fork(1).uniform(0.0, 1.0);
        assert_eq!(s.counter(), 0);
        let x = s.uniform(0.0, 1.0);
        assert!(s.counter() > 0);
        assert_ne!(x, f1);
        assert_eq!(s.fork(1).uniform(0.0, 1.0), f1);
    }
}
