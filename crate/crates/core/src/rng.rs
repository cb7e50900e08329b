//! Counter-based seeded randomness.
//!
//! Every random decision in the system (data generation, init, sampling,
//! dropout, augmentation, MC passes, splits) draws from its own named stream
//! of one ChaCha8 generator, so identical `(seed, stream, counter)` always
//! reproduces identical draws regardless of what other components consumed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tag packed into the high bits of a stream id; keeps independently
/// seeded subsystems from ever sharing a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum Domain {
    Data = 1,
    Init = 2,
    Sampler = 3,
    Dropout = 4,
    Augment = 5,
    Mc = 6,
    Split = 7,
}

/// Stream id layout: `domain << 48 | b << 32 | a`.
pub fn stream_id(domain: Domain, a: u32, b: u16) -> u64 {
    ((domain as u64) << 48) | ((b as u64) << 32) | (a as u64)
}

/// One independent, positionable random sequence.
///
/// The counter is the ChaCha word position: one `u32` draw advances it by 1,
/// a `u64`/uniform by 2, a normal by 4.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Reconstruct a stream at an exact counter position.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream);
        s.set_counter(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn set_counter(&mut self, counter: u64) {
        self.rng.set_word_pos(counter as u128);
    }

    pub fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
    pub fn below(&mut self, n: u32) -> u32 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u32
    }

    /// Standard normal via Box-Muller (fixed draw count: 2 uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.normal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_draws() {
        let mut a = RngStream::new(7, stream_id(Domain::Data, 3, 0));
        let mut b = RngStream::new(7, stream_id(Domain::Data, 3, 0));
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStream::new(7, stream_id(Domain::Data, 0, 0));
        let mut b = RngStream::new(7, stream_id(Domain::Data, 1, 0));
        let equal = (0..64).filter(|_| a.next_u32() == b.next_u32()).count();
        assert!(equal < 4, "streams look correlated: {equal}/64 equal draws");
    }

    #[test]
    fn counter_resumes_exactly() {
        let mut a = RngStream::new(42, stream_id(Domain::Dropout, 9, 2));
        for _ in 0..13 {
            a.next_u32();
        }
        let pos = a.counter();
        let tail: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        let mut b = RngStream::at(42, stream_id(Domain::Dropout, 9, 2), pos);
        let tail2: Vec<u64> = (0..10).map(|_| b.next_u64()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn uniform_range_and_moments() {
        let mut r = RngStream::new(1, stream_id(Domain::Data, 0, 0));
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(3, stream_id(Domain::Data, 1, 0));
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn below_is_unbiasedish() {
        let mut r = RngStream::new(5, stream_id(Domain::Sampler, 0, 0));
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[r.below(3) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05);
        }
    }
}
