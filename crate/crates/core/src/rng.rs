//! Counter-based random numbers.
//!
//! A generator is addressed by `(seed, stream)`; within a stream the draw
//! index is the ChaCha word position, so any stream can be reproduced on any
//! thread without sharing state.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a list of identifiers into one stream id.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_0f_57_4ea3u64, |h, &p| splitmix(h ^ splitmix(p)))
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(
                &splitmix(seed ^ (i as u64).wrapping_mul(0xa076_1d64_78bd_642f)).to_le_bytes(),
            );
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Generator positioned at 32-bit word `word` of the stream.
    pub fn at(seed: u64, stream: u64, word: u128) -> Self {
        let mut s = Self::new(seed, stream);
        s.rng.set_word_pos(word);
        s
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box-Muller; draws come in pairs.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let th = 2.0 * math::PI * u2;
        self.spare = Some(r * math::sin(th));
        r * math::cos(th)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, self.normals(n)).expect("shape product matches")
    }
}

/// I.i.d. standard normals, deterministic in `(seed, stream)`.
pub fn rng_normal(shape: &[usize], stream: u64, seed: u64) -> Tensor {
    NormalStream::new(seed, stream).normal_tensor(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_normal_draws() {
        let n = 100_000;
        let x = rng_normal(&[n], 3, 42);
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn same_seed_and_stream_is_bitwise_identical() {
        let a = rng_normal(&[257], 9, 1234);
        let b = rng_normal(&[257], 9, 1234);
        let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = rng_normal(&[n], 1, 7);
        let b = rng_normal(&[n], 2, 7);
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na: f64 = a.data().iter().map(|x| x * x).sum();
        let nb: f64 = b.data().iter().map(|x| x * x).sum();
        let rho = dot / (na * nb).sqrt();
        assert!(rho.abs() < 0.02, "rho {rho}");
    }

    #[test]
    fn word_position_addresses_the_stream() {
        let mut full = NormalStream::new(5, 11);
        let _ = full.next_uniform();
        let second = full.next_uniform();
        let mut jumped = NormalStream::at(5, 11, 2);
        assert_eq!(jumped.next_uniform().to_bits(), second.to_bits());
    }

    #[test]
    fn uniform_range() {
        let mut s = NormalStream::new(0, 0);
        for _ in 0..10_000 {
            let u = s.next_uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(s.below(7) < 7);
        }
    }
}
